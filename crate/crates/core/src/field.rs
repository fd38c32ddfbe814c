//! B₀ off-resonance maps: low-order harmonic band-limiting, controlled
//! perturbation of the higher orders, and analytic dipole phantoms.
//!
//! The harmonic basis is the set of 2D monomials `x^i y^j` with
//! `i + j <= L`, evaluated on coordinates normalized to [-1, 1]. Restricted
//! to a plane, solid harmonics up to order `L` span the same space.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imgio::{Geometry, Image2D, ImageKind};
use crate::linalg;

/// Default magnitude cap for synthesized fields, Hz.
pub const DEFAULT_CAP_HZ: f64 = 3000.0;

/// Radius (px) below which the dipole kernel is clamped.
pub const DIPOLE_CLAMP_RADIUS: f64 = 2.0;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("fit of order {order} needs {needed} pixels, only {available} available")]
    Underdetermined {
        order: usize,
        needed: usize,
        available: usize,
    },
    #[error("mask leaves a rank-deficient fit (pixels collinear or clustered)")]
    DegenerateMask,
    #[error("invalid scale range [{0}, {1}]: need 0 <= lo <= hi <= 4")]
    InvalidScaleRange(f64, f64),
    #[error("low_keep_order {keep} exceeds max_order {max}")]
    InvalidKeepOrder { keep: usize, max: usize },
    #[error("expected {expected} coefficients for order {order}, got {actual}")]
    CoeffCount {
        order: usize,
        expected: usize,
        actual: usize,
    },
    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),
    #[error("expected an image of kind {expected}, got {actual}")]
    WrongKind {
        expected: ImageKind,
        actual: ImageKind,
    },
    #[error("dipole spec needs at least one centre")]
    NoDipoles,
    #[error("dipole spec: {0}")]
    InvalidDipole(String),
}

pub type Result<T, E = FieldError> = std::result::Result<T, E>;

/// Off-resonance in Hz, one value per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldMapHz(Image2D);

impl FieldMapHz {
    pub fn new(img: Image2D) -> Result<Self> {
        if img.kind() != ImageKind::FieldHz {
            return Err(FieldError::WrongKind {
                expected: ImageKind::FieldHz,
                actual: img.kind(),
            });
        }
        Ok(FieldMapHz(img))
    }

    pub fn zeros(geometry: Geometry) -> Self {
        FieldMapHz(Image2D::zeros(geometry, ImageKind::FieldHz))
    }

    pub fn from_values(geometry: Geometry, values: &[f64]) -> Self {
        let px = values.iter().map(|&v| v as f32).collect();
        FieldMapHz(Image2D::new(geometry, ImageKind::FieldHz, px).expect("length matches geometry"))
    }

    pub fn image(&self) -> &Image2D {
        &self.0
    }

    pub fn into_image(self) -> Image2D {
        self.0
    }

    pub fn geometry(&self) -> Geometry {
        self.0.geometry()
    }

    pub fn values(&self) -> &[f32] {
        self.0.pixels()
    }

    pub fn max_abs(&self) -> f64 {
        self.0
            .pixels()
            .iter()
            .fold(0.0f64, |m, &v| m.max((v as f64).abs()))
    }

    pub fn scaled(&self, s: f64) -> FieldMapHz {
        let mut img = self.0.clone();
        img.pixels_mut()
            .iter_mut()
            .for_each(|v| *v = (*v as f64 * s) as f32);
        FieldMapHz(img)
    }

    /// Clamps every value into `[-cap, cap]`.
    pub fn clamp_magnitude(&mut self, cap: f64) {
        let cap = cap as f32;
        self.0
            .pixels_mut()
            .iter_mut()
            .for_each(|v| *v = v.clamp(-cap, cap));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HarmonicBasis {
    #[default]
    Polynomial2d,
}

/// Coefficients of a total-order-bounded harmonic expansion.
///
/// Ordered by total order `n = 0..=L`; within order `n`, term `k = 0..=n`
/// is `x^(n-k) y^k`, where `x` follows columns and `y` follows rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarmonicCoeffs {
    pub max_order: usize,
    pub coeffs: Vec<f64>,
    #[serde(default)]
    pub basis: HarmonicBasis,
}

/// `(L+1)(L+2)/2`.
pub fn basis_len(order: usize) -> usize {
    (order + 1) * (order + 2) / 2
}

/// Exponents `(i, j)` of `x^i y^j` for every basis term, in coefficient order.
pub fn basis_exponents(order: usize) -> Vec<(usize, usize)> {
    (0..=order)
        .flat_map(|n| (0..=n).map(move |k| (n - k, k)))
        .collect()
}

/// Total order of the coefficient at `index`.
pub fn order_of(index: usize) -> usize {
    let mut n = 0;
    while basis_len(n) <= index {
        n += 1;
    }
    n
}

/// Normalized coordinate of pixel `i` on an axis of length `len`.
pub fn normalized_coord(i: usize, len: usize) -> f64 {
    if len > 1 {
        2.0 * i as f64 / (len - 1) as f64 - 1.0
    } else {
        0.0
    }
}

fn basis_row(x: f64, y: f64, exps: &[(usize, usize)], out: &mut [f64]) {
    for (o, &(i, j)) in out.iter_mut().zip(exps) {
        *o = x.powi(i as i32) * y.powi(j as i32);
    }
}

impl HarmonicCoeffs {
    pub fn zeros(max_order: usize) -> Self {
        HarmonicCoeffs {
            max_order,
            coeffs: vec![0.0; basis_len(max_order)],
            basis: HarmonicBasis::Polynomial2d,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let expected = basis_len(self.max_order);
        if self.coeffs.len() != expected {
            return Err(FieldError::CoeffCount {
                order: self.max_order,
                expected,
                actual: self.coeffs.len(),
            });
        }
        Ok(())
    }

    /// Evaluates the expansion on `geometry` (values in f64, row-major).
    pub fn evaluate_values(&self, geometry: Geometry) -> Vec<f64> {
        let exps = basis_exponents(self.max_order);
        let mut row = vec![0.0; exps.len()];
        let mut out = Vec::with_capacity(geometry.len());
        for r in 0..geometry.height {
            let y = normalized_coord(r, geometry.height);
            for c in 0..geometry.width {
                let x = normalized_coord(c, geometry.width);
                basis_row(x, y, &exps, &mut row);
                out.push(row.iter().zip(&self.coeffs).map(|(b, a)| a * b).sum());
            }
        }
        out
    }

    pub fn evaluate(&self, geometry: Geometry) -> FieldMapHz {
        FieldMapHz::from_values(geometry, &self.evaluate_values(geometry))
    }
}

/// Least-squares fit of the harmonic basis of order `order` over the pixels
/// where `mask` is 1 (all pixels when `mask` is `None`).
pub fn fit_harmonic(
    field: &FieldMapHz,
    order: usize,
    mask: Option<&Image2D>,
) -> Result<HarmonicCoeffs> {
    let g = field.geometry();
    if let Some(m) = mask {
        if !m.same_shape(field.image()) {
            return Err(FieldError::GeometryMismatch(
                "mask and field differ in size".into(),
            ));
        }
    }
    let exps = basis_exponents(order);
    let cols = exps.len();
    let mut a = Vec::new();
    let mut b = Vec::new();
    let mut row = vec![0.0; cols];
    for r in 0..g.height {
        let y = normalized_coord(r, g.height);
        for c in 0..g.width {
            if let Some(m) = mask {
                if m.get(r, c) == 0.0 {
                    continue;
                }
            }
            let x = normalized_coord(c, g.width);
            basis_row(x, y, &exps, &mut row);
            a.extend_from_slice(&row);
            b.push(field.image().get(r, c) as f64);
        }
    }
    let rows = b.len();
    if rows < cols {
        return Err(FieldError::Underdetermined {
            order,
            needed: cols,
            available: rows,
        });
    }
    let coeffs = linalg::lstsq_qr(&a, rows, cols, &b).ok_or(FieldError::DegenerateMask)?;
    Ok(HarmonicCoeffs {
        max_order: order,
        coeffs,
        basis: HarmonicBasis::Polynomial2d,
    })
}

/// `field - evaluate(coeffs)`, the part the expansion does not capture.
pub fn harmonic_residual(field: &FieldMapHz, coeffs: &HarmonicCoeffs) -> FieldMapHz {
    let fit = coeffs.evaluate_values(field.geometry());
    let vals: Vec<f64> = field
        .values()
        .iter()
        .zip(&fit)
        .map(|(&f, &p)| f as f64 - p)
        .collect();
    FieldMapHz::from_values(field.geometry(), &vals)
}

/// Controls for [`synthesize_field`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Perturbation {
    /// Orders `<= low_keep_order` are reproduced unchanged.
    pub low_keep_order: usize,
    /// Uniform range of the random scale applied to each higher-order
    /// coefficient and to the residual.
    pub hi_scale_range: (f64, f64),
    pub seed: u64,
    pub cap_hz: f64,
}

impl Default for Perturbation {
    fn default() -> Self {
        Perturbation {
            low_keep_order: 2,
            hi_scale_range: (0.5, 2.0),
            seed: 0,
            cap_hz: DEFAULT_CAP_HZ,
        }
    }
}

/// Rebuilds a field from its expansion and residual with the higher orders
/// randomly rescaled.
pub fn synthesize_field(
    coeffs: &HarmonicCoeffs,
    residual: &FieldMapHz,
    perturb: &Perturbation,
) -> Result<FieldMapHz> {
    coeffs.validate()?;
    let (lo, hi) = perturb.hi_scale_range;
    if !(lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi && hi <= 4.0) {
        return Err(FieldError::InvalidScaleRange(lo, hi));
    }
    if perturb.low_keep_order > coeffs.max_order {
        return Err(FieldError::InvalidKeepOrder {
            keep: perturb.low_keep_order,
            max: coeffs.max_order,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(perturb.seed);
    let mut draw = || rng.random_range(lo..=hi);
    let scaled: Vec<f64> = coeffs
        .coeffs
        .iter()
        .enumerate()
        .map(|(k, &a)| {
            if order_of(k) > perturb.low_keep_order {
                a * draw()
            } else {
                a
            }
        })
        .collect();
    let residual_scale = draw();
    let perturbed = HarmonicCoeffs {
        coeffs: scaled,
        ..coeffs.clone()
    };
    let base = perturbed.evaluate_values(residual.geometry());
    let vals: Vec<f64> = base
        .iter()
        .zip(residual.values())
        .map(|(&b, &r)| b + residual_scale * r as f64)
        .collect();
    let mut out = FieldMapHz::from_values(residual.geometry(), &vals);
    out.clamp_magnitude(perturb.cap_hz);
    Ok(out)
}

/// In-plane dipole sources standing in for metal implants or gas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DipoleSpec {
    /// (row, col) in pixels; may lie outside the grid.
    pub centers: Vec<(f64, f64)>,
    /// Strength of each source in Hz·px³.
    pub moments: Vec<f64>,
    /// Unit (row, col) axis of each source.
    pub orientations: Vec<(f64, f64)>,
    /// Linear background (Hz/px along rows, Hz/px along columns) about the
    /// grid centre.
    #[serde(default)]
    pub background_gradient: (f64, f64),
}

impl DipoleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.centers.is_empty() {
            return Err(FieldError::NoDipoles);
        }
        if self.moments.len() != self.centers.len() || self.orientations.len() != self.centers.len()
        {
            return Err(FieldError::InvalidDipole(format!(
                "{} centres, {} moments, {} orientations",
                self.centers.len(),
                self.moments.len(),
                self.orientations.len()
            )));
        }
        for (i, o) in self.orientations.iter().enumerate() {
            let n = (o.0 * o.0 + o.1 * o.1).sqrt();
            if !(n > 0.0 && n.is_finite()) {
                return Err(FieldError::InvalidDipole(format!(
                    "orientation {i} has zero length"
                )));
            }
        }
        Ok(())
    }

    pub fn scaled(&self, s: f64) -> DipoleSpec {
        DipoleSpec {
            moments: self.moments.iter().map(|m| m * s).collect(),
            background_gradient: (self.background_gradient.0 * s, self.background_gradient.1 * s),
            ..self.clone()
        }
    }
}

/// Sum of in-plane dipole kernels `m (3cos²θ - 1) / ρ³` plus a linear
/// background. Distances below [`DIPOLE_CLAMP_RADIUS`] use the kernel value
/// at that radius along the same direction.
pub fn dipole_phantom_field(spec: &DipoleSpec, geometry: Geometry) -> Result<FieldMapHz> {
    spec.validate()?;
    let cr = (geometry.height as f64 - 1.0) / 2.0;
    let cc = (geometry.width as f64 - 1.0) / 2.0;
    let (gr, gc) = spec.background_gradient;
    let units: Vec<(f64, f64)> = spec
        .orientations
        .iter()
        .map(|&(a, b)| {
            let n = (a * a + b * b).sqrt();
            (a / n, b / n)
        })
        .collect();
    let mut vals = Vec::with_capacity(geometry.len());
    for r in 0..geometry.height {
        for c in 0..geometry.width {
            let mut f = gr * (r as f64 - cr) + gc * (c as f64 - cc);
            for ((&(pr, pc), &m), &(or, oc)) in spec.centers.iter().zip(&spec.moments).zip(&units) {
                let (mut dr, mut dc) = (r as f64 - pr, c as f64 - pc);
                let mut rho = (dr * dr + dc * dc).sqrt();
                if rho < DIPOLE_CLAMP_RADIUS {
                    if rho > 0.0 {
                        dr *= DIPOLE_CLAMP_RADIUS / rho;
                        dc *= DIPOLE_CLAMP_RADIUS / rho;
                    } else {
                        dr = or * DIPOLE_CLAMP_RADIUS;
                        dc = oc * DIPOLE_CLAMP_RADIUS;
                    }
                    rho = DIPOLE_CLAMP_RADIUS;
                }
                let cos = (dr * or + dc * oc) / rho;
                f += m * (3.0 * cos * cos - 1.0) / (rho * rho * rho);
            }
            vals.push(f);
        }
    }
    Ok(FieldMapHz::from_values(geometry, &vals))
}
