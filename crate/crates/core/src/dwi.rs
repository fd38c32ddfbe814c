//! Mono-exponential diffusion relations and the synthetic pelvic phantom.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imgio::{Geometry, Image2D, ImageKind};

/// Upper clamp for computed ADC values, mm²/s.
pub const ADC_CEILING: f64 = 5e-3;

/// Plausible ADC range for lesions, mm²/s.
pub const LESION_ADC_RANGE: (f64, f64) = (0.4e-3, 1.2e-3);
/// Plausible ADC range for benign tissue, mm²/s.
pub const BENIGN_ADC_RANGE: (f64, f64) = (1.2e-3, 2.2e-3);

#[derive(Debug, Error)]
pub enum DwiError {
    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),
    #[error("invalid diffusion parameters: {0}")]
    InvalidParams(String),
    #[error("negative ADC {value} at pixel {index}")]
    NegativeAdc { index: usize, value: f32 },
    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),
}

pub type Result<T, E = DwiError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DwiParams {
    /// Low b-value, s/mm².
    pub b_low: f64,
    /// High b-value, s/mm².
    pub b_high: f64,
    /// Lower clamp on computed ADC, mm²/s.
    pub adc_floor: f64,
    /// Signal floor applied before taking logarithms.
    pub signal_floor: f64,
}

impl Default for DwiParams {
    fn default() -> Self {
        DwiParams {
            b_low: 50.0,
            b_high: 1400.0,
            adc_floor: 1e-5,
            signal_floor: 1e-6,
        }
    }
}

impl DwiParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.b_low >= 0.0 && self.b_high > self.b_low && self.b_high.is_finite()) {
            return Err(DwiError::InvalidParams(format!(
                "need b_high > b_low >= 0, got b_low={} b_high={}",
                self.b_low, self.b_high
            )));
        }
        if !(self.adc_floor >= 0.0 && self.adc_floor < ADC_CEILING) {
            return Err(DwiError::InvalidParams(format!(
                "adc_floor {} outside [0, {ADC_CEILING})",
                self.adc_floor
            )));
        }
        if !(self.signal_floor > 0.0 && self.signal_floor.is_finite()) {
            return Err(DwiError::InvalidParams(format!(
                "signal_floor must be > 0, got {}",
                self.signal_floor
            )));
        }
        Ok(())
    }

    pub fn delta_b(&self) -> f64 {
        self.b_high - self.b_low
    }
}

fn check_shape(a: &Image2D, b: &Image2D) -> Result<()> {
    a.ensure_same_shape(b)
        .map_err(|e| DwiError::GeometryMismatch(e.to_string()))
}

/// ADC from a low-b/high-b pair, floored and clamped so it is always finite.
pub fn compute_adc(s_low: &Image2D, s_high: &Image2D, p: &DwiParams) -> Result<Image2D> {
    p.validate()?;
    check_shape(s_low, s_high)?;
    let db = p.delta_b();
    let floor = p.signal_floor;
    let pixels = s_low
        .pixels()
        .iter()
        .zip(s_high.pixels())
        .map(|(&lo, &hi)| {
            let lo = (lo as f64).max(floor);
            let hi = (hi as f64).max(floor);
            ((lo / hi).ln() / db).clamp(p.adc_floor, ADC_CEILING) as f32
        })
        .collect();
    Ok(Image2D::new(s_low.geometry(), ImageKind::Adc, pixels)
        .expect("same geometry")
        .with_pe_axis(s_low.pe_axis()))
}

/// High-b signal implied by a low-b image and an ADC map.
pub fn synth_high_b(s_low: &Image2D, adc: &Image2D, p: &DwiParams) -> Result<Image2D> {
    p.validate()?;
    check_shape(s_low, adc)?;
    if let Some((index, &value)) = adc.pixels().iter().enumerate().find(|(_, &v)| v < 0.0) {
        return Err(DwiError::NegativeAdc { index, value });
    }
    let db = p.delta_b();
    let pixels = s_low
        .pixels()
        .iter()
        .zip(adc.pixels())
        .map(|(&s, &a)| (s as f64 * (-(a as f64) * db).exp()) as f32)
        .collect();
    Ok(Image2D::new(s_low.geometry(), ImageKind::DwiB1400, pixels)
        .expect("same geometry")
        .with_pe_axis(s_low.pe_axis()))
}

/// A (possibly rotated) ellipse in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    /// (row, col) of the centre.
    pub center: (f64, f64),
    /// Semi-axes (row, col) before rotation.
    pub axes: (f64, f64),
    #[serde(default)]
    pub angle_rad: f64,
}

impl Ellipse {
    pub fn contains(&self, r: f64, c: f64) -> bool {
        let (dr, dc) = (r - self.center.0, c - self.center.1);
        let (s, co) = self.angle_rad.sin_cos();
        let u = (dr * co + dc * s) / self.axes.0;
        let v = (-dr * s + dc * co) / self.axes.1;
        u * u + v * v <= 1.0
    }

    pub fn scaled(&self, f: f64) -> Ellipse {
        Ellipse {
            axes: (self.axes.0 * f, self.axes.1 * f),
            ..*self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lesion {
    pub center: (f64, f64),
    pub radius: f64,
    /// Low-b intensity relative to the surrounding gland.
    pub intensity_multiplier: f64,
    pub adc: f64,
}

/// Per-region signal values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tissue {
    pub b50: f64,
    pub adc: f64,
    pub t2w: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub width: usize,
    pub height: usize,
    pub spacing_mm: (f64, f64),
    pub body: Ellipse,
    pub body_tissue: Tissue,
    /// Prostate outline; its outer shell is the peripheral zone.
    pub gland: Ellipse,
    pub peripheral_tissue: Tissue,
    /// Transition zone as a fraction of the gland semi-axes.
    pub transition_fraction: f64,
    pub transition_tissue: Tissue,
    pub lesions: Vec<Lesion>,
    /// Rectal gas, a signal void.
    pub rectum: Option<Ellipse>,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Sub-samples per pixel side used for anti-aliased edges.
    pub supersample: usize,
}

impl PhantomSpec {
    /// A centred default anatomy on a `width x height` grid.
    pub fn standard(width: usize, height: usize) -> Self {
        let (h, w) = (height as f64, width as f64);
        let gland = Ellipse {
            center: (0.45 * h, 0.5 * w),
            axes: (0.17 * h, 0.21 * w),
            angle_rad: 0.0,
        };
        PhantomSpec {
            width,
            height,
            spacing_mm: (0.56, 0.56),
            body: Ellipse {
                center: (0.5 * h, 0.5 * w),
                axes: (0.44 * h, 0.47 * w),
                angle_rad: 0.0,
            },
            body_tissue: Tissue {
                b50: 0.45,
                adc: 1.4e-3,
                t2w: 0.35,
            },
            gland,
            peripheral_tissue: Tissue {
                b50: 1.0,
                adc: 1.8e-3,
                t2w: 1.0,
            },
            transition_fraction: 0.6,
            transition_tissue: Tissue {
                b50: 0.8,
                adc: 1.3e-3,
                t2w: 0.6,
            },
            lesions: vec![Lesion {
                center: (gland.center.0 + 0.8 * gland.axes.0, gland.center.1 - 0.35 * gland.axes.1),
                radius: 0.05 * w.min(h),
                intensity_multiplier: 1.3,
                adc: 0.8e-3,
            }],
            rectum: Some(Ellipse {
                center: (gland.center.0 + gland.axes.0 + 0.11 * h, 0.5 * w),
                axes: (0.07 * h, 0.12 * w),
                angle_rad: 0.0,
            }),
            noise_sigma: 0.0,
            seed: 0,
            supersample: 4,
        }
    }

    /// A randomly jittered anatomy drawn deterministically from `seed`.
    pub fn randomized(width: usize, height: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut spec = PhantomSpec::standard(width, height);
        let (h, w) = (height as f64, width as f64);
        let mut j = |lo: f64, hi: f64| rng.random_range(lo..hi);
        spec.seed = seed;
        spec.body.axes = (spec.body.axes.0 * j(0.9, 1.02), spec.body.axes.1 * j(0.9, 1.02));
        spec.gland = Ellipse {
            center: (h * j(0.41, 0.49), w * j(0.45, 0.55)),
            axes: (h * j(0.13, 0.19), w * j(0.16, 0.23)),
            angle_rad: j(-0.25, 0.25),
        };
        spec.peripheral_tissue.adc = j(1.6e-3, 2.0e-3);
        spec.transition_tissue.adc = j(1.2e-3, 1.5e-3);
        spec.transition_fraction = j(0.5, 0.7);
        let g = spec.gland;
        let n_lesions = (j(0.0, 3.0)) as usize;
        spec.lesions = (0..n_lesions)
            .map(|_| {
                let theta = j(0.0, std::f64::consts::TAU);
                let rho = j(0.6, 0.85);
                Lesion {
                    center: (
                        g.center.0 + rho * g.axes.0 * theta.sin(),
                        g.center.1 + rho * g.axes.1 * theta.cos(),
                    ),
                    radius: w.min(h) * j(0.03, 0.06),
                    intensity_multiplier: j(1.1, 1.5),
                    adc: j(0.6e-3, 1.0e-3),
                }
            })
            .collect();
        spec.rectum = Some(Ellipse {
            center: (g.center.0 + g.axes.0 + h * j(0.08, 0.13), g.center.1 + w * j(-0.03, 0.03)),
            axes: (h * j(0.05, 0.09), w * j(0.08, 0.14)),
            angle_rad: 0.0,
        });
        spec
    }

    pub fn geometry(&self) -> Geometry {
        Geometry {
            width: self.width,
            height: self.height,
            spacing_mm: self.spacing_mm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DwiError::InvalidSpec(m));
        if self.width == 0 || self.height == 0 {
            return bad(format!("grid {}x{} is empty", self.width, self.height));
        }
        if self.supersample == 0 {
            return bad("supersample must be >= 1".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma {} must be >= 0", self.noise_sigma));
        }
        if !(self.transition_fraction > 0.0 && self.transition_fraction < 1.0) {
            return bad(format!(
                "transition_fraction {} outside (0, 1)",
                self.transition_fraction
            ));
        }
        let in_range = |v: f64, (lo, hi): (f64, f64)| v >= lo && v <= hi;
        for (name, t) in [
            ("body_tissue", &self.body_tissue),
            ("peripheral_tissue", &self.peripheral_tissue),
            ("transition_tissue", &self.transition_tissue),
        ] {
            if !in_range(t.adc, BENIGN_ADC_RANGE) {
                return bad(format!(
                    "{name}.adc {} outside benign range {:?}",
                    t.adc, BENIGN_ADC_RANGE
                ));
            }
            if !(t.b50 >= 0.0 && t.t2w >= 0.0) {
                return bad(format!("{name} intensities must be >= 0"));
            }
        }
        for (i, l) in self.lesions.iter().enumerate() {
            if !in_range(l.adc, LESION_ADC_RANGE) {
                return bad(format!(
                    "lesions[{i}].adc {} outside lesion range {:?}",
                    l.adc, LESION_ADC_RANGE
                ));
            }
            if !(l.radius > 0.0 && l.intensity_multiplier >= 0.0) {
                return bad(format!("lesions[{i}] needs radius > 0 and multiplier >= 0"));
            }
        }
        for (name, e) in [("body", Some(&self.body)), ("gland", Some(&self.gland)), ("rectum", self.rectum.as_ref())] {
            if let Some(e) = e {
                if !(e.axes.0 > 0.0 && e.axes.1 > 0.0) {
                    return bad(format!("{name} ellipse needs positive axes"));
                }
            }
        }
        Ok(())
    }
}

/// Rasters produced by [`generate_phantom`].
#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub dwi_b50: Image2D,
    pub adc: Image2D,
    pub t2w: Image2D,
    /// Tissue with signal: inside the body and outside the rectal void.
    pub mask: Image2D,
    pub warnings: Vec<String>,
}

fn coverage(e: &Ellipse, r: usize, c: usize, ss: usize) -> f64 {
    let mut inside = 0usize;
    for i in 0..ss {
        for j in 0..ss {
            let rr = r as f64 + (i as f64 + 0.5) / ss as f64 - 0.5;
            let cc = c as f64 + (j as f64 + 0.5) / ss as f64 - 0.5;
            if e.contains(rr, cc) {
                inside += 1;
            }
        }
    }
    inside as f64 / (ss * ss) as f64
}

fn blend(v: &mut [f64; 3], layer: [f64; 3], a: f64) {
    if a <= 0.0 {
        return;
    }
    if a >= 1.0 {
        *v = layer;
        return;
    }
    for k in 0..3 {
        v[k] = v[k] * (1.0 - a) + layer[k] * a;
    }
}

/// Renders a phantom: low-b DWI, ADC, T2W and a tissue mask.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let g = spec.geometry();
    let ss = spec.supersample;
    let mut warnings = Vec::new();
    for (i, l) in spec.lesions.iter().enumerate() {
        if !spec.gland.contains(l.center.0, l.center.1) {
            let msg = format!("lesion {i} centre {:?} lies outside the gland", l.center);
            log::warn!("{msg}");
            warnings.push(msg);
        }
    }
    let tz = spec.gland.scaled(spec.transition_fraction);
    let as_layer = |t: &Tissue| [t.b50, t.adc, t.t2w];
    let pz = as_layer(&spec.peripheral_tissue);

    let mut b50 = Image2D::zeros(g, ImageKind::DwiB50);
    let mut adc = Image2D::zeros(g, ImageKind::Adc);
    let mut t2w = Image2D::zeros(g, ImageKind::T2w);
    let mut mask = Image2D::zeros(g, ImageKind::Mask);
    for r in 0..g.height {
        for c in 0..g.width {
            let mut v = [0.0f64; 3];
            let body_cov = coverage(&spec.body, r, c, ss);
            blend(&mut v, as_layer(&spec.body_tissue), body_cov);
            blend(&mut v, pz, coverage(&spec.gland, r, c, ss));
            blend(&mut v, as_layer(&spec.transition_tissue), coverage(&tz, r, c, ss));
            for l in &spec.lesions {
                let e = Ellipse {
                    center: l.center,
                    axes: (l.radius, l.radius),
                    angle_rad: 0.0,
                };
                let layer = [
                    spec.peripheral_tissue.b50 * l.intensity_multiplier,
                    l.adc,
                    spec.peripheral_tissue.t2w * 0.45,
                ];
                blend(&mut v, layer, coverage(&e, r, c, ss));
            }
            let mut void_cov = 0.0;
            if let Some(rect) = &spec.rectum {
                void_cov = coverage(rect, r, c, ss);
                blend(&mut v, [0.0; 3], void_cov);
            }
            b50.set(r, c, v[0] as f32);
            adc.set(r, c, v[1] as f32);
            t2w.set(r, c, v[2] as f32);
            if body_cov >= 0.5 && void_cov < 0.5 {
                mask.set(r, c, 1.0);
            }
        }
    }

    if spec.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        for img in [&mut b50, &mut t2w] {
            add_rician(img, spec.noise_sigma, &mut rng);
        }
    }

    Ok(Phantom {
        dwi_b50: b50,
        adc,
        t2w,
        mask,
        warnings,
    })
}

/// Magnitude of signal plus complex Gaussian noise.
pub fn add_rician(img: &mut Image2D, sigma: f64, rng: &mut impl Rng) {
    for v in img.pixels_mut() {
        let n1: f64 = rng.sample(StandardNormal);
        let n2: f64 = rng.sample(StandardNormal);
        let re = *v as f64 + sigma * n1;
        let im = sigma * n2;
        *v = (re * re + im * im).sqrt() as f32;
    }
}
