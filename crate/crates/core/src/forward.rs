//! Single-shot EPI forward distortion model.
//!
//! Off-resonance is converted to a per-pixel shift along the phase-encoding
//! axis, and each source pixel's intensity is splatted to its displaced
//! position with a two-tap linear kernel. Converging shifts pile signal up,
//! diverging shifts stretch it thin, and deposits that leave the grid are
//! lost.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dwi::{compute_adc, synth_high_b, DwiError, DwiParams};
use crate::field::FieldMapHz;
use crate::imgio::{self, Geometry, Image2D, ImageError, ImageKind, PeAxis};

#[derive(Debug, Error)]
pub enum ForwardError {
    #[error("invalid EPI parameters: {0}")]
    InvalidParams(String),
    #[error("displacement of {max_shift:.3} px reaches the {extent}-px extent along the PE axis")]
    DisplacementOverflow { max_shift: f64, extent: usize },
    #[error("non-finite off-resonance at pixel {0}")]
    NonFiniteField(usize),
    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Dwi(#[from] DwiError),
    #[error("malformed sample parameters in {path}: {message}")]
    Params { path: String, message: String },
}

pub type Result<T, E = ForwardError> = std::result::Result<T, E>;

/// How echo spacing enters the shift formula.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftFormula {
    /// `shift = s · Δf · (N·PF/R − 1) · ESP`, which is in pixels.
    #[default]
    Standard,
    /// `shift = s · Δf · (N·PF/R − 1) / ESP`, the typeset variant that
    /// divides by the echo spacing. Kept only for auditing.
    Eq1Literal,
}

/// Acquisition parameters of a single-shot EPI readout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpiParams {
    /// Phase-encoding polarity, +1 or -1.
    pub s_pe: i8,
    /// Number of phase-encoding lines.
    pub n_pe: u32,
    /// Partial-Fourier factor in (0.5, 1].
    pub pf: f64,
    /// In-plane acceleration factor.
    pub r: f64,
    /// Echo spacing in seconds.
    pub esp_s: f64,
    pub pe_axis: PeAxis,
    #[serde(default)]
    pub formula: ShiftFormula,
}

impl Default for EpiParams {
    fn default() -> Self {
        EpiParams {
            s_pe: 1,
            n_pe: 128,
            pf: 0.75,
            r: 2.0,
            esp_s: 5e-4,
            pe_axis: PeAxis::Row,
            formula: ShiftFormula::Standard,
        }
    }
}

impl EpiParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ForwardError::InvalidParams(m));
        if self.s_pe != 1 && self.s_pe != -1 {
            return bad(format!("s_pe must be +1 or -1, got {}", self.s_pe));
        }
        if self.n_pe < 2 {
            return bad(format!("n_pe must be > 1, got {}", self.n_pe));
        }
        if !(self.pf > 0.5 && self.pf <= 1.0) {
            return bad(format!("pf must lie in (0.5, 1], got {}", self.pf));
        }
        if !(self.r >= 1.0 && self.r.is_finite()) {
            return bad(format!("r must be >= 1, got {}", self.r));
        }
        if !(self.esp_s > 0.0 && self.esp_s.is_finite()) {
            return bad(format!("esp_s must be > 0, got {}", self.esp_s));
        }
        if self.effective_lines() <= 1.0 {
            return bad(format!(
                "n_pe*pf/r must exceed 1, got {}",
                self.effective_lines()
            ));
        }
        Ok(())
    }

    /// `N·PF/R`, the number of lines in the effective echo train.
    pub fn effective_lines(&self) -> f64 {
        self.n_pe as f64 * self.pf / self.r
    }

    /// Pixels of shift per Hz of off-resonance, before the polarity sign.
    pub fn px_per_hz(&self) -> f64 {
        let lines = self.effective_lines() - 1.0;
        match self.formula {
            ShiftFormula::Standard => lines * self.esp_s,
            ShiftFormula::Eq1Literal => lines / self.esp_s,
        }
    }

    pub fn reversed(&self) -> EpiParams {
        EpiParams {
            s_pe: -self.s_pe,
            ..*self
        }
    }
}

/// The four phase-encoding directions used for dataset synthesis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeDirection {
    /// Left to right.
    Lr,
    /// Right to left.
    Rl,
    /// Anterior to posterior.
    Ap,
    /// Posterior to anterior.
    Pa,
}

impl PeDirection {
    pub const ALL: [PeDirection; 4] = [
        PeDirection::Lr,
        PeDirection::Rl,
        PeDirection::Ap,
        PeDirection::Pa,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PeDirection::Lr => "lr",
            PeDirection::Rl => "rl",
            PeDirection::Ap => "ap",
            PeDirection::Pa => "pa",
        }
    }

    pub fn axis(self) -> PeAxis {
        match self {
            PeDirection::Lr | PeDirection::Rl => PeAxis::Col,
            PeDirection::Ap | PeDirection::Pa => PeAxis::Row,
        }
    }

    pub fn sign(self) -> i8 {
        match self {
            PeDirection::Lr | PeDirection::Ap => 1,
            PeDirection::Rl | PeDirection::Pa => -1,
        }
    }

    /// `base` with this direction's axis and polarity.
    pub fn apply(self, base: &EpiParams) -> EpiParams {
        EpiParams {
            s_pe: self.sign(),
            pe_axis: self.axis(),
            ..*base
        }
    }
}

impl fmt::Display for PeDirection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PeDirection {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        PeDirection::ALL
            .iter()
            .copied()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| format!("unknown PE direction `{s}` (expected lr, rl, ap or pa)"))
    }
}

/// Per-pixel shift in pixels along the PE axis.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementMap(Image2D);

impl DisplacementMap {
    pub fn new(img: Image2D) -> Result<Self> {
        if img.kind() != ImageKind::VdmPx {
            return Err(ForwardError::GeometryMismatch(format!(
                "displacement map must be of kind vdm_px, got {}",
                img.kind()
            )));
        }
        let axis = img.pe_axis().ok_or_else(|| {
            ForwardError::GeometryMismatch("displacement map has no pe_axis".into())
        })?;
        let extent = img.geometry().extent(axis) as f64;
        let max_shift = max_abs(img.pixels());
        if !img.pixels().iter().all(|v| v.is_finite()) || max_shift >= extent {
            return Err(ForwardError::DisplacementOverflow {
                max_shift,
                extent: extent as usize,
            });
        }
        Ok(DisplacementMap(img))
    }

    pub fn from_shifts(geometry: Geometry, axis: PeAxis, shifts: Vec<f32>) -> Result<Self> {
        let img = Image2D::new(geometry, ImageKind::VdmPx, shifts)?.with_pe_axis(Some(axis));
        DisplacementMap::new(img)
    }

    pub fn zeros(geometry: Geometry, axis: PeAxis) -> Self {
        DisplacementMap(Image2D::zeros(geometry, ImageKind::VdmPx).with_pe_axis(Some(axis)))
    }

    pub fn image(&self) -> &Image2D {
        &self.0
    }

    pub fn into_image(self) -> Image2D {
        self.0
    }

    pub fn pe_axis(&self) -> PeAxis {
        self.0.pe_axis().expect("checked on construction")
    }

    pub fn geometry(&self) -> Geometry {
        self.0.geometry()
    }

    pub fn shifts(&self) -> &[f32] {
        self.0.pixels()
    }

    /// Shifts along PE line `line`, as `f64`.
    pub fn line(&self, line: usize) -> Vec<f64> {
        self.0.line(self.pe_axis(), line)
    }

    pub fn max_abs(&self) -> f64 {
        max_abs(self.0.pixels())
    }

    /// The displacement map of the reverse-polarity acquisition.
    pub fn negated(&self) -> DisplacementMap {
        let mut img = self.0.clone();
        img.pixels_mut().iter_mut().for_each(|v| *v = -*v);
        DisplacementMap(img)
    }
}

fn max_abs(v: &[f32]) -> f64 {
    v.iter().fold(0.0f64, |m, &x| m.max((x as f64).abs()))
}

/// Converts off-resonance (Hz) into a displacement map (px).
pub fn compute_vdm(field: &FieldMapHz, p: &EpiParams) -> Result<DisplacementMap> {
    p.validate()?;
    let img = field.image();
    if let Some(i) = img.pixels().iter().position(|v| !v.is_finite()) {
        return Err(ForwardError::NonFiniteField(i));
    }
    let k = p.px_per_hz();
    let s = p.s_pe as f64;
    let shifts: Vec<f32> = img
        .pixels()
        .iter()
        .map(|&df| (s * df as f64 * k) as f32)
        .collect();
    let extent = img.geometry().extent(p.pe_axis);
    let max_shift = max_abs(&shifts);
    if max_shift >= extent as f64 {
        return Err(ForwardError::DisplacementOverflow { max_shift, extent });
    }
    DisplacementMap::from_shifts(img.geometry(), p.pe_axis, shifts)
}

/// Splats one PE line. Each source sample `i` lands at `i + shifts[i]` and is
/// split linearly between the two neighbouring integer positions. Returns the
/// mass deposited outside `out`.
pub fn splat_line(values: &[f64], shifts: &[f64], out: &mut [f64]) -> f64 {
    debug_assert_eq!(values.len(), shifts.len());
    let n = out.len() as i64;
    let mut dropped = 0.0;
    for (i, (&v, &d)) in values.iter().zip(shifts).enumerate() {
        let t = i as f64 + d;
        let k = t.floor();
        let f = t - k;
        let k = k as i64;
        let (w0, w1) = (v * (1.0 - f), v * f);
        if (0..n).contains(&k) {
            out[k as usize] += w0;
        } else {
            dropped += w0;
        }
        if (0..n).contains(&(k + 1)) {
            out[(k + 1) as usize] += w1;
        } else {
            dropped += w1;
        }
    }
    dropped
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SplatStats {
    pub input_mass: f64,
    pub dropped_mass: f64,
}

impl SplatStats {
    pub fn dropped_fraction(&self) -> f64 {
        if self.input_mass.abs() > 0.0 {
            self.dropped_mass / self.input_mass
        } else {
            0.0
        }
    }
}

fn check_warp_geometry(img: &Image2D, vdm: &DisplacementMap) -> Result<()> {
    if !img.same_shape(vdm.image()) {
        return Err(ForwardError::GeometryMismatch(format!(
            "image is {}x{}, displacement map is {}x{}",
            img.width(),
            img.height(),
            vdm.geometry().width,
            vdm.geometry().height
        )));
    }
    if let Some(axis) = img.pe_axis() {
        if axis != vdm.pe_axis() {
            return Err(ForwardError::GeometryMismatch(format!(
                "image pe_axis {} differs from displacement map pe_axis {}",
                axis.as_str(),
                vdm.pe_axis().as_str()
            )));
        }
    }
    Ok(())
}

/// Applies the forward distortion to `img`.
pub fn forward_splat(img: &Image2D, vdm: &DisplacementMap) -> Result<Image2D> {
    forward_splat_with_stats(img, vdm).map(|(out, _)| out)
}

pub fn forward_splat_with_stats(
    img: &Image2D,
    vdm: &DisplacementMap,
) -> Result<(Image2D, SplatStats)> {
    check_warp_geometry(img, vdm)?;
    let axis = vdm.pe_axis();
    let (n_lines, len) = img.geometry().lines(axis);
    let mut out = img.clone().with_pe_axis(Some(axis));
    let mut stats = SplatStats::default();
    let mut acc = vec![0.0f64; len];
    for line in 0..n_lines {
        let values = img.line(axis, line);
        let shifts = vdm.line(line);
        acc.iter_mut().for_each(|v| *v = 0.0);
        stats.dropped_mass += splat_line(&values, &shifts, &mut acc);
        stats.input_mass += values.iter().sum::<f64>();
        out.set_line(axis, line, &acc);
    }
    Ok((out, stats))
}

/// Undistorted inputs for one slice, all on the same grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CleanInputs {
    pub b50: Image2D,
    pub adc: Image2D,
    pub t2w: Image2D,
    pub mask: Option<Image2D>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CleanSet {
    pub b50: Image2D,
    pub b1400: Image2D,
    pub adc: Image2D,
    pub t2w: Image2D,
    pub mask: Option<Image2D>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistortedSet {
    pub b50: Image2D,
    pub b1400: Image2D,
    pub adc: Image2D,
}

/// Per-sample parameters persisted alongside the images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleParams {
    pub epi: EpiParams,
    pub dwi: DwiParams,
    pub dropped_fraction: f64,
    pub max_abs_shift_px: f64,
}

/// One clean/distorted pair with its ground-truth field and displacement.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub clean: CleanSet,
    pub distorted: DistortedSet,
    pub field: FieldMapHz,
    pub vdm: DisplacementMap,
    pub params: EpiParams,
    pub dwi: DwiParams,
    pub dropped_fraction: f64,
}

/// Distorts a clean slice with `field` under acquisition `p`.
///
/// The high-b image is synthesized from the clean low-b image and ADC, both
/// DWIs are splatted, and the distorted ADC is recomputed from them. The
/// clean ADC reference is recomputed the same way so the two ADC maps are
/// directly comparable. T2W is not distorted.
pub fn simulate_pair(
    clean: &CleanInputs,
    field: &FieldMapHz,
    p: &EpiParams,
    dwi: &DwiParams,
) -> Result<PairedSample> {
    for (name, img) in [("adc", &clean.adc), ("t2w", &clean.t2w)] {
        if !clean.b50.same_shape(img) {
            return Err(ForwardError::GeometryMismatch(format!(
                "clean {name} is not on the b50 grid"
            )));
        }
    }
    if !clean.b50.same_shape(field.image()) {
        return Err(ForwardError::GeometryMismatch(
            "field map is not on the image grid".into(),
        ));
    }
    let vdm = compute_vdm(field, p)?;
    let b1400 = synth_high_b(&clean.b50, &clean.adc, dwi)?;
    let adc_ref = compute_adc(&clean.b50, &b1400, dwi)?;
    let (d_b50, stats) = forward_splat_with_stats(&clean.b50, &vdm)?;
    let d_b1400 = forward_splat(&b1400, &vdm)?;
    let d_adc = compute_adc(&d_b50, &d_b1400, dwi)?.with_pe_axis(Some(p.pe_axis));
    Ok(PairedSample {
        clean: CleanSet {
            b50: clean.b50.clone(),
            b1400,
            adc: adc_ref,
            t2w: clean.t2w.clone(),
            mask: clean.mask.clone(),
        },
        distorted: DistortedSet {
            b50: d_b50,
            b1400: d_b1400,
            adc: d_adc,
        },
        field: field.clone(),
        vdm,
        params: *p,
        dwi: *dwi,
        dropped_fraction: stats.dropped_fraction(),
    })
}

pub const PARAMS_FILE: &str = "params.json";

impl PairedSample {
    fn images(&self) -> Vec<(&'static str, &Image2D)> {
        let mut v = vec![
            ("clean/b50", &self.clean.b50),
            ("clean/b1400", &self.clean.b1400),
            ("clean/adc", &self.clean.adc),
            ("clean/t2w", &self.clean.t2w),
            ("distorted/b50", &self.distorted.b50),
            ("distorted/b1400", &self.distorted.b1400),
            ("distorted/adc", &self.distorted.adc),
            ("truth/field_hz", self.field.image()),
            ("truth/vdm_px", self.vdm.image()),
        ];
        if let Some(m) = &self.clean.mask {
            v.push(("clean/mask", m));
        }
        v
    }

    pub fn sample_params(&self) -> SampleParams {
        SampleParams {
            epi: self.params,
            dwi: self.dwi,
            dropped_fraction: self.dropped_fraction,
            max_abs_shift_px: self.vdm.max_abs(),
        }
    }

    /// Writes the sample directory layout and returns the relative paths of
    /// every file written.
    pub fn write_dir(&self, dir: &Path) -> Result<Vec<String>> {
        let mut files = Vec::new();
        for sub in ["clean", "distorted", "truth"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(|source| ImageError::Io { path: p, source })?;
        }
        for (stem, img) in self.images() {
            imgio::write_image(img, &dir.join(stem))?;
            files.push(format!("{stem}.json"));
            files.push(format!("{stem}.bin"));
        }
        let p = dir.join(PARAMS_FILE);
        let text = serde_json::to_string_pretty(&self.sample_params()).expect("params serialize");
        fs::write(&p, text + "\n").map_err(|source| ImageError::Io {
            path: p.clone(),
            source,
        })?;
        files.push(PARAMS_FILE.to_string());
        Ok(files)
    }

    pub fn read_dir(dir: &Path) -> Result<PairedSample> {
        let read = |stem: &str| imgio::read_image(&dir.join(stem));
        let p = dir.join(PARAMS_FILE);
        let text = fs::read_to_string(&p).map_err(|source| ImageError::Io {
            path: p.clone(),
            source,
        })?;
        let params: SampleParams =
            serde_json::from_str(&text).map_err(|e| ForwardError::Params {
                path: p.display().to_string(),
                message: e.to_string(),
            })?;
        let mask_stem = dir.join("clean/mask");
        let mask = if imgio::header_path(&mask_stem).exists() {
            Some(imgio::read_image(&mask_stem)?)
        } else {
            None
        };
        Ok(PairedSample {
            clean: CleanSet {
                b50: read("clean/b50")?,
                b1400: read("clean/b1400")?,
                adc: read("clean/adc")?,
                t2w: read("clean/t2w")?,
                mask,
            },
            distorted: DistortedSet {
                b50: read("distorted/b50")?,
                b1400: read("distorted/b1400")?,
                adc: read("distorted/adc")?,
            },
            field: FieldMapHz::new(read("truth/field_hz")?)
                .map_err(|e| ForwardError::GeometryMismatch(e.to_string()))?,
            vdm: DisplacementMap::new(read("truth/vdm_px")?)?,
            params: params.epi,
            dwi: params.dwi,
            dropped_fraction: params.dropped_fraction,
        })
    }
}
