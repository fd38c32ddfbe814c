//! Dataset synthesis and benchmark orchestration.
//!
//! [`make_dataset`] turns a [`BenchmarkConfig`] into a directory of paired
//! samples plus a manifest; [`run_benchmark`] corrects the test split with
//! each requested method and scores the result against the clean
//! references.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::correct::{
    estimate_field_dual_pe, jacobian_line, restore_dual_pe, unwarp_fieldmap, CorrectError,
    RestoreOptions,
};
use crate::dwi::{compute_adc, generate_phantom, DwiError, DwiParams, PhantomSpec};
use crate::field::{
    dipole_phantom_field, fit_harmonic, harmonic_residual, synthesize_field, DipoleSpec,
    FieldError, FieldMapHz, Perturbation,
};
use crate::forward::{
    forward_splat, simulate_pair, CleanInputs, DisplacementMap, EpiParams, ForwardError,
    PairedSample, PeDirection,
};
use crate::imgio::{
    self, write_manifest, DatasetManifest, Image2D, ImageError, ImageKind, SampleRecord, Split,
};
use crate::metrics::{field_rmse, nmse, psnr_with_peak, EvalEntry, EvalReport, Failure, MetricError, Peak};

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid benchmark config: {0}")]
    InvalidConfig(String),
    #[error("unknown method `{name}` (valid methods: {})", Method::ALL.map(Method::as_str).join(", "))]
    UnknownMethod { name: String },
    #[error("method `neural` needs a predictions directory")]
    MissingNeuralDir,
    #[error("neural predictions directory {0} does not exist")]
    NeuralDirNotFound(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Forward(#[from] ForwardError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Dwi(#[from] DwiError),
    #[error(transparent)]
    Correct(#[from] CorrectError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Fractions of phantoms assigned to each split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.8,
            validation: 0.1,
            test: 0.1,
        }
    }
}

/// How the B0 field of each slice is built.
///
/// A rectal-gas dipole and optional hip-implant dipoles are summed with a
/// linear background, expanded in the polynomial harmonic basis, and the
/// higher orders and residual are randomly rescaled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldConfig {
    pub harmonic_order: usize,
    pub low_keep_order: usize,
    pub hi_scale_range: (f64, f64),
    pub cap_hz: f64,
    /// Off-resonance at the rectal wall along the dipole axis (Hz).
    pub gas_wall_hz: (f64, f64),
    /// Off-resonance at the nearest body edge from each implant (Hz).
    pub implant_edge_hz: (f64, f64),
    /// Chance of an implant on each side, drawn per phantom.
    pub implant_probability: f64,
    /// Largest background gradient magnitude (Hz/px) along each axis.
    pub background_gradient_max: f64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            harmonic_order: 6,
            low_keep_order: 2,
            hi_scale_range: (0.5, 2.0),
            cap_hz: 1000.0,
            gas_wall_hz: (80.0, 250.0),
            implant_edge_hz: (150.0, 400.0),
            implant_probability: 0.5,
            background_gradient_max: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub phantoms: usize,
    pub slices: usize,
    pub width: usize,
    pub height: usize,
    /// Rician noise level of the clean images (PZ signal is 1.0).
    pub noise_sigma: f64,
    pub directions: Vec<PeDirection>,
    /// Acquisition parameters; axis and polarity come from each direction.
    pub epi: EpiParams,
    pub dwi: DwiParams,
    pub fields: FieldConfig,
    pub split: SplitFractions,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            phantoms: 20,
            slices: 5,
            width: 96,
            height: 96,
            noise_sigma: 0.02,
            directions: PeDirection::ALL.to_vec(),
            epi: EpiParams::default(),
            dwi: DwiParams::default(),
            fields: FieldConfig::default(),
            split: SplitFractions::default(),
            seed: 0,
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PipelineError::InvalidConfig(m));
        if self.phantoms == 0 || self.slices == 0 {
            return bad("phantoms and slices must be >= 1".into());
        }
        if self.width < 16 || self.height < 16 {
            return bad(format!(
                "grid must be at least 16x16, got {}x{}",
                self.width, self.height
            ));
        }
        if self.directions.is_empty() {
            return bad("directions must not be empty".into());
        }
        for (i, d) in self.directions.iter().enumerate() {
            if self.directions[..i].contains(d) {
                return bad(format!("direction {d} listed twice"));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be >= 0".into());
        }
        let s = self.split;
        if [s.train, s.validation, s.test].iter().any(|f| f.is_nan() || *f < 0.0) {
            return bad("split fractions must be >= 0".into());
        }
        if ((s.train + s.validation + s.test) - 1.0).abs() > 1e-9 {
            return bad(format!(
                "split fractions must sum to 1, got {}",
                s.train + s.validation + s.test
            ));
        }
        let f = &self.fields;
        for (name, (lo, hi)) in [("gas_wall_hz", f.gas_wall_hz), ("implant_edge_hz", f.implant_edge_hz)] {
            if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
                return bad(format!("fields.{name} must be an increasing non-negative range"));
            }
        }
        if !(0.0..=1.0).contains(&f.implant_probability) {
            return bad("fields.implant_probability must be in [0, 1]".into());
        }
        if f.cap_hz.is_nan() || f.cap_hz <= 0.0 {
            return bad("fields.cap_hz must be > 0".into());
        }
        if f.low_keep_order > f.harmonic_order {
            return bad("fields.low_keep_order must not exceed fields.harmonic_order".into());
        }
        self.epi.validate()?;
        self.dwi.validate()?;
        Ok(())
    }

    /// Subject-level split assignment, shuffled from the global seed.
    pub fn assign_splits(&self) -> Vec<Split> {
        let n = self.phantoms;
        let n_train = (self.split.train * n as f64).round() as usize;
        let n_val = ((self.split.validation * n as f64).round() as usize).min(n - n_train.min(n));
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[0])));
        let mut out = vec![Split::Test; n];
        for (rank, &subject) in order.iter().enumerate() {
            out[subject] = if rank < n_train {
                Split::Train
            } else if rank < n_train + n_val {
                Split::Validation
            } else {
                Split::Test
            };
        }
        out
    }
}

/// Mixes `parts` into `seed` with the SplitMix64 finalizer.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    let mix = |mut z: u64| {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    };
    parts.iter().fold(mix(seed), |acc, &p| mix(acc ^ mix(p)))
}

pub fn sample_id(subject: usize, slice: usize, dir: PeDirection) -> String {
    format!("p{subject:03}_z{slice:02}_{dir}")
}

/// Per-phantom draws shared by all of its slices.
struct SubjectDraw {
    spec: PhantomSpec,
    gas_hz: f64,
    gas_sign: f64,
    implants: Vec<(f64, f64)>,
    background: (f64, f64),
}

fn draw_subject(cfg: &BenchmarkConfig, subject: usize) -> SubjectDraw {
    let seed = derive_seed(cfg.seed, &[1, subject as u64]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut spec = PhantomSpec::randomized(cfg.width, cfg.height, seed);
    spec.noise_sigma = cfg.noise_sigma;
    let f = &cfg.fields;
    let mut uniform = |(lo, hi): (f64, f64)| if hi > lo { rng.random_range(lo..hi) } else { lo };
    let gas_hz = uniform(f.gas_wall_hz);
    let bg = f.background_gradient_max;
    let background = (uniform((-bg, bg)), uniform((-bg, bg)));
    let mut implants = Vec::new();
    // side: -1 left, +1 right
    for side in [-1.0, 1.0] {
        let present = rng.random_bool(f.implant_probability);
        let hz = if f.implant_edge_hz.1 > f.implant_edge_hz.0 {
            rng.random_range(f.implant_edge_hz.0..f.implant_edge_hz.1)
        } else {
            f.implant_edge_hz.0
        };
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        if present {
            implants.push((side, sign * hz));
        }
    }
    let gas_sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    SubjectDraw {
        spec,
        gas_hz,
        gas_sign,
        implants,
        background,
    }
}

/// Position of `slice` in `[-1, 1]` through the gland.
fn slice_position(cfg: &BenchmarkConfig, slice: usize) -> f64 {
    if cfg.slices == 1 {
        0.0
    } else {
        2.0 * slice as f64 / (cfg.slices - 1) as f64 - 1.0
    }
}

/// Phantom spec of one slice: the gland and lesions shrink towards the
/// apex and base.
fn slice_spec(cfg: &BenchmarkConfig, draw: &SubjectDraw, subject: usize, slice: usize) -> PhantomSpec {
    let t = slice_position(cfg, slice);
    let mut spec = draw.spec.clone();
    let shrink = (1.0 - 0.5 * t * t).sqrt();
    spec.gland = spec.gland.scaled(shrink);
    for l in &mut spec.lesions {
        l.radius *= shrink;
        l.center = (
            spec.gland.center.0 + (l.center.0 - spec.gland.center.0) * shrink,
            spec.gland.center.1 + (l.center.1 - spec.gland.center.1) * shrink,
        );
    }
    spec.seed = derive_seed(cfg.seed, &[2, subject as u64, slice as u64]);
    spec
}

/// Dipole sources of one slice.
fn slice_dipoles(cfg: &BenchmarkConfig, draw: &SubjectDraw, spec: &PhantomSpec, slice: usize) -> DipoleSpec {
    let t = slice_position(cfg, slice);
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let mut centers = Vec::new();
    let mut moments = Vec::new();
    if let Some(rectum) = spec.rectum {
        // 2m / rho^3 on the axis at the wall
        let rho = rectum.axes.0.max(1.0);
        centers.push(rectum.center);
        moments.push(draw.gas_sign * draw.gas_hz * (1.0 - 0.3 * t * t) * rho.powi(3) / 2.0);
    }
    let edge_left = spec.body.center.1 - spec.body.axes.1;
    let edge_right = spec.body.center.1 + spec.body.axes.1;
    for &(side, hz) in &draw.implants {
        let col = if side < 0.0 { -0.25 * w } else { 1.25 * w };
        let dist = if side < 0.0 { edge_left - col } else { col - edge_right };
        // perpendicular to the axis the kernel is -m / rho^3
        centers.push((0.5 * h, col));
        moments.push(-hz * (1.0 + 0.2 * t) * dist.max(1.0).powi(3));
    }
    let n = centers.len();
    DipoleSpec {
        centers,
        moments,
        orientations: vec![(1.0, 0.0); n],
        background_gradient: draw.background,
    }
}

/// Builds the field of one slice.
fn slice_field(
    cfg: &BenchmarkConfig,
    dipoles: &DipoleSpec,
    body_mask: &Image2D,
    seed: u64,
) -> Result<FieldMapHz> {
    let g = body_mask.geometry();
    let raw = if dipoles.centers.is_empty() {
        FieldMapHz::zeros(g)
    } else {
        dipole_phantom_field(dipoles, g)?
    };
    let f = &cfg.fields;
    let coeffs = fit_harmonic(&raw, f.harmonic_order, Some(body_mask))?;
    let residual = harmonic_residual(&raw, &coeffs);
    Ok(synthesize_field(
        &coeffs,
        &residual,
        &Perturbation {
            low_keep_order: f.low_keep_order,
            hi_scale_range: f.hi_scale_range,
            seed,
            cap_hz: f.cap_hz,
        },
    )?)
}

/// Synthesizes the dataset described by `cfg` under `out_dir`.
///
/// Writes `out_dir/manifest.json` and one directory per sample under
/// `out_dir/samples/`. Samples whose displacement would leave the grid are
/// skipped with a warning. Uses the current rayon pool; the output does not
/// depend on its size.
pub fn make_dataset(cfg: &BenchmarkConfig, out_dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let splits = cfg.assign_splits();
    let jobs: Vec<(usize, usize)> = (0..cfg.phantoms)
        .flat_map(|p| (0..cfg.slices).map(move |z| (p, z)))
        .collect();
    let draws: Vec<SubjectDraw> = (0..cfg.phantoms).map(|p| draw_subject(cfg, p)).collect();

    let per_slice: Vec<Result<Vec<SampleRecord>>> = jobs
        .par_iter()
        .map(|&(subject, slice)| {
            let draw = &draws[subject];
            let spec = slice_spec(cfg, draw, subject, slice);
            let phantom = generate_phantom(&spec)?;
            let dipoles = slice_dipoles(cfg, draw, &spec, slice);
            let field_seed = derive_seed(cfg.seed, &[3, subject as u64, slice as u64]);
            let field = slice_field(cfg, &dipoles, &phantom.mask, field_seed)?;
            let clean = CleanInputs {
                b50: phantom.dwi_b50,
                adc: phantom.adc,
                t2w: phantom.t2w,
                mask: Some(phantom.mask),
            };
            let mut records = Vec::new();
            for &dir in &cfg.directions {
                let id = sample_id(subject, slice, dir);
                let pair = match simulate_pair(&clean, &field, &dir.apply(&cfg.epi), &cfg.dwi) {
                    Ok(p) => p,
                    Err(ForwardError::DisplacementOverflow { max_shift, extent }) => {
                        warn!("skipping {id}: displacement {max_shift:.1} px exceeds extent {extent}");
                        continue;
                    }
                    Err(e) => return Err(e.into()),
                };
                let rel = format!("samples/{id}");
                let files = pair.write_dir(&out_dir.join(&rel))?;
                records.push(SampleRecord {
                    id,
                    subject: subject as u32,
                    slice: slice as u32,
                    split: splits[subject],
                    pe: dir.as_str().to_string(),
                    seed: field_seed,
                    dir: rel,
                    files,
                    dropped_fraction: pair.dropped_fraction,
                });
            }
            Ok(records)
        })
        .collect();

    let mut manifest = DatasetManifest::new(cfg.seed);
    for r in per_slice {
        manifest.samples.extend(r?);
    }
    manifest.epi_params_used = cfg.directions.iter().map(|d| d.apply(&cfg.epi)).collect();
    let expected = cfg.phantoms * cfg.slices * cfg.directions.len();
    info!(
        "wrote {} of {expected} samples to {}",
        manifest.samples.len(),
        out_dir.display()
    );
    write_manifest(&manifest, &out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Correction methods scored by [`run_benchmark`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// The distorted input, unchanged.
    Baseline,
    /// Unwarping with the true field.
    FugueIdeal,
    /// Dual-PE least squares with the true field.
    TopupIdeal,
    /// Dual-PE least squares with the field estimated from the pair.
    TopupDefault,
    /// Predictions written by the learned model.
    Neural,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Baseline,
        Method::FugueIdeal,
        Method::TopupIdeal,
        Method::TopupDefault,
        Method::Neural,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::FugueIdeal => "fugue-ideal",
            Method::TopupIdeal => "topup-ideal",
            Method::TopupDefault => "topup-default",
            Method::Neural => "neural",
        }
    }

    /// Whether the method needs the reverse-polarity acquisition.
    pub fn needs_reverse(self) -> bool {
        matches!(self, Method::TopupIdeal | Method::TopupDefault)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| PipelineError::UnknownMethod { name: s.to_string() })
    }
}

/// Parses a list of method names, rejecting unknown names and duplicates.
pub fn parse_methods<S: AsRef<str>>(names: &[S]) -> Result<Vec<Method>> {
    let mut out: Vec<Method> = Vec::new();
    for n in names {
        let m: Method = n.as_ref().trim().parse()?;
        if !out.contains(&m) {
            out.push(m);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkOptions {
    pub restore: RestoreOptions,
    /// Only samples of this split are processed; `None` takes all.
    pub split: Option<Split>,
    /// Directory holding `<sample id>/{b50,b1400,adc}` predictions for
    /// the `neural` method.
    pub neural_dir: Option<PathBuf>,
    /// When false, corrected images and confidence masks are written but
    /// nothing is scored and clean references are never read.
    pub reference: bool,
    pub peak: Peak,
}

impl Default for BenchmarkOptions {
    fn default() -> Self {
        BenchmarkOptions {
            restore: RestoreOptions::default(),
            split: Some(Split::Test),
            neural_dir: None,
            reference: true,
            peak: Peak::ReferenceMax,
        }
    }
}

/// Restored contrasts of one sample, plus method-specific extras.
#[derive(Debug, Clone)]
pub struct Corrected {
    pub b50: Image2D,
    pub b1400: Image2D,
    pub adc: Image2D,
    pub confidence_mask: Option<Image2D>,
    pub estimated_vdm: Option<DisplacementMap>,
}

/// Inputs a correction may use: the distorted acquisition, its
/// reverse-polarity partner, and the true displacement map.
#[derive(Debug, Clone)]
pub struct CorrectionInputs {
    pub b50: Image2D,
    pub b1400: Image2D,
    pub adc: Image2D,
    pub reverse: Option<(Image2D, Image2D)>,
    pub vdm: DisplacementMap,
    pub epi: EpiParams,
    pub dwi: DwiParams,
}

/// Runs one classical method. `Neural` is not handled here since its
/// outputs come from disk.
pub fn correct_sample(method: Method, inp: &CorrectionInputs, opts: &RestoreOptions) -> Result<Corrected> {
    let reverse = || {
        inp.reverse.as_ref().ok_or_else(|| {
            PipelineError::InvalidConfig(format!("{method} needs the reverse-polarity acquisition"))
        })
    };
    let (b50, b1400, confidence_mask, estimated_vdm) = match method {
        Method::Baseline => {
            return Ok(Corrected {
                b50: inp.b50.clone(),
                b1400: inp.b1400.clone(),
                adc: inp.adc.clone(),
                confidence_mask: None,
                estimated_vdm: None,
            })
        }
        Method::FugueIdeal => {
            let lo = unwarp_fieldmap(&inp.b50, &inp.vdm, opts)?;
            let hi = unwarp_fieldmap(&inp.b1400, &inp.vdm, opts)?;
            (lo.restored, hi.restored, Some(lo.confidence_mask), None)
        }
        Method::TopupIdeal => {
            let (m50, m1400) = reverse()?;
            (
                restore_dual_pe(&inp.b50, m50, &inp.vdm, opts)?,
                restore_dual_pe(&inp.b1400, m1400, &inp.vdm, opts)?,
                None,
                None,
            )
        }
        Method::TopupDefault => {
            let (m50, m1400) = reverse()?;
            let est = estimate_field_dual_pe(&inp.b50, m50, &inp.epi, opts)?;
            if !est.converged {
                warn!("field estimate did not converge after {} steps", est.iterations);
            }
            (
                restore_dual_pe(&inp.b50, m50, &est.vdm, opts)?,
                restore_dual_pe(&inp.b1400, m1400, &est.vdm, opts)?,
                None,
                Some(est.vdm),
            )
        }
        Method::Neural => {
            return Err(PipelineError::InvalidConfig(
                "neural outputs are read from disk, not computed".into(),
            ))
        }
    };
    let adc = compute_adc(&b50, &b1400, &inp.dwi)?;
    Ok(Corrected {
        b50,
        b1400,
        adc,
        confidence_mask,
        estimated_vdm,
    })
}

/// PE lines containing a non-invertible pixel inside `mask`, as a mask over
/// the whole line.
pub fn fold_line_mask(vdm: &DisplacementMap, mask: Option<&Image2D>, eps: f64) -> Image2D {
    let g = vdm.geometry();
    let axis = vdm.pe_axis();
    let (lines, ext) = g.lines(axis);
    let mut out = Image2D::zeros(g, ImageKind::Mask);
    for l in 0..lines {
        let jac = jacobian_line(&vdm.line(l));
        let folded = (0..ext).any(|p| {
            jac[p] <= eps && mask.is_none_or(|m| m.pixels()[g.line_index(axis, l, p)] != 0.0)
        });
        if folded {
            out.set_line(axis, l, &vec![1.0; ext]);
        }
    }
    match mask {
        Some(m) => {
            let px: Vec<f32> = out.pixels().iter().zip(m.pixels()).map(|(a, b)| a * b).collect();
            Image2D::new(g, ImageKind::Mask, px).expect("same grid")
        }
        None => out,
    }
}

/// Writes `b50`, `b1400`, `adc` and, when present, `confidence_mask` and
/// `vdm_px` under `dir`.
pub fn write_corrected(c: &Corrected, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    imgio::write_image(&c.b50, &dir.join("b50"))?;
    imgio::write_image(&c.b1400, &dir.join("b1400"))?;
    imgio::write_image(&c.adc, &dir.join("adc"))?;
    if let Some(m) = &c.confidence_mask {
        imgio::write_image(m, &dir.join("confidence_mask"))?;
    }
    if let Some(v) = &c.estimated_vdm {
        imgio::write_image(v.image(), &dir.join("vdm_px"))?;
    }
    Ok(())
}

fn read_neural(dir: &Path, id: &str) -> Result<Corrected> {
    let d = dir.join(id);
    Ok(Corrected {
        b50: imgio::read_image(&d.join("b50"))?,
        b1400: imgio::read_image(&d.join("b1400"))?,
        adc: imgio::read_image(&d.join("adc"))?,
        confidence_mask: None,
        estimated_vdm: None,
    })
}

fn opposite(pe: &str) -> Option<&'static str> {
    match pe {
        "lr" => Some("rl"),
        "rl" => Some("lr"),
        "ap" => Some("pa"),
        "pa" => Some("ap"),
        _ => None,
    }
}

/// Everything loaded for one sample before the methods run.
struct Loaded {
    inputs: CorrectionInputs,
    sample: Option<PairedSample>,
}

/// Reads the distorted images, true displacement and acquisition
/// parameters of a sample directory. `reverse` is left empty.
pub fn read_sample_inputs(dir: &Path) -> Result<CorrectionInputs> {
    let read = |stem: &str| imgio::read_image(&dir.join(stem));
    let params_path = dir.join(crate::forward::PARAMS_FILE);
    let text = fs::read_to_string(&params_path).map_err(io_err(&params_path))?;
    let params: crate::forward::SampleParams =
        serde_json::from_str(&text).map_err(|e| ForwardError::Params {
            path: params_path.display().to_string(),
            message: e.to_string(),
        })?;
    Ok(CorrectionInputs {
        b50: read("distorted/b50")?,
        b1400: read("distorted/b1400")?,
        adc: read("distorted/adc")?,
        reverse: None,
        vdm: DisplacementMap::new(read("truth/vdm_px")?)?,
        epi: params.epi,
        dwi: params.dwi,
    })
}

/// Reverse-polarity b50/b1400 for a sample: the distorted images of
/// `partner` when given, otherwise the clean images of `sample` splatted
/// with the negated displacement.
pub fn reverse_images(
    vdm: &DisplacementMap,
    partner: Option<&Path>,
    sample: Option<&Path>,
) -> Result<Option<(Image2D, Image2D)>> {
    if let Some(p) = partner {
        return Ok(Some((
            imgio::read_image(&p.join("distorted/b50"))?,
            imgio::read_image(&p.join("distorted/b1400"))?,
        )));
    }
    let Some(dir) = sample else { return Ok(None) };
    let neg = vdm.negated();
    let b50 = imgio::read_image(&dir.join("clean/b50"))?;
    let b1400 = imgio::read_image(&dir.join("clean/b1400"))?;
    Ok(Some((forward_splat(&b50, &neg)?, forward_splat(&b1400, &neg)?)))
}

fn load_sample(
    manifest: &DatasetManifest,
    base: &Path,
    rec: &SampleRecord,
    need_reverse: bool,
    reference: bool,
) -> Result<Loaded> {
    let dir = manifest.sample_dir(base, rec);
    let mut inputs = read_sample_inputs(&dir)?;
    let sample = if reference {
        Some(PairedSample::read_dir(&dir)?)
    } else {
        None
    };
    if need_reverse {
        let partner = opposite(&rec.pe).and_then(|pe| {
            manifest
                .samples
                .iter()
                .find(|s| s.subject == rec.subject && s.slice == rec.slice && s.pe == pe)
        });
        let partner_dir = partner.map(|p| manifest.sample_dir(base, p));
        // without references the clean images are not consulted
        let own = reference.then_some(dir.as_path());
        inputs.reverse = reverse_images(&inputs.vdm, partner_dir.as_deref(), own)?;
    }
    Ok(Loaded { inputs, sample })
}

fn score(
    rec: &SampleRecord,
    method: Method,
    sample: &PairedSample,
    out: &Corrected,
    output: &str,
    opts: &BenchmarkOptions,
) -> Result<Vec<EvalEntry>> {
    let mask = sample.clean.mask.as_ref();
    let rmse = match &out.estimated_vdm {
        Some(v) => Some(field_rmse(&sample.vdm, v, mask)?),
        None => None,
    };
    let entry = |contrast: &str, reference: &Image2D, test: &Image2D, m: Option<&Image2D>| -> Result<EvalEntry> {
        Ok(EvalEntry {
            sample_id: rec.id.clone(),
            subject: rec.subject,
            slice: rec.slice,
            method: method.as_str().to_string(),
            contrast: contrast.to_string(),
            psnr_db: psnr_with_peak(reference, test, m, opts.peak)?,
            nmse: nmse(reference, test, m)?,
            field_rmse_px: rmse,
            output: Some(output.to_string()),
        })
    };
    let mut entries = vec![
        entry("b50", &sample.clean.b50, &out.b50, mask)?,
        entry("b1400", &sample.clean.b1400, &out.b1400, mask)?,
        entry("adc", &sample.clean.adc, &out.adc, mask)?,
    ];
    let folds = fold_line_mask(&sample.vdm, mask, opts.restore.invertibility_eps);
    if folds.count_set() > 0 {
        match entry("b50_fold", &sample.clean.b50, &out.b50, Some(&folds)) {
            Ok(e) => entries.push(e),
            Err(PipelineError::Metric(MetricError::ZeroEnergyReference)) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(entries)
}

/// Corrects every selected sample with every method, writes the restored
/// images under `out_dir/restored/<method>/<sample id>/`, scores them, and
/// writes `report.json` and `report.csv`.
///
/// Per-sample failures are recorded in the report and do not stop the run.
pub fn run_benchmark(
    manifest: &DatasetManifest,
    base: &Path,
    methods: &[Method],
    out_dir: &Path,
    opts: &BenchmarkOptions,
) -> Result<EvalReport> {
    opts.restore.validate()?;
    if methods.contains(&Method::Neural) {
        match &opts.neural_dir {
            None => return Err(PipelineError::MissingNeuralDir),
            Some(d) if !d.is_dir() => return Err(PipelineError::NeuralDirNotFound(d.clone())),
            Some(_) => {}
        }
    }
    manifest.check_paths(base)?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let selected: Vec<&SampleRecord> = manifest
        .samples
        .iter()
        .filter(|s| opts.split.is_none_or(|sp| s.split == sp))
        .collect();
    let need_reverse = methods.iter().any(|m| m.needs_reverse());

    type Outcome = (Vec<EvalEntry>, Vec<Failure>);
    let outcomes: Vec<Outcome> = selected
        .par_iter()
        .map(|rec| {
            let mut entries = Vec::new();
            let mut failures = Vec::new();
            let fail = |method: &str, e: PipelineError| Failure {
                sample_id: rec.id.clone(),
                method: method.to_string(),
                message: e.to_string(),
            };
            let loaded = match load_sample(manifest, base, rec, need_reverse, opts.reference) {
                Ok(l) => l,
                Err(e) => {
                    let msg = e.to_string();
                    for m in methods {
                        failures.push(Failure {
                            sample_id: rec.id.clone(),
                            method: m.as_str().to_string(),
                            message: msg.clone(),
                        });
                    }
                    return (entries, failures);
                }
            };
            for &m in methods {
                let rel = format!("restored/{}/{}", m.as_str(), rec.id);
                let result = match m {
                    Method::Neural => read_neural(opts.neural_dir.as_deref().expect("checked"), &rec.id),
                    _ => correct_sample(m, &loaded.inputs, &opts.restore),
                }
                .and_then(|c| {
                    if m != Method::Neural {
                        write_corrected(&c, &out_dir.join(&rel))?;
                    }
                    Ok(c)
                });
                let corrected = match result {
                    Ok(c) => c,
                    Err(e) => {
                        failures.push(fail(m.as_str(), e));
                        continue;
                    }
                };
                if let Some(sample) = &loaded.sample {
                    let output = match m {
                        Method::Neural => opts
                            .neural_dir
                            .as_ref()
                            .map(|d| d.join(&rec.id).display().to_string())
                            .unwrap_or_default(),
                        _ => rel.clone(),
                    };
                    match score(rec, m, sample, &corrected, &output, opts) {
                        Ok(e) => entries.extend(e),
                        Err(e) => failures.push(fail(m.as_str(), e)),
                    }
                }
            }
            (entries, failures)
        })
        .collect();

    let mut entries = Vec::new();
    let mut failures = Vec::new();
    for (e, f) in outcomes {
        entries.extend(e);
        failures.extend(f);
    }
    for f in &failures {
        warn!("{} / {}: {}", f.sample_id, f.method, f.message);
    }
    let report = EvalReport::new(
        methods.iter().map(|m| m.as_str().to_string()).collect(),
        selected.iter().map(|s| s.id.clone()).collect(),
        entries,
        failures,
    );
    let json_path = out_dir.join(REPORT_JSON);
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    fs::write(&json_path, text + "\n").map_err(io_err(&json_path))?;
    let csv_path = out_dir.join(REPORT_CSV);
    fs::write(&csv_path, report.to_csv()).map_err(io_err(&csv_path))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> BenchmarkConfig {
        BenchmarkConfig {
            phantoms: 2,
            slices: 3,
            width: 32,
            height: 32,
            ..BenchmarkConfig::default()
        }
    }

    #[test]
    fn derive_seed_separates_parts() {
        let a = derive_seed(7, &[1, 2]);
        assert_ne!(a, derive_seed(7, &[2, 1]));
        assert_ne!(a, derive_seed(8, &[1, 2]));
        assert_eq!(a, derive_seed(7, &[1, 2]));
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        let err = "nonsense".parse::<Method>().unwrap_err().to_string();
        assert!(err.contains("fugue-ideal") && err.contains("topup-default"), "{err}");
        assert_eq!(
            parse_methods(&["baseline", "baseline", "topup-ideal"]).unwrap(),
            vec![Method::Baseline, Method::TopupIdeal]
        );
    }

    #[test]
    fn split_counts_follow_fractions() {
        let cfg = BenchmarkConfig {
            phantoms: 20,
            ..BenchmarkConfig::default()
        };
        let s = cfg.assign_splits();
        let count = |k| s.iter().filter(|&&x| x == k).count();
        assert_eq!((count(Split::Train), count(Split::Validation), count(Split::Test)), (16, 2, 2));
    }

    #[test]
    fn config_validation_names_the_field() {
        let mut cfg = small_cfg();
        cfg.split.test = 0.5;
        assert!(cfg.validate().unwrap_err().to_string().contains("sum to 1"));
        let mut cfg = small_cfg();
        cfg.fields.implant_probability = 2.0;
        assert!(cfg.validate().unwrap_err().to_string().contains("implant_probability"));
        let mut cfg = small_cfg();
        cfg.directions = vec![PeDirection::Lr, PeDirection::Lr];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_parses_from_partial_json() {
        let cfg: BenchmarkConfig = serde_json::from_str(r#"{"phantoms": 3, "fields": {"cap_hz": 500}}"#).unwrap();
        assert_eq!(cfg.phantoms, 3);
        assert_eq!(cfg.fields.cap_hz, 500.0);
        assert_eq!(cfg.fields.harmonic_order, 6);
        assert_eq!(cfg.directions.len(), 4);
    }

    #[test]
    fn fold_lines_cover_whole_lines() {
        let g = crate::imgio::Geometry::new(4, 10);
        let mut shifts = vec![0.0f32; 40];
        // column 2 compresses sharply between rows 4 and 6
        shifts[4 * 4 + 2] = 1.0;
        shifts[6 * 4 + 2] = -1.0;
        let vdm = DisplacementMap::from_shifts(g, crate::imgio::PeAxis::Row, shifts).unwrap();
        let m = fold_line_mask(&vdm, None, 0.05);
        for r in 0..10 {
            for c in 0..4 {
                assert_eq!(m.get(r, c), if c == 2 { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn neural_without_dir_fails_before_work() {
        let dir = tempfile::tempdir().unwrap();
        let m = DatasetManifest::new(0);
        let err = run_benchmark(&m, dir.path(), &[Method::Neural], &dir.path().join("out"), &BenchmarkOptions::default());
        assert!(matches!(err, Err(PipelineError::MissingNeuralDir)));
        assert!(!dir.path().join("out").exists());
    }
}
