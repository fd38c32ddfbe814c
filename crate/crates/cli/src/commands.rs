use std::fs;
use std::path::{Path, PathBuf};

use epiwarp::dwi::generate_phantom;
use epiwarp::field::{dipole_phantom_field, fit_harmonic, harmonic_residual, synthesize_field, FieldMapHz};
use epiwarp::forward::{simulate_pair, CleanInputs};
use epiwarp::imgio::{manifest_base, read_image, read_manifest, write_image, Split};
use epiwarp::metrics::Granularity;
use epiwarp::pipeline::{
    correct_sample, parse_methods, read_sample_inputs, reverse_images, write_corrected, BenchmarkOptions,
    Method, REPORT_CSV, REPORT_JSON,
};
use epiwarp::{make_dataset, run_benchmark, PhantomSpec};
use log::{info, warn};

use crate::config::Config;
use crate::error::CliError;
use crate::export;

fn create_out(out: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out).map_err(|source| CliError::Io {
        path: out.to_path_buf(),
        source,
    })
}

fn require_dir(flag: &str, path: &Path) -> Result<(), CliError> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{flag} {}: directory not found", path.display())))
    }
}

/// Smallest phantom side that still holds the anatomy.
const MIN_PHANTOM_SIDE: usize = 16;

pub fn phantom(cfg: &Config, out: &Path) -> Result<(), CliError> {
    let p = &cfg.phantom;
    if p.width < MIN_PHANTOM_SIDE || p.height < MIN_PHANTOM_SIDE {
        return Err(CliError::Usage(format!(
            "phantom.width and phantom.height must be at least {MIN_PHANTOM_SIDE}, got {}x{}",
            p.width, p.height
        )));
    }
    if !(p.noise_sigma >= 0.0 && p.noise_sigma.is_finite()) {
        return Err(CliError::Usage(format!(
            "phantom.noise_sigma must be >= 0, got {}",
            p.noise_sigma
        )));
    }
    let mut spec = if p.randomized {
        PhantomSpec::randomized(p.width, p.height, cfg.seed)
    } else {
        PhantomSpec::standard(p.width, p.height)
    };
    spec.noise_sigma = p.noise_sigma;
    spec.seed = cfg.seed;
    // generate_phantom logs its own warnings
    let ph = generate_phantom(&spec)?;
    create_out(out)?;
    for (name, img) in [("b50", &ph.dwi_b50), ("adc", &ph.adc), ("t2w", &ph.t2w), ("mask", &ph.mask)] {
        write_image(img, &out.join(name))?;
    }
    println!(
        "phantom {}x{} (seed {}) written to {}",
        p.width,
        p.height,
        cfg.seed,
        out.display()
    );
    Ok(())
}

fn load_field(cfg: &Config, field: Option<&Path>, mask: &epiwarp::Image2D) -> Result<FieldMapHz, CliError> {
    let s = &cfg.simulate;
    let raw = match (field, &s.dipoles) {
        (Some(path), _) => FieldMapHz::new(read_image(path)?)?,
        (None, Some(d)) => dipole_phantom_field(d, mask.geometry())?,
        (None, None) => {
            return Err(CliError::Usage(
                "simulate needs --field or a [simulate.dipoles] table in the config".into(),
            ))
        }
    };
    let Some(mut perturb) = s.perturbation else {
        return Ok(raw);
    };
    perturb.seed = cfg.seed;
    let coeffs = fit_harmonic(&raw, s.harmonic_order, Some(mask))?;
    let residual = harmonic_residual(&raw, &coeffs);
    Ok(synthesize_field(&coeffs, &residual, &perturb)?)
}

pub fn simulate(cfg: &Config, input: &Path, field: Option<&Path>, out: &Path) -> Result<(), CliError> {
    require_dir("--in", input)?;
    let read = |name: &str| read_image(&input.join(name));
    let b50 = read("b50")?;
    let mask = read("mask")?;
    let field = load_field(cfg, field, &mask)?;
    let clean = CleanInputs {
        b50,
        adc: read("adc")?,
        t2w: read("t2w")?,
        mask: Some(mask),
    };
    let s = &cfg.simulate;
    let pair = simulate_pair(&clean, &field, &s.direction.apply(&s.epi), &s.dwi)?;
    create_out(out)?;
    pair.write_dir(out)?;
    println!(
        "simulated {} sample: max shift {:.2} px, dropped {:.4} of the signal, written to {}",
        s.direction,
        pair.vdm.max_abs(),
        pair.dropped_fraction,
        out.display()
    );
    Ok(())
}

pub fn make_dataset_cmd(cfg: &Config, out: &Path) -> Result<(), CliError> {
    let manifest = make_dataset(&cfg.dataset, out)?;
    let d = &cfg.dataset;
    let expected = d.phantoms * d.slices * d.directions.len();
    println!(
        "{} of {expected} samples written to {}",
        manifest.samples.len(),
        out.display()
    );
    Ok(())
}

/// Methods the `correct` subcommand accepts.
pub const CORRECT_METHODS: [Method; 3] = [Method::FugueIdeal, Method::TopupIdeal, Method::TopupDefault];

pub fn parse_correct_method(name: &str) -> Result<Method, CliError> {
    name.parse::<Method>()
        .ok()
        .filter(|m| CORRECT_METHODS.contains(m))
        .ok_or_else(|| {
            let valid: Vec<&str> = CORRECT_METHODS.iter().map(|m| m.as_str()).collect();
            CliError::Usage(format!(
                "unknown method `{name}` (valid methods: {})",
                valid.join(", ")
            ))
        })
}

pub fn correct(
    cfg: &Config,
    method: &str,
    input: &Path,
    reverse: Option<&Path>,
    out: &Path,
) -> Result<(), CliError> {
    let method = parse_correct_method(method)?;
    require_dir("--in", input)?;
    if let Some(r) = reverse {
        require_dir("--reverse", r)?;
    }
    let mut inputs = read_sample_inputs(input)?;
    if method.needs_reverse() {
        inputs.reverse = reverse_images(&inputs.vdm, reverse, Some(input))?;
        if reverse.is_none() {
            info!("no --reverse sample; splatting the clean images with the negated displacement");
        }
    }
    let corrected = correct_sample(method, &inputs, &cfg.restore)?;
    create_out(out)?;
    write_corrected(&corrected, out)?;
    if let Some(m) = &corrected.confidence_mask {
        let folded = m.pixels().len() - m.count_set();
        println!("{method}: {folded} folded pixels flagged in confidence_mask");
    }
    println!("{method}: restored images written to {}", out.display());
    Ok(())
}

pub struct EvaluateArgs<'a> {
    pub manifest: &'a Path,
    pub methods: &'a [String],
    pub out: &'a Path,
    pub neural_dir: Option<PathBuf>,
    pub no_reference: bool,
    pub split: Option<Split>,
    pub granularity: Granularity,
}

pub fn evaluate(cfg: &Config, a: &EvaluateArgs) -> Result<(), CliError> {
    let methods = parse_methods(a.methods)?;
    if methods.is_empty() {
        return Err(CliError::Usage("--methods: at least one method is required".into()));
    }
    if !a.manifest.is_file() {
        return Err(CliError::Usage(format!("--manifest {}: file not found", a.manifest.display())));
    }
    let manifest = read_manifest(a.manifest)?;
    let opts = BenchmarkOptions {
        restore: cfg.restore,
        split: a.split,
        neural_dir: a.neural_dir.clone(),
        reference: !a.no_reference,
        ..BenchmarkOptions::default()
    };
    let report = run_benchmark(&manifest, &manifest_base(a.manifest), &methods, a.out, &opts)?;
    if a.no_reference {
        println!(
            "{} samples corrected without references; images under {}",
            report.sample_ids.len(),
            a.out.join("restored").display()
        );
    } else {
        print!("{}", report.summary_table(a.granularity));
        println!(
            "report: {}, {}",
            a.out.join(REPORT_JSON).display(),
            a.out.join(REPORT_CSV).display()
        );
    }
    if !report.failures.is_empty() {
        warn!("{} sample/method runs failed; see report.json", report.failures.len());
    }
    Ok(())
}

pub fn export_png(inputs: &[PathBuf], out: &Path, window: Option<(f32, f32)>) -> Result<(), CliError> {
    eprintln!("note: PNG export is lossy (8-bit, windowed) and meant for viewing only");
    let written = export::export(inputs, out, window)?;
    println!("{} PNG files written to {}", written.len(), out.display());
    Ok(())
}
