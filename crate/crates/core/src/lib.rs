//! Simulation and correction of susceptibility-induced distortion in
//! single-shot EPI diffusion-weighted prostate MRI.
//!
//! The crate covers the full desk-scale pipeline: synthetic B0 field maps,
//! the forward displacement model, diffusion phantoms, three classical
//! correction methods, and a paired benchmark with PSNR/NMSE reporting.

pub mod correct;
pub mod dwi;
pub mod field;
pub mod forward;
pub mod imgio;
pub mod linalg;
pub mod metrics;
pub mod pipeline;

pub use correct::{
    estimate_field_dual_pe, restore_dual_pe, unwarp_fieldmap, CorrectError, FieldEstimate,
    RestoreOptions, UnwarpResult,
};
pub use dwi::{compute_adc, generate_phantom, synth_high_b, DwiParams, Phantom, PhantomSpec};
pub use field::{fit_harmonic, synthesize_field, FieldMapHz, HarmonicCoeffs, Perturbation};
pub use forward::{
    compute_vdm, forward_splat, simulate_pair, DisplacementMap, EpiParams, PairedSample,
    PeDirection,
};
pub use imgio::{read_image, write_image, DatasetManifest, Geometry, Image2D, ImageKind, PeAxis};
pub use metrics::{field_rmse, nmse, psnr, EvalReport};
pub use pipeline::{make_dataset, run_benchmark, BenchmarkConfig, BenchmarkOptions, Method};
