//! Classical inverse methods for EPI distortion.
//!
//! All three methods work line by line along the phase-encoding axis, since
//! the forward model only moves signal along that axis.
//!
//! - [`unwarp_fieldmap`]: resample with a known displacement map and apply
//!   the Jacobian, flagging non-invertible pixels.
//! - [`restore_dual_pe`]: regularized least-squares reconstruction from a
//!   forward/reverse polarity pair with a known displacement map.
//! - [`estimate_field_dual_pe`]: estimate the displacement map itself from
//!   the pair, coarse to fine.

mod dual_pe;
mod estimate;
mod unwarp;

pub use dual_pe::{dual_pe_objective, restore_dual_pe, solve_dual_pe_line, LineObjective};
pub use estimate::{estimate_field_dual_pe, FieldEstimate};
pub use unwarp::{jacobian_line, unwarp_fieldmap, unwarp_line, UnwarpResult};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::forward::{DisplacementMap, ForwardError};
use crate::imgio::{Image2D, ImageError};

#[derive(Debug, Error)]
pub enum CorrectError {
    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),
    #[error("ill-posed system on PE lines {lines:?} (fully folded or emptied; use lambda_smooth > 0)")]
    IllPosedColumns { lines: Vec<usize> },
    #[error("invalid restore options: {0}")]
    InvalidOptions(String),
    #[error(transparent)]
    Forward(#[from] ForwardError),
    #[error(transparent)]
    Image(#[from] ImageError),
}

pub type Result<T, E = CorrectError> = std::result::Result<T, E>;

/// Solver settings shared by the correction methods.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RestoreOptions {
    /// Weight of the first-difference penalty in the dual-PE solve,
    /// relative to unit-normalized intensities.
    pub lambda_smooth: f64,
    /// Pixels with `1 + ∂d/∂x <= invertibility_eps` are treated as folded.
    pub invertibility_eps: f64,
    /// Gauss-Newton iterations per pyramid level in field estimation.
    pub max_iters: usize,
    /// Stop when the largest control-point update (px) falls below this.
    pub tol: f64,
    pub pyramid_levels: usize,
    /// Spacing of the displacement control grid in full-resolution pixels.
    pub control_spacing_px: f64,
    /// Weight of the bending penalty on the displacement control grid.
    pub field_smoothness: f64,
}

impl Default for RestoreOptions {
    fn default() -> Self {
        RestoreOptions {
            lambda_smooth: 0.05,
            invertibility_eps: 0.05,
            max_iters: 40,
            tol: 1e-4,
            pyramid_levels: 4,
            control_spacing_px: 8.0,
            field_smoothness: 1e-4,
        }
    }
}

impl RestoreOptions {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CorrectError::InvalidOptions(m));
        if !(self.lambda_smooth >= 0.0 && self.lambda_smooth.is_finite()) {
            return bad(format!("lambda_smooth must be >= 0, got {}", self.lambda_smooth));
        }
        if !self.invertibility_eps.is_finite() {
            return bad("invertibility_eps must be finite".into());
        }
        if self.pyramid_levels < 1 {
            return bad("pyramid_levels must be >= 1".into());
        }
        if self.control_spacing_px.is_nan() || self.control_spacing_px < 1.0 {
            return bad(format!(
                "control_spacing_px must be >= 1, got {}",
                self.control_spacing_px
            ));
        }
        if !(self.field_smoothness >= 0.0 && self.field_smoothness.is_finite()) {
            return bad("field_smoothness must be >= 0".into());
        }
        if self.tol.is_nan() || self.tol < 0.0 {
            return bad("tol must be >= 0".into());
        }
        Ok(())
    }
}

fn check_pair(a: &Image2D, b: &Image2D, vdm: Option<&DisplacementMap>) -> Result<()> {
    a.ensure_same_shape(b)
        .map_err(|e| CorrectError::GeometryMismatch(e.to_string()))?;
    if let Some(v) = vdm {
        a.ensure_same_shape(v.image())
            .map_err(|e| CorrectError::GeometryMismatch(e.to_string()))?;
        for img in [a, b] {
            if let Some(axis) = img.pe_axis() {
                if axis != v.pe_axis() {
                    return Err(CorrectError::GeometryMismatch(format!(
                        "image pe_axis {} differs from displacement map pe_axis {}",
                        axis.as_str(),
                        v.pe_axis().as_str()
                    )));
                }
            }
        }
    }
    Ok(())
}
