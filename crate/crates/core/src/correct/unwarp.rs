use rayon::prelude::*;

use super::{check_pair, RestoreOptions, Result};
use crate::forward::DisplacementMap;
use crate::imgio::{Image2D, ImageKind};

/// Restored image plus a mask that is 0 where the warp folds.
#[derive(Debug, Clone, PartialEq)]
pub struct UnwarpResult {
    pub restored: Image2D,
    pub confidence_mask: Image2D,
}

/// `1 + ∂d/∂x` at each sample, by central differences (one-sided at the ends).
pub fn jacobian_line(shifts: &[f64]) -> Vec<f64> {
    let n = shifts.len();
    (0..n)
        .map(|i| {
            let deriv = match n {
                0 | 1 => 0.0,
                _ if i == 0 => shifts[1] - shifts[0],
                _ if i == n - 1 => shifts[n - 1] - shifts[n - 2],
                _ => 0.5 * (shifts[i + 1] - shifts[i - 1]),
            };
            1.0 + deriv
        })
        .collect()
}

/// Linear interpolation with zero outside the line.
pub(crate) fn sample_linear(line: &[f64], y: f64) -> f64 {
    let k = y.floor();
    let f = y - k;
    let k = k as i64;
    let at = |i: i64| {
        if i >= 0 && (i as usize) < line.len() {
            line[i as usize]
        } else {
            0.0
        }
    };
    if f == 0.0 {
        at(k)
    } else {
        (1.0 - f) * at(k) + f * at(k + 1)
    }
}

/// Unwarps one PE line. Returns the restored samples and a validity flag per
/// sample.
pub fn unwarp_line(distorted: &[f64], shifts: &[f64], eps: f64) -> (Vec<f64>, Vec<bool>) {
    let n = distorted.len();
    let jac = jacobian_line(shifts);
    let valid: Vec<bool> = jac.iter().map(|&j| j > eps).collect();
    // Source x was deposited around x + d(x); pull it back and undo the
    // density change.
    let mut out: Vec<f64> = (0..n)
        .map(|i| {
            if valid[i] {
                sample_linear(distorted, i as f64 + shifts[i]) * jac[i]
            } else {
                0.0
            }
        })
        .collect();
    if valid.iter().any(|&v| !v) {
        let filled = fill_nearest(&out, &valid);
        out = filled;
    }
    (out, valid)
}

/// Replaces invalid samples with the nearest valid sample (lower index wins
/// ties). Lines with no valid sample become zero.
fn fill_nearest(values: &[f64], valid: &[bool]) -> Vec<f64> {
    let n = values.len();
    let mut prev = vec![None; n];
    let mut last = None;
    for i in 0..n {
        if valid[i] {
            last = Some(i);
        }
        prev[i] = last;
    }
    let mut next = vec![None; n];
    last = None;
    for i in (0..n).rev() {
        if valid[i] {
            last = Some(i);
        }
        next[i] = last;
    }
    (0..n)
        .map(|i| {
            if valid[i] {
                return values[i];
            }
            let src = match (prev[i], next[i]) {
                (Some(p), Some(q)) => {
                    if i - p <= q - i {
                        Some(p)
                    } else {
                        Some(q)
                    }
                }
                (Some(p), None) => Some(p),
                (None, Some(q)) => Some(q),
                (None, None) => None,
            };
            src.map_or(0.0, |s| values[s])
        })
        .collect()
}

/// Field-map unwarping with a known displacement map.
///
/// Each output pixel `x` takes the distorted intensity at `x + d(x)` scaled
/// by `1 + d'(x)`. Where `1 + d'(x) <= invertibility_eps` the warp has
/// folded; those pixels get confidence 0 and the nearest valid value along
/// the PE line.
pub fn unwarp_fieldmap(
    distorted: &Image2D,
    vdm: &DisplacementMap,
    opts: &RestoreOptions,
) -> Result<UnwarpResult> {
    check_pair(distorted, distorted, Some(vdm))?;
    let axis = vdm.pe_axis();
    let g = distorted.geometry();
    let (n_lines, _) = g.lines(axis);
    let lines: Vec<(Vec<f64>, Vec<bool>)> = (0..n_lines)
        .into_par_iter()
        .map(|l| unwarp_line(&distorted.line(axis, l), &vdm.line(l), opts.invertibility_eps))
        .collect();
    let mut restored = distorted.clone().with_pe_axis(None);
    let mut mask = Image2D::zeros(g, ImageKind::Mask);
    for (l, (vals, valid)) in lines.iter().enumerate() {
        restored.set_line(axis, l, vals);
        let m: Vec<f64> = valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
        mask.set_line(axis, l, &m);
    }
    Ok(UnwarpResult {
        restored,
        confidence_mask: mask,
    })
}
