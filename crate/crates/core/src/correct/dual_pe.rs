use rayon::prelude::*;

use super::{check_pair, CorrectError, RestoreOptions, Result};
use crate::forward::DisplacementMap;
use crate::imgio::Image2D;
use crate::linalg::SymBand;

/// Relative pivot threshold below which a line is declared ill-posed.
const PIVOT_TOL: f64 = 1e-10;

/// Column-sparse splat matrix of one line: for every target sample, the
/// `(source, weight)` pairs that deposit into it.
fn splat_targets(shifts: &[f64]) -> Vec<Vec<(usize, f64)>> {
    let n = shifts.len();
    let mut targets = vec![Vec::new(); n];
    for (i, &d) in shifts.iter().enumerate() {
        let t = i as f64 + d;
        let k = t.floor();
        let f = t - k;
        let k = k as i64;
        for (pos, w) in [(k, 1.0 - f), (k + 1, f)] {
            if w != 0.0 && pos >= 0 && (pos as usize) < n {
                targets[pos as usize].push((i, w));
            }
        }
    }
    targets
}

fn apply_targets(targets: &[Vec<(usize, f64)>], u: &[f64]) -> Vec<f64> {
    targets
        .iter()
        .map(|t| t.iter().map(|&(i, w)| w * u[i]).sum())
        .collect()
}

/// Data and smoothness terms of the dual-PE objective for one line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineObjective {
    /// `‖A₊u − I₊‖² + ‖A₋u − I₋‖²`
    pub data: f64,
    /// `‖Du‖²`
    pub smoothness: f64,
}

impl LineObjective {
    pub fn total(&self, lambda: f64) -> f64 {
        self.data + lambda * self.smoothness
    }
}

/// Evaluates the objective at `u` for shifts `+shifts` / `-shifts`.
pub fn dual_pe_objective(plus: &[f64], minus: &[f64], shifts: &[f64], u: &[f64]) -> LineObjective {
    let neg: Vec<f64> = shifts.iter().map(|d| -d).collect();
    let mut data = 0.0;
    for (img, s) in [(plus, shifts), (minus, neg.as_slice())] {
        let pred = apply_targets(&splat_targets(s), u);
        data += pred
            .iter()
            .zip(img)
            .map(|(p, y)| (p - y) * (p - y))
            .sum::<f64>();
    }
    let smoothness = u.windows(2).map(|w| (w[1] - w[0]).powi(2)).sum();
    LineObjective { data, smoothness }
}

/// Solves `min ‖A₊u − I₊‖² + ‖A₋u − I₋‖² + λ‖Du‖²` for one PE line, where
/// `A₊`/`A₋` splat by `+shifts`/`-shifts` and `D` is the first difference.
///
/// Returns `None` when the normal matrix is singular.
pub fn solve_dual_pe_line(
    plus: &[f64],
    minus: &[f64],
    shifts: &[f64],
    lambda: f64,
) -> Option<Vec<f64>> {
    let n = shifts.len();
    let neg: Vec<f64> = shifts.iter().map(|d| -d).collect();
    let systems = [(splat_targets(shifts), plus), (splat_targets(&neg), minus)];

    let mut bw = if lambda > 0.0 { 1 } else { 0 };
    for (targets, _) in &systems {
        for t in targets {
            if let (Some(lo), Some(hi)) = (t.iter().map(|p| p.0).min(), t.iter().map(|p| p.0).max()) {
                bw = bw.max(hi - lo);
            }
        }
    }
    let mut normal = SymBand::zeros(n, bw);
    let mut rhs = vec![0.0; n];
    for (targets, img) in &systems {
        for (k, t) in targets.iter().enumerate() {
            for (a, &(i, wi)) in t.iter().enumerate() {
                rhs[i] += wi * img[k];
                // SymBand stores each symmetric pair once
                for &(j, wj) in &t[a..] {
                    normal.add(i, j, wi * wj);
                }
            }
        }
    }
    if lambda > 0.0 {
        for i in 0..n.saturating_sub(1) {
            normal.add(i, i, lambda);
            normal.add(i + 1, i + 1, lambda);
            normal.add(i + 1, i, -lambda);
        }
    }
    normal.solve_ldlt(&rhs, PIVOT_TOL).ok()
}

/// Dual phase-encoding restoration with a known displacement map.
///
/// `vdm` is the displacement of `img_plus`; `img_minus` was acquired with
/// the opposite polarity. Output is clamped at zero.
pub fn restore_dual_pe(
    img_plus: &Image2D,
    img_minus: &Image2D,
    vdm: &DisplacementMap,
    opts: &RestoreOptions,
) -> Result<Image2D> {
    opts.validate()?;
    check_pair(img_plus, img_minus, Some(vdm))?;
    let axis = vdm.pe_axis();
    let (n_lines, _) = img_plus.geometry().lines(axis);
    let solved: Vec<Option<Vec<f64>>> = (0..n_lines)
        .into_par_iter()
        .map(|l| {
            solve_dual_pe_line(
                &img_plus.line(axis, l),
                &img_minus.line(axis, l),
                &vdm.line(l),
                opts.lambda_smooth,
            )
        })
        .collect();
    let bad: Vec<usize> = solved
        .iter()
        .enumerate()
        .filter(|(_, s)| s.is_none())
        .map(|(l, _)| l)
        .collect();
    if !bad.is_empty() {
        return Err(CorrectError::IllPosedColumns { lines: bad });
    }
    let mut out = img_plus.clone().with_pe_axis(None);
    for (l, u) in solved.into_iter().enumerate() {
        let u: Vec<f64> = u.expect("checked").into_iter().map(|v| v.max(0.0)).collect();
        out.set_line(axis, l, &u);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::splat_line;
    use crate::imgio::{Geometry, ImageKind, PeAxis};

    #[test]
    fn zero_shift_unregularized_is_mean() {
        let g = Geometry::new(5, 6);
        let p = Image2D::from_fn(g, ImageKind::DwiB50, |r, c| (r * 5 + c) as f32 * 0.31 + 0.07);
        let m = Image2D::from_fn(g, ImageKind::DwiB50, |r, c| ((r + 2 * c) % 7) as f32 * 0.53);
        let opts = RestoreOptions {
            lambda_smooth: 0.0,
            ..Default::default()
        };
        let out = restore_dual_pe(&p, &m, &DisplacementMap::zeros(g, PeAxis::Col), &opts).unwrap();
        for i in 0..30 {
            let expect = ((p.pixels()[i] as f64 + m.pixels()[i] as f64) / 2.0) as f32;
            assert_eq!(out.pixels()[i], expect);
        }
    }

    #[test]
    fn solves_match_dense_normal_equations() {
        let n = 24;
        let shifts: Vec<f64> = (0..n).map(|i| 3.0 * (i as f64 / 5.0).sin()).collect();
        let plus: Vec<f64> = (0..n).map(|i| 1.0 + (i as f64 * 0.7).cos()).collect();
        let minus: Vec<f64> = (0..n).map(|i| 1.0 + (i as f64 * 0.3).sin()).collect();
        let lambda = 0.1;
        let u = solve_dual_pe_line(&plus, &minus, &shifts, lambda).unwrap();

        // dense oracle: build A± column by column from splat_line of unit vectors
        let build = |s: &[f64]| -> Vec<Vec<f64>> {
            (0..n)
                .map(|i| {
                    let mut e = vec![0.0; n];
                    e[i] = 1.0;
                    let mut col = vec![0.0; n];
                    splat_line(&e, s, &mut col);
                    col
                })
                .collect()
        };
        let neg: Vec<f64> = shifts.iter().map(|d| -d).collect();
        let (ap, am) = (build(&shifts), build(&neg));
        let mut h = vec![0.0; n * n];
        let mut b = vec![0.0; n];
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for k in 0..n {
                    s += ap[i][k] * ap[j][k] + am[i][k] * am[j][k];
                }
                h[i * n + j] = s;
            }
            for k in 0..n {
                b[i] += ap[i][k] * plus[k] + am[i][k] * minus[k];
            }
        }
        for i in 0..n {
            h[i * n + i] += lambda * if i == 0 || i == n - 1 { 1.0 } else { 2.0 };
            if i + 1 < n {
                h[i * n + i + 1] -= lambda;
                h[(i + 1) * n + i] -= lambda;
            }
        }
        let x = crate::linalg::cholesky_solve(&h, n, &b).unwrap();
        for i in 0..n {
            assert!((u[i] - x[i]).abs() < 1e-9, "{i}: {} vs {}", u[i], x[i]);
        }
    }

    #[test]
    fn lambda_path_trades_data_for_smoothness() {
        let n = 48;
        let shifts: Vec<f64> = (0..n).map(|i| 4.0 * (i as f64 / 9.0).sin()).collect();
        let truth: Vec<f64> = (0..n).map(|i| if (12..30).contains(&i) { 1.0 } else { 0.3 }).collect();
        let mut plus = vec![0.0; n];
        let mut minus = vec![0.0; n];
        splat_line(&truth, &shifts, &mut plus);
        let neg: Vec<f64> = shifts.iter().map(|d| -d).collect();
        splat_line(&truth, &neg, &mut minus);
        for (k, v) in plus.iter_mut().chain(minus.iter_mut()).enumerate() {
            *v += 0.05 * ((k * 7919 % 101) as f64 / 50.0 - 1.0);
        }
        let objs: Vec<LineObjective> = [0.01, 0.1, 1.0]
            .iter()
            .map(|&l| {
                let u = solve_dual_pe_line(&plus, &minus, &shifts, l).unwrap();
                dual_pe_objective(&plus, &minus, &shifts, &u)
            })
            .collect();
        for w in objs.windows(2) {
            assert!(w[1].data >= w[0].data - 1e-12);
            assert!(w[1].smoothness <= w[0].smoothness + 1e-12);
        }
    }

    #[test]
    fn fully_emptied_line_is_ill_posed_without_regularization() {
        let g = Geometry::new(3, 8);
        // Sources 2..=5 of column 1 leave the grid in both polarities, so
        // nothing constrains them.
        let mut shifts = vec![0.0f32; 24];
        for r in 0..8 {
            shifts[r * 3 + 1] = if r < 4 { 6.5 } else { -6.5 };
        }
        let vdm = DisplacementMap::from_shifts(g, PeAxis::Row, shifts).unwrap();
        let img = Image2D::filled(g, ImageKind::DwiB50, 1.0);
        let opts = RestoreOptions {
            lambda_smooth: 0.0,
            ..Default::default()
        };
        match restore_dual_pe(&img, &img, &vdm, &opts) {
            Err(CorrectError::IllPosedColumns { lines }) => assert_eq!(lines, vec![1]),
            other => panic!("expected ill-posed error, got {other:?}"),
        }
        assert!(restore_dual_pe(&img, &img, &vdm, &RestoreOptions::default()).is_ok());
    }
}
