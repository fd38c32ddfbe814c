use log::debug;

use super::{check_pair, CorrectError, RestoreOptions, Result};
use crate::field::FieldMapHz;
use crate::forward::{DisplacementMap, EpiParams};
use crate::imgio::{Image2D, PeAxis};
use crate::linalg::SymBand;

/// Output of [`estimate_field_dual_pe`].
#[derive(Debug, Clone, PartialEq)]
pub struct FieldEstimate {
    /// Displacement of the plus image, in pixels.
    pub vdm: DisplacementMap,
    /// The same field in Hz for the supplied EPI parameters.
    pub field_hz: FieldMapHz,
    /// Whether the finest level met `tol` within `max_iters`.
    pub converged: bool,
    /// Accepted plus rejected steps over all levels.
    pub iterations: usize,
    /// Final objective on the finest level.
    pub cost: f64,
}

/// Line-major working image: `data[line * ext + pos]`.
#[derive(Debug, Clone)]
struct Plane {
    lines: usize,
    ext: usize,
    data: Vec<f64>,
}

impl Plane {
    fn from_image(img: &Image2D, axis: PeAxis, scale: f64) -> Plane {
        let (lines, ext) = img.geometry().lines(axis);
        let mut data = Vec::with_capacity(lines * ext);
        for l in 0..lines {
            data.extend(img.line(axis, l).into_iter().map(|v| v * scale));
        }
        Plane { lines, ext, data }
    }

    fn row(&self, l: usize) -> &[f64] {
        &self.data[l * self.ext..(l + 1) * self.ext]
    }

    /// Blur with the 5-tap binomial kernel (edge-clamped) and keep every
    /// second sample in both directions.
    fn reduce(&self) -> Plane {
        const K: [f64; 5] = [1.0, 4.0, 6.0, 4.0, 1.0];
        let blur = |get: &dyn Fn(usize) -> f64, i: usize, n: usize| -> f64 {
            let mut s = 0.0;
            for (t, &k) in K.iter().enumerate() {
                let j = (i as i64 + t as i64 - 2).clamp(0, n as i64 - 1) as usize;
                s += k * get(j);
            }
            s / 16.0
        };
        let ext = self.ext.div_ceil(2);
        let lines = self.lines.div_ceil(2);
        let mut tmp = vec![0.0; self.lines * ext];
        for l in 0..self.lines {
            let row = self.row(l);
            for p in 0..ext {
                tmp[l * ext + p] = blur(&|j| row[j], 2 * p, self.ext);
            }
        }
        let mut data = vec![0.0; lines * ext];
        for q in 0..lines {
            for p in 0..ext {
                data[q * ext + p] = blur(&|j| tmp[j * ext + p], 2 * q, self.lines);
            }
        }
        Plane { lines, ext, data }
    }

    /// Central difference along each line, with zero outside the line.
    fn gradient(&self) -> Plane {
        let mut data = vec![0.0; self.data.len()];
        for l in 0..self.lines {
            let row = self.row(l);
            for p in 0..self.ext {
                let lo = if p > 0 { row[p - 1] } else { 0.0 };
                let hi = if p + 1 < self.ext { row[p + 1] } else { 0.0 };
                data[l * self.ext + p] = 0.5 * (hi - lo);
            }
        }
        Plane {
            lines: self.lines,
            ext: self.ext,
            data,
        }
    }
}

/// Four cubic B-spline taps: first control index plus values and
/// derivatives (per full-resolution pixel).
#[derive(Debug, Clone, Copy)]
struct Taps {
    first: usize,
    w: [f64; 4],
    dw: [f64; 4],
}

fn taps(x: f64, spacing: f64) -> Taps {
    let t = x / spacing;
    let i = t.floor();
    let u = t - i;
    let (u2, u3) = (u * u, u * u * u);
    let w = [
        (1.0 - u).powi(3) / 6.0,
        (3.0 * u3 - 6.0 * u2 + 4.0) / 6.0,
        (-3.0 * u3 + 3.0 * u2 + 3.0 * u + 1.0) / 6.0,
        u3 / 6.0,
    ];
    let dw = [
        -(1.0 - u).powi(2) / 2.0 / spacing,
        (1.5 * u2 - 2.0 * u) / spacing,
        (-1.5 * u2 + u + 0.5) / spacing,
        u2 / 2.0 / spacing,
    ];
    // control point i - 1 is stored at index i
    Taps {
        first: i as usize,
        w,
        dw,
    }
}

/// Control-point count covering `[0, len - 1]` at `spacing`.
fn grid_len(len: usize, spacing: f64) -> usize {
    ((len.saturating_sub(1)) as f64 / spacing).floor() as usize + 4
}

/// Cubic B-spline displacement grid in full-resolution pixels.
struct Spline {
    spacing: f64,
    n_pos: usize,
    n_line: usize,
}

impl Spline {
    fn len(&self) -> usize {
        self.n_pos * self.n_line
    }

    fn idx(&self, line_cp: usize, pos_cp: usize) -> usize {
        line_cp * self.n_pos + pos_cp
    }

    /// Bandwidth of the normal matrix in the line-major control ordering.
    fn bandwidth(&self) -> usize {
        3 * self.n_pos + 3
    }

    /// `(d, ∂d/∂X)` at full-resolution coordinates.
    fn eval(&self, c: &[f64], tp: &Taps, tl: &Taps) -> (f64, f64) {
        let (mut d, mut dd) = (0.0, 0.0);
        for (b, wl) in tl.w.iter().enumerate() {
            let base = self.idx(tl.first + b, tp.first);
            for a in 0..4 {
                d += wl * tp.w[a] * c[base + a];
                dd += wl * tp.dw[a] * c[base + a];
            }
        }
        (d, dd)
    }

    /// Second differences of the coefficients along both grid directions.
    fn bending(&self, c: &[f64]) -> f64 {
        let mut s = 0.0;
        for q in 0..self.n_line {
            for p in 1..self.n_pos - 1 {
                let v = c[self.idx(q, p - 1)] - 2.0 * c[self.idx(q, p)] + c[self.idx(q, p + 1)];
                s += v * v;
            }
        }
        for q in 1..self.n_line - 1 {
            for p in 0..self.n_pos {
                let v = c[self.idx(q - 1, p)] - 2.0 * c[self.idx(q, p)] + c[self.idx(q + 1, p)];
                s += v * v;
            }
        }
        s
    }

    /// Adds `w · LᵀL` and returns `w · LᵀL c` for the bending operator.
    fn add_bending(&self, h: &mut SymBand, c: &[f64], w: f64) -> Vec<f64> {
        let mut g = vec![0.0; self.len()];
        let mut stencil = |ids: [usize; 3]| {
            let coef = [1.0, -2.0, 1.0];
            let v: f64 = (0..3).map(|k| coef[k] * c[ids[k]]).sum();
            for a in 0..3 {
                g[ids[a]] += w * coef[a] * v;
                for b in a..3 {
                    h.add(ids[a], ids[b], w * coef[a] * coef[b]);
                }
            }
        };
        for q in 0..self.n_line {
            for p in 1..self.n_pos - 1 {
                stencil([self.idx(q, p - 1), self.idx(q, p), self.idx(q, p + 1)]);
            }
        }
        for q in 1..self.n_line - 1 {
            for p in 0..self.n_pos {
                stencil([self.idx(q - 1, p), self.idx(q, p), self.idx(q + 1, p)]);
            }
        }
        g
    }
}

fn sample(row: &[f64], y: f64) -> f64 {
    super::unwarp::sample_linear(row, y)
}

/// One pyramid level with precomputed spline taps.
struct Level {
    plus: Plane,
    minus: Plane,
    grad_plus: Plane,
    grad_minus: Plane,
    factor: f64,
    pos_taps: Vec<Taps>,
    line_taps: Vec<Taps>,
}

impl Level {
    fn new(plus: Plane, minus: Plane, factor: f64, spacing: f64) -> Level {
        let pos_taps = (0..plus.ext).map(|p| taps(p as f64 * factor, spacing)).collect();
        let line_taps = (0..plus.lines).map(|q| taps(q as f64 * factor, spacing)).collect();
        Level {
            grad_plus: plus.gradient(),
            grad_minus: minus.gradient(),
            plus,
            minus,
            factor,
            pos_taps,
            line_taps,
        }
    }

    fn n_pixels(&self) -> usize {
        self.plus.data.len()
    }

    /// Residual `I₊(p + d)(1 + d') − I₋(p − d)(1 − d')` at every pixel. When
    /// `normal` is given, also accumulates `JᵀJ` and `Jᵀr` (unscaled).
    fn residuals(
        &self,
        spline: &Spline,
        c: &[f64],
        mut normal: Option<(&mut SymBand, &mut Vec<f64>)>,
    ) -> f64 {
        let f = self.factor;
        let mut ssq = 0.0;
        let mut ids = [0usize; 16];
        let mut jrow = [0.0f64; 16];
        for q in 0..self.plus.lines {
            let tl = &self.line_taps[q];
            let (rp, rm) = (self.plus.row(q), self.minus.row(q));
            let (gp, gm) = (self.grad_plus.row(q), self.grad_minus.row(q));
            for p in 0..self.plus.ext {
                let tp = &self.pos_taps[p];
                let (d, dd) = spline.eval(c, tp, tl);
                let (xp, xm) = (p as f64 + d / f, p as f64 - d / f);
                let (a, b) = (sample(rp, xp), sample(rm, xm));
                let r = a * (1.0 + dd) - b * (1.0 - dd);
                ssq += r * r;
                let Some((h, g)) = normal.as_mut() else {
                    continue;
                };
                let cb = (sample(gp, xp) * (1.0 + dd) + sample(gm, xm) * (1.0 - dd)) / f;
                let cd = a + b;
                if cb == 0.0 && cd == 0.0 {
                    continue;
                }
                let mut k = 0;
                for (bl, wl) in tl.w.iter().enumerate() {
                    let base = spline.idx(tl.first + bl, tp.first);
                    for ap in 0..4 {
                        ids[k] = base + ap;
                        jrow[k] = wl * (cb * tp.w[ap] + cd * tp.dw[ap]);
                        k += 1;
                    }
                }
                for i in 0..16 {
                    if jrow[i] == 0.0 {
                        continue;
                    }
                    g[ids[i]] += jrow[i] * r;
                    for j in i..16 {
                        h.add(ids[i], ids[j], jrow[i] * jrow[j]);
                    }
                }
            }
        }
        ssq
    }

    fn cost(&self, spline: &Spline, c: &[f64], alpha: f64) -> f64 {
        self.residuals(spline, c, None) / self.n_pixels() as f64 + alpha * spline.bending(c)
    }
}

/// Levenberg-Marquardt on one level. Returns `(converged, steps, cost)`.
fn solve_level(
    level: &Level,
    spline: &Spline,
    c: &mut [f64],
    opts: &RestoreOptions,
) -> (bool, usize, f64) {
    let n = spline.len();
    let inv_n = 1.0 / level.n_pixels() as f64;
    let alpha = opts.field_smoothness;
    let mut cost = level.cost(spline, c, alpha);
    let mut mu = 1e-3;
    let mut steps = 0;
    while steps < opts.max_iters {
        let mut h = SymBand::zeros(n, spline.bandwidth());
        let mut g = vec![0.0; n];
        level.residuals(spline, c, Some((&mut h, &mut g)));
        let mut hs = SymBand::zeros(n, spline.bandwidth());
        for k in 0..=spline.bandwidth() {
            for i in 0..n.saturating_sub(k) {
                hs.add(i + k, i, h.get(i + k, i) * inv_n);
            }
        }
        for v in g.iter_mut() {
            *v *= inv_n;
        }
        let gb = spline.add_bending(&mut hs, c, alpha);
        let grad: Vec<f64> = g.iter().zip(&gb).map(|(a, b)| -(a + b)).collect();
        if grad.iter().all(|&v| v == 0.0) {
            return (true, steps, cost);
        }
        let diag: Vec<f64> = (0..n).map(|i| hs.get(i, i)).collect();
        let scale = diag.iter().cloned().fold(0.0, f64::max).max(1e-12);

        // Retry with more damping until the cost decreases.
        loop {
            steps += 1;
            let mut damped = hs.clone();
            for (i, &di) in diag.iter().enumerate() {
                damped.add(i, i, mu * (di + 1e-6 * scale));
            }
            let step = match damped.solve_ldlt(&grad, 1e-14) {
                Ok(s) => s,
                Err(_) => {
                    mu *= 10.0;
                    if steps >= opts.max_iters {
                        return (false, steps, cost);
                    }
                    continue;
                }
            };
            let trial: Vec<f64> = c.iter().zip(&step).map(|(a, b)| a + b).collect();
            let trial_cost = level.cost(spline, &trial, alpha);
            let max_step = step.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if trial_cost <= cost {
                c.copy_from_slice(&trial);
                cost = trial_cost;
                mu = (mu / 3.0).max(1e-9);
                if max_step < opts.tol {
                    return (true, steps, cost);
                }
                break;
            }
            mu *= 4.0;
            if max_step < opts.tol {
                // no descent even for tiny steps: at a minimum
                return (true, steps, cost);
            }
            if steps >= opts.max_iters {
                return (false, steps, cost);
            }
        }
    }
    (false, steps, cost)
}

/// Estimates the displacement field of `img_plus` from a reverse-polarity
/// pair, coarse to fine.
///
/// The field lives on a cubic B-spline grid with `control_spacing_px`
/// spacing. Each level minimizes the mismatch between the two images after
/// unwarping (`I₊(x + d)(1 + d')` against `I₋(x − d)(1 − d')`) plus
/// `field_smoothness` times the bending of the control grid. Intensities
/// are normalized by the pair mean first, so a global scale does not change
/// the result. If `max_iters` runs out the best iterate is returned with
/// `converged == false`.
pub fn estimate_field_dual_pe(
    img_plus: &Image2D,
    img_minus: &Image2D,
    epi: &EpiParams,
    opts: &RestoreOptions,
) -> Result<FieldEstimate> {
    opts.validate()?;
    epi.validate()?;
    check_pair(img_plus, img_minus, None)?;
    let axis = epi.pe_axis;
    for img in [img_plus, img_minus] {
        if img.pe_axis().is_some_and(|a| a != axis) {
            return Err(CorrectError::GeometryMismatch(format!(
                "image pe_axis differs from EPI pe_axis {}",
                axis.as_str()
            )));
        }
    }
    let geom = img_plus.geometry();
    let mean = img_plus
        .pixels()
        .iter()
        .zip(img_minus.pixels())
        .map(|(&a, &b)| 0.5 * (a as f64 + b as f64))
        .sum::<f64>()
        / geom.len() as f64;
    let (lines, ext) = geom.lines(axis);
    let spline = Spline {
        spacing: opts.control_spacing_px,
        n_pos: grid_len(ext, opts.control_spacing_px),
        n_line: grid_len(lines, opts.control_spacing_px),
    };
    let mut c = vec![0.0; spline.len()];
    let mut converged = true;
    let mut iterations = 0;
    let mut cost = 0.0;

    if mean > 0.0 && mean.is_finite() {
        let mut pyramid = vec![(
            Plane::from_image(img_plus, axis, 1.0 / mean),
            Plane::from_image(img_minus, axis, 1.0 / mean),
        )];
        while pyramid.len() < opts.pyramid_levels {
            let (p, m) = pyramid.last().expect("non-empty");
            if p.ext < 16 || p.lines < 16 {
                break;
            }
            let next = (p.reduce(), m.reduce());
            pyramid.push(next);
        }
        for (l, (p, m)) in pyramid.into_iter().enumerate().rev() {
            let level = Level::new(p, m, (1u64 << l) as f64, spline.spacing);
            let (ok, steps, level_cost) = solve_level(&level, &spline, &mut c, opts);
            debug!("level {l}: {steps} steps, cost {level_cost:.3e}, converged {ok}");
            converged = ok;
            iterations += steps;
            cost = level_cost;
        }
    }

    let limit = ext as f64 - 1.0;
    let mut shifts = vec![0.0f32; geom.len()];
    for q in 0..lines {
        let tl = taps(q as f64, spline.spacing);
        for p in 0..ext {
            let (d, _) = spline.eval(&c, &taps(p as f64, spline.spacing), &tl);
            shifts[geom.line_index(axis, q, p)] = d.clamp(-limit, limit) as f32;
        }
    }
    let vdm = DisplacementMap::from_shifts(geom, axis, shifts)?;
    let px_per_hz = epi.s_pe as f64 * epi.px_per_hz();
    let hz: Vec<f64> = vdm.shifts().iter().map(|&d| d as f64 / px_per_hz).collect();
    Ok(FieldEstimate {
        field_hz: FieldMapHz::from_values(geom, &hz),
        vdm,
        converged,
        iterations,
        cost,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dwi::{generate_phantom, PhantomSpec};
    use crate::forward::forward_splat;
    use crate::imgio::{Geometry, ImageKind};
    use crate::metrics::field_rmse;

    #[test]
    fn spline_taps_partition_unity() {
        for x in [0.0, 0.3, 7.9, 8.0, 12.5] {
            let t = taps(x, 8.0);
            assert!((t.w.iter().sum::<f64>() - 1.0).abs() < 1e-14);
            assert!(t.dw.iter().sum::<f64>().abs() < 1e-14);
        }
    }

    #[test]
    fn spline_derivative_matches_finite_difference() {
        let spline = Spline {
            spacing: 6.0,
            n_pos: grid_len(40, 6.0),
            n_line: grid_len(20, 6.0),
        };
        let c: Vec<f64> = (0..spline.len()).map(|i| ((i * 37) % 11) as f64 * 0.1).collect();
        let tl = taps(5.0, 6.0);
        for x in [3.3, 17.0, 30.2] {
            let (_, dd) = spline.eval(&c, &taps(x, 6.0), &tl);
            let h = 1e-5;
            let (a, _) = spline.eval(&c, &taps(x + h, 6.0), &tl);
            let (b, _) = spline.eval(&c, &taps(x - h, 6.0), &tl);
            assert!((dd - (a - b) / (2.0 * h)).abs() < 1e-6);
        }
    }

    fn smooth_vdm(g: Geometry, axis: PeAxis, amp: f64) -> DisplacementMap {
        let (w, h) = (g.width as f64, g.height as f64);
        let shifts = (0..g.len())
            .map(|i| {
                let (r, c) = ((i / g.width) as f64, (i % g.width) as f64);
                (amp * (std::f64::consts::PI * r / h).sin() * (0.5 + 0.5 * (2.0 * c / w - 0.3).cos())) as f32
            })
            .collect();
        DisplacementMap::from_shifts(g, axis, shifts).unwrap()
    }

    #[test]
    fn equal_inputs_give_zero_field() {
        let ph = generate_phantom(&PhantomSpec::standard(48, 48)).unwrap();
        let est = estimate_field_dual_pe(&ph.dwi_b50, &ph.dwi_b50, &EpiParams::default(), &RestoreOptions::default())
            .unwrap();
        assert!(est.converged);
        assert!(est.vdm.shifts().iter().all(|&d| d == 0.0));
    }

    #[test]
    fn recovers_smooth_field_on_phantom() {
        let g = Geometry::new(64, 64);
        let mut spec = PhantomSpec::standard(64, 64);
        spec.noise_sigma = 0.0;
        let ph = generate_phantom(&spec).unwrap();
        let truth = smooth_vdm(g, PeAxis::Row, 3.0);
        let plus = forward_splat(&ph.dwi_b50, &truth).unwrap();
        let minus = forward_splat(&ph.dwi_b50, &truth.negated()).unwrap();
        let epi = EpiParams::default();
        let opts = RestoreOptions::default();
        let est = estimate_field_dual_pe(&plus, &minus, &epi, &opts).unwrap();
        let rmse = field_rmse(&truth, &est.vdm, Some(&ph.mask)).unwrap();
        assert!(rmse < 0.2, "rmse {rmse}");

        let swapped = estimate_field_dual_pe(&minus, &plus, &epi, &opts).unwrap();
        let sum = DisplacementMap::from_shifts(
            g,
            PeAxis::Row,
            est.vdm.shifts().iter().zip(swapped.vdm.shifts()).map(|(a, b)| a + b).collect(),
        )
        .unwrap();
        let anti = field_rmse(&DisplacementMap::zeros(g, PeAxis::Row), &sum, None).unwrap();
        assert!(anti < 0.05, "antisymmetry {anti}");
    }

    #[test]
    fn rejects_axis_mismatch() {
        let g = Geometry::new(16, 16);
        let img = Image2D::filled(g, ImageKind::DwiB50, 1.0).with_pe_axis(Some(PeAxis::Col));
        let err = estimate_field_dual_pe(&img, &img, &EpiParams::default(), &RestoreOptions::default());
        assert!(matches!(err, Err(CorrectError::GeometryMismatch(_))));
    }
}
