//! Harmonic fitting checked against a normal-equations oracle.

use epiwarp::field::{basis_exponents, fit_harmonic, harmonic_residual, normalized_coord, FieldMapHz};
use epiwarp::imgio::{Geometry, Image2D, ImageKind};
use proptest::prelude::*;

/// Solves `(AᵀA) x = Aᵀb` by Gaussian elimination with partial pivoting.
fn normal_equations_fit(field: &FieldMapHz, order: usize, mask: Option<&Image2D>) -> Vec<f64> {
    let g = field.geometry();
    let exps = basis_exponents(order);
    let n = exps.len();
    let mut ata = vec![vec![0.0; n]; n];
    let mut atb = vec![0.0; n];
    for r in 0..g.height {
        for c in 0..g.width {
            if mask.is_some_and(|m| m.get(r, c) == 0.0) {
                continue;
            }
            let (x, y) = (normalized_coord(c, g.width), normalized_coord(r, g.height));
            let row: Vec<f64> = exps.iter().map(|&(i, j)| x.powi(i as i32) * y.powi(j as i32)).collect();
            let v = field.image().get(r, c) as f64;
            for a in 0..n {
                atb[a] += row[a] * v;
                for b in 0..n {
                    ata[a][b] += row[a] * row[b];
                }
            }
        }
    }
    for k in 0..n {
        let p = (k..n).max_by(|&i, &j| ata[i][k].abs().total_cmp(&ata[j][k].abs())).unwrap();
        ata.swap(k, p);
        atb.swap(k, p);
        for i in k + 1..n {
            let f = ata[i][k] / ata[k][k];
            let pivot_row = ata[k].clone();
            for (a, b) in ata[i][k..].iter_mut().zip(&pivot_row[k..]) {
                *a -= f * b;
            }
            atb[i] -= f * atb[k];
        }
    }
    let mut x = vec![0.0; n];
    for k in (0..n).rev() {
        let s: f64 = (k + 1..n).map(|j| ata[k][j] * x[j]).sum();
        x[k] = (atb[k] - s) / ata[k][k];
    }
    x
}

fn residual_norm(field: &FieldMapHz, coeffs: &[f64], order: usize, mask: Option<&Image2D>) -> f64 {
    let g = field.geometry();
    let exps = basis_exponents(order);
    let mut s = 0.0;
    for r in 0..g.height {
        for c in 0..g.width {
            if mask.is_some_and(|m| m.get(r, c) == 0.0) {
                continue;
            }
            let (x, y) = (normalized_coord(c, g.width), normalized_coord(r, g.height));
            let fit: f64 = exps
                .iter()
                .zip(coeffs)
                .map(|(&(i, j), a)| a * x.powi(i as i32) * y.powi(j as i32))
                .sum();
            let d = field.image().get(r, c) as f64 - fit;
            s += d * d;
        }
    }
    s.sqrt()
}

fn smooth_field(g: Geometry, a: f64, b: f64, c: f64) -> FieldMapHz {
    let vals: Vec<f64> = (0..g.len())
        .map(|i| {
            let (r, col) = ((i / g.width) as f64, (i % g.width) as f64);
            100.0 * (a * r / 7.0).sin() * (b * col / 5.0 + c).cos() + 20.0 * (r * col / 90.0)
        })
        .collect();
    FieldMapHz::from_values(g, &vals)
}

#[test]
fn qr_fit_matches_normal_equations() {
    let g = Geometry::new(24, 20);
    let field = smooth_field(g, 1.1, 0.7, 0.3);
    let mask = Image2D::from_fn(g, ImageKind::Mask, |r, c| if (r + 2 * c) % 5 == 0 { 0.0 } else { 1.0 });
    for order in [0, 1, 2, 3, 4] {
        let got = fit_harmonic(&field, order, Some(&mask)).unwrap();
        let want = normal_equations_fit(&field, order, Some(&mask));
        let (rg, rw) = (
            residual_norm(&field, &got.coeffs, order, Some(&mask)),
            residual_norm(&field, &want, order, Some(&mask)),
        );
        assert!((rg - rw).abs() <= 1e-6 * rw.max(1.0), "order {order}: {rg} vs {rw}");
    }
}

#[test]
fn residual_helper_matches_evaluation() {
    let g = Geometry::new(16, 12);
    let field = smooth_field(g, 0.9, 1.3, 0.0);
    let coeffs = fit_harmonic(&field, 3, None).unwrap();
    let res = harmonic_residual(&field, &coeffs);
    let direct: f64 = res.values().iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
    let oracle = residual_norm(&field, &coeffs.coeffs, 3, None);
    assert!((direct - oracle).abs() < 1e-3 * oracle.max(1.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn nested_fits_do_not_increase_residual(a in 0.2f64..2.0, b in 0.2f64..2.0, c in 0.0f64..3.0) {
        let g = Geometry::new(20, 18);
        let field = smooth_field(g, a, b, c);
        let r: Vec<f64> = [0usize, 2, 4]
            .iter()
            .map(|&l| residual_norm(&field, &normal_equations_fit(&field, l, None), l, None))
            .collect();
        prop_assert!(r[1] <= r[0] * (1.0 + 1e-9) + 1e-9);
        prop_assert!(r[2] <= r[1] * (1.0 + 1e-9) + 1e-9);
        // the library fit must be at least as good as the oracle at each order
        for (k, &l) in [0usize, 2, 4].iter().enumerate() {
            let got = fit_harmonic(&field, l, None).unwrap();
            let rg = residual_norm(&field, &got.coeffs, l, None);
            prop_assert!(rg <= r[k] * (1.0 + 1e-6) + 1e-6, "order {}: {} vs {}", l, rg, r[k]);
        }
    }
}
