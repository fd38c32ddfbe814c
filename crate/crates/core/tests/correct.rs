//! Correction methods on phantoms with known fields.

use epiwarp::correct::{
    dual_pe_objective, estimate_field_dual_pe, restore_dual_pe, solve_dual_pe_line, unwarp_fieldmap, unwarp_line,
    RestoreOptions,
};
use epiwarp::dwi::{generate_phantom, PhantomSpec};
use epiwarp::forward::{forward_splat, DisplacementMap, EpiParams};
use epiwarp::imgio::{Geometry, Image2D, PeAxis};
use epiwarp::metrics::{field_rmse, nmse};

fn phantom(size: usize) -> (Image2D, Image2D) {
    let mut spec = PhantomSpec::standard(size, size);
    spec.noise_sigma = 0.0;
    let ph = generate_phantom(&spec).unwrap();
    (ph.dwi_b50, ph.mask)
}

/// A field with a steep step between two plateaus along the rows, so the
/// plus image piles up and the minus image stretches.
fn pile_up_vdm(g: Geometry) -> DisplacementMap {
    let shifts = (0..g.len())
        .map(|i| {
            let (r, c) = ((i / g.width) as f64, (i % g.width) as f64);
            let x = (r - 0.55 * g.height as f64) / 2.0;
            (-3.0 * x.tanh() * (0.6 + 0.4 * (c / g.width as f64))) as f32
        })
        .collect();
    DisplacementMap::from_shifts(g, PeAxis::Row, shifts).unwrap()
}

#[test]
fn dual_pe_beats_unwarping_on_pile_up() {
    let (clean, mask) = phantom(64);
    let vdm = pile_up_vdm(clean.geometry());
    let plus = forward_splat(&clean, &vdm).unwrap();
    let minus = forward_splat(&clean, &vdm.negated()).unwrap();
    let opts = RestoreOptions::default();
    let unwarped = unwarp_fieldmap(&plus, &vdm, &opts).unwrap();
    assert!(unwarped.confidence_mask.pixels().contains(&0.0), "field should fold");
    let dual = restore_dual_pe(&plus, &minus, &vdm, &opts).unwrap();
    let (e_unwarp, e_dual) = (
        nmse(&clean, &unwarped.restored, Some(&mask)).unwrap(),
        nmse(&clean, &dual, Some(&mask)).unwrap(),
    );
    assert!(e_dual < e_unwarp, "dual {e_dual} vs unwarp {e_unwarp}");
}

#[test]
fn least_squares_solution_is_no_worse_than_unwarping() {
    let (clean, _) = phantom(48);
    let vdm = pile_up_vdm(clean.geometry());
    let plus = forward_splat(&clean, &vdm).unwrap();
    let minus = forward_splat(&clean, &vdm.negated()).unwrap();
    for lambda in [0.0, 0.05, 0.5] {
        for col in [5, 20, 33] {
            let (p, m, d) = (plus.line(PeAxis::Row, col), minus.line(PeAxis::Row, col), vdm.line(col));
            let Some(u) = solve_dual_pe_line(&p, &m, &d, lambda) else {
                assert_eq!(lambda, 0.0);
                continue;
            };
            let (v, _) = unwarp_line(&p, &d, 0.05);
            let best = dual_pe_objective(&p, &m, &d, &u).total(lambda);
            let other = dual_pe_objective(&p, &m, &d, &v).total(lambda);
            assert!(best <= other + 1e-9 * other.max(1.0), "lambda {lambda}, col {col}: {best} > {other}");
        }
    }
}

#[test]
fn estimate_is_invariant_to_global_scale() {
    let (clean, mask) = phantom(48);
    let g = clean.geometry();
    let vdm = DisplacementMap::from_shifts(
        g,
        PeAxis::Col,
        (0..g.len()).map(|i| (2.0 * ((i % 48) as f64 / 15.0).sin()) as f32).collect(),
    )
    .unwrap();
    let plus = forward_splat(&clean, &vdm).unwrap();
    let minus = forward_splat(&clean, &vdm.negated()).unwrap();
    let scale = |img: &Image2D, k: f32| Image2D::from_fn(img.geometry(), img.kind(), |r, c| img.get(r, c) * k);
    let epi = EpiParams {
        pe_axis: PeAxis::Col,
        ..EpiParams::default()
    };
    let opts = RestoreOptions::default();
    let a = estimate_field_dual_pe(&plus, &minus, &epi, &opts).unwrap();
    let b = estimate_field_dual_pe(&scale(&plus, 37.5), &scale(&minus, 37.5), &epi, &opts).unwrap();
    let diff = field_rmse(&a.vdm, &b.vdm, None).unwrap();
    assert!(diff < 1e-3, "scale changed the estimate by {diff}");
    assert!(field_rmse(&vdm, &a.vdm, Some(&mask)).unwrap() < 0.2);
}

#[test]
fn solvers_are_bit_deterministic() {
    let (clean, _) = phantom(40);
    let vdm = pile_up_vdm(clean.geometry());
    let plus = forward_splat(&clean, &vdm).unwrap();
    let minus = forward_splat(&clean, &vdm.negated()).unwrap();
    let opts = RestoreOptions::default();
    let epi = EpiParams::default();
    assert_eq!(
        restore_dual_pe(&plus, &minus, &vdm, &opts).unwrap(),
        restore_dual_pe(&plus, &minus, &vdm, &opts).unwrap()
    );
    assert_eq!(
        unwarp_fieldmap(&plus, &vdm, &opts).unwrap(),
        unwarp_fieldmap(&plus, &vdm, &opts).unwrap()
    );
    let a = estimate_field_dual_pe(&plus, &minus, &epi, &opts).unwrap();
    let b = estimate_field_dual_pe(&plus, &minus, &epi, &opts).unwrap();
    assert_eq!(a, b);
}

#[test]
fn estimate_reports_field_in_hz_with_polarity() {
    let (clean, _) = phantom(32);
    let g = clean.geometry();
    let vdm = DisplacementMap::from_shifts(g, PeAxis::Row, vec![1.0; g.len()]).unwrap();
    let plus = forward_splat(&clean, &vdm).unwrap();
    let minus = forward_splat(&clean, &vdm.negated()).unwrap();
    let epi = EpiParams {
        s_pe: -1,
        ..EpiParams::default()
    };
    let est = estimate_field_dual_pe(&plus, &minus, &epi, &RestoreOptions::default()).unwrap();
    let k = epi.px_per_hz();
    for (d, f) in est.vdm.shifts().iter().zip(est.field_hz.values()) {
        assert!((*d as f64 + *f as f64 * k).abs() < 1e-4);
    }
}
