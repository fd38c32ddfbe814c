//! Shared inputs for the solver benchmarks.

use epiwarp::{forward_splat, generate_phantom, DisplacementMap, Geometry, Image2D, PeAxis, PhantomSpec};

/// A noiseless phantom with a smooth field along the row axis, plus its
/// forward and reverse distorted copies.
pub struct Fixture {
    pub clean: Image2D,
    pub vdm: DisplacementMap,
    pub plus: Image2D,
    pub minus: Image2D,
}

pub fn fixture(size: usize, max_shift: f64) -> Fixture {
    let mut spec = PhantomSpec::standard(size, size);
    spec.noise_sigma = 0.0;
    let clean = generate_phantom(&spec).expect("standard phantom").dwi_b50;
    let g = Geometry::new(size, size);
    let n = size as f64;
    let shifts = (0..g.len())
        .map(|i| {
            let (r, c) = ((i / size) as f64 / n, (i % size) as f64 / n);
            (max_shift * (std::f64::consts::PI * r).sin() * (0.6 + 0.4 * (3.0 * c).cos())) as f32
        })
        .collect();
    let vdm = DisplacementMap::from_shifts(g, PeAxis::Row, shifts).expect("bounded shifts");
    let plus = forward_splat(&clean, &vdm).expect("same grid");
    let minus = forward_splat(&clean, &vdm.negated()).expect("same grid");
    Fixture { clean, vdm, plus, minus }
}
