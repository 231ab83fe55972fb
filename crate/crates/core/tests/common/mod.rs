//! Shared fixtures for the oracle test suites.

use cobbkit_core::geometry::{make_vertebra, LandmarkSet, Point, VERTEBRA_COUNT};
use cobbkit_core::rng::Rng;

/// A random but anatomically plausible spine: 17 vertebrae stacked top to
/// bottom with independently sampled tilts, widths, and lateral jitter.
pub fn random_spine(rng: &mut Rng) -> LandmarkSet {
    let mut corners = [[Point::new(0.0, 0.0); 4]; VERTEBRA_COUNT];
    for (v, quad) in corners.iter_mut().enumerate() {
        let tilt = rng.range_f64(-40.0, 40.0).to_radians();
        let center = Point::new(
            60.0 + rng.range_f64(-12.0, 12.0),
            12.0 + 13.0 * v as f64 + rng.range_f64(-2.0, 2.0),
        );
        let width = rng.range_f64(18.0, 30.0);
        let height = rng.range_f64(6.0, 9.0);
        *quad = make_vertebra(center, [tilt.cos(), tilt.sin()], width, height);
    }
    LandmarkSet::new(corners).expect("finite corners")
}
