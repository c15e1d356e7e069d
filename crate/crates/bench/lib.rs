//! Benchmark fixtures.

use metreg::field::{gaussian_smooth, Grid, ScalarField, VectorField};
use metreg::vsvf::RegistrationTask;

/// Smooth test image with a bright disc.
pub fn disc(n: usize) -> ScalarField {
    let grid = Grid::square(n).expect("grid");
    let f = ScalarField::from_fn(grid, |x| {
        let r = ((x[0] - 0.5).powi(2) + (x[1] - 0.5).powi(2)).sqrt();
        if r < 0.25 {
            1.0
        } else {
            0.0
        }
    });
    gaussian_smooth(&f, 0.01).expect("smooth")
}

pub fn swirl(grid: Grid, amp: f64) -> VectorField {
    VectorField::from_fn(grid, |x, o| {
        o[0] = -amp * (x[1] - 0.5);
        o[1] = amp * (x[0] - 0.5);
    })
}

/// Disc registered to a slightly shifted copy.
pub fn task(n: usize) -> RegistrationTask {
    let source = disc(n);
    let grid = source.grid;
    let target = ScalarField::from_fn(grid, |x| {
        let r = ((x[0] - 0.53).powi(2) + (x[1] - 0.5).powi(2)).sqrt();
        if r < 0.25 {
            1.0
        } else {
            0.0
        }
    });
    let target = gaussian_smooth(&target, 0.01).expect("smooth");
    let mut t = RegistrationTask::new(0, source, target, 0.5).expect("task");
    let m = swirl(t.comp_grid, 0.1);
    t.set_momentum(m).expect("momentum");
    t
}
