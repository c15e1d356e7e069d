//! Central finite-difference oracle for tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default)]
pub struct FdReport {
    pub max_rel_error: f64,
    /// `(coordinate, finite difference, analytic)` for every sampled entry.
    pub samples: Vec<(usize, f64, f64)>,
}

impl FdReport {
    pub fn worst(&self) -> Option<(usize, f64, f64)> {
        self.samples
            .iter()
            .copied()
            .max_by(|a, b| rel_error(a.1, a.2).total_cmp(&rel_error(b.1, b.2)))
    }
}

pub fn rel_error(fd: f64, ad: f64) -> f64 {
    (fd - ad).abs() / fd.abs().max(ad.abs()).max(1e-12)
}

/// Up to `samples` distinct coordinates of a vector of length `len`.
pub fn sample_coordinates(len: usize, samples: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, len, samples.min(len)).into_vec();
    idx.sort_unstable();
    idx
}

/// Compares `analytic` against central differences of `loss` around `point`
/// at the given coordinates. Returns the largest
/// `|fd - ad| / max(|fd|, |ad|, 1e-12)`.
pub fn finite_difference_check(
    mut loss: impl FnMut(&[f64]) -> Result<f64>,
    point: &[f64],
    analytic: &[f64],
    h: f64,
    coords: &[usize],
) -> Result<FdReport> {
    if !(h > 0.0) {
        return Err(Error::param(format!("finite-difference step {h}")));
    }
    if point.len() != analytic.len() {
        return Err(Error::shape("gradient length differs from point length"));
    }
    let mut x = point.to_vec();
    let mut report = FdReport::default();
    for &i in coords {
        let orig = x[i];
        x[i] = orig + h;
        let up = loss(&x)?;
        x[i] = orig - h;
        let down = loss(&x)?;
        x[i] = orig;
        let fd = (up - down) / (2.0 * h);
        report.max_rel_error = report.max_rel_error.max(rel_error(fd, analytic[i]));
        report.samples.push((i, fd, analytic[i]));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic_gradient_passes() {
        let p = vec![0.5, -1.5, 2.0];
        let grad: Vec<f64> = p.iter().map(|x| 3.0 * x * x).collect();
        let r = finite_difference_check(
            |x| Ok(x.iter().map(|v| v * v * v).sum()),
            &p,
            &grad,
            1e-5,
            &[0, 1, 2],
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-8);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let r = finite_difference_check(|x| Ok(x[0] * x[0]), &[1.0], &[1.0], 1e-5, &[0]).unwrap();
        assert!(r.max_rel_error > 0.4);
        assert!(finite_difference_check(|x| Ok(x[0]), &[1.0], &[1.0], 0.0, &[0]).is_err());
    }

    #[test]
    fn sampling_is_deterministic_and_distinct() {
        let a = sample_coordinates(100, 50, 7);
        assert_eq!(a, sample_coordinates(100, 50, 7));
        let mut d = a.clone();
        d.dedup();
        assert_eq!(d.len(), 50);
        assert_eq!(sample_coordinates(5, 50, 1).len(), 5);
    }
}
