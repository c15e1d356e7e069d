//! Periodic Gaussian smoothing in the Fourier domain.
//!
//! The kernel along each axis is the sampled Gaussian at minimum-image
//! periodic offsets, normalized to unit mass. Its DFT is real (the kernel is
//! symmetric), so smoothing is self-adjoint and preserves the mean.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::{for_each_line, Grid};
use crate::error::{Error, Result};

/// Sampled, normalized periodic Gaussian with `n` taps at spacing `h`.
pub fn gaussian_kernel_1d(n: usize, h: f64, sigma: f64) -> Vec<f64> {
    let mut k: Vec<f64> = (0..n)
        .map(|j| {
            let d = j.min(n - j) as f64 * h;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

struct AxisPlan {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

#[derive(Default)]
struct SmoothCache {
    planner: Option<FftPlanner<f64>>,
    plans: HashMap<usize, AxisPlan>,
    spectra: HashMap<(usize, u64, u64), Arc<Vec<f64>>>,
}

impl SmoothCache {
    fn plan(&mut self, n: usize) -> (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>) {
        let planner = self.planner.get_or_insert_with(FftPlanner::new);
        let p = self.plans.entry(n).or_insert_with(|| AxisPlan {
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
        });
        (p.forward.clone(), p.inverse.clone())
    }

    /// Real spectrum of the 1D kernel, pre-divided by `n` so the unnormalized
    /// inverse transform lands back on the original scale.
    fn spectrum(&mut self, n: usize, h: f64, sigma: f64) -> Arc<Vec<f64>> {
        let key = (n, h.to_bits(), sigma.to_bits());
        if let Some(s) = self.spectra.get(&key) {
            return s.clone();
        }
        let (fwd, _) = self.plan(n);
        let mut buf: Vec<Complex<f64>> = gaussian_kernel_1d(n, h, sigma)
            .into_iter()
            .map(|v| Complex::new(v, 0.0))
            .collect();
        fwd.process(&mut buf);
        let s = Arc::new(buf.iter().map(|c| c.re / n as f64).collect::<Vec<_>>());
        self.spectra.insert(key, s.clone());
        s
    }
}

thread_local! {
    static CACHE: RefCell<SmoothCache> = RefCell::new(SmoothCache::default());
}

/// Smooths `channels` stacked fields on `grid` in place.
pub fn gaussian_smooth_slice(grid: &Grid, data: &mut [f64], channels: usize, sigma: f64) -> Result<()> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::param(format!("smoothing sigma {sigma} must be >= 0")));
    }
    let n = grid.len();
    if data.len() != n * channels {
        return Err(Error::shape(format!(
            "{} values for {channels} channels of {n} nodes",
            data.len()
        )));
    }
    if sigma == 0.0 {
        return Ok(());
    }
    CACHE.with(|cache| {
        let mut cache = cache.borrow_mut();
        for axis in 0..grid.ndim() {
            let len = grid.dims()[axis];
            let stride = grid.stride(axis);
            let (fwd, inv) = cache.plan(len);
            let spec = cache.spectrum(len, grid.spacing(axis), sigma);
            let mut line = vec![Complex::new(0.0, 0.0); len];
            let mut scratch =
                vec![Complex::new(0.0, 0.0); fwd.get_inplace_scratch_len().max(inv.get_inplace_scratch_len())];
            for c in 0..channels {
                let chan = &mut data[c * n..(c + 1) * n];
                for_each_line(grid, axis, |base| {
                    for (j, v) in line.iter_mut().enumerate() {
                        *v = Complex::new(chan[base + j * stride], 0.0);
                    }
                    fwd.process_with_scratch(&mut line, &mut scratch);
                    for (v, s) in line.iter_mut().zip(spec.iter()) {
                        *v *= *s;
                    }
                    inv.process_with_scratch(&mut line, &mut scratch);
                    for (j, v) in line.iter().enumerate() {
                        chan[base + j * stride] = v.re;
                    }
                });
            }
        }
    });
    Ok(())
}
