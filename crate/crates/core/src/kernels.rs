//! Multi-Gaussian regularization: global and spatially localized kernels,
//! the optimal-mass-transport weight penalty, the edge indicator and the
//! edge-weighted total variation of the pre-weights.
//!
//! The localized kernel maps momentum to velocity as
//! `v(x) = sum_i sqrt(w_i(x)) * (G_i * (sqrt(w_i) m))(x)`, which is linear,
//! self-adjoint and positive semi-definite in `m`, and collapses to the
//! global mixture `sum_i w_i G_i * m` when the weights are constant.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Primitive, Shape, Tape, Var};
use crate::error::{Error, Result};
use crate::field::{diff_axis, gaussian_kernel_1d, diff_axis_transpose, gaussian_smooth_slice, Grid, ScalarField, VectorField};

/// Gaussian standard deviations used throughout the 2D experiments.
pub const DEFAULT_SIGMAS: [f64; 4] = [0.01, 0.05, 0.1, 0.2];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MultiGaussianSpec {
    /// Ascending standard deviations in unit-domain coordinates.
    pub sigmas: Vec<f64>,
    /// Global weights; the localized model's setpoint.
    pub setpoint_weights: Vec<f64>,
    pub omt_power: f64,
    /// Smoothing applied to the pre-weights (0.02 in 2D).
    pub preweight_smoothing_sigma: f64,
    /// Lower bound for every pre-weight.
    pub preweight_floor: f64,
}

impl Default for MultiGaussianSpec {
    fn default() -> Self {
        MultiGaussianSpec::with_sigmas(&DEFAULT_SIGMAS).expect("default sigmas are valid")
    }
}

impl MultiGaussianSpec {
    /// Spec with setpoint weights proportional to the variances.
    pub fn with_sigmas(sigmas: &[f64]) -> Result<MultiGaussianSpec> {
        let spec = MultiGaussianSpec {
            sigmas: sigmas.to_vec(),
            setpoint_weights: variance_weights(sigmas),
            omt_power: 1.0,
            preweight_smoothing_sigma: 0.02,
            preweight_floor: 1e-3,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn n(&self) -> usize {
        self.sigmas.len()
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.sigmas;
        if s.len() < 2 {
            return Err(Error::InvalidSpec("need at least two Gaussians".into()));
        }
        if s[0] <= 0.0 || s.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidSpec(format!("sigmas {s:?} must be positive ascending")));
        }
        if s[0] >= s[s.len() - 1] {
            return Err(Error::InvalidSpec("largest sigma must exceed the smallest".into()));
        }
        check_simplex(&self.setpoint_weights, s.len(), 1e-12)?;
        if !(self.omt_power >= 1.0) {
            return Err(Error::InvalidSpec(format!("OMT power {} < 1", self.omt_power)));
        }
        if !(self.preweight_floor > 0.0) || self.preweight_floor * s.len() as f64 >= 1.0 {
            return Err(Error::InvalidSpec(format!(
                "pre-weight floor {} outside (0, 1/N)",
                self.preweight_floor
            )));
        }
        if !(self.preweight_smoothing_sigma >= 0.0) {
            return Err(Error::InvalidSpec("negative pre-weight smoothing".into()));
        }
        Ok(())
    }

    /// Standardized per-Gaussian OMT costs `|log(s_max/s_i)|^r / |log(s_max/s_0)|^r`.
    pub fn omt_coefficients(&self) -> Result<Vec<f64>> {
        let s = &self.sigmas;
        let last = s[s.len() - 1];
        let denom = (last / s[0]).ln().abs().powf(self.omt_power);
        if !(denom > 0.0) {
            return Err(Error::InvalidSpec(
                "OMT standardization needs sigma_0 < sigma_max".into(),
            ));
        }
        Ok(s.iter()
            .map(|si| (last / si).ln().abs().powf(self.omt_power) / denom)
            .collect())
    }
}

pub fn variance_weights(sigmas: &[f64]) -> Vec<f64> {
    let total: f64 = sigmas.iter().map(|s| s * s).sum();
    sigmas.iter().map(|s| s * s / total).collect()
}

fn check_simplex(w: &[f64], n: usize, tol: f64) -> Result<()> {
    if w.len() != n {
        return Err(Error::InvalidSpec(format!("{} weights for {n} Gaussians", w.len())));
    }
    if w.iter().any(|&x| !(x >= 0.0)) || (w.iter().sum::<f64>() - 1.0).abs() > tol {
        return Err(Error::InvalidSpec(format!("weights {w:?} are not on the simplex")));
    }
    Ok(())
}

/// `v = (sum_i w_i G_i) * m` with the spec's setpoint weights.
pub fn multi_gaussian_smooth(m: &VectorField, spec: &MultiGaussianSpec) -> Result<VectorField> {
    spec.validate()?;
    let mut out = VectorField::zeros(m.grid);
    let channels = m.grid.ndim();
    for (sigma, w) in spec.sigmas.iter().zip(&spec.setpoint_weights) {
        if *w == 0.0 {
            continue;
        }
        let mut s = m.values.clone();
        gaussian_smooth_slice(&m.grid, &mut s, channels, *sigma)?;
        out.values.iter_mut().zip(&s).for_each(|(o, x)| *o += w * x);
    }
    Ok(out)
}

/// Localized smoothing with explicit per-Gaussian weight fields.
pub fn localized_smooth_with(m: &VectorField, weights: &[ScalarField], sigmas: &[f64]) -> Result<VectorField> {
    if weights.len() != sigmas.len() {
        return Err(Error::shape(format!("{} weight fields for {} Gaussians", weights.len(), sigmas.len())));
    }
    let grid = m.grid;
    let n = grid.len();
    let d = grid.ndim();
    let mut out = VectorField::zeros(grid);
    for (w, sigma) in weights.iter().zip(sigmas) {
        grid.check_same(&w.grid)?;
        if let Some(x) = w.values.iter().find(|&&x| !(x >= 0.0)) {
            return Err(Error::InvalidWeights(format!("negative weight {x}")));
        }
        let sw: Vec<f64> = w.values.iter().map(|x| x.sqrt()).collect();
        let mut t: Vec<f64> = m.values.iter().enumerate().map(|(i, x)| x * sw[i % n]).collect();
        gaussian_smooth_slice(&grid, &mut t, d, *sigma)?;
        for (i, o) in out.values.iter_mut().enumerate() {
            *o += sw[i % n] * t[i];
        }
    }
    Ok(out)
}

/// Pre-weights and smoothed weights of the localized kernel.
#[derive(Clone, Debug)]
pub struct LocalWeights {
    /// Floored pre-weights, each in `[floor, 1]`, summing to one per node.
    pub preweights: Vec<ScalarField>,
    /// Smoothed, renormalized weights.
    pub weights: Vec<ScalarField>,
}

impl LocalWeights {
    /// Builds weights from pre-weights on the simplex. The floor is applied
    /// as `floor + (1 - N*floor) * omega`, which keeps the simplex exact.
    pub fn from_preweights(raw: &[ScalarField], spec: &MultiGaussianSpec) -> Result<LocalWeights> {
        spec.validate()?;
        let nw = spec.n();
        if raw.len() != nw {
            return Err(Error::shape(format!("{} pre-weight fields for {nw} Gaussians", raw.len())));
        }
        let grid = raw[0].grid;
        for r in raw {
            grid.check_same(&r.grid)?;
            if r.values.iter().any(|&x| !(x >= 0.0)) {
                return Err(Error::InvalidWeights("negative pre-weight".into()));
            }
        }
        for i in 0..grid.len() {
            let s: f64 = raw.iter().map(|r| r.values[i]).sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidWeights(format!("pre-weights sum to {s} at node {i}")));
            }
        }
        let (a, b) = floor_map(spec);
        let pre: Vec<f64> = raw.iter().flat_map(|r| r.values.iter().map(|x| a * x + b)).collect();
        let mut w = pre.clone();
        gaussian_smooth_slice(&grid, &mut w, nw, spec.preweight_smoothing_sigma)?;
        let w = normalize_channels(&w, grid.len(), nw);
        Ok(LocalWeights {
            preweights: split_channels(grid, pre),
            weights: split_channels(grid, w),
        })
    }

    /// Spatially constant weights equal to `w`.
    pub fn constant(grid: Grid, w: &[f64], spec: &MultiGaussianSpec) -> Result<LocalWeights> {
        let raw: Vec<ScalarField> = w.iter().map(|&x| ScalarField::constant(grid, x)).collect();
        LocalWeights::from_preweights(&raw, spec)
    }

    pub fn grid(&self) -> Grid {
        self.weights[0].grid
    }
}

pub(crate) fn floor_map(spec: &MultiGaussianSpec) -> (f64, f64) {
    let eps = spec.preweight_floor;
    (1.0 - spec.n() as f64 * eps, eps)
}

pub(crate) fn split_channels(grid: Grid, data: Vec<f64>) -> Vec<ScalarField> {
    data.chunks(grid.len())
        .map(|c| ScalarField {
            grid,
            values: c.to_vec(),
        })
        .collect()
}

fn normalize_channels(x: &[f64], n: usize, channels: usize) -> Vec<f64> {
    let mut out = x.to_vec();
    for i in 0..n {
        let s: f64 = (0..channels).map(|c| x[c * n + i]).sum();
        for c in 0..channels {
            out[c * n + i] = x[c * n + i] / s;
        }
    }
    out
}

pub fn localized_smooth(m: &VectorField, lw: &LocalWeights, spec: &MultiGaussianSpec) -> Result<VectorField> {
    localized_smooth_with(m, &lw.weights, &spec.sigmas)
}

/// `sum_nodes m . v * cell_volume`.
pub fn metric_inner_product(m: &VectorField, v: &VectorField) -> Result<f64> {
    m.grid.check_same(&v.grid)?;
    Ok(m.values.iter().zip(&v.values).map(|(a, b)| a * b).sum::<f64>() * m.grid.cell_volume())
}

/// `<m, K m>` evaluated in the Fourier domain as
/// `cell_volume / N * sum_k K^(k) |m^(k)|^2` with the multi-Gaussian
/// spectrum `K^ = sum_i w_i prod_axes g^_i`.
pub fn fourier_metric_norm(m: &VectorField, spec: &MultiGaussianSpec) -> Result<f64> {
    spec.validate()?;
    let grid = m.grid;
    let n = grid.len();
    let mut planner = FftPlanner::<f64>::new();
    let spectra: Vec<Vec<Vec<f64>>> = (0..grid.ndim())
        .map(|a| {
            let len = grid.dims()[a];
            let fft = planner.plan_fft_forward(len);
            spec.sigmas
                .iter()
                .map(|&s| {
                    let mut k: Vec<Complex<f64>> = gaussian_kernel_1d(len, grid.spacing(a), s)
                        .into_iter()
                        .map(|v| Complex::new(v, 0.0))
                        .collect();
                    fft.process(&mut k);
                    k.iter().map(|c| c.re).collect()
                })
                .collect()
        })
        .collect();
    let mut total = 0.0;
    for c in 0..grid.ndim() {
        let mut data: Vec<Complex<f64>> = m.component(c).iter().map(|&v| Complex::new(v, 0.0)).collect();
        for a in 0..grid.ndim() {
            let len = grid.dims()[a];
            let stride = grid.stride(a);
            let fft = planner.plan_fft_forward(len);
            let mut line = vec![Complex::new(0.0, 0.0); len];
            for base in (0..n).filter(|&i| grid.unravel(i)[a] == 0) {
                for (j, v) in line.iter_mut().enumerate() {
                    *v = data[base + j * stride];
                }
                fft.process(&mut line);
                for (j, v) in line.iter().enumerate() {
                    data[base + j * stride] = *v;
                }
            }
        }
        for (i, v) in data.iter().enumerate() {
            let ix = grid.unravel(i);
            let k: f64 = spec
                .setpoint_weights
                .iter()
                .enumerate()
                .map(|(g, w)| w * (0..grid.ndim()).map(|a| spectra[a][g][ix[a]]).product::<f64>())
                .sum();
            total += k * v.norm_sqr();
        }
    }
    Ok(total * grid.cell_volume() / n as f64)
}

/// Unstandardized OMT cost of one weight vector.
pub fn omt_penalty(w: &[f64], spec: &MultiGaussianSpec) -> f64 {
    let last = spec.sigmas[spec.n() - 1];
    w.iter()
        .zip(&spec.sigmas)
        .map(|(wi, si)| wi * (last / si).ln().abs().powf(spec.omt_power))
        .sum()
}

/// OMT cost scaled into `[0,1]`.
pub fn omt_standardized(w: &[f64], spec: &MultiGaussianSpec) -> Result<f64> {
    let c = spec.omt_coefficients()?;
    Ok(w.iter().zip(&c).map(|(a, b)| a * b).sum())
}

/// Node-wise standardized OMT of the smoothed weights, integrated.
pub fn omt_field_penalty(lw: &LocalWeights, spec: &MultiGaussianSpec) -> Result<f64> {
    let c = spec.omt_coefficients()?;
    let cv = lw.grid().cell_volume();
    Ok(lw
        .weights
        .iter()
        .zip(&c)
        .map(|(w, ci)| ci * w.values.iter().sum::<f64>())
        .sum::<f64>()
        * cv)
}

/// `gamma = 1 / (1 + alpha |grad I|)`.
pub fn edge_indicator(image: &ScalarField, alpha: f64) -> Result<ScalarField> {
    if !(alpha > 0.0) {
        return Err(Error::param(format!("edge indicator alpha {alpha} must be > 0")));
    }
    let grid = image.grid;
    let n = grid.len();
    let mut sq = vec![0.0; n];
    let mut d = vec![0.0; n];
    for k in 0..grid.ndim() {
        diff_axis(&grid, k, &image.values, &mut d);
        sq.iter_mut().zip(&d).for_each(|(s, x)| *s += x * x);
    }
    Ok(ScalarField {
        grid,
        values: sq.iter().map(|s| 1.0 / (1.0 + alpha * s.sqrt())).collect(),
    })
}

#[derive(Clone, Debug)]
pub struct TvValue {
    pub penalty: f64,
    pub channel_integrals: Vec<f64>,
}

/// `sqrt(sum_i T_i^2)` with `T_i = sum gamma sqrt(|grad w_i|^2 + eps^2) * cell_volume`.
pub fn tv_penalty(preweights: &[ScalarField], gamma: &ScalarField, eps_tv: f64) -> Result<TvValue> {
    let grid = gamma.grid;
    let flat: Vec<f64> = preweights
        .iter()
        .map(|p| grid.check_same(&p.grid).map(|_| p.values.clone()))
        .collect::<Result<Vec<_>>>()?
        .concat();
    let (t, _) = tv_channels(&grid, &flat, preweights.len(), &gamma.values, eps_tv, false);
    Ok(TvValue {
        penalty: t.iter().map(|x| x * x).sum::<f64>().sqrt(),
        channel_integrals: t,
    })
}

/// Channel integrals and, optionally, per-channel gradient fields and their
/// smoothed norms (needed by the adjoint).
fn tv_channels(
    grid: &Grid,
    x: &[f64],
    channels: usize,
    gamma: &[f64],
    eps: f64,
    keep: bool,
) -> (Vec<f64>, Vec<(Vec<Vec<f64>>, Vec<f64>)>) {
    let n = grid.len();
    let cv = grid.cell_volume();
    let mut ints = Vec::with_capacity(channels);
    let mut kept = Vec::new();
    for c in 0..channels {
        let chan = &x[c * n..(c + 1) * n];
        let mut grads = Vec::with_capacity(grid.ndim());
        let mut norm = vec![eps * eps; n];
        for k in 0..grid.ndim() {
            let mut d = vec![0.0; n];
            diff_axis(grid, k, chan, &mut d);
            norm.iter_mut().zip(&d).for_each(|(s, v)| *s += v * v);
            grads.push(d);
        }
        norm.iter_mut().for_each(|s| *s = s.sqrt());
        ints.push(norm.iter().zip(gamma).map(|(s, g)| s * g).sum::<f64>() * cv);
        if keep {
            kept.push((grads, norm));
        }
    }
    (ints, kept)
}

// ---- tape versions -------------------------------------------------------

/// Global multi-Gaussian smoothing of a vector field on the tape.
pub fn tape_multi_gaussian_smooth(tape: &mut Tape, m: Var, spec: &MultiGaussianSpec) -> Result<Var> {
    spec.validate()?;
    let mut acc: Option<Var> = None;
    for (sigma, w) in spec.sigmas.iter().zip(&spec.setpoint_weights) {
        let s = tape.smooth(m, *sigma)?;
        let s = tape.scale(s, *w)?;
        acc = Some(match acc {
            None => s,
            Some(a) => tape.add(a, s)?,
        });
    }
    Ok(acc.expect("at least two Gaussians"))
}

/// From raw simplex pre-weights (N channels) to `(floored pre-weights,
/// smoothed normalized weights)`.
pub fn tape_local_weights(tape: &mut Tape, raw: Var, spec: &MultiGaussianSpec) -> Result<(Var, Var)> {
    let (a, b) = floor_map(spec);
    let pre = tape.affine(raw, a, b)?;
    let smoothed = tape.smooth(pre, spec.preweight_smoothing_sigma)?;
    let w = channel_normalize(tape, smoothed)?;
    Ok((pre, w))
}

/// Localized smoothing of `m` (d channels) with weights `w` (N channels).
pub fn tape_localized_smooth(tape: &mut Tape, m: Var, w: Var, spec: &MultiGaussianSpec) -> Result<Var> {
    let ws = tape.shape(w)?;
    if ws.channels != spec.n() {
        return Err(Error::shape(format!("{} weight channels for {} Gaussians", ws.channels, spec.n())));
    }
    if let Some(x) = tape.value(w)?.iter().find(|&&x| !(x >= 0.0)) {
        return Err(Error::InvalidWeights(format!("negative weight {x}")));
    }
    let mut acc: Option<Var> = None;
    for (i, sigma) in spec.sigmas.iter().enumerate() {
        let wi = tape.select_channel(w, i)?;
        let sw = tape.sqrt(wi)?;
        let t = tape.mul_broadcast(m, sw)?;
        let t = tape.smooth(t, *sigma)?;
        let t = tape.mul_broadcast(t, sw)?;
        acc = Some(match acc {
            None => t,
            Some(a) => tape.add(a, t)?,
        });
    }
    Ok(acc.expect("at least two Gaussians"))
}

/// Divides every channel by the per-node channel sum.
pub fn channel_normalize(tape: &mut Tape, x: Var) -> Result<Var> {
    let shape = tape.shape(x)?;
    let n = shape.grid()?.len();
    let channels = shape.channels;
    let value = normalize_channels(tape.value(x)?, n, channels);
    let y = value.clone();
    tape.push(
        Primitive::ChannelNormalize,
        value,
        shape,
        &[x],
        Box::new(move |vals, g, sink| {
            let xv = vals.get(x);
            if let Some(s) = sink.slot(x) {
                for i in 0..n {
                    let total: f64 = (0..channels).map(|c| xv[c * n + i]).sum();
                    let gy: f64 = (0..channels).map(|c| g[c * n + i] * y[c * n + i]).sum();
                    for c in 0..channels {
                        s[c * n + i] += (g[c * n + i] - gy) / total;
                    }
                }
            }
        }),
    )
}

/// `cell_volume * sum_i c_i sum_x w_i(x)` with standardized OMT costs `c_i`.
pub fn omt_integral(tape: &mut Tape, w: Var, spec: &MultiGaussianSpec) -> Result<Var> {
    let shape = tape.shape(w)?;
    let grid = shape.grid()?;
    let n = grid.len();
    let coeffs = spec.omt_coefficients()?;
    if coeffs.len() != shape.channels {
        return Err(Error::shape("OMT weights and spec disagree on N"));
    }
    let cv = grid.cell_volume();
    let wv = tape.value(w)?;
    let value = coeffs
        .iter()
        .enumerate()
        .map(|(c, k)| k * wv[c * n..(c + 1) * n].iter().sum::<f64>())
        .sum::<f64>()
        * cv;
    tape.push(
        Primitive::OmtIntegral,
        vec![value],
        Shape::scalar(),
        &[w],
        Box::new(move |_, g, sink| {
            if let Some(s) = sink.slot(w) {
                for (c, k) in coeffs.iter().enumerate() {
                    let gk = g[0] * k * cv;
                    s[c * n..(c + 1) * n].iter_mut().for_each(|o| *o += gk);
                }
            }
        }),
    )
}

/// Edge-weighted TV of the pre-weight channels, coupled in l2 across channels.
pub fn tv_penalty_tape(tape: &mut Tape, pre: Var, gamma: &ScalarField, eps_tv: f64) -> Result<Var> {
    let shape = tape.shape(pre)?;
    let grid = shape.grid()?;
    grid.check_same(&gamma.grid)?;
    if gamma.values.iter().any(|&g| !(g > 0.0)) {
        return Err(Error::param("edge indicator must be positive"));
    }
    let channels = shape.channels;
    let gam = gamma.values.clone();
    let (ints, _) = tv_channels(&grid, tape.value(pre)?, channels, &gam, eps_tv, false);
    let total = ints.iter().map(|x| x * x).sum::<f64>().sqrt();
    tape.push(
        Primitive::TvPenalty,
        vec![total],
        Shape::scalar(),
        &[pre],
        Box::new(move |vals, g, sink| {
            let n = grid.len();
            let cv = grid.cell_volume();
            let (ints, kept) = tv_channels(&grid, vals.get(pre), channels, &gam, eps_tv, true);
            if let Some(s) = sink.slot(pre) {
                for (c, (grads, norm)) in kept.iter().enumerate() {
                    let coef = g[0] * ints[c] / total * cv;
                    let dst = &mut s[c * n..(c + 1) * n];
                    for (k, d) in grads.iter().enumerate() {
                        let flux: Vec<f64> = (0..n).map(|i| coef * gam[i] * d[i] / norm[i]).collect();
                        diff_axis_transpose(&grid, k, &flux, dst);
                    }
                }
            }
        }),
    )
}
