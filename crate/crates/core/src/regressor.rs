//! The local weight regressor: a two-layer convolutional network mapping the
//! source image (optionally with the momentum) to pre-weights on the
//! probability simplex through a weighted linear softmax.
//!
//! `conv5x5(c_in -> n1) -> BN -> lReLU -> conv5x5(n1 -> N) -> BN -> softmax_w`
//!
//! Convolutions use periodic padding. Batch normalization always uses the
//! spatial statistics of the current input, per channel.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Primitive, Shape, Tape, Var};
use crate::error::{Error, Result};
use crate::field::{Grid, ScalarField, VectorField};
use crate::kernels::{split_channels, MultiGaussianSpec};

pub const WEIGHT_DECAY: f64 = 1e-5;
const MAGIC: &str = "MREG1";

#[derive(Clone, Debug, PartialEq)]
pub struct RegressorConfig {
    /// 1 for image-only input, `d + 1` when the momentum is appended.
    pub in_channels: usize,
    pub hidden: usize,
    pub outputs: usize,
    pub kernel: usize,
    pub leaky_slope: f64,
    pub bn_eps: f64,
    pub bn2_init_scale: f64,
}

impl RegressorConfig {
    pub fn new(outputs: usize) -> RegressorConfig {
        RegressorConfig {
            in_channels: 1,
            hidden: 20,
            outputs,
            kernel: 5,
            leaky_slope: 0.01,
            bn_eps: 1e-5,
            bn2_init_scale: 0.025,
        }
    }

    /// Image plus momentum input in 2D.
    pub fn with_momentum(mut self) -> RegressorConfig {
        self.in_channels = 3;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel % 2 == 0 || self.kernel == 0 {
            return Err(Error::param(format!("kernel size {} must be odd", self.kernel)));
        }
        if self.in_channels == 0 || self.hidden == 0 || self.outputs < 2 {
            return Err(Error::param("regressor needs non-empty layers"));
        }
        if !(self.bn_eps > 0.0) {
            return Err(Error::param("batch-norm epsilon must be positive"));
        }
        Ok(())
    }

    fn tensor_lens(&self) -> [usize; 8] {
        let kk = self.kernel * self.kernel;
        [
            self.hidden * self.in_channels * kk,
            self.hidden,
            self.hidden,
            self.hidden,
            self.outputs * self.hidden * kk,
            self.outputs,
            self.outputs,
            self.outputs,
        ]
    }
}

pub const TENSOR_NAMES: [&str; 8] = [
    "conv1.weight",
    "conv1.bias",
    "bn1.scale",
    "bn1.offset",
    "conv2.weight",
    "conv2.bias",
    "bn2.scale",
    "bn2.offset",
];

#[derive(Clone, Debug, PartialEq)]
pub struct RegressorParams {
    pub config: RegressorConfig,
    /// Tensors in declaration order, see [`TENSOR_NAMES`].
    pub tensors: Vec<Vec<f64>>,
}

impl RegressorParams {
    /// He-style uniform filters with bound `sqrt(6 / fan_in)`, zero biases,
    /// unit bn1 scale and small bn2 scale.
    pub fn init(config: RegressorConfig, seed: u64) -> Result<RegressorParams> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lens = config.tensor_lens();
        let kk = (config.kernel * config.kernel) as f64;
        let mut uniform = |len: usize, fan_in: f64| -> Vec<f64> {
            let bound = (6.0 / fan_in).sqrt();
            (0..len).map(|_| rng.gen_range(-bound..bound)).collect()
        };
        let conv1 = uniform(lens[0], config.in_channels as f64 * kk);
        let conv2 = uniform(lens[4], config.hidden as f64 * kk);
        let tensors = vec![
            conv1,
            vec![0.0; lens[1]],
            vec![1.0; lens[2]],
            vec![0.0; lens[3]],
            conv2,
            vec![0.0; lens[5]],
            vec![config.bn2_init_scale; lens[6]],
            vec![0.0; lens[7]],
        ];
        Ok(RegressorParams { config, tensors })
    }

    /// All-zero filters: the network outputs the setpoint everywhere.
    pub fn zeros(config: RegressorConfig) -> Result<RegressorParams> {
        let mut p = RegressorParams::init(config, 0)?;
        p.tensors[0].iter_mut().for_each(|x| *x = 0.0);
        p.tensors[4].iter_mut().for_each(|x| *x = 0.0);
        Ok(p)
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Vec::len).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors.concat()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::shape(format!("{} parameters, expected {}", flat.len(), self.num_params())));
        }
        let mut off = 0;
        for t in &mut self.tensors {
            let len = t.len();
            t.copy_from_slice(&flat[off..off + len]);
            off += len;
        }
        Ok(())
    }

    /// Records every tensor as a leaf (trainable) or constant.
    pub fn record(&self, tape: &mut Tape, trainable: bool) -> Result<Vec<Var>> {
        self.tensors
            .iter()
            .map(|t| {
                let shape = Shape::flat(t.len());
                if trainable {
                    tape.leaf(t.clone(), shape)
                } else {
                    tape.constant(t.clone(), shape)
                }
            })
            .collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let c = &self.config;
        let mut out = format!(
            "{MAGIC}\nin_channels {} hidden {} outputs {} kernel {} leaky_slope {:?} bn_eps {:?} bn2_init_scale {:?}\n",
            c.in_channels, c.hidden, c.outputs, c.kernel, c.leaky_slope, c.bn_eps, c.bn2_init_scale
        )
        .into_bytes();
        for t in &self.tensors {
            for v in t {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<RegressorParams> {
        let bad = |m: &str| Error::Format(format!("parameter file: {m}"));
        let mut lines = bytes.splitn(3, |&b| b == b'\n');
        if lines.next() != Some(MAGIC.as_bytes()) {
            return Err(bad("missing MREG1 magic"));
        }
        let header = std::str::from_utf8(lines.next().ok_or_else(|| bad("no header"))?)
            .map_err(|_| bad("header is not text"))?;
        let body = lines.next().ok_or_else(|| bad("no tensor data"))?;
        let toks: Vec<&str> = header.split_whitespace().collect();
        if toks.len() != 14 {
            return Err(bad("malformed header"));
        }
        let field = |i: usize, name: &str| -> Result<&str> {
            if toks[2 * i] != name {
                return Err(bad(&format!("expected '{name}'")));
            }
            Ok(toks[2 * i + 1])
        };
        let int = |i, name| field(i, name)?.parse::<usize>().map_err(|_| bad(name));
        let float = |i, name| field(i, name)?.parse::<f64>().map_err(|_| bad(name));
        let config = RegressorConfig {
            in_channels: int(0, "in_channels")?,
            hidden: int(1, "hidden")?,
            outputs: int(2, "outputs")?,
            kernel: int(3, "kernel")?,
            leaky_slope: float(4, "leaky_slope")?,
            bn_eps: float(5, "bn_eps")?,
            bn2_init_scale: float(6, "bn2_init_scale")?,
        };
        config.validate()?;
        let lens = config.tensor_lens();
        let total: usize = lens.iter().sum();
        if body.len() != total * 8 {
            return Err(bad(&format!("{} data bytes, expected {}", body.len(), total * 8)));
        }
        let mut values = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let tensors = lens.iter().map(|&l| values.by_ref().take(l).collect()).collect();
        Ok(RegressorParams { config, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<RegressorParams> {
        RegressorParams::decode(&fs::read(path)?)
    }
}

/// `1e-5 * |conv filters|^2`.
pub fn weight_decay_penalty(theta: &RegressorParams) -> f64 {
    WEIGHT_DECAY * [0, 4].iter().flat_map(|&i| &theta.tensors[i]).map(|x| x * x).sum::<f64>()
}

pub fn weight_decay_tape(tape: &mut Tape, theta: &[Var]) -> Result<Var> {
    let a = tape.dot(theta[0], theta[0])?;
    let b = tape.dot(theta[4], theta[4])?;
    let s = tape.add(a, b)?;
    tape.scale(s, WEIGHT_DECAY)
}

/// Result of a regressor evaluation.
#[derive(Clone, Debug)]
pub struct SimplexOutput {
    pub preweights: Vec<ScalarField>,
    pub input_penalty: f64,
    /// Nodes where every softmax input clamped to zero (setpoint used).
    pub degenerate_nodes: usize,
}

/// Weighted linear softmax of a single vector.
pub fn weighted_linear_softmax(z: &[f64], setpoint: &[f64]) -> Result<Vec<f64>> {
    if z.len() != setpoint.len() {
        return Err(Error::shape("softmax input and setpoint differ in length"));
    }
    let (out, _) = wls_values(z, setpoint, 1);
    Ok(out)
}

/// Per-node softmax of channel-major `z`; returns the degenerate node count.
fn wls_values(z: &[f64], setpoint: &[f64], n: usize) -> (Vec<f64>, usize) {
    let k = setpoint.len();
    let mut out = vec![0.0; z.len()];
    let mut degenerate = 0;
    for i in 0..n {
        let mean = (0..k).map(|c| z[c * n + i]).sum::<f64>() / k as f64;
        let total: f64 = (0..k)
            .map(|c| (setpoint[c] + (z[c * n + i] - mean)).clamp(0.0, 1.0))
            .sum();
        for c in 0..k {
            out[c * n + i] = if total > 0.0 {
                (setpoint[c] + (z[c * n + i] - mean)).clamp(0.0, 1.0) / total
            } else {
                setpoint[c]
            };
        }
        if !(total > 0.0) {
            degenerate += 1;
        }
    }
    (out, degenerate)
}

/// `sum_nodes sum_i (u_i - clamp(u_i, eps, 1))^2 * cell_volume` with
/// `u = w + z - mean(z)`.
pub fn input_range_penalty(z: &[ScalarField], setpoint: &[f64], eps: f64) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::param(format!("range penalty epsilon {eps}")));
    }
    if z.len() != setpoint.len() {
        return Err(Error::shape("penalty input and setpoint differ in length"));
    }
    let grid = z[0].grid;
    let flat: Vec<f64> = z.iter().flat_map(|f| f.values.iter().copied()).collect();
    Ok(range_terms(&flat, setpoint, eps, grid.len()).0 * grid.cell_volume())
}

/// Penalty sum (without cell volume) and its gradient with respect to `z`.
fn range_terms(z: &[f64], setpoint: &[f64], eps: f64, n: usize) -> (f64, Vec<f64>) {
    let k = setpoint.len();
    let mut total = 0.0;
    let mut grad = vec![0.0; z.len()];
    for i in 0..n {
        let mean = (0..k).map(|c| z[c * n + i]).sum::<f64>() / k as f64;
        let mut du = vec![0.0; k];
        for c in 0..k {
            let u = setpoint[c] + (z[c * n + i] - mean);
            let r = u - u.clamp(eps, 1.0);
            total += r * r;
            du[c] = 2.0 * r;
        }
        let mdu = du.iter().sum::<f64>() / k as f64;
        for c in 0..k {
            grad[c * n + i] = du[c] - mdu;
        }
    }
    (total, grad)
}

impl Tape {
    /// Periodic 2D cross-correlation: `x` has `c_in` channels, `w` is
    /// `[c_out][c_in][k][k]`, `b` is `[c_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, kernel: usize) -> Result<Var> {
        let sx = self.shape(x)?;
        let grid = sx.grid()?;
        if grid.ndim() != 2 {
            return Err(Error::param("the regressor convolution is two-dimensional"));
        }
        let cin = sx.channels;
        let kk = kernel * kernel;
        let wlen = self.value(w)?.len();
        if kernel % 2 == 0 || wlen % (cin * kk) != 0 {
            return Err(Error::shape(format!("{wlen} filter entries for {cin} channels, size {kernel}")));
        }
        let cout = wlen / (cin * kk);
        if self.value(b)?.len() != cout {
            return Err(Error::shape("conv bias length"));
        }
        let geo = ConvGeometry::new(grid, kernel);
        let value = geo.forward(self.value(x)?, self.value(w)?, self.value(b)?, cin, cout);
        self.push(
            Primitive::Conv2d,
            value,
            Shape::field(grid, cout),
            &[x, w, b],
            Box::new(move |vals, g, sink| {
                let (xv, wv) = (vals.get(x), vals.get(w));
                if let Some(s) = sink.slot(x) {
                    geo.backward_input(g, wv, cin, cout, s);
                }
                if let Some(s) = sink.slot(w) {
                    geo.backward_filter(g, xv, cin, cout, s);
                }
                if let Some(s) = sink.slot(b) {
                    let n = grid.len();
                    for (o, so) in s.iter_mut().enumerate() {
                        *so += g[o * n..(o + 1) * n].iter().sum::<f64>();
                    }
                }
            }),
        )
    }

    /// Per-channel normalization with spatial statistics, then
    /// `scale * xhat + offset`.
    pub fn batch_norm(&mut self, x: Var, scale: Var, offset: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x)?;
        let n = sx.grid()?.len();
        let ch = sx.channels;
        if self.value(scale)?.len() != ch || self.value(offset)?.len() != ch {
            return Err(Error::shape("batch-norm parameters per channel"));
        }
        let (xhat, inv_std) = normalize(self.value(x)?, n, ch, eps);
        let (sv, ov) = (self.value(scale)?, self.value(offset)?);
        let value: Vec<f64> = xhat
            .iter()
            .enumerate()
            .map(|(i, h)| sv[i / n] * h + ov[i / n])
            .collect();
        self.push(
            Primitive::BatchNorm,
            value,
            sx,
            &[x, scale, offset],
            Box::new(move |vals, g, sink| {
                let sv = vals.get(scale);
                if let Some(s) = sink.slot(x) {
                    for c in 0..ch {
                        let r = c * n..(c + 1) * n;
                        let gh: Vec<f64> = g[r.clone()].iter().map(|v| v * sv[c]).collect();
                        let mg = gh.iter().sum::<f64>() / n as f64;
                        let mgh = gh.iter().zip(&xhat[r.clone()]).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for (j, o) in s[r.clone()].iter_mut().enumerate() {
                            *o += inv_std[c] * (gh[j] - mg - xhat[c * n + j] * mgh);
                        }
                    }
                }
                if let Some(s) = sink.slot(scale) {
                    for c in 0..ch {
                        s[c] += (c * n..(c + 1) * n).map(|i| g[i] * xhat[i]).sum::<f64>();
                    }
                }
                if let Some(s) = sink.slot(offset) {
                    for c in 0..ch {
                        s[c] += g[c * n..(c + 1) * n].iter().sum::<f64>();
                    }
                }
            }),
        )
    }

    /// Node-wise weighted linear softmax with a fixed setpoint.
    pub fn weighted_linear_softmax(&mut self, z: Var, setpoint: &[f64]) -> Result<Var> {
        let sz = self.shape(z)?;
        let n = sz.grid()?.len();
        let k = sz.channels;
        if setpoint.len() != k {
            return Err(Error::shape("softmax channels and setpoint differ"));
        }
        let setpoint = setpoint.to_vec();
        let (value, _) = wls_values(self.value(z)?, &setpoint, n);
        let out = value.clone();
        self.push(
            Primitive::WeightedLinearSoftmax,
            value,
            sz,
            &[z],
            Box::new(move |vals, g, sink| {
                let zv = vals.get(z);
                let Some(s) = sink.slot(z) else { return };
                let mut du = vec![0.0; k];
                for i in 0..n {
                    let mean = (0..k).map(|c| zv[c * n + i]).sum::<f64>() / k as f64;
                    let u: Vec<f64> = (0..k).map(|c| setpoint[c] + (zv[c * n + i] - mean)).collect();
                    let total: f64 = u.iter().map(|x| x.clamp(0.0, 1.0)).sum();
                    if !(total > 0.0) {
                        continue;
                    }
                    let gy: f64 = (0..k).map(|c| g[c * n + i] * out[c * n + i]).sum();
                    for c in 0..k {
                        let inside = u[c] > 0.0 && u[c] < 1.0;
                        du[c] = if inside { (g[c * n + i] - gy) / total } else { 0.0 };
                    }
                    let m = du.iter().sum::<f64>() / k as f64;
                    for c in 0..k {
                        s[c * n + i] += du[c] - m;
                    }
                }
            }),
        )
    }

    pub fn input_range_penalty(&mut self, z: Var, setpoint: &[f64], eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::param(format!("range penalty epsilon {eps}")));
        }
        let sz = self.shape(z)?;
        let grid = sz.grid()?;
        if setpoint.len() != sz.channels {
            return Err(Error::shape("penalty channels and setpoint differ"));
        }
        let cv = grid.cell_volume();
        let (total, grad) = range_terms(self.value(z)?, setpoint, eps, grid.len());
        self.push(
            Primitive::InputRangePenalty,
            vec![total * cv],
            Shape::scalar(),
            &[z],
            Box::new(move |_, g, sink| {
                if let Some(s) = sink.slot(z) {
                    s.iter_mut().zip(&grad).for_each(|(o, d)| *o += g[0] * cv * d);
                }
            }),
        )
    }
}

fn normalize(x: &[f64], n: usize, ch: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let mut xhat = vec![0.0; x.len()];
    let mut inv = vec![0.0; ch];
    for c in 0..ch {
        let xs = &x[c * n..(c + 1) * n];
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        inv[c] = 1.0 / (var + eps).sqrt();
        for (o, v) in xhat[c * n..(c + 1) * n].iter_mut().zip(xs) {
            *o = (v - mean) * inv[c];
        }
    }
    (xhat, inv)
}

/// Wrapped row and column indices for each filter tap.
struct ConvGeometry {
    rows: usize,
    cols: usize,
    kernel: usize,
    row_map: Vec<Vec<usize>>,
    col_map: Vec<Vec<usize>>,
}

impl ConvGeometry {
    fn new(grid: Grid, kernel: usize) -> ConvGeometry {
        let (rows, cols) = (grid.dims()[0], grid.dims()[1]);
        let half = kernel / 2;
        let wrap = |len: usize| -> Vec<Vec<usize>> {
            (0..kernel)
                .map(|a| (0..len).map(|i| (i + len * kernel + a - half) % len).collect())
                .collect()
        };
        ConvGeometry {
            rows,
            cols,
            kernel,
            row_map: wrap(rows),
            col_map: wrap(cols),
        }
    }

    fn n(&self) -> usize {
        self.rows * self.cols
    }

    fn forward(&self, x: &[f64], w: &[f64], b: &[f64], cin: usize, cout: usize) -> Vec<f64> {
        let (n, k) = (self.n(), self.kernel);
        let mut y = vec![0.0; n * cout];
        for o in 0..cout {
            let yo = &mut y[o * n..(o + 1) * n];
            yo.iter_mut().for_each(|v| *v = b[o]);
            for c in 0..cin {
                let xc = &x[c * n..(c + 1) * n];
                for a in 0..k {
                    for bb in 0..k {
                        let wv = w[((o * cin + c) * k + a) * k + bb];
                        let cm = &self.col_map[bb];
                        for i in 0..self.rows {
                            let src = &xc[self.row_map[a][i] * self.cols..][..self.cols];
                            let dst = &mut yo[i * self.cols..(i + 1) * self.cols];
                            for (j, d) in dst.iter_mut().enumerate() {
                                *d += wv * src[cm[j]];
                            }
                        }
                    }
                }
            }
        }
        y
    }

    fn backward_input(&self, g: &[f64], w: &[f64], cin: usize, cout: usize, out: &mut [f64]) {
        let (n, k) = (self.n(), self.kernel);
        for o in 0..cout {
            let go = &g[o * n..(o + 1) * n];
            for c in 0..cin {
                let oc = &mut out[c * n..(c + 1) * n];
                for a in 0..k {
                    for bb in 0..k {
                        let wv = w[((o * cin + c) * k + a) * k + bb];
                        let cm = &self.col_map[bb];
                        for i in 0..self.rows {
                            let base = self.row_map[a][i] * self.cols;
                            let gi = &go[i * self.cols..(i + 1) * self.cols];
                            for (j, gv) in gi.iter().enumerate() {
                                oc[base + cm[j]] += wv * gv;
                            }
                        }
                    }
                }
            }
        }
    }

    fn backward_filter(&self, g: &[f64], x: &[f64], cin: usize, cout: usize, out: &mut [f64]) {
        let (n, k) = (self.n(), self.kernel);
        for o in 0..cout {
            let go = &g[o * n..(o + 1) * n];
            for c in 0..cin {
                let xc = &x[c * n..(c + 1) * n];
                for a in 0..k {
                    for bb in 0..k {
                        let cm = &self.col_map[bb];
                        let mut acc = 0.0;
                        for i in 0..self.rows {
                            let src = &xc[self.row_map[a][i] * self.cols..][..self.cols];
                            let gi = &go[i * self.cols..(i + 1) * self.cols];
                            for (j, gv) in gi.iter().enumerate() {
                                acc += gv * src[cm[j]];
                            }
                        }
                        out[((o * cin + c) * k + a) * k + bb] += acc;
                    }
                }
            }
        }
    }
}

/// Tape variables produced by one regressor evaluation.
#[derive(Clone, Copy, Debug)]
pub struct RegressorVars {
    /// Pre-activation softmax input (N channels).
    pub logits: Var,
    /// Pre-weights on the simplex (N channels).
    pub preweights: Var,
    pub input_penalty: Var,
}

/// Records the network on `tape`. `theta` are the tensors from
/// [`RegressorParams::record`].
pub fn forward_tape(
    tape: &mut Tape,
    config: &RegressorConfig,
    image: Var,
    momentum: Option<Var>,
    theta: &[Var],
    spec: &MultiGaussianSpec,
) -> Result<RegressorVars> {
    if theta.len() != 8 {
        return Err(Error::shape("regressor needs eight tensors"));
    }
    if config.outputs != spec.n() {
        return Err(Error::shape("regressor outputs and number of Gaussians differ"));
    }
    let input = match (momentum, config.in_channels) {
        (None, 1) => image,
        (Some(m), c) if c > 1 => tape.concat(&[image, m])?,
        _ => return Err(Error::param("momentum input does not match the regressor configuration")),
    };
    if tape.shape(input)?.channels != config.in_channels {
        return Err(Error::shape("regressor input channel count"));
    }
    let h = tape.conv2d(input, theta[0], theta[1], config.kernel)?;
    let h = tape.batch_norm(h, theta[2], theta[3], config.bn_eps)?;
    let h = tape.leaky_relu(h, config.leaky_slope)?;
    let h = tape.conv2d(h, theta[4], theta[5], config.kernel)?;
    let logits = tape.batch_norm(h, theta[6], theta[7], config.bn_eps)?;
    let preweights = tape.weighted_linear_softmax(logits, &spec.setpoint_weights)?;
    let input_penalty = tape.input_range_penalty(logits, &spec.setpoint_weights, spec.preweight_floor)?;
    Ok(RegressorVars {
        logits,
        preweights,
        input_penalty,
    })
}

/// Evaluates the regressor on plain fields.
pub fn forward(
    image: &ScalarField,
    momentum: Option<&VectorField>,
    theta: &RegressorParams,
    spec: &MultiGaussianSpec,
) -> Result<SimplexOutput> {
    spec.validate()?;
    let grid = image.grid;
    let mut tape = Tape::new();
    let iv = tape.constant(image.values.clone(), Shape::field(grid, 1))?;
    let mv = match momentum {
        Some(m) => {
            grid.check_same(&m.grid)?;
            Some(tape.constant(m.values.clone(), Shape::field(grid, grid.ndim()))?)
        }
        None => None,
    };
    let vars = theta.record(&mut tape, false)?;
    let out = forward_tape(&mut tape, &theta.config, iv, mv, &vars, spec)?;
    let (_, degenerate) = wls_values(tape.value(out.logits)?, &spec.setpoint_weights, grid.len());
    Ok(SimplexOutput {
        preweights: split_channels(grid, tape.value(out.preweights)?.to_vec()),
        input_penalty: tape.scalar(out.input_penalty)?,
        degenerate_nodes: degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(grid: Grid) -> ScalarField {
        ScalarField::from_fn(grid, |x| {
            let r = ((x[0] - 0.45).powi(2) + (x[1] - 0.55).powi(2)).sqrt();
            if r < 0.3 {
                1.0
            } else {
                0.2 * x[0]
            }
        })
    }

    #[test]
    fn softmax_examples() {
        let w = [0.25; 4];
        let y = weighted_linear_softmax(&[0.1, 0.0, 0.0, -0.1], &w).unwrap();
        for (a, b) in y.iter().zip([0.35, 0.25, 0.25, 0.15]) {
            assert!((a - b).abs() < 1e-15);
        }
        let sp = MultiGaussianSpec::default().setpoint_weights;
        assert_eq!(weighted_linear_softmax(&[0.0; 4], &sp).unwrap(), sp);
        let shifted = weighted_linear_softmax(&[3.5; 4], &sp).unwrap();
        for (a, b) in shifted.iter().zip(&sp) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn range_penalty_examples() {
        let grid = Grid::square(5).unwrap();
        let cv = grid.cell_volume();
        let w = [0.25; 4];
        let zero: Vec<ScalarField> = (0..4).map(|_| ScalarField::constant(grid, 0.0)).collect();
        assert_eq!(input_range_penalty(&zero, &w, 1e-3).unwrap(), 0.0);
        // one node with u_0 = 1.5: z = (1.25+d, d, d, d) with mean 0.3125+d
        let mut z = zero.clone();
        let node = 7;
        let d = 1.25 / 3.0;
        z[0].values[node] = 1.25 + 1.25 / 3.0 + d;
        for f in z.iter_mut().skip(1) {
            f.values[node] = d;
        }
        let u0 = 0.25 + z[0].values[node] - (z[0].values[node] + 3.0 * d) / 4.0;
        assert!((u0 - 1.5).abs() < 1e-12);
        // the other three channels sit at 0.25 + d - mean = -1/6 < eps
        let others = 3.0 * (-1.0f64 / 6.0 - 1e-3).powi(2);
        let p = input_range_penalty(&z, &w, 1e-3).unwrap();
        assert!((p - (0.25 + others) * cv).abs() < 1e-12);
    }

    #[test]
    fn zero_filters_give_setpoint() {
        let grid = Grid::square(16).unwrap();
        let spec = MultiGaussianSpec::default();
        let theta = RegressorParams::zeros(RegressorConfig::new(4)).unwrap();
        let out = forward(&image(grid), None, &theta, &spec).unwrap();
        for (f, w) in out.preweights.iter().zip(&spec.setpoint_weights) {
            assert!(f.values.iter().all(|v| v == w));
        }
        assert_eq!(out.input_penalty, 0.0);
    }

    #[test]
    fn fresh_init_stays_near_setpoint() {
        let grid = Grid::square(32).unwrap();
        let spec = MultiGaussianSpec::default();
        for seed in 0..3 {
            let theta = RegressorParams::init(RegressorConfig::new(4), seed).unwrap();
            let out = forward(&image(grid), None, &theta, &spec).unwrap();
            for (f, w) in out.preweights.iter().zip(&spec.setpoint_weights) {
                let dev = f.values.iter().map(|v| (v - w).abs()).fold(0.0, f64::max);
                assert!(dev < 0.2, "deviation {dev}");
            }
        }
    }

    #[test]
    fn periodic_shift_equivariance() {
        let grid = Grid::new(&[16, 12]).unwrap();
        let spec = MultiGaussianSpec::default();
        let theta = RegressorParams::init(RegressorConfig::new(4), 3).unwrap();
        let img = image(grid);
        let (sr, sc) = (3, 5);
        let shifted = ScalarField::new(
            grid,
            (0..grid.len())
                .map(|i| {
                    let (r, c) = (i / 12, i % 12);
                    img.values[((r + 16 - sr) % 16) * 12 + (c + 12 - sc) % 12]
                })
                .collect(),
        )
        .unwrap();
        let a = forward(&img, None, &theta, &spec).unwrap();
        let b = forward(&shifted, None, &theta, &spec).unwrap();
        for (fa, fb) in a.preweights.iter().zip(&b.preweights) {
            for i in 0..grid.len() {
                let (r, c) = (i / 12, i % 12);
                let j = ((r + sr) % 16) * 12 + (c + sc) % 12;
                assert!((fa.values[i] - fb.values[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_matches_direct_sum() {
        let grid = Grid::new(&[6, 7]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f64> = (0..2 * 42).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..3 * 2 * 9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b = vec![0.1, -0.2, 0.3];
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone(), Shape::field(grid, 2)).unwrap();
        let wv = tape.constant(w.clone(), Shape::flat(w.len())).unwrap();
        let bv = tape.constant(b.clone(), Shape::flat(3)).unwrap();
        let y = tape.conv2d(xv, wv, bv, 3).unwrap();
        let y = tape.value(y).unwrap();
        for o in 0..3 {
            for r in 0..6 {
                for c in 0..7 {
                    let mut s = b[o];
                    for ci in 0..2 {
                        for a in 0..3 {
                            for bb in 0..3 {
                                let rr = (r + 6 + a - 1) % 6;
                                let cc = (c + 7 + bb - 1) % 7;
                                s += w[((o * 2 + ci) * 3 + a) * 3 + bb] * x[ci * 42 + rr * 7 + cc];
                            }
                        }
                    }
                    assert!((y[o * 42 + r * 7 + c] - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn params_round_trip() {
        let theta = RegressorParams::init(RegressorConfig::new(4).with_momentum(), 9).unwrap();
        let back = RegressorParams::decode(&theta.encode()).unwrap();
        assert_eq!(back, theta);
        let mut bytes = theta.encode();
        bytes.truncate(bytes.len() - 3);
        assert!(RegressorParams::decode(&bytes).is_err());
        assert!(RegressorParams::decode(b"MREG2\nx\n").is_err());
    }

    #[test]
    fn momentum_variant_runs() {
        let grid = Grid::square(12).unwrap();
        let spec = MultiGaussianSpec::default();
        let theta = RegressorParams::init(RegressorConfig::new(4).with_momentum(), 2).unwrap();
        let m = VectorField::from_fn(grid, |x, o| {
            o[0] = x[1];
            o[1] = -x[0];
        });
        let out = forward(&image(grid), Some(&m), &theta, &spec).unwrap();
        assert_eq!(out.preweights.len(), 4);
        assert!(forward(&image(grid), None, &theta, &spec).is_err());
    }

    #[test]
    fn weight_decay_counts_filters_only() {
        let mut theta = RegressorParams::zeros(RegressorConfig::new(4)).unwrap();
        theta.tensors[1][0] = 5.0;
        assert_eq!(weight_decay_penalty(&theta), 0.0);
        theta.tensors[0][0] = 2.0;
        theta.tensors[4][1] = 1.0;
        assert!((weight_decay_penalty(&theta) - 5e-5).abs() < 1e-18);
    }
}
