//! Stationary-velocity registration: RK4 advection of the inverse map,
//! warping, normalized cross-correlation and the full registration energy
//! for the global and local stages.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Primitive, Shape, Tape, Var};
use crate::error::{Error, Result};
use crate::field::{diff_axis, diff_axis_transpose, jacobian, resample, Grid, ScalarField, Stencil, VectorField, MAX_DIM};
use crate::kernels::{
    edge_indicator, omt_integral, split_channels, tape_local_weights, tape_localized_smooth, tape_multi_gaussian_smooth,
    tv_penalty_tape, MultiGaussianSpec,
};
use crate::regressor::{forward_tape, weight_decay_tape, RegressorParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Global,
    Local,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Similarity {
    /// `(1 - NCC) / sigma^2` with the global zero-mean NCC.
    Global,
    /// Mean of Gaussian-windowed local NCC; `window` is the window sigma.
    Local { window: f64 },
}

/// Weights and numerical settings of the registration energy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnergyParams {
    pub lambda: f64,
    pub lambda_omt: f64,
    pub lambda_tv: f64,
    pub sim_sigma: f64,
    pub edge_alpha: f64,
    pub eps_tv: f64,
    pub rk4_steps: usize,
    pub similarity: Similarity,
}

impl Default for EnergyParams {
    fn default() -> Self {
        EnergyParams {
            lambda: 1.0,
            lambda_omt: 50.0,
            lambda_tv: 0.1,
            sim_sigma: 0.1,
            edge_alpha: 10.0,
            eps_tv: 1e-6,
            rk4_steps: 20,
            similarity: Similarity::Global,
        }
    }
}

impl EnergyParams {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [self.lambda, self.lambda_omt, self.lambda_tv, self.eps_tv];
        if nonneg.iter().any(|x| !(*x >= 0.0)) {
            return Err(Error::param("energy weights must be non-negative"));
        }
        if !(self.sim_sigma > 0.0) || !(self.edge_alpha > 0.0) || self.rk4_steps == 0 {
            return Err(Error::param("sim_sigma, edge_alpha and rk4_steps must be positive"));
        }
        if let Similarity::Local { window } = self.similarity {
            if !(window > 0.0) {
                return Err(Error::param("local NCC window must be positive"));
            }
        }
        Ok(())
    }
}

// ---- advection -----------------------------------------------------------

/// `-(D phi) v`, the right-hand side of the inverse-map transport equation.
fn transport_rhs(grid: &Grid, phi: &[f64], v: &[f64], out: &mut [f64]) {
    let n = grid.len();
    let d = grid.ndim();
    let mut dphi = vec![0.0; n];
    out.iter_mut().for_each(|o| *o = 0.0);
    for c in 0..d {
        for k in 0..d {
            diff_axis(grid, k, &phi[c * n..(c + 1) * n], &mut dphi);
            let vk = &v[k * n..(k + 1) * n];
            for (i, o) in out[c * n..(c + 1) * n].iter_mut().enumerate() {
                *o -= dphi[i] * vk[i];
            }
        }
    }
}

/// Adjoint of [`transport_rhs`] for cotangent `a` evaluated at `(phi, v)`.
fn transport_rhs_adjoint(grid: &Grid, phi: &[f64], v: &[f64], a: &[f64], phi_bar: &mut [f64], v_bar: Option<&mut [f64]>) {
    let n = grid.len();
    let d = grid.ndim();
    let mut tmp = vec![0.0; n];
    for c in 0..d {
        let ac = &a[c * n..(c + 1) * n];
        for k in 0..d {
            let vk = &v[k * n..(k + 1) * n];
            for i in 0..n {
                tmp[i] = -ac[i] * vk[i];
            }
            diff_axis_transpose(grid, k, &tmp, &mut phi_bar[c * n..(c + 1) * n]);
        }
    }
    if let Some(vb) = v_bar {
        for c in 0..d {
            let ac = &a[c * n..(c + 1) * n];
            for k in 0..d {
                diff_axis(grid, k, &phi[c * n..(c + 1) * n], &mut tmp);
                for (i, o) in vb[k * n..(k + 1) * n].iter_mut().enumerate() {
                    *o -= ac[i] * tmp[i];
                }
            }
        }
    }
}

/// Stage inputs `y1..y4` and slopes `k1..k4` of one RK4 step.
fn rk4_stages(grid: &Grid, phi: &[f64], v: &[f64], h: f64) -> ([Vec<f64>; 4], [Vec<f64>; 4]) {
    let len = phi.len();
    let mut ys: [Vec<f64>; 4] = Default::default();
    let mut ks: [Vec<f64>; 4] = Default::default();
    let offsets = [0.0, 0.5 * h, 0.5 * h, h];
    for s in 0..4 {
        ys[s] = if s == 0 {
            phi.to_vec()
        } else {
            (0..len).map(|i| phi[i] + offsets[s] * ks[s - 1][i]).collect()
        };
        let mut k = vec![0.0; len];
        transport_rhs(grid, &ys[s], v, &mut k);
        ks[s] = k;
    }
    (ys, ks)
}

fn rk4_step(grid: &Grid, phi: &[f64], v: &[f64], h: f64) -> Vec<f64> {
    let (_, ks) = rk4_stages(grid, phi, v, h);
    (0..phi.len())
        .map(|i| phi[i] + h / 6.0 * (ks[0][i] + 2.0 * ks[1][i] + 2.0 * ks[2][i] + ks[3][i]))
        .collect()
}

fn check_finite(values: &[f64], step: usize) -> Result<()> {
    if values.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Divergence {
            step,
            what: "non-finite inverse map".into(),
        })
    }
}

/// Integrates `phi_t + (D phi) v = 0` from the identity over `[0,1]`.
pub fn advect_inverse_map(v: &VectorField, steps: usize) -> Result<VectorField> {
    if steps == 0 {
        return Err(Error::param("advection needs at least one step"));
    }
    let grid = v.grid;
    let h = 1.0 / steps as f64;
    let mut phi = VectorField::identity(grid).values;
    for step in 0..steps {
        phi = rk4_step(&grid, &phi, &v.values, h);
        check_finite(&phi, step)?;
    }
    VectorField::new(grid, phi)
}

impl Tape {
    /// One RK4 step of the inverse-map transport with step size `h`.
    pub fn rk4_step(&mut self, phi: Var, v: Var, h: f64, step: usize) -> Result<Var> {
        let shape = self.shape(phi)?;
        let grid = shape.grid()?;
        if shape.channels != grid.ndim() || self.shape(v)? != shape {
            return Err(Error::shape("RK4 step needs a map and a velocity on one grid"));
        }
        let value = rk4_step(&grid, self.value(phi)?, self.value(v)?, h);
        check_finite(&value, step)?;
        self.push(
            Primitive::Rk4Step,
            value,
            shape,
            &[phi, v],
            Box::new(move |vals, g, sink| {
                let (pv, vv) = (vals.get(phi), vals.get(v));
                let len = pv.len();
                let (ys, _) = rk4_stages(&grid, pv, vv, h);
                let want_v = sink.slot(v).is_some();
                let mut phi_bar = g.to_vec();
                let mut v_bar = if want_v { vec![0.0; len] } else { Vec::new() };
                let mut k_bar: [Vec<f64>; 4] = [
                    g.iter().map(|x| h / 6.0 * x).collect(),
                    g.iter().map(|x| h / 3.0 * x).collect(),
                    g.iter().map(|x| h / 3.0 * x).collect(),
                    g.iter().map(|x| h / 6.0 * x).collect(),
                ];
                let offsets = [0.0, 0.5 * h, 0.5 * h, h];
                for s in (0..4).rev() {
                    let mut y_bar = vec![0.0; len];
                    let vb = want_v.then_some(v_bar.as_mut_slice());
                    transport_rhs_adjoint(&grid, &ys[s], vv, &k_bar[s], &mut y_bar, vb);
                    for i in 0..len {
                        phi_bar[i] += y_bar[i];
                    }
                    if s > 0 {
                        for i in 0..len {
                            k_bar[s - 1][i] += offsets[s] * y_bar[i];
                        }
                    }
                }
                sink.accumulate(phi, &phi_bar);
                if want_v {
                    sink.accumulate(v, &v_bar);
                }
            }),
        )
    }

    /// Samples the one-channel field `image` at the points of the map `phi`.
    pub fn warp(&mut self, image: Var, phi: Var) -> Result<Var> {
        let si = self.shape(image)?;
        let sp = self.shape(phi)?;
        let (gi, gp) = (si.grid()?, sp.grid()?);
        if si.channels != 1 || sp.channels != gp.ndim() || gi.ndim() != gp.ndim() {
            return Err(Error::shape("warp needs a scalar image and a map of matching dimension"));
        }
        let n = gp.len();
        let d = gp.ndim();
        let stencils = map_stencils(&gi, self.value(phi)?, n, d);
        let iv = self.value(image)?;
        let value: Vec<f64> = stencils.iter().map(|s| s.eval(iv)).collect();
        self.push(
            Primitive::Warp,
            value,
            Shape::field(gp, 1),
            &[image, phi],
            Box::new(move |vals, g, sink| {
                if let Some(s) = sink.slot(image) {
                    for (st, gv) in stencils.iter().zip(g) {
                        st.scatter(*gv, s);
                    }
                }
                let iv = vals.get(image);
                if let Some(s) = sink.slot(phi) {
                    let mut grad = [0.0; MAX_DIM];
                    for (i, st) in stencils.iter().enumerate() {
                        st.eval_grad(iv, &mut grad[..d]);
                        for k in 0..d {
                            s[k * n + i] += g[i] * grad[k];
                        }
                    }
                }
            }),
        )
    }

    /// Global zero-mean normalized cross-correlation of two fields; zero
    /// when either input has no variance.
    pub fn ncc(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a)?, self.shape(b)?);
        if sa != sb {
            return Err(Error::shape("NCC inputs differ in shape"));
        }
        let stats = NccStats::new(self.value(a)?, self.value(b)?);
        let value = stats.ncc();
        self.push(
            Primitive::Ncc,
            vec![value],
            Shape::scalar(),
            &[a, b],
            Box::new(move |vals, g, sink| {
                let st = NccStats::new(vals.get(a), vals.get(b));
                if st.degenerate() {
                    return;
                }
                let r = st.ncc();
                let norm = (st.aa * st.bb).sqrt();
                if let Some(s) = sink.slot(a) {
                    for i in 0..s.len() {
                        s[i] += g[0] * (st.cb[i] / norm - r * st.ca[i] / st.aa);
                    }
                }
                if let Some(s) = sink.slot(b) {
                    for i in 0..s.len() {
                        s[i] += g[0] * (st.ca[i] / norm - r * st.cb[i] / st.bb);
                    }
                }
            }),
        )
    }
}

fn map_stencils(image_grid: &Grid, phi: &[f64], n: usize, d: usize) -> Vec<Stencil> {
    let mut x = [0.0; MAX_DIM];
    (0..n)
        .map(|i| {
            for k in 0..d {
                x[k] = phi[k * n + i];
            }
            Stencil::new(image_grid, &x[..d])
        })
        .collect()
}

/// Relative variance below which an input counts as constant.
const VARIANCE_FLOOR: f64 = 1e-24;

struct NccStats {
    scale_a: f64,
    scale_b: f64,
    ca: Vec<f64>,
    cb: Vec<f64>,
    aa: f64,
    bb: f64,
    ab: f64,
}

impl NccStats {
    fn new(a: &[f64], b: &[f64]) -> NccStats {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let ca: Vec<f64> = a.iter().map(|x| x - ma).collect();
        let cb: Vec<f64> = b.iter().map(|x| x - mb).collect();
        let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
        NccStats {
            scale_a: dot(a, a),
            scale_b: dot(b, b),
            aa: dot(&ca, &ca),
            bb: dot(&cb, &cb),
            ab: dot(&ca, &cb),
            ca,
            cb,
        }
    }

    fn degenerate(&self) -> bool {
        !(self.aa > self.scale_a * VARIANCE_FLOOR && self.bb > self.scale_b * VARIANCE_FLOOR)
    }

    fn ncc(&self) -> f64 {
        if self.degenerate() {
            0.0
        } else {
            (self.ab / (self.aa * self.bb).sqrt()).clamp(-1.0, 1.0)
        }
    }
}

// ---- plain-field operations ----------------------------------------------

/// `I(phi(x))` per node of `phi`'s grid. A map on a coarser grid is
/// upsampled to the image grid first.
pub fn warp(image: &ScalarField, phi_inv: &VectorField) -> Result<ScalarField> {
    let phi = if phi_inv.grid == image.grid {
        phi_inv.clone()
    } else {
        crate::field::resample_vector(phi_inv, image.grid)?
    };
    let grid = phi.grid;
    let st = map_stencils(&image.grid, &phi.values, grid.len(), grid.ndim());
    ScalarField::new(grid, st.iter().map(|s| s.eval(&image.values)).collect())
}

/// `outer(inner(x))` on the grid of `inner`.
pub fn compose(outer: &VectorField, inner: &VectorField) -> Result<VectorField> {
    if outer.grid.ndim() != inner.grid.ndim() {
        return Err(Error::shape("composition across dimensionalities"));
    }
    let grid = inner.grid;
    let (n, d) = (grid.len(), grid.ndim());
    let st = map_stencils(&outer.grid, &inner.values, n, d);
    let mut values = vec![0.0; n * d];
    for c in 0..d {
        for (i, s) in st.iter().enumerate() {
            values[c * n + i] = s.eval(outer.component(c));
        }
    }
    VectorField::new(grid, values)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NccValue {
    /// `(1 - NCC) / sigma^2`.
    pub similarity: f64,
    pub ncc: f64,
    /// Set when an input has zero variance (NCC taken as 0).
    pub degenerate: bool,
}

pub fn ncc_similarity(a: &ScalarField, b: &ScalarField, sigma: f64) -> Result<NccValue> {
    a.grid.check_same(&b.grid)?;
    if !(sigma > 0.0) {
        return Err(Error::param("NCC sigma must be positive"));
    }
    let st = NccStats::new(&a.values, &b.values);
    let ncc = st.ncc();
    Ok(NccValue {
        similarity: (1.0 - ncc) / (sigma * sigma),
        ncc,
        degenerate: st.degenerate(),
    })
}

const LOCAL_NCC_EPS: f64 = 1e-6;

/// Similarity term on the tape for either NCC reading.
pub fn similarity_tape(tape: &mut Tape, a: Var, b: Var, params: &EnergyParams) -> Result<Var> {
    let inv = 1.0 / (params.sim_sigma * params.sim_sigma);
    let ncc = match params.similarity {
        Similarity::Global => tape.ncc(a, b)?,
        Similarity::Local { window } => {
            let n = tape.shape(a)?.len() as f64;
            let ma = tape.smooth(a, window)?;
            let mb = tape.smooth(b, window)?;
            let aa = tape.mul(a, a)?;
            let bb = tape.mul(b, b)?;
            let ab = tape.mul(a, b)?;
            let saa = tape.smooth(aa, window)?;
            let sbb = tape.smooth(bb, window)?;
            let sab = tape.smooth(ab, window)?;
            let ma2 = tape.mul(ma, ma)?;
            let mb2 = tape.mul(mb, mb)?;
            let mab = tape.mul(ma, mb)?;
            let va = tape.sub(saa, ma2)?;
            let vb = tape.sub(sbb, mb2)?;
            let cov = tape.sub(sab, mab)?;
            let prod = tape.mul(va, vb)?;
            let prod = tape.affine(prod, 1.0, LOCAL_NCC_EPS)?;
            let denom = tape.sqrt(prod)?;
            let local = tape.div(cov, denom)?;
            let total = tape.sum(local)?;
            tape.scale(total, 1.0 / n)?
        }
    };
    tape.affine(ncc, -inv, inv)
}

#[derive(Clone, Debug)]
pub struct JacobianStats {
    pub mean: f64,
    pub std: f64,
    pub p1: f64,
    pub p5: f64,
    pub p50: f64,
    pub p95: f64,
    pub p99: f64,
    pub min: f64,
}

/// Linear-interpolation percentile of sorted data, `q` in `[0,100]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn median(values: &[f64]) -> f64 {
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    percentile(&s, 50.0)
}

pub fn jacobian_determinant_stats(phi_inv: &VectorField, mask: Option<&[bool]>) -> Result<JacobianStats> {
    let dets = jacobian(phi_inv).determinants();
    let mut vals: Vec<f64> = match mask {
        Some(m) => {
            if m.len() != dets.len() {
                return Err(Error::shape("mask length differs from the map"));
            }
            dets.iter().zip(m).filter(|(_, &k)| k).map(|(d, _)| *d).collect()
        }
        None => dets,
    };
    if vals.is_empty() {
        return Err(Error::param("empty mask"));
    }
    vals.sort_by(f64::total_cmp);
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    Ok(JacobianStats {
        mean,
        std: var.sqrt(),
        p1: percentile(&vals, 1.0),
        p5: percentile(&vals, 5.0),
        p50: percentile(&vals, 50.0),
        p95: percentile(&vals, 95.0),
        p99: percentile(&vals, 99.0),
        min: vals[0],
    })
}

// ---- registration energy -------------------------------------------------

/// One source/target pair and its momentum on the computation grid.
#[derive(Clone, Debug)]
pub struct RegistrationTask {
    pub id: usize,
    pub source: ScalarField,
    pub target: ScalarField,
    pub comp_grid: Grid,
    pub momentum: VectorField,
    source_comp: ScalarField,
}

impl RegistrationTask {
    /// Task with zero momentum on a grid scaled by `factor` (0.5 for the
    /// half-resolution scheme, 1 for full resolution).
    pub fn new(id: usize, source: ScalarField, target: ScalarField, factor: f64) -> Result<RegistrationTask> {
        source.grid.check_same(&target.grid)?;
        let comp_grid = source.grid.scaled(factor)?;
        let source_comp = resample(&source, comp_grid)?;
        Ok(RegistrationTask {
            id,
            source,
            target,
            comp_grid,
            momentum: VectorField::zeros(comp_grid),
            source_comp,
        })
    }

    pub fn source_on_comp_grid(&self) -> &ScalarField {
        &self.source_comp
    }

    pub fn set_momentum(&mut self, m: VectorField) -> Result<()> {
        self.comp_grid.check_same(&m.grid)?;
        if m.values.iter().any(|x| !x.is_finite()) {
            return Err(Error::param("non-finite momentum"));
        }
        self.momentum = m;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EnergyBreakdown {
    pub total: f64,
    pub reg: f64,
    pub sim: f64,
    pub omt: f64,
    pub tv: f64,
    pub input_range: f64,
    pub weight_decay: f64,
}

impl EnergyBreakdown {
    pub fn parts_sum(&self) -> f64 {
        self.reg + self.sim + self.omt + self.tv + self.input_range + self.weight_decay
    }
}

/// Tape handles for the energy terms and intermediate fields.
#[derive(Clone, Copy, Debug)]
pub struct EnergyVars {
    pub total: Var,
    pub reg: Var,
    pub sim: Var,
    pub omt: Option<Var>,
    pub tv: Option<Var>,
    pub input_range: Option<Var>,
    pub weight_decay: Option<Var>,
    /// Inverse map on the computation grid.
    pub phi: Var,
    pub warped: Var,
    pub preweights: Option<Var>,
    pub weights: Option<Var>,
}

impl EnergyVars {
    pub fn breakdown(&self, tape: &Tape) -> Result<EnergyBreakdown> {
        let get = |v: Option<Var>| v.map_or(Ok(0.0), |v| tape.scalar(v));
        Ok(EnergyBreakdown {
            total: tape.scalar(self.total)?,
            reg: tape.scalar(self.reg)?,
            sim: tape.scalar(self.sim)?,
            omt: get(self.omt)?,
            tv: get(self.tv)?,
            input_range: get(self.input_range)?,
            weight_decay: get(self.weight_decay)?,
        })
    }
}

/// The regressor as recorded on a tape.
pub struct TapeModel<'a> {
    pub params: &'a RegressorParams,
    pub vars: &'a [Var],
}

/// Records the registration energy for momentum `m` (computation grid).
pub fn record_energy(
    tape: &mut Tape,
    task: &RegistrationTask,
    m: Var,
    model: Option<TapeModel<'_>>,
    spec: &MultiGaussianSpec,
    params: &EnergyParams,
    stage: Stage,
) -> Result<EnergyVars> {
    params.validate()?;
    let grid = task.comp_grid;
    if tape.shape(m)? != Shape::field(grid, grid.ndim()) {
        return Err(Error::shape("momentum must live on the computation grid"));
    }
    let (v, local) = match stage {
        Stage::Global => (tape_multi_gaussian_smooth(tape, m, spec)?, None),
        Stage::Local => {
            let model = model.ok_or_else(|| Error::param("the local stage needs regressor parameters"))?;
            let img = tape.constant(task.source_comp.values.clone(), Shape::field(grid, 1))?;
            let mom = if model.params.config.in_channels > 1 { Some(m) } else { None };
            let out = forward_tape(tape, &model.params.config, img, mom, model.vars, spec)?;
            let (pre, w) = tape_local_weights(tape, out.preweights, spec)?;
            let v = tape_localized_smooth(tape, m, w, spec)?;
            (v, Some((pre, w, out.input_penalty, model.vars)))
        }
    };
    let mv = tape.dot(m, v)?;
    let reg = tape.scale(mv, params.lambda * grid.cell_volume())?;

    let mut phi = tape.constant(VectorField::identity(grid).values, Shape::field(grid, grid.ndim()))?;
    let h = 1.0 / params.rk4_steps as f64;
    for step in 0..params.rk4_steps {
        phi = tape.rk4_step(phi, v, h, step)?;
    }
    let full = task.source.grid;
    let phi_full = if full == grid { phi } else { tape.resample(phi, full)? };
    let src = tape.constant(task.source.values.clone(), Shape::field(full, 1))?;
    let tgt = tape.constant(task.target.values.clone(), Shape::field(full, 1))?;
    let warped = tape.warp(src, phi_full)?;
    let sim = similarity_tape(tape, warped, tgt, params)?;
    let mut total = tape.add(reg, sim)?;

    let mut vars = EnergyVars {
        total,
        reg,
        sim,
        omt: None,
        tv: None,
        input_range: None,
        weight_decay: None,
        phi,
        warped,
        preweights: None,
        weights: None,
    };
    if let Some((pre, w, rp, theta)) = local {
        let omt = omt_integral(tape, w, spec)?;
        let omt = tape.scale(omt, params.lambda_omt)?;
        let gamma = edge_indicator(&task.source_comp, params.edge_alpha)?;
        let tv = tv_penalty_tape(tape, pre, &gamma, params.eps_tv)?;
        let tv = tape.scale(tv, params.lambda_tv)?;
        let wd = weight_decay_tape(tape, theta)?;
        for term in [omt, tv, rp, wd] {
            total = tape.add(total, term)?;
        }
        vars.total = total;
        vars.omt = Some(omt);
        vars.tv = Some(tv);
        vars.input_range = Some(rp);
        vars.weight_decay = Some(wd);
        vars.preweights = Some(pre);
        vars.weights = Some(w);
    }
    Ok(vars)
}

/// Energy of the task's current momentum.
pub fn total_energy(
    task: &RegistrationTask,
    theta: Option<&RegressorParams>,
    spec: &MultiGaussianSpec,
    params: &EnergyParams,
    stage: Stage,
) -> Result<EnergyBreakdown> {
    let mut tape = Tape::new();
    let m = tape.constant(task.momentum.values.clone(), Shape::field(task.comp_grid, task.comp_grid.ndim()))?;
    let vars_theta = match theta {
        Some(t) => t.record(&mut tape, false)?,
        None => Vec::new(),
    };
    let model = theta.map(|p| TapeModel {
        params: p,
        vars: &vars_theta,
    });
    let e = record_energy(&mut tape, task, m, model, spec, params, stage)?;
    e.breakdown(&tape)
}

#[derive(Clone, Debug)]
pub struct EnergyGradient {
    pub energy: EnergyBreakdown,
    pub momentum: Vec<f64>,
    /// Present when the regressor parameters were trainable.
    pub theta: Option<Vec<f64>>,
}

/// Energy and gradients with respect to the momentum and, if
/// `train_theta`, the flattened regressor parameters.
pub fn energy_gradient(
    task: &RegistrationTask,
    theta: Option<&RegressorParams>,
    spec: &MultiGaussianSpec,
    params: &EnergyParams,
    stage: Stage,
    train_theta: bool,
) -> Result<EnergyGradient> {
    energy_gradient_at(task, &task.momentum.values, theta, spec, params, stage, train_theta)
}

/// [`energy_gradient`] at an explicit momentum instead of the task's own.
pub fn energy_gradient_at(
    task: &RegistrationTask,
    momentum: &[f64],
    theta: Option<&RegressorParams>,
    spec: &MultiGaussianSpec,
    params: &EnergyParams,
    stage: Stage,
    train_theta: bool,
) -> Result<EnergyGradient> {
    let grid = task.comp_grid;
    let mut tape = Tape::new();
    let m = tape.leaf(momentum.to_vec(), Shape::field(grid, grid.ndim()))?;
    let vars_theta = match (theta, stage) {
        (Some(t), Stage::Local) => t.record(&mut tape, train_theta)?,
        _ => Vec::new(),
    };
    let model = theta.map(|p| TapeModel {
        params: p,
        vars: &vars_theta,
    });
    let e = record_energy(&mut tape, task, m, model, spec, params, stage)?;
    let energy = e.breakdown(&tape)?;
    let grads = tape.backward(e.total)?;
    let theta_grad = match theta {
        Some(t) if train_theta && !vars_theta.is_empty() => {
            let mut flat = Vec::with_capacity(t.num_params());
            for (v, tensor) in vars_theta.iter().zip(&t.tensors) {
                flat.extend(grads.get(*v, tensor.len())?);
            }
            Some(flat)
        }
        _ => None,
    };
    Ok(EnergyGradient {
        energy,
        momentum: grads.get(m, grid.len() * grid.ndim())?,
        theta: theta_grad,
    })
}

/// Fields produced by a registration with the current momentum.
#[derive(Clone, Debug)]
pub struct RegistrationOutput {
    pub energy: EnergyBreakdown,
    /// Inverse map on the computation grid.
    pub phi_inv_comp: VectorField,
    /// Inverse map upsampled to the image grid.
    pub phi_inv: VectorField,
    pub warped: ScalarField,
    pub preweights: Option<Vec<ScalarField>>,
    pub weights: Option<Vec<ScalarField>>,
}

pub fn register_output(
    task: &RegistrationTask,
    theta: Option<&RegressorParams>,
    spec: &MultiGaussianSpec,
    params: &EnergyParams,
    stage: Stage,
) -> Result<RegistrationOutput> {
    let grid = task.comp_grid;
    let mut tape = Tape::new();
    let m = tape.constant(task.momentum.values.clone(), Shape::field(grid, grid.ndim()))?;
    let vars_theta = match theta {
        Some(t) => t.record(&mut tape, false)?,
        None => Vec::new(),
    };
    let model = theta.map(|p| TapeModel {
        params: p,
        vars: &vars_theta,
    });
    let e = record_energy(&mut tape, task, m, model, spec, params, stage)?;
    let phi_inv_comp = VectorField::new(grid, tape.value(e.phi)?.to_vec())?;
    let phi_inv = crate::field::resample_vector(&phi_inv_comp, task.source.grid)?;
    let fields = |v: Option<Var>| -> Result<Option<Vec<ScalarField>>> {
        v.map(|v| Ok(split_channels(grid, tape.value(v)?.to_vec()))).transpose()
    };
    Ok(RegistrationOutput {
        energy: e.breakdown(&tape)?,
        warped: ScalarField::new(task.source.grid, tape.value(e.warped)?.to_vec())?,
        preweights: fields(e.preweights)?,
        weights: fields(e.weights)?,
        phi_inv_comp,
        phi_inv,
    })
}
