//! Regular-grid scalar and vector fields over the unit cube.
//!
//! Every grid spans `[0,1]^d` with `dims[k]` nodes along axis `k`, so the
//! spacing is `1/(dims[k]-1)` and node `i` sits at coordinate `i/(dims[k]-1)`.
//! Data is stored row-major (last axis fastest). Vector fields are stored
//! component-major: component `c` occupies `values[c*len..(c+1)*len]`.

mod fft;
pub mod io;

pub use fft::{gaussian_kernel_1d, gaussian_smooth_slice};

use crate::error::{Error, Result};

/// Maximum supported dimensionality.
pub const MAX_DIM: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Grid {
    dims: [usize; MAX_DIM],
    ndim: usize,
}

impl Grid {
    pub fn new(dims: &[usize]) -> Result<Grid> {
        if dims.len() < 2 || dims.len() > MAX_DIM {
            return Err(Error::param(format!(
                "grid must be 2D or 3D, got {} axes",
                dims.len()
            )));
        }
        if let Some(n) = dims.iter().find(|&&n| n < 4) {
            return Err(Error::param(format!("grid axis with {n} nodes (need >= 4)")));
        }
        let mut d = [1; MAX_DIM];
        d[..dims.len()].copy_from_slice(dims);
        Ok(Grid {
            dims: d,
            ndim: dims.len(),
        })
    }

    pub fn square(n: usize) -> Result<Grid> {
        Grid::new(&[n, n])
    }

    pub fn ndim(&self) -> usize {
        self.ndim
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims[..self.ndim]
    }

    pub fn len(&self) -> usize {
        self.dims().iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        1.0 / (self.dims[axis] - 1) as f64
    }

    pub fn cell_volume(&self) -> f64 {
        (0..self.ndim).map(|k| self.spacing(k)).product()
    }

    /// Distance in memory between neighbours along `axis`.
    pub fn stride(&self, axis: usize) -> usize {
        self.dims[axis + 1..self.ndim].iter().product()
    }

    pub fn coord(&self, axis: usize, i: usize) -> f64 {
        i as f64 / (self.dims[axis] - 1) as f64
    }

    /// Multi-index of a flat node index.
    pub fn unravel(&self, mut idx: usize) -> [usize; MAX_DIM] {
        let mut out = [0; MAX_DIM];
        for k in (0..self.ndim).rev() {
            out[k] = idx % self.dims[k];
            idx /= self.dims[k];
        }
        out
    }

    pub fn ravel(&self, ix: &[usize]) -> usize {
        let mut idx = 0;
        for k in 0..self.ndim {
            idx = idx * self.dims[k] + ix[k];
        }
        idx
    }

    /// Grid with every axis scaled by `factor` (rounded, at least 4 nodes).
    pub fn scaled(&self, factor: f64) -> Result<Grid> {
        if !(factor > 0.0) {
            return Err(Error::param(format!("grid scale factor {factor}")));
        }
        let dims: Vec<usize> = self
            .dims()
            .iter()
            .map(|&n| ((n as f64 * factor).round() as usize).max(4))
            .collect();
        Grid::new(&dims)
    }

    pub(crate) fn check_same(&self, other: &Grid) -> Result<()> {
        if self != other {
            return Err(Error::shape(format!(
                "grid {:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField {
    pub grid: Grid,
    pub values: Vec<f64>,
}

impl ScalarField {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<ScalarField> {
        if values.len() != grid.len() {
            return Err(Error::shape(format!(
                "{} values for a grid of {} nodes",
                values.len(),
                grid.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::param(format!("non-finite field value {v}")));
        }
        Ok(ScalarField { grid, values })
    }

    pub fn constant(grid: Grid, c: f64) -> ScalarField {
        ScalarField {
            grid,
            values: vec![c; grid.len()],
        }
    }

    pub fn from_fn(grid: Grid, f: impl Fn(&[f64]) -> f64) -> ScalarField {
        let mut x = [0.0; MAX_DIM];
        let values = (0..grid.len())
            .map(|i| {
                let ix = grid.unravel(i);
                for k in 0..grid.ndim() {
                    x[k] = grid.coord(k, ix[k]);
                }
                f(&x[..grid.ndim()])
            })
            .collect();
        ScalarField { grid, values }
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn max_abs_diff(&self, other: &ScalarField) -> f64 {
        max_abs_diff(&self.values, &other.values)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VectorField {
    pub grid: Grid,
    pub values: Vec<f64>,
}

impl VectorField {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<VectorField> {
        if values.len() != grid.len() * grid.ndim() {
            return Err(Error::shape(format!(
                "{} values for a {}-component field of {} nodes",
                values.len(),
                grid.ndim(),
                grid.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::param(format!("non-finite field value {v}")));
        }
        Ok(VectorField { grid, values })
    }

    pub fn zeros(grid: Grid) -> VectorField {
        VectorField {
            grid,
            values: vec![0.0; grid.len() * grid.ndim()],
        }
    }

    /// The identity map `x -> x`.
    pub fn identity(grid: Grid) -> VectorField {
        let n = grid.len();
        let mut values = vec![0.0; n * grid.ndim()];
        for i in 0..n {
            let ix = grid.unravel(i);
            for k in 0..grid.ndim() {
                values[k * n + i] = grid.coord(k, ix[k]);
            }
        }
        VectorField { grid, values }
    }

    pub fn from_fn(grid: Grid, f: impl Fn(&[f64], &mut [f64])) -> VectorField {
        let n = grid.len();
        let d = grid.ndim();
        let mut values = vec![0.0; n * d];
        let mut x = [0.0; MAX_DIM];
        let mut out = [0.0; MAX_DIM];
        for i in 0..n {
            let ix = grid.unravel(i);
            for k in 0..d {
                x[k] = grid.coord(k, ix[k]);
            }
            f(&x[..d], &mut out[..d]);
            for k in 0..d {
                values[k * n + i] = out[k];
            }
        }
        VectorField { grid, values }
    }

    pub fn component(&self, c: usize) -> &[f64] {
        let n = self.grid.len();
        &self.values[c * n..(c + 1) * n]
    }

    pub fn component_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.grid.len();
        &mut self.values[c * n..(c + 1) * n]
    }

    pub fn max_abs_diff(&self, other: &VectorField) -> f64 {
        max_abs_diff(&self.values, &other.values)
    }
}

pub(crate) fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Derivative along `axis`: central differences inside, one-sided at the two
/// ends of every line. Writes into `out` (overwrites).
pub fn diff_axis(grid: &Grid, axis: usize, f: &[f64], out: &mut [f64]) {
    let n = grid.dims()[axis];
    let stride = grid.stride(axis);
    let inv_h = 1.0 / grid.spacing(axis);
    let half = 0.5 * inv_h;
    for_each_line(grid, axis, |base| {
        let at = |j: usize| base + j * stride;
        out[at(0)] = (f[at(1)] - f[at(0)]) * inv_h;
        for j in 1..n - 1 {
            out[at(j)] = (f[at(j + 1)] - f[at(j - 1)]) * half;
        }
        out[at(n - 1)] = (f[at(n - 1)] - f[at(n - 2)]) * inv_h;
    });
}

/// Transpose of [`diff_axis`]: accumulates `D^T g` into `out`.
pub fn diff_axis_transpose(grid: &Grid, axis: usize, g: &[f64], out: &mut [f64]) {
    let n = grid.dims()[axis];
    let stride = grid.stride(axis);
    let inv_h = 1.0 / grid.spacing(axis);
    let half = 0.5 * inv_h;
    for_each_line(grid, axis, |base| {
        let at = |j: usize| base + j * stride;
        let g0 = g[at(0)] * inv_h;
        out[at(1)] += g0;
        out[at(0)] -= g0;
        for j in 1..n - 1 {
            let gj = g[at(j)] * half;
            out[at(j + 1)] += gj;
            out[at(j - 1)] -= gj;
        }
        let gn = g[at(n - 1)] * inv_h;
        out[at(n - 1)] += gn;
        out[at(n - 2)] -= gn;
    });
}

/// Calls `f(base)` with the flat index of the first node of every line
/// running along `axis`.
pub(crate) fn for_each_line(grid: &Grid, axis: usize, mut f: impl FnMut(usize)) {
    let stride = grid.stride(axis);
    let n = grid.dims()[axis];
    let outer = grid.len() / (n * stride);
    for o in 0..outer {
        for s in 0..stride {
            f(o * n * stride + s);
        }
    }
}

pub fn gradient(f: &ScalarField) -> VectorField {
    let grid = f.grid;
    let n = grid.len();
    let mut values = vec![0.0; n * grid.ndim()];
    for k in 0..grid.ndim() {
        diff_axis(&grid, k, &f.values, &mut values[k * n..(k + 1) * n]);
    }
    VectorField { grid, values }
}

/// Per-node Jacobian `J[c][k] = d phi_c / d x_k`, stored entry-major:
/// entry `(c, k)` occupies `entries[(c*d + k)*len ..]`.
#[derive(Clone, Debug)]
pub struct JacobianField {
    pub grid: Grid,
    pub entries: Vec<f64>,
}

impl JacobianField {
    pub fn entry(&self, c: usize, k: usize) -> &[f64] {
        let n = self.grid.len();
        let d = self.grid.ndim();
        let off = (c * d + k) * n;
        &self.entries[off..off + n]
    }

    pub fn at(&self, node: usize) -> [[f64; MAX_DIM]; MAX_DIM] {
        let d = self.grid.ndim();
        let mut m = [[0.0; MAX_DIM]; MAX_DIM];
        for c in 0..d {
            for k in 0..d {
                m[c][k] = self.entry(c, k)[node];
            }
        }
        m
    }

    pub fn determinants(&self) -> Vec<f64> {
        let d = self.grid.ndim();
        (0..self.grid.len())
            .map(|i| determinant(&self.at(i), d))
            .collect()
    }
}

pub fn determinant(m: &[[f64; MAX_DIM]; MAX_DIM], d: usize) -> f64 {
    match d {
        2 => m[0][0] * m[1][1] - m[0][1] * m[1][0],
        _ => {
            m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
                - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
        }
    }
}

pub fn jacobian(phi: &VectorField) -> JacobianField {
    let grid = phi.grid;
    let n = grid.len();
    let d = grid.ndim();
    let mut entries = vec![0.0; n * d * d];
    for c in 0..d {
        for k in 0..d {
            let off = (c * d + k) * n;
            diff_axis(&grid, k, phi.component(c), &mut entries[off..off + n]);
        }
    }
    JacobianField { grid, entries }
}

/// Interpolation stencil of one query point: `2^d` corner indices and
/// weights, plus per-axis data needed for the derivative with respect to
/// the query coordinates.
#[derive(Clone, Copy, Debug)]
pub struct Stencil {
    pub ndim: usize,
    pub corners: [usize; 1 << MAX_DIM],
    pub weights: [f64; 1 << MAX_DIM],
    frac: [f64; MAX_DIM],
    /// d(cell coordinate)/d(x); zero where the coordinate was clamped.
    slope: [f64; MAX_DIM],
}

impl Stencil {
    pub fn new(grid: &Grid, point: &[f64]) -> Stencil {
        let d = grid.ndim();
        let mut lo = [0usize; MAX_DIM];
        let mut frac = [0.0; MAX_DIM];
        let mut slope = [0.0; MAX_DIM];
        for k in 0..d {
            let n = grid.dims()[k];
            let scale = (n - 1) as f64;
            let x = point[k];
            // kink convention: inside-branch derivative on the boundary itself
            let (xc, s) = if x < 0.0 {
                (0.0, 0.0)
            } else if x > 1.0 {
                (1.0, 0.0)
            } else {
                (x, scale)
            };
            let mut t = xc * scale;
            let r = t.round();
            if (t - r).abs() < 1e-12 * scale.max(1.0) {
                t = r;
            }
            let i = (t.floor() as usize).min(n - 2);
            lo[k] = i;
            frac[k] = t - i as f64;
            slope[k] = s;
        }
        let mut corners = [0usize; 1 << MAX_DIM];
        let mut weights = [0.0; 1 << MAX_DIM];
        for corner in 0..(1 << d) {
            let mut idx = 0;
            let mut w = 1.0;
            for k in 0..d {
                let bit = (corner >> (d - 1 - k)) & 1;
                idx = idx * grid.dims()[k] + lo[k] + bit;
                w *= if bit == 1 { frac[k] } else { 1.0 - frac[k] };
            }
            corners[corner] = idx;
            weights[corner] = w;
        }
        Stencil {
            ndim: d,
            corners,
            weights,
            frac,
            slope,
        }
    }

    pub fn eval(&self, data: &[f64]) -> f64 {
        (0..1 << self.ndim)
            .map(|c| self.weights[c] * data[self.corners[c]])
            .sum()
    }

    /// Partial derivatives of the interpolant with respect to the query
    /// coordinates (the multilinear patch slope; zero along clamped axes).
    pub fn eval_grad(&self, data: &[f64], out: &mut [f64]) {
        let d = self.ndim;
        for k in 0..d {
            if self.slope[k] == 0.0 {
                out[k] = 0.0;
                continue;
            }
            let mut acc = 0.0;
            for corner in 0..(1 << d) {
                let mut w = 1.0;
                for j in 0..d {
                    let bit = (corner >> (d - 1 - j)) & 1;
                    w *= if j == k {
                        if bit == 1 {
                            1.0
                        } else {
                            -1.0
                        }
                    } else if bit == 1 {
                        self.frac[j]
                    } else {
                        1.0 - self.frac[j]
                    };
                }
                acc += w * data[self.corners[corner]];
            }
            out[k] = acc * self.slope[k];
        }
    }

    /// Adds `g * weight` into every corner (transpose of [`Stencil::eval`]).
    pub fn scatter(&self, g: f64, out: &mut [f64]) {
        for c in 0..1 << self.ndim {
            out[self.corners[c]] += g * self.weights[c];
        }
    }
}

/// Multilinear interpolation of a scalar field at arbitrary points; points
/// outside the unit cube are clamped to its boundary.
pub fn interpolate(f: &ScalarField, points: &[Vec<f64>]) -> Vec<f64> {
    points
        .iter()
        .map(|p| Stencil::new(&f.grid, p).eval(&f.values))
        .collect()
}

/// Vector-field variant of [`interpolate`]; returns one `d`-vector per point.
pub fn interpolate_vector(f: &VectorField, points: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = f.grid.ndim();
    points
        .iter()
        .map(|p| {
            let st = Stencil::new(&f.grid, p);
            (0..d).map(|c| st.eval(f.component(c))).collect()
        })
        .collect()
}

/// Stencils that sample a field on `source` at every node of `target`.
pub(crate) fn resample_stencils(source: &Grid, target: &Grid) -> Vec<Stencil> {
    let d = target.ndim();
    let mut x = [0.0; MAX_DIM];
    (0..target.len())
        .map(|i| {
            let ix = target.unravel(i);
            for k in 0..d {
                x[k] = target.coord(k, ix[k]);
            }
            Stencil::new(source, &x[..d])
        })
        .collect()
}

/// Resamples `channels` stacked fields from `source` onto `target`.
pub fn resample_slice(source: &Grid, target: &Grid, data: &[f64], channels: usize) -> Vec<f64> {
    if source == target {
        return data.to_vec();
    }
    let stencils = resample_stencils(source, target);
    let (ns, nt) = (source.len(), target.len());
    let mut out = vec![0.0; nt * channels];
    for c in 0..channels {
        let src = &data[c * ns..(c + 1) * ns];
        for (o, st) in out[c * nt..(c + 1) * nt].iter_mut().zip(&stencils) {
            *o = st.eval(src);
        }
    }
    out
}

pub fn resample(f: &ScalarField, target: Grid) -> Result<ScalarField> {
    if f.grid.ndim() != target.ndim() {
        return Err(Error::shape("resample across dimensionalities"));
    }
    Ok(ScalarField {
        grid: target,
        values: resample_slice(&f.grid, &target, &f.values, 1),
    })
}

pub fn resample_vector(f: &VectorField, target: Grid) -> Result<VectorField> {
    if f.grid.ndim() != target.ndim() {
        return Err(Error::shape("resample across dimensionalities"));
    }
    Ok(VectorField {
        grid: target,
        values: resample_slice(&f.grid, &target, &f.values, f.grid.ndim()),
    })
}

/// Periodic Gaussian smoothing of a scalar field; `sigma` in unit-domain
/// coordinates.
pub fn gaussian_smooth(f: &ScalarField, sigma: f64) -> Result<ScalarField> {
    let mut values = f.values.clone();
    gaussian_smooth_slice(&f.grid, &mut values, 1, sigma)?;
    Ok(ScalarField {
        grid: f.grid,
        values,
    })
}

pub fn gaussian_smooth_vector(f: &VectorField, sigma: f64) -> Result<VectorField> {
    let mut values = f.values.clone();
    gaussian_smooth_slice(&f.grid, &mut values, f.grid.ndim(), sigma)?;
    Ok(VectorField {
        grid: f.grid,
        values,
    })
}
