//! Elementwise maps, reductions, smoothing and resampling on the tape.

use super::{Primitive, Shape, Tape, Var};
use crate::error::{Error, Result};
use crate::field::{gaussian_smooth_slice, resample_stencils, Grid};

impl Tape {
    fn same_shape(&self, a: Var, b: Var) -> Result<Shape> {
        let (sa, sb) = (self.shape(a)?, self.shape(b)?);
        if sa != sb {
            return Err(Error::shape(format!("{sa:?} vs {sb:?}")));
        }
        Ok(sa)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape(a, b)?;
        let value = zip_map(self.value(a)?, self.value(b)?, |x, y| x + y);
        self.push(
            Primitive::Add,
            value,
            shape,
            &[a, b],
            Box::new(move |_, g, sink| {
                sink.accumulate(a, g);
                sink.accumulate(b, g);
            }),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape(a, b)?;
        let value = zip_map(self.value(a)?, self.value(b)?, |x, y| x - y);
        self.push(
            Primitive::Sub,
            value,
            shape,
            &[a, b],
            Box::new(move |_, g, sink| {
                sink.accumulate(a, g);
                if let Some(s) = sink.slot(b) {
                    s.iter_mut().zip(g).for_each(|(o, g)| *o -= g);
                }
            }),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let shape = self.shape(a)?;
        let value = self.value(a)?.iter().map(|x| c * x).collect();
        self.push(
            Primitive::Scale,
            value,
            shape,
            &[a],
            Box::new(move |_, g, sink| {
                if let Some(s) = sink.slot(a) {
                    s.iter_mut().zip(g).for_each(|(o, g)| *o += c * g);
                }
            }),
        )
    }

    /// `c * a + offset`.
    pub fn affine(&mut self, a: Var, c: f64, offset: f64) -> Result<Var> {
        let shape = self.shape(a)?;
        let value = self.value(a)?.iter().map(|x| c * x + offset).collect();
        self.push(
            Primitive::Affine,
            value,
            shape,
            &[a],
            Box::new(move |_, g, sink| {
                if let Some(s) = sink.slot(a) {
                    s.iter_mut().zip(g).for_each(|(o, g)| *o += c * g);
                }
            }),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape(a, b)?;
        let value = zip_map(self.value(a)?, self.value(b)?, |x, y| x * y);
        self.push(
            Primitive::Mul,
            value,
            shape,
            &[a, b],
            Box::new(move |vals, g, sink| {
                let (va, vb) = (vals.get(a), vals.get(b));
                if let Some(s) = sink.slot(a) {
                    for i in 0..s.len() {
                        s[i] += g[i] * vb[i];
                    }
                }
                if let Some(s) = sink.slot(b) {
                    for i in 0..s.len() {
                        s[i] += g[i] * va[i];
                    }
                }
            }),
        )
    }

    /// Multiplies every channel of field `a` by the single-channel field `b`.
    pub fn mul_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a)?, self.shape(b)?);
        let grid = sa.grid()?;
        if sb.grid != Some(grid) || sb.channels != 1 {
            return Err(Error::shape("mul_broadcast needs a one-channel field on the same grid"));
        }
        let n = grid.len();
        let vb = self.value(b)?;
        let value: Vec<f64> = self
            .value(a)?
            .iter()
            .enumerate()
            .map(|(i, x)| x * vb[i % n])
            .collect();
        self.push(
            Primitive::MulBroadcast,
            value,
            sa,
            &[a, b],
            Box::new(move |vals, g, sink| {
                let (va, vb) = (vals.get(a), vals.get(b));
                if let Some(s) = sink.slot(a) {
                    for i in 0..s.len() {
                        s[i] += g[i] * vb[i % n];
                    }
                }
                if let Some(s) = sink.slot(b) {
                    for i in 0..g.len() {
                        s[i % n] += g[i] * va[i];
                    }
                }
            }),
        )
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape(a, b)?;
        let value = zip_map(self.value(a)?, self.value(b)?, |x, y| x / y);
        self.push(
            Primitive::Div,
            value,
            shape,
            &[a, b],
            Box::new(move |vals, g, sink| {
                let (va, vb) = (vals.get(a), vals.get(b));
                if let Some(s) = sink.slot(a) {
                    for i in 0..s.len() {
                        s[i] += g[i] / vb[i];
                    }
                }
                if let Some(s) = sink.slot(b) {
                    for i in 0..s.len() {
                        s[i] -= g[i] * va[i] / (vb[i] * vb[i]);
                    }
                }
            }),
        )
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a)?;
        let va = self.value(a)?;
        if let Some(x) = va.iter().find(|&&x| x < 0.0) {
            return Err(Error::param(format!("sqrt of negative value {x}")));
        }
        let value: Vec<f64> = va.iter().map(|x| x.sqrt()).collect();
        let out = value.clone();
        self.push(
            Primitive::Sqrt,
            value,
            shape,
            &[a],
            Box::new(move |_, g, sink| {
                if let Some(s) = sink.slot(a) {
                    for i in 0..s.len() {
                        s[i] += 0.5 * g[i] / out[i];
                    }
                }
            }),
        )
    }

    /// Leaky ReLU; the kink takes the negative-side slope.
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        let shape = self.shape(a)?;
        let value = self
            .value(a)?
            .iter()
            .map(|&x| if x > 0.0 { x } else { slope * x })
            .collect();
        self.push(
            Primitive::LeakyRelu,
            value,
            shape,
            &[a],
            Box::new(move |vals, g, sink| {
                let va = vals.get(a);
                if let Some(s) = sink.slot(a) {
                    for i in 0..s.len() {
                        s[i] += if va[i] > 0.0 { g[i] } else { slope * g[i] };
                    }
                }
            }),
        )
    }

    pub fn select_channel(&mut self, a: Var, c: usize) -> Result<Var> {
        let sa = self.shape(a)?;
        let grid = sa.grid()?;
        if c >= sa.channels {
            return Err(Error::shape(format!("channel {c} of {}", sa.channels)));
        }
        let n = grid.len();
        let value = self.value(a)?[c * n..(c + 1) * n].to_vec();
        self.push(
            Primitive::SelectChannel,
            value,
            Shape::field(grid, 1),
            &[a],
            Box::new(move |_, g, sink| {
                if let Some(s) = sink.slot(a) {
                    s[c * n..(c + 1) * n]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(o, g)| *o += g);
                }
            }),
        )
    }

    /// Stacks the channels of fields on a common grid.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::shape("concat of nothing"))?;
        let grid = self.shape(first)?.grid()?;
        let mut value = Vec::new();
        let mut ranges = Vec::with_capacity(parts.len());
        for &p in parts {
            let sp = self.shape(p)?;
            if sp.grid != Some(grid) {
                return Err(Error::shape("concat of fields on different grids"));
            }
            ranges.push((p, value.len()..value.len() + sp.len()));
            value.extend_from_slice(self.value(p)?);
        }
        let channels = value.len() / grid.len();
        self.push(
            Primitive::Concat,
            value,
            Shape::field(grid, channels),
            parts,
            Box::new(move |_, g, sink| {
                for (p, r) in &ranges {
                    sink.accumulate(*p, &g[r.clone()]);
                }
            }),
        )
    }

    /// Plain sum of products (no cell volume).
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a)?.len() != self.value(b)?.len() {
            return Err(Error::shape("dot of different lengths"));
        }
        let value = self
            .value(a)?
            .iter()
            .zip(self.value(b)?)
            .map(|(x, y)| x * y)
            .sum();
        self.push(
            Primitive::Dot,
            vec![value],
            Shape::scalar(),
            &[a, b],
            Box::new(move |vals, g, sink| {
                let (va, vb) = (vals.get(a), vals.get(b));
                let g = g[0];
                if let Some(s) = sink.slot(a) {
                    s.iter_mut().zip(vb).for_each(|(o, y)| *o += g * y);
                }
                if let Some(s) = sink.slot(b) {
                    s.iter_mut().zip(va).for_each(|(o, x)| *o += g * x);
                }
            }),
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a)?.iter().sum();
        self.push(
            Primitive::Sum,
            vec![value],
            Shape::scalar(),
            &[a],
            Box::new(move |_, g, sink| {
                let g = g[0];
                if let Some(s) = sink.slot(a) {
                    s.iter_mut().for_each(|o| *o += g);
                }
            }),
        )
    }

    /// Periodic Gaussian smoothing of every channel. Self-adjoint.
    pub fn smooth(&mut self, a: Var, sigma: f64) -> Result<Var> {
        let shape = self.shape(a)?;
        let grid = shape.grid()?;
        let mut value = self.value(a)?.to_vec();
        gaussian_smooth_slice(&grid, &mut value, shape.channels, sigma)?;
        let channels = shape.channels;
        self.push(
            Primitive::Smooth,
            value,
            shape,
            &[a],
            Box::new(move |_, g, sink| {
                if let Some(s) = sink.slot(a) {
                    let mut gs = g.to_vec();
                    gaussian_smooth_slice(&grid, &mut gs, channels, sigma)
                        .expect("sigma validated on the forward pass");
                    s.iter_mut().zip(&gs).for_each(|(o, g)| *o += g);
                }
            }),
        )
    }

    /// Multilinear resampling of every channel onto `target`.
    pub fn resample(&mut self, a: Var, target: Grid) -> Result<Var> {
        let shape = self.shape(a)?;
        let source = shape.grid()?;
        let channels = shape.channels;
        let stencils = resample_stencils(&source, &target);
        let (ns, nt) = (source.len(), target.len());
        let va = self.value(a)?;
        let mut value = vec![0.0; nt * channels];
        for c in 0..channels {
            let src = &va[c * ns..(c + 1) * ns];
            for (o, st) in value[c * nt..(c + 1) * nt].iter_mut().zip(&stencils) {
                *o = st.eval(src);
            }
        }
        self.push(
            Primitive::Resample,
            value,
            Shape::field(target, channels),
            &[a],
            Box::new(move |_, g, sink| {
                if let Some(s) = sink.slot(a) {
                    for c in 0..channels {
                        let dst = &mut s[c * ns..(c + 1) * ns];
                        for (gi, st) in g[c * nt..(c + 1) * nt].iter().zip(&stencils) {
                            st.scatter(*gi, dst);
                        }
                    }
                }
            }),
        )
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect()
}
