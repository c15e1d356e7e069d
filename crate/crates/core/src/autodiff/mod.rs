//! Reverse-mode differentiation over coarse-grained field primitives.
//!
//! A [`Tape`] records one forward evaluation. Each recorded node owns its
//! output buffer and a hand-written vector-Jacobian product. After
//! [`Tape::backward`] the tape is consumed; any further use of it, or of
//! its [`Var`]s on another tape, is a [`Error::StaleTape`].
//!
//! Values are flat `f64` buffers tagged with a [`Shape`]: either a stack of
//! `channels` fields on a grid (channel-major) or a plain vector.

mod check;
mod ops;

#[cfg(test)]
mod audit;


use std::sync::atomic::{AtomicU64, Ordering};

pub use check::{finite_difference_check, rel_error, sample_coordinates, FdReport};

use crate::error::{Error, Result};
use crate::field::Grid;

/// Every primitive the tape knows. Each one has an adjoint; the audit test
/// gradient-checks all of them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Primitive {
    Leaf,
    Constant,
    Add,
    Sub,
    Scale,
    Affine,
    Mul,
    MulBroadcast,
    Div,
    Sqrt,
    LeakyRelu,
    SelectChannel,
    Concat,
    Dot,
    Sum,
    Smooth,
    Resample,
    ChannelNormalize,
    OmtIntegral,
    TvPenalty,
    Conv2d,
    BatchNorm,
    WeightedLinearSoftmax,
    InputRangePenalty,
    Rk4Step,
    Warp,
    Ncc,
}

impl Primitive {
    /// All differentiable operations (leaves and constants excluded).
    pub const OPERATIONS: [Primitive; 25] = [
        Primitive::Add,
        Primitive::Sub,
        Primitive::Scale,
        Primitive::Affine,
        Primitive::Mul,
        Primitive::MulBroadcast,
        Primitive::Div,
        Primitive::Sqrt,
        Primitive::LeakyRelu,
        Primitive::SelectChannel,
        Primitive::Concat,
        Primitive::Dot,
        Primitive::Sum,
        Primitive::Smooth,
        Primitive::Resample,
        Primitive::ChannelNormalize,
        Primitive::OmtIntegral,
        Primitive::TvPenalty,
        Primitive::Conv2d,
        Primitive::BatchNorm,
        Primitive::WeightedLinearSoftmax,
        Primitive::InputRangePenalty,
        Primitive::Rk4Step,
        Primitive::Warp,
        Primitive::Ncc,
    ];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Shape {
    pub grid: Option<Grid>,
    pub channels: usize,
}

impl Shape {
    pub fn scalar() -> Shape {
        Shape {
            grid: None,
            channels: 1,
        }
    }

    pub fn flat(len: usize) -> Shape {
        Shape {
            grid: None,
            channels: len,
        }
    }

    pub fn field(grid: Grid, channels: usize) -> Shape {
        Shape {
            grid: Some(grid),
            channels,
        }
    }

    pub fn len(&self) -> usize {
        self.grid.map_or(1, |g| g.len()) * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn grid(&self) -> Result<Grid> {
        self.grid
            .ok_or_else(|| Error::shape("operation needs a field-shaped value"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

pub(crate) type Backward = Box<dyn Fn(&Values<'_>, &[f64], &mut GradSink<'_>)>;

struct Node {
    prim: Primitive,
    shape: Shape,
    value: Vec<f64>,
    requires_grad: bool,
    backward: Option<Backward>,
}

/// Read access to forward values during the backward sweep.
pub(crate) struct Values<'a> {
    nodes: &'a [Node],
}

impl Values<'_> {
    pub(crate) fn get(&self, v: Var) -> &[f64] {
        &self.nodes[v.idx].value
    }
}

/// Gradient accumulators of all nodes upstream of the one being processed.
pub(crate) struct GradSink<'a> {
    nodes: &'a [Node],
    grads: &'a mut [Option<Vec<f64>>],
}

impl GradSink<'_> {
    /// Mutable accumulator for `v`, or `None` if `v` needs no gradient.
    pub(crate) fn slot(&mut self, v: Var) -> Option<&mut [f64]> {
        if !self.nodes[v.idx].requires_grad {
            return None;
        }
        let len = self.nodes[v.idx].value.len();
        Some(self.grads[v.idx].get_or_insert_with(|| vec![0.0; len]))
    }

    pub(crate) fn accumulate(&mut self, v: Var, g: &[f64]) {
        if let Some(s) = self.slot(v) {
            s.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
    }
}

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Vec<f64>, shape: Shape) -> Result<Var> {
        self.insert(Primitive::Leaf, value, shape, true, None)
    }

    pub fn constant(&mut self, value: Vec<f64>, shape: Shape) -> Result<Var> {
        self.insert(Primitive::Constant, value, shape, false, None)
    }

    pub fn scalar_constant(&mut self, v: f64) -> Result<Var> {
        self.constant(vec![v], Shape::scalar())
    }

    fn insert(
        &mut self,
        prim: Primitive,
        value: Vec<f64>,
        shape: Shape,
        requires_grad: bool,
        backward: Option<Backward>,
    ) -> Result<Var> {
        if self.consumed {
            return Err(Error::StaleTape);
        }
        if value.len() != shape.len() {
            return Err(Error::shape(format!(
                "{prim:?}: {} values for shape of {}",
                value.len(),
                shape.len()
            )));
        }
        self.nodes.push(Node {
            prim,
            shape,
            value,
            requires_grad,
            backward,
        });
        Ok(Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        })
    }

    pub(crate) fn check(&self, v: Var) -> Result<()> {
        if self.consumed || v.tape != self.id {
            return Err(Error::StaleTape);
        }
        Ok(())
    }

    /// Records an operation. The adjoint is dropped when no input needs a
    /// gradient.
    pub(crate) fn push(
        &mut self,
        prim: Primitive,
        value: Vec<f64>,
        shape: Shape,
        inputs: &[Var],
        backward: Backward,
    ) -> Result<Var> {
        for &v in inputs {
            self.check(v)?;
        }
        let requires = inputs.iter().any(|v| self.nodes[v.idx].requires_grad);
        self.insert(prim, value, shape, requires, requires.then_some(backward))
    }

    pub fn value(&self, v: Var) -> Result<&[f64]> {
        self.check(v)?;
        Ok(&self.nodes[v.idx].value)
    }

    pub fn shape(&self, v: Var) -> Result<Shape> {
        self.check(v)?;
        Ok(self.nodes[v.idx].shape)
    }

    pub fn primitive(&self, v: Var) -> Result<Primitive> {
        self.check(v)?;
        Ok(self.nodes[v.idx].prim)
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        let val = self.value(v)?;
        if val.len() != 1 {
            return Err(Error::param(format!("expected a scalar, found {} values", val.len())));
        }
        Ok(val[0])
    }

    /// Runs the adjoint sweep from a scalar `loss` and consumes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        self.check(loss)?;
        if self.nodes[loss.idx].value.len() != 1 {
            return Err(Error::param("backward needs a scalar loss"));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.idx].requires_grad {
            grads[loss.idx] = Some(vec![1.0]);
        }
        for i in (0..=loss.idx).rev() {
            let node = &self.nodes[i];
            if node.prim == Primitive::Leaf {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Some(bw) = &node.backward {
                let (upstream, _) = grads.split_at_mut(i);
                let mut sink = GradSink {
                    nodes: &self.nodes[..i],
                    grads: upstream,
                };
                bw(&Values { nodes: &self.nodes }, &g, &mut sink);
            }
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| if n.prim == Primitive::Leaf { g } else { None })
            .collect();
        Ok(Gradients { tape: self.id, grads })
    }
}

/// Gradients of one backward sweep, indexed by leaf.
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient at `leaf`; zeros when the loss does not depend on it.
    pub fn get(&self, leaf: Var, len: usize) -> Result<Vec<f64>> {
        if leaf.tape != self.tape || leaf.idx >= self.grads.len() {
            return Err(Error::StaleTape);
        }
        Ok(self.grads[leaf.idx].clone().unwrap_or_else(|| vec![0.0; len]))
    }

    pub fn take(&mut self, leaf: Var, len: usize) -> Result<Vec<f64>> {
        if leaf.tape != self.tape || leaf.idx >= self.grads.len() {
            return Err(Error::StaleTape);
        }
        Ok(self.grads[leaf.idx].take().unwrap_or_else(|| vec![0.0; len]))
    }
}
