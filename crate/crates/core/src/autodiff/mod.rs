//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! Every differentiable operation appends a node holding its forward value
//! and enough context to run its backward rule. Nodes are only ever appended,
//! so the node list is already in topological order and backward is a single
//! reverse sweep.
//!
//! Gradients for parameters are *accumulated* into their [`ParamStore`];
//! call [`ParamStore::zero_grad`] between steps.

pub(crate) mod gradcheck;
mod param;

use std::sync::Arc;

pub use gradcheck::{grad_check, grad_check_inputs, grad_check_mixed, relative_error, GradCheckOptions, GradCheckReport, GradFailure};
pub use param::{ParamId, ParamStore, Parameter};

use crate::error::{Error, Result};
use crate::ops::conv::{self, ConvSpec};
use crate::ops::norm::{self, Grouping, NormCache};
use crate::tensor::{Real, Shape4, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(&self) -> usize {
        self.0
    }
}

/// Backward rule of a [`Tape::custom`] node: given the upstream gradient and
/// the input values, returns one gradient per input.
pub type CustomBackward<T> = Arc<dyn Fn(&Tensor<T>, &[&Tensor<T>]) -> Vec<Tensor<T>> + Send + Sync>;

pub(crate) enum Op<T: Real> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Offset(Var),
    Square(Var),
    Ln(Var),
    ClampMin(Var, T),
    Sum(Var),
    Mean(Var),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    SliceChannels {
        x: Var,
        start: usize,
    },
    ConcatChannels(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    Normalize {
        x: Var,
        affine: Option<(Var, Var)>,
        cache: NormCache<T>,
    },
    Custom {
        inputs: Vec<Var>,
        backward: CustomBackward<T>,
    },
}

impl<T: Real> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Param(_) => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::ConcatChannels(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Offset(x)
            | Op::Square(x)
            | Op::Ln(x)
            | Op::ClampMin(x, _)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::LeakyRelu(x, _)
            | Op::Sigmoid(x)
            | Op::SliceChannels { x, .. } => vec![*x],
            Op::Conv2d { x, w, b, .. } | Op::ConvTranspose2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::Normalize { x, affine, .. } => {
                let mut v = vec![*x];
                if let Some((g, b)) = affine {
                    v.extend([*g, *b]);
                }
                v
            }
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Per-node gradients produced by a backward pass.
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to `v`, or `None` when `v` does not
    /// influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

/// A recorded computation graph.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    training: bool,
    macs: u64,
    state_updates: Vec<(ParamId, Tensor<T>)>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    /// A tape in training mode.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            training: true,
            macs: 0,
            state_updates: Vec::new(),
        }
    }

    /// A tape in inference mode (batch norm reads its running statistics).
    pub fn inference() -> Self {
        Tape {
            training: false,
            ..Self::new()
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulates performed by convolutions recorded so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    /// Which side of its kink every leaky-relu and clamp input lies on.
    /// Two evaluations with equal signatures share one smooth piece.
    pub fn kink_signature(&self) -> Vec<bool> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            match node.op {
                Op::LeakyRelu(x, _) => sig.extend(self.value(x).data().iter().map(|v| *v > T::zero())),
                Op::ClampMin(x, floor) => sig.extend(self.value(x).data().iter().map(|v| *v > floor)),
                _ => {}
            }
        }
        sig
    }

    pub(crate) fn add_macs(&mut self, macs: u64) {
        self.macs += macs;
    }

    /// Running-statistic updates produced by training-mode batch norm; apply
    /// them with [`ParamStore::commit_state`].
    pub fn state_updates(&self) -> &[(ParamId, Tensor<T>)] {
        &self.state_updates
    }

    pub(crate) fn push_state_update(&mut self, id: ParamId, value: Tensor<T>) {
        self.state_updates.push((id, value));
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape4 {
        self.nodes[v.0].value.shape()
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records an input or constant.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Records the current value of a parameter; its gradient flows back into
    /// the store on [`Tape::backward`].
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.get(id).value().clone(), Op::Param(id))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let v = self.value(x).scale(s);
        self.push(v, Op::Scale(x, s))
    }

    /// `x + c` for a constant `c`.
    pub fn offset(&mut self, x: Var, c: T) -> Var {
        let v = self.value(x).map(|e| e + c);
        self.push(v, Op::Offset(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| e * e);
        self.push(v, Op::Square(x))
    }

    /// Natural logarithm.
    pub fn ln(&mut self, x: Var) -> Var {
        let v = self.value(x).map(T::ln);
        self.push(v, Op::Ln(x))
    }

    /// `max(x, floor)`; the gradient is blocked where the floor is active.
    pub fn clamp_min(&mut self, x: Var, floor: T) -> Var {
        let v = self.value(x).map(|e| e.max(floor));
        self.push(v, Op::ClampMin(x, floor))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(T::of(self.value(x).sum_f64()));
        self.push(v, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(T::of(self.value(x).mean_f64()));
        self.push(v, Op::Mean(x))
    }

    /// Records an operation with a caller-supplied backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor<T>, backward: CustomBackward<T>) -> Var {
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward,
            },
        )
    }

    /// Gradients of `loss` with respect to every node.
    pub fn gradients(&self, loss: Var) -> Result<Gradients<T>> {
        let shape = self.shape(loss);
        if shape != Shape4::scalar() {
            return Err(Error::NotScalar(shape));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for id in (0..=loss.0).rev() {
            let Some(upstream) = grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            let inputs = node.op.inputs();
            if let Some(bad) = inputs.iter().find(|v| v.0 >= id) {
                return Err(Error::Cycle { node: id, input: bad.0 });
            }
            for (var, g) in self.node_backward(node, &upstream)? {
                accumulate(&mut grads, var, g)?;
            }
            grads[id] = Some(upstream);
        }
        Ok(Gradients { grads })
    }

    /// Runs backward from `loss` and accumulates parameter gradients into
    /// `store`. Parameters the loss does not reach are left untouched.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<Gradients<T>> {
        let grads = self.gradients(loss)?;
        for (id, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(pid), Some(g)) = (&node.op, grads.grads[id].as_ref()) {
                store.get_mut(*pid).accumulate_grad(g)?;
            }
        }
        Ok(grads)
    }

    fn node_backward(&self, node: &Node<T>, dy: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        Ok(match &node.op {
            Op::Leaf | Op::Param(_) => vec![],
            Op::Add(a, b) => vec![(*a, dy.clone()), (*b, dy.clone())],
            Op::Sub(a, b) => vec![(*a, dy.clone()), (*b, dy.scale(-T::one()))],
            Op::Mul(a, b) => vec![(*a, dy.mul(val(*b))?), (*b, dy.mul(val(*a))?)],
            Op::Scale(x, s) => vec![(*x, dy.scale(*s))],
            Op::Offset(x) => vec![(*x, dy.clone())],
            Op::Square(x) => {
                let two = T::of(2.0);
                vec![(*x, dy.zip_map(val(*x), "square", |g, x| g * two * x)?)]
            }
            Op::Ln(x) => vec![(*x, dy.zip_map(val(*x), "ln", |g, x| g / x)?)],
            Op::ClampMin(x, floor) => {
                let floor = *floor;
                vec![(
                    *x,
                    dy.zip_map(val(*x), "clamp_min", |g, x| if x > floor { g } else { T::zero() })?,
                )]
            }
            Op::Sum(x) => vec![(*x, Tensor::full(val(*x).shape(), dy.item()?))],
            Op::Mean(x) => {
                let n = T::of(val(*x).numel() as f64);
                vec![(*x, Tensor::full(val(*x).shape(), dy.item()? / n))]
            }
            Op::LeakyRelu(x, slope) => {
                let slope = *slope;
                vec![(
                    *x,
                    dy.zip_map(val(*x), "leaky_relu", |g, x| {
                        if x >= T::zero() {
                            g
                        } else {
                            g * slope
                        }
                    })?,
                )]
            }
            Op::Sigmoid(x) => {
                let one = T::one();
                vec![(*x, dy.zip_map(&node.value, "sigmoid", |g, y| g * y * (one - y))?)]
            }
            Op::SliceChannels { x, start } => {
                let xs = val(*x).shape();
                let ds = dy.shape();
                let mut out = Tensor::<T>::zeros(xs);
                let plane = xs.plane();
                let buf = out.data_mut();
                for n in 0..xs.n {
                    let dst = xs.index(n, *start, 0, 0);
                    let src = ds.index(n, 0, 0, 0);
                    buf[dst..dst + ds.c * plane].copy_from_slice(&dy.data()[src..src + ds.c * plane]);
                }
                vec![(*x, out)]
            }
            Op::ConcatChannels(a, b) => {
                let ca = val(*a).shape().c;
                let cb = val(*b).shape().c;
                vec![
                    (*a, dy.slice_channels(0..ca)?),
                    (*b, dy.slice_channels(ca..ca + cb)?),
                ]
            }
            Op::Conv2d { x, w, b, spec } => {
                let (dx, dw, db) = conv::conv2d_backward(val(*x), val(*w), dy, spec)?;
                let mut out = vec![(*x, dx), (*w, dw)];
                if let Some(b) = b {
                    out.push((*b, db));
                }
                out
            }
            Op::ConvTranspose2d { x, w, b, spec } => {
                let (dx, dw, db) = conv::conv_transpose2d_backward(val(*x), val(*w), dy, spec)?;
                let mut out = vec![(*x, dx), (*w, dw)];
                if let Some(b) = b {
                    out.push((*b, db));
                }
                out
            }
            Op::Normalize { x, affine, cache } => {
                let gamma = affine.map(|(g, _)| val(g));
                let (dx, dgamma, dbeta) = norm::normalize_backward(dy, cache, gamma)?;
                let mut out = vec![(*x, dx)];
                if let Some((g, b)) = affine {
                    out.push((*g, dgamma));
                    out.push((*b, dbeta));
                }
                out
            }
            Op::Custom { inputs, backward } => {
                let values: Vec<&Tensor<T>> = inputs.iter().map(|v| val(*v)).collect();
                let grads = backward(dy, &values);
                if grads.len() != inputs.len() {
                    return Err(Error::arg(
                        "custom backward",
                        format!("returned {} gradients for {} inputs", grads.len(), inputs.len()),
                    ));
                }
                inputs.iter().copied().zip(grads).collect()
            }
        })
    }

    pub(crate) fn grouping_norm(
        &mut self,
        x: Var,
        affine: Option<(Var, Var)>,
        grouping: Grouping,
        eps: f64,
        fixed: Option<(&Tensor<T>, &Tensor<T>)>,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let gamma = affine.map(|(g, _)| self.value(g).clone());
        let beta = affine.map(|(_, b)| self.value(b).clone());
        let (y, cache, means, vars) =
            norm::normalize_forward(self.value(x), gamma.as_ref(), beta.as_ref(), grouping, eps, fixed)?;
        Ok((self.push(y, Op::Normalize { x, affine, cache }), means, vars))
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], var: Var, g: Tensor<T>) -> Result<()> {
    match &mut grads[var.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

impl<T: Real> ParamStore<T> {
    /// Applies the running-statistic updates a training tape recorded.
    pub fn commit_state(&mut self, tape: &Tape<T>) -> Result<()> {
        for (id, value) in tape.state_updates() {
            self.get_mut(*id).set_value(value.clone())?;
        }
        Ok(())
    }
}
