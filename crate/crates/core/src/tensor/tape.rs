use std::cell::{Cell, Ref, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use super::kernels::{self, AttentionDims, LayerNormStats};
use super::pattern::RearrangePattern;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a tensor living in a computation recorded by a [`Tape`].
///
/// Cloning is cheap (reference counted). The gradient slot is only written
/// by [`Tape::backward`].
pub struct Var<E: Scalar = f32>(Rc<Node<E>>);

struct Node<E: Scalar> {
    id: usize,
    value: Tensor<E>,
    requires_grad: bool,
    op: Option<Op<E>>,
    grad: RefCell<Option<Tensor<E>>>,
}

impl<E: Scalar> Clone for Var<E> {
    fn clone(&self) -> Self {
        Var(Rc::clone(&self.0))
    }
}

impl<E: Scalar> fmt::Debug for Var<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("requires_grad", &self.0.requires_grad)
            .field("value", &self.0.value)
            .finish()
    }
}

impl<E: Scalar> Var<E> {
    pub fn value(&self) -> &Tensor<E> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    /// Accumulated gradient, populated by [`Tape::backward`].
    pub fn grad(&self) -> Option<Ref<'_, Tensor<E>>> {
        Ref::filter_map(self.0.grad.borrow(), Option::as_ref).ok()
    }

    pub fn take_grad(&self) -> Option<Tensor<E>> {
        self.0.grad.borrow_mut().take()
    }
}

enum Op<E: Scalar> {
    Add(Var<E>, Var<E>),
    Sub(Var<E>, Var<E>),
    Mul(Var<E>, Var<E>),
    Scale(Var<E>, E),
    Gelu(Var<E>),
    Relu(Var<E>),
    MatMul(Var<E>, Var<E>),
    Softmax(Var<E>, usize),
    LayerNorm {
        x: Var<E>,
        gamma: Var<E>,
        beta: Var<E>,
        axis: usize,
        stats: LayerNormStats<E>,
    },
    Conv2d {
        x: Var<E>,
        w: Var<E>,
        b: Option<Var<E>>,
    },
    Gather {
        x: Var<E>,
        index: Rc<Vec<usize>>,
    },
    PassThrough(Var<E>),
    Rope {
        x: Var<E>,
        positions: Rc<Vec<usize>>,
        cos: Vec<E>,
        sin: Vec<E>,
    },
    Attention {
        q: Var<E>,
        k: Var<E>,
        v: Var<E>,
        scale: E,
        probs: Tensor<E>,
    },
    Sum(Var<E>),
    Mean(Var<E>),
    L1 {
        x: Var<E>,
        target: Tensor<E>,
    },
}

/// Kinds accepted by [`Tape::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Scale,
    Gelu,
    Relu,
}

/// Second operand of [`Tape::elementwise`].
pub enum Operand<'a, E: Scalar> {
    Var(&'a Var<E>),
    Scalar(E),
}

/// Ordered record of differentiable operations.
///
/// Ops are appended in execution order, so replaying the record backwards is
/// a valid topological order. A tape built with [`Tape::no_grad`] records
/// nothing and intermediate values are freed as soon as they go out of scope.
pub struct Tape<E: Scalar = f32> {
    records: RefCell<Vec<Var<E>>>,
    next_id: Cell<usize>,
    grad_enabled: bool,
}

impl<E: Scalar> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> Tape<E> {
    pub fn new() -> Self {
        Self {
            records: RefCell::new(Vec::new()),
            next_id: Cell::new(0),
            grad_enabled: true,
        }
    }

    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.records.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Total number of elements held by recorded values.
    pub fn live_elements(&self) -> usize {
        self.records.borrow().iter().map(|v| v.value().numel()).sum()
    }

    pub fn clear(&self) {
        self.records.borrow_mut().clear();
    }

    fn next_id(&self) -> usize {
        let id = self.next_id.get();
        self.next_id.set(id + 1);
        id
    }

    pub fn leaf(&self, value: Tensor<E>, requires_grad: bool) -> Var<E> {
        let requires_grad = requires_grad && self.grad_enabled;
        let var = Var(Rc::new(Node {
            id: self.next_id(),
            value,
            requires_grad,
            op: None,
            grad: RefCell::new(None),
        }));
        if requires_grad {
            self.records.borrow_mut().push(var.clone());
        }
        var
    }

    pub fn constant(&self, value: Tensor<E>) -> Var<E> {
        self.leaf(value, false)
    }

    fn push(&self, value: Tensor<E>, parents: &[&Var<E>], op: impl FnOnce() -> Op<E>) -> Var<E> {
        let requires_grad = self.grad_enabled && parents.iter().any(|p| p.requires_grad());
        let var = Var(Rc::new(Node {
            id: self.next_id(),
            value,
            requires_grad,
            op: requires_grad.then(op),
            grad: RefCell::new(None),
        }));
        if requires_grad {
            self.records.borrow_mut().push(var.clone());
        }
        var
    }

    pub fn elementwise(
        &self,
        kind: Elementwise,
        a: &Var<E>,
        b: Option<Operand<'_, E>>,
    ) -> Result<Var<E>> {
        let missing = || Error::InvalidArgument(format!("{kind:?} needs a second operand"));
        match (kind, b) {
            (Elementwise::Gelu, _) => Ok(self.gelu(a)),
            (Elementwise::Relu, _) => Ok(self.relu(a)),
            (Elementwise::Scale, Some(Operand::Scalar(s))) => Ok(self.scale(a, s)),
            (Elementwise::Scale, Some(Operand::Var(b))) => self.mul(a, b),
            (Elementwise::Add, Some(Operand::Var(b))) => self.add(a, b),
            (Elementwise::Sub, Some(Operand::Var(b))) => self.sub(a, b),
            (Elementwise::Mul, Some(Operand::Var(b))) => self.mul(a, b),
            (Elementwise::Add, Some(Operand::Scalar(s))) => {
                Ok(self.push(a.value().map(|v| v + s), &[a], || Op::PassThrough(a.clone())))
            }
            (Elementwise::Sub, Some(Operand::Scalar(s))) => {
                Ok(self.push(a.value().map(|v| v - s), &[a], || Op::PassThrough(a.clone())))
            }
            (Elementwise::Mul, Some(Operand::Scalar(s))) => Ok(self.scale(a, s)),
            (_, None) => Err(missing()),
        }
    }

    fn binary(&self, a: &Var<E>, b: &Var<E>, f: impl Fn(E, E) -> E) -> Result<Tensor<E>> {
        let (shape, data) = kernels::binary(a.shape(), a.value().data(), b.shape(), b.value().data(), f)?;
        Tensor::new(shape, data)
    }

    pub fn add(&self, a: &Var<E>, b: &Var<E>) -> Result<Var<E>> {
        let out = self.binary(a, b, |x, y| x + y)?;
        Ok(self.push(out, &[a, b], || Op::Add(a.clone(), b.clone())))
    }

    pub fn sub(&self, a: &Var<E>, b: &Var<E>) -> Result<Var<E>> {
        let out = self.binary(a, b, |x, y| x - y)?;
        Ok(self.push(out, &[a, b], || Op::Sub(a.clone(), b.clone())))
    }

    pub fn mul(&self, a: &Var<E>, b: &Var<E>) -> Result<Var<E>> {
        let out = self.binary(a, b, |x, y| x * y)?;
        Ok(self.push(out, &[a, b], || Op::Mul(a.clone(), b.clone())))
    }

    pub fn scale(&self, a: &Var<E>, s: E) -> Var<E> {
        self.push(a.value().map(|v| v * s), &[a], || Op::Scale(a.clone(), s))
    }

    pub fn gelu(&self, a: &Var<E>) -> Var<E> {
        self.push(a.value().map(kernels::gelu), &[a], || Op::Gelu(a.clone()))
    }

    pub fn relu(&self, a: &Var<E>) -> Var<E> {
        self.push(a.value().map(|v| v.max(E::zero())), &[a], || Op::Relu(a.clone()))
    }

    pub fn matmul(&self, a: &Var<E>, b: &Var<E>) -> Result<Var<E>> {
        let out = a.value().matmul(b.value())?;
        Ok(self.push(out, &[a, b], || Op::MatMul(a.clone(), b.clone())))
    }

    pub fn softmax(&self, x: &Var<E>, axis: usize) -> Result<Var<E>> {
        let out = x.value().softmax(axis)?;
        Ok(self.push(out, &[x], || Op::Softmax(x.clone(), axis)))
    }

    pub fn layer_norm(
        &self,
        x: &Var<E>,
        axis: usize,
        gamma: &Var<E>,
        beta: &Var<E>,
        eps: E,
    ) -> Result<Var<E>> {
        let (y, stats) = kernels::layer_norm(
            x.shape(),
            x.value().data(),
            axis,
            gamma.value().data(),
            beta.value().data(),
            eps,
        )?;
        let out = Tensor::new(x.shape().to_vec(), y)?;
        Ok(self.push(out, &[x, gamma, beta], || Op::LayerNorm {
            x: x.clone(),
            gamma: gamma.clone(),
            beta: beta.clone(),
            axis,
            stats,
        }))
    }

    pub fn conv2d(&self, x: &Var<E>, w: &Var<E>, b: Option<&Var<E>>) -> Result<Var<E>> {
        let out = x.value().conv2d(w.value(), b.map(Var::value))?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(out, &parents, || Op::Conv2d {
            x: x.clone(),
            w: w.clone(),
            b: b.cloned(),
        }))
    }

    /// `out[i] = x[index[i]]`; the adjoint scatters-adds. Every data-movement
    /// op (permute, patchify, reassembly, crop) lowers onto this.
    pub fn gather(&self, x: &Var<E>, shape: &[usize], index: Rc<Vec<usize>>) -> Result<Var<E>> {
        if let Some(&bad) = index.iter().find(|&&i| i >= x.value().numel()) {
            return Err(Error::InvalidArgument(format!(
                "gather index {bad} out of bounds for {:?}",
                x.shape()
            )));
        }
        let out = x.value().gather(shape, &index)?;
        Ok(self.push(out, &[x], || Op::Gather {
            x: x.clone(),
            index,
        }))
    }

    pub fn reshape(&self, x: &Var<E>, shape: &[usize]) -> Result<Var<E>> {
        let out = x.value().reshape(shape.to_vec())?;
        Ok(self.push(out, &[x], || Op::PassThrough(x.clone())))
    }

    pub fn permute(&self, x: &Var<E>, axes: &[usize]) -> Result<Var<E>> {
        let (shape, index) = kernels::permute_index(x.shape(), axes)?;
        self.gather(x, &shape, Rc::new(index))
    }

    pub fn rearrange(&self, x: &Var<E>, pattern: &str, sizes: &[(&str, usize)]) -> Result<Var<E>> {
        let plan = RearrangePattern::parse(pattern)?.plan(x.shape(), sizes)?;
        let split = self.reshape(x, &plan.split_shape)?;
        let permuted = if plan.perm.iter().enumerate().all(|(i, &p)| i == p) {
            split
        } else {
            self.permute(&split, &plan.perm)?
        };
        self.reshape(&permuted, &plan.out_shape)
    }

    /// Rotary position embedding over the last axis of `x` (`[..., L, d]`),
    /// rotating pair `(2i, 2i+1)` of the row at sequence slot `j` by
    /// `positions[j] · base^(-2i/d)`.
    pub fn rope(&self, x: &Var<E>, positions: &[usize], base: f64) -> Result<Var<E>> {
        let shape = x.shape();
        let r = shape.len();
        if r < 2 {
            return Err(Error::invalid_shape(shape, "rope needs [..., L, d]"));
        }
        let d = shape[r - 1];
        if d % 2 != 0 {
            return Err(Error::invalid_shape(shape, "rope head dimension must be even"));
        }
        if positions.len() != shape[r - 2] {
            return Err(Error::InvalidArgument(format!(
                "rope got {} positions for sequence length {}",
                positions.len(),
                shape[r - 2]
            )));
        }
        let (cos, sin) = kernels::rope_table::<E>(positions, d, base);
        let data = kernels::rope_apply(x.value().data(), d, positions, &cos, &sin, false);
        let out = Tensor::new(shape.to_vec(), data)?;
        let positions = Rc::new(positions.to_vec());
        Ok(self.push(out, &[x], || Op::Rope {
            x: x.clone(),
            positions,
            cos,
            sin,
        }))
    }

    /// Fused `softmax(q·kᵀ·scale)·v` over matching leading dimensions. Only the
    /// probability matrix is kept for the backward pass.
    pub fn attention(&self, q: &Var<E>, k: &Var<E>, v: &Var<E>, scale: E) -> Result<Var<E>> {
        Ok(self.attention_with_probs(q, k, v, scale)?.0)
    }

    pub fn attention_with_probs(
        &self,
        q: &Var<E>,
        k: &Var<E>,
        v: &Var<E>,
        scale: E,
    ) -> Result<(Var<E>, Tensor<E>)> {
        let dims = kernels::attention_dims(q.shape(), k.shape(), v.shape())?;
        let (out, probs) =
            kernels::attention(&dims, q.value().data(), k.value().data(), v.value().data(), scale);
        let r = q.shape().len();
        let mut out_shape = q.shape().to_vec();
        out_shape[r - 1] = dims.dv;
        let mut p_shape = q.shape().to_vec();
        p_shape[r - 1] = dims.lk;
        let probs = Tensor::new(p_shape, probs)?;
        let out = Tensor::new(out_shape, out)?;
        // The op (and its copy of the probabilities) is only built when recording.
        let var = self.push(out, &[q, k, v], || Op::Attention {
            q: q.clone(),
            k: k.clone(),
            v: v.clone(),
            scale,
            probs: probs.clone(),
        });
        Ok((var, probs))
    }

    pub fn sum(&self, x: &Var<E>) -> Var<E> {
        self.push(Tensor::scalar(x.value().sum()), &[x], || Op::Sum(x.clone()))
    }

    pub fn mean(&self, x: &Var<E>) -> Var<E> {
        self.push(Tensor::scalar(x.value().mean()), &[x], || Op::Mean(x.clone()))
    }

    /// Mean absolute difference against a constant target.
    pub fn l1_loss(&self, x: &Var<E>, target: &Tensor<E>) -> Result<Var<E>> {
        if x.shape() != target.shape() {
            return Err(Error::shape(x.shape(), target.shape()));
        }
        let total: E = x
            .value()
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| (a - b).abs())
            .sum();
        let loss = total / E::lit(target.numel() as f64);
        Ok(self.push(Tensor::scalar(loss), &[x], || Op::L1 {
            x: x.clone(),
            target: target.clone(),
        }))
    }

    /// Replays the record in reverse, accumulating into every `requires_grad`
    /// leaf. Leaves the loss does not reach receive zeros.
    pub fn backward(&self, loss: &Var<E>) -> Result<()> {
        if !loss.value().is_scalar() {
            return Err(Error::NonScalarLoss(loss.shape().to_vec()));
        }
        let records = self.records.borrow();
        let mut grads: HashMap<usize, Vec<E>> = HashMap::new();
        if loss.requires_grad() {
            grads.insert(loss.id(), vec![E::one()]);
        }
        for var in records.iter().rev() {
            let Some(g) = grads.remove(&var.id()) else {
                continue;
            };
            match &var.0.op {
                None => accumulate_leaf(var, g),
                Some(op) => propagate(op, var.value(), &g, &mut grads),
            }
        }
        for var in records.iter().filter(|v| v.0.op.is_none()) {
            let mut slot = var.0.grad.borrow_mut();
            if slot.is_none() {
                *slot = Some(Tensor::zeros(var.shape().to_vec()));
            }
        }
        Ok(())
    }
}

fn accumulate_leaf<E: Scalar>(var: &Var<E>, g: Vec<E>) {
    let mut slot = var.0.grad.borrow_mut();
    match slot.as_mut() {
        Some(t) => t
            .data_mut()
            .iter_mut()
            .zip(&g)
            .for_each(|(a, &b)| *a = *a + b),
        None => *slot = Some(Tensor::new(var.shape().to_vec(), g).expect("grad shape")),
    }
}

fn send<E: Scalar>(grads: &mut HashMap<usize, Vec<E>>, to: &Var<E>, g: Vec<E>) {
    if !to.requires_grad() {
        return;
    }
    debug_assert_eq!(g.len(), to.value().numel());
    match grads.get_mut(&to.id()) {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
        None => {
            grads.insert(to.id(), g);
        }
    }
}

/// Gradient of a broadcasting binary op with respect to one operand.
fn broadcast_grad<E: Scalar>(
    out_shape: &[usize],
    operand: &Var<E>,
    g: &[E],
    local: impl Fn(usize, usize) -> E,
    other: &Var<E>,
) -> Vec<E> {
    let sa = kernels::broadcast_strides(operand.shape(), out_shape);
    let sb = kernels::broadcast_strides(other.shape(), out_shape);
    let mut acc = vec![E::zero(); operand.value().numel()];
    kernels::visit2(out_shape, &sa, &sb, |i, ia, ib| {
        acc[ia] = acc[ia] + g[i] * local(ia, ib);
    });
    acc
}

fn propagate<E: Scalar>(op: &Op<E>, out: &Tensor<E>, g: &[E], grads: &mut HashMap<usize, Vec<E>>) {
    let os = out.shape();
    match op {
        Op::Add(a, b) => {
            if a.requires_grad() {
                send(grads, a, kernels::reduce_to(g, os, a.shape()));
            }
            if b.requires_grad() {
                send(grads, b, kernels::reduce_to(g, os, b.shape()));
            }
        }
        Op::Sub(a, b) => {
            if a.requires_grad() {
                send(grads, a, kernels::reduce_to(g, os, a.shape()));
            }
            if b.requires_grad() {
                let neg: Vec<E> = g.iter().map(|&v| -v).collect();
                send(grads, b, kernels::reduce_to(&neg, os, b.shape()));
            }
        }
        Op::Mul(a, b) => {
            let (ad, bd) = (a.value().data(), b.value().data());
            if a.requires_grad() {
                let ga = broadcast_grad(os, a, g, |_, ib| bd[ib], b);
                send(grads, a, ga);
            }
            if b.requires_grad() {
                let gb = broadcast_grad(os, b, g, |_, ia| ad[ia], a);
                send(grads, b, gb);
            }
        }
        Op::Scale(a, s) => send(grads, a, g.iter().map(|&v| v * *s).collect()),
        Op::Gelu(a) => {
            let x = a.value().data();
            send(
                grads,
                a,
                g.iter().zip(x).map(|(&gv, &xv)| gv * kernels::gelu_grad(xv)).collect(),
            );
        }
        Op::Relu(a) => {
            let x = a.value().data();
            send(
                grads,
                a,
                g.iter()
                    .zip(x)
                    .map(|(&gv, &xv)| if xv > E::zero() { gv } else { E::zero() })
                    .collect(),
            );
        }
        Op::MatMul(a, b) => {
            let (ga, gb) = kernels::batched_matmul_backward(
                a.shape(),
                a.value().data(),
                b.shape(),
                b.value().data(),
                g,
            );
            send(grads, a, ga);
            send(grads, b, gb);
        }
        Op::Softmax(x, axis) => {
            send(grads, x, kernels::softmax_backward(os, out.data(), g, *axis));
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            axis,
            stats,
        } => {
            let (dx, dg, db) = kernels::layer_norm_backward(
                x.shape(),
                x.value().data(),
                *axis,
                gamma.value().data(),
                stats,
                g,
            );
            send(grads, x, dx);
            send(grads, gamma, dg);
            send(grads, beta, db);
        }
        Op::Conv2d { x, w, b } => {
            let (dx, dw, db) =
                kernels::conv2d_backward(x.shape(), x.value().data(), w.shape(), w.value().data(), g);
            send(grads, x, dx);
            send(grads, w, dw);
            if let Some(b) = b {
                send(grads, b, db);
            }
        }
        Op::Gather { x, index } => {
            let mut acc = vec![E::zero(); x.value().numel()];
            for (&src, &gv) in index.iter().zip(g) {
                acc[src] = acc[src] + gv;
            }
            send(grads, x, acc);
        }
        Op::PassThrough(x) => send(grads, x, g.to_vec()),
        Op::Rope {
            x,
            positions,
            cos,
            sin,
        } => {
            let d = *x.shape().last().expect("rank checked");
            send(grads, x, kernels::rope_apply(g, d, positions, cos, sin, true));
        }
        Op::Attention {
            q,
            k,
            v,
            scale,
            probs,
        } => {
            let dims: AttentionDims =
                kernels::attention_dims(q.shape(), k.shape(), v.shape()).expect("validated");
            let (gq, gk, gv) = kernels::attention_backward(
                &dims,
                q.value().data(),
                k.value().data(),
                v.value().data(),
                probs.data(),
                *scale,
                g,
            );
            send(grads, q, gq);
            send(grads, k, gk);
            send(grads, v, gv);
        }
        Op::Sum(x) => send(grads, x, vec![g[0]; x.value().numel()]),
        Op::Mean(x) => {
            let n = E::lit(x.value().numel() as f64);
            send(grads, x, vec![g[0] / n; x.value().numel()]);
        }
        Op::L1 { x, target } => {
            let n = E::lit(target.numel() as f64);
            let scale = g[0] / n;
            let gx = x
                .value()
                .data()
                .iter()
                .zip(target.data())
                .map(|(&a, &b)| {
                    if a > b {
                        scale
                    } else if a < b {
                        -scale
                    } else {
                        E::zero()
                    }
                })
                .collect();
            send(grads, x, gx);
        }
    }
}
