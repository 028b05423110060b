//! Define-by-run reverse-mode differentiation.
//!
//! Every op called on a [`Var`] evaluates eagerly and appends a node to its
//! [`Tape`]. [`Tape::backward`] walks the nodes in reverse execution order
//! and accumulates vector-Jacobian products into a [`Gradients`] table.
//! A tape belongs to a single thread; build a fresh one per step.

use std::cell::RefCell;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_mismatch, Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{Real, Tensor};

/// Elementwise nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply<R: Real>(self, x: R) -> R {
        match self {
            Activation::Relu => x.max(R::zero()),
            Activation::LeakyRelu(slope) => {
                if x > R::zero() {
                    x
                } else {
                    x * R::of(slope)
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
        }
    }
}

pub(crate) fn sigmoid<R: Real>(x: R) -> R {
    if x >= R::zero() {
        R::one() / (R::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (R::one() + e)
    }
}

/// Which statistics batch normalization divides by.
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a, R: Real> {
    BatchStats,
    RunningStats { mean: &'a [R], var: &'a [R] },
}

/// Per-channel mean and biased variance of the batch a batch-norm op saw.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchMoments<R: Real> {
    pub mean: Vec<R>,
    pub var: Vec<R>,
    pub count: usize,
}

enum Op<R: Real> {
    Leaf,
    Identity(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, R),
    AddScalar(usize),
    Conv {
        input: usize,
        kernel: usize,
        bias: Option<usize>,
        geom: ConvGeom,
        batch: usize,
    },
    ConvTranspose {
        input: usize,
        kernel: usize,
        bias: Option<usize>,
        geom: ConvGeom,
        batch: usize,
    },
    BatchNorm {
        input: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<R>,
        inv_std: Vec<R>,
        batch_stats: bool,
        dims: (usize, usize, usize),
    },
    Dropout {
        input: usize,
        mask: Vec<R>,
    },
    Act {
        input: usize,
        kind: Activation,
    },
    Concat {
        a: usize,
        b: usize,
        dims: (usize, usize, usize, usize),
    },
    Abs(usize),
    Square(usize),
    BceLogits {
        input: usize,
        label: R,
    },
    Sum(usize),
    Mean(usize),
}

impl<R: Real> Op<R> {
    fn inputs(&self) -> Vec<usize> {
        match *self {
            Op::Leaf => vec![],
            Op::Identity(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Abs(a)
            | Op::Square(a)
            | Op::Sum(a)
            | Op::Mean(a) => vec![a],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::Conv {
                input, kernel, bias, ..
            }
            | Op::ConvTranspose {
                input, kernel, bias, ..
            } => {
                let mut v = vec![input, kernel];
                v.extend(bias);
                v
            }
            Op::BatchNorm {
                input, gamma, beta, ..
            } => vec![input, gamma, beta],
            Op::Dropout { input, .. } | Op::Act { input, .. } | Op::BceLogits { input, .. } => {
                vec![input]
            }
            Op::Concat { a, b, .. } => vec![a, b],
        }
    }
}

struct Node<R: Real> {
    value: Rc<Tensor<R>>,
    op: Op<R>,
    requires_grad: bool,
}

/// Ordered record of executed ops.
pub struct Tape<R: Real = f32> {
    nodes: RefCell<Vec<Node<R>>>,
}

impl<R: Real> Default for Tape<R> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
pub struct Var<'t, R: Real = f32> {
    tape: &'t Tape<R>,
    id: usize,
}

impl<R: Real> Clone for Var<'_, R> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<R: Real> Copy for Var<'_, R> {}

impl<R: Real> std::fmt::Debug for Var<'_, R> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Record a leaf; it is differentiable iff `tensor.requires_grad`.
    pub fn leaf(&self, mut tensor: Tensor<R>) -> Var<'_, R> {
        tensor.grad = None;
        let requires_grad = tensor.requires_grad;
        self.push_node(tensor, Op::Leaf, requires_grad)
    }

    pub fn param(&self, tensor: Tensor<R>) -> Var<'_, R> {
        self.leaf(tensor.with_grad(true))
    }

    pub fn constant(&self, tensor: Tensor<R>) -> Var<'_, R> {
        self.leaf(tensor.with_grad(false))
    }

    fn push_node(&self, value: Tensor<R>, op: Op<R>, requires_grad: bool) -> Var<'_, R> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: Tensor<R>, op: Op<R>) -> Var<'_, R> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            op.inputs().iter().any(|&i| nodes[i].requires_grad)
        };
        self.push_node(value, op, requires_grad)
    }

    fn value(&self, id: usize) -> Rc<Tensor<R>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, R>) -> Result<Gradients<R>> {
        assert!(std::ptr::eq(loss.tape, self), "loss recorded on another tape");
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::NotScalar(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<R>>> = (0..nodes.len()).map(|_| None).collect();
        let mut visited = Vec::new();
        if root.requires_grad {
            grads[loss.id] = Some(vec![R::one()]);
        }
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            visited.push(id);
            for (input, gi) in local_grads(&nodes, id, &g) {
                accumulate(&mut grads, input, gi);
            }
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients {
            grads,
            shapes,
            visited,
        })
    }
}

fn accumulate<R: Real>(grads: &mut [Option<Vec<R>>], id: usize, g: Vec<R>) {
    match &mut grads[id] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, v)| *a += v),
        slot @ None => *slot = Some(g),
    }
}

fn zip_map<R: Real>(a: &[R], b: &[R], f: impl Fn(R, R) -> R) -> Vec<R> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// Vector-Jacobian products of node `id` for each differentiable input.
fn local_grads<R: Real>(nodes: &[Node<R>], id: usize, g: &[R]) -> Vec<(usize, Vec<R>)> {
    let needs = |i: usize| nodes[i].requires_grad;
    let val = |i: usize| nodes[i].value.data();
    let mut out = Vec::new();
    let mut emit = |i: usize, make: &dyn Fn() -> Vec<R>| {
        if needs(i) {
            out.push((i, make()));
        }
    };
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Identity(a) | Op::AddScalar(a) => emit(*a, &|| g.to_vec()),
        Op::Add(a, b) => {
            emit(*a, &|| g.to_vec());
            emit(*b, &|| g.to_vec());
        }
        Op::Sub(a, b) => {
            emit(*a, &|| g.to_vec());
            emit(*b, &|| g.iter().map(|&v| -v).collect());
        }
        Op::Mul(a, b) => {
            emit(*a, &|| zip_map(g, val(*b), |x, y| x * y));
            emit(*b, &|| zip_map(g, val(*a), |x, y| x * y));
        }
        Op::Scale(a, c) => emit(*a, &|| g.iter().map(|&v| v * *c).collect()),
        Op::Conv {
            input,
            kernel,
            bias,
            geom,
            batch,
        } => {
            let want = [needs(*input), needs(*kernel), bias.is_some_and(needs)];
            let cg = kernels::conv_backward(geom, *batch, val(*input), val(*kernel), g, want);
            push_conv_grads(&mut out, *input, *kernel, *bias, cg);
        }
        Op::ConvTranspose {
            input,
            kernel,
            bias,
            geom,
            batch,
        } => {
            let want = [needs(*input), needs(*kernel), bias.is_some_and(needs)];
            let cg =
                kernels::conv_transpose_backward(geom, *batch, val(*input), val(*kernel), g, want);
            push_conv_grads(&mut out, *input, *kernel, *bias, cg);
        }
        Op::BatchNorm {
            input,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats,
            dims: (b, c, inner),
        } => {
            let (b, c, inner) = (*b, *c, *inner);
            let gam = val(*gamma);
            let mut sum_dy = vec![R::zero(); c];
            let mut sum_dy_xhat = vec![R::zero(); c];
            for bi in 0..b {
                for ci in 0..c {
                    let s = (bi * c + ci) * inner;
                    for k in s..s + inner {
                        sum_dy[ci] += g[k];
                        sum_dy_xhat[ci] += g[k] * xhat[k];
                    }
                }
            }
            if needs(*input) {
                let n = R::of((b * inner) as f64);
                let mut dx = vec![R::zero(); g.len()];
                for bi in 0..b {
                    for ci in 0..c {
                        let s = (bi * c + ci) * inner;
                        let scale = gam[ci] * inv_std[ci];
                        for k in s..s + inner {
                            dx[k] = if *batch_stats {
                                scale * (g[k] - (sum_dy[ci] + xhat[k] * sum_dy_xhat[ci]) / n)
                            } else {
                                scale * g[k]
                            };
                        }
                    }
                }
                out.push((*input, dx));
            }
            if needs(*gamma) {
                out.push((*gamma, sum_dy_xhat));
            }
            if needs(*beta) {
                out.push((*beta, sum_dy));
            }
        }
        Op::Dropout { input, mask } => emit(*input, &|| zip_map(g, mask, |x, m| x * m)),
        Op::Act { input, kind } => {
            let x = val(*input);
            let y = nodes[id].value.data();
            let make = || -> Vec<R> {
                match *kind {
                    Activation::Relu => zip_map(g, x, |gv, xv| {
                        if xv > R::zero() {
                            gv
                        } else {
                            R::zero()
                        }
                    }),
                    Activation::LeakyRelu(slope) => {
                        let s = R::of(slope);
                        zip_map(g, x, |gv, xv| if xv > R::zero() { gv } else { gv * s })
                    }
                    Activation::Tanh => zip_map(g, y, |gv, yv| gv * (R::one() - yv * yv)),
                    Activation::Sigmoid => zip_map(g, y, |gv, yv| gv * yv * (R::one() - yv)),
                }
            };
            emit(*input, &make);
        }
        Op::Concat {
            a,
            b,
            dims: (batch, ca, cb, inner),
        } => {
            let (batch, ca, cb, inner) = (*batch, *ca, *cb, *inner);
            let split = |first: bool| {
                let mut v = Vec::with_capacity(batch * if first { ca } else { cb } * inner);
                for bi in 0..batch {
                    let base = bi * (ca + cb) * inner;
                    if first {
                        v.extend_from_slice(&g[base..base + ca * inner]);
                    } else {
                        v.extend_from_slice(&g[base + ca * inner..base + (ca + cb) * inner]);
                    }
                }
                v
            };
            emit(*a, &|| split(true));
            emit(*b, &|| split(false));
        }
        Op::Abs(a) => emit(*a, &|| {
            zip_map(g, val(*a), |gv, xv| {
                if xv > R::zero() {
                    gv
                } else if xv < R::zero() {
                    -gv
                } else {
                    R::zero()
                }
            })
        }),
        Op::Square(a) => emit(*a, &|| zip_map(g, val(*a), |gv, xv| gv * R::of(2.0) * xv)),
        Op::BceLogits { input, label } => emit(*input, &|| {
            zip_map(g, val(*input), |gv, xv| gv * (sigmoid(xv) - *label))
        }),
        Op::Sum(a) => emit(*a, &|| vec![g[0]; nodes[*a].value.len()]),
        Op::Mean(a) => emit(*a, &|| {
            let n = nodes[*a].value.len();
            vec![g[0] / R::of(n as f64); n]
        }),
    }
    out
}

fn push_conv_grads<R: Real>(
    out: &mut Vec<(usize, Vec<R>)>,
    input: usize,
    kernel: usize,
    bias: Option<usize>,
    cg: kernels::ConvGrads<R>,
) {
    if let Some(dx) = cg.input {
        out.push((input, dx));
    }
    if let Some(dk) = cg.kernel {
        out.push((kernel, dk));
    }
    if let (Some(b), Some(db)) = (bias, cg.bias) {
        out.push((b, db));
    }
}

/// Result of [`Tape::backward`]: one optional gradient per recorded node.
pub struct Gradients<R: Real = f32> {
    grads: Vec<Option<Vec<R>>>,
    shapes: Vec<Vec<usize>>,
    visited: Vec<usize>,
}

impl<R: Real> Gradients<R> {
    /// Gradient of the loss w.r.t. `var`, or `None` if the loss does not
    /// depend on it.
    pub fn get(&self, var: Var<'_, R>) -> Option<Tensor<R>> {
        self.slice(var)
            .map(|g| Tensor::new(&self.shapes[var.id], g.to_vec()).expect("gradient shape"))
    }

    pub fn slice(&self, var: Var<'_, R>) -> Option<&[R]> {
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }

    /// Gradient w.r.t. `var`, zeros when unreached.
    pub fn get_or_zero(&self, var: Var<'_, R>) -> Tensor<R> {
        self.get(var).unwrap_or_else(|| {
            Tensor::zeros(&self.shapes[var.id]).expect("recorded shapes are valid")
        })
    }

    /// Ids of the non-leaf nodes processed, in processing order.
    pub fn visited(&self) -> &[usize] {
        &self.visited
    }
}

fn same_shape(a: &[usize], b: &[usize], what: &str) -> Result<()> {
    if a != b {
        return Err(shape_mismatch(format!("{what}: {a:?} vs {b:?}")));
    }
    Ok(())
}

impl<'t, R: Real> Var<'t, R> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<R> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<R>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    /// Scalar value of a one-element var.
    pub fn item(&self) -> Result<R> {
        self.value().item()
    }

    /// Same value, cut from the graph.
    pub fn detach(self) -> Var<'t, R> {
        let v = (*self.value()).clone();
        self.tape.constant(v)
    }

    fn unary(self, f: impl Fn(R) -> R, op: Op<R>) -> Var<'t, R> {
        let v = self.value().map(f);
        self.tape.push(v, op)
    }

    fn binary(self, other: Var<'t, R>, what: &str, f: impl Fn(R, R) -> R, op: Op<R>) -> Result<Var<'t, R>> {
        let (a, b) = (self.value(), other.value());
        same_shape(a.shape(), b.shape(), what)?;
        let data = zip_map(a.data(), b.data(), f);
        Ok(self.tape.push(Tensor::new(a.shape(), data)?, op))
    }

    #[allow(clippy::should_implement_trait)]
    pub fn add(self, other: Var<'t, R>) -> Result<Var<'t, R>> {
        self.binary(other, "add", |x, y| x + y, Op::Add(self.id, other.id))
    }

    #[allow(clippy::should_implement_trait)]
    pub fn sub(self, other: Var<'t, R>) -> Result<Var<'t, R>> {
        self.binary(other, "sub", |x, y| x - y, Op::Sub(self.id, other.id))
    }

    #[allow(clippy::should_implement_trait)]
    pub fn mul(self, other: Var<'t, R>) -> Result<Var<'t, R>> {
        self.binary(other, "mul", |x, y| x * y, Op::Mul(self.id, other.id))
    }

    pub fn scale(self, c: f64) -> Var<'t, R> {
        let c = R::of(c);
        self.unary(|x| x * c, Op::Scale(self.id, c))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t, R> {
        let c = R::of(c);
        self.unary(|x| x + c, Op::AddScalar(self.id))
    }

    pub fn abs(self) -> Var<'t, R> {
        self.unary(|x| x.abs(), Op::Abs(self.id))
    }

    pub fn square(self) -> Var<'t, R> {
        self.unary(|x| x * x, Op::Square(self.id))
    }

    pub fn activation(self, kind: Activation) -> Var<'t, R> {
        self.unary(|x| kind.apply(x), Op::Act { input: self.id, kind })
    }

    pub fn relu(self) -> Var<'t, R> {
        self.activation(Activation::Relu)
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t, R> {
        self.activation(Activation::LeakyRelu(slope))
    }

    pub fn tanh(self) -> Var<'t, R> {
        self.activation(Activation::Tanh)
    }

    pub fn sigmoid(self) -> Var<'t, R> {
        self.activation(Activation::Sigmoid)
    }

    /// Elementwise `softplus(x) - label * x`, i.e. binary cross-entropy of
    /// `sigmoid(x)` against `label`, in a form that never overflows.
    pub fn bce_with_logits(self, label: f64) -> Var<'t, R> {
        let l = R::of(label);
        self.unary(
            move |x| x.max(R::zero()) - x * l + (-x.abs()).exp().ln_1p(),
            Op::BceLogits {
                input: self.id,
                label: l,
            },
        )
    }

    pub fn sum(self) -> Var<'t, R> {
        let s = self.value().sum();
        self.tape.push(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t, R> {
        let v = self.value();
        let m = v.sum() / R::of(v.len() as f64);
        self.tape.push(Tensor::scalar(m), Op::Mean(self.id))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, R>> {
        let v = self.value().reshape(shape)?;
        Ok(self.tape.push(v, Op::Identity(self.id)))
    }

    /// Concatenate along axis 1.
    pub fn concat_channels(self, other: Var<'t, R>) -> Result<Var<'t, R>> {
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(shape_mismatch(format!(
                "concat_channels: {sa:?} and {sb:?} differ outside axis 1"
            )));
        }
        let (batch, ca, cb) = (sa[0], sa[1], sb[1]);
        let inner: usize = sa[2..].iter().product();
        let mut data = Vec::with_capacity(a.len() + b.len());
        for bi in 0..batch {
            data.extend_from_slice(&a.data()[bi * ca * inner..(bi + 1) * ca * inner]);
            data.extend_from_slice(&b.data()[bi * cb * inner..(bi + 1) * cb * inner]);
        }
        let mut shape = sa.to_vec();
        shape[1] = ca + cb;
        Ok(self.tape.push(
            Tensor::new(&shape, data)?,
            Op::Concat {
                a: self.id,
                b: other.id,
                dims: (batch, ca, cb, inner),
            },
        ))
    }

    /// Inverted dropout: survivors are scaled by `1 / (1 - rate)`. Disabled
    /// or zero-rate dropout is the identity. Masks depend only on `seed`.
    pub fn dropout(self, rate: f64, seed: u64, enabled: bool) -> Result<Var<'t, R>> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidRate(rate));
        }
        if !enabled || rate == 0.0 {
            let v = (*self.value()).clone();
            return Ok(self.tape.push(v, Op::Identity(self.id)));
        }
        let v = self.value();
        let keep = R::of(1.0 / (1.0 - rate));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask: Vec<R> = (0..v.len())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    R::zero()
                } else {
                    keep
                }
            })
            .collect();
        let out = Tensor::new(v.shape(), zip_map(v.data(), &mask, |x, m| x * m))?;
        Ok(self.tape.push(out, Op::Dropout { input: self.id, mask }))
    }

    /// 2D cross-correlation with zero padding. Input `[b, c_in, h, w]`,
    /// kernel `[c_out, c_in, k, k]`.
    pub fn conv2d(
        self,
        kernel: Var<'t, R>,
        bias: Option<Var<'t, R>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'t, R>> {
        let (x, k) = (self.value(), kernel.value());
        let (xs, ks) = (x.shape(), k.shape());
        if xs.len() != 4 || ks.len() != 4 {
            return Err(shape_mismatch(format!("conv2d expects rank-4 input and kernel, got {xs:?} and {ks:?}")));
        }
        let geom = ConvGeom::new(
            xs[1],
            ks[0],
            [1, xs[2], xs[3]],
            [1, ks[2], ks[3]],
            [1, stride, stride],
            [0, pad, pad],
        )?;
        let [_, oh, ow] = geom.output;
        self.conv_common(kernel, bias, geom, xs[0], ks[1], &[xs[0], ks[0], oh, ow])
    }

    /// 3D cross-correlation. Input `[b, c_in, d, h, w]`, kernel
    /// `[c_out, c_in, kd, kh, kw]`.
    pub fn conv3d(
        self,
        kernel: Var<'t, R>,
        bias: Option<Var<'t, R>>,
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<Var<'t, R>> {
        let (x, k) = (self.value(), kernel.value());
        let (xs, ks) = (x.shape(), k.shape());
        if xs.len() != 5 || ks.len() != 5 {
            return Err(shape_mismatch(format!("conv3d expects rank-5 input and kernel, got {xs:?} and {ks:?}")));
        }
        let geom = ConvGeom::new(xs[1], ks[0], [xs[2], xs[3], xs[4]], [ks[2], ks[3], ks[4]], stride, pad)?;
        let [od, oh, ow] = geom.output;
        self.conv_common(kernel, bias, geom, xs[0], ks[1], &[xs[0], ks[0], od, oh, ow])
    }

    fn conv_common(
        self,
        kernel: Var<'t, R>,
        bias: Option<Var<'t, R>>,
        geom: ConvGeom,
        batch: usize,
        kernel_c_in: usize,
        out_shape: &[usize],
    ) -> Result<Var<'t, R>> {
        if kernel_c_in != geom.c_in {
            return Err(shape_mismatch(format!(
                "input has {} channels, kernel expects {kernel_c_in}",
                geom.c_in
            )));
        }
        let bias_val = bias.map(|b| b.value());
        if let Some(b) = &bias_val {
            same_shape(b.shape(), &[geom.c_out], "conv bias")?;
        }
        let data = kernels::conv_forward(
            &geom,
            batch,
            self.value().data(),
            kernel.value().data(),
            bias_val.as_ref().map(|b| b.data()),
        );
        Ok(self.tape.push(
            Tensor::new(out_shape, data)?,
            Op::Conv {
                input: self.id,
                kernel: kernel.id,
                bias: bias.map(|b| b.id),
                geom,
                batch,
            },
        ))
    }

    /// Transposed 2D convolution (the adjoint of [`Var::conv2d`] with the
    /// same kernel). Input `[b, c_in, h, w]`, kernel `[c_in, c_out, k, k]`,
    /// output extent `(h - 1) * stride + k - 2 * pad`.
    pub fn conv_transpose2d(
        self,
        kernel: Var<'t, R>,
        bias: Option<Var<'t, R>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'t, R>> {
        let (x, k) = (self.value(), kernel.value());
        let (xs, ks) = (x.shape(), k.shape());
        if xs.len() != 4 || ks.len() != 4 {
            return Err(shape_mismatch(format!(
                "conv_transpose2d expects rank-4 input and kernel, got {xs:?} and {ks:?}"
            )));
        }
        if xs[1] != ks[0] {
            return Err(shape_mismatch(format!(
                "input has {} channels, kernel expects {}",
                xs[1], ks[0]
            )));
        }
        let geom = ConvGeom::for_transpose(
            xs[1],
            ks[1],
            [1, xs[2], xs[3]],
            [1, ks[2], ks[3]],
            [1, stride, stride],
            [0, pad, pad],
        )?;
        let bias_val = bias.map(|b| b.value());
        if let Some(b) = &bias_val {
            same_shape(b.shape(), &[ks[1]], "conv_transpose2d bias")?;
        }
        let data = kernels::conv_transpose_forward(
            &geom,
            xs[0],
            x.data(),
            k.data(),
            bias_val.as_ref().map(|b| b.data()),
        );
        let [_, oh, ow] = geom.input;
        Ok(self.tape.push(
            Tensor::new(&[xs[0], ks[1], oh, ow], data)?,
            Op::ConvTranspose {
                input: self.id,
                kernel: kernel.id,
                bias: bias.map(|b| b.id),
                geom,
                batch: xs[0],
            },
        ))
    }

    /// Per-channel normalization over batch and spatial axes followed by the
    /// `gamma`/`beta` affine map. In batch-stats mode the moments of the
    /// current batch are returned so the caller can update running averages.
    pub fn batch_norm(
        self,
        gamma: Var<'t, R>,
        beta: Var<'t, R>,
        mode: BnMode<'_, R>,
        eps: f64,
    ) -> Result<(Var<'t, R>, Option<BatchMoments<R>>)> {
        let x = self.value();
        let xs = x.shape();
        if xs.len() < 2 {
            return Err(shape_mismatch(format!("batch_norm needs [b, c, ...], got {xs:?}")));
        }
        let (b, c) = (xs[0], xs[1]);
        let inner: usize = xs[2..].iter().product();
        same_shape(gamma.value().shape(), &[c], "batch_norm gamma")?;
        same_shape(beta.value().shape(), &[c], "batch_norm beta")?;
        let eps = R::of(eps);
        let (mean, var, moments) = match mode {
            BnMode::BatchStats => {
                let (m, v) = kernels::channel_moments(x.data(), b, c, inner);
                let moments = BatchMoments {
                    mean: m.clone(),
                    var: v.clone(),
                    count: b * inner,
                };
                (m, v, Some(moments))
            }
            BnMode::RunningStats { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(shape_mismatch("running statistics do not match channel count"));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<R> = var.iter().map(|&v| R::one() / (v + eps).sqrt()).collect();
        let (gv, bv) = (gamma.value(), beta.value());
        let mut xhat = vec![R::zero(); x.len()];
        let mut y = vec![R::zero(); x.len()];
        for bi in 0..b {
            for ci in 0..c {
                let s = (bi * c + ci) * inner;
                for k in s..s + inner {
                    xhat[k] = (x.data()[k] - mean[ci]) * inv_std[ci];
                    y[k] = gv.data()[ci] * xhat[k] + bv.data()[ci];
                }
            }
        }
        let out = self.tape.push(
            Tensor::new(xs, y)?,
            Op::BatchNorm {
                input: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
                batch_stats: matches!(mode, BnMode::BatchStats),
                dims: (b, c, inner),
            },
        );
        Ok((out, moments))
    }
}
