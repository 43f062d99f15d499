//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] is built eagerly during a forward pass: every op computes its
//! value immediately, checks it is finite, and records what its backward
//! rule needs. [`Tape::backward`] consumes the tape, walks it in reverse
//! recording order (a valid reverse topological order) and writes parameter
//! gradients into a [`ParameterStore`].

pub(crate) mod conv;
mod norm;
pub mod ops;

use crate::error::{Error, Result};
use crate::tensor::{numel, ParameterStore, Real, Tensor};

use self::conv::Conv2dGeom;
pub use self::norm::BatchStats;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    LeakyRelu(Var, T),
    Square(Var),
    Clamp(Var, T, T),
    Sum(Var, Vec<usize>),
    Mean(Var, Vec<usize>, T),
    Reshape(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: Conv2dGeom,
    },
    ConvTranspose2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: Conv2dGeom,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        saved: norm::Saved<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording of one forward pass.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: Vec<(String, Var)>,
}

fn check_finite<T: Real>(op: &'static str, data: &[T]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

/// Output index of each input element when reducing `axes` out of `shape`.
fn reduction_map(shape: &[usize], axes: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut reduce = vec![false; shape.len()];
    for &a in axes {
        if a >= shape.len() {
            return Err(Error::dim(format!("axis {a} out of range for {shape:?}")));
        }
        if reduce[a] {
            return Err(Error::arg(format!("axis {a} listed twice")));
        }
        reduce[a] = true;
    }
    let out_shape: Vec<usize> = shape
        .iter()
        .zip(&reduce)
        .filter(|(_, r)| !**r)
        .map(|(s, _)| *s)
        .collect();
    // stride in the output for each input axis (0 for reduced axes)
    let mut out_strides = vec![0usize; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        if !reduce[i] {
            out_strides[i] = acc;
            acc *= shape[i];
        }
    }
    let n = numel(shape);
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..n {
        map.push(idx.iter().zip(&out_strides).map(|(i, s)| i * s).sum());
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Ok((out_shape, map))
}

fn all_axes(shape: &[usize]) -> Vec<usize> {
    (0..shape.len()).collect()
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Node {
            shape,
            data,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].data
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.data.clone()).expect("node shape is consistent")
    }

    /// Record a constant (no gradient).
    pub fn constant(&mut self, t: &Tensor<T>) -> Result<Var> {
        check_finite("constant", t.data())?;
        Ok(self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false))
    }

    pub fn scalar(&mut self, value: T) -> Result<Var> {
        self.constant(&Tensor::scalar(value))
    }

    /// Record a leaf that takes part in differentiation but is not part of
    /// a parameter store; see [`Tape::gradient_of`].
    pub fn variable(&mut self, t: &Tensor<T>) -> Result<Var> {
        check_finite("variable", t.data())?;
        Ok(self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true))
    }

    /// Record the named parameter from `store`; backward writes its gradient.
    pub fn param(&mut self, store: &ParameterStore<T>, name: &str) -> Result<Var> {
        if let Some((_, v)) = self.params.iter().find(|(n, _)| n == name) {
            return Ok(*v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| Error::arg(format!("unknown parameter {name}")))?;
        let v = self.variable(t)?;
        self.params.push((name.to_string(), v));
        Ok(v)
    }

    /// Record a parameter as a constant, e.g. when evaluating a frozen model.
    pub fn frozen_param(&mut self, store: &ParameterStore<T>, name: &str) -> Result<Var> {
        let t = store
            .get(name)
            .ok_or_else(|| Error::arg(format!("unknown parameter {name}")))?;
        self.constant(t)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: fn(Var, Var) -> Op<T>,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (na, nb) = (self.value(a).len(), self.value(b).len());
        let shape = if sa == sb || nb == 1 {
            sa.to_vec()
        } else if na == 1 {
            sb.to_vec()
        } else {
            return Err(Error::dim(format!("{name}: shapes {sa:?} and {sb:?}")));
        };
        let (da, db) = (self.value(a), self.value(b));
        let data: Vec<T> = (0..numel(&shape))
            .map(|i| f(da[if na == 1 { 0 } else { i }], db[if nb == 1 { 0 } else { i }]))
            .collect();
        check_finite(name, &data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, data, op(a, b), rg))
    }

    fn unary(&mut self, a: Var, name: &'static str, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let data: Vec<T> = self.value(a).iter().map(|&v| f(v)).collect();
        check_finite(name, &data)?;
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(shape, data, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, k: T) -> Result<Var> {
        self.unary(a, "scale", |x| x * k, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: T) -> Result<Var> {
        self.unary(a, "add_scalar", |x| x + k, Op::AddScalar(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "exp", T::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(v) = self.value(a).iter().find(|v| **v <= T::zero()) {
            return Err(Error::Domain(format!("log of nonpositive value {v}")));
        }
        self.unary(a, "log", T::ln, Op::Log(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "tanh", T::tanh, Op::Tanh(a))
    }

    /// `x` for `x > 0`, `slope·x` otherwise. The derivative at exactly zero
    /// is `slope`.
    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Result<Var> {
        self.unary(
            a,
            "leaky_relu",
            |x| if x > T::zero() { x } else { x * slope },
            Op::LeakyRelu(a, slope),
        )
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "square", |x| x * x, Op::Square(a))
    }

    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Result<Var> {
        if lo > hi {
            return Err(Error::arg(format!("clamp bounds {lo} > {hi}")));
        }
        self.unary(a, "clamp", |x| x.max(lo).min(hi), Op::Clamp(a, lo, hi))
    }

    /// Sum over `axes`, removing them from the shape.
    pub fn sum(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let (shape, map) = reduction_map(self.shape(a), axes)?;
        let mut out = vec![T::zero(); numel(&shape)];
        for (v, &o) in self.value(a).iter().zip(&map) {
            out[o] = out[o] + *v;
        }
        check_finite("sum", &out)?;
        let rg = self.rg(a);
        Ok(self.push(shape, out, Op::Sum(a, axes.to_vec()), rg))
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let axes = all_axes(self.shape(a));
        self.sum(a, &axes)
    }

    pub fn mean(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let (shape, map) = reduction_map(self.shape(a), axes)?;
        let count = numel(self.shape(a)) / numel(&shape).max(1);
        if count == 0 {
            return Err(Error::arg("mean over an empty axis"));
        }
        let inv = T::one() / T::c(count as f64);
        let mut out = vec![T::zero(); numel(&shape)];
        for (v, &o) in self.value(a).iter().zip(&map) {
            out[o] = out[o] + *v;
        }
        out.iter_mut().for_each(|v| *v = *v * inv);
        check_finite("mean", &out)?;
        let rg = self.rg(a);
        Ok(self.push(shape, out, Op::Mean(a, axes.to_vec(), inv), rg))
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let axes = all_axes(self.shape(a));
        self.mean(a, &axes)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(a).len() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} to {:?}",
                self.shape(a),
                shape
            )));
        }
        let data = self.value(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(shape.to_vec(), data, Op::Reshape(a), rg))
    }

    fn check_bias(&self, bias: Option<Var>, channels: usize, name: &str) -> Result<()> {
        if let Some(b) = bias {
            if self.shape(b) != [channels] {
                return Err(Error::dim(format!(
                    "{name} bias shape {:?}, expected [{channels}]",
                    self.shape(b)
                )));
            }
        }
        Ok(())
    }

    /// Cross-correlation of `input [B,Cin,H,W]` with `weight [Cout,Cin,kH,kW]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let geom = conv::conv2d_geom(self.shape(input), self.shape(weight), stride, padding)?;
        self.check_bias(bias, geom.c_dst, "conv2d")?;
        let data = conv::conv2d_forward(
            &geom,
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
        );
        check_finite("conv2d", &data)?;
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            vec![geom.batch, geom.c_dst, geom.oh, geom.ow],
            data,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            rg,
        ))
    }

    /// Transposed convolution of `input [B,Cin,H,W]` with
    /// `weight [Cin,Cout,kH,kW]`; the adjoint of [`Tape::conv2d`].
    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let geom =
            conv::conv_transpose2d_geom(self.shape(input), self.shape(weight), stride, padding)?;
        self.check_bias(bias, geom.c_src, "conv_transpose2d")?;
        let data = conv::conv_transpose2d_forward(
            &geom,
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
        );
        check_finite("conv_transpose2d", &data)?;
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            vec![geom.batch, geom.c_src, geom.h, geom.w],
            data,
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                geom,
            },
            rg,
        ))
    }

    /// Per-channel batch normalization of `input [B,C,H,W]` using the batch
    /// statistics. Returns the output and the statistics for running-average
    /// updates.
    pub fn batch_norm_train(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, BatchStats<T>)> {
        norm::check_shapes(self.shape(input), self.shape(gamma), self.shape(beta))?;
        let (data, saved, stats) = norm::forward_train(
            self.shape(input),
            self.value(input),
            self.value(gamma),
            self.value(beta),
            eps,
        );
        check_finite("batch_norm", &data)?;
        let rg = self.rg(input) || self.rg(gamma) || self.rg(beta);
        let shape = self.shape(input).to_vec();
        let v = self.push(
            shape,
            data,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                saved,
            },
            rg,
        );
        Ok((v, stats))
    }

    /// Batch normalization with fixed (running) statistics; per-item.
    pub fn batch_norm_eval(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Result<Var> {
        norm::check_shapes(self.shape(input), self.shape(gamma), self.shape(beta))?;
        let c = self.shape(input)[1];
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::dim("running statistics length mismatch"));
        }
        let (data, saved) = norm::forward_eval(
            self.shape(input),
            self.value(input),
            self.value(gamma),
            self.value(beta),
            running_mean,
            running_var,
            eps,
        );
        check_finite("batch_norm", &data)?;
        let rg = self.rg(input) || self.rg(gamma) || self.rg(beta);
        let shape = self.shape(input).to_vec();
        Ok(self.push(
            shape,
            data,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                saved,
            },
            rg,
        ))
    }

    /// Gradients of the scalar `loss` with respect to every node.
    fn gradients(&self, loss: Var) -> Result<Vec<Option<Vec<T>>>> {
        if self.value(loss).len() != 1 {
            return Err(Error::arg(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(grads)
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let mut acc = |v: Var, contribution: Vec<T>| {
            if !self.rg(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (a, b) in existing.iter_mut().zip(&contribution) {
                        *a = *a + *b;
                    }
                }
                slot @ None => *slot = Some(contribution),
            }
        };
        // Sum a same-shape gradient down to a broadcast scalar where needed.
        let fit = |v: Var, full: Vec<T>| -> Vec<T> {
            if self.value(v).len() == 1 && full.len() != 1 {
                vec![full.iter().copied().sum()]
            } else {
                full
            }
        };
        let at = |v: Var, i: usize| {
            let d = self.value(v);
            if d.len() == 1 {
                d[0]
            } else {
                d[i]
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, fit(*a, g.to_vec()));
                acc(*b, fit(*b, g.to_vec()));
            }
            Op::Sub(a, b) => {
                acc(*a, fit(*a, g.to_vec()));
                acc(*b, fit(*b, g.iter().map(|v| -*v).collect()));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let ga = g.iter().enumerate().map(|(i, v)| *v * at(*b, i)).collect();
                    acc(*a, fit(*a, ga));
                }
                if self.rg(*b) {
                    let gb = g.iter().enumerate().map(|(i, v)| *v * at(*a, i)).collect();
                    acc(*b, fit(*b, gb));
                }
            }
            Op::Scale(a, k) => acc(*a, g.iter().map(|v| *v * *k).collect()),
            Op::AddScalar(a) | Op::Reshape(a) => acc(*a, g.to_vec()),
            Op::Exp(a) => acc(*a, g.iter().zip(&node.data).map(|(g, y)| *g * *y).collect()),
            Op::Log(a) => acc(
                *a,
                g.iter().zip(self.value(*a)).map(|(g, x)| *g / *x).collect(),
            ),
            Op::Tanh(a) => acc(
                *a,
                g.iter()
                    .zip(&node.data)
                    .map(|(g, y)| *g * (T::one() - *y * *y))
                    .collect(),
            ),
            Op::LeakyRelu(a, slope) => acc(
                *a,
                g.iter()
                    .zip(self.value(*a))
                    .map(|(g, x)| if *x > T::zero() { *g } else { *g * *slope })
                    .collect(),
            ),
            Op::Square(a) => acc(
                *a,
                g.iter()
                    .zip(self.value(*a))
                    .map(|(g, x)| *g * (*x + *x))
                    .collect(),
            ),
            Op::Clamp(a, lo, hi) => acc(
                *a,
                g.iter()
                    .zip(self.value(*a))
                    .map(|(g, x)| if *x >= *lo && *x <= *hi { *g } else { T::zero() })
                    .collect(),
            ),
            Op::Sum(a, axes) | Op::Mean(a, axes, _) => {
                let k = match &node.op {
                    Op::Mean(_, _, inv) => *inv,
                    _ => T::one(),
                };
                let (_, map) =
                    reduction_map(self.shape(*a), axes).expect("validated in forward");
                acc(*a, map.iter().map(|&o| g[o] * k).collect());
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                if self.rg(*input) {
                    acc(
                        *input,
                        conv::conv2d_backward_input(geom, self.value(*weight), g),
                    );
                }
                if self.rg(*weight) {
                    acc(
                        *weight,
                        conv::conv2d_backward_weight(geom, self.value(*input), g),
                    );
                }
                if let Some(b) = bias {
                    if self.rg(*b) {
                        acc(*b, conv::conv2d_backward_bias(geom, g));
                    }
                }
            }
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                geom,
            } => {
                if self.rg(*input) {
                    acc(
                        *input,
                        conv::conv_transpose2d_backward_input(geom, self.value(*weight), g),
                    );
                }
                if self.rg(*weight) {
                    acc(
                        *weight,
                        conv::conv_transpose2d_backward_weight(geom, self.value(*input), g),
                    );
                }
                if let Some(b) = bias {
                    if self.rg(*b) {
                        acc(*b, conv::conv_transpose2d_backward_bias(geom, g));
                    }
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                saved,
            } => {
                let (dx, dgamma, dbeta) =
                    norm::backward(self.shape(*input), g, self.value(*gamma), saved);
                acc(*input, dx);
                acc(*gamma, dgamma);
                acc(*beta, dbeta);
            }
        }
    }

    /// Reverse pass from the scalar `loss`. Every parameter in `store` has
    /// its gradient reset; parameters recorded on this tape receive
    /// `∂loss/∂param`, all others stay zero.
    pub fn backward(self, loss: Var, store: &mut ParameterStore<T>) -> Result<()> {
        let mut grads = self.gradients(loss)?;
        store.zero_grads();
        for (name, v) in &self.params {
            if let Some(g) = grads[v.0].take() {
                check_finite("backward", &g)?;
                store
                    .get_mut(name)
                    .expect("recorded from this store")
                    .accumulate_grad(&g);
            }
        }
        Ok(())
    }

    /// Gradient of `loss` with respect to an arbitrary recorded value
    /// (zeros when unreachable).
    pub fn gradient_of(&self, loss: Var, wrt: Var) -> Result<Tensor<T>> {
        let mut grads = self.gradients(loss)?;
        let shape = self.shape(wrt).to_vec();
        let data = grads[wrt.0]
            .take()
            .unwrap_or_else(|| vec![T::zero(); numel(&shape)]);
        Tensor::new(shape, data)
    }
}
