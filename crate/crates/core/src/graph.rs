//! Reverse-mode differentiation over the fixed operation menu.
//!
//! A [`Graph`] is a tape: every method evaluates one operation eagerly and
//! appends a node recording what the backward pass needs. Nodes only refer
//! to earlier nodes, so reverse insertion order is a valid topological
//! order.

use rand::Rng;

use crate::error::{Error, Result};
use crate::ops::{self, Activation, ConvGeom, NormCache, RunningStats};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T: Scalar> {
    Leaf,
    Param { store: u64, index: usize },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    ConvTranspose2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    AvgPool2(Var),
    Upsample2(Var),
    BatchNorm { x: Var, gain: Var, shift: Var, cache: NormCache<T>, training: bool },
    Linear { x: Var, w: Var, b: Option<Var> },
    LayerNorm { x: Var, gain: Var, shift: Var, cache: NormCache<T> },
    Softmax(Var),
    Act(Var, Activation),
    Dropout { x: Var, mask: Vec<T> },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Concat { inputs: Vec<Var> },
    TileSpatial { emb: Var, plane: usize },
    Patchify { x: Var, patch: usize },
    PrependToken { x: Var, token: Var },
    AddBroadcast { x: Var, pos: Var },
    SelectToken { x: Var, index: usize },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<T> },
    Reshape(Var),
    Sum(Var),
    L1Loss(Var, Var),
    BceWithLogits { x: Var, target: T },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Eagerly evaluated computation tape.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    /// Tags of stores whose parameters currently enter as constants.
    frozen: Vec<u64>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients from one backward pass, indexed by node.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            frozen: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf input whose gradient is tracked.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable parameter from `store`; gradients flow back to it through
    /// [`ParamStore::accumulate_grads`].
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if self.frozen.contains(&store.tag()) {
            return self.frozen_param(store, id);
        }
        self.nodes.push(Node {
            value: store.value(id).clone(),
            op: Op::Param {
                store: store.tag(),
                index: id.index(),
            },
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Parameter value used as a constant: no gradient is computed for it.
    pub fn frozen_param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.constant(store.value(id).clone())
    }

    /// Run `f` with every [`Graph::param`] call on `store` treated as
    /// [`Graph::frozen_param`]: gradients still reach other inputs, but no
    /// weight gradient is computed for `store`.
    pub fn with_frozen<R>(&mut self, store: &ParamStore<T>, f: impl FnOnce(&mut Self) -> R) -> R {
        self.frozen.push(store.tag());
        let out = f(self);
        self.frozen.pop();
        out
    }

    /// Copy of `x` cut off from the tape.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    pub(crate) fn param_nodes(&self, store_tag: u64) -> impl Iterator<Item = (Var, usize)> + '_ {
        self.nodes.iter().enumerate().filter_map(move |(i, n)| match n.op {
            Op::Param { store, index } if store == store_tag => Some((Var(i), index)),
            _ => None,
        })
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let geom = ops::conv2d_geom(self.value(x), self.value(w), stride, pad)?;
        let out = ops::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::Conv2d { x, w, b, geom }, &inputs))
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let geom = ops::conv_transpose2d_geom(self.value(x), self.value(w), stride, pad)?;
        let out = ops::conv_transpose2d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::ConvTranspose2d { x, w, b, geom }, &inputs))
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let out = ops::avg_pool2(self.value(x))?;
        Ok(self.push(out, Op::AvgPool2(x), &[x]))
    }

    pub fn upsample_nearest2(&mut self, x: Var) -> Result<Var> {
        let out = ops::upsample_nearest2(self.value(x))?;
        Ok(self.push(out, Op::Upsample2(x), &[x]))
    }

    pub fn batch_norm2d(
        &mut self,
        x: Var,
        gain: Var,
        shift: Var,
        stats: &mut RunningStats<T>,
        training: bool,
    ) -> Result<Var> {
        let (out, cache) = ops::batch_norm2d_cached(self.value(x), self.value(gain), self.value(shift), stats, training)?;
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gain,
                shift,
                cache,
                training,
            },
            &[x, gain, shift],
        ))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let out = ops::linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::Linear { x, w, b }, &inputs))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var) -> Result<Var> {
        let (out, cache) = ops::layer_norm_cached(self.value(x), self.value(gain), self.value(shift))?;
        Ok(self.push(out, Op::LayerNorm { x, gain, shift, cache }, &[x, gain, shift]))
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let out = ops::softmax(self.value(x));
        self.push(out, Op::Softmax(x), &[x])
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Var {
        let out = self.value(x).map(|v| act.apply(v));
        self.push(out, Op::Act(x, act), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.activation(x, Activation::LeakyRelu(slope))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Tanh)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Gelu)
    }

    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, training: bool, rng: &mut R) -> Result<Var> {
        ops::check_dropout_rate(rate)?;
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let mask = ops::dropout_mask::<T, R>(self.value(x).len(), rate, rng);
        let xv = self.value(x);
        let out = Tensor::from_parts(
            xv.shape().to_vec(),
            xv.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect(),
        );
        Ok(self.push(out, Op::Dropout { x, mask }, &[x]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let out = Tensor::from_parts(
            av.shape().to_vec(),
            av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect(),
        );
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let out = Tensor::from_parts(
            av.shape().to_vec(),
            av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect(),
        );
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale(x, c), &[x])
    }

    /// Concatenate along axis 1. All inputs must agree on every other axis.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = self.value(*inputs.first().ok_or_else(|| Error::arg("concat", "no inputs"))?);
        let (n, rest): (usize, Vec<usize>) = (first.shape()[0], first.shape()[2..].to_vec());
        let mut channels = 0;
        for &v in inputs {
            let s = self.value(v).shape();
            if s.len() < 2 || s[0] != n || s[2..] != rest[..] {
                let axis = if s.first() != Some(&n) { 0 } else { 2 };
                return Err(Error::shape(
                    "concat",
                    format!("axis {axis} disagrees: {:?} vs {:?}", first.shape(), s),
                ));
            }
            channels += s[1];
        }
        let inner: usize = rest.iter().product();
        let mut out = Vec::with_capacity(n * channels * inner);
        for b in 0..n {
            for &v in inputs {
                let t = self.value(v);
                let block = t.shape()[1] * inner;
                out.extend_from_slice(&t.data()[b * block..(b + 1) * block]);
            }
        }
        let mut shape = vec![n, channels];
        shape.extend(rest);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                inputs: inputs.to_vec(),
            },
            inputs,
        ))
    }

    /// Replicate an `N×E` embedding at every position of an `h×w` grid,
    /// giving `N×E×h×w`.
    pub fn tile_spatial(&mut self, emb: Var, h: usize, w: usize) -> Result<Var> {
        let e = self.value(emb);
        e.expect_ndim("tile_spatial", 2)?;
        let (n, d) = (e.shape()[0], e.shape()[1]);
        let plane = h * w;
        let mut out = Vec::with_capacity(n * d * plane);
        for &v in e.data() {
            out.extend(std::iter::repeat(v).take(plane));
        }
        Ok(self.push(
            Tensor::from_parts(vec![n, d, h, w], out),
            Op::TileSpatial { emb, plane },
            &[emb],
        ))
    }

    pub fn patchify(&mut self, x: Var, patch: usize) -> Result<Var> {
        let out = ops::patchify(self.value(x), patch)?;
        Ok(self.push(out, Op::Patchify { x, patch }, &[x]))
    }

    /// Prepend a learned `1×1×D` (or `D`) token to every `N×T×D` sequence.
    pub fn prepend_token(&mut self, x: Var, token: Var) -> Result<Var> {
        let xv = self.value(x);
        xv.expect_ndim("prepend_token", 3)?;
        let (n, t, d) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let tok = self.value(token);
        if tok.len() != d {
            return Err(Error::shape(
                "prepend_token",
                format!("token {:?} does not match width {d}", tok.shape()),
            ));
        }
        let mut out = Vec::with_capacity(n * (t + 1) * d);
        for b in 0..n {
            out.extend_from_slice(tok.data());
            out.extend_from_slice(&xv.data()[b * t * d..(b + 1) * t * d]);
        }
        Ok(self.push(
            Tensor::from_parts(vec![n, t + 1, d], out),
            Op::PrependToken { x, token },
            &[x, token],
        ))
    }

    /// `x + pos` where `pos` matches `x` without its leading batch axis.
    pub fn add_broadcast(&mut self, x: Var, pos: Var) -> Result<Var> {
        let (xv, pv) = (self.value(x), self.value(pos));
        let block = xv.len() / xv.shape()[0];
        if pv.len() != block {
            return Err(Error::shape(
                "add_broadcast",
                format!("{:?} cannot broadcast over {:?}", pv.shape(), xv.shape()),
            ));
        }
        let out = Tensor::from_parts(
            xv.shape().to_vec(),
            xv.data()
                .iter()
                .enumerate()
                .map(|(i, &v)| v + pv.data()[i % block])
                .collect(),
        );
        Ok(self.push(out, Op::AddBroadcast { x, pos }, &[x, pos]))
    }

    /// Token `index` of every `N×T×D` sequence, as `N×D`.
    pub fn select_token(&mut self, x: Var, index: usize) -> Result<Var> {
        let xv = self.value(x);
        xv.expect_ndim("select_token", 3)?;
        let (n, t, d) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        if index >= t {
            return Err(Error::shape("select_token", format!("token {index} of {t}")));
        }
        let mut out = Vec::with_capacity(n * d);
        for b in 0..n {
            out.extend_from_slice(&xv.data()[(b * t + index) * d..(b * t + index + 1) * d]);
        }
        Ok(self.push(
            Tensor::from_parts(vec![n, d], out),
            Op::SelectToken { x, index },
            &[x],
        ))
    }

    /// Scaled dot-product attention over `heads` heads. `q`, `k`, `v` are
    /// `N×T×D`; the result is the concatenation of per-head outputs.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        self.same_shape("attention", q, k)?;
        self.same_shape("attention", q, v)?;
        let qv = self.value(q);
        qv.expect_ndim("attention", 3)?;
        let (n, t, d) = (qv.shape()[0], qv.shape()[1], qv.shape()[2]);
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("model width {d} is not divisible by {heads} heads")));
        }
        let dh = d / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let (kd, vd) = (self.value(k).data(), self.value(v).data());
        let mut probs = vec![T::zero(); n * heads * t * t];
        let mut out = vec![T::zero(); n * t * d];
        for b in 0..n {
            for h in 0..heads {
                let off = b * t * d + h * dh;
                let p = &mut probs[(b * heads + h) * t * t..(b * heads + h + 1) * t * t];
                T::gemm(t, dh, t, scale, &qv.data()[off..], (d, 1), &kd[off..], (1, d), T::zero(), p, (t, 1));
                for row in p.chunks_mut(t) {
                    ops::softmax_in_place(row);
                }
                T::gemm(t, t, dh, T::one(), p, (t, 1), &vd[off..], (d, 1), T::zero(), &mut out[off..], (d, 1));
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![n, t, d], out),
            Op::Attention { q, k, v, heads, probs },
            &[q, k, v],
        ))
    }

    /// Attention probabilities (`N×heads×T×T`, row-major) recorded by an
    /// [`Graph::attention`] node.
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), &[x])
    }

    /// Mean absolute error over all elements.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape("l1_loss", pred, target)?;
        let (p, t) = (self.value(pred), self.value(target));
        let total: T = p.data().iter().zip(t.data()).map(|(&a, &b)| (a - b).abs()).sum();
        let out = Tensor::scalar(total / T::from_f64(p.len() as f64));
        Ok(self.push(out, Op::L1Loss(pred, target), &[pred, target]))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against a constant
    /// label, in the overflow-free form `max(x,0) − x·y + ln(1 + e^{−|x|})`.
    pub fn bce_with_logits(&mut self, logits: Var, target: f64) -> Var {
        let x = self.value(logits);
        let y = T::from_f64(target);
        let total: T = x
            .data()
            .iter()
            .map(|&v| v.max(T::zero()) - v * y + (-v.abs()).exp().ln_1p())
            .sum();
        let out = Tensor::scalar(total / T::from_f64(x.len() as f64));
        self.push(out, Op::BceWithLogits { x: logits, target: y }, &[logits])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Param { .. } => {}
            Op::Conv2d { x, w, b, geom } => {
                let (dx, dw, db) = ops::conv2d_backward(self.value(*x), self.value(*w), g, geom, self.needs(*x), self.needs(*w));
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let (dx, dw, db) =
                    ops::conv_transpose2d_backward(self.value(*x), self.value(*w), g, geom, self.needs(*x), self.needs(*w));
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::AvgPool2(x) => {
                let dx = ops::avg_pool2_backward(g, self.value(*x).shape());
                self.accumulate(grads, *x, dx);
            }
            Op::Upsample2(x) => {
                let dx = ops::upsample_nearest2_backward(g, self.value(*x).shape());
                self.accumulate(grads, *x, dx);
            }
            Op::BatchNorm { x, gain, shift, cache, training } => {
                let shape = self.value(*x).shape();
                let (dx, dg, ds) = if *training {
                    ops::batch_norm2d_backward(cache, self.value(*gain), shape, g)
                } else {
                    ops::batch_norm2d_eval_backward(cache, self.value(*gain), shape, g)
                };
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gain, dg);
                self.accumulate(grads, *shift, ds);
            }
            Op::Linear { x, w, b } => {
                let (dx, dw, db) = ops::linear_backward(self.value(*x), self.value(*w), g, self.needs(*x), self.needs(*w));
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::LayerNorm { x, gain, shift, cache } => {
                let (dx, dg, ds) = ops::layer_norm_backward(cache, self.value(*gain), g);
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gain, dg);
                self.accumulate(grads, *shift, ds);
            }
            Op::Softmax(x) => {
                let d = *node.value.shape().last().unwrap();
                let dx = ops::softmax_backward(node.value.data(), g, d);
                self.accumulate(grads, *x, dx);
            }
            Op::Act(x, act) => {
                let xv = self.value(*x).data();
                let dx = xv
                    .iter()
                    .zip(node.value.data())
                    .zip(g)
                    .map(|((&xi, &yi), &gi)| gi * act.derivative(xi, yi))
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Dropout { x, mask } => {
                let dx = g.iter().zip(mask).map(|(&a, &m)| a * m).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, g.iter().zip(bv).map(|(&x, &y)| x * y).collect());
                self.accumulate(grads, *b, g.iter().zip(av).map(|(&x, &y)| x * y).collect());
            }
            Op::Scale(x, c) => {
                self.accumulate(grads, *x, g.iter().map(|&v| v * *c).collect());
            }
            Op::Concat { inputs } => {
                let n = node.value.shape()[0];
                let inner: usize = node.value.shape()[2..].iter().product();
                let total = node.value.shape()[1] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let block = self.value(v).shape()[1] * inner;
                    if self.needs(v) {
                        let mut dv = Vec::with_capacity(n * block);
                        for b in 0..n {
                            dv.extend_from_slice(&g[b * total + offset..b * total + offset + block]);
                        }
                        self.accumulate(grads, v, dv);
                    }
                    offset += block;
                }
            }
            Op::TileSpatial { emb, plane } => {
                let de = g.chunks(*plane).map(|c| c.iter().copied().sum()).collect();
                self.accumulate(grads, *emb, de);
            }
            Op::Patchify { x, patch } => {
                let s = self.value(*x).shape();
                let mut dx = vec![T::zero(); self.value(*x).len()];
                ops::patch_copy(g, &mut dx, [s[0], s[1], s[2], s[3]], *patch, false);
                self.accumulate(grads, *x, dx);
            }
            Op::PrependToken { x, token } => {
                let s = node.value.shape();
                let (n, t1, d) = (s[0], s[1], s[2]);
                let mut dt = vec![T::zero(); d];
                let mut dx = Vec::with_capacity(n * (t1 - 1) * d);
                for b in 0..n {
                    let seq = &g[b * t1 * d..(b + 1) * t1 * d];
                    dt.iter_mut().zip(&seq[..d]).for_each(|(a, &v)| *a += v);
                    dx.extend_from_slice(&seq[d..]);
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *token, dt);
            }
            Op::AddBroadcast { x, pos } => {
                let block = self.value(*pos).len();
                let mut dp = vec![T::zero(); block];
                for chunk in g.chunks(block) {
                    dp.iter_mut().zip(chunk).for_each(|(a, &v)| *a += v);
                }
                self.accumulate(grads, *x, g.to_vec());
                self.accumulate(grads, *pos, dp);
            }
            Op::SelectToken { x, index } => {
                let s = self.value(*x).shape();
                let (n, t, d) = (s[0], s[1], s[2]);
                let mut dx = vec![T::zero(); n * t * d];
                for b in 0..n {
                    dx[(b * t + index) * d..(b * t + index + 1) * d].copy_from_slice(&g[b * d..(b + 1) * d]);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Attention { q, k, v, heads, probs } => {
                let s = node.value.shape();
                let (n, t, d) = (s[0], s[1], s[2]);
                let dh = d / heads;
                let scale = T::from_f64(1.0 / (dh as f64).sqrt());
                let (qd, kd, vd) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let mut dq = vec![T::zero(); n * t * d];
                let mut dk = vec![T::zero(); n * t * d];
                let mut dv = vec![T::zero(); n * t * d];
                let mut dp = vec![T::zero(); t * t];
                for b in 0..n {
                    for h in 0..*heads {
                        let off = b * t * d + h * dh;
                        let p = &probs[(b * heads + h) * t * t..(b * heads + h + 1) * t * t];
                        // dV = Pᵀ dO ; dP = dO Vᵀ
                        T::gemm(t, t, dh, T::one(), p, (1, t), &g[off..], (d, 1), T::zero(), &mut dv[off..], (d, 1));
                        T::gemm(t, dh, t, T::one(), &g[off..], (d, 1), &vd[off..], (1, d), T::zero(), &mut dp, (t, 1));
                        let ds = ops::softmax_backward(p, &dp, t);
                        // dQ = dS K · scale ; dK = dSᵀ Q · scale
                        T::gemm(t, t, dh, scale, &ds, (t, 1), &kd[off..], (d, 1), T::zero(), &mut dq[off..], (d, 1));
                        T::gemm(t, t, dh, scale, &ds, (1, t), &qd[off..], (d, 1), T::zero(), &mut dk[off..], (d, 1));
                    }
                }
                self.accumulate(grads, *q, dq);
                self.accumulate(grads, *k, dk);
                self.accumulate(grads, *v, dv);
            }
            Op::Reshape(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::Sum(x) => {
                let dx = vec![g[0]; self.value(*x).len()];
                self.accumulate(grads, *x, dx);
            }
            Op::L1Loss(p, t) => {
                let (pv, tv) = (self.value(*p).data(), self.value(*t).data());
                let k = g[0] / T::from_f64(pv.len() as f64);
                let sign = |d: T| {
                    if d > T::zero() {
                        k
                    } else if d < T::zero() {
                        -k
                    } else {
                        T::zero()
                    }
                };
                let dp: Vec<T> = pv.iter().zip(tv).map(|(&a, &b)| sign(a - b)).collect();
                if self.needs(*t) {
                    self.accumulate(grads, *t, dp.iter().map(|&v| -v).collect());
                }
                self.accumulate(grads, *p, dp);
            }
            Op::BceWithLogits { x, target } => {
                let xv = self.value(*x).data();
                let k = g[0] / T::from_f64(xv.len() as f64);
                let dx = xv
                    .iter()
                    .map(|&v| (T::one() / (T::one() + (-v).exp()) - *target) * k)
                    .collect();
                self.accumulate(grads, *x, dx);
            }
        }
    }
}
