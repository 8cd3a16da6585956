//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Tape`] records every forward op in execution order; [`Tape::backward`]
//! replays it in reverse, visiting each node exactly once (insertion order is
//! already topological) and accumulating parameter gradients into the store.
//! Gradients accumulate across repeated backward calls; reset them with
//! [`crate::params::ParamStore::zero_grads`].
//!
//! Every recorded forward result is checked for NaN/Inf; violations surface
//! as [`Error::NonFinite`] naming the innermost scope label, which is how
//! training diagnoses the first offending layer.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{BufferId, ParamId, ParamStore};
use crate::tensor::ops::{self, CellPick, Conv2dMeta};
use crate::tensor::{Element, Shape, Tensor};
use crate::wavelet;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

enum Op<T> {
    Const,
    Param(ParamId),
    Conv2d { x: NodeId, w: NodeId, bias: Option<NodeId>, meta: Conv2dMeta },
    ConvTranspose2d { x: NodeId, w: NodeId, stride: usize, groups: usize },
    BatchNorm { x: NodeId, gamma: NodeId, beta: NodeId, mean: Tensor<T>, var: Tensor<T>, eps: f64, train: bool },
    GroupNorm { x: NodeId, gamma: NodeId, beta: NodeId, groups: usize, mean: Tensor<T>, var: Tensor<T>, eps: f64 },
    Relu { x: NodeId },
    Relu6 { x: NodeId },
    Sigmoid { x: NodeId },
    Silu { x: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Div { a: NodeId, b: NodeId },
    Min2 { a: NodeId, b: NodeId },
    Max2 { a: NodeId, b: NodeId },
    Affine { x: NodeId, a: f64 },
    ScaleChannels { x: NodeId, g: NodeId },
    MulScalar { x: NodeId, s: NodeId },
    Concat { parts: Vec<NodeId> },
    SliceChannels { x: NodeId, from: usize },
    GlobalAvgPool { x: NodeId },
    Dropout { x: NodeId, mask: Vec<bool>, scale: f64 },
    HaarAnalysis { x: NodeId, padded: (usize, usize) },
    HaarSynthesis { x: NodeId },
    GatherCells { x: NodeId, picks: Vec<CellPick> },
    SumAll { x: NodeId },
    MeanAll { x: NodeId },
    BceWithLogits { x: NodeId, target: Tensor<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    scope: Vec<String>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), scope: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn push_scope(&mut self, name: &str) {
        self.scope.push(name.to_string());
    }

    pub fn pop_scope(&mut self) {
        self.scope.pop();
    }

    pub fn scope_path(&self) -> String {
        self.scope.join(".")
    }

    fn push(&mut self, op_name: &'static str, op: Op<T>, value: Tensor<T>) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name, scope: self.scope_path() });
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, op });
        Ok(id)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<NodeId> {
        self.push("constant", Op::Const, value)
    }

    pub fn param_node(&mut self, id: ParamId, value: Tensor<T>) -> Result<NodeId> {
        self.push("param", Op::Param(id), value)
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        meta: Conv2dMeta,
    ) -> Result<NodeId> {
        let y = ops::conv2d(
            self.value(x),
            self.value(w),
            bias.map(|b| self.value(b)),
            &meta,
        )?;
        self.push("conv2d", Op::Conv2d { x, w, bias, meta }, y)
    }

    pub fn conv_transpose2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        stride: usize,
        groups: usize,
    ) -> Result<NodeId> {
        let y = ops::conv_transpose2d(self.value(x), self.value(w), stride, groups)?;
        self.push("conv_transpose2d", Op::ConvTranspose2d { x, w, stride, groups }, y)
    }

    /// Train-mode batch norm: normalizes by batch statistics. Returns the
    /// output plus the batch (mean, var) so the caller can fold them into
    /// running buffers.
    pub fn batch_norm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<(NodeId, Tensor<T>, Tensor<T>)> {
        let (mean, var) = ops::bn_stats(self.value(x));
        let y = ops::bn_apply(self.value(x), &mean, &var, self.value(gamma), self.value(beta), eps)?;
        let id = self.push(
            "batch_norm",
            Op::BatchNorm { x, gamma, beta, mean: mean.clone(), var: var.clone(), eps, train: true },
            y,
        )?;
        Ok((id, mean, var))
    }

    /// Eval-mode batch norm: normalizes by the given running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Tensor<T>,
        var: Tensor<T>,
        eps: f64,
    ) -> Result<NodeId> {
        let y = ops::bn_apply(self.value(x), &mean, &var, self.value(gamma), self.value(beta), eps)?;
        self.push("batch_norm", Op::BatchNorm { x, gamma, beta, mean, var, eps, train: false }, y)
    }

    pub fn group_norm(
        &mut self,
        x: NodeId,
        groups: usize,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let (y, mean, var) =
            ops::group_norm(self.value(x), groups, self.value(gamma), self.value(beta), eps)?;
        self.push("group_norm", Op::GroupNorm { x, gamma, beta, groups, mean, var, eps }, y)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let y = ops::relu(self.value(x));
        self.push("relu", Op::Relu { x }, y)
    }

    pub fn relu6(&mut self, x: NodeId) -> Result<NodeId> {
        let y = ops::relu6(self.value(x));
        self.push("relu6", Op::Relu6 { x }, y)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let y = ops::sigmoid(self.value(x));
        self.push("sigmoid", Op::Sigmoid { x }, y)
    }

    pub fn silu(&mut self, x: NodeId) -> Result<NodeId> {
        let y = ops::silu(self.value(x));
        self.push("silu", Op::Silu { x }, y)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<NodeId> {
        ops::check_same_shape(name, self.value(a), self.value(b))?;
        let y = ops::zip_map(self.value(a), self.value(b), f);
        self.push(name, op, y)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("elementwise_add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("elementwise_sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("elementwise_mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("elementwise_div", a, b, |x, y| x / y, Op::Div { a, b })
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn min2(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("elementwise_min", a, b, |x, y| if y < x { y } else { x }, Op::Min2 { a, b })
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn max2(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("elementwise_max", a, b, |x, y| if y > x { y } else { x }, Op::Max2 { a, b })
    }

    /// y = a*x + b with scalar constants.
    pub fn affine(&mut self, x: NodeId, a: f64, b: f64) -> Result<NodeId> {
        let y = ops::affine(self.value(x), a, b);
        self.push("affine", Op::Affine { x, a }, y)
    }

    /// Channel-wise scaling: x (B,C,H,W) * g (B,C,1,1).
    pub fn scale_channels(&mut self, x: NodeId, g: NodeId) -> Result<NodeId> {
        let y = ops::scale_channels(self.value(x), self.value(g))?;
        self.push("scale_channels", Op::ScaleChannels { x, g }, y)
    }

    /// Multiply by a scalar (1x1x1x1) node, broadcast over all elements.
    pub fn mul_scalar(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        if self.value(s).shape() != Shape::scalar() {
            return Err(Error::shape("mul_scalar", "scale must be 1x1x1x1"));
        }
        let sv = self.value(s).item();
        let y = self.value(x).map(|v| v * sv);
        self.push("mul_scalar", Op::MulScalar { x, s }, y)
    }

    pub fn concat_channels(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let y = ops::concat_channels(&tensors)?;
        self.push("concat_channels", Op::Concat { parts: parts.to_vec() }, y)
    }

    pub fn slice_channels(&mut self, x: NodeId, from: usize, to: usize) -> Result<NodeId> {
        let y = ops::slice_channels(self.value(x), from, to)?;
        self.push("slice_channels", Op::SliceChannels { x, from }, y)
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let y = ops::global_avg_pool(self.value(x));
        self.push("global_avg_pool", Op::GlobalAvgPool { x }, y)
    }

    /// Train-mode dropout: zero with probability p, scale survivors by
    /// 1/(1-p). Eval mode is the identity (callers skip the op entirely).
    pub fn dropout(&mut self, x: NodeId, p: f64, rng: &mut ChaCha8Rng) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArg(format!("dropout p {p} outside [0,1)")));
        }
        let xv = self.value(x);
        let mask: Vec<bool> = (0..xv.numel()).map(|_| rng.random::<f64>() >= p).collect();
        let scale = 1.0 / (1.0 - p);
        let sc = T::from_f64(scale);
        let data = xv
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &keep)| if keep { v * sc } else { T::zero() })
            .collect();
        let y = Tensor::from_vec(xv.shape(), data)?;
        self.push("dropout", Op::Dropout { x, mask, scale }, y)
    }

    /// Fixed Haar filter-bank analysis; odd inputs are zero-padded on the
    /// right/bottom first. Output channel blocks ordered [LL|LH|HL|HH].
    pub fn haar_analysis(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.h == 0 || s.w == 0 {
            return Err(Error::shape("haar_analysis", "empty spatial dims"));
        }
        let (ph, pw) = (s.h % 2, s.w % 2);
        let padded = if ph + pw > 0 { ops::pad_right_bottom(xv, ph, pw) } else { xv.clone() };
        let y = wavelet::analysis_raw(&padded, &wavelet::FilterBank::haar());
        self.push("haar_analysis", Op::HaarAnalysis { x, padded: (ph, pw) }, y)
    }

    /// Fixed Haar filter-bank synthesis: exact left inverse of analysis.
    pub fn haar_synthesis(&mut self, x: NodeId) -> Result<NodeId> {
        let y = wavelet::synthesis_raw(self.value(x), &wavelet::FilterBank::haar())?;
        self.push("haar_synthesis", Op::HaarSynthesis { x }, y)
    }

    pub fn gather_cells(&mut self, x: NodeId, picks: Vec<CellPick>) -> Result<NodeId> {
        let y = ops::gather_cells(self.value(x), &picks)?;
        self.push("gather_cells", Op::GatherCells { x, picks }, y)
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let y = ops::sum_all(self.value(x));
        self.push("sum_all", Op::SumAll { x }, y)
    }

    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.value(x).numel() as f64;
        let y = ops::sum_all(self.value(x)).map(|v| v * T::from_f64(1.0 / n));
        self.push("mean_all", Op::MeanAll { x }, y)
    }

    /// Elementwise binary cross-entropy against a constant target map.
    pub fn bce_with_logits(&mut self, x: NodeId, target: Tensor<T>) -> Result<NodeId> {
        let y = ops::bce_with_logits(self.value(x), &target)?;
        self.push("bce_with_logits", Op::BceWithLogits { x, target }, y)
    }

    /// Reverse pass from a scalar loss. Accumulates d loss / d p into each
    /// reachable parameter's grad; unreachable grads are left untouched.
    pub fn backward(&self, loss: NodeId, store: &mut ParamStore<T>) -> Result<()> {
        if self.value(loss).shape() != Shape::scalar() {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for id in (0..=loss.0).rev() {
            let Some(gy) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Const => {}
                Op::Param(pid) => store.accumulate_grad(*pid, &gy),
                Op::Conv2d { x, w, bias, meta } => {
                    let dx = ops::conv2d_grad_input(&gy, self.value(*w), self.value(*x).shape(), meta);
                    add_grad(&mut grads, *x, dx);
                    let dw = ops::conv2d_grad_weight(&gy, self.value(*x), self.value(*w).shape(), meta);
                    add_grad(&mut grads, *w, dw);
                    if let Some(b) = bias {
                        add_grad(&mut grads, *b, ops::conv2d_grad_bias(&gy));
                    }
                }
                Op::ConvTranspose2d { x, w, stride, groups } => {
                    let dx = ops::conv_transpose2d_grad_input(
                        &gy,
                        self.value(*w),
                        self.value(*x).shape(),
                        *stride,
                        *groups,
                    );
                    add_grad(&mut grads, *x, dx);
                    let dw = ops::conv_transpose2d_grad_weight(
                        &gy,
                        self.value(*x),
                        self.value(*w).shape(),
                        *stride,
                        *groups,
                    );
                    add_grad(&mut grads, *w, dw);
                }
                Op::BatchNorm { x, gamma, beta, mean, var, eps, train } => {
                    let (dx, dgamma, dbeta) = if *train {
                        ops::bn_grad_train(self.value(*x), &gy, mean, var, self.value(*gamma), *eps)
                    } else {
                        ops::bn_grad_eval(self.value(*x), &gy, mean, var, self.value(*gamma), *eps)
                    };
                    add_grad(&mut grads, *x, dx);
                    add_grad(&mut grads, *gamma, dgamma);
                    add_grad(&mut grads, *beta, dbeta);
                }
                Op::GroupNorm { x, gamma, beta, groups, mean, var, eps } => {
                    let (dx, dgamma, dbeta) = ops::group_norm_grad(
                        self.value(*x),
                        &gy,
                        *groups,
                        self.value(*gamma),
                        mean,
                        var,
                        *eps,
                    );
                    add_grad(&mut grads, *x, dx);
                    add_grad(&mut grads, *gamma, dgamma);
                    add_grad(&mut grads, *beta, dbeta);
                }
                Op::Relu { x } => add_grad(&mut grads, *x, ops::relu_grad(self.value(*x), &gy)),
                Op::Relu6 { x } => add_grad(&mut grads, *x, ops::relu6_grad(self.value(*x), &gy)),
                Op::Sigmoid { x } => add_grad(&mut grads, *x, ops::sigmoid_grad(&node.value, &gy)),
                Op::Silu { x } => add_grad(&mut grads, *x, ops::silu_grad(self.value(*x), &gy)),
                Op::Add { a, b } => {
                    add_grad(&mut grads, *a, gy.clone());
                    add_grad(&mut grads, *b, gy);
                }
                Op::Sub { a, b } => {
                    add_grad(&mut grads, *a, gy.clone());
                    add_grad(&mut grads, *b, gy.map(|v| -v));
                }
                Op::Mul { a, b } => {
                    add_grad(&mut grads, *a, ops::zip_map(&gy, self.value(*b), |g, v| g * v));
                    add_grad(&mut grads, *b, ops::zip_map(&gy, self.value(*a), |g, v| g * v));
                }
                Op::Div { a, b } => {
                    let bv = self.value(*b);
                    add_grad(&mut grads, *a, ops::zip_map(&gy, bv, |g, v| g / v));
                    let av = self.value(*a);
                    let db = ops::zip_map(
                        &ops::zip_map(&gy, av, |g, x| g * x),
                        bv,
                        |gx, v| -gx / (v * v),
                    );
                    add_grad(&mut grads, *b, db);
                }
                Op::Min2 { a, b } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let da = ops::zip_map(&ops::zip_map(&gy, av, |g, x| g + x * T::zero()), bv, |g, _| g);
                    let _ = da; // routed below with explicit masks
                    let mask_a: Vec<T> = av
                        .data()
                        .iter()
                        .zip(bv.data())
                        .map(|(&x, &y)| if y < x { T::zero() } else { T::one() })
                        .collect();
                    route_binary_choice(&mut grads, &gy, *a, *b, &mask_a);
                }
                Op::Max2 { a, b } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mask_a: Vec<T> = av
                        .data()
                        .iter()
                        .zip(bv.data())
                        .map(|(&x, &y)| if y > x { T::zero() } else { T::one() })
                        .collect();
                    route_binary_choice(&mut grads, &gy, *a, *b, &mask_a);
                }
                Op::Affine { x, a } => {
                    add_grad(&mut grads, *x, ops::affine(&gy, *a, 0.0));
                }
                Op::ScaleChannels { x, g } => {
                    let (dx, dg) = ops::scale_channels_grad(self.value(*x), self.value(*g), &gy);
                    add_grad(&mut grads, *x, dx);
                    add_grad(&mut grads, *g, dg);
                }
                Op::MulScalar { x, s } => {
                    let sv = self.value(*s).item();
                    add_grad(&mut grads, *x, gy.map(|v| v * sv));
                    let ds: T = gy
                        .data()
                        .iter()
                        .zip(self.value(*x).data())
                        .fold(T::zero(), |acc, (&g, &v)| acc + g * v);
                    add_grad(&mut grads, *s, Tensor::scalar(ds));
                }
                Op::Concat { parts } => {
                    let mut from = 0;
                    for &p in parts {
                        let c = self.value(p).shape().c;
                        let part = ops::slice_channels(&gy, from, from + c).expect("split");
                        add_grad(&mut grads, p, part);
                        from += c;
                    }
                }
                Op::SliceChannels { x, from } => {
                    let dx = ops::slice_channels_grad(&gy, self.value(*x).shape(), *from);
                    add_grad(&mut grads, *x, dx);
                }
                Op::GlobalAvgPool { x } => {
                    add_grad(&mut grads, *x, ops::global_avg_pool_grad(&gy, self.value(*x).shape()));
                }
                Op::Dropout { x, mask, scale } => {
                    let sc = T::from_f64(*scale);
                    let data = gy
                        .data()
                        .iter()
                        .zip(mask)
                        .map(|(&g, &keep)| if keep { g * sc } else { T::zero() })
                        .collect();
                    add_grad(&mut grads, *x, Tensor::from_vec(gy.shape(), data).unwrap());
                }
                Op::HaarAnalysis { x, padded } => {
                    let bank = wavelet::FilterBank::haar();
                    let full = wavelet::synthesis_raw(&gy, &bank).expect("subband shape");
                    let xs = self.value(*x).shape();
                    let dx = if padded.0 + padded.1 > 0 {
                        ops::crop_to(&full, xs.h, xs.w)
                    } else {
                        full
                    };
                    add_grad(&mut grads, *x, dx);
                }
                Op::HaarSynthesis { x } => {
                    let bank = wavelet::FilterBank::haar();
                    add_grad(&mut grads, *x, wavelet::analysis_raw(&gy, &bank));
                }
                Op::GatherCells { x, picks } => {
                    let dx = ops::gather_cells_grad(&gy, self.value(*x).shape(), picks);
                    add_grad(&mut grads, *x, dx);
                }
                Op::SumAll { x } => {
                    let g = gy.item();
                    add_grad(&mut grads, *x, Tensor::full(self.value(*x).shape(), g));
                }
                Op::MeanAll { x } => {
                    let xs = self.value(*x).shape();
                    let g = gy.item() * T::from_f64(1.0 / xs.numel() as f64);
                    add_grad(&mut grads, *x, Tensor::full(xs, g));
                }
                Op::BceWithLogits { x, target } => {
                    let dx = ops::bce_with_logits_grad(self.value(*x), target, &gy);
                    add_grad(&mut grads, *x, dx);
                }
            }
        }
        Ok(())
    }
}

fn add_grad<T: Element>(grads: &mut [Option<Tensor<T>>], id: NodeId, delta: Tensor<T>) {
    match &mut grads[id.0] {
        Some(g) => {
            debug_assert_eq!(g.shape(), delta.shape());
            let gm = g.data_mut();
            for (a, b) in gm.iter_mut().zip(delta.data()) {
                *a = *a + *b;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

/// Routes dy to a where mask_a is 1, else to b.
fn route_binary_choice<T: Element>(
    grads: &mut [Option<Tensor<T>>],
    gy: &Tensor<T>,
    a: NodeId,
    b: NodeId,
    mask_a: &[T],
) {
    let da: Vec<T> = gy.data().iter().zip(mask_a).map(|(&g, &m)| g * m).collect();
    let db: Vec<T> = gy.data().iter().zip(mask_a).map(|(&g, &m)| g * (T::one() - m)).collect();
    add_grad(grads, a, Tensor::from_vec(gy.shape(), da).unwrap());
    add_grad(grads, b, Tensor::from_vec(gy.shape(), db).unwrap());
}

/// Deferred batch-norm running-stat update collected during a train forward.
pub struct BnUpdate<T> {
    pub mean_buf: BufferId,
    pub var_buf: BufferId,
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
    pub momentum: f64,
}

/// running <- (1 - momentum) * running + momentum * batch
pub fn apply_bn_updates<T: Element>(store: &mut ParamStore<T>, updates: Vec<BnUpdate<T>>) {
    for u in updates {
        let m = T::from_f64(u.momentum);
        let keep = T::from_f64(1.0 - u.momentum);
        for (buf, new) in [(u.mean_buf, u.mean), (u.var_buf, u.var)] {
            let cur = store.buffer_mut(buf);
            let data = cur.data_mut();
            for (c, n) in data.iter_mut().zip(new.data()) {
                *c = keep * *c + m * *n;
            }
        }
    }
}

/// Per-forward context threading the tape, parameter store, mode, and
/// bookkeeping (dropout RNG, activation taps, pending BN updates).
pub struct Ctx<'a, T: Element> {
    pub mode: Mode,
    pub tape: Tape<T>,
    pub store: &'a ParamStore<T>,
    pub rng: Option<&'a mut ChaCha8Rng>,
    pub taps: Option<&'a mut Vec<(String, Tensor<T>)>>,
    pub bn_updates: Vec<BnUpdate<T>>,
}

impl<'a, T: Element> Ctx<'a, T> {
    pub fn eval(store: &'a ParamStore<T>) -> Self {
        Ctx { mode: Mode::Eval, tape: Tape::new(), store, rng: None, taps: None, bn_updates: Vec::new() }
    }

    pub fn train(store: &'a ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Ctx {
            mode: Mode::Train,
            tape: Tape::new(),
            store,
            rng: Some(rng),
            taps: None,
            bn_updates: Vec::new(),
        }
    }

    pub fn with_taps(mut self, taps: &'a mut Vec<(String, Tensor<T>)>) -> Self {
        self.taps = Some(taps);
        self
    }

    pub fn param(&mut self, id: ParamId) -> Result<NodeId> {
        let value = self.store.value(id).clone();
        self.tape.param_node(id, value)
    }

    pub fn scoped<R>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> R) -> R {
        self.tape.push_scope(name);
        let r = f(self);
        self.tape.pop_scope();
        r
    }

    /// Records the node's activation under the current scope path.
    pub fn tap(&mut self, node: NodeId) {
        if let Some(taps) = self.taps.as_deref_mut() {
            let name = self.tape.scope_path();
            taps.push((name, self.tape.value(node).clone()));
        }
    }
}
