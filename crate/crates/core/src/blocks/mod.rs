//! Learned building blocks: conv units, wavelet pooling layers, the
//! context-guided and star blocks, the shared detection head, and the
//! detection loss.

pub mod cgb;
pub mod head;
pub mod loss;
pub mod star;

pub use cgb::{ContextGuided, ContextGuidedConfig};
pub use head::{LsHead, LsHeadConfig};
pub use star::{Star, StarConfig};

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{BnUpdate, Ctx, Mode, NodeId};
use crate::error::Result;
use crate::params::{conv_init_std, BufferId, ParamId, ParamStore};
use crate::tensor::ops::{conv2d_out_len, Conv2dMeta};
use crate::tensor::{Element, Shape, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const GN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.03;

/// One row of the parameter/MAC accounting report; layers append their own.
#[derive(Clone, Debug)]
pub struct CountRow {
    pub name: String,
    pub params: u64,
    pub macs: u64,
}

pub fn normal_tensor<T: Element>(shape: Shape, std: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("std > 0");
    let data = (0..shape.numel()).map(|_| T::from_f64(dist.sample(rng))).collect();
    Tensor::from_vec(shape, data).expect("length matches")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Act {
    None,
    Silu,
    Relu6,
}

impl Act {
    pub fn apply<T: Element>(self, cx: &mut Ctx<'_, T>, x: NodeId) -> Result<NodeId> {
        match self {
            Act::None => Ok(x),
            Act::Silu => cx.tape.silu(x),
            Act::Relu6 => cx.tape.relu6(x),
        }
    }
}

/// Plain 2-D convolution layer.
pub struct Conv2dLayer {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub meta: Conv2dMeta,
    pub in_c: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
}

impl Conv2dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn build<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        meta: Conv2dMeta,
        bias: bool,
    ) -> Result<Self> {
        let w_shape = Shape::new(out_c, in_c / meta.groups, k, k);
        let std = conv_init_std((in_c / meta.groups) * k * k);
        let w = store.add(format!("{name}.weight"), normal_tensor(w_shape, std, rng))?;
        let b = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(Shape::new(1, out_c, 1, 1)))?)
        } else {
            None
        };
        Ok(Conv2dLayer { w, b, meta, in_c, out_c, kh: k, kw: k })
    }

    pub fn forward<T: Element>(&self, cx: &mut Ctx<'_, T>, x: NodeId) -> Result<NodeId> {
        let w = cx.param(self.w)?;
        let b = self.b.map(|b| cx.param(b)).transpose()?;
        cx.tape.conv2d(x, w, b, self.meta)
    }

    pub fn param_count(&self) -> u64 {
        let w = self.out_c * (self.in_c / self.meta.groups) * self.kh * self.kw;
        (w + if self.b.is_some() { self.out_c } else { 0 }) as u64
    }

    pub fn out_hw(&self, hw: (usize, usize)) -> (usize, usize) {
        let h = conv2d_out_len(hw.0, self.kh, self.meta.stride, self.meta.pad, self.meta.dilation)
            .expect("counted on valid sizes");
        let w = conv2d_out_len(hw.1, self.kw, self.meta.stride, self.meta.pad, self.meta.dilation)
            .expect("counted on valid sizes");
        (h, w)
    }

    /// MACs at the given input spatial size:
    /// C_out * C_in/groups * kH * kW * H_out * W_out.
    pub fn macs(&self, hw: (usize, usize)) -> u64 {
        let (ho, wo) = self.out_hw(hw);
        (self.out_c * (self.in_c / self.meta.groups) * self.kh * self.kw) as u64 * (ho * wo) as u64
    }

    pub fn count(&self, rows: &mut Vec<CountRow>, name: &str, hw: (usize, usize)) -> (usize, usize) {
        rows.push(CountRow { name: name.to_string(), params: self.param_count(), macs: self.macs(hw) });
        self.out_hw(hw)
    }
}

/// Batch norm layer with running statistics held as buffers.
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub channels: usize,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn build<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
    ) -> Result<Self> {
        let cshape = Shape::new(1, channels, 1, 1);
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(cshape, T::one()))?;
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(cshape))?;
        let running_mean = store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(cshape));
        let running_var =
            store.add_buffer(format!("{name}.running_var"), Tensor::full(cshape, T::one()));
        Ok(BatchNorm2d {
            gamma,
            beta,
            running_mean,
            running_var,
            channels,
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        })
    }

    pub fn forward<T: Element>(&self, cx: &mut Ctx<'_, T>, x: NodeId) -> Result<NodeId> {
        let gamma = cx.param(self.gamma)?;
        let beta = cx.param(self.beta)?;
        match cx.mode {
            Mode::Train => {
                let (y, mean, var) = cx.tape.batch_norm_train(x, gamma, beta, self.eps)?;
                cx.bn_updates.push(BnUpdate {
                    mean_buf: self.running_mean,
                    var_buf: self.running_var,
                    mean,
                    var,
                    momentum: self.momentum,
                });
                Ok(y)
            }
            Mode::Eval => {
                let mean = cx.store.buffer(self.running_mean).clone();
                let var = cx.store.buffer(self.running_var).clone();
                cx.tape.batch_norm_eval(x, gamma, beta, mean, var, self.eps)
            }
        }
    }

    pub fn count(&self, rows: &mut Vec<CountRow>, name: &str, hw: (usize, usize)) {
        // Norms count two MACs per output element (normalize + affine).
        rows.push(CountRow {
            name: name.to_string(),
            params: 2 * self.channels as u64,
            macs: 2 * (self.channels * hw.0 * hw.1) as u64,
        });
    }
}

/// Group norm layer.
pub struct GroupNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
    pub channels: usize,
    pub eps: f64,
}

impl GroupNorm2d {
    pub fn build<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        groups: usize,
    ) -> Result<Self> {
        let cshape = Shape::new(1, channels, 1, 1);
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(cshape, T::one()))?;
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(cshape))?;
        Ok(GroupNorm2d { gamma, beta, groups, channels, eps: GN_EPS })
    }

    pub fn forward<T: Element>(&self, cx: &mut Ctx<'_, T>, x: NodeId) -> Result<NodeId> {
        let gamma = cx.param(self.gamma)?;
        let beta = cx.param(self.beta)?;
        cx.tape.group_norm(x, self.groups, gamma, beta, self.eps)
    }

    pub fn count(&self, rows: &mut Vec<CountRow>, name: &str, hw: (usize, usize)) {
        rows.push(CountRow {
            name: name.to_string(),
            params: 2 * self.channels as u64,
            macs: 2 * (self.channels * hw.0 * hw.1) as u64,
        });
    }
}

/// Conv -> batch norm -> activation, the workhorse unit.
pub struct ConvNormAct {
    pub conv: Conv2dLayer,
    pub bn: BatchNorm2d,
    pub act: Act,
}

impl ConvNormAct {
    #[allow(clippy::too_many_arguments)]
    pub fn build<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        meta: Conv2dMeta,
        act: Act,
    ) -> Result<Self> {
        let conv = Conv2dLayer::build(store, rng, &format!("{name}.conv"), in_c, out_c, k, meta, false)?;
        let bn = BatchNorm2d::build(store, &format!("{name}.bn"), out_c)?;
        Ok(ConvNormAct { conv, bn, act })
    }

    pub fn forward<T: Element>(&self, cx: &mut Ctx<'_, T>, x: NodeId) -> Result<NodeId> {
        let y = self.conv.forward(cx, x)?;
        let y = self.bn.forward(cx, y)?;
        self.act.apply(cx, y)
    }

    pub fn count(&self, rows: &mut Vec<CountRow>, name: &str, hw: (usize, usize)) -> (usize, usize) {
        let out = self.conv.count(rows, &format!("{name}.conv"), hw);
        self.bn.count(rows, &format!("{name}.bn"), out);
        out
    }
}

/// Two-branch bottleneck-pair unit ("c2f-lite"): a 1x1 mix, a split, one
/// residual pair of 3x3 convs on the second half, then a 1x1 fuse.
pub struct C2fLite {
    pub cv1: ConvNormAct,
    pub bottleneck: [ConvNormAct; 2],
    pub cv2: ConvNormAct,
    pub width: usize,
}

impl C2fLite {
    pub fn build<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_c: usize,
        out_c: usize,
        width: usize,
    ) -> Result<Self> {
        debug_assert!(width % 2 == 0, "c2f-lite width must be even");
        let half = width / 2;
        let cv1 = ConvNormAct::build(
            store,
            rng,
            &format!("{name}.cv1"),
            in_c,
            width,
            1,
            Conv2dMeta::default(),
            Act::Silu,
        )?;
        let pad1 = Conv2dMeta { pad: 1, ..Default::default() };
        let bottleneck = [
            ConvNormAct::build(store, rng, &format!("{name}.m0"), half, half, 3, pad1, Act::Silu)?,
            ConvNormAct::build(store, rng, &format!("{name}.m1"), half, half, 3, pad1, Act::Silu)?,
        ];
        let cv2 = ConvNormAct::build(
            store,
            rng,
            &format!("{name}.cv2"),
            width,
            out_c,
            1,
            Conv2dMeta::default(),
            Act::Silu,
        )?;
        Ok(C2fLite { cv1, bottleneck, cv2, width })
    }

    pub fn forward<T: Element>(&self, cx: &mut Ctx<'_, T>, x: NodeId) -> Result<NodeId> {
        let half = self.width / 2;
        let mixed = self.cv1.forward(cx, x)?;
        let a = cx.tape.slice_channels(mixed, 0, half)?;
        let b = cx.tape.slice_channels(mixed, half, self.width)?;
        let y = self.bottleneck[0].forward(cx, b)?;
        let y = self.bottleneck[1].forward(cx, y)?;
        let y = cx.tape.add(b, y)?;
        let cat = cx.tape.concat_channels(&[a, y])?;
        self.cv2.forward(cx, cat)
    }

    pub fn count(&self, rows: &mut Vec<CountRow>, name: &str, hw: (usize, usize)) -> (usize, usize) {
        let out = self.cv1.count(rows, &format!("{name}.cv1"), hw);
        self.bottleneck[0].count(rows, &format!("{name}.m0"), out);
        self.bottleneck[1].count(rows, &format!("{name}.m1"), out);
        self.cv2.count(rows, &format!("{name}.cv2"), out)
    }
}

/// How the four analysis subbands feed the learned pointwise mix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WaveletAggregate {
    /// Stack subbands along channels (C -> 4C) and let the 1x1 conv mix them.
    Stack,
    /// Literal sum of the four subbands (collapses the detail bands).
    Sum,
}

/// Haar analysis followed by a learned 1x1 channel mix: the stride-2
/// downsampling unit. The pointwise kernel (+ bias) is its only learned
/// weight; the filter bank itself is fixed.
pub struct WaveletPool {
    pub pointwise: Conv2dLayer,
    pub aggregate: WaveletAggregate,
    pub in_c: usize,
    pub out_c: usize,
}

impl WaveletPool {
    pub fn build<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_c: usize,
        out_c: usize,
        aggregate: WaveletAggregate,
    ) -> Result<Self> {
        let mix_in = match aggregate {
            WaveletAggregate::Stack => 4 * in_c,
            WaveletAggregate::Sum => in_c,
        };
        let pointwise = Conv2dLayer::build(
            store,
            rng,
            &format!("{name}.pointwise"),
            mix_in,
            out_c,
            1,
            Conv2dMeta::default(),
            true,
        )?;
        Ok(WaveletPool { pointwise, aggregate, in_c, out_c })
    }

    pub fn forward<T: Element>(&self, cx: &mut Ctx<'_, T>, x: NodeId) -> Result<NodeId> {
        let sub = cx.tape.haar_analysis(x)?;
        let mixed_in = match self.aggregate {
            WaveletAggregate::Stack => sub,
            WaveletAggregate::Sum => {
                let c = self.in_c;
                let ll = cx.tape.slice_channels(sub, 0, c)?;
                let lh = cx.tape.slice_channels(sub, c, 2 * c)?;
                let hl = cx.tape.slice_channels(sub, 2 * c, 3 * c)?;
                let hh = cx.tape.slice_channels(sub, 3 * c, 4 * c)?;
                let s = cx.tape.add(ll, lh)?;
                let s = cx.tape.add(s, hl)?;
                cx.tape.add(s, hh)?
            }
        };
        self.pointwise.forward(cx, mixed_in)
    }

    pub fn count(&self, rows: &mut Vec<CountRow>, name: &str, hw: (usize, usize)) -> (usize, usize) {
        let half = (hw.0.div_ceil(2), hw.1.div_ceil(2));
        // Fixed filters: 4 MACs per subband element, no parameters.
        rows.push(CountRow {
            name: format!("{name}.haar"),
            params: 0,
            macs: (4 * crate::wavelet::SUBBANDS * self.in_c * half.0 * half.1) as u64,
        });
        self.pointwise.count(rows, &format!("{name}.pointwise"), half)
    }
}

/// Parameter-free upsampling by Haar synthesis: (B, 4k, H, W) -> (B, k, 2H, 2W).
pub struct WaveletUnpool {
    pub in_c: usize,
}

impl WaveletUnpool {
    pub fn forward<T: Element>(&self, cx: &mut Ctx<'_, T>, x: NodeId) -> Result<NodeId> {
        cx.tape.haar_synthesis(x)
    }

    pub fn out_c(&self) -> usize {
        self.in_c / crate::wavelet::SUBBANDS
    }

    pub fn count(&self, rows: &mut Vec<CountRow>, name: &str, hw: (usize, usize)) -> (usize, usize) {
        rows.push(CountRow {
            name: name.to_string(),
            params: 0,
            macs: (4 * self.in_c * hw.0 * hw.1) as u64,
        });
        (hw.0 * 2, hw.1 * 2)
    }
}
