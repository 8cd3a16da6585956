//! Context-guided block: a local depthwise branch, a dilated "surrounding"
//! branch, a joint batch-norm + activation, and a global channel gate, all
//! wrapped in a residual.

use rand_chacha::ChaCha8Rng;

use super::{Act, BatchNorm2d, Conv2dLayer, CountRow};
use crate::autodiff::{Ctx, NodeId};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::ops::Conv2dMeta;
use crate::tensor::Element;

#[derive(Clone, Copy, Debug)]
pub struct ContextGuidedConfig {
    pub c_in: usize,
    pub c_out: usize,
    /// Dilation of the surrounding branch.
    pub dilation: usize,
    /// Channel reduction of the global gate.
    pub reduction: usize,
}

pub struct ContextGuided {
    pub cfg: ContextGuidedConfig,
    reduce: Conv2dLayer,
    local: Conv2dLayer,
    surround: Conv2dLayer,
    joint_bn: BatchNorm2d,
    gate_reduce: Conv2dLayer,
    gate_expand: Conv2dLayer,
    projection: Option<Conv2dLayer>,
}

impl ContextGuided {
    pub fn build<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: ContextGuidedConfig,
    ) -> Result<Self> {
        if cfg.c_out % 2 != 0 {
            return Err(Error::InvalidArg(format!(
                "context-guided block `{name}`: c_out {} must be even",
                cfg.c_out
            )));
        }
        if cfg.dilation < 1 {
            return Err(Error::InvalidArg(format!(
                "context-guided block `{name}`: dilation must be >= 1"
            )));
        }
        let n = cfg.c_out / 2;
        let reduce = Conv2dLayer::build(
            store,
            rng,
            &format!("{name}.reduce"),
            cfg.c_in,
            n,
            1,
            Conv2dMeta::default(),
            false,
        )?;
        let dw = Conv2dMeta { pad: 1, groups: n, ..Default::default() };
        let local = Conv2dLayer::build(store, rng, &format!("{name}.local"), n, n, 3, dw, false)?;
        let dw_dilated = Conv2dMeta {
            pad: cfg.dilation,
            dilation: cfg.dilation,
            groups: n,
            ..Default::default()
        };
        let surround =
            Conv2dLayer::build(store, rng, &format!("{name}.surround"), n, n, 3, dw_dilated, false)?;
        let joint_bn = BatchNorm2d::build(store, &format!("{name}.joint_bn"), cfg.c_out)?;
        let hidden = (cfg.c_out / cfg.reduction).max(1);
        let gate_reduce = Conv2dLayer::build(
            store,
            rng,
            &format!("{name}.gate.reduce"),
            cfg.c_out,
            hidden,
            1,
            Conv2dMeta::default(),
            true,
        )?;
        let gate_expand = Conv2dLayer::build(
            store,
            rng,
            &format!("{name}.gate.expand"),
            hidden,
            cfg.c_out,
            1,
            Conv2dMeta::default(),
            true,
        )?;
        let projection = if cfg.c_in != cfg.c_out {
            Some(Conv2dLayer::build(
                store,
                rng,
                &format!("{name}.projection"),
                cfg.c_in,
                cfg.c_out,
                1,
                Conv2dMeta::default(),
                false,
            )?)
        } else {
            None
        };
        Ok(ContextGuided { cfg, reduce, local, surround, joint_bn, gate_reduce, gate_expand, projection })
    }

    pub fn forward<T: Element>(&self, cx: &mut Ctx<'_, T>, x: NodeId) -> Result<NodeId> {
        let reduced = self.reduce.forward(cx, x)?;
        let local = self.local.forward(cx, reduced)?;
        let surround = self.surround.forward(cx, reduced)?;
        let joint = cx.tape.concat_channels(&[local, surround])?;
        let joint = self.joint_bn.forward(cx, joint)?;
        let joint = Act::Silu.apply(cx, joint)?;
        // Global gate: squeeze, reduce, expand, sigmoid, channel-wise scale.
        let squeezed = cx.tape.global_avg_pool(joint)?;
        let hidden = self.gate_reduce.forward(cx, squeezed)?;
        let hidden = Act::Silu.apply(cx, hidden)?;
        let gate = self.gate_expand.forward(cx, hidden)?;
        let gate = cx.tape.sigmoid(gate)?;
        let refined = cx.tape.scale_channels(joint, gate)?;
        let residual = match &self.projection {
            Some(p) => p.forward(cx, x)?,
            None => x,
        };
        cx.tape.add(residual, refined)
    }

    /// Bias parameter of the gate's expand conv; the residual-identity test
    /// drives it to -inf to shut the gate.
    pub fn gate_bias(&self) -> crate::params::ParamId {
        self.gate_expand.b.expect("gate expand conv has bias")
    }

    pub fn count(&self, rows: &mut Vec<CountRow>, name: &str, hw: (usize, usize)) -> (usize, usize) {
        self.reduce.count(rows, &format!("{name}.reduce"), hw);
        self.local.count(rows, &format!("{name}.local"), hw);
        self.surround.count(rows, &format!("{name}.surround"), hw);
        self.joint_bn.count(rows, &format!("{name}.joint_bn"), hw);
        self.gate_reduce.count(rows, &format!("{name}.gate.reduce"), (1, 1));
        self.gate_expand.count(rows, &format!("{name}.gate.expand"), (1, 1));
        if let Some(p) = &self.projection {
            p.count(rows, &format!("{name}.projection"), hw);
        }
        hw
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Ctx;
    use crate::rng::SeedTree;
    use crate::tensor::{Shape, Tensor};
    use rand::Rng;

    fn rand_tensor(shape: Shape, seed: u64) -> Tensor<f64> {
        let mut rng = SeedTree::new(seed).split("cgb-test").rng();
        let data = (0..shape.numel()).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    fn build_block(
        cfg: ContextGuidedConfig,
        seed: u64,
    ) -> (ParamStore<f64>, ContextGuided) {
        let mut store = ParamStore::new();
        let mut rng = SeedTree::new(seed).split("build").rng();
        let block = ContextGuided::build(&mut store, &mut rng, "cgb", cfg).unwrap();
        (store, block)
    }

    #[test]
    fn shape_contract() {
        let cfg = ContextGuidedConfig { c_in: 32, c_out: 32, dilation: 2, reduction: 16 };
        let (store, block) = build_block(cfg, 1);
        let x = rand_tensor(Shape::new(2, 32, 40, 40), 2);
        let mut cx = Ctx::eval(&store);
        let xn = cx.tape.constant(x).unwrap();
        let y = block.forward(&mut cx, xn).unwrap();
        assert_eq!(cx.tape.value(y).shape(), Shape::new(2, 32, 40, 40));
    }

    #[test]
    fn projection_handles_width_change() {
        let cfg = ContextGuidedConfig { c_in: 16, c_out: 32, dilation: 2, reduction: 16 };
        let (store, block) = build_block(cfg, 3);
        let x = rand_tensor(Shape::new(1, 16, 8, 8), 4);
        let mut cx = Ctx::eval(&store);
        let xn = cx.tape.constant(x).unwrap();
        let y = block.forward(&mut cx, xn).unwrap();
        assert_eq!(cx.tape.value(y).shape(), Shape::new(1, 32, 8, 8));
    }

    #[test]
    fn closed_gate_passes_residual_exactly() {
        let cfg = ContextGuidedConfig { c_in: 8, c_out: 8, dilation: 2, reduction: 4 };
        let (mut store, block) = build_block(cfg, 5);
        // Drive the sigmoid pre-activation to -inf: gate becomes exactly 0.
        let bias = block.gate_bias();
        store
            .set_value(bias, Tensor::full(store.value(bias).shape(), -1.0e30))
            .unwrap();
        let x = rand_tensor(Shape::new(2, 8, 6, 6), 6);
        let mut cx = Ctx::eval(&store);
        let xn = cx.tape.constant(x.clone()).unwrap();
        let y = block.forward(&mut cx, xn).unwrap();
        assert_eq!(cx.tape.value(y).data(), x.data());
    }

    #[test]
    fn reduction_rejects_odd_width() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = SeedTree::new(7).split("build").rng();
        let cfg = ContextGuidedConfig { c_in: 7, c_out: 7, dilation: 2, reduction: 16 };
        assert!(ContextGuided::build(&mut store, &mut rng, "cgb", cfg).is_err());
    }
}
