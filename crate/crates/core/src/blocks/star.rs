//! Star block: two 1x1 branches whose element-wise product implicitly
//! expands the feature dimension, between a pair of depthwise 7x7 convs,
//! with a dropout-regularized residual.

use rand_chacha::ChaCha8Rng;

use super::{Conv2dLayer, CountRow};
use crate::autodiff::{Ctx, Mode, NodeId};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::ops::Conv2dMeta;
use crate::tensor::Element;

#[derive(Clone, Copy, Debug)]
pub struct StarConfig {
    pub channels: usize,
    /// Expansion of the two 1x1 branches.
    pub mlp_ratio: usize,
    pub dropout_p: f64,
}

pub struct Star {
    pub cfg: StarConfig,
    dw1: Conv2dLayer,
    branch1: Conv2dLayer,
    branch2: Conv2dLayer,
    fuse: Conv2dLayer,
    dw2: Conv2dLayer,
}

impl Star {
    pub fn build<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: StarConfig,
    ) -> Result<Self> {
        if cfg.mlp_ratio == 0 {
            return Err(Error::InvalidArg(format!("star block `{name}`: mlp_ratio must be >= 1")));
        }
        if !(0.0..1.0).contains(&cfg.dropout_p) {
            return Err(Error::InvalidArg(format!(
                "star block `{name}`: dropout_p {} outside [0,1)",
                cfg.dropout_p
            )));
        }
        let c = cfg.channels;
        let hidden = c * cfg.mlp_ratio;
        let dw = Conv2dMeta { pad: 3, groups: c, ..Default::default() };
        let dw1 = Conv2dLayer::build(store, rng, &format!("{name}.dw1"), c, c, 7, dw, true)?;
        let one = Conv2dMeta::default();
        let branch1 = Conv2dLayer::build(store, rng, &format!("{name}.f1"), c, hidden, 1, one, true)?;
        let branch2 = Conv2dLayer::build(store, rng, &format!("{name}.f2"), c, hidden, 1, one, true)?;
        let fuse = Conv2dLayer::build(store, rng, &format!("{name}.g"), hidden, c, 1, one, true)?;
        let dw2 = Conv2dLayer::build(store, rng, &format!("{name}.dw2"), c, c, 7, dw, true)?;
        Ok(Star { cfg, dw1, branch1, branch2, fuse, dw2 })
    }

    pub fn forward<T: Element>(&self, cx: &mut Ctx<'_, T>, x: NodeId) -> Result<NodeId> {
        let features = self.dw1.forward(cx, x)?;
        let b1 = self.branch1.forward(cx, features)?;
        let b2 = self.branch2.forward(cx, features)?;
        let gated = cx.tape.relu6(b1)?;
        let product = cx.tape.mul(gated, b2)?;
        let fused = self.fuse.forward(cx, product)?;
        let fresh = self.dw2.forward(cx, fused)?;
        let regularized = match (cx.mode, self.cfg.dropout_p > 0.0) {
            (Mode::Train, true) => {
                let rng = cx.rng.as_deref_mut().ok_or_else(|| {
                    Error::InvalidArg("train-mode star block needs a dropout rng".into())
                })?;
                cx.tape.dropout(fresh, self.cfg.dropout_p, rng)?
            }
            _ => fresh,
        };
        cx.tape.add(x, regularized)
    }

    /// The fuse conv's weight/bias; zeroing them makes the block an identity.
    pub fn fuse_params(&self) -> (crate::params::ParamId, crate::params::ParamId) {
        (self.fuse.w, self.fuse.b.expect("fuse conv has bias"))
    }

    pub fn dw2_bias(&self) -> crate::params::ParamId {
        self.dw2.b.expect("dw2 conv has bias")
    }

    pub fn count(&self, rows: &mut Vec<CountRow>, name: &str, hw: (usize, usize)) -> (usize, usize) {
        self.dw1.count(rows, &format!("{name}.dw1"), hw);
        self.branch1.count(rows, &format!("{name}.f1"), hw);
        self.branch2.count(rows, &format!("{name}.f2"), hw);
        self.fuse.count(rows, &format!("{name}.g"), hw);
        self.dw2.count(rows, &format!("{name}.dw2"), hw);
        hw
    }
}
