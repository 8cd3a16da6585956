//! Lightweight shared detection head and the anchor-free box decoder.
//!
//! Each pyramid level passes through its own 1x1 adapter, then through the
//! SAME two conv/group-norm/activation stacks and the same 1x1 box and class
//! projections (shared parameter objects, counted once). Box logits are
//! multiplied by a per-level learnable scale.

use rand_chacha::ChaCha8Rng;

use super::{Act, Conv2dLayer, CountRow, GroupNorm2d};
use crate::autodiff::{Ctx, NodeId};
use crate::boxes::Detection;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::ops::{sigmoid_scalar, Conv2dMeta};
use crate::tensor::{Element, Shape, Tensor};

/// Prior probability behind the class bias init: ln(0.01/0.99) ~ -4.59.
pub const CLASS_BIAS_INIT: f64 = -4.59;
/// Box distances start around one stride unit so early boxes overlap their
/// assigned target and the IoU loss has gradient.
pub const BOX_BIAS_INIT: f64 = 1.0;

#[derive(Clone, Debug)]
pub struct LsHeadConfig {
    /// Input channels per pyramid level.
    pub in_channels: Vec<usize>,
    pub width: usize,
    pub num_classes: usize,
    pub groups: usize,
    /// Shared stacks + projections when true; per-level clones when false.
    pub shared: bool,
}

struct HeadStack {
    conv1: Conv2dLayer,
    gn1: GroupNorm2d,
    conv2: Conv2dLayer,
    gn2: GroupNorm2d,
    box_proj: Conv2dLayer,
    cls_proj: Conv2dLayer,
}

impl HeadStack {
    fn build<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: &LsHeadConfig,
    ) -> Result<Self> {
        let w = cfg.width;
        let pad1 = Conv2dMeta { pad: 1, ..Default::default() };
        let one = Conv2dMeta::default();
        let conv1 = Conv2dLayer::build(store, rng, &format!("{name}.conv1"), w, w, 3, pad1, false)?;
        let gn1 = GroupNorm2d::build(store, &format!("{name}.gn1"), w, cfg.groups)?;
        let conv2 = Conv2dLayer::build(store, rng, &format!("{name}.conv2"), w, w, 3, pad1, false)?;
        let gn2 = GroupNorm2d::build(store, &format!("{name}.gn2"), w, cfg.groups)?;
        let box_proj = Conv2dLayer::build(store, rng, &format!("{name}.box"), w, 4, 1, one, true)?;
        let cls_proj =
            Conv2dLayer::build(store, rng, &format!("{name}.cls"), w, cfg.num_classes, 1, one, true)?;
        let bb = box_proj.b.expect("box proj has bias");
        store.set_value(bb, Tensor::full(Shape::new(1, 4, 1, 1), T::from_f64(BOX_BIAS_INIT)))?;
        let cb = cls_proj.b.expect("cls proj has bias");
        store.set_value(
            cb,
            Tensor::full(Shape::new(1, cfg.num_classes, 1, 1), T::from_f64(CLASS_BIAS_INIT)),
        )?;
        Ok(HeadStack { conv1, gn1, conv2, gn2, box_proj, cls_proj })
    }

    fn forward<T: Element>(&self, cx: &mut Ctx<'_, T>, x: NodeId) -> Result<(NodeId, NodeId)> {
        let y = self.conv1.forward(cx, x)?;
        let y = self.gn1.forward(cx, y)?;
        let y = Act::Silu.apply(cx, y)?;
        let y = self.conv2.forward(cx, y)?;
        let y = self.gn2.forward(cx, y)?;
        let y = Act::Silu.apply(cx, y)?;
        let box_map = self.box_proj.forward(cx, y)?;
        let cls_map = self.cls_proj.forward(cx, y)?;
        Ok((box_map, cls_map))
    }

    fn count(&self, rows: &mut Vec<CountRow>, name: &str, hw_per_use: &[(usize, usize)]) {
        // A shared stack is applied once per level: parameters appear once,
        // MACs accumulate over every application.
        let mut push = |layer: &Conv2dLayer, suffix: &str| {
            let macs = hw_per_use.iter().map(|&hw| layer.macs(hw)).sum();
            rows.push(CountRow {
                name: format!("{name}.{suffix}"),
                params: layer.param_count(),
                macs,
            });
        };
        push(&self.conv1, "conv1");
        push(&self.conv2, "conv2");
        push(&self.box_proj, "box");
        push(&self.cls_proj, "cls");
        let mut push_gn = |gn: &GroupNorm2d, suffix: &str| {
            let macs: u64 =
                hw_per_use.iter().map(|&hw| 2 * (gn.channels * hw.0 * hw.1) as u64).sum();
            rows.push(CountRow {
                name: format!("{name}.{suffix}"),
                params: 2 * gn.channels as u64,
                macs,
            });
        };
        push_gn(&self.gn1, "gn1");
        push_gn(&self.gn2, "gn2");
    }
}

pub struct LsHead {
    pub cfg: LsHeadConfig,
    adapters: Vec<Conv2dLayer>,
    /// One stack when shared, one per level otherwise.
    stacks: Vec<HeadStack>,
    pub scales: Vec<ParamId>,
}

/// Raw per-level outputs: box distances (B,4,H,W) and class logits
/// (B,num_classes,H,W), plus the level stride.
pub struct LevelNodes {
    pub box_map: NodeId,
    pub cls_map: NodeId,
    pub stride: usize,
}

#[derive(Clone)]
pub struct LevelRaw<T: Element> {
    pub box_map: Tensor<T>,
    pub cls_map: Tensor<T>,
    pub stride: usize,
}

impl LsHead {
    pub fn build<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: LsHeadConfig,
    ) -> Result<Self> {
        if cfg.width % cfg.groups != 0 {
            return Err(Error::InvalidArg(format!(
                "head width {} must be divisible by group-norm groups {}",
                cfg.width, cfg.groups
            )));
        }
        let mut adapters = Vec::new();
        for (lvl, &c) in cfg.in_channels.iter().enumerate() {
            adapters.push(Conv2dLayer::build(
                store,
                rng,
                &format!("{name}.adapter{lvl}"),
                c,
                cfg.width,
                1,
                Conv2dMeta::default(),
                true,
            )?);
        }
        let stacks = if cfg.shared {
            vec![HeadStack::build(store, rng, &format!("{name}.shared"), &cfg)?]
        } else {
            (0..cfg.in_channels.len())
                .map(|lvl| HeadStack::build(store, rng, &format!("{name}.level{lvl}"), &cfg))
                .collect::<Result<Vec<_>>>()?
        };
        let mut scales = Vec::new();
        for lvl in 0..cfg.in_channels.len() {
            scales.push(store.add(format!("{name}.scale{lvl}"), Tensor::scalar(T::one()))?);
        }
        Ok(LsHead { cfg, adapters, stacks, scales })
    }

    pub fn forward<T: Element>(
        &self,
        cx: &mut Ctx<'_, T>,
        features: &[NodeId],
        strides: &[usize],
    ) -> Result<Vec<LevelNodes>> {
        if features.len() != self.adapters.len() || strides.len() != self.adapters.len() {
            return Err(Error::shape(
                "ls_head",
                format!("expected {} levels, got {}", self.adapters.len(), features.len()),
            ));
        }
        let mut out = Vec::new();
        for (lvl, (&f, &stride)) in features.iter().zip(strides).enumerate() {
            let nodes = cx.scoped(&format!("level{lvl}"), |cx| -> Result<LevelNodes> {
                let adapted = self.adapters[lvl].forward(cx, f)?;
                let stack = if self.cfg.shared { &self.stacks[0] } else { &self.stacks[lvl] };
                let (box_raw, cls_map) = stack.forward(cx, adapted)?;
                let scale = cx.param(self.scales[lvl])?;
                let box_map = cx.tape.mul_scalar(box_raw, scale)?;
                Ok(LevelNodes { box_map, cls_map, stride })
            })?;
            out.push(nodes);
        }
        Ok(out)
    }

    pub fn count(
        &self,
        rows: &mut Vec<CountRow>,
        name: &str,
        hw_per_level: &[(usize, usize)],
    ) {
        for (lvl, a) in self.adapters.iter().enumerate() {
            a.count(rows, &format!("{name}.adapter{lvl}"), hw_per_level[lvl]);
        }
        if self.cfg.shared {
            self.stacks[0].count(rows, &format!("{name}.shared"), hw_per_level);
        } else {
            for (lvl, s) in self.stacks.iter().enumerate() {
                s.count(rows, &format!("{name}.level{lvl}"), &hw_per_level[lvl..lvl + 1]);
            }
        }
        for lvl in 0..self.scales.len() {
            rows.push(CountRow { name: format!("{name}.scale{lvl}"), params: 1, macs: 0 });
        }
    }
}

/// Anchor-free decode of raw level maps into detections, one list per batch
/// sample. Each cell predicts (l, t, r, b) distances in stride units from
/// its center; class scores pass through a sigmoid and `conf_threshold`
/// filters strictly below. Boxes are clamped to the image and returned as
/// normalized cxcywh.
pub fn decode_boxes<T: Element>(
    levels: &[LevelRaw<T>],
    img_hw: (usize, usize),
    conf_threshold: f64,
) -> Vec<Vec<Detection>> {
    let batch = levels.first().map(|l| l.box_map.shape().b).unwrap_or(0);
    let (img_h, img_w) = (img_hw.0 as f64, img_hw.1 as f64);
    let mut out = vec![Vec::new(); batch];
    for level in levels {
        let bs = level.box_map.shape();
        let cs = level.cls_map.shape();
        let stride = level.stride as f64;
        for b in 0..bs.b {
            for i in 0..bs.h {
                let cy = (i as f64 + 0.5) * stride;
                for j in 0..bs.w {
                    let cx = (j as f64 + 0.5) * stride;
                    let l = level.box_map.at(b, 0, i, j).as_f64() * stride;
                    let t = level.box_map.at(b, 1, i, j).as_f64() * stride;
                    let r = level.box_map.at(b, 2, i, j).as_f64() * stride;
                    let bo = level.box_map.at(b, 3, i, j).as_f64() * stride;
                    let x1 = (cx - l).clamp(0.0, img_w);
                    let y1 = (cy - t).clamp(0.0, img_h);
                    let x2 = (cx + r).clamp(0.0, img_w);
                    let y2 = (cy + bo).clamp(0.0, img_h);
                    let w = ((x2 - x1) / img_w).max(1e-6);
                    let h = ((y2 - y1) / img_h).max(1e-6);
                    let bcx = (x1 + x2) / 2.0 / img_w;
                    let bcy = (y1 + y2) / 2.0 / img_h;
                    for class in 0..cs.c {
                        let score = sigmoid_scalar(level.cls_map.at(b, class, i, j)).as_f64();
                        if score > conf_threshold {
                            out[b].push(Detection {
                                class,
                                confidence: score,
                                cx: bcx,
                                cy: bcy,
                                w,
                                h,
                            });
                        }
                    }
                }
            }
        }
    }
    for dets in &mut out {
        dets.sort_by(|a, b| {
            b.confidence
                .partial_cmp(&a.confidence)
                .unwrap()
                .then(a.cx.partial_cmp(&b.cx).unwrap())
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedTree;
    use rand::Rng;

    fn rand_tensor(shape: Shape, seed: u64) -> Tensor<f64> {
        let mut rng = SeedTree::new(seed).split("head-test").rng();
        let data = (0..shape.numel()).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    fn head(shared: bool, seed: u64) -> (ParamStore<f64>, LsHead) {
        let mut store = ParamStore::new();
        let mut rng = SeedTree::new(seed).split("build").rng();
        let cfg = LsHeadConfig {
            in_channels: vec![8, 8, 8],
            width: 8,
            num_classes: 1,
            groups: 4,
            shared,
        };
        let h = LsHead::build(&mut store, &mut rng, "head", cfg).unwrap();
        (store, h)
    }

    #[test]
    fn shared_head_has_fewer_params_than_unshared() {
        let (store_s, _) = head(true, 1);
        let (store_u, _) = head(false, 1);
        assert!(store_s.total_param_count() < store_u.total_param_count());
    }

    #[test]
    fn level_count_mismatch_is_an_error() {
        let (store, h) = head(true, 2);
        let x = rand_tensor(Shape::new(1, 8, 6, 6), 3);
        let mut cx = Ctx::eval(&store);
        let n1 = cx.tape.constant(x.clone()).unwrap();
        let n2 = cx.tape.constant(x).unwrap();
        assert!(h.forward(&mut cx, &[n1, n2], &[8, 16]).is_err());
    }

    #[test]
    fn weight_sharing_is_real_aliasing() {
        // With equal adapters and scales = 1, two levels fed the same tensor
        // produce bit-identical raw maps.
        let mut store = ParamStore::new();
        let mut rng = SeedTree::new(9).split("build").rng();
        let cfg = LsHeadConfig {
            in_channels: vec![8, 8],
            width: 8,
            num_classes: 2,
            groups: 4,
            shared: true,
        };
        let h = LsHead::build(&mut store, &mut rng, "head", cfg).unwrap();
        let (w1, b1) = (h.adapters[1].w, h.adapters[1].b.unwrap());
        let w0v = store.value(h.adapters[0].w).clone();
        let b0v = store.value(h.adapters[0].b.unwrap()).clone();
        store.set_value(w1, w0v).unwrap();
        store.set_value(b1, b0v).unwrap();
        let x = rand_tensor(Shape::new(2, 8, 5, 5), 10);
        let mut cx = Ctx::eval(&store);
        let na = cx.tape.constant(x.clone()).unwrap();
        let nb = cx.tape.constant(x).unwrap();
        let out = h.forward(&mut cx, &[na, nb], &[8, 16]).unwrap();
        assert_eq!(
            cx.tape.value(out[0].box_map).data(),
            cx.tape.value(out[1].box_map).data()
        );
        assert_eq!(
            cx.tape.value(out[0].cls_map).data(),
            cx.tape.value(out[1].cls_map).data()
        );
        // Mutating the per-level scale changes only its own level.
        store
            .set_value(h.scales[1], Tensor::scalar(2.0))
            .unwrap();
        let x = rand_tensor(Shape::new(2, 8, 5, 5), 10);
        let mut cx = Ctx::eval(&store);
        let na = cx.tape.constant(x.clone()).unwrap();
        let nb = cx.tape.constant(x).unwrap();
        let out = h.forward(&mut cx, &[na, nb], &[8, 16]).unwrap();
        let b0 = cx.tape.value(out[0].box_map);
        let b1t = cx.tape.value(out[1].box_map);
        for i in 0..b0.numel() {
            assert!((b1t.data()[i] - 2.0 * b0.data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn decode_single_cell_hand_value() {
        // Distances (1,1,1,1) at stride 8, cell center (12,12), 64x64 image:
        // corners (4,4)-(20,20), normalized cxcywh (0.1875, 0.1875, 0.25, 0.25).
        let mut box_map = Tensor::<f64>::zeros(Shape::new(1, 4, 2, 2));
        let bs = box_map.shape();
        {
            let d = box_map.data_mut();
            for c in 0..4 {
                d[bs.idx(0, c, 1, 1)] = 1.0;
            }
        }
        let mut cls_map = Tensor::<f64>::full(Shape::new(1, 1, 2, 2), -1e30);
        let cs = cls_map.shape();
        cls_map.data_mut()[cs.idx(0, 0, 1, 1)] = 5.0;
        let levels = vec![LevelRaw { box_map, cls_map, stride: 8 }];
        let dets = decode_boxes(&levels, (64, 64), 0.5);
        assert_eq!(dets[0].len(), 1);
        let d = dets[0][0];
        assert!((d.cx - 0.1875).abs() < 1e-9);
        assert!((d.cy - 0.1875).abs() < 1e-9);
        assert!((d.w - 0.25).abs() < 1e-9);
        assert!((d.h - 0.25).abs() < 1e-9);
    }

    #[test]
    fn decode_saturated_negative_logits_empty() {
        let box_map = Tensor::<f64>::zeros(Shape::new(1, 4, 2, 2));
        let cls_map = Tensor::<f64>::full(Shape::new(1, 1, 2, 2), f64::NEG_INFINITY);
        let levels = vec![LevelRaw { box_map, cls_map, stride: 8 }];
        let dets = decode_boxes(&levels, (16, 16), 0.0);
        assert!(dets[0].is_empty());
    }

    #[test]
    fn decode_threshold_zero_yields_cell_count() {
        let levels = vec![
            LevelRaw {
                box_map: rand_tensor(Shape::new(1, 4, 4, 4), 20),
                cls_map: rand_tensor(Shape::new(1, 1, 4, 4), 21),
                stride: 8,
            },
            LevelRaw {
                box_map: rand_tensor(Shape::new(1, 4, 2, 2), 22),
                cls_map: rand_tensor(Shape::new(1, 1, 2, 2), 23),
                stride: 16,
            },
        ];
        let dets = decode_boxes(&levels, (32, 32), 0.0);
        assert_eq!(dets[0].len(), 16 + 4);
    }
}
