//! Detection training loss: binary cross-entropy on class maps plus an IoU
//! loss on the boxes decoded at assigned cells.
//!
//! Assignment is center-cell: each ground-truth box is routed to the pyramid
//! level whose size range covers its larger side, at the single cell
//! containing its center. The first box claiming a cell keeps it.

use super::head::LevelNodes;
use crate::autodiff::{Ctx, NodeId};
use crate::boxes::GtBox;
use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};

pub const LAMBDA_CLS: f64 = 1.0;
pub const LAMBDA_BOX: f64 = 2.5;
/// A level's size range covers boxes with max side in
/// (8*prev_stride, 8*stride] pixels; the last level is unbounded above.
pub const RANGE_FACTOR: f64 = 8.0;

#[derive(Clone, Copy, Debug)]
pub struct Assignment {
    pub batch: usize,
    pub cell_y: usize,
    pub cell_x: usize,
    pub gt: GtBox,
}

/// Routes each ground truth to (level, cell). Returns one assignment list
/// per level, in (batch, label-order) iteration order.
pub fn assign_targets(
    gts: &[Vec<GtBox>],
    strides: &[usize],
    img_hw: (usize, usize),
) -> Vec<Vec<Assignment>> {
    let (img_h, img_w) = (img_hw.0 as f64, img_hw.1 as f64);
    let mut per_level: Vec<Vec<Assignment>> = vec![Vec::new(); strides.len()];
    let mut taken: Vec<std::collections::HashSet<(usize, usize, usize)>> =
        vec![Default::default(); strides.len()];
    for (b, boxes) in gts.iter().enumerate() {
        for gt in boxes {
            let max_side = (gt.w * img_w).max(gt.h * img_h);
            let mut level = strides.len() - 1;
            for (i, &s) in strides.iter().enumerate() {
                if max_side <= RANGE_FACTOR * s as f64 {
                    level = i;
                    break;
                }
            }
            let stride = strides[level] as f64;
            let grid_h = img_hw.0 / strides[level];
            let grid_w = img_hw.1 / strides[level];
            let cy = ((gt.cy * img_h / stride) as usize).min(grid_h - 1);
            let cx = ((gt.cx * img_w / stride) as usize).min(grid_w - 1);
            if taken[level].insert((b, cy, cx)) {
                per_level[level].push(Assignment { batch: b, cell_y: cy, cell_x: cx, gt: *gt });
            }
        }
    }
    per_level
}

/// Encode a ground truth box as (l, t, r, b) distances in stride units from
/// its assigned cell center. The inverse of the head decode.
pub fn encode_distances(
    gt: &GtBox,
    cell: (usize, usize),
    stride: usize,
    img_hw: (usize, usize),
) -> [f64; 4] {
    let s = stride as f64;
    let cx = (cell.1 as f64 + 0.5) * s;
    let cy = (cell.0 as f64 + 0.5) * s;
    let (x1, y1, x2, y2) = gt.corners();
    let (img_h, img_w) = (img_hw.0 as f64, img_hw.1 as f64);
    [
        (cx - x1 * img_w) / s,
        (cy - y1 * img_h) / s,
        (x2 * img_w - cx) / s,
        (y2 * img_h - cy) / s,
    ]
}

pub struct LossNodes {
    pub total: NodeId,
    pub cls_value: f64,
    pub box_value: f64,
    pub num_pos: usize,
}

/// Builds the scalar training loss on the tape:
/// total = LAMBDA_CLS * BCE_sum / max(1, n_pos) + LAMBDA_BOX * sum(1 - IoU) / max(1, n_pos).
pub fn detection_loss<T: Element>(
    cx: &mut Ctx<'_, T>,
    levels: &[LevelNodes],
    gts: &[Vec<GtBox>],
    img_hw: (usize, usize),
) -> Result<LossNodes> {
    if gts.is_empty() {
        return Err(Error::InvalidArg("detection loss needs at least one image".into()));
    }
    let strides: Vec<usize> = levels.iter().map(|l| l.stride).collect();
    let assignments = assign_targets(gts, &strides, img_hw);
    let num_pos: usize = assignments.iter().map(|a| a.len()).sum();
    let norm = 1.0 / (num_pos.max(1) as f64);

    cx.tape.push_scope("loss");
    let result = (|| -> Result<LossNodes> {
        // Classification: BCE against a 0/1 target map per level.
        let mut bce_sum: Option<NodeId> = None;
        for (level, nodes) in levels.iter().enumerate() {
            let shape = cx.tape.value(nodes.cls_map).shape();
            let mut target = Tensor::<T>::zeros(shape);
            {
                let td = target.data_mut();
                for a in &assignments[level] {
                    td[shape.idx(a.batch, a.gt.class, a.cell_y, a.cell_x)] = T::one();
                }
            }
            let bce = cx.tape.bce_with_logits(nodes.cls_map, target)?;
            let s = cx.tape.sum_all(bce)?;
            bce_sum = Some(match bce_sum {
                Some(acc) => cx.tape.add(acc, s)?,
                None => s,
            });
        }
        let bce_sum = bce_sum.ok_or_else(|| Error::InvalidArg("no head levels".into()))?;
        let cls_term = cx.tape.affine(bce_sum, LAMBDA_CLS * norm, 0.0)?;

        // Box: IoU loss at assigned cells, decoded exactly like inference.
        let mut iou_loss_sum: Option<NodeId> = None;
        for (level, nodes) in levels.iter().enumerate() {
            if assignments[level].is_empty() {
                continue;
            }
            let term = iou_loss_level(cx, nodes, &assignments[level], img_hw)?;
            iou_loss_sum = Some(match iou_loss_sum {
                Some(acc) => cx.tape.add(acc, term)?,
                None => term,
            });
        }
        let (total, box_value) = match iou_loss_sum {
            Some(iou_sum) => {
                let box_term = cx.tape.affine(iou_sum, LAMBDA_BOX * norm, 0.0)?;
                let total = cx.tape.add(cls_term, box_term)?;
                (total, cx.tape.value(box_term).item().as_f64())
            }
            None => (cls_term, 0.0),
        };
        Ok(LossNodes {
            total,
            cls_value: cx.tape.value(cls_term).item().as_f64(),
            box_value,
            num_pos,
        })
    })();
    cx.tape.pop_scope();
    result
}

/// Sum over one level's assignments of (1 - IoU(decoded pred, gt)).
fn iou_loss_level<T: Element>(
    cx: &mut Ctx<'_, T>,
    nodes: &LevelNodes,
    assignments: &[Assignment],
    img_hw: (usize, usize),
) -> Result<NodeId> {
    let n = assignments.len();
    let stride = nodes.stride as f64;
    let (img_h, img_w) = (img_hw.0 as f64, img_hw.1 as f64);
    let picks: Vec<(usize, usize, usize)> =
        assignments.iter().map(|a| (a.batch, a.cell_y, a.cell_x)).collect();
    let gathered = cx.tape.gather_cells(nodes.box_map, picks)?; // (n, 4, 1, 1)

    let col = |v: Vec<f64>| -> Result<NodeId> {
        let t = Tensor::from_vec(
            Shape::new(n, 1, 1, 1),
            v.into_iter().map(T::from_f64).collect(),
        )?;
        cx.tape.constant(t)
    };
    let centers_x = col(
        assignments.iter().map(|a| (a.cell_x as f64 + 0.5) * stride).collect(),
    )?;
    let centers_y = col(
        assignments.iter().map(|a| (a.cell_y as f64 + 0.5) * stride).collect(),
    )?;

    // Predicted corners from distances (already in stride units).
    let l = cx.tape.slice_channels(gathered, 0, 1)?;
    let t = cx.tape.slice_channels(gathered, 1, 2)?;
    let r = cx.tape.slice_channels(gathered, 2, 3)?;
    let b = cx.tape.slice_channels(gathered, 3, 4)?;
    let neg_l = cx.tape.affine(l, -stride, 0.0)?;
    let neg_t = cx.tape.affine(t, -stride, 0.0)?;
    let pos_r = cx.tape.affine(r, stride, 0.0)?;
    let pos_b = cx.tape.affine(b, stride, 0.0)?;
    let px1 = cx.tape.add(centers_x, neg_l)?;
    let py1 = cx.tape.add(centers_y, neg_t)?;
    let px2 = cx.tape.add(centers_x, pos_r)?;
    let py2 = cx.tape.add(centers_y, pos_b)?;

    // Ground-truth corners in pixels, as constants.
    let mut gx1 = Vec::with_capacity(n);
    let mut gy1 = Vec::with_capacity(n);
    let mut gx2 = Vec::with_capacity(n);
    let mut gy2 = Vec::with_capacity(n);
    let mut garea = Vec::with_capacity(n);
    for a in assignments {
        let (x1, y1, x2, y2) = a.gt.corners();
        let (x1, y1, x2, y2) = (x1 * img_w, y1 * img_h, x2 * img_w, y2 * img_h);
        gx1.push(x1);
        gy1.push(y1);
        gx2.push(x2);
        gy2.push(y2);
        garea.push((x2 - x1) * (y2 - y1));
    }
    let gx1 = col(gx1)?;
    let gy1 = col(gy1)?;
    let gx2 = col(gx2)?;
    let gy2 = col(gy2)?;
    let garea = col(garea)?;

    // Intersection (clamped at zero) and union with an epsilon guard.
    let ix1 = cx.tape.max2(px1, gx1)?;
    let iy1 = cx.tape.max2(py1, gy1)?;
    let ix2 = cx.tape.min2(px2, gx2)?;
    let iy2 = cx.tape.min2(py2, gy2)?;
    let iw_raw = cx.tape.sub(ix2, ix1)?;
    let ih_raw = cx.tape.sub(iy2, iy1)?;
    let iw = cx.tape.relu(iw_raw)?;
    let ih = cx.tape.relu(ih_raw)?;
    let inter = cx.tape.mul(iw, ih)?;

    let pw_raw = cx.tape.sub(px2, px1)?;
    let ph_raw = cx.tape.sub(py2, py1)?;
    let pw = cx.tape.relu(pw_raw)?;
    let ph = cx.tape.relu(ph_raw)?;
    let parea = cx.tape.mul(pw, ph)?;

    let areas = cx.tape.add(parea, garea)?;
    let union = cx.tape.sub(areas, inter)?;
    let union = cx.tape.affine(union, 1.0, 1e-7)?;
    let iou = cx.tape.div(inter, union)?;
    let one_minus = cx.tape.affine(iou, -1.0, 1.0)?;
    cx.tape.sum_all(one_minus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Ctx;
    use crate::params::ParamStore;

    fn gt(cx: f64, cy: f64, w: f64, h: f64) -> GtBox {
        GtBox { class: 0, cx, cy, w, h }
    }

    #[test]
    fn assignment_routes_by_size() {
        let strides = [8, 16, 32];
        let img = (128, 128);
        // 40 px box -> level 0 (<= 64); 100 px -> level 1 (<= 128); 150 -> level 2.
        let gts = vec![vec![
            gt(0.5, 0.5, 40.0 / 128.0, 0.1),
            gt(0.25, 0.25, 100.0 / 128.0, 0.1),
            gt(0.75, 0.75, 150.0 / 128.0, 0.2),
        ]];
        let a = assign_targets(&gts, &strides, img);
        assert_eq!(a[0].len(), 1);
        assert_eq!(a[1].len(), 1);
        assert_eq!(a[2].len(), 1);
        // center cell of (0.5, 0.5) at stride 8 on 128 px: floor(64/8) = 8
        assert_eq!((a[0][0].cell_y, a[0][0].cell_x), (8, 8));
    }

    #[test]
    fn conflicting_cells_keep_first() {
        let strides = [8];
        let gts = vec![vec![gt(0.5, 0.5, 0.2, 0.2), gt(0.51, 0.51, 0.21, 0.21)]];
        let a = assign_targets(&gts, &strides, (64, 64));
        assert_eq!(a[0].len(), 1);
        assert_eq!(a[0][0].gt.w, 0.2);
    }

    #[test]
    fn encode_then_decode_reproduces_gt() {
        let strides = [8, 16, 32];
        let img = (128, 128);
        let boxes = vec![
            gt(0.3, 0.4, 0.2, 0.15),
            gt(0.7, 0.2, 0.4, 0.66),
            gt(0.5, 0.82, 0.9, 0.3),
        ];
        let gts = vec![boxes.clone()];
        let per_level = assign_targets(&gts, &strides, img);
        for (level, assigns) in per_level.iter().enumerate() {
            for a in assigns {
                let d = encode_distances(&a.gt, (a.cell_y, a.cell_x), strides[level], img);
                // decode back: center +- distances
                let s = strides[level] as f64;
                let cx = (a.cell_x as f64 + 0.5) * s;
                let cy = (a.cell_y as f64 + 0.5) * s;
                let x1 = (cx - d[0] * s) / img.1 as f64;
                let y1 = (cy - d[1] * s) / img.0 as f64;
                let x2 = (cx + d[2] * s) / img.1 as f64;
                let y2 = (cy + d[3] * s) / img.0 as f64;
                let (gx1, gy1, gx2, gy2) = a.gt.corners();
                for (got, want) in [(x1, gx1), (y1, gy1), (x2, gx2), (y2, gy2)] {
                    assert!((got - want).abs() < 1e-5, "{got} vs {want}");
                }
            }
        }
    }

    #[test]
    fn perfect_predictions_give_tiny_loss() {
        use crate::blocks::head::LevelNodes;
        let strides = [8usize];
        let img = (32, 32);
        let gts = vec![vec![gt(0.5, 0.5, 0.5, 0.5)]];
        let per_level = assign_targets(&gts, &strides, img);
        let a = per_level[0][0];
        let d = encode_distances(&a.gt, (a.cell_y, a.cell_x), 8, img);
        let shape = Shape::new(1, 4, 4, 4);
        let mut box_map = Tensor::<f64>::zeros(shape);
        {
            let bm = box_map.data_mut();
            for (c, dv) in d.iter().enumerate() {
                bm[shape.idx(0, c, a.cell_y, a.cell_x)] = *dv;
            }
        }
        let cls_shape = Shape::new(1, 1, 4, 4);
        let mut cls_map = Tensor::<f64>::full(cls_shape, -40.0);
        cls_map.data_mut()[cls_shape.idx(0, 0, a.cell_y, a.cell_x)] = 40.0;

        let store = ParamStore::<f64>::new();
        let mut cx = Ctx::eval(&store);
        let bm = cx.tape.constant(box_map).unwrap();
        let cm = cx.tape.constant(cls_map).unwrap();
        let levels = vec![LevelNodes { box_map: bm, cls_map: cm, stride: 8 }];
        let loss = detection_loss(&mut cx, &levels, &gts, img).unwrap();
        assert_eq!(loss.num_pos, 1);
        let total = cx.tape.value(loss.total).item();
        assert!(total < 1e-3, "loss {total}");
    }

    #[test]
    fn empty_gt_image_is_pure_background_bce() {
        use crate::blocks::head::LevelNodes;
        let store = ParamStore::<f64>::new();
        let mut cx = Ctx::eval(&store);
        let bm = cx.tape.constant(Tensor::zeros(Shape::new(1, 4, 4, 4))).unwrap();
        let cm = cx.tape.constant(Tensor::full(Shape::new(1, 1, 4, 4), -2.0)).unwrap();
        let levels = vec![LevelNodes { box_map: bm, cls_map: cm, stride: 8 }];
        let gts = vec![vec![]];
        let loss = detection_loss(&mut cx, &levels, &gts, (32, 32)).unwrap();
        assert_eq!(loss.num_pos, 0);
        let total = cx.tape.value(loss.total).item();
        assert!(total.is_finite() && total > 0.0);
        assert_eq!(loss.box_value, 0.0);
    }
}
