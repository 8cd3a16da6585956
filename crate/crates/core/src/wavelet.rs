//! Fixed Haar filter-bank analysis and synthesis.
//!
//! The four 2x2 kernels split a feature map into one approximation (LL) and
//! three detail (LH, HL, HH) subbands at half resolution. The kernels form
//! an orthonormal basis of each 2x2 block, so analysis preserves energy and
//! synthesis is its exact inverse (and adjoint). The filters are constants:
//! they are never trained and receive no gradient.
//!
//! Subband layout: analysis of a (B, C, H, W) tensor yields
//! (B, 4C, H/2, W/2) with channel blocks ordered [LL | LH | HL | HH],
//! each block C channels wide. Checkpoints depend on this order.

use crate::error::{Error, Result};
use crate::tensor::ops;
use crate::tensor::{Element, Shape, Tensor};

/// Number of subbands produced per input channel.
pub const SUBBANDS: usize = 4;

/// The four fixed 2x2 analysis/synthesis kernels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FilterBank {
    /// [LL, LH, HL, HH], each row-major 2x2.
    pub kernels: [[f64; 4]; 4],
}

impl FilterBank {
    pub const fn haar() -> FilterBank {
        FilterBank {
            kernels: [
                [0.5, 0.5, 0.5, 0.5],     // LL
                [-0.5, -0.5, 0.5, 0.5],   // LH
                [-0.5, 0.5, -0.5, 0.5],   // HL
                [0.5, -0.5, -0.5, 0.5],   // HH
            ],
        }
    }

    /// Gram matrix of the flattened kernels; identity for an orthonormal bank.
    pub fn gram(&self) -> [[f64; 4]; 4] {
        let mut g = [[0.0; 4]; 4];
        for (i, a) in self.kernels.iter().enumerate() {
            for (j, b) in self.kernels.iter().enumerate() {
                g[i][j] = a.iter().zip(b).map(|(x, y)| x * y).sum();
            }
        }
        g
    }

    pub fn is_orthonormal(&self) -> bool {
        let g = self.gram();
        (0..4).all(|i| (0..4).all(|j| g[i][j] == if i == j { 1.0 } else { 0.0 }))
    }
}

/// Subband tensor with provenance: the pre-pad source height/width, so a
/// later synthesis can crop back to the original odd size.
#[derive(Clone, Debug)]
pub struct Subbands<T: Element> {
    pub tensor: Tensor<T>,
    pub source_h: usize,
    pub source_w: usize,
}

/// Depthwise stride-2 valid correlation of each kernel with each channel.
/// Input must have even spatial dims; see [`haar_analysis`] for padding.
pub fn analysis_raw<T: Element>(x: &Tensor<T>, bank: &FilterBank) -> Tensor<T> {
    let s = x.shape();
    debug_assert!(s.h % 2 == 0 && s.w % 2 == 0, "analysis_raw needs even dims");
    let (ho, wo) = (s.h / 2, s.w / 2);
    let out_shape = Shape::new(s.b, SUBBANDS * s.c, ho, wo);
    let k: Vec<[T; 4]> = bank
        .kernels
        .iter()
        .map(|kk| [T::from_f64(kk[0]), T::from_f64(kk[1]), T::from_f64(kk[2]), T::from_f64(kk[3])])
        .collect();
    let xd = x.data();
    let mut out = vec![T::zero(); out_shape.numel()];
    for b in 0..s.b {
        for c in 0..s.c {
            for (j, kj) in k.iter().enumerate() {
                let oc = j * s.c + c;
                for i in 0..ho {
                    let r0 = s.idx(b, c, 2 * i, 0);
                    let r1 = s.idx(b, c, 2 * i + 1, 0);
                    let orow = out_shape.idx(b, oc, i, 0);
                    for jj in 0..wo {
                        let x0 = xd[r0 + 2 * jj];
                        let x1 = xd[r0 + 2 * jj + 1];
                        let x2 = xd[r1 + 2 * jj];
                        let x3 = xd[r1 + 2 * jj + 1];
                        out[orow + jj] = kj[0] * x0 + kj[1] * x1 + kj[2] * x2 + kj[3] * x3;
                    }
                }
            }
        }
    }
    Tensor::from_vec(out_shape, out).unwrap()
}

/// Sum over subbands of the stride-2 transposed convolution with the same
/// kernels: the exact inverse (and adjoint) of [`analysis_raw`].
pub fn synthesis_raw<T: Element>(s: &Tensor<T>, bank: &FilterBank) -> Result<Tensor<T>> {
    let ss = s.shape();
    if ss.c % SUBBANDS != 0 {
        return Err(Error::shape(
            "haar_synthesis",
            format!("channels {} not divisible by {}", ss.c, SUBBANDS),
        ));
    }
    let c = ss.c / SUBBANDS;
    let out_shape = Shape::new(ss.b, c, ss.h * 2, ss.w * 2);
    let k: Vec<[T; 4]> = bank
        .kernels
        .iter()
        .map(|kk| [T::from_f64(kk[0]), T::from_f64(kk[1]), T::from_f64(kk[2]), T::from_f64(kk[3])])
        .collect();
    let sd = s.data();
    let mut out = vec![T::zero(); out_shape.numel()];
    for b in 0..ss.b {
        for ch in 0..c {
            for (j, kj) in k.iter().enumerate() {
                let ic = j * c + ch;
                for i in 0..ss.h {
                    let srow = ss.idx(b, ic, i, 0);
                    let o0 = out_shape.idx(b, ch, 2 * i, 0);
                    let o1 = out_shape.idx(b, ch, 2 * i + 1, 0);
                    for jj in 0..ss.w {
                        let v = sd[srow + jj];
                        out[o0 + 2 * jj] = out[o0 + 2 * jj] + kj[0] * v;
                        out[o0 + 2 * jj + 1] = out[o0 + 2 * jj + 1] + kj[1] * v;
                        out[o1 + 2 * jj] = out[o1 + 2 * jj] + kj[2] * v;
                        out[o1 + 2 * jj + 1] = out[o1 + 2 * jj + 1] + kj[3] * v;
                    }
                }
            }
        }
    }
    Tensor::from_vec(out_shape, out)
}

/// Haar analysis of an arbitrary tensor. Odd spatial sizes are zero-padded
/// on the right/bottom first; the original size is kept in the result.
pub fn haar_analysis<T: Element>(x: &Tensor<T>) -> Result<Subbands<T>> {
    let s = x.shape();
    if s.h == 0 || s.w == 0 {
        return Err(Error::shape("haar_analysis", "empty spatial dims"));
    }
    let (ph, pw) = (s.h % 2, s.w % 2);
    let padded = if ph + pw > 0 { ops::pad_right_bottom(x, ph, pw) } else { x.clone() };
    Ok(Subbands {
        tensor: analysis_raw(&padded, &FilterBank::haar()),
        source_h: s.h,
        source_w: s.w,
    })
}

/// Haar synthesis; crops back to the recorded source size.
pub fn haar_synthesis<T: Element>(s: &Subbands<T>) -> Result<Tensor<T>> {
    let full = synthesis_raw(&s.tensor, &FilterBank::haar())?;
    let fs = full.shape();
    if fs.h != s.source_h || fs.w != s.source_w {
        return Ok(ops::crop_to(&full, s.source_h, s.source_w));
    }
    Ok(full)
}

/// Parameter-free upsampling: interprets channel blocks as subbands and
/// synthesizes the double-resolution map. (B, 4k, H, W) -> (B, k, 2H, 2W).
pub fn wavelet_unpool<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    synthesis_raw(x, &FilterBank::haar())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedTree;
    use rand::Rng;

    fn rand_tensor(shape: Shape, seed: u64) -> Tensor<f64> {
        let mut rng = SeedTree::new(seed).split("wavelet-test").rng();
        let data = (0..shape.numel()).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn kernels_match_definition() {
        let bank = FilterBank::haar();
        assert_eq!(bank.kernels[0], [0.5, 0.5, 0.5, 0.5]);
        assert_eq!(bank.kernels[1], [-0.5, -0.5, 0.5, 0.5]);
        assert_eq!(bank.kernels[2], [-0.5, 0.5, -0.5, 0.5]);
        assert_eq!(bank.kernels[3], [0.5, -0.5, -0.5, 0.5]);
    }

    #[test]
    fn gram_is_exact_identity() {
        assert!(FilterBank::haar().is_orthonormal());
        // A corrupted bank must fail the check.
        let mut bad = FilterBank::haar();
        bad.kernels[0][0] = 0.6;
        assert!(!bad.is_orthonormal());
    }

    #[test]
    fn constant_input_lands_in_ll() {
        let a = 1.75;
        let x = Tensor::<f64>::full(Shape::new(1, 2, 4, 4), a);
        let s = haar_analysis(&x).unwrap().tensor;
        assert_eq!(s.shape(), Shape::new(1, 8, 2, 2));
        for c in 0..2 {
            for i in 0..2 {
                for j in 0..2 {
                    assert_eq!(s.at(0, c, i, j), 2.0 * a); // LL block
                    assert_eq!(s.at(0, 2 + c, i, j), 0.0); // LH
                    assert_eq!(s.at(0, 4 + c, i, j), 0.0); // HL
                    assert_eq!(s.at(0, 6 + c, i, j), 0.0); // HH
                }
            }
        }
    }

    #[test]
    fn horizontal_step_cell() {
        // One 2x2 cell [1,1;0,0]: LL 1, LH -1, HL 0, HH 0.
        let x = Tensor::<f64>::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let s = haar_analysis(&x).unwrap().tensor;
        assert_eq!(s.at(0, 0, 0, 0), 1.0);
        assert_eq!(s.at(0, 1, 0, 0), -1.0);
        assert_eq!(s.at(0, 2, 0, 0), 0.0);
        assert_eq!(s.at(0, 3, 0, 0), 0.0);
    }

    #[test]
    fn energy_preserved() {
        let x = rand_tensor(Shape::new(2, 3, 8, 6), 1);
        let s = haar_analysis(&x).unwrap().tensor;
        let ex = x.sum_squares_f64();
        let es = s.sum_squares_f64();
        assert!((ex - es).abs() <= 1e-6 * ex.max(1.0));
    }

    #[test]
    fn perfect_reconstruction_even_and_odd() {
        for (h, w, seed) in [(8, 8, 2), (6, 10, 3), (7, 9, 4), (5, 8, 5)] {
            let x = rand_tensor(Shape::new(1, 2, h, w), seed);
            let s = haar_analysis(&x).unwrap();
            let y = haar_synthesis(&s).unwrap();
            assert_eq!(y.shape(), x.shape());
            assert!(y.max_rel_diff(&x) < 1e-12, "h={h} w={w}");
        }
    }

    #[test]
    fn unpool_inverts_analysis() {
        let x = rand_tensor(Shape::new(2, 3, 6, 4), 6);
        let s = haar_analysis(&x).unwrap().tensor;
        let y = wavelet_unpool(&s).unwrap();
        assert!(y.max_rel_diff(&x) < 1e-12);
    }

    #[test]
    fn unpool_rejects_bad_channels() {
        let x = rand_tensor(Shape::new(1, 6, 4, 4), 7);
        assert!(wavelet_unpool(&x).is_err());
    }

    #[test]
    fn zero_subbands_zero_image() {
        let s = Tensor::<f64>::zeros(Shape::new(1, 8, 3, 3));
        let y = wavelet_unpool(&s).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ll_only_reconstructs_constant() {
        let a = 3.0;
        let x = Tensor::<f64>::full(Shape::new(1, 1, 4, 4), a);
        let mut s = haar_analysis(&x).unwrap();
        // zero the detail blocks; a constant image lives entirely in LL
        let c = 1;
        let mut t = s.tensor.clone();
        let sh = t.shape();
        {
            let d = t.data_mut();
            for oc in c..4 * c {
                for i in 0..sh.h {
                    for j in 0..sh.w {
                        d[sh.idx(0, oc, i, j)] = 0.0;
                    }
                }
            }
        }
        s.tensor = t;
        let y = haar_synthesis(&s).unwrap();
        assert!(y.max_rel_diff(&x) < 1e-12);
    }

    #[test]
    fn shift_by_two_shifts_subbands_by_one() {
        let x = rand_tensor(Shape::new(1, 1, 12, 12), 8);
        // translate by (2,2): shifted(b,c,i,j) = x(b,c,i-2,j-2)
        let sh = x.shape();
        let mut shifted = Tensor::<f64>::zeros(sh);
        {
            let d = shifted.data_mut();
            for i in 2..sh.h {
                for j in 2..sh.w {
                    d[sh.idx(0, 0, i, j)] = x.at(0, 0, i - 2, j - 2);
                }
            }
        }
        let sa = haar_analysis(&x).unwrap().tensor;
        let sb = haar_analysis(&shifted).unwrap().tensor;
        let ss = sa.shape();
        for c in 0..4 {
            for i in 1..ss.h - 1 {
                for j in 1..ss.w - 1 {
                    let a = sa.at(0, c, i - 1, j - 1);
                    let b = sb.at(0, c, i, j);
                    assert!((a - b).abs() < 1e-12, "subband {c} interior mismatch");
                }
            }
        }
    }

    #[test]
    fn analysis_matches_depthwise_conv_reference() {
        // Cross-check the specialized kernel against the generic conv2d path.
        let x = rand_tensor(Shape::new(1, 3, 6, 6), 9);
        let s = haar_analysis(&x).unwrap().tensor;
        let bank = FilterBank::haar();
        for (j, kk) in bank.kernels.iter().enumerate() {
            let w = Tensor::<f64>::from_vec(
                Shape::new(3, 1, 2, 2),
                (0..3).flat_map(|_| kk.iter().copied()).collect(),
            )
            .unwrap();
            let y = ops::conv2d(
                &x,
                &w,
                None,
                &ops::Conv2dMeta { stride: 2, pad: 0, dilation: 1, groups: 3 },
            )
            .unwrap();
            for c in 0..3 {
                for i in 0..3 {
                    for jj in 0..3 {
                        assert!((y.at(0, c, i, jj) - s.at(0, j * 3 + c, i, jj)).abs() < 1e-12);
                    }
                }
            }
        }
    }
}
