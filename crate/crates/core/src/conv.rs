//! 2-D convolution, forward and backward, with grouping.
//!
//! Two implementations of the same math: `conv2d_reference` is the direct
//! seven-loop definition and exists as the correctness oracle; `conv2d`
//! lowers to im2col plus one GEMM per group and is what everything else
//! calls. Tests pin the two together on randomized geometry.
//!
//! Tensors are row-major: input `[N, C, H, W]`, weights `[F, C/G, k, k]`,
//! output `[N, F, HO, WO]`. No bias here; callers that want one add it as a
//! separate per-channel step.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::TensorBase;

/// Resolved geometry for one convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn resolve(
        input_shape: &[usize],
        weight_shape: &[usize],
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Self> {
        if input_shape.len() != 4 {
            return Err(Error::shape(format!(
                "conv input must be [N,C,H,W], got {input_shape:?}"
            )));
        }
        if weight_shape.len() != 4 || weight_shape[2] != weight_shape[3] {
            return Err(Error::shape(format!(
                "conv weights must be [F,C/G,k,k] with square kernel, got {weight_shape:?}"
            )));
        }
        let (n, c, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
        let (f, cg, k) = (weight_shape[0], weight_shape[1], weight_shape[2]);
        if stride == 0 || groups == 0 {
            return Err(Error::shape(format!(
                "conv stride and groups must be positive, got stride={stride} groups={groups}"
            )));
        }
        if c % groups != 0 || f % groups != 0 {
            return Err(Error::shape(format!(
                "conv channels {c} and features {f} must divide groups {groups}"
            )));
        }
        if cg != c / groups {
            return Err(Error::shape(format!(
                "conv weights {weight_shape:?} expect {cg} input channels per group, input {input_shape:?} with {groups} groups provides {}",
                c / groups
            )));
        }
        if k == 0 || k > h + 2 * pad || k > w + 2 * pad {
            return Err(Error::shape(format!(
                "conv kernel {k} does not fit input {h}x{w} with pad {pad}"
            )));
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Ok(ConvGeom { n, c, h, w, f, k, stride, pad, groups, ho, wo })
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.n, self.f, self.ho, self.wo]
    }
}

/// Direct-definition convolution. Quadratic loops, no tricks; the oracle.
pub fn conv2d_reference<T: Scalar>(
    input: &TensorBase<T>,
    weights: &TensorBase<T>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Result<TensorBase<T>> {
    let g = ConvGeom::resolve(input.shape(), weights.shape(), stride, pad, groups)?;
    let cg = g.c / g.groups;
    let fg = g.f / g.groups;
    let x = input.data();
    let w = weights.data();
    let mut out = TensorBase::zeros(&g.output_shape());
    let o = out.data_mut();
    for n in 0..g.n {
        for grp in 0..g.groups {
            for f in 0..fg {
                let fo = grp * fg + f;
                for oy in 0..g.ho {
                    for ox in 0..g.wo {
                        let mut acc = T::zero();
                        for c in 0..cg {
                            let ci = grp * cg + c;
                            for ki in 0..g.k {
                                let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                                if iy < 0 || iy >= g.h as isize {
                                    continue;
                                }
                                for kj in 0..g.k {
                                    let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                                    if ix < 0 || ix >= g.w as isize {
                                        continue;
                                    }
                                    let xi = ((n * g.c + ci) * g.h + iy as usize) * g.w + ix as usize;
                                    let wi = ((fo * cg + c) * g.k + ki) * g.k + kj;
                                    acc += x[xi] * w[wi];
                                }
                            }
                        }
                        o[((n * g.f + fo) * g.ho + oy) * g.wo + ox] = acc;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Unrolls one group's input patches into a `[cg*k*k, n*ho*wo]` matrix.
/// Column index is `(n*ho + oy)*wo + ox`; out-of-bounds taps are zero.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, grp: usize, col: &mut [T]) {
    let cg = g.c / g.groups;
    let cols = g.n * g.ho * g.wo;
    debug_assert_eq!(col.len(), cg * g.k * g.k * cols);
    for c in 0..cg {
        let ci = grp * cg + c;
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut col[row * cols..(row + 1) * cols];
                let mut idx = 0;
                for n in 0..g.n {
                    let base = (n * g.c + ci) * g.h;
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            dst[idx..idx + g.wo].fill(T::zero());
                            idx += g.wo;
                            continue;
                        }
                        let src_row = (base + iy as usize) * g.w;
                        for ox in 0..g.wo {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            dst[idx] = if ix < 0 || ix >= g.w as isize {
                                T::zero()
                            } else {
                                x[src_row + ix as usize]
                            };
                            idx += 1;
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add of the im2col layout back onto an input-shaped buffer.
/// Exact adjoint of `im2col`, used for input gradients.
fn col2im_add<T: Scalar>(col: &[T], g: &ConvGeom, grp: usize, dx: &mut [T]) {
    let cg = g.c / g.groups;
    let cols = g.n * g.ho * g.wo;
    for c in 0..cg {
        let ci = grp * cg + c;
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &col[row * cols..(row + 1) * cols];
                let mut idx = 0;
                for n in 0..g.n {
                    let base = (n * g.c + ci) * g.h;
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            idx += g.wo;
                            continue;
                        }
                        let dst_row = (base + iy as usize) * g.w;
                        for ox in 0..g.wo {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dx[dst_row + ix as usize] += src[idx];
                            }
                            idx += 1;
                        }
                    }
                }
            }
        }
    }
}

/// Gathers one group's slice of an output-shaped tensor into `[fg, cols]`.
fn gather_group<T: Scalar>(y: &[T], g: &ConvGeom, grp: usize, buf: &mut [T]) {
    let fg = g.f / g.groups;
    let hw = g.ho * g.wo;
    let cols = g.n * hw;
    for f in 0..fg {
        let fo = grp * fg + f;
        for n in 0..g.n {
            let src = &y[((n * g.f + fo) * hw)..((n * g.f + fo) * hw + hw)];
            buf[f * cols + n * hw..f * cols + (n + 1) * hw].copy_from_slice(src);
        }
    }
}

/// GEMM-backed convolution. Identical output to `conv2d_reference`.
pub fn conv2d<T: Scalar>(
    input: &TensorBase<T>,
    weights: &TensorBase<T>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Result<TensorBase<T>> {
    let g = ConvGeom::resolve(input.shape(), weights.shape(), stride, pad, groups)?;
    let cg = g.c / g.groups;
    let fg = g.f / g.groups;
    let kk = cg * g.k * g.k;
    let cols = g.n * g.ho * g.wo;
    let hw = g.ho * g.wo;
    let mut out = TensorBase::zeros(&g.output_shape());
    let mut col = vec![T::zero(); kk * cols];
    let mut prod = vec![T::zero(); fg * cols];
    for grp in 0..g.groups {
        im2col(input.data(), &g, grp, &mut col);
        let wslice = &weights.data()[grp * fg * kk..(grp + 1) * fg * kk];
        T::gemm(fg, kk, cols, T::one(), wslice, false, &col, false, T::zero(), &mut prod);
        let o = out.data_mut();
        for f in 0..fg {
            let fo = grp * fg + f;
            for n in 0..g.n {
                let dst = ((n * g.f + fo) * hw)..((n * g.f + fo) * hw + hw);
                o[dst].copy_from_slice(&prod[f * cols + n * hw..f * cols + (n + 1) * hw]);
            }
        }
    }
    Ok(out)
}

/// Gradients of a convolution: given `d(loss)/d(output)`, returns
/// `(d/d(weights), d/d(input))`.
pub fn conv2d_backward<T: Scalar>(
    input: &TensorBase<T>,
    weights: &TensorBase<T>,
    grad_out: &TensorBase<T>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Result<(TensorBase<T>, TensorBase<T>)> {
    let g = ConvGeom::resolve(input.shape(), weights.shape(), stride, pad, groups)?;
    if grad_out.shape() != g.output_shape() {
        return Err(Error::shape(format!(
            "conv backward: grad shape {:?} vs expected {:?}",
            grad_out.shape(),
            g.output_shape()
        )));
    }
    let cg = g.c / g.groups;
    let fg = g.f / g.groups;
    let kk = cg * g.k * g.k;
    let cols = g.n * g.ho * g.wo;
    let mut dw = TensorBase::zeros(weights.shape());
    let mut dx = TensorBase::zeros(input.shape());
    let mut col = vec![T::zero(); kk * cols];
    let mut dout = vec![T::zero(); fg * cols];
    let mut dcol = vec![T::zero(); kk * cols];
    for grp in 0..g.groups {
        im2col(input.data(), &g, grp, &mut col);
        gather_group(grad_out.data(), &g, grp, &mut dout);
        // dW = dOut * col^T, dCol = W^T * dOut
        let dw_slice = &mut dw.data_mut()[grp * fg * kk..(grp + 1) * fg * kk];
        T::gemm(fg, cols, kk, T::one(), &dout, false, &col, true, T::zero(), dw_slice);
        let wslice = &weights.data()[grp * fg * kk..(grp + 1) * fg * kk];
        T::gemm(kk, fg, cols, T::one(), wslice, true, &dout, false, T::zero(), &mut dcol);
        col2im_add(&dcol, &g, grp, dx.data_mut());
    }
    Ok((dw, dx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    type T64 = TensorBase<f64>;

    fn rand_tensor(rng: &mut ChaCha12Rng, shape: &[usize]) -> T64 {
        let n = shape.iter().product();
        T64::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn close(a: &T64, b: &T64, tol: f64) {
        assert_eq!(a.shape(), b.shape());
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < tol, "{x} vs {y}");
        }
    }

    #[test]
    fn known_3x3_identity_kernel() {
        let x = T64::new(&[1, 1, 3, 3], (1..=9).map(|i| i as f64).collect()).unwrap();
        let mut w = vec![0.0; 9];
        w[4] = 1.0; // center tap
        let w = T64::new(&[1, 1, 3, 3], w).unwrap();
        let y = conv2d(&x, &w, 1, 1, 1).unwrap();
        close(&y, &x, 1e-12);
    }

    #[test]
    fn known_sum_kernel_no_pad() {
        let x = T64::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = T64::new(&[1, 1, 2, 2], vec![1.0; 4]).unwrap();
        let y = conv2d(&x, &w, 1, 0, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data()[0], 10.0);
    }

    #[test]
    fn rejects_kernel_larger_than_padded_input() {
        let x = T64::zeros(&[1, 1, 3, 3]);
        let w = T64::zeros(&[1, 1, 5, 5]);
        let err = conv2d(&x, &w, 1, 0, 1).unwrap_err().to_string();
        assert!(err.contains('5') && err.contains("3x3"), "{err}");
    }

    #[test]
    fn rejects_group_mismatch() {
        let x = T64::zeros(&[1, 4, 6, 6]);
        let w = T64::zeros(&[6, 2, 3, 3]);
        // 6 features do not divide into 4 groups
        assert!(conv2d(&x, &w, 1, 0, 4).is_err());
    }

    #[test]
    fn gemm_path_matches_reference_on_fixed_geometries() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        // (c, f, h, w, k, stride, pad, groups)
        let cases = [
            (4, 8, 9, 9, 3, 1, 1, 1),
            (4, 32, 24, 24, 4, 4, 0, 1),
            (16, 32, 6, 6, 3, 1, 1, 4),
            (6, 6, 5, 7, 1, 1, 0, 3),
            (8, 12, 11, 8, 5, 2, 2, 2),
            (3, 5, 8, 8, 8, 4, 0, 1),
        ];
        for (c, f, h, w, k, s, p, g) in cases {
            let x = rand_tensor(&mut rng, &[2, c, h, w]);
            let wt = rand_tensor(&mut rng, &[f, c / g, k, k]);
            let a = conv2d(&x, &wt, s, p, g).unwrap();
            let b = conv2d_reference(&x, &wt, s, p, g).unwrap();
            close(&a, &b, 1e-10);
        }
    }

    #[test]
    fn grouped_conv_equals_stacked_independent_convs() {
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let (n, c, f, h, w, k, g) = (2, 6, 9, 7, 7, 3, 3);
        let x = rand_tensor(&mut rng, &[n, c, h, w]);
        let wt = rand_tensor(&mut rng, &[f, c / g, k, k]);
        let whole = conv2d(&x, &wt, 1, 1, g).unwrap();
        let (cg, fg) = (c / g, f / g);
        for grp in 0..g {
            // slice channels [grp*cg, (grp+1)*cg) and weights [grp*fg, ..)
            let mut xs = T64::zeros(&[n, cg, h, w]);
            for ni in 0..n {
                for ci in 0..cg {
                    let src = ((ni * c + grp * cg + ci) * h * w)..((ni * c + grp * cg + ci + 1) * h * w);
                    let dst = ((ni * cg + ci) * h * w)..((ni * cg + ci + 1) * h * w);
                    xs.data_mut()[dst].copy_from_slice(&x.data()[src]);
                }
            }
            let ws = T64::new(
                &[fg, cg, k, k],
                wt.data()[grp * fg * cg * k * k..(grp + 1) * fg * cg * k * k].to_vec(),
            )
            .unwrap();
            let part = conv2d(&xs, &ws, 1, 1, 1).unwrap();
            let [_, _, ho, wo] = ConvGeom::resolve(x.shape(), wt.shape(), 1, 1, g)
                .unwrap()
                .output_shape();
            for ni in 0..n {
                for fi in 0..fg {
                    for s in 0..ho * wo {
                        let got = whole.data()[((ni * f + grp * fg + fi) * ho * wo) + s];
                        let want = part.data()[((ni * fg + fi) * ho * wo) + s];
                        assert!((got - want).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        let (c, f, h, w, k, s, p, g) = (4, 6, 6, 6, 3, 2, 1, 2);
        let x = rand_tensor(&mut rng, &[2, c, h, w]);
        let wt = rand_tensor(&mut rng, &[f, c / g, k, k]);
        // loss = sum(conv * coeff) with fixed random coefficients
        let y0 = conv2d(&x, &wt, s, p, g).unwrap();
        let coeff = rand_tensor(&mut rng, y0.shape());
        let loss = |xt: &T64, wt: &T64| -> f64 {
            let y = conv2d(xt, wt, s, p, g).unwrap();
            y.data().iter().zip(coeff.data()).map(|(a, b)| a * b).sum()
        };
        let (dw, dx) = conv2d_backward(&x, &wt, &coeff, s, p, g).unwrap();
        let eps = 1e-5;
        for probe in 0..40 {
            let i = rng.gen_range(0..wt.len());
            let mut wp = wt.clone();
            let mut wm = wt.clone();
            wp.data_mut()[i] += eps;
            wm.data_mut()[i] -= eps;
            let num = (loss(&x, &wp) - loss(&x, &wm)) / (2.0 * eps);
            let ana = dw.data()[i];
            let rel = (num - ana).abs() / (num.abs() + ana.abs()).max(1e-8);
            assert!(rel < 1e-6, "weight probe {probe}: fd {num} vs {ana}");
        }
        for probe in 0..40 {
            let i = rng.gen_range(0..x.len());
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.data_mut()[i] += eps;
            xm.data_mut()[i] -= eps;
            let num = (loss(&xp, &wt) - loss(&xm, &wt)) / (2.0 * eps);
            let ana = dx.data()[i];
            let rel = (num - ana).abs() / (num.abs() + ana.abs()).max(1e-8);
            assert!(rel < 1e-6, "input probe {probe}: fd {num} vs {ana}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn gemm_path_matches_reference_randomized(
            seed in 0u64..1000,
            c_per_g in 1usize..4,
            f_per_g in 1usize..4,
            groups in 1usize..4,
            k in 1usize..5,
            stride in 1usize..4,
            pad in 0usize..3,
            extra in 0usize..6,
        ) {
            let c = c_per_g * groups;
            let f = f_per_g * groups;
            let h = k + extra;
            let w = k + (extra + 1) / 2;
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let x = rand_tensor(&mut rng, &[2, c, h, w]);
            let wt = rand_tensor(&mut rng, &[f, c_per_g, k, k]);
            let a = conv2d(&x, &wt, stride, pad, groups).unwrap();
            let b = conv2d_reference(&x, &wt, stride, pad, groups).unwrap();
            prop_assert_eq!(a.shape(), b.shape());
            for (p, q) in a.data().iter().zip(b.data()) {
                prop_assert!((p - q).abs() < 1e-10);
            }
        }
    }
}
