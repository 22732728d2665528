//! Scalar and array kernels shared by the autodiff ops and their adjoints.
//!
//! Everything here is plain data-in/data-out: no tape, no parameters. The
//! convolution is expressed as im2col + GEMM; bilinear resizing uses the
//! half-pixel-center convention (`src = (dst + 0.5) * scale - 0.5`) so a
//! resize to the same size is the identity.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow for large `|x|`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `ln(sigmoid(x))`, stable for very negative `x`.
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

/// Binary cross-entropy on a logit: `-t ln σ(x) - (1-t) ln(1-σ(x))`.
///
/// Evaluated as `max(x,0) - x·t + ln(1 + e^{-|x|})`, which never forms an
/// infinite intermediate.
pub fn bce_with_logits(x: f64, t: f64) -> f64 {
    x.max(0.0) - x * t + (-x.abs()).exp().ln_1p()
}

/// Mean binary cross-entropy between probability masks, with the prediction
/// clamped to `[clamp, 1-clamp]` before the logs.
pub fn bce_mean_probs(pred: &ArrayView2<f64>, target: &ArrayView2<f64>, clamp: f64) -> f64 {
    debug_assert_eq!(pred.dim(), target.dim());
    let n = pred.len() as f64;
    pred.iter()
        .zip(target.iter())
        .map(|(&m, &g)| {
            let m = m.clamp(clamp, 1.0 - clamp);
            -(g * m.ln() + (1.0 - g) * (1.0 - m).ln())
        })
        .sum::<f64>()
        / n
}

/// Overlap (Dice) loss between probability masks with linear denominator:
/// `1 - (2Σmg + ε) / (Σm + Σg + ε)`.
pub fn dice_loss_probs(pred: &ArrayView2<f64>, target: &ArrayView2<f64>, eps: f64) -> f64 {
    debug_assert_eq!(pred.dim(), target.dim());
    let mut num = 0.0;
    let mut den = 0.0;
    for (&m, &g) in pred.iter().zip(target.iter()) {
        num += 2.0 * m * g;
        den += m + g;
    }
    1.0 - (num + eps) / (den + eps)
}

/// Output extent of a strided, padded convolution along one axis.
pub fn conv_out_dim(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    debug_assert!(n + 2 * pad >= k);
    (n + 2 * pad - k) / stride + 1
}

/// Unfold `x: [C, H, W]` into a `[C*kh*kw, oh*ow]` patch matrix.
///
/// Column `oy*ow + ox` holds the receptive field of output pixel `(oy, ox)`;
/// out-of-bounds taps (from padding) contribute zeros.
pub fn im2col(
    x: &ArrayView3<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(w, kw, stride, pad);
    let mut cols = Array2::<f64>::zeros((c * kh * kw, oh * ow));
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[[row, oy * ow + ox]] = x[[ci, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add a patch-matrix gradient back onto the
/// `[C, H, W]` input layout.
pub fn col2im(
    cols: &ArrayView2<f64>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array3<f64> {
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(w, kw, stride, pad);
    debug_assert_eq!(cols.dim(), (c * kh * kw, oh * ow));
    let mut x = Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        x[[ci, iy as usize, ix as usize]] += cols[[row, oy * ow + ox]];
                    }
                }
            }
        }
    }
    x
}

/// One output pixel of a bilinear resize: four (input index, weight) taps.
#[derive(Clone, Copy)]
pub struct Tap {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
    /// Weights for (y0,x0), (y0,x1), (y1,x0), (y1,x1); they sum to 1.
    pub w: [f64; 4],
}

/// Precompute the tap table for resizing `(in_h, in_w) -> (out_h, out_w)`.
pub fn bilinear_plan(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Vec<Tap> {
    assert!(in_h > 0 && in_w > 0 && out_h > 0 && out_w > 0);
    let axis = |n_in: usize, n_out: usize, o: usize| -> (usize, usize, f64) {
        let s = (o as f64 + 0.5) * (n_in as f64 / n_out as f64) - 0.5;
        let s = s.clamp(0.0, (n_in - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut taps = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let (y0, y1, fy) = axis(in_h, out_h, oy);
        for ox in 0..out_w {
            let (x0, x1, fx) = axis(in_w, out_w, ox);
            taps.push(Tap {
                y0,
                y1,
                x0,
                x1,
                w: [
                    (1.0 - fy) * (1.0 - fx),
                    (1.0 - fy) * fx,
                    fy * (1.0 - fx),
                    fy * fx,
                ],
            });
        }
    }
    taps
}

/// Resize `x: [C, in_h, in_w]` to `[C, out_h, out_w]` with the given plan.
pub fn bilinear_apply(
    plan: &[Tap],
    x: &ArrayView3<f64>,
    out_h: usize,
    out_w: usize,
) -> Array3<f64> {
    let (c, _, _) = x.dim();
    let mut y = Array3::<f64>::zeros((c, out_h, out_w));
    for ci in 0..c {
        let xp = x.index_axis(ndarray::Axis(0), ci);
        let mut yp = y.index_axis_mut(ndarray::Axis(0), ci);
        for (o, t) in plan.iter().enumerate() {
            let v = t.w[0] * xp[[t.y0, t.x0]]
                + t.w[1] * xp[[t.y0, t.x1]]
                + t.w[2] * xp[[t.y1, t.x0]]
                + t.w[3] * xp[[t.y1, t.x1]];
            yp[[o / out_w, o % out_w]] = v;
        }
    }
    y
}

/// Adjoint of [`bilinear_apply`]: scatter an output-space gradient back to
/// input space.
pub fn bilinear_apply_t(
    plan: &[Tap],
    g: &ArrayView3<f64>,
    in_h: usize,
    in_w: usize,
) -> Array3<f64> {
    let (c, _, out_w) = g.dim();
    let mut y = Array3::<f64>::zeros((c, in_h, in_w));
    for ci in 0..c {
        let gp = g.index_axis(ndarray::Axis(0), ci);
        let mut yp = y.index_axis_mut(ndarray::Axis(0), ci);
        for (o, t) in plan.iter().enumerate() {
            let gv = gp[[o / out_w, o % out_w]];
            yp[[t.y0, t.x0]] += t.w[0] * gv;
            yp[[t.y0, t.x1]] += t.w[1] * gv;
            yp[[t.y1, t.x0]] += t.w[2] * gv;
            yp[[t.y1, t.x1]] += t.w[3] * gv;
        }
    }
    y
}

/// Block-average `x: [H, W]` down to `[oh, ow]`; `H`/`W` must be exact
/// multiples of `oh`/`ow`. Used to bring full-resolution masks to the grid a
/// decoder predicts on while preserving area fractions.
pub fn area_downsample(x: &ArrayView2<f64>, oh: usize, ow: usize) -> Array2<f64> {
    let (h, w) = x.dim();
    assert!(
        h % oh == 0 && w % ow == 0,
        "area_downsample needs integer block sizes ({h}x{w} -> {oh}x{ow})"
    );
    let by = h / oh;
    let bx = w / ow;
    let norm = 1.0 / (by * bx) as f64;
    let mut y = Array2::<f64>::zeros((oh, ow));
    for i in 0..oh {
        for j in 0..ow {
            let mut s = 0.0;
            for di in 0..by {
                for dj in 0..bx {
                    s += x[[i * by + di, j * bx + dj]];
                }
            }
            y[[i, j]] = s * norm;
        }
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::arr2;

    #[test]
    fn sigmoid_matches_naive_and_is_stable() {
        for &x in &[-700.0, -30.0, -1.5, 0.0, 2.5, 30.0, 700.0] {
            let s = sigmoid(x);
            assert!(s.is_finite() && (0.0..=1.0).contains(&s));
            if x.abs() < 30.0 {
                assert_abs_diff_eq!(s, 1.0 / (1.0 + (-x as f64).exp()), epsilon = 1e-12);
            }
        }
        assert_abs_diff_eq!(bce_with_logits(0.0, 1.0), std::f64::consts::LN_2, epsilon = 1e-12);
        assert!(bce_with_logits(-500.0, 1.0).is_finite());
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <im2col(x), c> == <x, col2im(c)> for random x, c — the defining
        // property of a linear map and its transpose.
        use rand::RngExt;
        let mut r = crate::rng::derive(11, "kernels-adjoint", 0);
        let x = Array3::from_shape_fn((2, 5, 6), |_| r.random_range(-1.0..1.0));
        let (kh, kw, stride, pad) = (3, 3, 2, 1);
        let cols = im2col(&x.view(), kh, kw, stride, pad);
        let c = Array2::from_shape_fn(cols.dim(), |_| r.random_range(-1.0..1.0));
        let lhs: f64 = (&cols * &c).sum();
        let back = col2im(&c.view(), 2, 5, 6, kh, kw, stride, pad);
        let rhs: f64 = (&x * &back).sum();
        assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-10);
    }

    #[test]
    fn conv_dims_and_patch_content() {
        assert_eq!(conv_out_dim(64, 4, 4, 0), 16);
        assert_eq!(conv_out_dim(16, 3, 2, 1), 8);
        let x = Array3::from_shape_fn((1, 3, 3), |(_, i, j)| (i * 3 + j) as f64);
        let cols = im2col(&x.view(), 3, 3, 1, 1);
        // Center output pixel sees the whole image.
        let center: Vec<f64> = cols.column(4).to_vec();
        assert_eq!(center, (0..9).map(|v| v as f64).collect::<Vec<_>>());
        // Top-left output pixel: padded taps are zero.
        assert_eq!(cols[[0, 0]], 0.0);
        assert_eq!(cols[[4, 0]], 0.0); // tap at (0,0) of kernel center
    }

    #[test]
    fn bilinear_identity_and_adjoint() {
        use rand::RngExt;
        let mut r = crate::rng::derive(3, "kernels-bilinear", 0);
        let x = Array3::from_shape_fn((3, 4, 4), |_| r.random_range(-1.0..1.0));
        let plan = bilinear_plan(4, 4, 4, 4);
        let y = bilinear_apply(&plan, &x.view(), 4, 4);
        assert_abs_diff_eq!(
            y.iter().zip(x.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max),
            0.0,
            epsilon = 1e-15
        );

        let plan = bilinear_plan(4, 4, 9, 7);
        let g = Array3::from_shape_fn((3, 9, 7), |_| r.random_range(-1.0..1.0));
        let up = bilinear_apply(&plan, &x.view(), 9, 7);
        let down = bilinear_apply_t(&plan, &g.view(), 4, 4);
        let lhs: f64 = (&up * &g).sum();
        let rhs: f64 = (&x * &down).sum();
        assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-10);
    }

    #[test]
    fn bilinear_doubling_midpoints() {
        // 1-D ramp doubled: interior outputs interpolate neighbouring inputs
        // at quarter offsets under the half-pixel convention.
        let x = Array3::from_shape_fn((1, 1, 4), |(_, _, j)| j as f64);
        let plan = bilinear_plan(1, 4, 1, 8);
        let y = bilinear_apply(&plan, &x.view(), 1, 8);
        let expect = [0.0, 0.25, 0.75, 1.25, 1.75, 2.25, 2.75, 3.0];
        for (a, b) in y.iter().zip(expect.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn area_downsample_averages_blocks() {
        let x = arr2(&[
            [1.0, 1.0, 0.0, 0.0],
            [1.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 0.0],
        ]);
        let y = area_downsample(&x.view(), 2, 2);
        assert_eq!(y, arr2(&[[1.0, 0.0], [0.0, 0.25]]));
    }
}
