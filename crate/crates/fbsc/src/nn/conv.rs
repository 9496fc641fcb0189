//! 2-D convolution kernels (im2col + GEMM), batch-parallel.
//!
//! Parallelism is only ever across batch samples with disjoint outputs, and
//! cross-sample reductions are summed in index order, so results are
//! bit-identical regardless of thread count.

use ndarray::{Array1, Array2, Array3, Array4, ArrayView3, ArrayView4, Axis, Zip};
use rayon::prelude::*;

/// Row-major GEMM: C = alpha * A(op) * B(op) + beta * C.
pub(crate) fn gemm(
    a: &[f64],
    a_rows: usize,
    a_cols: usize,
    trans_a: bool,
    b: &[f64],
    b_rows: usize,
    b_cols: usize,
    trans_b: bool,
    c: &mut [f64],
    alpha: f64,
    beta: f64,
) {
    let (m, ka) = if trans_a {
        (a_cols, a_rows)
    } else {
        (a_rows, a_cols)
    };
    let (kb, n) = if trans_b {
        (b_cols, b_rows)
    } else {
        (b_rows, b_cols)
    };
    assert_eq!(ka, kb, "gemm inner dimensions");
    assert_eq!(c.len(), m * n, "gemm output size");
    let (rsa, csa) = if trans_a {
        (1, a_cols as isize)
    } else {
        (a_cols as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, b_cols as isize)
    } else {
        (b_cols as isize, 1)
    };
    unsafe {
        matrixmultiply::dgemm(
            m,
            ka,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn out_dim(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// Unfold one sample into a (C*k*k, ho*wo) patch matrix.
fn im2col(x: &ArrayView3<f64>, k: usize, stride: usize, pad: usize) -> Array2<f64> {
    let (c_in, h, w) = x.dim();
    let ho = out_dim(h, k, stride, pad);
    let wo = out_dim(w, k, stride, pad);
    let mut col = Array2::zeros((c_in * k * k, ho * wo));
    for c in 0..c_in {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let mut dst = col.row_mut(row);
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dst[oy * wo + ox] = x[[c, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add the transpose of [`im2col`]: fold a patch-gradient matrix
/// back onto an input-shaped gradient.
fn col2im(
    col: &Array2<f64>,
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Array3<f64> {
    let ho = out_dim(h, k, stride, pad);
    let wo = out_dim(w, k, stride, pad);
    let mut x = Array3::zeros((c_in, h, w));
    for c in 0..c_in {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = col.row(row);
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        x[[c, iy as usize, ix as usize]] += src[oy * wo + ox];
                    }
                }
            }
        }
    }
    x
}

/// Forward convolution. x: (B, Ci, H, W), w: (Co, Ci, k, k), b: (Co).
pub fn conv2d_fwd(
    x: &ArrayView4<f64>,
    w: &ArrayView4<f64>,
    b: &[f64],
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let (bsz, c_in, h, win) = x.dim();
    let (c_out, c_in_w, k, _) = w.dim();
    assert_eq!(c_in, c_in_w, "conv input channels");
    let ho = out_dim(h, k, stride, pad);
    let wo = out_dim(win, k, stride, pad);
    let w_flat = w.to_shape((c_out, c_in * k * k)).unwrap();
    let w_slice = w_flat.as_slice().unwrap();
    let mut out = Array4::zeros((bsz, c_out, ho, wo));
    Zip::from(out.axis_iter_mut(Axis(0)))
        .and(x.axis_iter(Axis(0)))
        .par_for_each(|mut ob, xb| {
            let col = im2col(&xb, k, stride, pad);
            let mut y = vec![0.0; c_out * ho * wo];
            gemm(
                w_slice,
                c_out,
                c_in * k * k,
                false,
                col.as_slice().unwrap(),
                c_in * k * k,
                ho * wo,
                false,
                &mut y,
                1.0,
                0.0,
            );
            for co in 0..c_out {
                let bias = b[co];
                let plane = &y[co * ho * wo..(co + 1) * ho * wo];
                let mut dst = ob.index_axis_mut(Axis(0), co);
                let dst = dst.as_slice_mut().unwrap();
                for (d, s) in dst.iter_mut().zip(plane) {
                    *d = s + bias;
                }
            }
        });
    out
}

/// Gradient w.r.t. the convolution input.
pub fn conv2d_bwd_input(
    dy: &ArrayView4<f64>,
    w: &ArrayView4<f64>,
    stride: usize,
    pad: usize,
    h: usize,
    win: usize,
) -> Array4<f64> {
    let (bsz, c_out, ho, wo) = dy.dim();
    let (_, c_in, k, _) = w.dim();
    let w_flat = w.to_shape((c_out, c_in * k * k)).unwrap();
    let w_slice = w_flat.as_slice().unwrap();
    let mut dx = Array4::zeros((bsz, c_in, h, win));
    Zip::from(dx.axis_iter_mut(Axis(0)))
        .and(dy.axis_iter(Axis(0)))
        .par_for_each(|mut dxb, dyb| {
            let dyb = dyb.to_shape((c_out, ho * wo)).unwrap();
            let mut dcol = Array2::zeros((c_in * k * k, ho * wo));
            gemm(
                w_slice,
                c_out,
                c_in * k * k,
                true,
                dyb.as_slice().unwrap(),
                c_out,
                ho * wo,
                false,
                dcol.as_slice_mut().unwrap(),
                1.0,
                0.0,
            );
            dxb.assign(&col2im(&dcol, c_in, h, win, k, stride, pad));
        });
    dx
}

/// Gradients w.r.t. weights and bias, summed over the batch in index order.
pub fn conv2d_bwd_params(
    x: &ArrayView4<f64>,
    dy: &ArrayView4<f64>,
    stride: usize,
    pad: usize,
    k: usize,
) -> (Array4<f64>, Array1<f64>) {
    let (bsz, c_in, _, _) = x.dim();
    let (_, c_out, ho, wo) = dy.dim();
    let parts: Vec<(Array2<f64>, Array1<f64>)> = (0..bsz)
        .into_par_iter()
        .map(|bi| {
            let xb = x.index_axis(Axis(0), bi);
            let dyb = dy.index_axis(Axis(0), bi);
            let col = im2col(&xb, k, stride, pad);
            let dyb = dyb.to_shape((c_out, ho * wo)).unwrap();
            let mut dw = Array2::zeros((c_out, c_in * k * k));
            gemm(
                dyb.as_slice().unwrap(),
                c_out,
                ho * wo,
                false,
                col.as_slice().unwrap(),
                c_in * k * k,
                ho * wo,
                true,
                dw.as_slice_mut().unwrap(),
                1.0,
                0.0,
            );
            let db = dyb.sum_axis(Axis(1));
            (dw, db)
        })
        .collect();
    let mut dw = Array2::zeros((c_out, c_in * k * k));
    let mut db = Array1::zeros(c_out);
    for (pw, pb) in parts {
        dw += &pw;
        db += &pb;
    }
    (
        dw.into_shape_with_order((c_out, c_in, k, k)).unwrap(),
        db,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{next_gaussian, sub_rng};
    use ndarray::{Array, IxDyn};

    fn randn(shape: &[usize], seed: u64) -> Array<f64, IxDyn> {
        let mut rng = sub_rng(seed, "conv-test");
        Array::from_shape_fn(IxDyn(shape), |_| next_gaussian(&mut rng))
    }

    /// Direct 7-loop convolution used as the reference.
    fn conv_naive(
        x: &Array4<f64>,
        w: &Array4<f64>,
        b: &[f64],
        stride: usize,
        pad: usize,
    ) -> Array4<f64> {
        let (bsz, c_in, h, win) = x.dim();
        let (c_out, _, k, _) = w.dim();
        let ho = out_dim(h, k, stride, pad);
        let wo = out_dim(win, k, stride, pad);
        let mut y = Array4::zeros((bsz, c_out, ho, wo));
        for bi in 0..bsz {
            for co in 0..c_out {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b[co];
                        for ci in 0..c_in {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= win as isize {
                                        continue;
                                    }
                                    acc += x[[bi, ci, iy as usize, ix as usize]]
                                        * w[[co, ci, ky, kx]];
                                }
                            }
                        }
                        y[[bi, co, oy, ox]] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn matches_naive_convolution() {
        for (stride, pad, k, h) in [(1, 1, 3, 8), (2, 1, 3, 8), (1, 0, 1, 5), (2, 0, 2, 6)] {
            let x = randn(&[2, 3, h, h], 1)
                .into_dimensionality::<ndarray::Ix4>()
                .unwrap();
            let w = randn(&[4, 3, k, k], 2)
                .into_dimensionality::<ndarray::Ix4>()
                .unwrap();
            let b: Vec<f64> = (0..4).map(|i| i as f64 * 0.1).collect();
            let got = conv2d_fwd(&x.view(), &w.view(), &b, stride, pad);
            let want = conv_naive(&x, &w, &b, stride, pad);
            let diff = (&got - &want).iter().map(|d| d.abs()).fold(0.0, f64::max);
            assert!(diff < 1e-12, "stride={stride} pad={pad} k={k}: {diff}");
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let stride = 2;
        let pad = 1;
        let x = randn(&[1, 2, 6, 6], 3)
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap();
        let w = randn(&[3, 2, 3, 3], 4)
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap();
        let b = vec![0.0; 3];
        // Loss = sum(conv(x)); dy = ones.
        let y = conv2d_fwd(&x.view(), &w.view(), &b, stride, pad);
        let dy = Array4::ones(y.dim());
        let dx = conv2d_bwd_input(&dy.view(), &w.view(), stride, pad, 6, 6);
        let (dw, db) = conv2d_bwd_params(&x.view(), &dy.view(), stride, pad, 3);
        let h = 1e-6;
        let loss = |x: &Array4<f64>, w: &Array4<f64>, b: &[f64]| {
            conv2d_fwd(&x.view(), &w.view(), b, stride, pad).sum()
        };
        for (idx, g) in dx.indexed_iter().step_by(7) {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (loss(&xp, &w, &b) - loss(&xm, &w, &b)) / (2.0 * h);
            assert!((fd - g).abs() < 1e-6, "dx at {idx:?}: fd={fd} analytic={g}");
        }
        for (idx, g) in dw.indexed_iter().step_by(5) {
            let mut wp = w.clone();
            wp[idx] += h;
            let mut wm = w.clone();
            wm[idx] -= h;
            let fd = (loss(&x, &wp, &b) - loss(&x, &wm, &b)) / (2.0 * h);
            assert!((fd - g).abs() < 1e-6, "dw at {idx:?}: fd={fd} analytic={g}");
        }
        let mut bp = b.clone();
        bp[1] += h;
        let mut bm = b.clone();
        bm[1] -= h;
        let fd = (loss(&x, &w, &bp) - loss(&x, &w, &bm)) / (2.0 * h);
        assert!((fd - db[1]).abs() < 1e-6);
    }

    #[test]
    #[ignore = "throughput probe, run manually"]
    fn gemm_throughput() {
        let x = randn(&[8, 24, 32, 32], 7)
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap();
        let w = randn(&[16, 24, 3, 3], 8)
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap();
        let b = vec![0.0; 16];
        let start = std::time::Instant::now();
        let iters = 50;
        for _ in 0..iters {
            let _ = conv2d_fwd(&x.view(), &w.view(), &b, 1, 1);
        }
        let secs = start.elapsed().as_secs_f64();
        let flops = 2.0 * 8.0 * 16.0 * 24.0 * 9.0 * 1024.0 * iters as f64;
        eprintln!("conv fwd: {:.2} GFLOP/s", flops / secs / 1e9);
    }
}
