//! im2col-backed convolution kernels (forward, input gradient, weight
//! gradient) for NCHW `f64` batches.
//!
//! The packing loops work on raw slices: with one core and no BLAS, the
//! bounds-checked multi-index path costs more than the GEMMs themselves.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array4, ArrayView2, ArrayView4};

pub fn conv_out_size(h: usize, k: usize, stride: usize, pad: usize) -> usize {
    (h + 2 * pad - k) / stride + 1
}

/// Fill `col` (shape `(cin*k*k, h_out*w_out)`) from one padded input sample.
fn im2col(
    x: &ArrayView4<f64>,
    b: usize,
    k: usize,
    stride: usize,
    pad: usize,
    col: &mut Array2<f64>,
) {
    let (_, cin, h, w) = x.dim();
    let h_out = conv_out_size(h, k, stride, pad);
    let w_out = conv_out_size(w, k, stride, pad);
    let xs = x.to_slice().expect("conv input must be contiguous");
    let cs = col.as_slice_mut().expect("col buffer is contiguous");
    cs.fill(0.0);
    let hw = h_out * w_out;
    for c in 0..cin {
        let x_base = (b * cin + c) * h * w;
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let row_base = row * hw;
                for oy in 0..h_out {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = x_base + iy as usize * w;
                    let dst_row = row_base + oy * w_out;
                    if stride == 1 {
                        // ix = ox + kx - pad; clip ox to keep ix within [0, w)
                        let shift = kx as isize - pad as isize;
                        let ox0 = (-shift).max(0) as usize;
                        let ox1 = ((w as isize - shift).min(w_out as isize)).max(0) as usize;
                        if ox1 > ox0 {
                            let ix0 = (ox0 as isize + shift) as usize;
                            cs[dst_row + ox0..dst_row + ox1]
                                .copy_from_slice(&xs[src_row + ix0..src_row + ix0 + (ox1 - ox0)]);
                        }
                    } else {
                        for ox in 0..w_out {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                cs[dst_row + ox] = xs[src_row + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add the column gradient back onto one input sample.
fn col2im(
    dcol: &ArrayView2<f64>,
    b: usize,
    k: usize,
    stride: usize,
    pad: usize,
    dx: &mut Array4<f64>,
) {
    let (_, cin, h, w) = dx.dim();
    let h_out = conv_out_size(h, k, stride, pad);
    let w_out = conv_out_size(w, k, stride, pad);
    let ds = dcol.to_slice().expect("dcol is contiguous");
    let out = dx.as_slice_mut().expect("dx is contiguous");
    let hw = h_out * w_out;
    for c in 0..cin {
        let x_base = (b * cin + c) * h * w;
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let row_base = row * hw;
                for oy in 0..h_out {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = x_base + iy as usize * w;
                    let src_row = row_base + oy * w_out;
                    if stride == 1 {
                        let shift = kx as isize - pad as isize;
                        let ox0 = (-shift).max(0) as usize;
                        let ox1 = ((w as isize - shift).min(w_out as isize)).max(0) as usize;
                        for ox in ox0..ox1 {
                            out[dst_row + (ox as isize + shift) as usize] += ds[src_row + ox];
                        }
                    } else {
                        for ox in 0..w_out {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                out[dst_row + ix as usize] += ds[src_row + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Batched convolution forward. `w` is `(cout, cin, k, k)`.
pub fn conv2d_forward(
    x: &ArrayView4<f64>,
    w: &ArrayView4<f64>,
    bias: Option<&Array1<f64>>,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let (bsz, cin, h, wd) = x.dim();
    let (cout, cin_w, k, _) = w.dim();
    assert_eq!(cin, cin_w, "conv channel mismatch");
    let h_out = conv_out_size(h, k, stride, pad);
    let w_out = conv_out_size(wd, k, stride, pad);
    let w_mat = w
        .to_shape((cout, cin * k * k))
        .expect("contiguous kernel")
        .to_owned();
    let mut col = Array2::zeros((cin * k * k, h_out * w_out));
    let mut out = Array4::zeros((bsz, cout, h_out, w_out));
    for b in 0..bsz {
        im2col(x, b, k, stride, pad, &mut col);
        let mut dst = out
            .index_axis_mut(ndarray::Axis(0), b)
            .into_shape_with_order((cout, h_out * w_out))
            .expect("output reshape");
        general_mat_mul(1.0, &w_mat, &col, 0.0, &mut dst);
    }
    if let Some(bias) = bias {
        let os = out.as_slice_mut().unwrap();
        let hw = h_out * w_out;
        for b in 0..bsz {
            for c in 0..cout {
                let base = (b * cout + c) * hw;
                let bv = bias[c];
                for v in &mut os[base..base + hw] {
                    *v += bv;
                }
            }
        }
    }
    out
}

/// Gradients of the convolution: `(dx, dw, db)`.
pub fn conv2d_backward(
    x: &ArrayView4<f64>,
    w: &ArrayView4<f64>,
    dout: &ArrayView4<f64>,
    stride: usize,
    pad: usize,
) -> (Array4<f64>, Array4<f64>, Array1<f64>) {
    let (bsz, cin, h, wd) = x.dim();
    let (cout, _, k, _) = w.dim();
    let (_, _, h_out, w_out) = dout.dim();
    let w_mat = w
        .to_shape((cout, cin * k * k))
        .expect("contiguous kernel")
        .to_owned();
    let mut col = Array2::zeros((cin * k * k, h_out * w_out));
    let mut dcol = Array2::zeros((cin * k * k, h_out * w_out));
    let mut dx = Array4::zeros((bsz, cin, h, wd));
    let mut dw_mat = Array2::<f64>::zeros((cout, cin * k * k));
    let mut db = Array1::<f64>::zeros(cout);
    for b in 0..bsz {
        let dout_b = dout
            .index_axis(ndarray::Axis(0), b)
            .to_shape((cout, h_out * w_out))
            .expect("grad reshape")
            .to_owned();
        im2col(x, b, k, stride, pad, &mut col);
        general_mat_mul(1.0, &dout_b, &col.t(), 1.0, &mut dw_mat);
        general_mat_mul(1.0, &w_mat.t(), &dout_b, 0.0, &mut dcol);
        col2im(&dcol.view(), b, k, stride, pad, &mut dx);
        for c in 0..cout {
            db[c] += dout_b.row(c).sum();
        }
    }
    let dw = dw_mat
        .to_shape((cout, cin, k, k))
        .expect("weight reshape")
        .to_owned();
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rand4(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Direct nested-loop convolution used as the oracle.
    fn conv_naive(
        x: &Array4<f64>,
        w: &Array4<f64>,
        stride: usize,
        pad: usize,
    ) -> Array4<f64> {
        let (bsz, cin, h, wd) = x.dim();
        let (cout, _, k, _) = w.dim();
        let h_out = conv_out_size(h, k, stride, pad);
        let w_out = conv_out_size(wd, k, stride, pad);
        let mut out = Array4::zeros((bsz, cout, h_out, w_out));
        for b in 0..bsz {
            for co in 0..cout {
                for oy in 0..h_out {
                    for ox in 0..w_out {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && iy < h as isize && ix >= 0 && ix < wd as isize {
                                        acc += x[[b, ci, iy as usize, ix as usize]]
                                            * w[[co, ci, ky, kx]];
                                    }
                                }
                            }
                        }
                        out[[b, co, oy, ox]] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn forward_matches_naive() {
        for &(stride, pad, k) in &[(1usize, 1usize, 3usize), (2, 1, 3), (1, 0, 1)] {
            let x = rand4((2, 3, 6, 8), 1 + stride as u64);
            let w = rand4((4, 3, k, k), 7 + pad as u64);
            let fast = conv2d_forward(&x.view(), &w.view(), None, stride, pad);
            let slow = conv_naive(&x, &w, stride, pad);
            let max = fast
                .iter()
                .zip(slow.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(max < 1e-12, "stride {stride} pad {pad}: {max}");
        }
    }

    #[test]
    fn odd_sizes_match_naive() {
        let x = rand4((1, 2, 5, 7), 11);
        let w = rand4((3, 2, 3, 3), 12);
        let fast = conv2d_forward(&x.view(), &w.view(), None, 2, 1);
        let slow = conv_naive(&x, &w, 2, 1);
        assert_eq!(fast.dim(), (1, 3, 3, 4));
        let max = fast
            .iter()
            .zip(slow.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max < 1e-12);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let x = rand4((1, 2, 5, 6), 3);
        let w = rand4((3, 2, 3, 3), 4);
        let dout_shape = (1, 3, 3, 3);
        let dout = rand4(dout_shape, 5);
        let loss = |x: &Array4<f64>, w: &Array4<f64>| -> f64 {
            let y = conv2d_forward(&x.view(), &w.view(), None, 2, 1);
            (&y * &dout).sum()
        };
        let (dx, dw, _) = conv2d_backward(&x.view(), &w.view(), &dout.view(), 2, 1);
        let h = 1e-6;
        let mut xp = x.clone();
        for idx in [[0, 0, 0, 0], [0, 1, 2, 3], [0, 0, 4, 5]] {
            let base = xp[idx];
            xp[idx] = base + h;
            let up = loss(&xp, &w);
            xp[idx] = base - h;
            let dn = loss(&xp, &w);
            xp[idx] = base;
            let fd = (up - dn) / (2.0 * h);
            assert!((fd - dx[idx]).abs() < 1e-6, "dx {idx:?}: {fd} vs {}", dx[idx]);
        }
        let mut wp = w.clone();
        for idx in [[0, 0, 0, 0], [2, 1, 2, 2], [1, 0, 1, 1]] {
            let base = wp[idx];
            wp[idx] = base + h;
            let up = loss(&x, &wp);
            wp[idx] = base - h;
            let dn = loss(&x, &wp);
            wp[idx] = base;
            let fd = (up - dn) / (2.0 * h);
            assert!((fd - dw[idx]).abs() < 1e-6, "dw {idx:?}: {fd} vs {}", dw[idx]);
        }
    }
}
