//! Resampling kernels on NCHW batches: nearest/bilinear 2x upsampling and
//! 2x2 mean pooling, with their transposes.

use ndarray::Array4;

use crate::pyramid::bilinear_taps;

pub fn nearest_up2(x: &Array4<f64>) -> Array4<f64> {
    let (b, c, h, w) = x.dim();
    let mut out = Array4::zeros((b, c, 2 * h, 2 * w));
    for bi in 0..b {
        for ci in 0..c {
            for r in 0..h {
                for cc in 0..w {
                    let v = x[[bi, ci, r, cc]];
                    out[[bi, ci, 2 * r, 2 * cc]] = v;
                    out[[bi, ci, 2 * r, 2 * cc + 1]] = v;
                    out[[bi, ci, 2 * r + 1, 2 * cc]] = v;
                    out[[bi, ci, 2 * r + 1, 2 * cc + 1]] = v;
                }
            }
        }
    }
    out
}

pub fn nearest_up2_backward(g: &Array4<f64>) -> Array4<f64> {
    let (b, c, h2, w2) = g.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = Array4::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            for r in 0..h {
                for cc in 0..w {
                    out[[bi, ci, r, cc]] = g[[bi, ci, 2 * r, 2 * cc]]
                        + g[[bi, ci, 2 * r, 2 * cc + 1]]
                        + g[[bi, ci, 2 * r + 1, 2 * cc]]
                        + g[[bi, ci, 2 * r + 1, 2 * cc + 1]];
                }
            }
        }
    }
    out
}

pub fn bilinear_up2(x: &Array4<f64>) -> Array4<f64> {
    let (b, c, h, w) = x.dim();
    let rows = bilinear_taps(2 * h, h);
    let cols = bilinear_taps(2 * w, w);
    let mut out = Array4::zeros((b, c, 2 * h, 2 * w));
    for bi in 0..b {
        for ci in 0..c {
            for (r, &(r0, r1, wr)) in rows.iter().enumerate() {
                for (cc, &(c0, c1, wc)) in cols.iter().enumerate() {
                    let v00 = x[[bi, ci, r0, c0]];
                    let v01 = x[[bi, ci, r0, c1]];
                    let v10 = x[[bi, ci, r1, c0]];
                    let v11 = x[[bi, ci, r1, c1]];
                    out[[bi, ci, r, cc]] = wr * (wc * v00 + (1.0 - wc) * v01)
                        + (1.0 - wr) * (wc * v10 + (1.0 - wc) * v11);
                }
            }
        }
    }
    out
}

pub fn bilinear_up2_backward(g: &Array4<f64>) -> Array4<f64> {
    let (b, c, h2, w2) = g.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let rows = bilinear_taps(h2, h);
    let cols = bilinear_taps(w2, w);
    let mut out = Array4::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            for (r, &(r0, r1, wr)) in rows.iter().enumerate() {
                for (cc, &(c0, c1, wc)) in cols.iter().enumerate() {
                    let gv = g[[bi, ci, r, cc]];
                    out[[bi, ci, r0, c0]] += wr * wc * gv;
                    out[[bi, ci, r0, c1]] += wr * (1.0 - wc) * gv;
                    out[[bi, ci, r1, c0]] += (1.0 - wr) * wc * gv;
                    out[[bi, ci, r1, c1]] += (1.0 - wr) * (1.0 - wc) * gv;
                }
            }
        }
    }
    out
}

pub fn avg_pool2(x: &Array4<f64>) -> Array4<f64> {
    let (b, c, h, w) = x.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even dimensions");
    let mut out = Array4::zeros((b, c, h / 2, w / 2));
    for bi in 0..b {
        for ci in 0..c {
            for r in 0..h / 2 {
                for cc in 0..w / 2 {
                    out[[bi, ci, r, cc]] = 0.25
                        * (x[[bi, ci, 2 * r, 2 * cc]]
                            + x[[bi, ci, 2 * r, 2 * cc + 1]]
                            + x[[bi, ci, 2 * r + 1, 2 * cc]]
                            + x[[bi, ci, 2 * r + 1, 2 * cc + 1]]);
                }
            }
        }
    }
    out
}

pub fn avg_pool2_backward(g: &Array4<f64>) -> Array4<f64> {
    let (b, c, h, w) = g.dim();
    let mut out = Array4::zeros((b, c, 2 * h, 2 * w));
    for bi in 0..b {
        for ci in 0..c {
            for r in 0..h {
                for cc in 0..w {
                    let gv = 0.25 * g[[bi, ci, r, cc]];
                    out[[bi, ci, 2 * r, 2 * cc]] = gv;
                    out[[bi, ci, 2 * r, 2 * cc + 1]] = gv;
                    out[[bi, ci, 2 * r + 1, 2 * cc]] = gv;
                    out[[bi, ci, 2 * r + 1, 2 * cc + 1]] = gv;
                }
            }
        }
    }
    out
}
