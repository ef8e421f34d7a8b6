//! Non-parametric half of the coarse-to-fine pipeline: 2x downsampling and
//! upsampling, the single-level Laplacian residual, masked high-resolution
//! reconstruction, and orchestration of the local refiner.
//!
//! Downsampling is a 2x2 block mean and upsampling is bilinear with
//! half-pixel centers, so constants survive a round trip exactly and the
//! decomposition stays linear. Nothing here clamps; clamping happens once at
//! the end of the inference pipeline.

use ndarray::{s, Array3};

use crate::error::{Error, Result};
use crate::imagecore::{composite, crop_regions, ImageTensor, MaskPair, Resolution};

/// A high-resolution image split into its smoothed half-size base and the
/// high-frequency residual that reconstructs it.
#[derive(Debug, Clone)]
pub struct LaplacianDecomp {
    pub low: ImageTensor,
    pub residual: ImageTensor,
}

/// 2x2 block mean. Requires even height and width.
pub fn downsample2x(x_h: &ImageTensor) -> Result<ImageTensor> {
    let (h, w) = x_h.bounds();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Geometry(format!(
            "downsample2x needs even dimensions, got {h}x{w}"
        )));
    }
    let mut out = Array3::zeros((h / 2, w / 2, 3));
    for r in 0..h / 2 {
        for c in 0..w / 2 {
            for ch in 0..3 {
                let block = x_h.data.slice(s![2 * r..2 * r + 2, 2 * c..2 * c + 2, ch]);
                out[[r, c, ch]] = block.sum() * 0.25;
            }
        }
    }
    Ok(ImageTensor {
        data: out,
        resolution: Resolution::Low,
    })
}

/// Index/weight table for 1-D bilinear 2x upsampling with half-pixel centers.
/// Output coordinate `i` samples the input at `(i + 0.5) / 2 - 0.5`, clamped
/// at the edges.
pub(crate) fn bilinear_taps(n_out: usize, n_in: usize) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|i| {
            let x = (i as f64 + 0.5) / 2.0 - 0.5;
            if x <= 0.0 {
                (0, 0, 1.0)
            } else if x >= (n_in - 1) as f64 {
                (n_in - 1, n_in - 1, 1.0)
            } else {
                let i0 = x.floor() as usize;
                (i0, i0 + 1, 1.0 - (x - i0 as f64))
            }
        })
        .collect()
}

/// Bilinear 2x upsampling with half-pixel alignment; constants map to
/// constants exactly.
pub fn upsample2x(x: &ImageTensor) -> ImageTensor {
    let (h, w) = x.bounds();
    let rows = bilinear_taps(2 * h, h);
    let cols = bilinear_taps(2 * w, w);
    let mut out = Array3::zeros((2 * h, 2 * w, 3));
    for (r, &(r0, r1, wr)) in rows.iter().enumerate() {
        for (c, &(c0, c1, wc)) in cols.iter().enumerate() {
            for ch in 0..3 {
                let v00 = x.data[[r0, c0, ch]];
                let v01 = x.data[[r0, c1, ch]];
                let v10 = x.data[[r1, c0, ch]];
                let v11 = x.data[[r1, c1, ch]];
                out[[r, c, ch]] =
                    wr * (wc * v00 + (1.0 - wc) * v01) + (1.0 - wr) * (wc * v10 + (1.0 - wc) * v11);
            }
        }
    }
    ImageTensor {
        data: out,
        resolution: Resolution::High,
    }
}

/// Split `x_h` into its half-size base and the residual `x_h - u(down(x_h))`.
pub fn laplacian_residual(x_h: &ImageTensor) -> Result<LaplacianDecomp> {
    let low = downsample2x(x_h)?;
    let up = upsample2x(&low);
    let residual = ImageTensor {
        data: &x_h.data - &up.data,
        resolution: Resolution::High,
    };
    Ok(LaplacianDecomp { low, residual })
}

/// Zero the residual inside the mask rectangles. The residual lives in an
/// additive space where 0 is neutral, so there is no gray fill here.
pub fn apply_mask_additive(residual: &ImageTensor, masks: &MaskPair) -> Result<ImageTensor> {
    if residual.bounds() != masks.image_bounds {
        return Err(Error::Geometry(format!(
            "mask bounds {:?} do not match residual bounds {:?}",
            masks.image_bounds,
            residual.bounds()
        )));
    }
    let mut out = residual.clone();
    for r in masks.rects() {
        out.data
            .slice_mut(s![r.top..r.bottom(), r.left..r.right(), ..])
            .fill(0.0);
    }
    Ok(out)
}

/// High-resolution reconstruction `u(x_tilde) + M(residual)`; `None` masks
/// reinject the whole residual.
pub fn reconstruct_highres(
    x_tilde: &ImageTensor,
    residual: &ImageTensor,
    masks_h: Option<&MaskPair>,
) -> Result<ImageTensor> {
    let up = upsample2x(x_tilde);
    if up.bounds() != residual.bounds() {
        return Err(Error::Geometry(format!(
            "upsampled image {:?} does not match residual {:?}",
            up.bounds(),
            residual.bounds()
        )));
    }
    let masked = match masks_h {
        Some(m) => apply_mask_additive(residual, m)?,
        None => residual.clone(),
    };
    Ok(ImageTensor {
        data: &up.data + &masked.data,
        resolution: Resolution::High,
    })
}

/// Refine the eye crops of `x_tilde_h` with a residual-learning refiner:
/// each crop becomes `clamp(crop + refiner(crop))`, composited back in place.
/// Pixels outside the rectangles are untouched, bit-exact.
pub fn refine_local<F>(x_tilde_h: &ImageTensor, masks_h: &MaskPair, refiner: F) -> Result<ImageTensor>
where
    F: Fn(&ImageTensor) -> Result<ImageTensor>,
{
    let mut crops = crop_regions(x_tilde_h, masks_h)?;
    for crop in [&mut crops.left, &mut crops.right] {
        let delta = refiner(crop)?;
        if delta.bounds() != crop.bounds() {
            return Err(Error::Model(format!(
                "refiner returned {:?} for a {:?} crop",
                delta.bounds(),
                crop.bounds()
            )));
        }
        crop.data = (&crop.data + &delta.data).mapv(|v| v.clamp(-1.0, 1.0));
    }
    composite(x_tilde_h, &crops, masks_h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagecore::Rect;
    use ndarray::Array3;
    use proptest::prelude::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = Array3::from_shape_fn((h, w, 3), |_| rng.random_range(-1.0..1.0));
        ImageTensor::new(data, Resolution::High).unwrap()
    }

    fn masks_32() -> MaskPair {
        MaskPair::new(
            Rect { top: 10, left: 4, height: 8, width: 10 },
            Rect { top: 10, left: 18, height: 8, width: 10 },
            (32, 32),
        )
        .unwrap()
    }

    #[test]
    fn downsample_constant() {
        let img = ImageTensor::constant(8, 8, 0.3, Resolution::High);
        let low = downsample2x(&img).unwrap();
        assert_eq!(low.bounds(), (4, 4));
        assert!(low.data.iter().all(|v| (v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn downsample_block_mean_oracle() {
        // 2x2 single block [[0,1],[2,3]] replicated over channels -> 1.5
        let mut img = ImageTensor::zeros(2, 2, Resolution::High);
        for ch in 0..3 {
            img.data[[0, 0, ch]] = 0.0;
            img.data[[0, 1, ch]] = 1.0;
            img.data[[1, 0, ch]] = 2.0;
            img.data[[1, 1, ch]] = 3.0;
        }
        let low = downsample2x(&img).unwrap();
        assert_eq!(low.bounds(), (1, 1));
        for ch in 0..3 {
            assert_eq!(low.data[[0, 0, ch]], 1.5);
        }
    }

    #[test]
    fn downsample_checkerboard_cancels() {
        let mut img = ImageTensor::zeros(8, 8, Resolution::High);
        for r in 0..8 {
            for c in 0..8 {
                let v = if (r + c) % 2 == 0 { 1.0 } else { -1.0 };
                for ch in 0..3 {
                    img.data[[r, c, ch]] = v;
                }
            }
        }
        let low = downsample2x(&img).unwrap();
        assert!(low.data.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn downsample_odd_dimension_errors() {
        let img = ImageTensor::zeros(7, 8, Resolution::High);
        assert!(matches!(downsample2x(&img), Err(Error::Geometry(_))));
    }

    #[test]
    fn upsample_constant_exact() {
        let img = ImageTensor::constant(3, 5, -0.7, Resolution::Low);
        let up = upsample2x(&img);
        assert_eq!(up.bounds(), (6, 10));
        assert!(up.data.iter().all(|v| (v + 0.7).abs() < 1e-15));
    }

    #[test]
    fn upsample_single_pixel_broadcast() {
        let img = ImageTensor::constant(1, 1, 0.25, Resolution::Low);
        let up = upsample2x(&img);
        assert_eq!(up.bounds(), (2, 2));
        assert!(up.data.iter().all(|v| *v == 0.25));
    }

    #[test]
    fn upsample_half_pixel_oracle() {
        // Independent closed-form taps for a 1x2 row [0, 1]:
        // outputs at x = -0.25, 0.25, 0.75, 1.25 -> 0, 0.25, 0.75, 1.
        let mut img = ImageTensor::zeros(1, 2, Resolution::Low);
        for ch in 0..3 {
            img.data[[0, 1, ch]] = 1.0;
        }
        let up = upsample2x(&img);
        assert_eq!(up.bounds(), (2, 4));
        let expected = [0.0, 0.25, 0.75, 1.0];
        for r in 0..2 {
            for (c, e) in expected.iter().enumerate() {
                assert!((up.data[[r, c, 0]] - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn residual_constant_is_zero() {
        let img = ImageTensor::constant(16, 16, 0.4, Resolution::High);
        let d = laplacian_residual(&img).unwrap();
        assert!(d.residual.data.iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn residual_checkerboard_passthrough() {
        let mut img = ImageTensor::zeros(8, 8, Resolution::High);
        for r in 0..8 {
            for c in 0..8 {
                for ch in 0..3 {
                    img.data[[r, c, ch]] = if (r + c) % 2 == 0 { 1.0 } else { -1.0 };
                }
            }
        }
        let d = laplacian_residual(&img).unwrap();
        assert!(d.low.data.iter().all(|v| v.abs() < 1e-14));
        assert!(d
            .residual
            .data
            .iter()
            .zip(img.data.iter())
            .all(|(a, b)| (a - b).abs() < 1e-14));
    }

    #[test]
    fn reconstruct_identity_no_masks() {
        let img = random_image(32, 32, 9);
        let d = laplacian_residual(&img).unwrap();
        let rebuilt = reconstruct_highres(&d.low, &d.residual, None).unwrap();
        let max = rebuilt
            .data
            .iter()
            .zip(img.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max < 1e-10, "max deviation {max}");
    }

    #[test]
    fn reconstruct_masked_oracle() {
        let img = random_image(32, 32, 21);
        let m = masks_32();
        let d = laplacian_residual(&img).unwrap();
        let out = reconstruct_highres(&d.low, &d.residual, Some(&m)).unwrap();
        let up = upsample2x(&d.low);
        let inside = |r: usize, c: usize| {
            m.rects()
                .iter()
                .any(|q| r >= q.top && r < q.bottom() && c >= q.left && c < q.right())
        };
        for r in 0..32 {
            for c in 0..32 {
                for ch in 0..3 {
                    let expect = if inside(r, c) {
                        up.data[[r, c, ch]]
                    } else {
                        img.data[[r, c, ch]]
                    };
                    assert!((out.data[[r, c, ch]] - expect).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn reconstruct_zero_inputs() {
        let low = ImageTensor::zeros(4, 4, Resolution::Low);
        let res = ImageTensor::zeros(8, 8, Resolution::High);
        let out = reconstruct_highres(&low, &res, None).unwrap();
        assert!(out.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn refine_local_zero_refiner_is_identity() {
        let img = random_image(32, 32, 2);
        let m = masks_32();
        let out = refine_local(&img, &m, |crop| {
            Ok(ImageTensor::zeros(crop.height(), crop.width(), crop.resolution))
        })
        .unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn refine_local_constant_offset_oracle() {
        let img = random_image(32, 32, 4);
        let m = masks_32();
        let out = refine_local(&img, &m, |crop| {
            Ok(ImageTensor::constant(crop.height(), crop.width(), 0.1, crop.resolution))
        })
        .unwrap();
        let inside = |r: usize, c: usize| {
            m.rects()
                .iter()
                .any(|q| r >= q.top && r < q.bottom() && c >= q.left && c < q.right())
        };
        for r in 0..32 {
            for c in 0..32 {
                for ch in 0..3 {
                    let expect = if inside(r, c) {
                        (img.data[[r, c, ch]] + 0.1).clamp(-1.0, 1.0)
                    } else {
                        img.data[[r, c, ch]]
                    };
                    assert!((out.data[[r, c, ch]] - expect).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn refine_local_mask_roundtrip() {
        let img = random_image(32, 32, 6);
        let m = masks_32();
        let out = refine_local(&img, &m, |crop| {
            Ok(ImageTensor::constant(crop.height(), crop.width(), 0.3, crop.resolution))
        })
        .unwrap();
        assert_eq!(
            crate::imagecore::apply_mask(&out, &m).unwrap(),
            crate::imagecore::apply_mask(&img, &m).unwrap()
        );
    }

    proptest! {
        #[test]
        fn laplacian_identity_property(seed in 0u64..200) {
            let img = random_image(16, 24, seed);
            let d = laplacian_residual(&img).unwrap();
            let rebuilt = reconstruct_highres(&d.low, &d.residual, None).unwrap();
            for (a, b) in rebuilt.data.iter().zip(img.data.iter()) {
                prop_assert!((a - b).abs() < 1e-5);
            }
        }

        #[test]
        fn decomposition_linearity(seed in 0u64..100) {
            let x = random_image(16, 16, seed);
            let y = random_image(16, 16, seed ^ 0x5a5a);
            let (a, b) = (0.7, -1.3);
            let mix = ImageTensor::new(a * &x.data + b * &y.data, Resolution::High).unwrap();
            let rm = laplacian_residual(&mix).unwrap().residual;
            let rx = laplacian_residual(&x).unwrap().residual;
            let ry = laplacian_residual(&y).unwrap().residual;
            let expect = a * &rx.data + b * &ry.data;
            for (u, v) in rm.data.iter().zip(expect.iter()) {
                prop_assert!((u - v).abs() < 1e-6);
            }
        }

        #[test]
        fn down_up_constant_identity(v in -1.0f64..1.0) {
            let img = ImageTensor::constant(6, 6, v, Resolution::High);
            let rt = upsample2x(&downsample2x(&img).unwrap());
            for u in rt.data.iter() {
                prop_assert!((u - v).abs() < 1e-14);
            }
        }
    }
}
