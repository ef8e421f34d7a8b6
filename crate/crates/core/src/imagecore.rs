//! Deterministic image algebra shared by every other module: eye-region
//! masking, cropping, compositing and horizontal flipping.
//!
//! Images are `(height, width, 3)` arrays of `f64` in `[-1, 1]`. Masks are
//! pairs of axis-aligned rectangles, one per eye, carried by the dataset
//! manifest and never inferred from pixels.

use ndarray::{s, Array3};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};

/// Which rung of the 2x pyramid an image lives on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Resolution {
    Low,
    High,
}

/// An RGB image with values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub data: Array3<f64>,
    pub resolution: Resolution,
}

impl ImageTensor {
    pub fn new(data: Array3<f64>, resolution: Resolution) -> Result<Self> {
        if data.shape()[2] != 3 {
            return Err(Error::Shape(format!(
                "image must have 3 channels, got {}",
                data.shape()[2]
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Shape("image contains non-finite values".into()));
        }
        Ok(Self { data, resolution })
    }

    pub fn zeros(height: usize, width: usize, resolution: Resolution) -> Self {
        Self {
            data: Array3::zeros((height, width, 3)),
            resolution,
        }
    }

    pub fn constant(height: usize, width: usize, value: f64, resolution: Resolution) -> Self {
        Self {
            data: Array3::from_elem((height, width, 3), value),
            resolution,
        }
    }

    pub fn height(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn bounds(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    /// Clamp all values into `[-1, 1]`. Used once, at the very end of the
    /// inference pipeline; pyramid math stays unclamped to keep it linear.
    pub fn clamped(&self) -> Self {
        Self {
            data: self.data.mapv(|v| v.clamp(-1.0, 1.0)),
            resolution: self.resolution,
        }
    }

    /// Load an 8-bit RGB PNG and map linearly onto `[-1, 1]`.
    pub fn read_png(path: &Path, resolution: Resolution) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        let mut data = Array3::zeros((h as usize, w as usize, 3));
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                data[[y as usize, x as usize, c]] = px.0[c] as f64 / 127.5 - 1.0;
            }
        }
        Self::new(data, resolution)
    }

    /// Write as an 8-bit RGB PNG, mapping `[-1, 1]` linearly onto `0..=255`.
    pub fn write_png(&self, path: &Path) -> Result<()> {
        let (h, w) = self.bounds();
        let mut img = image::RgbImage::new(w as u32, h as u32);
        for r in 0..h {
            for c in 0..w {
                let px = |ch: usize| {
                    let v = (self.data[[r, c, ch]].clamp(-1.0, 1.0) + 1.0) * 127.5;
                    v.round().clamp(0.0, 255.0) as u8
                };
                img.put_pixel(c as u32, r as u32, image::Rgb([px(0), px(1), px(2)]));
            }
        }
        img.save(path)?;
        Ok(())
    }
}

/// An axis-aligned rectangle in pixel coordinates, `[top, top+height) x [left, left+width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn bottom(&self) -> usize {
        self.top + self.height
    }

    pub fn right(&self) -> usize {
        self.left + self.width
    }

    pub fn center(&self) -> (usize, usize) {
        (self.top + self.height / 2, self.left + self.width / 2)
    }

    pub fn fits(&self, bounds: (usize, usize)) -> bool {
        self.height > 0 && self.width > 0 && self.bottom() <= bounds.0 && self.right() <= bounds.1
    }

    fn overlaps(&self, other: &Rect) -> bool {
        self.top < other.bottom()
            && other.top < self.bottom()
            && self.left < other.right()
            && other.left < self.right()
    }

    /// Double position and size (generic low -> high mapping).
    pub fn scale2x(&self) -> Rect {
        Rect {
            top: self.top * 2,
            left: self.left * 2,
            height: self.height * 2,
            width: self.width * 2,
        }
    }

    /// Grow by `frac` of the size on each side, then shift (keeping the size)
    /// so the result stays inside `bounds`.
    pub fn inflate(&self, frac: f64, bounds: (usize, usize)) -> Result<Rect> {
        let dh = (self.height as f64 * frac).round() as usize;
        let dw = (self.width as f64 * frac).round() as usize;
        let height = self.height + 2 * dh;
        let width = self.width + 2 * dw;
        if height > bounds.0 || width > bounds.1 {
            return Err(Error::Geometry(format!(
                "inflated rectangle {height}x{width} exceeds bounds {bounds:?}"
            )));
        }
        let top = self.top.saturating_sub(dh).min(bounds.0 - height);
        let left = self.left.saturating_sub(dw).min(bounds.1 - width);
        Ok(Rect {
            top,
            left,
            height,
            width,
        })
    }
}

/// Build a rectangle of the given size centered at `center`, biasing odd
/// remainders toward the top-left.
pub fn mask_from_center(
    center: (usize, usize),
    size: (usize, usize),
    bounds: (usize, usize),
) -> Result<Rect> {
    let (cr, cc) = center;
    let (h, w) = size;
    if h == 0 || w == 0 {
        return Err(Error::Geometry("mask size must be positive".into()));
    }
    if cr < h / 2 || cc < w / 2 {
        return Err(Error::Geometry(format!(
            "mask {h}x{w} centered at ({cr},{cc}) extends past the top-left edge"
        )));
    }
    let rect = Rect {
        top: cr - h / 2,
        left: cc - w / 2,
        height: h,
        width: w,
    };
    if !rect.fits(bounds) {
        return Err(Error::Geometry(format!(
            "mask {h}x{w} centered at ({cr},{cc}) does not fit bounds {bounds:?}"
        )));
    }
    Ok(rect)
}

/// Two disjoint per-eye rectangles; the `M` / `M'` operators act on both.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskPair {
    pub left: Rect,
    pub right: Rect,
    pub image_bounds: (usize, usize),
}

impl MaskPair {
    pub fn new(left: Rect, right: Rect, image_bounds: (usize, usize)) -> Result<Self> {
        if !left.fits(image_bounds) || !right.fits(image_bounds) {
            return Err(Error::Geometry(format!(
                "mask rectangles {left:?} / {right:?} do not fit bounds {image_bounds:?}"
            )));
        }
        if left.overlaps(&right) {
            return Err(Error::Geometry(
                "left and right mask rectangles overlap".into(),
            ));
        }
        Ok(Self {
            left,
            right,
            image_bounds,
        })
    }

    pub fn rects(&self) -> [Rect; 2] {
        [self.left, self.right]
    }

    /// Generic low -> high mapping: both rectangles doubled.
    pub fn scale2x(&self) -> Result<MaskPair> {
        MaskPair::new(
            self.left.scale2x(),
            self.right.scale2x(),
            (self.image_bounds.0 * 2, self.image_bounds.1 * 2),
        )
    }

    fn check_image(&self, image: &ImageTensor) -> Result<()> {
        if image.bounds() != self.image_bounds {
            return Err(Error::Geometry(format!(
                "mask bounds {:?} do not match image bounds {:?}",
                self.image_bounds,
                image.bounds()
            )));
        }
        Ok(())
    }
}

/// Per-eye crops extracted by `M'`.
#[derive(Debug, Clone, PartialEq)]
pub struct EyeCrops {
    pub left: ImageTensor,
    pub right: ImageTensor,
}

/// `M(x)`: zero out (mid-gray in the `[-1,1]` coding) both eye rectangles.
pub fn apply_mask(image: &ImageTensor, masks: &MaskPair) -> Result<ImageTensor> {
    masks.check_image(image)?;
    let mut out = image.clone();
    for r in masks.rects() {
        out.data
            .slice_mut(s![r.top..r.bottom(), r.left..r.right(), ..])
            .fill(0.0);
    }
    Ok(out)
}

/// `M'(x)`: extract both eye rectangles pixel-for-pixel.
pub fn crop_regions(image: &ImageTensor, masks: &MaskPair) -> Result<EyeCrops> {
    masks.check_image(image)?;
    let cut = |r: Rect| ImageTensor {
        data: image
            .data
            .slice(s![r.top..r.bottom(), r.left..r.right(), ..])
            .to_owned(),
        resolution: image.resolution,
    };
    Ok(EyeCrops {
        left: cut(masks.left),
        right: cut(masks.right),
    })
}

/// Paste `patches` into `base` at the mask rectangles; everything outside is
/// the base, bit-exact.
pub fn composite(base: &ImageTensor, patches: &EyeCrops, masks: &MaskPair) -> Result<ImageTensor> {
    masks.check_image(base)?;
    for (patch, r) in [(&patches.left, masks.left), (&patches.right, masks.right)] {
        if patch.bounds() != (r.height, r.width) {
            return Err(Error::Geometry(format!(
                "patch {:?} does not match rectangle {}x{}",
                patch.bounds(),
                r.height,
                r.width
            )));
        }
    }
    let mut out = base.clone();
    for (patch, r) in [(&patches.left, masks.left), (&patches.right, masks.right)] {
        out.data
            .slice_mut(s![r.top..r.bottom(), r.left..r.right(), ..])
            .assign(&patch.data);
    }
    Ok(out)
}

/// `F(x)`: mirror around the vertical axis; column `j` maps to `width-1-j`.
pub fn hflip(image: &ImageTensor) -> ImageTensor {
    ImageTensor {
        data: image
            .data
            .slice(s![.., ..;-1, ..])
            .as_standard_layout()
            .to_owned(),
        resolution: image.resolution,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = Array3::from_shape_fn((h, w, 3), |_| rng.random_range(-1.0..1.0));
        ImageTensor::new(data, Resolution::Low).unwrap()
    }

    fn masks_64() -> MaskPair {
        MaskPair::new(
            Rect {
                top: 20,
                left: 8,
                height: 16,
                width: 24,
            },
            Rect {
                top: 20,
                left: 36,
                height: 16,
                width: 24,
            },
            (64, 64),
        )
        .unwrap()
    }

    #[test]
    fn apply_mask_zero_fixed_point() {
        let img = ImageTensor::zeros(64, 64, Resolution::Low);
        let out = apply_mask(&img, &masks_64()).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn apply_mask_ones_corner() {
        let img = ImageTensor::constant(4, 4, 1.0, Resolution::Low);
        let m = MaskPair::new(
            Rect {
                top: 0,
                left: 0,
                height: 2,
                width: 2,
            },
            Rect {
                top: 2,
                left: 2,
                height: 1,
                width: 1,
            },
            (4, 4),
        )
        .unwrap();
        let out = apply_mask(&img, &m).unwrap();
        let zeros = out.data.iter().filter(|v| **v == 0.0).count();
        // 2x2 + 1x1 rectangles over 3 channels
        assert_eq!(zeros, (4 + 1) * 3);
        assert_eq!(out.data[[3, 3, 0]], 1.0);
    }

    #[test]
    fn apply_mask_elementwise_oracle() {
        let img = random_image(64, 64, 7);
        let m = masks_64();
        let out = apply_mask(&img, &m).unwrap();
        let inside = |r: usize, c: usize| {
            m.rects()
                .iter()
                .any(|q| r >= q.top && r < q.bottom() && c >= q.left && c < q.right())
        };
        for r in 0..64 {
            for c in 0..64 {
                for ch in 0..3 {
                    if inside(r, c) {
                        assert_eq!(out.data[[r, c, ch]], 0.0);
                    } else {
                        assert_eq!(out.data[[r, c, ch]], img.data[[r, c, ch]]);
                    }
                }
            }
        }
    }

    #[test]
    fn crop_matches_index_oracle() {
        let img = random_image(64, 64, 3);
        let m = masks_64();
        let crops = crop_regions(&img, &m).unwrap();
        for (crop, r) in [(&crops.left, m.left), (&crops.right, m.right)] {
            for i in 0..r.height {
                for j in 0..r.width {
                    for ch in 0..3 {
                        assert_eq!(
                            crop.data[[i, j, ch]],
                            img.data[[r.top + i, r.left + j, ch]]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn composite_mean_counts_pixels() {
        let base = ImageTensor::zeros(64, 64, Resolution::Low);
        let m = masks_64();
        let patches = EyeCrops {
            left: ImageTensor::constant(16, 24, 1.0, Resolution::Low),
            right: ImageTensor::constant(16, 24, 1.0, Resolution::Low),
        };
        let out = composite(&base, &patches, &m).unwrap();
        let mask_area = 2.0 * 16.0 * 24.0;
        let expected = mask_area / (64.0 * 64.0);
        let mean = out.data.mean().unwrap();
        assert!((mean - expected).abs() < 1e-12, "mean {mean} vs {expected}");
    }

    #[test]
    fn composite_then_mask_erases_paste() {
        let base = random_image(64, 64, 11);
        let m = masks_64();
        let patches = EyeCrops {
            left: ImageTensor::constant(16, 24, 0.5, Resolution::Low),
            right: ImageTensor::constant(16, 24, -0.5, Resolution::Low),
        };
        let pasted = composite(&base, &patches, &m).unwrap();
        assert_eq!(
            apply_mask(&pasted, &m).unwrap(),
            apply_mask(&base, &m).unwrap()
        );
    }

    #[test]
    fn composite_size_mismatch_errors() {
        let base = ImageTensor::zeros(64, 64, Resolution::Low);
        let m = masks_64();
        let patches = EyeCrops {
            left: ImageTensor::zeros(15, 24, Resolution::Low),
            right: ImageTensor::zeros(16, 24, Resolution::Low),
        };
        assert!(matches!(
            composite(&base, &patches, &m),
            Err(Error::Geometry(_))
        ));
    }

    #[test]
    fn hflip_stripes_swap() {
        let mut img = ImageTensor::zeros(4, 4, Resolution::Low);
        img.data.slice_mut(s![.., ..2, ..]).fill(-1.0);
        img.data.slice_mut(s![.., 2.., ..]).fill(1.0);
        let flipped = hflip(&img);
        assert_eq!(flipped.data[[0, 0, 0]], 1.0);
        assert_eq!(flipped.data[[0, 3, 0]], -1.0);
    }

    #[test]
    fn hflip_index_reversal_oracle() {
        let img = random_image(32, 48, 5);
        let flipped = hflip(&img);
        for r in 0..32 {
            for c in 0..48 {
                for ch in 0..3 {
                    assert_eq!(flipped.data[[r, c, ch]], img.data[[r, 47 - c, ch]]);
                }
            }
        }
    }

    #[test]
    fn mask_from_center_arithmetic() {
        let r = mask_from_center((128, 64), (30, 50), (256, 256)).unwrap();
        assert_eq!((r.top, r.bottom()), (113, 143));
        assert_eq!((r.left, r.right()), (39, 89));
    }

    #[test]
    fn mask_from_center_full_image() {
        let r = mask_from_center((32, 32), (64, 64), (64, 64)).unwrap();
        assert_eq!(
            r,
            Rect {
                top: 0,
                left: 0,
                height: 64,
                width: 64
            }
        );
    }

    #[test]
    fn mask_from_center_out_of_bounds() {
        assert!(matches!(
            mask_from_center((5, 5), (30, 50), (256, 256)),
            Err(Error::Geometry(_))
        ));
    }

    #[test]
    fn overlapping_masks_rejected() {
        let r = Rect {
            top: 0,
            left: 0,
            height: 4,
            width: 4,
        };
        assert!(matches!(
            MaskPair::new(r, r, (8, 8)),
            Err(Error::Geometry(_))
        ));
    }

    proptest! {
        #[test]
        fn pixel_partition_roundtrip(seed in 0u64..500) {
            let img = random_image(32, 32, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
            let lh = rng.random_range(2..10usize);
            let lw = rng.random_range(2..10usize);
            let left = Rect { top: rng.random_range(0..32 - lh), left: rng.random_range(0..16 - lw), height: lh, width: lw };
            let right = Rect { top: rng.random_range(0..32 - lh), left: 16 + rng.random_range(0..16 - lw), height: lh, width: lw };
            let m = MaskPair::new(left, right, (32, 32)).unwrap();
            let rebuilt = composite(&apply_mask(&img, &m).unwrap(), &crop_regions(&img, &m).unwrap(), &m).unwrap();
            prop_assert_eq!(rebuilt, img);
        }

        #[test]
        fn apply_mask_idempotent(seed in 0u64..100) {
            let img = random_image(64, 64, seed);
            let m = masks_64();
            let once = apply_mask(&img, &m).unwrap();
            let twice = apply_mask(&once, &m).unwrap();
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn hflip_involution_and_multiset(seed in 0u64..100) {
            let img = random_image(16, 24, seed);
            let back = hflip(&hflip(&img));
            prop_assert_eq!(&back, &img);
            let mut a: Vec<u64> = img.data.iter().map(|v| v.to_bits()).collect();
            let mut b: Vec<u64> = hflip(&img).data.iter().map(|v| v.to_bits()).collect();
            a.sort_unstable();
            b.sort_unstable();
            prop_assert_eq!(a, b);
        }
    }
}
