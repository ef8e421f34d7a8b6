//! Analytic gaze oracle: locate the iris as the darkest disc inside each eye
//! rectangle and report its offset from the socket (rectangle) center.
//!
//! This is the evaluation instrument that stands in for human judgment of
//! "is the gaze corrected": renders carry ground-truth offsets, and the
//! matched filter recovers them to about half a pixel on clean images.

use crate::imagecore::{ImageTensor, MaskPair, Rect};

/// Minimum sclera-to-iris contrast for a detection to count.
const MIN_CONTRAST: f64 = 0.2;

/// Per-eye estimates; `None` means no disc response above threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GazeEstimate {
    pub left: Option<(f64, f64)>,
    pub right: Option<(f64, f64)>,
}

impl GazeEstimate {
    /// Mean Euclidean norm over the eyes that produced an estimate.
    pub fn mean_norm(&self) -> Option<f64> {
        let mut acc = 0.0;
        let mut n = 0;
        for e in [self.left, self.right].into_iter().flatten() {
            acc += (e.0 * e.0 + e.1 * e.1).sqrt();
            n += 1;
        }
        (n > 0).then(|| acc / n as f64)
    }
}

fn luminance(img: &ImageTensor, r: usize, c: usize) -> f64 {
    (img.data[[r, c, 0]] + img.data[[r, c, 1]] + img.data[[r, c, 2]]) / 3.0
}

/// Mean luminance over a disc, or `None` if the disc leaves the rectangle.
fn disc_mean(img: &ImageTensor, rect: &Rect, center: (f64, f64), radius: f64) -> Option<f64> {
    let mut acc = 0.0;
    let mut n = 0usize;
    let r0 = (center.0 - radius).floor() as isize;
    let r1 = (center.0 + radius).ceil() as isize;
    let c0 = (center.1 - radius).floor() as isize;
    let c1 = (center.1 + radius).ceil() as isize;
    if r0 < rect.top as isize
        || c0 < rect.left as isize
        || r1 >= rect.bottom() as isize
        || c1 >= rect.right() as isize
    {
        return None;
    }
    for r in r0..=r1 {
        for c in c0..=c1 {
            let dr = r as f64 - center.0;
            let dc = c as f64 - center.1;
            if dr * dr + dc * dc <= radius * radius {
                acc += luminance(img, r as usize, c as usize);
                n += 1;
            }
        }
    }
    (n > 0).then(|| acc / n as f64)
}

fn estimate_eye(img: &ImageTensor, rect: &Rect, iris_radius: f64) -> Option<(f64, f64)> {
    let center = rect.center();
    let (cy, cx) = (center.0 as f64, center.1 as f64);
    let margin = iris_radius.ceil() + 1.0;
    let sy = (rect.height as f64 / 2.0 - margin).floor().max(0.0) as isize;
    let sx = (rect.width as f64 / 2.0 - margin).floor().max(0.0) as isize;

    let score = |dy: isize, dx: isize| -> Option<f64> {
        disc_mean(img, rect, (cy + dy as f64, cx + dx as f64), iris_radius)
    };

    let mut best = (0isize, 0isize);
    let mut best_score = f64::INFINITY;
    for dy in -sy..=sy {
        for dx in -sx..=sx {
            if let Some(s) = score(dy, dx) {
                if s < best_score {
                    best_score = s;
                    best = (dy, dx);
                }
            }
        }
    }
    if !best_score.is_finite() {
        return None;
    }

    // contrast gate: the darkest disc must stand out against the whole eye box
    let mut total = 0.0;
    let mut n = 0usize;
    for r in rect.top..rect.bottom() {
        for c in rect.left..rect.right() {
            total += luminance(img, r, c);
            n += 1;
        }
    }
    let box_mean = total / n as f64;
    if box_mean - best_score < MIN_CONTRAST {
        return None;
    }

    // sub-pixel refinement: 3-point parabola per axis on the score surface
    let refine = |m1: Option<f64>, z: f64, p1: Option<f64>| -> f64 {
        match (m1, p1) {
            (Some(a), Some(b)) => {
                let denom = a - 2.0 * z + b;
                if denom.abs() < 1e-12 {
                    0.0
                } else {
                    (0.5 * (a - b) / denom).clamp(-0.5, 0.5)
                }
            }
            _ => 0.0,
        }
    };
    let dy = best.0 as f64
        + refine(
            score(best.0 - 1, best.1),
            best_score,
            score(best.0 + 1, best.1),
        );
    let dx = best.1 as f64
        + refine(
            score(best.0, best.1 - 1),
            best_score,
            score(best.0, best.1 + 1),
        );
    Some((dx, dy))
}

/// Estimate the per-eye gaze offset `(dx, dy)` in pixels from the darkest
/// disc inside each mask rectangle. `iris_radius` is the matched-filter
/// radius, normally `0.035 * image side`.
pub fn estimate_gaze(img: &ImageTensor, masks: &MaskPair, iris_radius: f64) -> GazeEstimate {
    GazeEstimate {
        left: estimate_eye(img, &masks.left, iris_radius),
        right: estimate_eye(img, &masks.right, iris_radius),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagecore::Resolution;
    use crate::profiles::Profile;
    use crate::synthgaze::render::{render_face, sample_params};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn filter_radius(profile: &Profile) -> f64 {
        0.035 * profile.high as f64
    }

    #[test]
    fn centered_gaze_within_half_pixel() {
        let profile = Profile::desk();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = sample_params(&profile, (0.0, 0.0), &mut rng);
        let (img, masks, _) = render_face(&params, &profile).unwrap();
        let est = estimate_gaze(&img, &masks, filter_radius(&profile));
        for e in [est.left.unwrap(), est.right.unwrap()] {
            assert!(e.0.abs() <= 0.5 && e.1.abs() <= 0.5, "estimate {e:?}");
        }
    }

    #[test]
    fn offset_gazes_within_one_pixel() {
        let profile = Profile::desk();
        for (seed, g) in [(8u64, (6.0, 0.0)), (9, (-5.0, 3.0))] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params = sample_params(&profile, g, &mut rng);
            let (img, masks, _) = render_face(&params, &profile).unwrap();
            let est = estimate_gaze(&img, &masks, filter_radius(&profile));
            for e in [est.left.unwrap(), est.right.unwrap()] {
                assert!(
                    (e.0 - g.0).abs() <= 1.0 && (e.1 - g.1).abs() <= 1.0,
                    "gaze {g:?} estimated as {e:?}"
                );
            }
        }
    }

    #[test]
    fn uniform_gray_fails_detection() {
        let profile = Profile::desk();
        let img = ImageTensor::constant(128, 128, 0.2, Resolution::High);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = sample_params(&profile, (0.0, 0.0), &mut rng);
        let (_, masks, _) = render_face(&params, &profile).unwrap();
        let est = estimate_gaze(&img, &masks, filter_radius(&profile));
        assert_eq!(est.left, None);
        assert_eq!(est.right, None);
    }

    #[test]
    fn oracle_soundness_over_many_renders() {
        let profile = Profile::desk();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut err_x = 0.0;
        let mut err_y = 0.0;
        let n = 200;
        for _ in 0..n {
            let g = loop {
                let g = (
                    rng.random_range(-8.0f64..8.0),
                    rng.random_range(-4.0f64..4.0),
                );
                if g.0.abs() + 5.0 <= 19.0 && (g.0 / 14.0).powi(2) + (g.1 / 8.0).powi(2) <= 1.0 {
                    break g;
                }
            };
            let params = sample_params(&profile, g, &mut rng);
            let (img, masks, _) = render_face(&params, &profile).unwrap();
            let est = estimate_gaze(&img, &masks, filter_radius(&profile));
            let mut per_face_x = 0.0;
            let mut per_face_y = 0.0;
            for e in [est.left.unwrap(), est.right.unwrap()] {
                per_face_x += (e.0 - g.0).abs() / 2.0;
                per_face_y += (e.1 - g.1).abs() / 2.0;
            }
            err_x += per_face_x;
            err_y += per_face_y;
        }
        let (mx, my) = (err_x / n as f64, err_y / n as f64);
        assert!(mx < 1.0, "mean |dx| error {mx}");
        assert!(my < 1.0, "mean |dy| error {my}");
    }
}
