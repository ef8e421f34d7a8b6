//! Procedural portrait renderer with controllable gaze.
//!
//! Faces are deliberately simple (ellipse head, textured background, disc
//! irises) but carry ground-truth gaze offsets, anti-aliased edges for
//! sub-pixel gaze estimation, and enough noise and texture that the Laplacian
//! residual is nontrivial everywhere.

use ndarray::Array3;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imagecore::{mask_from_center, ImageTensor, MaskPair, Resolution};
use crate::profiles::Profile;

/// Everything needed to render one face deterministically.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceParams {
    pub skin: [f64; 3],
    pub hair: [f64; 3],
    pub iris: [f64; 3],
    /// Head ellipse center `(row, col)` and semi-axes `(vertical, horizontal)`,
    /// in high-resolution pixels.
    pub head_center: (f64, f64),
    pub head_axes: (f64, f64),
    /// Per-eye socket centers `(row, col)`; even so low-res centers are exact.
    pub socket_left: (usize, usize),
    pub socket_right: (usize, usize),
    /// Eye (sclera) ellipse semi-axes `(vertical, horizontal)`.
    pub socket_axes: (f64, f64),
    pub iris_radius: f64,
    /// Gaze offset `(dx, dy)` of both irises from their socket centers, in
    /// high-resolution pixels. The camera-directed pose is `(0, 0)`.
    pub gaze: (f64, f64),
    pub seed: u64,
}

impl FaceParams {
    /// Check the invariants the renderer relies on: the gaze stays within the
    /// per-axis bound and the displaced iris disc stays inside the socket.
    pub fn validate(&self, profile: &Profile) -> Result<()> {
        let (dx, dy) = self.gaze;
        let g = profile.gaze_max;
        if !(dx.is_finite() && dy.is_finite()) || dx.abs() > g || dy.abs() > g {
            return Err(Error::Validation(format!(
                "gaze offset ({dx}, {dy}) outside the permitted [-{g}, {g}] box"
            )));
        }
        let (b, a) = self.socket_axes;
        let r = self.iris_radius;
        if r <= 0.0 || a <= r || b <= r {
            return Err(Error::Validation(format!(
                "iris radius {r} does not fit socket axes ({b}, {a})"
            )));
        }
        let ex = dx / (a - r);
        let ey = dy / (b - r);
        if ex * ex + ey * ey > 1.0 {
            return Err(Error::Validation(format!(
                "iris at offset ({dx}, {dy}) leaves the socket (axes {b}x{a}, radius {r})"
            )));
        }
        Ok(())
    }
}

fn even(v: f64) -> usize {
    let n = v.round().max(0.0) as usize;
    n & !1
}

/// Draw random face parameters. `gaze` is sampled separately per domain.
pub fn sample_params(profile: &Profile, gaze: (f64, f64), rng: &mut ChaCha8Rng) -> FaceParams {
    let f = profile.high as f64 / 128.0;
    let s = profile.high as f64;
    let mut color = |lo: f64, hi: f64| -> [f64; 3] {
        [
            rng.random_range(lo..hi),
            rng.random_range(lo..hi),
            rng.random_range(lo..hi),
        ]
    };
    let base = color(0.2, 0.55);
    // warm skin: boost red, damp blue
    let skin = [base[0] + 0.25, base[1], base[2] - 0.15];
    let hair = color(-0.9, -0.3);
    let iris = color(-0.8, -0.35);
    let head_center = (
        s / 2.0 + rng.random_range(-3.0 * f..3.0 * f),
        s / 2.0 + rng.random_range(-2.0 * f..2.0 * f),
    );
    let head_axes = (
        rng.random_range(49.0 * f..55.0 * f),
        rng.random_range(39.0 * f..45.0 * f),
    );
    let eye_row = even(head_center.0 - 12.0 * f + rng.random_range(-2.0 * f..2.0 * f));
    let spread = rng.random_range(24.0 * f..28.0 * f);
    let socket_left = (eye_row, even(head_center.1 - spread));
    let socket_right = (eye_row, even(head_center.1 + spread));
    let socket_axes = (
        rng.random_range(12.5 * f..13.5 * f),
        rng.random_range(19.0 * f..21.0 * f),
    );
    let iris_radius = rng.random_range(4.0 * f..4.6 * f);
    FaceParams {
        skin,
        hair,
        iris,
        head_center,
        head_axes,
        socket_left,
        socket_right,
        socket_axes,
        iris_radius,
        gaze,
        seed: rng.random(),
    }
}

/// Linear 1-px edge coverage for a signed distance (negative = inside).
fn coverage(signed_dist: f64) -> f64 {
    (0.5 - signed_dist).clamp(0.0, 1.0)
}

fn ellipse_dist(r: f64, c: f64, center: (f64, f64), axes: (f64, f64)) -> f64 {
    // Approximate signed distance, exact enough for 1-px anti-aliasing.
    let dy = (r - center.0) / axes.0;
    let dx = (c - center.1) / axes.1;
    let q = (dx * dx + dy * dy).sqrt();
    (q - 1.0) * axes.0.min(axes.1)
}

fn blend(px: &mut [f64; 3], color: &[f64; 3], cov: f64) {
    for ch in 0..3 {
        px[ch] = px[ch] * (1.0 - cov) + color[ch] * cov;
    }
}

/// Render one portrait at high resolution, returning the image, its eye-mask
/// geometry and the ground-truth gaze offset. Deterministic given the params.
pub fn render_face(
    params: &FaceParams,
    profile: &Profile,
) -> Result<(ImageTensor, MaskPair, (f64, f64))> {
    params.validate(profile)?;
    let s = profile.high;
    let bounds = (s, s);
    let left = mask_from_center(params.socket_left, profile.crop_high, bounds)?;
    let right = mask_from_center(params.socket_right, profile.crop_high, bounds)?;
    let masks = MaskPair::new(left, right, bounds)?;

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let sf = s as f64;
    // background texture: two low-frequency sinusoids per channel
    let bg_base: Vec<f64> = (0..3).map(|_| rng.random_range(-0.3..0.3)).collect();
    let waves: Vec<(f64, f64, f64, f64)> = (0..2)
        .map(|_| {
            (
                rng.random_range(2.0..6.0) / sf,
                rng.random_range(2.0..6.0) / sf,
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.08..0.18),
            )
        })
        .collect();

    let sclera = [0.78, 0.76, 0.70];
    let pupil = [-0.92, -0.92, -0.90];
    let mouth_color = [-0.45, -0.6, -0.6];
    let mouth_center = (
        params.head_center.0 + params.head_axes.0 * 0.55,
        params.head_center.1,
    );
    let f = sf / 128.0;
    let mouth_axes = (3.0 * f, 9.0 * f);
    let nose_center = (
        params.head_center.0 + params.head_axes.0 * 0.18,
        params.head_center.1,
    );
    let nose_axes = (4.0 * f, 2.0 * f);
    let nose_color = [
        params.skin[0] - 0.18,
        params.skin[1] - 0.18,
        params.skin[2] - 0.18,
    ];
    let hairline = params.head_center.0 - params.head_axes.0 * 0.45;
    let iris_center = |socket: (usize, usize)| {
        (
            socket.0 as f64 + params.gaze.1,
            socket.1 as f64 + params.gaze.0,
        )
    };

    let mut data = Array3::zeros((s, s, 3));
    for row in 0..s {
        for col in 0..s {
            let (rf, cf) = (row as f64, col as f64);
            let mut px = [0.0f64; 3];
            for ch in 0..3 {
                let mut v = bg_base[ch];
                for &(fr, fc, phase, amp) in &waves {
                    v += amp
                        * (std::f64::consts::TAU * (fr * rf + fc * cf * (1.0 + ch as f64 * 0.1))
                            + phase)
                            .sin();
                }
                px[ch] = v;
            }
            // head, hair band on the upper part of the head
            let head = coverage(ellipse_dist(rf, cf, params.head_center, params.head_axes));
            blend(&mut px, &params.skin, head);
            if head > 0.0 && rf < hairline {
                blend(&mut px, &params.hair, head);
            }
            // facial features
            let nose = coverage(ellipse_dist(rf, cf, nose_center, nose_axes));
            blend(&mut px, &nose_color, nose);
            let mouth = coverage(ellipse_dist(rf, cf, mouth_center, mouth_axes));
            blend(&mut px, &mouth_color, mouth);
            // eyes: sclera ellipse, iris disc at socket + gaze, pupil
            for socket in [params.socket_left, params.socket_right] {
                let sc = (socket.0 as f64, socket.1 as f64);
                let eye = coverage(ellipse_dist(rf, cf, sc, params.socket_axes));
                if eye > 0.0 {
                    blend(&mut px, &sclera, eye);
                    let ic = iris_center(socket);
                    let d = ((rf - ic.0).powi(2) + (cf - ic.1).powi(2)).sqrt();
                    blend(&mut px, &params.iris, coverage(d - params.iris_radius));
                    blend(&mut px, &pupil, coverage(d - params.iris_radius * 0.45));
                }
            }
            for (ch, v) in px.iter().enumerate() {
                data[[row, col, ch]] = v.clamp(-1.0, 1.0);
            }
        }
    }
    // mild per-pixel noise, clamped back into range
    let noise = rand_distr::Normal::new(0.0, 0.01).unwrap();
    for v in data.iter_mut() {
        *v = (*v + noise.sample(&mut rng)).clamp(-1.0, 1.0);
    }

    Ok((
        ImageTensor::new(data, Resolution::High)?,
        masks,
        params.gaze,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_is_deterministic() {
        let profile = Profile::desk();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let params = sample_params(&profile, (3.0, -2.0), &mut rng);
        let (a, ma, _) = render_face(&params, &profile).unwrap();
        let (b, mb, _) = render_face(&params, &profile).unwrap();
        assert_eq!(a, b);
        assert_eq!(ma, mb);
    }

    #[test]
    fn sockets_are_even_and_masks_fit() {
        let profile = Profile::desk();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for i in 0..50 {
            let params = sample_params(&profile, (0.0, 0.0), &mut rng);
            assert_eq!(params.socket_left.0 % 2, 0, "face {i}");
            assert_eq!(params.socket_left.1 % 2, 0);
            assert_eq!(params.socket_right.1 % 2, 0);
            render_face(&params, &profile).unwrap();
        }
    }

    #[test]
    fn out_of_socket_gaze_rejected() {
        let profile = Profile::desk();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut params = sample_params(&profile, (0.0, 0.0), &mut rng);
        params.gaze = (0.0, 20.0);
        assert!(matches!(
            render_face(&params, &profile),
            Err(Error::Validation(_))
        ));
    }
}
