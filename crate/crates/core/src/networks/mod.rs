//! The trainable model set and its evaluation-mode interfaces.
//!
//! Seven networks: the pretrained eye autoencoder `g_pre` (whose encoder is
//! the content encoder), the angle encoder `e_r`, the correction generator
//! `g_x`, the animation generator `g_y`, the local refiner `g_h`, and the
//! discriminators `d_x`, `d_y` (global+local) and `d_h` (local only).

pub mod layers;
pub mod models;

use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2, Array4};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imagecore::{ImageTensor, MaskPair};
use crate::profiles::{AblationFlags, Profile};
use crate::tensor::{Tape, VarId};

pub use layers::{spectral_normalize, Binder, Module, ParamTensor, SnState};
pub use models::{
    AngleEncoder, CropDisc, EyeAutoencoder, GlobalLocalDisc, InpaintGenerator, LocalRefiner,
};

use rand::SeedableRng;

/// Per-eye latent codes: two angle codes and two content codes.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCodes {
    pub r_left: Array1<f64>,
    pub r_right: Array1<f64>,
    pub c_left: Array1<f64>,
    pub c_right: Array1<f64>,
}

impl LatentCodes {
    pub fn validate(&self, profile: &Profile) -> Result<()> {
        for (name, v, want) in [
            ("r_left", &self.r_left, profile.code_r),
            ("r_right", &self.r_right, profile.code_r),
            ("c_left", &self.c_left, profile.code_c),
            ("c_right", &self.c_right, profile.code_c),
        ] {
            if v.len() != want {
                return Err(Error::Shape(format!(
                    "{name} has {} dims, profile wants {want}",
                    v.len()
                )));
            }
            if !v.iter().all(|x| x.is_finite()) {
                return Err(Error::Shape(format!("{name} contains non-finite values")));
            }
        }
        Ok(())
    }
}

/// The seven networks plus the ablation flags that gate their use.
#[derive(Clone)]
pub struct ModelSet {
    pub profile: Profile,
    pub flags: AblationFlags,
    pub g_pre: EyeAutoencoder,
    pub e_r: AngleEncoder,
    pub g_x: InpaintGenerator,
    pub g_y: InpaintGenerator,
    pub g_h: LocalRefiner,
    pub d_x: GlobalLocalDisc,
    pub d_y: GlobalLocalDisc,
    pub d_h: CropDisc,
}

/// Deterministically initialize the full model set from a seed: weights are
/// normal with sigma 0.02, biases zero, norm scales one.
pub fn build_model_set(profile: &Profile, flags: AblationFlags, seed: u64) -> Result<ModelSet> {
    profile.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g_pre = EyeAutoencoder::new(profile, profile.crop_low, profile.code_c, &mut rng);
    let e_r = AngleEncoder::new(profile, profile.crop_low, profile.code_r, &mut rng);
    let g_x = InpaintGenerator::new(profile, 2 * profile.code_c, &mut rng);
    let g_y = InpaintGenerator::new(profile, 2 * profile.code_c + 2 * profile.code_r, &mut rng);
    let g_h = LocalRefiner::new(profile, &mut rng);
    let mut d_x = GlobalLocalDisc::new(profile, &mut rng);
    let mut d_y = GlobalLocalDisc::new(profile, &mut rng);
    let mut d_h = CropDisc::new(profile, &mut rng);
    // settle the power-iteration state so the very first normalized forward
    // already sees a converged top-singular-value estimate
    d_x.power_iterate(50);
    d_y.power_iterate(50);
    d_h.power_iterate(50);
    Ok(ModelSet {
        profile: profile.clone(),
        flags,
        g_pre,
        e_r,
        g_x,
        g_y,
        g_h,
        d_x,
        d_y,
        d_h,
    })
}

pub const MODEL_NAMES: [&str; 8] = ["g_pre", "e_r", "g_x", "g_y", "g_h", "d_x", "d_y", "d_h"];

impl ModelSet {
    pub fn model(&self, name: &str) -> &dyn Module {
        match name {
            "g_pre" => &self.g_pre,
            "e_r" => &self.e_r,
            "g_x" => &self.g_x,
            "g_y" => &self.g_y,
            "g_h" => &self.g_h,
            "d_x" => &self.d_x,
            "d_y" => &self.d_y,
            "d_h" => &self.d_h,
            other => panic!("unknown model {other}"),
        }
    }

    pub fn model_mut(&mut self, name: &str) -> &mut dyn Module {
        match name {
            "g_pre" => &mut self.g_pre,
            "e_r" => &mut self.e_r,
            "g_x" => &mut self.g_x,
            "g_y" => &mut self.g_y,
            "g_h" => &mut self.g_h,
            "d_x" => &mut self.d_x,
            "d_y" => &mut self.d_y,
            "d_h" => &mut self.d_h,
            other => panic!("unknown model {other}"),
        }
    }

    /// Exact trainable scalar counts, per model and total. Power-iteration
    /// vectors are buffers, not parameters, and are excluded.
    pub fn count_params(&self) -> (BTreeMap<String, usize>, usize) {
        let mut per = BTreeMap::new();
        let mut total = 0;
        for name in MODEL_NAMES {
            let n = self.model(name).param_count();
            per.insert(name.to_string(), n);
            total += n;
        }
        (per, total)
    }

    /// One power-iteration refresh for every discriminator weight.
    pub fn power_iterate_discs(&mut self, steps: usize) {
        self.d_x.power_iterate(steps);
        self.d_y.power_iterate(steps);
        self.d_h.power_iterate(steps);
    }

    // ---- evaluation-mode forwards ---------------------------------------

    fn check_crop_batch(&self, crops: &Array4<f64>) -> Result<()> {
        let (_, c, h, w) = crops.dim();
        let want = self.profile.crop_low;
        if c != 3 || (h, w) != want {
            return Err(Error::Shape(format!(
                "eye crops must be (B, 3, {}, {}), got {:?}",
                want.0,
                want.1,
                crops.dim()
            )));
        }
        Ok(())
    }

    /// Content codes for a batch of low-res eye crops. With component A
    /// ablated this returns zeros: the conditioning is disabled.
    pub fn encode_content(&self, crops: &Array4<f64>) -> Result<Array2<f64>> {
        self.check_crop_batch(crops)?;
        let b = crops.dim().0;
        if !self.flags.use_pam_content {
            return Ok(Array2::zeros((b, self.profile.code_c)));
        }
        let mut tape = Tape::new();
        let mut bind = Binder::new();
        let x = tape.leaf4(crops.clone());
        let code = self.g_pre.encode(&mut tape, &mut bind, "g_pre", x);
        Ok(tape
            .value(code)
            .to_owned()
            .into_dimensionality()
            .expect("code shape"))
    }

    /// Angle codes for a batch of low-res eye crops. Left-eye crops should be
    /// mirrored before calling; the encoder weights are shared across eyes.
    pub fn encode_angle(&self, crops: &Array4<f64>) -> Result<Array2<f64>> {
        self.check_crop_batch(crops)?;
        let mut tape = Tape::new();
        let mut bind = Binder::new();
        let x = tape.leaf4(crops.clone());
        let code = self.e_r.forward(&mut tape, &mut bind, "e_r", x);
        Ok(tape
            .value(code)
            .to_owned()
            .into_dimensionality()
            .expect("code shape"))
    }

    fn check_masked_input(&self, masked: &Array4<f64>) -> Result<()> {
        let (_, c, h, w) = masked.dim();
        let low = self.profile.low;
        if c != 4 || h != low || w != low {
            return Err(Error::Shape(format!(
                "generator input must be (B, 4, {low}, {low}), got {:?}",
                masked.dim()
            )));
        }
        Ok(())
    }

    /// Correction generator: masked image (+ hole channel) and content codes
    /// `(B, 2 * code_c)` to a full image batch.
    pub fn inpaint_x(&self, masked: &Array4<f64>, c_codes: &Array2<f64>) -> Result<Array4<f64>> {
        self.check_masked_input(masked)?;
        if c_codes.dim() != (masked.dim().0, 2 * self.profile.code_c) {
            return Err(Error::Shape(format!(
                "content codes must be (B, {}), got {:?}",
                2 * self.profile.code_c,
                c_codes.dim()
            )));
        }
        let mut tape = Tape::new();
        let mut bind = Binder::new();
        let x = tape.leaf4(masked.clone());
        let codes = tape.leaf(c_codes.clone().into_dyn());
        let y = self.g_x.forward(&mut tape, &mut bind, "g_x", x, codes);
        Ok(tape
            .value(y)
            .to_owned()
            .into_dimensionality()
            .expect("image shape"))
    }

    /// Animation generator: adds the per-eye angle codes `(B, 2 * code_r)`.
    pub fn inpaint_y(
        &self,
        masked: &Array4<f64>,
        r_codes: &Array2<f64>,
        c_codes: &Array2<f64>,
    ) -> Result<Array4<f64>> {
        self.check_masked_input(masked)?;
        if r_codes.dim() != (masked.dim().0, 2 * self.profile.code_r) {
            return Err(Error::Shape(format!(
                "angle codes must be (B, {}), got {:?}",
                2 * self.profile.code_r,
                r_codes.dim()
            )));
        }
        if c_codes.dim() != (masked.dim().0, 2 * self.profile.code_c) {
            return Err(Error::Shape(format!(
                "content codes must be (B, {}), got {:?}",
                2 * self.profile.code_c,
                c_codes.dim()
            )));
        }
        let mut tape = Tape::new();
        let mut bind = Binder::new();
        let x = tape.leaf4(masked.clone());
        let c = tape.leaf(c_codes.clone().into_dyn());
        let r = tape.leaf(r_codes.clone().into_dyn());
        let codes = tape.concat(&[c, r], 1);
        let y = self.g_y.forward(&mut tape, &mut bind, "g_y", x, codes);
        Ok(tape
            .value(y)
            .to_owned()
            .into_dimensionality()
            .expect("image shape"))
    }

    /// Refiner residual for high-resolution eye crops.
    pub fn refine_residual(&self, crops: &Array4<f64>) -> Result<Array4<f64>> {
        let (_, c, h, w) = crops.dim();
        if c != 3 || (h, w) != self.profile.crop_high {
            return Err(Error::Shape(format!(
                "refiner input must be (B, 3, {}, {}), got {:?}",
                self.profile.crop_high.0,
                self.profile.crop_high.1,
                crops.dim()
            )));
        }
        let mut tape = Tape::new();
        let mut bind = Binder::new();
        let x = tape.leaf4(crops.clone());
        let y = self.g_h.forward(&mut tape, &mut bind, "g_h", x);
        Ok(tape
            .value(y)
            .to_owned()
            .into_dimensionality()
            .expect("crop shape"))
    }

    /// Global+local discriminator probabilities, one per sample.
    pub fn discriminate_global_local(
        &self,
        which: DiscKind,
        image: &Array4<f64>,
        crops6: &Array4<f64>,
    ) -> Result<Array1<f64>> {
        let disc = match which {
            DiscKind::X => &self.d_x,
            DiscKind::Y => &self.d_y,
        };
        let (b, c, h, w) = image.dim();
        if c != 3 || h != disc.image_size || w != disc.image_size {
            return Err(Error::Shape(format!(
                "discriminator image must be (B, 3, {0}, {0}), got {1:?}",
                disc.image_size,
                image.dim()
            )));
        }
        let (b2, c2, ch, cw) = crops6.dim();
        if b2 != b || c2 != 6 || (ch, cw) != disc.crop {
            return Err(Error::Shape(format!(
                "discriminator crops must be (B, 6, {}, {}), got {:?}",
                disc.crop.0,
                disc.crop.1,
                crops6.dim()
            )));
        }
        let mut tape = Tape::new();
        let mut bind = Binder::new();
        let img = tape.leaf4(image.clone());
        let cr = tape.leaf4(crops6.clone());
        let p = disc.forward(&mut tape, &mut bind, "d", img, cr);
        let v = tape.value(p).to_owned();
        Ok(Array1::from_iter(v.iter().copied()))
    }

    /// Local crop discriminator probabilities over inflated high-res crops.
    pub fn discriminate_local(&self, crops: &Array4<f64>) -> Result<Array1<f64>> {
        let (_, c, h, w) = crops.dim();
        if c != 3 || (h, w) != self.d_h.crop {
            return Err(Error::Shape(format!(
                "crop discriminator input must be (B, 3, {}, {}), got {:?}",
                self.d_h.crop.0,
                self.d_h.crop.1,
                crops.dim()
            )));
        }
        let mut tape = Tape::new();
        let mut bind = Binder::new();
        let cr = tape.leaf4(crops.clone());
        let p = self.d_h.forward(&mut tape, &mut bind, "d_h", cr);
        let v = tape.value(p).to_owned();
        Ok(Array1::from_iter(v.iter().copied()))
    }

    /// Content codes on the tape, honoring the A ablation (zeros, unbound).
    pub fn encode_content_t(
        &self,
        tape: &mut Tape,
        bind: &mut Binder,
        crops: VarId,
    ) -> VarId {
        if self.flags.use_pam_content {
            self.g_pre.encode(tape, bind, "g_pre", crops)
        } else {
            let b = tape.shape(crops)[0];
            tape.leaf(ndarray::ArrayD::zeros(ndarray::IxDyn(&[
                b,
                self.profile.code_c,
            ])))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiscKind {
    X,
    Y,
}

/// Build the 4-channel generator input: the masked RGB image plus a hole
/// indicator that is 1 inside the eye rectangles.
pub fn masked_input(image_low: &ImageTensor, masks_low: &MaskPair) -> Result<Array4<f64>> {
    let masked = crate::imagecore::apply_mask(image_low, masks_low)?;
    let (h, w) = masked.bounds();
    let mut out = Array4::zeros((1, 4, h, w));
    for r in 0..h {
        for c in 0..w {
            for ch in 0..3 {
                out[[0, ch, r, c]] = masked.data[[r, c, ch]];
            }
        }
    }
    for rect in masks_low.rects() {
        out.slice_mut(s![0, 3, rect.top..rect.bottom(), rect.left..rect.right()])
            .fill(1.0);
    }
    Ok(out)
}

/// Stack `(H, W, 3)` images into an NCHW batch.
pub fn batch_from_images(images: &[&ImageTensor]) -> Array4<f64> {
    assert!(!images.is_empty());
    let (h, w) = images[0].bounds();
    let mut out = Array4::zeros((images.len(), 3, h, w));
    for (b, img) in images.iter().enumerate() {
        assert_eq!(img.bounds(), (h, w), "mixed sizes in batch");
        for r in 0..h {
            for c in 0..w {
                for ch in 0..3 {
                    out[[b, ch, r, c]] = img.data[[r, c, ch]];
                }
            }
        }
    }
    out
}

/// Extract one NCHW sample back into an `(H, W, 3)` image.
pub fn image_from_batch(batch: &Array4<f64>, index: usize) -> ImageTensor {
    let (_, _, h, w) = batch.dim();
    let mut data = ndarray::Array3::zeros((h, w, 3));
    for r in 0..h {
        for c in 0..w {
            for ch in 0..3 {
                data[[r, c, ch]] = batch[[index, ch, r, c]];
            }
        }
    }
    ImageTensor {
        data,
        resolution: crate::imagecore::Resolution::High,
    }
}

/// Mirror NCHW crops around the vertical axis (left-eye orientation).
pub fn mirror_crops(crops: &Array4<f64>) -> Array4<f64> {
    crops
        .slice(s![.., .., .., ..;-1])
        .as_standard_layout()
        .to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;

    fn random_batch(b: usize, c: usize, h: usize, w: usize, seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn((b, c, h, w), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn forward_shapes_match_contract() {
        let p = Profile::desk();
        let ms = build_model_set(&p, AblationFlags::default(), 0).unwrap();
        let masked = random_batch(2, 4, 64, 64, 1);
        let c = Array2::zeros((2, 512));
        let out = ms.inpaint_x(&masked, &c).unwrap();
        assert_eq!(out.dim(), (2, 3, 64, 64));
        assert!(out.iter().all(|v| v.is_finite() && v.abs() <= 1.0));
        let r = Array2::zeros((2, 256));
        let out = ms.inpaint_y(&masked, &r, &c).unwrap();
        assert_eq!(out.dim(), (2, 3, 64, 64));
        let crops = random_batch(4, 3, 16, 24, 2);
        assert_eq!(ms.encode_content(&crops).unwrap().dim(), (4, 256));
        assert_eq!(ms.encode_angle(&crops).unwrap().dim(), (4, 128));
        let hi = random_batch(4, 3, 32, 48, 3);
        assert_eq!(ms.refine_residual(&hi).unwrap().dim(), (4, 3, 32, 48));
    }

    #[test]
    fn encoders_are_deterministic() {
        let p = Profile::desk();
        let ms = build_model_set(&p, AblationFlags::default(), 3).unwrap();
        let zero = Array4::zeros((1, 3, 16, 24));
        let a = ms.encode_content(&zero).unwrap();
        let b = ms.encode_content(&zero).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.is_finite()));
        // saturated crops stay finite
        let sat = Array4::from_elem((1, 3, 16, 24), 1.0);
        assert!(ms.encode_angle(&sat).unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn ablation_a_returns_zero_codes() {
        let p = Profile::desk();
        let flags = AblationFlags::default().without(crate::profiles::AblationAxis::A);
        let ms = build_model_set(&p, flags, 3).unwrap();
        let crops = random_batch(2, 3, 16, 24, 5);
        let c = ms.encode_content(&crops).unwrap();
        assert!(c.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn same_seed_same_parameters() {
        let p = Profile::mini();
        let a = build_model_set(&p, AblationFlags::default(), 42).unwrap();
        let b = build_model_set(&p, AblationFlags::default(), 42).unwrap();
        let mut names_a = Vec::new();
        a.g_x.visit_params("g_x", &mut |n, t| {
            names_a.push((n.to_string(), t.data.clone()));
        });
        let mut i = 0;
        b.g_x.visit_params("g_x", &mut |n, t| {
            assert_eq!(names_a[i].0, n);
            assert_eq!(names_a[i].1, t.data);
            i += 1;
        });
        assert!(i > 0);
        let c = build_model_set(&p, AblationFlags::default(), 43).unwrap();
        let mut any_diff = false;
        let mut j = 0;
        c.g_x.visit_params("g_x", &mut |_, t| {
            if names_a[j].1 != t.data {
                any_diff = true;
            }
            j += 1;
        });
        assert!(any_diff);
    }

    #[test]
    fn discriminators_output_probabilities() {
        let p = Profile::desk();
        let ms = build_model_set(&p, AblationFlags::default(), 7).unwrap();
        let img = random_batch(3, 3, 64, 64, 11);
        let crops = random_batch(3, 6, 16, 24, 12);
        for kind in [DiscKind::X, DiscKind::Y] {
            let probs = ms.discriminate_global_local(kind, &img, &crops).unwrap();
            assert_eq!(probs.len(), 3);
            assert!(probs.iter().all(|p| *p > 0.0 && *p < 1.0));
        }
        let inflated = random_batch(5, 3, 48, 72, 13);
        let probs = ms.discriminate_local(&inflated).unwrap();
        assert_eq!(probs.len(), 5);
        assert!(probs.iter().all(|p| *p > 0.0 && *p < 1.0));
    }

    #[test]
    fn spectral_bound_holds_after_power_iteration() {
        let p = Profile::mini();
        let mut ms = build_model_set(&p, AblationFlags::default(), 9).unwrap();
        ms.power_iterate_discs(10);
        for (name, w, sn) in ms
            .d_x
            .sn_weights()
            .into_iter()
            .chain(ms.d_y.sn_weights())
            .chain(ms.d_h.sn_weights())
        {
            let sigma = sn.sigma(w);
            let flat = nalgebra::DMatrix::from_fn(sn.u.len(), sn.v.len(), |i, j| {
                w.view().to_shape((sn.u.len(), sn.v.len())).unwrap()[[i, j]]
            });
            let top = flat.svd(false, false).singular_values[0];
            let normalized_top = top / sigma;
            assert!(
                (0.95..=1.05).contains(&normalized_top),
                "{name}: normalized sigma {normalized_top}"
            );
        }
    }

    #[test]
    fn mini_profile_runs_forward() {
        let p = Profile::mini();
        let ms = build_model_set(&p, AblationFlags::default(), 1).unwrap();
        let masked = random_batch(2, 4, 8, 8, 1);
        let c = Array2::zeros((2, 32));
        let r = Array2::zeros((2, 16));
        assert_eq!(ms.inpaint_x(&masked, &c).unwrap().dim(), (2, 3, 8, 8));
        assert_eq!(ms.inpaint_y(&masked, &r, &c).unwrap().dim(), (2, 3, 8, 8));
        let crops = random_batch(2, 3, 3, 5, 2);
        assert_eq!(ms.encode_content(&crops).unwrap().dim(), (2, 16));
        let hi = random_batch(2, 3, 6, 10, 3);
        assert_eq!(ms.refine_residual(&hi).unwrap().dim(), (2, 3, 6, 10));
        let inflated = random_batch(2, 3, p.crop_inflated().0, p.crop_inflated().1, 4);
        ms.discriminate_local(&inflated).unwrap();
    }

    #[test]
    fn param_counts_are_positive_and_stable() {
        let p = Profile::desk();
        let ms = build_model_set(&p, AblationFlags::default(), 0).unwrap();
        let (per, total) = ms.count_params();
        assert_eq!(per.len(), 8);
        assert!(per.values().all(|n| *n > 0));
        assert_eq!(per.values().sum::<usize>(), total);
        let ms2 = build_model_set(&p, AblationFlags::default(), 123).unwrap();
        assert_eq!(ms2.count_params(), (per, total));
    }

    #[test]
    fn hq_profile_builds() {
        let p = Profile::hq();
        let ms = build_model_set(&p, AblationFlags::default(), 0).unwrap();
        let crops = random_batch(1, 3, 30, 50, 2);
        assert_eq!(ms.encode_content(&crops).unwrap().dim(), (1, 256));
        let hi = random_batch(1, 3, 46, 80, 3);
        assert_eq!(ms.refine_residual(&hi).unwrap().dim(), (1, 3, 46, 80));
    }
}
