//! Resolution/architecture profiles and the training configuration.
//!
//! Everything scale-dependent funnels through [`Profile`] so the desk preset,
//! the HQ preset and the miniature gradient-check preset share all code.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Geometry and network-width preset. `(h, w)` pairs are row-major pixel
/// sizes; crops refer to a single eye rectangle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub name: String,
    /// High-resolution image side (square images).
    pub high: usize,
    /// Low-resolution image side; always `high / 2`.
    pub low: usize,
    /// Per-eye mask at low resolution.
    pub crop_low: (usize, usize),
    /// Per-eye mask at high resolution.
    pub crop_high: (usize, usize),
    /// Fraction added to each side of the high-res crop before it is fed to
    /// the crop discriminator.
    pub inflate: f64,
    /// Content code length per eye.
    pub code_c: usize,
    /// Angle code length per eye.
    pub code_r: usize,
    /// Base channel width of the two inpainting generators.
    pub gen_base: usize,
    /// Stride-2 stages in the inpainting generators.
    pub gen_downs: usize,
    /// Residual blocks at the generator bottleneck.
    pub gen_blocks: usize,
    /// Base width of the pretrained eye autoencoder and the angle encoder.
    pub pre_base: usize,
    /// Base width of the discriminators.
    pub disc_base: usize,
    /// Base width of the local refiner.
    pub refiner_base: usize,
    /// Per-axis bound on the gaze offset, in high-resolution pixels.
    pub gaze_max: f64,
}

impl Profile {
    /// Default desk-scale preset: trains end to end on a single CPU core.
    pub fn desk() -> Self {
        Profile {
            name: "desk".into(),
            high: 128,
            low: 64,
            crop_low: (16, 24),
            crop_high: (32, 48),
            inflate: 0.25,
            code_c: 256,
            code_r: 128,
            gen_base: 8,
            gen_downs: 3,
            gen_blocks: 1,
            pre_base: 8,
            disc_base: 8,
            refiner_base: 6,
            gaze_max: 8.0,
        }
    }

    /// High-resolution preset mirroring the published mask sizes. Note the
    /// high-res mask is fixed at 46x80, not exactly double the 30x50 low-res
    /// mask.
    pub fn hq() -> Self {
        Profile {
            name: "hq".into(),
            high: 512,
            low: 256,
            crop_low: (30, 50),
            crop_high: (46, 80),
            inflate: 0.25,
            code_c: 256,
            code_r: 128,
            gen_base: 24,
            gen_downs: 3,
            gen_blocks: 2,
            pre_base: 16,
            disc_base: 16,
            refiner_base: 12,
            gaze_max: 16.0,
        }
    }

    /// Miniature preset for finite-difference gradient checks: 8x8 low-res
    /// images, 4 base channels, short codes.
    pub fn mini() -> Self {
        Profile {
            name: "mini".into(),
            high: 16,
            low: 8,
            crop_low: (3, 5),
            crop_high: (6, 10),
            inflate: 0.25,
            code_c: 16,
            code_r: 8,
            gen_base: 4,
            gen_downs: 2,
            gen_blocks: 1,
            pre_base: 4,
            disc_base: 4,
            refiner_base: 4,
            gaze_max: 1.0,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "hq" => Ok(Self::hq()),
            "mini" => Ok(Self::mini()),
            other => Err(Error::Config(format!("unknown profile `{other}`"))),
        }
    }

    /// Size of the inflated crop seen by the crop discriminator.
    pub fn crop_inflated(&self) -> (usize, usize) {
        let (h, w) = self.crop_high;
        let dh = (h as f64 * self.inflate).round() as usize;
        let dw = (w as f64 * self.inflate).round() as usize;
        (h + 2 * dh, w + 2 * dw)
    }

    pub fn validate(&self) -> Result<()> {
        if self.low * 2 != self.high {
            return Err(Error::Config(format!(
                "low resolution {} must be half of high {}",
                self.low, self.high
            )));
        }
        let min_side = self.low >> self.gen_downs;
        if min_side < 1 {
            return Err(Error::Config(format!(
                "{} stride-2 stages collapse a {} px image",
                self.gen_downs, self.low
            )));
        }
        for v in [
            self.gen_base,
            self.pre_base,
            self.disc_base,
            self.refiner_base,
            self.code_c,
            self.code_r,
        ] {
            if v == 0 {
                return Err(Error::Config("channel counts must be positive".into()));
            }
        }
        let inflated = self.crop_inflated();
        if inflated.0 > self.high || inflated.1 > self.high {
            return Err(Error::Config(format!(
                "inflated crop {inflated:?} exceeds the {} px image",
                self.high
            )));
        }
        Ok(())
    }
}

/// Which of the four ablatable components are active. All on by default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    /// A: condition the generators on the pretrained content code.
    pub use_pam_content: bool,
    /// B: train the animation generator on synthesized corrected pairs.
    pub use_synthesis_as_training: bool,
    /// C: latent reconstruction loss on the content codes.
    pub use_latent_recon: bool,
    /// D: coarse-to-fine reconstruction (Laplacian reinjection + local refiner).
    pub use_cfm: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            use_pam_content: true,
            use_synthesis_as_training: true,
            use_latent_recon: true,
            use_cfm: true,
        }
    }
}

/// One ablation axis, named as in the comparison tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AblationAxis {
    A,
    B,
    C,
    D,
}

impl AblationAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "A" | "a" => Ok(Self::A),
            "B" | "b" => Ok(Self::B),
            "C" | "c" => Ok(Self::C),
            "D" | "d" => Ok(Self::D),
            other => Err(Error::Config(format!("unknown ablation axis `{other}`"))),
        }
    }
}

impl std::fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let c = match self {
            Self::A => "A",
            Self::B => "B",
            Self::C => "C",
            Self::D => "D",
        };
        write!(f, "{c}")
    }
}

impl AblationFlags {
    pub fn without(mut self, axis: AblationAxis) -> Self {
        match axis {
            AblationAxis::A => self.use_pam_content = false,
            AblationAxis::B => self.use_synthesis_as_training = false,
            AblationAxis::C => self.use_latent_recon = false,
            AblationAxis::D => self.use_cfm = false,
        }
        self
    }

    pub fn disabled_axes(&self) -> Vec<AblationAxis> {
        let mut out = Vec::new();
        if !self.use_pam_content {
            out.push(AblationAxis::A);
        }
        if !self.use_synthesis_as_training {
            out.push(AblationAxis::B);
        }
        if !self.use_latent_recon {
            out.push(AblationAxis::C);
        }
        if !self.use_cfm {
            out.push(AblationAxis::D);
        }
        out
    }
}

/// Weights of the composed objectives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub l4: f64,
    pub l5: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            l1: 1.0,
            l2: 1.0,
            l3: 1.0,
            l4: 1.0,
            l5: 0.1,
        }
    }
}

/// Full training configuration: optimizer constants, schedule shape, loss
/// weights and ablation flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub profile: Profile,
    pub seed: u64,
    /// Total joint batch; split evenly between the two domains.
    pub batch: usize,
    pub beta1: f64,
    pub beta2: f64,
    /// Learning rate of the pretrained autoencoder stage.
    pub lr_pam: f64,
    /// Learning rate of the local refiner.
    pub lr_refiner: f64,
    /// Learning rate of the discriminators, the two inpainting generators and
    /// the angle encoder.
    pub lr_main: f64,
    /// Joint-training steps.
    pub max_steps: u64,
    /// Steps at the base rate before the linear decay to zero.
    pub warm_steps: u64,
    /// Pretraining steps for the eye autoencoder.
    pub pam_steps: u64,
    pub weights: LossWeights,
    pub flags: AblationFlags,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            profile: Profile::desk(),
            seed: 0,
            batch: 16,
            beta1: 0.5,
            beta2: 0.999,
            lr_pam: 5e-4,
            lr_refiner: 4e-4,
            lr_main: 1e-4,
            max_steps: 4000,
            warm_steps: 2000,
            pam_steps: 1500,
            weights: LossWeights::default(),
            flags: AblationFlags::default(),
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.profile.validate()?;
        if self.batch < 1 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.warm_steps > self.max_steps {
            return Err(Error::Config(format!(
                "warm steps {} exceed max steps {}",
                self.warm_steps, self.max_steps
            )));
        }
        for (name, lr) in [
            ("lr_pam", self.lr_pam),
            ("lr_refiner", self.lr_refiner),
            ("lr_main", self.lr_main),
        ] {
            if lr <= 0.0 || !lr.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {lr}")));
            }
        }
        for (name, w) in [
            ("lambda1", self.weights.l1),
            ("lambda2", self.weights.l2),
            ("lambda3", self.weights.l3),
            ("lambda4", self.weights.l4),
            ("lambda5", self.weights.l5),
        ] {
            if w < 0.0 || !w.is_finite() {
                return Err(Error::Config(format!(
                    "{name} must be nonnegative, got {w}"
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for p in [Profile::desk(), Profile::hq(), Profile::mini()] {
            p.validate().unwrap();
        }
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn desk_geometry_matches_profile_contract() {
        let p = Profile::desk();
        assert_eq!(p.crop_high, (p.crop_low.0 * 2, p.crop_low.1 * 2));
        assert_eq!(p.crop_inflated(), (48, 72));
    }

    #[test]
    fn hq_mask_is_not_double() {
        let p = Profile::hq();
        assert_eq!(p.crop_low, (30, 50));
        assert_eq!(p.crop_high, (46, 80));
    }

    #[test]
    fn flags_without_axis() {
        let f = AblationFlags::default().without(AblationAxis::C);
        assert!(!f.use_latent_recon);
        assert!(f.use_pam_content && f.use_synthesis_as_training && f.use_cfm);
        assert_eq!(f.disabled_axes(), vec![AblationAxis::C]);
    }

    #[test]
    fn bad_configs_rejected() {
        let mut c = TrainConfig::default();
        c.warm_steps = c.max_steps + 1;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.lr_main = 0.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.weights.l3 = -0.5;
        assert!(c.validate().is_err());
    }
}
