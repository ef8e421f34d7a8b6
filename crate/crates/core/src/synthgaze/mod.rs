//! Procedural portrait dataset with ground-truth gaze labels.
//!
//! Stands in for a collected celebrity corpus at desk scale: the directory
//! layout is `<root>/images/*.png` plus a schema-versioned `manifest.json`
//! that is the single source of truth for mask geometry and gaze offsets.

pub mod oracle;
pub mod render;

use std::fs;
use std::path::{Path, PathBuf};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::{mask_from_center, ImageTensor, MaskPair, Resolution};
use crate::profiles::Profile;

pub use oracle::{estimate_gaze, GazeEstimate};
pub use render::{render_face, sample_params, FaceParams};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// Which gaze domain a record belongs to: `X` stares at the camera
/// (`|g| <= 1` px), `Y` stares elsewhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Domain {
    X,
    Y,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

/// One dataset record. Mask geometry is stored at high resolution; the
/// low-resolution masks are derived by halving the centers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceRecord {
    pub image_path: String,
    pub resolution: usize,
    pub domain: Domain,
    pub split: Split,
    pub masks: MaskPair,
    pub gaze_left: (f64, f64),
    pub gaze_right: (f64, f64),
    pub seed: u64,
}

impl FaceRecord {
    /// Low-resolution mask pair derived from the high-resolution geometry.
    pub fn masks_low(&self, profile: &Profile) -> Result<MaskPair> {
        let bounds = (profile.low, profile.low);
        let half = |r: crate::imagecore::Rect| {
            let c = r.center();
            mask_from_center((c.0 / 2, c.1 / 2), profile.crop_low, bounds)
        };
        MaskPair::new(half(self.masks.left)?, half(self.masks.right)?, bounds)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainCounts {
    pub x_train: usize,
    pub x_test: usize,
    pub y_train: usize,
    pub y_test: usize,
}

/// The dataset manifest: profile echo, seed, per-domain counts and records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainManifest {
    pub schema_version: u32,
    pub profile: Profile,
    pub seed: u64,
    pub counts: DomainCounts,
    pub records: Vec<FaceRecord>,
}

impl DomainManifest {
    pub fn select(&self, domain: Domain, split: Option<Split>) -> Vec<&FaceRecord> {
        self.records
            .iter()
            .filter(|r| r.domain == domain && split.map_or(true, |s| r.split == s))
            .collect()
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(root.join(MANIFEST_FILE), text)?;
        Ok(())
    }

    /// Load a manifest and check that every referenced image exists.
    pub fn load(root: &Path) -> Result<(Self, PathBuf)> {
        let text = fs::read_to_string(root.join(MANIFEST_FILE))?;
        let manifest: DomainManifest = serde_json::from_str(&text)?;
        if manifest.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "manifest schema {} unsupported (expected {MANIFEST_SCHEMA_VERSION})",
                manifest.schema_version
            )));
        }
        for r in &manifest.records {
            let p = root.join(&r.image_path);
            if !p.is_file() {
                return Err(Error::Config(format!(
                    "manifest references missing file {}",
                    p.display()
                )));
            }
        }
        Ok((manifest, root.to_path_buf()))
    }

    /// Decode one record's image and check the declared resolution.
    pub fn load_image(&self, root: &Path, record: &FaceRecord) -> Result<ImageTensor> {
        let img = ImageTensor::read_png(&root.join(&record.image_path), Resolution::High)?;
        if img.bounds() != (record.resolution, record.resolution) {
            return Err(Error::Geometry(format!(
                "{} decodes to {:?}, manifest declares {}",
                record.image_path,
                img.bounds(),
                record.resolution
            )));
        }
        Ok(img)
    }
}

fn sample_gaze_x(rng: &mut ChaCha8Rng) -> (f64, f64) {
    if rng.random_bool(0.5) {
        (0.0, 0.0)
    } else {
        // uniform in the disc of radius 0.8
        loop {
            let g = (rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8));
            if g.0 * g.0 + g.1 * g.1 <= 0.64 {
                return g;
            }
        }
    }
}

fn sample_gaze_y(profile: &Profile, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let gm = profile.gaze_max;
    let vmax = (gm / 2.0).min(4.0 * profile.high as f64 / 128.0);
    loop {
        let dx = rng.random_range(2.5..gm) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let dy = rng.random_range(-vmax..vmax);
        // keep a clear margin from the X domain and from the socket edge
        if dx * dx + dy * dy >= 9.0 {
            return (dx, dy);
        }
    }
}

/// Render and write `count_x + count_y` portraits plus the manifest.
/// Deterministic per seed, byte-for-byte. Roughly 10% of each domain (at
/// least 8 where the domain is large enough, never more than half) is
/// reserved as the held-out test split.
pub fn generate_dataset(
    root: &Path,
    count_x: usize,
    count_y: usize,
    seed: u64,
    profile: &Profile,
) -> Result<DomainManifest> {
    if count_x < 1 || count_y < 1 {
        return Err(Error::Config("both domains need at least one sample".into()));
    }
    profile.validate()?;
    let images_dir = root.join("images");
    fs::create_dir_all(&images_dir)?;

    let test_count = |n: usize| (n / 10).max(8).min(n / 2);
    let mut records = Vec::with_capacity(count_x + count_y);
    for (domain, count, stream) in [(Domain::X, count_x, 0u64), (Domain::Y, count_y, 1u64)] {
        let n_test = test_count(count);
        for i in 0..count {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream((stream << 32) | i as u64);
            let gaze = match domain {
                Domain::X => sample_gaze_x(&mut rng),
                Domain::Y => sample_gaze_y(profile, &mut rng),
            };
            let params = sample_params(profile, gaze, &mut rng);
            let (img, masks, g) = render_face(&params, profile)?;
            let name = match domain {
                Domain::X => format!("images/x_{i:05}.png"),
                Domain::Y => format!("images/y_{i:05}.png"),
            };
            img.write_png(&root.join(&name))?;
            records.push(FaceRecord {
                image_path: name,
                resolution: profile.high,
                domain,
                split: if i >= count - n_test {
                    Split::Test
                } else {
                    Split::Train
                },
                masks,
                gaze_left: g,
                gaze_right: g,
                seed: params.seed,
            });
        }
    }

    let count_of = |d: Domain, s: Split| {
        records
            .iter()
            .filter(|r| r.domain == d && r.split == s)
            .count()
    };
    let manifest = DomainManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        profile: profile.clone(),
        seed,
        counts: DomainCounts {
            x_train: count_of(Domain::X, Split::Train),
            x_test: count_of(Domain::X, Split::Test),
            y_train: count_of(Domain::Y, Split::Train),
            y_test: count_of(Domain::Y, Split::Test),
        },
        records,
    };
    manifest.save(root)?;
    Ok(manifest)
}
