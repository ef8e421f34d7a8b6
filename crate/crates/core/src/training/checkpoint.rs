//! Versioned binary checkpoint container: a JSON header (config echo,
//! ablation flags, stage, step, optimizer step counters, data-RNG position)
//! followed by named `f64` tensors and a SHA-256 trailer over everything
//! before it. Loading verifies the digest and validates the architecture
//! against the caller's configuration, refusing with a field-by-field diff.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::networks::{build_model_set, ModelSet, MODEL_NAMES};
use crate::profiles::TrainConfig;
use crate::training::adam::{Adam, AdamSlot};

const MAGIC: &[u8; 4] = b"GZKC";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Pam,
    Joint,
}

/// Everything a training run needs to stop and continue exactly.
pub struct TrainState {
    pub config: TrainConfig,
    pub stage: Stage,
    pub step: u64,
    pub models: ModelSet,
    pub adam: Adam,
    /// Word position of the data-sampling RNG, for bit-exact resumption.
    pub rng_word_pos: u128,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: TrainConfig,
    stage: Stage,
    step: u64,
    adam_t: BTreeMap<String, u64>,
    rng_word_pos: String,
    tensors: Vec<TensorInfo>,
}

#[derive(Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
}

fn collect_tensors(state: &TrainState) -> Vec<(String, ArrayD<f64>)> {
    let mut out: Vec<(String, ArrayD<f64>)> = Vec::new();
    for name in MODEL_NAMES {
        state.models.model(name).visit_params(name, &mut |n, p| {
            out.push((format!("param:{n}"), p.data.clone()));
        });
        state.models.model(name).visit_buffers(name, &mut |n, b| {
            out.push((format!("buffer:{n}"), b.clone()));
        });
    }
    for (name, slot) in &state.adam.state {
        out.push((format!("adam_m:{name}"), slot.m.clone()));
        out.push((format!("adam_v:{name}"), slot.v.clone()));
    }
    out
}

pub fn save_checkpoint(path: &Path, state: &TrainState) -> Result<()> {
    let tensors = collect_tensors(state);
    let header = Header {
        version: VERSION,
        config: state.config.clone(),
        stage: state.stage,
        step: state.step,
        adam_t: state
            .adam
            .state
            .iter()
            .map(|(k, v)| (k.clone(), v.t))
            .collect(),
        rng_word_pos: state.rng_word_pos.to_string(),
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorInfo {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)?;

    let mut body: Vec<u8> = Vec::new();
    body.extend_from_slice(MAGIC);
    body.extend_from_slice(&VERSION.to_le_bytes());
    body.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    body.extend_from_slice(&header_bytes);
    for (_, t) in &tensors {
        for v in t.iter() {
            body.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&body);
    let mut file = std::fs::File::create(path)?;
    file.write_all(&body)?;
    file.write_all(&digest)?;
    Ok(())
}

fn config_diff(expect: &TrainConfig, got: &TrainConfig) -> Option<String> {
    let mut lines = Vec::new();
    if expect.profile != got.profile {
        let (e, g) = (
            serde_json::to_value(&expect.profile).unwrap(),
            serde_json::to_value(&got.profile).unwrap(),
        );
        if let (serde_json::Value::Object(e), serde_json::Value::Object(g)) = (e, g) {
            for (k, ev) in &e {
                let gv = &g[k];
                if ev != gv {
                    lines.push(format!("  profile.{k}: expected {ev}, checkpoint has {gv}"));
                }
            }
        }
    }
    if expect.flags != got.flags {
        lines.push(format!(
            "  flags: expected {:?}, checkpoint has {:?}",
            expect.flags, got.flags
        ));
    }
    (!lines.is_empty()).then(|| lines.join("\n"))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 32 + 16 {
        return Err(Error::Integrity("checkpoint file truncated".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    let computed = Sha256::digest(body);
    if computed.as_slice() != digest {
        return Err(Error::Integrity("checkpoint digest mismatch".into()));
    }
    if &body[0..4] != MAGIC {
        return Err(Error::Integrity("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(body[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Integrity(format!(
            "checkpoint version {version} unsupported"
        )));
    }
    let hlen = u64::from_le_bytes(body[8..16].try_into().unwrap()) as usize;
    let header: Header = serde_json::from_slice(&body[16..16 + hlen])?;
    let mut offset = 16 + hlen;

    let mut tensors: BTreeMap<String, ArrayD<f64>> = BTreeMap::new();
    for info in &header.tensors {
        let n: usize = info.shape.iter().product();
        let end = offset + 8 * n;
        if end > body.len() {
            return Err(Error::Integrity("checkpoint tensor data truncated".into()));
        }
        let mut data = Vec::with_capacity(n);
        for chunk in body[offset..end].chunks_exact(8) {
            data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        offset = end;
        tensors.insert(
            info.name.clone(),
            ArrayD::from_shape_vec(IxDyn(&info.shape), data)
                .map_err(|e| Error::Integrity(format!("bad tensor shape: {e}")))?,
        );
    }

    // rebuild the model set and overwrite every tensor from the file
    let mut models = build_model_set(&header.config.profile, header.config.flags, 0)?;
    let mut missing = Vec::new();
    for name in MODEL_NAMES {
        models.model_mut(name).visit_params_mut(name, &mut |n, p| {
            match tensors.get(&format!("param:{n}")) {
                Some(t) if t.shape() == p.data.shape() => p.data = t.clone(),
                _ => missing.push(n.to_string()),
            }
        });
        models.model_mut(name).visit_buffers_mut(name, &mut |n, b| {
            match tensors.get(&format!("buffer:{n}")) {
                Some(t) if t.shape() == b.shape() => *b = t.clone(),
                _ => missing.push(n.to_string()),
            }
        });
    }
    if !missing.is_empty() {
        return Err(Error::Integrity(format!(
            "checkpoint lacks tensors: {}",
            missing.join(", ")
        )));
    }

    let mut adam = Adam::new(header.config.beta1, header.config.beta2);
    for (name, t) in &header.adam_t {
        let m = tensors
            .get(&format!("adam_m:{name}"))
            .ok_or_else(|| Error::Integrity(format!("missing optimizer moment for {name}")))?;
        let v = tensors
            .get(&format!("adam_v:{name}"))
            .ok_or_else(|| Error::Integrity(format!("missing optimizer moment for {name}")))?;
        adam.state.insert(
            name.clone(),
            AdamSlot {
                m: m.clone(),
                v: v.clone(),
                t: *t,
            },
        );
    }

    let rng_word_pos: u128 = header
        .rng_word_pos
        .parse()
        .map_err(|_| Error::Integrity("bad rng position".into()))?;
    Ok(TrainState {
        config: header.config,
        stage: header.stage,
        step: header.step,
        models,
        adam,
        rng_word_pos,
    })
}

/// Load and refuse unless the checkpoint's architecture and ablation flags
/// match `expect`.
pub fn load_checkpoint_compatible(path: &Path, expect: &TrainConfig) -> Result<TrainState> {
    let state = load_checkpoint(path)?;
    if let Some(diff) = config_diff(expect, &state.config) {
        return Err(Error::ConfigMismatch(diff));
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::Module;
    use crate::profiles::Profile;

    fn mini_state() -> TrainState {
        let config = TrainConfig {
            profile: Profile::mini(),
            ..TrainConfig::default()
        };
        let models = build_model_set(&config.profile, config.flags, 11).unwrap();
        let mut adam = Adam::new(config.beta1, config.beta2);
        // touch one parameter so optimizer state is nonempty
        let mut grad = None;
        models.g_h.visit_params("g_h", &mut |n, p| {
            if grad.is_none() {
                grad = Some((n.to_string(), ArrayD::from_elem(p.data.raw_dim(), 0.5)));
            }
        });
        let (name, g) = grad.unwrap();
        let mut models = models;
        models.g_h.visit_params_mut("g_h", &mut |n, p| {
            if n == name {
                adam.update(n, p, g.view(), 1e-3);
            }
        });
        TrainState {
            config,
            stage: Stage::Joint,
            step: 37,
            models,
            adam,
            rng_word_pos: 123456789,
        }
    }

    fn params_equal(a: &ModelSet, b: &ModelSet) -> bool {
        let mut snap = Vec::new();
        for name in MODEL_NAMES {
            a.model(name).visit_params(name, &mut |n, p| {
                snap.push((n.to_string(), p.data.clone()));
            });
        }
        let mut i = 0;
        let mut same = true;
        for name in MODEL_NAMES {
            b.model(name).visit_params(name, &mut |n, p| {
                if snap[i].0 != n || snap[i].1 != p.data {
                    same = false;
                }
                i += 1;
            });
        }
        same && i == snap.len()
    }

    #[test]
    fn roundtrip_is_bitwise_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.gzkc");
        let state = mini_state();
        save_checkpoint(&path, &state).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert!(params_equal(&state.models, &loaded.models));
        assert_eq!(loaded.step, 37);
        assert_eq!(loaded.stage, Stage::Joint);
        assert_eq!(loaded.rng_word_pos, 123456789);
        assert_eq!(loaded.adam, state.adam);
    }

    #[test]
    fn wrong_architecture_is_refused_with_diff() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.gzkc");
        save_checkpoint(&path, &mini_state()).unwrap();
        let desk = TrainConfig::default();
        let err = match load_checkpoint_compatible(&path, &desk) {
            Err(e) => e,
            Ok(_) => panic!("architecture mismatch must be refused"),
        };
        let msg = format!("{err}");
        assert!(msg.contains("profile"), "diff missing from: {msg}");
    }

    #[test]
    fn corruption_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.gzkc");
        save_checkpoint(&path, &mini_state()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::Integrity(_))
        ));
    }
}
