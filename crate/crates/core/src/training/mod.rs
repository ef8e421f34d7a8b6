//! Two-stage optimization: mirror-pair pretraining of the eye autoencoder,
//! then joint adversarial training of the correction generator, the
//! animation generator (with the synthesis-as-training inner step), the
//! local refiner and the three discriminators.
//!
//! Determinism: all batch sampling comes from one counted RNG whose word
//! position is checkpointed, every forward is single-threaded, and parameter
//! updates follow a fixed model order, so a resumed run reproduces the
//! original trajectory bit for bit.

pub mod adam;
pub mod checkpoint;
pub mod schedule;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{s, Array2, Array3, Array4, Axis};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::{crop_regions, ImageTensor, MaskPair, Rect};
use crate::losses;
use crate::networks::{
    build_model_set, masked_input, mirror_crops, Binder, ModelSet,
};
use crate::profiles::TrainConfig;
use crate::pyramid::{apply_mask_additive, laplacian_residual};
use crate::synthgaze::{Domain, DomainManifest, Split};
use crate::tensor::{resize, Tape, VarId};

pub use adam::Adam;
pub use checkpoint::{load_checkpoint, load_checkpoint_compatible, save_checkpoint, Stage, TrainState};
pub use schedule::lr_schedule;

const PAM_RNG_SALT: u64 = 0x70616d;
const JOINT_RNG_SALT: u64 = 0x6a6f696e74;

/// Which manifest records feed a training run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitSel {
    Train,
    Test,
    All,
}

impl SplitSel {
    fn admits(&self, s: Split) -> bool {
        match self {
            SplitSel::Train => s == Split::Train,
            SplitSel::Test => s == Split::Test,
            SplitSel::All => true,
        }
    }
}

fn chw(img: &ImageTensor) -> Array3<f64> {
    let (h, w) = img.bounds();
    let mut out = Array3::zeros((3, h, w));
    for r in 0..h {
        for c in 0..w {
            for ch in 0..3 {
                out[[ch, r, c]] = img.data[[r, c, ch]];
            }
        }
    }
    out
}

/// One preprocessed sample: everything the joint step consumes, precomputed.
pub struct TrainSample {
    pub low4: Array3<f64>,
    pub low3: Array3<f64>,
    pub high3: Array3<f64>,
    pub res_masked: Array3<f64>,
    pub crop_low_l: Array3<f64>,
    pub crop_low_r: Array3<f64>,
    pub crop_high_l: Array3<f64>,
    pub crop_high_r: Array3<f64>,
    pub infl_l: Array3<f64>,
    pub infl_r: Array3<f64>,
    pub masks_low: MaskPair,
    pub masks_high: MaskPair,
    pub rect_infl_l: Rect,
    pub rect_infl_r: Rect,
    pub gaze: (f64, f64),
}

impl TrainSample {
    fn build(img: &ImageTensor, masks_high: &MaskPair, profile: &crate::profiles::Profile, gaze: (f64, f64)) -> Result<Self> {
        let decomp = laplacian_residual(img)?;
        let res_masked = apply_mask_additive(&decomp.residual, masks_high)?;
        let low = decomp.low;
        let half = |r: Rect| {
            let c = r.center();
            crate::imagecore::mask_from_center((c.0 / 2, c.1 / 2), profile.crop_low, (profile.low, profile.low))
        };
        let masks_low = MaskPair::new(half(masks_high.left)?, half(masks_high.right)?, (profile.low, profile.low))?;
        let low4_b = masked_input(&low, &masks_low)?;
        let low4 = low4_b.index_axis(Axis(0), 0).to_owned();
        let crops_low = crop_regions(&low, &masks_low)?;
        let crops_high = crop_regions(img, masks_high)?;
        let bounds = img.bounds();
        let rect_infl_l = masks_high.left.inflate(profile.inflate, bounds)?;
        let rect_infl_r = masks_high.right.inflate(profile.inflate, bounds)?;
        let infl = |r: Rect| {
            Array3::from_shape_fn((3, r.height, r.width), |(ch, i, j)| {
                img.data[[r.top + i, r.left + j, ch]]
            })
        };
        Ok(TrainSample {
            low4,
            low3: chw(&low),
            high3: chw(img),
            res_masked: chw(&res_masked),
            crop_low_l: chw(&crops_low.left),
            crop_low_r: chw(&crops_low.right),
            crop_high_l: chw(&crops_high.left),
            crop_high_r: chw(&crops_high.right),
            infl_l: infl(rect_infl_l),
            infl_r: infl(rect_infl_r),
            masks_low,
            masks_high: *masks_high,
            rect_infl_l,
            rect_infl_r,
            gaze,
        })
    }
}

/// In-memory training set, split by domain.
pub struct TrainData {
    pub profile: crate::profiles::Profile,
    pub x: Vec<TrainSample>,
    pub y: Vec<TrainSample>,
}

impl TrainData {
    pub fn load(manifest: &DomainManifest, root: &Path, split: SplitSel) -> Result<Self> {
        let profile = manifest.profile.clone();
        let mut x = Vec::new();
        let mut y = Vec::new();
        for record in &manifest.records {
            if !split.admits(record.split) {
                continue;
            }
            let img = manifest.load_image(root, record)?;
            let sample = TrainSample::build(&img, &record.masks, &profile, record.gaze_left)?;
            match record.domain {
                Domain::X => x.push(sample),
                Domain::Y => y.push(sample),
            }
        }
        if x.is_empty() && y.is_empty() {
            return Err(Error::Config("no samples in the selected split".into()));
        }
        Ok(TrainData { profile, x, y })
    }
}

fn stack3(items: &[&Array3<f64>]) -> Array4<f64> {
    let d = items[0].dim();
    let mut out = Array4::zeros((items.len(), d.0, d.1, d.2));
    for (i, a) in items.iter().enumerate() {
        out.index_axis_mut(Axis(0), i).assign(a);
    }
    out
}

/// Left-then-right channel concat of eye crops: `(B, 6, ch, cw)`.
fn crop6(batch: &Array4<f64>, rects_l: &[Rect], rects_r: &[Rect]) -> Array4<f64> {
    let (b, _, _, _) = batch.dim();
    let (rh, rw) = (rects_l[0].height, rects_l[0].width);
    let mut out = Array4::zeros((b, 6, rh, rw));
    for i in 0..b {
        let (rl, rr) = (rects_l[i], rects_r[i]);
        out.slice_mut(s![i, 0..3, .., ..]).assign(&batch.slice(s![
            i,
            ..,
            rl.top..rl.bottom(),
            rl.left..rl.right()
        ]));
        out.slice_mut(s![i, 3..6, .., ..]).assign(&batch.slice(s![
            i,
            ..,
            rr.top..rr.bottom(),
            rr.left..rr.right()
        ]));
    }
    out
}

fn crop_batch(batch: &Array4<f64>, rects: &[Rect]) -> Array4<f64> {
    let (b, c, _, _) = batch.dim();
    let (rh, rw) = (rects[0].height, rects[0].width);
    let mut out = Array4::zeros((b, c, rh, rw));
    for (i, r) in rects.iter().enumerate() {
        out.index_axis_mut(Axis(0), i)
            .assign(&batch.slice(s![i, .., r.top..r.bottom(), r.left..r.right()]));
    }
    out
}

fn paste_batch(base: &mut Array4<f64>, patch: &Array4<f64>, rects: &[Rect]) {
    for (i, r) in rects.iter().enumerate() {
        base.slice_mut(s![i, .., r.top..r.bottom(), r.left..r.right()])
            .assign(&patch.index_axis(Axis(0), i));
    }
}

/// Batched view of selected samples with the per-sample rectangle lists the
/// tape ops need.
struct BatchView {
    low4: Array4<f64>,
    low3: Array4<f64>,
    high3: Array4<f64>,
    res_masked: Array4<f64>,
    crops_low_stacked: Array4<f64>,
    crops_high_stacked: Array4<f64>,
    crops6_low: Array4<f64>,
    infl_stacked: Array4<f64>,
    rl_low: Vec<Rect>,
    rr_low: Vec<Rect>,
    rl_high: Vec<Rect>,
    rr_high: Vec<Rect>,
    rl_infl: Vec<Rect>,
    rr_infl: Vec<Rect>,
}

impl BatchView {
    fn build(samples: &[TrainSample], idx: &[usize]) -> Self {
        let pick = |f: &dyn Fn(&TrainSample) -> &Array3<f64>| {
            stack3(&idx.iter().map(|&i| f(&samples[i])).collect::<Vec<_>>())
        };
        let low4 = pick(&|s| &s.low4);
        let low3 = pick(&|s| &s.low3);
        let high3 = pick(&|s| &s.high3);
        let res_masked = pick(&|s| &s.res_masked);
        let crops_low_l = pick(&|s| &s.crop_low_l);
        let crops_low_r = pick(&|s| &s.crop_low_r);
        let crops_high_l = pick(&|s| &s.crop_high_l);
        let crops_high_r = pick(&|s| &s.crop_high_r);
        let infl_l = pick(&|s| &s.infl_l);
        let infl_r = pick(&|s| &s.infl_r);
        let crops_low_stacked = ndarray::concatenate(Axis(0), &[crops_low_l.view(), crops_low_r.view()]).unwrap();
        let crops_high_stacked = ndarray::concatenate(Axis(0), &[crops_high_l.view(), crops_high_r.view()]).unwrap();
        let crops6_low = ndarray::concatenate(Axis(1), &[crops_low_l.view(), crops_low_r.view()])
            .unwrap()
            .as_standard_layout()
            .to_owned();
        let infl_stacked = ndarray::concatenate(Axis(0), &[infl_l.view(), infl_r.view()]).unwrap();
        BatchView {
            low4,
            low3,
            high3,
            res_masked,
            crops_low_stacked,
            crops_high_stacked,
            crops6_low,
            infl_stacked,
            rl_low: idx.iter().map(|&i| samples[i].masks_low.left).collect(),
            rr_low: idx.iter().map(|&i| samples[i].masks_low.right).collect(),
            rl_high: idx.iter().map(|&i| samples[i].masks_high.left).collect(),
            rr_high: idx.iter().map(|&i| samples[i].masks_high.right).collect(),
            rl_infl: idx.iter().map(|&i| samples[i].rect_infl_l).collect(),
            rr_infl: idx.iter().map(|&i| samples[i].rect_infl_r).collect(),
        }
    }
}

/// Scalars logged per joint step, one JSON line each.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub lx_re: f64,
    pub ly_re: f64,
    pub lyx_re: f64,
    pub l_fp: f64,
    pub adv_x_d: f64,
    pub adv_y_d: f64,
    pub adv_h_d: f64,
    pub adv_x_g: f64,
    pub adv_x_g_syn: f64,
    pub adv_y_g: f64,
    pub adv_h_g: f64,
    pub total_gx: f64,
    pub total_gy: f64,
    pub lr_main: f64,
    pub lr_refiner: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PamRecord {
    pub step: u64,
    pub l_pre: f64,
    pub lr: f64,
}

pub struct PamSummary {
    pub records: Vec<PamRecord>,
    pub first: f64,
    /// Mean loss over the last 50 steps (or all of them, if fewer).
    pub final_running: f64,
}

pub struct JointSummary {
    pub records: Vec<StepRecord>,
}

/// Where to write logs, periodic checkpoints and divergence dumps.
#[derive(Default, Clone)]
pub struct TrainIo {
    pub log_path: Option<PathBuf>,
    pub ckpt_dir: Option<PathBuf>,
}

struct LogSink {
    file: Option<std::fs::File>,
}

impl LogSink {
    fn open(path: &Option<PathBuf>) -> Result<Self> {
        let file = match path {
            Some(p) => {
                if let Some(dir) = p.parent() {
                    std::fs::create_dir_all(dir)?;
                }
                Some(std::fs::File::create(p)?)
            }
            None => None,
        };
        Ok(LogSink { file })
    }

    fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        if let Some(f) = &mut self.file {
            let line = serde_json::to_string(record)?;
            writeln!(f, "{line}")?;
        }
        Ok(())
    }
}

/// Owns the mutable training state for both stages.
pub struct Trainer<'d> {
    pub cfg: TrainConfig,
    pub data: &'d TrainData,
    pub models: ModelSet,
    pub adam: Adam,
    pub rng: ChaCha8Rng,
    pub step: u64,
    stage: Stage,
}

impl<'d> Trainer<'d> {
    pub fn fresh(cfg: TrainConfig, data: &'d TrainData, stage: Stage) -> Result<Self> {
        cfg.validate()?;
        let models = build_model_set(&cfg.profile, cfg.flags, cfg.seed)?;
        let salt = match stage {
            Stage::Pam => PAM_RNG_SALT,
            Stage::Joint => JOINT_RNG_SALT,
        };
        let adam = Adam::new(cfg.beta1, cfg.beta2);
        Ok(Trainer {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ salt),
            cfg,
            data,
            models,
            adam,
            step: 0,
            stage,
        })
    }

    /// Continue joint training from a pretraining checkpoint: weights carry
    /// over, the optimizer and step counter start fresh.
    pub fn from_pam(cfg: TrainConfig, data: &'d TrainData, state: TrainState) -> Result<Self> {
        cfg.validate()?;
        Ok(Trainer {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ JOINT_RNG_SALT),
            adam: Adam::new(cfg.beta1, cfg.beta2),
            cfg,
            data,
            models: state.models,
            step: 0,
            stage: Stage::Joint,
        })
    }

    /// Resume a joint run exactly where a checkpoint left it.
    pub fn resume(data: &'d TrainData, state: TrainState) -> Result<Self> {
        let cfg = state.config.clone();
        cfg.validate()?;
        let salt = match state.stage {
            Stage::Pam => PAM_RNG_SALT,
            Stage::Joint => JOINT_RNG_SALT,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ salt);
        rng.set_word_pos(state.rng_word_pos);
        Ok(Trainer {
            rng,
            cfg,
            data,
            models: state.models,
            adam: state.adam,
            step: state.step,
            stage: state.stage,
        })
    }

    pub fn state(&self) -> TrainState {
        TrainState {
            config: self.cfg.clone(),
            stage: self.stage,
            step: self.step,
            models: self.models.clone(),
            adam: self.adam.clone(),
            rng_word_pos: self.rng.get_word_pos(),
        }
    }

    fn all_samples(&self) -> Vec<&TrainSample> {
        self.data.x.iter().chain(self.data.y.iter()).collect()
    }

    fn apply_updates(&mut self, tape: &Tape, binder: &Binder, groups: &[(&str, f64)]) {
        for &(model, lr) in groups {
            let adam = &mut self.adam;
            self.models.model_mut(model).visit_params_mut(model, &mut |name, p| {
                if let Some(id) = binder.get(name) {
                    if let Some(g) = tape.grad(id) {
                        adam.update(name, p, g, lr);
                    }
                }
            });
        }
    }

    // ---- stage 1: mirror-pair pretraining --------------------------------

    /// One pretraining step over a batch of eye-crop pairs; returns the loss.
    fn pam_step(&mut self) -> Result<f64> {
        let n = self.data.x.len() + self.data.y.len();
        if n == 0 {
            return Err(Error::Config("pretraining needs at least one sample".into()));
        }
        let bs = self.cfg.batch.min(n).max(1);
        let idx: Vec<usize> = (0..bs).map(|_| self.rng.random_range(0..n)).collect();
        let samples = self.all_samples();
        let yl = stack3(&idx.iter().map(|&i| &samples[i].crop_low_l).collect::<Vec<_>>());
        let yr = stack3(&idx.iter().map(|&i| &samples[i].crop_low_r).collect::<Vec<_>>());
        let f_yl = mirror_crops(&yl);
        let f_yr = mirror_crops(&yr);

        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let yl_id = tape.leaf4(yl.clone());
        let yr_id = tape.leaf4(yr.clone());
        let inputs = ndarray::concatenate(
            Axis(0),
            &[yl.view(), f_yr.view(), yr.view(), f_yl.view()],
        )
        .unwrap();
        let in_id = tape.leaf4(inputs);
        let out = self.models.g_pre.forward(&mut tape, &mut binder, "g_pre", in_id);
        let g_yl = tape.slice_batch(out, 0, bs);
        let g_fyr = tape.slice_batch(out, bs, bs);
        let g_yr = tape.slice_batch(out, 2 * bs, bs);
        let g_fyl = tape.slice_batch(out, 3 * bs, bs);
        let loss = losses::pre_loss_t(&mut tape, yl_id, yr_id, g_yl, g_fyr, g_yr, g_fyl);
        let loss_v = tape.scalar(loss);
        if !loss_v.is_finite() {
            return Err(Error::Diverged {
                step: self.step,
                detail: "pretraining loss is not finite".into(),
            });
        }
        tape.backward(loss);
        let lr = lr_schedule(
            self.step,
            self.cfg.pam_steps / 2,
            self.cfg.pam_steps,
            self.cfg.lr_pam,
        );
        self.apply_updates(&tape, &binder, &[("g_pre", lr)]);
        Ok(loss_v)
    }

    /// Run the pretraining stage for `cfg.pam_steps` steps.
    pub fn pam_run(&mut self, io: &TrainIo) -> Result<PamSummary> {
        let mut sink = LogSink::open(&io.log_path)?;
        let mut records = Vec::new();
        let mut first = f64::NAN;
        while self.step < self.cfg.pam_steps {
            let l = self.pam_step()?;
            if first.is_nan() {
                first = l;
            }
            let rec = PamRecord {
                step: self.step,
                l_pre: l,
                lr: lr_schedule(
                    self.step,
                    self.cfg.pam_steps / 2,
                    self.cfg.pam_steps,
                    self.cfg.lr_pam,
                ),
            };
            sink.write(&rec)?;
            records.push(rec);
            self.step += 1;
            if let Some(dir) = &io.ckpt_dir {
                if self.cfg.checkpoint_every > 0 && self.step % self.cfg.checkpoint_every == 0 {
                    std::fs::create_dir_all(dir)?;
                    save_checkpoint(&dir.join(format!("pam_{:06}.gzkc", self.step)), &self.state())?;
                }
            }
        }
        let tail = records.len().min(50);
        let final_running = if tail == 0 {
            f64::NAN
        } else {
            records[records.len() - tail..]
                .iter()
                .map(|r| r.l_pre)
                .sum::<f64>()
                / tail as f64
        };
        Ok(PamSummary {
            first,
            final_running,
            records,
        })
    }

    // ---- stage 2: joint adversarial training ------------------------------

    /// Full corrected sample for the synthesis-as-training pass, detached:
    /// run the correction pipeline on a Y batch in evaluation mode and build
    /// the same precomputed views a real batch would have.
    fn synthesize(&self, yb: &BatchView) -> Result<SynthBatch> {
        let flags = self.models.flags;
        let c = self.codes_content_eval(&yb.crops_low_stacked)?;
        let x_tilde = self.models.inpaint_x(&yb.low4, &c)?;
        let mut high = if flags.use_cfm {
            let up = resize::bilinear_up2(&x_tilde);
            &up + &yb.res_masked
        } else {
            resize::bilinear_up2(&x_tilde)
        };
        let crops_l = crop_batch(&high, &yb.rl_high);
        let crops_r = crop_batch(&high, &yb.rr_high);
        let refined_l;
        let refined_r;
        if flags.use_cfm {
            let stacked = ndarray::concatenate(Axis(0), &[crops_l.view(), crops_r.view()]).unwrap();
            let resid = self.models.refine_residual(&stacked)?;
            let refined = &stacked + &resid;
            let b = crops_l.dim().0;
            refined_l = refined.slice(s![0..b, .., .., ..]).to_owned();
            refined_r = refined.slice(s![b.., .., .., ..]).to_owned();
        } else {
            refined_l = crops_l;
            refined_r = crops_r;
        }
        // paste the generated eyes into the original portrait and clamp:
        // outside the rectangles the synthetic pair matches the input exactly
        high.assign(&yb.high3);
        paste_batch(&mut high, &refined_l, &yb.rl_high);
        paste_batch(&mut high, &refined_r, &yb.rr_high);
        high.mapv_inplace(|v| v.clamp(-1.0, 1.0));

        let low3 = resize::avg_pool2(&high);
        let b = low3.dim().0;
        let low = self.data.profile.low;
        let mut low4 = Array4::zeros((b, 4, low, low));
        low4.slice_mut(s![.., 0..3, .., ..]).assign(&low3);
        for i in 0..b {
            for r in [yb.rl_low[i], yb.rr_low[i]] {
                low4.slice_mut(s![i, 0..3, r.top..r.bottom(), r.left..r.right()])
                    .fill(0.0);
                low4.slice_mut(s![i, 3, r.top..r.bottom(), r.left..r.right()])
                    .fill(1.0);
            }
        }
        let crops_low_l = crop_batch(&low3, &yb.rl_low);
        let crops_low_r = crop_batch(&low3, &yb.rr_low);
        let crops_low_stacked =
            ndarray::concatenate(Axis(0), &[crops_low_l.view(), crops_low_r.view()]).unwrap();
        let crops_high_stacked =
            ndarray::concatenate(Axis(0), &[refined_l.view(), refined_r.view()]).unwrap();
        Ok(SynthBatch {
            low4,
            low3,
            crops_low_stacked,
            crops_high_stacked,
        })
    }

    /// Content codes `(B, 2*code_c)` from stacked `[left..., right...]` crops,
    /// evaluation mode.
    fn codes_content_eval(&self, crops_stacked: &Array4<f64>) -> Result<Array2<f64>> {
        let b = crops_stacked.dim().0 / 2;
        let codes = self.models.encode_content(crops_stacked)?;
        let left = codes.slice(s![0..b, ..]).to_owned();
        let right = codes.slice(s![b.., ..]).to_owned();
        Ok(ndarray::concatenate(Axis(1), &[left.view(), right.view()]).unwrap())
    }

    /// Angle codes `(B, 2*code_r)`; the left crop is mirrored before encoding
    /// because the encoder weights are shared across eyes.
    fn codes_angle_eval(&self, crops_stacked: &Array4<f64>) -> Result<Array2<f64>> {
        let b = crops_stacked.dim().0 / 2;
        let left = mirror_crops(&crops_stacked.slice(s![0..b, .., .., ..]).to_owned());
        let right = crops_stacked.slice(s![b.., .., .., ..]).to_owned();
        let stacked = ndarray::concatenate(Axis(0), &[left.view(), right.view()]).unwrap();
        let codes = self.models.encode_angle(&stacked)?;
        let l = codes.slice(s![0..b, ..]).to_owned();
        let r = codes.slice(s![b.., ..]).to_owned();
        Ok(ndarray::concatenate(Axis(1), &[l.view(), r.view()]).unwrap())
    }

    /// Tape-side content codes from stacked crops (frozen encoder, gradients
    /// flow through to variable inputs).
    fn codes_content_t(
        &self,
        t: &mut Tape,
        bind: &mut Binder,
        crops_stacked: VarId,
    ) -> VarId {
        let b = t.shape(crops_stacked)[0] / 2;
        let codes = self.models.encode_content_t(t, bind, crops_stacked);
        let l = t.slice_batch(codes, 0, b);
        let r = t.slice_batch(codes, b, b);
        t.concat(&[l, r], 1)
    }

    pub fn joint_run(&mut self, io: &TrainIo) -> Result<JointSummary> {
        if self.data.x.is_empty() || self.data.y.is_empty() {
            return Err(Error::Config(
                "joint training needs samples in both domains".into(),
            ));
        }
        let mut sink = LogSink::open(&io.log_path)?;
        let mut records = Vec::new();
        while self.step < self.cfg.max_steps {
            let rec = self.joint_step(io)?;
            sink.write(&rec)?;
            records.push(rec);
            self.step += 1;
            if let Some(dir) = &io.ckpt_dir {
                if self.cfg.checkpoint_every > 0 && self.step % self.cfg.checkpoint_every == 0 {
                    std::fs::create_dir_all(dir)?;
                    save_checkpoint(&dir.join(format!("joint_{:06}.gzkc", self.step)), &self.state())?;
                }
            }
        }
        Ok(JointSummary { records })
    }

    fn joint_step(&mut self, io: &TrainIo) -> Result<StepRecord> {
        let t0 = Instant::now();
        let flags = self.models.flags;
        let w = self.cfg.weights;
        let bx = (self.cfg.batch / 2).max(1);
        let by = (self.cfg.batch - bx).max(1);
        let xi: Vec<usize> = (0..bx)
            .map(|_| self.rng.random_range(0..self.data.x.len()))
            .collect();
        let yi: Vec<usize> = (0..by)
            .map(|_| self.rng.random_range(0..self.data.y.len()))
            .collect();
        let xb = BatchView::build(&self.data.x, &xi);
        let yb = BatchView::build(&self.data.y, &yi);

        let synth = if flags.use_synthesis_as_training {
            Some(self.synthesize(&yb)?)
        } else {
            None
        };

        // ---- generator-side graph (discriminator nodes appended later) ----
        let mut t = Tape::new();
        let mut bind = Binder::new();

        let x_path = self.generator_path(&mut t, &mut bind, GenKind::X, &xb, None)?;
        let y_codes_r = self.codes_angle_eval(&yb.crops_low_stacked)?;
        let y_path = self.generator_path(&mut t, &mut bind, GenKind::Y, &yb, Some(&y_codes_r))?;
        let syn_path = match &synth {
            Some(sb) => {
                let r = self.codes_angle_eval(&sb.crops_low_stacked)?;
                Some(self.generator_path_syn(&mut t, &mut bind, sb, &yb, &r)?)
            }
            None => None,
        };

        // latent reconstruction on the two animation outputs
        let fp = if flags.use_latent_recon {
            let y_recon_crops = {
                let l = t.crop_nchw(y_path.out_low, &yb.rl_low);
                let r = t.crop_nchw(y_path.out_low, &yb.rr_low);
                t.concat(&[l, r], 0)
            };
            let c_of_recon_y = self.codes_content_t(&mut t, &mut bind, y_recon_crops);
            match (&syn_path, &synth) {
                (Some(sp), Some(_)) => {
                    let crops = {
                        let l = t.crop_nchw(sp.out_low, &yb.rl_low);
                        let r = t.crop_nchw(sp.out_low, &yb.rr_low);
                        t.concat(&[l, r], 0)
                    };
                    let c_of_recon_yx = self.codes_content_t(&mut t, &mut bind, crops);
                    Some(losses::fp_loss_t(
                        &mut t,
                        y_path.c_codes,
                        c_of_recon_y,
                        sp.c_codes,
                        c_of_recon_yx,
                    ))
                }
                _ => {
                    // without the synthesis pass only the first term exists
                    let term = losses::l1_t(&mut t, y_path.c_codes, c_of_recon_y);
                    Some(term)
                }
            }
        } else {
            None
        };

        // ---- discriminator updates on detached fakes ----
        self.models.power_iterate_discs(1);
        let x_tilde_v = as_owned4(&t, x_path.out_low);
        let y_tilde_v = as_owned4(&t, y_path.out_low);
        let yx_tilde_v = syn_path.as_ref().map(|p| as_owned4(&t, p.out_low));
        let fake_infl_x_v = x_path.fake_infl.map(|id| as_owned4(&t, id));
        let fake_infl_y_v = y_path.fake_infl.map(|id| as_owned4(&t, id));

        let lr_main = lr_schedule(self.step, self.cfg.warm_steps, self.cfg.max_steps, self.cfg.lr_main);
        let lr_refiner = lr_schedule(self.step, self.cfg.warm_steps, self.cfg.max_steps, self.cfg.lr_refiner);

        let adv_x_d = self.update_disc_x(&xb, &yb, &x_tilde_v, yx_tilde_v.as_ref(), lr_main)?;
        let adv_y_d = self.update_disc_y(&yb, &y_tilde_v, lr_main)?;
        let adv_h_d = if flags.use_cfm {
            self.update_disc_h(
                &xb,
                &yb,
                fake_infl_x_v.as_ref().unwrap(),
                fake_infl_y_v.as_ref().unwrap(),
                lr_main,
            )?
        } else {
            0.0
        };

        // ---- generator objectives against the updated discriminators ----
        let p_fake_x = self.disc_x_t(&mut t, &mut bind, x_path.out_low, &xb.rl_low, &xb.rr_low);
        let adv_x_g = losses::adv_g_t(&mut t, p_fake_x);
        let p_fake_y = self.disc_y_t(&mut t, &mut bind, y_path.out_low, &yb.rl_low, &yb.rr_low);
        let adv_y_g = losses::adv_g_t(&mut t, p_fake_y);
        let adv_x_g_syn = syn_path.as_ref().map(|sp| {
            let p = self.disc_x_t(&mut t, &mut bind, sp.out_low, &yb.rl_low, &yb.rr_low);
            losses::adv_g_t(&mut t, p)
        });
        let (adv_h_g_x, adv_h_g_y) = if flags.use_cfm {
            let px = {
                let f = x_path.fake_infl.unwrap();
                let p = self.models.d_h.forward(&mut t, &mut bind, "d_h", f);
                losses::adv_g_t(&mut t, p)
            };
            let py = {
                let f = y_path.fake_infl.unwrap();
                let p = self.models.d_h.forward(&mut t, &mut bind, "d_h", f);
                losses::adv_g_t(&mut t, p)
            };
            (Some(px), Some(py))
        } else {
            (None, None)
        };

        // totals (each term appears exactly once in the backward root)
        let mut terms: Vec<(VarId, f64)> = vec![
            (adv_x_g, 1.0),
            (adv_y_g, 1.0),
            (x_path.rec, w.l1),
            (y_path.rec, w.l3),
        ];
        if let Some(a) = adv_h_g_x {
            terms.push((a, 1.0));
        }
        if let Some(a) = adv_h_g_y {
            terms.push((a, 1.0));
        }
        if let Some(a) = adv_x_g_syn {
            terms.push((a, w.l2));
        }
        if let Some(sp) = &syn_path {
            terms.push((sp.rec, w.l4));
        }
        if let Some(f) = fp {
            terms.push((f, w.l5));
        }
        let total = t.weighted_sum(&terms);

        let scalars = StepRecord {
            step: self.step,
            lx_re: t.scalar(x_path.rec),
            ly_re: t.scalar(y_path.rec),
            lyx_re: syn_path.as_ref().map_or(0.0, |p| t.scalar(p.rec)),
            l_fp: fp.map_or(0.0, |f| t.scalar(f)),
            adv_x_d,
            adv_y_d,
            adv_h_d,
            adv_x_g: t.scalar(adv_x_g),
            adv_x_g_syn: adv_x_g_syn.map_or(0.0, |a| t.scalar(a)),
            adv_y_g: t.scalar(adv_y_g),
            adv_h_g: adv_h_g_x.map_or(0.0, |a| t.scalar(a))
                + adv_h_g_y.map_or(0.0, |a| t.scalar(a)),
            total_gx: t.scalar(adv_x_g)
                + adv_h_g_x.map_or(0.0, |a| t.scalar(a))
                + w.l1 * t.scalar(x_path.rec),
            total_gy: t.scalar(adv_y_g)
                + adv_h_g_y.map_or(0.0, |a| t.scalar(a))
                + w.l2 * adv_x_g_syn.map_or(0.0, |a| t.scalar(a))
                + w.l3 * t.scalar(y_path.rec)
                + syn_path.as_ref().map_or(0.0, |p| w.l4 * t.scalar(p.rec))
                + fp.map_or(0.0, |f| w.l5 * t.scalar(f)),
            lr_main,
            lr_refiner,
            wall_ms: 0.0,
        };
        let all_finite = [
            scalars.lx_re,
            scalars.ly_re,
            scalars.lyx_re,
            scalars.l_fp,
            scalars.adv_x_d,
            scalars.adv_y_d,
            scalars.adv_h_d,
            scalars.total_gx,
            scalars.total_gy,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !all_finite {
            let dump = serde_json::json!({
                "step": self.step,
                "x_indices": xi,
                "y_indices": yi,
                "scalars": scalars,
            });
            let path = io
                .ckpt_dir
                .clone()
                .unwrap_or_else(|| PathBuf::from("."))
                .join(format!("nan_dump_step{}.json", self.step));
            let _ = std::fs::write(&path, serde_json::to_string_pretty(&dump)?);
            return Err(Error::Diverged {
                step: self.step,
                detail: format!("non-finite loss; batch dumped to {}", path.display()),
            });
        }

        t.backward(total);
        let mut groups: Vec<(&str, f64)> = vec![("g_x", lr_main), ("g_y", lr_main), ("e_r", lr_main)];
        if flags.use_cfm {
            groups.push(("g_h", lr_refiner));
        }
        self.apply_updates(&t, &bind, &groups);

        Ok(StepRecord {
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
            ..scalars
        })
    }

    /// Shared GCM/GAM graph: inpaint, coarse-to-fine, refinement, and the
    /// reconstruction loss. Returns the low-res output, the (possibly
    /// refined) high-res eye crops, the crop-disc fake input, and codes.
    fn generator_path(
        &self,
        t: &mut Tape,
        bind: &mut Binder,
        kind: GenKind,
        bv: &BatchView,
        r_codes: Option<&Array2<f64>>,
    ) -> Result<GenPath> {
        let crops_const = t.leaf4(bv.crops_low_stacked.clone());
        let c_codes = self.codes_content_t(t, bind, crops_const);
        let input = t.leaf4(bv.low4.clone());
        let out_low = match kind {
            GenKind::X => self.models.g_x.forward(t, bind, "g_x", input, c_codes),
            GenKind::Y => {
                let r = t.leaf(r_codes.unwrap().clone().into_dyn());
                let codes = t.concat(&[c_codes, r], 1);
                self.models.g_y.forward(t, bind, "g_y", input, codes)
            }
        };
        let target_low = t.leaf4(bv.low3.clone());
        let rec_low = losses::l1_t(t, out_low, target_low);
        let (rec, fake_infl) = self.highres_path(
            t,
            bind,
            out_low,
            rec_low,
            &bv.res_masked,
            &bv.crops_high_stacked,
            &bv.rl_high,
            &bv.rr_high,
            &bv.rl_infl,
            &bv.rr_infl,
        );
        Ok(GenPath {
            out_low,
            rec,
            fake_infl,
            c_codes,
        })
    }

    /// Same as `generator_path` but for the synthesized pair: inputs and
    /// targets come from the detached corrected sample while the mask
    /// geometry is the original Y batch's.
    fn generator_path_syn(
        &self,
        t: &mut Tape,
        bind: &mut Binder,
        sb: &SynthBatch,
        yb: &BatchView,
        r_codes: &Array2<f64>,
    ) -> Result<GenPath> {
        let crops_const = t.leaf4(sb.crops_low_stacked.clone());
        let c_codes = self.codes_content_t(t, bind, crops_const);
        let input = t.leaf4(sb.low4.clone());
        let r = t.leaf(r_codes.clone().into_dyn());
        let codes = t.concat(&[c_codes, r], 1);
        let out_low = self.models.g_y.forward(t, bind, "g_y", input, codes);
        let target_low = t.leaf4(sb.low3.clone());
        let rec_low = losses::l1_t(t, out_low, target_low);
        // the synthesis path feeds the reconstruction losses but not the
        // crop discriminator
        let flags = self.models.flags;
        let (rec, _) = if flags.use_cfm {
            // residual of the synthesized high-res sample is not reinjected:
            // targets are the synthesized crops themselves
            let up = t.bilinear_up2(out_low);
            let crops_l = t.crop_nchw(up, &yb.rl_high);
            let crops_r = t.crop_nchw(up, &yb.rr_high);
            let crops = t.concat(&[crops_l, crops_r], 0);
            let resid = self.models.g_h.forward(t, bind, "g_h", crops);
            let refined = t.add(crops, resid);
            let target = t.leaf4(sb.crops_high_stacked.clone());
            let rec_eye = losses::l1_t(t, refined, target);
            let rec = t.add(rec_low, rec_eye);
            (rec, None::<VarId>)
        } else {
            let up = t.bilinear_up2(out_low);
            let crops_l = t.crop_nchw(up, &yb.rl_high);
            let crops_r = t.crop_nchw(up, &yb.rr_high);
            let crops = t.concat(&[crops_l, crops_r], 0);
            let target = t.leaf4(sb.crops_high_stacked.clone());
            let rec_eye = losses::l1_t(t, crops, target);
            let rec = t.add(rec_low, rec_eye);
            (rec, None)
        };
        Ok(GenPath {
            out_low,
            rec,
            fake_infl: None,
            c_codes,
        })
    }

    /// Laplacian reinjection + local refinement on top of a low-res output,
    /// returning the full reconstruction loss and the inflated fake crops.
    #[allow(clippy::too_many_arguments)]
    fn highres_path(
        &self,
        t: &mut Tape,
        bind: &mut Binder,
        out_low: VarId,
        rec_low: VarId,
        res_masked: &Array4<f64>,
        crops_high_target: &Array4<f64>,
        rl_high: &[Rect],
        rr_high: &[Rect],
        rl_infl: &[Rect],
        rr_infl: &[Rect],
    ) -> (VarId, Option<VarId>) {
        let flags = self.models.flags;
        let b = rl_high.len();
        let up = t.bilinear_up2(out_low);
        if flags.use_cfm {
            let resm = t.leaf4(res_masked.clone());
            let high = t.add(up, resm);
            let crops_l = t.crop_nchw(high, rl_high);
            let crops_r = t.crop_nchw(high, rr_high);
            let crops = t.concat(&[crops_l, crops_r], 0);
            let resid = self.models.g_h.forward(t, bind, "g_h", crops);
            let refined = t.add(crops, resid);
            let target = t.leaf4(crops_high_target.clone());
            let rec_eye = losses::l1_t(t, refined, target);
            let rec = t.add(rec_low, rec_eye);
            let ref_l = t.slice_batch(refined, 0, b);
            let ref_r = t.slice_batch(refined, b, b);
            let comp = t.paste_nchw(high, ref_l, rl_high);
            let comp = t.paste_nchw(comp, ref_r, rr_high);
            let infl_l = t.crop_nchw(comp, rl_infl);
            let infl_r = t.crop_nchw(comp, rr_infl);
            let fake_infl = t.concat(&[infl_l, infl_r], 0);
            (rec, Some(fake_infl))
        } else {
            let crops_l = t.crop_nchw(up, rl_high);
            let crops_r = t.crop_nchw(up, rr_high);
            let crops = t.concat(&[crops_l, crops_r], 0);
            let target = t.leaf4(crops_high_target.clone());
            let rec_eye = losses::l1_t(t, crops, target);
            let rec = t.add(rec_low, rec_eye);
            (rec, None)
        }
    }

    fn disc_x_t(
        &self,
        t: &mut Tape,
        bind: &mut Binder,
        image: VarId,
        rl: &[Rect],
        rr: &[Rect],
    ) -> VarId {
        let cl = t.crop_nchw(image, rl);
        let cr = t.crop_nchw(image, rr);
        let crops6 = t.concat(&[cl, cr], 1);
        self.models.d_x.forward(t, bind, "d_x", image, crops6)
    }

    fn disc_y_t(
        &self,
        t: &mut Tape,
        bind: &mut Binder,
        image: VarId,
        rl: &[Rect],
        rr: &[Rect],
    ) -> VarId {
        let cl = t.crop_nchw(image, rl);
        let cr = t.crop_nchw(image, rr);
        let crops6 = t.concat(&[cl, cr], 1);
        self.models.d_y.forward(t, bind, "d_y", image, crops6)
    }

    fn update_disc_x(
        &mut self,
        xb: &BatchView,
        yb: &BatchView,
        x_tilde: &Array4<f64>,
        yx_tilde: Option<&Array4<f64>>,
        lr: f64,
    ) -> Result<f64> {
        let bx = xb.low3.dim().0;
        let mut t = Tape::new();
        let mut bind = Binder::new();
        let mut images = vec![xb.low3.view(), x_tilde.view()];
        if let Some(yx) = yx_tilde {
            images.push(yx.view());
        }
        let image_cat = ndarray::concatenate(Axis(0), &images).unwrap();
        let c_fake_x = crop6(x_tilde, &xb.rl_low, &xb.rr_low);
        let c_fake_yx = yx_tilde.map(|yx| crop6(yx, &yb.rl_low, &yb.rr_low));
        let mut crop_views = vec![xb.crops6_low.view(), c_fake_x.view()];
        if let Some(c) = &c_fake_yx {
            crop_views.push(c.view());
        }
        let crops_cat = ndarray::concatenate(Axis(0), &crop_views).unwrap();
        let img_id = t.leaf4(image_cat);
        let crop_id = t.leaf4(crops_cat);
        let probs = self.models.d_x.forward(&mut t, &mut bind, "d_x", img_id, crop_id);
        let p_real = t.slice_batch(probs, 0, bx);
        let p_fake_x = t.slice_batch(probs, bx, bx);
        let mut fakes = vec![p_fake_x];
        if yx_tilde.is_some() {
            let by = yb.low3.dim().0;
            fakes.push(t.slice_batch(probs, 2 * bx, by));
        }
        let obj = losses::adv_d_t(&mut t, &[p_real], &fakes);
        let obj_v = t.scalar(obj);
        let neg = t.scale(obj, -1.0);
        t.backward(neg);
        self.apply_updates(&t, &bind, &[("d_x", lr)]);
        Ok(obj_v)
    }

    fn update_disc_y(&mut self, yb: &BatchView, y_tilde: &Array4<f64>, lr: f64) -> Result<f64> {
        let by = yb.low3.dim().0;
        let mut t = Tape::new();
        let mut bind = Binder::new();
        let c_fake = crop6(y_tilde, &yb.rl_low, &yb.rr_low);
        let image_cat =
            ndarray::concatenate(Axis(0), &[yb.low3.view(), y_tilde.view()]).unwrap();
        let crops_cat =
            ndarray::concatenate(Axis(0), &[yb.crops6_low.view(), c_fake.view()]).unwrap();
        let img_id = t.leaf4(image_cat);
        let crop_id = t.leaf4(crops_cat);
        let probs = self.models.d_y.forward(&mut t, &mut bind, "d_y", img_id, crop_id);
        let p_real = t.slice_batch(probs, 0, by);
        let p_fake = t.slice_batch(probs, by, by);
        let obj = losses::adv_d_t(&mut t, &[p_real], &[p_fake]);
        let obj_v = t.scalar(obj);
        let neg = t.scale(obj, -1.0);
        t.backward(neg);
        self.apply_updates(&t, &bind, &[("d_y", lr)]);
        Ok(obj_v)
    }

    fn update_disc_h(
        &mut self,
        xb: &BatchView,
        yb: &BatchView,
        fake_x: &Array4<f64>,
        fake_y: &Array4<f64>,
        lr: f64,
    ) -> Result<f64> {
        let nx = xb.infl_stacked.dim().0;
        let ny = yb.infl_stacked.dim().0;
        let mut t = Tape::new();
        let mut bind = Binder::new();
        let cat = ndarray::concatenate(
            Axis(0),
            &[
                xb.infl_stacked.view(),
                fake_x.view(),
                yb.infl_stacked.view(),
                fake_y.view(),
            ],
        )
        .unwrap();
        let id = t.leaf4(cat);
        let probs = self.models.d_h.forward(&mut t, &mut bind, "d_h", id);
        let p_real_x = t.slice_batch(probs, 0, nx);
        let p_fake_x = t.slice_batch(probs, nx, fake_x.dim().0);
        let off = nx + fake_x.dim().0;
        let p_real_y = t.slice_batch(probs, off, ny);
        let p_fake_y = t.slice_batch(probs, off + ny, fake_y.dim().0);
        let obj = losses::adv_d_t(&mut t, &[p_real_x, p_real_y], &[p_fake_x, p_fake_y]);
        let obj_v = t.scalar(obj);
        let neg = t.scale(obj, -1.0);
        t.backward(neg);
        self.apply_updates(&t, &bind, &[("d_h", lr)]);
        Ok(obj_v)
    }
}

fn as_owned4(t: &Tape, id: VarId) -> Array4<f64> {
    t.value(id)
        .to_owned()
        .into_dimensionality()
        .expect("4-d node")
}

enum GenKind {
    X,
    Y,
}

struct GenPath {
    out_low: VarId,
    rec: VarId,
    fake_infl: Option<VarId>,
    c_codes: VarId,
}

/// Detached corrected sample plus the derived views for the second GAM pass.
struct SynthBatch {
    low4: Array4<f64>,
    low3: Array4<f64>,
    crops_low_stacked: Array4<f64>,
    crops_high_stacked: Array4<f64>,
}

pub use self::driver::{pretrain_pam, train_joint};

mod driver {
    use super::*;

    /// Stage 1: pretrain the eye autoencoder with mirror pairs; returns the
    /// final state (to checkpoint) and the loss trace.
    pub fn pretrain_pam(
        cfg: &TrainConfig,
        data: &TrainData,
        io: &TrainIo,
    ) -> Result<(TrainState, PamSummary)> {
        let mut trainer = Trainer::fresh(cfg.clone(), data, Stage::Pam)?;
        let summary = trainer.pam_run(io)?;
        Ok((trainer.state(), summary))
    }

    /// Stage 2: joint adversarial training, starting from a pretraining
    /// state (or a fresh model when component A is ablated and no
    /// pretraining exists).
    pub fn train_joint(
        cfg: &TrainConfig,
        data: &TrainData,
        start: Option<TrainState>,
        io: &TrainIo,
    ) -> Result<(TrainState, JointSummary)> {
        let mut trainer = match start {
            Some(state) if state.stage == Stage::Joint => Trainer::resume(data, state)?,
            Some(state) => Trainer::from_pam(cfg.clone(), data, state)?,
            None => Trainer::fresh(cfg.clone(), data, Stage::Joint)?,
        };
        let summary = trainer.joint_run(io)?;
        let mut state = trainer.state();
        state.stage = Stage::Joint;
        Ok((state, summary))
    }
}
