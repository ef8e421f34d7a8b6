//! The seven trainable networks: two conditioned inpainting generators, the
//! pretrained eye autoencoder (whose encoder is the content encoder), the
//! angle encoder, the local refiner, and three spectrally normalized
//! discriminators.
//!
//! Generators use stride-2 down blocks, a residual bottleneck with the
//! latent codes broadcast and concatenated there, nearest-upsample+conv
//! decoders and instance normalization. Discriminators use strided
//! convolutions, leaky ReLU and no normalization beyond the spectral one.
//! All depths and widths come from the profile so every preset shares this
//! code. Odd spatial sizes (the HQ crops) are handled by decoding one pixel
//! large and slicing back to the encoder's size chain.

use ndarray::ArrayD;
use rand_chacha::ChaCha8Rng;

use crate::imagecore::Rect;
use crate::profiles::Profile;
use crate::tensor::{Tape, VarId};

use super::layers::{Binder, Conv2dLayer, DenseLayer, InstanceNormLayer, Module, LEAKY_SLOPE};

fn half_ceil(n: usize) -> usize {
    n.div_ceil(2)
}

/// Spatial sizes along a chain of stride-2 convolutions (k3, pad 1).
fn size_chain(size: (usize, usize), stages: usize) -> Vec<(usize, usize)> {
    let mut out = vec![size];
    for _ in 0..stages {
        let last = *out.last().unwrap();
        out.push((half_ceil(last.0), half_ceil(last.1)));
    }
    out
}

/// Nearest-upsample then slice back to `target` when the doubling overshoots
/// an odd encoder size.
fn up_to(tape: &mut Tape, x: VarId, target: (usize, usize)) -> VarId {
    let up = tape.nearest_up2(x);
    let shape = tape.shape(up).to_vec();
    if (shape[2], shape[3]) == target {
        up
    } else {
        let rect = Rect {
            top: 0,
            left: 0,
            height: target.0,
            width: target.1,
        };
        let rects = vec![rect; shape[0]];
        tape.crop_nchw(up, &rects)
    }
}

#[derive(Clone)]
struct ConvIn {
    conv: Conv2dLayer,
    norm: InstanceNormLayer,
}

impl ConvIn {
    fn new(cin: usize, cout: usize, k: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        ConvIn {
            conv: Conv2dLayer::new(cin, cout, k, stride, k / 2, false, rng),
            norm: InstanceNormLayer::new(cout),
        }
    }

    fn forward(&self, t: &mut Tape, b: &mut Binder, prefix: &str, x: VarId) -> VarId {
        let h = self.conv.forward(t, b, &format!("{prefix}.conv"), x);
        let h = self.norm.forward(t, b, &format!("{prefix}.norm"), h);
        t.relu(h)
    }
}

impl Module for ConvIn {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &ParamRef)) {
        self.conv.visit_params(&format!("{prefix}.conv"), f);
        self.norm.visit_params(&format!("{prefix}.norm"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ParamRef)) {
        self.conv.visit_params_mut(&format!("{prefix}.conv"), f);
        self.norm.visit_params_mut(&format!("{prefix}.norm"), f);
    }
}

type ParamRef = super::layers::ParamTensor;

#[derive(Clone)]
struct ResBlock {
    a: ConvIn,
    b: Conv2dLayer,
    bn: InstanceNormLayer,
}

impl ResBlock {
    fn new(ch: usize, rng: &mut ChaCha8Rng) -> Self {
        ResBlock {
            a: ConvIn::new(ch, ch, 3, 1, rng),
            b: Conv2dLayer::new(ch, ch, 3, 1, 1, false, rng),
            bn: InstanceNormLayer::new(ch),
        }
    }

    fn forward(&self, t: &mut Tape, bind: &mut Binder, prefix: &str, x: VarId) -> VarId {
        let h = self.a.forward(t, bind, &format!("{prefix}.a"), x);
        let h = self.b.forward(t, bind, &format!("{prefix}.b"), h);
        let h = self.bn.forward(t, bind, &format!("{prefix}.bn"), h);
        t.add(x, h)
    }
}

impl Module for ResBlock {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &ParamRef)) {
        self.a.visit_params(&format!("{prefix}.a"), f);
        self.b.visit_params(&format!("{prefix}.b"), f);
        self.bn.visit_params(&format!("{prefix}.bn"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ParamRef)) {
        self.a.visit_params_mut(&format!("{prefix}.a"), f);
        self.b.visit_params_mut(&format!("{prefix}.b"), f);
        self.bn.visit_params_mut(&format!("{prefix}.bn"), f);
    }
}

fn gen_channels(base: usize, stages: usize) -> Vec<usize> {
    (0..stages)
        .map(|i| base * (1 << (i + 1).min(2)))
        .collect()
}

/// Masked-image inpainting generator, conditioned on latent codes broadcast
/// onto the bottleneck grid. Input is the masked RGB image plus a hole
/// indicator channel; output is a full image in `[-1, 1]`.
#[derive(Clone)]
pub struct InpaintGenerator {
    head: ConvIn,
    downs: Vec<ConvIn>,
    inject: ConvIn,
    blocks: Vec<ResBlock>,
    ups: Vec<ConvIn>,
    out: Conv2dLayer,
    pub code_dim: usize,
    pub image_size: usize,
}

impl InpaintGenerator {
    pub fn new(profile: &Profile, code_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let base = profile.gen_base;
        let stages = profile.gen_downs;
        let chans = gen_channels(base, stages);
        let bott = *chans.last().unwrap();
        let head = ConvIn::new(4, base, 3, 1, rng);
        let mut downs = Vec::new();
        let mut prev = base;
        for &ch in &chans {
            downs.push(ConvIn::new(prev, ch, 3, 2, rng));
            prev = ch;
        }
        let inject = ConvIn::new(bott + code_dim, bott, 1, 1, rng);
        let blocks = (0..profile.gen_blocks)
            .map(|_| ResBlock::new(bott, rng))
            .collect();
        let mut ups = Vec::new();
        let mut prev = bott;
        for i in (0..stages).rev() {
            let ch = if i == 0 { base } else { chans[i - 1] };
            ups.push(ConvIn::new(prev, ch, 3, 1, rng));
            prev = ch;
        }
        let out = Conv2dLayer::new(base, 3, 3, 1, 1, false, rng);
        InpaintGenerator {
            head,
            downs,
            inject,
            blocks,
            ups,
            out,
            code_dim,
            image_size: profile.low,
        }
    }

    /// `x` is `(B, 4, low, low)`, `codes` is `(B, code_dim)`.
    pub fn forward(
        &self,
        t: &mut Tape,
        b: &mut Binder,
        prefix: &str,
        x: VarId,
        codes: VarId,
    ) -> VarId {
        let sizes = size_chain((self.image_size, self.image_size), self.downs.len());
        let mut h = self.head.forward(t, b, &format!("{prefix}.head"), x);
        for (i, d) in self.downs.iter().enumerate() {
            h = d.forward(t, b, &format!("{prefix}.down{i}"), h);
        }
        let bott = sizes[self.downs.len()];
        let grid = t.broadcast_spatial(codes, bott.0, bott.1);
        h = t.concat(&[h, grid], 1);
        h = self.inject.forward(t, b, &format!("{prefix}.inject"), h);
        for (i, blk) in self.blocks.iter().enumerate() {
            h = blk.forward(t, b, &format!("{prefix}.block{i}"), h);
        }
        for (i, u) in self.ups.iter().enumerate() {
            let target = sizes[self.downs.len() - 1 - i];
            h = up_to(t, h, target);
            h = u.forward(t, b, &format!("{prefix}.up{i}"), h);
        }
        let y = self.out.forward(t, b, &format!("{prefix}.out"), h);
        t.tanh(y)
    }
}

impl Module for InpaintGenerator {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &ParamRef)) {
        self.head.visit_params(&format!("{prefix}.head"), f);
        for (i, d) in self.downs.iter().enumerate() {
            d.visit_params(&format!("{prefix}.down{i}"), f);
        }
        self.inject.visit_params(&format!("{prefix}.inject"), f);
        for (i, blk) in self.blocks.iter().enumerate() {
            blk.visit_params(&format!("{prefix}.block{i}"), f);
        }
        for (i, u) in self.ups.iter().enumerate() {
            u.visit_params(&format!("{prefix}.up{i}"), f);
        }
        self.out.visit_params(&format!("{prefix}.out"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ParamRef)) {
        self.head.visit_params_mut(&format!("{prefix}.head"), f);
        for (i, d) in self.downs.iter_mut().enumerate() {
            d.visit_params_mut(&format!("{prefix}.down{i}"), f);
        }
        self.inject.visit_params_mut(&format!("{prefix}.inject"), f);
        for (i, blk) in self.blocks.iter_mut().enumerate() {
            blk.visit_params_mut(&format!("{prefix}.block{i}"), f);
        }
        for (i, u) in self.ups.iter_mut().enumerate() {
            u.visit_params_mut(&format!("{prefix}.up{i}"), f);
        }
        self.out.visit_params_mut(&format!("{prefix}.out"), f);
    }
}

/// Eye-crop autoencoder pretrained with mirror pairs; its encoder half is the
/// content encoder that conditions both generators.
#[derive(Clone)]
pub struct EyeAutoencoder {
    enc_head: ConvIn,
    enc_downs: Vec<ConvIn>,
    enc_fc: DenseLayer,
    dec_fc: DenseLayer,
    dec_ups: Vec<ConvIn>,
    dec_out: Conv2dLayer,
    pub crop: (usize, usize),
    pub code_dim: usize,
    base: usize,
}

impl EyeAutoencoder {
    pub fn new(profile: &Profile, crop: (usize, usize), code_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let base = profile.pre_base;
        let sizes = size_chain(crop, 2);
        let bottom = sizes[2];
        let feat = 4 * base * bottom.0 * bottom.1;
        EyeAutoencoder {
            enc_head: ConvIn::new(3, base, 3, 1, rng),
            enc_downs: vec![
                ConvIn::new(base, 2 * base, 3, 2, rng),
                ConvIn::new(2 * base, 4 * base, 3, 2, rng),
            ],
            enc_fc: DenseLayer::new(feat, code_dim, false, rng),
            dec_fc: DenseLayer::new(code_dim, feat, false, rng),
            dec_ups: vec![
                ConvIn::new(4 * base, 2 * base, 3, 1, rng),
                ConvIn::new(2 * base, base, 3, 1, rng),
            ],
            dec_out: Conv2dLayer::new(base, 3, 3, 1, 1, false, rng),
            crop,
            code_dim,
            base,
        }
    }

    pub fn encode(&self, t: &mut Tape, b: &mut Binder, prefix: &str, x: VarId) -> VarId {
        let mut h = self.enc_head.forward(t, b, &format!("{prefix}.enc_head"), x);
        for (i, d) in self.enc_downs.iter().enumerate() {
            h = d.forward(t, b, &format!("{prefix}.enc_down{i}"), h);
        }
        let shape = t.shape(h).to_vec();
        let h = t.reshape(h, &[shape[0], shape[1] * shape[2] * shape[3]]);
        self.enc_fc.forward(t, b, &format!("{prefix}.enc_fc"), h)
    }

    pub fn decode(&self, t: &mut Tape, b: &mut Binder, prefix: &str, code: VarId) -> VarId {
        let sizes = size_chain(self.crop, 2);
        let bottom = sizes[2];
        let h = self.dec_fc.forward(t, b, &format!("{prefix}.dec_fc"), code);
        let h = t.relu(h);
        let bsz = t.shape(h)[0];
        let mut h = t.reshape(h, &[bsz, 4 * self.base, bottom.0, bottom.1]);
        for (i, u) in self.dec_ups.iter().enumerate() {
            h = up_to(t, h, sizes[1 - i]);
            h = u.forward(t, b, &format!("{prefix}.dec_up{i}"), h);
        }
        let y = self.dec_out.forward(t, b, &format!("{prefix}.dec_out"), h);
        t.tanh(y)
    }

    pub fn forward(&self, t: &mut Tape, b: &mut Binder, prefix: &str, x: VarId) -> VarId {
        let code = self.encode(t, b, prefix, x);
        self.decode(t, b, prefix, code)
    }
}

impl Module for EyeAutoencoder {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &ParamRef)) {
        self.enc_head.visit_params(&format!("{prefix}.enc_head"), f);
        for (i, d) in self.enc_downs.iter().enumerate() {
            d.visit_params(&format!("{prefix}.enc_down{i}"), f);
        }
        self.enc_fc.visit_params(&format!("{prefix}.enc_fc"), f);
        self.dec_fc.visit_params(&format!("{prefix}.dec_fc"), f);
        for (i, u) in self.dec_ups.iter().enumerate() {
            u.visit_params(&format!("{prefix}.dec_up{i}"), f);
        }
        self.dec_out.visit_params(&format!("{prefix}.dec_out"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ParamRef)) {
        self.enc_head
            .visit_params_mut(&format!("{prefix}.enc_head"), f);
        for (i, d) in self.enc_downs.iter_mut().enumerate() {
            d.visit_params_mut(&format!("{prefix}.enc_down{i}"), f);
        }
        self.enc_fc.visit_params_mut(&format!("{prefix}.enc_fc"), f);
        self.dec_fc.visit_params_mut(&format!("{prefix}.dec_fc"), f);
        for (i, u) in self.dec_ups.iter_mut().enumerate() {
            u.visit_params_mut(&format!("{prefix}.dec_up{i}"), f);
        }
        self.dec_out
            .visit_params_mut(&format!("{prefix}.dec_out"), f);
    }
}

/// Angle encoder: eye crop to the gaze-correlated latent code.
#[derive(Clone)]
pub struct AngleEncoder {
    head: ConvIn,
    downs: Vec<ConvIn>,
    fc: DenseLayer,
    pub crop: (usize, usize),
    pub code_dim: usize,
}

impl AngleEncoder {
    pub fn new(profile: &Profile, crop: (usize, usize), code_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let base = profile.pre_base;
        let sizes = size_chain(crop, 2);
        let bottom = sizes[2];
        AngleEncoder {
            head: ConvIn::new(3, base, 3, 1, rng),
            downs: vec![
                ConvIn::new(base, 2 * base, 3, 2, rng),
                ConvIn::new(2 * base, 4 * base, 3, 2, rng),
            ],
            fc: DenseLayer::new(4 * base * bottom.0 * bottom.1, code_dim, false, rng),
            crop,
            code_dim,
        }
    }

    pub fn forward(&self, t: &mut Tape, b: &mut Binder, prefix: &str, x: VarId) -> VarId {
        let mut h = self.head.forward(t, b, &format!("{prefix}.head"), x);
        for (i, d) in self.downs.iter().enumerate() {
            h = d.forward(t, b, &format!("{prefix}.down{i}"), h);
        }
        let shape = t.shape(h).to_vec();
        let h = t.reshape(h, &[shape[0], shape[1] * shape[2] * shape[3]]);
        self.fc.forward(t, b, &format!("{prefix}.fc"), h)
    }
}

impl Module for AngleEncoder {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &ParamRef)) {
        self.head.visit_params(&format!("{prefix}.head"), f);
        for (i, d) in self.downs.iter().enumerate() {
            d.visit_params(&format!("{prefix}.down{i}"), f);
        }
        self.fc.visit_params(&format!("{prefix}.fc"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ParamRef)) {
        self.head.visit_params_mut(&format!("{prefix}.head"), f);
        for (i, d) in self.downs.iter_mut().enumerate() {
            d.visit_params_mut(&format!("{prefix}.down{i}"), f);
        }
        self.fc.visit_params_mut(&format!("{prefix}.fc"), f);
    }
}

/// Local refiner: predicts a residual for a high-resolution eye crop.
#[derive(Clone)]
pub struct LocalRefiner {
    head: ConvIn,
    down: ConvIn,
    mid: ConvIn,
    up: ConvIn,
    out: Conv2dLayer,
    pub crop: (usize, usize),
}

impl LocalRefiner {
    pub fn new(profile: &Profile, rng: &mut ChaCha8Rng) -> Self {
        let base = profile.refiner_base;
        LocalRefiner {
            head: ConvIn::new(3, base, 3, 1, rng),
            down: ConvIn::new(base, 2 * base, 3, 2, rng),
            mid: ConvIn::new(2 * base, 2 * base, 3, 1, rng),
            up: ConvIn::new(2 * base, base, 3, 1, rng),
            out: Conv2dLayer::new(base, 3, 3, 1, 1, false, rng),
            crop: profile.crop_high,
        }
    }

    /// Residual for a `(B, 3, crop_h, crop_w)` batch, in `[-1, 1]`.
    pub fn forward(&self, t: &mut Tape, b: &mut Binder, prefix: &str, x: VarId) -> VarId {
        let sizes = size_chain(self.crop, 1);
        let h = self.head.forward(t, b, &format!("{prefix}.head"), x);
        let h = self.down.forward(t, b, &format!("{prefix}.down"), h);
        let h = self.mid.forward(t, b, &format!("{prefix}.mid"), h);
        let h = up_to(t, h, sizes[0]);
        let h = self.up.forward(t, b, &format!("{prefix}.up"), h);
        let y = self.out.forward(t, b, &format!("{prefix}.out"), h);
        t.tanh(y)
    }
}

impl Module for LocalRefiner {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &ParamRef)) {
        self.head.visit_params(&format!("{prefix}.head"), f);
        self.down.visit_params(&format!("{prefix}.down"), f);
        self.mid.visit_params(&format!("{prefix}.mid"), f);
        self.up.visit_params(&format!("{prefix}.up"), f);
        self.out.visit_params(&format!("{prefix}.out"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ParamRef)) {
        self.head.visit_params_mut(&format!("{prefix}.head"), f);
        self.down.visit_params_mut(&format!("{prefix}.down"), f);
        self.mid.visit_params_mut(&format!("{prefix}.mid"), f);
        self.up.visit_params_mut(&format!("{prefix}.up"), f);
        self.out.visit_params_mut(&format!("{prefix}.out"), f);
    }
}

fn disc_global_stages(low: usize) -> usize {
    ((low as f64).log2() as usize).saturating_sub(2).clamp(2, 4)
}

/// Whole-image + eye-crop discriminator: the two branch features are
/// concatenated and fed through a final dense layer and a sigmoid. Every
/// weight is spectrally normalized.
#[derive(Clone)]
pub struct GlobalLocalDisc {
    global_convs: Vec<Conv2dLayer>,
    global_fc: DenseLayer,
    local_convs: Vec<Conv2dLayer>,
    local_fc: DenseLayer,
    head: DenseLayer,
    pub image_size: usize,
    pub crop: (usize, usize),
}

impl GlobalLocalDisc {
    pub fn new(profile: &Profile, rng: &mut ChaCha8Rng) -> Self {
        let b = profile.disc_base;
        let low = profile.low;
        let n_g = disc_global_stages(low);
        let mut chans = vec![b, 2 * b, 4 * b, 4 * b];
        chans.truncate(n_g);
        let mut global_convs = Vec::new();
        let mut prev = 3;
        for &ch in &chans {
            global_convs.push(Conv2dLayer::new(prev, ch, 3, 2, 1, true, rng));
            prev = ch;
        }
        let gs = low >> n_g;
        let fc_dim = 8 * b;
        let global_fc = DenseLayer::new(prev * gs * gs, fc_dim, true, rng);
        let crop = profile.crop_low;
        let csizes = size_chain(crop, 2);
        let local_convs = vec![
            Conv2dLayer::new(6, b, 3, 2, 1, true, rng),
            Conv2dLayer::new(b, 2 * b, 3, 2, 1, true, rng),
        ];
        let local_fc = DenseLayer::new(2 * b * csizes[2].0 * csizes[2].1, fc_dim, true, rng);
        let head = DenseLayer::new(2 * fc_dim, 1, true, rng);
        GlobalLocalDisc {
            global_convs,
            global_fc,
            local_convs,
            local_fc,
            head,
            image_size: low,
            crop,
        }
    }

    /// `image` is `(B, 3, low, low)`; `crops` is `(B, 6, crop_h, crop_w)`
    /// (left and right eye stacked channel-wise). Returns `(B, 1)`
    /// probabilities.
    pub fn forward(
        &self,
        t: &mut Tape,
        bind: &mut Binder,
        prefix: &str,
        image: VarId,
        crops: VarId,
    ) -> VarId {
        let mut g = image;
        for (i, c) in self.global_convs.iter().enumerate() {
            g = c.forward(t, bind, &format!("{prefix}.g{i}"), g);
            g = t.leaky_relu(g, LEAKY_SLOPE);
        }
        let gs = t.shape(g).to_vec();
        let g = t.reshape(g, &[gs[0], gs[1] * gs[2] * gs[3]]);
        let g = self.global_fc.forward(t, bind, &format!("{prefix}.gfc"), g);
        let g = t.leaky_relu(g, LEAKY_SLOPE);

        let mut l = crops;
        for (i, c) in self.local_convs.iter().enumerate() {
            l = c.forward(t, bind, &format!("{prefix}.l{i}"), l);
            l = t.leaky_relu(l, LEAKY_SLOPE);
        }
        let ls = t.shape(l).to_vec();
        let l = t.reshape(l, &[ls[0], ls[1] * ls[2] * ls[3]]);
        let l = self.local_fc.forward(t, bind, &format!("{prefix}.lfc"), l);
        let l = t.leaky_relu(l, LEAKY_SLOPE);

        let both = t.concat(&[g, l], 1);
        let y = self.head.forward(t, bind, &format!("{prefix}.head"), both);
        t.sigmoid(y)
    }

    pub fn power_iterate(&mut self, steps: usize) {
        for c in &mut self.global_convs {
            c.power_iterate(steps);
        }
        self.global_fc.power_iterate(steps);
        for c in &mut self.local_convs {
            c.power_iterate(steps);
        }
        self.local_fc.power_iterate(steps);
        self.head.power_iterate(steps);
    }

    /// `(weight, state)` pairs for the spectral-bound checks.
    pub fn sn_weights(&self) -> Vec<(String, &ArrayD<f64>, &super::layers::SnState)> {
        let mut out: Vec<(String, &ArrayD<f64>, &super::layers::SnState)> = Vec::new();
        for (i, c) in self.global_convs.iter().enumerate() {
            out.push((format!("g{i}"), &c.w.data, c.sn.as_ref().unwrap()));
        }
        out.push(("gfc".into(), &self.global_fc.w.data, self.global_fc.sn.as_ref().unwrap()));
        for (i, c) in self.local_convs.iter().enumerate() {
            out.push((format!("l{i}"), &c.w.data, c.sn.as_ref().unwrap()));
        }
        out.push(("lfc".into(), &self.local_fc.w.data, self.local_fc.sn.as_ref().unwrap()));
        out.push(("head".into(), &self.head.w.data, self.head.sn.as_ref().unwrap()));
        out
    }
}

impl Module for GlobalLocalDisc {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &ParamRef)) {
        for (i, c) in self.global_convs.iter().enumerate() {
            c.visit_params(&format!("{prefix}.g{i}"), f);
        }
        self.global_fc.visit_params(&format!("{prefix}.gfc"), f);
        for (i, c) in self.local_convs.iter().enumerate() {
            c.visit_params(&format!("{prefix}.l{i}"), f);
        }
        self.local_fc.visit_params(&format!("{prefix}.lfc"), f);
        self.head.visit_params(&format!("{prefix}.head"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ParamRef)) {
        for (i, c) in self.global_convs.iter_mut().enumerate() {
            c.visit_params_mut(&format!("{prefix}.g{i}"), f);
        }
        self.global_fc.visit_params_mut(&format!("{prefix}.gfc"), f);
        for (i, c) in self.local_convs.iter_mut().enumerate() {
            c.visit_params_mut(&format!("{prefix}.l{i}"), f);
        }
        self.local_fc.visit_params_mut(&format!("{prefix}.lfc"), f);
        self.head.visit_params_mut(&format!("{prefix}.head"), f);
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &ArrayD<f64>)) {
        for (i, c) in self.global_convs.iter().enumerate() {
            c.visit_buffers(&format!("{prefix}.g{i}"), f);
        }
        self.global_fc.visit_buffers(&format!("{prefix}.gfc"), f);
        for (i, c) in self.local_convs.iter().enumerate() {
            c.visit_buffers(&format!("{prefix}.l{i}"), f);
        }
        self.local_fc.visit_buffers(&format!("{prefix}.lfc"), f);
        self.head.visit_buffers(&format!("{prefix}.head"), f);
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<f64>)) {
        for (i, c) in self.global_convs.iter_mut().enumerate() {
            c.visit_buffers_mut(&format!("{prefix}.g{i}"), f);
        }
        self.global_fc.visit_buffers_mut(&format!("{prefix}.gfc"), f);
        for (i, c) in self.local_convs.iter_mut().enumerate() {
            c.visit_buffers_mut(&format!("{prefix}.l{i}"), f);
        }
        self.local_fc.visit_buffers_mut(&format!("{prefix}.lfc"), f);
        self.head.visit_buffers_mut(&format!("{prefix}.head"), f);
    }
}

/// Local-only discriminator over inflated high-resolution eye crops.
#[derive(Clone)]
pub struct CropDisc {
    convs: Vec<Conv2dLayer>,
    head: DenseLayer,
    pub crop: (usize, usize),
}

impl CropDisc {
    pub fn new(profile: &Profile, rng: &mut ChaCha8Rng) -> Self {
        let b = profile.disc_base;
        let crop = profile.crop_inflated();
        let sizes = size_chain(crop, 3);
        let convs = vec![
            Conv2dLayer::new(3, b, 3, 2, 1, true, rng),
            Conv2dLayer::new(b, 2 * b, 3, 2, 1, true, rng),
            Conv2dLayer::new(2 * b, 4 * b, 3, 2, 1, true, rng),
        ];
        let head = DenseLayer::new(4 * b * sizes[3].0 * sizes[3].1, 1, true, rng);
        CropDisc { convs, head, crop }
    }

    /// `crops` is `(B, 3, ih, iw)`; returns `(B, 1)` probabilities.
    pub fn forward(&self, t: &mut Tape, bind: &mut Binder, prefix: &str, crops: VarId) -> VarId {
        let mut h = crops;
        for (i, c) in self.convs.iter().enumerate() {
            h = c.forward(t, bind, &format!("{prefix}.c{i}"), h);
            h = t.leaky_relu(h, LEAKY_SLOPE);
        }
        let s = t.shape(h).to_vec();
        let h = t.reshape(h, &[s[0], s[1] * s[2] * s[3]]);
        let y = self.head.forward(t, bind, &format!("{prefix}.head"), h);
        t.sigmoid(y)
    }

    pub fn power_iterate(&mut self, steps: usize) {
        for c in &mut self.convs {
            c.power_iterate(steps);
        }
        self.head.power_iterate(steps);
    }

    pub fn sn_weights(&self) -> Vec<(String, &ArrayD<f64>, &super::layers::SnState)> {
        let mut out: Vec<(String, &ArrayD<f64>, &super::layers::SnState)> = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            out.push((format!("c{i}"), &c.w.data, c.sn.as_ref().unwrap()));
        }
        out.push(("head".into(), &self.head.w.data, self.head.sn.as_ref().unwrap()));
        out
    }
}

impl Module for CropDisc {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &ParamRef)) {
        for (i, c) in self.convs.iter().enumerate() {
            c.visit_params(&format!("{prefix}.c{i}"), f);
        }
        self.head.visit_params(&format!("{prefix}.head"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ParamRef)) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            c.visit_params_mut(&format!("{prefix}.c{i}"), f);
        }
        self.head.visit_params_mut(&format!("{prefix}.head"), f);
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &ArrayD<f64>)) {
        for (i, c) in self.convs.iter().enumerate() {
            c.visit_buffers(&format!("{prefix}.c{i}"), f);
        }
        self.head.visit_buffers(&format!("{prefix}.head"), f);
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<f64>)) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            c.visit_buffers_mut(&format!("{prefix}.c{i}"), f);
        }
        self.head.visit_buffers_mut(&format!("{prefix}.head"), f);
    }
}
