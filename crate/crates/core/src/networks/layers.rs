//! Parameter containers and the layer primitives the seven networks are
//! assembled from: convolution, dense, instance norm, and the spectral
//! normalization state for discriminator weights.

use std::collections::BTreeMap;

use ndarray::{Array1, ArrayD, IxDyn};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;

use crate::tensor::{Tape, VarId};

pub const WEIGHT_STD: f64 = 0.02;
pub const LEAKY_SLOPE: f64 = 0.2;

/// A named trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub data: ArrayD<f64>,
}

impl ParamTensor {
    pub fn len(&self) -> usize {
        self.data.len()
    }
}

/// Maps parameter names to tape leaves, one leaf per parameter per tape,
/// shared across repeated forwards of the same layer.
#[derive(Default)]
pub struct Binder {
    map: BTreeMap<String, VarId>,
}

impl Binder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, tape: &mut Tape, name: &str, p: &ParamTensor) -> VarId {
        if let Some(id) = self.map.get(name) {
            *id
        } else {
            let id = tape.leaf(p.data.clone());
            self.map.insert(name.to_string(), id);
            id
        }
    }

    pub fn get(&self, name: &str) -> Option<VarId> {
        self.map.get(name).copied()
    }
}

/// Walks a module's parameters (trainable) and buffers (power-iteration
/// state) with fully qualified names.
pub trait Module {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &ParamTensor));
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ParamTensor));
    fn visit_buffers(&self, _prefix: &str, _f: &mut dyn FnMut(&str, &ArrayD<f64>)) {}
    fn visit_buffers_mut(&mut self, _prefix: &str, _f: &mut dyn FnMut(&str, &mut ArrayD<f64>)) {}

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, p| n += p.len());
        n
    }
}

pub fn normal_init(shape: &[usize], rng: &mut ChaCha8Rng) -> ParamTensor {
    let dist = Normal::new(0.0, WEIGHT_STD).unwrap();
    ParamTensor {
        data: ArrayD::from_shape_fn(IxDyn(shape), |_| dist.sample(rng)),
    }
}

pub fn zeros_init(shape: &[usize]) -> ParamTensor {
    ParamTensor {
        data: ArrayD::zeros(IxDyn(shape)),
    }
}

pub fn ones_init(shape: &[usize]) -> ParamTensor {
    ParamTensor {
        data: ArrayD::from_elem(IxDyn(shape), 1.0),
    }
}

fn normalized_vector(n: usize, rng: &mut ChaCha8Rng) -> Array1<f64> {
    let dist = Normal::new(0.0, 1.0).unwrap();
    let v: Array1<f64> = Array1::from_shape_fn(n, |_| dist.sample(rng));
    let norm = v.dot(&v).sqrt().max(1e-12);
    v / norm
}

/// Power-iteration state for one spectrally normalized weight, flattened to
/// `(rows, cols)` = `(out, in * k * k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SnState {
    pub u: Array1<f64>,
    pub v: Array1<f64>,
}

impl SnState {
    pub fn new(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Self {
        SnState {
            u: normalized_vector(rows, rng),
            v: normalized_vector(cols, rng),
        }
    }

    /// Run `steps` power iterations against `w` (any shape with
    /// `rows * cols` elements), updating `u` and `v` in place.
    pub fn power_iterate(&mut self, w: &ArrayD<f64>, steps: usize) {
        let view = w.view();
        let mat = view
            .to_shape((self.u.len(), self.v.len()))
            .expect("weight/state size mismatch");
        for _ in 0..steps {
            let v = mat.t().dot(&self.u);
            let nv = v.dot(&v).sqrt();
            if nv < 1e-12 {
                return;
            }
            self.v = v / nv;
            let u = mat.dot(&self.v);
            let nu = u.dot(&u).sqrt();
            if nu < 1e-12 {
                return;
            }
            self.u = u / nu;
        }
    }

    /// Current top-singular-value estimate `u' W v`.
    pub fn sigma(&self, w: &ArrayD<f64>) -> f64 {
        let view = w.view();
        let mat = view
            .to_shape((self.u.len(), self.v.len()))
            .expect("weight/state size mismatch");
        self.u.dot(&mat.dot(&self.v))
    }
}

/// One power-iteration step followed by division by the estimated top
/// singular value. Degenerate (near-zero) weights are returned unchanged.
pub fn spectral_normalize(w: &ArrayD<f64>, state: &mut SnState) -> ArrayD<f64> {
    state.power_iterate(w, 1);
    let sigma = state.sigma(w);
    if sigma.abs() < 1e-12 {
        w.clone()
    } else {
        w.mapv(|x| x / sigma)
    }
}

#[derive(Clone)]
pub struct Conv2dLayer {
    pub w: ParamTensor,
    pub b: Option<ParamTensor>,
    pub stride: usize,
    pub pad: usize,
    pub sn: Option<SnState>,
}

impl Conv2dLayer {
    pub fn new(
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        spectral: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = normal_init(&[cout, cin, k, k], rng);
        let sn = spectral.then(|| SnState::new(cout, cin * k * k, rng));
        Conv2dLayer {
            w,
            b: Some(zeros_init(&[cout])),
            stride,
            pad,
            sn,
        }
    }

    pub fn forward(&self, tape: &mut Tape, binder: &mut Binder, prefix: &str, x: VarId) -> VarId {
        let w_id = binder.bind(tape, &format!("{prefix}.w"), &self.w);
        let w_used = match &self.sn {
            Some(sn) => tape.spectral_scale(w_id, &sn.u, &sn.v),
            None => w_id,
        };
        let b_id = self
            .b
            .as_ref()
            .map(|b| binder.bind(tape, &format!("{prefix}.b"), b));
        tape.conv2d(x, w_used, b_id, self.stride, self.pad)
    }

    pub fn power_iterate(&mut self, steps: usize) {
        if let Some(sn) = &mut self.sn {
            sn.power_iterate(&self.w.data, steps);
        }
    }
}

impl Module for Conv2dLayer {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &ParamTensor)) {
        f(&format!("{prefix}.w"), &self.w);
        if let Some(b) = &self.b {
            f(&format!("{prefix}.b"), b);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ParamTensor)) {
        f(&format!("{prefix}.w"), &mut self.w);
        if let Some(b) = &mut self.b {
            f(&format!("{prefix}.b"), b);
        }
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &ArrayD<f64>)) {
        if let Some(sn) = &self.sn {
            f(&format!("{prefix}.sn_u"), &sn.u.clone().into_dyn());
            f(&format!("{prefix}.sn_v"), &sn.v.clone().into_dyn());
        }
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<f64>)) {
        if let Some(sn) = &mut self.sn {
            let mut u = sn.u.clone().into_dyn();
            f(&format!("{prefix}.sn_u"), &mut u);
            sn.u = u.into_dimensionality().unwrap();
            let mut v = sn.v.clone().into_dyn();
            f(&format!("{prefix}.sn_v"), &mut v);
            sn.v = v.into_dimensionality().unwrap();
        }
    }
}

#[derive(Clone)]
pub struct DenseLayer {
    pub w: ParamTensor,
    pub b: Option<ParamTensor>,
    pub sn: Option<SnState>,
}

impl DenseLayer {
    pub fn new(din: usize, dout: usize, spectral: bool, rng: &mut ChaCha8Rng) -> Self {
        let w = normal_init(&[dout, din], rng);
        let sn = spectral.then(|| SnState::new(dout, din, rng));
        DenseLayer {
            w,
            b: Some(zeros_init(&[dout])),
            sn,
        }
    }

    pub fn forward(&self, tape: &mut Tape, binder: &mut Binder, prefix: &str, x: VarId) -> VarId {
        let w_id = binder.bind(tape, &format!("{prefix}.w"), &self.w);
        let w_used = match &self.sn {
            Some(sn) => tape.spectral_scale(w_id, &sn.u, &sn.v),
            None => w_id,
        };
        let b_id = self
            .b
            .as_ref()
            .map(|b| binder.bind(tape, &format!("{prefix}.b"), b));
        tape.dense(x, w_used, b_id)
    }

    pub fn power_iterate(&mut self, steps: usize) {
        if let Some(sn) = &mut self.sn {
            sn.power_iterate(&self.w.data, steps);
        }
    }
}

impl Module for DenseLayer {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &ParamTensor)) {
        f(&format!("{prefix}.w"), &self.w);
        if let Some(b) = &self.b {
            f(&format!("{prefix}.b"), b);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ParamTensor)) {
        f(&format!("{prefix}.w"), &mut self.w);
        if let Some(b) = &mut self.b {
            f(&format!("{prefix}.b"), b);
        }
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &ArrayD<f64>)) {
        if let Some(sn) = &self.sn {
            f(&format!("{prefix}.sn_u"), &sn.u.clone().into_dyn());
            f(&format!("{prefix}.sn_v"), &sn.v.clone().into_dyn());
        }
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<f64>)) {
        if let Some(sn) = &mut self.sn {
            let mut u = sn.u.clone().into_dyn();
            f(&format!("{prefix}.sn_u"), &mut u);
            sn.u = u.into_dimensionality().unwrap();
            let mut v = sn.v.clone().into_dyn();
            f(&format!("{prefix}.sn_v"), &mut v);
            sn.v = v.into_dimensionality().unwrap();
        }
    }
}

#[derive(Clone)]
pub struct InstanceNormLayer {
    pub gamma: ParamTensor,
    pub beta: ParamTensor,
}

impl InstanceNormLayer {
    pub fn new(channels: usize) -> Self {
        InstanceNormLayer {
            gamma: ones_init(&[channels]),
            beta: zeros_init(&[channels]),
        }
    }

    pub fn forward(&self, tape: &mut Tape, binder: &mut Binder, prefix: &str, x: VarId) -> VarId {
        let g = binder.bind(tape, &format!("{prefix}.gamma"), &self.gamma);
        let b = binder.bind(tape, &format!("{prefix}.beta"), &self.beta);
        tape.instance_norm(x, g, b)
    }
}

impl Module for InstanceNormLayer {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &ParamTensor)) {
        f(&format!("{prefix}.gamma"), &self.gamma);
        f(&format!("{prefix}.beta"), &self.beta);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ParamTensor)) {
        f(&format!("{prefix}.gamma"), &mut self.gamma);
        f(&format!("{prefix}.beta"), &mut self.beta);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn identity_weight_is_left_unscaled() {
        let eye = Array2::from_shape_fn((4, 4), |(i, j)| if i == j { 1.0 } else { 0.0 });
        let w = eye.clone().into_dyn();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut sn = SnState::new(4, 4, &mut rng);
        let out = spectral_normalize(&w, &mut sn);
        for (a, b) in out.iter().zip(w.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn scaled_identity_normalizes_to_identity() {
        let w = Array2::from_shape_fn((4, 4), |(i, j)| if i == j { 3.0 } else { 0.0 }).into_dyn();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut sn = SnState::new(4, 4, &mut rng);
        sn.power_iterate(&w, 10);
        let sigma = sn.sigma(&w);
        assert!((sigma - 3.0).abs() < 1e-3, "sigma {sigma}");
        let out = w.mapv(|x| x / sigma);
        for (i, v) in out.iter().enumerate() {
            let expect = if i % 5 == 0 { 1.0 } else { 0.0 };
            assert!((v - expect).abs() < 1e-3);
        }
    }

    #[test]
    fn random_matrix_matches_svd_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dist = Normal::new(0.0, 1.0).unwrap();
        let w = Array2::from_shape_fn((16, 8), |_| dist.sample(&mut rng)).into_dyn();
        let mut sn = SnState::new(16, 8, &mut rng);
        sn.power_iterate(&w, 30);
        let sigma = sn.sigma(&w);
        let m = nalgebra::DMatrix::from_fn(16, 8, |i, j| w[[i, j]]);
        let top = m.svd(false, false).singular_values[0];
        assert!(
            (sigma / top - 1.0).abs() < 1e-2,
            "estimate {sigma} vs svd {top}"
        );
    }

    #[test]
    fn zero_weight_passes_through() {
        let w = ArrayD::zeros(IxDyn(&[3, 3]));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut sn = SnState::new(3, 3, &mut rng);
        let out = spectral_normalize(&w, &mut sn);
        assert!(out.iter().all(|v| *v == 0.0));
    }
}
