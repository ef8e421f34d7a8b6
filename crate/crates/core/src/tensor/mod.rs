//! A small reverse-mode autodiff tape over `f64` ndarrays.
//!
//! Each training step builds a fresh tape: leaves hold batch data and
//! parameter snapshots, interior nodes cache whatever their backward pass
//! needs, and `backward` walks the nodes once in reverse. Parent indices are
//! always smaller than child indices, so a single reverse sweep is a valid
//! topological order.
//!
//! The engine asserts on shape misuse (programmer error); the public model
//! APIs validate shapes and return `Err` before anything reaches the tape.

mod conv;
pub mod resize;

use ndarray::{Array1, Array2, Array4, ArrayD, ArrayViewD, Axis, IxDyn};

use crate::imagecore::Rect;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

enum Op {
    Leaf,
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    Scale(VarId, f64),
    MeanAll(VarId),
    L1Mean(VarId),
    Log(VarId),
    Clamp(VarId, f64, f64),
    Relu(VarId),
    LeakyRelu(VarId, f64),
    Tanh(VarId),
    Sigmoid(VarId),
    Conv2d {
        x: VarId,
        w: VarId,
        b: Option<VarId>,
        stride: usize,
        pad: usize,
    },
    Dense {
        x: VarId,
        w: VarId,
        b: Option<VarId>,
    },
    InstanceNorm {
        x: VarId,
        gamma: VarId,
        beta: VarId,
        mean: Array2<f64>,
        inv_std: Array2<f64>,
    },
    Concat {
        parts: Vec<VarId>,
        axis: usize,
    },
    Reshape(VarId),
    NearestUp2(VarId),
    BilinearUp2(VarId),
    AvgPool2(VarId),
    CropNchw {
        x: VarId,
        rects: Vec<Rect>,
    },
    PasteNchw {
        base: VarId,
        patch: VarId,
        rects: Vec<Rect>,
    },
    SliceBatch {
        x: VarId,
        start: usize,
    },
    BroadcastSpatial(VarId),
    SpectralScale {
        w: VarId,
        u: Array1<f64>,
        v: Array1<f64>,
        sigma: f64,
    },
}

struct Node {
    value: ArrayD<f64>,
    grad: Option<ArrayD<f64>>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn as4(v: &ArrayD<f64>) -> ndarray::ArrayView4<'_, f64> {
    v.view().into_dimensionality().expect("expected 4-d value")
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op) -> VarId {
        debug_assert!(value.is_standard_layout(), "tape values are standard layout");
        self.nodes.push(Node {
            value,
            grad: None,
            op,
        });
        VarId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: ArrayD<f64>) -> VarId {
        self.push(value, Op::Leaf)
    }

    pub fn leaf4(&mut self, value: Array4<f64>) -> VarId {
        self.leaf(value.into_dyn())
    }

    pub fn value(&self, id: VarId) -> ArrayViewD<'_, f64> {
        self.nodes[id.0].value.view()
    }

    pub fn shape(&self, id: VarId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Value of a scalar node (shape `[1]`).
    pub fn scalar(&self, id: VarId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].value.len(), 1);
        self.nodes[id.0].value.iter().next().copied().unwrap()
    }

    /// Gradient accumulated on a node by the last `backward`, if any.
    pub fn grad(&self, id: VarId) -> Option<ArrayViewD<'_, f64>> {
        self.nodes[id.0].grad.as_ref().map(|g| g.view())
    }

    fn add_grad(&mut self, id: VarId, delta: ArrayD<f64>) {
        debug_assert_eq!(self.nodes[id.0].value.shape(), delta.shape());
        match &mut self.nodes[id.0].grad {
            Some(g) => *g += &delta,
            slot => *slot = Some(delta),
        }
    }

    // ---- elementwise and scalar ops -------------------------------------

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> VarId {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: VarId, k: f64) -> VarId {
        let v = self.nodes[a.0].value.mapv(|x| x * k);
        self.push(v, Op::Scale(a, k))
    }

    /// Sum a list of scalar nodes, each multiplied by its weight.
    pub fn weighted_sum(&mut self, terms: &[(VarId, f64)]) -> VarId {
        assert!(!terms.is_empty());
        let mut acc = self.scale(terms[0].0, terms[0].1);
        for &(id, w) in &terms[1..] {
            let t = self.scale(id, w);
            acc = self.add(acc, t);
        }
        acc
    }

    pub fn mean_all(&mut self, a: VarId) -> VarId {
        let m = self.nodes[a.0].value.mean().unwrap();
        self.push(ArrayD::from_elem(IxDyn(&[1]), m), Op::MeanAll(a))
    }

    /// Mean of absolute values; the workhorse of the L1 losses.
    pub fn l1_mean(&mut self, a: VarId) -> VarId {
        let m = self.nodes[a.0].value.mapv(f64::abs).mean().unwrap();
        self.push(ArrayD::from_elem(IxDyn(&[1]), m), Op::L1Mean(a))
    }

    pub fn log(&mut self, a: VarId) -> VarId {
        let v = self.nodes[a.0].value.mapv(f64::ln);
        self.push(v, Op::Log(a))
    }

    pub fn clamp(&mut self, a: VarId, lo: f64, hi: f64) -> VarId {
        let v = self.nodes[a.0].value.mapv(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    pub fn relu(&mut self, a: VarId) -> VarId {
        let v = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: VarId, slope: f64) -> VarId {
        let v = self.nodes[a.0]
            .value
            .mapv(|x| if x > 0.0 { x } else { slope * x });
        self.push(v, Op::LeakyRelu(a, slope))
    }

    pub fn tanh(&mut self, a: VarId) -> VarId {
        let v = self.nodes[a.0].value.mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: VarId) -> VarId {
        let v = self.nodes[a.0].value.mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(v, Op::Sigmoid(a))
    }

    // ---- layers ----------------------------------------------------------

    pub fn conv2d(
        &mut self,
        x: VarId,
        w: VarId,
        b: Option<VarId>,
        stride: usize,
        pad: usize,
    ) -> VarId {
        let bias = b.map(|bid| {
            self.nodes[bid.0]
                .value
                .view()
                .into_dimensionality()
                .expect("bias must be 1-d")
                .to_owned()
        });
        let v = conv::conv2d_forward(
            &as4(&self.nodes[x.0].value),
            &as4(&self.nodes[w.0].value),
            bias.as_ref(),
            stride,
            pad,
        );
        self.push(v.into_dyn(), Op::Conv2d { x, w, b, stride, pad })
    }

    pub fn dense(&mut self, x: VarId, w: VarId, b: Option<VarId>) -> VarId {
        let xv: ndarray::ArrayView2<f64> = self.nodes[x.0]
            .value
            .view()
            .into_dimensionality()
            .expect("dense input must be 2-d");
        let wv: ndarray::ArrayView2<f64> = self.nodes[w.0]
            .value
            .view()
            .into_dimensionality()
            .expect("dense weight must be 2-d");
        let mut y = xv.dot(&wv.t());
        if let Some(bid) = b {
            let bv: ndarray::ArrayView1<f64> = self.nodes[bid.0]
                .value
                .view()
                .into_dimensionality()
                .expect("bias must be 1-d");
            y += &bv;
        }
        self.push(y.into_dyn(), Op::Dense { x, w, b })
    }

    pub fn instance_norm(&mut self, x: VarId, gamma: VarId, beta: VarId) -> VarId {
        const EPS: f64 = 1e-5;
        let xv = as4(&self.nodes[x.0].value);
        let (bsz, c, h, w) = xv.dim();
        let n = (h * w) as f64;
        let mut mean = Array2::zeros((bsz, c));
        let mut inv_std = Array2::zeros((bsz, c));
        let mut out = Array4::zeros((bsz, c, h, w));
        let gv: ndarray::ArrayView1<f64> = self.nodes[gamma.0]
            .value
            .view()
            .into_dimensionality()
            .expect("gamma must be 1-d");
        let bv: ndarray::ArrayView1<f64> = self.nodes[beta.0]
            .value
            .view()
            .into_dimensionality()
            .expect("beta must be 1-d");
        for bi in 0..bsz {
            for ci in 0..c {
                let plane = xv.slice(ndarray::s![bi, ci, .., ..]);
                let m = plane.sum() / n;
                let var = plane.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
                let inv = 1.0 / (var + EPS).sqrt();
                mean[[bi, ci]] = m;
                inv_std[[bi, ci]] = inv;
                let (g, bb) = (gv[ci], bv[ci]);
                let mut dst = out.slice_mut(ndarray::s![bi, ci, .., ..]);
                dst.assign(&plane.mapv(|v| g * (v - m) * inv + bb));
            }
        }
        self.push(
            out.into_dyn(),
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            },
        )
    }

    // ---- structure ops ----------------------------------------------------

    pub fn concat(&mut self, parts: &[VarId], axis: usize) -> VarId {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let v = ndarray::concatenate(Axis(axis), &views).expect("concat shape mismatch");
        // concatenate along interior axes yields a non-standard layout
        let v = if v.is_standard_layout() {
            v
        } else {
            v.as_standard_layout().to_owned()
        };
        self.push(
            v,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        )
    }

    pub fn reshape(&mut self, x: VarId, shape: &[usize]) -> VarId {
        let v = self.nodes[x.0]
            .value
            .view()
            .to_shape(IxDyn(shape))
            .expect("reshape size mismatch")
            .to_owned();
        self.push(v, Op::Reshape(x))
    }

    pub fn nearest_up2(&mut self, x: VarId) -> VarId {
        let v = resize::nearest_up2(&as4(&self.nodes[x.0].value).to_owned());
        self.push(v.into_dyn(), Op::NearestUp2(x))
    }

    pub fn bilinear_up2(&mut self, x: VarId) -> VarId {
        let v = resize::bilinear_up2(&as4(&self.nodes[x.0].value).to_owned());
        self.push(v.into_dyn(), Op::BilinearUp2(x))
    }

    pub fn avg_pool2(&mut self, x: VarId) -> VarId {
        let v = resize::avg_pool2(&as4(&self.nodes[x.0].value).to_owned());
        self.push(v.into_dyn(), Op::AvgPool2(x))
    }

    /// Extract one rectangle per sample; all rectangles share a size.
    pub fn crop_nchw(&mut self, x: VarId, rects: &[Rect]) -> VarId {
        let xv = as4(&self.nodes[x.0].value);
        let (bsz, c, _, _) = xv.dim();
        assert_eq!(bsz, rects.len(), "one rect per sample");
        let (rh, rw) = (rects[0].height, rects[0].width);
        assert!(rects.iter().all(|r| r.height == rh && r.width == rw));
        let mut out = Array4::zeros((bsz, c, rh, rw));
        for (b, r) in rects.iter().enumerate() {
            out.index_axis_mut(Axis(0), b).assign(&xv.slice(ndarray::s![
                b,
                ..,
                r.top..r.bottom(),
                r.left..r.right()
            ]));
        }
        self.push(
            out.into_dyn(),
            Op::CropNchw {
                x,
                rects: rects.to_vec(),
            },
        )
    }

    /// Paste one patch per sample into `base` at the given rectangles.
    pub fn paste_nchw(&mut self, base: VarId, patch: VarId, rects: &[Rect]) -> VarId {
        let mut out = as4(&self.nodes[base.0].value).to_owned();
        let pv = as4(&self.nodes[patch.0].value);
        assert_eq!(out.dim().0, rects.len());
        for (b, r) in rects.iter().enumerate() {
            out.slice_mut(ndarray::s![b, .., r.top..r.bottom(), r.left..r.right()])
                .assign(&pv.index_axis(Axis(0), b));
        }
        self.push(
            out.into_dyn(),
            Op::PasteNchw {
                base,
                patch,
                rects: rects.to_vec(),
            },
        )
    }

    /// Rows `start..start+len` along the batch axis.
    pub fn slice_batch(&mut self, x: VarId, start: usize, len: usize) -> VarId {
        let v = self.nodes[x.0]
            .value
            .slice_axis(Axis(0), ndarray::Slice::from(start..start + len))
            .to_owned();
        self.push(v, Op::SliceBatch { x, start })
    }

    /// Broadcast `(B, D)` codes onto a `(B, D, h, w)` spatial grid.
    pub fn broadcast_spatial(&mut self, x: VarId, h: usize, w: usize) -> VarId {
        let xv: ndarray::ArrayView2<f64> = self.nodes[x.0]
            .value
            .view()
            .into_dimensionality()
            .expect("broadcast input must be 2-d");
        let (bsz, d) = xv.dim();
        let mut out = Array4::zeros((bsz, d, h, w));
        for b in 0..bsz {
            for di in 0..d {
                out.slice_mut(ndarray::s![b, di, .., ..]).fill(xv[[b, di]]);
            }
        }
        self.push(out.into_dyn(), Op::BroadcastSpatial(x))
    }

    /// Divide a weight by its top singular value, estimated as `u' W v` with
    /// the power-iteration vectors held constant. Degenerate (near-zero)
    /// weights pass through unchanged.
    pub fn spectral_scale(&mut self, w: VarId, u: &Array1<f64>, v: &Array1<f64>) -> VarId {
        let wv = &self.nodes[w.0].value;
        let wview = wv.view();
        let flat = wview
            .to_shape((u.len(), v.len()))
            .expect("weight/state size mismatch");
        let sigma = u.dot(&flat.dot(v));
        let value = if sigma.abs() < 1e-12 {
            wv.clone()
        } else {
            wv.mapv(|x| x / sigma)
        };
        self.push(
            value,
            Op::SpectralScale {
                w,
                u: u.clone(),
                v: v.clone(),
                sigma,
            },
        )
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep from a scalar root. Leaf gradients stay on the tape and
    /// can be read with `grad`.
    pub fn backward(&mut self, root: VarId) {
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward needs a scalar");
        self.nodes[root.0].grad = Some(ArrayD::from_elem(IxDyn(&[1]), 1.0));
        for i in (0..=root.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            self.backprop_node(i, g);
        }
    }

    fn backprop_node(&mut self, i: usize, g: ArrayD<f64>) {
        match &self.nodes[i].op {
            Op::Leaf => unreachable!(),
            &Op::Add(a, b) => {
                self.add_grad(a, g.clone());
                self.add_grad(b, g);
            }
            &Op::Sub(a, b) => {
                self.add_grad(a, g.clone());
                self.add_grad(b, g.mapv(|x| -x));
            }
            &Op::Mul(a, b) => {
                let da = &g * &self.nodes[b.0].value;
                let db = &g * &self.nodes[a.0].value;
                self.add_grad(a, da);
                self.add_grad(b, db);
            }
            &Op::Scale(a, k) => {
                self.add_grad(a, g.mapv(|x| x * k));
            }
            &Op::MeanAll(a) => {
                let n = self.nodes[a.0].value.len() as f64;
                let gv = g[[0]] / n;
                let da = ArrayD::from_elem(self.nodes[a.0].value.raw_dim(), gv);
                self.add_grad(a, da);
            }
            &Op::L1Mean(a) => {
                let n = self.nodes[a.0].value.len() as f64;
                let gv = g[[0]] / n;
                let da = self.nodes[a.0].value.mapv(|x| gv * x.signum());
                self.add_grad(a, da);
            }
            &Op::Log(a) => {
                let da = &g / &self.nodes[a.0].value;
                self.add_grad(a, da);
            }
            &Op::Clamp(a, lo, hi) => {
                let mut da = g;
                ndarray::Zip::from(&mut da)
                    .and(&self.nodes[a.0].value)
                    .for_each(|d, &x| {
                        if x <= lo || x >= hi {
                            *d = 0.0;
                        }
                    });
                self.add_grad(a, da);
            }
            &Op::Relu(a) => {
                let mut da = g;
                ndarray::Zip::from(&mut da)
                    .and(&self.nodes[a.0].value)
                    .for_each(|d, &x| {
                        if x <= 0.0 {
                            *d = 0.0;
                        }
                    });
                self.add_grad(a, da);
            }
            &Op::LeakyRelu(a, slope) => {
                let mut da = g;
                ndarray::Zip::from(&mut da)
                    .and(&self.nodes[a.0].value)
                    .for_each(|d, &x| {
                        if x <= 0.0 {
                            *d *= slope;
                        }
                    });
                self.add_grad(a, da);
            }
            &Op::Tanh(a) => {
                let da = &g * &self.nodes[i].value.mapv(|y| 1.0 - y * y);
                self.add_grad(a, da);
            }
            &Op::Sigmoid(a) => {
                let da = &g * &self.nodes[i].value.mapv(|y| y * (1.0 - y));
                self.add_grad(a, da);
            }
            &Op::Conv2d { x, w, b, stride, pad } => {
                let (dx, dw, db) = conv::conv2d_backward(
                    &as4(&self.nodes[x.0].value),
                    &as4(&self.nodes[w.0].value),
                    &as4(&g),
                    stride,
                    pad,
                );
                self.add_grad(x, dx.into_dyn());
                self.add_grad(w, dw.into_dyn());
                if let Some(bid) = b {
                    self.add_grad(bid, db.into_dyn());
                }
            }
            &Op::Dense { x, w, b } => {
                let gv: ndarray::ArrayView2<f64> =
                    g.view().into_dimensionality().expect("dense grad 2-d");
                let xv: ndarray::ArrayView2<f64> = self.nodes[x.0]
                    .value
                    .view()
                    .into_dimensionality()
                    .unwrap();
                let wv: ndarray::ArrayView2<f64> = self.nodes[w.0]
                    .value
                    .view()
                    .into_dimensionality()
                    .unwrap();
                let dx = gv.dot(&wv);
                let dw = gv.t().dot(&xv);
                self.add_grad(x, dx.into_dyn());
                self.add_grad(w, dw.into_dyn());
                if let Some(bid) = b {
                    let db = gv.sum_axis(Axis(0));
                    self.add_grad(bid, db.into_dyn());
                }
            }
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let (mean, inv_std) = (mean.clone(), inv_std.clone());
                let gv = as4(&g).to_owned();
                let xv = as4(&self.nodes[x.0].value).to_owned();
                let gammav: Array1<f64> = self.nodes[gamma.0]
                    .value
                    .view()
                    .into_dimensionality::<ndarray::Ix1>()
                    .unwrap()
                    .to_owned();
                let (bsz, c, h, w) = xv.dim();
                let n = (h * w) as f64;
                let mut dx = Array4::zeros((bsz, c, h, w));
                let mut dgamma = Array1::zeros(c);
                let mut dbeta = Array1::zeros(c);
                for bi in 0..bsz {
                    for ci in 0..c {
                        let m = mean[[bi, ci]];
                        let inv = inv_std[[bi, ci]];
                        let plane = xv.slice(ndarray::s![bi, ci, .., ..]);
                        let gp = gv.slice(ndarray::s![bi, ci, .., ..]);
                        let xhat = plane.mapv(|v| (v - m) * inv);
                        let sum_g = gp.sum();
                        let sum_gx = (&gp * &xhat).sum();
                        dgamma[ci] += sum_gx;
                        dbeta[ci] += sum_g;
                        let k = gammav[ci] * inv / n;
                        let mut dst = dx.slice_mut(ndarray::s![bi, ci, .., ..]);
                        ndarray::Zip::from(&mut dst)
                            .and(&gp)
                            .and(&xhat)
                            .for_each(|d, &gi, &xh| {
                                *d = k * (n * gi - sum_g - xh * sum_gx);
                            });
                    }
                }
                self.add_grad(x, dx.into_dyn());
                self.add_grad(gamma, dgamma.into_dyn());
                self.add_grad(beta, dbeta.into_dyn());
            }
            Op::Concat { parts, axis } => {
                let parts = parts.clone();
                let axis = *axis;
                let mut offset = 0;
                for p in parts {
                    let len = self.nodes[p.0].value.shape()[axis];
                    let slice = g
                        .slice_axis(Axis(axis), ndarray::Slice::from(offset..offset + len))
                        .to_owned();
                    self.add_grad(p, slice);
                    offset += len;
                }
            }
            &Op::Reshape(x) => {
                let shape = self.nodes[x.0].value.raw_dim();
                let dx = g.to_shape(shape).expect("reshape grad").to_owned();
                self.add_grad(x, dx);
            }
            &Op::NearestUp2(x) => {
                let dx = resize::nearest_up2_backward(&as4(&g).to_owned());
                self.add_grad(x, dx.into_dyn());
            }
            &Op::BilinearUp2(x) => {
                let dx = resize::bilinear_up2_backward(&as4(&g).to_owned());
                self.add_grad(x, dx.into_dyn());
            }
            &Op::AvgPool2(x) => {
                let dx = resize::avg_pool2_backward(&as4(&g).to_owned());
                self.add_grad(x, dx.into_dyn());
            }
            Op::CropNchw { x, rects } => {
                let (x, rects) = (*x, rects.clone());
                let gv = as4(&g);
                let mut dx = Array4::zeros(as4(&self.nodes[x.0].value).raw_dim());
                for (b, r) in rects.iter().enumerate() {
                    let mut dst =
                        dx.slice_mut(ndarray::s![b, .., r.top..r.bottom(), r.left..r.right()]);
                    dst += &gv.index_axis(Axis(0), b);
                }
                self.add_grad(x, dx.into_dyn());
            }
            Op::PasteNchw { base, patch, rects } => {
                let (base, patch, rects) = (*base, *patch, rects.clone());
                let mut dbase = as4(&g).to_owned();
                let (bsz, c, _, _) = as4(&self.nodes[patch.0].value).dim();
                let (rh, rw) = (rects[0].height, rects[0].width);
                let mut dpatch = Array4::zeros((bsz, c, rh, rw));
                for (b, r) in rects.iter().enumerate() {
                    {
                        let src =
                            dbase.slice(ndarray::s![b, .., r.top..r.bottom(), r.left..r.right()]);
                        dpatch.index_axis_mut(Axis(0), b).assign(&src);
                    }
                    dbase
                        .slice_mut(ndarray::s![b, .., r.top..r.bottom(), r.left..r.right()])
                        .fill(0.0);
                }
                self.add_grad(base, dbase.into_dyn());
                self.add_grad(patch, dpatch.into_dyn());
            }
            &Op::SliceBatch { x, start } => {
                let mut dx = ArrayD::zeros(self.nodes[x.0].value.raw_dim());
                let len = g.shape()[0];
                dx.slice_axis_mut(Axis(0), ndarray::Slice::from(start..start + len))
                    .assign(&g);
                self.add_grad(x, dx);
            }
            &Op::BroadcastSpatial(x) => {
                let gv = as4(&g);
                let dx = gv.sum_axis(Axis(3)).sum_axis(Axis(2));
                self.add_grad(x, dx.into_dyn());
            }
            Op::SpectralScale { w, u, v, sigma } => {
                let (w, sigma) = (*w, *sigma);
                if sigma.abs() < 1e-12 {
                    self.add_grad(w, g);
                } else {
                    let wraw = &self.nodes[w.0].value;
                    let inner: f64 = g.iter().zip(wraw.iter()).map(|(a, b)| a * b).sum();
                    let (u, v) = (u.clone(), v.clone());
                    let shape = wraw.raw_dim();
                    let mut dw = g.mapv(|x| x / sigma);
                    let coef = inner / (sigma * sigma);
                    let flat = dw.view_mut().into_shape_with_order((u.len(), v.len()));
                    let mut flat = flat.expect("weight flatten");
                    for r in 0..u.len() {
                        for cidx in 0..v.len() {
                            flat[[r, cidx]] -= coef * u[r] * v[cidx];
                        }
                    }
                    let _ = shape;
                    self.add_grad(w, dw);
                }
            }
        }
    }
}
