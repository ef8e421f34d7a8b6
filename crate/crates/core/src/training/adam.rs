//! Adam with per-parameter moment estimates, keyed by parameter name so the
//! full state round-trips through checkpoints.

use std::collections::BTreeMap;

use ndarray::{ArrayD, ArrayViewD};

use crate::networks::ParamTensor;

const EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamSlot {
    pub m: ArrayD<f64>,
    pub v: ArrayD<f64>,
    pub t: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub state: BTreeMap<String, AdamSlot>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64) -> Self {
        Adam {
            beta1,
            beta2,
            state: BTreeMap::new(),
        }
    }

    pub fn update(&mut self, name: &str, param: &mut ParamTensor, grad: ArrayViewD<f64>, lr: f64) {
        let slot = self.state.entry(name.to_string()).or_insert_with(|| AdamSlot {
            m: ArrayD::zeros(param.data.raw_dim()),
            v: ArrayD::zeros(param.data.raw_dim()),
            t: 0,
        });
        slot.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        ndarray::Zip::from(&mut slot.m).and(&grad).for_each(|m, &g| {
            *m = b1 * *m + (1.0 - b1) * g;
        });
        ndarray::Zip::from(&mut slot.v).and(&grad).for_each(|v, &g| {
            *v = b2 * *v + (1.0 - b2) * g * g;
        });
        let c1 = 1.0 - b1.powi(slot.t as i32);
        let c2 = 1.0 - b2.powi(slot.t as i32);
        ndarray::Zip::from(&mut param.data)
            .and(&slot.m)
            .and(&slot.v)
            .for_each(|p, &m, &v| {
                *p -= lr * (m / c1) / ((v / c2).sqrt() + EPS);
            });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut adam = Adam::new(0.5, 0.999);
        let mut p = ParamTensor {
            data: ArrayD::zeros(IxDyn(&[2])),
        };
        let g = ArrayD::from_shape_vec(IxDyn(&[2]), vec![1.0, -2.0]).unwrap();
        adam.update("p", &mut p, g.view(), 0.1);
        // bias-corrected first step is lr * g / (|g| + eps) = lr * sign(g)
        assert!((p.data[[0]] + 0.1).abs() < 1e-6);
        assert!((p.data[[1]] - 0.1).abs() < 1e-6);
        assert_eq!(adam.state["p"].t, 1);
    }

    #[test]
    fn converges_on_quadratic() {
        let mut adam = Adam::new(0.5, 0.999);
        let mut p = ParamTensor {
            data: ArrayD::from_elem(IxDyn(&[1]), 5.0),
        };
        for _ in 0..2000 {
            let g = p.data.mapv(|x| 2.0 * x);
            adam.update("p", &mut p, g.view(), 0.01);
        }
        assert!(p.data[[0]].abs() < 0.05, "landed at {}", p.data[[0]]);
    }
}
