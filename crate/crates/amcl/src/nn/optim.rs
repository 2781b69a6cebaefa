//! Optimizers. Vanilla SGD drives the encoder and classifier; Adam is used
//! only for GAN training.

use std::collections::BTreeMap;

use ndarray::ArrayD;

use super::Net;

/// Plain stochastic gradient descent, no momentum.
#[derive(Debug, Clone, Copy)]
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn new(lr: f64) -> Self {
        Sgd { lr }
    }

    pub fn step<N: Net + ?Sized>(&self, net: &mut N) {
        net.visit_params(&mut |p| {
            p.value.scaled_add(-self.lr, &p.grad);
        });
    }
}

/// Adam with bias correction. State is keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    state: BTreeMap<String, (ArrayD<f64>, ArrayD<f64>)>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn step<N: Net + ?Sized>(&mut self, net: &mut N) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let state = &mut self.state;
        net.visit_params(&mut |p| {
            let (m, v) = state
                .entry(p.name.clone())
                .or_insert_with(|| (ArrayD::zeros(p.value.raw_dim()), ArrayD::zeros(p.value.raw_dim())));
            ndarray::Zip::from(&mut p.value)
                .and(&p.grad)
                .and(&mut *m)
                .and(&mut *v)
                .for_each(|val, &g, mi, vi| {
                    *mi = b1 * *mi + (1.0 - b1) * g;
                    *vi = b2 * *vi + (1.0 - b2) * g * g;
                    let mhat = *mi / bc1;
                    let vhat = *vi / bc2;
                    *val -= lr * mhat / (vhat.sqrt() + eps);
                });
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Param, WeightInit};
    use crate::rng::stream;
    use ndarray::IxDyn;

    struct Quad {
        p: Param,
    }

    impl Net for Quad {
        fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
            f(&mut self.p);
        }
    }

    #[test]
    fn sgd_descends_a_quadratic() {
        let mut rng = stream(1, "sgd");
        let value = WeightInit::Normal(1.0).sample(&[8], 8, 8, &mut rng);
        let mut net = Quad {
            p: Param::new("q", value),
        };
        let sgd = Sgd::new(0.2);
        for _ in 0..200 {
            net.zero_grads();
            let g = net.p.value.clone();
            net.p.grad += &g; // d/dx of 0.5 x^2
            sgd.step(&mut net);
        }
        let norm: f64 = net.p.value.iter().map(|v| v * v).sum::<f64>();
        assert!(norm < 1e-10);
    }

    #[test]
    fn adam_descends_a_skewed_quadratic() {
        let mut net = Quad {
            p: Param::new("q", ndarray::ArrayD::from_elem(IxDyn(&[2]), 3.0)),
        };
        let scales = [100.0, 1.0];
        let mut adam = Adam::new(0.1, 0.9, 0.999);
        for _ in 0..500 {
            net.zero_grads();
            let g: Vec<f64> = net
                .p
                .value
                .iter()
                .zip(scales.iter())
                .map(|(v, s)| v * s)
                .collect();
            net.p.grad += &ndarray::ArrayD::from_shape_vec(IxDyn(&[2]), g).unwrap();
            adam.step(&mut net);
        }
        assert!(net.p.value.iter().all(|v| v.abs() < 1e-3));
    }
}
