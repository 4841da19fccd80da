use super::layers::Parameterized;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..AdamConfig::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers follow the order of
/// `Parameterized::params`.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new<M: Parameterized + ?Sized>(cfg: AdamConfig, model: &M) -> Result<Self> {
        if !(cfg.lr > 0.0) {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", cfg.lr)));
        }
        if !(0.0..1.0).contains(&cfg.beta1) || !(0.0..1.0).contains(&cfg.beta2) || !(cfg.eps > 0.0) {
            return Err(Error::invalid("adam betas must be in [0, 1) and eps positive"));
        }
        let shapes: Vec<_> = model.params().iter().map(|(_, p)| p.value.shape()).collect();
        Ok(Adam {
            cfg,
            step: 0,
            m: shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect(),
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the current gradients. Gradients are left
    /// as they are.
    pub fn step<M: Parameterized + ?Sized>(&mut self, model: &mut M) {
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for ((_, p), (m, v)) in model.params_mut().into_iter().zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let g = p.grad.data();
            for (((x, g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g)
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *x -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::layers::Param;

    struct Scalar(Param);

    impl Parameterized for Scalar {
        fn params(&self) -> Vec<(String, &Param)> {
            vec![("x".into(), &self.0)]
        }
        fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
            vec![("x".into(), &mut self.0)]
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = Scalar(Param::zeros(1, 1));
        s.0.grad.data_mut()[0] = 1.0;
        let mut adam = Adam::new(AdamConfig::with_lr(0.1), &s).unwrap();
        adam.step(&mut s);
        assert!((s.0.value.data()[0] + 0.1).abs() < 1e-6, "{}", s.0.value.data()[0]);
        assert_eq!(s.0.grad.data()[0], 1.0);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut s = Scalar(Param::new(Tensor::row_vector(vec![0.5, -2.0])));
        let mut adam = Adam::new(AdamConfig::default(), &s).unwrap();
        for _ in 0..10 {
            adam.step(&mut s);
        }
        assert_eq!(s.0.value.data(), &[0.5, -2.0]);
    }

    #[test]
    fn nonpositive_lr_is_rejected() {
        let s = Scalar(Param::zeros(1, 1));
        assert!(Adam::new(AdamConfig::with_lr(0.0), &s).is_err());
        assert!(Adam::new(AdamConfig::with_lr(-1.0), &s).is_err());
    }

    #[test]
    fn identical_runs_are_bitwise_equal() {
        let run = || {
            let mut s = Scalar(Param::new(Tensor::row_vector(vec![1.0, 2.0, 3.0])));
            let mut adam = Adam::new(AdamConfig::with_lr(0.01), &s).unwrap();
            for k in 0..20 {
                let vals: Vec<f64> = s.0.value.data().to_vec();
                for (g, x) in s.0.grad.data_mut().iter_mut().zip(vals) {
                    *g = 2.0 * x + k as f64 * 0.01;
                }
                adam.step(&mut s);
            }
            s.0.value
        };
        assert_eq!(run(), run());
    }
}
