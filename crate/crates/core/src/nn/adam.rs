use std::collections::BTreeMap;

use ndarray::{ArrayD, Zip};

use super::{cast, Param, Real};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive-moment optimizer keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub first: BTreeMap<String, ArrayD<T>>,
    pub second: BTreeMap<String, ArrayD<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    /// Start a new step; call [`Adam::update`] for every parameter afterwards.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn update(&mut self, name: &str, param: &mut Param<T>, lr: f64) {
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.step.max(1) as i32;
        let m = self
            .first
            .entry(name.to_string())
            .or_insert_with(|| ArrayD::zeros(param.value.raw_dim()));
        let v = self
            .second
            .entry(name.to_string())
            .or_insert_with(|| ArrayD::zeros(param.value.raw_dim()));
        let (b1, b2): (T, T) = (cast(beta1), cast(beta2));
        let c1: T = cast(1.0 - beta1.powi(t));
        let c2: T = cast(1.0 - beta2.powi(t));
        let lr: T = cast(lr);
        let eps: T = cast(eps);
        Zip::from(&mut param.value)
            .and(&param.grad)
            .and(m)
            .and(v)
            .for_each(|p, &g, m, v| {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            });
    }
}
