use std::collections::BTreeMap;

use super::{Parameter, Real};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self::with_lr(1e-3)
    }
}

#[derive(Clone, Debug)]
struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
}

/// Bias-corrected adaptive-moment optimizer state, keyed by parameter name.
#[derive(Clone, Debug)]
pub struct OptimizerState<T: Real = f32> {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, Moments<T>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable parameter. Frozen parameters
    /// are skipped entirely and keep their exact bits.
    pub fn step(&mut self, params: Vec<(String, &mut Parameter<T>)>) {
        self.step += 1;
        let t = self.step as i32;
        let c = self.config;
        let bc1 = T::lit(1.0 - c.beta1.powi(t));
        let bc2 = T::lit(1.0 - c.beta2.powi(t));
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (lr, eps) = (T::lit(c.lr), T::lit(c.eps));
        for (name, p) in params {
            if !p.trainable {
                continue;
            }
            let n = p.len();
            let mom = self.moments.entry(name).or_insert_with(|| Moments {
                m: vec![T::zero(); n],
                v: vec![T::zero(); n],
            });
            assert_eq!(mom.m.len(), n, "parameter changed shape between steps");
            let grads = p.grad.data().to_vec();
            for (i, (w, g)) in p.value.data_mut().iter_mut().zip(grads).enumerate() {
                let m = b1 * mom.m[i] + (T::one() - b1) * g;
                let v = b2 * mom.v[i] + (T::one() - b2) * g * g;
                mom.m[i] = m;
                mom.v[i] = v;
                let mhat = m / bc1;
                let vhat = v / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
