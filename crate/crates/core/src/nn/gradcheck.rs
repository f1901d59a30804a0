//! Central finite-difference verification of hand-written backward passes.
//!
//! For every trainable parameter group the harness compares the analytic
//! gradient against `(f(θ + h) − f(θ − h)) / 2h` on a seeded sample of
//! coordinates and reports the norm-wise relative error
//! `‖g_analytic − g_numeric‖ / max(‖g_analytic‖, ‖g_numeric‖, floor)`.
//! The floor keeps groups whose true gradient is zero (such as key biases
//! under softmax) from failing on round-off alone.

use rand::seq::index::sample;

use super::rng::stream;
use super::{HasParams, Real};
use crate::error::{Error, Result};

/// A scalar-valued computation whose parameters (and any inputs under test,
/// exposed as trainable parameters) can be perturbed by name.
pub trait Differentiable<T: Real>: HasParams<T> {
    /// Objective value at the current parameters.
    fn objective(&self) -> Result<T>;

    /// Runs forward and backward, accumulating gradients into the
    /// parameters. Gradients are zeroed by the caller.
    fn backward(&mut self) -> Result<T>;
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tol: f64,
    pub seed: u64,
    /// Coordinates checked per parameter group; larger groups are subsampled.
    pub max_coords: usize,
    /// Lower bound on the denominator of the relative error.
    pub abs_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-3,
            tol: 1e-4,
            seed: 0,
            max_coords: 24,
            abs_floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradEntry {
    pub name: String,
    pub checked: usize,
    pub rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub entries: Vec<GradEntry>,
    pub tol: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.rel_error < self.tol)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &GradEntry> {
        self.entries.iter().filter(|e| e.rel_error >= self.tol)
    }
}

fn perturb<T: Real, D: Differentiable<T>>(op: &mut D, group: usize, idx: usize, value: T) -> T {
    let mut params = op.params_mut();
    let slot = &mut params[group].1.value.data_mut()[idx];
    std::mem::replace(slot, value)
}

pub fn gradcheck<T: Real, D: Differentiable<T>>(op: &mut D, cfg: &GradCheckConfig) -> Result<GradReport> {
    op.zero_grad();
    op.backward()?;

    let groups: Vec<(String, Vec<T>)> = op
        .params()
        .into_iter()
        .map(|(name, p)| (name, if p.trainable { p.grad.data().to_vec() } else { Vec::new() }))
        .collect();

    let h = T::lit(cfg.step);
    let mut entries = Vec::new();
    for (gi, (name, analytic)) in groups.iter().enumerate() {
        if analytic.is_empty() {
            continue;
        }
        if let Some(bad) = analytic.iter().find(|g| !g.is_finite()) {
            return Err(Error::Gradient(format!("{name}: non-finite analytic gradient {bad}")));
        }
        let mut rng = stream(cfg.seed, name);
        let coords: Vec<usize> = if analytic.len() <= cfg.max_coords {
            (0..analytic.len()).collect()
        } else {
            let mut c = sample(&mut rng, analytic.len(), cfg.max_coords).into_vec();
            c.sort_unstable();
            c
        };
        let (mut diff2, mut a2, mut n2, mut max_abs) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        for &i in &coords {
            let orig = perturb(op, gi, i, T::zero());
            perturb(op, gi, i, orig + h);
            let plus = op.objective()?;
            perturb(op, gi, i, orig - h);
            let minus = op.objective()?;
            perturb(op, gi, i, orig);
            let numeric = ((plus - minus) / (h + h)).as_f64();
            let a = analytic[i].as_f64();
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
            max_abs = max_abs.max((a - numeric).abs());
        }
        let denom = a2.sqrt().max(n2.sqrt()).max(cfg.abs_floor);
        let rel_error = if denom == 0.0 { 0.0 } else { diff2.sqrt() / denom };
        entries.push(GradEntry {
            name: name.clone(),
            checked: coords.len(),
            rel_error,
            max_abs_error: max_abs,
        });
    }
    Ok(GradReport {
        entries,
        tol: cfg.tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::rng::uniform;
    use crate::nn::{Linear, Parameter, Tensor};

    struct SumOfLinear {
        layer: Linear<f64>,
        x: Parameter<f64>,
        flip: bool,
    }

    impl HasParams<f64> for SumOfLinear {
        fn params(&self) -> Vec<(String, &Parameter<f64>)> {
            let mut v = self.layer.params();
            v.push(("input".into(), &self.x));
            v
        }
        fn params_mut(&mut self) -> Vec<(String, &mut Parameter<f64>)> {
            let mut v = self.layer.params_mut();
            v.push(("input".into(), &mut self.x));
            v
        }
    }

    impl Differentiable<f64> for SumOfLinear {
        fn objective(&self) -> Result<f64> {
            Ok(self.layer.forward(&self.x.value)?.sum())
        }
        fn backward(&mut self) -> Result<f64> {
            let y = self.layer.forward(&self.x.value)?;
            let sign = if self.flip { -1.0 } else { 1.0 };
            let dy = Tensor::full(y.shape(), sign);
            let dx = self.layer.backward(&self.x.value, &dy);
            self.x.accumulate(dx.data());
            Ok(y.sum())
        }
    }

    fn op(seed: u64, flip: bool) -> SumOfLinear {
        let mut rng = stream(seed, "gc-linear");
        SumOfLinear {
            layer: Linear::new(3, 4, &mut rng),
            x: Parameter::new(uniform(&[2, 3], 1.0, &mut rng)),
            flip,
        }
    }

    #[test]
    fn linear_layer_passes() {
        let report = gradcheck(&mut op(1, false), &GradCheckConfig { seed: 1, ..Default::default() }).unwrap();
        assert!(report.passed(), "{report:?}");
        assert_eq!(report.entries.len(), 3);
    }

    #[test]
    fn sign_flipped_backward_fails_loudly() {
        let report = gradcheck(&mut op(1, true), &GradCheckConfig::default()).unwrap();
        assert!(!report.passed());
        assert!(report.max_rel_error() > 1e-1);
    }

    #[test]
    fn non_finite_gradient_is_an_error() {
        struct Nan(Parameter<f64>);
        impl HasParams<f64> for Nan {
            fn params(&self) -> Vec<(String, &Parameter<f64>)> {
                vec![("p".into(), &self.0)]
            }
            fn params_mut(&mut self) -> Vec<(String, &mut Parameter<f64>)> {
                vec![("p".into(), &mut self.0)]
            }
        }
        impl Differentiable<f64> for Nan {
            fn objective(&self) -> Result<f64> {
                Ok(0.0)
            }
            fn backward(&mut self) -> Result<f64> {
                self.0.accumulate(&[f64::NAN]);
                Ok(0.0)
            }
        }
        let mut op = Nan(Parameter::new(Tensor::zeros(&[1])));
        assert!(matches!(
            gradcheck(&mut op, &GradCheckConfig::default()),
            Err(Error::Gradient(_))
        ));
    }
}
