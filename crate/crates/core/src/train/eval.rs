use serde::{Deserialize, Serialize};

use crate::annotate::{prompt_region, MaskPredictor};
use crate::episode::{denormalize_action, Action, NormStats, VisualPrompt, ACTION_DIM};
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::policy::Policy;
use crate::raster::{Image, Mask};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DimMetrics {
    pub mean: f64,
    pub p50: f64,
    pub p90: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub mean_l1: f64,
    pub per_dim: Vec<DimMetrics>,
}

/// Nearest-rank percentile of an ascending slice.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Sum in ascending order, so the result does not depend on sample order.
fn sorted_mean(sorted: &[f64]) -> f64 {
    if sorted.is_empty() {
        0.0
    } else {
        sorted.iter().sum::<f64>() / sorted.len() as f64
    }
}

impl EvalReport {
    pub fn from_residuals(preds: &[Tensor<f32>], targets: &[Tensor<f32>]) -> Self {
        let mut per_dim: Vec<Vec<f64>> = vec![Vec::new(); ACTION_DIM];
        for (p, t) in preds.iter().zip(targets) {
            for (i, (&a, &b)) in p.data().iter().zip(t.data()).enumerate() {
                per_dim[i % ACTION_DIM].push((a - b).abs() as f64);
            }
        }
        let mut all: Vec<f64> = per_dim.iter().flatten().copied().collect();
        all.sort_by(f64::total_cmp);
        let per_dim = per_dim
            .into_iter()
            .map(|mut r| {
                r.sort_by(f64::total_cmp);
                DimMetrics {
                    mean: sorted_mean(&r),
                    p50: percentile(&r, 0.5),
                    p90: percentile(&r, 0.9),
                }
            })
            .collect();
        Self {
            samples: preds.len(),
            mean_l1: sorted_mean(&all),
            per_dim,
        }
    }
}

/// One action chunk in the robot's units.
///
/// With prompts but no mask, `masks` segments the region the prompts cover
/// and its output conditions the policy. Predictions are clipped to the
/// normalized range before denormalization.
pub fn infer_action(
    policy: &Policy,
    stats: &NormStats,
    frame: &Image,
    instruction: &str,
    mask: Option<&Mask>,
    prompts: &[VisualPrompt],
    masks: Option<&dyn MaskPredictor>,
) -> Result<Vec<Action>> {
    let predicted;
    let mask = match (mask, prompts.is_empty()) {
        (Some(m), _) => Some(m),
        (None, true) => None,
        (None, false) => {
            let predictor =
                masks.ok_or_else(|| Error::Config("prompts without a mask need a mask predictor".into()))?;
            let region = prompt_region(prompts, frame.width(), frame.height())
                .ok_or_else(|| Error::Prompt("prompts cover no image region".into()))?;
            predicted = predictor.predict(frame, region)?.0;
            Some(&predicted)
        }
    };
    let chunk = policy.predict(frame, instruction, mask, prompts)?;
    Ok((0..chunk.rows())
        .map(|r| {
            let mut a: Action = [0.0; ACTION_DIM];
            for (d, &v) in a.iter_mut().zip(chunk.row(r)) {
                *d = v.clamp(-1.0, 1.0);
            }
            denormalize_action(&a, stats)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions_score_zero() {
        let t = vec![Tensor::full(&[8, 7], 0.3f32); 3];
        let r = EvalReport::from_residuals(&t, &t);
        assert_eq!(r.mean_l1, 0.0);
        assert!(r.per_dim.iter().all(|d| d.mean == 0.0 && d.p50 == 0.0 && d.p90 == 0.0));
    }

    #[test]
    fn percentiles_by_nearest_rank() {
        let v: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(percentile(&v, 0.5), 5.0);
        assert_eq!(percentile(&v, 0.9), 9.0);
        assert_eq!(percentile(&v[..1], 0.9), 1.0);
    }

    #[test]
    fn order_does_not_matter() {
        let preds: Vec<Tensor<f32>> = (0..5).map(|i| Tensor::full(&[2, 7], 0.1 * i as f32)).collect();
        let targets = vec![Tensor::full(&[2, 7], 0.33f32); 5];
        let a = EvalReport::from_residuals(&preds, &targets);
        let rev: Vec<_> = preds.iter().rev().cloned().collect();
        assert_eq!(a, EvalReport::from_residuals(&rev, &targets));
    }
}
