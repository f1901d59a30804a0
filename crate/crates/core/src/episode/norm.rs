//! Per-dimension action normalization into `[-1, 1]` and 256-bin
//! discretization.

use serde::{Deserialize, Serialize};

use super::{Action, ACTION_DIM};
use crate::error::{Error, Result};

pub const ACTION_BINS: usize = 256;

/// Robust per-dimension bounds: the 1st and 99th percentiles of the raw
/// actions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub low: [f32; ACTION_DIM],
    pub high: [f32; ACTION_DIM],
}

impl NormStats {
    pub fn new(low: [f32; ACTION_DIM], high: [f32; ACTION_DIM]) -> Result<Self> {
        for d in 0..ACTION_DIM {
            if !(low[d] < high[d]) {
                return Err(Error::DegenerateStats(format!(
                    "dimension {d}: low {} is not below high {}",
                    low[d], high[d]
                )));
            }
        }
        Ok(Self { low, high })
    }

    /// `low` followed by `high`, the manifest layout.
    pub fn to_flat(&self) -> Vec<f32> {
        self.low.iter().chain(&self.high).copied().collect()
    }

    pub fn from_flat(v: &[f32]) -> Result<Self> {
        if v.len() != 2 * ACTION_DIM {
            return Err(Error::Format(format!("norm stats need 14 values, got {}", v.len())));
        }
        Self::new(v[..ACTION_DIM].try_into().unwrap(), v[ACTION_DIM..].try_into().unwrap())
    }
}

/// Linear-interpolated percentile of an ascending slice, `q` in `[0, 1]`.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// 1st/99th percentile per dimension. Falls back to min/max when the
/// percentiles coincide but the dimension is not constant.
pub fn compute_norm_stats<'a>(actions: impl IntoIterator<Item = &'a Action>) -> Result<NormStats> {
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); ACTION_DIM];
    for a in actions {
        for d in 0..ACTION_DIM {
            columns[d].push(a[d] as f64);
        }
    }
    if columns[0].is_empty() {
        return Err(Error::DegenerateStats("no actions".into()));
    }
    let mut low = [0.0f32; ACTION_DIM];
    let mut high = [0.0f32; ACTION_DIM];
    for (d, col) in columns.iter_mut().enumerate() {
        col.sort_by(f64::total_cmp);
        let (min, max) = (col[0], col[col.len() - 1]);
        if min == max {
            return Err(Error::DegenerateStats(format!("dimension {d} is constant at {min}")));
        }
        let (mut lo, mut hi) = (percentile(col, 0.01) as f32, percentile(col, 0.99) as f32);
        if !(lo < hi) {
            lo = min as f32;
            hi = max as f32;
        }
        low[d] = lo;
        high[d] = hi;
    }
    NormStats::new(low, high)
}

pub fn normalize_action(a: &Action, s: &NormStats) -> Action {
    let mut out = [0.0; ACTION_DIM];
    for d in 0..ACTION_DIM {
        let (lo, hi) = (s.low[d] as f64, s.high[d] as f64);
        let v = 2.0 * (a[d] as f64 - lo) / (hi - lo) - 1.0;
        out[d] = v.clamp(-1.0, 1.0) as f32;
    }
    out
}

pub fn denormalize_action(a: &Action, s: &NormStats) -> Action {
    let mut out = [0.0; ACTION_DIM];
    for d in 0..ACTION_DIM {
        let (lo, hi) = (s.low[d] as f64, s.high[d] as f64);
        out[d] = ((a[d] as f64 + 1.0) * 0.5 * (hi - lo) + lo) as f32;
    }
    out
}

/// Half-open bins over `[-1, 1]` with the top edge folded into bin 255.
pub fn discretize_action(a: &Action) -> [u8; ACTION_DIM] {
    let mut out = [0u8; ACTION_DIM];
    for d in 0..ACTION_DIM {
        let v = (a[d] as f64).clamp(-1.0, 1.0);
        let bin = ((v + 1.0) / 2.0 * ACTION_BINS as f64).floor() as usize;
        out[d] = bin.min(ACTION_BINS - 1) as u8;
    }
    out
}

/// Bin centers `-1 + (bin + 0.5) / 128`.
pub fn undiscretize_action(bins: &[u8; ACTION_DIM]) -> Action {
    let mut out = [0.0; ACTION_DIM];
    for d in 0..ACTION_DIM {
        out[d] = (-1.0 + (bins[d] as f64 + 0.5) / (ACTION_BINS as f64 / 2.0)) as f32;
    }
    out
}
