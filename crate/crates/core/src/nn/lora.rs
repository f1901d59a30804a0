//! Low-rank additive adapters for frozen linear layers.
//!
//! An adapter contributes `(alpha / rank) · x · downᵀ · upᵀ`. `up` starts at
//! zero, so attaching an adapter leaves the wrapped layer's output unchanged
//! until the first update.

use rand::Rng;

use super::rng::uniform;
use super::tensor::{gemm_nn_acc, gemm_nt, gemm_tn_acc};
use super::{HasParams, Linear, Parameter, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct LoraAdapter<T: Real = f32> {
    /// `rank × d_in`
    pub down: Parameter<T>,
    /// `d_out × rank`
    pub up: Parameter<T>,
    pub alpha: f64,
}

impl<T: Real> LoraAdapter<T> {
    pub fn new<R: Rng>(d_in: usize, d_out: usize, rank: usize, alpha: f64, rng: &mut R) -> Result<Self> {
        if rank == 0 || rank > d_in.min(d_out) {
            return Err(Error::Config(format!(
                "LoRA rank {rank} must lie in 1..={}",
                d_in.min(d_out)
            )));
        }
        let bound = (6.0 / (d_in + rank) as f64).sqrt();
        Ok(Self {
            down: Parameter::new(uniform(&[rank, d_in], bound, rng)),
            up: Parameter::new(Tensor::zeros(&[d_out, rank])),
            alpha,
        })
    }

    pub fn from_factors(down: Tensor<T>, up: Tensor<T>, alpha: f64) -> Result<Self> {
        let (r, _) = down.dims2()?;
        let (d_out, r2) = up.dims2()?;
        let d_in = down.cols();
        if r != r2 || r == 0 || r > d_in.min(d_out) {
            return Err(Error::Config(format!(
                "LoRA factors down {:?} / up {:?} are inconsistent",
                down.shape(),
                up.shape()
            )));
        }
        Ok(Self {
            down: Parameter::new(down),
            up: Parameter::new(up),
            alpha,
        })
    }

    pub fn rank(&self) -> usize {
        self.down.shape()[0]
    }

    pub fn d_in(&self) -> usize {
        self.down.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.up.shape()[0]
    }

    pub fn scale(&self) -> T {
        T::lit(self.alpha / self.rank() as f64)
    }

    /// Materialized weight delta `(alpha / rank) · up · down`, `d_out × d_in`.
    pub fn delta(&self) -> Tensor<T> {
        let (r, d_in, d_out) = (self.rank(), self.d_in(), self.d_out());
        let mut out = Tensor::zeros(&[d_out, d_in]);
        gemm_nn_acc(self.up.value.data(), self.down.value.data(), d_out, r, d_in, out.data_mut());
        let s = self.scale();
        out.data_mut().iter_mut().for_each(|v| *v *= s);
        out
    }

    /// Adds the adapter contribution for input `x` (`n × d_in`) into `y`.
    pub(crate) fn add_forward(&self, x: &[T], n: usize, y: &mut [T]) {
        let (r, d_in, d_out) = (self.rank(), self.d_in(), self.d_out());
        let mut u = vec![T::zero(); n * r];
        gemm_nt(x, self.down.value.data(), n, d_in, r, &mut u);
        let s = self.scale();
        u.iter_mut().for_each(|v| *v *= s);
        let mut delta = vec![T::zero(); n * d_out];
        gemm_nt(&u, self.up.value.data(), n, r, d_out, &mut delta);
        for (yi, di) in y.iter_mut().zip(&delta) {
            *yi += *di;
        }
    }

    /// Accumulates factor gradients and adds the input gradient into `dx`.
    pub(crate) fn backward(&mut self, x: &[T], dy: &[T], n: usize, dx: &mut [T]) {
        let (r, d_in, d_out) = (self.rank(), self.d_in(), self.d_out());
        let s = self.scale();
        let mut u = vec![T::zero(); n * r];
        gemm_nt(x, self.down.value.data(), n, d_in, r, &mut u);
        if self.up.trainable {
            let mut g = vec![T::zero(); d_out * r];
            gemm_tn_acc(dy, &u, n, d_out, r, &mut g);
            g.iter_mut().for_each(|v| *v *= s);
            self.up.accumulate(&g);
        }
        let mut du = vec![T::zero(); n * r];
        gemm_nn_acc(dy, self.up.value.data(), n, d_out, r, &mut du);
        du.iter_mut().for_each(|v| *v *= s);
        if self.down.trainable {
            let mut g = vec![T::zero(); r * d_in];
            gemm_tn_acc(&du, x, n, r, d_in, &mut g);
            self.down.accumulate(&g);
        }
        gemm_nn_acc(&du, self.down.value.data(), n, r, d_in, dx);
    }
}

impl<T: Real> HasParams<T> for LoraAdapter<T> {
    fn params(&self) -> Vec<(String, &Parameter<T>)> {
        vec![("down".into(), &self.down), ("up".into(), &self.up)]
    }
    fn params_mut(&mut self) -> Vec<(String, &mut Parameter<T>)> {
        vec![("down".into(), &mut self.down), ("up".into(), &mut self.up)]
    }
}

/// `base(x) + (alpha / rank) · x · downᵀ · upᵀ` for an adapter held outside
/// the layer.
pub fn lora_forward<T: Real>(base: &Linear<T>, adapter: &LoraAdapter<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    if adapter.d_in() != base.d_in() || adapter.d_out() != base.d_out() {
        return Err(Error::Config(format!(
            "adapter {}→{} does not fit layer {}→{}",
            adapter.d_in(),
            adapter.d_out(),
            base.d_in(),
            base.d_out()
        )));
    }
    let mut y = base.forward(x)?;
    adapter.add_forward(x.data(), x.rows(), y.data_mut());
    Ok(y)
}

/// Numerical rank by Gaussian elimination with partial pivoting.
///
/// A pivot counts when it exceeds `rel_tol` times the largest absolute entry.
pub fn matrix_rank(m: &Tensor<f64>, rel_tol: f64) -> usize {
    let (rows, cols) = m.dims2().expect("matrix");
    let mut a = m.data().to_vec();
    let scale = a.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    if scale == 0.0 {
        return 0;
    }
    let tol = scale * rel_tol;
    let mut rank = 0;
    for col in 0..cols {
        if rank == rows {
            break;
        }
        let (pivot, best) = (rank..rows)
            .map(|r| (r, a[r * cols + col].abs()))
            .fold((rank, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
        if best <= tol {
            continue;
        }
        for c in 0..cols {
            a.swap(rank * cols + c, pivot * cols + c);
        }
        let p = a[rank * cols + col];
        for r in rank + 1..rows {
            let f = a[r * cols + col] / p;
            if f != 0.0 {
                for c in col..cols {
                    a[r * cols + c] -= f * a[rank * cols + c];
                }
            }
        }
        rank += 1;
    }
    rank
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::rng::stream;

    #[test]
    fn rank_above_min_dim_is_rejected() {
        let err = LoraAdapter::<f32>::new(2, 3, 3, 1.0, &mut stream(0, "x")).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn fresh_adapter_is_bitwise_identity() {
        let mut rng = stream(11, "lora");
        let base = Linear::<f32>::new(5, 3, &mut rng);
        let adapter = LoraAdapter::new(5, 3, 2, 4.0, &mut rng).unwrap();
        let x = uniform::<f32, _>(&[4, 5], 1.0, &mut rng);
        let plain = base.forward(&x).unwrap();
        let adapted = lora_forward(&base, &adapter, &x).unwrap();
        let a: Vec<u32> = plain.data().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = adapted.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn rank_one_forced_arithmetic() {
        let w = Tensor::from_vec(&[2, 2], vec![1.0f64, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::zeros(&[2]);
        let base = Linear::from_parts(w, b).unwrap();
        let down = Tensor::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap();
        let up = Tensor::from_vec(&[2, 1], vec![1.0, 0.0]).unwrap();
        let adapter = LoraAdapter::from_factors(down, up, 1.0).unwrap();
        let x = Tensor::from_vec(&[1, 2], vec![2.0, 5.0]).unwrap();
        let y = lora_forward(&base, &adapter, &x).unwrap();
        // base(x) = [2, 5]; delta = [2, 0]
        assert_eq!(y.data(), &[4.0, 5.0]);
    }

    #[test]
    fn matches_materialized_delta() {
        let mut rng = stream(3, "lora-delta");
        let base = Linear::<f64>::new(6, 4, &mut rng);
        let mut adapter = LoraAdapter::new(6, 4, 2, 3.0, &mut rng).unwrap();
        adapter.up.value = uniform(&[4, 2], 0.5, &mut rng);
        let x = uniform::<f64, _>(&[3, 6], 1.0, &mut rng);

        let y = lora_forward(&base, &adapter, &x).unwrap();

        // Oracle: explicit Δ = up·down, then base(x) + (α/r)·x·Δᵀ by triple loop.
        let (up, down) = (adapter.up.value.data(), adapter.down.value.data());
        let mut delta = vec![0.0; 4 * 6];
        for o in 0..4 {
            for i in 0..6 {
                for k in 0..2 {
                    delta[o * 6 + i] += up[o * 2 + k] * down[k * 6 + i];
                }
            }
        }
        let base_y = base.forward(&x).unwrap();
        for n in 0..3 {
            for o in 0..4 {
                let mut acc = 0.0;
                for i in 0..6 {
                    acc += x.data()[n * 6 + i] * delta[o * 6 + i];
                }
                let want = base_y.data()[n * 4 + o] + 1.5 * acc;
                assert!((y.data()[n * 4 + o] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rank_of_known_matrices() {
        let eye = Tensor::from_vec(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(matrix_rank(&eye, 1e-9), 3);
        let outer = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 2.0, 4.0, 6.0]).unwrap();
        assert_eq!(matrix_rank(&outer, 1e-9), 1);
        assert_eq!(matrix_rank(&Tensor::zeros(&[2, 2]), 1e-9), 0);
    }
}
