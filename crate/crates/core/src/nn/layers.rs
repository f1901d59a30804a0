use rand::Rng;

use super::param::scoped;
use super::rng::xavier_uniform;
use super::tensor::{gemm_nn_acc, gemm_nt, gemm_tn_acc};
use super::{HasParams, LoraAdapter, Parameter, Real, Tensor};
use crate::error::{Error, Result};

/// `y = x·Wᵀ + b`, row-wise. `w` is `d_out × d_in`, `b` has `d_out` entries.
pub fn linear_forward<T: Real>(w: &Tensor<T>, b: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let (d_out, d_in) = w.dims2()?;
    let (n, xd) = x.dims2()?;
    if xd != d_in || b.len() != d_out {
        return Err(Error::Dimension(format!(
            "linear {d_in}→{d_out} (bias {}) applied to input {n}×{xd}",
            b.len()
        )));
    }
    let mut y = Tensor::zeros(&[n, d_out]);
    gemm_nt(x.data(), w.data(), n, d_in, d_out, y.data_mut());
    for i in 0..n {
        for (yi, &bi) in y.row_mut(i).iter_mut().zip(b.data()) {
            *yi += bi;
        }
    }
    Ok(y)
}

/// Fully connected layer with an optional low-rank adapter slot.
#[derive(Clone, Debug)]
pub struct Linear<T: Real = f32> {
    pub weight: Parameter<T>,
    pub bias: Parameter<T>,
    pub lora: Option<LoraAdapter<T>>,
}

impl<T: Real> Linear<T> {
    pub fn new<R: Rng>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        Self {
            weight: Parameter::new(xavier_uniform(d_out, d_in, rng)),
            bias: Parameter::new(Tensor::zeros(&[d_out])),
            lora: None,
        }
    }

    pub fn from_parts(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let (d_out, _) = weight.dims2()?;
        if bias.shape() != [d_out] {
            return Err(Error::Dimension(format!(
                "bias shape {:?} does not match {d_out} outputs",
                bias.shape()
            )));
        }
        Ok(Self {
            weight: Parameter::new(weight),
            bias: Parameter::new(bias),
            lora: None,
        })
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn attach_lora<R: Rng>(&mut self, rank: usize, alpha: f64, rng: &mut R) -> Result<()> {
        self.lora = Some(LoraAdapter::new(self.d_in(), self.d_out(), rank, alpha, rng)?);
        Ok(())
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut y = linear_forward(&self.weight.value, &self.bias.value, x)?;
        if let Some(lora) = &self.lora {
            lora.add_forward(x.data(), x.rows(), y.data_mut());
        }
        Ok(y)
    }

    /// Accumulates parameter gradients for input `x` and returns `dL/dx`.
    pub fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
        let (d_in, d_out) = (self.d_in(), self.d_out());
        let n = x.rows();
        if self.weight.trainable {
            let mut g = vec![T::zero(); d_out * d_in];
            gemm_tn_acc(dy.data(), x.data(), n, d_out, d_in, &mut g);
            self.weight.accumulate(&g);
        }
        if self.bias.trainable {
            let mut g = vec![T::zero(); d_out];
            for i in 0..n {
                for (gj, &d) in g.iter_mut().zip(dy.row(i)) {
                    *gj += d;
                }
            }
            self.bias.accumulate(&g);
        }
        let mut dx = Tensor::zeros(&[n, d_in]);
        gemm_nn_acc(dy.data(), self.weight.value.data(), n, d_out, d_in, dx.data_mut());
        if let Some(lora) = &mut self.lora {
            lora.backward(x.data(), dy.data(), n, dx.data_mut());
        }
        dx
    }
}

impl<T: Real> HasParams<T> for Linear<T> {
    fn params(&self) -> Vec<(String, &Parameter<T>)> {
        let mut out = vec![("weight".to_string(), &self.weight), ("bias".to_string(), &self.bias)];
        if let Some(l) = &self.lora {
            out.extend(scoped("lora", l.params()));
        }
        out
    }
    fn params_mut(&mut self) -> Vec<(String, &mut Parameter<T>)> {
        let mut out = vec![
            ("weight".to_string(), &mut self.weight),
            ("bias".to_string(), &mut self.bias),
        ];
        if let Some(l) = &mut self.lora {
            out.extend(scoped("lora", l.params_mut()));
        }
        out
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
const GELU_K: f64 = 0.044_715;

/// Tanh-approximated GELU.
#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let k = T::lit(GELU_K);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let k = T::lit(GELU_K);
    let half = T::lit(0.5);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * k * x * x)
}

/// Per-row layer normalization with learned gain and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm<T: Real = f32> {
    pub gamma: Parameter<T>,
    pub beta: Parameter<T>,
    pub eps: f64,
}

#[derive(Clone, Debug)]
pub struct LayerNormCache<T: Real> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
}

impl<T: Real> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Parameter::new(Tensor::full(&[dim], T::one())),
            beta: Parameter::new(Tensor::zeros(&[dim])),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, LayerNormCache<T>)> {
        let (n, d) = x.dims2()?;
        if d != self.gamma.len() {
            return Err(Error::Dimension(format!(
                "layer norm over {} features applied to width {d}",
                self.gamma.len()
            )));
        }
        let dn = T::lit(d as f64);
        let eps = T::lit(self.eps);
        let mut y = Tensor::zeros(&[n, d]);
        let mut xhat = Tensor::zeros(&[n, d]);
        let mut inv_std = Vec::with_capacity(n);
        let (g, b) = (self.gamma.value.data(), self.beta.value.data());
        for i in 0..n {
            let row = x.row(i);
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            let xh = xhat.row_mut(i);
            for j in 0..d {
                xh[j] = (row[j] - mean) * inv;
            }
            let yr = y.row_mut(i);
            for j in 0..d {
                yr[j] = g[j] * xhat.row(i)[j] + b[j];
            }
        }
        Ok((y, LayerNormCache { xhat, inv_std }))
    }

    pub fn backward(&mut self, cache: &LayerNormCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let (n, d) = (dy.rows(), dy.cols());
        let dn = T::lit(d as f64);
        if self.gamma.trainable || self.beta.trainable {
            let mut gg = vec![T::zero(); d];
            let mut gb = vec![T::zero(); d];
            for i in 0..n {
                let (dr, xr) = (dy.row(i), cache.xhat.row(i));
                for j in 0..d {
                    gg[j] += dr[j] * xr[j];
                    gb[j] += dr[j];
                }
            }
            self.gamma.accumulate(&gg);
            self.beta.accumulate(&gb);
        }
        let g = self.gamma.value.data();
        let mut dx = Tensor::zeros(&[n, d]);
        let mut dxhat = vec![T::zero(); d];
        for i in 0..n {
            let (dr, xr) = (dy.row(i), cache.xhat.row(i));
            let mut s1 = T::zero();
            let mut s2 = T::zero();
            for j in 0..d {
                dxhat[j] = dr[j] * g[j];
                s1 += dxhat[j];
                s2 += dxhat[j] * xr[j];
            }
            let inv = cache.inv_std[i];
            let out = dx.row_mut(i);
            for j in 0..d {
                out[j] = inv / dn * (dn * dxhat[j] - s1 - xr[j] * s2);
            }
        }
        dx
    }
}

impl<T: Real> HasParams<T> for LayerNorm<T> {
    fn params(&self) -> Vec<(String, &Parameter<T>)> {
        vec![("gamma".into(), &self.gamma), ("beta".into(), &self.beta)]
    }
    fn params_mut(&mut self) -> Vec<(String, &mut Parameter<T>)> {
        vec![("gamma".into(), &mut self.gamma), ("beta".into(), &mut self.beta)]
    }
}

/// Two linear layers with a GELU in between.
#[derive(Clone, Debug)]
pub struct Mlp<T: Real = f32> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

#[derive(Clone, Debug)]
pub struct MlpCache<T: Real> {
    x: Tensor<T>,
    pre: Tensor<T>,
    act: Tensor<T>,
}

impl<T: Real> Mlp<T> {
    pub fn new<R: Rng>(d_in: usize, hidden: usize, d_out: usize, rng: &mut R) -> Self {
        Self {
            fc1: Linear::new(d_in, hidden, rng),
            fc2: Linear::new(hidden, d_out, rng),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, MlpCache<T>)> {
        let pre = self.fc1.forward(x)?;
        let act = pre.map(gelu);
        let y = self.fc2.forward(&act)?;
        Ok((
            y,
            MlpCache {
                x: x.clone(),
                pre,
                act,
            },
        ))
    }

    pub fn backward(&mut self, cache: &MlpCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let mut dact = self.fc2.backward(&cache.act, dy);
        for (d, &p) in dact.data_mut().iter_mut().zip(cache.pre.data()) {
            *d *= gelu_grad(p);
        }
        self.fc1.backward(&cache.x, &dact)
    }
}

impl<T: Real> HasParams<T> for Mlp<T> {
    fn params(&self) -> Vec<(String, &Parameter<T>)> {
        scoped("fc1", self.fc1.params())
            .chain(scoped("fc2", self.fc2.params()))
            .collect()
    }
    fn params_mut(&mut self) -> Vec<(String, &mut Parameter<T>)> {
        scoped("fc1", self.fc1.params_mut())
            .chain(scoped("fc2", self.fc2.params_mut()))
            .collect()
    }
}
