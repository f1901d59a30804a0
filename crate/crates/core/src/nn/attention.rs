use rand::Rng;

use super::layers::{LayerNorm, LayerNormCache, Linear, Mlp, MlpCache};
use super::param::scoped;
use super::{HasParams, Parameter, Real, Tensor};
use crate::error::{Error, Result};

/// Multi-head self-attention over all positions (no causal mask).
#[derive(Clone, Debug)]
pub struct SelfAttention<T: Real = f32> {
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub o: Linear<T>,
    pub heads: usize,
}

#[derive(Clone, Debug)]
pub struct AttentionCache<T: Real> {
    x: Tensor<T>,
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    /// heads × n × n, row-stochastic per (head, query).
    probs: Vec<T>,
    ctx: Tensor<T>,
}

impl<T: Real> SelfAttention<T> {
    pub fn new<R: Rng>(dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "width {dim} is not divisible into {heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(dim, dim, rng),
            k: Linear::new(dim, dim, rng),
            v: Linear::new(dim, dim, rng),
            o: Linear::new(dim, dim, rng),
            heads,
        })
    }

    pub fn linears_mut(&mut self) -> [&mut Linear<T>; 4] {
        [&mut self.q, &mut self.k, &mut self.v, &mut self.o]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, AttentionCache<T>)> {
        let (n, d) = x.dims2()?;
        let q = self.q.forward(x)?;
        let k = self.k.forward(x)?;
        let v = self.v.forward(x)?;
        let dh = d / self.heads;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let mut probs = vec![T::zero(); self.heads * n * n];
        let mut ctx = Tensor::zeros(&[n, d]);
        for h in 0..self.heads {
            let off = h * dh;
            for i in 0..n {
                let qi = &q.row(i)[off..off + dh];
                let p = &mut probs[(h * n + i) * n..(h * n + i + 1) * n];
                let mut max = T::neg_infinity();
                for j in 0..n {
                    let kj = &k.row(j)[off..off + dh];
                    let s = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale;
                    p[j] = s;
                    max = max.max(s);
                }
                let mut total = T::zero();
                for pj in p.iter_mut() {
                    *pj = (*pj - max).exp();
                    total += *pj;
                }
                for pj in p.iter_mut() {
                    *pj /= total;
                }
                let ci = &mut ctx.row_mut(i)[off..off + dh];
                for j in 0..n {
                    let vj = &v.row(j)[off..off + dh];
                    for c in 0..dh {
                        ci[c] += p[j] * vj[c];
                    }
                }
            }
        }
        let y = self.o.forward(&ctx)?;
        Ok((
            y,
            AttentionCache {
                x: x.clone(),
                q,
                k,
                v,
                probs,
                ctx,
            },
        ))
    }

    pub fn backward(&mut self, cache: &AttentionCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let (n, d) = (cache.x.rows(), cache.x.cols());
        let dh = d / self.heads;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let dctx = self.o.backward(&cache.ctx, dy);
        let mut dq = Tensor::zeros(&[n, d]);
        let mut dk = Tensor::zeros(&[n, d]);
        let mut dv = Tensor::zeros(&[n, d]);
        let mut dp = vec![T::zero(); n];
        for h in 0..self.heads {
            let off = h * dh;
            for i in 0..n {
                let p = &cache.probs[(h * n + i) * n..(h * n + i + 1) * n];
                let dci = &dctx.row(i)[off..off + dh];
                for j in 0..n {
                    let vj = &cache.v.row(j)[off..off + dh];
                    dp[j] = dci.iter().zip(vj).map(|(&a, &b)| a * b).sum();
                    let dvj = &mut dv.row_mut(j)[off..off + dh];
                    for c in 0..dh {
                        dvj[c] += p[j] * dci[c];
                    }
                }
                let s: T = p.iter().zip(&dp).map(|(&a, &b)| a * b).sum();
                let qi: Vec<T> = cache.q.row(i)[off..off + dh].to_vec();
                for j in 0..n {
                    let ds = p[j] * (dp[j] - s) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    let kj = &cache.k.row(j)[off..off + dh];
                    let dqi = &mut dq.row_mut(i)[off..off + dh];
                    for c in 0..dh {
                        dqi[c] += ds * kj[c];
                    }
                    let dkj = &mut dk.row_mut(j)[off..off + dh];
                    for c in 0..dh {
                        dkj[c] += ds * qi[c];
                    }
                }
            }
        }
        let mut dx = self.q.backward(&cache.x, &dq);
        dx.add_assign(&self.k.backward(&cache.x, &dk)).expect("same shape");
        dx.add_assign(&self.v.backward(&cache.x, &dv)).expect("same shape");
        dx
    }
}

impl<T: Real> HasParams<T> for SelfAttention<T> {
    fn params(&self) -> Vec<(String, &Parameter<T>)> {
        scoped("q", self.q.params())
            .chain(scoped("k", self.k.params()))
            .chain(scoped("v", self.v.params()))
            .chain(scoped("o", self.o.params()))
            .collect()
    }
    fn params_mut(&mut self) -> Vec<(String, &mut Parameter<T>)> {
        scoped("q", self.q.params_mut())
            .chain(scoped("k", self.k.params_mut()))
            .chain(scoped("v", self.v.params_mut()))
            .chain(scoped("o", self.o.params_mut()))
            .collect()
    }
}

/// Pre-norm transformer block: `h = x + attn(ln1(x))`, `y = h + mlp(ln2(h))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock<T: Real = f32> {
    pub ln1: LayerNorm<T>,
    pub attn: SelfAttention<T>,
    pub ln2: LayerNorm<T>,
    pub mlp: Mlp<T>,
}

#[derive(Clone, Debug)]
pub struct BlockCache<T: Real> {
    ln1: LayerNormCache<T>,
    attn: AttentionCache<T>,
    ln2: LayerNormCache<T>,
    mlp: MlpCache<T>,
}

impl<T: Real> TransformerBlock<T> {
    pub fn new<R: Rng>(dim: usize, heads: usize, mlp_hidden: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(dim),
            attn: SelfAttention::new(dim, heads, rng)?,
            ln2: LayerNorm::new(dim),
            mlp: Mlp::new(dim, mlp_hidden, dim, rng),
        })
    }

    /// Every linear layer in the block, in a fixed order.
    pub fn linears(&self) -> Vec<&Linear<T>> {
        let a = &self.attn;
        vec![&a.q, &a.k, &a.v, &a.o, &self.mlp.fc1, &self.mlp.fc2]
    }

    pub fn linears_mut(&mut self) -> Vec<&mut Linear<T>> {
        let [q, k, v, o] = self.attn.linears_mut();
        vec![q, k, v, o, &mut self.mlp.fc1, &mut self.mlp.fc2]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, BlockCache<T>)> {
        let (a_in, ln1) = self.ln1.forward(x)?;
        let (a_out, attn) = self.attn.forward(&a_in)?;
        let mut h = x.clone();
        h.add_assign(&a_out)?;
        let (m_in, ln2) = self.ln2.forward(&h)?;
        let (m_out, mlp) = self.mlp.forward(&m_in)?;
        h.add_assign(&m_out)?;
        Ok((h, BlockCache { ln1, attn, ln2, mlp }))
    }

    pub fn backward(&mut self, cache: &BlockCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let dm_in = self.mlp.backward(&cache.mlp, dy);
        let mut dh = self.ln2.backward(&cache.ln2, &dm_in);
        dh.add_assign(dy).expect("same shape");
        let da_in = self.attn.backward(&cache.attn, &dh);
        let mut dx = self.ln1.backward(&cache.ln1, &da_in);
        dx.add_assign(&dh).expect("same shape");
        dx
    }
}

impl<T: Real> HasParams<T> for TransformerBlock<T> {
    fn params(&self) -> Vec<(String, &Parameter<T>)> {
        scoped("ln1", self.ln1.params())
            .chain(scoped("attn", self.attn.params()))
            .chain(scoped("ln2", self.ln2.params()))
            .chain(scoped("mlp", self.mlp.params()))
            .collect()
    }
    fn params_mut(&mut self) -> Vec<(String, &mut Parameter<T>)> {
        scoped("ln1", self.ln1.params_mut())
            .chain(scoped("attn", self.attn.params_mut()))
            .chain(scoped("ln2", self.ln2.params_mut()))
            .chain(scoped("mlp", self.mlp.params_mut()))
            .collect()
    }
}
