//! Continuous action head over the register-token hidden states, and the
//! L1 objective.

use crate::backbone::SequenceLayout;
use crate::config::ModelConfig;
use crate::episode::ACTION_DIM;
use crate::error::{Error, Result};
use crate::nn::rng::stream;
use crate::nn::{gelu, gelu_grad, scoped, HasParams, LayerNorm, LayerNormCache, Linear, Mlp, MlpCache, Parameter, Real, Tensor};

/// `x + fc2(gelu(fc1(ln(x))))`.
#[derive(Clone, Debug)]
pub struct ResidualBlock<T: Real = f32> {
    pub ln: LayerNorm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

#[derive(Clone, Debug)]
pub struct ResidualCache<T: Real> {
    ln: LayerNormCache<T>,
    normed: Tensor<T>,
    pre: Tensor<T>,
    act: Tensor<T>,
}

impl<T: Real> ResidualBlock<T> {
    fn new(dim: usize, seed: u64, label: &str) -> Self {
        let mut rng = stream(seed, label);
        Self {
            ln: LayerNorm::new(dim),
            fc1: Linear::new(dim, dim, &mut rng),
            fc2: Linear::new(dim, dim, &mut rng),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, ResidualCache<T>)> {
        let (normed, ln) = self.ln.forward(x)?;
        let pre = self.fc1.forward(&normed)?;
        let act = pre.map(gelu);
        let mut y = self.fc2.forward(&act)?;
        y.add_assign(x)?;
        Ok((y, ResidualCache { ln, normed, pre, act }))
    }

    pub fn backward(&mut self, cache: &ResidualCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let mut dact = self.fc2.backward(&cache.act, dy);
        for (d, &p) in dact.data_mut().iter_mut().zip(cache.pre.data()) {
            *d *= gelu_grad(p);
        }
        let dnormed = self.fc1.backward(&cache.normed, &dact);
        let mut dx = self.ln.backward(&cache.ln, &dnormed);
        dx.add_assign(dy).expect("same shape");
        dx
    }
}

impl<T: Real> HasParams<T> for ResidualBlock<T> {
    fn params(&self) -> Vec<(String, &Parameter<T>)> {
        scoped("ln", self.ln.params())
            .chain(scoped("fc1", self.fc1.params()))
            .chain(scoped("fc2", self.fc2.params()))
            .collect()
    }
    fn params_mut(&mut self) -> Vec<(String, &mut Parameter<T>)> {
        scoped("ln", self.ln.params_mut())
            .chain(scoped("fc1", self.fc1.params_mut()))
            .chain(scoped("fc2", self.fc2.params_mut()))
            .collect()
    }
}

/// Linear projector, residual blocks and a per-token MLP to 7 outputs.
#[derive(Clone, Debug)]
pub struct ActionDecoder<T: Real = f32> {
    pub input: Linear<T>,
    pub blocks: Vec<ResidualBlock<T>>,
    pub head: Mlp<T>,
    chunk: usize,
}

#[derive(Clone, Debug)]
pub struct DecoderCache<T: Real> {
    registers: Tensor<T>,
    blocks: Vec<ResidualCache<T>>,
    head: MlpCache<T>,
}

impl<T: Real> ActionDecoder<T> {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let h = cfg.decoder_hidden;
        Ok(Self {
            input: Linear::new(cfg.d_model, h, &mut stream(cfg.seed, "decoder.input")),
            blocks: (0..cfg.decoder_blocks)
                .map(|i| ResidualBlock::new(h, cfg.seed, &format!("decoder.block.{i}")))
                .collect(),
            head: Mlp::new(h, h, ACTION_DIM, &mut stream(cfg.seed, "decoder.head")),
            chunk: cfg.chunk,
        })
    }

    pub fn chunk(&self) -> usize {
        self.chunk
    }

    /// Reads the register rows of `hidden` and decodes them.
    pub fn decode(&self, hidden: &Tensor<T>, layout: &SequenceLayout) -> Result<(Tensor<T>, DecoderCache<T>)> {
        if layout.registers.len() != self.chunk || layout.registers.end > hidden.rows() {
            return Err(Error::Contract(format!(
                "layout has {} register tokens, decoder expects {}",
                layout.registers.len(),
                self.chunk
            )));
        }
        self.decode_registers(&hidden.slice_rows(layout.registers.clone()))
    }

    /// Decodes an `N_c × D` block of register states into `N_c × 7`.
    pub fn decode_registers(&self, registers: &Tensor<T>) -> Result<(Tensor<T>, DecoderCache<T>)> {
        let mut h = self.input.forward(registers)?;
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, c) = b.forward(&h)?;
            caches.push(c);
            h = y;
        }
        let (out, head) = self.head.forward(&h)?;
        Ok((
            out,
            DecoderCache {
                registers: registers.clone(),
                blocks: caches,
                head,
            },
        ))
    }

    /// Gradient with respect to the register states.
    pub fn backward(&mut self, cache: &DecoderCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let mut d = self.head.backward(&cache.head, dy);
        for (b, c) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            d = b.backward(c, &d);
        }
        self.input.backward(&cache.registers, &d)
    }
}

impl<T: Real> HasParams<T> for ActionDecoder<T> {
    fn params(&self) -> Vec<(String, &Parameter<T>)> {
        let mut out: Vec<_> = scoped("input", self.input.params()).collect();
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(scoped(&format!("blocks.{i}"), b.params()));
        }
        out.extend(scoped("head", self.head.params()));
        out
    }
    fn params_mut(&mut self) -> Vec<(String, &mut Parameter<T>)> {
        let mut out: Vec<_> = scoped("input", self.input.params_mut()).collect();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.extend(scoped(&format!("blocks.{i}"), b.params_mut()));
        }
        out.extend(scoped("head", self.head.params_mut()));
        out
    }
}

/// Elementwise L1 between equally shaped tensors and its subgradient
/// (zero at ties). With `mean` the sum is divided by the element count.
pub fn l1_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, mean: bool) -> Result<(T, Tensor<T>)> {
    if pred.shape() != target.shape() {
        return Err(Error::Dimension(format!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let scale = if mean && !pred.is_empty() {
        T::one() / T::lit(pred.len() as f64)
    } else {
        T::one()
    };
    let mut loss = T::zero();
    let mut grad = Tensor::zeros(pred.shape());
    for ((g, &p), &t) in grad.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
        let r = p - t;
        loss += r.abs();
        *g = if r > T::zero() {
            scale
        } else if r < T::zero() {
            -scale
        } else {
            T::zero()
        };
    }
    Ok((loss * scale, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::rng::uniform;

    fn layout(n_before: usize, chunk: usize) -> SequenceLayout {
        SequenceLayout {
            visual: 0..n_before,
            language: n_before..n_before,
            pixel: n_before..n_before,
            prompt: n_before..n_before,
            registers: n_before..n_before + chunk,
        }
    }

    #[test]
    fn default_chunk_shape() {
        let dec = ActionDecoder::<f32>::new(&ModelConfig::default()).unwrap();
        let hidden = uniform(&[30, 64], 1.0, &mut stream(1, "h"));
        let (out, _) = dec.decode(&hidden, &layout(22, 8)).unwrap();
        assert_eq!(out.shape(), &[8, 7]);
    }

    #[test]
    fn zero_hidden_gives_zero_actions() {
        let dec = ActionDecoder::<f32>::new(&ModelConfig::default()).unwrap();
        let (out, _) = dec.decode(&Tensor::zeros(&[10, 64]), &layout(2, 8)).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn missing_registers_is_contract_error() {
        let dec = ActionDecoder::<f32>::new(&ModelConfig::default()).unwrap();
        assert!(matches!(
            dec.decode(&Tensor::zeros(&[10, 64]), &layout(10, 0)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn only_register_states_matter() {
        let dec = ActionDecoder::<f32>::new(&ModelConfig::default()).unwrap();
        let mut hidden = uniform(&[20, 64], 1.0, &mut stream(2, "h"));
        let (a, _) = dec.decode(&hidden, &layout(12, 8)).unwrap();
        for v in &mut hidden.data_mut()[..12 * 64] {
            *v += 3.0;
        }
        let (b, _) = dec.decode(&hidden, &layout(12, 8)).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn loss_forced_values() {
        let t = Tensor::<f64>::zeros(&[1, 8, 7]);
        let p = Tensor::full(&[1, 8, 7], 0.5);
        assert_eq!(l1_loss(&t, &t, false).unwrap().0, 0.0);
        assert_eq!(l1_loss(&p, &t, false).unwrap().0, 28.0);
        assert_eq!(l1_loss(&p, &t, true).unwrap().0, 0.5);
    }

    #[test]
    fn loss_matches_triple_loop() {
        let mut rng = stream(4, "l1");
        let (b, c) = (3, 8);
        let p = uniform::<f64, _>(&[b, c, 7], 1.0, &mut rng);
        let t = uniform::<f64, _>(&[b, c, 7], 1.0, &mut rng);
        let mut expect = 0.0;
        for i in 0..b {
            for j in 0..c {
                for k in 0..7 {
                    let idx = (i * c + j) * 7 + k;
                    expect += (p.data()[idx] - t.data()[idx]).abs();
                }
            }
        }
        assert!((l1_loss(&p, &t, false).unwrap().0 - expect).abs() <= 1e-5);
    }

    #[test]
    fn loss_shape_mismatch() {
        let a = Tensor::<f32>::zeros(&[2, 7]);
        let b = Tensor::<f32>::zeros(&[3, 7]);
        assert!(matches!(l1_loss(&a, &b, true), Err(Error::Dimension(_))));
    }

    #[test]
    fn tie_subgradient_is_zero() {
        let a = Tensor::<f32>::full(&[1, 7], 0.25);
        let (_, g) = l1_loss(&a, &a, false).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }
}
