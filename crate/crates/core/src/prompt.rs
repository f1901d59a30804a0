//! Visual prompt encoder: Fourier coordinate features plus a learned
//! per-kind embedding, passed through an MLP.

use std::f64::consts::TAU;

use crate::config::ModelConfig;
use crate::episode::{PromptKind, VisualPrompt};
use crate::error::{Error, Result};
use crate::nn::rng::{normal, stream};
use crate::nn::{scoped, HasParams, Linear, Mlp, MlpCache, Parameter, Real, Tensor};
use crate::pixel::downsample_mask;
use crate::raster::Mask;

/// `[sin(2π·F·xy), cos(2π·F·xy)]` for a `(d_pe/2) × 2` frequency bank.
pub fn fourier_pe<T: Real>(bank: &Tensor<T>, x: f64, y: f64) -> Result<Vec<T>> {
    if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
        return Err(Error::Validation(format!("coordinate ({x}, {y}) outside [0, 1]")));
    }
    let half = bank.rows();
    let mut out = vec![T::zero(); 2 * half];
    for i in 0..half {
        let f = bank.row(i);
        let phase = TAU * (f[0].as_f64() * x + f[1].as_f64() * y);
        out[i] = T::lit(phase.sin());
        out[half + i] = T::lit(phase.cos());
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct PromptEncoder<T: Real = f32> {
    /// Frozen Gaussian frequency bank.
    pub bank: Parameter<T>,
    /// One row per [`PromptKind`].
    pub type_emb: Parameter<T>,
    pub mask_proj: Linear<T>,
    pub mlp: Mlp<T>,
    line_samples: usize,
    mask_grid: usize,
    d_model: usize,
}

#[derive(Clone, Debug)]
pub struct PromptCache<T: Real> {
    kinds: Vec<PromptKind>,
    /// Flattened pooled masks and the token rows they produced.
    mask_inputs: Option<(Tensor<T>, Vec<usize>)>,
    mlp: Option<MlpCache<T>>,
}

/// Encoded prompt tokens with the kind that produced each row.
#[derive(Clone, Debug)]
pub struct PromptTokens<T: Real> {
    pub tokens: Tensor<T>,
    pub kinds: Vec<PromptKind>,
}

impl<T: Real> PromptEncoder<T> {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let bank = Parameter::frozen(normal(&[cfg.d_pe / 2, 2], 1.0, &mut stream(cfg.seed, "prompt.bank")));
        let type_emb = Parameter::new(normal(&[4, cfg.d_pe], 1.0, &mut stream(cfg.seed, "prompt.type_emb")));
        let mask_proj = Linear::new(
            cfg.mask_grid * cfg.mask_grid,
            cfg.d_pe,
            &mut stream(cfg.seed, "prompt.mask_proj"),
        );
        let mlp = Mlp::new(cfg.d_pe, cfg.d_model, cfg.d_model, &mut stream(cfg.seed, "prompt.mlp"));
        Ok(Self {
            bank,
            type_emb,
            mask_proj,
            mlp,
            line_samples: cfg.line_samples,
            mask_grid: cfg.mask_grid,
            d_model: cfg.d_model,
        })
    }

    pub fn d_pe(&self) -> usize {
        self.type_emb.shape()[1]
    }

    /// Tokens a prompt expands to.
    pub fn token_count(&self, kind: PromptKind) -> usize {
        match kind {
            PromptKind::Point | PromptKind::MaskRef => 1,
            PromptKind::Box => 2,
            PromptKind::Line => self.line_samples,
        }
    }

    fn sample_points(&self, p: &VisualPrompt) -> Vec<(f64, f64)> {
        match *p {
            VisualPrompt::Point { x, y } => vec![(x as f64, y as f64)],
            VisualPrompt::Box { x1, y1, x2, y2 } => vec![(x1 as f64, y1 as f64), (x2 as f64, y2 as f64)],
            VisualPrompt::Line { x1, y1, x2, y2 } => {
                let k = self.line_samples;
                (0..k)
                    .map(|j| {
                        let t = if k == 1 { 0.5 } else { j as f64 / (k - 1) as f64 };
                        (
                            x1 as f64 + t * (x2 as f64 - x1 as f64),
                            y1 as f64 + t * (y2 as f64 - y1 as f64),
                        )
                    })
                    .collect()
            }
            VisualPrompt::MaskRef => Vec::new(),
        }
    }

    pub fn encode(&self, prompts: &[VisualPrompt], mask: Option<&Mask>) -> Result<(PromptTokens<T>, PromptCache<T>)> {
        let d_pe = self.d_pe();
        let mut rows: Vec<Vec<T>> = Vec::new();
        let mut kinds = Vec::new();
        let mut mask_rows = Vec::new();
        let mut mask_data = Vec::new();
        for p in prompts {
            p.validate()?;
            let kind = p.kind();
            if kind == PromptKind::MaskRef {
                let mask = mask.ok_or_else(|| Error::Validation("mask_ref prompt without a mask".into()))?;
                mask_data.extend(downsample_mask::<T>(mask, self.mask_grid, self.mask_grid)?);
                mask_rows.push(rows.len());
                rows.push(vec![T::zero(); d_pe]);
                kinds.push(kind);
                continue;
            }
            for (x, y) in self.sample_points(p) {
                rows.push(fourier_pe(&self.bank.value, x, y)?);
                kinds.push(kind);
            }
        }
        if rows.is_empty() {
            let tokens = Tensor::zeros(&[0, self.d_model]);
            let cache = PromptCache {
                kinds: Vec::new(),
                mask_inputs: None,
                mlp: None,
            };
            return Ok((PromptTokens { tokens, kinds: Vec::new() }, cache));
        }
        let mask_inputs = if mask_rows.is_empty() {
            None
        } else {
            let m = Tensor::from_vec(&[mask_rows.len(), self.mask_grid * self.mask_grid], mask_data)?;
            let projected = self.mask_proj.forward(&m)?;
            for (i, &r) in mask_rows.iter().enumerate() {
                rows[r].copy_from_slice(projected.row(i));
            }
            Some((m, mask_rows))
        };
        let n = rows.len();
        let mut x = Tensor::from_vec(&[n, d_pe], rows.concat())?;
        for (i, &k) in kinds.iter().enumerate() {
            let emb = self.type_emb.value.row(k as usize);
            for (v, &e) in x.row_mut(i).iter_mut().zip(emb) {
                *v += e;
            }
        }
        let (tokens, mlp) = self.mlp.forward(&x)?;
        Ok((
            PromptTokens {
                tokens,
                kinds: kinds.clone(),
            },
            PromptCache {
                kinds,
                mask_inputs,
                mlp: Some(mlp),
            },
        ))
    }

    pub fn backward(&mut self, cache: &PromptCache<T>, dy: &Tensor<T>) {
        let Some(mlp_cache) = &cache.mlp else { return };
        let dx = self.mlp.backward(mlp_cache, dy);
        if self.type_emb.trainable {
            let d_pe = self.d_pe();
            let mut g = vec![T::zero(); 4 * d_pe];
            for (i, &k) in cache.kinds.iter().enumerate() {
                let row = &mut g[k as usize * d_pe..(k as usize + 1) * d_pe];
                for (gv, &d) in row.iter_mut().zip(dx.row(i)) {
                    *gv += d;
                }
            }
            self.type_emb.accumulate(&g);
        }
        if let Some((m, rows)) = &cache.mask_inputs {
            let parts: Vec<Tensor<T>> = rows.iter().map(|&r| dx.slice_rows(r..r + 1)).collect();
            let refs: Vec<&Tensor<T>> = parts.iter().collect();
            if let Ok(dm) = Tensor::concat_rows(&refs) {
                self.mask_proj.backward(m, &dm);
            }
        }
    }
}

impl<T: Real> HasParams<T> for PromptEncoder<T> {
    fn params(&self) -> Vec<(String, &Parameter<T>)> {
        let mut out = vec![("bank".to_string(), &self.bank), ("type_emb".to_string(), &self.type_emb)];
        out.extend(scoped("mask_proj", self.mask_proj.params()));
        out.extend(scoped("mlp", self.mlp.params()));
        out
    }
    fn params_mut(&mut self) -> Vec<(String, &mut Parameter<T>)> {
        let mut out = vec![
            ("bank".to_string(), &mut self.bank),
            ("type_emb".to_string(), &mut self.type_emb),
        ];
        out.extend(scoped("mask_proj", self.mask_proj.params_mut()));
        out.extend(scoped("mlp", self.mlp.params_mut()));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn encoder() -> PromptEncoder<f32> {
        PromptEncoder::new(&ModelConfig::default()).unwrap()
    }

    #[test]
    fn origin_encoding() {
        let enc = encoder();
        let pe = fourier_pe(&enc.bank.value, 0.0, 0.0).unwrap();
        assert!(pe[..64].iter().all(|&v| v == 0.0));
        assert!(pe[64..].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn out_of_range_is_validation_error() {
        let enc = encoder();
        assert!(matches!(fourier_pe(&enc.bank.value, 1.2, 0.0), Err(Error::Validation(_))));
        assert!(matches!(
            enc.encode(&[VisualPrompt::Point { x: -0.1, y: 0.5 }], None),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn encoding_separates_random_pairs() {
        let enc = encoder();
        let mut rng = stream(11, "pairs");
        for _ in 0..1000 {
            let a: (f64, f64) = (rng.random(), rng.random());
            let b: (f64, f64) = (rng.random(), rng.random());
            if a == b {
                continue;
            }
            let pa = fourier_pe(&enc.bank.value, a.0, a.1).unwrap();
            let pb = fourier_pe(&enc.bank.value, b.0, b.1).unwrap();
            let d: f32 = pa.iter().zip(&pb).map(|(x, y)| (x - y).powi(2)).sum();
            assert!(d > 0.0);
        }
    }

    #[test]
    fn token_counts_and_order() {
        let enc = encoder();
        let prompts = [
            VisualPrompt::Box { x1: 0.1, y1: 0.1, x2: 0.4, y2: 0.5 },
            VisualPrompt::Line { x1: 0.0, y1: 0.0, x2: 1.0, y2: 1.0 },
        ];
        let (out, _) = enc.encode(&prompts, None).unwrap();
        assert_eq!(out.tokens.shape(), &[6, 64]);
        use PromptKind::*;
        assert_eq!(out.kinds, vec![Box, Box, Line, Line, Line, Line]);
        let (single, _) = enc.encode(&[VisualPrompt::Point { x: 0.5, y: 0.5 }], None).unwrap();
        assert_eq!(single.tokens.shape(), &[1, 64]);
    }

    #[test]
    fn empty_list_gives_no_tokens() {
        let (out, _) = encoder().encode(&[], None).unwrap();
        assert_eq!(out.tokens.shape(), &[0, 64]);
    }

    #[test]
    fn mask_prompt_needs_mask() {
        let enc = encoder();
        assert!(enc.encode(&[VisualPrompt::MaskRef], None).is_err());
        let m = Mask::from_fn(64, 64, |x, _| x < 10);
        let (out, _) = enc.encode(&[VisualPrompt::MaskRef], Some(&m)).unwrap();
        assert_eq!(out.tokens.rows(), 1);
    }

    #[test]
    fn kinds_at_same_coordinates_differ() {
        let enc = encoder();
        let point = VisualPrompt::Point { x: 0.3, y: 0.6 };
        let boxed = VisualPrompt::Box { x1: 0.3, y1: 0.6, x2: 0.3, y2: 0.6 };
        let (a, _) = enc.encode(&[point], None).unwrap();
        let (b, _) = enc.encode(&[boxed], None).unwrap();
        let d: f32 = a.tokens.row(0).iter().zip(b.tokens.row(0)).map(|(x, y)| (x - y).powi(2)).sum();
        assert!(d.sqrt() >= 1e-3);
    }
}
