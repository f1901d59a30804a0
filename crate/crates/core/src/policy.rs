//! The full policy: frozen vision stub, pixel and prompt encoders, the
//! transformer backbone and the action decoder, plus checkpoint I/O.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{assemble_sequence, Backbone, SequenceLayout};
use crate::config::ModelConfig;
use crate::decoder::{ActionDecoder, DecoderCache};
use crate::episode::{render_template, NormStats, VisualPrompt};
use crate::error::{Error, Result};
use crate::nn::checkpoint::{decode_checkpoint, encode_checkpoint, write_atomic};
use crate::nn::{scoped, BlockCache, HasParams, Parameter, Real, Tensor};
use crate::pixel::{PixelCache, PixelEncoder};
use crate::prompt::{PromptCache, PromptEncoder};
use crate::raster::{Image, Mask};
use crate::vision::{FeaturePyramid, VisionStub};

const META_TENSOR: &str = "meta";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraSpec {
    pub rank: usize,
    pub alpha: f64,
}

/// Everything besides tensors that a checkpoint must carry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyMeta {
    pub model: ModelConfig,
    pub lora: Option<LoraSpec>,
    /// Flattened action statistics of the training data (7 lows, 7 highs).
    pub norm_stats: Option<Vec<f32>>,
    #[serde(default)]
    pub stage: Stage,
    /// Trained without masks and prompts.
    #[serde(default)]
    pub mask_blind: bool,
}

/// Which parameter groups train.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Action decoder only.
    #[default]
    One,
    /// Adapters, pixel encoder, prompt encoder and action decoder.
    Two,
}

/// Frame-dependent, parameter-independent inputs: the pyramid and the
/// visual tokens. Both come from frozen modules and can be cached.
#[derive(Clone, Debug)]
pub struct VisualContext<T: Real = f32> {
    pub pyramid: FeaturePyramid<T>,
    pub tokens: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct PolicyCache<T: Real> {
    pub layout: SequenceLayout,
    blocks: Vec<BlockCache<T>>,
    decoder: DecoderCache<T>,
    pixel: Option<PixelCache<T>>,
    prompt: Option<PromptCache<T>>,
    seq_len: usize,
}

#[derive(Clone, Debug)]
pub struct Policy<T: Real = f32> {
    pub config: ModelConfig,
    pub lora: Option<LoraSpec>,
    pub vision: VisionStub<T>,
    pub pixel: PixelEncoder<T>,
    pub prompt: PromptEncoder<T>,
    pub backbone: Backbone<T>,
    pub decoder: ActionDecoder<T>,
    pub stage: Stage,
    pub mask_blind: bool,
}

impl<T: Real> Policy<T> {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut p = Self {
            config: cfg.clone(),
            lora: None,
            vision: VisionStub::new(cfg)?,
            pixel: PixelEncoder::new(cfg)?,
            prompt: PromptEncoder::new(cfg)?,
            backbone: Backbone::new(cfg)?,
            decoder: ActionDecoder::new(cfg)?,
            stage: Stage::One,
            mask_blind: false,
        };
        p.set_stage(Stage::One);
        Ok(p)
    }

    pub fn attach_lora(&mut self, spec: LoraSpec) -> Result<()> {
        if self.lora.is_some() {
            return Err(Error::Config("adapters are already attached".into()));
        }
        self.backbone.attach_lora(spec.rank, spec.alpha)?;
        self.lora = Some(spec);
        Ok(())
    }

    /// Sets trainable flags for `stage`; everything else is frozen.
    pub fn set_stage(&mut self, stage: Stage) {
        self.stage = stage;
        self.set_trainable(false);
        self.decoder.set_trainable(true);
        if stage == Stage::Two {
            self.pixel.set_trainable(true);
            self.prompt.set_trainable(true);
            self.prompt.bank.trainable = false;
            for (name, p) in self.backbone.params_mut() {
                if name.contains(".lora.") {
                    p.trainable = true;
                }
            }
        }
    }

    pub fn visual_context(&self, frame: &Image) -> Result<VisualContext<T>> {
        let pyramid = self.vision.extract_pyramid(frame)?;
        let (tokens, _) = self.vision.visual_tokens(&pyramid)?;
        Ok(VisualContext { pyramid, tokens })
    }

    /// Full forward pass. The pixel segment is present iff `mask` is given,
    /// the prompt segment iff `prompts` is non-empty; the instruction
    /// template follows the same choice.
    pub fn forward(
        &self,
        ctx: &VisualContext<T>,
        instruction: &str,
        mask: Option<&Mask>,
        prompts: &[VisualPrompt],
    ) -> Result<(Tensor<T>, PolicyCache<T>)> {
        let text = render_template(instruction, mask.is_some(), !prompts.is_empty())?;
        let tok = self.backbone.tokenize(&text)?;
        let language = self.backbone.embed_tokens(&tok.ids)?;
        let (pixel_tokens, pixel_cache) = match mask {
            Some(m) => {
                let (t, c) = self.pixel.encode(&ctx.pyramid, m)?;
                (Some(t), Some(c))
            }
            None => (None, None),
        };
        let (prompt_tokens, prompt_cache) = if prompts.is_empty() {
            (None, None)
        } else {
            let (t, c) = self.prompt.encode(prompts, mask)?;
            (Some(t.tokens), Some(c))
        };
        let seq = assemble_sequence(
            &ctx.tokens,
            &language,
            &tok,
            pixel_tokens.as_ref(),
            prompt_tokens.as_ref(),
            &self.backbone.registers.value,
        )?;
        let (hidden, blocks) = self.backbone.forward(&seq.tokens)?;
        let (chunk, decoder) = self.decoder.decode(&hidden, &seq.layout)?;
        Ok((
            chunk,
            PolicyCache {
                seq_len: seq.tokens.rows(),
                layout: seq.layout,
                blocks,
                decoder,
                pixel: pixel_cache,
                prompt: prompt_cache,
            },
        ))
    }

    /// Final register hidden states on the plain-instruction path. With a
    /// frozen backbone these are fixed per frame and can be cached.
    pub fn register_states(&self, ctx: &VisualContext<T>, instruction: &str) -> Result<Tensor<T>> {
        let text = render_template(instruction, false, false)?;
        let tok = self.backbone.tokenize(&text)?;
        let language = self.backbone.embed_tokens(&tok.ids)?;
        let seq = assemble_sequence(&ctx.tokens, &language, &tok, None, None, &self.backbone.registers.value)?;
        let (hidden, _) = self.backbone.forward(&seq.tokens)?;
        Ok(hidden.slice_rows(seq.layout.registers))
    }

    /// Accumulates gradients of every trainable parameter for `d_chunk`.
    pub fn backward(&mut self, cache: &PolicyCache<T>, d_chunk: &Tensor<T>) -> Result<()> {
        let d_regs = self.decoder.backward(&cache.decoder, d_chunk);
        if cache.pixel.is_none() && cache.prompt.is_none() && !self.backbone.has_lora() {
            return Ok(());
        }
        let d = self.config.d_model;
        let mut d_hidden = Tensor::zeros(&[cache.seq_len, d]);
        for (i, r) in cache.layout.registers.clone().enumerate() {
            d_hidden.row_mut(r).copy_from_slice(d_regs.row(i));
        }
        let d_seq = self.backbone.backward(&cache.blocks, &d_hidden);
        if let Some(pc) = &cache.pixel {
            self.pixel.backward(pc, &d_seq.slice_rows(cache.layout.pixel.clone()))?;
        }
        if let Some(pc) = &cache.prompt {
            self.prompt.backward(pc, &d_seq.slice_rows(cache.layout.prompt.clone()));
        }
        Ok(())
    }

    /// True when the policy was trained to read masks and prompts.
    pub fn is_conditioned(&self) -> bool {
        self.stage == Stage::Two && !self.mask_blind
    }

    /// Normalized action chunk for one observation.
    pub fn predict(
        &self,
        frame: &Image,
        instruction: &str,
        mask: Option<&Mask>,
        prompts: &[VisualPrompt],
    ) -> Result<Tensor<T>> {
        let ctx = self.visual_context(frame)?;
        Ok(self.forward(&ctx, instruction, mask, prompts)?.0)
    }

    pub fn meta(&self, stats: Option<&NormStats>) -> PolicyMeta {
        PolicyMeta {
            model: self.config.clone(),
            lora: self.lora,
            norm_stats: stats.map(NormStats::to_flat),
            stage: self.stage,
            mask_blind: self.mask_blind,
        }
    }

    pub fn encode(&self, stats: Option<&NormStats>) -> Result<Vec<u8>> {
        let meta_json = serde_json::to_vec(&self.meta(stats))?;
        let meta = Tensor::<T>::from_vec(
            &[meta_json.len()],
            meta_json.iter().map(|&b| T::lit(b as f64)).collect(),
        )?;
        let params = self.params();
        let mut entries: Vec<(String, &Tensor<T>)> = vec![(META_TENSOR.to_string(), &meta)];
        entries.extend(params.iter().map(|(n, p)| (n.clone(), &p.value)));
        encode_checkpoint(&entries)
    }

    pub fn save(&self, path: &Path, stats: Option<&NormStats>) -> Result<()> {
        write_atomic(path, &self.encode(stats)?)
    }

    /// Rebuilds a policy from checkpoint bytes, checking that the tensor
    /// set matches the recorded configuration exactly.
    pub fn decode(bytes: &[u8]) -> Result<(Self, PolicyMeta)> {
        let mut entries = decode_checkpoint::<T>(bytes)?;
        let meta_idx = entries
            .iter()
            .position(|(n, _)| n == META_TENSOR)
            .ok_or_else(|| Error::Checkpoint("checkpoint has no metadata record".into()))?;
        let (_, meta_t) = entries.remove(meta_idx);
        let meta_bytes: Vec<u8> = meta_t.data().iter().map(|v| v.as_f64() as u8).collect();
        let meta: PolicyMeta = serde_json::from_slice(&meta_bytes)
            .map_err(|e| Error::Checkpoint(format!("unreadable metadata: {e}")))?;
        let mut policy = Self::new(&meta.model).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if let Some(spec) = meta.lora {
            policy.attach_lora(spec).map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        policy.set_stage(meta.stage);
        policy.mask_blind = meta.mask_blind;
        let mut by_name: std::collections::HashMap<String, Tensor<T>> = entries.into_iter().collect();
        for (name, p) in policy.params_mut() {
            let t = by_name
                .remove(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if t.shape() != p.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    p.shape()
                )));
            }
            p.value = t;
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
        }
        if let Some(s) = &meta.norm_stats {
            NormStats::from_flat(s).map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        Ok((policy, meta))
    }

    pub fn load(path: &Path) -> Result<(Self, PolicyMeta)> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

impl<T: Real> HasParams<T> for Policy<T> {
    fn params(&self) -> Vec<(String, &Parameter<T>)> {
        scoped("vision", self.vision.params())
            .chain(scoped("pixel", self.pixel.params()))
            .chain(scoped("prompt", self.prompt.params()))
            .chain(scoped("backbone", self.backbone.params()))
            .chain(scoped("decoder", self.decoder.params()))
            .collect()
    }
    fn params_mut(&mut self) -> Vec<(String, &mut Parameter<T>)> {
        scoped("vision", self.vision.params_mut())
            .chain(scoped("pixel", self.pixel.params_mut()))
            .chain(scoped("prompt", self.prompt.params_mut()))
            .chain(scoped("backbone", self.backbone.params_mut()))
            .chain(scoped("decoder", self.decoder.params_mut()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene() -> (Image, Mask) {
        let mut img = Image::filled(64, 64, [40, 60, 80]);
        for y in 20..30 {
            for x in 10..24 {
                img.set(x, y, [200, 30, 30]);
            }
        }
        (img, Mask::from_fn(64, 64, |x, y| (10..24).contains(&x) && (20..30).contains(&y)))
    }

    #[test]
    fn default_chunk_shape_and_determinism() {
        let p = Policy::<f32>::new(&ModelConfig::default()).unwrap();
        let (img, mask) = scene();
        let prompts = [VisualPrompt::Point { x: 0.25, y: 0.4 }];
        let a = p.predict(&img, "pick the apple", Some(&mask), &prompts).unwrap();
        let b = p.predict(&img, "pick the apple", Some(&mask), &prompts).unwrap();
        assert_eq!(a.shape(), &[8, 7]);
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn stage_trainable_sets() {
        let mut p = Policy::<f32>::new(&ModelConfig::default()).unwrap();
        p.attach_lora(LoraSpec { rank: 4, alpha: 8.0 }).unwrap();
        p.set_stage(Stage::One);
        for (n, q) in p.params() {
            assert_eq!(q.trainable, n.starts_with("decoder."), "{n}");
        }
        p.set_stage(Stage::Two);
        for (n, q) in p.params() {
            let expect = n.starts_with("decoder.")
                || n.starts_with("pixel.")
                || (n.starts_with("prompt.") && n != "prompt.bank")
                || n.contains(".lora.");
            assert_eq!(q.trainable, expect, "{n}");
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut p = Policy::<f32>::new(&ModelConfig::tiny()).unwrap();
        p.attach_lora(LoraSpec { rank: 2, alpha: 4.0 }).unwrap();
        let stats = NormStats::new([-1.0; 7], [1.0; 7]).unwrap();
        let bytes = p.encode(Some(&stats)).unwrap();
        let (q, meta) = Policy::<f32>::decode(&bytes).unwrap();
        assert_eq!(meta.norm_stats.unwrap(), stats.to_flat());
        assert_eq!(q.lora, p.lora);
        for ((na, a), (nb, b)) in p.params().iter().zip(q.params().iter()) {
            assert_eq!(na, nb);
            assert_eq!(a.value.data(), b.value.data());
        }
    }

    #[test]
    fn mismatched_checkpoint_is_rejected() {
        let p = Policy::<f32>::new(&ModelConfig::tiny()).unwrap();
        let mut bytes = p.encode(None).unwrap();
        bytes.truncate(bytes.len() - 8);
        assert!(matches!(Policy::<f32>::decode(&bytes), Err(Error::Checkpoint(_))));
        assert!(matches!(Policy::<f32>::decode(b"PXCK\x02\0\0\0"), Err(Error::Checkpoint(_))));
    }
}
