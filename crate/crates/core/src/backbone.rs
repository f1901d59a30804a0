//! Hash tokenizer, sequence assembly and the transformer backbone.

use std::ops::Range;

use crate::config::ModelConfig;
use crate::episode::{ANNOTATION_MARKER, PROMPT_MARKER};
use crate::error::{Error, Result};
use crate::nn::rng::{fnv1a32, normal, stream};
use crate::nn::{scoped, BlockCache, HasParams, Parameter, Real, Tensor, TransformerBlock};

/// Token ids of an instruction plus where the marker segments splice in.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedInstruction {
    pub ids: Vec<usize>,
    /// Language-token index the pixel segment is inserted at.
    pub annotation_at: Option<usize>,
    /// Language-token index the prompt segment is inserted at.
    pub prompt_at: Option<usize>,
}

fn hash_words(text: &str, vocab: usize, out: &mut Vec<usize>) {
    for word in text.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()) {
        out.push(fnv1a32(word.to_lowercase().as_bytes()) as usize % vocab);
    }
}

/// Lowercases, splits on anything that is not alphanumeric and hashes each
/// word into `vocab` buckets. Markers are recorded, not embedded, and must
/// trail every word with the annotation marker first.
pub fn tokenize_instruction(text: &str, vocab: usize) -> Result<TokenizedInstruction> {
    let mut ids = Vec::new();
    let mut annotation_at = None;
    let mut prompt_at = None;
    let mut rest = text;
    loop {
        let next = [(ANNOTATION_MARKER, true), (PROMPT_MARKER, false)]
            .into_iter()
            .filter_map(|(m, ann)| rest.find(m).map(|pos| (pos, m, ann)))
            .min_by_key(|&(pos, ..)| pos);
        let Some((pos, marker, is_annotation)) = next else {
            hash_words(rest, vocab, &mut ids);
            break;
        };
        hash_words(&rest[..pos], vocab, &mut ids);
        let slot = if is_annotation { &mut annotation_at } else { &mut prompt_at };
        if slot.is_some() {
            return Err(Error::Contract(format!("marker {marker} appears twice")));
        }
        *slot = Some(ids.len());
        rest = &rest[pos + marker.len()..];
    }
    if annotation_at.is_some_and(|p| p != ids.len()) || prompt_at.is_some_and(|p| p != ids.len()) {
        return Err(Error::Contract("segment markers must follow all instruction words".into()));
    }
    if let (Some(_), Some(_)) = (annotation_at, prompt_at) {
        let a = text.find(ANNOTATION_MARKER).unwrap();
        let p = text.find(PROMPT_MARKER).unwrap();
        if p < a {
            return Err(Error::Contract("annotation marker must precede the prompt marker".into()));
        }
    }
    if ids.is_empty() {
        return Err(Error::Validation("instruction has no words".into()));
    }
    Ok(TokenizedInstruction {
        ids,
        annotation_at,
        prompt_at,
    })
}

/// Contiguous segment ranges of an assembled sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceLayout {
    pub visual: Range<usize>,
    pub language: Range<usize>,
    pub pixel: Range<usize>,
    pub prompt: Range<usize>,
    pub registers: Range<usize>,
}

impl SequenceLayout {
    pub fn len(&self) -> usize {
        self.registers.end
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn segments(&self) -> [Range<usize>; 5] {
        [
            self.visual.clone(),
            self.language.clone(),
            self.pixel.clone(),
            self.prompt.clone(),
            self.registers.clone(),
        ]
    }
}

#[derive(Clone, Debug)]
pub struct EmbeddingSequence<T: Real = f32> {
    pub tokens: Tensor<T>,
    pub layout: SequenceLayout,
}

/// Concatenates visual, language, pixel, prompt and register tokens. A
/// pixel or prompt segment is only accepted where the instruction carries
/// the matching marker.
pub fn assemble_sequence<T: Real>(
    visual: &Tensor<T>,
    language: &Tensor<T>,
    splice: &TokenizedInstruction,
    pixel: Option<&Tensor<T>>,
    prompt: Option<&Tensor<T>>,
    registers: &Tensor<T>,
) -> Result<EmbeddingSequence<T>> {
    if pixel.is_some() != splice.annotation_at.is_some() {
        return Err(Error::Contract("pixel segment and annotation marker disagree".into()));
    }
    if prompt.is_some() != splice.prompt_at.is_some() {
        return Err(Error::Contract("prompt segment and prompt marker disagree".into()));
    }
    let d = visual.dims2()?.1;
    let empty = Tensor::zeros(&[0, d]);
    let parts = [visual, language, pixel.unwrap_or(&empty), prompt.unwrap_or(&empty), registers];
    for p in parts {
        if p.shape().len() != 2 || p.cols() != d {
            return Err(Error::Dimension(format!(
                "segment of shape {:?} in a width-{d} sequence",
                p.shape()
            )));
        }
    }
    let mut start = 0;
    let ranges: Vec<Range<usize>> = parts
        .iter()
        .map(|p| {
            let r = start..start + p.rows();
            start = r.end;
            r
        })
        .collect();
    Ok(EmbeddingSequence {
        tokens: Tensor::concat_rows(&parts)?,
        layout: SequenceLayout {
            visual: ranges[0].clone(),
            language: ranges[1].clone(),
            pixel: ranges[2].clone(),
            prompt: ranges[3].clone(),
            registers: ranges[4].clone(),
        },
    })
}

/// Transformer stand-in for the language model. Base weights are frozen;
/// only attached low-rank adapters train.
#[derive(Clone, Debug)]
pub struct Backbone<T: Real = f32> {
    pub embed: Parameter<T>,
    pub registers: Parameter<T>,
    pub blocks: Vec<TransformerBlock<T>>,
    seed: u64,
}

impl<T: Real> Backbone<T> {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let embed = Parameter::frozen(normal(&[cfg.vocab, cfg.d_model], 0.5, &mut stream(cfg.seed, "backbone.embed")));
        let registers = Parameter::frozen(normal(
            &[cfg.chunk, cfg.d_model],
            0.5,
            &mut stream(cfg.seed, "backbone.registers"),
        ));
        let mut blocks = (0..cfg.layers)
            .map(|i| {
                let mut rng = stream(cfg.seed, &format!("backbone.block.{i}"));
                TransformerBlock::new(cfg.d_model, cfg.heads, cfg.mlp_hidden, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        blocks.iter_mut().for_each(|b| b.set_trainable(false));
        Ok(Self {
            embed,
            registers,
            blocks,
            seed: cfg.seed,
        })
    }

    pub fn vocab(&self) -> usize {
        self.embed.shape()[0]
    }

    pub fn has_lora(&self) -> bool {
        self.blocks.iter().any(|b| b.attn.q.lora.is_some())
    }

    /// Adds a fresh adapter to every linear layer of every block.
    pub fn attach_lora(&mut self, rank: usize, alpha: f64) -> Result<()> {
        for (b, block) in self.blocks.iter_mut().enumerate() {
            for (i, lin) in block.linears_mut().into_iter().enumerate() {
                lin.attach_lora(rank, alpha, &mut stream(self.seed, &format!("backbone.lora.{b}.{i}")))?;
            }
        }
        Ok(())
    }

    pub fn tokenize(&self, text: &str) -> Result<TokenizedInstruction> {
        tokenize_instruction(text, self.vocab())
    }

    pub fn embed_tokens(&self, ids: &[usize]) -> Result<Tensor<T>> {
        let d = self.embed.shape()[1];
        let mut out = Tensor::zeros(&[ids.len(), d]);
        for (i, &id) in ids.iter().enumerate() {
            if id >= self.vocab() {
                return Err(Error::Dimension(format!("token id {id} outside vocabulary")));
            }
            out.row_mut(i).copy_from_slice(self.embed.value.row(id));
        }
        Ok(out)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<BlockCache<T>>)> {
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, c) = block.forward(&h)?;
            caches.push(c);
            h = y;
        }
        Ok((h, caches))
    }

    pub fn backward(&mut self, caches: &[BlockCache<T>], dy: &Tensor<T>) -> Tensor<T> {
        let mut d = dy.clone();
        for (block, cache) in self.blocks.iter_mut().zip(caches).rev() {
            d = block.backward(cache, &d);
        }
        d
    }
}

impl<T: Real> HasParams<T> for Backbone<T> {
    fn params(&self) -> Vec<(String, &Parameter<T>)> {
        let mut out = vec![("embed".to_string(), &self.embed), ("registers".to_string(), &self.registers)];
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(scoped(&format!("blocks.{i}"), b.params()));
        }
        out
    }
    fn params_mut(&mut self) -> Vec<(String, &mut Parameter<T>)> {
        let mut out = vec![
            ("embed".to_string(), &mut self.embed),
            ("registers".to_string(), &mut self.registers),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.extend(scoped(&format!("blocks.{i}"), b.params_mut()));
        }
        out
    }
}
