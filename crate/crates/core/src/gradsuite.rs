//! Finite-difference checks for every differentiable module, run in f64
//! on small seeded instances.
//!
//! Each check reduces the module output to a scalar with a fixed random
//! weighting `Σ w ⊙ y` (or the L1 loss for the decoder objective) and
//! exposes the module inputs as extra parameters so their gradients are
//! checked too.

use std::fmt;
use std::str::FromStr;

use crate::config::ModelConfig;
use crate::decoder::{l1_loss, ActionDecoder};
use crate::episode::VisualPrompt;
use crate::error::{Error, Result};
use crate::nn::rng::{normal, stream, uniform};
use crate::nn::{
    gradcheck, scoped, Differentiable, GradCheckConfig, GradReport, HasParams, Linear, Parameter, Tensor,
    TransformerBlock,
};
use crate::pixel::PixelEncoder;
use crate::policy::{LoraSpec, Policy, Stage, VisualContext};
use crate::prompt::PromptEncoder;
use crate::raster::{Image, Mask};
use crate::vision::{FeatureGrid, FeaturePyramid, VisionStub};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradModule {
    Linear,
    Visual,
    Pixel,
    Prompt,
    Decoder,
    DecoderL1,
    Backbone,
    Lora,
    Policy,
}

impl GradModule {
    pub const ALL: [GradModule; 9] = [
        GradModule::Linear,
        GradModule::Visual,
        GradModule::Pixel,
        GradModule::Prompt,
        GradModule::Decoder,
        GradModule::DecoderL1,
        GradModule::Backbone,
        GradModule::Lora,
        GradModule::Policy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GradModule::Linear => "linear",
            GradModule::Visual => "visual",
            GradModule::Pixel => "pixel",
            GradModule::Prompt => "prompt",
            GradModule::Decoder => "decoder",
            GradModule::DecoderL1 => "decoder-l1",
            GradModule::Backbone => "backbone",
            GradModule::Lora => "lora",
            GradModule::Policy => "policy",
        }
    }
}

impl fmt::Display for GradModule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GradModule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Validation(format!("unknown gradcheck module {s:?}")))
    }
}

fn weighted(y: &Tensor<f64>, w: &Tensor<f64>) -> f64 {
    y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

fn with_input<'a>(
    input: Vec<(String, &'a Parameter<f64>)>,
    module: Vec<(String, &'a Parameter<f64>)>,
) -> Vec<(String, &'a Parameter<f64>)> {
    scoped("input", input).chain(scoped("module", module)).collect()
}

fn with_input_mut<'a>(
    input: Vec<(String, &'a mut Parameter<f64>)>,
    module: Vec<(String, &'a mut Parameter<f64>)>,
) -> Vec<(String, &'a mut Parameter<f64>)> {
    scoped("input", input).chain(scoped("module", module)).collect()
}

/// Gives every adapter a non-zero up factor so the down factor has a
/// non-trivial gradient.
fn randomize_up(params: Vec<(String, &mut Parameter<f64>)>, seed: u64) {
    for (name, p) in params {
        if name.ends_with("lora.up") {
            p.value = normal(p.shape(), 0.3, &mut stream(seed, &name));
        }
    }
}

struct LinearCheck {
    layer: Linear<f64>,
    x: Parameter<f64>,
    w: Tensor<f64>,
}

impl HasParams<f64> for LinearCheck {
    fn params(&self) -> Vec<(String, &Parameter<f64>)> {
        with_input(vec![("x".into(), &self.x)], self.layer.params())
    }
    fn params_mut(&mut self) -> Vec<(String, &mut Parameter<f64>)> {
        with_input_mut(vec![("x".into(), &mut self.x)], self.layer.params_mut())
    }
}

impl Differentiable<f64> for LinearCheck {
    fn objective(&self) -> Result<f64> {
        Ok(weighted(&self.layer.forward(&self.x.value)?, &self.w))
    }
    fn backward(&mut self) -> Result<f64> {
        let y = self.layer.forward(&self.x.value)?;
        let dx = self.layer.backward(&self.x.value, &self.w);
        self.x.accumulate(dx.data());
        Ok(weighted(&y, &self.w))
    }
}

struct VisualCheck {
    stub: VisionStub<f64>,
    coarse: Parameter<f64>,
    side: usize,
    w: Tensor<f64>,
}

impl VisualCheck {
    fn pyramid(&self) -> FeaturePyramid<f64> {
        FeaturePyramid {
            levels: vec![FeatureGrid {
                height: self.side,
                width: self.side,
                features: self.coarse.value.clone(),
            }],
        }
    }
}

impl HasParams<f64> for VisualCheck {
    fn params(&self) -> Vec<(String, &Parameter<f64>)> {
        with_input(vec![("coarsest".into(), &self.coarse)], self.stub.params())
    }
    fn params_mut(&mut self) -> Vec<(String, &mut Parameter<f64>)> {
        with_input_mut(vec![("coarsest".into(), &mut self.coarse)], self.stub.params_mut())
    }
}

impl Differentiable<f64> for VisualCheck {
    fn objective(&self) -> Result<f64> {
        Ok(weighted(&self.stub.visual_tokens(&self.pyramid())?.0, &self.w))
    }
    fn backward(&mut self) -> Result<f64> {
        let (y, cache) = self.stub.visual_tokens(&self.pyramid())?;
        let dx = self.stub.visual_tokens_backward(&cache, &self.w);
        self.coarse.accumulate(dx.data());
        Ok(weighted(&y, &self.w))
    }
}

struct PixelCheck {
    enc: PixelEncoder<f64>,
    levels: Vec<Parameter<f64>>,
    sides: Vec<usize>,
    weights: Vec<Vec<f64>>,
    w: Tensor<f64>,
}

impl PixelCheck {
    fn pyramid(&self) -> FeaturePyramid<f64> {
        FeaturePyramid {
            levels: self
                .levels
                .iter()
                .zip(&self.sides)
                .map(|(p, &s)| FeatureGrid {
                    height: s,
                    width: s,
                    features: p.value.clone(),
                })
                .collect(),
        }
    }
}

impl HasParams<f64> for PixelCheck {
    fn params(&self) -> Vec<(String, &Parameter<f64>)> {
        let inputs = self.levels.iter().enumerate().map(|(i, p)| (format!("level.{i}"), p)).collect();
        with_input(inputs, self.enc.params())
    }
    fn params_mut(&mut self) -> Vec<(String, &mut Parameter<f64>)> {
        let inputs = self
            .levels
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (format!("level.{i}"), p))
            .collect();
        with_input_mut(inputs, self.enc.params_mut())
    }
}

impl Differentiable<f64> for PixelCheck {
    fn objective(&self) -> Result<f64> {
        let (y, _) = self.enc.encode_weighted(&self.pyramid(), self.weights.clone())?;
        Ok(weighted(&y, &self.w))
    }
    fn backward(&mut self) -> Result<f64> {
        let (y, cache) = self.enc.encode_weighted(&self.pyramid(), self.weights.clone())?;
        let dfeat = self.enc.backward(&cache, &self.w)?;
        for (p, d) in self.levels.iter_mut().zip(&dfeat) {
            p.accumulate(d.data());
        }
        Ok(weighted(&y, &self.w))
    }
}

struct PromptCheck {
    enc: PromptEncoder<f64>,
    prompts: Vec<VisualPrompt>,
    mask: Mask,
    w: Tensor<f64>,
}

impl HasParams<f64> for PromptCheck {
    fn params(&self) -> Vec<(String, &Parameter<f64>)> {
        scoped("module", self.enc.params()).collect()
    }
    fn params_mut(&mut self) -> Vec<(String, &mut Parameter<f64>)> {
        scoped("module", self.enc.params_mut()).collect()
    }
}

impl Differentiable<f64> for PromptCheck {
    fn objective(&self) -> Result<f64> {
        let (y, _) = self.enc.encode(&self.prompts, Some(&self.mask))?;
        Ok(weighted(&y.tokens, &self.w))
    }
    fn backward(&mut self) -> Result<f64> {
        let (y, cache) = self.enc.encode(&self.prompts, Some(&self.mask))?;
        self.enc.backward(&cache, &self.w);
        Ok(weighted(&y.tokens, &self.w))
    }
}

struct DecoderCheck {
    dec: ActionDecoder<f64>,
    regs: Parameter<f64>,
    w: Tensor<f64>,
    /// When set, the objective is the mean L1 against this target.
    target: Option<Tensor<f64>>,
}

impl DecoderCheck {
    fn loss(&self, y: &Tensor<f64>) -> Result<(f64, Tensor<f64>)> {
        match &self.target {
            Some(t) => l1_loss(y, t, true),
            None => Ok((weighted(y, &self.w), self.w.clone())),
        }
    }
}

impl HasParams<f64> for DecoderCheck {
    fn params(&self) -> Vec<(String, &Parameter<f64>)> {
        with_input(vec![("registers".into(), &self.regs)], self.dec.params())
    }
    fn params_mut(&mut self) -> Vec<(String, &mut Parameter<f64>)> {
        with_input_mut(vec![("registers".into(), &mut self.regs)], self.dec.params_mut())
    }
}

impl Differentiable<f64> for DecoderCheck {
    fn objective(&self) -> Result<f64> {
        let (y, _) = self.dec.decode_registers(&self.regs.value)?;
        Ok(self.loss(&y)?.0)
    }
    fn backward(&mut self) -> Result<f64> {
        let (y, cache) = self.dec.decode_registers(&self.regs.value)?;
        let (loss, dy) = self.loss(&y)?;
        let dx = self.dec.backward(&cache, &dy);
        self.regs.accumulate(dx.data());
        Ok(loss)
    }
}

struct BlockCheck {
    block: TransformerBlock<f64>,
    x: Parameter<f64>,
    w: Tensor<f64>,
}

impl HasParams<f64> for BlockCheck {
    fn params(&self) -> Vec<(String, &Parameter<f64>)> {
        with_input(vec![("x".into(), &self.x)], self.block.params())
    }
    fn params_mut(&mut self) -> Vec<(String, &mut Parameter<f64>)> {
        with_input_mut(vec![("x".into(), &mut self.x)], self.block.params_mut())
    }
}

impl Differentiable<f64> for BlockCheck {
    fn objective(&self) -> Result<f64> {
        Ok(weighted(&self.block.forward(&self.x.value)?.0, &self.w))
    }
    fn backward(&mut self) -> Result<f64> {
        let (y, cache) = self.block.forward(&self.x.value)?;
        let dx = self.block.backward(&cache, &self.w);
        self.x.accumulate(dx.data());
        Ok(weighted(&y, &self.w))
    }
}

struct PolicyCheck {
    policy: Policy<f64>,
    ctx: VisualContext<f64>,
    mask: Mask,
    prompts: Vec<VisualPrompt>,
    w: Tensor<f64>,
}

impl HasParams<f64> for PolicyCheck {
    fn params(&self) -> Vec<(String, &Parameter<f64>)> {
        self.policy.params()
    }
    fn params_mut(&mut self) -> Vec<(String, &mut Parameter<f64>)> {
        self.policy.params_mut()
    }
}

impl Differentiable<f64> for PolicyCheck {
    fn objective(&self) -> Result<f64> {
        let (y, _) = self.policy.forward(&self.ctx, "stack the red block", Some(&self.mask), &self.prompts)?;
        Ok(weighted(&y, &self.w))
    }
    fn backward(&mut self) -> Result<f64> {
        let (y, cache) = self.policy.forward(&self.ctx, "stack the red block", Some(&self.mask), &self.prompts)?;
        self.policy.backward(&cache, &self.w)?;
        Ok(weighted(&y, &self.w))
    }
}

fn check_config(seed: u64) -> ModelConfig {
    ModelConfig {
        seed,
        ..ModelConfig::tiny()
    }
}

/// A mask that covers some cell at every level of the tiny pyramid.
fn blob_mask(size: usize, seed: u64) -> Mask {
    let mut rng = stream(seed, "gradsuite.mask");
    let c = uniform::<f64, _>(&[2], 0.25, &mut rng);
    let (cx, cy) = ((0.5 + c.data()[0]) * size as f64, (0.5 + c.data()[1]) * size as f64);
    let r = size as f64 * 0.3;
    Mask::from_fn(size, size, |x, y| {
        let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
        dx * dx + dy * dy <= r * r
    })
}

fn check_prompts() -> Vec<VisualPrompt> {
    vec![
        VisualPrompt::Point { x: 0.3, y: 0.7 },
        VisualPrompt::Box { x1: 0.1, y1: 0.2, x2: 0.6, y2: 0.5 },
        VisualPrompt::Line { x1: 0.2, y1: 0.9, x2: 0.8, y2: 0.1 },
        VisualPrompt::MaskRef,
    ]
}

fn random_image(size: usize, seed: u64) -> Image {
    let data = uniform::<f64, _>(&[size * size * 3], 1.0, &mut stream(seed, "gradsuite.image"))
        .data()
        .iter()
        .map(|v| ((v + 1.0) * 127.5) as u8)
        .collect();
    Image::from_raw(size, size, data).expect("sized buffer")
}

/// Runs the finite-difference check for one module at one seed.
pub fn check_module(module: GradModule, seed: u64, gc: &GradCheckConfig) -> Result<GradReport> {
    let cfg = check_config(seed);
    let mut rng = stream(seed, &format!("gradsuite.{module}"));
    let gc = GradCheckConfig { seed, ..*gc };
    match module {
        GradModule::Linear => {
            let mut op = LinearCheck {
                layer: Linear::new(5, 4, &mut rng),
                x: Parameter::new(normal(&[3, 5], 1.0, &mut rng)),
                w: normal(&[3, 4], 1.0, &mut rng),
            };
            op.layer.bias.value = normal(&[4], 0.5, &mut rng);
            gradcheck(&mut op, &gc)
        }
        GradModule::Visual => {
            let mut stub = VisionStub::new(&cfg)?;
            stub.set_trainable(true);
            stub.patch_proj.trainable = false;
            stub.level_projs.iter_mut().for_each(|p| p.trainable = false);
            let side = cfg.grid_side(cfg.levels() - 1);
            let d = *cfg.level_dims.last().unwrap();
            let mut op = VisualCheck {
                stub,
                coarse: Parameter::new(normal(&[side * side, d], 1.0, &mut rng)),
                side,
                w: normal(&[side * side, cfg.d_model], 1.0, &mut rng),
            };
            gradcheck(&mut op, &gc)
        }
        GradModule::Pixel => {
            let enc = PixelEncoder::new(&cfg)?;
            let sides: Vec<usize> = (0..cfg.levels()).map(|i| cfg.grid_side(i)).collect();
            let levels: Vec<Parameter<f64>> = sides
                .iter()
                .zip(&cfg.level_dims)
                .map(|(&s, &d)| Parameter::new(normal(&[s * s, d], 1.0, &mut rng)))
                .collect();
            let mask = blob_mask(cfg.image_size, seed);
            let weights = sides
                .iter()
                .map(|&s| crate::pixel::downsample_mask(&mask, s, s))
                .collect::<Result<Vec<_>>>()?;
            let mut op = PixelCheck {
                enc,
                levels,
                sides,
                weights,
                w: normal(&[cfg.pixel_tokens, cfg.d_model], 1.0, &mut rng),
            };
            gradcheck(&mut op, &gc)
        }
        GradModule::Prompt => {
            let prompts = check_prompts();
            let mut op = PromptCheck {
                enc: PromptEncoder::new(&cfg)?,
                w: normal(&[1 + 2 + cfg.line_samples + 1, cfg.d_model], 1.0, &mut rng),
                prompts,
                mask: blob_mask(cfg.image_size, seed),
            };
            gradcheck(&mut op, &gc)
        }
        GradModule::Decoder | GradModule::DecoderL1 => {
            let dec = ActionDecoder::new(&cfg)?;
            let regs = Parameter::new(normal(&[cfg.chunk, cfg.d_model], 1.0, &mut rng));
            let target = if module == GradModule::DecoderL1 {
                let (y, _) = dec.decode_registers(&regs.value)?;
                // Keep every residual well away from the kink at zero.
                let offsets = uniform::<f64, _>(&[cfg.chunk, 7], 1.0, &mut rng);
                let t: Vec<f64> = y
                    .data()
                    .iter()
                    .zip(offsets.data())
                    .map(|(&p, &o)| p + o.signum() * (0.05 + o.abs()))
                    .collect();
                Some(Tensor::from_vec(&[cfg.chunk, 7], t)?)
            } else {
                None
            };
            let mut op = DecoderCheck {
                dec,
                regs,
                w: normal(&[cfg.chunk, 7], 1.0, &mut rng),
                target,
            };
            gradcheck(&mut op, &gc)
        }
        GradModule::Backbone | GradModule::Lora => {
            let mut block = TransformerBlock::new(cfg.d_model, cfg.heads, cfg.mlp_hidden, &mut rng)?;
            if module == GradModule::Lora {
                block.set_trainable(false);
                for (i, lin) in block.linears_mut().into_iter().enumerate() {
                    lin.attach_lora(2, 4.0, &mut stream(seed, &format!("gradsuite.lora.{i}")))?;
                }
                randomize_up(block.params_mut(), seed);
            }
            let mut op = BlockCheck {
                block,
                x: Parameter::new(normal(&[6, cfg.d_model], 1.0, &mut rng)),
                w: normal(&[6, cfg.d_model], 1.0, &mut rng),
            };
            gradcheck(&mut op, &gc)
        }
        GradModule::Policy => {
            let mut policy = Policy::new(&cfg)?;
            policy.attach_lora(LoraSpec { rank: 2, alpha: 4.0 })?;
            policy.set_stage(Stage::Two);
            randomize_up(policy.backbone.params_mut(), seed);
            let ctx = policy.visual_context(&random_image(cfg.image_size, seed))?;
            let mut op = PolicyCheck {
                policy,
                ctx,
                mask: blob_mask(cfg.image_size, seed),
                prompts: check_prompts(),
                w: normal(&[cfg.chunk, 7], 1.0, &mut rng),
            };
            gradcheck(&mut op, &gc)
        }
    }
}

/// Every module at every seed, in a fixed order.
pub fn run_suite(modules: &[GradModule], seeds: &[u64], gc: &GradCheckConfig) -> Result<Vec<(GradModule, u64, GradReport)>> {
    let mut out = Vec::new();
    for &m in modules {
        for &s in seeds {
            out.push((m, s, check_module(m, s, gc)?));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_module_passes_at_one_seed() {
        for m in GradModule::ALL {
            let r = check_module(m, 1, &GradCheckConfig::default()).unwrap();
            assert!(r.passed(), "{m}: {:?}", r.failures().collect::<Vec<_>>());
            assert!(!r.entries.is_empty());
        }
    }

    #[test]
    fn names_round_trip() {
        for m in GradModule::ALL {
            assert_eq!(m.name().parse::<GradModule>().unwrap(), m);
        }
        assert!("nope".parse::<GradModule>().is_err());
    }
}
