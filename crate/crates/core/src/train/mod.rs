//! Two-stage tuning with an L1 objective, plus evaluation and single-step
//! inference.
//!
//! Stage 1 trains only the action decoder on the plain-instruction path.
//! Since everything upstream is frozen, register states are computed once
//! per sample. Stage 2 adds low-rank adapters to the backbone and trains
//! them together with the pixel encoder, the prompt encoder and the
//! decoder; visual features are frozen and cached.

mod config;
mod eval;

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use config::TrainConfig;
pub use eval::{infer_action, DimMetrics, EvalReport};

use crate::config::ModelConfig;
use crate::decoder::l1_loss;
use crate::episode::{load_dataset, normalize_action, Episode, NormStats, ACTION_DIM};
use crate::error::{Error, Result};
use crate::nn::checkpoint::write_atomic;
use crate::nn::rng::stream;
use crate::nn::{matrix_rank, LoraAdapter, param_digest, AdamConfig, HasParams, OptimizerState, Tensor};
use crate::policy::{Policy, Stage, VisualContext};

pub const CHECKPOINT_FILE: &str = "policy.pxck";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";

/// One training window: the frame at `start` and the next `N_c` actions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Sample {
    pub episode: usize,
    pub start: usize,
}

/// Every window start `0..=T - N_c`; shorter episodes give one padded
/// window.
pub fn windows(episodes: &[(String, Episode)], chunk: usize) -> Vec<Sample> {
    episodes
        .iter()
        .enumerate()
        .flat_map(|(i, (_, e))| {
            let last = e.len().saturating_sub(chunk);
            (0..=last).map(move |start| Sample { episode: i, start })
        })
        .collect()
}

/// Normalized `N_c × 7` targets; the final action repeats past the end.
pub fn target_chunk(e: &Episode, start: usize, chunk: usize, stats: &NormStats) -> Tensor<f32> {
    let mut data = Vec::with_capacity(chunk * ACTION_DIM);
    for k in 0..chunk {
        let a = &e.actions[(start + k).min(e.len() - 1)];
        data.extend_from_slice(&normalize_action(a, stats));
    }
    Tensor::from_vec(&[chunk, ACTION_DIM], data).expect("chunk shape")
}

enum Inputs {
    Registers(Vec<Tensor<f32>>),
    Contexts(Vec<VisualContext<f32>>),
}

/// Samples with their targets and cached frozen-path inputs.
struct Prepared<'a> {
    episodes: &'a [(String, Episode)],
    samples: Vec<Sample>,
    targets: Vec<Tensor<f32>>,
    inputs: Inputs,
}

impl<'a> Prepared<'a> {
    fn new(policy: &Policy, episodes: &'a [(String, Episode)], stats: &NormStats, registers_only: bool) -> Result<Self> {
        let chunk = policy.config.chunk;
        let samples = windows(episodes, chunk);
        let targets = samples
            .iter()
            .map(|s| target_chunk(&episodes[s.episode].1, s.start, chunk, stats))
            .collect();
        let mut contexts = Vec::with_capacity(samples.len());
        let mut registers = Vec::new();
        for s in &samples {
            let (_, e) = &episodes[s.episode];
            let ctx = policy.visual_context(&e.frames[s.start])?;
            if registers_only {
                registers.push(policy.register_states(&ctx, &e.instruction)?);
            } else {
                contexts.push(ctx);
            }
        }
        let inputs = if registers_only {
            Inputs::Registers(registers)
        } else {
            Inputs::Contexts(contexts)
        };
        Ok(Self {
            episodes,
            samples,
            targets,
            inputs,
        })
    }

    /// Accumulates gradients for sample `i` scaled by `scale` and returns
    /// its unscaled loss.
    fn loss_and_grad(&self, policy: &mut Policy, i: usize, scale: f32) -> Result<f32> {
        let s = self.samples[i];
        let (_, e) = &self.episodes[s.episode];
        match &self.inputs {
            Inputs::Registers(regs) => {
                let (pred, cache) = policy.decoder.decode_registers(&regs[i])?;
                let (loss, grad) = l1_loss(&pred, &self.targets[i], true)?;
                policy.decoder.backward(&cache, &grad.map(|g| g * scale));
                Ok(loss)
            }
            Inputs::Contexts(ctxs) => {
                let (mask, prompts) = conditioning(policy, e, s.start);
                let (pred, cache) = policy.forward(&ctxs[i], &e.instruction, mask, prompts)?;
                let (loss, grad) = l1_loss(&pred, &self.targets[i], true)?;
                policy.backward(&cache, &grad.map(|g| g * scale))?;
                Ok(loss)
            }
        }
    }

    fn predict(&self, policy: &Policy, i: usize) -> Result<Tensor<f32>> {
        let s = self.samples[i];
        let (_, e) = &self.episodes[s.episode];
        match &self.inputs {
            Inputs::Registers(regs) => Ok(policy.decoder.decode_registers(&regs[i])?.0),
            Inputs::Contexts(ctxs) => {
                let (mask, prompts) = conditioning(policy, e, s.start);
                Ok(policy.forward(&ctxs[i], &e.instruction, mask, prompts)?.0)
            }
        }
    }
}

fn conditioning<'e>(
    policy: &Policy,
    e: &'e Episode,
    t: usize,
) -> (Option<&'e crate::raster::Mask>, &'e [crate::episode::VisualPrompt]) {
    if policy.is_conditioned() {
        (Some(&e.masks[t]), &e.prompts[..])
    } else {
        (None, &[])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub stage: Stage,
    pub steps: usize,
    pub samples: usize,
    pub initial_loss: f64,
    /// Mean L1 over the whole training set after the last step.
    pub final_loss: f64,
    pub frozen_digest_before: String,
    pub frozen_digest_after: String,
    pub trainable_digest_before: String,
    pub trainable_digest_after: String,
    pub wall_secs: f64,
}

pub struct TrainOutcome {
    pub policy: Policy,
    pub stats: NormStats,
    /// Mean batch loss per step.
    pub losses: Vec<f32>,
    pub summary: TrainSummary,
}

fn frozen_digest(policy: &Policy) -> String {
    param_digest(&policy.params(), |_, p| !p.trainable)
}

fn trainable_digest(policy: &Policy) -> String {
    param_digest(&policy.params(), |_, p| p.trainable)
}

/// Builds the starting policy for `cfg`: a fresh one or `init`, staged and
/// with adapters attached for stage 2.
pub fn initial_policy(cfg: &TrainConfig, init: Option<Policy>) -> Result<Policy> {
    let mut policy = match init {
        Some(p) => p,
        None => Policy::new(&ModelConfig {
            seed: cfg.seed,
            ..ModelConfig::default()
        })?,
    };
    if cfg.stage == Stage::Two {
        match policy.lora {
            None => policy.attach_lora(cfg.lora())?,
            Some(spec) if spec != cfg.lora() => {
                return Err(Error::Config(format!(
                    "initial checkpoint has adapters {spec:?}, config asks for {:?}",
                    cfg.lora()
                )))
            }
            Some(_) => {}
        }
    }
    policy.set_stage(cfg.stage);
    policy.mask_blind = cfg.stage == Stage::Two && cfg.mask_blind;
    Ok(policy)
}

/// Trains on in-memory episodes. `stats` normalizes the targets.
pub fn train_episodes(
    cfg: &TrainConfig,
    episodes: &[(String, Episode)],
    stats: &NormStats,
    init: Option<Policy>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if episodes.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    if cfg.stage == Stage::Two {
        if let Some((stem, _)) = episodes.iter().find(|(_, e)| !e.is_annotated()) {
            return Err(Error::Config(format!("stage 2 needs annotated episodes; {stem} is not")));
        }
    }
    let started = Instant::now();
    let mut policy = initial_policy(cfg, init)?;
    let prepared = Prepared::new(&policy, episodes, stats, cfg.stage == Stage::One)?;
    let frozen_before = frozen_digest(&policy);
    let trainable_before = trainable_digest(&policy);
    let initial_loss = evaluate_prepared(&policy, &prepared)?.mean_l1;

    let mut opt = OptimizerState::<f32>::new(AdamConfig::with_lr(cfg.lr));
    let n = prepared.samples.len();
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut epoch = 0u64;
    let scale = 1.0 / cfg.batch as f32;
    let mut losses = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        policy.zero_grad();
        let mut batch_loss = 0.0f32;
        for _ in 0..cfg.batch {
            if cursor == order.len() {
                order = (0..n).collect();
                order.shuffle(&mut stream(cfg.seed, &format!("train.epoch.{epoch}")));
                epoch += 1;
                cursor = 0;
            }
            batch_loss += prepared.loss_and_grad(&mut policy, order[cursor], scale)?;
            cursor += 1;
        }
        opt.step(policy.params_mut());
        losses.push(batch_loss * scale);
    }

    let frozen_after = frozen_digest(&policy);
    if frozen_after != frozen_before {
        return Err(Error::Contract("a frozen parameter changed during training".into()));
    }
    let final_loss = evaluate_prepared(&policy, &prepared)?.mean_l1;
    let summary = TrainSummary {
        stage: cfg.stage,
        steps: cfg.steps,
        samples: n,
        initial_loss,
        final_loss,
        frozen_digest_before: frozen_before,
        frozen_digest_after: frozen_after,
        trainable_digest_before: trainable_before,
        trainable_digest_after: trainable_digest(&policy),
        wall_secs: started.elapsed().as_secs_f64(),
    };
    Ok(TrainOutcome {
        policy,
        stats: *stats,
        losses,
        summary,
    })
}

/// Loads the dataset and initial checkpoint named by `cfg`, trains, and
/// writes the checkpoint, `metrics.csv` and `summary.json` under `cfg.out`.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let dataset = load_dataset(&cfg.data)?;
    let stats = dataset.stats()?;
    let init = match &cfg.init {
        Some(p) => Some(Policy::load(p)?.0),
        None => None,
    };
    let outcome = train_episodes(cfg, &dataset.episodes, &stats, init)?;
    write_outputs(&cfg.out, &outcome)?;
    Ok(outcome)
}

pub fn write_outputs(out: &Path, outcome: &TrainOutcome) -> Result<PathBuf> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let ckpt = out.join(CHECKPOINT_FILE);
    outcome.policy.save(&ckpt, Some(&outcome.stats))?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in outcome.losses.iter().enumerate() {
        csv.push_str(&format!("{},{l}\n", i + 1));
    }
    write_atomic(&out.join(METRICS_FILE), csv.as_bytes())?;
    write_atomic(
        &out.join(SUMMARY_FILE),
        serde_json::to_string_pretty(&outcome.summary)?.as_bytes(),
    )?;
    Ok(ckpt)
}

/// Matrix rank of every materialized adapter update, computed in f64.
pub fn adapter_ranks(policy: &Policy) -> Vec<(String, usize)> {
    let mut out = Vec::new();
    for (b, block) in policy.backbone.blocks.iter().enumerate() {
        for (i, lin) in block.linears().into_iter().enumerate() {
            if let Some(a) = &lin.lora {
                let wide = LoraAdapter::<f64>::from_factors(a.down.value.cast(), a.up.value.cast(), a.alpha)
                    .expect("factors of a live adapter");
                out.push((format!("backbone.blocks.{b}.linear.{i}"), matrix_rank(&wide.delta(), 1e-9)));
            }
        }
    }
    out
}

/// Mean and percentile L1 per action dimension over every window, in
/// normalized units. Masks and prompts are used iff the policy was trained
/// with them.
pub fn evaluate(policy: &Policy, episodes: &[(String, Episode)], stats: &NormStats) -> Result<EvalReport> {
    if episodes.is_empty() {
        return Err(Error::Config("evaluation dataset is empty".into()));
    }
    let prepared = Prepared::new(policy, episodes, stats, !policy.is_conditioned())?;
    evaluate_prepared(policy, &prepared)
}

fn evaluate_prepared(policy: &Policy, prepared: &Prepared) -> Result<EvalReport> {
    let preds = (0..prepared.samples.len())
        .map(|i| prepared.predict(policy, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_residuals(&preds, &prepared.targets))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episode::compute_norm_stats;
    use crate::synthetic::{discriminative_task, linear_task};

    fn stats_of(eps: &[(String, Episode)]) -> NormStats {
        compute_norm_stats(eps.iter().flat_map(|(_, e)| e.actions.iter())).unwrap()
    }

    #[test]
    fn window_enumeration() {
        let eps = linear_task(2, 64, 8, 0);
        assert_eq!(windows(&eps, 8).len(), 2);
        assert_eq!(windows(&eps, 3).len(), 12);
        let w = windows(&eps, 10);
        assert_eq!(w.len(), 2);
        let t = target_chunk(&eps[0].1, 0, 10, &stats_of(&eps));
        assert_eq!(t.row(9), t.row(7));
    }

    #[test]
    fn stage1_changes_only_the_decoder_and_is_reproducible() {
        let eps = linear_task(6, 64, 8, 1);
        let stats = stats_of(&eps);
        let cfg = TrainConfig {
            steps: 5,
            batch: 2,
            ..TrainConfig::stage1("unused", "unused")
        };
        let a = train_episodes(&cfg, &eps, &stats, None).unwrap();
        let b = train_episodes(&cfg, &eps, &stats, None).unwrap();
        assert_eq!(a.losses, b.losses);
        let fresh = initial_policy(&cfg, None).unwrap();
        for ((name, p0), (_, p1)) in fresh.params().iter().zip(a.policy.params()) {
            if p0.value.data() != p1.value.data() {
                assert!(name.starts_with("decoder."), "{name} changed");
            }
        }
        assert_ne!(a.summary.trainable_digest_before, a.summary.trainable_digest_after);
    }

    #[test]
    fn stage2_rejects_unannotated_data() {
        let eps = linear_task(2, 64, 8, 1);
        let cfg = TrainConfig {
            skip_stage1: true,
            steps: 1,
            ..TrainConfig::stage2("unused", "unused")
        };
        assert!(matches!(
            train_episodes(&cfg, &eps, &stats_of(&eps), None),
            Err(Error::Config(_))
        ));
        assert!(matches!(train_episodes(&cfg, &[], &stats_of(&eps), None), Err(Error::Config(_))));
    }

    #[test]
    fn stage2_keeps_base_weights_and_low_rank() {
        let eps = discriminative_task(4, 64, 8, 2);
        let cfg = TrainConfig {
            skip_stage1: true,
            steps: 3,
            batch: 2,
            rank: 2,
            ..TrainConfig::stage2("unused", "unused")
        };
        let out = train_episodes(&cfg, &eps, &stats_of(&eps), None).unwrap();
        let fresh = initial_policy(&cfg, None).unwrap();
        for ((name, p0), (_, p1)) in fresh.params().iter().zip(out.policy.params()) {
            if name.starts_with("backbone.") && !name.contains(".lora.") {
                assert_eq!(p0.value.data(), p1.value.data(), "{name}");
            }
        }
        let ranks = adapter_ranks(&out.policy);
        assert_eq!(ranks.len(), 12);
        assert!(ranks.iter().all(|(_, r)| *r <= 2));
        assert!(ranks.iter().any(|(_, r)| *r > 0));
    }
}
