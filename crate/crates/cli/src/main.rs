//! `pixact` command-line tool.
//!
//! Exit status is 0 on success, 1 for invalid input or usage and 2 for
//! internal failures.

mod overlay;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use pixact::annotate::{annotate_dataset, external, AnnotateConfig, BackendSuite, DEFAULT_EXPANSION, DEFAULT_THRESHOLD};
use pixact::episode::{load_dataset, read_episode, write_dataset, Episode, NormStats, VisualPrompt};
use pixact::gradsuite::{run_suite, GradModule};
use pixact::nn::{GradCheckConfig, HasParams};
use pixact::policy::Policy;
use pixact::raster::{Image, Mask};
use pixact::synthetic::{discriminative_task, generate_corpus, linear_task, CorpusConfig};
use pixact::train::{evaluate, infer_action, train, TrainConfig};
use pixact::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "pixact", version, about = "Pixel-aware action policy toolkit")]
struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Task {
    Corpus,
    Linear,
    Discriminative,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Backend {
    Synthetic,
    External,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset.
    GenSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        episodes: usize,
        #[arg(long, value_enum, default_value_t = Task::Corpus)]
        task: Task,
        /// Fraction of corpus scenes whose named object is absent.
        #[arg(long, default_value_t = 0.2)]
        unsolvable: f64,
        #[arg(long, default_value_t = 12)]
        steps: usize,
    },
    /// Add masks, prompts and target text to a dataset.
    Annotate {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, value_enum, default_value_t = Backend::Synthetic)]
        backend: Backend,
        /// Command line of the external backend, split on whitespace.
        #[arg(long)]
        backend_cmd: Option<String>,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f32,
        #[arg(long, default_value_t = DEFAULT_EXPANSION)]
        expansion: f64,
    },
    /// Run one training stage from a key=value config file.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Per-dimension L1 of a checkpoint on a dataset.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Predict one action chunk.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Observation taken from an episode file.
        #[arg(long, conflicts_with = "frame")]
        episode: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        step: usize,
        /// Observation as a PNG.
        #[arg(long)]
        frame: Option<PathBuf>,
        /// Binary mask as a PNG.
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        instruction: Option<String>,
        /// point:x,y | line:x1,y1,x2,y2 | box:x1,y1,x2,y2 | mask
        #[arg(long = "prompt")]
        prompts: Vec<String>,
        /// Supplies the mask from prompts when none is given.
        #[arg(long, value_enum, default_value_t = Backend::Synthetic)]
        backend: Backend,
        #[arg(long)]
        backend_cmd: Option<String>,
        #[arg(long)]
        json: bool,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// Module name or `all`.
        #[arg(long, default_value = "all")]
        module: String,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        /// Number of consecutive seeds starting at --seed.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
    /// Summarize an episode, dataset or checkpoint.
    Inspect {
        #[arg(long, group = "target")]
        episode: Option<PathBuf>,
        #[arg(long, group = "target")]
        dataset: Option<PathBuf>,
        #[arg(long, group = "target")]
        checkpoint: Option<PathBuf>,
    },
    /// Render a frame with its mask and prompts to PNG.
    Overlay {
        #[arg(long)]
        episode: PathBuf,
        #[arg(long, default_value_t = 0)]
        step: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        scale: usize,
    },
    /// Answer backend requests on stdin with the synthetic oracle.
    #[command(hide = true)]
    ServeBackend,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_user_error() { 1 } else { 2 })
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).map_err(io_err(path))
}

fn backends(kind: Backend, cmd: Option<&str>) -> Result<BackendSuite> {
    match kind {
        Backend::Synthetic => Ok(BackendSuite::oracle()),
        Backend::External => {
            let words: Vec<String> = cmd.unwrap_or("").split_whitespace().map(str::to_string).collect();
            let (program, args) = words
                .split_first()
                .ok_or_else(|| Error::Config("--backend external needs --backend-cmd".into()))?;
            BackendSuite::external(program, args)
        }
    }
}

#[derive(Serialize)]
struct TruthEntry<'a> {
    episode: &'a str,
    solvable: bool,
    target: &'a str,
    grip_close: usize,
    has_twin: bool,
    mask_pixels: usize,
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    match cli.command {
        Command::GenSynthetic {
            out,
            episodes,
            task,
            unsolvable,
            steps,
        } => {
            let (name, eps) = match task {
                Task::Corpus => {
                    let scenes = generate_corpus(&CorpusConfig {
                        episodes,
                        steps,
                        unsolvable_fraction: unsolvable,
                        seed,
                        ..CorpusConfig::default()
                    })?;
                    let truth: Vec<_> = scenes
                        .iter()
                        .map(|s| TruthEntry {
                            episode: &s.stem,
                            solvable: s.truth.solvable,
                            target: &s.truth.target_name,
                            grip_close: s.truth.grip_close,
                            has_twin: s.truth.has_twin,
                            mask_pixels: s.truth.target_mask.as_ref().map_or(0, Mask::count),
                        })
                        .collect();
                    std::fs::create_dir_all(&out).map_err(io_err(&out))?;
                    write_json(&out.join("truth.json"), &truth)?;
                    let eps: Vec<_> = scenes.into_iter().map(|s| (s.stem, s.episode)).collect();
                    ("synthetic-corpus", eps)
                }
                Task::Linear => ("linear", linear_task(episodes, 64, 8, seed)),
                Task::Discriminative => ("discriminative", discriminative_task(episodes, 64, 8, seed)),
            };
            write_dataset(&out, name, &eps, None)?;
            println!("wrote {} episodes to {}", eps.len(), out.display());
        }
        Command::Annotate {
            input,
            output,
            backend,
            backend_cmd,
            report,
            jobs,
            threshold,
            expansion,
        } => {
            let suite = backends(backend, backend_cmd.as_deref())?;
            let cfg = AnnotateConfig {
                seed,
                expansion,
                threshold,
                jobs: jobs.max(1),
                ..AnnotateConfig::default()
            };
            let r = annotate_dataset(&input, &output, &suite, &cfg, report.as_deref())?;
            println!(
                "annotated {} of {} episodes, filter rate {:.3}",
                r.ok, r.total, r.filter_rate
            );
            let s = &r.per_status;
            println!(
                "no_gripper_close {} no_gripper_found {} no_detection {} low_confidence {}",
                s.no_gripper_close, s.no_gripper_found, s.no_detection, s.low_confidence
            );
            println!("transitions {} triplets {}", r.transitions, r.triplets);
        }
        Command::Train { config } => {
            let mut cfg = TrainConfig::load(&config)?;
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            let out = train(&cfg)?;
            let s = &out.summary;
            println!(
                "stage {:?}: {} steps over {} samples, loss {:.5} -> {:.5}",
                s.stage, s.steps, s.samples, s.initial_loss, s.final_loss
            );
            println!("frozen digest {}", s.frozen_digest_after);
            println!("wrote {}", cfg.out.display());
        }
        Command::Evaluate { checkpoint, data, json } => {
            let (policy, meta) = Policy::<f32>::load(&checkpoint)?;
            let dataset = load_dataset(&data)?;
            let stats = match &meta.norm_stats {
                Some(s) => NormStats::from_flat(s)?,
                None => dataset.stats()?,
            };
            let r = evaluate(&policy, &dataset.episodes, &stats)?;
            println!("samples {} mean L1 {:.6}", r.samples, r.mean_l1);
            for (d, m) in r.per_dim.iter().enumerate() {
                println!("dim {d}: mean {:.6} p50 {:.6} p90 {:.6}", m.mean, m.p50, m.p90);
            }
            if let Some(p) = json {
                write_json(&p, &r)?;
            }
        }
        Command::Infer {
            checkpoint,
            episode,
            step,
            frame,
            mask,
            instruction,
            prompts,
            backend,
            backend_cmd,
            json,
        } => {
            let (policy, meta) = Policy::<f32>::load(&checkpoint)?;
            let stats = NormStats::from_flat(
                meta.norm_stats
                    .as_deref()
                    .ok_or_else(|| Error::Checkpoint("checkpoint carries no normalization statistics".into()))?,
            )?;
            let prompts = prompts.iter().map(|p| parse_prompt(p)).collect::<Result<Vec<_>>>()?;
            let ep = episode.as_deref().map(read_episode).transpose()?;
            let (frame, ep_mask, ep_instruction) = match (&ep, &frame) {
                (Some(e), _) => {
                    if step >= e.len() {
                        return Err(Error::Validation(format!("step {step} is past the episode end {}", e.len())));
                    }
                    (e.frames[step].clone(), Some(e.masks[step].clone()), Some(e.instruction.clone()))
                }
                (None, Some(p)) => (read_png(p)?, None, None),
                (None, None) => return Err(Error::Validation("infer needs --episode or --frame".into())),
            };
            let instruction = instruction
                .or(ep_instruction)
                .ok_or_else(|| Error::Validation("infer needs --instruction".into()))?;
            // A mask comes from --mask, or from the episode when a mask prompt asks for it.
            let wants_mask = prompts.contains(&VisualPrompt::MaskRef);
            let mask = match mask {
                Some(p) => Some(read_mask(&p)?),
                None if wants_mask => ep_mask.filter(|m| !m.is_empty()),
                None => None,
            };
            let suite = backends(backend, backend_cmd.as_deref())?;
            let chunk = infer_action(
                &policy,
                &stats,
                &frame,
                &instruction,
                mask.as_ref(),
                &prompts,
                Some(suite.masks.as_ref()),
            )?;
            if json {
                println!("{}", serde_json::to_string(&chunk)?);
            } else {
                for a in &chunk {
                    let row: Vec<String> = a.iter().map(|v| format!("{v:.6}")).collect();
                    println!("{}", row.join(" "));
                }
            }
        }
        Command::Gradcheck { module, tol, seeds } => {
            let modules: Vec<GradModule> = if module == "all" {
                GradModule::ALL.to_vec()
            } else {
                vec![module.parse()?]
            };
            let seed_list: Vec<u64> = (seed..seed + seeds.max(1)).collect();
            let gc = GradCheckConfig {
                tol,
                ..GradCheckConfig::default()
            };
            let mut failed = 0;
            for (m, s, report) in run_suite(&modules, &seed_list, &gc)? {
                for e in &report.entries {
                    let ok = e.rel_error <= tol;
                    failed += usize::from(!ok);
                    println!(
                        "{} {m} seed {s} {}: rel {:.3e} over {} coords",
                        if ok { "PASS" } else { "FAIL" },
                        e.name,
                        e.rel_error,
                        e.checked
                    );
                }
            }
            if failed > 0 {
                return Err(Error::Gradient(format!("{failed} parameter groups exceeded tolerance {tol}")));
            }
        }
        Command::Inspect {
            episode,
            dataset,
            checkpoint,
        } => {
            if let Some(p) = episode {
                describe_episode(&read_episode(&p)?);
            } else if let Some(d) = dataset {
                let ds = load_dataset(&d)?;
                println!("dataset {} with {} episodes", ds.manifest.name, ds.manifest.episode_count);
                let annotated = ds.episodes.iter().filter(|(_, e)| e.is_annotated()).count();
                let steps: usize = ds.episodes.iter().map(|(_, e)| e.len()).sum();
                println!("annotated {annotated}, timesteps {steps}");
                println!("norm stats {:?}", ds.manifest.norm_stats);
            } else if let Some(c) = checkpoint {
                let (policy, meta) = Policy::<f32>::load(&c)?;
                let params = policy.params();
                let total: usize = params.iter().map(|(_, p)| p.len()).sum();
                println!("stage {:?}, adapters {:?}, mask blind {}", meta.stage, meta.lora, meta.mask_blind);
                println!("{} tensors, {total} values", params.len());
                println!("model {}", serde_json::to_string(&meta.model)?);
            } else {
                return Err(Error::Validation("inspect needs --episode, --dataset or --checkpoint".into()));
            }
        }
        Command::Overlay {
            episode,
            step,
            out,
            scale,
        } => {
            let e = read_episode(&episode)?;
            if step >= e.len() {
                return Err(Error::Validation(format!("step {step} is past the episode end {}", e.len())));
            }
            let mask = Some(&e.masks[step]).filter(|m| !m.is_empty());
            let img = overlay::render(&e.frames[step], mask, &e.prompts, scale);
            write_png(&out, &img)?;
            println!("wrote {}", out.display());
        }
        Command::ServeBackend => {
            let stdin = std::io::stdin();
            let stdout = std::io::stdout();
            external::serve(&BackendSuite::oracle(), stdin.lock(), stdout.lock())?;
            std::io::stdout().flush().map_err(io_err(Path::new("<stdout>")))?;
        }
    }
    Ok(())
}

fn describe_episode(e: &Episode) {
    println!("{} steps of {}x{}", e.len(), e.width(), e.height());
    println!("instruction: {}", e.instruction);
    if !e.target_text.is_empty() {
        println!("target: {}", e.target_text);
    }
    let masked = e.masks.iter().filter(|m| !m.is_empty()).count();
    println!("masks on {masked} steps, {} prompts, annotated {}", e.prompts.len(), e.is_annotated());
    for p in &e.prompts {
        println!("  {p:?}");
    }
}

fn parse_prompt(text: &str) -> Result<VisualPrompt> {
    let bad = || Error::Validation(format!("cannot parse prompt {text:?}"));
    if text == "mask" {
        return Ok(VisualPrompt::MaskRef);
    }
    let (kind, rest) = text.split_once(':').ok_or_else(bad)?;
    let v: Vec<f32> = rest
        .split(',')
        .map(|s| s.trim().parse::<f32>().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    let p = match (kind, v.as_slice()) {
        ("point", &[x, y]) => VisualPrompt::Point { x, y },
        ("line", &[x1, y1, x2, y2]) => VisualPrompt::Line { x1, y1, x2, y2 },
        ("box", &[x1, y1, x2, y2]) => VisualPrompt::Box { x1, y1, x2, y2 },
        _ => return Err(bad()),
    };
    p.validate()?;
    Ok(p)
}

fn read_png(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Image::from_raw(w as usize, h as usize, img.into_raw())
}

fn read_mask(path: &Path) -> Result<Mask> {
    let img = image::open(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
        .to_luma8();
    let (w, h) = img.dimensions();
    let bits = img.into_raw().into_iter().map(|v| if v > 127 { 255 } else { 0 }).collect();
    Mask::from_raw(w as usize, h as usize, bits)
}

fn write_png(path: &Path, img: &Image) -> Result<()> {
    let buf = image::RgbImage::from_raw(img.width() as u32, img.height() as u32, img.as_raw().to_vec())
        .ok_or_else(|| Error::Validation("image buffer size mismatch".into()))?;
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::other(e),
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prompt_syntax() {
        assert_eq!(parse_prompt("point:0.5,0.25").unwrap(), VisualPrompt::Point { x: 0.5, y: 0.25 });
        assert_eq!(
            parse_prompt("box:0.1,0.2,0.3,0.4").unwrap(),
            VisualPrompt::Box { x1: 0.1, y1: 0.2, x2: 0.3, y2: 0.4 }
        );
        assert_eq!(parse_prompt("mask").unwrap(), VisualPrompt::MaskRef);
        for bad in ["point:1", "circle:0,0", "line:0,0,1", "point:2,0", "box:a,b,c,d"] {
            assert!(parse_prompt(bad).is_err(), "{bad}");
        }
    }
}
