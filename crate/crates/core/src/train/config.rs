//! Flat `key=value` stage configuration.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::policy::{LoraSpec, Stage};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub rank: usize,
    pub alpha: f64,
    pub data: PathBuf,
    pub out: PathBuf,
    /// Train stage 2 from a fresh policy instead of a stage-1 checkpoint.
    pub skip_stage1: bool,
    pub init: Option<PathBuf>,
    /// Stage 2 without masks and prompts.
    pub mask_blind: bool,
}

impl TrainConfig {
    pub fn stage1(data: impl Into<PathBuf>, out: impl Into<PathBuf>) -> Self {
        Self {
            stage: Stage::One,
            steps: 2000,
            batch: 8,
            lr: 5e-4,
            seed: 0,
            rank: 4,
            alpha: 8.0,
            data: data.into(),
            out: out.into(),
            skip_stage1: false,
            init: None,
            mask_blind: false,
        }
    }

    pub fn stage2(data: impl Into<PathBuf>, out: impl Into<PathBuf>) -> Self {
        Self {
            stage: Stage::Two,
            steps: 4000,
            lr: 1e-3,
            ..Self::stage1(data, out)
        }
    }

    pub fn lora(&self) -> LoraSpec {
        LoraSpec {
            rank: self.rank,
            alpha: self.alpha,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let get = |key: &str| pairs.iter().rev().find(|(k, _)| k == key).map(|(_, v)| v.as_str());
        let stage = match get("stage") {
            None | Some("1") => Stage::One,
            Some("2") => Stage::Two,
            Some(other) => return Err(Error::Config(format!("stage must be 1 or 2, got {other:?}"))),
        };
        let data = get("data").ok_or_else(|| Error::Config("missing key: data".into()))?;
        let out = get("out").ok_or_else(|| Error::Config("missing key: out".into()))?;
        let mut cfg = match stage {
            Stage::One => Self::stage1(data, out),
            Stage::Two => Self::stage2(data, out),
        };
        for (k, v) in &pairs {
            let bad = |what: &str| Error::Config(format!("{k}: expected {what}, got {v:?}"));
            match k.as_str() {
                "stage" | "data" | "out" => {}
                "steps" => cfg.steps = v.parse().map_err(|_| bad("an integer"))?,
                "batch" => cfg.batch = v.parse().map_err(|_| bad("an integer"))?,
                "lr" => cfg.lr = v.parse().map_err(|_| bad("a number"))?,
                "seed" => cfg.seed = v.parse().map_err(|_| bad("an integer"))?,
                "rank" => cfg.rank = v.parse().map_err(|_| bad("an integer"))?,
                "alpha" => cfg.alpha = v.parse().map_err(|_| bad("a number"))?,
                "skip_stage1" => cfg.skip_stage1 = v.parse().map_err(|_| bad("true or false"))?,
                "mask_blind" => cfg.mask_blind = v.parse().map_err(|_| bad("true or false"))?,
                "init" => cfg.init = Some(PathBuf::from(v)),
                _ => return Err(Error::Config(format!("unknown key {k:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.stage == Stage::Two {
            if self.rank == 0 || !(self.alpha > 0.0) {
                return Err(Error::Config("stage 2 needs rank > 0 and alpha > 0".into()));
            }
            if self.init.is_none() && !self.skip_stage1 {
                return Err(Error::Config(
                    "stage 2 needs init=<stage-1 checkpoint> or skip_stage1=true".into(),
                ));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_with_stage_defaults() {
        let c = TrainConfig::parse("stage=2\ndata=d\nout=o\n# note\nskip_stage1 = true\nrank=32\n").unwrap();
        assert_eq!(c.stage, Stage::Two);
        assert_eq!((c.steps, c.batch, c.lr, c.rank), (4000, 8, 1e-3, 32));
        assert!(c.skip_stage1);
        let c = TrainConfig::parse("data=d\nout=o").unwrap();
        assert_eq!((c.stage, c.steps, c.lr), (Stage::One, 2000, 5e-4));
    }

    #[test]
    fn rejects_bad_input() {
        for text in [
            "data=d",
            "data=d\nout=o\nsteps=many",
            "data=d\nout=o\ncolor=red",
            "data=d\nout=o\nstage=3",
            "data=d\nout=o\nstage=2",
            "data=d\nout=o\nbatch=0",
            "just words",
        ] {
            assert!(matches!(TrainConfig::parse(text), Err(Error::Config(_))), "{text}");
        }
    }
}
