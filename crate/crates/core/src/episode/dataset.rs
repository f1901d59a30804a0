//! Dataset directories: `episodes/*.pxvl` plus `manifest.json`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{compute_norm_stats, read_episode, write_episode, Episode, NormStats};
use crate::error::{Error, Result};
use crate::nn::checkpoint::write_atomic;

pub const EPISODES_DIR: &str = "episodes";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub episode_count: usize,
    /// 7 lows followed by 7 highs.
    pub norm_stats: Vec<f32>,
    pub pipeline_report_path: Option<String>,
}

impl DatasetManifest {
    pub fn stats(&self) -> Result<NormStats> {
        NormStats::from_flat(&self.norm_stats)
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    /// `(file stem, episode)` in file-name order.
    pub episodes: Vec<(String, Episode)>,
}

impl Dataset {
    pub fn stats(&self) -> Result<NormStats> {
        self.manifest.stats()
    }
}

/// Writes every episode and a manifest whose statistics cover all actions.
pub fn write_dataset(
    dir: &Path,
    name: &str,
    episodes: &[(String, Episode)],
    pipeline_report_path: Option<&str>,
) -> Result<DatasetManifest> {
    if episodes.is_empty() {
        return Err(Error::Validation("refusing to write an empty dataset".into()));
    }
    let stats = compute_norm_stats(episodes.iter().flat_map(|(_, e)| e.actions.iter()))?;
    let ep_dir = dir.join(EPISODES_DIR);
    std::fs::create_dir_all(&ep_dir).map_err(|e| Error::io(&ep_dir, e))?;
    for (stem, e) in episodes {
        write_episode(e, &ep_dir.join(format!("{stem}.pxvl")))?;
    }
    let manifest = DatasetManifest {
        name: name.to_string(),
        episode_count: episodes.len(),
        norm_stats: stats.to_flat(),
        pipeline_report_path: pipeline_report_path.map(str::to_string),
    };
    write_atomic(&dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(manifest)
}

pub(crate) fn episode_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let ep_dir = dir.join(EPISODES_DIR);
    let mut files: Vec<PathBuf> = std::fs::read_dir(&ep_dir)
        .map_err(|e| Error::io(&ep_dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pxvl"))
        .collect();
    files.sort();
    Ok(files)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    let mut episodes = Vec::new();
    for path in episode_files(dir)? {
        let stem = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        episodes.push((stem, read_episode(&path)?));
    }
    if episodes.len() != manifest.episode_count {
        return Err(Error::Format(format!(
            "manifest lists {} episodes but {} files are present",
            manifest.episode_count,
            episodes.len()
        )));
    }
    Ok(Dataset { manifest, episodes })
}
