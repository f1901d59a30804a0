//! Dataset-level runner and report.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    compose_discrete_video, derive_visual_prompts, find_gripper_close, propose_region, segment_target, BackendSuite,
    Detection, Segmentation, Status, DEFAULT_EXPANSION, DEFAULT_POINTS, DEFAULT_THRESHOLD,
};
use crate::episode::{load_dataset, write_dataset, Episode};
use crate::error::{Error, Result};
use crate::nn::checkpoint::write_atomic;
use crate::raster::NormBox;

pub const REPORT_FILE: &str = "report.json";

pub type AnnotatedEpisode = (String, Episode);

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotateConfig {
    pub seed: u64,
    pub expansion: f64,
    pub threshold: f32,
    pub n_points: usize,
    /// Worker threads; ignored when the backends are single-client.
    pub jobs: usize,
}

impl Default for AnnotateConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            expansion: DEFAULT_EXPANSION,
            threshold: DEFAULT_THRESHOLD,
            n_points: DEFAULT_POINTS,
            jobs: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeEntry {
    pub episode: String,
    pub status: Status,
    pub grip_close: Option<usize>,
    pub gripper_box: Option<NormBox>,
    pub proposal: Option<NormBox>,
    pub target_text: Option<String>,
    pub confidence: Option<f32>,
    pub transitions: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusCounts {
    pub ok: usize,
    pub no_gripper_close: usize,
    pub no_gripper_found: usize,
    pub no_detection: usize,
    pub low_confidence: usize,
}

impl StatusCounts {
    fn slot(&mut self, s: Status) -> &mut usize {
        match s {
            Status::Ok => &mut self.ok,
            Status::NoGripperClose => &mut self.no_gripper_close,
            Status::NoGripperFound => &mut self.no_gripper_found,
            Status::NoDetection => &mut self.no_detection,
            Status::LowConfidence => &mut self.low_confidence,
        }
    }

    pub fn get(&self, s: Status) -> usize {
        match s {
            Status::Ok => self.ok,
            Status::NoGripperClose => self.no_gripper_close,
            Status::NoGripperFound => self.no_gripper_found,
            Status::NoDetection => self.no_detection,
            Status::LowConfidence => self.low_confidence,
        }
    }

    pub fn failed(&self) -> usize {
        self.no_gripper_close + self.no_gripper_found + self.no_detection + self.low_confidence
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationReport {
    pub total: usize,
    pub ok: usize,
    pub failed: usize,
    /// `failed / total`.
    pub filter_rate: f64,
    pub per_status: StatusCounts,
    /// Timesteps across all input episodes.
    pub transitions: usize,
    /// Annotated `(frame, mask, action)` timesteps written out.
    pub triplets: usize,
    pub seed: u64,
    pub per_episode: Vec<EpisodeEntry>,
}

impl AnnotationReport {
    fn from_entries(entries: Vec<EpisodeEntry>, seed: u64) -> Self {
        let mut per_status = StatusCounts::default();
        for e in &entries {
            *per_status.slot(e.status) += 1;
        }
        let total = entries.len();
        let failed = per_status.failed();
        Self {
            total,
            ok: per_status.ok,
            failed,
            filter_rate: if total == 0 { 0.0 } else { failed as f64 / total as f64 },
            per_status,
            transitions: entries.iter().map(|e| e.transitions).sum(),
            triplets: entries.iter().filter(|e| e.status == Status::Ok).map(|e| e.transitions).sum(),
            seed,
            per_episode: entries,
        }
    }
}

fn annotate_one(
    stem: &str,
    episode: &Episode,
    grip_close: Option<usize>,
    gripper: Option<Detection>,
    backends: &BackendSuite,
    cfg: &AnnotateConfig,
) -> Result<(EpisodeEntry, Option<Episode>)> {
    let mut entry = EpisodeEntry {
        episode: stem.to_string(),
        status: Status::NoGripperClose,
        grip_close,
        gripper_box: gripper.map(|d| d.bbox),
        proposal: None,
        target_text: None,
        confidence: None,
        transitions: episode.len(),
    };
    let Some(g) = grip_close else {
        return Ok((entry, None));
    };
    entry.status = Status::NoGripperFound;
    let Some(gripper) = gripper else {
        return Ok((entry, None));
    };
    let proposal = match propose_region(gripper.bbox, cfg.expansion) {
        Ok(p) => p,
        Err(Error::Proposal(_)) => return Ok((entry, None)),
        Err(e) => return Err(e),
    };
    entry.proposal = Some(proposal);
    entry.status = Status::NoDetection;
    let Some(text) = backends.reasoner.target(&episode.instruction)? else {
        return Ok((entry, None));
    };
    entry.target_text = Some(text.clone());
    match segment_target(&episode.frames[g], &text, proposal, backends, cfg.threshold)? {
        Segmentation::Failed(status) => {
            entry.status = status;
            Ok((entry, None))
        }
        Segmentation::Found { mask, confidence } => {
            entry.status = Status::Ok;
            entry.confidence = Some(confidence);
            let prompts = derive_visual_prompts(&mask, cfg.seed, stem, cfg.n_points)?;
            let annotated = Episode {
                masks: vec![mask; episode.len()],
                prompts,
                target_text: text,
                ..episode.clone()
            };
            Ok((entry, Some(annotated)))
        }
    }
}

/// Runs every step on in-memory episodes. Kept episodes come back in input
/// order with masks, prompts and target text filled in.
pub fn annotate_episodes(
    episodes: &[(String, Episode)],
    backends: &BackendSuite,
    cfg: &AnnotateConfig,
) -> Result<(AnnotationReport, Vec<AnnotatedEpisode>)> {
    let refs: Vec<&Episode> = episodes.iter().map(|(_, e)| e).collect();
    let (video, _) = compose_discrete_video(&refs)?;
    let frames: Vec<_> = video.iter().map(|&(_, f)| f).collect();
    let located = backends.gripper.locate(&frames)?;
    if located.len() != frames.len() {
        return Err(Error::Backend(format!(
            "gripper segmenter returned {} results for {} frames",
            located.len(),
            frames.len()
        )));
    }
    let mut gripper = vec![None; episodes.len()];
    for (&(i, _), d) in video.iter().zip(located) {
        gripper[i] = d;
    }

    let run = |i: usize| {
        let (stem, ep) = &episodes[i];
        annotate_one(stem, ep, find_gripper_close(ep), gripper[i], backends, cfg)
    };
    let results: Vec<_> = if backends.concurrent && cfg.jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.jobs)
            .build()
            .map_err(|e| Error::Pipeline(format!("cannot start worker pool: {e}")))?;
        pool.install(|| (0..episodes.len()).into_par_iter().map(run).collect::<Result<_>>())?
    } else {
        (0..episodes.len()).map(run).collect::<Result<_>>()?
    };

    let mut entries = Vec::with_capacity(results.len());
    let mut kept = Vec::new();
    for (entry, annotated) in results {
        if let Some(e) = annotated {
            kept.push((entry.episode.clone(), e));
        }
        entries.push(entry);
    }
    Ok((AnnotationReport::from_entries(entries, cfg.seed), kept))
}

/// Annotates the dataset at `input` and writes survivors plus `report.json`
/// to `output`. Output is staged next to `output` and renamed into place,
/// so a failed run leaves nothing behind.
pub fn annotate_dataset(
    input: &Path,
    output: &Path,
    backends: &BackendSuite,
    cfg: &AnnotateConfig,
    report_path: Option<&Path>,
) -> Result<AnnotationReport> {
    if output.exists() {
        let occupied = std::fs::read_dir(output)
            .map_err(|e| Error::io(output, e))?
            .next()
            .is_some();
        if occupied {
            return Err(Error::Validation(format!("output {} already exists and is not empty", output.display())));
        }
    }
    let dataset = load_dataset(input)?;
    let (report, kept) = annotate_episodes(&dataset.episodes, backends, cfg)?;
    let report_json = serde_json::to_string_pretty(&report)?;
    if let Some(p) = report_path {
        write_atomic(p, report_json.as_bytes())?;
    }
    if kept.is_empty() {
        return Err(Error::Pipeline(format!("all {} episodes were filtered out", report.total)));
    }

    let parent = match output.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    let staging = tempfile::Builder::new()
        .prefix(".annotate-")
        .tempdir_in(parent)
        .map_err(|e| Error::io(parent, e))?;
    write_dataset(staging.path(), &format!("{}-annotated", dataset.manifest.name), &kept, Some(REPORT_FILE))?;
    write_atomic(&staging.path().join(REPORT_FILE), report_json.as_bytes())?;
    if output.exists() {
        std::fs::remove_dir(output).map_err(|e| Error::io(output, e))?;
    }
    let staged = staging.keep();
    std::fs::rename(&staged, output).map_err(|e| {
        let _ = std::fs::remove_dir_all(&staged);
        Error::io(output, e)
    })?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotate::{Detector, MaskPredictor};
    use crate::raster::{Image, Mask, PixelBounds};

    struct FixedDetector(Vec<Detection>);
    impl Detector for FixedDetector {
        fn detect(&self, _: &Image, _: &str) -> Result<Vec<Detection>> {
            Ok(self.0.clone())
        }
    }

    /// Fills the box exactly.
    struct BoxMask;
    impl MaskPredictor for BoxMask {
        fn predict(&self, frame: &Image, bbox: NormBox) -> Result<(Mask, f32)> {
            let s = bbox.pixel_span(frame.width(), frame.height());
            let m = Mask::from_fn(frame.width(), frame.height(), |x, y| {
                (s.x0..=s.x1).contains(&x) && (s.y0..=s.y1).contains(&y)
            });
            Ok((m, 1.0))
        }
    }

    fn suite(dets: Vec<Detection>) -> BackendSuite {
        BackendSuite {
            detector: Box::new(FixedDetector(dets)),
            masks: Box::new(BoxMask),
            ..BackendSuite::oracle()
        }
    }

    fn b(x0: usize, y0: usize, x1: usize, y1: usize) -> NormBox {
        NormBox::from_bounds(PixelBounds { x0, y0, x1, y1 }, 20, 20)
    }

    #[test]
    fn inside_candidate_beats_more_confident_outside_one() {
        let inside = Detection { bbox: b(2, 2, 5, 5), confidence: 0.9 };
        let outside = Detection { bbox: b(12, 12, 16, 16), confidence: 0.95 };
        let s = suite(vec![outside, inside]);
        let got = segment_target(&Image::new(20, 20), "cup", b(0, 0, 8, 8), &s, 0.3).unwrap();
        match got {
            Segmentation::Found { mask, confidence } => {
                assert_eq!(confidence, 0.9);
                assert_eq!(mask.bounds(), Some(PixelBounds { x0: 2, y0: 2, x1: 5, y1: 5 }));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn threshold_and_absence_statuses() {
        let weak = Detection { bbox: b(2, 2, 5, 5), confidence: 0.1 };
        let s = suite(vec![weak, weak]);
        let region = b(0, 0, 8, 8);
        assert_eq!(
            segment_target(&Image::new(20, 20), "cup", region, &s, 0.3).unwrap(),
            Segmentation::Failed(Status::LowConfidence)
        );
        assert_eq!(
            segment_target(&Image::new(20, 20), "cup", region, &suite(vec![]), 0.3).unwrap(),
            Segmentation::Failed(Status::NoDetection)
        );
    }

    #[test]
    fn half_inside_rule() {
        // 4 of 8 columns inside keeps the candidate; 3 of 8 does not.
        let region = b(0, 0, 7, 19);
        let half = Detection { bbox: b(4, 2, 11, 5), confidence: 0.8 };
        let less = Detection { bbox: b(5, 2, 12, 5), confidence: 0.8 };
        let img = Image::new(20, 20);
        assert!(matches!(
            segment_target(&img, "cup", region, &suite(vec![half]), 0.3).unwrap(),
            Segmentation::Found { .. }
        ));
        assert_eq!(
            segment_target(&img, "cup", region, &suite(vec![less]), 0.3).unwrap(),
            Segmentation::Failed(Status::NoDetection)
        );
    }

    #[test]
    fn report_accounting() {
        let mk = |s| EpisodeEntry {
            episode: "e".into(),
            status: s,
            grip_close: None,
            gripper_box: None,
            proposal: None,
            target_text: None,
            confidence: None,
            transitions: 4,
        };
        let r = AnnotationReport::from_entries(
            vec![mk(Status::Ok), mk(Status::NoDetection), mk(Status::Ok), mk(Status::LowConfidence), mk(Status::Ok)],
            0,
        );
        assert_eq!((r.total, r.ok, r.failed), (5, 3, 2));
        assert_eq!(r.filter_rate, 0.4);
        assert_eq!(r.per_status.get(Status::NoDetection), 1);
        assert_eq!((r.transitions, r.triplets), (20, 12));
    }
}
