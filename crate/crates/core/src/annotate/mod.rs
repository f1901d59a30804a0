//! Two-stage automatic annotation: gripper-anchored region proposals, then
//! text-grounded segmentation of the target with confidence filtering and
//! visual prompt sampling.
//!
//! Perception and reasoning are reached through the backend traits below.
//! [`oracle`] answers from rendered synthetic scenes; [`external`] talks to a
//! subprocess.

pub mod external;
pub mod oracle;
mod pipeline;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::episode::{Episode, VisualPrompt, GRIPPER_DIM};
use crate::error::{Error, Result};
use crate::nn::rng::stream;
use crate::raster::{Image, Mask, NormBox};

pub use pipeline::{
    annotate_dataset, annotate_episodes, AnnotateConfig, AnnotatedEpisode, AnnotationReport, EpisodeEntry, StatusCounts,
    REPORT_FILE,
};

pub const DEFAULT_EXPANSION: f64 = 1.5;
pub const DEFAULT_THRESHOLD: f32 = 0.3;
/// Minimum fraction of a candidate mask that must lie inside the proposal.
pub const MIN_INSIDE_FRACTION: f64 = 0.5;
pub const DEFAULT_POINTS: usize = 3;
pub const LINE_TRIES: usize = 1000;

/// A box with a score in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: NormBox,
    pub confidence: f32,
}

/// Locates the gripper in each frame of a discrete video.
pub trait GripperSegmenter: Send + Sync {
    fn locate(&self, frames: &[&Image]) -> Result<Vec<Option<Detection>>>;
}

/// Names the first object the robot has to grasp.
pub trait TargetReasoner: Send + Sync {
    fn target(&self, instruction: &str) -> Result<Option<String>>;
}

/// Open-vocabulary boxes for `text`.
pub trait Detector: Send + Sync {
    fn detect(&self, frame: &Image, text: &str) -> Result<Vec<Detection>>;
}

/// Box-prompted segmentation.
pub trait MaskPredictor: Send + Sync {
    fn predict(&self, frame: &Image, bbox: NormBox) -> Result<(Mask, f32)>;
}

pub struct BackendSuite {
    pub gripper: Box<dyn GripperSegmenter>,
    pub reasoner: Box<dyn TargetReasoner>,
    pub detector: Box<dyn Detector>,
    pub masks: Box<dyn MaskPredictor>,
    /// False when the backends serve one client at a time.
    pub concurrent: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    NoGripperClose,
    NoGripperFound,
    NoDetection,
    LowConfidence,
}

impl Status {
    pub const ALL: [Status; 5] = [
        Status::Ok,
        Status::NoGripperClose,
        Status::NoGripperFound,
        Status::NoDetection,
        Status::LowConfidence,
    ];
}

/// First timestep whose gripper channel reads closed.
pub fn find_gripper_close(episode: &Episode) -> Option<usize> {
    episode.actions.iter().position(|a| a[GRIPPER_DIM] >= 0.5)
}

/// Key frames of every episode with a gripper-close state, in input order,
/// and the indices of the episodes without one.
pub fn compose_discrete_video<'a>(episodes: &[&'a Episode]) -> Result<(Vec<(usize, &'a Image)>, Vec<usize>)> {
    let mut frames = Vec::new();
    let mut excluded = Vec::new();
    for (i, e) in episodes.iter().enumerate() {
        match find_gripper_close(e) {
            Some(g) => frames.push((i, &e.frames[g])),
            None => excluded.push(i),
        }
    }
    if frames.is_empty() {
        return Err(Error::Pipeline(format!(
            "none of {} episodes reaches a gripper-close state",
            episodes.len()
        )));
    }
    Ok((frames, excluded))
}

/// The gripper box scaled about its center and clamped to the image.
pub fn propose_region(gripper: NormBox, expansion: f64) -> Result<NormBox> {
    let valid = |v: f32| (0.0..=1.0).contains(&v);
    if ![gripper.x1, gripper.y1, gripper.x2, gripper.y2].into_iter().all(valid) || !(expansion > 0.0) {
        return Err(Error::Proposal(format!("invalid gripper box {gripper:?} or expansion {expansion}")));
    }
    let out = gripper.scaled(expansion);
    if gripper.area() <= 0.0 || out.area() <= 0.0 {
        return Err(Error::Proposal(format!("degenerate gripper box {gripper:?}")));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub enum Segmentation {
    Found { mask: Mask, confidence: f32 },
    Failed(Status),
}

/// Detects `text`, keeps candidates whose mask lies mostly inside the
/// proposal, and returns the most confident one above `threshold`.
pub fn segment_target(
    frame: &Image,
    text: &str,
    proposal: NormBox,
    backends: &BackendSuite,
    threshold: f32,
) -> Result<Segmentation> {
    if text.trim().is_empty() {
        return Err(Error::Validation("target text is empty".into()));
    }
    let mut survivors = Vec::new();
    for det in backends.detector.detect(frame, text)? {
        let (mask, _) = backends.masks.predict(frame, det.bbox)?;
        if proposal.coverage(&mask) >= MIN_INSIDE_FRACTION {
            survivors.push((det.confidence, mask));
        }
    }
    if survivors.is_empty() {
        return Ok(Segmentation::Failed(Status::NoDetection));
    }
    let best = survivors
        .into_iter()
        .filter(|(c, _)| *c >= threshold)
        .fold(None::<(f32, Mask)>, |best, cand| match best {
            Some(b) if b.0 >= cand.0 => Some(b),
            _ => Some(cand),
        });
    Ok(match best {
        Some((confidence, mask)) => Segmentation::Found { mask, confidence },
        None => Segmentation::Failed(Status::LowConfidence),
    })
}

/// `n_points` points on mask pixel centers, one line with both endpoints in
/// the mask and the tight bounding box, drawn from a stream keyed by
/// `(seed, key)`.
pub fn derive_visual_prompts(mask: &Mask, seed: u64, key: &str, n_points: usize) -> Result<Vec<VisualPrompt>> {
    let pixels = mask.pixels();
    let Some(bounds) = mask.bounds() else {
        return Err(Error::Prompt("cannot derive prompts from an empty mask".into()));
    };
    let (w, h) = (mask.width() as f32, mask.height() as f32);
    let mut rng = stream(seed, &format!("annotate.prompts.{key}"));
    let center = |rng: &mut rand_chacha::ChaCha8Rng| {
        let (x, y) = pixels[rng.random_range(0..pixels.len())];
        ((x as f32 + 0.5) / w, (y as f32 + 0.5) / h)
    };
    let mut out: Vec<VisualPrompt> = (0..n_points)
        .map(|_| {
            let (x, y) = center(&mut rng);
            VisualPrompt::Point { x, y }
        })
        .collect();

    let bbox = NormBox::from_bounds(bounds, mask.width(), mask.height());
    let inside = |x: f32, y: f32| {
        let px = ((x * w) as usize).min(mask.width() - 1);
        let py = ((y * h) as usize).min(mask.height() - 1);
        mask.get(px, py)
    };
    let mut line = None;
    for _ in 0..LINE_TRIES {
        let x1 = rng.random_range(bbox.x1..bbox.x2);
        let y1 = rng.random_range(bbox.y1..bbox.y2);
        let x2 = rng.random_range(bbox.x1..bbox.x2);
        let y2 = rng.random_range(bbox.y1..bbox.y2);
        if inside(x1, y1) && inside(x2, y2) {
            line = Some(VisualPrompt::Line { x1, y1, x2, y2 });
            break;
        }
    }
    out.push(line.unwrap_or_else(|| {
        let (x1, y1) = center(&mut rng);
        let (x2, y2) = center(&mut rng);
        VisualPrompt::Line { x1, y1, x2, y2 }
    }));
    out.push(VisualPrompt::Box {
        x1: bbox.x1,
        y1: bbox.y1,
        x2: bbox.x2,
        y2: bbox.y2,
    });
    Ok(out)
}

/// Union of the regions covered by `prompts`, for box-prompted mask
/// prediction. `None` when no geometric prompt is present.
pub fn prompt_region(prompts: &[VisualPrompt], width: usize, height: usize) -> Option<NormBox> {
    let (pw, ph) = (1.0 / width as f32, 1.0 / height as f32);
    prompts
        .iter()
        .filter_map(|p| match *p {
            VisualPrompt::Point { x, y } => Some(NormBox { x1: x - pw / 2.0, y1: y - ph / 2.0, x2: x + pw / 2.0, y2: y + ph / 2.0 }),
            VisualPrompt::Line { x1, y1, x2, y2 } | VisualPrompt::Box { x1, y1, x2, y2 } => Some(NormBox {
                x1: x1.min(x2),
                y1: y1.min(y2),
                x2: x1.max(x2),
                y2: y1.max(y2),
            }),
            VisualPrompt::MaskRef => None,
        })
        .reduce(|a, b| NormBox {
            x1: a.x1.min(b.x1),
            y1: a.y1.min(b.y1),
            x2: a.x2.max(b.x2),
            y2: a.y2.max(b.y2),
        })
        .map(|b| NormBox {
            x1: b.x1.clamp(0.0, 1.0),
            y1: b.y1.clamp(0.0, 1.0),
            x2: b.x2.clamp(0.0, 1.0),
            y2: b.y2.clamp(0.0, 1.0),
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episode::Action;
    use proptest::prelude::*;

    fn episode_with_grip(grip: &[f32]) -> Episode {
        let n = grip.len();
        Episode {
            frames: vec![Image::new(8, 8); n],
            masks: vec![Mask::empty(8, 8); n],
            actions: grip
                .iter()
                .map(|&g| {
                    let mut a: Action = [0.0; 7];
                    a[6] = g;
                    a
                })
                .collect(),
            instruction: "pick the cup".into(),
            prompts: vec![],
            target_text: String::new(),
        }
    }

    #[test]
    fn gripper_close_index() {
        assert_eq!(find_gripper_close(&episode_with_grip(&[0.0, 0.0, 1.0, 1.0, 0.0])), Some(2));
        assert_eq!(find_gripper_close(&episode_with_grip(&[1.0, 0.0, 0.0])), Some(0));
        assert_eq!(find_gripper_close(&episode_with_grip(&[0.0; 4])), None);
    }

    #[test]
    fn discrete_video_excludes_open_episodes() {
        let a = episode_with_grip(&[0.0, 1.0]);
        let b = episode_with_grip(&[0.0, 0.0]);
        let c = episode_with_grip(&[1.0]);
        let (frames, excluded) = compose_discrete_video(&[&a, &b, &c]).unwrap();
        assert_eq!(frames.iter().map(|f| f.0).collect::<Vec<_>>(), vec![0, 2]);
        assert_eq!(excluded, vec![1]);
        assert!(matches!(compose_discrete_video(&[&b]), Err(Error::Pipeline(_))));
    }

    #[test]
    fn proposal_scaling() {
        let b = NormBox { x1: 0.4, y1: 0.4, x2: 0.6, y2: 0.6 };
        let p = propose_region(b, 1.5).unwrap();
        for (got, want) in [(p.x1, 0.35), (p.y1, 0.35), (p.x2, 0.65), (p.y2, 0.65)] {
            assert!((got - want).abs() < 1e-6);
        }
        assert_eq!(propose_region(b, 1.0).unwrap(), b);
        let edge = propose_region(NormBox { x1: 0.9, y1: 0.9, x2: 1.0, y2: 1.0 }, 2.0).unwrap();
        assert_eq!((edge.x2, edge.y2), (1.0, 1.0));
        assert!((edge.x1 - 0.85).abs() < 1e-6);
        let flat = NormBox { x1: 0.4, y1: 0.5, x2: 0.6, y2: 0.5 };
        assert!(matches!(propose_region(flat, 1.5), Err(Error::Proposal(_))));
    }

    #[test]
    fn single_pixel_mask_prompts() {
        let mut m = Mask::empty(10, 10);
        m.set(3, 7, true);
        let p = derive_visual_prompts(&m, 1, "ep", 3).unwrap();
        assert_eq!(p.len(), 5);
        for q in &p[..3] {
            assert_eq!(*q, VisualPrompt::Point { x: 0.35, y: 0.75 });
        }
        assert_eq!(p[4], VisualPrompt::Box { x1: 0.3, y1: 0.7, x2: 0.4, y2: 0.8 });
        assert!(matches!(derive_visual_prompts(&Mask::empty(4, 4), 1, "ep", 3), Err(Error::Prompt(_))));
    }

    #[test]
    fn prompts_are_deterministic() {
        let m = Mask::from_fn(16, 16, |x, y| (x + y) % 3 == 0 && x > 4);
        assert_eq!(
            derive_visual_prompts(&m, 9, "a", 3).unwrap(),
            derive_visual_prompts(&m, 9, "a", 3).unwrap()
        );
    }

    fn pixel_of(m: &Mask, x: f32, y: f32) -> (usize, usize) {
        (
            ((x * m.width() as f32) as usize).min(m.width() - 1),
            ((y * m.height() as f32) as usize).min(m.height() - 1),
        )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn derived_prompts_stay_in_mask(bits in proptest::collection::vec(any::<bool>(), 64), seed in any::<u64>()) {
            let m = Mask::from_fn(8, 8, |x, y| bits[y * 8 + x]);
            prop_assume!(!m.is_empty());
            let prompts = derive_visual_prompts(&m, seed, "p", 3).unwrap();
            for p in &prompts {
                match *p {
                    VisualPrompt::Point { x, y } => {
                        let (px, py) = pixel_of(&m, x, y);
                        prop_assert!(m.get(px, py));
                    }
                    VisualPrompt::Line { x1, y1, x2, y2 } => {
                        let (ax, ay) = pixel_of(&m, x1, y1);
                        let (bx, by) = pixel_of(&m, x2, y2);
                        prop_assert!(m.get(ax, ay) && m.get(bx, by));
                    }
                    VisualPrompt::Box { x1, y1, x2, y2 } => {
                        let (mut x0, mut y0, mut xm, mut ym) = (8, 8, 0, 0);
                        for y in 0..8 {
                            for x in 0..8 {
                                if bits[y * 8 + x] {
                                    x0 = x0.min(x);
                                    y0 = y0.min(y);
                                    xm = xm.max(x + 1);
                                    ym = ym.max(y + 1);
                                }
                            }
                        }
                        prop_assert_eq!((x1, y1, x2, y2), (x0 as f32 / 8.0, y0 as f32 / 8.0, xm as f32 / 8.0, ym as f32 / 8.0));
                    }
                    VisualPrompt::MaskRef => prop_assert!(false),
                }
            }
        }
    }

    #[test]
    fn prompt_region_unions_geometry() {
        let r = prompt_region(
            &[
                VisualPrompt::Box { x1: 0.2, y1: 0.2, x2: 0.4, y2: 0.5 },
                VisualPrompt::Line { x1: 0.6, y1: 0.3, x2: 0.5, y2: 0.1 },
                VisualPrompt::MaskRef,
            ],
            10,
            10,
        )
        .unwrap();
        assert_eq!(r, NormBox { x1: 0.2, y1: 0.1, x2: 0.6, y2: 0.5 });
        assert!(prompt_region(&[VisualPrompt::MaskRef], 10, 10).is_none());
    }
}
