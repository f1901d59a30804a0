//! Episode records: frames, per-step masks and actions, instruction text and
//! visual prompts, plus action normalization and the instruction template.

mod dataset;
mod io;
mod norm;
mod template;

pub use dataset::{load_dataset, write_dataset, Dataset, DatasetManifest, EPISODES_DIR, MANIFEST_FILE};
pub use io::{decode_episode, encode_episode, read_episode, write_episode, EPISODE_MAGIC, EPISODE_VERSION};
pub use norm::{
    compute_norm_stats, denormalize_action, discretize_action, normalize_action, undiscretize_action, NormStats,
    ACTION_BINS,
};
pub use template::{render_template, ANNOTATION_MARKER, PROMPT_MARKER};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{Image, Mask};

/// Translation deltas, rotation deltas, gripper.
pub const ACTION_DIM: usize = 7;
/// Index of the gripper channel, which lives in `[0, 1]`.
pub const GRIPPER_DIM: usize = 6;

pub type Action = [f32; ACTION_DIM];

/// A geometric cue in normalized image coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VisualPrompt {
    Point { x: f32, y: f32 },
    Line { x1: f32, y1: f32, x2: f32, y2: f32 },
    Box { x1: f32, y1: f32, x2: f32, y2: f32 },
    /// Refers to the episode mask.
    MaskRef,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PromptKind {
    Point = 0,
    Line = 1,
    Box = 2,
    MaskRef = 3,
}

impl PromptKind {
    pub const ALL: [PromptKind; 4] = [PromptKind::Point, PromptKind::Line, PromptKind::Box, PromptKind::MaskRef];

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.get(tag as usize).copied()
    }
}

impl VisualPrompt {
    pub fn kind(&self) -> PromptKind {
        match self {
            VisualPrompt::Point { .. } => PromptKind::Point,
            VisualPrompt::Line { .. } => PromptKind::Line,
            VisualPrompt::Box { .. } => PromptKind::Box,
            VisualPrompt::MaskRef => PromptKind::MaskRef,
        }
    }

    pub fn coords(&self) -> Vec<f32> {
        match *self {
            VisualPrompt::Point { x, y } => vec![x, y],
            VisualPrompt::Line { x1, y1, x2, y2 } | VisualPrompt::Box { x1, y1, x2, y2 } => vec![x1, y1, x2, y2],
            VisualPrompt::MaskRef => Vec::new(),
        }
    }

    pub fn from_coords(kind: PromptKind, c: &[f32]) -> Result<Self> {
        let want = match kind {
            PromptKind::Point => 2,
            PromptKind::Line | PromptKind::Box => 4,
            PromptKind::MaskRef => 0,
        };
        if c.len() != want {
            return Err(Error::Validation(format!(
                "{kind:?} prompt takes {want} coordinates, got {}",
                c.len()
            )));
        }
        let p = match kind {
            PromptKind::Point => VisualPrompt::Point { x: c[0], y: c[1] },
            PromptKind::Line => VisualPrompt::Line { x1: c[0], y1: c[1], x2: c[2], y2: c[3] },
            PromptKind::Box => VisualPrompt::Box { x1: c[0], y1: c[1], x2: c[2], y2: c[3] },
            PromptKind::MaskRef => VisualPrompt::MaskRef,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for v in self.coords() {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Validation(format!("prompt coordinate {v} outside [0, 1]")));
            }
        }
        if let VisualPrompt::Box { x1, y1, x2, y2 } = *self {
            if x1 > x2 || y1 > y2 {
                return Err(Error::Validation(format!(
                    "box corners out of order: ({x1}, {y1}) → ({x2}, {y2})"
                )));
            }
        }
        Ok(())
    }
}

/// One demonstration: `T` aligned frames, masks and actions.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub frames: Vec<Image>,
    pub masks: Vec<Mask>,
    pub actions: Vec<Action>,
    pub instruction: String,
    pub prompts: Vec<VisualPrompt>,
    /// Empty until the annotation pipeline fills it.
    pub target_text: String,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn width(&self) -> usize {
        self.frames.first().map_or(0, Image::width)
    }

    pub fn height(&self) -> usize {
        self.frames.first().map_or(0, Image::height)
    }

    /// Annotated episodes carry a target name, prompts and non-empty masks.
    pub fn is_annotated(&self) -> bool {
        !self.target_text.is_empty() && !self.prompts.is_empty() && self.masks.iter().all(|m| !m.is_empty())
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.frames.len();
        if t == 0 {
            return Err(Error::Validation("episode has no timesteps".into()));
        }
        if self.masks.len() != t || self.actions.len() != t {
            return Err(Error::Validation(format!(
                "per-step lengths differ: {t} frames, {} masks, {} actions",
                self.masks.len(),
                self.actions.len()
            )));
        }
        let (w, h) = (self.width(), self.height());
        if w == 0 || h == 0 || w > u16::MAX as usize || h > u16::MAX as usize {
            return Err(Error::Validation(format!("unsupported frame size {w}×{h}")));
        }
        for (i, (f, m)) in self.frames.iter().zip(&self.masks).enumerate() {
            if f.width() != w || f.height() != h || m.width() != w || m.height() != h {
                return Err(Error::Validation(format!("timestep {i} has mismatched frame or mask size")));
            }
        }
        for (i, a) in self.actions.iter().enumerate() {
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!("action {i} is not finite")));
            }
            if !(0.0..=1.0).contains(&a[GRIPPER_DIM]) {
                return Err(Error::Validation(format!(
                    "gripper channel {} at step {i} outside [0, 1]",
                    a[GRIPPER_DIM]
                )));
            }
        }
        for p in &self.prompts {
            p.validate()?;
        }
        Ok(())
    }
}
