//! Parametric tabletop scenes with exact ground truth.
//!
//! Each scene holds palette-colored objects on a two-tone background and a
//! magenta claw that descends onto the target, closes at step `G` and lifts
//! it. Unsolvable scenes name an object that is not on the table. The two
//! toy tasks at the bottom are small supervised problems for the trainer.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::annotate::DEFAULT_EXPANSION;
use crate::episode::{Action, Episode, VisualPrompt};
use crate::error::{Error, Result};
use crate::nn::rng::{derive_seed_index, stream};
use crate::raster::{Image, Mask, NormBox, PixelBounds};

pub const CLAW_COLOR: [u8; 3] = [255, 0, 255];
pub const WALL_COLOR: [u8; 3] = [70, 72, 84];
pub const TABLE_COLOR: [u8; 3] = [150, 122, 92];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Ellipse,
    Rect,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ObjectKind {
    pub name: &'static str,
    pub color: [u8; 3],
    pub shape: Shape,
    /// Inclusive width and height ranges in pixels.
    pub width: (usize, usize),
    pub height: (usize, usize),
}

pub const PALETTE: [ObjectKind; 6] = [
    ObjectKind { name: "apple", color: [220, 40, 40], shape: Shape::Ellipse, width: (8, 11), height: (8, 11) },
    ObjectKind { name: "eggplant", color: [120, 50, 160], shape: Shape::Ellipse, width: (12, 14), height: (7, 8) },
    ObjectKind { name: "cup", color: [40, 80, 220], shape: Shape::Rect, width: (8, 10), height: (9, 11) },
    ObjectKind { name: "carrot", color: [240, 140, 30], shape: Shape::Rect, width: (13, 15), height: (4, 5) },
    ObjectKind { name: "lime", color: [60, 200, 70], shape: Shape::Ellipse, width: (7, 9), height: (7, 9) },
    ObjectKind { name: "sponge", color: [235, 220, 50], shape: Shape::Rect, width: (10, 12), height: (6, 8) },
];

pub fn kind_by_name(name: &str) -> Option<&'static ObjectKind> {
    PALETTE.iter().find(|k| k.name == name)
}

pub fn kind_by_color(rgb: [u8; 3]) -> Option<&'static ObjectKind> {
    PALETTE.iter().find(|k| k.color == rgb)
}

/// An object instance occupying the `w × h` box at `(x0, y0)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlacedObject {
    pub kind: usize,
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
}

impl PlacedObject {
    pub fn covers(&self, x: usize, y: usize) -> bool {
        if x < self.x0 || y < self.y0 || x >= self.x0 + self.w || y >= self.y0 + self.h {
            return false;
        }
        match PALETTE[self.kind].shape {
            Shape::Rect => true,
            Shape::Ellipse => {
                let (rx, ry) = (self.w as f64 / 2.0, self.h as f64 / 2.0);
                let dx = (x as f64 + 0.5 - self.x0 as f64 - rx) / rx;
                let dy = (y as f64 + 0.5 - self.y0 as f64 - ry) / ry;
                dx * dx + dy * dy <= 1.0
            }
        }
    }

    pub fn bounds(&self) -> PixelBounds {
        PixelBounds {
            x0: self.x0,
            y0: self.y0,
            x1: self.x0 + self.w - 1,
            y1: self.y0 + self.h - 1,
        }
    }

    pub fn mask(&self, width: usize, height: usize) -> Mask {
        Mask::from_fn(width, height, |x, y| self.covers(x, y))
    }

    fn lifted(&self, dy: usize) -> Self {
        Self {
            y0: self.y0.saturating_sub(dy),
            ..*self
        }
    }
}

fn overlaps(a: PixelBounds, b: PixelBounds, margin: usize) -> bool {
    a.x0 <= b.x1 + margin && b.x0 <= a.x1 + margin && a.y0 <= b.y1 + margin && b.y0 <= a.y1 + margin
}

/// Two fingers and a bar straddling an `iw × ih` object with a one-pixel gap.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Claw {
    left: usize,
    top: usize,
    iw: usize,
    ih: usize,
}

impl Claw {
    fn around(b: PixelBounds) -> Self {
        Self {
            left: b.x0 - 3,
            top: b.y0 - 4,
            iw: b.x1 - b.x0 + 1,
            ih: b.y1 - b.y0 + 1,
        }
    }

    fn bounds(&self) -> PixelBounds {
        PixelBounds {
            x0: self.left,
            y0: self.top,
            x1: self.left + self.iw + 5,
            y1: self.top + self.ih + 3,
        }
    }

    fn covers(&self, x: usize, y: usize) -> bool {
        let b = self.bounds();
        if x < b.x0 || x > b.x1 || y < b.y0 || y > b.y1 {
            return false;
        }
        y <= b.y0 + 1 || x <= b.x0 + 1 || x >= b.x1 - 1
    }

    fn center_x(&self) -> f64 {
        self.left as f64 + (self.iw + 6) as f64 / 2.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneTruth {
    pub solvable: bool,
    /// Object named by the instruction.
    pub target_name: String,
    /// Ground-truth target mask at the gripper-close frame.
    pub target_mask: Option<Mask>,
    pub grip_close: usize,
    /// True when a second object of the target's kind sits outside the
    /// search region.
    pub has_twin: bool,
}

#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub stem: String,
    pub episode: Episode,
    pub truth: SceneTruth,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusConfig {
    pub episodes: usize,
    pub size: usize,
    pub steps: usize,
    pub unsolvable_fraction: f64,
    pub distractors: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            episodes: 200,
            size: 64,
            steps: 12,
            unsolvable_fraction: 0.2,
            distractors: 3,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn unsolvable_count(&self) -> usize {
        (self.unsolvable_fraction * self.episodes as f64).round() as usize
    }

    fn validate(&self) -> Result<()> {
        if self.episodes == 0 {
            return Err(Error::Config("corpus needs at least one episode".into()));
        }
        if self.size < 48 {
            return Err(Error::Config(format!("frame size {} is below the minimum of 48", self.size)));
        }
        if self.steps < 4 {
            return Err(Error::Config(format!("{} steps is below the minimum of 4", self.steps)));
        }
        if !(0.0..=1.0).contains(&self.unsolvable_fraction) {
            return Err(Error::Config("unsolvable fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

const RECEPTACLES: [&str; 3] = ["basket", "bowl", "drawer"];

fn instruction_for(target: &str, other: Option<&str>, rng: &mut ChaCha8Rng) -> String {
    let other = other.unwrap_or(RECEPTACLES[rng.random_range(0..RECEPTACLES.len())]);
    let place = RECEPTACLES[rng.random_range(0..RECEPTACLES.len())];
    match rng.random_range(0..5) {
        0 => format!("pick the {target}"),
        1 => format!("pick up the {target}"),
        2 => format!("put the {target} in the {place}"),
        3 => format!("move the {target} near the {other}"),
        _ => format!("stack the {target} on the {other}"),
    }
}

fn random_object(kind: usize, size: usize, rng: &mut ChaCha8Rng) -> PlacedObject {
    let k = &PALETTE[kind];
    let w = rng.random_range(k.width.0..=k.width.1);
    let h = rng.random_range(k.height.0..=k.height.1);
    // Room for the claw on every side and the lift above.
    let x0 = rng.random_range(4..size - w - 4);
    let y0 = rng.random_range(size / 4 + 4..size - h - 2);
    PlacedObject { kind, x0, y0, w, h }
}

/// Places `obj` by rejection so it keeps clear of `taken`.
fn place_clear(
    kind: usize,
    size: usize,
    taken: &[PixelBounds],
    rng: &mut ChaCha8Rng,
) -> Option<PlacedObject> {
    (0..200)
        .map(|_| random_object(kind, size, rng))
        .find(|o| taken.iter().all(|&t| !overlaps(o.bounds(), t, 2)))
}

fn render(size: usize, objects: &[PlacedObject], claw: &Claw) -> Image {
    let mut img = Image::new(size, size);
    for y in 0..size {
        for x in 0..size {
            let bg = if y < size * 3 / 10 { WALL_COLOR } else { TABLE_COLOR };
            img.set(x, y, bg);
            if let Some(o) = objects.iter().find(|o| o.covers(x, y)) {
                img.set(x, y, PALETTE[o.kind].color);
            }
            if claw.covers(x, y) {
                img.set(x, y, CLAW_COLOR);
            }
        }
    }
    img
}

/// One scene. Solvable scenes name an object on the table; unsolvable ones
/// send the claw to an empty spot and name a kind that is absent.
pub fn generate_scene(cfg: &CorpusConfig, index: usize, solvable: bool) -> Result<SyntheticScene> {
    let size = cfg.size;
    let mut rng = stream(derive_seed_index(cfg.seed, index as u64), "scene");
    let kind = rng.random_range(0..PALETTE.len());
    let target = random_object(kind, size, &mut rng);
    let claw_end = Claw::around(target.bounds());
    let claw_box = NormBox::from_bounds(claw_end.bounds(), size, size);
    let region = claw_box.scaled(DEFAULT_EXPANSION).pixel_span(size, size);

    let mut objects = Vec::new();
    let mut taken = vec![claw_end.bounds(), target.bounds()];
    if solvable {
        objects.push(target);
    }
    let mut has_twin = false;
    if solvable && rng.random_bool(0.5) {
        let mut blocked = taken.clone();
        blocked.push(region);
        if let Some(twin) = place_clear(kind, size, &blocked, &mut rng) {
            taken.push(twin.bounds());
            objects.push(twin);
            has_twin = true;
        }
    }
    let others: Vec<usize> = (0..PALETTE.len()).filter(|&k| k != kind).collect();
    for _ in 0..cfg.distractors {
        let k = others[rng.random_range(0..others.len())];
        if let Some(o) = place_clear(k, size, &taken, &mut rng) {
            taken.push(o.bounds());
            objects.push(o);
        }
    }
    let other_name = objects.iter().find(|o| o.kind != kind).map(|o| PALETTE[o.kind].name);
    let instruction = instruction_for(PALETTE[kind].name, other_name, &mut rng);

    let t_total = cfg.steps;
    let grip_close = rng.random_range(t_total / 3..=t_total / 2 + 1).max(1);
    let start = Claw {
        left: rng.random_range(0..size - claw_end.iw - 6),
        top: 0,
        ..claw_end
    };
    let lift_per_step = 3;
    let claws: Vec<Claw> = (0..t_total)
        .map(|t| {
            if t <= grip_close {
                let f = t as f64 / grip_close as f64;
                let lerp = |a: usize, b: usize| (a as f64 + (b as f64 - a as f64) * f).round() as usize;
                Claw {
                    left: lerp(start.left, claw_end.left),
                    top: lerp(start.top, claw_end.top),
                    ..claw_end
                }
            } else {
                Claw {
                    top: claw_end.top.saturating_sub(lift_per_step * (t - grip_close)),
                    ..claw_end
                }
            }
        })
        .collect();

    let frames: Vec<Image> = claws
        .iter()
        .enumerate()
        .map(|(t, claw)| {
            let lift = claw_end.top - claw.top.min(claw_end.top);
            let scene: Vec<PlacedObject> = objects
                .iter()
                .enumerate()
                .map(|(i, o)| if solvable && i == 0 && t > grip_close { o.lifted(lift) } else { *o })
                .collect();
            render(size, &scene, claw)
        })
        .collect();

    let noise = |rng: &mut ChaCha8Rng| rng.random_range(-0.005..0.005f32);
    let actions: Vec<Action> = (0..t_total)
        .map(|t| {
            let next = claws[(t + 1).min(t_total - 1)];
            let dx = ((next.center_x() - claws[t].center_x()) / size as f64) as f32;
            let dy = ((next.top as f64 - claws[t].top as f64) / size as f64) as f32;
            let dz = if t < grip_close { -0.02 } else { 0.02 };
            let grip = if t < grip_close { 0.0 } else { 1.0 };
            [
                dx + noise(&mut rng),
                dy + noise(&mut rng),
                dz + noise(&mut rng),
                rng.random_range(-0.02..0.02),
                rng.random_range(-0.02..0.02),
                rng.random_range(-0.02..0.02),
                grip,
            ]
        })
        .collect();

    let (instruction, target_name) = if solvable {
        (instruction, PALETTE[kind].name.to_string())
    } else {
        // Name a kind that is not on the table.
        let present: Vec<usize> = objects.iter().map(|o| o.kind).collect();
        let absent: Vec<usize> = (0..PALETTE.len()).filter(|k| !present.contains(k)).collect();
        let missing = absent[rng.random_range(0..absent.len())];
        let name = PALETTE[missing].name;
        (instruction.replacen(PALETTE[kind].name, name, 1), name.to_string())
    };

    let episode = Episode {
        masks: vec![Mask::empty(size, size); t_total],
        frames,
        actions,
        instruction,
        prompts: Vec::new(),
        target_text: String::new(),
    };
    episode.validate()?;
    Ok(SyntheticScene {
        stem: format!("ep{index:05}"),
        episode,
        truth: SceneTruth {
            solvable,
            target_name,
            target_mask: solvable.then(|| target.mask(size, size)),
            grip_close,
            has_twin,
        },
    })
}

/// `cfg.episodes` scenes of which exactly `round(fraction · N)` are
/// unsolvable, chosen by a seeded shuffle.
pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Vec<SyntheticScene>> {
    cfg.validate()?;
    let mut order: Vec<usize> = (0..cfg.episodes).collect();
    order.shuffle(&mut stream(cfg.seed, "corpus.unsolvable"));
    let mut unsolvable = vec![false; cfg.episodes];
    for &i in &order[..cfg.unsolvable_count()] {
        unsolvable[i] = true;
    }
    (0..cfg.episodes).map(|i| generate_scene(cfg, i, !unsolvable[i])).collect()
}

/// Uniform gray frames whose action chunk is a fixed affine function of the
/// gray level. One chunk-length episode per sample.
pub fn linear_task(episodes: usize, size: usize, chunk: usize, seed: u64) -> Vec<(String, Episode)> {
    let mut coef_rng = stream(seed, "linear.coefficients");
    let coef: Vec<[f32; 6]> = (0..chunk)
        .map(|_| std::array::from_fn(|_| coef_rng.random_range(-1.0..1.0)))
        .collect();
    let bias: Vec<[f32; 6]> = (0..chunk)
        .map(|_| std::array::from_fn(|_| coef_rng.random_range(-0.5..0.5)))
        .collect();
    (0..episodes)
        .map(|i| {
            let mut rng = stream(derive_seed_index(seed, i as u64), "linear.episode");
            let level: f32 = rng.random_range(0.1..0.9);
            let gray = (level * 255.0).round() as u8;
            let m = gray as f32 / 255.0;
            let actions = (0..chunk)
                .map(|t| {
                    let mut a = [0.0; 7];
                    for d in 0..6 {
                        a[d] = coef[t][d] * m + bias[t][d];
                    }
                    a[6] = m;
                    a
                })
                .collect();
            let ep = Episode {
                frames: vec![Image::filled(size, size, [gray; 3]); chunk],
                masks: vec![Mask::empty(size, size); chunk],
                actions,
                instruction: "move the arm".into(),
                prompts: Vec::new(),
                target_text: String::new(),
            };
            (format!("lin{i:05}"), ep)
        })
        .collect()
}

const BLOCK_COLORS: [[u8; 3]; 2] = [[220, 40, 40], [40, 80, 220]];
const BLOCK_ACTION: [f32; 6] = [0.8, -0.6, 0.5, 0.7, -0.5, 0.6];

/// Two blocks of different colors under one instruction; the masked block
/// decides the sign of the action chunk. Without the mask the scenes are
/// indistinguishable in expectation.
pub fn discriminative_task(episodes: usize, size: usize, chunk: usize, seed: u64) -> Vec<(String, Episode)> {
    (0..episodes)
        .map(|i| {
            let mut rng = stream(derive_seed_index(seed, i as u64), "discriminative.episode");
            let side = 10;
            let (a, b) = loop {
                let p = |rng: &mut ChaCha8Rng| (rng.random_range(2..size - side - 2), rng.random_range(2..size - side - 2));
                let (pa, pb) = (p(&mut rng), p(&mut rng));
                let ba = PixelBounds { x0: pa.0, y0: pa.1, x1: pa.0 + side - 1, y1: pa.1 + side - 1 };
                let bb = PixelBounds { x0: pb.0, y0: pb.1, x1: pb.0 + side - 1, y1: pb.1 + side - 1 };
                if !overlaps(ba, bb, 2) {
                    break (ba, bb);
                }
            };
            let mut img = Image::filled(size, size, TABLE_COLOR);
            for (bnd, color) in [(a, BLOCK_COLORS[0]), (b, BLOCK_COLORS[1])] {
                for y in bnd.y0..=bnd.y1 {
                    for x in bnd.x0..=bnd.x1 {
                        img.set(x, y, color);
                    }
                }
            }
            let pick_first = i % 2 == 0;
            let chosen = if pick_first { a } else { b };
            let mask = Mask::from_fn(size, size, |x, y| (chosen.x0..=chosen.x1).contains(&x) && (chosen.y0..=chosen.y1).contains(&y));
            let bx = NormBox::from_bounds(chosen, size, size);
            let sign = if pick_first { 1.0 } else { -1.0 };
            let mut action = [0.0; 7];
            for d in 0..6 {
                action[d] = sign * BLOCK_ACTION[d];
            }
            action[6] = if pick_first { 1.0 } else { 0.0 };
            let ep = Episode {
                frames: vec![img; chunk],
                masks: vec![mask; chunk],
                actions: vec![action; chunk],
                instruction: "pick the block".into(),
                prompts: vec![
                    VisualPrompt::Box { x1: bx.x1, y1: bx.y1, x2: bx.x2, y2: bx.y2 },
                    VisualPrompt::Point {
                        x: (bx.x1 + bx.x2) / 2.0,
                        y: (bx.y1 + bx.y2) / 2.0,
                    },
                ],
                target_text: "block".into(),
            };
            (format!("dis{i:05}"), ep)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CorpusConfig {
        CorpusConfig {
            episodes: 20,
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn corpus_has_exact_unsolvable_count() {
        let scenes = generate_corpus(&small()).unwrap();
        assert_eq!(scenes.iter().filter(|s| !s.truth.solvable).count(), 4);
    }

    #[test]
    fn corpus_is_deterministic() {
        let a = generate_corpus(&small()).unwrap();
        let b = generate_corpus(&small()).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.episode, y.episode);
            assert_eq!(x.truth, y.truth);
        }
    }

    #[test]
    fn target_is_visible_and_unoccluded_at_grip_close() {
        for s in generate_corpus(&small()).unwrap() {
            let g = s.truth.grip_close;
            assert_eq!(s.episode.actions[g][6], 1.0);
            assert!(g == 0 || s.episode.actions[g - 1][6] == 0.0);
            if let Some(mask) = &s.truth.target_mask {
                let color = kind_by_name(&s.truth.target_name).unwrap().color;
                let frame = &s.episode.frames[g];
                for (x, y) in mask.pixels() {
                    assert_eq!(frame.get(x, y), color);
                }
                assert!(s.episode.instruction.contains(&s.truth.target_name));
            }
        }
    }

    #[test]
    fn unsolvable_scenes_lack_the_named_object() {
        for s in generate_corpus(&small()).unwrap().iter().filter(|s| !s.truth.solvable) {
            let color = kind_by_name(&s.truth.target_name).unwrap().color;
            let frame = &s.episode.frames[s.truth.grip_close];
            assert!(frame.as_raw().chunks_exact(3).all(|p| p != color));
        }
    }

    #[test]
    fn toy_tasks_have_expected_structure() {
        let lin = linear_task(4, 64, 8, 1);
        assert!(lin.iter().all(|(_, e)| e.len() == 8 && e.validate().is_ok()));
        let dis = discriminative_task(6, 64, 8, 1);
        for (_, e) in &dis {
            assert!(e.is_annotated());
            assert_eq!(e.masks[0].count(), 100);
        }
    }

    #[test]
    fn oracle_pipeline_recovers_ground_truth() {
        use crate::annotate::{annotate_episodes, AnnotateConfig, BackendSuite};
        let scenes = generate_corpus(&small()).unwrap();
        let eps: Vec<_> = scenes.iter().map(|s| (s.stem.clone(), s.episode.clone())).collect();
        let (report, kept) = annotate_episodes(&eps, &BackendSuite::oracle(), &AnnotateConfig::default()).unwrap();
        assert_eq!(report.filter_rate, 0.2);
        assert_eq!(kept.len(), 16);
        for (stem, ep) in &kept {
            let truth = &scenes.iter().find(|s| &s.stem == stem).unwrap().truth;
            assert!(ep.masks[0].iou(truth.target_mask.as_ref().unwrap()) >= 0.99);
        }
    }
}
