//! Deterministic backends for rendered synthetic scenes. They read exact
//! palette colors instead of running learned models.

use super::{BackendSuite, Detection, Detector, GripperSegmenter, MaskPredictor, TargetReasoner};
use crate::error::Result;
use crate::raster::{Image, Mask, NormBox, PixelBounds};
use crate::synthetic::{kind_by_color, kind_by_name, CLAW_COLOR};

impl BackendSuite {
    pub fn oracle() -> Self {
        Self {
            gripper: Box::new(ColorKeyGripper),
            reasoner: Box::new(RuleReasoner),
            detector: Box::new(PaletteDetector),
            masks: Box::new(PaletteMaskPredictor),
            concurrent: true,
        }
    }
}

fn bounds_of(points: impl IntoIterator<Item = (usize, usize)>) -> Option<PixelBounds> {
    points.into_iter().fold(None, |b, (x, y)| {
        Some(match b {
            None => PixelBounds { x0: x, y0: y, x1: x, y1: y },
            Some(p) => PixelBounds {
                x0: p.x0.min(x),
                y0: p.y0.min(y),
                x1: p.x1.max(x),
                y1: p.y1.max(y),
            },
        })
    })
}

/// Bounding box of the claw color.
pub struct ColorKeyGripper;

impl GripperSegmenter for ColorKeyGripper {
    fn locate(&self, frames: &[&Image]) -> Result<Vec<Option<Detection>>> {
        Ok(frames
            .iter()
            .map(|f| {
                let claw = (0..f.height())
                    .flat_map(|y| (0..f.width()).map(move |x| (x, y)))
                    .filter(|&(x, y)| f.get(x, y) == CLAW_COLOR);
                bounds_of(claw).map(|b| Detection {
                    bbox: NormBox::from_bounds(b, f.width(), f.height()),
                    confidence: 1.0,
                })
            })
            .collect())
    }
}

const VERBS: [&str; 6] = ["pick", "put", "move", "stack", "open", "close"];
const SKIP: [&str; 6] = ["up", "down", "the", "a", "an", "some"];
const STOP: [&str; 14] = [
    "in", "on", "into", "onto", "near", "to", "from", "with", "at", "of", "under", "and", "beside", "inside",
];

/// First noun phrase after a manipulation verb.
pub struct RuleReasoner;

impl TargetReasoner for RuleReasoner {
    fn target(&self, instruction: &str) -> Result<Option<String>> {
        let lower = instruction.to_lowercase();
        let words: Vec<&str> = lower.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()).collect();
        let Some(v) = words.iter().position(|w| VERBS.contains(w)) else {
            return Ok(None);
        };
        let phrase: Vec<&str> = words[v + 1..]
            .iter()
            .skip_while(|w| SKIP.contains(w))
            .take_while(|w| !STOP.contains(w))
            .copied()
            .collect();
        Ok((!phrase.is_empty()).then(|| phrase.join(" ")))
    }
}

/// 4-connected components of the named object's color. Confidence grows
/// with how much of its box a component fills.
pub struct PaletteDetector;

impl Detector for PaletteDetector {
    fn detect(&self, frame: &Image, text: &str) -> Result<Vec<Detection>> {
        let Some(kind) = text.split_whitespace().rev().find_map(kind_by_name) else {
            return Ok(Vec::new());
        };
        let (w, h) = (frame.width(), frame.height());
        let mut seen = vec![false; w * h];
        let mut out = Vec::new();
        for start in 0..w * h {
            if seen[start] || frame.get(start % w, start / w) != kind.color {
                continue;
            }
            seen[start] = true;
            let mut stack = vec![start];
            let mut members = Vec::new();
            while let Some(i) = stack.pop() {
                let (x, y) = (i % w, i / w);
                members.push((x, y));
                let mut visit = |nx: usize, ny: usize| {
                    let j = ny * w + nx;
                    if !seen[j] && frame.get(nx, ny) == kind.color {
                        seen[j] = true;
                        stack.push(j);
                    }
                };
                if x > 0 {
                    visit(x - 1, y);
                }
                if x + 1 < w {
                    visit(x + 1, y);
                }
                if y > 0 {
                    visit(x, y - 1);
                }
                if y + 1 < h {
                    visit(x, y + 1);
                }
            }
            let b = bounds_of(members.iter().copied()).expect("component has a member");
            let area = (b.x1 - b.x0 + 1) * (b.y1 - b.y0 + 1);
            out.push(Detection {
                bbox: NormBox::from_bounds(b, w, h),
                confidence: 0.5 + 0.5 * members.len() as f32 / area as f32,
            });
        }
        Ok(out)
    }
}

/// Pixels of the dominant object color inside the box.
pub struct PaletteMaskPredictor;

impl MaskPredictor for PaletteMaskPredictor {
    fn predict(&self, frame: &Image, bbox: NormBox) -> Result<(Mask, f32)> {
        let (w, h) = (frame.width(), frame.height());
        let span = bbox.pixel_span(w, h);
        let mut counts: Vec<([u8; 3], usize)> = Vec::new();
        for y in span.y0..=span.y1 {
            for x in span.x0..=span.x1 {
                let c = frame.get(x, y);
                if kind_by_color(c).is_none() {
                    continue;
                }
                match counts.iter_mut().find(|(k, _)| *k == c) {
                    Some(e) => e.1 += 1,
                    None => counts.push((c, 1)),
                }
            }
        }
        // Ties go to the color seen first in scan order.
        let Some(&(color, n)) = counts.iter().reduce(|a, b| if b.1 > a.1 { b } else { a }) else {
            return Ok((Mask::empty(w, h), 0.0));
        };
        let total = (span.x1 - span.x0 + 1) * (span.y1 - span.y0 + 1);
        let mask = Mask::from_fn(w, h, |x, y| {
            (span.x0..=span.x1).contains(&x) && (span.y0..=span.y1).contains(&y) && frame.get(x, y) == color
        });
        Ok((mask, (0.5 + 0.5 * n as f32 / total as f32).min(1.0)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::PALETTE;

    #[test]
    fn reasoner_extracts_first_object() {
        let r = RuleReasoner;
        let cases = [
            ("pick the eggplant", Some("eggplant")),
            ("Pick up the red apple.", Some("red apple")),
            ("put the cup in the basket", Some("cup")),
            ("move the lime near the sponge", Some("lime")),
            ("stack the sponge on the cup", Some("sponge")),
            ("wave hello", None),
            ("pick up", None),
        ];
        for (text, want) in cases {
            assert_eq!(r.target(text).unwrap().as_deref(), want, "{text}");
        }
    }

    #[test]
    fn detector_finds_each_component() {
        let mut img = Image::filled(20, 20, [0, 0, 0]);
        let cup = kind_by_name("cup").unwrap().color;
        for y in 2..5 {
            for x in 2..6 {
                img.set(x, y, cup);
            }
        }
        for y in 10..14 {
            img.set(15, y, cup);
        }
        let dets = PaletteDetector.detect(&img, "cup").unwrap();
        assert_eq!(dets.len(), 2);
        assert_eq!(dets[0].bbox, NormBox::from_bounds(PixelBounds { x0: 2, y0: 2, x1: 5, y1: 4 }, 20, 20));
        assert!(dets.iter().all(|d| d.confidence == 1.0));
        assert!(PaletteDetector.detect(&img, "apple").unwrap().is_empty());
        assert!(PaletteDetector.detect(&img, "spaceship").unwrap().is_empty());
    }

    #[test]
    fn mask_predictor_picks_dominant_color() {
        let mut img = Image::filled(10, 10, [0, 0, 0]);
        for y in 0..10 {
            for x in 0..10 {
                if x < 6 {
                    img.set(x, y, PALETTE[0].color);
                } else if x < 8 {
                    img.set(x, y, PALETTE[1].color);
                }
            }
        }
        let (m, c) = PaletteMaskPredictor
            .predict(&img, NormBox { x1: 0.3, y1: 0.0, x2: 1.0, y2: 0.5 })
            .unwrap();
        assert_eq!(m.count(), 3 * 5);
        assert!(m.get(3, 0) && !m.get(6, 0) && !m.get(3, 5));
        assert!((0.0..=1.0).contains(&c));
    }

    #[test]
    fn gripper_box_from_claw_pixels() {
        let mut img = Image::new(16, 16);
        img.set(3, 4, CLAW_COLOR);
        img.set(7, 9, CLAW_COLOR);
        let empty = Image::new(16, 16);
        let found = ColorKeyGripper.locate(&[&img, &empty]).unwrap();
        assert_eq!(found[0].unwrap().bbox, NormBox::from_bounds(PixelBounds { x0: 3, y0: 4, x1: 7, y1: 9 }, 16, 16));
        assert!(found[1].is_none());
    }
}
