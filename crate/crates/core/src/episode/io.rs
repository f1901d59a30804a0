//! Binary episode record (little-endian):
//!
//! ```text
//! "PXVL" u32 version=1 u32 T u16 H u16 W
//! u32 instr_len instr(UTF-8) u32 target_len target(UTF-8)
//! frames T·H·W·3 u8 | masks T·H·W u8 | actions T·7 f32
//! u32 prompt_count, per prompt: u8 kind + f32 coords (2/4/4/0)
//! ```

use std::io::Read;
use std::path::{Path, PathBuf};

use super::{Action, Episode, PromptKind, VisualPrompt, ACTION_DIM};
use crate::error::{Error, Result};
use crate::nn::checkpoint::write_atomic;
use crate::raster::{Image, Mask};

pub const EPISODE_MAGIC: &[u8; 4] = b"PXVL";
pub const EPISODE_VERSION: u32 = 1;

pub fn encode_episode(e: &Episode) -> Result<Vec<u8>> {
    e.validate()?;
    let (t, h, w) = (e.len(), e.height(), e.width());
    let mut buf = Vec::with_capacity(64 + t * h * w * 4 + t * 28);
    buf.extend_from_slice(EPISODE_MAGIC);
    buf.extend_from_slice(&EPISODE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(t as u32).to_le_bytes());
    buf.extend_from_slice(&(h as u16).to_le_bytes());
    buf.extend_from_slice(&(w as u16).to_le_bytes());
    for text in [&e.instruction, &e.target_text] {
        let len = u32::try_from(text.len()).map_err(|_| Error::Validation("text too long".into()))?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(text.as_bytes());
    }
    for f in &e.frames {
        buf.extend_from_slice(f.as_raw());
    }
    for m in &e.masks {
        buf.extend_from_slice(m.as_raw());
    }
    for a in &e.actions {
        for v in a {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf.extend_from_slice(&(e.prompts.len() as u32).to_le_bytes());
    for p in &e.prompts {
        buf.push(p.kind() as u8);
        for c in p.coords() {
            buf.extend_from_slice(&c.to_le_bytes());
        }
    }
    Ok(buf)
}

struct Reader<'p, R> {
    inner: R,
    path: &'p Path,
}

impl<R: Read> Reader<'_, R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| Error::io(self.path, e))?;
        Ok(buf)
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }
    fn text(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        String::from_utf8(self.bytes(len)?).map_err(|_| Error::Format("text field is not UTF-8".into()))
    }
}

/// Decodes one record. Truncated input surfaces as an I/O error naming
/// `path`; structural problems as format errors.
pub fn decode_episode(input: impl Read, path: &Path) -> Result<Episode> {
    let mut r = Reader { inner: input, path };
    let magic = r.bytes(4)?;
    if magic != EPISODE_MAGIC {
        return Err(Error::Format(format!(
            "{}: bad magic {:?}, expected \"PXVL\"",
            path.display(),
            String::from_utf8_lossy(&magic)
        )));
    }
    let version = r.u32()?;
    if version != EPISODE_VERSION {
        return Err(Error::Format(format!("{}: unsupported version {version}", path.display())));
    }
    let t = r.u32()? as usize;
    let h = r.u16()? as usize;
    let w = r.u16()? as usize;
    if t == 0 || h == 0 || w == 0 {
        return Err(Error::Format(format!("{}: empty dimensions T={t} H={h} W={w}", path.display())));
    }
    let instruction = r.text()?;
    let target_text = r.text()?;
    let frames = (0..t)
        .map(|_| Image::from_raw(w, h, r.bytes(w * h * 3)?))
        .collect::<Result<Vec<_>>>()?;
    let masks = (0..t)
        .map(|_| Mask::from_raw(w, h, r.bytes(w * h)?).map_err(|e| Error::Format(e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    let mut actions = Vec::with_capacity(t);
    for _ in 0..t {
        let mut a: Action = [0.0; ACTION_DIM];
        for v in a.iter_mut() {
            *v = r.f32()?;
        }
        actions.push(a);
    }
    let count = r.u32()? as usize;
    let mut prompts = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let tag = r.bytes(1)?[0];
        let kind = PromptKind::from_tag(tag)
            .ok_or_else(|| Error::Format(format!("{}: unknown prompt tag {tag}", path.display())))?;
        let n = match kind {
            PromptKind::Point => 2,
            PromptKind::Line | PromptKind::Box => 4,
            PromptKind::MaskRef => 0,
        };
        let coords = (0..n).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        prompts.push(VisualPrompt::from_coords(kind, &coords).map_err(|e| Error::Format(e.to_string()))?);
    }
    let mut rest = Vec::new();
    r.inner.read_to_end(&mut rest).map_err(|e| Error::io(path, e))?;
    if !rest.is_empty() {
        return Err(Error::Format(format!("{}: {} trailing bytes", path.display(), rest.len())));
    }
    let e = Episode {
        frames,
        masks,
        actions,
        instruction,
        prompts,
        target_text,
    };
    e.validate().map_err(|err| Error::Format(format!("{}: {err}", path.display())))?;
    Ok(e)
}

pub fn write_episode(e: &Episode, path: &Path) -> Result<()> {
    write_atomic(path, &encode_episode(e)?)
}

pub fn read_episode(path: &Path) -> Result<Episode> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    decode_episode(std::io::BufReader::new(file), &PathBuf::from(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny() -> Episode {
        Episode {
            frames: vec![Image::new(8, 8)],
            masks: vec![Mask::empty(8, 8)],
            actions: vec![[0.0; 7]],
            instruction: "pick the cup".into(),
            prompts: vec![],
            target_text: String::new(),
        }
    }

    fn bits(e: &Episode) -> Vec<u32> {
        e.actions.iter().flatten().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn zero_frame_round_trip() {
        let e = tiny();
        let back = decode_episode(&encode_episode(&e).unwrap()[..], Path::new("mem")).unwrap();
        assert_eq!(back, e);
        assert_eq!(bits(&back), bits(&e));
    }

    #[test]
    fn prompt_order_and_coords_preserved() {
        let mut e = tiny();
        e.prompts = vec![
            VisualPrompt::Point { x: 0.1, y: 0.9 },
            VisualPrompt::Line { x1: 0.2, y1: 0.3, x2: 0.7, y2: 0.1 },
            VisualPrompt::Box { x1: 0.05, y1: 0.1, x2: 0.5, y2: 0.6 },
        ];
        let back = decode_episode(&encode_episode(&e).unwrap()[..], Path::new("mem")).unwrap();
        assert_eq!(back.prompts, e.prompts);
    }

    #[test]
    fn bad_magic_is_format_error() {
        let mut bytes = encode_episode(&tiny()).unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_episode(&bytes[..], Path::new("x")), Err(Error::Format(_))));
    }

    #[test]
    fn truncation_is_io_error() {
        let bytes = encode_episode(&tiny()).unwrap();
        assert!(matches!(
            decode_episode(&bytes[..bytes.len() - 3], Path::new("x")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn invalid_gripper_is_rejected_on_write() {
        let mut e = tiny();
        e.actions[0][6] = 1.5;
        assert!(encode_episode(&e).is_err());
    }

    fn arb_prompt() -> impl Strategy<Value = VisualPrompt> {
        let u = 0.0f32..=1.0;
        prop_oneof![
            (u.clone(), u.clone()).prop_map(|(x, y)| VisualPrompt::Point { x, y }),
            (u.clone(), u.clone(), u.clone(), u.clone()).prop_map(|(x1, y1, x2, y2)| VisualPrompt::Line { x1, y1, x2, y2 }),
            (u.clone(), u.clone(), u.clone(), u.clone()).prop_map(|(a, b, c, d)| VisualPrompt::Box {
                x1: a.min(c),
                y1: b.min(d),
                x2: a.max(c),
                y2: b.max(d)
            }),
            Just(VisualPrompt::MaskRef),
        ]
    }

    prop_compose! {
        fn arb_episode()(t in 1usize..4, w in 1usize..6, h in 1usize..6)
            (frames in proptest::collection::vec(proptest::collection::vec(any::<u8>(), w * h * 3), t),
             masks in proptest::collection::vec(proptest::collection::vec(any::<bool>(), w * h), t),
             actions in proptest::collection::vec((proptest::array::uniform6(-1e3f32..1e3), 0.0f32..=1.0), t),
             instruction in "[a-z ]{0,20}",
             target in "\\PC{0,8}",
             prompts in proptest::collection::vec(arb_prompt(), 0..5),
             w in Just(w), h in Just(h)) -> Episode {
            Episode {
                frames: frames.into_iter().map(|d| Image::from_raw(w, h, d).unwrap()).collect(),
                masks: masks.into_iter().map(|d| Mask::from_raw(w, h, d.into_iter().map(|b| if b { 255 } else { 0 }).collect()).unwrap()).collect(),
                actions: actions.into_iter().map(|(a, g)| [a[0], a[1], a[2], a[3], a[4], a[5], g]).collect(),
                instruction,
                prompts,
                target_text: target,
            }
        }
    }

    proptest! {
        #[test]
        fn round_trip_is_bitwise(e in arb_episode()) {
            let bytes = encode_episode(&e).unwrap();
            let back = decode_episode(&bytes[..], Path::new("mem")).unwrap();
            prop_assert_eq!(bits(&back), bits(&e));
            prop_assert_eq!(encode_episode(&back).unwrap(), bytes);
        }
    }
}
