//! Line-delimited JSON backend protocol over a subprocess's standard
//! streams.
//!
//! Each request is one JSON object `{op, image, text, box}` where `op` is
//! `gripper`, `reason`, `detect` or `mask` and `image` carries `width`,
//! `height` and base64 raw RGB. Each response is `{boxes, confidences,
//! mask, text, error}` with `mask` as base64 bytes (0 or 255 per pixel).

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::{Arc, Mutex};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{BackendSuite, Detection, Detector, GripperSegmenter, MaskPredictor, TargetReasoner};
use crate::error::{Error, Result};
use crate::raster::{Image, Mask, NormBox};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireImage {
    pub width: usize,
    pub height: usize,
    pub rgb: String,
}

impl WireImage {
    pub fn encode(img: &Image) -> Self {
        Self {
            width: img.width(),
            height: img.height(),
            rgb: B64.encode(img.as_raw()),
        }
    }

    pub fn decode(&self) -> Result<Image> {
        let raw = B64
            .decode(&self.rgb)
            .map_err(|e| Error::Backend(format!("bad image payload: {e}")))?;
        Image::from_raw(self.width, self.height, raw)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub op: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<WireImage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, rename = "box", skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[f32; 4]>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Response {
    #[serde(default)]
    pub boxes: Vec<[f32; 4]>,
    #[serde(default)]
    pub confidences: Vec<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

fn to_box(b: [f32; 4]) -> NormBox {
    NormBox {
        x1: b[0],
        y1: b[1],
        x2: b[2],
        y2: b[3],
    }
}

fn from_box(b: NormBox) -> [f32; 4] {
    [b.x1, b.y1, b.x2, b.y2]
}

fn detections(r: &Response) -> Result<Vec<Detection>> {
    if r.boxes.len() != r.confidences.len() {
        return Err(Error::Backend(format!(
            "{} boxes but {} confidences",
            r.boxes.len(),
            r.confidences.len()
        )));
    }
    r.boxes
        .iter()
        .zip(&r.confidences)
        .map(|(&b, &c)| {
            if !(0.0..=1.0).contains(&c) {
                return Err(Error::Backend(format!("confidence {c} outside [0, 1]")));
            }
            Ok(Detection { bbox: to_box(b), confidence: c })
        })
        .collect()
}

struct Channel {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

/// A subprocess speaking the protocol. Calls are serialized.
pub struct ExternalBackend {
    channel: Mutex<Channel>,
}

impl ExternalBackend {
    pub fn spawn(program: &str, args: &[String]) -> Result<Self> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Backend(format!("cannot start {program}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(Self {
            channel: Mutex::new(Channel { child, stdin, stdout }),
        })
    }

    pub fn call(&self, req: &Request) -> Result<Response> {
        let mut ch = self
            .channel
            .lock()
            .map_err(|_| Error::Backend("backend channel poisoned".into()))?;
        let mut line = serde_json::to_string(req)?;
        line.push('\n');
        ch.stdin
            .write_all(line.as_bytes())
            .and_then(|_| ch.stdin.flush())
            .map_err(|e| Error::Backend(format!("write to backend failed: {e}")))?;
        let mut reply = String::new();
        let n = ch
            .stdout
            .read_line(&mut reply)
            .map_err(|e| Error::Backend(format!("read from backend failed: {e}")))?;
        if n == 0 {
            return Err(Error::Backend("backend closed its output".into()));
        }
        let resp: Response =
            serde_json::from_str(&reply).map_err(|e| Error::Backend(format!("malformed backend reply: {e}")))?;
        match resp.error {
            Some(msg) => Err(Error::Backend(msg)),
            None => Ok(resp),
        }
    }
}

impl Drop for ExternalBackend {
    fn drop(&mut self) {
        if let Ok(ch) = self.channel.get_mut() {
            let _ = ch.child.kill();
            let _ = ch.child.wait();
        }
    }
}

/// Forwards every backend role to one shared subprocess.
#[derive(Clone)]
pub struct Shared(pub Arc<ExternalBackend>);

impl GripperSegmenter for Shared {
    fn locate(&self, frames: &[&Image]) -> Result<Vec<Option<Detection>>> {
        frames
            .iter()
            .map(|f| {
                let r = self.0.call(&Request {
                    op: "gripper".into(),
                    image: Some(WireImage::encode(f)),
                    text: None,
                    bbox: None,
                })?;
                Ok(detections(&r)?.into_iter().next())
            })
            .collect()
    }
}

impl TargetReasoner for Shared {
    fn target(&self, instruction: &str) -> Result<Option<String>> {
        let r = self.0.call(&Request {
            op: "reason".into(),
            image: None,
            text: Some(instruction.into()),
            bbox: None,
        })?;
        Ok(r.text.filter(|t| !t.is_empty()))
    }
}

impl Detector for Shared {
    fn detect(&self, frame: &Image, text: &str) -> Result<Vec<Detection>> {
        let r = self.0.call(&Request {
            op: "detect".into(),
            image: Some(WireImage::encode(frame)),
            text: Some(text.into()),
            bbox: None,
        })?;
        detections(&r)
    }
}

impl MaskPredictor for Shared {
    fn predict(&self, frame: &Image, bbox: NormBox) -> Result<(Mask, f32)> {
        let r = self.0.call(&Request {
            op: "mask".into(),
            image: Some(WireImage::encode(frame)),
            text: None,
            bbox: Some(from_box(bbox)),
        })?;
        let payload = r.mask.ok_or_else(|| Error::Backend("mask reply without mask".into()))?;
        let raw = B64
            .decode(payload)
            .map_err(|e| Error::Backend(format!("bad mask payload: {e}")))?;
        let conf = r.confidences.first().copied().unwrap_or(0.0);
        Ok((Mask::from_raw(frame.width(), frame.height(), raw)?, conf))
    }
}

impl BackendSuite {
    /// Every role served by one subprocess, one request at a time.
    pub fn external(program: &str, args: &[String]) -> Result<Self> {
        let shared = Shared(Arc::new(ExternalBackend::spawn(program, args)?));
        Ok(Self {
            gripper: Box::new(shared.clone()),
            reasoner: Box::new(shared.clone()),
            detector: Box::new(shared.clone()),
            masks: Box::new(shared),
            concurrent: false,
        })
    }
}

fn answer(suite: &BackendSuite, req: &Request) -> Result<Response> {
    let image = || {
        req.image
            .as_ref()
            .ok_or_else(|| Error::Backend(format!("{} request needs an image", req.op)))?
            .decode()
    };
    let text = || {
        req.text
            .clone()
            .ok_or_else(|| Error::Backend(format!("{} request needs text", req.op)))
    };
    let mut out = Response::default();
    match req.op.as_str() {
        "gripper" => {
            let img = image()?;
            if let Some(d) = suite.gripper.locate(&[&img])?.pop().flatten() {
                out.boxes.push(from_box(d.bbox));
                out.confidences.push(d.confidence);
            }
        }
        "reason" => out.text = Some(suite.reasoner.target(&text()?)?.unwrap_or_default()),
        "detect" => {
            for d in suite.detector.detect(&image()?, &text()?)? {
                out.boxes.push(from_box(d.bbox));
                out.confidences.push(d.confidence);
            }
        }
        "mask" => {
            let b = req.bbox.ok_or_else(|| Error::Backend("mask request needs a box".into()))?;
            let (m, c) = suite.masks.predict(&image()?, to_box(b))?;
            out.mask = Some(B64.encode(m.as_raw()));
            out.confidences.push(c);
        }
        other => return Err(Error::Backend(format!("unknown op {other:?}"))),
    }
    Ok(out)
}

/// Answers requests from `input` with `suite` until end of input. Request
/// failures are reported in the reply's `error` field.
pub fn serve(suite: &BackendSuite, input: impl BufRead, mut output: impl Write) -> Result<()> {
    let io_err = |e| Error::io("<backend stream>", e);
    for line in input.lines() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let resp = serde_json::from_str::<Request>(&line)
            .map_err(|e| Error::Backend(format!("malformed request: {e}")))
            .and_then(|req| answer(suite, &req))
            .unwrap_or_else(|e| Response {
                error: Some(e.to_string()),
                ..Default::default()
            });
        let mut text = serde_json::to_string(&resp)?;
        text.push('\n');
        output.write_all(text.as_bytes()).map_err(io_err)?;
        output.flush().map_err(io_err)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn roundtrip(suite: &BackendSuite, req: &Request) -> Response {
        let mut input = serde_json::to_string(req).unwrap();
        input.push('\n');
        let mut out = Vec::new();
        serve(suite, input.as_bytes(), &mut out).unwrap();
        serde_json::from_slice(&out).unwrap()
    }

    #[test]
    fn serve_answers_each_op() {
        let suite = BackendSuite::oracle();
        let r = roundtrip(
            &suite,
            &Request {
                op: "reason".into(),
                image: None,
                text: Some("pick the cup".into()),
                bbox: None,
            },
        );
        assert_eq!(r.text.as_deref(), Some("cup"));

        let mut img = Image::filled(8, 8, [0, 0, 0]);
        img.set(2, 3, crate::synthetic::kind_by_name("cup").unwrap().color);
        let r = roundtrip(
            &suite,
            &Request {
                op: "mask".into(),
                image: Some(WireImage::encode(&img)),
                text: None,
                bbox: Some([0.0, 0.0, 1.0, 1.0]),
            },
        );
        let raw = B64.decode(r.mask.unwrap()).unwrap();
        assert_eq!(Mask::from_raw(8, 8, raw).unwrap().pixels(), vec![(2, 3)]);
    }

    #[test]
    fn serve_reports_bad_requests() {
        let mut out = Vec::new();
        serve(&BackendSuite::oracle(), "{\"op\":\"fly\"}\nnot json\n".as_bytes(), &mut out).unwrap();
        let lines: Vec<Response> = out
            .split(|&b| b == b'\n')
            .filter(|l| !l.is_empty())
            .map(|l| serde_json::from_slice(l).unwrap())
            .collect();
        assert_eq!(lines.len(), 2);
        assert!(lines.iter().all(|r| r.error.is_some()));
    }

    #[test]
    fn mismatched_reply_lengths_are_backend_errors() {
        let r = Response {
            boxes: vec![[0.0, 0.0, 1.0, 1.0]],
            ..Default::default()
        };
        assert!(matches!(detections(&r), Err(Error::Backend(_))));
    }
}
