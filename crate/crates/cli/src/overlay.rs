//! Debug rendering of a frame with its mask and visual prompts.

use pixact::episode::VisualPrompt;
use pixact::raster::{Image, Mask};

const MASK_TINT: [u8; 3] = [0, 255, 0];
const POINT_COLOR: [u8; 3] = [255, 40, 40];
const LINE_COLOR: [u8; 3] = [0, 220, 255];
const BOX_COLOR: [u8; 3] = [255, 255, 255];

fn put(img: &mut Image, x: i64, y: i64, rgb: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as usize) < img.width() && (y as usize) < img.height() {
        img.set(x as usize, y as usize, rgb);
    }
}

fn segment(img: &mut Image, (x0, y0): (i64, i64), (x1, y1): (i64, i64), rgb: [u8; 3]) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        put(img, x, y, rgb);
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Upscales `frame` by `scale`, blends the mask in green and draws points,
/// lines and boxes on top.
pub fn render(frame: &Image, mask: Option<&Mask>, prompts: &[VisualPrompt], scale: usize) -> Image {
    let scale = scale.max(1);
    let (w, h) = (frame.width() * scale, frame.height() * scale);
    let mut out = Image::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = (x / scale, y / scale);
            let mut c = frame.get(sx, sy);
            if mask.is_some_and(|m| m.get(sx, sy)) {
                for (v, t) in c.iter_mut().zip(MASK_TINT) {
                    *v = ((*v as u16 + t as u16) / 2) as u8;
                }
            }
            out.set(x, y, c);
        }
    }
    let px = |x: f32| (x * w as f32).round() as i64;
    let py = |y: f32| (y * h as f32).round() as i64;
    for p in prompts {
        match *p {
            VisualPrompt::Point { x, y } => {
                let r = scale as i64 / 2 + 1;
                for dy in -r..=r {
                    for dx in -r..=r {
                        put(&mut out, px(x) + dx, py(y) + dy, POINT_COLOR);
                    }
                }
            }
            VisualPrompt::Line { x1, y1, x2, y2 } => segment(&mut out, (px(x1), py(y1)), (px(x2), py(y2)), LINE_COLOR),
            VisualPrompt::Box { x1, y1, x2, y2 } => {
                let (a, b, c, d) = (px(x1), py(y1), px(x2) - 1, py(y2) - 1);
                segment(&mut out, (a, b), (c, b), BOX_COLOR);
                segment(&mut out, (c, b), (c, d), BOX_COLOR);
                segment(&mut out, (c, d), (a, d), BOX_COLOR);
                segment(&mut out, (a, d), (a, b), BOX_COLOR);
            }
            VisualPrompt::MaskRef => {}
        }
    }
    out
}
