//! Sprite rendering and PGM/PPM dumps.
//!
//! All pixel values are computed in f32 and widened to f64, so storing
//! frames as f32 in the dataset format round-trips exactly.

use super::{FRAME_C, FRAME_H, FRAME_W};
use crate::autodiff::Tensor;
use crate::{Error, Result};
use rand::Rng;
use std::io::Write;
use std::path::Path;

/// RGB color with components expressed as integer 1/127ths of full scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Color(pub i16, pub i16, pub i16);

impl Color {
    fn channels(self) -> [f32; 3] {
        [
            self.0 as f32 / 127.0,
            self.1 as f32 / 127.0,
            self.2 as f32 / 127.0,
        ]
    }
}

pub(crate) const BACKGROUND: Color = Color(-127, -127, -127);
pub(crate) const AGENT: Color = Color(127, 127, 127);
pub(crate) const TABLE: Color = Color(-32, -32, -32);
pub(crate) const WALL: Color = Color(64, 48, -16);

/// Saturated object palette; at least one strong channel each so sprites
/// stand out against the background.
const OBJECT_PALETTE: [Color; 8] = [
    Color(127, -96, -96),
    Color(-96, 127, -96),
    Color(-96, -96, 127),
    Color(127, 127, -96),
    Color(127, -96, 127),
    Color(-96, 127, 127),
    Color(127, 32, -64),
    Color(-64, 32, 127),
];

pub(crate) fn random_object_color(rng: &mut impl Rng) -> Color {
    OBJECT_PALETTE[rng.random_range(0..OBJECT_PALETTE.len())]
}

/// One frame being drawn, `[3, H, W]` in f32.
pub(crate) struct Canvas {
    data: Vec<f32>,
}

impl Canvas {
    pub(crate) fn new() -> Self {
        let mut data = vec![0.0f32; FRAME_C * FRAME_H * FRAME_W];
        let bg = BACKGROUND.channels();
        for c in 0..FRAME_C {
            data[c * FRAME_H * FRAME_W..(c + 1) * FRAME_H * FRAME_W].fill(bg[c]);
        }
        Canvas { data }
    }

    pub(crate) fn fill_rect(&mut self, x: i32, y: i32, w: i32, h: i32, color: Color) {
        let ch = color.channels();
        for yy in y.max(0)..(y + h).min(FRAME_H as i32) {
            for xx in x.max(0)..(x + w).min(FRAME_W as i32) {
                for (c, &v) in ch.iter().enumerate() {
                    self.data[(c * FRAME_H + yy as usize) * FRAME_W + xx as usize] = v;
                }
            }
        }
    }

    /// 2x2 sprite at its top-left cell.
    pub(crate) fn sprite(&mut self, x: i32, y: i32, color: Color) {
        self.fill_rect(x, y, 2, 2, color);
    }

    pub(crate) fn into_tensor(self) -> Tensor {
        let data: Vec<f64> = self.data.into_iter().map(f64::from).collect();
        Tensor::from_vec(vec![FRAME_C, FRAME_H, FRAME_W], data).expect("canvas values are finite")
    }
}

fn to_byte(v: f64) -> u8 {
    (((v + 1.0) / 2.0 * 255.0).round()).clamp(0.0, 255.0) as u8
}

/// Binary PPM (P6) dump of a `[3,H,W]` frame in [-1, 1].
pub fn frame_to_ppm(frame: &Tensor, path: &Path) -> Result<()> {
    let shape = frame.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::shape("frame_to_ppm", format!("{:?}", shape)));
    }
    let (h, w) = (shape[1], shape[2]);
    let mut out = Vec::with_capacity(32 + 3 * h * w);
    write!(out, "P6\n{} {}\n255\n", w, h).expect("in-memory write");
    let plane = h * w;
    for p in 0..plane {
        for c in 0..3 {
            out.push(to_byte(frame.data()[c * plane + p]));
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Binary PGM (P5) dump of a single-channel `[1,H,W]` (or `[H,W]`) frame.
pub fn frame_to_pgm(frame: &Tensor, path: &Path) -> Result<()> {
    let shape = frame.shape();
    let (h, w) = match shape {
        [1, h, w] => (*h, *w),
        [h, w] => (*h, *w),
        _ => return Err(Error::shape("frame_to_pgm", format!("{:?}", shape))),
    };
    let mut out = Vec::with_capacity(32 + h * w);
    write!(out, "P5\n{} {}\n255\n", w, h).expect("in-memory write");
    for p in 0..h * w {
        out.push(to_byte(frame.data()[p]));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
