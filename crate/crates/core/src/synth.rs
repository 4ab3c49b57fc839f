//! Procedural frame sequences with known motion, for tests and demos.

use std::fs;
use std::path::Path;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng;
use crate::video_io::{save_png, BBox, GrayImage};

/// Value noise: uniform random levels on a `cell`-pixel lattice,
/// bilinearly interpolated, mapped to `[lo, hi]`.
pub fn value_noise(h: usize, w: usize, cell: usize, lo: f32, hi: f32, seed: u64) -> GrayImage {
    let mut r = rng::seeded(seed);
    let (gh, gw) = (h / cell + 2, w / cell + 2);
    let grid: Vec<f32> = (0..gh * gw).map(|_| r.random_range(0.0..1.0)).collect();
    GrayImage::from_fn(h, w, |y, x| {
        let (fy, fx) = (y as f32 / cell as f32, x as f32 / cell as f32);
        let (iy, ix) = (fy as usize, fx as usize);
        let (ty, tx) = (fy - iy as f32, fx - ix as f32);
        let g = |a: usize, b: usize| grid[a * gw + b];
        let top = g(iy, ix) + (g(iy, ix + 1) - g(iy, ix)) * tx;
        let bot = g(iy + 1, ix) + (g(iy + 1, ix + 1) - g(iy + 1, ix)) * tx;
        lo + (hi - lo) * (top + (bot - top) * ty)
    })
}

/// A scene with one moving square and its ground-truth box per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct MovingSquare {
    pub frames: Vec<GrayImage>,
    pub boxes: Vec<BBox>,
}

/// Static textured background with a differently textured square of side
/// `side` starting at `start` and moving `velocity` whole pixels per frame.
pub fn moving_square_video(
    seed: u64,
    n_frames: usize,
    (h, w): (usize, usize),
    side: usize,
    start: (i64, i64),
    velocity: (i64, i64),
) -> MovingSquare {
    let bg = value_noise(h, w, 4, 0.0, 1.0, rng::derive_seed(seed, 1));
    let fg = value_noise(side, side, 4, 0.0, 1.0, rng::derive_seed(seed, 2));
    let mut frames = Vec::with_capacity(n_frames);
    let mut boxes = Vec::with_capacity(n_frames);
    for t in 0..n_frames as i64 {
        let b = BBox::new(
            start.0 + velocity.0 * t,
            start.1 + velocity.1 * t,
            side,
            side,
        );
        let mut img = bg.clone();
        for r in 0..side {
            for c in 0..side {
                let (y, x) = (b.y + r as i64, b.x + c as i64);
                if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                    img.set(y as usize, x as usize, fg.get(r, c));
                }
            }
        }
        frames.push(img);
        boxes.push(b);
    }
    MovingSquare { frames, boxes }
}

/// A camera panning over a static textured scene at `velocity` whole
/// pixels per frame.
pub fn pan_video(
    seed: u64,
    n_frames: usize,
    (h, w): (usize, usize),
    velocity: (i64, i64),
) -> Vec<GrayImage> {
    let span = |v: i64| (v.unsigned_abs() as usize) * n_frames;
    let (bh, bw) = (h + span(velocity.1), w + span(velocity.0));
    let scene = value_noise(bh, bw, 8, 0.1, 0.9, seed);
    let x0 = if velocity.0 < 0 {
        span(velocity.0) as i64
    } else {
        0
    };
    let y0 = if velocity.1 < 0 {
        span(velocity.1) as i64
    } else {
        0
    };
    (0..n_frames as i64)
        .map(|t| {
            let (ox, oy) = (
                (x0 + velocity.0 * t) as usize,
                (y0 + velocity.1 * t) as usize,
            );
            GrayImage::from_fn(h, w, |y, x| scene.get(y + oy, x + ox))
        })
        .collect()
}

/// The same textured frame repeated.
pub fn static_video(seed: u64, n_frames: usize, (h, w): (usize, usize)) -> Vec<GrayImage> {
    let img = value_noise(h, w, 8, 0.1, 0.9, seed);
    vec![img; n_frames]
}

/// Writes frames as `000000.png`, `000001.png`, ... into `dir`.
pub fn write_video(dir: &Path, frames: &[GrayImage]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, f) in frames.iter().enumerate() {
        save_png(&dir.join(format!("{i:06}.png")), f)?;
    }
    Ok(())
}
