//! Sparse pyramidal Lucas-Kanade flow.

use serde::{Deserialize, Serialize};

use super::{InterestPoint, PointFlow};
use crate::error::{Error, Result};
use crate::video_io::GrayImage;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LkParams {
    pub levels: usize,
    /// Odd window side in pixels.
    pub window: usize,
    pub max_iters: usize,
    /// Stop iterating once an update is smaller than this (pixels).
    pub epsilon: f64,
    /// Minimum eigenvalue of the per-pixel averaged structure tensor.
    pub min_eigen: f64,
}

impl Default for LkParams {
    fn default() -> Self {
        Self {
            levels: 3,
            window: 15,
            max_iters: 10,
            epsilon: 0.01,
            min_eigen: 1e-5,
        }
    }
}

/// Downsamples by two after a 5-tap binomial blur.
fn pyr_down(img: &GrayImage) -> GrayImage {
    const K: [f64; 5] = [1.0, 4.0, 6.0, 4.0, 1.0];
    let (h, w) = (img.height(), img.width());
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut tmp = vec![0.0f64; h * ow];
    for r in 0..h {
        for oc in 0..ow {
            let c = (2 * oc) as isize;
            let s: f64 = (0..5)
                .map(|k| K[k] * img.get_clamped(r as isize, c + k as isize - 2) as f64)
                .sum();
            tmp[r * ow + oc] = s / 16.0;
        }
    }
    GrayImage::from_fn(oh, ow, |or, oc| {
        let r = (2 * or) as isize;
        let s: f64 = (0..5)
            .map(|k| {
                let rr = (r + k as isize - 2).clamp(0, h as isize - 1) as usize;
                K[k] * tmp[rr * ow + oc]
            })
            .sum();
        (s / 16.0) as f32
    })
}

pub(crate) fn pyramid(img: &GrayImage, levels: usize) -> Vec<GrayImage> {
    let mut pyr = vec![img.clone()];
    while pyr.len() < levels {
        let last = pyr.last().unwrap();
        if last.height() < 16 || last.width() < 16 {
            break;
        }
        pyr.push(pyr_down(last));
    }
    pyr
}

enum LevelOutcome {
    Flow(f64, f64),
    Lost,
}

/// Iterative LK at one pyramid level starting from the guess `(gx, gy)`.
fn track_level(
    prev: &GrayImage,
    next: &GrayImage,
    px: f64,
    py: f64,
    gx: f64,
    gy: f64,
    params: &LkParams,
    check_eigen: bool,
) -> LevelOutcome {
    let half = (params.window / 2) as isize;
    let n = params.window * params.window;
    let mut tmpl = Vec::with_capacity(n);
    let mut grads = Vec::with_capacity(n);
    let (mut gxx, mut gyy, mut gxy) = (0.0, 0.0, 0.0);
    for dy in -half..=half {
        for dx in -half..=half {
            let (x, y) = (px + dx as f64, py + dy as f64);
            let ix = (prev.sample(y, x + 1.0) - prev.sample(y, x - 1.0)) / 2.0;
            let iy = (prev.sample(y + 1.0, x) - prev.sample(y - 1.0, x)) / 2.0;
            tmpl.push(prev.sample(y, x));
            grads.push((ix, iy));
            gxx += ix * ix;
            gyy += iy * iy;
            gxy += ix * iy;
        }
    }
    let det = gxx * gyy - gxy * gxy;
    let tr = gxx + gyy;
    let min_eig = (tr - ((gxx - gyy).powi(2) + 4.0 * gxy * gxy).sqrt()) / 2.0 / n as f64;
    if min_eig < params.min_eigen || det <= 0.0 {
        if check_eigen {
            return LevelOutcome::Lost;
        }
        // Too little texture at this scale; pass the guess through.
        return LevelOutcome::Flow(gx, gy);
    }

    let (mut fx, mut fy) = (gx, gy);
    let (h, w) = (prev.height() as f64, prev.width() as f64);
    for _ in 0..params.max_iters {
        let (qx, qy) = (px + fx, py + fy);
        if !(qx >= 0.0 && qy >= 0.0 && qx <= w - 1.0 && qy <= h - 1.0) {
            return LevelOutcome::Lost;
        }
        let (mut bx, mut by) = (0.0, 0.0);
        let mut k = 0;
        for dy in -half..=half {
            for dx in -half..=half {
                let e = tmpl[k] - next.sample(qy + dy as f64, qx + dx as f64);
                bx += e * grads[k].0;
                by += e * grads[k].1;
                k += 1;
            }
        }
        let ux = (gyy * bx - gxy * by) / det;
        let uy = (gxx * by - gxy * bx) / det;
        fx += ux;
        fy += uy;
        if !(fx.is_finite() && fy.is_finite()) {
            return LevelOutcome::Lost;
        }
        if ux.hypot(uy) < params.epsilon {
            break;
        }
    }
    LevelOutcome::Flow(fx, fy)
}

/// Estimates the displacement of each point from `prev` to `next`.
///
/// Output order follows `points`. A point is marked invalid when its
/// finest-level structure tensor is too weak (aperture problem), or when
/// the iteration leaves the image or diverges.
pub fn lk_flow(
    prev: &GrayImage,
    next: &GrayImage,
    points: &[InterestPoint],
    params: &LkParams,
) -> Result<Vec<PointFlow>> {
    if (prev.height(), prev.width()) != (next.height(), next.width()) {
        return Err(Error::Shape(format!(
            "frames differ in size: {}x{} vs {}x{}",
            prev.height(),
            prev.width(),
            next.height(),
            next.width()
        )));
    }
    if params.levels == 0 || params.window.is_multiple_of(2) || params.window < 3 {
        return Err(Error::InvalidArgument(format!(
            "need levels >= 1 and an odd window >= 3, got levels={} window={}",
            params.levels, params.window
        )));
    }
    let prev_pyr = pyramid(prev, params.levels);
    let next_pyr = pyramid(next, prev_pyr.len());
    let (h, w) = (prev.height() as f64, prev.width() as f64);

    Ok(points
        .iter()
        .map(|&point| {
            let mut guess = (0.0, 0.0);
            let mut valid = true;
            for level in (0..prev_pyr.len()).rev() {
                let scale = (1u32 << level) as f64;
                let outcome = track_level(
                    &prev_pyr[level],
                    &next_pyr[level],
                    point.x / scale,
                    point.y / scale,
                    guess.0,
                    guess.1,
                    params,
                    level == 0,
                );
                match outcome {
                    LevelOutcome::Flow(fx, fy) => {
                        guess = if level > 0 {
                            (fx * 2.0, fy * 2.0)
                        } else {
                            (fx, fy)
                        };
                    }
                    // Points near the border can fall outside a coarse
                    // level; only the finest level decides validity.
                    LevelOutcome::Lost if level > 0 => {
                        guess = (guess.0 * 2.0, guess.1 * 2.0);
                    }
                    LevelOutcome::Lost => {
                        valid = false;
                        break;
                    }
                }
            }
            let (dx, dy) = guess;
            let (ex, ey) = (point.x + dx, point.y + dy);
            if valid && !(ex >= 0.0 && ey >= 0.0 && ex <= w - 1.0 && ey <= h - 1.0) {
                valid = false;
            }
            if valid {
                PointFlow {
                    point,
                    dx,
                    dy,
                    valid,
                }
            } else {
                PointFlow {
                    point,
                    dx: 0.0,
                    dy: 0.0,
                    valid: false,
                }
            }
        })
        .collect())
}
