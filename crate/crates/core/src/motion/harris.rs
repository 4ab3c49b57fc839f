//! Harris corner detection with square non-maximum suppression.

use super::InterestPoint;
use crate::video_io::GrayImage;

pub const HARRIS_K: f64 = 0.04;
pub const NMS_RADIUS: usize = 3;
/// Responses below this fraction of the strongest response are discarded.
pub const RELATIVE_THRESHOLD: f64 = 0.01;
const ABSOLUTE_THRESHOLD: f64 = 1e-12;
const BORDER: usize = 2;

/// Harris response `det(M) - k trace(M)^2` at every pixel, where `M` is the
/// structure tensor of Sobel gradients smoothed by a 3x3 binomial window.
/// Borders are handled by clamping.
pub fn harris_response(img: &GrayImage) -> Vec<f64> {
    let (h, w) = (img.height(), img.width());
    let px = |r: isize, c: isize| img.get_clamped(r, c) as f64;

    let mut ixx = vec![0.0; h * w];
    let mut iyy = vec![0.0; h * w];
    let mut ixy = vec![0.0; h * w];
    for r in 0..h as isize {
        for c in 0..w as isize {
            let gx = (px(r - 1, c + 1) + 2.0 * px(r, c + 1) + px(r + 1, c + 1)
                - px(r - 1, c - 1)
                - 2.0 * px(r, c - 1)
                - px(r + 1, c - 1))
                / 8.0;
            let gy = (px(r + 1, c - 1) + 2.0 * px(r + 1, c) + px(r + 1, c + 1)
                - px(r - 1, c - 1)
                - 2.0 * px(r - 1, c)
                - px(r - 1, c + 1))
                / 8.0;
            let i = r as usize * w + c as usize;
            ixx[i] = gx * gx;
            iyy[i] = gy * gy;
            ixy[i] = gx * gy;
        }
    }

    let sxx = smooth_binomial(&ixx, h, w);
    let syy = smooth_binomial(&iyy, h, w);
    let sxy = smooth_binomial(&ixy, h, w);
    sxx.iter()
        .zip(&syy)
        .zip(&sxy)
        .map(|((&a, &b), &c)| {
            let det = a * b - c * c;
            let tr = a + b;
            det - HARRIS_K * tr * tr
        })
        .collect()
}

/// Separable [1 2 1]/4 smoothing in both directions, border-clamped.
fn smooth_binomial(src: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut tmp = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let l = src[r * w + c.saturating_sub(1)];
            let m = src[r * w + c];
            let rr = src[r * w + (c + 1).min(w - 1)];
            tmp[r * w + c] = (l + 2.0 * m + rr) / 4.0;
        }
    }
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        let up = r.saturating_sub(1);
        let down = (r + 1).min(h - 1);
        for c in 0..w {
            out[r * w + c] = (tmp[up * w + c] + 2.0 * tmp[r * w + c] + tmp[down * w + c]) / 4.0;
        }
    }
    out
}

/// Detects up to `max_n` Harris corners, strongest first.
///
/// A pixel survives suppression when no pixel within [`NMS_RADIUS`] has a
/// larger response, and no earlier pixel (in raster order) has an equal one.
/// Positions are refined to subpixel precision with a 1-D parabola per axis.
pub fn detect_interest_points(img: &GrayImage, max_n: usize) -> Vec<InterestPoint> {
    let (h, w) = (img.height(), img.width());
    if h < 8 || w < 8 || max_n == 0 {
        return Vec::new();
    }
    let resp = harris_response(img);
    let peak = resp.iter().cloned().fold(0.0f64, f64::max);
    let threshold = (peak * RELATIVE_THRESHOLD).max(ABSOLUTE_THRESHOLD);
    if peak <= threshold {
        return Vec::new();
    }

    let rad = NMS_RADIUS as isize;
    let mut points = Vec::new();
    for r in BORDER..h - BORDER {
        'pixel: for c in BORDER..w - BORDER {
            let v = resp[r * w + c];
            if v <= threshold {
                continue;
            }
            for dr in -rad..=rad {
                for dc in -rad..=rad {
                    let (rr, cc) = (r as isize + dr, c as isize + dc);
                    if (dr == 0 && dc == 0)
                        || rr < 0
                        || cc < 0
                        || rr >= h as isize
                        || cc >= w as isize
                    {
                        continue;
                    }
                    let u = resp[rr as usize * w + cc as usize];
                    let earlier = (dr, dc) < (0, 0);
                    if u > v || (u == v && earlier) {
                        continue 'pixel;
                    }
                }
            }
            let at = |rr: usize, cc: usize| resp[rr * w + cc];
            let ox = parabolic_offset(at(r, c - 1), v, at(r, c + 1));
            let oy = parabolic_offset(at(r - 1, c), v, at(r + 1, c));
            points.push(InterestPoint {
                x: c as f64 + ox,
                y: r as f64 + oy,
                score: v,
            });
        }
    }
    points.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.y.total_cmp(&b.y))
            .then(a.x.total_cmp(&b.x))
    });
    points.truncate(max_n);
    points
}

fn parabolic_offset(left: f64, center: f64, right: f64) -> f64 {
    let denom = left - 2.0 * center + right;
    if denom < 0.0 {
        (0.5 * (left - right) / denom).clamp(-0.5, 0.5)
    } else {
        0.0
    }
}
