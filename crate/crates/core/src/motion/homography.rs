//! Planar homography: normalized DLT and a fixed-iteration RANSAC.

use nalgebra::{DMatrix, Matrix3};
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// 3x3 projective map with `m[2][2] == 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography {
    m: [[f64; 3]; 3],
}

const MIN_DET: f64 = 1e-12;

impl Homography {
    pub fn identity() -> Self {
        Self {
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self {
            m: [[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]],
        }
    }

    /// Scales so the bottom-right entry is 1 and checks invertibility.
    pub fn from_matrix(m: [[f64; 3]; 3]) -> Result<Self> {
        let s = m[2][2];
        if !s.is_finite() || s.abs() < 1e-12 {
            return Err(Error::DegenerateHomography(
                "bottom-right entry is zero".into(),
            ));
        }
        let mut n = m;
        for row in n.iter_mut() {
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let h = Self { m: n };
        let det = h.determinant();
        if !det.is_finite() || det.abs() <= MIN_DET {
            return Err(Error::DegenerateHomography(format!("determinant {det:e}")));
        }
        Ok(h)
    }

    pub fn matrix(&self) -> [[f64; 3]; 3] {
        self.m
    }

    pub fn determinant(&self) -> f64 {
        let m = &self.m;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// Maps a point; `None` when it lands on the line at infinity.
    pub fn apply(&self, p: Point) -> Option<Point> {
        let m = &self.m;
        let w = m[2][0] * p.x + m[2][1] * p.y + m[2][2];
        if w.abs() < 1e-12 {
            return None;
        }
        Some(Point::new(
            (m[0][0] * p.x + m[0][1] * p.y + m[0][2]) / w,
            (m[1][0] * p.x + m[1][1] * p.y + m[1][2]) / w,
        ))
    }

    pub fn frobenius_distance(&self, other: &Homography) -> f64 {
        self.m
            .iter()
            .flatten()
            .zip(other.m.iter().flatten())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    fn transfer_error(&self, src: Point, dst: Point) -> f64 {
        match self.apply(src) {
            Some(p) => (p.x - dst.x).hypot(p.y - dst.y),
            None => f64::INFINITY,
        }
    }
}

/// Similarity that moves the centroid to the origin and sets the mean
/// distance from it to sqrt(2).
fn normalizer(points: &[Point]) -> Option<Matrix3<f64>> {
    let n = points.len() as f64;
    let cx = points.iter().map(|p| p.x).sum::<f64>() / n;
    let cy = points.iter().map(|p| p.y).sum::<f64>() / n;
    let mean = points
        .iter()
        .map(|p| (p.x - cx).hypot(p.y - cy))
        .sum::<f64>()
        / n;
    if !(mean > 1e-12) {
        return None;
    }
    let s = std::f64::consts::SQRT_2 / mean;
    Some(Matrix3::new(
        s,
        0.0,
        -s * cx,
        0.0,
        s,
        -s * cy,
        0.0,
        0.0,
        1.0,
    ))
}

fn transform(t: &Matrix3<f64>, p: Point) -> Point {
    Point::new(
        t[(0, 0)] * p.x + t[(0, 1)] * p.y + t[(0, 2)],
        t[(1, 0)] * p.x + t[(1, 1)] * p.y + t[(1, 2)],
    )
}

/// Normalized direct linear transform over all correspondences
/// (least squares when more than four).
pub fn fit_homography_dlt(matches: &[(Point, Point)]) -> Result<Homography> {
    if matches.len() < 4 {
        return Err(Error::TooFewMatches {
            need: 4,
            got: matches.len(),
        });
    }
    let src: Vec<Point> = matches.iter().map(|m| m.0).collect();
    let dst: Vec<Point> = matches.iter().map(|m| m.1).collect();
    let degenerate = || Error::DegenerateHomography("coincident points".into());
    let ts = normalizer(&src).ok_or_else(degenerate)?;
    let td = normalizer(&dst).ok_or_else(degenerate)?;

    // Pad to at least 9 rows so the SVD yields the full right basis.
    let rows = (2 * matches.len()).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, (s, d)) in src.iter().zip(&dst).enumerate() {
        let s = transform(&ts, *s);
        let d = transform(&td, *d);
        let (r0, r1) = (2 * i, 2 * i + 1);
        a[(r0, 0)] = -s.x;
        a[(r0, 1)] = -s.y;
        a[(r0, 2)] = -1.0;
        a[(r0, 6)] = d.x * s.x;
        a[(r0, 7)] = d.x * s.y;
        a[(r0, 8)] = d.x;
        a[(r1, 3)] = -s.x;
        a[(r1, 4)] = -s.y;
        a[(r1, 5)] = -1.0;
        a[(r1, 6)] = d.y * s.x;
        a[(r1, 7)] = d.y * s.y;
        a[(r1, 8)] = d.y;
    }
    let svd = a.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::DegenerateHomography("SVD failed".into()))?;
    let smallest = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap();
    let h = v_t.row(smallest);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let td_inv = td
        .try_inverse()
        .ok_or_else(|| Error::DegenerateHomography("singular normalizer".into()))?;
    let full = td_inv * hn * ts;
    let mut m = [[0.0; 3]; 3];
    for (r, row) in m.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = full[(r, c)];
        }
    }
    Homography::from_matrix(m)
}

fn collinear(a: Point, b: Point, c: Point) -> bool {
    let cross = (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x);
    let scale = ((b.x - a.x).hypot(b.y - a.y) * (c.x - a.x).hypot(c.y - a.y)).max(1e-300);
    cross.abs() <= 1e-6 * scale
}

fn sample_is_degenerate(pts: &[Point; 4]) -> bool {
    const TRIPLES: [[usize; 3]; 4] = [[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]];
    TRIPLES
        .iter()
        .any(|t| collinear(pts[t[0]], pts[t[1]], pts[t[2]]))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RansacParams {
    pub iters: usize,
    /// Inlier threshold on forward transfer error, pixels.
    pub inlier_tol: f64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            iters: 500,
            inlier_tol: 1.0,
        }
    }
}

fn inlier_mask(h: &Homography, matches: &[(Point, Point)], tol: f64) -> Vec<bool> {
    matches
        .iter()
        .map(|&(s, d)| h.transfer_error(s, d) <= tol)
        .collect()
}

/// Robust homography fit.
///
/// Runs exactly `params.iters` minimal four-point hypotheses (collinear
/// samples are skipped), keeps the first one with the most inliers, and
/// refits on its inliers with the normalized DLT until the inlier set
/// stops changing.
pub fn estimate_homography_ransac(
    matches: &[(Point, Point)],
    params: &RansacParams,
    seed: u64,
) -> Result<(Homography, Vec<bool>)> {
    if matches.len() < 4 {
        return Err(Error::TooFewMatches {
            need: 4,
            got: matches.len(),
        });
    }
    let mut rng = rng::seeded(seed);
    let mut best: Option<(usize, Homography)> = None;
    for _ in 0..params.iters {
        let pick = index::sample(&mut rng, matches.len(), 4);
        let sample: Vec<(Point, Point)> = pick.iter().map(|i| matches[i]).collect();
        let src = [sample[0].0, sample[1].0, sample[2].0, sample[3].0];
        let dst = [sample[0].1, sample[1].1, sample[2].1, sample[3].1];
        if sample_is_degenerate(&src) || sample_is_degenerate(&dst) {
            continue;
        }
        let Ok(h) = fit_homography_dlt(&sample) else {
            continue;
        };
        let count = inlier_mask(&h, matches, params.inlier_tol)
            .iter()
            .filter(|&&b| b)
            .count();
        if best.as_ref().is_none_or(|(c, _)| count > *c) {
            best = Some((count, h));
        }
    }
    let (_, mut h) = best.ok_or_else(|| {
        Error::DegenerateHomography("every sampled hypothesis was collinear".into())
    })?;
    let mut mask = inlier_mask(&h, matches, params.inlier_tol);

    for _ in 0..5 {
        let inliers: Vec<(Point, Point)> = matches
            .iter()
            .zip(&mask)
            .filter(|(_, &m)| m)
            .map(|(m, _)| *m)
            .collect();
        let Ok(refit) = fit_homography_dlt(&inliers) else {
            break;
        };
        let refit_mask = inlier_mask(&refit, matches, params.inlier_tol);
        let before = mask.iter().filter(|&&b| b).count();
        let after = refit_mask.iter().filter(|&&b| b).count();
        if after < before {
            break;
        }
        h = refit;
        if refit_mask == mask {
            break;
        }
        mask = refit_mask;
    }
    Ok((h, mask))
}
