//! Camera-stabilized point motion between frames.
//!
//! Interest points are tracked from one frame to the next, a RANSAC
//! homography absorbs the camera motion, and each point's residual flow is
//! thresholded into moving / static. Frames where too few or too many points
//! move are rejected.

mod harris;
mod homography;
mod lk;

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::video_io::GrayImage;

pub use harris::{detect_interest_points, harris_response, HARRIS_K, NMS_RADIUS};
pub use homography::{
    estimate_homography_ransac, fit_homography_dlt, Homography, Point, RansacParams,
};
pub use lk::{lk_flow, LkParams};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InterestPoint {
    pub x: f64,
    pub y: f64,
    pub score: f64,
}

/// Displacement of one point; `dx`/`dy` are meaningful only when `valid`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointFlow {
    pub point: InterestPoint,
    pub dx: f64,
    pub dy: f64,
    pub valid: bool,
}

impl PointFlow {
    pub fn magnitude(&self) -> f64 {
        self.dx.hypot(self.dy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MotionLabel {
    Moving,
    Static,
    Invalid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Accept,
    RejectTooFew,
    RejectTooMany,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameGate {
    pub moving_fraction: f64,
    pub verdict: Verdict,
}

/// Replaces each valid flow by what is left after the homography's
/// predicted motion: `(p + d) - H(p)`, evaluated as `d - (H(p) - p)`.
pub fn residual_flow(flows: &[PointFlow], h: &Homography) -> Vec<PointFlow> {
    flows
        .iter()
        .map(|f| {
            if !f.valid {
                return *f;
            }
            let p = Point::new(f.point.x, f.point.y);
            match h.apply(p) {
                Some(pred) => PointFlow {
                    dx: f.dx - (pred.x - p.x),
                    dy: f.dy - (pred.y - p.y),
                    ..*f
                },
                None => PointFlow { valid: false, ..*f },
            }
        })
        .collect()
}

/// `Moving` iff the flow is valid and its magnitude is strictly greater
/// than `threshold`.
pub fn classify_moving(residuals: &[PointFlow], threshold: f64) -> Vec<MotionLabel> {
    residuals
        .iter()
        .map(|f| {
            if !f.valid {
                MotionLabel::Invalid
            } else if f.magnitude() > threshold {
                MotionLabel::Moving
            } else {
                MotionLabel::Static
            }
        })
        .collect()
}

/// Gates a frame on its moving fraction among valid points. Fractions equal
/// to either bound are accepted.
pub fn gate_frame(labels: &[MotionLabel], low: f64, high: f64) -> Result<FrameGate> {
    if !(0.0..=1.0).contains(&low) || !(0.0..=1.0).contains(&high) || low >= high {
        return Err(Error::InvalidArgument(format!(
            "gate bounds must satisfy 0 <= low < high <= 1, got {low}, {high}"
        )));
    }
    let moving = labels.iter().filter(|&&l| l == MotionLabel::Moving).count();
    let stat = labels.iter().filter(|&&l| l == MotionLabel::Static).count();
    if moving + stat == 0 {
        return Err(Error::NoValidLabels);
    }
    let moving_fraction = moving as f64 / (moving + stat) as f64;
    let verdict = if moving_fraction < low {
        Verdict::RejectTooFew
    } else if moving_fraction > high {
        Verdict::RejectTooMany
    } else {
        Verdict::Accept
    };
    Ok(FrameGate {
        moving_fraction,
        verdict,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MotionParams {
    pub max_points: usize,
    pub lk: LkParams,
    pub ransac: RansacParams,
}

impl Default for MotionParams {
    fn default() -> Self {
        Self {
            max_points: 400,
            lk: LkParams::default(),
            ransac: RansacParams::default(),
        }
    }
}

/// Everything computed for one `(prev, next)` frame pair.
#[derive(Debug, Clone)]
pub struct PairMotion {
    pub flows: Vec<PointFlow>,
    pub homography: Homography,
    pub residuals: Vec<PointFlow>,
    pub labels: Vec<MotionLabel>,
    /// `None` when no point could be tracked.
    pub gate: Option<FrameGate>,
}

impl PairMotion {
    pub fn moving_points(&self) -> Vec<Point> {
        self.residuals
            .iter()
            .zip(&self.labels)
            .filter(|(_, &l)| l == MotionLabel::Moving)
            .map(|(f, _)| Point::new(f.point.x, f.point.y))
            .collect()
    }
}

/// Detect, track, stabilize, classify and gate.
///
/// If no homography can be fit (fewer than four tracked points, or only
/// degenerate samples) the identity is used and the gate sees raw flow.
pub fn analyze_pair(
    prev: &GrayImage,
    next: &GrayImage,
    params: &MotionParams,
    flow_threshold: f64,
    gate_low: f64,
    gate_high: f64,
    seed: u64,
) -> Result<PairMotion> {
    let points = detect_interest_points(prev, params.max_points);
    let flows = lk_flow(prev, next, &points, &params.lk)?;
    let matches: Vec<(Point, Point)> = flows
        .iter()
        .filter(|f| f.valid)
        .map(|f| {
            (
                Point::new(f.point.x, f.point.y),
                Point::new(f.point.x + f.dx, f.point.y + f.dy),
            )
        })
        .collect();
    let homography = match estimate_homography_ransac(&matches, &params.ransac, seed) {
        Ok((h, _)) => h,
        Err(Error::TooFewMatches { .. }) | Err(Error::DegenerateHomography(_)) => {
            Homography::identity()
        }
        Err(e) => return Err(e),
    };
    let residuals = residual_flow(&flows, &homography);
    let labels = classify_moving(&residuals, flow_threshold);
    let gate = match gate_frame(&labels, gate_low, gate_high) {
        Ok(g) => Some(g),
        Err(Error::NoValidLabels) => None,
        Err(e) => return Err(e),
    };
    Ok(PairMotion {
        flows,
        homography,
        residuals,
        labels,
        gate,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowRecord {
    pub x: f64,
    pub y: f64,
    pub dx: f64,
    pub dy: f64,
    pub valid: bool,
    pub label: MotionLabel,
}

/// Writes one JSON object per point.
pub fn write_flow_dump<W: Write>(
    mut out: W,
    flows: &[PointFlow],
    labels: &[MotionLabel],
) -> std::io::Result<()> {
    for (f, &label) in flows.iter().zip(labels) {
        let rec = FlowRecord {
            x: f.point.x,
            y: f.point.y,
            dx: f.dx,
            dy: f.dy,
            valid: f.valid,
            label,
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
