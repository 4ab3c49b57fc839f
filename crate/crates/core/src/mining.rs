//! Turning video into `(query, tracked)` patch pairs.
//!
//! For each candidate start frame the moving points are found (see
//! [`crate::motion`]), the fixed-size window holding the most of them is
//! chosen, and that window is followed for `track_len` frames with a
//! normalized cross-correlation tracker. The first and last boxes form a
//! pair.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::{analyze_pair, MotionParams, Point, Verdict};
use crate::rng::derive_seed;
use crate::video_io::{self, extract_patch, BBox, FrameSequence, GrayImage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MinerConfig {
    /// Residual flow above this many pixels marks a point as moving.
    pub flow_threshold: f64,
    pub gate_low: f64,
    pub gate_high: f64,
    pub window_h: usize,
    pub window_w: usize,
    pub stride: usize,
    /// Frames between the query patch and the tracked patch.
    pub track_len: usize,
    pub max_pairs_per_video: usize,
    /// Frame gap used for motion analysis.
    pub step_gap: usize,
    /// Frames between candidate start frames; `None` means `track_len`.
    pub start_hop: Option<usize>,
    pub search_radius: usize,
    /// Side of the square patches written for training.
    pub patch_side: usize,
    pub motion: MotionParams,
}

impl Default for MinerConfig {
    fn default() -> Self {
        Self {
            flow_threshold: 0.5,
            gate_low: 0.25,
            gate_high: 0.75,
            window_h: 48,
            window_w: 48,
            stride: 4,
            track_len: 30,
            max_pairs_per_video: 8,
            step_gap: 1,
            start_hop: None,
            search_radius: 8,
            patch_side: 32,
            motion: MotionParams::default(),
        }
    }
}

impl MinerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("mine: {m}")));
        if !(self.flow_threshold > 0.0) {
            return bad(format!(
                "flow_threshold must be > 0, got {}",
                self.flow_threshold
            ));
        }
        if !(0.0 <= self.gate_low && self.gate_low < self.gate_high && self.gate_high <= 1.0) {
            return bad(format!(
                "need 0 <= gate_low < gate_high <= 1, got {} and {}",
                self.gate_low, self.gate_high
            ));
        }
        for (name, v) in [
            ("window_h", self.window_h),
            ("window_w", self.window_w),
            ("stride", self.stride),
            ("track_len", self.track_len),
            ("max_pairs_per_video", self.max_pairs_per_video),
            ("step_gap", self.step_gap),
            ("patch_side", self.patch_side),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.start_hop == Some(0) {
            return bad("start_hop must be positive".into());
        }
        if self.motion.lk.window.is_multiple_of(2) || self.motion.lk.levels == 0 {
            return bad("lk.window must be odd and lk.levels >= 1".into());
        }
        Ok(())
    }

    pub fn hop(&self) -> usize {
        self.start_hop.unwrap_or(self.track_len)
    }
}

/// A mined `(query, tracked)` pair, identified by frame indices and boxes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrackedPair {
    pub video_id: String,
    pub first_frame: u32,
    pub first_box: BBox,
    pub last_frame: u32,
    pub last_box: BBox,
}

/// Finds the stride-aligned window covering the most points (boundary
/// inclusive). Ties go to the smallest `y`, then the smallest `x`.
/// Returns `None` only when `points` is empty.
pub fn best_window(
    points: &[Point],
    frame_h: usize,
    frame_w: usize,
    win_h: usize,
    win_w: usize,
    stride: usize,
) -> Result<Option<(BBox, usize)>> {
    if win_h == 0 || win_w == 0 || win_h > frame_h || win_w > frame_w {
        return Err(Error::InvalidArgument(format!(
            "window {win_h}x{win_w} does not fit frame {frame_h}x{frame_w}"
        )));
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be >= 1".into()));
    }
    if points.is_empty() {
        return Ok(None);
    }
    let mut by_x: Vec<Point> = points.to_vec();
    by_x.sort_by(|a, b| a.x.total_cmp(&b.x));

    let mut best: Option<(BBox, usize)> = None;
    let mut band: Vec<f64> = Vec::with_capacity(by_x.len());
    for y in (0..=frame_h - win_h).step_by(stride) {
        let (top, bottom) = (y as f64, (y + win_h) as f64);
        band.clear();
        band.extend(
            by_x.iter()
                .filter(|p| p.y >= top && p.y <= bottom)
                .map(|p| p.x),
        );
        // Two pointers over x-sorted points: [lo, hi) lies in [x, x + w].
        let (mut lo, mut hi) = (0, 0);
        for x in (0..=frame_w - win_w).step_by(stride) {
            let (left, right) = (x as f64, (x + win_w) as f64);
            while lo < band.len() && band[lo] < left {
                lo += 1;
            }
            hi = hi.max(lo);
            while hi < band.len() && band[hi] <= right {
                hi += 1;
            }
            let count = hi - lo;
            if best.as_ref().is_none_or(|(_, c)| count > *c) {
                best = Some((BBox::new(x as i64, y as i64, win_w, win_h), count));
            }
        }
    }
    Ok(best)
}

/// Per-frame boxes of one track.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Track {
    pub boxes: Vec<BBox>,
    /// Fewer than `track_len + 1` boxes: the target left the frame or the
    /// sequence ended.
    pub truncated: bool,
}

/// Zero-normalized cross-correlation of `template` against `frame` with
/// the template's top-left at `(x, y)`, over the overlapping pixels.
/// Returns 0 when either side has no variance.
fn zncc(template: &GrayImage, frame: &GrayImage, x: i64, y: i64) -> f64 {
    let (fh, fw) = (frame.height() as i64, frame.width() as i64);
    let r0 = (-y).max(0);
    let r1 = (template.height() as i64).min(fh - y);
    let c0 = (-x).max(0);
    let c1 = (template.width() as i64).min(fw - x);
    if r1 <= r0 || c1 <= c0 {
        return 0.0;
    }
    let n = ((r1 - r0) * (c1 - c0)) as f64;
    let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for r in r0..r1 {
        for c in c0..c1 {
            let a = template.get(r as usize, c as usize) as f64;
            let b = frame.get((y + r) as usize, (x + c) as usize) as f64;
            sa += a;
            sb += b;
            saa += a * a;
            sbb += b * b;
            sab += a * b;
        }
    }
    let cov = sab - sa * sb / n;
    let va = saa - sa * sa / n;
    let vb = sbb - sb * sb / n;
    let denom = (va * vb).sqrt();
    if !(denom > 1e-12) {
        return 0.0;
    }
    cov / denom
}

/// Follows `start` through `frames` by exhaustive NCC template search in a
/// `±search_radius` neighbourhood, refreshing the template every frame.
///
/// Candidates may hang partly off the frame (scored on the visible part, at
/// least half the box). If the best one is not fully inside, tracking stops
/// and the trajectory ends at the previous box. Ties prefer the smallest
/// displacement, so a static scene yields a static track.
pub fn track_box(
    frames: &[GrayImage],
    start: BBox,
    track_len: usize,
    search_radius: usize,
) -> Result<Track> {
    let first = frames
        .first()
        .ok_or_else(|| Error::InvalidArgument("no frames to track".into()))?;
    let (fh, fw) = (first.height(), first.width());
    if !start.fits(fh, fw) {
        return Err(Error::OutOfBounds {
            x: start.x,
            y: start.y,
            w: start.w,
            h: start.h,
            frame_h: fh,
            frame_w: fw,
        });
    }
    if track_len == 0 {
        return Err(Error::InvalidArgument("track_len must be >= 1".into()));
    }
    let steps = track_len.min(frames.len() - 1);
    let r = search_radius as i64;
    let area = (start.w * start.h) as i64;
    let mut boxes = vec![start];
    let mut left_frame = false;
    for t in 0..steps {
        let cur = *boxes.last().unwrap();
        let template = video_io::crop(&frames[t], cur)?;
        let next = &frames[t + 1];
        let mut best: Option<(f64, i64, i64, i64)> = None;
        for dy in -r..=r {
            for dx in -r..=r {
                let cand = cur.translated(dx, dy);
                let vis_w = (cand.x + cand.w as i64).min(fw as i64) - cand.x.max(0);
                let vis_h = (cand.y + cand.h as i64).min(fh as i64) - cand.y.max(0);
                if vis_w <= 0 || vis_h <= 0 || 2 * vis_w * vis_h < area {
                    continue;
                }
                let score = zncc(&template, next, cand.x, cand.y);
                let dist = dx * dx + dy * dy;
                let better = match best {
                    None => true,
                    Some((s, d, by, bx)) => {
                        score > s || (score == s && (dist, dy, dx) < (d, by, bx))
                    }
                };
                if better {
                    best = Some((score, dist, dy, dx));
                }
            }
        }
        let (_, _, dy, dx) = best.expect("zero displacement is always a candidate");
        let cand = cur.translated(dx, dy);
        if !cand.fits(fh, fw) {
            left_frame = true;
            break;
        }
        boxes.push(cand);
    }
    let truncated = left_frame || boxes.len() < track_len + 1;
    Ok(Track { boxes, truncated })
}

/// Mines pairs from one frame sequence.
pub fn mine_video(
    video_id: &str,
    seq: &FrameSequence,
    cfg: &MinerConfig,
    seed: u64,
) -> Result<Vec<TrackedPair>> {
    cfg.validate()?;
    let need = cfg.track_len.max(cfg.step_gap) + 1;
    if seq.len() < need {
        return Err(Error::SequenceTooShort {
            frames: seq.len(),
            need,
        });
    }
    let images: Vec<GrayImage> = seq.frames.iter().map(|f| f.image.clone()).collect();
    let (fh, fw) = (images[0].height(), images[0].width());
    let mut pairs = Vec::new();
    let mut start = 0;
    while start + need <= images.len() && pairs.len() < cfg.max_pairs_per_video {
        let t = start;
        start += cfg.hop();
        let motion = analyze_pair(
            &images[t],
            &images[t + cfg.step_gap],
            &cfg.motion,
            cfg.flow_threshold,
            cfg.gate_low,
            cfg.gate_high,
            derive_seed(seed, t as u64),
        )?;
        match motion.gate {
            Some(g) if g.verdict == Verdict::Accept => {}
            _ => continue,
        }
        let Some((bbox, _)) = best_window(
            &motion.moving_points(),
            fh,
            fw,
            cfg.window_h,
            cfg.window_w,
            cfg.stride,
        )?
        else {
            continue;
        };
        let track = track_box(
            &images[t..=t + cfg.track_len],
            bbox,
            cfg.track_len,
            cfg.search_radius,
        )?;
        if track.truncated {
            continue;
        }
        pairs.push(TrackedPair {
            video_id: video_id.to_string(),
            first_frame: seq.frames[t].index,
            first_box: bbox,
            last_frame: seq.frames[t + cfg.track_len].index,
            last_box: *track.boxes.last().unwrap(),
        });
    }
    Ok(pairs)
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub video_id: String,
    pub frame_a: u32,
    pub bbox_a: [i64; 4],
    pub frame_b: u32,
    pub bbox_b: [i64; 4],
    pub patch_a: String,
    pub patch_b: String,
}

fn bbox_array(b: BBox) -> [i64; 4] {
    [b.x, b.y, b.w as i64, b.h as i64]
}

fn array_bbox(a: [i64; 4]) -> Option<BBox> {
    (a[2] >= 1 && a[3] >= 1).then(|| BBox::new(a[0], a[1], a[2] as usize, a[3] as usize))
}

impl ManifestRecord {
    pub fn pair(&self) -> Option<TrackedPair> {
        Some(TrackedPair {
            video_id: self.video_id.clone(),
            first_frame: self.frame_a,
            first_box: array_bbox(self.bbox_a)?,
            last_frame: self.frame_b,
            last_box: array_bbox(self.bbox_b)?,
        })
    }
}

fn file_safe(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn relative_to(base: &Path, target: &Path) -> String {
    target
        .strip_prefix(base)
        .unwrap_or(target)
        .to_string_lossy()
        .replace('\\', "/")
}

/// Crops both boxes of `pair` from `seq` and resizes them to `side`.
pub fn pair_patches(
    pair: &TrackedPair,
    seq: &FrameSequence,
    side: usize,
) -> Result<(GrayImage, GrayImage)> {
    let frame = |index: u32| {
        seq.frames
            .iter()
            .find(|f| f.index == index)
            .map(|f| &f.image)
            .ok_or_else(|| Error::Dataset(format!("{}: no frame {index}", pair.video_id)))
    };
    Ok((
        extract_patch(frame(pair.first_frame)?, pair.first_box, side)?,
        extract_patch(frame(pair.last_frame)?, pair.last_box, side)?,
    ))
}

/// Writes patch files and a JSONL manifest for already-extracted pairs.
/// Patch paths in the manifest are relative to the manifest's directory.
pub fn write_manifest_entries(
    entries: &[(TrackedPair, GrayImage, GrayImage)],
    patches_dir: &Path,
    manifest: &Path,
) -> Result<usize> {
    fs::create_dir_all(patches_dir).map_err(|e| Error::io(patches_dir, e))?;
    let base = manifest
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let file = fs::File::create(manifest).map_err(|e| Error::io(manifest, e))?;
    let mut out = BufWriter::new(file);
    for (pair, a, b) in entries {
        let stem = file_safe(&pair.video_id);
        let path_a = patches_dir.join(format!("{stem}_{:06}_a.grid", pair.first_frame));
        let path_b = patches_dir.join(format!("{stem}_{:06}_b.grid", pair.first_frame));
        video_io::write_grid(&path_a, a)?;
        video_io::write_grid(&path_b, b)?;
        let rec = ManifestRecord {
            video_id: pair.video_id.clone(),
            frame_a: pair.first_frame,
            bbox_a: bbox_array(pair.first_box),
            frame_b: pair.last_frame,
            bbox_b: bbox_array(pair.last_box),
            patch_a: relative_to(&base, &path_a),
            patch_b: relative_to(&base, &path_b),
        };
        serde_json::to_writer(&mut out, &rec).map_err(|e| Error::io(manifest, e.into()))?;
        out.write_all(b"\n").map_err(|e| Error::io(manifest, e))?;
    }
    out.flush().map_err(|e| Error::io(manifest, e))?;
    Ok(entries.len())
}

/// Materializes `pairs` as patch files plus a manifest. Frames are looked
/// up in `sources` by video id.
pub fn write_manifest(
    pairs: &[TrackedPair],
    sources: &BTreeMap<String, FrameSequence>,
    side: usize,
    patches_dir: &Path,
    manifest: &Path,
) -> Result<usize> {
    let entries = pairs
        .iter()
        .map(|p| {
            let seq = sources
                .get(&p.video_id)
                .ok_or_else(|| Error::Dataset(format!("no frames for video {}", p.video_id)))?;
            let (a, b) = pair_patches(p, seq, side)?;
            Ok((p.clone(), a, b))
        })
        .collect::<Result<Vec<_>>>()?;
    write_manifest_entries(&entries, patches_dir, manifest)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if rec.pair().is_none() {
            return Err(Error::Manifest {
                path: path.to_path_buf(),
                line: i + 1,
                message: "box with zero size".into(),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

/// Resolves a manifest's relative patch path.
pub fn resolve_patch(manifest: &Path, rel: &str) -> PathBuf {
    let rel = Path::new(rel);
    if rel.is_absolute() {
        rel.to_path_buf()
    } else {
        manifest.parent().unwrap_or(Path::new(".")).join(rel)
    }
}

/// Summary of a mining run over a directory of videos.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MineSummary {
    pub videos: usize,
    pub skipped_short: usize,
    pub pairs: usize,
}

/// Mines every subdirectory of `videos_root` (each one frame sequence,
/// video id = directory name) and writes `out_dir/manifest.jsonl` plus
/// `out_dir/patches/`. Videos are processed in parallel on `jobs` threads;
/// output order is by `(video_id, first_frame)` regardless.
pub fn mine_video_root(
    videos_root: &Path,
    out_dir: &Path,
    cfg: &MinerConfig,
    seed: u64,
    jobs: usize,
) -> Result<MineSummary> {
    cfg.validate()?;
    let mut videos = Vec::new();
    for entry in fs::read_dir(videos_root).map_err(|e| Error::io(videos_root, e))? {
        let path = entry.map_err(|e| Error::io(videos_root, e))?.path();
        if path.is_dir() {
            let id = path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            videos.push((id, path));
        }
    }
    videos.sort();

    let mine_one = |(id, path): &(String, PathBuf)| -> Result<Option<Vec<(TrackedPair, GrayImage, GrayImage)>>> {
        let seq = video_io::load_frame_sequence(path)?;
        let video_seed = derive_seed(seed, crc32fast::hash(id.as_bytes()) as u64);
        let pairs = match mine_video(id, &seq, cfg, video_seed) {
            Ok(p) => p,
            Err(Error::SequenceTooShort { .. }) => return Ok(None),
            Err(e) => return Err(e),
        };
        pairs
            .into_iter()
            .map(|p| {
                let (a, b) = pair_patches(&p, &seq, cfg.patch_side)?;
                Ok((p, a, b))
            })
            .collect::<Result<Vec<_>>>()
            .map(Some)
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    let results: Vec<_> = pool.install(|| videos.par_iter().map(mine_one).collect());

    let mut entries = Vec::new();
    let mut skipped_short = 0;
    for r in results {
        match r? {
            Some(v) => entries.extend(v),
            None => skipped_short += 1,
        }
    }
    entries.sort_by(|a, b| {
        (a.0.video_id.as_str(), a.0.first_frame).cmp(&(b.0.video_id.as_str(), b.0.first_frame))
    });
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let pairs = write_manifest_entries(
        &entries,
        &out_dir.join("patches"),
        &out_dir.join("manifest.jsonl"),
    )?;
    Ok(MineSummary {
        videos: videos.len(),
        skipped_short,
        pairs,
    })
}
