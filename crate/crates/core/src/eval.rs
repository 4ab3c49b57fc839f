//! Embedding quality: nearest-neighbour retrieval, a linear softmax probe,
//! ensemble concatenation, and a procedural labeled dataset.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{embed, Embeddings, EncoderParams, ImageBatch};
use crate::error::{Error, Result};
use crate::rng::{self, derive_seed};
use crate::trainer::cosine_distance;
use crate::video_io::{read_grid, write_grid, GrayImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Query,
    Db,
    Train,
    Test,
}

/// Patches with dense class labels, all from one split.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPatchSet {
    pub patches: Vec<GrayImage>,
    pub labels: Vec<usize>,
    pub split: Split,
}

impl LabeledPatchSet {
    pub fn new(patches: Vec<GrayImage>, labels: Vec<usize>, split: Split) -> Result<Self> {
        if patches.is_empty() || patches.len() != labels.len() {
            return Err(Error::Dataset(format!(
                "{split:?} set: {} patches and {} labels",
                patches.len(),
                labels.len()
            )));
        }
        Ok(Self {
            patches,
            labels,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }
}

/// Embeds `patches` with every encoder and concatenates the results per
/// patch, in encoder order. Chunks run in parallel; rows are independent so
/// the output does not depend on scheduling.
pub fn concat_embeddings(
    encoders: &[EncoderParams],
    patches: &[GrayImage],
    mean_subtract: bool,
) -> Result<Embeddings> {
    if encoders.is_empty() {
        return Err(Error::InvalidArgument("no encoders given".into()));
    }
    const CHUNK: usize = 64;
    let dim: usize = encoders.iter().map(|e| e.embed_dim()).sum();
    let chunks: Vec<Result<Vec<f64>>> = patches
        .par_chunks(CHUNK)
        .map(|chunk| {
            let refs: Vec<&GrayImage> = chunk.iter().collect();
            let batch = ImageBatch::from_images(&refs, mean_subtract)?;
            let parts = encoders
                .iter()
                .map(|e| embed(e, &batch))
                .collect::<Result<Vec<_>>>()?;
            let mut out = Vec::with_capacity(chunk.len() * dim);
            for i in 0..chunk.len() {
                for p in &parts {
                    out.extend_from_slice(p.row(i));
                }
            }
            Ok(out)
        })
        .collect();
    let mut data = Vec::with_capacity(patches.len() * dim);
    for c in chunks {
        data.extend(c?);
    }
    Ok(Embeddings {
        n: patches.len(),
        dim,
        data,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub k: usize,
    pub queries: usize,
    /// Correct retrievals among the top `k`, per query.
    pub correct: Vec<usize>,
    pub total_correct: usize,
    /// `total_correct / (k * queries)`.
    pub rate: f64,
    /// Rate restricted to the queries of each class.
    pub per_class_rate: BTreeMap<usize, f64>,
}

/// Indices of the `k` database rows nearest to `query`; ties go to the
/// lower index.
pub fn top_k(query: &[f64], db: &Embeddings, k: usize) -> Vec<usize> {
    let mut d: Vec<(f64, usize)> = (0..db.n)
        .map(|j| (cosine_distance(query, db.row(j)).value, j))
        .collect();
    let k = k.min(d.len());
    if k == 0 {
        return Vec::new();
    }
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    d.select_nth_unstable_by(k - 1, cmp);
    d.truncate(k);
    d.sort_by(cmp);
    d.into_iter().map(|(_, j)| j).collect()
}

/// Retrieval statistics from precomputed embeddings.
pub fn retrieval_from_embeddings(
    queries: &Embeddings,
    query_labels: &[usize],
    db: &Embeddings,
    db_labels: &[usize],
    k: usize,
) -> Result<RetrievalReport> {
    if queries.n == 0 || db.n == 0 {
        return Err(Error::Dataset(
            "retrieval needs nonempty query and database sets".into(),
        ));
    }
    if k == 0 || db.n < k {
        return Err(Error::InvalidArgument(format!(
            "k = {k} with a database of {}",
            db.n
        )));
    }
    if queries.dim != db.dim || query_labels.len() != queries.n || db_labels.len() != db.n {
        return Err(Error::Shape(
            "query/database embeddings or labels disagree".into(),
        ));
    }
    let correct: Vec<usize> = (0..queries.n)
        .into_par_iter()
        .map(|i| {
            top_k(queries.row(i), db, k)
                .into_iter()
                .filter(|&j| db_labels[j] == query_labels[i])
                .count()
        })
        .collect();
    let total_correct = correct.iter().sum();
    let mut per_class: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (&c, &l) in correct.iter().zip(query_labels) {
        let e = per_class.entry(l).or_default();
        e.0 += c;
        e.1 += k;
    }
    Ok(RetrievalReport {
        k,
        queries: queries.n,
        total_correct,
        rate: total_correct as f64 / (k * queries.n) as f64,
        per_class_rate: per_class
            .into_iter()
            .map(|(l, (c, t))| (l, c as f64 / t as f64))
            .collect(),
        correct,
    })
}

/// Embeds both sets with the (concatenated) encoders and ranks the
/// database by cosine distance for every query.
pub fn nn_retrieval_rate(
    queries: &LabeledPatchSet,
    db: &LabeledPatchSet,
    encoders: &[EncoderParams],
    mean_subtract: bool,
    k: usize,
) -> Result<RetrievalReport> {
    let q = concat_embeddings(encoders, &queries.patches, mean_subtract)?;
    let d = concat_embeddings(encoders, &db.patches, mean_subtract)?;
    retrieval_from_embeddings(&q, &queries.labels, &d, &db.labels, k)
}

/// Multinomial logistic regression `softmax(W x + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxProbe {
    pub n_classes: usize,
    pub dim: usize,
    /// `n_classes x dim`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    /// Mean training cross-entropy before each epoch and after the last.
    pub loss_history: Vec<f64>,
}

impl SoftmaxProbe {
    fn logits(&self, x: &[f64], out: &mut [f64]) {
        for (c, o) in out.iter_mut().enumerate() {
            let w = &self.weights[c * self.dim..(c + 1) * self.dim];
            *o = self.bias[c] + w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let mut z = vec![0.0; self.n_classes];
        self.logits(x, &mut z);
        // First maximum wins.
        let mut best = 0;
        for (c, &v) in z.iter().enumerate() {
            if v > z[best] {
                best = c;
            }
        }
        best
    }

    pub fn accuracy(&self, x: &Embeddings, labels: &[usize]) -> f64 {
        let hits = (0..x.n)
            .filter(|&i| self.predict(x.row(i)) == labels[i])
            .count();
        hits as f64 / x.n as f64
    }

    /// Mean cross-entropy and, if `grad` is given, its gradient
    /// (weights then biases).
    fn loss(&self, x: &Embeddings, labels: &[usize], mut grad: Option<&mut [f64]>) -> f64 {
        let mut z = vec![0.0; self.n_classes];
        let mut total = 0.0;
        let scale = 1.0 / x.n as f64;
        for i in 0..x.n {
            let xi = x.row(i);
            self.logits(xi, &mut z);
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = z.iter().map(|v| (v - m).exp()).sum();
            let log_s = s.ln() + m;
            total += log_s - z[labels[i]];
            if let Some(g) = grad.as_deref_mut() {
                for c in 0..self.n_classes {
                    let p = (z[c] - log_s).exp() - f64::from(u8::from(c == labels[i]));
                    let gw = &mut g[c * self.dim..(c + 1) * self.dim];
                    for (gwj, &xj) in gw.iter_mut().zip(xi) {
                        *gwj += scale * p * xj;
                    }
                    g[self.n_classes * self.dim + c] += scale * p;
                }
            }
        }
        total * scale
    }
}

/// Full-batch gradient descent on the mean cross-entropy, from zero
/// weights.
pub fn fit_softmax_probe(
    x: &Embeddings,
    labels: &[usize],
    n_classes: usize,
    epochs: usize,
    lr: f64,
) -> Result<SoftmaxProbe> {
    if x.n == 0 || labels.len() != x.n {
        return Err(Error::Dataset("probe needs one label per embedding".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::Dataset(format!(
            "label {bad} outside {n_classes} classes"
        )));
    }
    let mut distinct = labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::Dataset(
            "probe training set has a single class".into(),
        ));
    }
    let mut probe = SoftmaxProbe {
        n_classes,
        dim: x.dim,
        weights: vec![0.0; n_classes * x.dim],
        bias: vec![0.0; n_classes],
        loss_history: Vec::with_capacity(epochs + 1),
    };
    let mut grad = vec![0.0; n_classes * (x.dim + 1)];
    for _ in 0..epochs {
        grad.fill(0.0);
        let loss = probe.loss(x, labels, Some(&mut grad));
        probe.loss_history.push(loss);
        let (gw, gb) = grad.split_at(n_classes * x.dim);
        probe
            .weights
            .iter_mut()
            .zip(gw)
            .for_each(|(w, g)| *w -= lr * g);
        probe
            .bias
            .iter_mut()
            .zip(gb)
            .for_each(|(b, g)| *b -= lr * g);
    }
    let final_loss = probe.loss(x, labels, None);
    probe.loss_history.push(final_loss);
    Ok(probe)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub epochs: usize,
    pub final_train_loss: f64,
}

/// Linear softmax classifier on frozen embeddings; reports test accuracy.
pub fn train_linear_probe(
    train: &LabeledPatchSet,
    test: &LabeledPatchSet,
    encoders: &[EncoderParams],
    mean_subtract: bool,
    epochs: usize,
    lr: f64,
) -> Result<ProbeReport> {
    let xtr = concat_embeddings(encoders, &train.patches, mean_subtract)?;
    let xte = concat_embeddings(encoders, &test.patches, mean_subtract)?;
    let n_classes = train.n_classes().max(test.n_classes());
    let probe = fit_softmax_probe(&xtr, &train.labels, n_classes, epochs, lr)?;
    Ok(ProbeReport {
        train_accuracy: probe.accuracy(&xtr, &train.labels),
        test_accuracy: probe.accuracy(&xte, &test.labels),
        epochs,
        final_train_loss: *probe.loss_history.last().unwrap(),
    })
}

/// Fraction of `(anchor, positive, negative)` index triples with
/// `D(anchor, positive) < D(anchor, negative)`.
pub fn triplet_satisfaction(emb: &Embeddings, triplets: &[(usize, usize, usize)]) -> f64 {
    if triplets.is_empty() {
        return 0.0;
    }
    let ok = triplets
        .iter()
        .filter(|&&(a, p, n)| {
            cosine_distance(emb.row(a), emb.row(p)).value
                < cosine_distance(emb.row(a), emb.row(n)).value
        })
        .count();
    ok as f64 / triplets.len() as f64
}

/// One rendered object track.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTrack {
    pub video_id: String,
    pub class: usize,
    pub instance: usize,
    pub frames: Vec<GrayImage>,
}

impl SyntheticTrack {
    /// First and last frame, the pair a tracker would emit.
    pub fn pair(&self) -> (GrayImage, GrayImage) {
        (
            self.frames[0].clone(),
            self.frames[self.frames.len() - 1].clone(),
        )
    }
}

/// Number of distinct shape families the generator can draw.
pub const SHAPE_FAMILIES: usize = 10;

/// Inside test for shape family `class` in object coordinates
/// `(u, v)` in `[-1, 1]^2`.
fn inside_shape(class: usize, u: f64, v: f64) -> bool {
    let (au, av) = (u.abs(), v.abs());
    match class % SHAPE_FAMILIES {
        0 => u * u + v * v <= 1.0,
        1 => au <= 0.8 && av <= 0.8,
        2 => v <= 0.75 && v >= -0.9 + 2.2 * au,
        3 => {
            let r2 = u * u + v * v;
            (0.3..=1.0).contains(&r2)
        }
        4 => (au <= 0.3 && av <= 1.0) || (av <= 0.3 && au <= 1.0),
        5 => au <= 0.95 && ((0.25..=0.75).contains(&v) || (-0.75..=-0.25).contains(&v)),
        6 => au + av <= 1.0,
        7 => u * u + 4.0 * v * v <= 1.0,
        8 => ((-0.8..=-0.2).contains(&u) && av <= 0.9) || ((0.3..=0.9).contains(&v) && au <= 0.8),
        _ => (u - v).abs() <= 0.35 && au <= 0.95 || (u + v).abs() <= 0.35 && au <= 0.95,
    }
}

/// Smooth bounded signal: a sum of two slow sinusoids with random phases.
struct Wobble {
    amp: f64,
    terms: [(f64, f64); 2],
}

impl Wobble {
    fn new(amp: f64, rng: &mut rng::Rng) -> Self {
        let mut term = || {
            (
                rng.random_range(0.05..0.2),
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        };
        Self {
            amp,
            terms: [term(), term()],
        }
    }

    fn at(&self, t: f64) -> f64 {
        self.amp
            * 0.5
            * self
                .terms
                .iter()
                .map(|&(w, p)| (w * t + p).sin())
                .sum::<f64>()
    }
}

/// Renders `n_classes x instances_per_class` tracks of `frames_per_track`
/// square `side` patches.
///
/// The class picks the shape family; the instance picks the surface grating
/// (frequency, orientation, phase, contrast) and base intensity. Each frame
/// jitters position, scale and brightness smoothly over time, and the
/// background noise is redrawn every frame.
pub fn generate_synthetic_tracks(
    seed: u64,
    n_classes: usize,
    instances_per_class: usize,
    frames_per_track: usize,
    side: usize,
) -> Result<Vec<SyntheticTrack>> {
    if n_classes == 0 || instances_per_class == 0 || frames_per_track == 0 || side < 4 {
        return Err(Error::InvalidArgument(format!(
            "need positive counts and side >= 4, got {n_classes} x {instances_per_class} x {frames_per_track}, side {side}"
        )));
    }
    let mut tracks = Vec::with_capacity(n_classes * instances_per_class);
    for class in 0..n_classes {
        for instance in 0..instances_per_class {
            let tag = (class * instances_per_class + instance) as u64;
            let mut r = rng::seeded(derive_seed(seed, tag));
            let freq = r.random_range(0.35..0.9);
            let theta: f64 = r.random_range(0.0..std::f64::consts::PI);
            let phase = r.random_range(0.0..std::f64::consts::TAU);
            let contrast = r.random_range(0.08..0.18);
            let base = r.random_range(0.6..0.8);
            let (fx, fy) = (freq * theta.cos(), freq * theta.sin());
            // Offsets from frame 0 span twice the amplitude: at most 5 px of
            // drift, 30% scale change and 0.2 brightness change.
            let dx = Wobble::new(2.5, &mut r);
            let dy = Wobble::new(2.5, &mut r);
            let scale = Wobble::new(0.15, &mut r);
            let bright = Wobble::new(0.1, &mut r);
            let radius = 0.3 * side as f64;
            let c = (side as f64 - 1.0) / 2.0;

            let frames = (0..frames_per_track)
                .map(|f| {
                    // Frame 0 is the canonical pose; jitter is relative to it.
                    let t = f as f64;
                    let (ox, oy) = (dx.at(t) - dx.at(0.0), dy.at(t) - dy.at(0.0));
                    let s = radius * (1.0 + scale.at(t) - scale.at(0.0));
                    let b = bright.at(t) - bright.at(0.0);
                    GrayImage::from_fn(side, side, |y, x| {
                        let bg = 0.3 + b + r.random_range(-0.08..0.08);
                        let mut cover = 0.0;
                        for (sy, sx) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
                            let px = x as f64 + sx - 0.5;
                            let py = y as f64 + sy - 0.5;
                            let (u, v) = ((px - c - ox) / s, (py - c - oy) / s);
                            if inside_shape(class, u, v) {
                                cover += 0.25;
                            }
                        }
                        let (px, py) = (x as f64 - ox, y as f64 - oy);
                        let fg = base + b + contrast * (fx * px + fy * py + phase).sin();
                        (cover * fg + (1.0 - cover) * bg).clamp(0.0, 1.0) as f32
                    })
                })
                .collect();
            tracks.push(SyntheticTrack {
                video_id: format!("c{class:02}_i{instance:03}"),
                class,
                instance,
                frames,
            });
        }
    }
    Ok(tracks)
}

/// Training pairs and labeled evaluation sets cut from synthetic tracks.
///
/// Instances numbered below `train_instances` (in every class) provide the
/// training pairs and the retrieval database; the rest are held out.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticBenchmark {
    /// `(video_id, query, positive)`: frames `t` and `t + F/2` of each
    /// training track, for every `t` that fits.
    pub train_pairs: Vec<(String, GrayImage, GrayImage)>,
    /// Middle frame of each held-out track.
    pub query: LabeledPatchSet,
    /// First frame of each training track.
    pub db: LabeledPatchSet,
    /// First and middle frames of training tracks.
    pub probe_train: LabeledPatchSet,
    /// Last frame of each held-out track.
    pub probe_test: LabeledPatchSet,
    /// Patches referenced by `triplets`.
    pub triplet_patches: Vec<GrayImage>,
    /// Held-out `(anchor, positive, negative)`: first and last frame of one
    /// track, and a random frame of another held-out track.
    pub triplets: Vec<(usize, usize, usize)>,
}

/// Frame index pairs `(t, t + n/2)` taken from each synthetic training track.
pub fn track_pair_frames(n_frames: usize) -> Vec<(usize, usize)> {
    let gap = n_frames / 2;
    (0..n_frames - gap).map(|t| (t, t + gap)).collect()
}

pub fn synthetic_benchmark(
    tracks: &[SyntheticTrack],
    train_instances: usize,
    seed: u64,
) -> Result<SyntheticBenchmark> {
    let (train, test): (Vec<&SyntheticTrack>, Vec<&SyntheticTrack>) =
        tracks.iter().partition(|t| t.instance < train_instances);
    if train.is_empty() || test.len() < 2 {
        return Err(Error::Dataset(format!(
            "need training tracks and at least 2 held-out tracks, got {} and {}",
            train.len(),
            test.len()
        )));
    }
    let n_frames = tracks[0].frames.len();
    let gap = n_frames / 2;
    let mut train_pairs = Vec::new();
    for t in &train {
        for (a, b) in track_pair_frames(n_frames) {
            train_pairs.push((t.video_id.clone(), t.frames[a].clone(), t.frames[b].clone()));
        }
    }
    let set = |ts: &[&SyntheticTrack], frames: &[usize], split| {
        let mut patches = Vec::new();
        let mut labels = Vec::new();
        for t in ts {
            for &f in frames {
                patches.push(t.frames[f].clone());
                labels.push(t.class);
            }
        }
        LabeledPatchSet::new(patches, labels, split)
    };
    let mut r = rng::seeded(seed);
    let mut triplet_patches = Vec::new();
    for t in &test {
        triplet_patches.push(t.frames[0].clone());
        triplet_patches.push(t.frames[n_frames - 1].clone());
    }
    let mut triplets = Vec::new();
    for i in 0..test.len() {
        for (j, other) in test.iter().enumerate() {
            if i != j {
                triplets.push((2 * i, 2 * i + 1, triplet_patches.len()));
                triplet_patches.push(other.frames[r.random_range(0..n_frames)].clone());
            }
        }
    }
    Ok(SyntheticBenchmark {
        train_pairs,
        query: set(&test, &[gap], Split::Query)?,
        db: set(&train, &[0], Split::Db)?,
        probe_train: set(&train, &[0, gap], Split::Train)?,
        probe_test: set(&test, &[n_frames - 1], Split::Test)?,
        triplet_patches,
        triplets,
    })
}

impl SyntheticBenchmark {
    /// Fraction of held-out triplets ranked correctly by the encoders.
    pub fn triplet_satisfaction(
        &self,
        encoders: &[EncoderParams],
        mean_subtract: bool,
    ) -> Result<f64> {
        let emb = concat_embeddings(encoders, &self.triplet_patches, mean_subtract)?;
        Ok(triplet_satisfaction(&emb, &self.triplets))
    }
}

/// One line of a labeled-data directory's `labels.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelRecord {
    pub patch: String,
    pub label: usize,
    pub split: Split,
}

/// Writes every set under `dir` as raw-grid patches plus `labels.jsonl`.
pub fn write_labeled_dir(dir: &Path, sets: &[&LabeledPatchSet]) -> Result<usize> {
    let patches = dir.join("patches");
    fs::create_dir_all(&patches).map_err(|e| Error::io(&patches, e))?;
    let labels_path = dir.join("labels.jsonl");
    let file = fs::File::create(&labels_path).map_err(|e| Error::io(&labels_path, e))?;
    let mut out = BufWriter::new(file);
    let mut n = 0;
    for set in sets {
        let tag = serde_json::to_value(set.split).unwrap();
        let tag = tag.as_str().unwrap();
        for (i, (p, &label)) in set.patches.iter().zip(&set.labels).enumerate() {
            let rel = format!("patches/{tag}_{i:06}.grid");
            write_grid(&dir.join(&rel), p)?;
            let rec = LabelRecord {
                patch: rel,
                label,
                split: set.split,
            };
            writeln!(out, "{}", serde_json::to_string(&rec).unwrap())
                .map_err(|e| Error::io(&labels_path, e))?;
            n += 1;
        }
    }
    out.flush().map_err(|e| Error::io(&labels_path, e))?;
    Ok(n)
}

/// Reads every record of a labeled-data directory with its patch, in file
/// order.
pub fn read_labeled_records(dir: &Path) -> Result<Vec<(LabelRecord, GrayImage)>> {
    let labels_path = dir.join("labels.jsonl");
    let file = fs::File::open(&labels_path).map_err(|e| Error::io(&labels_path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&labels_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: LabelRecord = serde_json::from_str(&line).map_err(|e| Error::Manifest {
            path: labels_path.clone(),
            line: i + 1,
            message: e.to_string(),
        })?;
        let patch = read_grid(&dir.join(&rec.patch))?;
        out.push((rec, patch));
    }
    Ok(out)
}

/// Reads a labeled-data directory, grouping records by split.
pub fn read_labeled_dir(dir: &Path) -> Result<BTreeMap<Split, LabeledPatchSet>> {
    let mut groups: BTreeMap<Split, (Vec<GrayImage>, Vec<usize>)> = BTreeMap::new();
    for (rec, patch) in read_labeled_records(dir)? {
        let g = groups.entry(rec.split).or_default();
        g.0.push(patch);
        g.1.push(rec.label);
    }
    groups
        .into_iter()
        .map(|(s, (p, l))| Ok((s, LabeledPatchSet::new(p, l, s)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{init_params, Layer, LayerSpec};

    fn emb_from(rows: &[&[f64]]) -> Embeddings {
        Embeddings {
            n: rows.len(),
            dim: rows[0].len(),
            data: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        }
    }

    fn random_emb(n: usize, dim: usize, seed: u64) -> Embeddings {
        let mut r = rng::seeded(seed);
        Embeddings {
            n,
            dim,
            data: (0..n * dim).map(|_| r.random_range(-1.0..1.0)).collect(),
        }
    }

    #[test]
    fn self_retrieval_is_perfect() {
        let e = random_emb(30, 5, 1);
        let labels: Vec<usize> = (0..30).map(|i| i % 7).collect();
        let rep = retrieval_from_embeddings(&e, &labels, &e, &labels, 1).unwrap();
        assert_eq!(rep.rate, 1.0);
        assert_eq!(rep.total_correct, 30);
    }

    #[test]
    fn ranking_matches_sort_oracle() {
        let q = emb_from(&[&[1.0, 0.0], &[0.0, 1.0], &[-1.0, -0.2]]);
        let db = emb_from(&[
            &[0.9, 0.1],
            &[0.1, 0.9],
            &[-1.0, 0.0],
            &[1.0, 1.0],
            &[2.0, 0.0],
            &[0.0, -1.0],
        ]);
        for i in 0..q.n {
            let mut all: Vec<(f64, usize)> = (0..db.n)
                .map(|j| (cosine_distance(q.row(i), db.row(j)).value, j))
                .collect();
            all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            for k in 1..=db.n {
                let want: Vec<usize> = all.iter().take(k).map(|x| x.1).collect();
                assert_eq!(top_k(q.row(i), &db, k), want);
            }
        }
        // Rows 1 and 2 are both at distance 0: lower index first.
        assert_eq!(
            top_k(
                &[1.0, 0.0],
                &emb_from(&[&[0.0, 1.0], &[3.0, 0.0], &[1.0, 0.0]]),
                2
            ),
            vec![1, 2]
        );
    }

    #[test]
    fn retrieval_counts_and_rate() {
        let q = emb_from(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let db = emb_from(&[&[1.0, 0.1], &[0.1, 1.0], &[1.0, -0.1], &[-1.0, 0.0]]);
        let rep = retrieval_from_embeddings(&q, &[0, 1], &db, &[0, 1, 1, 0], 2).unwrap();
        // Query 0 retrieves rows 0 and 2 (labels 0, 1); query 1 rows 1, 0.
        assert_eq!(rep.correct, vec![1, 1]);
        assert_eq!(rep.rate, 2.0 / 4.0);
        assert_eq!(rep.per_class_rate[&0], 0.5);
        assert!(retrieval_from_embeddings(&q, &[0, 1], &db, &[0, 1, 1, 0], 5).is_err());
    }

    #[test]
    fn random_embeddings_retrieve_at_chance() {
        let (n, k) = (400, 10);
        let db = random_emb(2000, 16, 2);
        let q = random_emb(n, 16, 3);
        let db_labels: Vec<usize> = (0..2000).map(|i| i % 10).collect();
        let q_labels: Vec<usize> = (0..n).map(|i| i % 10).collect();
        let rep = retrieval_from_embeddings(&q, &q_labels, &db, &db_labels, k).unwrap();
        // Neighbours of one query are not independent draws, so bound the
        // per-query count variance by k^2 p (1 - p) instead of k p (1 - p).
        let sd = (0.1 * 0.9 / n as f64).sqrt();
        assert!((rep.rate - 0.1).abs() <= 3.0 * sd, "{}", rep.rate);
    }

    #[test]
    fn rate_is_scale_invariant() {
        let q = random_emb(20, 4, 4);
        let db = random_emb(50, 4, 5);
        let ql: Vec<usize> = (0..20).map(|i| i % 3).collect();
        let dl: Vec<usize> = (0..50).map(|i| i % 3).collect();
        let a = retrieval_from_embeddings(&q, &ql, &db, &dl, 5).unwrap();
        let mut q2 = q.clone();
        q2.data.iter_mut().for_each(|v| *v *= 3.5);
        let mut db2 = db.clone();
        db2.data.iter_mut().for_each(|v| *v *= 0.25);
        assert_eq!(
            retrieval_from_embeddings(&q2, &ql, &db2, &dl, 5)
                .unwrap()
                .correct,
            a.correct
        );
    }

    #[test]
    fn inserting_query_duplicate_adds_one() {
        let q = random_emb(10, 4, 6);
        let db = random_emb(40, 4, 7);
        let ql: Vec<usize> = (0..10).map(|i| i % 4).collect();
        let dl: Vec<usize> = (0..40).map(|i| i % 4).collect();
        let k = 5;
        let base = retrieval_from_embeddings(&q, &ql, &db, &dl, k).unwrap();
        for i in 0..q.n {
            let mut db2 = db.clone();
            db2.data.extend_from_slice(q.row(i));
            db2.n += 1;
            let mut dl2 = dl.clone();
            dl2.push(ql[i]);
            let rep = retrieval_from_embeddings(&q, &ql, &db2, &dl2, k).unwrap();
            // The duplicate takes rank 1 and pushes out the old k-th result.
            let old = top_k(q.row(i), &db, k);
            let dropped = usize::from(dl[old[k - 1]] == ql[i]);
            assert_eq!(rep.correct[i], base.correct[i] + 1 - dropped);
        }
    }

    #[test]
    fn probe_separates_and_loss_decreases() {
        let x = emb_from(&[
            &[1.0, 0.2],
            &[0.8, -0.1],
            &[-1.0, 0.3],
            &[-0.7, -0.2],
            &[1.2, 0.0],
            &[-0.9, 0.1],
        ]);
        let y = [0, 0, 1, 1, 0, 1];
        let p = fit_softmax_probe(&x, &y, 2, 200, 0.5).unwrap();
        assert_eq!(p.accuracy(&x, &y), 1.0);
        for w in p.loss_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-15, "{w:?}");
        }
        assert!(fit_softmax_probe(&x, &[1; 6], 2, 10, 0.1).is_err());
    }

    #[test]
    fn probe_on_shuffled_labels_is_at_chance() {
        let n_classes = 5;
        let train = random_emb(500, 8, 8);
        let test = random_emb(1000, 8, 9);
        let mut r = rng::seeded(10);
        let ytr: Vec<usize> = (0..500).map(|_| r.random_range(0..n_classes)).collect();
        let yte: Vec<usize> = (0..1000).map(|_| r.random_range(0..n_classes)).collect();
        let p = fit_softmax_probe(&train, &ytr, n_classes, 100, 0.5).unwrap();
        let acc = p.accuracy(&test, &yte);
        let sd = (0.2 * 0.8 / 1000.0f64).sqrt();
        assert!((acc - 0.2).abs() <= 3.0 * sd, "{acc}");
    }

    #[test]
    fn probe_beats_constant_classifier_on_train() {
        let x = random_emb(200, 6, 11);
        let y: Vec<usize> = (0..200)
            .map(|i| {
                usize::from(x.row(i)[0] + 0.3 * x.row(i)[1] > 0.2) + 2 * usize::from(i % 5 == 0)
            })
            .collect();
        let p = fit_softmax_probe(&x, &y, 4, 300, 1.0).unwrap();
        let mut counts = [0usize; 4];
        y.iter().for_each(|&c| counts[c] += 1);
        let best_const = *counts.iter().max().unwrap() as f64 / 200.0;
        assert!(p.accuracy(&x, &y) >= best_const);
    }

    fn small_spec(side: usize) -> LayerSpec {
        LayerSpec {
            input_side: side,
            layers: vec![
                Layer::Conv {
                    out_channels: 2,
                    kernel: 3,
                    stride: 2,
                    pad: 1,
                },
                Layer::Relu,
                Layer::FullyConnected { out_dim: 3 },
            ],
        }
    }

    #[test]
    fn concatenation_preserves_segments() {
        let tracks = generate_synthetic_tracks(1, 2, 2, 1, 8).unwrap();
        let patches: Vec<GrayImage> = tracks.iter().map(|t| t.frames[0].clone()).collect();
        let a = init_params(&small_spec(8), 1).unwrap();
        let b = init_params(&small_spec(8), 2).unwrap();
        let ea = concat_embeddings(std::slice::from_ref(&a), &patches, false).unwrap();
        let eb = concat_embeddings(std::slice::from_ref(&b), &patches, true).unwrap();
        assert_eq!(
            ea,
            embed(
                &a,
                &ImageBatch::from_images(&patches.iter().collect::<Vec<_>>(), false).unwrap()
            )
            .unwrap()
        );
        let both = concat_embeddings(&[a, b.clone()], &patches, false).unwrap();
        assert_eq!(both.dim, 6);
        let eb_raw = concat_embeddings(&[b], &patches, false).unwrap();
        for i in 0..patches.len() {
            assert_eq!(&both.row(i)[..3], ea.row(i));
            assert_eq!(&both.row(i)[3..], eb_raw.row(i));
        }
        assert_ne!(eb, eb_raw);
        assert!(concat_embeddings(&[], &patches, false).is_err());
    }

    #[test]
    fn generator_properties() {
        let a = generate_synthetic_tracks(3, 3, 2, 5, 32).unwrap();
        assert_eq!(a, generate_synthetic_tracks(3, 3, 2, 5, 32).unwrap());
        assert_eq!(a.len(), 6);
        assert!(a.iter().all(|t| t.frames.len() == 5));
        for t in &a {
            for f in &t.frames {
                assert!(f.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
        // Same class, different instance: different pixels.
        let diff: f64 = a[0].frames[0]
            .data()
            .iter()
            .zip(a[1].frames[0].data())
            .map(|(x, y)| (x - y).abs() as f64)
            .sum::<f64>()
            / (32.0 * 32.0);
        assert!(diff > 0.0);
        let single = generate_synthetic_tracks(3, 2, 2, 1, 16).unwrap();
        for t in &single {
            let (p, q) = t.pair();
            assert_eq!(p, q);
        }
        assert!(generate_synthetic_tracks(0, 0, 1, 1, 16).is_err());
    }

    #[test]
    fn same_class_instances_share_shape() {
        // Object coverage is set by the class: compare the fraction of
        // pixels brighter than the background ceiling at frame 0.
        let tracks = generate_synthetic_tracks(5, 3, 4, 1, 32).unwrap();
        let coverage = |t: &SyntheticTrack| {
            t.frames[0].data().iter().filter(|&&v| v > 0.45).count() as f64 / 1024.0
        };
        for class in 0..3 {
            let covs: Vec<f64> = tracks
                .iter()
                .filter(|t| t.class == class)
                .map(coverage)
                .collect();
            let (lo, hi) = covs
                .iter()
                .fold((1.0f64, 0.0f64), |(l, h), &c| (l.min(c), h.max(c)));
            assert!(hi - lo < 0.1, "class {class}: {covs:?}");
        }
    }

    #[test]
    fn labeled_dir_round_trip() {
        let tracks = generate_synthetic_tracks(2, 2, 2, 2, 8).unwrap();
        let q = LabeledPatchSet::new(
            tracks.iter().map(|t| t.frames[1].clone()).collect(),
            tracks.iter().map(|t| t.class).collect(),
            Split::Query,
        )
        .unwrap();
        let d = LabeledPatchSet::new(
            tracks.iter().map(|t| t.frames[0].clone()).collect(),
            tracks.iter().map(|t| t.class).collect(),
            Split::Db,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(write_labeled_dir(dir.path(), &[&q, &d]).unwrap(), 8);
        let back = read_labeled_dir(dir.path()).unwrap();
        assert_eq!(back[&Split::Query], q);
        assert_eq!(back[&Split::Db], d);
    }

    #[test]
    fn benchmark_layout() {
        let tracks = generate_synthetic_tracks(4, 3, 4, 6, 8).unwrap();
        let b = synthetic_benchmark(&tracks, 3, 1).unwrap();
        // 9 training tracks, pairs (t, t + 3) for t in 0..3.
        assert_eq!(b.train_pairs.len(), 27);
        assert_eq!(b.train_pairs[1].1, tracks[0].frames[1]);
        assert_eq!(b.train_pairs[1].2, tracks[0].frames[4]);
        assert_eq!(
            (
                b.query.len(),
                b.db.len(),
                b.probe_train.len(),
                b.probe_test.len()
            ),
            (3, 9, 18, 3)
        );
        assert_eq!(b.triplets.len(), 6);
        for &(a, p, n) in &b.triplets {
            assert_eq!(p, a + 1);
            assert!(n >= 6 && n < b.triplet_patches.len());
        }
        assert_eq!(b, synthetic_benchmark(&tracks, 3, 1).unwrap());
        assert!(synthetic_benchmark(&tracks, 4, 1).is_err());
    }

    #[test]
    fn satisfaction_counts() {
        let e = emb_from(&[&[1.0, 0.0], &[1.0, 0.1], &[0.0, 1.0]]);
        assert_eq!(triplet_satisfaction(&e, &[(0, 1, 2), (0, 2, 1)]), 0.5);
    }
}
