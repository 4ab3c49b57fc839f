//! Triplet ranking training with random, then hard, negatives.
//!
//! A batch holds `P` tracked pairs laid out as patches `[q0, p0, q1, p1, ...]`.
//! For pair `i` the query is patch `2i`, the positive `2i + 1`, and negatives
//! are other patches of the same batch whose video differs from the pair's.
//! One forward pass embeds the whole batch; every triplet reuses it.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::encoder::{
    self, backward, forward, Checkpoint, Embeddings, EncoderParams, Gradients, ImageBatch,
    LayerSpec,
};
use crate::error::{Error, Result};
use crate::mining::{read_manifest, resolve_patch};
use crate::rng::{self, derive_seed, Rng, RngState};
use crate::video_io::{read_grid, GrayImage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Hinge margin `M`.
    pub margin: f64,
    /// L2 coefficient on weights (biases excluded).
    pub weight_decay: f64,
    /// Negatives per pair `K`.
    pub negatives_per_pair: usize,
    /// Patches per batch; pairs per batch is half of this.
    pub batch_size: usize,
    pub lr_initial: f64,
    pub lr_decay_factor: f64,
    pub lr_step_iters: usize,
    /// Iterations with random negatives before switching to hard mining.
    pub random_phase_iters: usize,
    pub total_iters: usize,
    /// Classical momentum; 0 is plain SGD.
    pub momentum: f64,
    /// Emit a [`LossReport`] every this many iterations (0 disables).
    pub report_interval: usize,
    /// Overwrite the output checkpoint every this many iterations (0: only at the end).
    pub checkpoint_interval: usize,
    /// Set from the run-wide seed rather than the config file.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            margin: 0.5,
            weight_decay: 0.0005,
            negatives_per_pair: 4,
            batch_size: 100,
            lr_initial: 0.001,
            lr_decay_factor: 10.0,
            lr_step_iters: 1000,
            random_phase_iters: 1000,
            total_iters: 3000,
            momentum: 0.0,
            report_interval: 100,
            checkpoint_interval: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("train: {m}")));
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return bad(format!("margin must be positive, got {}", self.margin));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            ));
        }
        if self.negatives_per_pair == 0 {
            return bad("negatives_per_pair must be >= 1".into());
        }
        if self.batch_size < 4 || !self.batch_size.is_multiple_of(2) {
            return bad(format!(
                "batch_size must be even and >= 4, got {}",
                self.batch_size
            ));
        }
        if self.negatives_per_pair >= self.batch_size / 2 {
            return bad(format!(
                "negatives_per_pair ({}) must be below pairs per batch ({})",
                self.negatives_per_pair,
                self.batch_size / 2
            ));
        }
        if !(self.lr_initial > 0.0 && self.lr_initial.is_finite()) {
            return bad(format!(
                "lr_initial must be positive, got {}",
                self.lr_initial
            ));
        }
        if !(self.lr_decay_factor >= 1.0 && self.lr_decay_factor.is_finite()) {
            return bad(format!(
                "lr_decay_factor must be >= 1, got {}",
                self.lr_decay_factor
            ));
        }
        if self.lr_step_iters == 0 {
            return bad("lr_step_iters must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        Ok(())
    }

    pub fn pairs_per_batch(&self) -> usize {
        self.batch_size / 2
    }
}

/// Step schedule `lr_initial / lr_decay_factor^floor(iter / lr_step_iters)`.
pub fn lr_at(cfg: &TrainConfig, iter: usize) -> f64 {
    cfg.lr_initial / cfg.lr_decay_factor.powi((iter / cfg.lr_step_iters) as i32)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineDistance {
    pub value: f64,
    /// Set when either vector has zero norm; `value` is then 1.
    pub degenerate: bool,
}

/// `1 - a.b / (|a| |b|)`.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> CosineDistance {
    assert_eq!(a.len(), b.len(), "embedding dimensions differ");
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return CosineDistance {
            value: 1.0,
            degenerate: true,
        };
    }
    CosineDistance {
        value: 1.0 - dot / (na.sqrt() * nb.sqrt()),
        degenerate: false,
    }
}

/// Adds `scale * dD/da` and `scale * dD/db` into `ga` and `gb`.
/// Degenerate pairs contribute nothing.
fn accumulate_cosine_grad(a: &[f64], b: &[f64], scale: f64, ga: &mut [f64], gb: &mut [f64]) {
    let (mut dot, mut na2, mut nb2) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na2 += x * x;
        nb2 += y * y;
    }
    if na2 == 0.0 || nb2 == 0.0 {
        return;
    }
    let (na, nb) = (na2.sqrt(), nb2.sqrt());
    let inv = 1.0 / (na * nb);
    // dD/da = -b / (|a||b|) + (a.b) a / (|a|^3 |b|)
    let ca = dot * inv / na2;
    let cb = dot * inv / nb2;
    for i in 0..a.len() {
        ga[i] += scale * (-b[i] * inv + ca * a[i]);
        gb[i] += scale * (-a[i] * inv + cb * b[i]);
    }
}

/// Hinge `max(0, d_pos - d_neg + margin)`.
pub fn triplet_loss(d_pos: f64, d_neg: f64, margin: f64) -> f64 {
    let v = d_pos - d_neg + margin;
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

/// Patches of the batch eligible as negatives for pair `pair`.
pub fn eligible_negatives(video_of_pair: &[u32], pair: usize) -> Vec<usize> {
    let own = video_of_pair[pair];
    (0..2 * video_of_pair.len())
        .filter(|&j| video_of_pair[j / 2] != own)
        .collect()
}

/// `k` distinct cross-video negatives per pair, uniformly at random.
pub fn sample_random_negatives(
    video_of_pair: &[u32],
    k: usize,
    rng: &mut Rng,
) -> Result<Vec<Vec<usize>>> {
    (0..video_of_pair.len())
        .map(|i| {
            let cand = eligible_negatives(video_of_pair, i);
            if cand.len() < k {
                return Err(Error::NotEnoughNegatives {
                    pair: i,
                    available: cand.len(),
                    need: k,
                });
            }
            Ok(rand::seq::index::sample(rng, cand.len(), k)
                .into_iter()
                .map(|c| cand[c])
                .collect())
        })
        .collect()
}

/// Loss of every eligible candidate for pair `pair`, in candidate order.
fn candidate_losses(
    emb: &Embeddings,
    video_of_pair: &[u32],
    pair: usize,
    margin: f64,
) -> Vec<(usize, f64)> {
    let q = emb.row(2 * pair);
    let d_pos = cosine_distance(q, emb.row(2 * pair + 1)).value;
    eligible_negatives(video_of_pair, pair)
        .into_iter()
        .map(|j| {
            (
                j,
                triplet_loss(d_pos, cosine_distance(q, emb.row(j)).value, margin),
            )
        })
        .collect()
}

/// For each pair, the `k` cross-video candidates with the highest loss,
/// highest first; equal losses go to the lower patch index.
pub fn select_hard_negatives(
    video_of_pair: &[u32],
    emb: &Embeddings,
    k: usize,
    margin: f64,
) -> Result<Vec<Vec<usize>>> {
    if emb.n != 2 * video_of_pair.len() {
        return Err(Error::Shape(format!(
            "{} embeddings for {} pairs",
            emb.n,
            video_of_pair.len()
        )));
    }
    (0..video_of_pair.len())
        .map(|i| {
            let losses = candidate_losses(emb, video_of_pair, i, margin);
            if losses.len() < k {
                return Err(Error::NotEnoughNegatives {
                    pair: i,
                    available: losses.len(),
                    need: k,
                });
            }
            // Bounded insertion: `top` stays sorted by (loss desc, index asc).
            // Candidates arrive in increasing index, so a later candidate
            // only displaces strictly smaller losses.
            let mut top: Vec<(usize, f64)> = Vec::with_capacity(k + 1);
            for (j, l) in losses {
                if top.len() == k && l <= top[k - 1].1 {
                    continue;
                }
                let at = top.iter().position(|&(_, t)| l > t).unwrap_or(top.len());
                top.insert(at, (j, l));
                top.truncate(k);
            }
            Ok(top.into_iter().map(|(j, _)| j).collect())
        })
        .collect()
}

/// Pairs plus chosen negatives, ready for the objective.
#[derive(Debug, Clone)]
pub struct TripletBatch {
    /// `2 * P` patches, query then positive for each pair.
    pub images: ImageBatch,
    pub video_of_pair: Vec<u32>,
    pub negatives: Vec<Vec<usize>>,
}

impl TripletBatch {
    pub fn pairs(&self) -> usize {
        self.video_of_pair.len()
    }

    fn check(&self) -> Result<()> {
        if self.images.len() != 2 * self.pairs() || self.negatives.len() != self.pairs() {
            return Err(Error::Shape(format!(
                "{} patches, {} pairs, {} negative lists",
                self.images.len(),
                self.pairs(),
                self.negatives.len()
            )));
        }
        for (i, negs) in self.negatives.iter().enumerate() {
            for &j in negs {
                if j >= self.images.len() || self.video_of_pair[j / 2] == self.video_of_pair[i] {
                    return Err(Error::InvalidArgument(format!(
                        "pair {i}: patch {j} is not a cross-video negative"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Triplet terms of one batch, given its embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletTerms {
    pub loss_sum: f64,
    pub triplets: usize,
    pub active: usize,
    pub degenerate: usize,
    /// `d(loss_sum) / d(embeddings)`.
    pub grad: Embeddings,
}

impl TripletTerms {
    pub fn mean_loss(&self) -> f64 {
        if self.triplets == 0 {
            0.0
        } else {
            self.loss_sum / self.triplets as f64
        }
    }

    pub fn active_fraction(&self) -> f64 {
        if self.triplets == 0 {
            0.0
        } else {
            self.active as f64 / self.triplets as f64
        }
    }
}

/// Sums the hinge over every (pair, negative) and differentiates it with
/// respect to the embeddings. Inactive triplets contribute no gradient.
pub fn triplet_terms(emb: &Embeddings, negatives: &[Vec<usize>], margin: f64) -> TripletTerms {
    let mut grad = Embeddings::zeros(emb.n, emb.dim);
    let (mut loss_sum, mut triplets, mut active, mut degenerate) = (0.0, 0, 0, 0);
    let mut gq = vec![0.0; emb.dim];
    let mut gx = vec![0.0; emb.dim];
    for (i, negs) in negatives.iter().enumerate() {
        let (qi, pi) = (2 * i, 2 * i + 1);
        let q = emb.row(qi);
        let dp = cosine_distance(q, emb.row(pi));
        for &j in negs {
            let dn = cosine_distance(q, emb.row(j));
            degenerate += usize::from(dp.degenerate) + usize::from(dn.degenerate);
            let l = triplet_loss(dp.value, dn.value, margin);
            triplets += 1;
            loss_sum += l;
            if l > 0.0 {
                active += 1;
                // d/d emb of (D(q, p) - D(q, n)).
                gq.fill(0.0);
                gx.fill(0.0);
                accumulate_cosine_grad(q, emb.row(pi), 1.0, &mut gq, &mut gx);
                add(grad.row_mut(pi), &gx);
                gx.fill(0.0);
                accumulate_cosine_grad(q, emb.row(j), -1.0, &mut gq, &mut gx);
                add(grad.row_mut(j), &gx);
                add(grad.row_mut(qi), &gq);
            }
        }
    }
    TripletTerms {
        loss_sum,
        triplets,
        active,
        degenerate,
        grad,
    }
}

fn add(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Full objective `weight_decay / 2 * |W|^2 + sum of hinge losses` and its
/// gradient with respect to every parameter.
pub fn batch_objective(
    params: &EncoderParams,
    batch: &TripletBatch,
    margin: f64,
    weight_decay: f64,
) -> Result<(f64, Gradients)> {
    batch.check()?;
    let (emb, tape) = forward(params, &batch.images)?;
    let terms = triplet_terms(&emb, &batch.negatives, margin);
    let mut grads = backward(params, &tape, &terms.grad)?;
    let mask = params.weight_mask();
    for ((g, &w), &is_weight) in grads.values.iter_mut().zip(params.values()).zip(&mask) {
        if is_weight {
            *g += weight_decay * w as f64;
        }
    }
    Ok((
        0.5 * weight_decay * params.weight_sq_norm() + terms.loss_sum,
        grads,
    ))
}

/// One tracked pair of patches.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPair {
    pub video: u32,
    pub query: GrayImage,
    pub positive: GrayImage,
}

/// All pairs available for training.
#[derive(Debug, Clone, PartialEq)]
pub struct PairDataset {
    pub pairs: Vec<PatchPair>,
    /// Video names by index.
    pub videos: Vec<String>,
}

impl PairDataset {
    /// Groups `(video_id, query, positive)` triples; video indices follow
    /// sorted video ids.
    pub fn from_named(pairs: Vec<(String, GrayImage, GrayImage)>) -> Result<Self> {
        let mut ids: BTreeMap<String, u32> = pairs.iter().map(|(v, _, _)| (v.clone(), 0)).collect();
        for (i, v) in ids.values_mut().enumerate() {
            *v = i as u32;
        }
        let pairs = pairs
            .into_iter()
            .map(|(v, query, positive)| PatchPair {
                video: ids[&v],
                query,
                positive,
            })
            .collect();
        let ds = Self {
            pairs,
            videos: ids.into_keys().collect(),
        };
        ds.check()?;
        Ok(ds)
    }

    /// Reads a mining manifest and every patch it references.
    pub fn from_manifest(manifest: &Path) -> Result<Self> {
        let records = read_manifest(manifest)?;
        let pairs = records
            .into_iter()
            .map(|r| {
                let a = read_grid(&resolve_patch(manifest, &r.patch_a))?;
                let b = read_grid(&resolve_patch(manifest, &r.patch_b))?;
                Ok((r.video_id, a, b))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_named(pairs)
    }

    fn check(&self) -> Result<()> {
        if self.videos.len() < 2 {
            return Err(Error::Dataset(format!(
                "training needs pairs from at least 2 videos, found {}",
                self.videos.len()
            )));
        }
        let side = self.pairs[0].query.height();
        for (i, p) in self.pairs.iter().enumerate() {
            for im in [&p.query, &p.positive] {
                if im.height() != side || im.width() != side {
                    return Err(Error::Dataset(format!(
                        "pair {i}: patch is {}x{}, expected {side}x{side}",
                        im.height(),
                        im.width()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Network input and per-pair video for the given pair indices.
    pub fn batch(&self, indices: &[usize], mean_subtract: bool) -> Result<(ImageBatch, Vec<u32>)> {
        let mut images = Vec::with_capacity(2 * indices.len());
        let mut videos = Vec::with_capacity(indices.len());
        for &i in indices {
            let p = &self.pairs[i];
            images.push(&p.query);
            images.push(&p.positive);
            videos.push(p.video);
        }
        Ok((ImageBatch::from_images(&images, mean_subtract)?, videos))
    }
}

/// Training progress at one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossReport {
    pub iter: usize,
    /// Mean hinge loss over the batch's selected triplets.
    pub loss: f64,
    pub active_fraction: f64,
    pub lr: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "iter,loss,active_fraction,lr";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{}",
            self.iter, self.loss, self.active_fraction, self.lr
        )
    }
}

/// Draws pair indices epoch by epoch, reshuffling at each epoch start.
struct EpochSampler {
    order: Vec<usize>,
    pos: usize,
}

impl EpochSampler {
    fn new(n: usize) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
        }
    }

    fn next_batch(&mut self, size: usize, rng: &mut Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Network and input options shared by training and evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct NetOptions {
    pub spec: LayerSpec,
    pub mean_subtract: bool,
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub reports: Vec<LossReport>,
}

const SHUFFLE_STREAM: u64 = 0x74_7261_696e;

/// Trains from `init_params(spec, cfg.seed)` on `data`.
///
/// `on_report` sees each report as it is produced. When `out` is given the
/// checkpoint is written every `checkpoint_interval` iterations and at the end.
pub fn train_on(
    data: &PairDataset,
    net: &NetOptions,
    cfg: &TrainConfig,
    out: Option<&Path>,
    mut on_report: impl FnMut(&LossReport),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    data.check()?;
    let mut params = encoder::init_params(&net.spec, cfg.seed)?;
    let mut rng = rng::seeded(derive_seed(cfg.seed, SHUFFLE_STREAM));
    let mut sampler = EpochSampler::new(data.len());
    let pairs_per_batch = cfg.pairs_per_batch().min(data.len());
    let mut velocity = Vec::new();
    let mut reports = Vec::new();

    let snapshot = |params: &EncoderParams, step: usize, rng: &Rng| Checkpoint {
        params: params.clone(),
        step: step as u64,
        rng: RngState::capture(rng),
    };

    for iter in 0..cfg.total_iters {
        let indices = sampler.next_batch(pairs_per_batch, &mut rng);
        let (images, video_of_pair) = data.batch(&indices, net.mean_subtract)?;
        let (emb, tape) = forward(&params, &images)?;
        let k = cfg.negatives_per_pair;
        let negatives = if iter < cfg.random_phase_iters {
            sample_random_negatives(&video_of_pair, k, &mut rng)?
        } else {
            select_hard_negatives(&video_of_pair, &emb, k, cfg.margin)?
        };
        let terms = triplet_terms(&emb, &negatives, cfg.margin);
        let grads = backward(&params, &tape, &terms.grad)?;
        let lr = lr_at(cfg, iter);
        if cfg.momentum > 0.0 {
            encoder::sgd_momentum_step(
                &mut params,
                &grads,
                &mut velocity,
                lr,
                cfg.weight_decay,
                cfg.momentum,
            )?;
        } else {
            encoder::sgd_step(&mut params, &grads, lr, cfg.weight_decay)?;
        }

        let done = iter + 1;
        if cfg.report_interval > 0 && (done % cfg.report_interval == 0 || done == cfg.total_iters) {
            let report = LossReport {
                iter: done,
                loss: terms.mean_loss(),
                active_fraction: terms.active_fraction(),
                lr,
            };
            on_report(&report);
            reports.push(report);
        }
        if let Some(path) = out {
            if cfg.checkpoint_interval > 0
                && done % cfg.checkpoint_interval == 0
                && done < cfg.total_iters
            {
                snapshot(&params, done, &rng).save(path)?;
            }
        }
    }

    let checkpoint = snapshot(&params, cfg.total_iters, &rng);
    if let Some(path) = out {
        checkpoint.save(path)?;
    }
    Ok(TrainOutcome {
        checkpoint,
        reports,
    })
}

/// Reads `manifest` and trains on it.
pub fn train(
    manifest: &Path,
    net: &NetOptions,
    cfg: &TrainConfig,
    out_ckpt: &Path,
    on_report: impl FnMut(&LossReport),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = PairDataset::from_manifest(manifest)?;
    train_on(&data, net, cfg, Some(out_ckpt), on_report)
}
