//! `patchtrack`: mine tracked patch pairs from video, train a triplet
//! encoder on them, then evaluate or export its embeddings.
//!
//! Exit codes: 0 success, 1 error, 2 empty result (no pairs mined).

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};

use patchtrack::config::RunConfig;
use patchtrack::encoder::{Checkpoint, EncoderParams};
use patchtrack::eval::{
    concat_embeddings, generate_synthetic_tracks, nn_retrieval_rate, read_labeled_dir,
    read_labeled_records, synthetic_benchmark, track_pair_frames, train_linear_probe,
    write_labeled_dir, Split,
};
use patchtrack::mining::{mine_video_root, write_manifest_entries, TrackedPair};
use patchtrack::rng::derive_seed;
use patchtrack::synth;
use patchtrack::trainer::{train, LossReport};
use patchtrack::video_io::BBox;

#[derive(Parser, Debug)]
#[command(
    name = "patchtrack",
    version,
    about = "Unsupervised patch embeddings from tracked video patches"
)]
struct Cli {
    /// JSON run configuration; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (1 = fully serial).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Suppress timings so repeated runs print identical output.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Print the effective configuration as JSON and exit.
    #[arg(long, global = true)]
    dump_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Mine (query, tracked) patch pairs from a directory of frame sequences.
    Mine {
        /// One subdirectory of numbered frames per video.
        #[arg(long)]
        videos: Option<PathBuf>,
        /// Receives manifest.jsonl and patches/.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train an encoder on a pair manifest.
    Train {
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Checkpoint file to write.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        total_iters: Option<usize>,
        /// Also write the loss reports as CSV.
        #[arg(long)]
        loss_csv: Option<PathBuf>,
    },
    /// Evaluate checkpoints on a labeled-data directory.
    Eval {
        #[command(subcommand)]
        what: EvalCommand,
    },
    /// Write one embedding per labeled patch as CSV rows.
    Embed {
        #[command(flatten)]
        input: EncoderInput,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate synthetic inputs.
    Synth {
        #[command(subcommand)]
        what: SynthCommand,
    },
}

#[derive(Subcommand, Debug)]
enum EvalCommand {
    /// Top-k nearest-neighbour label agreement of `query` against `db`.
    Retrieval {
        #[command(flatten)]
        input: EncoderInput,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Softmax classifier on frozen embeddings, fit on `train`, scored on `test`.
    Probe {
        #[command(flatten)]
        input: EncoderInput,
        #[arg(long)]
        epochs: Option<usize>,
    },
}

#[derive(Args, Debug)]
struct EncoderInput {
    /// Checkpoint, or comma-separated checkpoints whose embeddings are concatenated.
    #[arg(long, value_delimiter = ',', required = true)]
    ckpt: Vec<PathBuf>,
    /// Labeled-data directory (labels.jsonl + patches/).
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum SynthCommand {
    /// Frame-sequence directories with known motion.
    Videos {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "square")]
        kind: VideoKind,
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long, default_value_t = 31)]
        frames: usize,
    },
    /// Rendered object tracks: a training manifest under `train/` and
    /// labeled query/db/train/test sets under `eval/`.
    Tracks {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 30)]
        frames: usize,
        /// Instances below this number are used for training.
        #[arg(long, default_value_t = 15)]
        train_instances: usize,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum VideoKind {
    /// A textured square sliding over a static textured background.
    Square,
    /// Camera pan over a static scene.
    Pan,
    /// No motion at all.
    Static,
}

enum Outcome {
    Done,
    Empty,
}

struct Ctx {
    cfg: RunConfig,
    jobs: usize,
    deterministic: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::Empty) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<Outcome> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    cfg.validate()?;
    if cli.dump_config {
        println!("{}", cfg.to_json());
        return Ok(Outcome::Done);
    }
    let jobs = match cli.jobs {
        Some(0) => bail!("--jobs must be at least 1"),
        Some(j) => j,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build_global()
        .context("starting worker threads")?;
    let ctx = Ctx {
        cfg,
        jobs,
        deterministic: cli.deterministic,
    };
    let Some(command) = cli.command else {
        bail!("no subcommand given (try --help)");
    };
    match command {
        Command::Mine { videos, out } => cmd_mine(&ctx, videos, out),
        Command::Train {
            manifest,
            out,
            total_iters,
            loss_csv,
        } => cmd_train(&ctx, manifest, out, total_iters, loss_csv),
        Command::Eval { what } => cmd_eval(&ctx, what),
        Command::Embed { input, out } => cmd_embed(&ctx, input, &out),
        Command::Synth { what } => cmd_synth(&ctx, what),
    }
}

/// Command-line path, else the config's, else an error naming the flag.
fn pick(arg: Option<PathBuf>, from_config: &Option<PathBuf>, flag: &str) -> Result<PathBuf> {
    arg.or_else(|| from_config.clone())
        .with_context(|| format!("--{flag} is required (or set paths.{flag} in the config)"))
}

fn cmd_mine(ctx: &Ctx, videos: Option<PathBuf>, out: Option<PathBuf>) -> Result<Outcome> {
    let videos = pick(videos, &ctx.cfg.paths.videos, "videos")?;
    let out = pick(out, &ctx.cfg.paths.out, "out")?;
    let summary = mine_video_root(&videos, &out, &ctx.cfg.mine, ctx.cfg.seed, ctx.jobs)?;
    let report = serde_json::json!({
        "videos": summary.videos,
        "skipped_short": summary.skipped_short,
        "pairs": summary.pairs,
        "manifest": out.join("manifest.jsonl"),
    });
    println!("{report}");
    if summary.pairs == 0 {
        eprintln!("no pairs mined from {}", videos.display());
        return Ok(Outcome::Empty);
    }
    Ok(Outcome::Done)
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

fn cmd_train(
    ctx: &Ctx,
    manifest: Option<PathBuf>,
    out: Option<PathBuf>,
    total_iters: Option<usize>,
    loss_csv: Option<PathBuf>,
) -> Result<Outcome> {
    let manifest = pick(manifest, &ctx.cfg.paths.manifest, "manifest")?;
    let out = pick(out, &ctx.cfg.paths.ckpt, "ckpt")?;
    let mut tcfg = ctx.cfg.train.clone();
    if let Some(n) = total_iters {
        tcfg.total_iters = n;
    }
    let mut csv = match &loss_csv {
        Some(path) => {
            let f =
                fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
            let mut w = BufWriter::new(f);
            writeln!(w, "{}", LossReport::CSV_HEADER)?;
            Some(w)
        }
        None => None,
    };
    let start = Instant::now();
    let mut csv_err = None;
    let outcome = train(&manifest, &ctx.cfg.encoder.net(), &tcfg, &out, |r| {
        if ctx.deterministic {
            eprintln!(
                "iter {} loss {:.6} active {:.3} lr {}",
                r.iter, r.loss, r.active_fraction, r.lr
            );
        } else {
            eprintln!(
                "iter {} loss {:.6} active {:.3} lr {} ({:.1}s)",
                r.iter,
                r.loss,
                r.active_fraction,
                r.lr,
                start.elapsed().as_secs_f64()
            );
        }
        if let Some(w) = csv.as_mut() {
            if let Err(e) = writeln!(w, "{}", r.csv_row()) {
                csv_err.get_or_insert(e);
            }
        }
    })?;
    if let Some(e) = csv_err {
        return Err(e).context("writing loss CSV");
    }
    if let Some(mut w) = csv {
        w.flush().context("writing loss CSV")?;
    }
    let report = serde_json::json!({
        "checkpoint": out,
        "sha256": sha256_file(&out)?,
        "iters": outcome.checkpoint.step,
        "final_loss": outcome.reports.last().map(|r| r.loss),
    });
    println!("{report}");
    Ok(Outcome::Done)
}

fn load_encoders(paths: &[PathBuf]) -> Result<Vec<EncoderParams>> {
    paths
        .iter()
        .map(|p| Ok(Checkpoint::load(p)?.params))
        .collect()
}

fn cmd_eval(ctx: &Ctx, what: EvalCommand) -> Result<Outcome> {
    let ms = ctx.cfg.encoder.mean_subtract;
    let report = match what {
        EvalCommand::Retrieval { input, k } => {
            let data = pick(input.data, &ctx.cfg.paths.data, "data")?;
            let encoders = load_encoders(&input.ckpt)?;
            let mut sets = read_labeled_dir(&data)?;
            let (Some(query), Some(db)) = (sets.remove(&Split::Query), sets.remove(&Split::Db))
            else {
                bail!(
                    "{}: retrieval needs both query and db records",
                    data.display()
                );
            };
            let k = k.unwrap_or(ctx.cfg.eval.k);
            serde_json::to_value(nn_retrieval_rate(&query, &db, &encoders, ms, k)?)?
        }
        EvalCommand::Probe { input, epochs } => {
            let data = pick(input.data, &ctx.cfg.paths.data, "data")?;
            let encoders = load_encoders(&input.ckpt)?;
            let mut sets = read_labeled_dir(&data)?;
            let (Some(tr), Some(te)) = (sets.remove(&Split::Train), sets.remove(&Split::Test))
            else {
                bail!(
                    "{}: probe needs both train and test records",
                    data.display()
                );
            };
            let epochs = epochs.unwrap_or(ctx.cfg.eval.probe_epochs);
            serde_json::to_value(train_linear_probe(
                &tr,
                &te,
                &encoders,
                ms,
                epochs,
                ctx.cfg.eval.probe_lr,
            )?)?
        }
    };
    println!("{report}");
    Ok(Outcome::Done)
}

fn cmd_embed(ctx: &Ctx, input: EncoderInput, out: &Path) -> Result<Outcome> {
    let data = pick(input.data, &ctx.cfg.paths.data, "data")?;
    let encoders = load_encoders(&input.ckpt)?;
    let patches: Vec<_> = read_labeled_records(&data)?
        .into_iter()
        .map(|(_, p)| p)
        .collect();
    if patches.is_empty() {
        eprintln!("{}: no patches", data.display());
        return Ok(Outcome::Empty);
    }
    let emb = concat_embeddings(&encoders, &patches, ctx.cfg.encoder.mean_subtract)?;
    let f = fs::File::create(out).with_context(|| format!("creating {}", out.display()))?;
    let mut w = BufWriter::new(f);
    for i in 0..emb.n {
        let row: Vec<String> = emb.row(i).iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    println!(
        "{}",
        serde_json::json!({ "rows": emb.n, "dim": emb.dim, "out": out })
    );
    Ok(Outcome::Done)
}

fn cmd_synth(ctx: &Ctx, what: SynthCommand) -> Result<Outcome> {
    let seed = ctx.cfg.seed;
    match what {
        SynthCommand::Videos {
            out,
            kind,
            count,
            frames,
        } => {
            for i in 0..count {
                let s = derive_seed(seed, i as u64);
                let (name, video) = match kind {
                    // Alternate directions; the square holds a gate-compatible
                    // share of the corners in a 64x128 frame.
                    VideoKind::Square => {
                        let (x, v) = if i % 2 == 0 { (8, 2) } else { (80, -2) };
                        (
                            "square",
                            synth::moving_square_video(s, frames, (64, 128), 40, (x, 12), (v, 0))
                                .frames,
                        )
                    }
                    VideoKind::Pan => ("pan", synth::pan_video(s, frames, (64, 128), (2, 1))),
                    VideoKind::Static => ("static", synth::static_video(s, frames, (64, 128))),
                };
                synth::write_video(&out.join(format!("{name}_{i:03}")), &video)?;
            }
            println!(
                "{}",
                serde_json::json!({ "videos": count, "frames": frames, "out": out })
            );
        }
        SynthCommand::Tracks {
            out,
            classes,
            instances,
            frames,
            train_instances,
        } => {
            let side = ctx.cfg.mine.patch_side;
            let tracks = generate_synthetic_tracks(seed, classes, instances, frames, side)?;
            let bench = synthetic_benchmark(&tracks, train_instances, derive_seed(seed, 1))?;
            let full = BBox::new(0, 0, side, side);
            let mut entries = Vec::new();
            for t in tracks.iter().filter(|t| t.instance < train_instances) {
                for (a, b) in track_pair_frames(frames) {
                    let pair = TrackedPair {
                        video_id: t.video_id.clone(),
                        first_frame: a as u32,
                        first_box: full,
                        last_frame: b as u32,
                        last_box: full,
                    };
                    entries.push((pair, t.frames[a].clone(), t.frames[b].clone()));
                }
            }
            let train_dir = out.join("train");
            let pairs = write_manifest_entries(
                &entries,
                &train_dir.join("patches"),
                &train_dir.join("manifest.jsonl"),
            )?;
            let labeled = write_labeled_dir(
                &out.join("eval"),
                &[
                    &bench.query,
                    &bench.db,
                    &bench.probe_train,
                    &bench.probe_test,
                ],
            )?;
            println!(
                "{}",
                serde_json::json!({
                    "tracks": tracks.len(),
                    "pairs": pairs,
                    "labeled_patches": labeled,
                    "manifest": train_dir.join("manifest.jsonl"),
                    "data": out.join("eval"),
                })
            );
        }
    }
    Ok(Outcome::Done)
}
