use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use ndarray::{Array3, Axis};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use trkseg::checkpoint::{load_checkpoint, save_checkpoint};
use trkseg::datakit::grammar::conversation_corpus;
use trkseg::datakit::{
    frame_file, generate_synthetic_dataset, load_sample, read_frame_dir, write_mask_png, DatasetManifest, QueryType,
    Split, SynthConfig, VideoSample, MANIFEST_FILE,
};
use trkseg::eval::{
    config_digest, evaluate_benchmark, evaluate_model, render_ablation, render_report, run_ablation, write_report,
    AblationConfig, AblationTable, EvalReport,
};
use trkseg::inferpost::{post_optimize, render_overlays, segment_video, PropagationConfig, Provenance};
use trkseg::tokenizer::Vocab;
use trkseg::trainer::{train, TrainConfig};
use trkseg::Error;

const VOCAB_FILE: &str = "vocab.json";

#[derive(Parser)]
#[command(name = "trkseg", version, about = "Video object segmentation from language with a single tracking token")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic train/val splits.
    Synthgen(Common),
    /// Train a model and write a checkpoint plus a JSON-lines log.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Segment one video directory of frame PNGs.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        video: Option<PathBuf>,
        #[arg(long)]
        expr: Option<String>,
        #[arg(long)]
        post_opt: bool,
        /// Also write mask overlays under OUT/overlays.
        #[arg(long)]
        overlays: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score predictions (or a checkpoint) against a manifest.
    Eval(Common),
    /// Train and compare ablation cells.
    Ablate(Common),
    /// Re-render report.txt from a report.json.
    Report(Common),
}

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>, required: bool) -> trkseg::Result<T> {
    let Some(path) = path else {
        if required {
            return Err(Error::Config("--config FILE is required".into()));
        }
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SynthgenRun {
    out_dir: PathBuf,
    synth: SynthConfig,
    train_videos: usize,
    val_videos: usize,
}

impl Default for SynthgenRun {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("data"),
            synth: SynthConfig::default(),
            train_videos: 200,
            val_videos: 60,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainRun {
    train: TrainConfig,
    manifest: PathBuf,
    checkpoint: PathBuf,
    log: PathBuf,
}

impl Default for TrainRun {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            manifest: PathBuf::from("data/train/manifest.json"),
            checkpoint: PathBuf::from("runs/model.safetensors"),
            log: PathBuf::from("runs/train.jsonl"),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct InferRun {
    checkpoint: Option<PathBuf>,
    video: Option<PathBuf>,
    expr: Option<String>,
    post_opt: bool,
    out: Option<PathBuf>,
    propagation: PropagationConfig,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvalRun {
    manifest: PathBuf,
    /// Directory of `{video_id}/{t:05}.png` predictions.
    predictions: Option<PathBuf>,
    /// Evaluate a checkpoint directly instead of stored predictions.
    checkpoint: Option<PathBuf>,
    post_opt: bool,
    propagation: PropagationConfig,
    out_dir: PathBuf,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct AblateRun {
    ablation: AblationConfig,
    train_manifest: PathBuf,
    val_manifest: PathBuf,
    out_dir: PathBuf,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ReportRun {
    /// A report.json written by `eval` or `ablate`.
    input: PathBuf,
    out_dir: PathBuf,
}

#[derive(Serialize)]
struct PredictionSidecar<'a> {
    video_id: &'a str,
    expr: &'a str,
    forced: bool,
    provenance: &'a [Provenance],
}

fn load_split(manifest: &Path) -> trkseg::Result<Vec<VideoSample>> {
    let m = DatasetManifest::load(manifest)?;
    m.entries.iter().map(|e| load_sample(&m, &e.video_id)).collect()
}

fn synthgen(common: &Common) -> anyhow::Result<()> {
    let mut run: SynthgenRun = read_config(common.config.as_deref(), true)?;
    if let Some(seed) = common.seed {
        run.synth.seed = seed;
    }
    for (split, n, seed) in [
        (Split::Train, run.train_videos, run.synth.seed),
        (Split::Val, run.val_videos, run.synth.seed.wrapping_add(1)),
    ] {
        let cfg = SynthConfig {
            num_videos: n,
            seed,
            ..run.synth.clone()
        };
        let name = serde_json::to_value(split)?.as_str().unwrap_or("split").to_string();
        let dir = run.out_dir.join(&name);
        let m = generate_synthetic_dataset(&cfg, &dir, split)?;
        println!("{name}: {} videos -> {}", m.entries.len(), dir.join(MANIFEST_FILE).display());
    }
    let vocab_path = run.out_dir.join(VOCAB_FILE);
    let vocab = Vocab::build(&conversation_corpus())?;
    fs::write(&vocab_path, vocab.to_json()?).map_err(|e| Error::io(&vocab_path, e))?;
    println!("vocab: {} tokens -> {}", vocab.len(), vocab_path.display());
    Ok(())
}

fn train_cmd(common: &Common, iterations: Option<usize>, manifest: Option<PathBuf>, out: Option<PathBuf>) -> anyhow::Result<()> {
    let mut run: TrainRun = read_config(common.config.as_deref(), true)?;
    if let Some(seed) = common.seed {
        run.train.seed = seed;
    }
    if let Some(it) = iterations {
        run.train.iterations = it;
    }
    if let Some(m) = manifest {
        run.manifest = m;
    }
    if let Some(o) = out {
        run.checkpoint = o;
    }
    run.train.validate()?;
    let samples = load_split(&run.manifest)?;
    let vocab = Vocab::build(&conversation_corpus())?;
    if let Some(dir) = run.log.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = fs::File::create(&run.log).map_err(|e| Error::io(&run.log, e))?;
    let mut sink = BufWriter::new(file);
    let outcome = train(&run.train, &samples, vocab, Some(&mut sink));
    sink.flush().map_err(|e| Error::io(&run.log, e))?;
    let outcome = outcome?;
    save_checkpoint(&outcome.model, &run.checkpoint)?;
    let last = outcome.log.last().expect("at least one iteration");
    println!(
        "trained {} iterations, final loss {:.4}; checkpoint {}",
        last.iter,
        last.loss_total,
        run.checkpoint.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn infer_cmd(
    common: &Common,
    checkpoint: Option<PathBuf>,
    video: Option<PathBuf>,
    expr: Option<String>,
    post_opt: bool,
    overlays: bool,
    out: Option<PathBuf>,
) -> anyhow::Result<()> {
    let run: InferRun = read_config(common.config.as_deref(), false)?;
    let checkpoint = checkpoint.or(run.checkpoint).ok_or_else(|| Error::Config("--checkpoint is required".into()))?;
    let video_dir = video.or(run.video).ok_or_else(|| Error::Config("--video is required".into()))?;
    let expr = expr.or(run.expr).ok_or_else(|| Error::Config("--expr is required".into()))?;
    let out = out.or(run.out).ok_or_else(|| Error::Config("--out is required".into()))?;
    let post_opt = post_opt || run.post_opt;

    let model = load_checkpoint(&checkpoint)?;
    let frames = read_frame_dir(&video_dir)?;
    let (t, h, w, _) = frames.dim();
    let video_id = video_dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "video".into());
    let video = VideoSample::new(&video_id, frames, Array3::zeros((t, h, w)), &expr, QueryType::Short, "external")?;
    let pred = segment_video(&model, &video, &expr)?;
    let masks = if post_opt {
        post_optimize(&model, &video, &pred.mask_set, &pred.selection, &run.propagation)?
    } else {
        pred.mask_set
    };
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    for (i, m) in masks.masks.axis_iter(Axis(0)).enumerate() {
        write_mask_png(m, &frame_file(&out, i))?;
    }
    let sidecar = PredictionSidecar {
        video_id: &video_id,
        expr: &expr,
        forced: pred.forced,
        provenance: &masks.provenance,
    };
    let path = out.join("prediction.json");
    fs::write(&path, serde_json::to_string_pretty(&sidecar)? + "\n").map_err(|e| Error::io(&path, e))?;
    if overlays {
        render_overlays(&video, &masks, &out.join("overlays"))?;
    }
    println!("{t} masks -> {}", out.display());
    Ok(())
}

/// Exit status 3 when any sample could not be scored.
fn eval_cmd(common: &Common) -> anyhow::Result<u8> {
    let run: EvalRun = read_config(common.config.as_deref(), true)?;
    let report: EvalReport = match (&run.predictions, &run.checkpoint) {
        (Some(pred), _) => {
            let manifest = DatasetManifest::load(&run.manifest)?;
            evaluate_benchmark(&manifest, pred)?
        }
        (None, Some(ckpt)) => {
            let model = load_checkpoint(ckpt)?;
            let samples = load_split(&run.manifest)?;
            let post = run.post_opt.then_some(&run.propagation);
            let digest = config_digest(&(&model.config, &model.strategy, run.post_opt, &run.propagation))?;
            evaluate_model(&model, &samples, post, digest)?
        }
        (None, None) => return Err(Error::Config("eval needs `predictions` or `checkpoint`".into()).into()),
    };
    let text = render_report(&report);
    write_report(&report, &text, &run.out_dir)?;
    print!("{text}");
    Ok(if report.has_failures() { 3 } else { 0 })
}

/// Exit status 4 when any cell failed to train or evaluate.
fn ablate_cmd(common: &Common) -> anyhow::Result<u8> {
    let mut run: AblateRun = read_config(common.config.as_deref(), true)?;
    if let Some(seed) = common.seed {
        run.ablation.base.seed = seed;
    }
    run.ablation.validate()?;
    let train_set = load_split(&run.train_manifest)?;
    let val_set = load_split(&run.val_manifest)?;
    let vocab = Vocab::build(&conversation_corpus())?;
    let table = run_ablation(&run.ablation, &train_set, &val_set, &vocab)?;
    let text = render_ablation(&table);
    write_report(&table, &text, &run.out_dir)?;
    print!("{text}");
    Ok(if table.has_failures() { 4 } else { 0 })
}

fn report_cmd(common: &Common) -> anyhow::Result<()> {
    let run: ReportRun = read_config(common.config.as_deref(), true)?;
    let raw = fs::read_to_string(&run.input).map_err(|e| Error::io(&run.input, e))?;
    let text = if let Ok(report) = serde_json::from_str::<EvalReport>(&raw) {
        let text = render_report(&report);
        write_report(&report, &text, &run.out_dir)?;
        text
    } else if let Ok(table) = serde_json::from_str::<AblationTable>(&raw) {
        let text = render_ablation(&table);
        write_report(&table, &text, &run.out_dir)?;
        text
    } else {
        return Err(Error::Format(format!("{} is neither an eval nor an ablation report", run.input.display())).into());
    };
    print!("{text}");
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    err.chain()
        .find_map(|e| e.downcast_ref::<Error>())
        .map_or(1, |e| e.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synthgen(c) => synthgen(&c).map(|_| 0),
        Command::Train {
            common,
            iterations,
            manifest,
            out,
        } => train_cmd(&common, iterations, manifest, out).map(|_| 0),
        Command::Infer {
            common,
            checkpoint,
            video,
            expr,
            post_opt,
            overlays,
            out,
        } => infer_cmd(&common, checkpoint, video, expr, post_opt, overlays, out).map(|_| 0),
        Command::Eval(c) => eval_cmd(&c).context("evaluation failed"),
        Command::Ablate(c) => ablate_cmd(&c).context("ablation failed"),
        Command::Report(c) => report_cmd(&c).map(|_| 0),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
