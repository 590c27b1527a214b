//! Command-line front end: synthetic data generation, training, prediction,
//! evaluation and attention inspection.

pub mod config;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use surgphase::eval::{
    evaluate_video, read_annotations_csv, read_predictions_csv, score_predictions, summarize, write_annotations_csv,
    write_predictions_csv, MetricReport, PhaseSequence, Summary, VideoEvaluation,
};
use surgphase::model::{load_params, save_params, Model, PhaseClassifier, PhasePrediction};
use surgphase::tokenizer::{FrameVolume, InMemoryVideo};
use surgphase::trainer::{generate_videos, spread_targets, train_with, Sample};
use surgphase::{Error, Result};

pub use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "surgphase", version, about = "Online surgical phase recognition on frame volumes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Flat key=value configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key (repeatable), e.g. `--set dim=32`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic phase videos, annotations and sampled windows.
    GenSynthetic {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train on a generated data directory and write a weight file.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch JSON lines; printed to stdout when omitted.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Predict phases for clip files, or for every frame of a whole video.
    Predict {
        #[arg(long)]
        weights: PathBuf,
        /// Whole-video volume; predicts each frame from the clip ending at it.
        #[arg(long, conflicts_with = "clips")]
        video: Option<PathBuf>,
        /// Clip length at inference; position tables are resized when it differs.
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Clip volumes to classify.
        clips: Vec<PathBuf>,
    },
    /// Score predictions against annotations (strict and relaxed).
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        annotations: Option<PathBuf>,
        /// Prediction CSV to score.
        #[arg(long, conflicts_with_all = ["weights", "data"])]
        predictions: Option<PathBuf>,
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Whole-video volume to run the model on.
        #[arg(long, requires = "weights")]
        video: Option<PathBuf>,
        /// Generated data directory; every video is evaluated and summarized.
        #[arg(long, requires = "weights", conflicts_with = "video")]
        data: Option<PathBuf>,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        fps: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump temporal attention matrices of one block as JSON.
    InspectAttention {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        fvol: PathBuf,
        #[arg(long)]
        layer: usize,
        #[arg(long)]
        position: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Argument(_) | Error::Segment(_) => 2,
        Error::Format(_) | Error::Io(_) => 3,
        Error::Training { .. } => 4,
        _ => 1,
    }
}

/// One-line error description for stderr.
pub fn error_line(e: &Error) -> String {
    let msg = e.to_string().replace('\n', " ");
    format!("error[{}]: {}", e.kind(), msg.trim())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenSynthetic { cfg, out, seed } => {
            let rc = RunConfig::load(cfg.config.as_deref(), &cfg.sets, &[("data_seed", seed.map(|s| s.to_string()))])?;
            gen_synthetic(&rc, &out)
        }
        Command::Train { cfg, data, out, report, lr, epochs, seed, threads } => {
            let flags = [
                ("lr", lr.map(|v| v.to_string())),
                ("epochs", epochs.map(|v| v.to_string())),
                ("seed", seed.map(|v| v.to_string())),
                ("threads", threads.map(|v| v.to_string())),
            ];
            let rc = RunConfig::load(cfg.config.as_deref(), &cfg.sets, &flags)?;
            train(&rc, &data, &out, report.as_deref())
        }
        Command::Predict { weights, video, frames, out, clips } => {
            let model = load_model(&weights, frames)?;
            let preds = match video {
                Some(v) => predict_video(&model, &load_video(&v)?)?,
                None => {
                    if clips.is_empty() {
                        return Err(Error::Argument("give clip files or --video".into()));
                    }
                    predict_clips(&model, &clips)?
                }
            };
            write_csv(&out, &preds, model.cfg.num_phases)
        }
        Command::Evaluate { cfg, annotations, predictions, weights, video, data, frames, fps, out } => {
            let rc = RunConfig::load(cfg.config.as_deref(), &cfg.sets, &[("fps", fps.map(|v| v.to_string()))])?;
            match (predictions, weights, data) {
                (Some(p), None, None) => {
                    let ann = annotations.ok_or_else(|| Error::Argument("--annotations is required".into()))?;
                    let preds = read_predictions_csv(open(&p)?)?;
                    let num_phases = preds.first().map_or(rc.model.num_phases, |p| p.logits.len());
                    let gt = annotations_sequence(&ann, rc.fps, num_phases)?;
                    write_json(&out, &VideoReport::from(&score_predictions(&preds, &gt)?))
                }
                (None, Some(w), Some(dir)) => {
                    let model = load_model(&w, frames)?;
                    write_json(&out, &evaluate_dir(&model, &dir, rc.fps)?)
                }
                (None, Some(w), None) => {
                    let model = load_model(&w, frames)?;
                    let v =
                        video.ok_or_else(|| Error::Argument("--video or --data is required with --weights".into()))?;
                    let ann = annotations.ok_or_else(|| Error::Argument("--annotations is required".into()))?;
                    let gt = annotations_sequence(&ann, rc.fps, model.cfg.num_phases)?;
                    write_json(&out, &VideoReport::from(&evaluate_video(&model, &load_video(&v)?, &gt)?))
                }
                _ => Err(Error::Argument("give either --predictions or --weights".into())),
            }
        }
        Command::InspectAttention { weights, fvol, layer, position, out } => {
            let vol = FrameVolume::load(&fvol)?;
            let model = load_model(&weights, Some(vol.num_frames()))?;
            write_json(&out, &model.inspect_attention(&vol, layer, position)?)
        }
    }
}

fn open(path: &Path) -> Result<fs::File> {
    fs::File::open(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn write_csv(path: &Path, preds: &[PhasePrediction], num_phases: usize) -> Result<()> {
    let mut buf = Vec::new();
    write_predictions_csv(&mut buf, preds, num_phases)?;
    fs::write(path, buf)?;
    Ok(())
}

fn load_model(weights: &Path, frames: Option<usize>) -> Result<Model> {
    let (cfg, params) = load_params(weights)?;
    let model = Model::new(cfg, params)?;
    match frames {
        Some(t) => model.at_frames(t),
        None => Ok(model),
    }
}

fn load_video(path: &Path) -> Result<InMemoryVideo> {
    InMemoryVideo::from_volume(FrameVolume::load(path)?)
}

fn annotations_sequence(path: &Path, fps: f64, num_phases: usize) -> Result<PhaseSequence> {
    let labels = read_annotations_csv(open(path)?)?;
    let num_phases = labels.iter().map(|l| l + 1).max().unwrap_or(0).max(num_phases);
    PhaseSequence::new(labels, fps, num_phases)
}

const VIDEO_FILE: &str = "video.fvol";
const ANNOTATION_FILE: &str = "annotations.csv";

fn video_dirs(data: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(data)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", data.display()))))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("video_")))
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Input(format!("no video_* directories in {}", data.display())));
    }
    Ok(dirs)
}

pub fn gen_synthetic(rc: &RunConfig, out: &Path) -> Result<()> {
    let videos = generate_videos(&rc.data)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("dataset.cfg"), rc.data_text())?;
    for (i, v) in videos.iter().enumerate() {
        let dir = out.join(format!("video_{i:03}"));
        let windows = dir.join("windows");
        fs::create_dir_all(&windows)?;
        v.video.to_volume()?.save(&dir.join(VIDEO_FILE))?;
        let mut ann = Vec::new();
        write_annotations_csv(&mut ann, &v.labels)?;
        fs::write(dir.join(ANNOTATION_FILE), ann)?;
        let mut index = String::from("file,label\n");
        for target in spread_targets(v.labels.len(), rc.data.windows_per_video) {
            let name = format!("t{target:06}.fvol");
            FrameVolume::from_source(&v.video, target, &rc.model.patch)?.save(&windows.join(&name))?;
            index.push_str(&format!("{name},{}\n", v.labels[target]));
        }
        fs::write(windows.join("labels.csv"), index)?;
    }
    Ok(())
}

/// Training windows from every video of a data directory.
pub fn load_samples(rc: &RunConfig, data: &Path) -> Result<Vec<Sample>> {
    let mut samples = Vec::new();
    for dir in video_dirs(data)? {
        let video = load_video(&dir.join(VIDEO_FILE))?;
        let labels = read_annotations_csv(open(&dir.join(ANNOTATION_FILE))?)?;
        let n = video.frames.len() / video.frame_len();
        if labels.len() != n {
            return Err(Error::Input(format!("{}: {} annotations for {n} frames", dir.display(), labels.len())));
        }
        if (video.channels, video.height, video.width)
            != (rc.model.patch.channels, rc.model.patch.height, rc.model.patch.width)
        {
            return Err(Error::Config(format!(
                "{}: frames are {}x{}x{}, model expects {}x{}x{}",
                dir.display(),
                video.channels,
                video.height,
                video.width,
                rc.model.patch.channels,
                rc.model.patch.height,
                rc.model.patch.width
            )));
        }
        for target in spread_targets(n, rc.data.windows_per_video) {
            samples.push(Sample {
                volume: FrameVolume::from_source(&video, target, &rc.model.patch)?,
                label: labels[target],
            });
        }
    }
    Ok(samples)
}

pub fn train(rc: &RunConfig, data: &Path, out: &Path, report: Option<&Path>) -> Result<()> {
    let samples = load_samples(rc, data)?;
    let mut model = Model::init(rc.model.clone(), &mut ChaCha8Rng::seed_from_u64(rc.optim.seed))?;
    let mut lines = String::new();
    let to_stdout = report.is_none();
    train_with(&mut model, &samples, &rc.optim, |e| {
        let line = serde_json::to_string(e).expect("plain struct");
        if to_stdout {
            println!("{line}");
        }
        lines.push_str(&line);
        lines.push('\n');
    })?;
    save_params(out, &model.params, &model.cfg)?;
    if let Some(path) = report {
        fs::write(path, lines)?;
    }
    Ok(())
}

fn check_clip(model: &Model, vol: &FrameVolume) -> Result<()> {
    if vol.num_frames() != model.cfg.frames() {
        return Err(Error::Config(format!(
            "clip has {} frames, model expects {} (use --frames)",
            vol.num_frames(),
            model.cfg.frames()
        )));
    }
    Ok(())
}

pub fn predict_clips(model: &Model, clips: &[PathBuf]) -> Result<Vec<PhasePrediction>> {
    clips
        .iter()
        .map(|p| {
            let vol = FrameVolume::load(p)?;
            check_clip(model, &vol)?;
            model.predict(&vol)
        })
        .collect()
}

pub fn predict_video(model: &Model, video: &InMemoryVideo) -> Result<Vec<PhasePrediction>> {
    let n = video.frames.len() / video.frame_len();
    (0..n).map(|t| model.predict(&FrameVolume::from_source(video, t, &model.cfg.patch)?)).collect()
}

#[derive(Debug, Serialize)]
pub struct VideoReport {
    pub unrelaxed: MetricReport,
    pub relaxed: MetricReport,
}

impl From<&VideoEvaluation> for VideoReport {
    fn from(e: &VideoEvaluation) -> Self {
        VideoReport { unrelaxed: e.unrelaxed.clone(), relaxed: e.relaxed.clone() }
    }
}

#[derive(Debug, Serialize)]
pub struct NamedReport {
    pub video: String,
    #[serde(flatten)]
    pub report: VideoReport,
}

#[derive(Debug, Serialize)]
pub struct DatasetReport {
    pub videos: Vec<NamedReport>,
    pub unrelaxed: Summary,
    pub relaxed: Summary,
}

pub fn evaluate_dir(model: &Model, data: &Path, fps: f64) -> Result<DatasetReport> {
    let mut videos = Vec::new();
    for dir in video_dirs(data)? {
        let gt = annotations_sequence(&dir.join(ANNOTATION_FILE), fps, model.cfg.num_phases)?;
        let e = evaluate_video(model, &load_video(&dir.join(VIDEO_FILE))?, &gt)?;
        let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        videos.push(NamedReport { video: name, report: VideoReport::from(&e) });
    }
    let strict: Vec<MetricReport> = videos.iter().map(|v| v.report.unrelaxed.clone()).collect();
    let relaxed: Vec<MetricReport> = videos.iter().map(|v| v.report.relaxed.clone()).collect();
    Ok(DatasetReport { unrelaxed: summarize(&strict)?, relaxed: summarize(&relaxed)?, videos })
}
