use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use dge_core::analysis::{
    export_heatmaps, localization, redundancy_profile, threshold_sweep, write_histogram_csv, write_sweep_csv,
};
use dge_core::encoder::VitModel;
use dge_core::harness::{bench, class_histogram, evaluate, make_dataset, train, RunConfig, Sample};
use dge_core::router::GranularitySet;
use dge_core::tensor::{DType, Element};
use dge_core::{DgeError, Result};

#[derive(Parser)]
#[command(name = "dge", version, about = "Dynamic grained encoder toy harness")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration file (`key = value` lines under `[section]` headers).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Target compute ratio γ.
    #[arg(long, global = true)]
    budget: Option<f64>,
    /// Candidate granularities, e.g. `1,2,4`.
    #[arg(long, global = true)]
    phi: Option<String>,
    #[arg(long, global = true)]
    precision: Option<DType>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and write a summary with previews.
    Dataset {
        #[arg(long, default_value_t = 8)]
        previews: usize,
    },
    /// Train a model and save best/final checkpoints.
    Train,
    /// Inference accuracy, mean β and FLOPs on the validation split.
    Eval(CheckpointArg),
    /// PCC redundancy profile and threshold-replacement sweep.
    Analyze {
        #[command(flatten)]
        ckpt: CheckpointArg,
        /// Comma separated thresholds.
        #[arg(long, default_value = "1.01,0.99,0.98,0.97,0.96,0.95,0.9,0.8,0.6,0.0,-1")]
        thresholds: String,
        /// Validation samples to use (0 = all).
        #[arg(long, default_value_t = 0)]
        samples: usize,
    },
    /// Per-layer routing heat-maps (PGM + JSON) for validation images.
    Heatmap {
        #[command(flatten)]
        ckpt: CheckpointArg,
        #[arg(long, default_value_t = 8)]
        count: usize,
    },
    /// Wall-clock of routed versus finest-forced inference.
    Bench {
        #[command(flatten)]
        ckpt: CheckpointArg,
        #[arg(long, default_value_t = 3)]
        repetitions: usize,
        #[arg(long, default_value_t = 64)]
        samples: usize,
    },
}

#[derive(Args)]
struct CheckpointArg {
    /// Checkpoint manifest; defaults to `<out>/final.json`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    if let Some(gamma) = common.budget {
        cfg.model.encoder.budget = gamma;
    }
    if let Some(list) = &common.phi {
        cfg.model.encoder.granularities = GranularitySet::parse_list(list)?;
    }
    if let Some(p) = common.precision {
        cfg.precision = p;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| DgeError::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| DgeError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    println!("{}", path.display());
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| DgeError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn preview_pgm(sample: &Sample, size: usize) -> String {
    let (lo, hi) = sample
        .pixels
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = (hi - lo).max(1e-12);
    let mut s = format!("P2\n{size} {size}\n255\n");
    for row in sample.pixels.chunks(size) {
        let line: Vec<String> = row
            .iter()
            .map(|v| (((v - lo) / span) * 255.0).round().to_string())
            .collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}

#[derive(Serialize)]
struct SampleMeta {
    label: usize,
    window: dge_core::router::Rect,
}

#[derive(Serialize)]
struct DatasetSummary<'a> {
    spec: &'a dge_core::harness::DatasetSpec,
    train_histogram: Vec<usize>,
    val_histogram: Vec<usize>,
    train: Vec<SampleMeta>,
    val: Vec<SampleMeta>,
}

fn checkpoint_path(cfg: &RunConfig, arg: &CheckpointArg) -> PathBuf {
    arg.checkpoint.clone().unwrap_or_else(|| cfg.out.join("final.json"))
}

fn limit(samples: &[Sample], n: usize) -> &[Sample] {
    if n == 0 {
        samples
    } else {
        &samples[..n.min(samples.len())]
    }
}

fn run<T: Element>(cfg: &RunConfig, command: &Command) -> Result<()> {
    let out = &cfg.out;
    match command {
        Command::Dataset { previews } => {
            let data = make_dataset(&cfg.dataset)?;
            let meta = |s: &[Sample]| s.iter().map(|x| SampleMeta { label: x.label, window: x.window }).collect();
            let summary = DatasetSummary {
                spec: &data.spec,
                train_histogram: class_histogram(&data.train, data.spec.classes),
                val_histogram: class_histogram(&data.val, data.spec.classes),
                train: meta(&data.train),
                val: meta(&data.val),
            };
            write_json(&out.join("dataset.json"), &summary)?;
            let dir = out.join("previews");
            fs::create_dir_all(&dir).map_err(|e| DgeError::Io { path: dir.clone(), source: e })?;
            for (i, s) in data.train.iter().take(*previews).enumerate() {
                write_text(&dir.join(format!("train_{i}_class{}.pgm", s.label)), &preview_pgm(s, data.spec.image_size))?;
            }
        }
        Command::Train => {
            let outcome = train::<T>(cfg)?;
            write_json(&out.join("train_report.json"), &outcome)?;
        }
        Command::Eval(ckpt) => {
            let model = VitModel::<T>::load(&checkpoint_path(cfg, ckpt))?;
            let data = make_dataset(&cfg.dataset)?;
            write_json(&out.join("eval_report.json"), &evaluate(&model, &data.val)?)?;
        }
        Command::Analyze {
            ckpt,
            thresholds,
            samples,
        } => {
            let model = VitModel::<T>::load(&checkpoint_path(cfg, ckpt))?;
            let data = make_dataset(&cfg.dataset)?;
            let subset = limit(&data.val, *samples);
            let thresholds: Vec<f64> = thresholds
                .split(',')
                .map(|t| {
                    t.trim()
                        .parse()
                        .map_err(|e| DgeError::Usage(format!("bad threshold `{t}`: {e}")))
                })
                .collect::<Result<_>>()?;
            let mut profile = redundancy_profile(&model, subset)?;
            profile.sweep = threshold_sweep(&model, subset, &thresholds)?;
            let dir = out.join("analysis");
            write_json(&dir.join("redundancy.json"), &profile)?;
            for l in &profile.layers {
                write_histogram_csv(&dir.join(format!("histogram_layer{}.csv", l.layer)), &l.histogram)?;
            }
            write_sweep_csv(&dir.join("sweep.csv"), &profile.sweep)?;
        }
        Command::Heatmap { ckpt, count } => {
            let model = VitModel::<T>::load(&checkpoint_path(cfg, ckpt))?;
            let data = make_dataset(&cfg.dataset)?;
            let subset = limit(&data.val, *count);
            let images: Vec<_> = subset
                .iter()
                .enumerate()
                .map(|(i, s)| (format!("val{i}"), s.image::<T>(model.config().image_size)))
                .collect();
            let dir = out.join("heatmaps");
            let files = export_heatmaps(&model, &images, &dir)?;
            println!("{} heat-maps in {}", files.len(), dir.display());
            write_json(&dir.join("localization.json"), &localization(&model, &data.val)?)?;
        }
        Command::Bench {
            ckpt,
            repetitions,
            samples,
        } => {
            let model = VitModel::<T>::load(&checkpoint_path(cfg, ckpt))?;
            let data = make_dataset(&cfg.dataset)?;
            write_json(&out.join("bench.json"), &bench(&model, limit(&data.val, *samples), *repetitions)?)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = resolve(&cli.common).and_then(|cfg| match cfg.precision {
        DType::F32 => run::<f32>(&cfg, &cli.command),
        DType::F64 => run::<f64>(&cfg, &cli.command),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
