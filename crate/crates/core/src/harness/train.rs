use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::data::{make_dataset, Dataset, Sample};
use super::eval::{evaluate, predicted};
use crate::budget::{batch_mean, budget_loss, complexity_ratio, model_costs, total_loss, LayerCost};
use crate::encoder::{Routing, VitModel};
use crate::error::{DgeError, Result};
use crate::router::GatingDecision;
use crate::tensor::{cast, AdamW, Element, Graph, RngStream, Var};

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub epoch: usize,
    /// `train` for optimizer steps, `val` for end-of-epoch evaluation.
    pub split: String,
    pub task_loss: f64,
    pub budget_loss: f64,
    pub beta: f64,
    pub accuracy: f64,
    pub psi: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wall_clock: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub steps: u64,
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub best_val_accuracy: f64,
    pub final_val_accuracy: f64,
    pub final_val_beta: f64,
    pub metrics: PathBuf,
}

struct MetricsLog {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsLog {
    fn create(path: PathBuf) -> Result<Self> {
        let file = File::create(&path).map_err(|e| DgeError::io(&path, e))?;
        Ok(Self {
            out: BufWriter::new(file),
            path,
        })
    }

    fn push(&mut self, rec: &MetricsRecord) -> Result<()> {
        let line = serde_json::to_string(rec)?;
        writeln!(self.out, "{line}")
            .and_then(|_| self.out.flush())
            .map_err(|e| DgeError::io(&self.path, e))
    }
}

struct StepStats {
    task: f64,
    budget: f64,
    beta: f64,
    correct: usize,
    psi: Vec<f64>,
}

/// Builds the batch loss `mean CE + λ (mean β − γ)²` and back-propagates it
/// into the model's gradient buffers.
fn batch_step<T: Element>(
    model: &mut VitModel<T>,
    costs: &[LayerCost],
    batch: &[&Sample],
    gumbel: &mut RngStream,
) -> Result<StepStats> {
    let cfg = model.config().clone();
    let mut g = Graph::<T>::new();
    let bound = model.bind(&mut g);
    let mut losses = Vec::with_capacity(batch.len());
    let mut betas = Vec::with_capacity(batch.len());
    let mut correct = 0;
    let mut psi = vec![0.0; cfg.encoder.layers];
    for s in batch {
        let image = s.image::<T>(cfg.image_size);
        let out = model.forward(&mut g, &bound, &image, Routing::Train(gumbel), None)?;
        if predicted(&g.value(out.logits).to_f64_vec()) == s.label {
            correct += 1;
        }
        losses.push(g.cross_entropy(out.logits, s.label)?);
        let pairs: Vec<(&LayerCost, &GatingDecision<T>)> =
            costs.iter().zip(out.layers.iter().map(|l| &l.decision)).collect();
        betas.push(complexity_ratio(&mut g, &pairs, model.partition())?);
        for (acc, l) in psi.iter_mut().zip(&out.layers) {
            *acc += l.psi as f64 / batch.len() as f64;
        }
    }
    let task = mean_of(&mut g, &losses)?;
    let beta = batch_mean(&mut g, &betas)?;
    let budget = budget_loss(&mut g, beta, cfg.encoder.budget, cfg.encoder.lambda)?;
    let total = total_loss(&mut g, task, budget)?;
    let stats = StepStats {
        task: g.value(task).item().as_f64(),
        budget: g.value(budget).item().as_f64(),
        beta: g.value(beta).item().as_f64(),
        correct,
        psi,
    };
    if !g.value(total).all_finite() {
        return Err(DgeError::numeric("training loss", format!("non-finite value {:?}", g.value(total).item())));
    }
    let grads = g.backward(total)?;
    let params = model.params_mut();
    params.zero_grad();
    params.accumulate(&g, &grads);
    Ok(stats)
}

fn mean_of<T: Element>(g: &mut Graph<T>, xs: &[Var]) -> Result<Var> {
    let mut acc = xs[0];
    for &x in &xs[1..] {
        acc = g.add(acc, x)?;
    }
    Ok(g.scale(acc, cast::<T>(1.0 / xs.len() as f64)))
}

/// Trains a fresh model on the configured synthetic dataset.
///
/// Writes `metrics.jsonl`, `config.txt`, `best.{json,bin}` and
/// `final.{json,bin}` under the output directory. A non-finite loss or
/// gradient stops the run after saving `last_good.{json,bin}`.
pub fn train<T: Element>(cfg: &RunConfig) -> Result<TrainOutcome> {
    let mut cfg = cfg.clone();
    cfg.validate()?;
    let data = make_dataset(&cfg.dataset)?;
    train_on::<T>(&cfg, &data)
}

pub fn train_on<T: Element>(cfg: &RunConfig, data: &Dataset) -> Result<TrainOutcome> {
    let out = &cfg.out;
    fs::create_dir_all(out).map_err(|e| DgeError::io(out, e))?;
    let cfg_path = out.join("config.txt");
    fs::write(&cfg_path, cfg.to_text()).map_err(|e| DgeError::io(&cfg_path, e))?;

    let root = RngStream::new(cfg.seed, 0);
    let mut model = VitModel::<T>::new(cfg.model.clone(), &mut root.fork(1))?;
    let mut shuffle = root.fork(2);
    let mut gumbel = root.fork(3);
    let (costs, _) = model_costs(model.config(), model.partition());
    let mut opt = AdamW::new(cfg.optim, model.params());
    let mut log = MetricsLog::create(out.join("metrics.jsonl"))?;
    let started = Instant::now();
    let clock = |on: bool| on.then(|| started.elapsed().as_secs_f64());

    let best_stem = out.join("best");
    let final_stem = out.join("final");
    let mut best_acc = f64::NEG_INFINITY;
    let mut last_val = (0.0, 0.0);
    let mut validated_at = None;
    let mut epoch_reached = 0;
    let mut step = 0u64;
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let base_lr = cfg.optim.lr;
    let mut planned = (cfg.epochs * data.train.len().div_ceil(cfg.batch_size)) as u64;
    if cfg.max_steps > 0 {
        planned = planned.min(cfg.max_steps as u64);
    }
    'epochs: for epoch in 0..cfg.epochs {
        epoch_reached = epoch;
        shuffle.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps > 0 && step >= cfg.max_steps as u64 {
                break 'epochs;
            }
            if cfg.cosine {
                opt.config.lr = cosine_lr(base_lr, step, planned);
            }
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &data.train[i]).collect();
            let stats = batch_step(&mut model, &costs, &batch, &mut gumbel)
                .and_then(|s| opt.step(model.params_mut()).map(|_| s));
            let stats = match stats {
                Ok(s) => s,
                Err(e) => {
                    let path = model.save(&out.join("last_good"))?;
                    log::error!("step {step}: {e}; last good parameters saved to {}", path.display());
                    return Err(e);
                }
            };
            step += 1;
            log.push(&MetricsRecord {
                step,
                epoch,
                split: "train".into(),
                task_loss: stats.task,
                budget_loss: stats.budget,
                beta: stats.beta,
                accuracy: stats.correct as f64 / batch.len() as f64,
                psi: stats.psi,
                wall_clock: clock(cfg.log_wall_clock),
            })?;
        }
        last_val = validate_epoch(&model, data, &mut log, step, epoch, clock(cfg.log_wall_clock))?;
        validated_at = Some(step);
        if last_val.0 > best_acc {
            best_acc = last_val.0;
            model.save(&best_stem)?;
        }
    }
    if validated_at != Some(step) {
        last_val = validate_epoch(&model, data, &mut log, step, epoch_reached, clock(cfg.log_wall_clock))?;
        if last_val.0 > best_acc {
            best_acc = last_val.0;
            model.save(&best_stem)?;
        }
    }
    let final_checkpoint = model.save(&final_stem)?;
    Ok(TrainOutcome {
        steps: step,
        final_checkpoint,
        best_checkpoint: best_stem.with_extension("json"),
        best_val_accuracy: best_acc,
        final_val_accuracy: last_val.0,
        final_val_beta: last_val.1,
        metrics: log.path.clone(),
    })
}

/// Learning rate at `step` of `total` under cosine decay to zero.
pub fn cosine_lr(base: f64, step: u64, total: u64) -> f64 {
    if total == 0 {
        return base;
    }
    let t = step.min(total) as f64 / total as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
}

fn validate_epoch<T: Element>(
    model: &VitModel<T>,
    data: &Dataset,
    log: &mut MetricsLog,
    step: u64,
    epoch: usize,
    wall_clock: Option<f64>,
) -> Result<(f64, f64)> {
    let samples = if data.val.is_empty() { &data.train } else { &data.val };
    let report = evaluate(model, samples)?;
    log.push(&MetricsRecord {
        step,
        epoch,
        split: "val".into(),
        task_loss: report.loss,
        budget_loss: 0.0,
        beta: report.beta,
        accuracy: report.accuracy,
        psi: report.psi.clone(),
        wall_clock,
    })?;
    log::info!(
        "epoch {epoch} step {step}: val accuracy {:.4}, β {:.4}",
        report.accuracy,
        report.beta
    );
    Ok((report.accuracy, report.beta))
}

/// Parses a metrics stream written by [`train`].
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path).map_err(|e| DgeError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(DgeError::from))
        .collect()
}
