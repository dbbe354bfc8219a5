use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::data::Sample;
use crate::budget::{flops_report, BudgetReport};
use crate::encoder::{Routing, VitModel};
use crate::error::{DgeError, Result};
use crate::tensor::{Element, Graph};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub accuracy: f64,
    /// Mean cross-entropy.
    pub loss: f64,
    /// Mean inference β.
    pub beta: f64,
    /// Mean query count per layer.
    pub psi: Vec<f64>,
    pub dynamic_flops: f64,
    pub static_flops: f64,
    pub total_flops: f64,
}

fn log_softmax_at(logits: &[f64], label: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|v| (v - m).exp()).sum();
    logits[label] - m - z.ln()
}

pub(crate) fn predicted(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Per-image inference result with its FLOPs report.
pub fn infer_one<T: Element>(model: &VitModel<T>, sample: &Sample) -> Result<(Vec<f64>, BudgetReport)> {
    let (logits, trace) = model.classify(&sample.image::<T>(model.config().image_size))?;
    let report = flops_report(model.config(), model.partition(), &trace)?;
    Ok((logits.to_f64_vec(), report))
}

/// Deterministic inference over `samples`: accuracy, mean β and mean FLOPs.
pub fn evaluate<T: Element>(model: &VitModel<T>, samples: &[Sample]) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(DgeError::Usage("evaluation over an empty sample set".into()));
    }
    let layers = model.config().encoder.layers;
    let n = samples.len() as f64;
    let mut r = EvalReport {
        samples: samples.len(),
        accuracy: 0.0,
        loss: 0.0,
        beta: 0.0,
        psi: vec![0.0; layers],
        dynamic_flops: 0.0,
        static_flops: 0.0,
        total_flops: 0.0,
    };
    for s in samples {
        let (logits, report) = infer_one(model, s)?;
        if predicted(&logits) == s.label {
            r.accuracy += 1.0 / n;
        }
        r.loss -= log_softmax_at(&logits, s.label) / n;
        r.beta += report.beta / n;
        for (acc, l) in r.psi.iter_mut().zip(&report.layers) {
            *acc += l.psi as f64 / n;
        }
        r.dynamic_flops += report.dynamic_flops / n;
        r.static_flops += report.static_flops / n;
        r.total_flops += report.total_flops / n;
    }
    Ok(r)
}

pub fn evaluate_checkpoint<T: Element>(manifest: &Path, samples: &[Sample]) -> Result<EvalReport> {
    evaluate(&VitModel::<T>::load(manifest)?, samples)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub median_ms: f64,
    pub p95_ms: f64,
    pub runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub dense: LatencyStats,
    pub routed: LatencyStats,
    /// Routed over dense FLOPs, dynamic part only (the inference β).
    pub flops_ratio: f64,
    pub dense_total_flops: f64,
    pub routed_total_flops: f64,
}

fn latency(mut ms: Vec<f64>) -> LatencyStats {
    ms.sort_by(f64::total_cmp);
    let at = |q: f64| ms[((ms.len() - 1) as f64 * q).round() as usize];
    LatencyStats {
        median_ms: at(0.5),
        p95_ms: at(0.95),
        runs: ms.len(),
    }
}

/// Per-image wall-clock of routed inference against the same model forced
/// to its finest granularity everywhere.
pub fn bench<T: Element>(model: &VitModel<T>, samples: &[Sample], repetitions: usize) -> Result<BenchReport> {
    if samples.is_empty() || repetitions == 0 {
        return Err(DgeError::Usage("bench needs samples and at least one repetition".into()));
    }
    let part = model.partition();
    let finest = part.granularities().finest_index();
    let dense_theta = vec![vec![finest; part.num_regions()]; model.config().encoder.layers];
    let size = model.config().image_size;
    let (mut dense_ms, mut routed_ms) = (Vec::new(), Vec::new());
    let (mut dense_flops, mut routed_flops) = (0.0, 0.0);
    for _ in 0..repetitions {
        for s in samples {
            let image = s.image::<T>(size);
            let t0 = Instant::now();
            let mut g = Graph::new();
            let bound = model.bind(&mut g);
            let out = model.forward(&mut g, &bound, &image, Routing::Forced(&dense_theta), None)?;
            dense_ms.push(t0.elapsed().as_secs_f64() * 1e3);
            dense_flops = flops_report(model.config(), part, &out.layers)?.total_flops;

            let t0 = Instant::now();
            let (_, trace) = model.classify(&image)?;
            routed_ms.push(t0.elapsed().as_secs_f64() * 1e3);
            routed_flops += flops_report(model.config(), part, &trace)?.total_flops;
        }
    }
    let eval = evaluate(model, samples)?;
    Ok(BenchReport {
        dense: latency(dense_ms),
        routed: latency(routed_ms),
        flops_ratio: eval.beta,
        dense_total_flops: dense_flops,
        routed_total_flops: routed_flops / (repetitions * samples.len()) as f64,
    })
}
