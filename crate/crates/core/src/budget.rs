//! Compute accounting: the realized complexity ratio β, its
//! straight-through relaxation, the budget loss and FLOPs reports.
//!
//! FLOPs are counted as two per multiply-accumulate. Per-query (dynamic)
//! cost covers the query projection, attention scores, the weighted sum of
//! values, the output projection and the feed-forward network. Everything
//! else that multiplies (key/value projections, the gate, pooling,
//! un-pooling, extra-token queries, patch embedding and head) is static.

use serde::{Deserialize, Serialize};

use crate::encoder::{DgeLayerOutput, ModelConfig};
use crate::error::{DgeError, Result};
use crate::router::{GatingDecision, RegionPartition};
use crate::tensor::{cast, Element, Graph, Tensor, Var};

/// Cost model of one encoder layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    /// FLOPs spent per pooled query.
    pub per_query: f64,
    pub height: usize,
    pub width: usize,
    /// Routing-independent static FLOPs.
    pub fixed: f64,
    /// Static FLOPs per token that is pooled and un-pooled.
    pub per_routed_token: f64,
}

impl LayerCost {
    /// Cost of a pre-norm block with `extra` bypass tokens and a gate over
    /// `candidates` granularities on `regions` regions.
    pub fn of_block(
        channels: usize,
        hidden: usize,
        height: usize,
        width: usize,
        extra: usize,
        regions: usize,
        candidates: usize,
    ) -> Self {
        let c = channels as f64;
        let hw = (height * width) as f64;
        let keys = hw + extra as f64;
        let per_query_macs = 2.0 * c * c + 2.0 * keys * c + 2.0 * c * hidden as f64;
        let kv_macs = 2.0 * keys * c * c;
        let gate_macs = hw * c + regions as f64 * c * candidates as f64;
        let extra_macs = extra as f64 * per_query_macs;
        Self {
            per_query: 2.0 * per_query_macs,
            height,
            width,
            fixed: 2.0 * (kv_macs + gate_macs + extra_macs),
            per_routed_token: 2.0 * 2.0 * c,
        }
    }

    pub fn dense_queries(&self) -> usize {
        self.height * self.width
    }
}

/// Per-layer costs of a classifier plus its embedding-and-head static cost.
pub fn model_costs(config: &ModelConfig, part: &RegionPartition) -> (Vec<LayerCost>, f64) {
    let enc = &config.encoder;
    let grid = config.grid();
    let layer = LayerCost::of_block(
        enc.channels,
        enc.hidden(),
        grid,
        grid,
        config.extra_tokens(),
        part.num_regions(),
        part.granularities().k(),
    );
    let embed = config.tokens() * config.patch_dim() * enc.channels;
    let head = enc.channels * config.num_classes;
    (vec![layer; enc.layers], 2.0 * (embed + head) as f64)
}

/// Realized query count of a routing.
pub fn query_count(theta: &[usize], part: &RegionPartition) -> usize {
    part.query_count(theta)
}

/// Tokens that go through pooling (those of regions not skipped).
pub fn routed_tokens(theta: &[usize], part: &RegionPartition) -> usize {
    theta
        .iter()
        .enumerate()
        .filter(|(r, &k)| part.patch_count(k, *r) > 0)
        .map(|(r, _)| part.region_tokens(r).len())
        .sum()
}

/// β from per-layer costs and realized query counts.
pub fn ratio_value(costs: &[LayerCost], psis: &[usize]) -> Result<f64> {
    if costs.is_empty() || costs.len() != psis.len() {
        return Err(DgeError::Usage(format!(
            "{} layer costs for {} query counts",
            costs.len(),
            psis.len()
        )));
    }
    let used: f64 = costs.iter().zip(psis).map(|(c, &p)| c.per_query * p as f64).sum();
    let dense: f64 = costs.iter().map(|c| c.per_query * c.dense_queries() as f64).sum();
    Ok(used / dense)
}

/// β as a graph scalar: forward is the realized ratio; when the decisions
/// carry soft scores the backward follows `Σ_l C^l Σ_i p_i N_i / Σ_l C^l H W`.
pub fn complexity_ratio<T: Element>(
    g: &mut Graph<T>,
    layers: &[(&LayerCost, &GatingDecision<T>)],
    part: &RegionPartition,
) -> Result<Var> {
    if layers.is_empty() {
        return Err(DgeError::Usage("complexity ratio needs at least one layer".into()));
    }
    let costs: Vec<LayerCost> = layers.iter().map(|(c, _)| (*c).clone()).collect();
    let psis: Vec<usize> = layers.iter().map(|(_, d)| part.query_count(&d.theta)).collect();
    let hard = ratio_value(&costs, &psis)?;
    let dense: f64 = costs.iter().map(|c| c.per_query * c.dense_queries() as f64).sum();

    let mut soft: Option<Var> = None;
    for (cost, decision) in layers {
        let Some(scores) = &decision.soft else { continue };
        let weights: Vec<T> = decision
            .theta
            .iter()
            .enumerate()
            .map(|(r, &k)| cast::<T>(cost.per_query * part.patch_count(k, r) as f64 / dense))
            .collect();
        let w = g.leaf(Tensor::new([weights.len()], weights)?);
        let term = g.mul(scores.var, w)?;
        let term = g.sum(term);
        soft = Some(match soft {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
    }
    let hard = Tensor::scalar(cast::<T>(hard));
    match soft {
        Some(s) => g.straight_through(s, hard),
        None => Ok(g.leaf(hard)),
    }
}

/// Average of per-item ratios.
pub fn batch_mean<T: Element>(g: &mut Graph<T>, betas: &[Var]) -> Result<Var> {
    let (&first, rest) = betas
        .split_first()
        .ok_or_else(|| DgeError::Usage("batch mean of nothing".into()))?;
    let mut acc = first;
    for &b in rest {
        acc = g.add(acc, b)?;
    }
    Ok(g.scale(acc, cast::<T>(1.0 / betas.len() as f64)))
}

/// `λ (β − γ)²`.
pub fn budget_loss<T: Element>(g: &mut Graph<T>, beta: Var, gamma: f64, lambda: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(DgeError::Config(format!("budget {gamma} outside [0, 1]")));
    }
    let d = g.add_scalar(beta, cast::<T>(-gamma));
    let sq = g.mul(d, d)?;
    Ok(g.scale(sq, cast::<T>(lambda)))
}

pub fn total_loss<T: Element>(g: &mut Graph<T>, task: Var, budget: Var) -> Result<Var> {
    g.add(task, budget)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerBudget {
    pub layer: usize,
    pub psi: usize,
    /// `Σ_i p_i N_i`, present for training-mode decisions.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub soft_psi: Option<f64>,
    pub dense_queries: usize,
    pub per_query_flops: f64,
    pub dynamic_flops: f64,
    pub static_flops: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub layers: Vec<LayerBudget>,
    pub beta: f64,
    pub dynamic_flops: f64,
    pub static_flops: f64,
    pub total_flops: f64,
}

/// Closed-form FLOPs of one routed forward pass.
pub fn flops_report<T: Element>(
    config: &ModelConfig,
    part: &RegionPartition,
    trace: &[DgeLayerOutput<T>],
) -> Result<BudgetReport> {
    let (costs, outer) = model_costs(config, part);
    if trace.len() != costs.len() {
        return Err(DgeError::Usage(format!(
            "trace has {} layers, model has {}",
            trace.len(),
            costs.len()
        )));
    }
    let mut layers = Vec::with_capacity(trace.len());
    for (l, (cost, out)) in costs.iter().zip(trace).enumerate() {
        let theta = &out.decision.theta;
        let psi = query_count(theta, part);
        if psi != out.psi {
            return Err(DgeError::Invariant(format!(
                "layer {l}: recorded ψ {} differs from recount {psi}",
                out.psi
            )));
        }
        let soft_psi = out.decision.soft.as_ref().map(|s| {
            s.values
                .iter()
                .zip(theta.iter().enumerate())
                .map(|(p, (r, &k))| p.as_f64() * part.patch_count(k, r) as f64)
                .sum()
        });
        layers.push(LayerBudget {
            layer: l,
            psi,
            soft_psi,
            dense_queries: cost.dense_queries(),
            per_query_flops: cost.per_query,
            dynamic_flops: cost.per_query * psi as f64,
            static_flops: cost.fixed + cost.per_routed_token * routed_tokens(theta, part) as f64,
        });
    }
    let psis: Vec<usize> = layers.iter().map(|l| l.psi).collect();
    let beta = ratio_value(&costs, &psis)?;
    let dynamic_flops = layers.iter().map(|l| l.dynamic_flops).sum::<f64>();
    let static_flops = outer + layers.iter().map(|l| l.static_flops).sum::<f64>();
    Ok(BudgetReport {
        layers,
        beta,
        dynamic_flops,
        static_flops,
        total_flops: dynamic_flops + static_flops,
    })
}
