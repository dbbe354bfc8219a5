use super::layers::{vanilla_encoder, BlockParams};
use crate::error::{DgeError, Result};
use crate::router::{
    decide_inference, gating_logits, pool_queries, select_training, select_with_noise, ste_scale, unpool_restore,
    GatingDecision, RegionPartition, SparseQuerySet,
};
use crate::tensor::{Element, Graph, RngStream, Tensor, Var};

/// Token sequence laid out as `[extra tokens; H·W spatial tokens]`.
#[derive(Debug, Clone, Copy)]
pub struct FeatureMap {
    pub tokens: Var,
    pub height: usize,
    pub width: usize,
    pub extra: usize,
}

impl FeatureMap {
    pub fn spatial_len(&self) -> usize {
        self.height * self.width
    }

    pub fn check<T: Element>(&self, g: &Graph<T>, channels: usize) -> Result<()> {
        let want = [self.extra + self.spatial_len(), channels];
        if g.shape(self.tokens) != want {
            return Err(DgeError::Dimension {
                op: "feature_map",
                lhs: g.shape(self.tokens).to_vec(),
                rhs: want.to_vec(),
            });
        }
        Ok(())
    }

    pub fn spatial<T: Element>(&self, g: &mut Graph<T>) -> Result<Var> {
        if self.extra == 0 {
            Ok(self.tokens)
        } else {
            g.slice_rows(self.tokens, self.extra, self.spatial_len())
        }
    }

    pub fn extras<T: Element>(&self, g: &mut Graph<T>) -> Result<Option<Var>> {
        if self.extra == 0 {
            Ok(None)
        } else {
            g.slice_rows(self.tokens, 0, self.extra).map(Some)
        }
    }
}

/// How a block picks its granularities.
pub enum Selection<'a, T> {
    /// Per-region argmax of the logits.
    Infer,
    /// Fresh Gumbel noise and straight-through gradients.
    Train { rng: &'a mut RngStream, tau: f64 },
    /// Training path with the given noise (R×K).
    Noise { noise: Tensor<T>, tau: f64 },
    /// Fixed candidate indices, no gradient to the gate.
    Forced(Vec<usize>),
}

#[derive(Debug, Clone)]
pub struct DgeLayerOutput<T> {
    pub y: FeatureMap,
    pub decision: GatingDecision<T>,
    pub queries: SparseQuerySet,
    /// Realized query count.
    pub psi: usize,
}

/// Routed encoder layer: pooled queries, dense keys and values, un-pooling
/// and an outer residual on the spatial tokens.
pub fn dge_block<T: Element>(
    g: &mut Graph<T>,
    x: FeatureMap,
    p: &BlockParams<Var>,
    heads: usize,
    part: &RegionPartition,
    selection: Selection<'_, T>,
) -> Result<DgeLayerOutput<T>> {
    if part.height() != x.height || part.width() != x.width {
        return Err(DgeError::Dimension {
            op: "dge_block",
            lhs: vec![x.height, x.width],
            rhs: vec![part.height(), part.width()],
        });
    }
    x.check(g, part.channels())?;
    let spatial = x.spatial(g)?;
    let extras = x.extras(g)?;

    let logits = gating_logits(g, spatial, part, p.gate.weight, p.gate.bias)?;
    let decision = match selection {
        Selection::Infer => decide_inference(g.value(logits).clone())?,
        Selection::Train { rng, tau } => select_training(g, logits, rng, tau)?,
        Selection::Noise { noise, tau } => select_with_noise(g, logits, noise, tau)?,
        Selection::Forced(theta) => GatingDecision::forced(g.value(logits).clone(), theta)?,
    };
    let queries = pool_queries(g, spatial, part, &decision.theta)?;
    let psi = queries.len();

    let seq: Vec<Var> = extras.into_iter().chain(queries.queries).collect();
    if seq.is_empty() {
        return Ok(DgeLayerOutput {
            y: x,
            decision,
            queries,
            psi,
        });
    }
    let q = if seq.len() == 1 { seq[0] } else { g.concat_rows(&seq)? };
    let out = vanilla_encoder(g, q, x.tokens, p, heads)?;

    let spatial_out = if psi == 0 {
        spatial
    } else {
        let mut yhat = if x.extra == 0 { out } else { g.slice_rows(out, x.extra, psi)? };
        if decision.is_training() {
            yhat = ste_scale(g, yhat, &decision, &queries)?;
        }
        let restored = unpool_restore(g, yhat, &queries, part)?;
        g.add(restored, spatial)?
    };
    let tokens = if x.extra == 0 {
        spatial_out
    } else {
        let extra_out = g.slice_rows(out, 0, x.extra)?;
        g.concat_rows(&[extra_out, spatial_out])?
    };
    Ok(DgeLayerOutput {
        y: FeatureMap { tokens, ..x },
        decision,
        queries,
        psi,
    })
}
