//! Dynamic grained router: region partitioning, gating, Gumbel-max
//! selection with straight-through gradients, and query pooling.

mod export;
mod gating;
mod partition;
mod pooling;

pub use export::{export_decision, LayerDecisionExport, RegionExport};
pub use gating::{
    decide_inference, gating_logits, select_inference, select_training, select_with_noise, GatingDecision,
    SoftScores,
};
pub use partition::{partition, GranularitySet, Rect, RegionPartition};
pub use pooling::{pool_queries, query_origins, ste_scale, unpool_restore, QueryOrigin, SparseQuerySet};
