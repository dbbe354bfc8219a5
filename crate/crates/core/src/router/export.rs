use serde::{Deserialize, Serialize};

use super::gating::GatingDecision;
use super::partition::{RegionPartition, Rect};
use crate::tensor::Element;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionExport {
    pub index: usize,
    /// Valid-token rectangle.
    pub tokens: Rect,
    /// Same rectangle in input pixels.
    pub pixels: Rect,
}

/// JSON form of one layer's gating decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDecisionExport {
    pub layer: usize,
    pub grid: [usize; 2],
    pub granularities: Vec<usize>,
    pub logits: Vec<Vec<f64>>,
    /// 0-based candidate index per region.
    pub theta: Vec<usize>,
    /// Selected patch side per region.
    pub granularity: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub p: Option<Vec<f64>>,
    pub regions: Vec<RegionExport>,
}

pub fn export_decision<T: Element>(
    layer: usize,
    decision: &GatingDecision<T>,
    part: &RegionPartition,
    pixel_stride: usize,
) -> LayerDecisionExport {
    let (rows, cols) = part.grid();
    let set = part.granularities();
    let logits = (0..decision.num_regions())
        .map(|r| decision.logits.row(r).iter().map(|v| v.as_f64()).collect())
        .collect();
    let regions = (0..part.num_regions())
        .map(|i| {
            let tokens = part.region_rect(i);
            RegionExport {
                index: i,
                tokens,
                pixels: tokens.scaled(pixel_stride),
            }
        })
        .collect();
    LayerDecisionExport {
        layer,
        grid: [rows, cols],
        granularities: set.phis().to_vec(),
        logits,
        theta: decision.theta.clone(),
        granularity: decision.theta.iter().map(|&k| set.phi(k)).collect(),
        p: decision
            .soft
            .as_ref()
            .map(|s| s.values.iter().map(|v| v.as_f64()).collect()),
        regions,
    }
}
