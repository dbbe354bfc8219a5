use serde::{Deserialize, Serialize};

use crate::encoder::{LayerInputHook, Routing, VitModel};
use crate::error::{DgeError, Result};
use crate::harness::Sample;
use crate::tensor::{Element, Graph, Tensor};

pub const HISTOGRAM_BINS: usize = 50;

/// Pearson correlation of two equally long vectors.
///
/// Two constant vectors correlate at 1; a constant against a varying one
/// at 0.
pub fn pcc(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(DgeError::Dimension {
            op: "pcc",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    if a.len() < 2 {
        return Err(DgeError::Usage(format!("pcc needs at least two channels, got {}", a.len())));
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    Ok(match (saa == 0.0, sbb == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => (sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub bin_low: f64,
    pub bin_high: f64,
    pub count: u64,
}

/// Uniform histogram over [-1, 1].
pub fn pcc_histogram(values: &[f64]) -> Vec<HistogramBin> {
    let width = 2.0 / HISTOGRAM_BINS as f64;
    let mut counts = vec![0u64; HISTOGRAM_BINS];
    for &v in values {
        let i = (((v + 1.0) / width).floor().max(0.0) as usize).min(HISTOGRAM_BINS - 1);
        counts[i] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, count)| HistogramBin {
            bin_low: -1.0 + i as f64 * width,
            bin_high: -1.0 + (i + 1) as f64 * width,
            count,
        })
        .collect()
}

/// PCC of every token in each full 2×2 tile against the tile average,
/// together with that average. Odd trailing rows/columns are dropped.
pub fn tile_pcc<T: Element>(spatial: &Tensor<T>, height: usize, width: usize) -> Result<Vec<TileStats>> {
    let (rows, c) = spatial.dims2()?;
    if rows != height * width {
        return Err(DgeError::Dimension {
            op: "tile_pcc",
            lhs: vec![rows, c],
            rhs: vec![height * width, c],
        });
    }
    let mut tiles = Vec::with_capacity(height / 2 * (width / 2));
    for ty in 0..height / 2 {
        for tx in 0..width / 2 {
            let members = [
                2 * ty * width + 2 * tx,
                2 * ty * width + 2 * tx + 1,
                (2 * ty + 1) * width + 2 * tx,
                (2 * ty + 1) * width + 2 * tx + 1,
            ];
            let rows: Vec<Vec<f64>> = members
                .iter()
                .map(|&m| spatial.row(m).iter().map(|v| v.as_f64()).collect())
                .collect();
            let mean: Vec<f64> = (0..c).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / 4.0).collect();
            let mut pccs = [0.0; 4];
            for (p, r) in pccs.iter_mut().zip(&rows) {
                *p = pcc(r, &mean)?;
            }
            tiles.push(TileStats { members, pccs, mean });
        }
    }
    Ok(tiles)
}

#[derive(Debug, Clone)]
pub struct TileStats {
    pub members: [usize; 4],
    pub pccs: [f64; 4],
    pub mean: Vec<f64>,
}

/// Layer-input hook that records tile PCCs and, given a threshold, swaps
/// every token with `pcc ≥ threshold` for its tile average.
pub struct PatchProbe {
    threshold: Option<f64>,
    pub per_layer: Vec<Vec<f64>>,
    pub replaced: usize,
    pub tokens: usize,
    pub queries: usize,
    warned: bool,
}

impl PatchProbe {
    pub fn recorder(layers: usize) -> Self {
        Self {
            threshold: None,
            per_layer: vec![Vec::new(); layers],
            replaced: 0,
            tokens: 0,
            queries: 0,
            warned: false,
        }
    }

    pub fn replacer(layers: usize, threshold: f64) -> Self {
        Self {
            threshold: Some(threshold),
            ..Self::recorder(layers)
        }
    }
}

impl<T: Element> LayerInputHook<T> for PatchProbe {
    fn visit(&mut self, layer: usize, spatial: &Tensor<T>, height: usize, width: usize) -> Result<Option<Tensor<T>>> {
        if (height % 2 == 1 || width % 2 == 1) && !self.warned {
            log::warn!("{height}×{width} token grid is not 2×2 tileable; trailing row/column ignored");
            self.warned = true;
        }
        let tiles = tile_pcc(spatial, height, width)?;
        self.tokens += height * width;
        let Some(threshold) = self.threshold else {
            self.per_layer[layer].extend(tiles.iter().flat_map(|t| t.pccs));
            self.queries += height * width;
            return Ok(None);
        };
        let tiled = tiles.len() * 4;
        let mut out = spatial.clone();
        let c = spatial.shape()[1];
        let mut queries = height * width - tiled;
        let mut layer_hits = 0;
        for t in &tiles {
            let mut hit = 0;
            for (&m, &p) in t.members.iter().zip(&t.pccs) {
                if p >= threshold {
                    hit += 1;
                    for (dst, &v) in out.data_mut()[m * c..(m + 1) * c].iter_mut().zip(&t.mean) {
                        *dst = T::from_f64(v);
                    }
                }
            }
            queries += 4 - hit + usize::from(hit > 0);
            layer_hits += hit;
        }
        self.replaced += layer_hits;
        self.queries += queries;
        Ok((layer_hits > 0).then_some(out))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRedundancy {
    pub layer: usize,
    pub histogram: Vec<HistogramBin>,
    pub count: usize,
    pub mean: f64,
    pub variance: f64,
    /// Share of PCC values above 0.8.
    pub above_0_8: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub threshold: f64,
    pub replaced_frac: f64,
    pub complexity_ratio: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RedundancyProfile {
    pub layers: Vec<LayerRedundancy>,
    /// Mean PCC of each image over all layers.
    pub image_means: Vec<f64>,
    /// Share of all PCC values above 0.8.
    pub above_0_8: f64,
    #[serde(default)]
    pub sweep: Vec<SweepPoint>,
}

fn finest_routing<T: Element>(model: &VitModel<T>) -> Vec<Vec<usize>> {
    let part = model.partition();
    let finest = part.granularities().finest_index();
    vec![vec![finest; part.num_regions()]; model.config().encoder.layers]
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Runs `model` at full resolution with `hook` and returns the predicted class.
fn probe_forward<T: Element>(
    model: &VitModel<T>,
    sample: &Sample,
    routing: &[Vec<usize>],
    hook: &mut PatchProbe,
) -> Result<usize> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let image = sample.image::<T>(model.config().image_size);
    let out = model.forward(&mut g, &bound, &image, Routing::Forced(routing), Some(hook))?;
    Ok(argmax(&g.value(out.logits).to_f64_vec()))
}

/// PCC statistics of 2×2 tiles at every layer input (class token excluded).
pub fn redundancy_profile<T: Element>(model: &VitModel<T>, samples: &[Sample]) -> Result<RedundancyProfile> {
    let layers = model.config().encoder.layers;
    let routing = finest_routing(model);
    let mut all: Vec<Vec<f64>> = vec![Vec::new(); layers];
    let mut image_means = Vec::with_capacity(samples.len());
    for s in samples {
        let mut probe = PatchProbe::recorder(layers);
        probe_forward(model, s, &routing, &mut probe)?;
        let flat: Vec<f64> = probe.per_layer.iter().flatten().copied().collect();
        image_means.push(flat.iter().sum::<f64>() / flat.len().max(1) as f64);
        for (dst, src) in all.iter_mut().zip(probe.per_layer) {
            dst.extend(src);
        }
    }
    let share = |v: &[f64]| v.iter().filter(|&&p| p > 0.8).count() as f64 / v.len().max(1) as f64;
    let layer_stats = all
        .iter()
        .enumerate()
        .map(|(layer, v)| {
            let n = v.len().max(1) as f64;
            let mean = v.iter().sum::<f64>() / n;
            let variance = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            LayerRedundancy {
                layer,
                histogram: pcc_histogram(v),
                count: v.len(),
                mean,
                variance,
                above_0_8: share(v),
            }
        })
        .collect();
    let flat: Vec<f64> = all.into_iter().flatten().collect();
    Ok(RedundancyProfile {
        layers: layer_stats,
        image_means,
        above_0_8: share(&flat),
        sweep: Vec::new(),
    })
}

/// Accuracy and induced compute when tokens above each PCC threshold are
/// replaced by their tile average at every layer input of one forward pass.
pub fn threshold_sweep<T: Element>(
    model: &VitModel<T>,
    samples: &[Sample],
    thresholds: &[f64],
) -> Result<Vec<SweepPoint>> {
    if samples.is_empty() {
        return Err(DgeError::Usage("threshold sweep over an empty sample set".into()));
    }
    let layers = model.config().encoder.layers;
    let routing = finest_routing(model);
    let mut points = Vec::with_capacity(thresholds.len());
    for &threshold in thresholds {
        let (mut correct, mut replaced, mut tokens, mut queries) = (0, 0, 0, 0);
        for s in samples {
            let mut probe = PatchProbe::replacer(layers, threshold);
            if probe_forward(model, s, &routing, &mut probe)? == s.label {
                correct += 1;
            }
            replaced += probe.replaced;
            tokens += probe.tokens;
            queries += probe.queries;
        }
        points.push(SweepPoint {
            threshold,
            replaced_frac: replaced as f64 / tokens as f64,
            complexity_ratio: queries as f64 / tokens as f64,
            accuracy: correct as f64 / samples.len() as f64,
        });
    }
    Ok(points)
}
