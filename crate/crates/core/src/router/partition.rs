use serde::{Deserialize, Serialize};

use crate::error::{DgeError, Result};
use crate::tensor::{Element, RowMix};

/// Candidate patch sizes and the region side length.
///
/// A leading `0` marks skip mode: choosing it drops the region from the
/// query sequence entirely.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GranularitySet {
    phis: Vec<usize>,
    region: usize,
}

impl GranularitySet {
    /// Region size defaults to the largest granularity.
    pub fn new(phis: Vec<usize>, region: Option<usize>) -> Result<Self> {
        if phis.is_empty() {
            return Err(DgeError::Config("granularity set is empty".into()));
        }
        if phis.windows(2).any(|w| w[0] >= w[1]) {
            return Err(DgeError::Config(format!(
                "granularities {phis:?} must be strictly increasing"
            )));
        }
        let max = *phis.last().unwrap();
        if max == 0 {
            return Err(DgeError::Config("granularity set needs a positive entry".into()));
        }
        let region = region.unwrap_or(max);
        if region < max {
            return Err(DgeError::Config(format!(
                "region size {region} is smaller than the largest granularity {max}"
            )));
        }
        Ok(Self { phis, region })
    }

    /// Parses a comma separated list such as `1,2,4`.
    pub fn parse_list(text: &str) -> Result<Vec<usize>> {
        text.split(',')
            .map(|s| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|e| DgeError::Config(format!("bad granularity `{s}`: {e}")))
            })
            .collect()
    }

    pub fn phis(&self) -> &[usize] {
        &self.phis
    }

    pub fn k(&self) -> usize {
        self.phis.len()
    }

    pub fn region(&self) -> usize {
        self.region
    }

    pub fn phi(&self, index: usize) -> usize {
        self.phis[index]
    }

    pub fn skip_mode(&self) -> bool {
        self.phis[0] == 0
    }

    /// Index of the smallest positive granularity.
    pub fn finest_index(&self) -> usize {
        usize::from(self.skip_mode())
    }

    pub fn coarsest_index(&self) -> usize {
        self.phis.len() - 1
    }

    pub fn index_of(&self, phi: usize) -> Option<usize> {
        self.phis.iter().position(|&p| p == phi)
    }
}

/// Half-open rectangle `[y0, y1) × [x0, x1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
}

impl Rect {
    pub fn scaled(self, s: usize) -> Rect {
        Rect {
            y0: self.y0 * s,
            x0: self.x0 * s,
            y1: self.y1 * s,
            x1: self.x1 * s,
        }
    }

    pub fn area(self) -> usize {
        (self.y1 - self.y0) * (self.x1 - self.x0)
    }

    pub fn intersects(self, other: Rect) -> bool {
        self.y0 < other.y1 && other.y0 < self.y1 && self.x0 < other.x1 && other.x0 < self.x1
    }
}

/// S×S window decomposition of an H×W token grid with bottom-right padding.
///
/// Token indices are row-major positions `y * W + x` in the unpadded grid;
/// padded positions never appear in any list.
#[derive(Debug, Clone)]
pub struct RegionPartition {
    height: usize,
    width: usize,
    channels: usize,
    set: GranularitySet,
    grid_rows: usize,
    grid_cols: usize,
    region_tokens: Vec<Vec<usize>>,
    // [granularity][region][patch] -> valid token indices
    patches: Vec<Vec<Vec<Vec<usize>>>>,
}

pub fn partition(height: usize, width: usize, channels: usize, set: &GranularitySet) -> Result<RegionPartition> {
    if height == 0 || width == 0 || channels == 0 {
        return Err(DgeError::Config(format!(
            "feature dims {height}×{width}×{channels} must be positive"
        )));
    }
    let s = set.region();
    let grid_rows = height.div_ceil(s);
    let grid_cols = width.div_ceil(s);
    let regions = grid_rows * grid_cols;

    let mut region_tokens = Vec::with_capacity(regions);
    for r in 0..regions {
        let (ry, rx) = (r / grid_cols * s, r % grid_cols * s);
        let mut toks = Vec::new();
        for y in ry..(ry + s).min(height) {
            for x in rx..(rx + s).min(width) {
                toks.push(y * width + x);
            }
        }
        region_tokens.push(toks);
    }

    let mut patches = Vec::with_capacity(set.k());
    for &phi in set.phis() {
        let mut per_region = Vec::with_capacity(regions);
        for r in 0..regions {
            let (ry, rx) = (r / grid_cols * s, r % grid_cols * s);
            let mut list = Vec::new();
            if phi > 0 {
                let side = s.div_ceil(phi);
                for py in 0..side {
                    for px in 0..side {
                        let y_lo = ry + py * phi;
                        let y_hi = (ry + ((py + 1) * phi).min(s)).min(height);
                        let x_lo = rx + px * phi;
                        let x_hi = (rx + ((px + 1) * phi).min(s)).min(width);
                        let mut toks = Vec::new();
                        for y in y_lo..y_hi {
                            for x in x_lo..x_hi {
                                toks.push(y * width + x);
                            }
                        }
                        if !toks.is_empty() {
                            list.push(toks);
                        }
                    }
                }
            }
            per_region.push(list);
        }
        patches.push(per_region);
    }

    Ok(RegionPartition {
        height,
        width,
        channels,
        set: set.clone(),
        grid_rows,
        grid_cols,
        region_tokens,
        patches,
    })
}

impl RegionPartition {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn tokens(&self) -> usize {
        self.height * self.width
    }

    pub fn granularities(&self) -> &GranularitySet {
        &self.set
    }

    pub fn region_size(&self) -> usize {
        self.set.region()
    }

    /// (rows, cols) of the region grid.
    pub fn grid(&self) -> (usize, usize) {
        (self.grid_rows, self.grid_cols)
    }

    pub fn num_regions(&self) -> usize {
        self.region_tokens.len()
    }

    pub fn region_tokens(&self, region: usize) -> &[usize] {
        &self.region_tokens[region]
    }

    /// Valid-token rectangle of a region in token coordinates.
    pub fn region_rect(&self, region: usize) -> Rect {
        let s = self.set.region();
        let y0 = region / self.grid_cols * s;
        let x0 = region % self.grid_cols * s;
        Rect {
            y0,
            x0,
            y1: (y0 + s).min(self.height),
            x1: (x0 + s).min(self.width),
        }
    }

    /// Whether padded grid position `(y, x)` holds a real token.
    pub fn is_valid(&self, y: usize, x: usize) -> bool {
        y < self.height && x < self.width
    }

    /// Patches of `region` at candidate index `k`, each a list of valid tokens.
    pub fn patches(&self, k: usize, region: usize) -> &[Vec<usize>] {
        &self.patches[k][region]
    }

    /// Number of patches with at least one valid token.
    pub fn patch_count(&self, k: usize, region: usize) -> usize {
        self.patches[k][region].len()
    }

    /// Realized query count for a routing `theta`.
    pub fn query_count(&self, theta: &[usize]) -> usize {
        theta.iter().enumerate().map(|(r, &k)| self.patch_count(k, r)).sum()
    }

    /// Row mix producing one mean token per region.
    pub fn region_mean_mix<T: Element>(&self) -> Result<RowMix<T>> {
        RowMix::mean_of(self.tokens(), &self.region_tokens)
    }
}
