use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::budget::flops_report;
use crate::encoder::VitModel;
use crate::error::{DgeError, Result};
use crate::harness::Sample;
use crate::router::{export_decision, LayerDecisionExport, Rect, RegionPartition};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LegendEntry {
    pub value: usize,
    pub granularity: usize,
}

/// JSON written next to each heat-map image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapSidecar {
    pub image: String,
    pub pgm: String,
    pub legend: Vec<LegendEntry>,
    pub psi: usize,
    pub decision: LayerDecisionExport,
}

#[derive(Debug, Clone)]
pub struct HeatmapFiles {
    pub image: String,
    pub layer: usize,
    pub pgm: PathBuf,
    pub sidecar: PathBuf,
    pub psi: usize,
}

/// Plain PGM: one gray value per region, equal to the 0-based candidate index.
pub fn render_pgm(theta: &[usize], rows: usize, cols: usize, max_value: usize) -> String {
    let mut s = format!("P2\n{cols} {rows}\n{}\n", max_value.max(1));
    for r in 0..rows {
        let line: Vec<String> = theta[r * cols..(r + 1) * cols].iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "{}", line.join(" "));
    }
    s
}

/// Parses a plain PGM into `(width, height, max value, values)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, usize, Vec<usize>)> {
    let text = fs::read_to_string(path).map_err(|e| DgeError::io(path, e))?;
    let mut words = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(str::split_whitespace);
    if words.next() != Some("P2") {
        return Err(DgeError::Usage(format!("{} is not a plain PGM", path.display())));
    }
    let mut num = || -> Result<usize> {
        let w = words
            .next()
            .ok_or_else(|| DgeError::Usage(format!("{} ends early", path.display())))?;
        w.parse()
            .map_err(|e| DgeError::Usage(format!("{}: bad number `{w}`: {e}", path.display())))
    };
    let (w, h, max) = (num()?, num()?, num()?);
    let values = (0..w * h).map(|_| num()).collect::<Result<Vec<_>>>()?;
    Ok((w, h, max, values))
}

/// Query count implied by a heat-map file.
pub fn psi_from_heatmap(path: &Path, part: &RegionPartition) -> Result<usize> {
    let (w, h, _, theta) = read_pgm(path)?;
    if (h, w) != part.grid() {
        return Err(DgeError::Dimension {
            op: "psi_from_heatmap",
            lhs: vec![h, w],
            rhs: vec![part.grid().0, part.grid().1],
        });
    }
    if theta.iter().any(|&t| t >= part.granularities().k()) {
        return Err(DgeError::Usage(format!("{} holds an unknown candidate index", path.display())));
    }
    Ok(part.query_count(&theta))
}

/// Writes one PGM and one JSON per image and layer under `out_dir`.
pub fn export_heatmaps<T: Element>(
    model: &VitModel<T>,
    images: &[(String, Tensor<T>)],
    out_dir: &Path,
) -> Result<Vec<HeatmapFiles>> {
    fs::create_dir_all(out_dir).map_err(|e| DgeError::io(out_dir, e))?;
    let part = model.partition();
    let set = part.granularities();
    let (rows, cols) = part.grid();
    let legend: Vec<LegendEntry> = set
        .phis()
        .iter()
        .enumerate()
        .map(|(value, &granularity)| LegendEntry { value, granularity })
        .collect();
    let mut files = Vec::new();
    for (name, image) in images {
        let (_, trace) = model.classify(image)?;
        let report = flops_report(model.config(), part, &trace)?;
        for (l, out) in trace.iter().enumerate() {
            let stem = format!("{name}_layer{l}");
            let pgm = out_dir.join(format!("{stem}.pgm"));
            let sidecar = out_dir.join(format!("{stem}.json"));
            let text = render_pgm(&out.decision.theta, rows, cols, set.k() - 1);
            fs::write(&pgm, text).map_err(|e| DgeError::io(&pgm, e))?;
            let meta = HeatmapSidecar {
                image: name.clone(),
                pgm: format!("{stem}.pgm"),
                legend: legend.clone(),
                psi: report.layers[l].psi,
                decision: export_decision(l, &out.decision, part, model.config().patch_size),
            };
            fs::write(&sidecar, serde_json::to_string_pretty(&meta)?).map_err(|e| DgeError::io(&sidecar, e))?;
            files.push(HeatmapFiles {
                image: name.clone(),
                layer: l,
                pgm,
                sidecar,
                psi: report.layers[l].psi,
            });
        }
    }
    Ok(files)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationReport {
    /// Share of regions overlapping the signal window routed at the finest granularity.
    pub inside: f64,
    /// Same share for regions away from the window.
    pub outside: f64,
    pub margin: f64,
    pub regions_inside: usize,
    pub regions_outside: usize,
}

/// Finest-granularity rates inside versus outside each sample's signal window.
pub fn localization<T: Element>(model: &VitModel<T>, samples: &[Sample]) -> Result<LocalizationReport> {
    let part = model.partition();
    let finest = part.granularities().finest_index();
    let stride = model.config().patch_size;
    let (mut fin_in, mut n_in, mut fin_out, mut n_out) = (0usize, 0usize, 0usize, 0usize);
    for s in samples {
        let (_, trace) = model.classify(&s.image::<T>(model.config().image_size))?;
        for out in &trace {
            for (r, &k) in out.decision.theta.iter().enumerate() {
                let rect: Rect = part.region_rect(r).scaled(stride);
                let hit = usize::from(k == finest);
                if rect.intersects(s.window) {
                    n_in += 1;
                    fin_in += hit;
                } else {
                    n_out += 1;
                    fin_out += hit;
                }
            }
        }
    }
    let rate = |a: usize, n: usize| if n == 0 { 0.0 } else { a as f64 / n as f64 };
    let (inside, outside) = (rate(fin_in, n_in), rate(fin_out, n_out));
    Ok(LocalizationReport {
        inside,
        outside,
        margin: inside - outside,
        regions_inside: n_in,
        regions_outside: n_out,
    })
}
