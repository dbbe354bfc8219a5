//! Spatial redundancy probes and routing heat-maps.

mod csv_out;
mod heatmap;
mod redundancy;

pub use csv_out::{write_histogram_csv, write_sweep_csv};
pub use heatmap::{
    export_heatmaps, localization, psi_from_heatmap, read_pgm, render_pgm, HeatmapFiles, HeatmapSidecar, LegendEntry,
    LocalizationReport,
};
pub use redundancy::{
    pcc, pcc_histogram, redundancy_profile, threshold_sweep, tile_pcc, HistogramBin, LayerRedundancy, PatchProbe,
    RedundancyProfile, SweepPoint, TileStats, HISTOGRAM_BINS,
};
