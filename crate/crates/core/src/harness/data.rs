use serde::{Deserialize, Serialize};

use crate::error::{DgeError, Result};
use crate::router::Rect;
use crate::tensor::{Element, RngStream, Tensor};

pub const GLYPH_NAMES: [&str; 8] = [
    "horizontal_bar",
    "vertical_bar",
    "diagonal",
    "anti_diagonal",
    "plus",
    "cross",
    "box",
    "block",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub image_size: usize,
    pub classes: usize,
    /// Mean intensity of background pixels.
    #[serde(default)]
    pub background: f64,
    /// Standard deviation of the background noise.
    pub noise: f64,
    /// Side of the square window holding the glyph.
    pub window: usize,
    /// Amplitude added to glyph pixels.
    pub amplitude: f64,
    pub train: usize,
    pub val: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            image_size: 32,
            classes: 4,
            background: 0.5,
            noise: 0.1,
            window: 12,
            amplitude: 1.0,
            train: 2048,
            val: 512,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.window > self.image_size {
            return Err(DgeError::Config(format!(
                "signal window {} does not fit a {}-pixel image",
                self.window, self.image_size
            )));
        }
        if self.classes < 2 || self.classes > GLYPH_NAMES.len() {
            return Err(DgeError::Config(format!(
                "{} classes requested; between 2 and {} glyphs exist",
                self.classes,
                GLYPH_NAMES.len()
            )));
        }
        if !self.background.is_finite() {
            return Err(DgeError::Config(format!("background level {} must be finite", self.background)));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(DgeError::Config(format!("noise level {} must be finite and ≥ 0", self.noise)));
        }
        if self.train == 0 {
            return Err(DgeError::Config("training split is empty".into()));
        }
        Ok(())
    }
}

/// One grayscale image with its label and signal window (pixel rect).
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub pixels: Vec<f64>,
    pub label: usize,
    pub window: Rect,
}

impl Sample {
    /// `[1, size, size]` tensor.
    pub fn image<T: Element>(&self, size: usize) -> Tensor<T> {
        Tensor::new([1, size, size], self.pixels.iter().map(|&v| T::from_f64(v)).collect())
            .expect("sample holds size² pixels")
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

/// Whether glyph `class` covers cell `(y, x)` of a `w`-wide window.
pub fn glyph_mask(class: usize, w: usize, y: usize, x: usize) -> bool {
    let t = (w / 6).max(1);
    let lo = (w - t) / 2;
    let hbar = (lo..lo + t).contains(&y);
    let vbar = (lo..lo + t).contains(&x);
    let diag = y.abs_diff(x) < t;
    let anti = (y + x + 1).abs_diff(w) < t;
    match class {
        0 => hbar,
        1 => vbar,
        2 => diag,
        3 => anti,
        4 => hbar || vbar,
        5 => diag || anti,
        6 => y < t || x < t || y >= w - t || x >= w - t,
        7 => {
            let q = w / 4;
            (q..w - q).contains(&y) && (q..w - q).contains(&x)
        }
        _ => false,
    }
}

fn draw(spec: &DatasetSpec, label: usize, rng: &mut RngStream) -> Sample {
    let n = spec.image_size;
    let mut pixels: Vec<f64> = (0..n * n).map(|_| spec.background + rng.normal() * spec.noise).collect();
    let span = n - spec.window + 1;
    let (y0, x0) = (rng.below(span), rng.below(span));
    for y in 0..spec.window {
        for x in 0..spec.window {
            if glyph_mask(label, spec.window, y, x) {
                pixels[(y0 + y) * n + x0 + x] += spec.amplitude;
            }
        }
    }
    Sample {
        pixels,
        label,
        window: Rect {
            y0,
            x0,
            y1: y0 + spec.window,
            x1: x0 + spec.window,
        },
    }
}

fn split(spec: &DatasetSpec, count: usize, rng: &mut RngStream) -> Vec<Sample> {
    let mut labels: Vec<usize> = (0..count).map(|i| i % spec.classes).collect();
    rng.shuffle(&mut labels);
    labels.into_iter().map(|l| draw(spec, l, rng)).collect()
}

/// Deterministic train and validation splits with balanced labels.
pub fn make_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let root = RngStream::new(spec.seed, 0);
    let train = split(spec, spec.train, &mut root.fork(1));
    let val = split(spec, spec.val, &mut root.fork(2));
    Ok(Dataset {
        spec: spec.clone(),
        train,
        val,
    })
}

pub fn class_histogram(samples: &[Sample], classes: usize) -> Vec<usize> {
    let mut h = vec![0; classes];
    for s in samples {
        h[s.label] += 1;
    }
    h
}
