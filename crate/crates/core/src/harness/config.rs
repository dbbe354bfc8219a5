use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::data::DatasetSpec;
use crate::encoder::ModelConfig;
use crate::error::{DgeError, Result};
use crate::router::GranularitySet;
use crate::tensor::{AdamWConfig, DType};

/// Everything a run depends on. The seed fixes data, initialization,
/// shuffling and Gumbel noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub dataset: DatasetSpec,
    pub optim: AdamWConfig,
    /// Cosine decay of the learning rate to zero over the run.
    pub cosine: bool,
    pub epochs: usize,
    pub batch_size: usize,
    /// Stop after this many optimizer steps; 0 means no limit.
    pub max_steps: usize,
    pub seed: u64,
    pub precision: DType,
    pub out: PathBuf,
    pub log_wall_clock: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            dataset: DatasetSpec::default(),
            optim: AdamWConfig::default(),
            cosine: true,
            epochs: 10,
            batch_size: 32,
            max_steps: 0,
            seed: 0,
            precision: DType::F32,
            out: PathBuf::from("runs/default"),
            log_wall_clock: true,
        }
    }
}

fn parse<V: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<V>
where
    V::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| DgeError::Config(format!("line {line}: `{key}` = `{value}`: {e}")))
}

impl RunConfig {
    /// Parses `key = value` lines grouped under `[section]` headers on top
    /// of the defaults. Blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let n = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| DgeError::Config(format!("line {n}: unterminated section header")))?;
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| DgeError::Config(format!("line {n}: expected `key = value`")))?;
            cfg.set(&section, key.trim(), value.trim(), n)?;
        }
        cfg.dataset.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| DgeError::io(path, e))?;
        Self::parse(&text)
    }

    fn set(&mut self, section: &str, key: &str, v: &str, n: usize) -> Result<()> {
        let m = &mut self.model;
        let e = &mut m.encoder;
        let d = &mut self.dataset;
        let o = &mut self.optim;
        match (section, key) {
            ("model", "image_size") => m.image_size = parse(key, v, n)?,
            ("model", "in_channels") => m.in_channels = parse(key, v, n)?,
            ("model", "patch_size") => m.patch_size = parse(key, v, n)?,
            ("model", "num_classes") => m.num_classes = parse(key, v, n)?,
            ("model", "channels") => e.channels = parse(key, v, n)?,
            ("model", "heads") => e.heads = parse(key, v, n)?,
            ("model", "ffn_ratio") => e.ffn_ratio = parse(key, v, n)?,
            ("model", "layers") => e.layers = parse(key, v, n)?,
            ("model", "granularities") => e.granularities = GranularitySet::parse_list(v)?,
            ("model", "region") => e.region = if v == "auto" { None } else { Some(parse(key, v, n)?) },
            ("budget", "gamma") => e.budget = parse(key, v, n)?,
            ("budget", "lambda") => e.lambda = parse(key, v, n)?,
            ("budget", "tau") => e.tau = parse(key, v, n)?,
            ("dataset", "background") => d.background = parse(key, v, n)?,
            ("dataset", "noise") => d.noise = parse(key, v, n)?,
            ("dataset", "window") => d.window = parse(key, v, n)?,
            ("dataset", "amplitude") => d.amplitude = parse(key, v, n)?,
            ("dataset", "train") => d.train = parse(key, v, n)?,
            ("dataset", "val") => d.val = parse(key, v, n)?,
            ("optim", "lr") => o.lr = parse(key, v, n)?,
            ("optim", "weight_decay") => o.weight_decay = parse(key, v, n)?,
            ("optim", "beta1") => o.beta1 = parse(key, v, n)?,
            ("optim", "beta2") => o.beta2 = parse(key, v, n)?,
            ("optim", "eps") => o.eps = parse(key, v, n)?,
            ("optim", "cosine") => self.cosine = parse(key, v, n)?,
            ("train", "epochs") => self.epochs = parse(key, v, n)?,
            ("train", "batch_size") => self.batch_size = parse(key, v, n)?,
            ("train", "max_steps") => self.max_steps = parse(key, v, n)?,
            ("train", "seed") => self.seed = parse(key, v, n)?,
            ("train", "precision") => self.precision = parse(key, v, n)?,
            ("train", "out") => self.out = PathBuf::from(v),
            ("train", "log_wall_clock") => self.log_wall_clock = parse(key, v, n)?,
            _ => {
                let full = if section.is_empty() { key.to_string() } else { format!("{section}.{key}") };
                return Err(DgeError::Config(format!("line {n}: unknown key `{full}`")));
            }
        }
        Ok(())
    }

    /// Re-derives dataset dims from the model and checks everything.
    pub fn validate(&mut self) -> Result<()> {
        self.dataset.image_size = self.model.image_size;
        self.dataset.classes = self.model.num_classes;
        self.dataset.seed = self.seed;
        self.model.validate()?;
        self.dataset.validate()?;
        if self.model.in_channels != 1 {
            return Err(DgeError::Config("the synthetic dataset is grayscale; in_channels must be 1".into()));
        }
        if self.batch_size == 0 {
            return Err(DgeError::Config("batch size must be positive".into()));
        }
        if !(self.optim.lr > 0.0) || !(self.optim.weight_decay >= 0.0) {
            return Err(DgeError::Config("learning rate must be positive and weight decay ≥ 0".into()));
        }
        Ok(())
    }

    /// The same configuration in the text format accepted by [`RunConfig::parse`].
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let e = &m.encoder;
        let d = &self.dataset;
        let o = &self.optim;
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let _ = writeln!(s, "[model]");
        let _ = writeln!(s, "image_size = {}", m.image_size);
        let _ = writeln!(s, "in_channels = {}", m.in_channels);
        let _ = writeln!(s, "patch_size = {}", m.patch_size);
        let _ = writeln!(s, "num_classes = {}", m.num_classes);
        let _ = writeln!(s, "channels = {}", e.channels);
        let _ = writeln!(s, "heads = {}", e.heads);
        let _ = writeln!(s, "ffn_ratio = {}", e.ffn_ratio);
        let _ = writeln!(s, "layers = {}", e.layers);
        let _ = writeln!(s, "granularities = {}", list(&e.granularities));
        let _ = writeln!(s, "region = {}", e.region.map_or("auto".to_string(), |r| r.to_string()));
        let _ = writeln!(s, "\n[budget]");
        let _ = writeln!(s, "gamma = {}", e.budget);
        let _ = writeln!(s, "lambda = {}", e.lambda);
        let _ = writeln!(s, "tau = {}", e.tau);
        let _ = writeln!(s, "\n[dataset]");
        let _ = writeln!(s, "background = {}", d.background);
        let _ = writeln!(s, "noise = {}", d.noise);
        let _ = writeln!(s, "window = {}", d.window);
        let _ = writeln!(s, "amplitude = {}", d.amplitude);
        let _ = writeln!(s, "train = {}", d.train);
        let _ = writeln!(s, "val = {}", d.val);
        let _ = writeln!(s, "\n[optim]");
        let _ = writeln!(s, "lr = {}", o.lr);
        let _ = writeln!(s, "weight_decay = {}", o.weight_decay);
        let _ = writeln!(s, "beta1 = {}", o.beta1);
        let _ = writeln!(s, "beta2 = {}", o.beta2);
        let _ = writeln!(s, "eps = {}", o.eps);
        let _ = writeln!(s, "cosine = {}", self.cosine);
        let _ = writeln!(s, "\n[train]");
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "max_steps = {}", self.max_steps);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "precision = {}", self.precision);
        let _ = writeln!(s, "out = {}", self.out.display());
        let _ = writeln!(s, "log_wall_clock = {}", self.log_wall_clock);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_override_defaults() {
        let cfg = RunConfig::parse(
            "# toy\n[model]\ngranularities = 1, 2\nregion = 4\n[budget]\ngamma = 0.25\n[train]\nseed = 7\nprecision = f64\n",
        )
        .unwrap();
        assert_eq!(cfg.model.encoder.granularities, vec![1, 2]);
        assert_eq!(cfg.model.encoder.region, Some(4));
        assert_eq!(cfg.model.encoder.budget, 0.25);
        assert_eq!(cfg.precision, DType::F64);
        assert_eq!(cfg.dataset.seed, 7);
        assert_eq!(cfg.epochs, 10);
    }

    #[test]
    fn unknown_keys_are_errors() {
        let err = RunConfig::parse("[model]\nchanels = 32\n").unwrap_err();
        assert!(err.to_string().contains("model.chanels"), "{err}");
        assert!(RunConfig::parse("[train]\nepochs\n").is_err());
        assert!(RunConfig::parse("[budget]\ngamma = 2\n").is_err());
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.model.encoder.granularities = vec![0, 1, 2, 4];
        cfg.model.encoder.region = Some(4);
        cfg.seed = 3;
        cfg.validate().unwrap();
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }
}
