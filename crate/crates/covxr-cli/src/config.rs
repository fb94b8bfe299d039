//! Run configuration: defaults, the flat key=value config file, and
//! command-line overrides, echoed to a snapshot file for reproducibility.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use covxr::{AugmentConfig, ModelSpec};

/// Effective settings for a run. Every field has a default; a config file
/// overrides defaults and explicit flags override the file.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub threshold: f64,
    pub train_fraction: f64,
    pub use_pretrained: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub augment: AugmentConfig,
    pub spec: ModelSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            threshold: 0.5,
            train_fraction: 0.8,
            use_pretrained: true,
            epochs: 10,
            batch_size: 64,
            learning_rate: 1e-4,
            augment: AugmentConfig::default(),
            spec: ModelSpec::default(),
        }
    }
}

impl RunConfig {
    /// Load defaults, then the optional config file, then flag overrides.
    pub fn resolve(
        config_path: Option<&Path>,
        seed: Option<u64>,
        threshold: Option<f64>,
    ) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = config_path {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("cannot read config file {}", path.display()))?;
            cfg.apply_file(&text)
                .with_context(|| format!("invalid config file {}", path.display()))?;
        }
        if let Some(seed) = seed {
            cfg.seed = seed;
        }
        if let Some(threshold) = threshold {
            cfg.threshold = threshold;
        }
        Ok(cfg)
    }

    fn apply_file(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                bail!("line {}: expected key=value, got {raw:?}", lineno + 1);
            };
            self.set(key.trim(), value.trim())
                .with_context(|| format!("line {}", lineno + 1))?;
        }
        Ok(())
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
        where
            T::Err: std::fmt::Display,
        {
            value
                .parse::<T>()
                .map_err(|e| anyhow::anyhow!("{key}: cannot parse {value:?}: {e}"))
        }
        match key {
            "seed" => self.seed = parse(key, value)?,
            "threshold" => self.threshold = parse(key, value)?,
            "augment.target_size" => self.augment.target_size = parse(key, value)?,
            "augment.zoom_max" => self.augment.zoom_max = parse(key, value)?,
            "augment.flip_probability" => self.augment.flip_probability = parse(key, value)?,
            "augment.channel_means" => {
                let parts: Vec<&str> = value.split(',').map(str::trim).collect();
                if parts.len() != 3 {
                    bail!("{key}: expected three comma-separated reals, got {value:?}");
                }
                for (i, p) in parts.iter().enumerate() {
                    self.augment.channel_means[i] = parse(key, p)?;
                }
            }
            "model.backbone_id" => self.spec.backbone_id = value.to_string(),
            "model.freeze_backbone" => self.spec.freeze_backbone = parse(key, value)?,
            "model.head_width" => self.spec.head_width = parse(key, value)?,
            "model.dropout_rate" => self.spec.dropout_rate = parse(key, value)?,
            "model.input_size" => self.spec.input_size = parse(key, value)?,
            "model.use_pretrained" => self.use_pretrained = parse(key, value)?,
            "train.epochs" => self.epochs = parse(key, value)?,
            "train.batch_size" => self.batch_size = parse(key, value)?,
            "train.learning_rate" => self.learning_rate = parse(key, value)?,
            "train.train_fraction" => self.train_fraction = parse(key, value)?,
            other => bail!("unknown config key {other:?}"),
        }
        Ok(())
    }

    /// The effective configuration in config-file syntax, keys sorted.
    pub fn snapshot(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "augment.channel_means={},{},{}",
            self.augment.channel_means[0], self.augment.channel_means[1], self.augment.channel_means[2]);
        let _ = writeln!(s, "augment.flip_probability={}", self.augment.flip_probability);
        let _ = writeln!(s, "augment.target_size={}", self.augment.target_size);
        let _ = writeln!(s, "augment.zoom_max={}", self.augment.zoom_max);
        let _ = writeln!(s, "model.backbone_id={}", self.spec.backbone_id);
        let _ = writeln!(s, "model.dropout_rate={}", self.spec.dropout_rate);
        let _ = writeln!(s, "model.freeze_backbone={}", self.spec.freeze_backbone);
        let _ = writeln!(s, "model.head_width={}", self.spec.head_width);
        let _ = writeln!(s, "model.input_size={}", self.spec.input_size);
        let _ = writeln!(s, "model.use_pretrained={}", self.use_pretrained);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "threshold={}", self.threshold);
        let _ = writeln!(s, "train.batch_size={}", self.batch_size);
        let _ = writeln!(s, "train.epochs={}", self.epochs);
        let _ = writeln!(s, "train.learning_rate={}", self.learning_rate);
        let _ = writeln!(s, "train.train_fraction={}", self.train_fraction);
        s
    }

    /// Write the snapshot into `dir/run_config`.
    pub fn write_snapshot(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)
            .with_context(|| format!("cannot create output directory {}", dir.display()))?;
        let path = dir.join("run_config");
        std::fs::write(&path, self.snapshot())
            .with_context(|| format!("cannot write {}", path.display()))
    }
}
