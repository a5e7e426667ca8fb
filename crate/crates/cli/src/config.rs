//! Flat key=value experiment configs and the run manifest.
//!
//! One assignment per line, `#` starts a comment, unknown keys are rejected.
//! Serialization emits keys in a fixed order so parse -> serialize -> parse
//! is a fixed point.

use dtkd_core::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::PathBuf;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// "synthetic", "cifar10", or "idx".
    pub dataset: String,
    /// Required for cifar10/idx; must exist at parse time.
    pub data_dir: Option<PathBuf>,
    pub image_side: usize,
    pub num_classes: usize,
    pub per_class_train: usize,
    pub per_class_val: usize,
    pub data_seed: u64,
    pub source_classes: Vec<usize>,
    pub target_classes: Vec<usize>,

    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub lr_patience: usize,
    pub lr_factor: f64,
    pub early_stop_patience: usize,

    pub temperature: f64,
    pub alpha: f64,

    pub train_fraction: f64,
    pub label_noise_fraction: f64,
    pub image_noise_train_fraction: f64,
    /// "none", "center_black", or "quarter_black".
    pub corruption: String,
    pub center_min: usize,
    pub center_max: usize,
    pub corruption_seed: u64,

    pub seeds: Vec<u64>,
    pub run_name: String,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: "synthetic".into(),
            data_dir: None,
            image_side: 16,
            num_classes: 4,
            per_class_train: 100,
            per_class_val: 50,
            data_seed: 1,
            source_classes: vec![0, 1],
            target_classes: vec![2, 3],
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 0.0005,
            batch_size: 64,
            max_epochs: 200,
            lr_patience: 3,
            lr_factor: 0.9,
            early_stop_patience: 10,
            temperature: 10.0,
            alpha: 0.1,
            train_fraction: 1.0,
            label_noise_fraction: 0.0,
            image_noise_train_fraction: 0.0,
            corruption: "none".into(),
            center_min: 200,
            center_max: 224,
            corruption_seed: 0,
            seeds: vec![0, 7, 42],
            run_name: "run".into(),
            out_dir: PathBuf::from("runs"),
        }
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<T>()
                .map_err(|_| Error::Config(format!("bad value {s:?} for key {key}")))
        })
        .collect()
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse::<T>()
        .map_err(|_| Error::Config(format!("bad value {v:?} for key {key}")))
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got {raw:?}", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "dataset" => cfg.dataset = value.into(),
                "data_dir" => {
                    cfg.data_dir = if value == "none" {
                        None
                    } else {
                        Some(PathBuf::from(value))
                    }
                }
                "image_side" => cfg.image_side = parse_num(key, value)?,
                "num_classes" => cfg.num_classes = parse_num(key, value)?,
                "per_class_train" => cfg.per_class_train = parse_num(key, value)?,
                "per_class_val" => cfg.per_class_val = parse_num(key, value)?,
                "data_seed" => cfg.data_seed = parse_num(key, value)?,
                "source_classes" => cfg.source_classes = parse_list(key, value)?,
                "target_classes" => cfg.target_classes = parse_list(key, value)?,
                "learning_rate" => cfg.learning_rate = parse_num(key, value)?,
                "momentum" => cfg.momentum = parse_num(key, value)?,
                "weight_decay" => cfg.weight_decay = parse_num(key, value)?,
                "batch_size" => cfg.batch_size = parse_num(key, value)?,
                "max_epochs" => cfg.max_epochs = parse_num(key, value)?,
                "lr_patience" => cfg.lr_patience = parse_num(key, value)?,
                "lr_factor" => cfg.lr_factor = parse_num(key, value)?,
                "early_stop_patience" => cfg.early_stop_patience = parse_num(key, value)?,
                "temperature" => cfg.temperature = parse_num(key, value)?,
                "alpha" => cfg.alpha = parse_num(key, value)?,
                "train_fraction" => cfg.train_fraction = parse_num(key, value)?,
                "label_noise_fraction" => cfg.label_noise_fraction = parse_num(key, value)?,
                "image_noise_train_fraction" => {
                    cfg.image_noise_train_fraction = parse_num(key, value)?
                }
                "corruption" => cfg.corruption = value.into(),
                "center_min" => cfg.center_min = parse_num(key, value)?,
                "center_max" => cfg.center_max = parse_num(key, value)?,
                "corruption_seed" => cfg.corruption_seed = parse_num(key, value)?,
                "seeds" => cfg.seeds = parse_list(key, value)?,
                "run_name" => cfg.run_name = value.into(),
                "out_dir" => cfg.out_dir = PathBuf::from(value),
                other => {
                    return Err(Error::Config(format!(
                        "line {}: unknown key {other:?}",
                        lineno + 1
                    )))
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        match self.dataset.as_str() {
            "synthetic" => {}
            "cifar10" | "idx" => {
                let dir = self.data_dir.as_ref().ok_or_else(|| {
                    Error::Config(format!("dataset {} requires data_dir", self.dataset))
                })?;
                if !dir.exists() {
                    return Err(Error::Config(format!(
                        "data_dir {} does not exist",
                        dir.display()
                    )));
                }
            }
            other => return Err(Error::Config(format!("unknown dataset {other:?}"))),
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must be non-empty".into()));
        }
        if self.source_classes.is_empty() || self.target_classes.is_empty() {
            return Err(Error::Config("class groups must be non-empty".into()));
        }
        if self
            .source_classes
            .iter()
            .chain(&self.target_classes)
            .any(|&c| c >= self.num_classes)
        {
            return Err(Error::Config(
                "class groups must reference classes below num_classes".into(),
            ));
        }
        match self.corruption.as_str() {
            "none" | "center_black" | "quarter_black" => {}
            other => return Err(Error::Config(format!("unknown corruption {other:?}"))),
        }
        Ok(())
    }

    fn join<T: std::fmt::Display>(xs: &[T]) -> String {
        xs.iter()
            .map(|x| x.to_string())
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let data_dir = self
            .data_dir
            .as_ref()
            .map(|p| p.display().to_string())
            .unwrap_or_else(|| "none".into());
        for (k, v) in [
            ("dataset", self.dataset.clone()),
            ("data_dir", data_dir),
            ("image_side", self.image_side.to_string()),
            ("num_classes", self.num_classes.to_string()),
            ("per_class_train", self.per_class_train.to_string()),
            ("per_class_val", self.per_class_val.to_string()),
            ("data_seed", self.data_seed.to_string()),
            ("source_classes", Self::join(&self.source_classes)),
            ("target_classes", Self::join(&self.target_classes)),
            ("learning_rate", self.learning_rate.to_string()),
            ("momentum", self.momentum.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("max_epochs", self.max_epochs.to_string()),
            ("lr_patience", self.lr_patience.to_string()),
            ("lr_factor", self.lr_factor.to_string()),
            ("early_stop_patience", self.early_stop_patience.to_string()),
            ("temperature", self.temperature.to_string()),
            ("alpha", self.alpha.to_string()),
            ("train_fraction", self.train_fraction.to_string()),
            ("label_noise_fraction", self.label_noise_fraction.to_string()),
            (
                "image_noise_train_fraction",
                self.image_noise_train_fraction.to_string(),
            ),
            ("corruption", self.corruption.clone()),
            ("center_min", self.center_min.to_string()),
            ("center_max", self.center_max.to_string()),
            ("corruption_seed", self.corruption_seed.to_string()),
            ("seeds", Self::join(&self.seeds)),
            ("run_name", self.run_name.clone()),
            ("out_dir", self.out_dir.display().to_string()),
        ] {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    pub fn training(&self, seed: u64) -> dtkd_core::train::TrainingConfig {
        dtkd_core::train::TrainingConfig {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            lr_patience: self.lr_patience,
            lr_factor: self.lr_factor,
            early_stop_patience: self.early_stop_patience,
            seed,
        }
    }
}

/// Snapshot of everything that determines a run's outputs. Re-running with
/// an identical manifest must reproduce the result files byte-for-byte.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config: String,
    pub overrides: Vec<(String, String)>,
    pub seed_dirs: Vec<String>,
    pub content_hash: String,
}

impl RunManifest {
    pub fn new(
        subcommand: &str,
        cfg: &ExperimentConfig,
        overrides: Vec<(String, String)>,
        seed_dirs: Vec<String>,
    ) -> RunManifest {
        let config = cfg.serialize();
        let mut hasher = Sha256::new();
        hasher.update(subcommand.as_bytes());
        hasher.update(config.as_bytes());
        for (k, v) in &overrides {
            hasher.update(k.as_bytes());
            hasher.update(v.as_bytes());
        }
        let content_hash = format!("{:x}", hasher.finalize());
        RunManifest {
            subcommand: subcommand.into(),
            config,
            overrides,
            seed_dirs,
            content_hash,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = ExperimentConfig::default();
        let text = cfg.serialize();
        let reparsed = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(cfg, reparsed);
        assert_eq!(reparsed.serialize(), text);
    }

    #[test]
    fn comments_and_blank_lines_ignored() {
        let cfg = ExperimentConfig::parse(
            "# a comment\n\nalpha = 0.3 # trailing\n  temperature=4\n",
        )
        .unwrap();
        assert_eq!(cfg.alpha, 0.3);
        assert_eq!(cfg.temperature, 4.0);
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(ExperimentConfig::parse("alphaa = 0.5\n").is_err());
        assert!(ExperimentConfig::parse("just a line\n").is_err());
    }

    #[test]
    fn missing_data_dir_rejected() {
        assert!(ExperimentConfig::parse("dataset = cifar10\n").is_err());
        assert!(
            ExperimentConfig::parse("dataset = cifar10\ndata_dir = /nonexistent-xyz\n").is_err()
        );
    }

    #[test]
    fn empty_seeds_rejected() {
        assert!(ExperimentConfig::parse("seeds = \n").is_err());
    }

    #[test]
    fn manifest_hash_tracks_content() {
        let cfg = ExperimentConfig::default();
        let a = RunManifest::new("finetune", &cfg, vec![], vec![]);
        let b = RunManifest::new("finetune", &cfg, vec![], vec![]);
        assert_eq!(a.content_hash, b.content_hash);
        let c = RunManifest::new("pretrain", &cfg, vec![], vec![]);
        assert_ne!(a.content_hash, c.content_hash);
        let d = RunManifest::new(
            "finetune",
            &cfg,
            vec![("alpha".into(), "0.5".into())],
            vec![],
        );
        assert_ne!(a.content_hash, d.content_hash);
    }
}
