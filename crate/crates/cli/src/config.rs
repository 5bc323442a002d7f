use std::fs;
use std::path::{Path, PathBuf};

use microaunet::distill::{DistillConfig, TrainConfig};
use microaunet::metrics::DEFAULT_THRESHOLD;
use microaunet::{Error, ModelConfig, Result};
use serde::{Deserialize, Serialize};

use crate::Cli;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SplitPart {
    Train,
    Val,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Student,
    Teacher,
}

/// Fully resolved settings of one run; written to `config.json` before any work.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub resolution: usize,
    /// Dataset root with `images/` and `masks/`, or `synth:<count>`.
    pub data: Option<String>,
    /// Seed of synthetic data; the run seed when absent.
    pub data_seed: Option<u64>,
    /// Held-out share; 0 validates and evaluates on the training set.
    pub val_fraction: f64,
    pub out: PathBuf,
    pub threshold: f64,
    pub dump_attn: bool,
    pub overlays: bool,
    pub teacher_checkpoint: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub plan: Option<PathBuf>,
    pub model: Option<ModelKind>,
    pub eval_split: SplitPart,
    pub train: TrainConfig,
    pub distill: DistillConfig,
    pub student: ModelConfig,
    pub teacher: ModelConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            resolution: 64,
            data: None,
            data_seed: None,
            val_fraction: 0.2,
            out: PathBuf::from("runs"),
            threshold: DEFAULT_THRESHOLD,
            dump_attn: false,
            overlays: false,
            teacher_checkpoint: None,
            checkpoint: None,
            plan: None,
            model: None,
            eval_split: SplitPart::Val,
            train: TrainConfig::default(),
            distill: DistillConfig::default(),
            student: ModelConfig::student(),
            teacher: ModelConfig::teacher(),
        }
    }
}

impl RunConfig {
    /// Defaults, then the `--config` file, then explicit flags.
    pub fn resolve(cli: &Cli) -> Result<Self> {
        let mut cfg = match &cli.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("--config {}: {e}", path.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::Config(format!("--config {}: {e}", path.display())))?
            }
            None => RunConfig::default(),
        };
        if let Some(v) = cli.seed {
            cfg.seed = v;
        }
        if let Some(v) = cli.epochs {
            cfg.train.epochs = v;
        }
        if let Some(v) = cli.batch {
            cfg.train.batch = v;
        }
        if let Some(v) = cli.lr {
            cfg.train.lr = v;
        }
        if let Some(v) = cli.resolution {
            cfg.resolution = v;
        }
        if let Some(v) = &cli.data {
            cfg.data = Some(v.clone());
        }
        if let Some(v) = cli.data_seed {
            cfg.data_seed = Some(v);
        }
        if let Some(v) = cli.val_fraction {
            cfg.val_fraction = v;
        }
        if let Some(v) = &cli.out {
            cfg.out = v.clone();
        }
        if let Some(v) = cli.threshold {
            cfg.threshold = v;
        }
        if let Some(v) = &cli.teacher {
            cfg.teacher_checkpoint = Some(v.clone());
        }
        if let Some(v) = &cli.checkpoint {
            cfg.checkpoint = Some(v.clone());
        }
        if let Some(v) = &cli.plan {
            cfg.plan = Some(v.clone());
        }
        if let Some(v) = cli.model {
            cfg.model = Some(v);
        }
        if let Some(v) = cli.split {
            cfg.eval_split = v;
        }
        cfg.dump_attn |= cli.dump_attn;
        cfg.overlays |= cli.overlays;
        // The run seed and resolution drive every sub-config.
        cfg.train.seed = cfg.seed;
        cfg.student.seed = cfg.seed;
        cfg.teacher.seed = cfg.seed;
        cfg.student.resolution = cfg.resolution;
        cfg.teacher.resolution = cfg.resolution;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!("val_fraction {} outside [0, 1)", self.val_fraction)));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("--threshold {} outside (0, 1)", self.threshold)));
        }
        self.train.validate()?;
        self.distill.validate()
    }

    pub fn data_seed(&self) -> u64 {
        self.data_seed.unwrap_or(self.seed)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises") + "\n"
    }
}

pub fn require<'a, T>(v: &'a Option<T>, flag: &str) -> Result<&'a T> {
    v.as_ref().ok_or_else(|| Error::Config(format!("{flag} is required")))
}

pub fn existing(path: &Path, flag: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Config(format!("{flag} {} does not exist", path.display())))
    }
}
