//! Run configuration, read from and written to JSON.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::diffcore::{NormKind, OptimizerConfig};
use crate::error::{Error, Result};
use crate::glt::{AttentionConfig, GltMode};
use crate::head::HeadKind;
use crate::losses::LossConfig;
use crate::pipeline::synthetic::SyntheticSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// Latent attention width.
    pub c: usize,
    /// Sparse sample count of the global block.
    pub m: usize,
    /// Neighbor count of the local block.
    pub n: usize,
    /// Proposals kept after voting.
    pub proposals: usize,
    pub glt: GltMode,
    /// Importance branch plus importance-weighted offset loss.
    pub importance_branch: bool,
    pub head: HeadKind,
    /// Normalization inside the voting and head MLPs.
    pub norm: NormKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            c: 64,
            m: 16,
            n: 16,
            proposals: 64,
            glt: GltMode::GlobalLocal,
            importance_branch: true,
            head: HeadKind::Decoupled,
            norm: NormKind::Layer,
        }
    }
}

impl ModelConfig {
    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            d: self.backbone.d,
            c: self.c,
            m: self.m,
            n: self.n,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        let m_s = self.backbone.m_s;
        if self.glt != GltMode::Identity {
            self.attention().validate(m_s)?;
        }
        if self.proposals == 0 || self.proposals >= m_s {
            return Err(Error::Config(format!(
                "proposal count {} must lie in [1, M_s = {m_s})",
                self.proposals
            )));
        }
        if self.importance_branch && self.glt == GltMode::Identity {
            return Err(Error::Config("the importance branch needs a non-identity GLT".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    /// Frame pairs whose gradients are averaged per step.
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    /// The learning rate follows a cosine from its configured value down to
    /// this fraction of it at the last step. 1 keeps it constant.
    pub final_lr_fraction: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Save a checkpoint every this many steps; 0 saves only the final one.
    pub checkpoint_every: usize,
    /// Standard deviation of the horizontal jitter applied to the reference
    /// box when cropping a training search region.
    pub center_jitter: f64,
    /// Standard deviation of the reference-box yaw jitter (radians).
    pub yaw_jitter: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 4,
            optimizer: OptimizerConfig::Adam {
                lr: 1e-3,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            final_lr_fraction: 0.05,
            grad_clip: 10.0,
            checkpoint_every: 0,
            center_jitter: 0.2,
            yaw_jitter: 0.05,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let lr = self.optimizer.lr();
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {lr}")));
        }
        for (name, v) in [
            ("grad_clip", self.grad_clip),
            ("final_lr_fraction", self.final_lr_fraction),
            ("center_jitter", self.center_jitter),
            ("yaw_jitter", self.yaw_jitter),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} = {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    /// Learning rate for 1-based `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let base = self.optimizer.lr();
        if self.steps <= 1 || self.final_lr_fraction == 1.0 {
            return base;
        }
        let progress = (step.saturating_sub(1)) as f64 / (self.steps - 1) as f64;
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        base * (self.final_lr_fraction + (1.0 - self.final_lr_fraction) * cosine)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerConfig {
    /// Meters added to every side of the previous box to form the search
    /// region.
    pub search_margin: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self { search_margin: 2.0 }
    }
}

/// Where sequences come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SyntheticSet),
    /// A directory of sequence directories.
    Directory { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train: DataSource,
    pub eval: DataSource,
}

impl Default for DataConfig {
    fn default() -> Self {
        let train = SyntheticSet::default();
        let eval = SyntheticSet {
            seed: train.seed.wrapping_add(1_000),
            sequences: 10,
            ..train.clone()
        };
        Self {
            train: DataSource::Synthetic(train),
            eval: DataSource::Synthetic(eval),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Seeds parameter initialization, pair sampling and search-region
    /// resampling.
    pub seed: u64,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub tracker: TrackerConfig,
    pub data: DataConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 7,
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            tracker: TrackerConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        if !(self.tracker.search_margin > 0.0 && self.tracker.search_margin.is_finite()) {
            return Err(Error::Config(format!(
                "search_margin = {} must be positive",
                self.tracker.search_margin
            )));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Config = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}
