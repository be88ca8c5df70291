//! Run configuration file: a flat JSON object, every key optional.

use std::path::{Path, PathBuf};

use pdml::loss::{LossConfig, MetricLoss, PairScope};
use pdml::model::BackboneConfig;
use pdml::train::{Selection, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub rho: f64,
    pub rms_eps: f64,
    pub selection: Selection,
    pub record_wall_time: bool,

    pub patch: usize,
    pub c1: usize,
    pub c2: usize,
    pub embed_dim: usize,

    pub alpha: f64,
    pub mc_samples: usize,
    pub beta: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub hinge_var: bool,
    pub pair_cap: usize,
    pub pair_scope: PairScope,
    pub metric_loss: MetricLoss,

    /// Train, validation and test fractions of the labeled pixels.
    pub split: [f64; 3],

    pub cube: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let loss = LossConfig::default();
        let backbone = BackboneConfig::new(1, 1, 5);
        let train = TrainConfig::new(backbone);
        Self {
            seed: train.seed,
            epochs: train.epochs,
            batch_size: train.batch_size,
            learning_rate: train.learning_rate,
            rho: train.rho,
            rms_eps: train.rms_eps,
            selection: train.selection,
            record_wall_time: train.record_wall_time,
            patch: backbone.patch,
            c1: backbone.c1,
            c2: backbone.c2,
            embed_dim: backbone.embed_dim,
            alpha: loss.alpha,
            mc_samples: loss.mc_samples,
            beta: loss.beta,
            lambda1: loss.lambda1,
            lambda2: loss.lambda2,
            lambda3: loss.lambda3,
            hinge_var: loss.hinge_var,
            pair_cap: loss.pair_cap,
            pair_scope: loss.pair_scope,
            metric_loss: loss.metric_loss,
            split: [0.2, 0.1, 0.7],
            cube: None,
            labels: None,
            out: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    /// Seed precedence: flag, then `PDML_SEED`, then the file.
    pub fn resolve_seed(&mut self, flag: Option<u64>) -> Result<(), CliError> {
        if let Some(seed) = flag {
            self.seed = seed;
        } else if let Some(seed) = env_seed()? {
            self.seed = seed;
        }
        Ok(())
    }

    pub fn backbone(&self, bands: usize, classes: usize) -> BackboneConfig {
        BackboneConfig {
            bands,
            c1: self.c1,
            c2: self.c2,
            embed_dim: self.embed_dim,
            classes,
            patch: self.patch,
        }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            alpha: self.alpha,
            mc_samples: self.mc_samples,
            beta: self.beta,
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            lambda3: self.lambda3,
            hinge_var: self.hinge_var,
            pair_cap: self.pair_cap,
            pair_scope: self.pair_scope,
            metric_loss: self.metric_loss,
        }
    }

    pub fn train_config(&self, bands: usize, classes: usize) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            rho: self.rho,
            rms_eps: self.rms_eps,
            seed: self.seed,
            loss: self.loss(),
            backbone: self.backbone(bands, classes),
            selection: self.selection,
            record_wall_time: self.record_wall_time,
        }
    }
}

pub fn env_seed() -> Result<Option<u64>, CliError> {
    match std::env::var("PDML_SEED") {
        Ok(s) => {
            s.trim().parse().map(Some).map_err(|_| {
                CliError::Usage(format!("PDML_SEED is not an unsigned integer: {s:?}"))
            })
        }
        Err(_) => Ok(None),
    }
}
