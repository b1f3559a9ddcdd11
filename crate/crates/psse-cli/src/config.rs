//! Flat TOML configuration mirroring the library's training and solver
//! options. Command-line flags override file values, which override the
//! built-in defaults.

use std::path::Path;

use anyhow::{Context, Result};
use psse::neuralnet::{Loss, LrSchedule, TrainConfig};
use psse::solvers::{EtaRule, MuRule, ProxLinearConfig};
use serde::Deserialize;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    // Training
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub lr_schedule: Option<String>,
    pub loss: Option<String>,
    pub huber_delta: Option<f64>,
    pub seed: Option<u64>,
    pub adam_beta1: Option<f64>,
    pub adam_beta2: Option<f64>,
    pub adam_eps: Option<f64>,
    // Prox-linear solver
    pub outer_blocks: Option<usize>,
    pub inner_iters: Option<usize>,
    pub mu: Option<f64>,
    pub eta: Option<f64>,
    pub max_backtracks: Option<usize>,
    // Gauss-Newton
    pub gn_max_iter: Option<usize>,
    pub gn_tol: Option<f64>,
    // Data generation
    pub length: Option<usize>,
    pub profile: Option<String>,
    pub amplitude: Option<f64>,
    pub period: Option<f64>,
    pub noise_std: Option<f64>,
    pub sigma_flow: Option<f64>,
    pub sigma_mag: Option<f64>,
    pub include_injections: Option<bool>,
    pub subsample: Option<usize>,
    // Splits and evaluation
    pub train_count: Option<usize>,
    pub window: Option<usize>,
    pub rnn_layers: Option<usize>,
    pub hidden_layers: Option<usize>,
    pub mask_rate: Option<f64>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<FileConfig> {
        match path {
            None => Ok(FileConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
            }
        }
    }

    pub fn train_config(&self, seed: u64) -> Result<TrainConfig> {
        let mut cfg = TrainConfig {
            seed,
            ..Default::default()
        };
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        if let Some(b) = self.batch_size {
            cfg.batch_size = b;
        }
        if let Some(lr) = self.learning_rate {
            cfg.learning_rate = lr;
        }
        if let Some(s) = &self.lr_schedule {
            cfg.lr_schedule = match s.as_str() {
                "constant" => LrSchedule::Constant,
                "cosine" => LrSchedule::Cosine,
                other => anyhow::bail!("unknown lr_schedule `{other}` (constant|cosine)"),
            };
        }
        let delta = self.huber_delta.unwrap_or(1.0);
        if let Some(l) = &self.loss {
            cfg.loss = match l.as_str() {
                "huber" => Loss::Huber(delta),
                "mse" => Loss::Mse,
                other => anyhow::bail!("unknown loss `{other}` (huber|mse)"),
            };
        } else if self.huber_delta.is_some() {
            cfg.loss = Loss::Huber(delta);
        }
        if let Some(b) = self.adam_beta1 {
            cfg.beta1 = b;
        }
        if let Some(b) = self.adam_beta2 {
            cfg.beta2 = b;
        }
        if let Some(e) = self.adam_eps {
            cfg.eps = e;
        }
        Ok(cfg)
    }

    pub fn solver_config(&self) -> ProxLinearConfig {
        let mut cfg = ProxLinearConfig::default();
        if let Some(b) = self.outer_blocks {
            cfg.outer_blocks = b;
        }
        if let Some(k) = self.inner_iters {
            cfg.inner_iters = k;
        }
        if let Some(mu) = self.mu {
            cfg.mu = MuRule::Fixed(mu);
        }
        if let Some(eta) = self.eta {
            cfg.eta = EtaRule::Fixed(eta);
        }
        if let Some(m) = self.max_backtracks {
            cfg.max_backtracks = m;
        }
        cfg
    }
}
