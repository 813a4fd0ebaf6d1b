//! Declarative model and training configuration.
//!
//! Configs are TOML documents with a `[model]` table and an optional
//! `[train]` table. Unknown keys are rejected.
//!
//! ```toml
//! [model]
//! vocab_size = 50257
//! d_model = 256
//! d_path = 128
//! n_layer_blocks = 2
//! n_parallel_layers = 3
//! k_paths = 2
//! heads_layer = 8
//! heads_path = 4
//! head_dim = 32
//! ff_layer = 1024
//! ff_path = 512
//! max_seq_len = 256
//! connection = "gumbel_v2"
//!
//! [model.gumbel]
//! tau = 1.0
//! hard = false
//!
//! [train]
//! lr = 5e-4
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConnectionKind {
    None,
    ShareLinear,
    GumbelV1,
    GumbelV2,
}

impl ConnectionKind {
    pub fn is_gumbel(self) -> bool {
        matches!(self, ConnectionKind::GumbelV1 | ConnectionKind::GumbelV2)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ConnectionKind::None => "none",
            ConnectionKind::ShareLinear => "share_linear",
            ConnectionKind::GumbelV1 => "gumbel_v1",
            ConnectionKind::GumbelV2 => "gumbel_v2",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GumbelConfig {
    /// Softmax temperature; must be positive.
    pub tau: f64,
    /// Straight-through: one-hot forward, soft backward.
    pub hard: bool,
    /// Evaluation forwards skip the Gumbel noise.
    pub eval_deterministic: bool,
    /// Optional linear anneal of `tau` towards this value over `anneal_steps`.
    pub anneal_to: Option<f64>,
    pub anneal_steps: usize,
}

impl Default for GumbelConfig {
    fn default() -> Self {
        GumbelConfig {
            tau: 1.0,
            hard: false,
            eval_deterministic: true,
            anneal_to: None,
            anneal_steps: 0,
        }
    }
}

impl GumbelConfig {
    /// Temperature at optimizer step `step`.
    pub fn tau_at(&self, step: usize) -> f64 {
        match self.anneal_to {
            Some(end) if self.anneal_steps > 0 => {
                let f = (step as f64 / self.anneal_steps as f64).min(1.0);
                self.tau + (end - self.tau) * f
            }
            _ => self.tau,
        }
    }
}

/// Number of layer blocks placed before and after the parallel core.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSplit {
    pub before: usize,
    pub after: usize,
}

fn default_init_std() -> f64 {
    0.02
}
fn default_norm_eps() -> f64 {
    1e-5
}
fn default_rope_base() -> f64 {
    10_000.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    /// Width of the full-size layer blocks.
    pub d_model: usize,
    /// Width of each parallel path.
    #[serde(default)]
    pub d_path: usize,
    pub n_layer_blocks: usize,
    /// Defaults to ceil(n/2) before and floor(n/2) after.
    #[serde(default)]
    pub layer_split: Option<LayerSplit>,
    #[serde(default)]
    pub n_parallel_layers: usize,
    #[serde(default)]
    pub k_paths: usize,
    pub heads_layer: usize,
    #[serde(default)]
    pub heads_path: usize,
    pub head_dim: usize,
    pub ff_layer: usize,
    #[serde(default)]
    pub ff_path: usize,
    pub max_seq_len: usize,
    pub connection: ConnectionKind,
    #[serde(default)]
    pub gumbel: GumbelConfig,
    /// Dropout on parallel-block FFN outputs during training.
    #[serde(default)]
    pub dropout_path: f64,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
}

impl ModelConfig {
    pub fn is_parallel(&self) -> bool {
        self.connection != ConnectionKind::None
    }

    pub fn split(&self) -> LayerSplit {
        if !self.is_parallel() {
            return LayerSplit {
                before: self.n_layer_blocks,
                after: 0,
            };
        }
        self.layer_split.unwrap_or(LayerSplit {
            before: self.n_layer_blocks - self.n_layer_blocks / 2,
            after: self.n_layer_blocks / 2,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let need = |ok: bool, field: &str, reason: String| -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(Error::config(field, reason))
            }
        };
        need(self.vocab_size >= 2, "vocab_size", format!("must be ≥ 2, got {}", self.vocab_size))?;
        need(self.d_model >= 1, "d_model", "must be positive".into())?;
        need(self.max_seq_len >= 1, "max_seq_len", "must be positive".into())?;
        need(
            self.head_dim >= 2 && self.head_dim.is_multiple_of(2),
            "head_dim",
            format!("rotary embeddings need an even head dim, got {}", self.head_dim),
        )?;
        need(
            self.heads_layer * self.head_dim == self.d_model,
            "heads_layer",
            format!(
                "{} heads × head_dim {} ≠ d_model {}",
                self.heads_layer, self.head_dim, self.d_model
            ),
        )?;
        need(self.ff_layer >= 1, "ff_layer", "must be positive".into())?;
        need(
            (0.0..1.0).contains(&self.dropout_path),
            "dropout_path",
            format!("must lie in [0, 1), got {}", self.dropout_path),
        )?;
        need(
            self.gumbel.tau > 0.0,
            "gumbel.tau",
            format!("must be positive, got {}", self.gumbel.tau),
        )?;
        if let Some(end) = self.gumbel.anneal_to {
            need(end > 0.0, "gumbel.anneal_to", format!("must be positive, got {end}"))?;
        }
        need(self.init_std > 0.0, "init_std", "must be positive".into())?;
        need(self.norm_eps > 0.0, "norm_eps", "must be positive".into())?;

        if !self.is_parallel() {
            need(
                self.n_parallel_layers == 0,
                "n_parallel_layers",
                "a model without connection blocks has no parallel layers".into(),
            )?;
            need(self.n_layer_blocks >= 1, "n_layer_blocks", "must be ≥ 1".into())?;
            need(self.layer_split.is_none(), "layer_split", "only meaningful for parallel models".into())?;
            return Ok(());
        }
        need(self.k_paths >= 2, "k_paths", format!("need at least 2 paths, got {}", self.k_paths))?;
        need(
            self.n_parallel_layers >= 1,
            "n_parallel_layers",
            "parallel models need at least one parallel layer".into(),
        )?;
        need(
            self.d_path * self.k_paths == self.d_model,
            "d_path",
            format!(
                "d_path {} × k_paths {} ≠ d_model {}",
                self.d_path, self.k_paths, self.d_model
            ),
        )?;
        need(
            self.heads_path * self.head_dim == self.d_path,
            "heads_path",
            format!(
                "{} heads × head_dim {} ≠ d_path {}",
                self.heads_path, self.head_dim, self.d_path
            ),
        )?;
        need(self.ff_path >= 1, "ff_path", "must be positive".into())?;
        if let Some(s) = self.layer_split {
            need(
                s.before + s.after == self.n_layer_blocks,
                "layer_split",
                format!(
                    "{} + {} ≠ n_layer_blocks {}",
                    s.before, s.after, self.n_layer_blocks
                ),
            )?;
        }
        Ok(())
    }

    /// Standalone path model matching the parallel paths of `self`.
    pub fn path_model(&self) -> ModelConfig {
        ModelConfig {
            d_model: self.d_path,
            d_path: 0,
            n_layer_blocks: self.n_parallel_layers,
            layer_split: None,
            n_parallel_layers: 0,
            k_paths: 0,
            heads_layer: self.heads_path,
            heads_path: 0,
            ff_layer: self.ff_path,
            ff_path: 0,
            connection: ConnectionKind::None,
            ..self.clone()
        }
    }

    pub fn with_connection(&self, kind: ConnectionKind) -> ModelConfig {
        ModelConfig {
            connection: kind,
            ..self.clone()
        }
    }

    pub fn with_vocab(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            ..self.clone()
        }
    }
}

fn default_betas() -> [f64; 2] {
    [0.9, 0.95]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub grad_accum_steps: usize,
    pub weight_decay: f64,
    #[serde(default = "default_betas")]
    pub betas: [f64; 2],
    pub adam_eps: f64,
    /// Only `"cosine"` is supported.
    pub scheduler: String,
    pub warmup_steps: usize,
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub lambda_entropy: f64,
    pub lambda_load: f64,
    /// +1 adds the routing entropy term as printed; -1 subtracts it.
    pub sign_entropy: i8,
    pub sign_load: i8,
    /// Stop after this many optimizer steps (None: full epochs).
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-4,
            batch_size: 32,
            epochs: 2,
            grad_accum_steps: 8,
            weight_decay: 0.1,
            betas: default_betas(),
            adam_eps: 1e-5,
            scheduler: "cosine".into(),
            warmup_steps: 0,
            grad_clip: None,
            seed: 42,
            lambda_entropy: 0.01,
            lambda_load: 0.01,
            sign_entropy: 1,
            sign_load: 1,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let need = |ok: bool, field: &str, reason: &str| -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(Error::config(field, reason))
            }
        };
        need(self.lr > 0.0, "train.lr", "must be positive")?;
        need(self.batch_size >= 1, "train.batch_size", "must be ≥ 1")?;
        need(self.epochs >= 1, "train.epochs", "must be ≥ 1")?;
        need(self.grad_accum_steps >= 1, "train.grad_accum_steps", "must be ≥ 1")?;
        need(self.weight_decay >= 0.0, "train.weight_decay", "must be ≥ 0")?;
        need(
            self.betas.iter().all(|b| *b > 0.0 && *b < 1.0),
            "train.betas",
            "each beta must lie in (0, 1)",
        )?;
        need(self.adam_eps > 0.0, "train.adam_eps", "must be positive")?;
        need(self.scheduler == "cosine", "train.scheduler", "only \"cosine\" is supported")?;
        need(self.lambda_entropy >= 0.0, "train.lambda_entropy", "must be ≥ 0")?;
        need(self.lambda_load >= 0.0, "train.lambda_load", "must be ≥ 0")?;
        need(matches!(self.sign_entropy, 1 | -1), "train.sign_entropy", "must be 1 or -1")?;
        need(matches!(self.sign_load, 1 | -1), "train.sign_load", "must be 1 or -1")?;
        if let Some(c) = self.grad_clip {
            need(c > 0.0, "train.grad_clip", "must be positive")?;
        }
        Ok(())
    }
}

/// A complete run description as stored in a config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            Error::config("config", e.to_string().lines().collect::<Vec<_>>().join(" "))
        })?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("config", format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Named presets: the full-scale models plus desk-scale counterparts.
pub mod presets {
    use super::*;

    pub const NAMES: &[&str] = &[
        "base_256",
        "base_192",
        "path",
        "parallel_share_linear",
        "parallel_gumbel_v1",
        "parallel_gumbel_v2",
        "desk_base",
        "desk_path",
        "desk_parallel_share_linear",
        "desk_parallel_gumbel_v1",
        "desk_parallel_gumbel_v2",
    ];

    pub const FULL_VOCAB: usize = 50257;

    fn baseline(d: usize, heads: usize, layers: usize, ff: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: FULL_VOCAB,
            d_model: d,
            d_path: 0,
            n_layer_blocks: layers,
            layer_split: None,
            n_parallel_layers: 0,
            k_paths: 0,
            heads_layer: heads,
            heads_path: 0,
            head_dim: 32,
            ff_layer: ff,
            ff_path: 0,
            max_seq_len: 256,
            connection: ConnectionKind::None,
            gumbel: GumbelConfig::default(),
            dropout_path: 0.0,
            init_std: default_init_std(),
            norm_eps: default_norm_eps(),
            rope_base: default_rope_base(),
        }
    }

    pub fn base_256() -> ModelConfig {
        baseline(256, 8, 8, 1024)
    }

    /// FF hidden size 728 as configured.
    pub fn base_192() -> ModelConfig {
        baseline(192, 6, 8, 728)
    }

    pub fn path() -> ModelConfig {
        baseline(128, 4, 3, 512)
    }

    pub fn parallel(kind: ConnectionKind) -> ModelConfig {
        ModelConfig {
            d_path: 128,
            n_layer_blocks: 2,
            n_parallel_layers: 3,
            k_paths: 2,
            heads_path: 4,
            ff_path: 512,
            connection: kind,
            ..baseline(256, 8, 2, 1024)
        }
    }

    /// Projection init std for the desk-scale presets, about 1/sqrt(d_model).
    pub const DESK_INIT_STD: f64 = 0.1;

    pub fn desk_base() -> ModelConfig {
        ModelConfig {
            head_dim: 32,
            init_std: DESK_INIT_STD,
            ..baseline(64, 2, 8, 256)
        }
    }

    pub fn desk_path() -> ModelConfig {
        ModelConfig {
            init_std: DESK_INIT_STD,
            ..baseline(32, 1, 3, 128)
        }
    }

    pub fn desk_parallel(kind: ConnectionKind) -> ModelConfig {
        ModelConfig {
            d_path: 32,
            n_layer_blocks: 2,
            n_parallel_layers: 3,
            k_paths: 2,
            heads_path: 1,
            ff_path: 128,
            connection: kind,
            init_std: DESK_INIT_STD,
            ..baseline(64, 2, 2, 256)
        }
    }

    pub fn by_name(name: &str) -> Option<ModelConfig> {
        Some(match name {
            "base_256" => base_256(),
            "base_192" => base_192(),
            "path" => path(),
            "parallel_share_linear" => parallel(ConnectionKind::ShareLinear),
            "parallel_gumbel_v1" => parallel(ConnectionKind::GumbelV1),
            "parallel_gumbel_v2" => parallel(ConnectionKind::GumbelV2),
            "desk_base" => desk_base(),
            "desk_path" => desk_path(),
            "desk_parallel_share_linear" => desk_parallel(ConnectionKind::ShareLinear),
            "desk_parallel_gumbel_v1" => desk_parallel(ConnectionKind::GumbelV1),
            "desk_parallel_gumbel_v2" => desk_parallel(ConnectionKind::GumbelV2),
            _ => return None,
        })
    }

    /// Training defaults scaled for the synthetic desk corpus.
    pub fn desk_train() -> TrainConfig {
        TrainConfig {
            lr: 3e-3,
            batch_size: 8,
            grad_accum_steps: 1,
            weight_decay: 0.01,
            ..TrainConfig::default()
        }
    }
}
