//! The perturbation-response model: structural GNN embeddings, perturbation-
//! conditioned node scoring and Gumbel selection, context aggregation and the
//! control encoder / response decoder.

pub mod checkpoint;
pub mod forward;
pub mod params;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, TensorInfo};
pub use forward::{
    context_aggregate, decode, encode_control, forward, forward_batch, gnn_embed, gumbel_select,
    project_semantic, sample_gumbel, score_nodes, BatchTape, Mode, ModelInputs, PertForward,
    Prediction, SubgraphSelection,
};
pub use params::{Model, ModelDims, ModelParams};

/// How nodes are picked from the perturbed scores `α̃`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    /// Every node with `α̃_v > T`.
    #[default]
    Threshold,
    /// The `top_m` largest `α̃_v`, ties to the lower index.
    TopM,
}

/// Training variants that change the model or the objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    /// `z_p` is a learned row per training perturbation instead of the subgraph context.
    NoContext,
    /// `λ_non = 0`.
    NoNonDeg,
    /// `λ_non = λ_align = 0`.
    ReconOnly,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::Full,
        Ablation::NoContext,
        Ablation::NoNonDeg,
        Ablation::ReconOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoContext => "no_context",
            Ablation::NoNonDeg => "no_non_deg",
            Ablation::ReconOnly => "recon_only",
        }
    }

    pub fn uses_context(self) -> bool {
        self != Ablation::NoContext
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == s || a.as_str().replace('_', "-") == s)
            .ok_or_else(|| {
                Error::Usage(format!(
                    "unknown ablation `{s}` (expected full, no_context, no_non_deg or recon_only)"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// GNN message-passing rounds `L`.
    pub layers: usize,
    /// Structural embedding width `d_s`.
    pub structural_dim: usize,
    /// Latent width `d` of `z_c` and `z_p`.
    pub latent_dim: usize,
    /// Scorer hidden width `m`.
    pub score_dim: usize,
    /// Hidden width of the encoder and decoder MLPs.
    pub hidden_dim: usize,
    /// Gumbel-softmax temperature `τ`.
    pub tau: f64,
    /// Selection threshold `T`; `None` means `1/|V|`.
    pub threshold: Option<f64>,
    pub selection_mode: SelectionMode,
    pub top_m: usize,
    /// Weight-normalized neighbor aggregation instead of the plain mean.
    pub weighted_aggregation: bool,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 2,
            structural_dim: 64,
            latent_dim: 128,
            score_dim: 64,
            hidden_dim: 128,
            tau: 1.0,
            threshold: None,
            selection_mode: SelectionMode::Threshold,
            top_m: 10,
            weighted_aggregation: false,
            ablation: Ablation::Full,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("model: {m}")));
        for (name, v) in [
            ("structural_dim", self.structural_dim),
            ("latent_dim", self.latent_dim),
            ("score_dim", self.score_dim),
            ("hidden_dim", self.hidden_dim),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if let Some(t) = self.threshold {
            if !(t > 0.0 && t < 1.0) {
                return bad(format!("threshold must lie in (0, 1), got {t}"));
            }
        }
        if self.selection_mode == SelectionMode::TopM && self.top_m == 0 {
            return bad("top_m must be positive".into());
        }
        Ok(())
    }

    pub fn threshold_for(&self, nodes: usize) -> f64 {
        self.threshold.unwrap_or(1.0 / nodes.max(1) as f64)
    }
}
