//! Run configuration: TOML file, then command-line overrides.

use std::fs;
use std::path::{Path, PathBuf};

use adapert::data::{Correction, DegOptions, SynthConfig};
use adapert::graph::TopkMode;
use adapert::loss::LossWeights;
use adapert::model::{Ablation, ModelConfig};
use adapert::numerics::OptimizerKind;
use adapert::pipeline::EvalOptions;
use adapert::training::TrainConfig;
use adapert::{Error, Result};
use serde::{Deserialize, Serialize};

pub const EFFECTIVE_CONFIG_FILE: &str = "config.toml";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Expression CSV (`sample,condition,<genes…>`).
    pub expression: Option<PathBuf>,
    /// Edge list TSV (`gene_a gene_b weight`).
    pub graph: Option<PathBuf>,
    /// Embeddings CSV; genes without a row get a hashed embedding.
    pub embeddings: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Checkpoint directory for `eval` and `predict`.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Welch p-value cut-off for DEG calls.
    pub alpha: f64,
    pub correction: Correction,
    /// Train / validation / test fractions over perturbations.
    pub split: [f64; 3],
    /// Embedding width used when no embeddings file is given.
    pub fallback_embedding_dim: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        let deg = DegOptions::default();
        DataSection {
            alpha: deg.alpha,
            correction: deg.correction,
            split: [0.7, 0.15, 0.15],
            fallback_embedding_dim: 32,
        }
    }
}

impl DataSection {
    pub fn deg_options(&self) -> DegOptions {
        DegOptions {
            alpha: self.alpha,
            correction: self.correction,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphSection {
    /// Keep each gene's `top_k` strongest edges; absent keeps every edge.
    pub top_k: Option<usize>,
    pub topk_mode: TopkMode,
    /// Largest hop count reported by `deg-coverage`.
    pub max_hops: usize,
}

impl Default for GraphSection {
    fn default() -> Self {
        GraphSection {
            top_k: None,
            topk_mode: TopkMode::Union,
            max_hops: 4,
        }
    }
}

/// The optimization part of [`TrainConfig`]; model and DEG settings live in
/// their own sections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub patience: usize,
    pub optimizer: OptimizerKind,
    pub ablation: Ablation,
    pub loss: LossWeights,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            max_epochs: t.max_epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            weight_decay: t.weight_decay,
            patience: t.patience,
            optimizer: t.optimizer,
            ablation: t.ablation,
            loss: t.loss,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub data: DataSection,
    pub graph: GraphSection,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub metrics: EvalOptions,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            paths: Paths::default(),
            data: DataSection::default(),
            graph: GraphSection::default(),
            model: ModelConfig::default(),
            train: TrainSection::default(),
            metrics: EvalOptions::default(),
            synth: SynthConfig::default(),
        }
    }
}

/// Values given on the command line; each one replaces the file value.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub ablation: Option<Ablation>,
    pub checkpoint: Option<PathBuf>,
    pub expression: Option<PathBuf>,
    pub graph: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub max_epochs: Option<usize>,
}

impl RunConfig {
    pub fn from_toml(text: &str, source: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("{source}: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config file {}: {e}", path.display()))
        })?;
        Self::from_toml(&text, &path.display().to_string())
    }

    /// Defaults, then the file if given, then `overrides`; validated.
    pub fn resolve(file: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut cfg = match file {
            Some(p) => Self::load(p)?,
            None => RunConfig::default(),
        };
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(a) = o.ablation {
            self.train.ablation = a;
        }
        if let Some(e) = o.max_epochs {
            self.train.max_epochs = e;
        }
        let paths = [
            (&o.out, &mut self.paths.out),
            (&o.checkpoint, &mut self.paths.checkpoint),
            (&o.expression, &mut self.paths.expression),
            (&o.graph, &mut self.paths.graph),
            (&o.embeddings, &mut self.paths.embeddings),
        ];
        for (src, dst) in paths {
            if let Some(p) = src {
                *dst = Some(p.clone());
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.model.ablation != Ablation::Full {
            return Err(Error::Config(
                "model.ablation is set by the trainer; use train.ablation (or --ablation) instead".into(),
            ));
        }
        if !(self.data.alpha > 0.0 && self.data.alpha < 1.0) {
            return Err(Error::Config(format!("data.alpha must be in (0, 1), got {}", self.data.alpha)));
        }
        if self.data.fallback_embedding_dim == 0 {
            return Err(Error::Config("data.fallback_embedding_dim must be positive".into()));
        }
        if self.graph.top_k == Some(0) {
            return Err(Error::Config("graph.top_k must be at least 1".into()));
        }
        if self.graph.max_hops == 0 {
            return Err(Error::Config("graph.max_hops must be at least 1".into()));
        }
        if self.metrics.des_k.iter().any(|&k| k == 0) {
            return Err(Error::Config("metrics.des_k entries must be positive".into()));
        }
        self.model.validate()?;
        self.train_config().validate()
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            max_epochs: t.max_epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            weight_decay: t.weight_decay,
            patience: t.patience,
            optimizer: t.optimizer,
            ablation: t.ablation,
            loss: t.loss.clone(),
            deg: self.data.deg_options(),
            model: self.model.clone(),
            seed: self.seed,
        }
    }

    pub fn out_dir(&self) -> Result<&Path> {
        self.paths
            .out
            .as_deref()
            .ok_or_else(|| Error::Usage("no output directory: pass --out or set paths.out".into()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    /// Writes the resolved configuration to `dir/config.toml`.
    pub fn write_effective(&self, dir: &Path) -> Result<()> {
        let path = dir.join(EFFECTIVE_CONFIG_FILE);
        fs::write(&path, self.to_toml()?).map_err(|e| io_error(&path, e))
    }
}

pub(crate) fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}
