//! Named parameter tensors and their initialization.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numerics::Matrix;
use crate::seed::{rng_for, STREAM_INIT};

/// Sizes fixed by the data rather than by hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Genes `N`; also the number of graph nodes `|V|`.
    pub genes: usize,
    /// Semantic embedding width `d_t`.
    pub semantic_dim: usize,
    /// Rows of the per-perturbation table used without context.
    pub train_perturbations: usize,
}

/// Parameter tensors in a fixed order, each under a stable name.
///
/// Weight matrices are stored `out × in` and applied to row vectors as `x Wᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    names: Vec<String>,
    tensors: Vec<Matrix>,
}

fn standard_normal(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Matrix::from_vec(rows, cols, data).expect("sized buffer")
}

fn xavier(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-limit..=limit))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("sized buffer")
}

/// Names and shapes of every tensor for `config` and `dims`, in storage order.
pub fn layout(config: &ModelConfig, dims: &ModelDims) -> Vec<(String, (usize, usize))> {
    let (n, ds, d, m, h) = (
        dims.genes,
        config.structural_dim,
        config.latent_dim,
        config.score_dim,
        config.hidden_dim,
    );
    let mut out = Vec::new();
    let mut push = |name: &str, shape| out.push((name.to_string(), shape));
    push("encoder.w1", (h, n));
    push("encoder.b1", (1, h));
    push("encoder.w2", (d, h));
    push("encoder.b2", (1, d));
    if config.ablation.uses_context() {
        push("gnn.embedding", (n, ds));
        for l in 0..config.layers {
            push(&format!("gnn.layer{l}.weight"), (ds, ds));
        }
        push("semantic.proj", (ds, dims.semantic_dim));
        push("scorer.w_c", (m, 2 * ds));
        push("scorer.w", (m, 1));
        push("context.proj", (d, ds));
        push("align.head", (d, n));
    } else {
        push("ablation.pert_table", (dims.train_perturbations.max(1), d));
    }
    push("decoder.w1", (h, 2 * d));
    push("decoder.b1", (1, h));
    push("decoder.w2", (n, h));
    push("decoder.b2", (1, n));
    out
}

impl ModelParams {
    /// Xavier-uniform weights, standard-normal embedding tables and zero biases,
    /// except `decoder.b2` which starts at `control_mean` so the initial
    /// prediction sits near the control profile.
    pub fn init(
        config: &ModelConfig,
        dims: &ModelDims,
        control_mean: &[f64],
        seed: u64,
    ) -> Result<Self> {
        if control_mean.len() != dims.genes {
            return Err(Error::dim(
                "ModelParams::init",
                format!("control mean has {} genes, expected {}", control_mean.len(), dims.genes),
            ));
        }
        let mut rng = rng_for(seed, &[STREAM_INIT]);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, (r, c)) in layout(config, dims) {
            let t = if name == "decoder.b2" {
                Matrix::row_vector(control_mean.to_vec())
            } else if name.contains(".b") || name == "decoder.w2" {
                Matrix::zeros(r, c)
            } else if name == "gnn.embedding" || name == "ablation.pert_table" {
                standard_normal(&mut rng, r, c)
            } else {
                xavier(&mut rng, r, c)
            };
            names.push(name);
            tensors.push(t);
        }
        Ok(ModelParams { names, tensors })
    }

    pub fn from_parts(names: Vec<String>, tensors: Vec<Matrix>) -> Result<Self> {
        if names.len() != tensors.len() {
            return Err(Error::Usage(format!(
                "{} parameter names for {} tensors",
                names.len(),
                tensors.len()
            )));
        }
        Ok(ModelParams { names, tensors })
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Matrix] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Matrix] {
        &mut self.tensors
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    pub fn require(&self, name: &str) -> Result<&Matrix> {
        self.get(name)
            .ok_or_else(|| Error::Usage(format!("model has no parameter `{name}`")))
    }

    /// Same names with new values; shapes must match.
    pub fn with_tensors(&self, tensors: Vec<Matrix>) -> Result<Self> {
        if tensors.len() != self.tensors.len() {
            return Err(Error::dim(
                "ModelParams::with_tensors",
                format!("{} tensors, expected {}", tensors.len(), self.tensors.len()),
            ));
        }
        for ((name, old), new) in self.names.iter().zip(&self.tensors).zip(&tensors) {
            if old.shape() != new.shape() {
                return Err(Error::dim(
                    "ModelParams::with_tensors",
                    format!("`{name}` is {:?}, got {:?}", old.shape(), new.shape()),
                ));
            }
        }
        Ok(ModelParams {
            names: self.names.clone(),
            tensors,
        })
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Matrix::len).sum()
    }
}

/// Hyperparameters, parameters and the training perturbations that index
/// `ablation.pert_table`.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub dims: ModelDims,
    pub params: ModelParams,
    pub train_perturbations: Vec<String>,
}

impl Model {
    pub fn new(
        config: ModelConfig,
        semantic_dim: usize,
        control_mean: &[f64],
        train_perturbations: Vec<String>,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let dims = ModelDims {
            genes: control_mean.len(),
            semantic_dim,
            train_perturbations: train_perturbations.len(),
        };
        let params = ModelParams::init(&config, &dims, control_mean, seed)?;
        Ok(Model {
            config,
            dims,
            params,
            train_perturbations,
        })
    }

    pub fn with_params(&self, params: ModelParams) -> Self {
        Model {
            params,
            ..self.clone()
        }
    }
}
