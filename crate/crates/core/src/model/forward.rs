//! Forward pass on the differentiation tape, plus value-level wrappers of
//! each stage.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::embeddings::{hash_embedding, SemanticEmbeddings};
use crate::error::{Error, Result};
use crate::graph::{GeneVocab, KnowledgeGraph};
use crate::model::{Model, ModelConfig, SelectionMode};
use crate::numerics::{Matrix, NodeId, Tape};
use crate::seed::{derive_seed, rng_for};

/// Data-side inputs shared by every forward pass over one dataset.
#[derive(Clone, Debug)]
pub struct ModelInputs {
    pub vocab: GeneVocab,
    /// Row-normalized adjacency with self-loops, `|V| × |V|`.
    pub aggregation: Matrix,
    /// Semantic embeddings in vocabulary order, `|V| × d_t`.
    pub semantic: Matrix,
    /// Control pseudobulk `x̄_c`.
    pub control_mean: Vec<f64>,
}

impl ModelInputs {
    /// Genes missing from `embeddings` get the hashed fallback vector.
    pub fn new(
        vocab: &GeneVocab,
        graph: &KnowledgeGraph,
        embeddings: &SemanticEmbeddings,
        control_mean: Vec<f64>,
        weighted_aggregation: bool,
    ) -> Result<Self> {
        let n = vocab.len();
        if graph.node_count() != n {
            return Err(Error::dim(
                "ModelInputs",
                format!("graph has {} nodes, vocabulary {n} genes", graph.node_count()),
            ));
        }
        if control_mean.len() != n {
            return Err(Error::dim(
                "ModelInputs",
                format!("control profile has {} genes, vocabulary {n}", control_mean.len()),
            ));
        }
        let dt = embeddings.dim();
        let mut semantic = Matrix::zeros(n, dt);
        for (i, g) in vocab.names().iter().enumerate() {
            match embeddings.get(g) {
                Some(v) => semantic.row_mut(i).copy_from_slice(v),
                None => semantic.row_mut(i).copy_from_slice(&hash_embedding(g, dt)),
            }
        }
        Ok(ModelInputs {
            vocab: vocab.clone(),
            aggregation: graph.aggregation_matrix(weighted_aggregation),
            semantic,
            control_mean,
        })
    }

    pub fn semantic_dim(&self) -> usize {
        self.semantic.cols()
    }
}

/// Node scores and the subgraph picked for one perturbation.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SubgraphSelection {
    /// Softmax-normalized scores `α`.
    pub alpha: Vec<f64>,
    /// Gumbel-perturbed scores `α̃`.
    pub alpha_tilde: Vec<f64>,
    /// Selected node indices, ascending; always contains the perturbed gene.
    pub selected: Vec<usize>,
    /// Gumbel noise added to `log α` (all zero in eval mode).
    pub gumbel: Vec<f64>,
    /// Seed of the noise draw; `None` in eval mode.
    pub noise_seed: Option<u64>,
}

impl SubgraphSelection {
    pub fn hard_mask(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.alpha.len()];
        for &v in &self.selected {
            m[v] = 1.0;
        }
        m
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Mode<'a> {
    /// No noise; deterministic.
    Eval,
    /// Gumbel noise from a per-batch seed.
    Train { seed: u64 },
    /// Replays the noise and hard mask of earlier selections and anchors the
    /// straight-through estimator at their `α̃`, so the loss becomes a smooth
    /// function of the parameters (used for finite-difference checks).
    Frozen(&'a BTreeMap<String, SubgraphSelection>),
}

/// Gumbel(0, 1) draws.
pub fn sample_gumbel(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            -(-u.ln()).ln()
        })
        .collect()
}

/// Nodes kept from `alpha_tilde`, plus the `forced` node.
fn select_nodes(alpha_tilde: &[f64], config: &ModelConfig, forced: usize) -> Vec<usize> {
    let mut selected: Vec<usize> = match config.selection_mode {
        SelectionMode::Threshold => {
            let t = config.threshold_for(alpha_tilde.len());
            (0..alpha_tilde.len()).filter(|&v| alpha_tilde[v] > t).collect()
        }
        SelectionMode::TopM => {
            let mut order: Vec<usize> = (0..alpha_tilde.len()).collect();
            order.sort_by(|&a, &b| alpha_tilde[b].total_cmp(&alpha_tilde[a]).then(a.cmp(&b)));
            order.truncate(config.top_m);
            order
        }
    };
    if !selected.contains(&forced) {
        selected.push(forced);
    }
    selected.sort_unstable();
    selected
}

/// Ids of named parameters on a batch tape.
struct ParamIds<'m> {
    model: &'m Model,
    ids: Vec<NodeId>,
}

impl ParamIds<'_> {
    fn get(&self, name: &str) -> Result<NodeId> {
        self.model
            .params
            .index_of(name)
            .map(|i| self.ids[i])
            .ok_or_else(|| Error::Usage(format!("model has no parameter `{name}`")))
    }
}

fn linear(t: &mut Tape, x: NodeId, w_t: NodeId, b: Option<NodeId>) -> Result<NodeId> {
    let y = t.matmul(x, w_t)?;
    match b {
        Some(b) => t.add(y, b),
        None => Ok(y),
    }
}

/// Linear–ReLU–linear with pre-transposed weights.
fn mlp(t: &mut Tape, x: NodeId, w1_t: NodeId, b1: NodeId, w2_t: NodeId, b2: NodeId) -> Result<NodeId> {
    let h = linear(t, x, w1_t, Some(b1))?;
    let h = t.relu(h)?;
    linear(t, h, w2_t, Some(b2))
}

fn tape_gnn(t: &mut Tape, agg: NodeId, emb: NodeId, layers_t: &[NodeId]) -> Result<NodeId> {
    let mut h = emb;
    for &w_t in layers_t {
        let m = t.matmul(agg, h)?;
        h = t.matmul(m, w_t)?;
    }
    Ok(h)
}

/// Scores `α` (1 × |V|) for one perturbation from `H` and `s̃_p`.
fn tape_scores(t: &mut Tape, h: NodeId, s_tilde: NodeId, w_c_t: NodeId, w: NodeId) -> Result<NodeId> {
    let n = t.value(h).rows();
    let ones = t.constant(Matrix::filled(n, 1, 1.0));
    let s_rows = t.matmul(ones, s_tilde)?;
    let c = t.concat_cols(h, s_rows)?;
    let pre = t.matmul(c, w_c_t)?;
    let act = t.relu(pre)?;
    let a = t.matmul(act, w)?;
    let a_row = t.transpose(a)?;
    t.row_softmax(a_row)
}

/// `α̃ = softmax((log α + g) / τ)` on the tape.
fn tape_perturb(t: &mut Tape, alpha: NodeId, gumbel: &[f64], tau: f64) -> Result<NodeId> {
    let log_alpha = t.log(alpha)?;
    let g = t.constant(Matrix::row_vector(gumbel.to_vec()));
    let noisy = t.add(log_alpha, g)?;
    let scaled = t.scale(noisy, 1.0 / tau)?;
    t.row_softmax(scaled)
}

/// One perturbation's outputs on a batch tape.
#[derive(Clone, Debug)]
pub struct PertForward {
    pub perturbation: String,
    pub x_hat: NodeId,
    /// `z_context`; absent without the context path.
    pub z_context: Option<NodeId>,
    pub selection: Option<SubgraphSelection>,
}

/// A tape holding the forward pass of a batch of perturbations.
#[derive(Debug)]
pub struct BatchTape {
    pub tape: Tape,
    /// Parameter nodes in [`ModelParams`](crate::model::ModelParams) order.
    pub params: Vec<NodeId>,
    pub z_c: NodeId,
    pub outputs: Vec<PertForward>,
}

/// Records the forward pass for `perturbations` on a fresh tape.
///
/// `H`, `z_c` and the transposed weights are shared across the batch. In
/// train mode, perturbation `j` of the batch draws its noise from
/// `derive_seed(seed, [j])`.
pub fn forward_batch(
    model: &Model,
    inputs: &ModelInputs,
    perturbations: &[String],
    mode: &Mode,
) -> Result<BatchTape> {
    let cfg = &model.config;
    if inputs.control_mean.len() != model.dims.genes {
        return Err(Error::dim(
            "forward",
            format!(
                "inputs have {} genes, model expects {}",
                inputs.control_mean.len(),
                model.dims.genes
            ),
        ));
    }
    let mut t = Tape::new();
    let ids: Vec<NodeId> = model
        .params
        .tensors()
        .iter()
        .map(|m| t.param(m.clone()))
        .collect();
    let p = ParamIds { model, ids };

    let transposed = |t: &mut Tape, name: &str| -> Result<NodeId> {
        let id = p.get(name)?;
        t.transpose(id)
    };

    let x_c = t.constant(Matrix::row_vector(inputs.control_mean.clone()));
    let x_c = t.l2_normalize(x_c)?;
    let (ew1, ew2) = (transposed(&mut t, "encoder.w1")?, transposed(&mut t, "encoder.w2")?);
    let z_c = mlp(&mut t, x_c, ew1, p.get("encoder.b1")?, ew2, p.get("encoder.b2")?)?;
    let (dw1, dw2) = (transposed(&mut t, "decoder.w1")?, transposed(&mut t, "decoder.w2")?);
    let (db1, db2) = (p.get("decoder.b1")?, p.get("decoder.b2")?);

    struct ContextPath {
        h: NodeId,
        w_s_t: NodeId,
        w_c_t: NodeId,
        w: NodeId,
        proj_t: NodeId,
    }
    let context = if cfg.ablation.uses_context() {
        if inputs.semantic_dim() != model.dims.semantic_dim {
            return Err(Error::dim(
                "forward",
                format!(
                    "semantic embeddings have dimension {}, model expects {}",
                    inputs.semantic_dim(),
                    model.dims.semantic_dim
                ),
            ));
        }
        let agg = t.constant(inputs.aggregation.clone());
        let layers = (0..cfg.layers)
            .map(|l| transposed(&mut t, &format!("gnn.layer{l}.weight")))
            .collect::<Result<Vec<_>>>()?;
        let h = tape_gnn(&mut t, agg, p.get("gnn.embedding")?, &layers)?;
        Some(ContextPath {
            h,
            w_s_t: transposed(&mut t, "semantic.proj")?,
            w_c_t: transposed(&mut t, "scorer.w_c")?,
            w: p.get("scorer.w")?,
            proj_t: transposed(&mut t, "context.proj")?,
        })
    } else {
        None
    };

    let mut outputs = Vec::with_capacity(perturbations.len());
    for (j, pert) in perturbations.iter().enumerate() {
        let target = inputs.vocab.index_of(pert).ok_or_else(|| {
            Error::Usage(format!("perturbation `{pert}` is not a gene in the vocabulary"))
        })?;
        let (z_p, z_context, selection) = match &context {
            Some(cp) => {
                let s = t.constant(Matrix::row_vector(inputs.semantic.row(target).to_vec()));
                let s_tilde = t.matmul(s, cp.w_s_t)?;
                let alpha = tape_scores(&mut t, cp.h, s_tilde, cp.w_c_t, cp.w)?;
                let n = t.value(alpha).cols();
                let (gumbel, noise_seed, frozen) = match mode {
                    Mode::Eval => (vec![0.0; n], None, None),
                    Mode::Train { seed } => {
                        let s = derive_seed(*seed, &[j as u64]);
                        (sample_gumbel(&mut rng_for(s, &[]), n), Some(s), None)
                    }
                    Mode::Frozen(map) => {
                        let sel = map.get(pert).ok_or_else(|| {
                            Error::Usage(format!("no frozen selection for `{pert}`"))
                        })?;
                        (sel.gumbel.clone(), sel.noise_seed, Some(sel))
                    }
                };
                let alpha_tilde = tape_perturb(&mut t, alpha, &gumbel, cfg.tau)?;
                let at_value = t.value(alpha_tilde).clone();
                let (selected, anchor) = match frozen {
                    Some(sel) => (
                        sel.selected.clone(),
                        Matrix::row_vector(sel.alpha_tilde.clone()),
                    ),
                    None => (select_nodes(at_value.data(), cfg, target), at_value.clone()),
                };
                let selection = SubgraphSelection {
                    alpha: t.value(alpha).data().to_vec(),
                    alpha_tilde: at_value.into_vec(),
                    selected,
                    gumbel,
                    noise_seed,
                };
                let hard = Matrix::row_vector(selection.hard_mask());
                let weights = t.straight_through(alpha_tilde, hard, anchor)?;
                let pooled = t.matmul(weights, cp.h)?;
                let z = t.matmul(pooled, cp.proj_t)?;
                (z, Some(z), Some(selection))
            }
            None => {
                let rows = model.dims.train_perturbations.max(1);
                let pick = match model.train_perturbations.iter().position(|q| q == pert) {
                    Some(i) => {
                        let mut v = vec![0.0; rows];
                        v[i] = 1.0;
                        v
                    }
                    None => vec![1.0 / rows as f64; rows],
                };
                let pick = t.constant(Matrix::row_vector(pick));
                let z = t.matmul(pick, p.get("ablation.pert_table")?)?;
                (z, None, None)
            }
        };
        let fused = t.concat_cols(z_c, z_p)?;
        let x_hat = mlp(&mut t, fused, dw1, db1, dw2, db2)?;
        outputs.push(PertForward {
            perturbation: pert.clone(),
            x_hat,
            z_context,
            selection,
        });
    }
    Ok(BatchTape {
        tape: t,
        params: p.ids,
        z_c,
        outputs,
    })
}

/// Values of one perturbation's forward pass.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Prediction {
    pub perturbation: String,
    /// Predicted absolute profile `x̂`.
    pub x_hat: Vec<f64>,
    pub z_context: Option<Vec<f64>>,
    pub selection: Option<SubgraphSelection>,
}

impl Prediction {
    /// `x̂ − x̄_c`.
    pub fn delta(&self, control_mean: &[f64]) -> Vec<f64> {
        self.x_hat.iter().zip(control_mean).map(|(a, b)| a - b).collect()
    }
}

/// Forward values for every perturbation in `perturbations`.
pub fn forward(
    model: &Model,
    inputs: &ModelInputs,
    perturbations: &[String],
    mode: &Mode,
) -> Result<Vec<Prediction>> {
    let batch = forward_batch(model, inputs, perturbations, mode)?;
    Ok(batch
        .outputs
        .into_iter()
        .map(|o| Prediction {
            perturbation: o.perturbation,
            x_hat: batch.tape.value(o.x_hat).data().to_vec(),
            z_context: o.z_context.map(|z| batch.tape.value(z).data().to_vec()),
            selection: o.selection,
        })
        .collect())
}

// Value-level stages. Each runs the same tape ops as the batch forward.

/// `H` after `layers.len()` rounds of `H ← Â H Wᵀ`.
pub fn gnn_embed(aggregation: &Matrix, embedding: &Matrix, layers: &[Matrix]) -> Result<Matrix> {
    let mut t = Tape::new();
    let agg = t.constant(aggregation.clone());
    let emb = t.constant(embedding.clone());
    let layers_t = layers
        .iter()
        .map(|w| t.constant(w.transpose()))
        .collect::<Vec<_>>();
    let h = tape_gnn(&mut t, agg, emb, &layers_t)?;
    Ok(t.value(h).clone())
}

/// `s̃_p = W_s s_p`.
pub fn project_semantic(s: &[f64], w_s: &Matrix) -> Result<Vec<f64>> {
    if s.len() != w_s.cols() {
        return Err(Error::dim(
            "project_semantic",
            format!("embedding has {} entries, projection expects {}", s.len(), w_s.cols()),
        ));
    }
    Ok(Matrix::row_vector(s.to_vec())
        .matmul_t(w_s)?
        .into_vec())
}

/// `α = softmax_v(wᵀ relu(W_c [h_v ∥ s̃]))`.
pub fn score_nodes(h: &Matrix, s_tilde: &[f64], w_c: &Matrix, w: &Matrix) -> Result<Vec<f64>> {
    let mut t = Tape::new();
    let h = t.constant(h.clone());
    let s = t.constant(Matrix::row_vector(s_tilde.to_vec()));
    let w_c_t = t.constant(w_c.transpose());
    let w = t.constant(w.clone());
    let alpha = tape_scores(&mut t, h, s, w_c_t, w)?;
    Ok(t.value(alpha).data().to_vec())
}

/// Perturbs `alpha` with Gumbel noise from `rng` (or none when `rng` is
/// `None`) and applies the selection rule of `config`, forcing `forced`.
pub fn gumbel_select(
    alpha: &[f64],
    config: &ModelConfig,
    forced: usize,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<SubgraphSelection> {
    if forced >= alpha.len() {
        return Err(Error::Usage(format!(
            "forced node {forced} out of range for {} nodes",
            alpha.len()
        )));
    }
    let gumbel = match rng {
        Some(r) => sample_gumbel(r, alpha.len()),
        None => vec![0.0; alpha.len()],
    };
    let mut t = Tape::new();
    let a = t.constant(Matrix::row_vector(alpha.to_vec()));
    let at = tape_perturb(&mut t, a, &gumbel, config.tau)?;
    let alpha_tilde = t.value(at).data().to_vec();
    let selected = select_nodes(&alpha_tilde, config, forced);
    Ok(SubgraphSelection {
        alpha: alpha.to_vec(),
        alpha_tilde,
        selected,
        gumbel,
        noise_seed: None,
    })
}

/// `proj · Σ_{v selected} h_v`.
pub fn context_aggregate(h: &Matrix, selection: &SubgraphSelection, proj: &Matrix) -> Result<Vec<f64>> {
    let mask = Matrix::row_vector(selection.hard_mask());
    Ok(mask.matmul(h)?.matmul_t(proj)?.into_vec())
}

/// `z_c = W2 relu(W1 x + b1) + b2`. The forward pass feeds it `x̄_c / ‖x̄_c‖`.
pub fn encode_control(x: &[f64], w1: &Matrix, b1: &Matrix, w2: &Matrix, b2: &Matrix) -> Result<Vec<f64>> {
    let mut t = Tape::new();
    let x = t.constant(Matrix::row_vector(x.to_vec()));
    let (w1, w2) = (t.constant(w1.transpose()), t.constant(w2.transpose()));
    let (b1, b2) = (t.constant(b1.clone()), t.constant(b2.clone()));
    let z = mlp(&mut t, x, w1, b1, w2, b2)?;
    Ok(t.value(z).data().to_vec())
}

/// `x̂ = W2 relu(W1 [z_c ∥ z_p] + b1) + b2`.
pub fn decode(
    z_c: &[f64],
    z_p: &[f64],
    w1: &Matrix,
    b1: &Matrix,
    w2: &Matrix,
    b2: &Matrix,
) -> Result<Vec<f64>> {
    if z_c.len() != z_p.len() {
        return Err(Error::dim(
            "decode",
            format!("z_c has {} entries, z_p {}", z_c.len(), z_p.len()),
        ));
    }
    let mut fused = z_c.to_vec();
    fused.extend_from_slice(z_p);
    encode_control(&fused, w1, b1, w2, b2)
}
