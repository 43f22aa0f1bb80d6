//! Seeded training with validation early stopping and ablation modes.

use std::collections::BTreeMap;

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::dataset::{pseudobulk_of, PerturbationDataset};
use crate::data::deg::{compute_degs_for, DegOptions, DegTable};
use crate::data::embeddings::SemanticEmbeddings;
use crate::data::split::SplitSpec;
use crate::error::{Error, Result};
use crate::graph::KnowledgeGraph;
use crate::loss::{batch_loss, estimate_huber_delta, LossComponents, LossTarget, LossWeights};
use crate::metrics::pearson_delta;
use crate::model::{forward, forward_batch, Ablation, Mode, Model, ModelConfig, ModelInputs};
use crate::numerics::{adam_step, sgd_step, AdamConfig, Matrix, OptimizerKind, OptimizerState};
use crate::seed::{derive_seed, rng_for, STREAM_GUMBEL, STREAM_SHUFFLE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub max_epochs: usize,
    /// Perturbations per optimizer step.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Epochs without a strict validation improvement before stopping; 0 never stops.
    pub patience: usize,
    pub optimizer: OptimizerKind,
    pub ablation: Ablation,
    pub loss: LossWeights,
    pub deg: DegOptions,
    pub model: ModelConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 300,
            batch_size: 8,
            learning_rate: 1e-3,
            weight_decay: 0.0,
            patience: 20,
            optimizer: OptimizerKind::Adam,
            ablation: Ablation::Full,
            loss: LossWeights::default(),
            deg: DegOptions::default(),
            model: ModelConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("train: {m}")));
        if self.max_epochs == 0 {
            return bad("max_epochs must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.patience > self.max_epochs {
            return bad(format!(
                "patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            ));
        }
        if !(self.deg.alpha > 0.0 && self.deg.alpha <= 1.0) {
            return bad(format!("alpha must lie in (0, 1], got {}", self.deg.alpha));
        }
        self.loss.validate()?;
        self.model.validate()
    }
}

/// Model and objective settings after applying the ablation mode.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationEffects {
    pub model: ModelConfig,
    pub loss: LossWeights,
}

pub fn apply_ablation(config: &TrainConfig) -> AblationEffects {
    let mut model = config.model.clone();
    model.ablation = config.ablation;
    let mut loss = config.loss;
    match config.ablation {
        Ablation::Full => {}
        Ablation::NoContext => loss.lambda_align = 0.0,
        Ablation::NoNonDeg => loss.lambda_non = 0.0,
        Ablation::ReconOnly => {
            loss.lambda_non = 0.0;
            loss.lambda_align = 0.0;
        }
    }
    AblationEffects { model, loss }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Batch-size-weighted mean of the step losses.
    pub train: LossComponents,
    pub val_pearson_delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub ablation: Ablation,
    pub seed: u64,
    pub lambda_non: f64,
    pub lambda_align: f64,
    pub huber_delta: f64,
    /// Eval-mode loss over the training perturbations before the first step.
    pub initial_train: LossComponents,
    /// Eval-mode loss over the training perturbations with the returned parameters.
    pub final_train: LossComponents,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_pearson_delta: f64,
    pub stopped_early: bool,
}

impl TrainHistory {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub model: Model,
    pub history: TrainHistory,
    pub inputs: ModelInputs,
    /// DEG table of the training perturbations.
    pub train_degs: DegTable,
    pub huber_delta: f64,
}

/// DEG table and Huber threshold from the training perturbations alone.
/// Falls back to `δ = 1` when the non-DEG spread is degenerate.
pub fn training_statistics(
    dataset: &PerturbationDataset,
    train: &[String],
    config: &TrainConfig,
) -> Result<(DegTable, f64)> {
    let table = compute_degs_for(dataset, train, &config.deg)?;
    let delta = match estimate_huber_delta(&table, config.loss.delta_scale) {
        Ok(d) => d,
        Err(Error::Degenerate(msg)) => {
            warn!("{msg}; using huber delta 1.0");
            1.0
        }
        Err(e) => return Err(e),
    };
    Ok((table, delta))
}

struct Targets {
    control: Vec<f64>,
    perts: BTreeMap<String, Vec<f64>>,
}

fn mean_loss(
    model: &Model,
    inputs: &ModelInputs,
    names: &[String],
    targets: &Targets,
    table: &DegTable,
    weights: &LossWeights,
) -> Result<LossComponents> {
    let mut batch = forward_batch(model, inputs, names, &Mode::Eval)?;
    let lt = loss_targets(names, targets, table)?;
    Ok(batch_loss(&mut batch, model, &lt, weights)?.1)
}

fn loss_targets<'a>(names: &[String], targets: &'a Targets, table: &'a DegTable) -> Result<Vec<LossTarget<'a>>> {
    names
        .iter()
        .map(|n| {
            Ok(LossTarget {
                x_pert: &targets.perts[n],
                control: &targets.control,
                deg: table
                    .get(n)
                    .ok_or_else(|| Error::Usage(format!("no DEG entry for `{n}`")))?,
            })
        })
        .collect()
}

/// Mean validation Pearson-Δ in eval mode. A perturbation whose predicted
/// delta is constant scores 0.
pub fn validation_pearson(
    model: &Model,
    inputs: &ModelInputs,
    names: &[String],
    true_deltas: &BTreeMap<String, Vec<f64>>,
) -> Result<f64> {
    let preds = forward(model, inputs, names, &Mode::Eval)?;
    let mut sum = 0.0;
    for p in &preds {
        let d = p.delta(&inputs.control_mean);
        sum += pearson_delta(&d, &true_deltas[&p.perturbation]).unwrap_or(0.0);
    }
    Ok(sum / preds.len() as f64)
}

pub fn train(
    dataset: &PerturbationDataset,
    split: &SplitSpec,
    graph: &KnowledgeGraph,
    embeddings: &SemanticEmbeddings,
    config: &TrainConfig,
) -> Result<TrainOutput> {
    config.validate()?;
    if split.train.is_empty() {
        return Err(Error::Usage("training split is empty".into()));
    }
    if split.val.is_empty() {
        return Err(Error::Usage("validation split is empty; early stopping needs one".into()));
    }
    let effects = apply_ablation(config);
    let (train_degs, huber_delta) = training_statistics(dataset, &split.train, config)?;
    let mut weights = effects.loss;
    weights.delta = huber_delta;

    let train_bulk = pseudobulk_of(dataset, &split.train)?;
    let val_bulk = pseudobulk_of(dataset, &split.val)?;
    let targets = Targets {
        control: train_bulk.control.clone(),
        perts: train_bulk.perturbations.clone(),
    };
    let val_deltas: BTreeMap<String, Vec<f64>> = split
        .val
        .iter()
        .map(|n| (n.clone(), val_bulk.delta(n).expect("validation pseudobulk")))
        .collect();

    let inputs = ModelInputs::new(
        dataset.vocab(),
        graph,
        embeddings,
        targets.control.clone(),
        effects.model.weighted_aggregation,
    )?;
    let mut model = Model::new(
        effects.model.clone(),
        embeddings.dim(),
        &targets.control,
        split.train.clone(),
        config.seed,
    )?;
    let initial_train = mean_loss(&model, &inputs, &split.train, &targets, &train_degs, &weights)?;
    info!(
        "training {} perturbations ({} ablation), initial loss {:.6}",
        split.train.len(),
        config.ablation,
        initial_train.total
    );

    let adam = AdamConfig {
        lr: config.learning_rate,
        weight_decay: config.weight_decay,
        ..AdamConfig::default()
    };
    let mut state = OptimizerState::new(model.params.tensors());
    let mut epochs = Vec::new();
    let mut best: Option<(usize, f64, Vec<Matrix>)> = None;
    let mut since_best = 0;
    let mut stopped_early = false;

    for epoch in 0..config.max_epochs {
        let mut order = split.train.clone();
        order.shuffle(&mut rng_for(config.seed, &[STREAM_SHUFFLE, epoch as u64]));
        let mut sums = LossComponents::default();
        for (b, names) in order.chunks(config.batch_size).enumerate() {
            let mode = Mode::Train {
                seed: derive_seed(config.seed, &[STREAM_GUMBEL, epoch as u64, b as u64]),
            };
            let mut batch = forward_batch(&model, &inputs, names, &mode)?;
            let lt = loss_targets(names, &targets, &train_degs)?;
            let (loss, comp) = batch_loss(&mut batch, &model, &lt, &weights)?;
            if !comp.total.is_finite() {
                return Err(Error::Numerical(format!(
                    "loss is {} at epoch {epoch}, batch {b} (perturbations: {})",
                    comp.total,
                    names.join(", ")
                )));
            }
            let mut grads = batch.tape.backward(loss.total)?;
            let grads: Vec<Matrix> = batch
                .params
                .iter()
                .map(|&id| grads.take(id).expect("parameter gradient"))
                .collect();
            if grads.iter().any(|g| !g.all_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite gradient at epoch {epoch}, batch {b} (perturbations: {})",
                    names.join(", ")
                )));
            }
            match config.optimizer {
                OptimizerKind::Adam => adam_step(model.params.tensors_mut(), &grads, &mut state, &adam)?,
                OptimizerKind::Sgd => sgd_step(
                    model.params.tensors_mut(),
                    &grads,
                    config.learning_rate,
                    config.weight_decay,
                )?,
            }
            let w = names.len() as f64;
            sums.recon += w * comp.recon;
            sums.non_deg += w * comp.non_deg;
            sums.align += w * comp.align;
            sums.total += w * comp.total;
        }
        let n = split.train.len() as f64;
        let train = LossComponents {
            recon: sums.recon / n,
            non_deg: sums.non_deg / n,
            align: sums.align / n,
            total: sums.total / n,
        };
        let val = validation_pearson(&model, &inputs, &split.val, &val_deltas)?;
        debug!("epoch {epoch}: loss {:.6}, val pearson-delta {val:.4}", train.total);
        epochs.push(EpochRecord {
            epoch,
            train,
            val_pearson_delta: val,
        });
        if best.as_ref().is_none_or(|(_, v, _)| val > *v) {
            best = Some((epoch, val, model.params.tensors().to_vec()));
            since_best = 0;
        } else {
            since_best += 1;
            if config.patience > 0 && since_best >= config.patience {
                stopped_early = true;
                break;
            }
        }
    }

    let (best_epoch, best_val, best_tensors) = best.expect("at least one epoch");
    model.params = model.params.with_tensors(best_tensors)?;
    let final_train = mean_loss(&model, &inputs, &split.train, &targets, &train_degs, &weights)?;
    info!(
        "best epoch {best_epoch} of {}, val pearson-delta {best_val:.4}",
        epochs.len()
    );
    let history = TrainHistory {
        ablation: config.ablation,
        seed: config.seed,
        lambda_non: weights.lambda_non,
        lambda_align: weights.lambda_align,
        huber_delta,
        initial_train,
        final_train,
        epochs,
        best_epoch,
        best_val_pearson_delta: best_val,
        stopped_early,
    };
    Ok(TrainOutput {
        model,
        history,
        inputs,
        train_degs,
        huber_delta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablation_effects() {
        let cfg = TrainConfig::default();
        let e = apply_ablation(&TrainConfig {
            ablation: Ablation::NoNonDeg,
            ..cfg.clone()
        });
        assert_eq!(e.loss.lambda_non, 0.0);
        assert_eq!(e.loss.lambda_align, cfg.loss.lambda_align);
        let e = apply_ablation(&TrainConfig {
            ablation: Ablation::ReconOnly,
            ..cfg.clone()
        });
        assert_eq!((e.loss.lambda_non, e.loss.lambda_align), (0.0, 0.0));
        let e = apply_ablation(&TrainConfig {
            ablation: Ablation::NoContext,
            ..cfg
        });
        assert_eq!(e.model.ablation, Ablation::NoContext);
    }

    #[test]
    fn patience_above_epochs_is_rejected() {
        let cfg = TrainConfig {
            max_epochs: 3,
            patience: 5,
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
