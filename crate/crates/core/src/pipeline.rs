//! End-to-end evaluation of a trained model (or of the truth itself) on
//! held-out perturbations.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::dataset::{pseudobulk_of, PerturbationDataset};
use crate::data::deg::{compute_degs_for, effect_size_strata, DegOptions, DegTable};
use crate::error::{Error, Result};
use crate::metrics::{predicted_degs, report, score_items, write_scatter, EvalItem, MetricsReport};
use crate::model::{forward, Mode, Model, ModelInputs};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    /// Cut-offs for the top-k DEG overlap.
    pub des_k: Vec<usize>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            des_k: vec![10, 20, 50],
        }
    }
}

/// Where predictions come from.
#[derive(Clone, Copy, Debug)]
pub enum Predictor<'a> {
    Model { model: &'a Model, inputs: &'a ModelInputs },
    /// The observed perturbed pseudobulk; an upper bound for every metric.
    Oracle,
}

#[derive(Clone, Debug)]
pub struct EvalOutput {
    pub report: MetricsReport,
    /// Truth DEG table over the evaluated perturbations.
    pub truth: DegTable,
    /// Predicted delta `x̂ − x̄_c` per perturbation.
    pub pred_deltas: BTreeMap<String, Vec<f64>>,
}

impl EvalOutput {
    /// Writes `scatter_<pert>.csv` for every evaluated perturbation.
    pub fn write_scatters(&self, dir: impl AsRef<Path>, dataset: &PerturbationDataset) -> Result<()> {
        for (name, pred) in &self.pred_deltas {
            let entry = self.truth.get(name).expect("truth for every prediction");
            write_scatter(
                dir.as_ref().join(format!("scatter_{name}.csv")),
                dataset.vocab(),
                entry,
                pred,
            )?;
        }
        Ok(())
    }
}

pub fn evaluate(
    dataset: &PerturbationDataset,
    perturbations: &[String],
    predictor: Predictor,
    deg: &DegOptions,
    options: &EvalOptions,
) -> Result<EvalOutput> {
    if perturbations.is_empty() {
        return Err(Error::Usage("no perturbations to evaluate".into()));
    }
    let truth = compute_degs_for(dataset, perturbations, deg)?;
    let strata = effect_size_strata(&truth);
    let bulk = pseudobulk_of(dataset, perturbations)?;
    let x_hats: BTreeMap<String, Vec<f64>> = match predictor {
        Predictor::Model { model, inputs } => forward(model, inputs, perturbations, &Mode::Eval)?
            .into_iter()
            .map(|p| (p.perturbation, p.x_hat))
            .collect(),
        Predictor::Oracle => bulk.perturbations.clone(),
    };
    let control = &dataset.control().values;
    let items = perturbations
        .par_iter()
        .map(|name| {
            let x_hat = &x_hats[name];
            let pred_delta: Vec<f64> = x_hat.iter().zip(&bulk.control).map(|(a, b)| a - b).collect();
            let block = dataset.block(name)?;
            Ok(EvalItem {
                name: name.clone(),
                pred_delta,
                truth: truth.get(name).expect("truth entry"),
                g_pred: predicted_degs(control, &block.values, x_hat, deg)?,
                stratum: strata[name],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let pred_deltas = items
        .iter()
        .map(|i| (i.name.clone(), i.pred_delta.clone()))
        .collect();
    let per = score_items(&items, &options.des_k)?;
    Ok(EvalOutput {
        report: report(per),
        truth,
        pred_deltas,
    })
}
