//! Differential-expression calls per perturbation and effect-size strata.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::dataset::PerturbationDataset;
use crate::data::stats::{benjamini_hochberg, welch_t_test};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const WELCH_TEST: &str = "welch-t-two-sided";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Correction {
    #[default]
    None,
    BenjaminiHochberg,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegOptions {
    pub alpha: f64,
    pub correction: Correction,
}

impl Default for DegOptions {
    fn default() -> Self {
        DegOptions {
            alpha: 0.05,
            correction: Correction::None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegEntry {
    /// Raw p-values, or BH-adjusted ones when the table uses correction.
    pub pvalues: Vec<f64>,
    pub deg_mask: Vec<bool>,
    /// Pseudobulk delta `x̄_p − x̄_c`.
    pub delta: Vec<f64>,
}

impl DegEntry {
    pub fn degs(&self) -> Vec<usize> {
        self.deg_mask
            .iter()
            .enumerate()
            .filter_map(|(i, &d)| d.then_some(i))
            .collect()
    }

    pub fn non_degs(&self) -> Vec<usize> {
        self.deg_mask
            .iter()
            .enumerate()
            .filter_map(|(i, &d)| (!d).then_some(i))
            .collect()
    }

    pub fn deg_count(&self) -> usize {
        self.deg_mask.iter().filter(|&&d| d).count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegTable {
    pub alpha: f64,
    pub test: String,
    pub correction: Correction,
    pub perturbations: BTreeMap<String, DegEntry>,
}

impl DegTable {
    pub fn get(&self, name: &str) -> Option<&DegEntry> {
        self.perturbations.get(name)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }
}

/// Per-gene Welch tests of `perturbed` against `control` (samples × genes).
pub fn deg_entry(control: &Matrix, perturbed: &Matrix, opts: &DegOptions) -> Result<DegEntry> {
    if control.cols() != perturbed.cols() {
        return Err(Error::dim(
            "deg_entry",
            format!("{} vs {} genes", control.cols(), perturbed.cols()),
        ));
    }
    if !(opts.alpha > 0.0 && opts.alpha <= 1.0) {
        return Err(Error::Usage(format!("alpha must be in (0, 1], got {}", opts.alpha)));
    }
    let ct = control.transpose();
    let pt = perturbed.transpose();
    let mut pvalues = Vec::with_capacity(ct.rows());
    for g in 0..ct.rows() {
        pvalues.push(welch_t_test(ct.row(g), pt.row(g))?);
    }
    if opts.correction == Correction::BenjaminiHochberg {
        pvalues = benjamini_hochberg(&pvalues);
    }
    let deg_mask = pvalues.iter().map(|&p| p < opts.alpha).collect();
    let delta = perturbed
        .col_means()
        .sub(&control.col_means())?
        .into_vec();
    Ok(DegEntry {
        pvalues,
        deg_mask,
        delta,
    })
}

pub fn compute_degs(dataset: &PerturbationDataset, opts: &DegOptions) -> Result<DegTable> {
    compute_degs_for(dataset, &dataset.perturbation_names(), opts)
}

/// DEG table over `names` only; no other perturbation block is read.
pub fn compute_degs_for(
    dataset: &PerturbationDataset,
    names: &[String],
    opts: &DegOptions,
) -> Result<DegTable> {
    let control = &dataset.control().values;
    let perturbations = names
        .par_iter()
        .map(|name| {
            let block = dataset.block(name)?;
            Ok((name.clone(), deg_entry(control, &block.values, opts)?))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    Ok(DegTable {
        alpha: opts.alpha,
        test: WELCH_TEST.to_string(),
        correction: opts.correction,
        perturbations,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stratum {
    Small,
    Medium,
    Large,
}

impl Stratum {
    pub const ALL: [Stratum; 3] = [Stratum::Small, Stratum::Medium, Stratum::Large];

    /// `< 0.05` small, `[0.05, 0.10]` medium, `> 0.10` large.
    pub fn from_fraction(fraction: f64) -> Self {
        if fraction < 0.05 {
            Stratum::Small
        } else if fraction <= 0.10 {
            Stratum::Medium
        } else {
            Stratum::Large
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Stratum::Small => "small",
            Stratum::Medium => "medium",
            Stratum::Large => "large",
        }
    }
}

impl fmt::Display for Stratum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub fn effect_size_strata(table: &DegTable) -> BTreeMap<String, Stratum> {
    table
        .perturbations
        .iter()
        .map(|(name, e)| {
            let fraction = e.deg_count() as f64 / e.deg_mask.len().max(1) as f64;
            (name.clone(), Stratum::from_fraction(fraction))
        })
        .collect()
}
