//! Evaluation metrics on expression deltas and their aggregate report.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::deg::{deg_entry, DegEntry, DegOptions, Stratum};
use crate::error::{Error, Result};
use crate::graph::GeneVocab;
use crate::numerics::Matrix;

fn check_pair(op: &'static str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::dim(op, format!("{} vs {} entries", a.len(), b.len())));
    }
    Ok(())
}

/// Pearson correlation of predicted and true deltas.
pub fn pearson_delta(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair("pearson_delta", pred, truth)?;
    if pred.len() < 2 {
        return Err(Error::Degenerate(format!("correlation of {} value(s)", pred.len())));
    }
    let n = pred.len() as f64;
    let (mp, mt) = (pred.iter().sum::<f64>() / n, truth.iter().sum::<f64>() / n);
    let (mut cov, mut vp, mut vt) = (0.0, 0.0, 0.0);
    for (p, t) in pred.iter().zip(truth) {
        let (a, b) = (p - mp, t - mt);
        cov += a * b;
        vp += a * a;
        vt += b * b;
    }
    if vp == 0.0 || vt == 0.0 {
        return Err(Error::Degenerate("correlation with a constant vector".into()));
    }
    Ok((cov / (vp * vt).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the mean of their positions.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Weighted Pearson correlation.
pub fn weighted_pearson(x: &[f64], y: &[f64], w: &[f64]) -> Result<f64> {
    check_pair("weighted_pearson", x, y)?;
    check_pair("weighted_pearson", x, w)?;
    if x.len() < 2 {
        return Err(Error::Degenerate(format!("correlation of {} value(s)", x.len())));
    }
    if w.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
        return Err(Error::Usage("weights must be finite and >= 0".into()));
    }
    let sw: f64 = w.iter().sum();
    if sw == 0.0 {
        return Err(Error::Degenerate("all weights are zero".into()));
    }
    let mx = x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let my = y.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let (mut cov, mut vx, mut vy) = (0.0, 0.0, 0.0);
    for ((a, b), wi) in x.iter().zip(y).zip(w) {
        let (da, db) = (a - mx, b - my);
        cov += wi * da * db;
        vx += wi * da * da;
        vy += wi * db * db;
    }
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::Degenerate("correlation with a constant vector".into()));
    }
    Ok((cov / (vx * vy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman correlation over the DEGs (average ranks for ties).
pub fn de_spearman_sig(pred_deg: &[f64], true_deg: &[f64]) -> Result<f64> {
    check_pair("de_spearman_sig", pred_deg, true_deg)?;
    let ones = vec![1.0; pred_deg.len()];
    weighted_pearson(&average_ranks(pred_deg), &average_ranks(true_deg), &ones)
}

/// Weighted Pearson on average ranks with weights `|Δx_D|`.
///
/// Equal weights are replaced by ones, so the uniform case reproduces
/// [`de_spearman_sig`] bit for bit.
pub fn de_spearman_lfc(pred_deg: &[f64], true_deg: &[f64], weights: &[f64]) -> Result<f64> {
    check_pair("de_spearman_lfc", pred_deg, true_deg)?;
    check_pair("de_spearman_lfc", pred_deg, weights)?;
    if weights.iter().all(|&w| w == 0.0) {
        return Err(Error::Degenerate("all LFC weights are zero".into()));
    }
    let uniform;
    let w = if weights.iter().all(|&w| w == weights[0]) {
        uniform = vec![1.0; weights.len()];
        &uniform
    } else {
        weights
    };
    weighted_pearson(&average_ranks(pred_deg), &average_ranks(true_deg), w)
}

/// Rank and score of each prediction against every true delta.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PdsEntry {
    pub rank: usize,
    pub score: f64,
}

/// `r_p = 1 + #{t ≠ p : ‖Δx̂_p − Δx_t‖₁ < ‖Δx̂_p − Δx_p‖₁}`, `PDS_p = 1 − (r_p − 1)/|T|`.
pub fn pds(pred: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<Vec<PdsEntry>> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::dim(
            "pds",
            format!("{} predictions, {} truths", pred.len(), truth.len()),
        ));
    }
    let n = pred[0].len();
    if pred.iter().chain(truth).any(|v| v.len() != n) {
        return Err(Error::dim("pds", "delta vectors differ in length"));
    }
    let l1 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>();
    let size = pred.len();
    Ok(pred
        .iter()
        .enumerate()
        .map(|(p, pv)| {
            let own = l1(pv, &truth[p]);
            let closer = (0..size)
                .filter(|&t| t != p && l1(pv, &truth[t]) < own)
                .count();
            let rank = 1 + closer;
            PdsEntry {
                rank,
                score: 1.0 - (rank - 1) as f64 / size as f64,
            }
        })
        .collect())
}

/// `|G_true ∩ G_pred| / |G_true|`; `None` for an empty truth set.
pub fn des_fdr(g_true: &[usize], g_pred: &[usize]) -> Option<f64> {
    if g_true.is_empty() {
        return None;
    }
    let hits = g_true.iter().filter(|g| g_pred.contains(g)).count();
    Some(hits as f64 / g_true.len() as f64)
}

/// Genes in descending `|Δx̂|`, ties to the lower index.
pub fn rank_by_magnitude(pred_delta: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..pred_delta.len()).collect();
    order.sort_by(|&a, &b| {
        pred_delta[b]
            .abs()
            .total_cmp(&pred_delta[a].abs())
            .then(a.cmp(&b))
    });
    order
}

/// `|top_k ∩ G_true| / min(k, |G_true|)`; `None` for an empty truth set or `k = 0`.
pub fn des_at_k(pred_delta: &[f64], g_true: &[usize], k: usize) -> Option<f64> {
    if g_true.is_empty() || k == 0 {
        return None;
    }
    let top = rank_by_magnitude(pred_delta);
    let hits = top
        .iter()
        .take(k)
        .filter(|g| g_true.contains(g))
        .count();
    Some(hits as f64 / k.min(g_true.len()) as f64)
}

fn sign(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

/// Fraction of DEGs whose predicted and true signs agree (`sign(0) = 0`).
pub fn direction_match(pred_deg: &[f64], true_deg: &[f64]) -> Option<f64> {
    if pred_deg.is_empty() || pred_deg.len() != true_deg.len() {
        return None;
    }
    let agree = pred_deg
        .iter()
        .zip(true_deg)
        .filter(|(p, t)| sign(**p) == sign(**t))
        .count();
    Some(agree as f64 / pred_deg.len() as f64)
}

/// Predicted DEG set: the observed perturbed cells are shifted so their mean
/// equals `x̂`, then tested against control with the truth's settings.
pub fn predicted_degs(
    control: &Matrix,
    perturbed: &Matrix,
    x_hat: &[f64],
    opts: &DegOptions,
) -> Result<Vec<usize>> {
    let observed = perturbed.col_means();
    if observed.len() != x_hat.len() {
        return Err(Error::dim(
            "predicted_degs",
            format!("{} genes vs prediction of {}", observed.len(), x_hat.len()),
        ));
    }
    let shift: Vec<f64> = x_hat.iter().zip(observed.data()).map(|(a, b)| a - b).collect();
    let mut shifted = perturbed.clone();
    for r in 0..shifted.rows() {
        for (v, s) in shifted.row_mut(r).iter_mut().zip(&shift) {
            *v += s;
        }
    }
    Ok(deg_entry(control, &shifted, opts)?.degs())
}

/// Everything needed to score one held-out perturbation.
#[derive(Clone, Debug)]
pub struct EvalItem<'a> {
    pub name: String,
    pub pred_delta: Vec<f64>,
    pub truth: &'a DegEntry,
    pub g_pred: Vec<usize>,
    pub stratum: Stratum,
}

pub const PEARSON_DELTA: &str = "pearson_delta";
pub const PDS: &str = "pds";
pub const DES_FDR: &str = "des_fdr";
pub const DE_SPEARMAN_SIG: &str = "de_spearman_sig";
pub const DE_SPEARMAN_LFC: &str = "de_spearman_lfc";
pub const DIRECTION_MATCH: &str = "direction_match";

pub fn des_at_k_name(k: usize) -> String {
    format!("des_at_{k}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub n: usize,
    /// Perturbations for which the metric is undefined.
    pub excluded: usize,
}

impl Summary {
    pub fn of(values: &[Option<f64>]) -> Option<Summary> {
        let defined: Vec<f64> = values.iter().flatten().copied().collect();
        if defined.is_empty() {
            return None;
        }
        let n = defined.len() as f64;
        let mean = defined.iter().sum::<f64>() / n;
        let var = defined.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Some(Summary {
            mean,
            std: var.sqrt(),
            n: defined.len(),
            excluded: values.len() - defined.len(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PertMetrics {
    pub stratum: Stratum,
    pub deg_count: usize,
    pub pds_rank: usize,
    /// `None` marks a metric undefined for this perturbation.
    #[serde(flatten)]
    pub values: BTreeMap<String, Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub overall: BTreeMap<String, Summary>,
    pub strata: BTreeMap<String, BTreeMap<String, Summary>>,
    pub per_perturbation: BTreeMap<String, PertMetrics>,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn mean(&self, metric: &str) -> Option<f64> {
        self.overall.get(metric).map(|s| s.mean)
    }
}

/// Per-perturbation values for every metric of `items`.
pub fn score_items(items: &[EvalItem], ks: &[usize]) -> Result<BTreeMap<String, PertMetrics>> {
    let preds: Vec<Vec<f64>> = items.iter().map(|i| i.pred_delta.clone()).collect();
    let truths: Vec<Vec<f64>> = items.iter().map(|i| i.truth.delta.clone()).collect();
    let pds_entries = if items.is_empty() { Vec::new() } else { pds(&preds, &truths)? };
    let mut out = BTreeMap::new();
    for (item, pe) in items.iter().zip(&pds_entries) {
        let truth = &item.truth.delta;
        let degs = item.truth.degs();
        let pd: Vec<f64> = degs.iter().map(|&g| item.pred_delta[g]).collect();
        let td: Vec<f64> = degs.iter().map(|&g| truth[g]).collect();
        let weights: Vec<f64> = td.iter().map(|v| v.abs()).collect();
        let mut values = BTreeMap::new();
        values.insert(PEARSON_DELTA.to_string(), pearson_delta(&item.pred_delta, truth).ok());
        values.insert(PDS.to_string(), Some(pe.score));
        values.insert(DES_FDR.to_string(), des_fdr(&degs, &item.g_pred));
        for &k in ks {
            values.insert(des_at_k_name(k), des_at_k(&item.pred_delta, &degs, k));
        }
        values.insert(DE_SPEARMAN_SIG.to_string(), de_spearman_sig(&pd, &td).ok());
        values.insert(DE_SPEARMAN_LFC.to_string(), de_spearman_lfc(&pd, &td, &weights).ok());
        values.insert(DIRECTION_MATCH.to_string(), direction_match(&pd, &td));
        out.insert(
            item.name.clone(),
            PertMetrics {
                stratum: item.stratum,
                deg_count: degs.len(),
                pds_rank: pe.rank,
                values,
            },
        );
    }
    Ok(out)
}

/// Mean ± population std of each metric, overall and per stratum.
pub fn report(per_perturbation: BTreeMap<String, PertMetrics>) -> MetricsReport {
    let names: Vec<String> = per_perturbation
        .values()
        .next()
        .map(|m| m.values.keys().cloned().collect())
        .unwrap_or_default();
    let summarize = |filter: &dyn Fn(&PertMetrics) -> bool| {
        let mut out = BTreeMap::new();
        for name in &names {
            let vals: Vec<Option<f64>> = per_perturbation
                .values()
                .filter(|m| filter(m))
                .map(|m| m.values.get(name).copied().flatten())
                .collect();
            if let Some(s) = Summary::of(&vals) {
                out.insert(name.clone(), s);
            }
        }
        out
    };
    let overall = summarize(&|_| true);
    let mut strata = BTreeMap::new();
    for s in Stratum::ALL {
        strata.insert(s.as_str().to_string(), summarize(&|m: &PertMetrics| m.stratum == s));
    }
    MetricsReport {
        overall,
        strata,
        per_perturbation,
    }
}

/// `gene,delta_true,delta_pred,is_deg` rows in vocabulary order.
pub fn write_scatter(
    path: impl AsRef<Path>,
    vocab: &GeneVocab,
    truth: &DegEntry,
    pred_delta: &[f64],
) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(out, "gene,delta_true,delta_pred,is_deg").map_err(io)?;
    for (i, g) in vocab.names().iter().enumerate() {
        writeln!(
            out,
            "{g},{},{},{}",
            truth.delta[i],
            pred_delta[i],
            u8::from(truth.deg_mask[i])
        )
        .map_err(io)?;
    }
    out.flush().map_err(io)
}
