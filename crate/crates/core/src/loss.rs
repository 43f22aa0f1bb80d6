//! Reconstruction, non-DEG Huber and alignment losses, value-level and on
//! the tape.

use serde::{Deserialize, Serialize};

use crate::data::deg::{DegEntry, DegTable};
use crate::data::stats::population_std;
use crate::error::{Error, Result};
use crate::model::{BatchTape, Model};
use crate::numerics::matrix::{huber, NORM_FLOOR};
use crate::numerics::{Matrix, NodeId, Tape};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_non: f64,
    pub lambda_align: f64,
    /// Huber threshold `δ`; set from the training data before use.
    pub delta: f64,
    /// `c` in `δ = c · std(non-DEG deltas)`.
    pub delta_scale: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_non: 0.01,
            lambda_align: 0.1,
            delta: 1.0,
            delta_scale: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_non", self.lambda_non),
            ("lambda_align", self.lambda_align),
            ("delta_scale", self.delta_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::Config(format!("huber delta must be positive, got {}", self.delta)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub recon: f64,
    pub non_deg: f64,
    pub align: f64,
    pub total: f64,
}

/// Mean squared error over genes.
pub fn recon_loss(x_hat: &[f64], x_pert: &[f64]) -> Result<f64> {
    if x_hat.len() != x_pert.len() || x_hat.is_empty() {
        return Err(Error::dim(
            "recon_loss",
            format!("{} vs {} genes", x_hat.len(), x_pert.len()),
        ));
    }
    Ok(x_hat
        .iter()
        .zip(x_pert)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / x_hat.len() as f64)
}

/// `δ = c · σ`, with `σ` the population std of every non-DEG delta in `table`.
///
/// Pass a table built from training perturbations only. Zero spread is a
/// degenerate-input error; callers fall back to `δ = 1`.
pub fn estimate_huber_delta(table: &DegTable, c: f64) -> Result<f64> {
    let pool: Vec<f64> = table
        .perturbations
        .values()
        .flat_map(|e| e.non_degs().into_iter().map(move |i| e.delta[i]))
        .collect();
    if pool.is_empty() {
        return Err(Error::Usage("no non-DEG deltas to estimate the Huber threshold".into()));
    }
    let delta = c * population_std(&pool);
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::Degenerate(format!(
            "Huber threshold {delta} from {} non-DEG deltas",
            pool.len()
        )));
    }
    Ok(delta)
}

/// Mean Huber penalty of `x̂_i − x̄_c,i` over the non-DEG genes; 0 when there are none.
pub fn non_deg_loss(x_hat: &[f64], control: &[f64], non_degs: &[usize], delta: f64) -> f64 {
    if non_degs.is_empty() {
        return 0.0;
    }
    non_degs
        .iter()
        .map(|&i| huber(x_hat[i] - control[i], delta))
        .sum::<f64>()
        / non_degs.len() as f64
}

/// `y` keeps the deltas of DEGs and zeroes every other gene.
pub fn masked_delta(entry: &DegEntry) -> Vec<f64> {
    entry
        .delta
        .iter()
        .zip(&entry.deg_mask)
        .map(|(&d, &m)| if m { d } else { 0.0 })
        .collect()
}

/// `‖z/‖z‖ − t/‖t‖‖²` with `t = g y`; 0 when either norm is at most 1e-12.
pub fn align_loss(z_context: &[f64], y: &[f64], head: &Matrix) -> Result<f64> {
    let t = Matrix::row_vector(y.to_vec()).matmul_t(head)?;
    let z = Matrix::row_vector(z_context.to_vec());
    if t.len() != z.len() {
        return Err(Error::dim("align_loss", format!("z has {} entries, t {}", z.len(), t.len())));
    }
    let (nz, nt) = (z.norm(), t.norm());
    if nz <= NORM_FLOOR || nt <= NORM_FLOOR {
        return Ok(0.0);
    }
    Ok(z.data()
        .iter()
        .zip(t.data())
        .map(|(a, b)| {
            let d = a / nz - b / nt;
            d * d
        })
        .sum())
}

pub fn total_loss(recon: f64, non_deg: f64, align: f64, weights: &LossWeights) -> f64 {
    recon + weights.lambda_non * non_deg + weights.lambda_align * align
}

// Tape builders.

pub fn tape_recon(t: &mut Tape, x_hat: NodeId, x_pert: &[f64]) -> Result<NodeId> {
    let target = t.constant(Matrix::row_vector(x_pert.to_vec()));
    t.mse(x_hat, target)
}

pub fn tape_non_deg(
    t: &mut Tape,
    x_hat: NodeId,
    control: &[f64],
    non_degs: &[usize],
    delta: f64,
) -> Result<NodeId> {
    if non_degs.is_empty() {
        return Ok(t.constant(Matrix::scalar(0.0)));
    }
    let n = control.len();
    let mut gather = Matrix::zeros(n, non_degs.len());
    for (j, &i) in non_degs.iter().enumerate() {
        gather.set(i, j, 1.0);
    }
    let gather = t.constant(gather);
    let picked = t.matmul(x_hat, gather)?;
    let offset = t.constant(Matrix::row_vector(non_degs.iter().map(|&i| -control[i]).collect()));
    let r = t.add(picked, offset)?;
    let h = t.huber(r, delta)?;
    t.mean_all(h)
}

pub fn tape_align(t: &mut Tape, z_context: NodeId, y: &[f64], head: NodeId) -> Result<NodeId> {
    let y = t.constant(Matrix::row_vector(y.to_vec()));
    let head_t = t.transpose(head)?;
    let target = t.matmul(y, head_t)?;
    t.cosine_distance(z_context, target)
}

/// Per-perturbation targets of one batch item.
#[derive(Clone, Copy, Debug)]
pub struct LossTarget<'a> {
    /// Perturbed pseudobulk `x̄_p`.
    pub x_pert: &'a [f64],
    /// Control pseudobulk `x̄_c`.
    pub control: &'a [f64],
    pub deg: &'a DegEntry,
}

/// Tape nodes of the batch-mean loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossNodes {
    pub total: NodeId,
    pub recon: NodeId,
    pub non_deg: NodeId,
    /// Absent without the context path.
    pub align: Option<NodeId>,
}

/// Adds the batch-mean objective to `batch.tape`. Terms with a zero weight
/// are reported but not wired into the total, and the alignment term needs
/// a context path.
pub fn batch_loss(
    batch: &mut BatchTape,
    model: &Model,
    targets: &[LossTarget],
    weights: &LossWeights,
) -> Result<(LossNodes, LossComponents)> {
    if targets.len() != batch.outputs.len() || targets.is_empty() {
        return Err(Error::Usage(format!(
            "{} loss targets for {} batch outputs",
            targets.len(),
            batch.outputs.len()
        )));
    }
    let head = model
        .params
        .index_of("align.head")
        .map(|i| batch.params[i]);
    let t = &mut batch.tape;
    let mut recon = Vec::new();
    let mut non = Vec::new();
    let mut align = Vec::new();
    for (out, target) in batch.outputs.iter().zip(targets) {
        recon.push(tape_recon(t, out.x_hat, target.x_pert)?);
        non.push(tape_non_deg(
            t,
            out.x_hat,
            target.control,
            &target.deg.non_degs(),
            weights.delta,
        )?);
        if let (Some(z), Some(head)) = (out.z_context, head) {
            align.push(tape_align(t, z, &masked_delta(target.deg), head)?);
        }
    }
    let b = targets.len() as f64;
    let mean_of = |t: &mut Tape, nodes: &[NodeId]| -> Result<Option<NodeId>> {
        let Some((&first, rest)) = nodes.split_first() else {
            return Ok(None);
        };
        let mut acc = first;
        for &n in rest {
            acc = t.add(acc, n)?;
        }
        Ok(Some(t.scale(acc, 1.0 / b)?))
    };
    let recon = mean_of(t, &recon)?.expect("nonempty batch");
    let non = mean_of(t, &non)?.expect("nonempty batch");
    let align = mean_of(t, &align)?;

    let mut total = recon;
    if weights.lambda_non > 0.0 {
        let term = t.scale(non, weights.lambda_non)?;
        total = t.add(total, term)?;
    }
    if let Some(a) = align.filter(|_| weights.lambda_align > 0.0) {
        let term = t.scale(a, weights.lambda_align)?;
        total = t.add(total, term)?;
    }
    let value = |id: NodeId| t.value(id).data()[0];
    let components = LossComponents {
        recon: value(recon),
        non_deg: value(non),
        align: align.map_or(0.0, value),
        total: value(total),
    };
    let nodes = LossNodes {
        total,
        recon,
        non_deg: non,
        align,
    };
    Ok((nodes, components))
}
