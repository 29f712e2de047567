//! Training objectives: masked reconstruction MSE, the correlation-aware
//! contrastive loss, the classical supervised-contrastive baseline, and the
//! combined objective.
//!
//! The contrastive loss reconstructs each anchor from its positives and its
//! negatives by similarity-softmax weights, then pulls the anchor toward
//! the positively-correlated point (L1) and pushes it away from the
//! negatively-correlated one (margin-1 hinge on the L1 distance). Anchors
//! with an empty positive or negative set drop that term.
//!
//! All losses are built on the autodiff tape, so the values the public
//! functions return and the gradients training consumes come from one code
//! path.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autograd::{row_mat, Mat, Tape, Var};
use crate::error::{MvccError, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ContrastiveConfig {
    /// Softmax temperature for the correlation weights.
    pub tau: f64,
    /// Weight of the contrastive term in the combined objective.
    pub lambda: f64,
    /// L2-normalize embeddings before all distance computations. Keeps the
    /// L1 distances bounded so the hinge margin of 1 is meaningful.
    pub normalize_embeddings: bool,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            tau: 0.1,
            lambda: 0.1,
            normalize_embeddings: true,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(MvccError::Config(format!("tau {} must be > 0", self.tau)));
        }
        if self.lambda < 0.0 {
            return Err(MvccError::Config(format!(
                "lambda {} must be >= 0",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Per-clip high-level representations with their labels.
#[derive(Debug, Clone)]
pub struct EmbeddingBatch {
    pub embeddings: Mat,
    pub labels: Vec<u8>,
}

impl EmbeddingBatch {
    pub fn new(embeddings: Mat, labels: Vec<u8>) -> Result<Self> {
        if embeddings.nrows() != labels.len() {
            return Err(MvccError::Contract(
                "one label per embedding row required".into(),
            ));
        }
        if embeddings.nrows() == 0 {
            return Err(MvccError::Domain("embedding batch must be nonempty".into()));
        }
        if embeddings.iter().any(|v| !v.is_finite()) {
            return Err(MvccError::Domain("embeddings must be finite".into()));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(MvccError::Data("labels must be 0 or 1".into()));
        }
        Ok(EmbeddingBatch { embeddings, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Cosine similarity; errors on a zero vector.
pub fn similarity(y: &[f64], z: &[f64]) -> Result<f64> {
    if y.len() != z.len() {
        return Err(MvccError::Contract("similarity needs equal dims".into()));
    }
    let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nz = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    if ny == 0.0 || nz == 0.0 {
        return Err(MvccError::Domain("similarity of a zero vector".into()));
    }
    let dot: f64 = y.iter().zip(z).map(|(a, b)| a * b).sum();
    Ok(dot / (ny * nz))
}

/// Mean squared error over reconstructed masked-token pixels; 0 for an
/// empty masked set.
pub fn masked_mse(reconstructed: &Mat, target: &Mat) -> Result<f64> {
    if reconstructed.raw_dim() != target.raw_dim() {
        return Err(MvccError::Contract(format!(
            "masked_mse shapes differ: {:?} vs {:?}",
            reconstructed.shape(),
            target.shape()
        )));
    }
    let mut tape = Tape::new();
    let r = tape.leaf(reconstructed.clone());
    let loss = tape.mse_vs_const(r, Rc::new(target.clone()));
    Ok(tape.scalar(loss))
}

/// Similarity-softmax weights and the implied correlated representation
/// over a set of rows. `sim` is cosine; the combination uses raw rows.
fn correlated_on_tape(tape: &mut Tape, anchor: Var, set: Var, tau: f64) -> (Var, Var) {
    let qn = tape.normalize_rows(anchor);
    let kn = tape.normalize_rows(set);
    let knt = tape.transpose(kn);
    let sims = tape.matmul(qn, knt);
    let scaled = tape.scale(sims, 1.0 / tau);
    let weights = tape.softmax_rows(scaled);
    let combined = tape.matmul(weights, set);
    (weights, combined)
}

fn check_correlated_inputs(q: &[f64], set: &Mat, tau: f64) -> Result<()> {
    if set.nrows() == 0 {
        return Err(MvccError::Domain(
            "correlated representation of an empty set".into(),
        ));
    }
    if set.ncols() != q.len() {
        return Err(MvccError::Contract("anchor and set dims differ".into()));
    }
    if !(tau > 0.0) {
        return Err(MvccError::Config(format!("tau {tau} must be > 0")));
    }
    if q.iter().map(|v| v * v).sum::<f64>() == 0.0 {
        return Err(MvccError::Domain("zero anchor vector".into()));
    }
    for row in set.rows() {
        if row.iter().map(|v| v * v).sum::<f64>() == 0.0 {
            return Err(MvccError::Domain("zero vector in correlation set".into()));
        }
    }
    Ok(())
}

/// Positively-correlated representation: weights `a = softmax(sim/tau)`
/// over the positives and `q_hat = sum a_i k_i`.
pub fn correlated_positive(q: &[f64], positives: &Mat, tau: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    check_correlated_inputs(q, positives, tau)?;
    let mut tape = Tape::new();
    let anchor = tape.leaf(row_mat(q));
    let set = tape.leaf(positives.clone());
    let (weights, qhat) = correlated_on_tape(&mut tape, anchor, set, tau);
    Ok((
        tape.value(qhat).iter().copied().collect(),
        tape.value(weights).iter().copied().collect(),
    ))
}

/// Negatively-correlated representation; identical contract over the
/// negative set.
pub fn correlated_negative(q: &[f64], negatives: &Mat, tau: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    correlated_positive(q, negatives, tau)
}

/// Sum-reduced L1 attraction toward the positively-correlated point.
pub fn l_pull(q: &[f64], q_hat: &[f64]) -> f64 {
    q.iter().zip(q_hat).map(|(a, b)| (a - b).abs()).sum()
}

/// Margin-1 hinge on the L1 distance to the negatively-correlated point.
pub fn l_push(q: &[f64], q_check: &[f64]) -> f64 {
    (1.0 - l_pull(q, q_check)).max(0.0)
}

/// Nodes of the contrastive loss for one batch of anchors already on a
/// tape; training backpropagates through `loss`.
pub struct ConLossNodes {
    pub loss: Var,
    pub pull_mean: f64,
    pub push_mean: f64,
}

/// Build the correlation-aware contrastive loss over per-anchor vars
/// (each 1 x D). Per anchor the positives are the same-label rows
/// excluding itself, negatives the different-label rows; empty sets drop
/// their term; the batch loss is the mean over anchors with at least one
/// surviving term.
pub fn lcon_on_tape(
    tape: &mut Tape,
    anchors: &[Var],
    labels: &[u8],
    cfg: &ContrastiveConfig,
) -> Result<ConLossNodes> {
    cfg.validate()?;
    let b = anchors.len();
    if b < 2 {
        return Err(MvccError::Domain(format!(
            "contrastive loss needs a batch of >= 2, got {b}"
        )));
    }
    if labels.len() != b {
        return Err(MvccError::Contract("one label per anchor required".into()));
    }
    for &a in anchors {
        let v = tape.value(a);
        if v.nrows() != 1 {
            return Err(MvccError::Contract("anchors must be row vectors".into()));
        }
        if v.iter().map(|x| x * x).sum::<f64>() == 0.0 {
            return Err(MvccError::Domain("zero embedding in batch".into()));
        }
    }

    let stacked = tape.concat_rows(anchors.to_vec());
    let base = if cfg.normalize_embeddings {
        tape.normalize_rows(stacked)
    } else {
        stacked
    };

    let mut per_anchor = Vec::with_capacity(b);
    let mut pulls = Vec::new();
    let mut pushes = Vec::new();
    for i in 0..b {
        let pos_idx: Vec<usize> = (0..b).filter(|&j| j != i && labels[j] == labels[i]).collect();
        let neg_idx: Vec<usize> = (0..b).filter(|&j| labels[j] != labels[i]).collect();
        let anchor = tape.gather_rows(base, Rc::new(vec![i]));

        let mut terms = Vec::new();
        if !pos_idx.is_empty() {
            let set = tape.gather_rows(base, Rc::new(pos_idx));
            let (_, qhat) = correlated_on_tape(tape, anchor, set, cfg.tau);
            let diff = tape.sub(anchor, qhat);
            let dist = tape.abs(diff);
            let pull = tape.sum_all(dist);
            pulls.push(tape.scalar(pull));
            terms.push(pull);
        }
        if !neg_idx.is_empty() {
            let set = tape.gather_rows(base, Rc::new(neg_idx));
            let (_, qcheck) = correlated_on_tape(tape, anchor, set, cfg.tau);
            let diff = tape.sub(anchor, qcheck);
            let dist = tape.abs(diff);
            let l1 = tape.sum_all(dist);
            let neg = tape.scale(l1, -1.0);
            let margin = tape.add_const(neg, 1.0);
            let push = tape.relu(margin);
            pushes.push(tape.scalar(push));
            terms.push(push);
        }
        if let Some(total) = sum_vars(tape, &terms) {
            per_anchor.push(total);
        }
    }
    let count = per_anchor.len();
    let summed = sum_vars(tape, &per_anchor)
        .ok_or_else(|| MvccError::Domain("no anchor contributed a term".into()))?;
    let loss = tape.scale(summed, 1.0 / count as f64);
    Ok(ConLossNodes {
        loss,
        pull_mean: mean_or_zero(&pulls),
        push_mean: mean_or_zero(&pushes),
    })
}

fn sum_vars(tape: &mut Tape, vars: &[Var]) -> Option<Var> {
    let mut it = vars.iter().copied();
    let first = it.next()?;
    Some(it.fold(first, |acc, v| tape.add(acc, v)))
}

fn mean_or_zero(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Value of the correlation-aware contrastive loss for a batch.
pub fn l_con(batch: &EmbeddingBatch, cfg: &ContrastiveConfig) -> Result<f64> {
    let mut tape = Tape::new();
    let anchors: Vec<Var> = (0..batch.len())
        .map(|i| tape.leaf(batch.embeddings.row(i).insert_axis(ndarray::Axis(0)).to_owned()))
        .collect();
    let nodes = lcon_on_tape(&mut tape, &anchors, &batch.labels, cfg)?;
    Ok(tape.scalar(nodes.loss))
}

/// Classical supervised contrastive loss over per-anchor vars: for each
/// anchor with at least one positive, the mean over its positives of
/// `-log softmax(sim/tau)` against all non-anchor rows; anchors without
/// positives are skipped.
pub fn supcon_on_tape(
    tape: &mut Tape,
    anchors: &[Var],
    labels: &[u8],
    tau: f64,
    normalize: bool,
) -> Result<Var> {
    let b = anchors.len();
    if b < 2 {
        return Err(MvccError::Domain(format!(
            "supervised contrastive loss needs a batch of >= 2, got {b}"
        )));
    }
    if !(tau > 0.0) {
        return Err(MvccError::Config(format!("tau {tau} must be > 0")));
    }
    let stacked = tape.concat_rows(anchors.to_vec());
    let base = if normalize {
        tape.normalize_rows(stacked)
    } else {
        stacked
    };
    let unit = tape.normalize_rows(base);

    let mut per_anchor = Vec::new();
    for i in 0..b {
        let others: Vec<usize> = (0..b).filter(|&j| j != i).collect();
        let pos_cols: Vec<usize> = others
            .iter()
            .enumerate()
            .filter(|(_, &j)| labels[j] == labels[i])
            .map(|(col, _)| col)
            .collect();
        if pos_cols.is_empty() {
            continue;
        }
        let anchor = tape.gather_rows(unit, Rc::new(vec![i]));
        let cand = tape.gather_rows(unit, Rc::new(others));
        let candt = tape.transpose(cand);
        let sims = tape.matmul(anchor, candt);
        let logits = tape.scale(sims, 1.0 / tau);
        let logsm = tape.log_softmax_rows(logits);
        let pos_terms = tape.gather_cols(logsm, Rc::new(pos_cols));
        let mean_pos = tape.mean_all(pos_terms);
        per_anchor.push(tape.scale(mean_pos, -1.0));
    }
    if per_anchor.is_empty() {
        return Err(MvccError::Domain(
            "no anchor has a positive; supervised contrastive loss undefined".into(),
        ));
    }
    let count = per_anchor.len();
    let summed = sum_vars(tape, &per_anchor).unwrap();
    Ok(tape.scale(summed, 1.0 / count as f64))
}

/// Value of the supervised-contrastive baseline for a batch.
pub fn supcon_baseline(batch: &EmbeddingBatch, tau: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let anchors: Vec<Var> = (0..batch.len())
        .map(|i| tape.leaf(batch.embeddings.row(i).insert_axis(ndarray::Axis(0)).to_owned()))
        .collect();
    let loss = supcon_on_tape(&mut tape, &anchors, &batch.labels, tau, true)?;
    Ok(tape.scalar(loss))
}

/// Mean cross-entropy of logits against labels.
pub fn cross_entropy(logits: &Mat, labels: &[u8]) -> Result<f64> {
    if logits.nrows() != labels.len() {
        return Err(MvccError::Contract("one label per logit row required".into()));
    }
    let mut tape = Tape::new();
    let z = tape.leaf(logits.clone());
    let idx: Rc<Vec<usize>> = Rc::new(labels.iter().map(|&l| l as usize).collect());
    let loss = tape.cross_entropy_mean(z, idx);
    Ok(tape.scalar(loss))
}

/// Per-step loss components, logged as one JSON line each step.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LossComponents {
    pub l_cls: f64,
    pub l_pull_mean: f64,
    pub l_push_mean: f64,
    pub l_con: f64,
    pub total: f64,
}

/// Combined objective: cross-entropy plus `lambda` times the contrastive
/// term.
pub fn total_loss(
    logits: &Mat,
    labels: &[u8],
    batch: &EmbeddingBatch,
    cfg: &ContrastiveConfig,
) -> Result<(f64, LossComponents)> {
    cfg.validate()?;
    let l_cls = cross_entropy(logits, labels)?;
    let (l_con_val, pull_mean, push_mean) = if cfg.lambda == 0.0 {
        (0.0, 0.0, 0.0)
    } else {
        let mut tape = Tape::new();
        let anchors: Vec<Var> = (0..batch.len())
            .map(|i| tape.leaf(batch.embeddings.row(i).insert_axis(ndarray::Axis(0)).to_owned()))
            .collect();
        let nodes = lcon_on_tape(&mut tape, &anchors, &batch.labels, cfg)?;
        (tape.scalar(nodes.loss), nodes.pull_mean, nodes.push_mean)
    };
    let total = l_cls + cfg.lambda * l_con_val;
    Ok((
        total,
        LossComponents {
            l_cls,
            l_pull_mean: pull_mean,
            l_push_mean: push_mean,
            l_con: l_con_val,
            total,
        },
    ))
}
