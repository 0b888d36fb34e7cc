//! Contrastive training objectives: plain triplet and InfoNCE losses, plus
//! adjacency-masked variants that draw every positive/negative decision from
//! a [`SignedAdjacency`] matrix, and dual forms combining the
//! project–freelancer term with a freelancer–freelancer term.
//!
//! All losses exist twice: `*_on_tape` records the computation for gradient
//! descent, and a value-level twin runs the same graph on a throwaway tape
//! and returns the float64 loss (used for reporting and for oracle tests).

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adjacency::{mirror_upper, AdjacencyError, SignedAdjacency};
use crate::numerics::{NumericsError, Tape, Tensor, VarId};

/// Default softmax temperature for InfoNCE-style losses.
pub const DEFAULT_TEMPERATURE: f32 = 0.05;
/// Default margin for triplet-style losses.
pub const DEFAULT_MARGIN: f32 = 1.0;

/// Errors from loss construction.
#[derive(Debug, Error)]
pub enum LossError {
    #[error("temperature must be positive and finite, got {0}")]
    BadTemperature(f32),
    #[error("margin must be non-negative and finite, got {0}")]
    BadMargin(f32),
    #[error("no positive pairs available; the batch carries no supervision")]
    NoPositives,
    #[error("positive index {index} out of range for {candidates} candidates")]
    PositiveOutOfRange { index: usize, candidates: usize },
    #[error("adjacency is {a_rows}×{a_cols} but embeddings give {n} anchors × {m} candidates")]
    AdjacencyShape { a_rows: usize, a_cols: usize, n: usize, m: usize },
    #[error(transparent)]
    Adjacency(#[from] AdjacencyError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// How candidate pairs are scored, together with the scale parameters each
/// scoring style uses: InfoNCE losses read cosine scores of normalized
/// embeddings at temperature `temperature`; triplet losses read Euclidean
/// distances against margin `margin`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMode {
    pub kind: SimilarityKind,
    pub temperature: f32,
    pub margin: f32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityKind {
    CosineScore,
    EuclideanDistance,
}

impl SimilarityMode {
    pub fn cosine(temperature: f32) -> Self {
        SimilarityMode { kind: SimilarityKind::CosineScore, temperature, margin: DEFAULT_MARGIN }
    }

    pub fn euclidean(margin: f32) -> Self {
        SimilarityMode { kind: SimilarityKind::EuclideanDistance, temperature: DEFAULT_TEMPERATURE, margin }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        check_temperature(self.temperature)?;
        check_margin(self.margin)
    }
}

impl Default for SimilarityMode {
    fn default() -> Self {
        SimilarityMode::cosine(DEFAULT_TEMPERATURE)
    }
}

/// A combined loss with its two addends, as recorded tape variables. A term
/// is `None` when its adjacency matrix carried no positive pair, in which
/// case it contributes nothing to `total`.
#[derive(Clone, Copy, Debug)]
pub struct DualLoss {
    pub total: VarId,
    pub project_term: Option<VarId>,
    pub freelancer_term: Option<VarId>,
}

/// Value-level counterpart of [`DualLoss`].
#[derive(Clone, Copy, Debug)]
pub struct DualLossValue {
    pub total: f64,
    pub project_term: Option<f64>,
    pub freelancer_term: Option<f64>,
}

fn check_temperature(tau: f32) -> Result<(), LossError> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(LossError::BadTemperature(tau))
    }
}

fn check_margin(margin: f32) -> Result<(), LossError> {
    if margin >= 0.0 && margin.is_finite() {
        Ok(())
    } else {
        Err(LossError::BadMargin(margin))
    }
}

fn check_adjacency_shape(a: &SignedAdjacency, n: usize, m: usize) -> Result<(), LossError> {
    let (a_rows, a_cols) = a.shape();
    if (a_rows, a_cols) != (n, m) {
        return Err(LossError::AdjacencyShape { a_rows, a_cols, n, m });
    }
    Ok(())
}

/// Hinge loss of one (anchor, positive, negative) triple of `[1,d]` rows:
/// `max(dist(a,p) − dist(a,n) + margin, 0)` with Euclidean distance.
pub fn triplet_loss_on_tape(
    tape: &mut Tape,
    anchor: VarId,
    positive: VarId,
    negative: VarId,
    margin: f32,
) -> Result<VarId, LossError> {
    check_margin(margin)?;
    let d_ap = tape.pairwise_euclidean(anchor, positive)?;
    let d_an = tape.pairwise_euclidean(anchor, negative)?;
    let diff = tape.sub(d_ap, d_an)?;
    let shifted = tape.add_scalar(diff, margin)?;
    let hinge = tape.relu(shifted)?;
    Ok(tape.sum_all(hinge)?)
}

/// InfoNCE over explicit scores: mean over the positive entries of
/// `−log softmax(scores / temperature)`, the softmax running over all
/// entries of the `[1,m]` score row.
pub fn info_nce_scores_on_tape(
    tape: &mut Tape,
    scores: VarId,
    positives: &[usize],
    temperature: f32,
) -> Result<VarId, LossError> {
    check_temperature(temperature)?;
    let (rows, m) = tape.value(scores).dims2().map_err(LossError::Numerics)?;
    if rows != 1 {
        return Err(LossError::Numerics(NumericsError::shape(
            "info_nce_scores",
            format!("expected a [1,m] score row, got [{rows},{m}]"),
        )));
    }
    let positives: BTreeSet<usize> = positives.iter().copied().collect();
    if positives.is_empty() {
        return Err(LossError::NoPositives);
    }
    if let Some(&bad) = positives.iter().find(|&&i| i >= m) {
        return Err(LossError::PositiveOutOfRange { index: bad, candidates: m });
    }
    let scaled = tape.div_scalar(scores, temperature)?;
    let all = Tensor::new(vec![1.0; m], &[1, m])?;
    let lse = tape.masked_logsumexp_rows(scaled, &all)?;
    let lse = tape.sum_all(lse)?;
    let mut mask = vec![0.0f32; m];
    for &i in &positives {
        mask[i] = 1.0;
    }
    let mask = tape.constant(Tensor::new(mask, &[1, m])?);
    let picked = tape.mul(scaled, mask)?;
    let picked_sum = tape.sum_all(picked)?;
    let mean_positive = tape.div_scalar(picked_sum, positives.len() as f32)?;
    Ok(tape.sub(lse, mean_positive)?)
}

/// InfoNCE of one `[1,d]` anchor against an `[m,d]` candidate matrix:
/// candidates are scored by cosine (both sides are length-normalized first),
/// and `positives` indexes the candidate rows counted as matches.
pub fn info_nce_on_tape(
    tape: &mut Tape,
    anchor: VarId,
    candidates: VarId,
    positives: &[usize],
    temperature: f32,
) -> Result<VarId, LossError> {
    let a_hat = tape.l2_normalize_rows(anchor)?;
    let c_hat = tape.l2_normalize_rows(candidates)?;
    let c_t = tape.transpose(c_hat)?;
    let scores = tape.matmul(a_hat, c_t)?;
    info_nce_scores_on_tape(tape, scores, positives, temperature)
}

/// Adjacency-masked triplet loss: the sum of
/// `max(dist(d,d′) − dist(d,d″) + margin, 0)` over every anchor row `d` and
/// every (positive `d′`, negative `d″`) pair its adjacency row licenses.
/// Materialized anchor by anchor as a masked `[m,m]` difference grid — the
/// row-major layout of the full anchors×candidates×candidates loss tensor.
pub fn a_triplets_on_tape(
    tape: &mut Tape,
    anchors: VarId,
    candidates: VarId,
    adjacency: &SignedAdjacency,
    margin: f32,
) -> Result<VarId, LossError> {
    check_margin(margin)?;
    let (n, _) = tape.value(anchors).dims2().map_err(LossError::Numerics)?;
    let (m, _) = tape.value(candidates).dims2().map_err(LossError::Numerics)?;
    check_adjacency_shape(adjacency, n, m)?;
    let dist = tape.pairwise_euclidean(anchors, candidates)?;
    let mut total: Option<VarId> = None;
    for i in 0..n {
        let pos: Vec<usize> = (0..m).filter(|&j| adjacency.get(i, j) > 0).collect();
        let neg: Vec<usize> = (0..m).filter(|&j| adjacency.get(i, j) < 0).collect();
        if pos.is_empty() || neg.is_empty() {
            continue;
        }
        let row = tape.slice_rows(dist, i, 1)?;
        let row = tape.reshape(row, &[m])?;
        let neg_row = tape.mul_scalar(row, -1.0)?;
        let grid = tape.add_outer(row, neg_row)?;
        let shifted = tape.add_scalar(grid, margin)?;
        let hinge = tape.relu(shifted)?;
        let mut mask = vec![0.0f32; m * m];
        for &p in &pos {
            for &q in &neg {
                mask[p * m + q] = 1.0;
            }
        }
        let mask = tape.constant(Tensor::new(mask, &[m, m])?);
        let masked = tape.mul(hinge, mask)?;
        let part = tape.sum_all(masked)?;
        total = Some(match total {
            None => part,
            Some(t) => tape.add(t, part)?,
        });
    }
    Ok(match total {
        Some(t) => t,
        None => tape.constant(Tensor::scalar(0.0)),
    })
}

/// Dual adjacency-masked triplet loss: the project→freelancer term plus the
/// freelancer→freelancer term. The freelancer matrix is consumed as given —
/// upper-triangular input means each related pair is anchored once.
pub fn dual_a_triplets_on_tape(
    tape: &mut Tape,
    project_emb: VarId,
    freelancer_emb: VarId,
    a_pf: &SignedAdjacency,
    a_ff: &SignedAdjacency,
    margin: f32,
) -> Result<DualLoss, LossError> {
    let pf = a_triplets_on_tape(tape, project_emb, freelancer_emb, a_pf, margin)?;
    let ff = a_triplets_on_tape(tape, freelancer_emb, freelancer_emb, a_ff, margin)?;
    let total = tape.add(pf, ff)?;
    Ok(DualLoss { total, project_term: Some(pf), freelancer_term: Some(ff) })
}

/// Adjacency-masked InfoNCE. For every positive entry `(d, d′)` the loss
/// takes `−log` of the masked softmax over row `d`'s candidates, where the
/// softmax denominator admits exactly the candidates with a nonzero
/// adjacency entry — unknown pairs contribute nothing. Scores are cosine on
/// normalized embeddings scaled by `temperature`; the sum is divided by the
/// number of positive entries.
pub fn a_info_nce_on_tape(
    tape: &mut Tape,
    anchors: VarId,
    candidates: VarId,
    adjacency: &SignedAdjacency,
    temperature: f32,
) -> Result<VarId, LossError> {
    check_temperature(temperature)?;
    let (n, _) = tape.value(anchors).dims2().map_err(LossError::Numerics)?;
    let (m, _) = tape.value(candidates).dims2().map_err(LossError::Numerics)?;
    check_adjacency_shape(adjacency, n, m)?;
    let mut nonzero = vec![0.0f32; n * m];
    let mut positive = vec![0.0f32; n * m];
    let mut counts = vec![0.0f32; n];
    let mut total_positives = 0usize;
    for i in 0..n {
        for j in 0..m {
            let v = adjacency.get(i, j);
            if v != 0 {
                nonzero[i * m + j] = 1.0;
            }
            if v > 0 {
                positive[i * m + j] = 1.0;
                counts[i] += 1.0;
                total_positives += 1;
            }
        }
    }
    if total_positives == 0 {
        return Err(LossError::NoPositives);
    }
    let a_hat = tape.l2_normalize_rows(anchors)?;
    let c_hat = tape.l2_normalize_rows(candidates)?;
    let c_t = tape.transpose(c_hat)?;
    let scores = tape.matmul(a_hat, c_t)?;
    let scaled = tape.div_scalar(scores, temperature)?;
    let nonzero = Tensor::new(nonzero, &[n, m])?;
    let lse = tape.masked_logsumexp_rows(scaled, &nonzero)?;
    let counts = tape.constant(Tensor::new(counts, &[n])?);
    let weighted = tape.mul(lse, counts)?;
    let lse_term = tape.sum_all(weighted)?;
    let positive = tape.constant(Tensor::new(positive, &[n, m])?);
    let picked = tape.mul(scaled, positive)?;
    let positive_term = tape.sum_all(picked)?;
    let numerator = tape.sub(lse_term, positive_term)?;
    Ok(tape.div_scalar(numerator, total_positives as f32)?)
}

/// Dual adjacency-masked InfoNCE: project→freelancer term plus
/// freelancer→freelancer term. The upper-triangular freelancer matrix
/// (weak negatives included) is mirrored on the fly so each freelancer
/// anchors all of its relations. A term whose matrix has no positive entry
/// is dropped; if both terms are empty the batch carries no supervision.
pub fn dual_a_info_nce_on_tape(
    tape: &mut Tape,
    project_emb: VarId,
    freelancer_emb: VarId,
    a_pf: &SignedAdjacency,
    a_ff_with_weak: &SignedAdjacency,
    temperature: f32,
) -> Result<DualLoss, LossError> {
    check_temperature(temperature)?;
    let mirrored = mirror_upper(a_ff_with_weak)?;
    let project_term = match a_info_nce_on_tape(tape, project_emb, freelancer_emb, a_pf, temperature) {
        Ok(v) => Some(v),
        Err(LossError::NoPositives) => None,
        Err(e) => return Err(e),
    };
    let freelancer_term = match a_info_nce_on_tape(tape, freelancer_emb, freelancer_emb, &mirrored, temperature) {
        Ok(v) => Some(v),
        Err(LossError::NoPositives) => None,
        Err(e) => return Err(e),
    };
    let total = match (project_term, freelancer_term) {
        (Some(p), Some(f)) => tape.add(p, f)?,
        (Some(p), None) => p,
        (None, Some(f)) => f,
        (None, None) => return Err(LossError::NoPositives),
    };
    Ok(DualLoss { total, project_term, freelancer_term })
}

fn as_row_matrix(t: &Tensor, what: &str) -> Result<Tensor, LossError> {
    match t.shape() {
        [d] => Tensor::new(t.data().to_vec(), &[1, *d]).map_err(LossError::Numerics),
        [1, _] => Ok(t.clone()),
        other => Err(LossError::Numerics(NumericsError::shape(
            "losses",
            format!("{what} must be a vector or single row, got {other:?}"),
        ))),
    }
}

/// Value-level [`triplet_loss_on_tape`]: accepts `[d]` or `[1,d]` tensors.
pub fn triplet_loss(anchor: &Tensor, positive: &Tensor, negative: &Tensor, margin: f32) -> Result<f64, LossError> {
    let mut tape = Tape::new();
    let a = tape.constant(as_row_matrix(anchor, "anchor")?);
    let p = tape.constant(as_row_matrix(positive, "positive")?);
    let n = tape.constant(as_row_matrix(negative, "negative")?);
    let loss = triplet_loss_on_tape(&mut tape, a, p, n, margin)?;
    Ok(tape.scalar_f64(loss)?)
}

/// Value-level [`info_nce_on_tape`].
pub fn info_nce(anchor: &Tensor, candidates: &Tensor, positives: &[usize], temperature: f32) -> Result<f64, LossError> {
    let mut tape = Tape::new();
    let a = tape.constant(as_row_matrix(anchor, "anchor")?);
    let c = tape.constant(candidates.clone());
    let loss = info_nce_on_tape(&mut tape, a, c, positives, temperature)?;
    Ok(tape.scalar_f64(loss)?)
}

/// Value-level [`info_nce_scores_on_tape`].
pub fn info_nce_scores(scores: &Tensor, positives: &[usize], temperature: f32) -> Result<f64, LossError> {
    let mut tape = Tape::new();
    let s = tape.constant(as_row_matrix(scores, "scores")?);
    let loss = info_nce_scores_on_tape(&mut tape, s, positives, temperature)?;
    Ok(tape.scalar_f64(loss)?)
}

/// Value-level [`a_triplets_on_tape`].
pub fn a_triplets(anchors: &Tensor, candidates: &Tensor, adjacency: &SignedAdjacency, margin: f32) -> Result<f64, LossError> {
    let mut tape = Tape::new();
    let a = tape.constant(anchors.clone());
    let c = tape.constant(candidates.clone());
    let loss = a_triplets_on_tape(&mut tape, a, c, adjacency, margin)?;
    Ok(tape.scalar_f64(loss)?)
}

/// Value-level [`dual_a_triplets_on_tape`].
pub fn dual_a_triplets(
    project_emb: &Tensor,
    freelancer_emb: &Tensor,
    a_pf: &SignedAdjacency,
    a_ff: &SignedAdjacency,
    margin: f32,
) -> Result<DualLossValue, LossError> {
    let mut tape = Tape::new();
    let p = tape.constant(project_emb.clone());
    let f = tape.constant(freelancer_emb.clone());
    let dual = dual_a_triplets_on_tape(&mut tape, p, f, a_pf, a_ff, margin)?;
    dual_value(&tape, &dual)
}

/// Value-level [`a_info_nce_on_tape`].
pub fn a_info_nce(
    anchors: &Tensor,
    candidates: &Tensor,
    adjacency: &SignedAdjacency,
    temperature: f32,
) -> Result<f64, LossError> {
    let mut tape = Tape::new();
    let a = tape.constant(anchors.clone());
    let c = tape.constant(candidates.clone());
    let loss = a_info_nce_on_tape(&mut tape, a, c, adjacency, temperature)?;
    Ok(tape.scalar_f64(loss)?)
}

/// Value-level [`dual_a_info_nce_on_tape`].
pub fn dual_a_info_nce(
    project_emb: &Tensor,
    freelancer_emb: &Tensor,
    a_pf: &SignedAdjacency,
    a_ff_with_weak: &SignedAdjacency,
    temperature: f32,
) -> Result<DualLossValue, LossError> {
    let mut tape = Tape::new();
    let p = tape.constant(project_emb.clone());
    let f = tape.constant(freelancer_emb.clone());
    let dual = dual_a_info_nce_on_tape(&mut tape, p, f, a_pf, a_ff_with_weak, temperature)?;
    dual_value(&tape, &dual)
}

fn dual_value(tape: &Tape, dual: &DualLoss) -> Result<DualLossValue, LossError> {
    let term = |v: &Option<VarId>| -> Result<Option<f64>, LossError> {
        v.map(|id| tape.scalar_f64(id)).transpose().map_err(LossError::from)
    };
    Ok(DualLossValue {
        total: tape.scalar_f64(dual.total)?,
        project_term: term(&dual.project_term)?,
        freelancer_term: term(&dual.freelancer_term)?,
    })
}
