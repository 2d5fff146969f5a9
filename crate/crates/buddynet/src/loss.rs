//! The three training losses. Embeddings become distributions through a
//! temperature softmax over their coordinates; the KL term sums relative
//! entropy over the full (reference × learner) crop-pair grid with the
//! master as the reference. The angular-margin loss normalizes embedding and
//! class weights, adds the margin to the target angle via
//! cos(θ+m) = cosθ·cos m − sinθ·sin m, and scales by a learnable s.

use crate::autodiff::{Graph, TensorId};
use crate::backbone::BlockVars;
use crate::error::{Error, Result};

/// Upper bound of the learnable margin: m = M_MAX · sigmoid(m_raw).
pub const M_MAX: f64 = 0.5;

/// Graph-side handles of one angular-margin head.
#[derive(Clone, Copy, Debug)]
pub struct ArcFaceHeadVars {
    pub w: TensorId,
    pub s_raw: TensorId,
    pub m_raw: TensorId,
    pub num_classes: usize,
}

impl ArcFaceHeadVars {
    pub fn from_block(vars: &BlockVars) -> Self {
        ArcFaceHeadVars {
            w: vars.head_w,
            s_raw: vars.head_s_raw,
            m_raw: vars.head_m_raw,
            num_classes: vars.num_classes,
        }
    }

    /// Materialize (s, m) from their unconstrained parameters.
    pub fn scale_and_margin(&self, g: &mut Graph) -> Result<(TensorId, TensorId)> {
        let s = g.softplus(self.s_raw)?;
        let sig = g.sigmoid(self.m_raw)?;
        let m = g.mul_scalar(sig, M_MAX)?;
        Ok((s, m))
    }
}

/// Mean angular-margin cross-entropy over a set of crop embeddings sharing
/// one label (the 1/|C| average over the crop set).
pub fn arcface_loss(
    g: &mut Graph,
    embeddings: &[TensorId],
    label: usize,
    head: &ArcFaceHeadVars,
) -> Result<TensorId> {
    if embeddings.is_empty() {
        return Err(Error::Validation("arcface_loss: empty crop set".into()));
    }
    let n = head.num_classes;
    if label >= n {
        return Err(Error::Validation(format!(
            "label {label} out of range for {n} classes"
        )));
    }
    let (s, m) = head.scale_and_margin(g)?;
    let cos_m = g.cos(m)?;
    let sin_m = g.sin(m)?;
    let w_hat = g.l2_normalize(head.w, 0, 1e-12)?;
    let mut onehot = vec![0.0; n];
    onehot[label] = 1.0;
    let onehot = g.leaf(onehot, &[1, n])?;
    let mut total: Option<TensorId> = None;
    for &e in embeddings {
        let e_hat = g.l2_normalize(e, 1, 1e-12)?;
        let cosines = g.matmul(e_hat, w_hat)?;
        let target_cos = {
            let picked = g.mul(cosines, onehot)?;
            g.sum(picked, None)?
        };
        // sinθ = sqrt(1 − cos²θ), floored to stay differentiable at alignment
        let cos_sq = g.mul(target_cos, target_cos)?;
        let neg = g.neg(cos_sq)?;
        let one_minus = g.add_scalar(neg, 1.0)?;
        let clamped = g.max_scalar(one_minus, 1e-24)?;
        let sin_theta = g.sqrt(clamped)?;
        let a = g.mul(target_cos, cos_m)?;
        let b = g.mul(sin_theta, sin_m)?;
        let margined = g.sub(a, b)?;
        let delta = g.sub(margined, target_cos)?;
        let shift = g.mul(onehot, delta)?;
        let adjusted = g.add(cosines, shift)?;
        let logits = g.mul(adjusted, s)?;
        let logp = g.log_softmax(logits, 1, 1.0)?;
        let picked = g.mul(logp, onehot)?;
        let picked_sum = g.sum(picked, None)?;
        let li = g.neg(picked_sum)?;
        total = Some(match total {
            Some(t) => g.add(t, li)?,
            None => li,
        });
    }
    g.mul_scalar(total.unwrap(), 1.0 / embeddings.len() as f64)
}

/// Σ over (reference, learner) pairs of KL(P_ref ‖ P_learner), where each
/// embedding is mapped to a distribution by softmax(e / temperature).
/// Gradient flows into both sides.
pub fn kl_pair_grid(
    g: &mut Graph,
    reference: &[TensorId],
    learner: &[TensorId],
    temperature: f64,
) -> Result<TensorId> {
    if temperature <= 0.0 {
        return Err(Error::Domain {
            op: "kl_embedding_loss",
            detail: format!("temperature {temperature} <= 0"),
        });
    }
    if reference.is_empty() || learner.is_empty() {
        return Err(Error::Validation("kl loss needs non-empty embedding lists".into()));
    }
    let dim = g.shape(reference[0]).to_vec();
    for &e in reference.iter().chain(learner) {
        if g.shape(e) != dim {
            return Err(Error::ShapeMismatch {
                op: "kl_embedding_loss",
                lhs: dim.clone(),
                rhs: g.shape(e).to_vec(),
            });
        }
    }
    let ref_dists: Vec<(TensorId, TensorId)> = reference
        .iter()
        .map(|&e| -> Result<_> {
            Ok((g.softmax(e, 1, temperature)?, g.log_softmax(e, 1, temperature)?))
        })
        .collect::<Result<_>>()?;
    let learner_logs: Vec<TensorId> = learner
        .iter()
        .map(|&e| g.log_softmax(e, 1, temperature))
        .collect::<Result<_>>()?;
    let mut total: Option<TensorId> = None;
    for &(p_ref, logp_ref) in &ref_dists {
        for &logp_learner in &learner_logs {
            let log_ratio = g.sub(logp_ref, logp_learner)?;
            let weighted = g.mul(p_ref, log_ratio)?;
            let term = g.sum(weighted, None)?;
            total = Some(match total {
                Some(t) => g.add(t, term)?,
                None => term,
            });
        }
    }
    Ok(total.unwrap())
}

/// KL divergence loss over the crop-pair grid with the master embeddings as
/// the reference distributions.
pub fn kl_embedding_loss(
    g: &mut Graph,
    assistant: &[TensorId],
    master: &[TensorId],
    temperature: f64,
) -> Result<TensorId> {
    kl_pair_grid(g, master, assistant, temperature)
}

/// Scalar loss components of one image (or an aggregated batch).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub kl: f64,
    pub arc_master: f64,
    pub arc_assistant: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(kl: f64, arc_master: f64, arc_assistant: f64) -> Self {
        LossBreakdown { kl, arc_master, arc_assistant, total: kl + arc_master + arc_assistant }
    }
}

/// Sum the per-image breakdowns of a batch (no batch mean).
pub fn total_loss(items: &[LossBreakdown]) -> Result<LossBreakdown> {
    if items.is_empty() {
        return Err(Error::Validation("total_loss: empty batch".into()));
    }
    let kl: f64 = items.iter().map(|b| b.kl).sum();
    let arc_master: f64 = items.iter().map(|b| b.arc_master).sum();
    let arc_assistant: f64 = items.iter().map(|b| b.arc_assistant).sum();
    Ok(LossBreakdown::new(kl, arc_master, arc_assistant))
}
