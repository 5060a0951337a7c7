use crate::autograd::{AutogradError, NodeId, Real, Tape};
use crate::net::{loss_xent_sum, Bound, ModelState, NetError};

use super::config::ConsistencyConfig;

/// Components of the consistency objective for one batch of size B:
/// `total = j_clean + j_adv + λ·penalty`, where both `j` terms are batch-mean
/// cross-entropies and `penalty = (1/B)·Σᵢ ‖∇ₓℓᵢ(xᵢ) − ∇ₓℓᵢ(x'ᵢ)‖²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConsistencyParts<T> {
    pub total: T,
    pub j_clean: T,
    pub j_adv: T,
    pub penalty: T,
}

/// Records the objective on `tape` and returns its node. The input gradients
/// stay on the tape, so differentiating the result with respect to the
/// parameters goes through them (double backward).
pub fn consistency_graph<T: Real>(
    tape: &mut Tape<T>,
    model: &ModelState<T>,
    bound: &Bound,
    clean: &[&[T]],
    adv: &[&[T]],
    labels: &[usize],
    cfg: &ConsistencyConfig,
) -> Result<(NodeId, ConsistencyParts<T>), NetError> {
    if clean.len() != adv.len() || clean.len() != labels.len() || clean.is_empty() {
        return Err(AutogradError::ShapeMismatch {
            op: "consistency_loss",
            detail: format!("{} clean, {} adversarial, {} labels", clean.len(), adv.len(), labels.len()),
        }
        .into());
    }
    let inv_b = T::one() / T::from_usize(labels.len()).unwrap();
    let lambda = T::from_f64_lossy(cfg.lambda);
    let need_penalty = cfg.lambda != 0.0;

    let mut branch = |batch: &[&[T]]| -> Result<(NodeId, Option<NodeId>), NetError> {
        let x = model.input_node(tape, batch, need_penalty)?;
        let logits = model.forward(tape, bound, x)?;
        let j = loss_xent_sum(tape, logits, labels)?;
        let g = if need_penalty { Some(tape.grad(j, &[x])?[0]) } else { None };
        Ok((tape.scale(j, inv_b)?, g))
    };
    let (jc, gc) = branch(clean)?;
    let (ja, ga) = branch(adv)?;

    let mut total = tape.add(jc, ja)?;
    let mut penalty = T::zero();
    if let (Some(gc), Some(ga)) = (gc, ga) {
        let d = tape.sub(gc, ga)?;
        let sq = tape.mul(d, d)?;
        let s = tape.sum(sq)?;
        let p = tape.scale(s, inv_b)?;
        penalty = tape.scalar(p);
        let weighted = tape.scale(p, lambda)?;
        total = tape.add(total, weighted)?;
    }
    let parts = ConsistencyParts {
        total: tape.scalar(total),
        j_clean: tape.scalar(jc),
        j_adv: tape.scalar(ja),
        penalty,
    };
    Ok((total, parts))
}

/// Value of the consistency objective for a batch.
pub fn consistency_loss<T: Real>(
    model: &ModelState<T>,
    clean: &[&[T]],
    adv: &[&[T]],
    labels: &[usize],
    cfg: &ConsistencyConfig,
) -> Result<ConsistencyParts<T>, NetError> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false)?;
    Ok(consistency_graph(&mut tape, model, &bound, clean, adv, labels, cfg)?.1)
}
