//! Training objectives: autoregressive cross entropy over token positions,
//! a triplet hinge on property predictions, and their weighted sum.

use std::rc::Rc;

use crate::props::N_PROPERTIES;
use crate::smiles::PAD_ID;
use crate::tensor::Tensor;

pub const DEFAULT_PRED_WEIGHT: f32 = 0.1;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LossError {
    #[error("{rows} logit rows but {targets} targets")]
    LengthMismatch { rows: usize, targets: usize },
    #[error("every target position is padding")]
    AllPadding,
}

/// Mean `-log softmax(logits)[target]` over non-padding positions, in nats
/// per token. Callers pair logit row i with the token at input position
/// i+1, so the leading BOS is scored as a predictor but never as a target.
pub fn autoregressive_loss(logits: &Tensor, targets: &[usize]) -> Result<Tensor, LossError> {
    if logits.rows() != targets.len() {
        return Err(LossError::LengthMismatch { rows: logits.rows(), targets: targets.len() });
    }
    let active: Vec<bool> = targets.iter().map(|&t| t != PAD_ID).collect();
    if !active.iter().any(|&a| a) {
        return Err(LossError::AllPadding);
    }
    Ok(logits.cross_entropy_rows(&Rc::new(targets.to_vec()), &Rc::new(active)))
}

/// Per-property hinge `max((pred-cond)^2 - (pred-measured)^2, 0)`, averaged
/// over the unmasked properties. A prediction only pays where it sits
/// farther from the conditioning value than from what the model actually
/// produced. Gradients reach `pred` alone; the conditioning and measured
/// vectors are detached, and the hinge subgradient at the boundary is zero.
pub fn triplet_property_loss(
    pred: &Tensor,
    conditioned: &Tensor,
    measured: &Tensor,
    mask: &[bool; N_PROPERTIES],
) -> Tensor {
    assert_eq!(pred.shape(), (1, N_PROPERTIES), "pred shape");
    assert_eq!(conditioned.shape(), (1, N_PROPERTIES), "conditioned shape");
    assert_eq!(measured.shape(), (1, N_PROPERTIES), "measured shape");
    let n = mask.iter().filter(|&&b| b).count();
    if n == 0 {
        return Tensor::scalar(0.0);
    }
    let c = conditioned.detach();
    let m = measured.detach();
    let hinge = pred.sub(&c).square().sub(&pred.sub(&m).square()).max_const(0.0);
    let keep: Vec<f32> = mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    hinge.mul(&Tensor::from_vec(1, N_PROPERTIES, keep)).sum().scale(1.0 / n as f32)
}

/// Combined objective with both components kept on the tape.
pub struct LossBreakdown {
    pub at_loss: Tensor,
    pub pred_loss: Tensor,
    pub total: Tensor,
    pub w_pred: f32,
}

pub fn total_loss(at_loss: &Tensor, pred_loss: &Tensor, w_pred: f32) -> LossBreakdown {
    LossBreakdown {
        at_loss: at_loss.clone(),
        pred_loss: pred_loss.clone(),
        total: at_loss.add(&pred_loss.scale(w_pred)),
        w_pred,
    }
}
