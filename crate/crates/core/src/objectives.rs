//! Training losses: translation NLL on the query stream, correction loss on
//! the content stream, and their weighted combination.
//!
//! Both losses are sums, not means; per-token averages exist only for
//! display. The correction loss counts a position only where the mixed
//! input token disagrees with the ground truth, so under pure teacher
//! forcing it is identically zero.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};

#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    /// Weight of the correction loss in the combined objective.
    pub lambda: f64,
    /// Label smoothing ε for both heads; 0 disables it.
    pub label_smoothing: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: 1.0,
            label_smoothing: 0.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "lambda must be a nonnegative finite number, got {}",
                self.lambda
            )));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::InvalidConfig(format!(
                "label smoothing must be in [0, 1), got {}",
                self.label_smoothing
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub nll: f64,
    pub ecm: f64,
    pub combined: f64,
    /// Positions contributing to the NLL sum.
    pub nll_tokens: usize,
    /// Corrupted positions contributing to the correction sum.
    pub ecm_tokens: usize,
}

impl LossBreakdown {
    pub fn per_token_nll(&self) -> f64 {
        self.nll / self.nll_tokens.max(1) as f64
    }

    pub fn per_token_ecm(&self) -> f64 {
        self.ecm / self.ecm_tokens.max(1) as f64
    }

    /// Combined loss per target token (the nll denominator).
    pub fn per_token_combined(&self) -> f64 {
        self.combined / self.nll_tokens.max(1) as f64
    }
}

/// −Σ log P(target) over included positions of the query-stream logits.
/// `y` holds the token each row predicts (the successor of that row's input
/// position); `include` is false at batch-padding rows.
pub fn nll_loss<S: Scalar>(
    tape: &mut Tape<S>,
    query_logits: NodeId,
    y: &[u32],
    include: &[bool],
    label_smoothing: f64,
) -> Result<NodeId> {
    if y.len() != include.len() {
        return Err(Error::LengthMismatch {
            what: "nll target/include",
            left: y.len(),
            right: include.len(),
        });
    }
    let targets = Rc::new(y.iter().map(|&t| t as usize).collect::<Vec<_>>());
    tape.cross_entropy_from_logits(query_logits, targets, Rc::new(include.to_vec()), label_smoothing)
}

/// −Σ log P(true token) over corrupted positions of the content-stream
/// logits. `y` holds the ground-truth token for each input position;
/// `corruption_mask` is true where the mixed input token disagreed with it.
pub fn ecm_loss<S: Scalar>(
    tape: &mut Tape<S>,
    content_logits: NodeId,
    y: &[u32],
    corruption_mask: &[bool],
    label_smoothing: f64,
) -> Result<NodeId> {
    if y.len() != corruption_mask.len() {
        return Err(Error::LengthMismatch {
            what: "ecm target/mask",
            left: y.len(),
            right: corruption_mask.len(),
        });
    }
    let targets = Rc::new(y.iter().map(|&t| t as usize).collect::<Vec<_>>());
    tape.cross_entropy_from_logits(
        content_logits,
        targets,
        Rc::new(corruption_mask.to_vec()),
        label_smoothing,
    )
}

/// Combined objective node: nll + λ·ecm on the tape, for backward.
pub fn combined_loss_node<S: Scalar>(
    tape: &mut Tape<S>,
    nll: NodeId,
    ecm: NodeId,
    w: &LossWeights,
) -> Result<NodeId> {
    let weighted = tape.scale(ecm, S::from_f64(w.lambda));
    tape.add(nll, weighted)
}

/// Assembles the reported breakdown and rejects non-finite losses. The step
/// context on the divergence error is filled in by the caller that knows it.
pub fn combined_loss(
    nll: f64,
    ecm: f64,
    w: &LossWeights,
    nll_tokens: usize,
    ecm_tokens: usize,
) -> Result<LossBreakdown> {
    for (what, v) in [("nll loss", nll), ("ecm loss", ecm)] {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                what,
                step: 0,
                last_checkpoint: None,
            });
        }
    }
    Ok(LossBreakdown {
        nll,
        ecm,
        combined: nll + w.lambda * ecm,
        nll_tokens,
        ecm_tokens,
    })
}
