//! Keep-probability decay schedule and the mixing of ground-truth tokens
//! with first-pass model predictions.

use rand::Rng;

use crate::error::{Error, Result};

/// Parameters of the keep-probability curve: full teacher forcing until step
/// `alpha`, then exponential decay with temperature `mu` down to floor `beta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleSchedule {
    pub alpha: u64,
    pub beta: f64,
    pub mu: f64,
}

impl Default for SampleSchedule {
    fn default() -> Self {
        SampleSchedule {
            alpha: 30_000,
            beta: 0.85,
            mu: 5_000.0,
        }
    }
}

impl SampleSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "schedule beta must be in (0, 1], got {}",
                self.beta
            )));
        }
        if !(self.mu > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "schedule mu must be positive, got {}",
                self.mu
            )));
        }
        Ok(())
    }
}

/// p(s) = 1 for s ≤ α, else max(β, μ / (μ + exp((s − α)/μ))).
/// Monotonically non-increasing, bounded in [β, 1].
pub fn keep_probability(s: u64, sched: &SampleSchedule) -> f64 {
    if s <= sched.alpha {
        1.0
    } else {
        let e = ((s - sched.alpha) as f64 / sched.mu).exp();
        sched.beta.max(sched.mu / (sched.mu + e))
    }
}

/// A target sequence after per-position mixing of ground truth `y` with
/// first-pass predictions `y_prime`. `corruption_mask[t]` is true exactly
/// where the mixed token differs from the ground truth — the indicator that
/// gates the correction loss.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedTarget {
    pub y: Vec<u32>,
    pub y_prime: Vec<u32>,
    pub tilde_y: Vec<u32>,
    pub corruption_mask: Vec<bool>,
}

impl MixedTarget {
    /// All-ground-truth target (the p = 1 regime); no position corrupted.
    pub fn teacher_forced(y: &[u32]) -> Self {
        MixedTarget {
            y: y.to_vec(),
            y_prime: y.to_vec(),
            tilde_y: y.to_vec(),
            corruption_mask: vec![false; y.len()],
        }
    }

    pub fn corrupted_positions(&self) -> usize {
        self.corruption_mask.iter().filter(|&&m| m).count()
    }
}

/// Independent per-position Bernoulli(p) choice between the ground-truth
/// token and the first-pass prediction. The mask tracks token inequality,
/// not branch choice: picking a prediction that happens to equal the ground
/// truth does not count as a corruption.
pub fn mix_targets(
    y: &[u32],
    y_prime: &[u32],
    p: f64,
    rng: &mut impl Rng,
) -> Result<MixedTarget> {
    if y.len() != y_prime.len() {
        return Err(Error::LengthMismatch {
            what: "mix_targets sequences",
            left: y.len(),
            right: y_prime.len(),
        });
    }
    let mut tilde_y = Vec::with_capacity(y.len());
    let mut corruption_mask = Vec::with_capacity(y.len());
    for (&gt, &pred) in y.iter().zip(y_prime) {
        let keep = rng.random::<f64>() < p;
        let tok = if keep { gt } else { pred };
        tilde_y.push(tok);
        corruption_mask.push(tok != gt);
    }
    Ok(MixedTarget {
        y: y.to_vec(),
        y_prime: y_prime.to_vec(),
        tilde_y,
        corruption_mask,
    })
}
