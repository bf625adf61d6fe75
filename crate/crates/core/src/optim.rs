//! Adam with bias correction, global-norm gradient clipping, and the
//! trapezoid learning-rate schedule (linear warmup, linear decay to zero).

use crate::error::{Error, Result};
use crate::model::TransformerParams;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Gradients are rescaled when their global L2 norm exceeds this.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup_steps: u64,
    pub max_steps: u64,
}

impl LrSchedule {
    pub fn new(peak: f64, warmup_steps: u64, max_steps: u64) -> Result<Self> {
        let s = LrSchedule {
            peak,
            warmup_steps,
            max_steps,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.peak > 0.0 && self.peak.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "peak learning rate must be positive, got {}",
                self.peak
            )));
        }
        if self.max_steps <= self.warmup_steps {
            return Err(Error::InvalidConfig(format!(
                "max_steps ({}) must exceed warmup_steps ({})",
                self.max_steps, self.warmup_steps
            )));
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `peak` over the warmup steps, then linear decay
/// reaching 0 at `max_steps`. `s` counts completed-plus-current updates,
/// so the first update runs at s = 1.
pub fn learning_rate(s: u64, sched: &LrSchedule) -> f64 {
    if s >= sched.max_steps {
        return 0.0;
    }
    if s <= sched.warmup_steps {
        if sched.warmup_steps == 0 {
            return sched.peak;
        }
        return sched.peak * s as f64 / sched.warmup_steps as f64;
    }
    sched.peak * (sched.max_steps - s) as f64 / (sched.max_steps - sched.warmup_steps) as f64
}

/// One Adam update of a single array. `t` is the 1-based update index used
/// for bias correction; `lr` is the already-scheduled learning rate.
pub fn adam_update<S: Scalar>(
    param: &mut Tensor<S>,
    grad: &Tensor<S>,
    m: &mut Tensor<S>,
    v: &mut Tensor<S>,
    t: u64,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != m.shape() || param.shape() != v.shape() {
        return Err(Error::LengthMismatch {
            what: "adam arrays",
            left: param.len(),
            right: grad.len(),
        });
    }
    let b1 = S::from_f64(cfg.beta1);
    let b2 = S::from_f64(cfg.beta2);
    let one = S::one();
    let mc = S::from_f64(1.0 / (1.0 - cfg.beta1.powi(t as i32)));
    let vc = S::from_f64(1.0 / (1.0 - cfg.beta2.powi(t as i32)));
    let eps = S::from_f64(cfg.eps);
    let step = S::from_f64(lr);
    for i in 0..param.len() {
        let g = grad.data()[i];
        let mi = b1 * m.data()[i] + (one - b1) * g;
        let vi = b2 * v.data()[i] + (one - b2) * g * g;
        m.data_mut()[i] = mi;
        v.data_mut()[i] = vi;
        param.data_mut()[i] -= step * (mi * mc) / ((vi * vc).sqrt() + eps);
    }
    Ok(())
}

/// What one `OptimizerState::apply` did, for the metrics log.
#[derive(Debug, Clone, Copy)]
pub struct StepInfo {
    pub step: u64,
    pub lr: f64,
    pub grad_norm: f64,
    pub clipped: bool,
}

#[derive(Debug, Clone)]
pub struct OptimizerState<S> {
    /// Completed updates.
    pub step: u64,
    pub m: TransformerParams<Tensor<S>>,
    pub v: TransformerParams<Tensor<S>>,
    pub adam: AdamConfig,
    pub lr: LrSchedule,
}

impl<S: Scalar> OptimizerState<S> {
    pub fn new(
        params: &TransformerParams<Tensor<S>>,
        adam: AdamConfig,
        lr: LrSchedule,
    ) -> Result<Self> {
        lr.validate()?;
        let zeros = |t: &Tensor<S>| Tensor::zeros(t.rows(), t.cols());
        Ok(OptimizerState {
            step: 0,
            m: params.map(&mut |t| zeros(t)),
            v: params.map(&mut |t| zeros(t)),
            adam,
            lr,
        })
    }

    /// Clips the gradient to the global-norm budget, advances the step
    /// counter, and applies one scheduled Adam update to every array.
    pub fn apply(
        &mut self,
        params: &mut TransformerParams<Tensor<S>>,
        mut grads: TransformerParams<Tensor<S>>,
    ) -> Result<StepInfo> {
        let mut squares = 0.0;
        grads.for_each(&mut |_, g| squares += g.sum_squares());
        let grad_norm = squares.sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite {
                what: "gradient norm",
                step: self.step + 1,
                last_checkpoint: None,
            });
        }
        let clipped = grad_norm > self.adam.clip_norm;
        if clipped {
            let scale = S::from_f64(self.adam.clip_norm / grad_norm);
            grads.for_each_mut(&mut |_, g| g.scale_assign(scale));
        }

        let t = self.step + 1;
        let lr = learning_rate(t, &self.lr);
        let mut ps = params.flatten_mut();
        let gs = grads.flatten();
        let mut ms = self.m.flatten_mut();
        let mut vs = self.v.flatten_mut();
        if ps.len() != gs.len() {
            return Err(Error::LengthMismatch {
                what: "gradient arrays",
                left: ps.len(),
                right: gs.len(),
            });
        }
        for i in 0..ps.len() {
            debug_assert_eq!(ps[i].0, gs[i].0);
            adam_update(ps[i].1, gs[i].1, ms[i].1, vs[i].1, t, lr, &self.adam)?;
        }
        self.step = t;
        Ok(StepInfo {
            step: t,
            lr,
            grad_norm,
            clipped,
        })
    }
}
