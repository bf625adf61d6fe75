//! Central-difference verification of analytic gradients.
//!
//! The check perturbs every parameter element in both directions, so it is
//! only affordable on tiny models; its job is to certify the backward rules,
//! not to run often.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{BOS, EOS};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::model::{self, ModelConfig, TransformerParams};
use crate::objectives::{self, LossWeights};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Worst element of one named parameter array.
#[derive(Debug, Clone)]
pub struct GroupReport {
    pub name: String,
    pub max_rel_error: f64,
    pub analytic: f64,
    pub numeric: f64,
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub groups: Vec<GroupReport>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl GradCheckReport {
    /// The offending group when the check failed.
    pub fn worst(&self) -> Option<&GroupReport> {
        self.groups
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// Finite-difference noise floor: below this gradient magnitude the f64
/// rounding error of the two loss evaluations dominates the quotient, so
/// the denominator is clamped here instead of chasing phantom error.
const DENOM_FLOOR: f64 = 1e-5;

/// Compares `analytic` gradients against central differences of `loss`
/// taken at `params`, element by element. `names`, `params` and `analytic`
/// are parallel; `loss` must be deterministic. `params` is restored to its
/// original values before returning.
pub fn finite_difference_check(
    names: &[String],
    params: &mut [Tensor<f64>],
    analytic: &[Tensor<f64>],
    mut loss: impl FnMut(&[Tensor<f64>]) -> Result<f64>,
    h: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    assert!(h > 0.0, "step size must be positive");
    assert_eq!(names.len(), params.len());
    assert_eq!(names.len(), analytic.len());
    let mut groups = Vec::with_capacity(names.len());
    for gi in 0..names.len() {
        let name = &names[gi];
        let mut worst = GroupReport {
            name: name.clone(),
            max_rel_error: 0.0,
            analytic: 0.0,
            numeric: 0.0,
            row: 0,
            col: 0,
        };
        let (rows, cols) = params[gi].shape();
        for r in 0..rows {
            for c in 0..cols {
                let a = analytic[gi].get(r, c);
                if !a.is_finite() {
                    return Err(Error::GradCheckNonFinite {
                        name: name.clone(),
                        which: "analytic gradient",
                    });
                }
                let orig = params[gi].get(r, c);
                params[gi].set(r, c, orig + h);
                let up = loss(params)?;
                params[gi].set(r, c, orig - h);
                let down = loss(params)?;
                params[gi].set(r, c, orig);
                if !up.is_finite() || !down.is_finite() {
                    return Err(Error::GradCheckNonFinite {
                        name: name.clone(),
                        which: "perturbed loss",
                    });
                }
                let n = (up - down) / (2.0 * h);
                let rel = (a - n).abs() / a.abs().max(n.abs()).max(DENOM_FLOOR);
                if rel > worst.max_rel_error {
                    worst = GroupReport {
                        name: name.clone(),
                        max_rel_error: rel,
                        analytic: a,
                        numeric: n,
                        row: r,
                        col: c,
                    };
                }
            }
        }
        groups.push(worst);
    }
    let max_rel_error = groups
        .iter()
        .map(|g| g.max_rel_error)
        .fold(0.0, f64::max);
    Ok(GradCheckReport {
        groups,
        max_rel_error,
        tolerance,
        pass: max_rel_error < tolerance,
    })
}

/// One deterministic training example for the model-level check: a source
/// sentence, a decoder input with at least one token differing from the
/// ground truth, and the targets both heads train against.
struct CheckInstance {
    cfg: ModelConfig,
    src: Vec<u32>,
    input: Vec<u32>,
    query_targets: Vec<u32>,
    content_targets: Vec<u32>,
    corruption: Vec<bool>,
    weights: LossWeights,
}

fn check_instance(layers: usize, hidden: usize, seed: u64) -> Result<CheckInstance> {
    let vocab = 11;
    let mut cfg = ModelConfig::toy(vocab, vocab);
    cfg.num_layers = layers;
    cfg.num_heads = if hidden % 2 == 0 { 2 } else { 1 };
    cfg.hidden_size = hidden;
    cfg.ffn_size = 2 * hidden;
    cfg.max_positions = 16;
    cfg.validate()?;

    let rng = &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[7]));
    let real = |rng: &mut ChaCha8Rng| rng.random_range(4..vocab as u32);
    let src: Vec<u32> = (0..3).map(|_| real(rng)).collect();
    let y: Vec<u32> = (0..4).map(|_| real(rng)).collect();
    let mut input = vec![BOS];
    let mut corruption = vec![false];
    for (i, &t) in y.iter().enumerate() {
        // Corrupt position 2 unconditionally so the correction loss is
        // never empty; elsewhere flip a coin.
        let corrupt = i == 1 || rng.random::<f64>() < 0.5;
        if corrupt {
            let mut wrong = real(rng);
            while wrong == t {
                wrong = real(rng);
            }
            input.push(wrong);
            corruption.push(true);
        } else {
            input.push(t);
            corruption.push(false);
        }
    }
    let mut query_targets = y.clone();
    query_targets.push(EOS);
    let mut content_targets = vec![BOS];
    content_targets.extend_from_slice(&y);
    Ok(CheckInstance {
        cfg,
        src,
        input,
        query_targets,
        content_targets,
        corruption,
        weights: LossWeights::default(),
    })
}

fn instance_loss(inst: &CheckInstance, params: &TransformerParams<Tensor<f64>>) -> Result<f64> {
    let mut tape = Tape::new(0);
    let p = params.bind(&mut tape, true);
    let enc = model::encode(&mut tape, &p, &inst.cfg, &inst.src, false)?;
    let (q, c) =
        model::decoder_forward_two_stream(&mut tape, &p, &inst.cfg, &inst.input, &enc, false)?;
    let include = vec![true; inst.query_targets.len()];
    let nll = objectives::nll_loss(&mut tape, q, &inst.query_targets, &include, 0.0)?;
    let ecm = objectives::ecm_loss(&mut tape, c, &inst.content_targets, &inst.corruption, 0.0)?;
    let node = objectives::combined_loss_node(&mut tape, nll, ecm, &inst.weights)?;
    Ok(tape.value(node).item())
}

/// Runs the full two-stream pipeline — encoder, both decoder streams, both
/// losses — at f64 on an 11-token vocabulary and checks every parameter
/// against central differences with step 1e-5.
pub fn check_model_gradients(
    layers: usize,
    hidden: usize,
    seed: u64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let inst = check_instance(layers, hidden, seed)?;
    let base = crate::model::init_params::<f64>(&inst.cfg, derive_seed(seed, &[8]))?;

    // Analytic gradients at the base point.
    let mut tape = Tape::new(0);
    let bound = base.bind(&mut tape, true);
    let enc = model::encode(&mut tape, &bound, &inst.cfg, &inst.src, false)?;
    let (q, c) =
        model::decoder_forward_two_stream(&mut tape, &bound, &inst.cfg, &inst.input, &enc, false)?;
    let include = vec![true; inst.query_targets.len()];
    let nll = objectives::nll_loss(&mut tape, q, &inst.query_targets, &include, 0.0)?;
    let ecm = objectives::ecm_loss(&mut tape, c, &inst.content_targets, &inst.corruption, 0.0)?;
    let node = objectives::combined_loss_node(&mut tape, nll, ecm, &inst.weights)?;
    tape.backward(node);
    let grads = bound.map(&mut |&id| {
        tape.grad(id).cloned().unwrap_or_else(|| {
            let (r, c) = tape.value(id).shape();
            Tensor::zeros(r, c)
        })
    });

    let mut names = Vec::new();
    let mut flat_params = Vec::new();
    base.for_each(&mut |name, t| {
        names.push(name);
        flat_params.push(t.clone());
    });
    let flat_grads: Vec<Tensor<f64>> = grads.flatten().into_iter().map(|(_, t)| t.clone()).collect();

    let mut template = base.clone();
    let loss = |flat: &[Tensor<f64>]| {
        for ((_, dst), src) in template.flatten_mut().into_iter().zip(flat) {
            *dst = src.clone();
        }
        instance_loss(&inst, &template)
    };
    finite_difference_check(&names, &mut flat_params, &flat_grads, loss, 1e-5, tolerance)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_function_passes() {
        let names = vec!["w".to_string()];
        let mut params = vec![Tensor::from_vec(1, 1, vec![3.0])];
        let analytic = vec![Tensor::from_vec(1, 1, vec![6.0])];
        let report = finite_difference_check(
            &names,
            &mut params,
            &analytic,
            |p| Ok(p[0].item() * p[0].item()),
            1e-6,
            1e-6,
        )
        .unwrap();
        assert!(report.pass, "max rel error {}", report.max_rel_error);
        assert_eq!(params[0].item(), 3.0);
    }

    #[test]
    fn corrupted_gradient_fails_with_named_group() {
        let names = vec!["fine".to_string(), "broken".to_string()];
        let mut params = vec![
            Tensor::from_vec(1, 1, vec![2.0]),
            Tensor::from_vec(1, 2, vec![1.0, -1.5]),
        ];
        // d/dw (w²) = 2w; second group's gradient deliberately wrong.
        let analytic = vec![
            Tensor::from_vec(1, 1, vec![4.0]),
            Tensor::from_vec(1, 2, vec![5.0, -3.0]),
        ];
        let report = finite_difference_check(
            &names,
            &mut params,
            &analytic,
            |p| Ok(p.iter().flat_map(|t| t.data()).map(|&v| v * v).sum()),
            1e-6,
            1e-4,
        )
        .unwrap();
        assert!(!report.pass);
        assert_eq!(report.worst().unwrap().name, "broken");
        let fine = report.groups.iter().find(|g| g.name == "fine").unwrap();
        assert!(fine.max_rel_error < 1e-6);
    }

    #[test]
    fn non_finite_analytic_gradient_is_diagnosed() {
        let names = vec!["w".to_string()];
        let mut params = vec![Tensor::from_vec(1, 1, vec![1.0])];
        let analytic = vec![Tensor::from_vec(1, 1, vec![f64::NAN])];
        let err = finite_difference_check(
            &names,
            &mut params,
            &analytic,
            |p| Ok(p[0].item()),
            1e-6,
            1e-4,
        )
        .unwrap_err();
        match err {
            Error::GradCheckNonFinite { name, .. } => assert_eq!(name, "w"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn two_layer_model_gradients_pass() {
        let report = check_model_gradients(2, 8, 2024, 1e-4).unwrap();
        assert!(
            report.pass,
            "worst group {:?}",
            report.worst().map(|g| (g.name.clone(), g.max_rel_error))
        );
        // Every array is reported, including the shared output head.
        assert!(report.groups.iter().any(|g| g.name == "out.w"));
        assert!(report.groups.iter().any(|g| g.name == "dec.1.cross_attn.wo"));
    }

    #[test]
    fn tiny_gradients_do_not_trip_noise() {
        // Gradient magnitudes far below the floor: the clamped denominator
        // must keep finite-difference rounding noise out of the verdict.
        let names = vec!["w".to_string()];
        let mut params = vec![Tensor::from_vec(1, 1, vec![1e-9])];
        let analytic = vec![Tensor::from_vec(1, 1, vec![2e-9])];
        let report = finite_difference_check(
            &names,
            &mut params,
            &analytic,
            |p| Ok(p[0].item() * p[0].item()),
            1e-6,
            1e-4,
        )
        .unwrap();
        assert!(report.pass);
    }
}
