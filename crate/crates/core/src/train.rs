//! The training loop: scheduled-sampling two-pass steps on the combined
//! objective, metrics logging, validation, and checkpoint rotation.
//!
//! Determinism contract: every random draw inside a step — batch order,
//! dropout, target mixing — comes from a stream derived from (seed, step
//! number) alone, so a run resumed from a checkpoint continues bit-for-bit
//! like one that was never interrupted. The metrics CSV logs per-token loss
//! values; its tokens_per_sec column is wall-clock and is the one column
//! that varies between otherwise identical runs.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::data::{make_batches, Batch, SentencePair, BOS, EOS};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::eval::AccuracyTally;
use crate::infer;
use crate::model::{
    decoder_forward_standard, decoder_forward_two_stream, encode, init_params, DecoderMode,
    ModelConfig, TransformerParams,
};
use crate::objectives::{
    combined_loss, combined_loss_node, ecm_loss, nll_loss, LossBreakdown, LossWeights,
};
use crate::optim::{AdamConfig, LrSchedule, OptimizerState};
use crate::scalar::Scalar;
use crate::schedule::{keep_probability, mix_targets, MixedTarget, SampleSchedule};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_LAST_FILE: &str = "checkpoint_last.bin";
pub const CHECKPOINT_BEST_FILE: &str = "checkpoint_best.bin";
pub const METRICS_HEADER: &str = "step,lr,p_keep,nll,ecm,combined,valid_nll,tokens_per_sec";

// Stream tags for derive_seed, so per-step RNG streams never alias.
const SEED_BATCH: u64 = 1;
const SEED_DROPOUT: u64 = 2;
const SEED_MIX: u64 = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRunConfig {
    pub max_steps: u64,
    /// Real-token budget per batch.
    pub tokens_per_batch: usize,
    pub seed: u64,
    /// Correction loss on the content stream.
    pub enable_ecm: bool,
    /// Scheduled sampling (the two-pass step).
    pub enable_ss: bool,
    /// Two-stream decoder; false trains the conventional one-stream decoder.
    pub enable_tssa: bool,
    pub schedule: SampleSchedule,
    pub weights: LossWeights,
    pub lr: LrSchedule,
    pub adam: AdamConfig,
    /// checkpoint_last is rewritten every this many steps (and at the end).
    pub checkpoint_interval: u64,
    /// Validation and best-checkpoint cadence, in steps.
    pub validate_interval: u64,
    /// Stop once teacher-forced validation token accuracy reaches this.
    pub stop_at_token_accuracy: Option<f64>,
    /// Where metrics.csv and the checkpoints land.
    pub out_dir: PathBuf,
}

impl TrainRunConfig {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        TrainRunConfig {
            max_steps: 20_000,
            tokens_per_batch: 2048,
            seed: 0,
            enable_ecm: true,
            enable_ss: true,
            enable_tssa: true,
            schedule: SampleSchedule::default(),
            weights: LossWeights::default(),
            lr: LrSchedule {
                peak: 5e-4,
                warmup_steps: 4000,
                max_steps: 20_000,
            },
            adam: AdamConfig::default(),
            checkpoint_interval: 1000,
            validate_interval: 500,
            stop_at_token_accuracy: None,
            out_dir: out_dir.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_steps == 0 {
            return Err(Error::InvalidConfig("max_steps must be positive".into()));
        }
        if self.tokens_per_batch == 0 {
            return Err(Error::InvalidConfig(
                "tokens_per_batch must be positive".into(),
            ));
        }
        if self.checkpoint_interval == 0 || self.validate_interval == 0 {
            return Err(Error::InvalidConfig(
                "checkpoint and validation intervals must be positive".into(),
            ));
        }
        if self.enable_ecm && !self.enable_tssa {
            return Err(Error::InvalidConfig(
                "the correction loss needs the two-stream decoder's content head; \
                 disable it when training the standard decoder"
                    .into(),
            ));
        }
        if let Some(bar) = self.stop_at_token_accuracy {
            if !(0.0..=1.0).contains(&bar) {
                return Err(Error::InvalidConfig(format!(
                    "stop_at_token_accuracy must be in [0, 1], got {bar}"
                )));
            }
        }
        self.schedule.validate()?;
        self.weights.validate()?;
        self.lr.validate()
    }

    /// The flags must agree with the decoder the model config builds.
    pub fn validate_against(&self, cfg: &ModelConfig) -> Result<()> {
        let two_stream = cfg.decoder_mode == DecoderMode::TwoStream;
        if two_stream != self.enable_tssa {
            return Err(Error::InvalidConfig(format!(
                "decoder mode {} conflicts with enable_tssa={}",
                cfg.decoder_mode.as_str(),
                self.enable_tssa
            )));
        }
        Ok(())
    }

    /// The settings that determine the optimization trajectory. A resumed
    /// run must repeat these exactly; cadence settings and max_steps may
    /// change between legs (extending a finished run is legitimate).
    fn trajectory_record(&self) -> Vec<(String, String)> {
        let kv = |k: &str, v: String| (format!("run.{k}"), v);
        vec![
            kv("seed", self.seed.to_string()),
            kv("tokens_per_batch", self.tokens_per_batch.to_string()),
            kv("enable_ecm", self.enable_ecm.to_string()),
            kv("enable_ss", self.enable_ss.to_string()),
            kv("enable_tssa", self.enable_tssa.to_string()),
            kv("schedule.alpha", self.schedule.alpha.to_string()),
            kv("schedule.beta", self.schedule.beta.to_string()),
            kv("schedule.mu", self.schedule.mu.to_string()),
            kv("weights.lambda", self.weights.lambda.to_string()),
            kv("weights.label_smoothing", self.weights.label_smoothing.to_string()),
            kv("lr.peak", self.lr.peak.to_string()),
            kv("lr.warmup_steps", self.lr.warmup_steps.to_string()),
            kv("lr.max_steps", self.lr.max_steps.to_string()),
            kv("adam.beta1", self.adam.beta1.to_string()),
            kv("adam.beta2", self.adam.beta2.to_string()),
            kv("adam.eps", self.adam.eps.to_string()),
            kv("adam.clip_norm", self.adam.clip_norm.to_string()),
        ]
    }

    /// Everything `trajectory_record` holds plus the run-shape settings,
    /// for the checkpoint manifest.
    pub fn record(&self) -> Vec<(String, String)> {
        let mut kv = self.trajectory_record();
        kv.push(("run.max_steps".into(), self.max_steps.to_string()));
        kv.push((
            "run.checkpoint_interval".into(),
            self.checkpoint_interval.to_string(),
        ));
        kv.push((
            "run.validate_interval".into(),
            self.validate_interval.to_string(),
        ));
        kv.push((
            "run.stop_at_token_accuracy".into(),
            match self.stop_at_token_accuracy {
                Some(v) => v.to_string(),
                None => "none".into(),
            },
        ));
        kv
    }
}

fn verify_run_record(extra: &[(String, String)], run: &TrainRunConfig) -> Result<()> {
    for (key, want) in run.trajectory_record() {
        match extra.iter().find(|(k, _)| *k == key) {
            None => {
                return Err(Error::Checkpoint(format!(
                    "no {key} recorded; not a training checkpoint?"
                )))
            }
            Some((_, stored)) if *stored != want => {
                return Err(Error::InvalidConfig(format!(
                    "resume mismatch: {key} was {stored} in the checkpoint but is {want} now"
                )))
            }
            Some(_) => {}
        }
    }
    Ok(())
}

/// What one training step did.
#[derive(Debug, Clone, Copy)]
pub struct StepMetrics {
    /// Completed updates after this step (1-based).
    pub step: u64,
    pub lr: f64,
    /// Keep probability in effect; 1.0 whenever sampling is off.
    pub p_keep: f64,
    pub losses: LossBreakdown,
    pub grad_norm: f64,
    pub clipped: bool,
    /// Real tokens in the batch.
    pub batch_tokens: usize,
}

/// One optimization step over a batch: first-pass predictions and target
/// mixing once sampling is active, tape forward per the ablation flags,
/// combined loss, backward, and a scheduled Adam update.
pub fn train_step<S: Scalar>(
    batch: &Batch,
    params: &mut TransformerParams<Tensor<S>>,
    opt: &mut OptimizerState<S>,
    cfg: &ModelConfig,
    run: &TrainRunConfig,
) -> Result<StepMetrics> {
    let t = opt.step + 1;
    let p_keep = if run.enable_ss {
        keep_probability(t, &run.schedule)
    } else {
        1.0
    };
    let sampling = run.enable_ss && t > run.schedule.alpha;

    let mut mixed = Vec::with_capacity(batch.rows());
    let mut mix_rng = ChaCha8Rng::seed_from_u64(derive_seed(run.seed, &[SEED_MIX, t]));
    for pair in batch.unpadded_pairs() {
        if sampling {
            let y_prime = infer::first_pass_predictions(params, cfg, &pair.x, &pair.y)?;
            mixed.push(mix_targets(&pair.y, &y_prime, p_keep, &mut mix_rng)?);
        } else {
            mixed.push(MixedTarget::teacher_forced(&pair.y));
        }
    }

    let mut tape = Tape::new(derive_seed(run.seed, &[SEED_DROPOUT, t]));
    let bound = params.bind(&mut tape, true);
    let mut nll_node: Option<NodeId> = None;
    let mut ecm_node: Option<NodeId> = None;
    let mut nll_tokens = 0;
    let mut ecm_tokens = 0;
    for (pair, mix) in batch.unpadded_pairs().zip(&mixed) {
        let enc = encode(&mut tape, &bound, cfg, &pair.x, true)?;
        let mut input = Vec::with_capacity(mix.tilde_y.len() + 1);
        input.push(BOS);
        input.extend_from_slice(&mix.tilde_y);
        let mut query_targets = pair.y.clone();
        query_targets.push(EOS);
        let include = vec![true; query_targets.len()];
        nll_tokens += query_targets.len();

        let nll = match cfg.decoder_mode {
            DecoderMode::TwoStream => {
                let (q, c) =
                    decoder_forward_two_stream(&mut tape, &bound, cfg, &input, &enc, true)?;
                if run.enable_ecm {
                    let mut content_targets = Vec::with_capacity(input.len());
                    content_targets.push(BOS);
                    content_targets.extend_from_slice(&pair.y);
                    let mut mask = Vec::with_capacity(input.len());
                    mask.push(false);
                    mask.extend_from_slice(&mix.corruption_mask);
                    let e =
                        ecm_loss(&mut tape, c, &content_targets, &mask, run.weights.label_smoothing)?;
                    ecm_tokens += mix.corrupted_positions();
                    ecm_node = Some(match ecm_node {
                        Some(prev) => tape.add(prev, e)?,
                        None => e,
                    });
                }
                nll_loss(&mut tape, q, &query_targets, &include, run.weights.label_smoothing)?
            }
            DecoderMode::Standard => {
                let logits = decoder_forward_standard(&mut tape, &bound, cfg, &input, &enc, true)?;
                nll_loss(&mut tape, logits, &query_targets, &include, run.weights.label_smoothing)?
            }
        };
        nll_node = Some(match nll_node {
            Some(prev) => tape.add(prev, nll)?,
            None => nll,
        });
    }

    let nll_node = nll_node.expect("batches are never empty");
    let nll = tape.value(nll_node).item().as_f64();
    let (loss_node, ecm) = match ecm_node {
        Some(e) => (
            combined_loss_node(&mut tape, nll_node, e, &run.weights)?,
            tape.value(e).item().as_f64(),
        ),
        None => (nll_node, 0.0),
    };
    let losses = combined_loss(nll, ecm, &run.weights, nll_tokens, ecm_tokens)?;

    tape.backward(loss_node);
    let grads = bound.map(&mut |&id| {
        tape.grad(id).cloned().unwrap_or_else(|| {
            let (r, c) = tape.value(id).shape();
            Tensor::zeros(r, c)
        })
    });
    let info = opt.apply(params, grads)?;
    Ok(StepMetrics {
        step: info.step,
        lr: info.lr,
        p_keep,
        losses,
        grad_norm: info.grad_norm,
        clipped: info.clipped,
        batch_tokens: batch.real_tokens,
    })
}

/// Teacher-forced evaluation on held-out pairs: per-token NLL (end-of-
/// sequence included) and first-pass token accuracy under the gold prefix.
#[derive(Debug, Clone, Copy)]
pub struct ValidationReport {
    pub per_token_nll: f64,
    pub token_accuracy: Option<f64>,
    pub tokens: usize,
}

pub fn validate_model<S: Scalar>(
    params: &TransformerParams<Tensor<S>>,
    cfg: &ModelConfig,
    pairs: &[SentencePair],
) -> Result<ValidationReport> {
    if pairs.is_empty() {
        return Err(Error::EmptyCorpus("validation set is empty".into()));
    }
    let mut nll = 0.0;
    let mut tokens = 0;
    let mut tally = AccuracyTally::default();
    for pair in pairs {
        nll += infer::sequence_nll(params, cfg, &pair.x, &pair.y)?;
        tokens += pair.y.len() + 1;
        let preds = infer::first_pass_predictions(params, cfg, &pair.x, &pair.y)?;
        tally.observe(&preds, &pair.y, &vec![true; pair.y.len()]);
    }
    Ok(ValidationReport {
        per_token_nll: nll / tokens as f64,
        token_accuracy: tally.accuracy(),
        tokens,
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Completed updates when the run ended (includes any resumed prefix).
    pub final_step: u64,
    /// True when the token-accuracy bar ended the run before max_steps.
    pub stopped_early: bool,
    pub final_valid: Option<ValidationReport>,
    pub best_valid_nll: Option<f64>,
    pub last_checkpoint: Option<PathBuf>,
    pub best_checkpoint: Option<PathBuf>,
}

fn save_state<S: Scalar>(
    path: &Path,
    cfg: &ModelConfig,
    params: &TransformerParams<Tensor<S>>,
    opt: &OptimizerState<S>,
    run: &TrainRunConfig,
    best_valid_nll: f64,
) -> Result<()> {
    let mut extra = run.record();
    if best_valid_nll.is_finite() {
        extra.push(("run.best_valid_nll".into(), best_valid_nll.to_string()));
    }
    save_checkpoint(
        &Checkpoint {
            model: cfg.clone(),
            params: params.clone(),
            opt: Some(opt.clone()),
            step: opt.step,
            extra,
        },
        path,
    )
}

fn divergence_context(err: Error, step: u64, last: Option<&Path>) -> Error {
    match err {
        Error::NonFinite {
            what,
            step: s,
            last_checkpoint,
        } => Error::NonFinite {
            what,
            step: if s == 0 { step } else { s },
            last_checkpoint: last_checkpoint.or_else(|| last.map(|p| p.display().to_string())),
        },
        other => other,
    }
}

/// Truncates an existing metrics log back to `resume_step` (so the next row
/// continues without a gap) or starts a fresh one with the header.
fn prepare_metrics_csv(path: &Path, resume_step: u64) -> Result<File> {
    if resume_step > 0 && path.exists() {
        let text = std::fs::read_to_string(path)?;
        let mut kept = String::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 {
                if line != METRICS_HEADER {
                    return Err(Error::Metrics(format!(
                        "{} does not start with the expected header",
                        path.display()
                    )));
                }
                kept.push_str(line);
                kept.push('\n');
                continue;
            }
            let step: u64 = line
                .split(',')
                .next()
                .unwrap_or("")
                .parse()
                .map_err(|_| {
                    Error::Metrics(format!("{} line {}: unparseable step", path.display(), i + 1))
                })?;
            if step <= resume_step {
                kept.push_str(line);
                kept.push('\n');
            }
        }
        std::fs::write(path, kept)?;
    } else {
        std::fs::write(path, format!("{METRICS_HEADER}\n"))?;
    }
    Ok(OpenOptions::new().append(true).open(path)?)
}

/// Runs (or resumes) training to `run.max_steps`, writing metrics.csv and
/// the last/best checkpoints under `run.out_dir`.
pub fn run_training<S: Scalar>(
    cfg: &ModelConfig,
    run: &TrainRunConfig,
    train_pairs: &[SentencePair],
    valid_pairs: &[SentencePair],
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    run.validate()?;
    run.validate_against(cfg)?;
    std::fs::create_dir_all(&run.out_dir)?;

    let mut best_valid_nll = f64::INFINITY;
    let (mut params, mut opt) = match resume {
        Some(path) => {
            let ck = load_checkpoint::<S>(path)?;
            ck.validate_against(cfg)?;
            verify_run_record(&ck.extra, run)?;
            if let Some((_, v)) = ck.extra.iter().find(|(k, _)| k == "run.best_valid_nll") {
                best_valid_nll = v.parse().unwrap_or(f64::INFINITY);
            }
            let opt = ck.opt.ok_or_else(|| {
                Error::Checkpoint("no optimizer state stored; cannot resume training".into())
            })?;
            (ck.params, opt)
        }
        None => {
            let params = init_params::<S>(cfg, run.seed)?;
            let opt = OptimizerState::new(&params, run.adam.clone(), run.lr.clone())?;
            (params, opt)
        }
    };

    let metrics_path = run.out_dir.join(METRICS_FILE);
    let mut metrics = prepare_metrics_csv(&metrics_path, opt.step)?;

    let mut last_checkpoint = resume.map(Path::to_path_buf);
    let mut best_checkpoint = (best_valid_nll.is_finite()
        && run.out_dir.join(CHECKPOINT_BEST_FILE).exists())
    .then(|| run.out_dir.join(CHECKPOINT_BEST_FILE));
    let mut final_valid = None;
    let mut stopped_early = false;

    // Epoch length is fixed by corpus and budget; the per-epoch seed only
    // reorders the batches.
    let mut batches = make_batches(
        train_pairs,
        run.tokens_per_batch,
        derive_seed(run.seed, &[SEED_BATCH, 0]),
    )?;
    let epoch_len = batches.len() as u64;
    let mut epoch = 0u64;

    while opt.step < run.max_steps {
        let s = opt.step;
        let t = s + 1;
        let e = s / epoch_len;
        if e != epoch {
            batches = make_batches(
                train_pairs,
                run.tokens_per_batch,
                derive_seed(run.seed, &[SEED_BATCH, e]),
            )?;
            debug_assert_eq!(batches.len() as u64, epoch_len);
            epoch = e;
        }
        let batch = &batches[(s % epoch_len) as usize];

        let started = Instant::now();
        let step_metrics = train_step(batch, &mut params, &mut opt, cfg, run)
            .map_err(|err| divergence_context(err, t, last_checkpoint.as_deref()))?;
        let elapsed = started.elapsed().as_secs_f64().max(1e-9);
        let tokens_per_sec = step_metrics.batch_tokens as f64 / elapsed;

        let mut valid_cell = String::new();
        if !valid_pairs.is_empty() && (t % run.validate_interval == 0 || t == run.max_steps) {
            let report = validate_model(&params, cfg, valid_pairs)?;
            valid_cell = report.per_token_nll.to_string();
            if report.per_token_nll < best_valid_nll {
                best_valid_nll = report.per_token_nll;
                let path = run.out_dir.join(CHECKPOINT_BEST_FILE);
                save_state(&path, cfg, &params, &opt, run, best_valid_nll)?;
                best_checkpoint = Some(path);
            }
            if let Some(bar) = run.stop_at_token_accuracy {
                if report.token_accuracy.unwrap_or(0.0) >= bar {
                    stopped_early = true;
                }
            }
            final_valid = Some(report);
        }

        writeln!(
            metrics,
            "{},{},{},{},{},{},{},{:.1}",
            t,
            step_metrics.lr,
            step_metrics.p_keep,
            step_metrics.losses.per_token_nll(),
            step_metrics.losses.per_token_ecm(),
            step_metrics.losses.per_token_combined(),
            valid_cell,
            tokens_per_sec
        )?;

        if t % run.checkpoint_interval == 0 || t == run.max_steps || stopped_early {
            let path = run.out_dir.join(CHECKPOINT_LAST_FILE);
            save_state(&path, cfg, &params, &opt, run, best_valid_nll)?;
            last_checkpoint = Some(path);
        }
        if stopped_early {
            break;
        }
    }
    metrics.flush()?;

    Ok(TrainOutcome {
        final_step: opt.step,
        stopped_early,
        final_valid,
        best_valid_nll: best_valid_nll.is_finite().then_some(best_valid_nll),
        last_checkpoint,
        best_checkpoint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_vocab, generate_synthetic_task, TaskKind};
    use crate::optim::learning_rate;
    use tempfile::TempDir;

    fn tiny_cfg(vocab_src: usize, vocab_tgt: usize) -> ModelConfig {
        ModelConfig {
            num_layers: 1,
            num_heads: 2,
            hidden_size: 16,
            ffn_size: 32,
            vocab_size_src: vocab_src,
            vocab_size_tgt: vocab_tgt,
            max_positions: 16,
            dropout: 0.1,
            decoder_mode: DecoderMode::TwoStream,
            share_correction_head: true,
        }
    }

    fn lexicon_pairs(count: usize, seed: u64) -> (Vec<SentencePair>, usize, usize) {
        let corpus = generate_synthetic_task(TaskKind::Lexicon, 8, 4, count, seed).unwrap();
        let src_vocab =
            build_vocab(corpus.source_lines.iter().map(String::as_str), 100, 1).unwrap();
        let tgt_vocab =
            build_vocab(corpus.target_lines.iter().map(String::as_str), 100, 1).unwrap();
        let pairs = corpus
            .source_lines
            .iter()
            .zip(&corpus.target_lines)
            .map(|(s, t)| SentencePair {
                x: src_vocab.encode_line(s),
                y: tgt_vocab.encode_line(t),
            })
            .collect();
        (pairs, src_vocab.len(), tgt_vocab.len())
    }

    fn run_cfg(dir: &Path, steps: u64, seed: u64) -> TrainRunConfig {
        TrainRunConfig {
            max_steps: steps,
            tokens_per_batch: 48,
            seed,
            schedule: SampleSchedule {
                alpha: 0,
                beta: 0.3,
                mu: 2.0,
            },
            lr: LrSchedule {
                peak: 3e-4,
                warmup_steps: 4,
                max_steps: steps.max(8),
            },
            checkpoint_interval: 4,
            validate_interval: 4,
            ..TrainRunConfig::new(dir)
        }
    }

    fn assert_params_bits_equal(
        a: &TransformerParams<Tensor<f32>>,
        b: &TransformerParams<Tensor<f32>>,
    ) {
        for ((name, ta), (_, tb)) in a.flatten().iter().zip(&b.flatten()) {
            assert_eq!(ta.shape(), tb.shape(), "{name}");
            for (x, y) in ta.data().iter().zip(tb.data()) {
                assert_eq!(x.to_bits(), y.to_bits(), "{name}");
            }
        }
    }

    fn csv_without_timing(path: &Path) -> String {
        std::fs::read_to_string(path)
            .unwrap()
            .lines()
            .map(|l| l.rsplit_once(',').unwrap().0.to_owned())
            .collect::<Vec<_>>()
            .join("\n")
    }

    #[test]
    fn pre_alpha_sampling_is_bitwise_teacher_forcing() {
        let (pairs, vs, vt) = lexicon_pairs(24, 11);
        let cfg = tiny_cfg(vs, vt);
        let dir = TempDir::new().unwrap();

        let mut gated = run_cfg(&dir.path().join("gated"), 3, 7);
        gated.schedule.alpha = 1_000_000;
        let mut off = run_cfg(&dir.path().join("off"), 3, 7);
        off.enable_ss = false;

        run_training::<f32>(&cfg, &gated, &pairs, &[], None).unwrap();
        run_training::<f32>(&cfg, &off, &pairs, &[], None).unwrap();

        let a = load_checkpoint::<f32>(&gated.out_dir.join(CHECKPOINT_LAST_FILE)).unwrap();
        let b = load_checkpoint::<f32>(&off.out_dir.join(CHECKPOINT_LAST_FILE)).unwrap();
        assert_params_bits_equal(&a.params, &b.params);
        assert_eq!(
            csv_without_timing(&gated.out_dir.join(METRICS_FILE)),
            csv_without_timing(&off.out_dir.join(METRICS_FILE))
        );
        // Teacher forcing leaves nothing corrupted, so the correction term
        // stays at exactly zero even though it is enabled.
        for line in std::fs::read_to_string(gated.out_dir.join(METRICS_FILE))
            .unwrap()
            .lines()
            .skip(1)
        {
            assert_eq!(line.split(',').nth(4).unwrap(), "0");
        }
    }

    #[test]
    fn one_step_is_exactly_reproducible() {
        let (pairs, vs, vt) = lexicon_pairs(16, 3);
        let cfg = tiny_cfg(vs, vt);
        let dir = TempDir::new().unwrap();
        let run = run_cfg(dir.path(), 1, 5);
        let batches = make_batches(&pairs, run.tokens_per_batch, 9).unwrap();

        let mut results = Vec::new();
        for _ in 0..2 {
            let mut params = init_params::<f32>(&cfg, run.seed).unwrap();
            let mut opt =
                OptimizerState::new(&params, run.adam.clone(), run.lr.clone()).unwrap();
            let m = train_step(&batches[0], &mut params, &mut opt, &cfg, &run).unwrap();
            results.push((params, m));
        }
        let (pa, ma) = &results[0];
        let (pb, mb) = &results[1];
        assert_eq!(ma.losses, mb.losses);
        assert_eq!(ma.grad_norm.to_bits(), mb.grad_norm.to_bits());
        assert_params_bits_equal(pa, pb);
        assert!(ma.losses.ecm > 0.0, "sampling at step 1 should corrupt");
    }

    #[test]
    fn ablation_flags_shape_the_objective() {
        let (pairs, vs, vt) = lexicon_pairs(16, 3);
        let cfg = tiny_cfg(vs, vt);
        let dir = TempDir::new().unwrap();
        let base = run_cfg(dir.path(), 1, 5);
        let batches = make_batches(&pairs, base.tokens_per_batch, 9).unwrap();
        let step_with = |run: &TrainRunConfig, cfg: &ModelConfig| {
            let mut params = init_params::<f32>(cfg, run.seed).unwrap();
            let mut opt =
                OptimizerState::new(&params, run.adam.clone(), run.lr.clone()).unwrap();
            train_step(&batches[0], &mut params, &mut opt, cfg, run).unwrap()
        };

        let full = step_with(&base, &cfg);
        assert!(full.losses.ecm > 0.0);
        assert!(full.losses.ecm_tokens > 0);
        assert_eq!(
            full.losses.combined,
            full.losses.nll + base.weights.lambda * full.losses.ecm
        );

        let mut no_ecm = base.clone();
        no_ecm.enable_ecm = false;
        let m = step_with(&no_ecm, &cfg);
        assert_eq!(m.losses.ecm, 0.0);
        assert_eq!(m.losses.ecm_tokens, 0);
        assert_eq!(m.losses.combined, m.losses.nll);

        let mut no_ss = no_ecm.clone();
        no_ss.enable_ss = false;
        let m = step_with(&no_ss, &cfg);
        assert_eq!(m.p_keep, 1.0);
        assert_eq!(m.losses.combined, m.losses.nll);

        let mut standard = no_ss.clone();
        standard.enable_tssa = false;
        let mut standard_cfg = cfg.clone();
        standard_cfg.decoder_mode = DecoderMode::Standard;
        let m = step_with(&standard, &standard_cfg);
        assert_eq!(m.losses.ecm, 0.0);
        assert!(m.losses.nll > 0.0);

        let mut bad = base.clone();
        bad.enable_tssa = false;
        assert!(matches!(bad.validate(), Err(Error::InvalidConfig(_))));
        assert!(matches!(
            base.validate_against(&standard_cfg),
            Err(Error::InvalidConfig(_))
        ));
        assert!(matches!(
            standard.validate_against(&cfg),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn same_seed_reruns_are_identical_and_track_best() {
        let (pairs, vs, vt) = lexicon_pairs(24, 11);
        let valid = pairs[..6].to_vec();
        let cfg = tiny_cfg(vs, vt);
        let dir = TempDir::new().unwrap();

        let runs: Vec<TrainOutcome> = (0..2)
            .map(|i| {
                let run = run_cfg(&dir.path().join(format!("r{i}")), 6, 13);
                run_training::<f32>(&cfg, &run, &pairs, &valid, None).unwrap()
            })
            .collect();
        let csv0 = csv_without_timing(&dir.path().join("r0").join(METRICS_FILE));
        let csv1 = csv_without_timing(&dir.path().join("r1").join(METRICS_FILE));
        assert_eq!(csv0, csv1);

        let a = load_checkpoint::<f32>(runs[0].last_checkpoint.as_ref().unwrap()).unwrap();
        let b = load_checkpoint::<f32>(runs[1].last_checkpoint.as_ref().unwrap()).unwrap();
        assert_eq!(a.step, 6);
        assert_params_bits_equal(&a.params, &b.params);

        // Best tracking: the stored best equals the smallest logged
        // validation value, and the best checkpoint exists.
        let best = runs[0].best_valid_nll.unwrap();
        let min_logged = csv0
            .lines()
            .skip(1)
            .filter_map(|l| l.split(',').nth(6).unwrap().parse::<f64>().ok())
            .fold(f64::INFINITY, f64::min);
        assert_eq!(best, min_logged);
        assert!(runs[0].best_checkpoint.as_ref().unwrap().exists());
        assert!(runs[0].final_valid.unwrap().tokens > 0);
    }

    #[test]
    fn resume_continues_bit_identically() {
        let (pairs, vs, vt) = lexicon_pairs(24, 11);
        let valid = pairs[..6].to_vec();
        let cfg = tiny_cfg(vs, vt);
        let dir = TempDir::new().unwrap();

        let full = run_cfg(&dir.path().join("full"), 8, 21);
        run_training::<f32>(&cfg, &full, &pairs, &valid, None).unwrap();

        let split_dir = dir.path().join("split");
        let mut leg = run_cfg(&split_dir, 4, 21);
        run_training::<f32>(&cfg, &leg, &pairs, &valid, None).unwrap();
        leg.max_steps = 8;
        let resumed = run_training::<f32>(
            &cfg,
            &leg,
            &pairs,
            &valid,
            Some(&split_dir.join(CHECKPOINT_LAST_FILE)),
        )
        .unwrap();
        assert_eq!(resumed.final_step, 8);

        let a = load_checkpoint::<f32>(&full.out_dir.join(CHECKPOINT_LAST_FILE)).unwrap();
        let b = load_checkpoint::<f32>(&split_dir.join(CHECKPOINT_LAST_FILE)).unwrap();
        assert_params_bits_equal(&a.params, &b.params);
        let (oa, ob) = (a.opt.unwrap(), b.opt.unwrap());
        assert_eq!(oa.step, ob.step);
        assert_params_bits_equal(&oa.m, &ob.m);
        assert_params_bits_equal(&oa.v, &ob.v);

        assert_eq!(
            csv_without_timing(&full.out_dir.join(METRICS_FILE)),
            csv_without_timing(&split_dir.join(METRICS_FILE))
        );
    }

    #[test]
    fn resume_rejects_trajectory_changes_and_foreign_logs() {
        let (pairs, vs, vt) = lexicon_pairs(16, 3);
        let cfg = tiny_cfg(vs, vt);
        let dir = TempDir::new().unwrap();
        let mut run = run_cfg(dir.path(), 4, 2);
        run_training::<f32>(&cfg, &run, &pairs, &[], None).unwrap();
        let ck = dir.path().join(CHECKPOINT_LAST_FILE);

        run.max_steps = 8;
        run.seed = 3;
        let err = run_training::<f32>(&cfg, &run, &pairs, &[], Some(&ck)).unwrap_err();
        match err {
            Error::InvalidConfig(msg) => assert!(msg.contains("run.seed"), "{msg}"),
            other => panic!("unexpected error {other}"),
        }

        run.seed = 2;
        std::fs::write(dir.path().join(METRICS_FILE), "bogus\n1,2\n").unwrap();
        assert!(matches!(
            run_training::<f32>(&cfg, &run, &pairs, &[], Some(&ck)),
            Err(Error::Metrics(_))
        ));
    }

    #[test]
    fn token_accuracy_bar_stops_the_run_early() {
        let (pairs, vs, vt) = lexicon_pairs(16, 3);
        let cfg = tiny_cfg(vs, vt);
        let dir = TempDir::new().unwrap();
        let mut run = run_cfg(dir.path(), 50, 2);
        run.validate_interval = 2;
        run.stop_at_token_accuracy = Some(0.0);
        let outcome = run_training::<f32>(&cfg, &run, &pairs, &pairs[..4], None).unwrap();
        assert!(outcome.stopped_early);
        assert_eq!(outcome.final_step, 2);
        assert!(outcome.last_checkpoint.unwrap().exists());
        let rows = std::fs::read_to_string(dir.path().join(METRICS_FILE))
            .unwrap()
            .lines()
            .count();
        assert_eq!(rows, 3);
    }

    #[test]
    fn metrics_columns_follow_the_schedules() {
        let (pairs, vs, vt) = lexicon_pairs(16, 3);
        let cfg = tiny_cfg(vs, vt);
        let dir = TempDir::new().unwrap();
        let mut run = run_cfg(dir.path(), 5, 17);
        run.validate_interval = 2;
        run_training::<f32>(&cfg, &run, &pairs, &pairs[..4], None).unwrap();

        let text = std::fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), METRICS_HEADER);
        for (i, line) in lines.enumerate() {
            let t = (i + 1) as u64;
            let cells: Vec<&str> = line.split(',').collect();
            assert_eq!(cells.len(), 8);
            assert_eq!(cells[0], t.to_string());
            assert_eq!(cells[1], learning_rate(t, &run.lr).to_string());
            assert_eq!(cells[2], keep_probability(t, &run.schedule).to_string());
            let validated = t % run.validate_interval == 0 || t == run.max_steps;
            assert_eq!(!cells[6].is_empty(), validated, "step {t}");
        }
    }

    #[test]
    fn loss_drops_quickly_on_the_lexicon_task() {
        let (pairs, vs, vt) = lexicon_pairs(48, 29);
        let mut cfg = tiny_cfg(vs, vt);
        cfg.dropout = 0.0;
        let dir = TempDir::new().unwrap();
        let mut run = run_cfg(dir.path(), 80, 29);
        run.enable_ss = false;
        run.enable_ecm = false;
        run.tokens_per_batch = 96;
        run.lr = LrSchedule {
            peak: 3e-3,
            warmup_steps: 8,
            max_steps: 160,
        };
        run_training::<f32>(&cfg, &run, &pairs, &[], None).unwrap();

        let text = std::fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
        let nll = |line: &str| line.split(',').nth(3).unwrap().parse::<f64>().unwrap();
        let rows: Vec<&str> = text.lines().skip(1).collect();
        let first = nll(rows.first().unwrap());
        let last = nll(rows.last().unwrap());
        assert!(
            last < 0.5 * first,
            "per-token nll went {first} -> {last} over {} steps",
            rows.len()
        );
    }

    #[test]
    fn divergence_aborts_with_checkpoint_reference() {
        let (pairs, vs, vt) = lexicon_pairs(16, 3);
        let cfg = tiny_cfg(vs, vt);
        let dir = TempDir::new().unwrap();
        let mut run = run_cfg(dir.path(), 10, 2);
        run.checkpoint_interval = 1;
        run.lr = LrSchedule {
            peak: 1e12,
            warmup_steps: 1,
            max_steps: 10,
        };
        let err = run_training::<f32>(&cfg, &run, &pairs, &[], None).unwrap_err();
        match err {
            Error::NonFinite {
                step,
                last_checkpoint,
                ..
            } => {
                assert!(step >= 2, "step {step}");
                let path = last_checkpoint.expect("a step-1 checkpoint was written");
                assert!(path.contains(CHECKPOINT_LAST_FILE));
            }
            other => panic!("expected divergence, got {other}"),
        }
    }
}
