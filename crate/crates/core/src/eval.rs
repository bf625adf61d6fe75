//! Corpus-level translation metrics: BLEU, token and sequence accuracy,
//! and aggregated correction-recovery statistics.
//!
//! `corpus_bleu` reproduces the classic multi-bleu script: case-sensitive,
//! whitespace tokenization, no smoothing. A zero clipped-match count at any
//! order zeroes the whole score, so tiny test sets legitimately score 0.
//! The committed fixture under `fixtures/bleu/` pins this implementation
//! against the reference scorer's output.

use std::collections::HashMap;
use std::fmt;

use rand::Rng;

use crate::data::RESERVED;
use crate::error::{Error, Result};
use crate::infer::CorrectionReport;

/// Corpus-level BLEU-4 with its component statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BleuReport {
    /// Score on the 0–100 scale.
    pub bleu: f64,
    /// Modified (clipped) n-gram precisions for orders 1–4.
    pub precisions: [f64; 4],
    /// `exp(1 - ref_len/hyp_len)` when the hypothesis corpus is shorter, else 1.
    pub brevity_penalty: f64,
    /// Total hypothesis tokens across the corpus.
    pub hypothesis_length: usize,
    /// Total reference tokens across the corpus.
    pub reference_length: usize,
}

impl fmt::Display for BleuReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ratio = if self.reference_length == 0 {
            0.0
        } else {
            self.hypothesis_length as f64 / self.reference_length as f64
        };
        write!(
            f,
            "BLEU = {:.2}, {:.1}/{:.1}/{:.1}/{:.1} (BP={:.3}, ratio={:.3}, hyp_len={}, ref_len={})",
            self.bleu,
            100.0 * self.precisions[0],
            100.0 * self.precisions[1],
            100.0 * self.precisions[2],
            100.0 * self.precisions[3],
            self.brevity_penalty,
            ratio,
            self.hypothesis_length,
            self.reference_length,
        )
    }
}

fn ngram_counts<'a>(words: &'a [&'a str], n: usize) -> HashMap<&'a [&'a str], usize> {
    let mut counts = HashMap::new();
    for start in 0..words.len().saturating_sub(n - 1) {
        *counts.entry(&words[start..start + n]).or_insert(0) += 1;
    }
    counts
}

/// Scores a hypothesis corpus against a single reference per sentence.
///
/// Counts are corpus-level sums, so the score is invariant to sentence
/// order. An all-empty hypothesis corpus scores 0 with brevity penalty 0.
pub fn corpus_bleu<H: AsRef<str>, R: AsRef<str>>(
    hypotheses: &[H],
    references: &[R],
) -> Result<BleuReport> {
    if hypotheses.len() != references.len() {
        return Err(Error::LengthMismatch {
            what: "bleu hypothesis vs reference sentence counts",
            left: hypotheses.len(),
            right: references.len(),
        });
    }
    if hypotheses.is_empty() {
        return Err(Error::EmptyCorpus(
            "bleu needs at least one sentence pair".into(),
        ));
    }

    let mut total = [0usize; 4];
    let mut correct = [0usize; 4];
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;
    for (hyp, reference) in hypotheses.iter().zip(references) {
        let hyp: Vec<&str> = hyp.as_ref().split_whitespace().collect();
        let reference: Vec<&str> = reference.as_ref().split_whitespace().collect();
        hyp_len += hyp.len();
        ref_len += reference.len();
        for n in 1..=4 {
            let ref_grams = ngram_counts(&reference, n);
            for (gram, count) in ngram_counts(&hyp, n) {
                total[n - 1] += count;
                correct[n - 1] += count.min(ref_grams.get(gram).copied().unwrap_or(0));
            }
        }
    }

    let mut precisions = [0.0f64; 4];
    for n in 0..4 {
        if total[n] > 0 {
            precisions[n] = correct[n] as f64 / total[n] as f64;
        }
    }
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    let bleu = if hyp_len == 0 || precisions.iter().any(|&p| p == 0.0) {
        0.0
    } else {
        100.0 * brevity_penalty * (precisions.iter().map(|p| p.ln()).sum::<f64>() / 4.0).exp()
    };
    Ok(BleuReport {
        bleu,
        precisions,
        brevity_penalty,
        hypothesis_length: hyp_len,
        reference_length: ref_len,
    })
}

/// Running match/total tally for accumulating accuracy across batches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AccuracyTally {
    pub matched: usize,
    pub counted: usize,
}

impl AccuracyTally {
    /// Folds one aligned prediction/reference pair into the tally; positions
    /// with `counted[i] == false` (padding) are skipped.
    pub fn observe(&mut self, predictions: &[u32], references: &[u32], counted: &[bool]) {
        assert_eq!(predictions.len(), references.len());
        assert_eq!(predictions.len(), counted.len());
        for ((&p, &r), &c) in predictions.iter().zip(references).zip(counted) {
            if c {
                self.counted += 1;
                if p == r {
                    self.matched += 1;
                }
            }
        }
    }

    /// `None` when no positions were counted.
    pub fn accuracy(&self) -> Option<f64> {
        (self.counted > 0).then(|| self.matched as f64 / self.counted as f64)
    }
}

/// Fraction of counted positions where prediction and reference agree.
pub fn token_accuracy(
    predictions: &[u32],
    references: &[u32],
    counted: &[bool],
) -> Option<f64> {
    let mut tally = AccuracyTally::default();
    tally.observe(predictions, references, counted);
    tally.accuracy()
}

/// Fraction of hypotheses exactly equal to their reference; sequences of
/// different length simply count as misses.
pub fn sequence_accuracy(hypotheses: &[Vec<u32>], references: &[Vec<u32>]) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::LengthMismatch {
            what: "sequence accuracy hypothesis vs reference counts",
            left: hypotheses.len(),
            right: references.len(),
        });
    }
    if hypotheses.is_empty() {
        return Err(Error::EmptyCorpus(
            "sequence accuracy needs at least one pair".into(),
        ));
    }
    let hits = hypotheses
        .iter()
        .zip(references)
        .filter(|(h, r)| h == r)
        .count();
    Ok(hits as f64 / hypotheses.len() as f64)
}

/// Correction diagnostics pooled within one corruption-rate decile.
///
/// Bucket `b` covers per-run corruption rates in `[b/10, (b+1)/10)`, with
/// fully corrupted runs folded into the top bucket.
#[derive(Clone, Debug, PartialEq)]
pub struct RecoveryBucket {
    /// Inclusive lower edge of the bucket's rate range (0.0, 0.1, …, 0.9).
    pub rate_floor: f64,
    pub runs: usize,
    pub corrupted: usize,
    pub recovered: usize,
}

impl RecoveryBucket {
    pub fn recovery_rate(&self) -> Option<f64> {
        (self.corrupted > 0).then(|| self.recovered as f64 / self.corrupted as f64)
    }
}

/// Correction-recovery statistics aggregated over many diagnostic runs.
#[derive(Clone, Debug, PartialEq)]
pub struct RecoverySummary {
    pub runs: usize,
    pub corrupted: usize,
    pub recovered: usize,
    /// Non-empty deciles, ascending by rate.
    pub buckets: Vec<RecoveryBucket>,
}

impl RecoverySummary {
    /// Pooled rate: total recoveries over total corruptions, `None` when
    /// no position was corrupted anywhere.
    pub fn recovery_rate(&self) -> Option<f64> {
        (self.corrupted > 0).then(|| self.recovered as f64 / self.corrupted as f64)
    }
}

/// Aggregates correction diagnostics, bucketed by per-run corruption rate.
///
/// A paired model comparison is built on top of this: corrupt each test
/// sentence once, feed the identical corrupted input through both models'
/// diagnostics, and aggregate each side separately — any difference between
/// the two summaries is then attributable to the models alone.
pub fn recovery_rate(reports: &[CorrectionReport]) -> Result<RecoverySummary> {
    if reports.is_empty() {
        return Err(Error::EmptyCorpus(
            "recovery aggregation needs at least one diagnostic run".into(),
        ));
    }
    let mut by_decile = [(0usize, 0usize, 0usize); 10];
    let mut summary = RecoverySummary {
        runs: reports.len(),
        corrupted: 0,
        recovered: 0,
        buckets: Vec::new(),
    };
    for report in reports {
        summary.corrupted += report.corrupted;
        summary.recovered += report.recovered;
        let decile = if report.predictions.is_empty() {
            0
        } else {
            (report.corrupted * 10 / report.predictions.len()).min(9)
        };
        let slot = &mut by_decile[decile];
        slot.0 += 1;
        slot.1 += report.corrupted;
        slot.2 += report.recovered;
    }
    for (decile, &(runs, corrupted, recovered)) in by_decile.iter().enumerate() {
        if runs > 0 {
            summary.buckets.push(RecoveryBucket {
                rate_floor: decile as f64 / 10.0,
                runs,
                corrupted,
                recovered,
            });
        }
    }
    Ok(summary)
}

/// Corrupts a token sequence for the correction diagnostic: each position
/// is independently replaced, with probability `rate`, by a uniformly
/// random *different* real token. Corrupting once and feeding the same
/// result to every model under comparison keeps the comparison paired.
pub fn corrupt_tokens<R: Rng>(
    tokens: &[u32],
    rate: f64,
    vocab_size: usize,
    rng: &mut R,
) -> Vec<u32> {
    assert!(
        vocab_size > RESERVED + 1,
        "need at least two real tokens to corrupt into"
    );
    tokens
        .iter()
        .map(|&t| {
            if rng.random::<f64>() >= rate {
                return t;
            }
            loop {
                let candidate = rng.random_range(RESERVED as u32..vocab_size as u32);
                if candidate != t {
                    return candidate;
                }
            }
        })
        .collect()
}
