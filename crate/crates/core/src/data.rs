//! Vocabulary, parallel-corpus handling, token-budget batching, and the
//! synthetic translation tasks used for desk-scale experiments.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const RESERVED: usize = 4;

const RESERVED_TOKENS: [&str; RESERVED] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Token ↔ id bijection with fixed reserved ids 0=pad, 1=bos, 2=eos, 3=unk.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Result<Self> {
        let tokens: Vec<String> = tokens.into_iter().collect();
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(Error::InvalidConfig(format!(
                    "vocabulary token {i} is empty or contains whitespace"
                )));
            }
            if index.insert(tok.clone(), (i + RESERVED) as u32).is_some() {
                return Err(Error::InvalidConfig(format!("duplicate vocabulary token {tok:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    /// Total id count including the reserved ids.
    pub fn len(&self) -> usize {
        self.tokens.len() + RESERVED
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> &str {
        let id = id as usize;
        if id < RESERVED {
            RESERVED_TOKENS[id]
        } else {
            &self.tokens[id - RESERVED]
        }
    }

    pub fn encode_line(&self, line: &str) -> Vec<u32> {
        line.split_whitespace().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        let toks: Vec<&str> = ids.iter().map(|&id| self.token(id)).collect();
        toks.join(" ")
    }

    /// One token per line; line number = id − 4.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for tok in &self.tokens {
            text.push_str(tok);
            text.push('\n');
        }
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Vocabulary::from_tokens(text.lines().map(str::to_owned))
    }
}

/// Frequency-ranked vocabulary over whitespace-tokenized lines; ties broken
/// lexicographically. Tokens below `min_count` fall back to unk.
pub fn build_vocab<'a>(
    lines: impl IntoIterator<Item = &'a str>,
    max_size: usize,
    min_count: usize,
) -> Result<Vocabulary> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    let mut any = false;
    for line in lines {
        for tok in line.split_whitespace() {
            any = true;
            *counts.entry(tok).or_insert(0) += 1;
        }
    }
    if !any {
        return Err(Error::EmptyCorpus("no tokens to build a vocabulary from".into()));
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().filter(|&(_, c)| c >= min_count).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.truncate(max_size);
    Vocabulary::from_tokens(ranked.into_iter().map(|(t, _)| t.to_owned()))
}

/// One aligned sentence pair as raw token ids — no bos/eos/pad; those are
/// added where the model consumes the pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SentencePair {
    pub x: Vec<u32>,
    pub y: Vec<u32>,
}

impl SentencePair {
    pub fn real_tokens(&self) -> usize {
        self.x.len() + self.y.len()
    }
}

/// Reads two aligned text files into id pairs.
pub fn load_parallel_corpus(
    src_path: &Path,
    tgt_path: &Path,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
) -> Result<Vec<SentencePair>> {
    let src = std::fs::read_to_string(src_path)?;
    let tgt = std::fs::read_to_string(tgt_path)?;
    let src_lines: Vec<&str> = src.lines().collect();
    let tgt_lines: Vec<&str> = tgt.lines().collect();
    if src_lines.len() != tgt_lines.len() {
        return Err(Error::LengthMismatch {
            what: "parallel corpus line counts",
            left: src_lines.len(),
            right: tgt_lines.len(),
        });
    }
    let mut pairs = Vec::with_capacity(src_lines.len());
    for (i, (s, t)) in src_lines.iter().zip(&tgt_lines).enumerate() {
        let x = src_vocab.encode_line(s);
        let y = tgt_vocab.encode_line(t);
        if x.is_empty() || y.is_empty() {
            return Err(Error::BadCorpusLine {
                line: i + 1,
                reason: "empty sentence".into(),
            });
        }
        pairs.push(SentencePair { x, y });
    }
    if pairs.is_empty() {
        return Err(Error::EmptyCorpus(format!("{}", src_path.display())));
    }
    Ok(pairs)
}

/// A padded batch. `src_mask`/`tgt_mask` mark real (non-pad) positions.
#[derive(Debug, Clone)]
pub struct Batch {
    pub src: Vec<Vec<u32>>,
    pub tgt: Vec<Vec<u32>>,
    pub src_mask: Vec<Vec<bool>>,
    pub tgt_mask: Vec<Vec<bool>>,
    pub real_tokens: usize,
    /// Indices of the member pairs in the original corpus order.
    pub pair_indices: Vec<usize>,
}

impl Batch {
    fn from_pairs(pairs: &[SentencePair], indices: Vec<usize>) -> Batch {
        let max_src = indices.iter().map(|&i| pairs[i].x.len()).max().unwrap();
        let max_tgt = indices.iter().map(|&i| pairs[i].y.len()).max().unwrap();
        let mut src = Vec::new();
        let mut tgt = Vec::new();
        let mut src_mask = Vec::new();
        let mut tgt_mask = Vec::new();
        let mut real_tokens = 0;
        for &i in &indices {
            let p = &pairs[i];
            real_tokens += p.real_tokens();
            let mut s = p.x.clone();
            let mut sm = vec![true; s.len()];
            s.resize(max_src, PAD);
            sm.resize(max_src, false);
            let mut t = p.y.clone();
            let mut tm = vec![true; t.len()];
            t.resize(max_tgt, PAD);
            tm.resize(max_tgt, false);
            src.push(s);
            src_mask.push(sm);
            tgt.push(t);
            tgt_mask.push(tm);
        }
        Batch {
            src,
            tgt,
            src_mask,
            tgt_mask,
            real_tokens,
            pair_indices: indices,
        }
    }

    pub fn rows(&self) -> usize {
        self.src.len()
    }

    /// Iterates the member pairs with padding stripped.
    pub fn unpadded_pairs(&self) -> impl Iterator<Item = SentencePair> + '_ {
        (0..self.rows()).map(|r| SentencePair {
            x: self.src[r]
                .iter()
                .zip(&self.src_mask[r])
                .filter(|&(_, &m)| m)
                .map(|(&t, _)| t)
                .collect(),
            y: self.tgt[r]
                .iter()
                .zip(&self.tgt_mask[r])
                .filter(|&(_, &m)| m)
                .map(|(&t, _)| t)
                .collect(),
        })
    }
}

/// Length-bucketed batches under a real-token budget, with a seeded shuffle
/// of the batch order. Every pair lands in exactly one batch.
pub fn make_batches(pairs: &[SentencePair], token_budget: usize, seed: u64) -> Result<Vec<Batch>> {
    if pairs.is_empty() {
        return Err(Error::EmptyCorpus("no pairs to batch".into()));
    }
    for (i, p) in pairs.iter().enumerate() {
        if p.real_tokens() > token_budget {
            return Err(Error::SentenceOverBudget {
                line: i + 1,
                tokens: p.real_tokens(),
                budget: token_budget,
            });
        }
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by_key(|&i| (pairs[i].real_tokens(), i));
    let mut batches = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut current_tokens = 0;
    for i in order {
        let t = pairs[i].real_tokens();
        if !current.is_empty() && current_tokens + t > token_budget {
            batches.push(Batch::from_pairs(pairs, std::mem::take(&mut current)));
            current_tokens = 0;
        }
        current.push(i);
        current_tokens += t;
    }
    if !current.is_empty() {
        batches.push(Batch::from_pairs(pairs, current));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    batches.shuffle(&mut rng);
    Ok(batches)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Lexicon,
    Reversal,
    NoisyLexicon,
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lexicon" => Ok(TaskKind::Lexicon),
            "reversal" => Ok(TaskKind::Reversal),
            "noisy_lexicon" => Ok(TaskKind::NoisyLexicon),
            other => Err(Error::InvalidConfig(format!(
                "unknown task {other:?}; expected lexicon, reversal, or noisy_lexicon"
            ))),
        }
    }
}

/// Fraction of source tokens replaced by random other tokens in the
/// noisy_lexicon task. The target keeps the clean mapping of the original
/// token, so noisy positions cannot be resolved from the source token alone.
pub const NOISY_LEXICON_NOISE: f64 = 0.2;

/// A generated parallel corpus as text lines, plus the token-level mapping
/// the tasks are built on.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub source_lines: Vec<String>,
    pub target_lines: Vec<String>,
}

fn surface(prefix: char, idx: usize, width: usize) -> String {
    format!("{prefix}{idx:0width$}")
}

/// Token-mapping translation tasks:
/// - lexicon: target token t is a fixed seeded bijection of source token s.
/// - reversal: lexicon mapping with the target sequence reversed.
/// - noisy_lexicon: lexicon where a fraction of source tokens is replaced
///   after the target is fixed, forcing reliance on training-time context.
///
/// Sentence lengths are uniform in [1, max_len]. Pair i draws from its own
/// seed-derived stream, so it is reproducible across machines and identical
/// across task kinds that share the same clean pair.
pub fn generate_synthetic_task(
    kind: TaskKind,
    vocab_size: usize,
    max_len: usize,
    num_pairs: usize,
    seed: u64,
) -> Result<SyntheticCorpus> {
    let noise = match kind {
        TaskKind::NoisyLexicon => NOISY_LEXICON_NOISE,
        _ => 0.0,
    };
    generate_synthetic_task_with_noise(kind, vocab_size, max_len, num_pairs, seed, noise)
}

/// `generate_synthetic_task` with an explicit source-noise fraction; only
/// meaningful for the noisy_lexicon kind, where noise 0 reproduces the
/// lexicon output exactly.
pub fn generate_synthetic_task_with_noise(
    kind: TaskKind,
    vocab_size: usize,
    max_len: usize,
    num_pairs: usize,
    seed: u64,
    noise: f64,
) -> Result<SyntheticCorpus> {
    if vocab_size < 5 {
        return Err(Error::InvalidConfig(format!(
            "synthetic vocab_size must be at least 5, got {vocab_size}"
        )));
    }
    if max_len < 1 {
        return Err(Error::InvalidConfig("synthetic max_len must be at least 1".into()));
    }
    if num_pairs == 0 {
        return Err(Error::InvalidConfig("synthetic num_pairs must be positive".into()));
    }
    if !(0.0..=1.0).contains(&noise) {
        return Err(Error::InvalidConfig(format!("noise must be in [0, 1], got {noise}")));
    }
    let width = (vocab_size - 1).to_string().len();
    // The mapping uses its own stream so corpora of different sizes share it.
    let mut map_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d61_7070_696e_67);
    let mut mapping: Vec<usize> = (0..vocab_size).collect();
    mapping.shuffle(&mut map_rng);

    let mut source_lines = Vec::with_capacity(num_pairs);
    let mut target_lines = Vec::with_capacity(num_pairs);
    for pair_idx in 0..num_pairs {
        let mut rng = ChaCha8Rng::seed_from_u64(crate::derive_seed(seed, &[1, pair_idx as u64]));
        let len = rng.random_range(1..=max_len);
        let mut src: Vec<usize> = (0..len).map(|_| rng.random_range(0..vocab_size)).collect();
        let mut tgt: Vec<usize> = src.iter().map(|&s| mapping[s]).collect();
        match kind {
            TaskKind::Lexicon => {}
            TaskKind::Reversal => tgt.reverse(),
            TaskKind::NoisyLexicon => {
                for s in &mut src {
                    if rng.random::<f64>() < noise {
                        let repl = rng.random_range(0..vocab_size - 1);
                        *s = if repl >= *s { repl + 1 } else { repl };
                    }
                }
            }
        }
        source_lines.push(
            src.iter()
                .map(|&i| surface('s', i, width))
                .collect::<Vec<_>>()
                .join(" "),
        );
        target_lines.push(
            tgt.iter()
                .map(|&i| surface('t', i, width))
                .collect::<Vec<_>>()
                .join(" "),
        );
    }
    Ok(SyntheticCorpus {
        source_lines,
        target_lines,
    })
}
