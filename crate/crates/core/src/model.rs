//! Transformer encoder and the two-stream decoder.
//!
//! The decoder runs two parallel stacks over shared per-layer weights: the
//! content stream reads token + position embeddings and may attend up to and
//! including its own position; the query stream reads position embeddings
//! only. Query row r carries position r+1 and attends content rows 0..=r,
//! which realizes the strict "everything before the predicted position"
//! visibility without a separate mask shape.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::BOS;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::tensor::{Tensor, LAYER_NORM_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderMode {
    TwoStream,
    Standard,
}

impl std::str::FromStr for DecoderMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two_stream" => Ok(DecoderMode::TwoStream),
            "standard" => Ok(DecoderMode::Standard),
            other => Err(Error::InvalidConfig(format!(
                "unknown decoder mode {other:?}; expected two_stream or standard"
            ))),
        }
    }
}

impl DecoderMode {
    pub fn as_str(self) -> &'static str {
        match self {
            DecoderMode::TwoStream => "two_stream",
            DecoderMode::Standard => "standard",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub hidden_size: usize,
    pub ffn_size: usize,
    pub vocab_size_src: usize,
    pub vocab_size_tgt: usize,
    pub max_positions: usize,
    pub dropout: f64,
    pub decoder_mode: DecoderMode,
    pub share_correction_head: bool,
}

impl ModelConfig {
    /// Full-scale defaults: 6 layers, 4 heads, hidden 512, filter 1024,
    /// dropout 0.3.
    pub fn base(vocab_size_src: usize, vocab_size_tgt: usize) -> Self {
        ModelConfig {
            num_layers: 6,
            num_heads: 4,
            hidden_size: 512,
            ffn_size: 1024,
            vocab_size_src,
            vocab_size_tgt,
            max_positions: 128,
            dropout: 0.3,
            decoder_mode: DecoderMode::TwoStream,
            share_correction_head: true,
        }
    }

    /// Desk-scale config for tests and toy experiments.
    pub fn toy(vocab_size_src: usize, vocab_size_tgt: usize) -> Self {
        ModelConfig {
            num_layers: 2,
            num_heads: 2,
            hidden_size: 32,
            ffn_size: 64,
            vocab_size_src,
            vocab_size_tgt,
            max_positions: 64,
            dropout: 0.0,
            decoder_mode: DecoderMode::TwoStream,
            share_correction_head: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.hidden_size == 0 || self.num_heads == 0 || self.num_layers == 0 || self.ffn_size == 0
        {
            return bad("layers, heads, hidden and ffn sizes must be positive".into());
        }
        if self.hidden_size % self.num_heads != 0 {
            return bad(format!(
                "hidden size {} not divisible by {} heads",
                self.hidden_size, self.num_heads
            ));
        }
        if self.vocab_size_src < 5 || self.vocab_size_tgt < 5 {
            return bad("vocabulary sizes must cover the 4 reserved ids plus at least one token".into());
        }
        if self.max_positions == 0 {
            return bad("max_positions must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }
}

#[derive(Debug, Clone)]
pub struct LayerNormParams<T> {
    pub gain: T,
    pub bias: T,
}

#[derive(Debug, Clone)]
pub struct AttentionParams<T> {
    pub wq: T,
    pub bq: T,
    pub wk: T,
    pub bk: T,
    pub wv: T,
    pub bv: T,
    pub wo: T,
    pub bo: T,
}

#[derive(Debug, Clone)]
pub struct FeedForwardParams<T> {
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

#[derive(Debug, Clone)]
pub struct EncoderLayerParams<T> {
    pub self_attn: AttentionParams<T>,
    pub ln1: LayerNormParams<T>,
    pub ffn: FeedForwardParams<T>,
    pub ln2: LayerNormParams<T>,
}

#[derive(Debug, Clone)]
pub struct DecoderLayerParams<T> {
    pub self_attn: AttentionParams<T>,
    pub ln1: LayerNormParams<T>,
    pub cross_attn: AttentionParams<T>,
    pub ln2: LayerNormParams<T>,
    pub ffn: FeedForwardParams<T>,
    pub ln3: LayerNormParams<T>,
}

/// All model arrays, generic over the element so the same structure holds
/// concrete tensors, tape node ids, or optimizer moments. Both decoder
/// streams read the same layer entries — parameter sharing is structural.
#[derive(Debug, Clone)]
pub struct TransformerParams<T> {
    pub src_embed: T,
    pub tgt_embed: T,
    /// Positions 0..=max_positions; the query stream reads rows 1..=n.
    pub pos_embed: T,
    pub encoder: Vec<EncoderLayerParams<T>>,
    pub decoder: Vec<DecoderLayerParams<T>>,
    pub out_w: T,
    pub out_b: T,
    /// Separate correction head; None shares the output head.
    pub corr_w: Option<T>,
    pub corr_b: Option<T>,
}

impl<T> AttentionParams<T> {
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> AttentionParams<U> {
        AttentionParams {
            wq: f(&self.wq),
            bq: f(&self.bq),
            wk: f(&self.wk),
            bk: f(&self.bk),
            wv: f(&self.wv),
            bv: f(&self.bv),
            wo: f(&self.wo),
            bo: f(&self.bo),
        }
    }

    fn for_each<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T)) {
        f(format!("{prefix}.wq"), &self.wq);
        f(format!("{prefix}.bq"), &self.bq);
        f(format!("{prefix}.wk"), &self.wk);
        f(format!("{prefix}.bk"), &self.bk);
        f(format!("{prefix}.wv"), &self.wv);
        f(format!("{prefix}.bv"), &self.bv);
        f(format!("{prefix}.wo"), &self.wo);
        f(format!("{prefix}.bo"), &self.bo);
    }

    fn for_each_mut<'a>(&'a mut self, prefix: &str, f: &mut impl FnMut(String, &'a mut T)) {
        f(format!("{prefix}.wq"), &mut self.wq);
        f(format!("{prefix}.bq"), &mut self.bq);
        f(format!("{prefix}.wk"), &mut self.wk);
        f(format!("{prefix}.bk"), &mut self.bk);
        f(format!("{prefix}.wv"), &mut self.wv);
        f(format!("{prefix}.bv"), &mut self.bv);
        f(format!("{prefix}.wo"), &mut self.wo);
        f(format!("{prefix}.bo"), &mut self.bo);
    }
}

impl<T> LayerNormParams<T> {
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> LayerNormParams<U> {
        LayerNormParams {
            gain: f(&self.gain),
            bias: f(&self.bias),
        }
    }

    fn for_each<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T)) {
        f(format!("{prefix}.gain"), &self.gain);
        f(format!("{prefix}.bias"), &self.bias);
    }

    fn for_each_mut<'a>(&'a mut self, prefix: &str, f: &mut impl FnMut(String, &'a mut T)) {
        f(format!("{prefix}.gain"), &mut self.gain);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

impl<T> FeedForwardParams<T> {
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> FeedForwardParams<U> {
        FeedForwardParams {
            w1: f(&self.w1),
            b1: f(&self.b1),
            w2: f(&self.w2),
            b2: f(&self.b2),
        }
    }

    fn for_each<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T)) {
        f(format!("{prefix}.w1"), &self.w1);
        f(format!("{prefix}.b1"), &self.b1);
        f(format!("{prefix}.w2"), &self.w2);
        f(format!("{prefix}.b2"), &self.b2);
    }

    fn for_each_mut<'a>(&'a mut self, prefix: &str, f: &mut impl FnMut(String, &'a mut T)) {
        f(format!("{prefix}.w1"), &mut self.w1);
        f(format!("{prefix}.b1"), &mut self.b1);
        f(format!("{prefix}.w2"), &mut self.w2);
        f(format!("{prefix}.b2"), &mut self.b2);
    }
}

impl<T> TransformerParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> TransformerParams<U> {
        TransformerParams {
            src_embed: f(&self.src_embed),
            tgt_embed: f(&self.tgt_embed),
            pos_embed: f(&self.pos_embed),
            encoder: self
                .encoder
                .iter()
                .map(|l| EncoderLayerParams {
                    self_attn: l.self_attn.map(f),
                    ln1: l.ln1.map(f),
                    ffn: l.ffn.map(f),
                    ln2: l.ln2.map(f),
                })
                .collect(),
            decoder: self
                .decoder
                .iter()
                .map(|l| DecoderLayerParams {
                    self_attn: l.self_attn.map(f),
                    ln1: l.ln1.map(f),
                    cross_attn: l.cross_attn.map(f),
                    ln2: l.ln2.map(f),
                    ffn: l.ffn.map(f),
                    ln3: l.ln3.map(f),
                })
                .collect(),
            out_w: f(&self.out_w),
            out_b: f(&self.out_b),
            corr_w: self.corr_w.as_ref().map(|t| f(t)),
            corr_b: self.corr_b.as_ref().map(|t| f(t)),
        }
    }

    /// Visits every array with its canonical name, in a fixed order shared
    /// with `for_each_mut` (the order checkpoints and optimizers rely on).
    pub fn for_each<'a>(&'a self, f: &mut impl FnMut(String, &'a T)) {
        f("src_embed".into(), &self.src_embed);
        f("tgt_embed".into(), &self.tgt_embed);
        f("pos_embed".into(), &self.pos_embed);
        for (i, l) in self.encoder.iter().enumerate() {
            l.self_attn.for_each(&format!("enc.{i}.self_attn"), f);
            l.ln1.for_each(&format!("enc.{i}.ln1"), f);
            l.ffn.for_each(&format!("enc.{i}.ffn"), f);
            l.ln2.for_each(&format!("enc.{i}.ln2"), f);
        }
        for (i, l) in self.decoder.iter().enumerate() {
            l.self_attn.for_each(&format!("dec.{i}.self_attn"), f);
            l.ln1.for_each(&format!("dec.{i}.ln1"), f);
            l.cross_attn.for_each(&format!("dec.{i}.cross_attn"), f);
            l.ln2.for_each(&format!("dec.{i}.ln2"), f);
            l.ffn.for_each(&format!("dec.{i}.ffn"), f);
            l.ln3.for_each(&format!("dec.{i}.ln3"), f);
        }
        f("out.w".into(), &self.out_w);
        f("out.b".into(), &self.out_b);
        if let Some(w) = &self.corr_w {
            f("corr.w".into(), w);
        }
        if let Some(b) = &self.corr_b {
            f("corr.b".into(), b);
        }
    }

    pub fn for_each_mut<'a>(&'a mut self, f: &mut impl FnMut(String, &'a mut T)) {
        f("src_embed".into(), &mut self.src_embed);
        f("tgt_embed".into(), &mut self.tgt_embed);
        f("pos_embed".into(), &mut self.pos_embed);
        for (i, l) in self.encoder.iter_mut().enumerate() {
            l.self_attn.for_each_mut(&format!("enc.{i}.self_attn"), f);
            l.ln1.for_each_mut(&format!("enc.{i}.ln1"), f);
            l.ffn.for_each_mut(&format!("enc.{i}.ffn"), f);
            l.ln2.for_each_mut(&format!("enc.{i}.ln2"), f);
        }
        for (i, l) in self.decoder.iter_mut().enumerate() {
            l.self_attn.for_each_mut(&format!("dec.{i}.self_attn"), f);
            l.ln1.for_each_mut(&format!("dec.{i}.ln1"), f);
            l.cross_attn.for_each_mut(&format!("dec.{i}.cross_attn"), f);
            l.ln2.for_each_mut(&format!("dec.{i}.ln2"), f);
            l.ffn.for_each_mut(&format!("dec.{i}.ffn"), f);
            l.ln3.for_each_mut(&format!("dec.{i}.ln3"), f);
        }
        f("out.w".into(), &mut self.out_w);
        f("out.b".into(), &mut self.out_b);
        if let Some(w) = &mut self.corr_w {
            f("corr.w".into(), w);
        }
        if let Some(b) = &mut self.corr_b {
            f("corr.b".into(), b);
        }
    }

    pub fn flatten(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.for_each(&mut |name, t| out.push((name, t)));
        out
    }

    pub fn flatten_mut(&mut self) -> Vec<(String, &mut T)> {
        let mut out = Vec::new();
        self.for_each_mut(&mut |name, t| out.push((name, t)));
        out
    }

    pub fn array_count(&self) -> usize {
        let mut n = 0;
        self.for_each(&mut |_, _| n += 1);
        n
    }
}

impl<S: Scalar> TransformerParams<Tensor<S>> {
    /// Binds every array as one tape leaf; both streams will reference the
    /// same leaf per array.
    pub fn bind(&self, tape: &mut Tape<S>, trainable: bool) -> TransformerParams<NodeId> {
        self.map(&mut |t| tape.leaf(t.clone(), trainable))
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.for_each(&mut |_, t| ok &= t.all_finite());
        ok
    }

    /// Converts element type; used to run an f32 checkpoint at f64.
    pub fn cast<S2: Scalar>(&self) -> TransformerParams<Tensor<S2>> {
        self.map(&mut |t| {
            Tensor::from_vec(
                t.rows(),
                t.cols(),
                t.data().iter().map(|&v| S2::from_f64(v.as_f64())).collect(),
            )
        })
    }
}

fn xavier<S: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<S> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_vec(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| S::from_f64(rng.random_range(-limit..limit)))
            .collect(),
    )
}

/// Seeded parameter initialization: Xavier-uniform weights and embeddings,
/// zero biases, unit layer-norm gains. Values are drawn at f64 so f32 and
/// f64 instantiations of the same seed describe the same model.
pub fn init_params<S: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<TransformerParams<Tensor<S>>> {
    cfg.validate()?;
    let d = cfg.hidden_size;
    let rng = &mut ChaCha8Rng::seed_from_u64(seed);
    let attn = |rng: &mut ChaCha8Rng| AttentionParams {
        wq: xavier(rng, d, d),
        bq: Tensor::zeros(1, d),
        wk: xavier(rng, d, d),
        bk: Tensor::zeros(1, d),
        wv: xavier(rng, d, d),
        bv: Tensor::zeros(1, d),
        wo: xavier(rng, d, d),
        bo: Tensor::zeros(1, d),
    };
    let ln = || LayerNormParams {
        gain: Tensor::from_vec(1, d, vec![S::one(); d]),
        bias: Tensor::zeros(1, d),
    };
    let ffn = |rng: &mut ChaCha8Rng| FeedForwardParams {
        w1: xavier(rng, d, cfg.ffn_size),
        b1: Tensor::zeros(1, cfg.ffn_size),
        w2: xavier(rng, cfg.ffn_size, d),
        b2: Tensor::zeros(1, d),
    };
    let separate_head = cfg.decoder_mode == DecoderMode::TwoStream && !cfg.share_correction_head;
    Ok(TransformerParams {
        src_embed: xavier(rng, cfg.vocab_size_src, d),
        tgt_embed: xavier(rng, cfg.vocab_size_tgt, d),
        pos_embed: xavier(rng, cfg.max_positions + 1, d),
        encoder: (0..cfg.num_layers)
            .map(|_| EncoderLayerParams {
                self_attn: attn(rng),
                ln1: ln(),
                ffn: ffn(rng),
                ln2: ln(),
            })
            .collect(),
        decoder: (0..cfg.num_layers)
            .map(|_| DecoderLayerParams {
                self_attn: attn(rng),
                ln1: ln(),
                cross_attn: attn(rng),
                ln2: ln(),
                ffn: ffn(rng),
                ln3: ln(),
            })
            .collect(),
        out_w: xavier(rng, d, cfg.vocab_size_tgt),
        out_b: Tensor::zeros(1, cfg.vocab_size_tgt),
        corr_w: separate_head.then(|| xavier(rng, d, cfg.vocab_size_tgt)),
        corr_b: separate_head.then(|| Tensor::zeros(1, cfg.vocab_size_tgt)),
    })
}

/// The (rows, cols) of every array the config implies, in canonical order —
/// what a checkpoint of this config must contain, without allocating it.
pub fn param_shapes(cfg: &ModelConfig) -> TransformerParams<(usize, usize)> {
    let d = cfg.hidden_size;
    let attn = || AttentionParams {
        wq: (d, d),
        bq: (1, d),
        wk: (d, d),
        bk: (1, d),
        wv: (d, d),
        bv: (1, d),
        wo: (d, d),
        bo: (1, d),
    };
    let ln = || LayerNormParams {
        gain: (1, d),
        bias: (1, d),
    };
    let ffn = || FeedForwardParams {
        w1: (d, cfg.ffn_size),
        b1: (1, cfg.ffn_size),
        w2: (cfg.ffn_size, d),
        b2: (1, d),
    };
    let separate_head = cfg.decoder_mode == DecoderMode::TwoStream && !cfg.share_correction_head;
    TransformerParams {
        src_embed: (cfg.vocab_size_src, d),
        tgt_embed: (cfg.vocab_size_tgt, d),
        pos_embed: (cfg.max_positions + 1, d),
        encoder: (0..cfg.num_layers)
            .map(|_| EncoderLayerParams {
                self_attn: attn(),
                ln1: ln(),
                ffn: ffn(),
                ln2: ln(),
            })
            .collect(),
        decoder: (0..cfg.num_layers)
            .map(|_| DecoderLayerParams {
                self_attn: attn(),
                ln1: ln(),
                cross_attn: attn(),
                ln2: ln(),
                ffn: ffn(),
                ln3: ln(),
            })
            .collect(),
        out_w: (d, cfg.vocab_size_tgt),
        out_b: (1, cfg.vocab_size_tgt),
        corr_w: separate_head.then_some((d, cfg.vocab_size_tgt)),
        corr_b: separate_head.then_some((1, cfg.vocab_size_tgt)),
    }
}

/// Encoder output on the tape plus the key-permission mask derived from pad
/// positions; decoder cross-attention may only look at `key_allowed` columns.
pub struct EncodedSource {
    pub h: NodeId,
    pub key_allowed: Vec<bool>,
}

pub fn linear<S: Scalar>(tape: &mut Tape<S>, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
    let y = tape.matmul(x, w)?;
    tape.add_row_broadcast(y, b)
}

fn project_kv<S: Scalar>(
    tape: &mut Tape<S>,
    ap: &AttentionParams<NodeId>,
    x: NodeId,
) -> Result<(NodeId, NodeId)> {
    let k = linear(tape, x, ap.wk, ap.bk)?;
    let v = linear(tape, x, ap.wv, ap.bv)?;
    Ok((k, v))
}

/// Multi-head scaled dot-product attention. `k`/`v` are already projected so
/// one projection of the shared key/value source can serve several query
/// sources. `mask` is row-major n_q×n_k with true marking permitted keys.
pub fn attention<S: Scalar>(
    tape: &mut Tape<S>,
    ap: &AttentionParams<NodeId>,
    query_input: NodeId,
    k: NodeId,
    v: NodeId,
    mask: &[bool],
    num_heads: usize,
) -> Result<NodeId> {
    let d = tape.value(k).cols();
    let dh = d / num_heads;
    let n_q = tape.value(query_input).rows();
    let n_k = tape.value(k).rows();
    if mask.len() != n_q * n_k {
        return Err(Error::LengthMismatch {
            what: "attention mask",
            left: mask.len(),
            right: n_q * n_k,
        });
    }
    let q = linear(tape, query_input, ap.wq, ap.bq)?;
    let scale = S::from_f64(1.0 / (dh as f64).sqrt());
    let mut heads = Vec::with_capacity(num_heads);
    for h in 0..num_heads {
        let qh = tape.slice_cols(q, h * dh, dh);
        let kh = tape.slice_cols(k, h * dh, dh);
        let vh = tape.slice_cols(v, h * dh, dh);
        let kt = tape.transpose(kh);
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let weights = tape.masked_softmax_rows(scores, mask)?;
        heads.push(tape.matmul(weights, vh)?);
    }
    let merged = tape.concat_cols(&heads)?;
    linear(tape, merged, ap.wo, ap.bo)
}

fn residual_layer_norm<S: Scalar>(
    tape: &mut Tape<S>,
    x: NodeId,
    sublayer_out: NodeId,
    ln: &LayerNormParams<NodeId>,
    dropout: f64,
) -> Result<NodeId> {
    let dropped = tape.dropout(sublayer_out, dropout);
    let summed = tape.add(x, dropped)?;
    tape.layer_norm(summed, ln.gain, ln.bias, S::from_f64(LAYER_NORM_EPS))
}

fn feed_forward<S: Scalar>(
    tape: &mut Tape<S>,
    fp: &FeedForwardParams<NodeId>,
    x: NodeId,
) -> Result<NodeId> {
    let hidden = linear(tape, x, fp.w1, fp.b1)?;
    let hidden = tape.relu(hidden);
    linear(tape, hidden, fp.w2, fp.b2)
}

fn ids_to_usize(ids: &[u32]) -> Rc<Vec<usize>> {
    Rc::new(ids.iter().map(|&t| t as usize).collect())
}

fn position_range(start: usize, n: usize) -> Rc<Vec<usize>> {
    Rc::new((start..start + n).collect())
}

/// Row-major n_q×n_k mask repeating one key-permission row.
fn broadcast_key_mask(n_q: usize, key_allowed: &[bool]) -> Vec<bool> {
    let mut mask = Vec::with_capacity(n_q * key_allowed.len());
    for _ in 0..n_q {
        mask.extend_from_slice(key_allowed);
    }
    mask
}

/// Lower-triangular (inclusive) n×n mask: row i may read columns 0..=i.
pub fn causal_mask(n: usize) -> Vec<bool> {
    let mut mask = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            mask.push(j <= i);
        }
    }
    mask
}

/// Standard Transformer encoder. Pad positions are excluded from every
/// key set (self-attention here and cross-attention later), so the states of
/// real tokens do not depend on how much padding follows them.
pub fn encode<S: Scalar>(
    tape: &mut Tape<S>,
    p: &TransformerParams<NodeId>,
    cfg: &ModelConfig,
    source: &[u32],
    train: bool,
) -> Result<EncodedSource> {
    let n = source.len();
    if n == 0 {
        return Err(Error::EmptyCorpus("empty source sentence".into()));
    }
    if n > cfg.max_positions {
        return Err(Error::SequenceTooLong {
            len: n,
            max: cfg.max_positions,
        });
    }
    let key_allowed: Vec<bool> = source.iter().map(|&t| t != crate::data::PAD).collect();
    if !key_allowed.iter().any(|&a| a) {
        return Err(Error::FullyMaskedRow { row: 0 });
    }
    let dropout = if train { cfg.dropout } else { 0.0 };
    let sqrt_d = S::from_f64((cfg.hidden_size as f64).sqrt());

    let tok = tape.embedding_gather(p.src_embed, ids_to_usize(source))?;
    let tok = tape.scale(tok, sqrt_d);
    let pos = tape.embedding_gather(p.pos_embed, position_range(0, n))?;
    let mut x = tape.add(tok, pos)?;
    x = tape.dropout(x, dropout);

    let mask = broadcast_key_mask(n, &key_allowed);
    for layer in &p.encoder {
        let (k, v) = project_kv(tape, &layer.self_attn, x)?;
        let a = attention(tape, &layer.self_attn, x, k, v, &mask, cfg.num_heads)?;
        x = residual_layer_norm(tape, x, a, &layer.ln1, dropout)?;
        let f = feed_forward(tape, &layer.ffn, x)?;
        x = residual_layer_norm(tape, x, f, &layer.ln2, dropout)?;
    }
    Ok(EncodedSource { h: x, key_allowed })
}

/// Runs the decoder layer stack over one or more streams that share the
/// layer parameters. `streams[0]` is the key/value source for self-attention
/// (the content stream); every stream applies the same inclusive causal
/// mask, cross-attention over the encoder states, and feed-forward.
fn decoder_layers<S: Scalar>(
    tape: &mut Tape<S>,
    p: &TransformerParams<NodeId>,
    cfg: &ModelConfig,
    streams: &mut [NodeId],
    enc: &EncodedSource,
    n: usize,
    dropout: f64,
) -> Result<()> {
    let self_mask = causal_mask(n);
    let cross_mask = broadcast_key_mask(n, &enc.key_allowed);
    for layer in &p.decoder {
        // Content keys/values are projected once and serve every stream.
        let (k, v) = project_kv(tape, &layer.self_attn, streams[0])?;
        for s in streams.iter_mut() {
            let a = attention(tape, &layer.self_attn, *s, k, v, &self_mask, cfg.num_heads)?;
            *s = residual_layer_norm(tape, *s, a, &layer.ln1, dropout)?;
        }
        let (ek, ev) = project_kv(tape, &layer.cross_attn, enc.h)?;
        for s in streams.iter_mut() {
            let a = attention(tape, &layer.cross_attn, *s, ek, ev, &cross_mask, cfg.num_heads)?;
            *s = residual_layer_norm(tape, *s, a, &layer.ln2, dropout)?;
        }
        for s in streams.iter_mut() {
            let f = feed_forward(tape, &layer.ffn, *s)?;
            *s = residual_layer_norm(tape, *s, f, &layer.ln3, dropout)?;
        }
    }
    Ok(())
}

fn check_decoder_input(cfg: &ModelConfig, input: &[u32]) -> Result<()> {
    if input.first() != Some(&BOS) {
        return Err(Error::MissingBos);
    }
    if input.len() > cfg.max_positions {
        return Err(Error::SequenceTooLong {
            len: input.len(),
            max: cfg.max_positions,
        });
    }
    Ok(())
}

/// Two-stream decoder forward over the full input `tilde_y` (which must
/// start with bos). Returns (query_logits, content_logits), both n×V:
/// query row r predicts the successor of input position r from content rows
/// 0..=r; content row r re-predicts the token that belongs at position r
/// from content rows 0..=r.
pub fn decoder_forward_two_stream<S: Scalar>(
    tape: &mut Tape<S>,
    p: &TransformerParams<NodeId>,
    cfg: &ModelConfig,
    tilde_y: &[u32],
    enc: &EncodedSource,
    train: bool,
) -> Result<(NodeId, NodeId)> {
    check_decoder_input(cfg, tilde_y)?;
    let n = tilde_y.len();
    let dropout = if train { cfg.dropout } else { 0.0 };
    let sqrt_d = S::from_f64((cfg.hidden_size as f64).sqrt());

    let tok = tape.embedding_gather(p.tgt_embed, ids_to_usize(tilde_y))?;
    let tok = tape.scale(tok, sqrt_d);
    let cpos = tape.embedding_gather(p.pos_embed, position_range(0, n))?;
    let mut content = tape.add(tok, cpos)?;
    content = tape.dropout(content, dropout);

    // Query row r carries the position-(r+1) embedding and nothing else.
    let mut query = tape.embedding_gather(p.pos_embed, position_range(1, n))?;
    query = tape.dropout(query, dropout);

    let mut streams = [content, query];
    decoder_layers(tape, p, cfg, &mut streams, enc, n, dropout)?;
    let [content, query] = streams;

    let query_logits = linear(tape, query, p.out_w, p.out_b)?;
    let (cw, cb) = match (&p.corr_w, &p.corr_b) {
        (Some(w), Some(b)) => (*w, *b),
        _ => (p.out_w, p.out_b),
    };
    let content_logits = linear(tape, content, cw, cb)?;
    Ok((query_logits, content_logits))
}

/// Conventional causal Transformer decoder: one stream, token + position
/// inputs, row r predicts the successor of input position r.
pub fn decoder_forward_standard<S: Scalar>(
    tape: &mut Tape<S>,
    p: &TransformerParams<NodeId>,
    cfg: &ModelConfig,
    y_in: &[u32],
    enc: &EncodedSource,
    train: bool,
) -> Result<NodeId> {
    check_decoder_input(cfg, y_in)?;
    let n = y_in.len();
    let dropout = if train { cfg.dropout } else { 0.0 };
    let sqrt_d = S::from_f64((cfg.hidden_size as f64).sqrt());

    let tok = tape.embedding_gather(p.tgt_embed, ids_to_usize(y_in))?;
    let tok = tape.scale(tok, sqrt_d);
    let pos = tape.embedding_gather(p.pos_embed, position_range(0, n))?;
    let mut x = tape.add(tok, pos)?;
    x = tape.dropout(x, dropout);

    let mut streams = [x];
    decoder_layers(tape, p, cfg, &mut streams, enc, n, dropout)?;
    linear(tape, streams[0], p.out_w, p.out_b)
}
