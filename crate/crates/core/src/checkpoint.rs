//! Checkpoint files: a plain-text manifest describing the run and every
//! array (name, shape, dtype, byte offset), an `end-header` line, then the
//! raw little-endian array data in manifest order.
//!
//! Optimizer moments are stored under `m/` and `v/` name prefixes next to
//! the `param/` arrays, so a loaded checkpoint resumes training
//! bit-identically.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{param_shapes, DecoderMode, ModelConfig, TransformerParams};
use crate::optim::{AdamConfig, LrSchedule, OptimizerState};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "tsnmt-checkpoint v1";

#[derive(Debug, Clone)]
pub struct Checkpoint<S> {
    pub model: ModelConfig,
    pub params: TransformerParams<Tensor<S>>,
    pub opt: Option<OptimizerState<S>>,
    /// Completed training updates at save time.
    pub step: u64,
    /// Free-form key/value pairs owned by the caller (training seed,
    /// schedule settings, …). Keys must be `:`-free single tokens.
    pub extra: Vec<(String, String)>,
}

impl<S: Scalar> Checkpoint<S> {
    /// Refuses a checkpoint whose arrays do not fit `cfg`, naming the first
    /// mismatching array.
    pub fn validate_against(&self, cfg: &ModelConfig) -> Result<()> {
        let have = param_shapes(&self.model);
        let want = param_shapes(cfg);
        let have = have.flatten();
        let want = want.flatten();
        if have.len() != want.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} arrays, config expects {}",
                have.len(),
                want.len()
            )));
        }
        for ((name, &hs), (_, &ws)) in have.iter().zip(&want) {
            if hs != ws {
                return Err(Error::Checkpoint(format!(
                    "array {name}: checkpoint shape {}x{}, config expects {}x{}",
                    hs.0, hs.1, ws.0, ws.1
                )));
            }
        }
        Ok(())
    }
}

fn push_kv(header: &mut String, key: &str, value: impl std::fmt::Display) {
    header.push_str(key);
    header.push_str(": ");
    header.push_str(&value.to_string());
    header.push('\n');
}

fn push_arrays<S: Scalar>(
    header: &mut String,
    blob: &mut Vec<u8>,
    prefix: &str,
    arrays: &TransformerParams<Tensor<S>>,
) {
    for (name, t) in arrays.flatten() {
        push_kv(
            header,
            "array",
            format_args!(
                "{prefix}/{name} {} {} {} {}",
                t.rows(),
                t.cols(),
                S::DTYPE,
                blob.len()
            ),
        );
        for &v in t.data() {
            v.write_le(blob);
        }
    }
}

pub fn save_checkpoint<S: Scalar>(ck: &Checkpoint<S>, path: &Path) -> Result<()> {
    for (k, v) in &ck.extra {
        if k.contains([':', ' ', '\n']) || v.contains('\n') {
            return Err(Error::Checkpoint(format!(
                "extra key/value not storable as a manifest line: {k:?}"
            )));
        }
    }
    let m = &ck.model;
    let mut header = String::new();
    push_kv(&mut header, "format", CHECKPOINT_FORMAT);
    push_kv(&mut header, "dtype", S::DTYPE);
    push_kv(&mut header, "step", ck.step);
    push_kv(&mut header, "model.num_layers", m.num_layers);
    push_kv(&mut header, "model.num_heads", m.num_heads);
    push_kv(&mut header, "model.hidden_size", m.hidden_size);
    push_kv(&mut header, "model.ffn_size", m.ffn_size);
    push_kv(&mut header, "model.vocab_size_src", m.vocab_size_src);
    push_kv(&mut header, "model.vocab_size_tgt", m.vocab_size_tgt);
    push_kv(&mut header, "model.max_positions", m.max_positions);
    push_kv(&mut header, "model.dropout", m.dropout);
    push_kv(&mut header, "model.decoder_mode", m.decoder_mode.as_str());
    push_kv(
        &mut header,
        "model.share_correction_head",
        m.share_correction_head,
    );
    push_kv(&mut header, "opt.present", ck.opt.is_some());
    if let Some(opt) = &ck.opt {
        push_kv(&mut header, "opt.step", opt.step);
        push_kv(&mut header, "opt.adam.beta1", opt.adam.beta1);
        push_kv(&mut header, "opt.adam.beta2", opt.adam.beta2);
        push_kv(&mut header, "opt.adam.eps", opt.adam.eps);
        push_kv(&mut header, "opt.adam.clip_norm", opt.adam.clip_norm);
        push_kv(&mut header, "opt.lr.peak", opt.lr.peak);
        push_kv(&mut header, "opt.lr.warmup_steps", opt.lr.warmup_steps);
        push_kv(&mut header, "opt.lr.max_steps", opt.lr.max_steps);
    }
    for (k, v) in &ck.extra {
        push_kv(&mut header, &format!("extra.{k}"), v);
    }

    let mut blob = Vec::new();
    push_arrays(&mut header, &mut blob, "param", &ck.params);
    if let Some(opt) = &ck.opt {
        push_arrays(&mut header, &mut blob, "m", &opt.m);
        push_arrays(&mut header, &mut blob, "v", &opt.v);
    }
    header.push_str("end-header\n");

    let mut bytes = header.into_bytes();
    bytes.extend_from_slice(&blob);
    // Write via a sibling temp file so a crash never leaves a half-written
    // checkpoint under the real name.
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

struct ArrayEntry {
    rows: usize,
    cols: usize,
    offset: usize,
}

struct Manifest {
    kv: HashMap<String, String>,
    arrays: Vec<(String, ArrayEntry)>,
    blob_start: usize,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn parse_manifest(bytes: &[u8], dtype: &str) -> Result<Manifest> {
    let mut kv = HashMap::new();
    let mut arrays = Vec::new();
    let mut pos = 0;
    loop {
        let rest = &bytes[pos..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("truncated header: no end-header line"))?;
        let line = std::str::from_utf8(&rest[..nl])
            .map_err(|_| bad("header is not valid utf-8"))?;
        pos += nl + 1;
        if line == "end-header" {
            return Ok(Manifest {
                kv,
                arrays,
                blob_start: pos,
            });
        }
        let (key, value) = line
            .split_once(": ")
            .ok_or_else(|| bad(format!("malformed header line {line:?}")))?;
        if key == "array" {
            let mut it = value.split(' ');
            let mut next = || it.next().ok_or_else(|| bad(format!("malformed array line {line:?}")));
            let name = next()?.to_string();
            let rows = next()?.parse::<usize>().map_err(|e| bad(format!("array {name}: {e}")))?;
            let cols = next()?.parse::<usize>().map_err(|e| bad(format!("array {name}: {e}")))?;
            let dt = next()?;
            if dt != dtype {
                return Err(bad(format!(
                    "array {name} has dtype {dt}, this build reads {dtype}"
                )));
            }
            let offset = next()?.parse::<usize>().map_err(|e| bad(format!("array {name}: {e}")))?;
            arrays.push((name, ArrayEntry { rows, cols, offset }));
        } else {
            kv.insert(key.to_string(), value.to_string());
        }
    }
}

fn required<'a>(kv: &'a HashMap<String, String>, key: &str) -> Result<&'a str> {
    kv.get(key)
        .map(|s| s.as_str())
        .ok_or_else(|| bad(format!("missing header field {key}")))
}

fn parse_field<T: std::str::FromStr>(kv: &HashMap<String, String>, key: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    required(kv, key)?
        .parse::<T>()
        .map_err(|e| bad(format!("field {key}: {e}")))
}

fn read_tensor<S: Scalar>(blob: &[u8], entry: &ArrayEntry, name: &str) -> Result<Tensor<S>> {
    let count = entry.rows * entry.cols;
    let bytes = count * S::BYTES;
    let end = entry
        .offset
        .checked_add(bytes)
        .filter(|&e| e <= blob.len())
        .ok_or_else(|| bad(format!("truncated file: array {name} runs past end of data")))?;
    let mut data = Vec::with_capacity(count);
    for chunk in blob[entry.offset..end].chunks_exact(S::BYTES) {
        data.push(S::read_le(chunk));
    }
    Ok(Tensor::from_vec(entry.rows, entry.cols, data))
}

/// Rebuilds one parameter structure from manifest entries with the given
/// name prefix, enforcing that exactly the expected arrays are present with
/// the expected shapes.
fn assemble<S: Scalar>(
    cfg: &ModelConfig,
    entries: &HashMap<&str, &ArrayEntry>,
    prefix: &str,
    blob: &[u8],
) -> Result<TransformerParams<Tensor<S>>> {
    let shapes = param_shapes(cfg);
    let mut out = shapes.map(&mut |&(r, c)| Tensor::<S>::zeros(r, c));
    for (name, t) in out.flatten_mut() {
        let full = format!("{prefix}/{name}");
        let entry = entries
            .get(full.as_str())
            .ok_or_else(|| bad(format!("missing array {full}")))?;
        if (entry.rows, entry.cols) != t.shape() {
            return Err(bad(format!(
                "array {full}: file shape {}x{}, config expects {}x{}",
                entry.rows,
                entry.cols,
                t.rows(),
                t.cols()
            )));
        }
        *t = read_tensor(blob, entry, &full)?;
    }
    Ok(out)
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<Checkpoint<S>> {
    let bytes = fs::read(path)?;
    let manifest = parse_manifest(&bytes, S::DTYPE)?;
    let kv = &manifest.kv;
    let format = required(kv, "format")?;
    if format != CHECKPOINT_FORMAT {
        return Err(bad(format!(
            "unsupported format {format:?}; this build reads {CHECKPOINT_FORMAT:?}"
        )));
    }
    let dtype = required(kv, "dtype")?;
    if dtype != S::DTYPE {
        return Err(bad(format!(
            "checkpoint dtype {dtype}, this build reads {}",
            S::DTYPE
        )));
    }
    let model = ModelConfig {
        num_layers: parse_field(kv, "model.num_layers")?,
        num_heads: parse_field(kv, "model.num_heads")?,
        hidden_size: parse_field(kv, "model.hidden_size")?,
        ffn_size: parse_field(kv, "model.ffn_size")?,
        vocab_size_src: parse_field(kv, "model.vocab_size_src")?,
        vocab_size_tgt: parse_field(kv, "model.vocab_size_tgt")?,
        max_positions: parse_field(kv, "model.max_positions")?,
        dropout: parse_field(kv, "model.dropout")?,
        decoder_mode: required(kv, "model.decoder_mode")?.parse::<DecoderMode>()?,
        share_correction_head: parse_field(kv, "model.share_correction_head")?,
    };
    model.validate()?;
    let step: u64 = parse_field(kv, "step")?;

    let blob = &bytes[manifest.blob_start..];
    let entries: HashMap<&str, &ArrayEntry> = manifest
        .arrays
        .iter()
        .map(|(n, e)| (n.as_str(), e))
        .collect();
    if entries.len() != manifest.arrays.len() {
        return Err(bad("duplicate array names in manifest"));
    }
    let declared: usize = manifest
        .arrays
        .iter()
        .map(|(_, e)| e.rows * e.cols * S::BYTES)
        .sum();
    if declared != blob.len() {
        return Err(bad(format!(
            "truncated file: manifest declares {declared} data bytes, file has {}",
            blob.len()
        )));
    }

    let params = assemble::<S>(&model, &entries, "param", blob)?;
    let opt = if parse_field::<bool>(kv, "opt.present")? {
        let lr = LrSchedule::new(
            parse_field(kv, "opt.lr.peak")?,
            parse_field(kv, "opt.lr.warmup_steps")?,
            parse_field(kv, "opt.lr.max_steps")?,
        )?;
        let adam = AdamConfig {
            beta1: parse_field(kv, "opt.adam.beta1")?,
            beta2: parse_field(kv, "opt.adam.beta2")?,
            eps: parse_field(kv, "opt.adam.eps")?,
            clip_norm: parse_field(kv, "opt.adam.clip_norm")?,
        };
        Some(OptimizerState {
            step: parse_field(kv, "opt.step")?,
            m: assemble::<S>(&model, &entries, "m", blob)?,
            v: assemble::<S>(&model, &entries, "v", blob)?,
            adam,
            lr,
        })
    } else {
        None
    };
    let expected_arrays = param_shapes(&model).array_count() * if opt.is_some() { 3 } else { 1 };
    if manifest.arrays.len() != expected_arrays {
        return Err(bad(format!(
            "manifest lists {} arrays, config implies {expected_arrays}",
            manifest.arrays.len()
        )));
    }

    let mut extra: Vec<(String, String)> = kv
        .iter()
        .filter_map(|(k, v)| {
            k.strip_prefix("extra.")
                .map(|name| (name.to_string(), v.clone()))
        })
        .collect();
    extra.sort();
    Ok(Checkpoint {
        model,
        params,
        opt,
        step,
        extra,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use crate::optim::StepInfo;

    fn toy_checkpoint() -> Checkpoint<f32> {
        let cfg = ModelConfig::toy(9, 9);
        let mut params = init_params::<f32>(&cfg, 17).unwrap();
        let mut opt = OptimizerState::new(
            &params,
            AdamConfig::default(),
            LrSchedule::new(5e-4, 10, 100).unwrap(),
        )
        .unwrap();
        // Two updates so the moments are nonzero and the step counter moves.
        for i in 0..2u64 {
            let grads = params.map(&mut |t| {
                Tensor::from_vec(
                    t.rows(),
                    t.cols(),
                    (0..t.len()).map(|j| ((i + 1) as f32) * 1e-3 * (j as f32 % 7.0 - 3.0)).collect(),
                )
            });
            let _: StepInfo = opt.apply(&mut params, grads).unwrap();
        }
        Checkpoint {
            model: cfg,
            params,
            opt: Some(opt),
            step: 2,
            extra: vec![
                ("train_seed".into(), "42".into()),
                ("lambda".into(), "0.9".into()),
            ],
        }
    }

    fn bits<S: Scalar>(p: &TransformerParams<Tensor<S>>) -> Vec<u8> {
        let mut out = Vec::new();
        p.for_each(&mut |_, t| {
            for &v in t.data() {
                v.write_le(&mut out);
            }
        });
        out
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let ck = toy_checkpoint();
        save_checkpoint(&ck, &path).unwrap();
        let back = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(back.model, ck.model);
        assert_eq!(back.step, 2);
        assert_eq!(back.extra, {
            let mut e = ck.extra.clone();
            e.sort();
            e
        });
        assert_eq!(bits(&back.params), bits(&ck.params));
        let (bo, co) = (back.opt.unwrap(), ck.opt.unwrap());
        assert_eq!(bo.step, co.step);
        assert_eq!(bo.adam, co.adam);
        assert_eq!(bo.lr, co.lr);
        assert_eq!(bits(&bo.m), bits(&co.m));
        assert_eq!(bits(&bo.v), bits(&co.v));
    }

    #[test]
    fn truncated_file_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        save_checkpoint(&toy_checkpoint(), &path).unwrap();
        let full = std::fs::read(&path).unwrap();

        // Cut mid-blob.
        std::fs::write(&path, &full[..full.len() - 100]).unwrap();
        let err = load_checkpoint::<f32>(&path).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");

        // Cut mid-header.
        std::fs::write(&path, &full[..200]).unwrap();
        let err = load_checkpoint::<f32>(&path).unwrap_err();
        assert!(err.to_string().contains("header"), "{err}");
    }

    #[test]
    fn wrong_dtype_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        save_checkpoint(&toy_checkpoint(), &path).unwrap();
        let err = load_checkpoint::<f64>(&path).unwrap_err();
        assert!(err.to_string().contains("f32"), "{err}");
    }

    #[test]
    fn unknown_format_line_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        save_checkpoint(&toy_checkpoint(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let needle = b"tsnmt-checkpoint v1";
        let pos = bytes
            .windows(needle.len())
            .position(|w| w == needle)
            .unwrap();
        bytes[pos + needle.len() - 1] = b'9';
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint::<f32>(&path).unwrap_err();
        assert!(err.to_string().contains("unsupported format"), "{err}");
    }

    #[test]
    fn size_mismatch_names_the_array() {
        let ck = toy_checkpoint();
        let mut narrow = ck.model.clone();
        narrow.hidden_size = 16;
        narrow.ffn_size = 32;
        let err = ck.validate_against(&narrow).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("src_embed"), "{msg}");
        assert!(msg.contains("32") && msg.contains("16"), "{msg}");
        ck.validate_against(&ck.model).unwrap();
    }

    #[test]
    fn missing_array_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        save_checkpoint(&toy_checkpoint(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let marker = b"end-header\n";
        let blob_start = bytes
            .windows(marker.len())
            .position(|w| w == marker)
            .unwrap()
            + marker.len();
        // Rename one array line so the loader can't find param/out.b.
        let header = String::from_utf8(bytes[..blob_start].to_vec())
            .unwrap()
            .replace("param/out.b ", "param/out.x ");
        let mut patched = header.into_bytes();
        patched.extend_from_slice(&bytes[blob_start..]);
        std::fs::write(&path, &patched).unwrap();
        let err = load_checkpoint::<f32>(&path).unwrap_err();
        assert!(err.to_string().contains("param/out.b"), "{err}");
    }

    #[test]
    fn inference_only_checkpoint_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let mut ck = toy_checkpoint();
        ck.opt = None;
        save_checkpoint(&ck, &path).unwrap();
        let back = load_checkpoint::<f32>(&path).unwrap();
        assert!(back.opt.is_none());
        assert_eq!(bits(&back.params), bits(&ck.params));
    }
}
