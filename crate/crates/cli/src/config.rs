//! Flat `key = value` configuration files with `model.`, `train.`,
//! `schedule.` and `decode.` prefixes. Unknown keys are hard errors, flags
//! override file values, and the fully resolved configuration (every
//! default materialized) is echoed into the run manifest, where its lines
//! double as a valid config file.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use tsnmt_core::infer::{DecodeConfig, DecodeMode};
use tsnmt_core::model::{DecoderMode, ModelConfig};
use tsnmt_core::optim::LrSchedule;
use tsnmt_core::train::TrainRunConfig;

use crate::CliError;

/// Every key a config file may set, with its default. Paths and the
/// optional keys default to "none".
const KNOWN_KEYS: &[(&str, &str)] = &[
    ("model.num_layers", "2"),
    ("model.num_heads", "2"),
    ("model.hidden_size", "32"),
    ("model.ffn_size", "64"),
    ("model.max_positions", "64"),
    ("model.dropout", "0.1"),
    ("model.decoder_mode", "two_stream"),
    ("model.share_correction_head", "true"),
    ("train.source", "none"),
    ("train.target", "none"),
    ("train.valid_source", "none"),
    ("train.valid_target", "none"),
    ("train.steps", "20000"),
    ("train.lr_max_steps", "none"),
    ("train.tokens_per_batch", "2048"),
    ("train.seed", "0"),
    ("train.enable_ecm", "true"),
    ("train.enable_ss", "true"),
    ("train.lambda", "1"),
    ("train.label_smoothing", "0"),
    ("train.peak_lr", "0.0005"),
    ("train.warmup_steps", "4000"),
    ("train.checkpoint_interval", "1000"),
    ("train.validate_interval", "500"),
    ("train.stop_at_token_accuracy", "none"),
    ("train.vocab_max_size", "50000"),
    ("train.vocab_min_count", "1"),
    ("schedule.alpha", "30000"),
    ("schedule.beta", "0.85"),
    ("schedule.mu", "5000"),
    ("decode.mode", "beam"),
    ("decode.beam_size", "5"),
    ("decode.length_penalty", "1"),
    ("decode.max_output_length", "64"),
];

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Key → value map with every known key present (file values over
/// defaults, flag overrides over both).
#[derive(Clone)]
pub struct ConfigMap {
    values: BTreeMap<String, String>,
}

impl ConfigMap {
    pub fn defaults() -> Self {
        ConfigMap {
            values: KNOWN_KEYS
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }

    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut map = Self::defaults();
        let mut seen = Vec::new();
        for (number, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                usage(format!(
                    "{} line {}: expected `key = value`, got {raw:?}",
                    path.display(),
                    number + 1
                ))
            })?;
            let key = key.trim();
            let value = value.trim();
            if !map.values.contains_key(key) {
                return Err(usage(format!(
                    "{} line {}: unknown key {key:?}",
                    path.display(),
                    number + 1
                )));
            }
            if seen.contains(&key.to_string()) {
                return Err(usage(format!(
                    "{} line {}: duplicate key {key:?}",
                    path.display(),
                    number + 1
                )));
            }
            seen.push(key.to_string());
            map.values.insert(key.to_string(), value.to_string());
        }
        Ok(map)
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        assert!(self.values.contains_key(key), "unknown config key {key}");
        self.values.insert(key.to_string(), value.to_string());
    }

    fn raw(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("unknown config key {key}"))
    }

    fn parse<T: FromStr>(&self, key: &str) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        self.raw(key)
            .parse()
            .map_err(|e| usage(format!("config {key} = {:?}: {e}", self.raw(key))))
    }

    fn parse_optional<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: Display,
    {
        match self.raw(key) {
            "none" => Ok(None),
            _ => Ok(Some(self.parse(key)?)),
        }
    }

    fn path_optional(&self, key: &str) -> Option<PathBuf> {
        match self.raw(key) {
            "none" => None,
            p => Some(PathBuf::from(p)),
        }
    }

    /// The resolved configuration as config-file lines, sorted by key.
    pub fn lines(&self) -> Vec<String> {
        self.values
            .iter()
            .map(|(k, v)| format!("{k} = {v}"))
            .collect()
    }
}

/// FNV-1a over the resolved configuration text; two runs get the same hash
/// exactly when every resolved key matches.
pub fn config_hash(lines: &[String]) -> String {
    let mut hash: u64 = 0xcbf29ce484222325;
    for line in lines {
        for byte in line.bytes().chain(std::iter::once(b'\n')) {
            hash ^= byte as u64;
            hash = hash.wrapping_mul(0x100000001b3);
        }
    }
    format!("{hash:016x}")
}

pub struct DataPaths {
    pub source: Option<PathBuf>,
    pub target: Option<PathBuf>,
    pub valid_source: Option<PathBuf>,
    pub valid_target: Option<PathBuf>,
    pub vocab_max_size: usize,
    pub vocab_min_count: usize,
}

impl DataPaths {
    /// The training corpus, required for the train and sweep commands.
    pub fn corpus(&self) -> Result<(&Path, &Path), CliError> {
        match (&self.source, &self.target) {
            (Some(s), Some(t)) => Ok((s, t)),
            _ => Err(usage("config must set train.source and train.target")),
        }
    }

    pub fn validation(&self) -> Result<Option<(&Path, &Path)>, CliError> {
        match (&self.valid_source, &self.valid_target) {
            (Some(s), Some(t)) => Ok(Some((s, t))),
            (None, None) => Ok(None),
            _ => Err(usage(
                "train.valid_source and train.valid_target must be set together",
            )),
        }
    }
}

/// A config map materialized into the typed structures the core crate
/// consumes. Vocabulary sizes stay zero until the corpus is loaded.
/// The `decode.*` keys are validated here but consumed nowhere: decoding
/// parameters are the translate command's flags.
pub struct Resolved {
    pub model: ModelConfig,
    pub run: TrainRunConfig,
    pub data: DataPaths,
    pub lines: Vec<String>,
}

pub fn resolve(map: &ConfigMap, out_dir: &Path) -> Result<Resolved, CliError> {
    let decoder_mode: DecoderMode = map.parse("model.decoder_mode")?;
    let model = ModelConfig {
        num_layers: map.parse("model.num_layers")?,
        num_heads: map.parse("model.num_heads")?,
        hidden_size: map.parse("model.hidden_size")?,
        ffn_size: map.parse("model.ffn_size")?,
        vocab_size_src: 0,
        vocab_size_tgt: 0,
        max_positions: map.parse("model.max_positions")?,
        dropout: map.parse("model.dropout")?,
        decoder_mode,
        share_correction_head: map.parse("model.share_correction_head")?,
    };

    let steps: u64 = map.parse("train.steps")?;
    let mut run = TrainRunConfig::new(out_dir);
    run.max_steps = steps;
    run.tokens_per_batch = map.parse("train.tokens_per_batch")?;
    run.seed = map.parse("train.seed")?;
    run.enable_ecm = map.parse("train.enable_ecm")?;
    run.enable_ss = map.parse("train.enable_ss")?;
    run.enable_tssa = decoder_mode == DecoderMode::TwoStream;
    run.schedule.alpha = map.parse("schedule.alpha")?;
    run.schedule.beta = map.parse("schedule.beta")?;
    run.schedule.mu = map.parse("schedule.mu")?;
    run.weights.lambda = map.parse("train.lambda")?;
    run.weights.label_smoothing = map.parse("train.label_smoothing")?;
    run.lr = LrSchedule {
        peak: map.parse("train.peak_lr")?,
        warmup_steps: map.parse("train.warmup_steps")?,
        max_steps: map.parse_optional("train.lr_max_steps")?.unwrap_or(steps),
    };
    run.checkpoint_interval = map.parse("train.checkpoint_interval")?;
    run.validate_interval = map.parse("train.validate_interval")?;
    run.stop_at_token_accuracy = map.parse_optional("train.stop_at_token_accuracy")?;

    let data = DataPaths {
        source: map.path_optional("train.source"),
        target: map.path_optional("train.target"),
        valid_source: map.path_optional("train.valid_source"),
        valid_target: map.path_optional("train.valid_target"),
        vocab_max_size: map.parse("train.vocab_max_size")?,
        vocab_min_count: map.parse("train.vocab_min_count")?,
    };

    let decode = DecodeConfig {
        mode: map.parse::<DecodeMode>("decode.mode")?,
        beam_size: map.parse("decode.beam_size")?,
        length_penalty: map.parse("decode.length_penalty")?,
        max_output_length: map.parse("decode.max_output_length")?,
    };
    decode.validate().map_err(CliError::from)?;

    Ok(Resolved {
        model,
        run,
        data,
        lines: map.lines(),
    })
}
