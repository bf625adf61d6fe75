//! Subcommand implementations. Every subcommand writes a `manifest.txt`
//! (format header, seed, config hash, and the fully resolved configuration)
//! into its output directory before doing any real work, so a finished or
//! crashed run can always be reproduced from its artifacts.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tsnmt_core::checkpoint::{load_checkpoint, Checkpoint};
use tsnmt_core::data::{
    build_vocab, generate_synthetic_task, load_parallel_corpus, TaskKind, Vocabulary,
};
use tsnmt_core::derive_seed;
use tsnmt_core::eval::{corpus_bleu, corrupt_tokens, recovery_rate};
use tsnmt_core::gradcheck::check_model_gradients;
use tsnmt_core::infer::{correction_diagnostic, decode, DecodeConfig, DecodeMode};
use tsnmt_core::train::{run_training, TrainOutcome};
use tsnmt_core::TrainScalar;

use crate::config::{self, config_hash, ConfigMap, Resolved};
use crate::{
    CliError, Command, DiagnoseArgs, EvalArgs, GradcheckArgs, SweepArgs, SynthArgs, TrainArgs,
    TranslateArgs,
};

pub fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Synth(args) => run_synth(args),
        Command::Train(args) => run_train(args),
        Command::Translate(args) => run_translate(args),
        Command::Eval(args) => run_eval(args),
        Command::Diagnose(args) => run_diagnose(args),
        Command::Gradcheck(args) => run_gradcheck(args),
        Command::Sweep(args) => run_sweep(args),
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn write_manifest(
    out_dir: &Path,
    command: &str,
    seed: u64,
    config_lines: &[String],
) -> Result<String, CliError> {
    fs::create_dir_all(out_dir)?;
    let hash = config_hash(config_lines);
    let start = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let mut text = String::new();
    text.push_str("format: tsnmt-manifest v1\n");
    text.push_str(&format!("command: {command}\n"));
    text.push_str(&format!("code_version: tsnmt {}\n", env!("CARGO_PKG_VERSION")));
    text.push_str(&format!("start_time_unix: {start}\n"));
    text.push_str(&format!("seed: {seed}\n"));
    text.push_str(&format!("out_dir: {}\n", out_dir.display()));
    text.push_str(&format!("config_hash: {hash}\n"));
    text.push_str("config:\n");
    for line in config_lines {
        text.push_str(line);
        text.push('\n');
    }
    fs::write(out_dir.join("manifest.txt"), text)?;
    Ok(hash)
}

/// Sorted `key = value` lines for the simple (non-config-file) commands.
fn kv_lines(pairs: &[(&str, String)]) -> Vec<String> {
    let mut lines: Vec<String> = pairs.iter().map(|(k, v)| format!("{k} = {v}")).collect();
    lines.sort();
    lines
}

fn opt_path(p: &Option<PathBuf>) -> String {
    p.as_ref()
        .map(|p| p.display().to_string())
        .unwrap_or_else(|| "none".into())
}

fn run_synth(args: SynthArgs) -> Result<(), CliError> {
    if args.pairs == 0 {
        return Err(usage("--pairs must be at least 1"));
    }
    let task: TaskKind = args.task.parse().map_err(CliError::from)?;
    write_manifest(
        &args.out,
        "synth",
        args.seed,
        &kv_lines(&[
            ("task", args.task.clone()),
            ("vocab_size", args.vocab_size.to_string()),
            ("max_len", args.max_len.to_string()),
            ("pairs", args.pairs.to_string()),
            ("seed", args.seed.to_string()),
            ("out", args.out.display().to_string()),
        ]),
    )?;
    let corpus = generate_synthetic_task(task, args.vocab_size, args.max_len, args.pairs, args.seed)?;
    let write_side = |name: &str, lines: &[String]| -> Result<PathBuf, CliError> {
        let path = args.out.join(name);
        let mut text = lines.join("\n");
        text.push('\n');
        fs::write(&path, text)?;
        Ok(path)
    };
    let src = write_side("source.txt", &corpus.source_lines)?;
    let tgt = write_side("target.txt", &corpus.target_lines)?;
    println!(
        "wrote {} pairs to {} and {}",
        corpus.source_lines.len(),
        src.display(),
        tgt.display()
    );
    Ok(())
}

fn run_train(args: TrainArgs) -> Result<(), CliError> {
    let mut map = match &args.config {
        Some(path) => ConfigMap::from_file(path)?,
        None => ConfigMap::defaults(),
    };
    if args.no_ss && args.alpha.is_some() {
        eprintln!("warning: --alpha has no effect with --no-ss (sampling never starts)");
    }
    if let Some(p) = &args.source {
        map.set("train.source", p.display());
    }
    if let Some(p) = &args.target {
        map.set("train.target", p.display());
    }
    if let Some(p) = &args.valid_source {
        map.set("train.valid_source", p.display());
    }
    if let Some(p) = &args.valid_target {
        map.set("train.valid_target", p.display());
    }
    if args.no_ecm {
        map.set("train.enable_ecm", false);
    }
    if args.no_ss {
        map.set("train.enable_ss", false);
    }
    if args.standard_decoder {
        map.set("model.decoder_mode", "standard");
    }
    if let Some(v) = args.lambda {
        map.set("train.lambda", v);
    }
    if let Some(v) = args.alpha {
        map.set("schedule.alpha", v);
    }
    if let Some(v) = args.beta {
        map.set("schedule.beta", v);
    }
    if let Some(v) = args.mu {
        map.set("schedule.mu", v);
    }
    if let Some(v) = args.steps {
        map.set("train.steps", v);
    }
    if let Some(v) = args.seed {
        map.set("train.seed", v);
    }
    let resolved = config::resolve(&map, &args.out)?;
    execute_training(resolved, args.resume.as_deref())?;
    Ok(())
}

/// Shared by `train` and each `sweep` run: manifest, corpus and vocabulary
/// preparation, the training loop, and a summary on stdout.
fn execute_training(
    mut resolved: Resolved,
    resume: Option<&Path>,
) -> Result<TrainOutcome, CliError> {
    resolved.run.validate()?;
    let hash = write_manifest(
        &resolved.run.out_dir,
        "train",
        resolved.run.seed,
        &resolved.lines,
    )?;
    println!("config_hash: {hash}");

    let (src_path, tgt_path) = resolved.data.corpus()?;
    let src_text = fs::read_to_string(src_path)?;
    let tgt_text = fs::read_to_string(tgt_path)?;
    let src_vocab = build_vocab(
        src_text.lines(),
        resolved.data.vocab_max_size,
        resolved.data.vocab_min_count,
    )?;
    let tgt_vocab = build_vocab(
        tgt_text.lines(),
        resolved.data.vocab_max_size,
        resolved.data.vocab_min_count,
    )?;
    resolved.model.vocab_size_src = src_vocab.len();
    resolved.model.vocab_size_tgt = tgt_vocab.len();
    resolved.model.validate()?;
    src_vocab.save(&resolved.run.out_dir.join("vocab.src"))?;
    tgt_vocab.save(&resolved.run.out_dir.join("vocab.tgt"))?;

    let train_pairs = load_parallel_corpus(src_path, tgt_path, &src_vocab, &tgt_vocab)?;
    let valid_pairs = match resolved.data.validation()? {
        Some((vs, vt)) => load_parallel_corpus(vs, vt, &src_vocab, &tgt_vocab)?,
        None => Vec::new(),
    };
    if resolved.run.stop_at_token_accuracy.is_some() && valid_pairs.is_empty() {
        eprintln!("warning: train.stop_at_token_accuracy has no effect without a validation set");
    }
    println!(
        "training: {} pairs ({} validation), vocab {} source / {} target",
        train_pairs.len(),
        valid_pairs.len(),
        src_vocab.len(),
        tgt_vocab.len()
    );

    let outcome = run_training::<TrainScalar>(
        &resolved.model,
        &resolved.run,
        &train_pairs,
        &valid_pairs,
        resume,
    )?;

    let early = if outcome.stopped_early {
        " (stopped at the token-accuracy bar)"
    } else {
        ""
    };
    println!("steps: {}/{}{early}", outcome.final_step, resolved.run.max_steps);
    if let Some(v) = outcome.final_valid {
        println!("valid_nll: {}", v.per_token_nll);
        if let Some(acc) = v.token_accuracy {
            println!("valid_token_accuracy: {acc}");
        }
    }
    if let Some(best) = outcome.best_valid_nll {
        println!("best_valid_nll: {best}");
    }
    if let Some(p) = &outcome.last_checkpoint {
        println!("last_checkpoint: {}", p.display());
    }
    if let Some(p) = &outcome.best_checkpoint {
        println!("best_checkpoint: {}", p.display());
    }
    Ok(outcome)
}

/// Loads a checkpoint plus the vocabularies it was trained with (by
/// convention vocab.src / vocab.tgt next to the checkpoint file).
fn load_model(
    checkpoint: &Path,
    vocab_src: &Option<PathBuf>,
    vocab_tgt: &Option<PathBuf>,
) -> Result<(Checkpoint<TrainScalar>, Vocabulary, Vocabulary), CliError> {
    let ck = load_checkpoint::<TrainScalar>(checkpoint)
        .map_err(|e| CliError::Runtime(format!("checkpoint {}: {e}", checkpoint.display())))?;
    let dir = checkpoint.parent().unwrap_or_else(|| Path::new("."));
    let src_path = vocab_src.clone().unwrap_or_else(|| dir.join("vocab.src"));
    let tgt_path = vocab_tgt.clone().unwrap_or_else(|| dir.join("vocab.tgt"));
    let load_vocab = |path: &Path| {
        Vocabulary::load(path)
            .map_err(|e| CliError::Runtime(format!("vocabulary {}: {e}", path.display())))
    };
    let src = load_vocab(&src_path)?;
    let tgt = load_vocab(&tgt_path)?;
    for (name, got, want) in [
        ("source", src.len(), ck.model.vocab_size_src),
        ("target", tgt.len(), ck.model.vocab_size_tgt),
    ] {
        if got != want {
            return Err(CliError::Runtime(format!(
                "{name} vocabulary has {got} entries but the checkpoint was trained with {want}"
            )));
        }
    }
    Ok((ck, src, tgt))
}

fn run_translate(args: TranslateArgs) -> Result<(), CliError> {
    if args.nbest == 0 {
        return Err(usage("--nbest must be at least 1"));
    }
    if args.nbest > args.beam {
        return Err(usage(format!(
            "--nbest {} cannot exceed --beam {}",
            args.nbest, args.beam
        )));
    }
    let manifest_dir = args
        .out
        .clone()
        .or_else(|| args.output.parent().map(Path::to_path_buf))
        .unwrap_or_else(|| PathBuf::from("."));
    write_manifest(
        &manifest_dir,
        "translate",
        args.seed,
        &kv_lines(&[
            ("checkpoint", args.checkpoint.display().to_string()),
            ("input", args.input.display().to_string()),
            ("output", args.output.display().to_string()),
            ("beam", args.beam.to_string()),
            ("length_penalty", args.length_penalty.to_string()),
            ("max_len", args.max_len.to_string()),
            ("nbest", args.nbest.to_string()),
            ("vocab_src", opt_path(&args.vocab_src)),
            ("vocab_tgt", opt_path(&args.vocab_tgt)),
            ("seed", args.seed.to_string()),
        ]),
    )?;

    let (ck, src_vocab, tgt_vocab) = load_model(&args.checkpoint, &args.vocab_src, &args.vocab_tgt)?;
    let dc = DecodeConfig {
        mode: DecodeMode::Beam,
        beam_size: args.beam,
        length_penalty: args.length_penalty,
        max_output_length: args.max_len,
    };
    dc.validate()?;

    let input = fs::read_to_string(&args.input)?;
    let mut out = String::new();
    let mut sentences = 0usize;
    for (index, line) in input.lines().enumerate() {
        sentences += 1;
        let tokens = src_vocab.encode_line(line);
        if tokens.is_empty() {
            // Nothing to condition on; mirror the empty line.
            if args.nbest == 1 {
                out.push('\n');
            } else {
                out.push_str(&format!("{index} |||  ||| 0.000000\n"));
            }
            continue;
        }
        let hyps = decode(&ck.params, &ck.model, &tokens, &dc)?;
        if args.nbest == 1 {
            out.push_str(&tgt_vocab.decode(&hyps[0].tokens));
            out.push('\n');
        } else {
            for h in hyps.iter().take(args.nbest) {
                out.push_str(&format!(
                    "{index} ||| {} ||| {:.6}\n",
                    tgt_vocab.decode(&h.tokens),
                    h.score
                ));
            }
        }
    }
    fs::write(&args.output, out)?;
    println!("translated {sentences} sentences -> {}", args.output.display());
    Ok(())
}

fn run_eval(args: EvalArgs) -> Result<(), CliError> {
    let manifest_dir = args
        .out
        .clone()
        .or_else(|| {
            args.report
                .as_ref()
                .and_then(|r| r.parent().map(Path::to_path_buf))
        })
        .unwrap_or_else(|| PathBuf::from("."));
    write_manifest(
        &manifest_dir,
        "eval",
        args.seed,
        &kv_lines(&[
            ("hypotheses", args.hypotheses.display().to_string()),
            ("references", args.references.display().to_string()),
            ("report", opt_path(&args.report)),
            ("seed", args.seed.to_string()),
        ]),
    )?;

    let hyp_text = fs::read_to_string(&args.hypotheses)?;
    let ref_text = fs::read_to_string(&args.references)?;
    let hyps: Vec<&str> = hyp_text.lines().collect();
    let refs: Vec<&str> = ref_text.lines().collect();
    let report = corpus_bleu(&hyps, &refs)?;
    let exact = hyps.iter().zip(&refs).filter(|(h, r)| h == r).count() as f64
        / hyps.len().max(1) as f64;
    println!("{report}");

    if let Some(path) = &args.report {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let mut text = String::new();
        text.push_str(&format!("bleu: {}\n", report.bleu));
        for (i, p) in report.precisions.iter().enumerate() {
            text.push_str(&format!("p{}: {}\n", i + 1, p));
        }
        text.push_str(&format!("brevity_penalty: {}\n", report.brevity_penalty));
        text.push_str(&format!("hypothesis_length: {}\n", report.hypothesis_length));
        text.push_str(&format!("reference_length: {}\n", report.reference_length));
        text.push_str(&format!("exact_match: {exact}\n"));
        text.push_str(&format!("sentences: {}\n", hyps.len()));
        fs::write(path, text)?;
        println!("report -> {}", path.display());
    }
    Ok(())
}

fn run_diagnose(args: DiagnoseArgs) -> Result<(), CliError> {
    if !(0.0..=1.0).contains(&args.corruption_rate) {
        return Err(usage(format!(
            "--corruption-rate must be in [0, 1], got {}",
            args.corruption_rate
        )));
    }
    write_manifest(
        &args.out,
        "diagnose",
        args.seed,
        &kv_lines(&[
            ("checkpoint", args.checkpoint.display().to_string()),
            ("source", args.source.display().to_string()),
            ("target", args.target.display().to_string()),
            ("corruption_rate", args.corruption_rate.to_string()),
            ("report", opt_path(&args.report)),
            ("vocab_src", opt_path(&args.vocab_src)),
            ("vocab_tgt", opt_path(&args.vocab_tgt)),
            ("seed", args.seed.to_string()),
        ]),
    )?;

    let (ck, src_vocab, tgt_vocab) = load_model(&args.checkpoint, &args.vocab_src, &args.vocab_tgt)?;
    let pairs = load_parallel_corpus(&args.source, &args.target, &src_vocab, &tgt_vocab)?;

    // The corruption depends only on (seed, pair index, truth), never on
    // the model, so two checkpoints diagnosed with the same seed see
    // identical corrupted inputs — a paired comparison.
    let mut reports = Vec::with_capacity(pairs.len());
    for (i, pair) in pairs.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(args.seed, &[i as u64]));
        let corrupted = corrupt_tokens(
            &pair.y,
            args.corruption_rate,
            ck.model.vocab_size_tgt,
            &mut rng,
        );
        reports.push(correction_diagnostic(
            &ck.params, &ck.model, &pair.x, &corrupted, &pair.y,
        )?);
    }
    let summary = recovery_rate(&reports)?;
    match summary.recovery_rate() {
        Some(rate) => println!(
            "recovery_rate: {rate} ({} of {} corrupted positions over {} sentences)",
            summary.recovered, summary.corrupted, summary.runs
        ),
        None => println!(
            "recovery_rate: vacuous (no corrupted positions over {} sentences)",
            summary.runs
        ),
    }

    if let Some(path) = &args.report {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let mut text = String::new();
        text.push_str(&format!(
            "recovery_rate: {}\n",
            summary
                .recovery_rate()
                .map(|r| r.to_string())
                .unwrap_or_else(|| "vacuous".into())
        ));
        text.push_str(&format!("sentences: {}\n", summary.runs));
        text.push_str(&format!("corrupted: {}\n", summary.corrupted));
        text.push_str(&format!("recovered: {}\n", summary.recovered));
        for bucket in &summary.buckets {
            let rate = bucket
                .recovery_rate()
                .map(|r| r.to_string())
                .unwrap_or_else(|| "vacuous".into());
            text.push_str(&format!(
                "bucket_{:.1}: {} (runs: {}, corrupted: {})\n",
                bucket.rate_floor, rate, bucket.runs, bucket.corrupted
            ));
        }
        fs::write(path, text)?;
        println!("report -> {}", path.display());
    }
    Ok(())
}

fn run_gradcheck(args: GradcheckArgs) -> Result<(), CliError> {
    let out = args.out.clone().unwrap_or_else(|| PathBuf::from("."));
    write_manifest(
        &out,
        "gradcheck",
        args.seed,
        &kv_lines(&[
            ("layers", args.layers.to_string()),
            ("hidden", args.hidden.to_string()),
            ("seed", args.seed.to_string()),
            ("tolerance", args.tolerance.to_string()),
        ]),
    )?;
    let report = check_model_gradients(args.layers, args.hidden, args.seed, args.tolerance)?;
    for group in &report.groups {
        let verdict = if group.max_rel_error < report.tolerance {
            "PASS"
        } else {
            "FAIL"
        };
        println!(
            "{}: rel_error {} (analytic {}, numeric {}, element {},{}) {verdict}",
            group.name, group.max_rel_error, group.analytic, group.numeric, group.row, group.col
        );
    }
    println!(
        "total: max_rel_error {} tolerance {} {}",
        report.max_rel_error,
        report.tolerance,
        if report.pass { "PASS" } else { "FAIL" }
    );
    if report.pass {
        Ok(())
    } else {
        Err(CliError::Runtime(format!(
            "gradient check failed: max relative error {} is not below tolerance {}",
            report.max_rel_error, report.tolerance
        )))
    }
}

fn run_sweep(args: SweepArgs) -> Result<(), CliError> {
    let key = match args.param.as_str() {
        "lambda" => "train.lambda",
        "alpha" => "schedule.alpha",
        "beta" => "schedule.beta",
        other => {
            return Err(usage(format!(
                "--param must be lambda, alpha, or beta, got {other:?}"
            )))
        }
    };

    // Values are compared numerically so "0.5" and "0.50" collapse.
    let mut values: Vec<(String, f64)> = Vec::new();
    for raw in args.values.split(',') {
        let raw = raw.trim();
        let parsed: f64 = raw
            .parse()
            .map_err(|e| usage(format!("--values entry {raw:?}: {e}")))?;
        if args.param == "alpha" && (parsed.fract() != 0.0 || parsed < 0.0) {
            return Err(usage(format!(
                "--values entry {raw:?}: alpha is a step count and must be a non-negative integer"
            )));
        }
        let label = if args.param == "alpha" {
            format!("{}", parsed as u64)
        } else {
            parsed.to_string()
        };
        if values.iter().any(|(_, v)| *v == parsed) {
            eprintln!("warning: duplicate value {label} collapsed");
            continue;
        }
        values.push((label, parsed));
    }
    if values.is_empty() {
        return Err(usage("--values is empty"));
    }

    let mut base = ConfigMap::from_file(&args.base_config)?;
    if let Some(seed) = args.seed {
        base.set("train.seed", seed);
    }
    {
        let probe = config::resolve(&base, &args.out)?;
        if probe.data.validation()?.is_none() {
            return Err(usage(
                "sweep needs train.valid_source and train.valid_target in the base config \
                 (the aggregated CSV reports the final validation metric)",
            ));
        }
    }
    write_manifest(
        &args.out,
        "sweep",
        args.seed.unwrap_or(0),
        &kv_lines(&[
            ("param", args.param.clone()),
            (
                "values",
                values
                    .iter()
                    .map(|(l, _)| l.as_str())
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            ("base_config", args.base_config.display().to_string()),
            ("jobs", args.jobs.to_string()),
        ]),
    )?;

    let jobs = args.jobs.max(1);
    let mut results: Vec<Option<Result<TrainOutcome, CliError>>> =
        (0..values.len()).map(|_| None).collect();
    for (wave_index, wave) in values.chunks(jobs).enumerate() {
        let wave_results = std::thread::scope(|scope| {
            let handles: Vec<_> = wave
                .iter()
                .map(|(label, value)| {
                    let mut map = base.clone();
                    map.set(key, value);
                    let run_dir = args.out.join(format!("{}_{}", args.param, label));
                    scope.spawn(move || {
                        let resolved = config::resolve(&map, &run_dir)?;
                        execute_training(resolved, None)
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("sweep worker panicked"))
                .collect::<Vec<_>>()
        });
        for (offset, result) in wave_results.into_iter().enumerate() {
            results[wave_index * jobs + offset] = Some(result);
        }
    }

    let mut csv = String::from("value,valid_nll,valid_token_accuracy\n");
    for ((label, _), result) in values.iter().zip(results) {
        let outcome = result.expect("every value ran")?;
        let valid = outcome
            .final_valid
            .expect("sweep runs always end on a validation");
        let accuracy = valid
            .token_accuracy
            .map(|a| a.to_string())
            .unwrap_or_default();
        csv.push_str(&format!("{label},{},{accuracy}\n", valid.per_token_nll));
        println!("{} {label}: valid_nll {}", args.param, valid.per_token_nll);
    }
    let csv_path = args.out.join("sweep.csv");
    fs::write(&csv_path, csv)?;
    println!("sweep -> {}", csv_path.display());
    Ok(())
}
