//! `vrepair`: file-based pipeline stages from commit mining to patch
//! evaluation. Every stage reads and writes JSON Lines.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use vrepair::config::PipelineConfig;
use vrepair::ctok::{join_lexemes, tokenize};
use vrepair::diffcodec::{enumerate_applications, parse_diff};
use vrepair::encoding::{
    assign_cwe_token, build_cwe_kept_set, build_vocab, denoising_sample, encode_pair, LocalizationMode, Sample,
    Vocabulary,
};
use vrepair::evalrep::{patch_hits, per_cwe_report, sequence_hits};
use vrepair::inference::{vrepair_beam_encoded, Hypothesis, PatchCandidate};
use vrepair::jsonl;
use vrepair::micronet::{load_checkpoint, save_checkpoint, Model};
use vrepair::mining::{mine, CommitRecord, FunctionPair};
use vrepair::training::{
    pretrain_denoise, split, tune_target, train_source, NegativeLoss, SequenceAccuracy, SplitSpec, TrainError, TrainOutcome, Validator,
};

/// Failure classes, each with its own exit code.
#[derive(Debug)]
enum CliError {
    Config(anyhow::Error),
    Data(anyhow::Error),
    Runtime(anyhow::Error),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Runtime(_) => 4,
        }
    }

    fn inner(&self) -> &anyhow::Error {
        match self {
            CliError::Config(e) | CliError::Data(e) | CliError::Runtime(e) => e,
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn data<E: Into<anyhow::Error>>(e: E) -> CliError {
    CliError::Data(e.into())
}

fn runtime<E: Into<anyhow::Error>>(e: E) -> CliError {
    CliError::Runtime(e.into())
}

#[derive(Parser)]
#[command(name = "vrepair", version, about = "Learned repair of C vulnerabilities with token context diffs")]
struct Cli {
    /// Pipeline config (JSON); defaults apply to every missing key.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed for splitting, noise, initialization and dropout.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract function pairs from bug-fix commits.
    Mine {
        #[arg(long)]
        commits: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Keep every commit regardless of its message.
        #[arg(long)]
        all_commits: bool,
    },
    /// Turn function pairs into model samples and a vocabulary.
    Encode {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Where to write the vocabulary built from these samples.
        #[arg(long)]
        vocab_out: Option<PathBuf>,
        /// Tag CWE ids kept by this vocabulary instead of computing coverage.
        #[arg(long, conflicts_with = "vocab_out")]
        vocab_in: Option<PathBuf>,
        #[arg(long)]
        mode: Option<LocalizationMode>,
        /// Emit denoising samples from the fixed functions instead.
        #[arg(long)]
        noise: bool,
    },
    /// Partition samples into train/val/test files.
    Split {
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Source-domain training from scratch.
    Train(TrainArgs),
    /// Target-domain tuning from a checkpoint.
    Tune(TrainArgs),
    /// Denoising pre-training from scratch, keeping the checkpoint with the
    /// lowest validation loss.
    PretrainDenoise(TrainArgs),
    /// Beam search and patch candidates for every sample.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        beam: Option<usize>,
    },
    /// Score predictions against gold samples.
    Eval {
        #[arg(long)]
        preds: PathBuf,
        #[arg(long)]
        golds: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Rows in the printed per-CWE table.
        #[arg(long, default_value_t = 10)]
        top: usize,
    },
    /// Print every way a diff applies to a C function.
    Apply {
        #[arg(long)]
        function: PathBuf,
        /// Whitespace-separated diff tokens.
        #[arg(long)]
        diff: PathBuf,
        #[arg(long)]
        context: Option<usize>,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    samples: PathBuf,
    #[arg(long)]
    val: PathBuf,
    /// Required for `tune`; ignored otherwise.
    #[arg(long)]
    checkpoint_in: Option<PathBuf>,
    #[arg(long)]
    checkpoint_out: PathBuf,
    /// Vocabulary for a fresh model; for `tune` it must equal the checkpoint's.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Run log; defaults to the checkpoint path with `.log.jsonl` appended.
    #[arg(long)]
    log: Option<PathBuf>,
}

fn load_config(cli: &Cli) -> CliResult<PipelineConfig> {
    let mut config = match &cli.config {
        Some(p) => PipelineConfig::load(p).map_err(|e| CliError::Config(e.into()))?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
        config.train.seed = seed;
        if let SplitSpec::Random { seed: s, .. } = &mut config.split {
            *s = seed;
        }
    }
    config.validate().map_err(|e| CliError::Config(e.into()))?;
    Ok(config)
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<Vec<T>> {
    jsonl::read(path).map_err(data)
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> CliResult {
    jsonl::write(path, items).map_err(data)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult {
    let text = serde_json::to_string_pretty(value).map_err(runtime)?;
    std::fs::write(path, text + "\n")
        .with_context(|| path.display().to_string())
        .map_err(data)
}

fn cmd_mine(config: &PipelineConfig, commits: &Path, out: &Path, all_commits: bool) -> CliResult {
    let records: Vec<CommitRecord> = read_jsonl(commits)?;
    let mut mining = config.mining.clone();
    if all_commits {
        mining.filter_messages = false;
    }
    let (pairs, stats) = mine(
        &records,
        &mining,
        config.codec.context_size,
        config.encoding.localization_mode,
    );
    write_jsonl(out, &pairs)?;
    println!("{}", serde_json::to_string(&stats).map_err(runtime)?);
    Ok(())
}

fn cmd_encode(
    config: &PipelineConfig,
    pairs_path: &Path,
    out: &Path,
    vocab_out: Option<&Path>,
    vocab_in: Option<&Path>,
    mode: Option<LocalizationMode>,
    noise: bool,
) -> CliResult {
    let pairs: Vec<FunctionPair> = read_jsonl(pairs_path)?;
    let ctx = config.codec.context_size;
    let mode = mode.unwrap_or(config.encoding.localization_mode);
    let given_vocab = vocab_in.map(Vocabulary::load).transpose().map_err(data)?;
    let kept = match &given_vocab {
        Some(v) => v.tokens().iter().filter(|t| t.starts_with("CWE-")).cloned().collect(),
        None => build_cwe_kept_set(
            pairs.iter().map(|p| p.meta.as_ref().and_then(|m| m.cwe_id.as_deref())),
            config.encoding.cwe_coverage,
        ),
    };
    let mut samples: Vec<Sample> = Vec::with_capacity(pairs.len());
    let mut skipped = 0usize;
    for (i, pair) in pairs.iter().enumerate() {
        let sample = if noise {
            let seed = config.seed.wrapping_add(i as u64);
            denoising_sample(&pair.after.lexemes(), &config.encoding.noise, seed, ctx).map_err(|e| e.to_string())
        } else {
            let cwe = assign_cwe_token(pair.meta.as_ref().and_then(|m| m.cwe_id.as_deref()), &kept);
            encode_pair(pair, ctx, mode, &cwe).map_err(|e| e.to_string())
        };
        match sample {
            Ok(s) => samples.push(s),
            Err(e) => {
                log::warn!("pair {i}: {e}");
                skipped += 1;
            }
        }
    }
    write_jsonl(out, &samples)?;
    if let Some(path) = vocab_out {
        let cwes: Vec<String> = kept.into_iter().collect();
        let corpus = samples.iter().flat_map(|s| [s.input.as_slice(), s.target.as_slice()]);
        let vocab = build_vocab(corpus, config.encoding.vocab_size, &cwes);
        vocab.save(path).map_err(data)?;
    }
    println!(
        "{}",
        serde_json::json!({"pairs": pairs.len(), "samples": samples.len(), "skipped": skipped})
    );
    Ok(())
}

fn cmd_split(config: &PipelineConfig, samples: &Path, out_dir: &Path) -> CliResult {
    let all: Vec<Sample> = read_jsonl(samples)?;
    let parts = split(all, &config.split).map_err(data)?;
    std::fs::create_dir_all(out_dir)
        .with_context(|| out_dir.display().to_string())
        .map_err(data)?;
    for (name, part) in [("train", &parts.train), ("val", &parts.val), ("test", &parts.test)] {
        write_jsonl(&out_dir.join(format!("{name}.jsonl")), part)?;
    }
    println!(
        "{}",
        serde_json::json!({"train": parts.train.len(), "val": parts.val.len(), "test": parts.test.len()})
    );
    Ok(())
}

#[derive(Clone, Copy)]
enum Phase {
    Source,
    Target,
    Denoise,
}

fn train_error(e: TrainError) -> CliError {
    match e {
        TrainError::Config(_) => CliError::Config(e.into()),
        TrainError::Empty | TrainError::VocabMismatch | TrainError::Split(_) => data(e),
        other => runtime(other),
    }
}

fn cmd_train(config: &PipelineConfig, phase: Phase, args: &TrainArgs) -> CliResult {
    let train: Vec<Sample> = read_jsonl(&args.samples)?;
    let val: Vec<Sample> = read_jsonl(&args.val)?;
    let vocab = args.vocab.as_deref().map(Vocabulary::load).transpose().map_err(data)?;
    let tc = &config.train;
    let mut validator: Box<dyn Validator> = match phase {
        Phase::Denoise => Box::new(NegativeLoss::new(&val)),
        _ => Box::new(SequenceAccuracy::new(&val, tc.eval_beam, tc.max_decode_len)),
    };
    let outcome: TrainOutcome = match phase {
        Phase::Target => {
            let path = args
                .checkpoint_in
                .as_deref()
                .ok_or_else(|| CliError::Config(anyhow!("tune needs --checkpoint-in")))?;
            let source = load_checkpoint(path).map_err(data)?;
            tune_target(source, vocab.as_ref(), tc, &train, validator.as_mut()).map_err(train_error)?
        }
        Phase::Source | Phase::Denoise => {
            let vocab = vocab.ok_or_else(|| CliError::Config(anyhow!("training from scratch needs --vocab")))?;
            let run = if matches!(phase, Phase::Source) {
                train_source
            } else {
                pretrain_denoise
            };
            run(tc, &config.model, vocab, &train, validator.as_mut()).map_err(train_error)?
        }
    };
    save_checkpoint(&outcome.best, &args.checkpoint_out).map_err(data)?;
    let log_path = args.log.clone().unwrap_or_else(|| {
        let mut p = args.checkpoint_out.clone().into_os_string();
        p.push(".log.jsonl");
        PathBuf::from(p)
    });
    write_jsonl(&log_path, &outcome.log)?;
    println!(
        "{}",
        serde_json::json!({
            "steps_run": outcome.steps_run,
            "best_step": outcome.best_step,
            "best_metric": outcome.best_metric,
            "stopped_early": outcome.stopped_early,
        })
    );
    Ok(())
}

#[derive(Serialize, serde::Deserialize)]
struct Prediction {
    input_id: usize,
    beam_width: usize,
    hypotheses: Vec<Hypothesis>,
    candidates: Vec<PatchCandidate>,
}

fn cmd_predict(config: &PipelineConfig, checkpoint: &Path, samples: &Path, out: &Path, beam: Option<usize>) -> CliResult {
    let model: Model = load_checkpoint(checkpoint).map_err(data)?;
    let samples: Vec<Sample> = read_jsonl(samples)?;
    let width = beam.unwrap_or(config.infer.beam_width);
    if width == 0 {
        return Err(CliError::Config(anyhow!("beam width must be positive")));
    }
    let mut preds = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let repair = vrepair_beam_encoded(
            &model,
            &s.input,
            &s.function_lexemes(),
            width,
            config.infer.max_len,
            config.codec.context_size,
        )
        .with_context(|| format!("sample {i}"))
        .map_err(runtime)?;
        preds.push(Prediction {
            input_id: i,
            beam_width: width,
            hypotheses: repair.hypotheses,
            candidates: repair.candidates,
        });
    }
    write_jsonl(out, &preds)
}

fn cmd_eval(preds: &Path, golds: &Path, out: &Path, csv: Option<&Path>, split_name: &str, top: usize) -> CliResult {
    let mut preds: Vec<Prediction> = read_jsonl(preds)?;
    let golds: Vec<Sample> = read_jsonl(golds)?;
    preds.sort_by_key(|p| p.input_id);
    if preds.iter().enumerate().any(|(i, p)| p.input_id != i) {
        return Err(data(anyhow!("prediction ids must be 0..{} without gaps", preds.len())));
    }
    let beams: Vec<Vec<Vec<String>>> = preds
        .iter()
        .map(|p| {
            p.hypotheses
                .iter()
                .filter(|h| h.finished)
                .map(|h| h.tokens.clone())
                .collect()
        })
        .collect();
    let targets: Vec<Vec<String>> = golds.iter().map(|g| g.target.clone()).collect();
    let hits = sequence_hits(&beams, &targets).map_err(data)?;
    let patch = if golds.iter().all(|g| g.fixed.is_some()) {
        let cands: Vec<Vec<Vec<String>>> = preds
            .iter()
            .map(|p| p.candidates.iter().map(|c| c.function.clone()).collect())
            .collect();
        let fixed: Vec<Vec<String>> = golds.iter().map(|g| g.fixed.clone().unwrap()).collect();
        Some(patch_hits(&cands, &fixed).map_err(data)?)
    } else {
        None
    };
    let cwes: Vec<&str> = golds.iter().map(|g| g.cwe.as_str()).collect();
    let beam = preds.iter().map(|p| p.beam_width).max().unwrap_or(0);
    let report = per_cwe_report(&hits, &cwes, patch.as_deref(), beam, split_name).map_err(data)?;
    write_json(out, &report)?;
    if let Some(path) = csv {
        std::fs::write(path, report.to_csv())
            .with_context(|| path.display().to_string())
            .map_err(data)?;
    }
    print!("{}", report.to_table(top));
    Ok(())
}

fn cmd_apply(config: &PipelineConfig, function: &Path, diff: &Path, context: Option<usize>) -> CliResult {
    let read = |p: &Path| {
        std::fs::read_to_string(p)
            .with_context(|| p.display().to_string())
            .map_err(data)
    };
    let source = read(function)?;
    let diff_text = read(diff)?;
    let stream = tokenize(&source).map_err(data)?;
    let tokens: Vec<&str> = diff_text.split_whitespace().collect();
    let ctx = context.unwrap_or(config.codec.context_size);
    let parsed = parse_diff(&tokens, ctx).map_err(data)?;
    let patched = enumerate_applications(&stream.lexemes(), &parsed, config.codec.interpretation_cap).map_err(data)?;
    println!("interpretations: {}", patched.len());
    for (i, f) in patched.iter().enumerate() {
        println!("==== interpretation {} ====", i + 1);
        println!("{}", join_lexemes(f.iter().map(String::as_str)));
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    let config = load_config(&cli)?;
    match &cli.command {
        Command::Mine {
            commits,
            out,
            all_commits,
        } => cmd_mine(&config, commits, out, *all_commits),
        Command::Encode {
            pairs,
            out,
            vocab_out,
            vocab_in,
            mode,
            noise,
        } => cmd_encode(
            &config,
            pairs,
            out,
            vocab_out.as_deref(),
            vocab_in.as_deref(),
            *mode,
            *noise,
        ),
        Command::Split { samples, out_dir } => cmd_split(&config, samples, out_dir),
        Command::Train(args) => cmd_train(&config, Phase::Source, args),
        Command::Tune(args) => cmd_train(&config, Phase::Target, args),
        Command::PretrainDenoise(args) => cmd_train(&config, Phase::Denoise, args),
        Command::Predict {
            checkpoint,
            samples,
            out,
            beam,
        } => cmd_predict(&config, checkpoint, samples, out, *beam),
        Command::Eval {
            preds,
            golds,
            out,
            csv,
            split,
            top,
        } => cmd_eval(preds, golds, out, csv.as_deref(), split, *top),
        Command::Apply {
            function,
            diff,
            context,
        } => cmd_apply(&config, function, diff, *context),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e.inner());
            ExitCode::from(e.code())
        }
    }
}
