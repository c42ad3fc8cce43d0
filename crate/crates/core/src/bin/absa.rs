//! Command-line entry point: train, evaluate, predict, generate synthetic
//! corpora, and run the hierarchical-vs-baseline comparison.
//!
//! Config precedence per setting: CLI flag > config file (`--config`,
//! flat `key=value` lines) > built-in default. Every command is
//! deterministic given its inputs and seed, writes only under `--out`,
//! and reports failures as a single `error[<category>]: ...` line with a
//! nonzero exit code.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hlstm::checkpoint::Checkpoint;
use hlstm::data::{
    generate_synthetic, parse_corpus, prepare_reviews, write_corpus, PaddedReview, Review,
    SyntheticSpec, Tokenizer, NUM_CLASSES,
};
use hlstm::error::{Error, Result};
use hlstm::model::{predict, ModelKind};
use hlstm::train::{evaluate, fit, EvalReport, FitOptions, FitOutcome, TrainConfig};

#[derive(Parser)]
#[command(
    name = "absa",
    about = "Aspect-based sentiment analysis with a hierarchical bidirectional LSTM"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and write the best checkpoint plus a per-epoch report.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a labeled corpus.
    Eval(EvalArgs),
    /// Emit per-instance polarity predictions for a corpus.
    Predict(PredictArgs),
    /// Generate synthetic train/test corpora.
    Synth(SynthArgs),
    /// Train both architectures with identical budgets and report the gap.
    Compare(CompareArgs),
}

/// Tunables shared by train and compare.
#[derive(Args, Clone)]
struct TuneArgs {
    /// Flat key=value config file, overridden by explicit flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model architecture: hlstm | baseline.
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Maximum training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long = "batch-size")]
    batch_size: Option<usize>,
    /// Adam learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// LSTM output size per direction.
    #[arg(long)]
    hidden: Option<usize>,
    /// Early-stopping patience in epochs.
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    /// Held-out fraction of training reviews for early stopping.
    #[arg(long = "val-fraction")]
    val_fraction: Option<f64>,
    /// Word embedding size.
    #[arg(long = "word-dim")]
    word_dim: Option<usize>,
    /// Entity/attribute embedding size.
    #[arg(long = "aspect-dim")]
    aspect_dim: Option<usize>,
    /// Minimum token frequency for a vocabulary entry.
    #[arg(long = "min-count")]
    min_count: Option<usize>,
    /// Treat corpus text as pre-segmented: split on spaces only.
    #[arg(long)]
    pretokenized: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Training corpus file.
    #[arg(long)]
    corpus: PathBuf,
    /// Optional pre-trained embedding file (token + values per line).
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Output directory for checkpoint and report.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    tune: TuneArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Labeled corpus to score.
    #[arg(long)]
    corpus: PathBuf,
    /// Optional output directory for metrics.txt.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Corpus to label (polarity attributes optional).
    #[arg(long)]
    corpus: PathBuf,
    /// Optional output directory for predictions.tsv.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory for train.xml and test.xml.
    #[arg(long)]
    out: PathBuf,
    /// Training reviews to generate.
    #[arg(long, default_value_t = 500)]
    reviews: usize,
    /// Test reviews to generate.
    #[arg(long = "test-reviews", default_value_t = 200)]
    test_reviews: usize,
    /// Fraction of context-dependent sentences per review, in [0, 1).
    #[arg(long, default_value_t = 0.5)]
    ambiguity: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args)]
struct CompareArgs {
    /// Training corpus file.
    #[arg(long)]
    corpus: PathBuf,
    /// Test corpus; falls back to the training corpus when omitted.
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Output directory for compare.txt and per-model artifacts.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    tune: TuneArgs,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.category(), e);
            ExitCode::FAILURE
        }
    }
}

fn run() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Train(args) => cmd_train(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Predict(args) => cmd_predict(args),
        Cmd::Synth(args) => cmd_synth(args),
        Cmd::Compare(args) => cmd_compare(args),
    }
}

/// Resolved run settings: defaults, then config file, then flags.
struct Settings {
    config: TrainConfig,
    kind: ModelKind,
    tokenizer: Tokenizer,
}

fn resolve_settings(tune: &TuneArgs) -> Result<Settings> {
    let mut cfg = TrainConfig::default();
    let mut kind = ModelKind::Hierarchical;
    let mut tokenizer = Tokenizer::Simple;
    if let Some(path) = &tune.config {
        apply_config_file(path, &mut cfg, &mut kind, &mut tokenizer)?;
    }
    if let Some(model) = &tune.model {
        kind = ModelKind::parse(model)?;
    }
    if tune.pretokenized {
        tokenizer = Tokenizer::Pretokenized;
    }
    if let Some(v) = tune.seed {
        cfg.seed = v;
    }
    if let Some(v) = tune.epochs {
        cfg.max_epochs = v;
    }
    if let Some(v) = tune.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = tune.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = tune.hidden {
        cfg.dims.hidden = v;
    }
    if let Some(v) = tune.patience {
        cfg.patience = v;
    }
    if let Some(v) = tune.dropout {
        cfg.dropout_rate = v;
    }
    if let Some(v) = tune.val_fraction {
        cfg.val_fraction = v;
    }
    if let Some(v) = tune.word_dim {
        cfg.dims.word = v;
    }
    if let Some(v) = tune.aspect_dim {
        cfg.dims.aspect = v;
    }
    if let Some(v) = tune.min_count {
        cfg.min_count = v;
    }
    cfg.validate()?;
    Ok(Settings {
        config: cfg,
        kind,
        tokenizer,
    })
}

fn apply_config_file(
    path: &Path,
    cfg: &mut TrainConfig,
    kind: &mut ModelKind,
    tokenizer: &mut Tokenizer,
) -> Result<()> {
    let content = fs::read_to_string(path)?;
    for (lineno, raw) in content.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "{}:{}: expected key=value, got '{}'",
                path.display(),
                lineno + 1,
                line
            ))
        })?;
        let (key, value) = (key.trim(), value.trim());
        let bad = |what: &str| {
            Error::Config(format!(
                "{}:{}: bad {} value '{}'",
                path.display(),
                lineno + 1,
                what,
                value
            ))
        };
        match key {
            "model" => *kind = ModelKind::parse(value)?,
            "pretokenized" => {
                *tokenizer = match value {
                    "true" => Tokenizer::Pretokenized,
                    "false" => Tokenizer::Simple,
                    _ => return Err(bad("bool")),
                }
            }
            "seed" => cfg.seed = value.parse().map_err(|_| bad("integer"))?,
            "epochs" => cfg.max_epochs = value.parse().map_err(|_| bad("integer"))?,
            "batch_size" => cfg.batch_size = value.parse().map_err(|_| bad("integer"))?,
            "lr" => cfg.learning_rate = value.parse().map_err(|_| bad("float"))?,
            "hidden" => cfg.dims.hidden = value.parse().map_err(|_| bad("integer"))?,
            "patience" => cfg.patience = value.parse().map_err(|_| bad("integer"))?,
            "dropout" => cfg.dropout_rate = value.parse().map_err(|_| bad("float"))?,
            "val_fraction" => cfg.val_fraction = value.parse().map_err(|_| bad("float"))?,
            "word_dim" => cfg.dims.word = value.parse().map_err(|_| bad("integer"))?,
            "aspect_dim" => cfg.dims.aspect = value.parse().map_err(|_| bad("integer"))?,
            "min_count" => cfg.min_count = value.parse().map_err(|_| bad("integer"))?,
            "beta1" => cfg.beta1 = value.parse().map_err(|_| bad("float"))?,
            "beta2" => cfg.beta2 = value.parse().map_err(|_| bad("float"))?,
            "adam_eps" => cfg.adam_eps = value.parse().map_err(|_| bad("float"))?,
            "clip_norm" => cfg.clip_norm = value.parse().map_err(|_| bad("float"))?,
            "l2" => cfg.l2 = value.parse().map_err(|_| bad("float"))?,
            other => {
                return Err(Error::Config(format!(
                    "{}:{}: unknown config key '{}'",
                    path.display(),
                    lineno + 1,
                    other
                )))
            }
        }
    }
    Ok(())
}

fn train_once(
    corpus: &Path,
    embeddings: Option<&Path>,
    settings: &Settings,
    kind: ModelKind,
) -> Result<(FitOutcome, Vec<Review>)> {
    let reviews = parse_corpus(corpus)?;
    let opts = FitOptions {
        kind,
        config: settings.config.clone(),
        tokenizer: settings.tokenizer,
        embeddings: embeddings.map(Path::to_path_buf),
    };
    let outcome = fit(&reviews, &opts)?;
    Ok((outcome, reviews))
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let settings = resolve_settings(&args.tune)?;
    let (outcome, _) = train_once(
        &args.corpus,
        args.embeddings.as_deref(),
        &settings,
        settings.kind,
    )?;
    fs::create_dir_all(&args.out)?;
    outcome.checkpoint.save(&args.out.join("model.ckpt"))?;
    fs::write(
        args.out.join("train_report.txt"),
        outcome.report.to_lines(),
    )?;
    if let Some(coverage) = outcome.embedding_coverage {
        println!("embedding coverage: {:.4}", coverage);
    }
    let best = &outcome.report.epochs[outcome.report.best_epoch - 1];
    println!(
        "trained {} for {} epochs (best epoch {}, {} {:.4}); checkpoint at {}",
        settings.kind.as_str(),
        outcome.report.stopping_epoch,
        outcome.report.best_epoch,
        if outcome.report.has_holdout {
            "val acc"
        } else {
            "train acc"
        },
        best.val_acc,
        args.out.join("model.ckpt").display()
    );
    Ok(())
}

fn load_for_inference(
    checkpoint: &Path,
    corpus: &Path,
) -> Result<(Checkpoint, Vec<Review>, Vec<PaddedReview>)> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let reviews = parse_corpus(corpus)?;
    let padded = prepare_reviews(
        &reviews,
        ckpt.tokenizer,
        &ckpt.vocab,
        &ckpt.aspects,
        ckpt.sentence_len,
        ckpt.review_len,
    );
    Ok((ckpt, reviews, padded))
}

fn format_metrics(report: &EvalReport) -> String {
    let classes = ["positive", "negative", "neutral"];
    let mut out = String::new();
    let _ = writeln!(out, "accuracy\t{:.6}", report.accuracy);
    let _ = writeln!(out, "instances\t{}", report.n_instances);
    let gold = report.gold_counts();
    for (g, name) in classes.iter().enumerate() {
        let _ = writeln!(out, "gold_count\t{}\t{}", name, gold[g]);
    }
    let _ = writeln!(out, "confusion\tgold\\pred\t{}", classes.join("\t"));
    for (g, name) in classes.iter().enumerate() {
        let row: Vec<String> = (0..NUM_CLASSES)
            .map(|p| report.confusion[g][p].to_string())
            .collect();
        let _ = writeln!(out, "confusion\t{}\t{}", name, row.join("\t"));
    }
    out
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let (ckpt, _, padded) = load_for_inference(&args.checkpoint, &args.corpus)?;
    if padded.is_empty() {
        return Err(Error::Validation(
            "evaluation corpus has no reviews with aspect annotations".into(),
        ));
    }
    let report = evaluate(&ckpt.model, &padded)?;
    let text = format_metrics(&report);
    print!("{}", text);
    if let Some(out) = args.out {
        fs::create_dir_all(&out)?;
        fs::write(out.join("metrics.txt"), text)?;
    }
    Ok(())
}

fn cmd_predict(args: PredictArgs) -> Result<()> {
    let (ckpt, _, padded) = load_for_inference(&args.checkpoint, &args.corpus)?;
    let mut lines = String::new();
    for review in &padded {
        let labels = predict(&ckpt.model, review)?;
        for (slot, label) in labels.iter().enumerate() {
            let (Some(meta), Some(polarity)) = (&review.meta[slot], label) else {
                continue;
            };
            let _ = writeln!(
                lines,
                "{}\t{}\t{}\t{}",
                review.review_id, meta.sentence_id, meta.aspect, polarity
            );
        }
    }
    print!("{}", lines);
    if let Some(out) = args.out {
        fs::create_dir_all(&out)?;
        fs::write(out.join("predictions.tsv"), lines)?;
    }
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let spec = SyntheticSpec {
        train_reviews: args.reviews,
        test_reviews: args.test_reviews,
        ambiguity_rate: args.ambiguity,
        seed: args.seed,
        ..SyntheticSpec::default()
    };
    let (train, test) = generate_synthetic(&spec)?;
    fs::create_dir_all(&args.out)?;
    write_corpus(&args.out.join("train.xml"), &train)?;
    write_corpus(&args.out.join("test.xml"), &test)?;
    println!(
        "wrote {} train and {} test reviews (ambiguity {}, seed {}) to {}",
        train.len(),
        test.len(),
        args.ambiguity,
        args.seed,
        args.out.display()
    );
    Ok(())
}

fn cmd_compare(args: CompareArgs) -> Result<()> {
    let settings = resolve_settings(&args.tune)?;
    if args.tune.model.is_some() {
        log::warn!("compare trains both architectures; --model is ignored");
    }
    let test_path = args.test.clone().unwrap_or_else(|| {
        log::warn!("no --test corpus; evaluating both models on the training corpus");
        args.corpus.clone()
    });
    fs::create_dir_all(&args.out)?;

    let mut rows = Vec::new();
    for kind in [ModelKind::Hierarchical, ModelKind::Baseline] {
        let (outcome, _) = train_once(&args.corpus, args.embeddings.as_deref(), &settings, kind)?;
        let ckpt = &outcome.checkpoint;
        let test_reviews = parse_corpus(&test_path)?;
        let padded = prepare_reviews(
            &test_reviews,
            ckpt.tokenizer,
            &ckpt.vocab,
            &ckpt.aspects,
            ckpt.sentence_len,
            ckpt.review_len,
        );
        let eval = evaluate(&ckpt.model, &padded)?;
        let dir = args.out.join(kind.as_str());
        fs::create_dir_all(&dir)?;
        ckpt.save(&dir.join("model.ckpt"))?;
        fs::write(dir.join("train_report.txt"), outcome.report.to_lines())?;
        rows.push((kind, eval.accuracy, outcome.report.best_epoch));
    }

    let mut table = String::new();
    let _ = writeln!(table, "model\taccuracy\tbest_epoch\tseed");
    for (kind, acc, best) in &rows {
        let _ = writeln!(
            table,
            "{}\t{:.6}\t{}\t{}",
            kind.as_str(),
            acc,
            best,
            settings.config.seed
        );
    }
    let gap = rows[0].1 - rows[1].1;
    let _ = writeln!(table, "gap\t{:.6}", gap);
    print!("{}", table);
    fs::write(args.out.join("compare.txt"), table)?;
    Ok(())
}
