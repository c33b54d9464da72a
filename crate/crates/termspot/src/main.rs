//! Command-line driver: corpus generation, training, evaluation, threshold
//! tuning, gradient checking, and the dissimilarity comparison harness.
//!
//! Every run resolves its configuration (TOML file plus `--set` overrides),
//! derives all randomness from one root seed, and writes a manifest next to
//! its outputs. Exit codes: 0 success, 1 validation/config error, 2 runtime
//! failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use termspot::corpus::{self, Corpus, CorpusConfig};
use termspot::detect::{self, TuneObjective};
use termspot::embedding::{build_embedding_table, EmbeddingTable, HashEmbedder};
use termspot::error::Error;
use termspot::grid::CellGrid;
use termspot::loss::DissimVariant;
use termspot::metrics::{self, ReportRow, Trial, TwvConfig};
use termspot::net::{self, ConvBlockConfig, EncoderPooling, ModelParameters, NetConfig, NormMode};
use termspot::trainer::{self, TrainConfig};
use termspot::{gradcheck, Result};

#[derive(Parser)]
#[command(name = "termspot", version, about = "Grid-cell spoken term detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. --set train.epochs=5
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Root seed for every random stream of this run.
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus into a directory.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train a model on a generated corpus.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "multi_word")]
        preset: String,
        /// Use the published embedding size (1024) instead of the desk-scale 64.
        #[arg(long)]
        paper_scale: bool,
        /// Start from this checkpoint's encoder with a freshly initialized head.
        #[arg(long)]
        init_from: Option<PathBuf>,
        /// Continue training from this checkpoint, keeping epoch numbering.
        #[arg(long)]
        resume_from: Option<PathBuf>,
        #[arg(long)]
        dissim: Option<DissimVariant>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Evaluate a checkpoint: AP, MTWV and mean IOU for IV/OOV subsets.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Dissimilarity label recorded in the report rows.
        #[arg(long, default_value = "cos_squared")]
        dissim: DissimVariant,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Tune the detection threshold on the validation split.
    Tune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "f1")]
        objective: String,
        #[arg(long, default_value_t = 1.0)]
        beta: f64,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Verify analytic gradients against central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 2024)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        instances: usize,
        /// Test fixture: deliberately corrupt one gradient to prove the
        /// harness catches it.
        #[arg(long, hide = true)]
        inject_bug: Option<String>,
    },
    /// Train and evaluate one model per dissimilarity variant from
    /// identical seeds and emit a comparison table.
    CompareDissim {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "multi_word")]
        preset: String,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Print a previously written report directory.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct AppConfig {
    corpus: CorpusConfig,
    net: NetSection,
    train: TrainSection,
    eval: EvalSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct NetSection {
    channels: Vec<usize>,
    kernel: usize,
    pool: usize,
    encoder_dim: usize,
    normalize: bool,
    pooling: String,
}

impl Default for NetSection {
    fn default() -> Self {
        Self {
            channels: vec![16, 32, 32, 64],
            kernel: 3,
            pool: 2,
            encoder_dim: 32,
            normalize: true,
            pooling: "flatten".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainSection {
    epochs: usize,
    batch_size: usize,
    learning_rate: f64,
    grad_clip: Option<f64>,
    early_stop_patience: Option<usize>,
    negative_ratio: f64,
    duration_weight: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-3,
            grad_clip: None,
            early_stop_patience: None,
            negative_ratio: 1.0,
            duration_weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvalSection {
    negative_ratio: f64,
    beta: f64,
    objective: String,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            negative_ratio: 1.0,
            beta: 1.0,
            objective: "f1".into(),
        }
    }
}

fn load_config(args: &ConfigArgs) -> Result<AppConfig> {
    let mut table: toml::Table = match &args.config {
        Some(path) => std::fs::read_to_string(path)?
            .parse()
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?,
        None => toml::Table::new(),
    };
    for set in &args.sets {
        let (key, raw) = set
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("--set expects KEY=VALUE, got {set:?}")))?;
        apply_override(&mut table, key.trim(), raw.trim())?;
    }
    let text = toml::to_string(&table)
        .map_err(|e| Error::InvalidConfig(format!("config serialization: {e}")))?;
    toml::from_str(&text).map_err(|e| Error::InvalidConfig(format!("config: {e}")))
}

fn apply_override(table: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let value = parse_toml_value(raw)?;
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::InvalidConfig(format!("bad --set key {key:?}")));
    }
    let mut current = table;
    for part in &parts[..parts.len() - 1] {
        current = current
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::InvalidConfig(format!("{part} is not a config section")))?;
    }
    current.insert(parts.last().unwrap().to_string(), value);
    Ok(())
}

fn parse_toml_value(raw: &str) -> Result<toml::Value> {
    let attempt = format!("v = {raw}").parse::<toml::Table>();
    let table = match attempt {
        Ok(t) => t,
        Err(_) => format!("v = {raw:?}")
            .parse::<toml::Table>()
            .map_err(|e| Error::InvalidConfig(format!("cannot parse value {raw:?}: {e}")))?,
    };
    Ok(table["v"].clone())
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    artifact_version: &'a str,
    seed: u64,
    config: serde_json::Value,
    inputs: Vec<String>,
    outputs: Vec<String>,
    timestamp_unix_ms: u128,
}

fn write_manifest(
    out_dir: &Path,
    command: &str,
    seed: u64,
    config: &AppConfig,
    inputs: &[&Path],
    outputs: &[&str],
) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let manifest = RunManifest {
        command,
        artifact_version: env!("CARGO_PKG_VERSION"),
        seed,
        config: serde_json::to_value(config)?,
        inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
        timestamp_unix_ms: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_millis())
            .unwrap_or(0),
    };
    serde_json::to_writer_pretty(
        std::io::BufWriter::new(std::fs::File::create(out_dir.join("manifest.json"))?),
        &manifest,
    )?;
    Ok(())
}

fn build_net_config(
    section: &NetSection,
    corpus_cfg: &CorpusConfig,
    embedding_dim: usize,
    num_cells: usize,
    seed: u64,
) -> Result<NetConfig> {
    let pooling = match section.pooling.as_str() {
        "flatten" => EncoderPooling::Flatten,
        "global_average" => EncoderPooling::GlobalAverage,
        other => {
            return Err(Error::InvalidConfig(format!(
                "net.pooling {other:?}; expected flatten or global_average"
            )))
        }
    };
    let cfg = NetConfig {
        input_frames: corpus_cfg.frames,
        input_dim: corpus_cfg.feature_dim,
        conv_blocks: section
            .channels
            .iter()
            .map(|&out_channels| ConvBlockConfig {
                out_channels,
                kernel: section.kernel,
                stride: 1,
                pool: section.pool,
            })
            .collect(),
        encoder_dim: section.encoder_dim,
        embedding_dim,
        num_cells,
        normalize_activations: section.normalize,
        pooling,
        seed,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn embedding_table_for(corpus: &Corpus, dim: usize) -> Result<EmbeddingTable> {
    let seed = corpus::derive_seed(corpus.config.seed, "embedding");
    let embedder = HashEmbedder::new(corpus.inventory.clone(), dim, seed)?;
    build_embedding_table(&corpus.lexicon, &embedder)
}

fn cmd_gen(out: &Path, args: &ConfigArgs) -> Result<()> {
    let mut config = load_config(args)?;
    config.corpus.seed = args.seed;
    let corpus = corpus::generate(&config.corpus)?;
    corpus::save_corpus(out, &corpus)?;
    write_manifest(
        out,
        "gen",
        args.seed,
        &config,
        &[],
        &[
            "corpus_meta.json",
            "lexicon.jsonl",
            "term_splits.json",
            "train.jsonl",
            "validation.jsonl",
            "test.jsonl",
        ],
    )?;
    println!(
        "wrote corpus: {} train / {} validation / {} test utterances, {} terms ({} IV, {} OOV)",
        corpus.train.len(),
        corpus.validation.len(),
        corpus.test.len(),
        corpus.lexicon.len(),
        corpus.iv_terms.len(),
        corpus.oov_terms.len()
    );
    Ok(())
}

struct TrainedRun {
    outcome: trainer::TrainOutcome,
}

#[allow(clippy::too_many_arguments)]
fn run_training(
    corpus: &Corpus,
    config: &AppConfig,
    preset_name: &str,
    paper_scale: bool,
    dissim: Option<DissimVariant>,
    seed: u64,
    init_from: Option<&Path>,
    resume_from: Option<&Path>,
    start_epoch: usize,
    quiet: bool,
) -> Result<TrainedRun> {
    let preset = trainer::preset(preset_name, paper_scale)?;
    let grid = CellGrid::new(corpus.config.frames as u32, preset.num_cells as u32)?;
    let table = embedding_table_for(corpus, preset.embedding_dim)?;
    let seeds = trainer::run_seeds(seed);

    let examples = corpus::make_training_examples(
        &corpus.train,
        &grid,
        &table,
        &corpus.iv_terms,
        config.train.negative_ratio,
        seeds.examples,
    )?;

    let mut all_terms = corpus.iv_terms.clone();
    all_terms.extend(corpus.oov_terms.iter().cloned());
    let (val_trials, skipped) = corpus::make_trials(
        &corpus.validation,
        &all_terms,
        config.eval.negative_ratio,
        seeds.trials,
    );
    if !skipped.is_empty() && !quiet {
        eprintln!("note: {} terms have no validation occurrences", skipped.len());
    }
    let validation = trainer::ValidationSpec {
        utterances: &corpus.validation,
        trials: val_trials,
        embeddings: &table,
    };

    let params = match (init_from, resume_from) {
        (Some(path), None) => {
            let pretrained = net::load_checkpoint(path)?;
            let replaced = pretrained.replace_head(
                preset.num_cells,
                preset.embedding_dim,
                corpus::derive_seed(seed, "head-init"),
            )?;
            if replaced.config.input_frames != corpus.config.frames
                || replaced.config.input_dim != corpus.config.feature_dim
            {
                return Err(Error::ShapeMismatch(
                    "pretrained encoder input shape does not match the corpus".into(),
                ));
            }
            replaced
        }
        (None, Some(path)) => net::load_checkpoint(path)?,
        (None, None) => {
            let net_cfg = build_net_config(
                &config.net,
                &corpus.config,
                preset.embedding_dim,
                preset.num_cells,
                seeds.net_init,
            )?;
            ModelParameters::init(net_cfg)?
        }
        (Some(_), Some(_)) => {
            return Err(Error::InvalidConfig(
                "--init-from and --resume-from are mutually exclusive".into(),
            ))
        }
    };

    let mut weights = preset.weights.with_duration(config.train.duration_weight);
    if let Some(v) = dissim {
        weights = weights.with_dissim(v);
    }
    let mut train_cfg = TrainConfig::new(weights, config.train.epochs, seeds.shuffle);
    train_cfg.learning_rate = config.train.learning_rate;
    train_cfg.batch_size = config.train.batch_size;
    train_cfg.grad_clip = config.train.grad_clip;
    train_cfg.early_stop_patience = config.train.early_stop_patience;
    train_cfg.start_epoch = start_epoch;

    let mut print_epoch = |s: &trainer::EpochStats| {
        if !quiet {
            let ap = s
                .validation_ap
                .map(|v| format!("{v:.4}"))
                .unwrap_or_else(|| "-".into());
            println!(
                "epoch {:>3}  loss {:.4} (l1 {:.4} l2 {:.4} l3 {:.4})  val-ap {}  {} ms",
                s.epoch, s.mean_total, s.mean_l1, s.mean_l2, s.mean_l3, ap, s.wall_ms
            );
        }
    };
    let outcome = trainer::train_with_progress(
        params,
        &corpus.train,
        &examples,
        Some(&validation),
        &train_cfg,
        &mut print_epoch,
    )?;
    Ok(TrainedRun { outcome })
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    corpus_dir: &Path,
    out: &Path,
    preset_name: &str,
    paper_scale: bool,
    dissim: Option<DissimVariant>,
    init_from: Option<&Path>,
    resume_from: Option<&Path>,
    args: &ConfigArgs,
) -> Result<()> {
    let config = load_config(args)?;
    let corpus = corpus::load_corpus(corpus_dir)?;
    std::fs::create_dir_all(out)?;

    let history_path = out.join("history.csv");
    let mut start_epoch = 0;
    let mut prior_history = trainer::TrainHistory::default();
    if resume_from.is_some() && history_path.exists() {
        prior_history = trainer::read_history_csv(&history_path)?;
        start_epoch = prior_history
            .epochs
            .last()
            .map(|e| e.epoch + 1)
            .unwrap_or(0);
    }

    let run = run_training(
        &corpus,
        &config,
        preset_name,
        paper_scale,
        dissim,
        args.seed,
        init_from,
        resume_from,
        start_epoch,
        false,
    )?;

    let mut history = prior_history;
    history.epochs.extend(run.outcome.history.epochs.clone());
    trainer::write_history_csv(&history_path, &history)?;
    net::save_checkpoint(&out.join("checkpoint_final.json"), &run.outcome.params)?;
    if let Some(best) = &run.outcome.best {
        net::save_checkpoint(&out.join("checkpoint_best.json"), &best.params)?;
        println!(
            "best validation AP {:.4} at epoch {}",
            best.validation_ap, best.epoch
        );
    }
    write_manifest(
        out,
        "train",
        args.seed,
        &config,
        &[corpus_dir],
        &["history.csv", "checkpoint_final.json", "checkpoint_best.json"],
    )?;
    if let Some(epoch) = run.outcome.aborted_nonfinite {
        return Err(Error::NonFiniteLoss { epoch });
    }
    Ok(())
}

struct EvalResult {
    rows: Vec<ReportRow>,
    threshold: detect::Threshold,
}

fn run_eval(
    params: &ModelParameters,
    corpus: &Corpus,
    dissim_label: &str,
    eval_cfg: &EvalSection,
    seed: u64,
    out: Option<&Path>,
) -> Result<EvalResult> {
    let table = embedding_table_for(corpus, params.config.embedding_dim)?;
    let seeds = trainer::run_seeds(seed);

    let mut all_terms = corpus.iv_terms.clone();
    all_terms.extend(corpus.oov_terms.iter().cloned());

    // tune the decision threshold on the validation split
    let (mut val_trials, _) = corpus::make_trials(
        &corpus.validation,
        &all_terms,
        eval_cfg.negative_ratio,
        seeds.trials,
    );
    let val_features = corpus::features_by_id(&corpus.validation);
    let val_events = corpus::events_index(&corpus.validation);
    detect::score_trials(
        params,
        &val_features,
        &table,
        &val_events,
        &mut val_trials,
        NormMode::Batch,
    )?;
    let scored: Vec<(f64, bool)> = val_trials.iter().map(|t| (t.score, t.label)).collect();
    let objective = match eval_cfg.objective.as_str() {
        "f1" => TuneObjective::F1,
        "twv" => TuneObjective::Twv {
            beta: eval_cfg.beta,
        },
        other => {
            return Err(Error::InvalidConfig(format!(
                "eval.objective {other:?}; expected f1 or twv"
            )))
        }
    };
    let threshold = detect::tune_threshold(&scored, objective, "validation")?;

    // score the test split per subset
    let test_features = corpus::features_by_id(&corpus.test);
    let test_events = corpus::events_index(&corpus.test);
    let score = |terms: &[String], tag: &str| -> Result<Vec<Trial>> {
        let (mut trials, skipped) = corpus::make_trials(
            &corpus.test,
            terms,
            eval_cfg.negative_ratio,
            corpus::derive_seed(seeds.trials, tag),
        );
        if !skipped.is_empty() {
            eprintln!(
                "note: {} {tag} terms have no test occurrences and were skipped",
                skipped.len()
            );
        }
        detect::score_trials(
            params,
            &test_features,
            &table,
            &test_events,
            &mut trials,
            NormMode::Batch,
        )?;
        Ok(trials)
    };
    let iv_trials = score(&corpus.iv_terms, "iv")?;
    let oov_trials = score(&corpus.oov_terms, "oov")?;
    let mut all_trials = iv_trials.clone();
    all_trials.extend(oov_trials.iter().cloned());

    let twv_cfg = TwvConfig {
        beta: eval_cfg.beta,
        thresholds: None,
    };
    let mut rows = Vec::new();
    rows.push(ReportRow::new("phi", "all", dissim_label, threshold.value));
    for (subset, trials) in [
        ("iv", &iv_trials),
        ("oov", &oov_trials),
        ("all", &all_trials),
    ] {
        if trials.is_empty() {
            eprintln!("warning: no {subset} trials; subset omitted from the report");
            continue;
        }
        rows.push(ReportRow::new(
            "ap",
            subset,
            dissim_label,
            metrics::average_precision(trials)?,
        ));
        let (_, mtwv) = metrics::mtwv(trials, &twv_cfg)?;
        rows.push(ReportRow::new("mtwv", subset, dissim_label, mtwv));
        match metrics::mean_iou_correct(trials, threshold.value) {
            Ok(v) => rows.push(ReportRow::new("iou", subset, dissim_label, v)),
            Err(e) => eprintln!("warning: mean IOU unavailable for {subset}: {e}"),
        }
    }

    if let Some(out) = out {
        std::fs::create_dir_all(out)?;
        metrics::write_report(&out.join("report.csv"), &out.join("report.json"), &rows)?;
        serde_json::to_writer_pretty(
            std::io::BufWriter::new(std::fs::File::create(out.join("threshold.json"))?),
            &threshold,
        )?;
        let sweep = metrics::det_sweep(&all_trials, &twv_cfg)?;
        metrics::write_det_sweep(&out.join("det_sweep.csv"), &sweep)?;
        let grid = CellGrid::new(
            params.config.input_frames as u32,
            params.config.num_cells as u32,
        )?;
        detect::write_detections(
            &out.join("detections.jsonl"),
            &all_trials,
            threshold.value,
            &grid,
        )?;
    }
    Ok(EvalResult { rows, threshold })
}

fn cmd_eval(
    checkpoint: &Path,
    corpus_dir: &Path,
    out: &Path,
    dissim: DissimVariant,
    args: &ConfigArgs,
) -> Result<()> {
    let config = load_config(args)?;
    let corpus = corpus::load_corpus(corpus_dir)?;
    let params = net::load_checkpoint(checkpoint)?;
    let result = run_eval(
        &params,
        &corpus,
        dissim.name(),
        &config.eval,
        args.seed,
        Some(out),
    )?;
    write_manifest(
        out,
        "eval",
        args.seed,
        &config,
        &[checkpoint, corpus_dir],
        &["report.csv", "report.json", "threshold.json", "det_sweep.csv", "detections.jsonl"],
    )?;
    print_rows(&result.rows);
    println!(
        "phi = {} ({} objective {:.4} on {})",
        result.threshold.value,
        match result.threshold.objective {
            TuneObjective::F1 => "F1".to_string(),
            TuneObjective::Twv { beta } => format!("TWV(beta={beta})"),
        },
        result.threshold.objective_value,
        result.threshold.tuning_set
    );
    Ok(())
}

fn cmd_tune(
    checkpoint: &Path,
    corpus_dir: &Path,
    out: &Path,
    objective: &str,
    beta: f64,
    args: &ConfigArgs,
) -> Result<()> {
    let mut config = load_config(args)?;
    config.eval.objective = objective.to_string();
    config.eval.beta = beta;
    let corpus = corpus::load_corpus(corpus_dir)?;
    let params = net::load_checkpoint(checkpoint)?;
    // reuse the eval pipeline's tuning stage only
    let table = embedding_table_for(&corpus, params.config.embedding_dim)?;
    let seeds = trainer::run_seeds(args.seed);
    let mut all_terms = corpus.iv_terms.clone();
    all_terms.extend(corpus.oov_terms.iter().cloned());
    let (mut trials, _) = corpus::make_trials(
        &corpus.validation,
        &all_terms,
        config.eval.negative_ratio,
        seeds.trials,
    );
    detect::score_trials(
        &params,
        &corpus::features_by_id(&corpus.validation),
        &table,
        &corpus::events_index(&corpus.validation),
        &mut trials,
        NormMode::Batch,
    )?;
    let scored: Vec<(f64, bool)> = trials.iter().map(|t| (t.score, t.label)).collect();
    let obj = match objective {
        "f1" => TuneObjective::F1,
        "twv" => TuneObjective::Twv { beta },
        other => {
            return Err(Error::InvalidConfig(format!(
                "objective {other:?}; expected f1 or twv"
            )))
        }
    };
    let threshold = detect::tune_threshold(&scored, obj, "validation")?;
    std::fs::create_dir_all(out)?;
    serde_json::to_writer_pretty(
        std::io::BufWriter::new(std::fs::File::create(out.join("threshold.json"))?),
        &threshold,
    )?;
    write_manifest(
        out,
        "tune",
        args.seed,
        &config,
        &[checkpoint, corpus_dir],
        &["threshold.json"],
    )?;
    println!(
        "phi = {} (objective value {:.4})",
        threshold.value, threshold.objective_value
    );
    Ok(())
}

fn cmd_gradcheck(seed: u64, instances: usize, inject_bug: Option<&str>) -> Result<bool> {
    let cfg = gradcheck::GradCheckConfig {
        instances,
        seed,
        ..Default::default()
    };
    let mut reports = Vec::new();
    match inject_bug {
        None => {
            reports = gradcheck::run_full_suite(&cfg)?;
        }
        Some("l3-sign") => {
            let broken: Box<gradcheck::LossGradFn> = Box::new(|p, t, w| {
                let mut g = termspot::loss::loss_gradient(p, t, w)?;
                for c in &mut g.cells {
                    c.d_duration = -c.d_duration;
                }
                Ok(g)
            });
            reports.push(gradcheck::check_loss_gradients(
                &cfg,
                gradcheck::LossComponent::L3,
                &*broken,
            )?);
        }
        Some(other) => {
            return Err(Error::InvalidConfig(format!(
                "unknown bug fixture {other:?}; available: l3-sign"
            )))
        }
    }
    println!("{:<20} {:>9} {:>8} {:>10} {:>12}  result", "component", "instances", "skipped", "values", "max rel err");
    let mut all_passed = true;
    for r in &reports {
        println!(
            "{:<20} {:>9} {:>8} {:>10} {:>12.3e}  {}",
            r.label,
            r.instances,
            r.skipped,
            r.checked_values,
            r.max_rel_err,
            if r.passed() { "pass" } else { "FAIL" }
        );
        if !r.passed() {
            all_passed = false;
            if let Some(w) = &r.worst {
                println!("  worst: {w}");
            }
        }
    }
    Ok(all_passed)
}

fn cmd_compare_dissim(
    corpus_dir: &Path,
    out: &Path,
    preset_name: &str,
    args: &ConfigArgs,
) -> Result<()> {
    let config = load_config(args)?;
    let corpus = corpus::load_corpus(corpus_dir)?;
    std::fs::create_dir_all(out)?;

    let mut table_rows: Vec<(String, BTreeMap<String, f64>)> = Vec::new();
    for variant in DissimVariant::ALL {
        println!("== training with dissim {variant} ==");
        let run = run_training(
            &corpus,
            &config,
            preset_name,
            false,
            Some(variant),
            args.seed,
            None,
            None,
            0,
            false,
        )?;
        if let Some(epoch) = run.outcome.aborted_nonfinite {
            return Err(Error::NonFiniteLoss { epoch });
        }
        let params = run
            .outcome
            .best
            .as_ref()
            .map(|b| &b.params)
            .unwrap_or(&run.outcome.params);
        let variant_dir = out.join(variant.name());
        let result = run_eval(
            params,
            &corpus,
            variant.name(),
            &config.eval,
            args.seed,
            Some(&variant_dir),
        )?;
        let mut metrics_map = BTreeMap::new();
        for row in &result.rows {
            metrics_map.insert(format!("{}_{}", row.subset, row.metric), row.value);
        }
        table_rows.push((variant.name().to_string(), metrics_map));
    }

    let mut csv = String::from("dissim_variant,iv_ap,iv_iou,oov_ap,oov_iou\n");
    for (name, m) in &table_rows {
        let get = |k: &str| m.get(k).copied().unwrap_or(f64::NAN);
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            name,
            get("iv_ap"),
            get("iv_iou"),
            get("oov_ap"),
            get("oov_iou")
        ));
    }
    std::fs::write(out.join("comparison.csv"), &csv)?;
    let json_rows: Vec<serde_json::Value> = table_rows
        .iter()
        .map(|(name, m)| {
            serde_json::json!({
                "dissim_variant": name,
                "iv_ap": m.get("iv_ap"),
                "iv_iou": m.get("iv_iou"),
                "oov_ap": m.get("oov_ap"),
                "oov_iou": m.get("oov_iou"),
            })
        })
        .collect();
    serde_json::to_writer_pretty(
        std::io::BufWriter::new(std::fs::File::create(out.join("comparison.json"))?),
        &json_rows,
    )?;
    write_manifest(
        out,
        "compare-dissim",
        args.seed,
        &config,
        &[corpus_dir],
        &["comparison.csv", "comparison.json"],
    )?;
    print!("{csv}");

    // the published ordering on IV AP is cos^2 >= abs_cos >= shifted_cos;
    // log if this run disagrees (informational, not asserted)
    let ap = |name: &str| {
        table_rows
            .iter()
            .find(|(n, _)| n == name)
            .and_then(|(_, m)| m.get("iv_ap").copied())
            .unwrap_or(f64::NAN)
    };
    let (sq, ab, sh) = (ap("cos_squared"), ap("abs_cos"), ap("shifted_cos"));
    if !(sq >= ab && ab >= sh) {
        println!(
            "note: observed IV AP ordering (cos_squared {sq:.3}, abs_cos {ab:.3}, shifted_cos {sh:.3}) differs from the published ordering"
        );
    }
    Ok(())
}

fn cmd_report(dir: &Path) -> Result<()> {
    let report = dir.join("report.json");
    let comparison = dir.join("comparison.csv");
    if report.exists() {
        let rows: Vec<ReportRow> =
            serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(&report)?))?;
        print_rows(&rows);
        Ok(())
    } else if comparison.exists() {
        print!("{}", std::fs::read_to_string(&comparison)?);
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!(
            "no report.json or comparison.csv under {}",
            dir.display()
        )))
    }
}

fn print_rows(rows: &[ReportRow]) {
    println!("{:<8} {:<6} {:<14} {:>12}", "metric", "subset", "dissim", "value");
    for r in rows {
        println!(
            "{:<8} {:<6} {:<14} {:>12.6}",
            r.metric, r.subset, r.dissim_variant, r.value
        );
    }
}

/// 1 for configuration/validation problems, 2 for runtime failures.
fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::InvalidConfig(_)
        | Error::InvalidGrid { .. }
        | Error::InvalidInventory
        | Error::InvalidLossWeights
        | Error::UnknownPreset(_)
        | Error::EmbeddingDimTooSmall(_)
        | Error::ShapeMismatch(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Gen { out, config } => cmd_gen(out, config),
        Command::Train {
            corpus,
            out,
            preset,
            paper_scale,
            init_from,
            resume_from,
            dissim,
            config,
        } => cmd_train(
            corpus,
            out,
            preset,
            *paper_scale,
            *dissim,
            init_from.as_deref(),
            resume_from.as_deref(),
            config,
        ),
        Command::Eval {
            checkpoint,
            corpus,
            out,
            dissim,
            config,
        } => cmd_eval(checkpoint, corpus, out, *dissim, config),
        Command::Tune {
            checkpoint,
            corpus,
            out,
            objective,
            beta,
            config,
        } => cmd_tune(checkpoint, corpus, out, objective, *beta, config),
        Command::Gradcheck {
            seed,
            instances,
            inject_bug,
        } => match cmd_gradcheck(*seed, *instances, inject_bug.as_deref()) {
            Ok(true) => Ok(()),
            Ok(false) => {
                eprintln!("gradient check failed");
                return ExitCode::from(2);
            }
            Err(e) => Err(e),
        },
        Command::CompareDissim {
            corpus,
            out,
            preset,
            config,
        } => cmd_compare_dissim(corpus, out, preset, config),
        Command::Report { dir } => cmd_report(dir),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
