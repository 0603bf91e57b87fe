//! Command-line entry point: synthetic data generation, stereotype
//! auditing, mixture training, evaluation, and run comparison.
//!
//! Exit codes: 0 success, 2 input/config error, 3 numerical failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::backbone::{
    tokenize_rec_prompt, EvalSetting, FrozenScorer, PlantProfile, TokenVocabulary,
};
use crate::config;
use crate::dataset::{
    generate_synthetic, load_dataset_dir, synth_config_from_kv, write_dataset_csvs,
};
use crate::evaluation::{evaluate, EvalContext, MetricsReport};
use crate::mixture::{MixtureParams, StereotypeTemplateSet};
use crate::pipeline::{observed_fairness, prepare, PipelineConfig};
use crate::stereotype::audit_items;
use crate::training::{
    fairness_aware_init, fit, DiversityTarget, OptimizerKind, TrainConfig, TrainError,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Parser)]
#[command(name = "stereofair", version, about = "Stereotype-aware fairness toolkit")]
pub struct Cli {
    /// Base random seed; falls back to the SF_SEED environment variable,
    /// then to 0.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker thread cap (reserved; the current implementation is
    /// single-threaded).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Suppress informational logging.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset plus a planted-bias frozen scorer.
    Gen {
        /// key=value generator config
        config: PathBuf,
        out_dir: PathBuf,
    },
    /// Audit item stereotypes and report fairness of the observed
    /// positive interactions.
    Audit {
        data_dir: PathBuf,
        out_dir: PathBuf,
        /// z-score multiplier for the flag threshold
        #[arg(long, default_value_t = 2.0)]
        z: f64,
        /// items with fewer interactions are excluded from the threshold
        /// population
        #[arg(long, default_value_t = 3)]
        min_interactions: usize,
    },
    /// Train the mixture against a frozen scorer.
    Train {
        data_dir: PathBuf,
        scorer: PathBuf,
        /// key=value training config
        config: PathBuf,
        out_dir: PathBuf,
        /// "rec" disables the fairness and diversity terms; "total" keeps
        /// the full objective
        #[arg(long, default_value = "total")]
        objective: String,
    },
    /// Score the test split and write metrics.json.
    Eval {
        data_dir: PathBuf,
        scorer: PathBuf,
        out_dir: PathBuf,
        /// trained mixture checkpoint; omit for the bare-scorer baseline
        #[arg(long)]
        model: Option<PathBuf>,
        /// comma-separated subset of implicit,explicit,counterfactual
        #[arg(long, value_delimiter = ',', default_values_t = [
            "implicit".to_string(), "explicit".to_string(), "counterfactual".to_string()
        ])]
        settings: Vec<String>,
        /// optional key=value config matching the training run (sequence
        /// sampling and threshold settings)
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Combine several runs' metrics into comparison.json and plot-ready
    /// CSV files.
    Report {
        /// directories containing metrics.json (and optionally
        /// train_log.jsonl)
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Numeric(_) => EXIT_NUMERIC,
        }
    }
    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Numeric(m) => m,
        }
    }
}

fn usage<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Usage(e.to_string())
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    config: BTreeMap<String, String>,
    seed: u64,
    /// input path -> sha256 of its bytes
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
    tool_version: String,
    wall_clock_secs: f64,
}

fn file_digest(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path)
        .map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| usage(format!("serialization failed: {e}")))?;
    text.push('\n');
    std::fs::write(path, text)
        .map_err(|e| usage(format!("cannot write {}: {e}", path.display())))
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| usage(format!("cannot create {}: {e}", dir.display())))
}

fn resolve_seed(flag: Option<u64>) -> u64 {
    flag.or_else(|| {
        std::env::var("SF_SEED")
            .ok()
            .and_then(|v| v.parse().ok())
    })
    .unwrap_or(0)
}

fn write_manifest(
    out_dir: &Path,
    command: &str,
    config: BTreeMap<String, String>,
    seed: u64,
    input_paths: &[&Path],
    outputs: &[&str],
    started: Instant,
) -> Result<(), CliError> {
    let mut inputs = BTreeMap::new();
    for path in input_paths {
        inputs.insert(path.display().to_string(), file_digest(path)?);
    }
    let manifest = RunManifest {
        command: command.to_string(),
        config,
        seed,
        inputs,
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    write_json(&out_dir.join("manifest.json"), &manifest)
}

/// Scorer hyperparameters read from the generator config (with defaults).
fn scorer_settings(kv: &BTreeMap<String, String>) -> Result<(usize, usize, f64), CliError> {
    let d = config::parse_or(kv, "embed_dim", 16usize).map_err(usage)?;
    let hidden = config::parse_or(kv, "hidden_dim", 32usize).map_err(usage)?;
    let beta = config::parse_or(kv, "beta", 1.0f64).map_err(usage)?;
    Ok((d, hidden, beta))
}

fn cmd_gen(config_path: &Path, out_dir: &Path, seed: u64) -> Result<(), CliError> {
    let started = Instant::now();
    let kv = config::read_kv(config_path).map_err(usage)?;
    let synth = synth_config_from_kv(&kv).map_err(usage)?;
    let dataset = generate_synthetic(&synth, seed).map_err(usage)?;
    ensure_dir(out_dir)?;
    write_dataset_csvs(&dataset, out_dir).map_err(usage)?;

    let (d, hidden, beta) = scorer_settings(&kv)?;
    let vocab = TokenVocabulary::from_dataset(&dataset).map_err(usage)?;
    let plant = PlantProfile::from_dataset(&dataset).map_err(usage)?;
    let mut scorer = FrozenScorer::make(vocab.clone(), d, hidden, seed, beta, &plant)
        .map_err(usage)?;
    // Center the scorer's median implicit-prompt score at 0.5 over the
    // training split so decisions stay selective rather than saturating.
    let pipe_config = pipeline_config_from_kv(&kv, seed)?;
    let prepared = prepare(&dataset, &vocab, &pipe_config).map_err(usage)?;
    let center_prompts = prepared
        .split
        .train
        .iter()
        .map(|s| tokenize_rec_prompt(s, &dataset, EvalSetting::Implicit, &vocab))
        .collect::<Result<Vec<_>, _>>()
        .map_err(usage)?;
    scorer.center(center_prompts.iter(), 0.5).map_err(usage)?;
    scorer.save(&out_dir.join("scorer.bin")).map_err(usage)?;
    log::info!(
        "generated {} users, {} items, {} interactions; scorer digest {}",
        dataset.users.len(),
        dataset.items.len(),
        dataset.interactions.len(),
        scorer.weights_digest()
    );
    write_manifest(
        out_dir,
        "gen",
        kv,
        seed,
        &[config_path],
        &[
            "users.csv",
            "items.csv",
            "interactions.csv",
            "dataset.conf",
            "scorer.bin",
        ],
        started,
    )
}

fn cmd_audit(
    data_dir: &Path,
    out_dir: &Path,
    z: f64,
    min_interactions: usize,
    seed: u64,
) -> Result<(), CliError> {
    let started = Instant::now();
    let dataset = load_dataset_dir(data_dir).map_err(usage)?;
    let audit = audit_items(&dataset, z, min_interactions).map_err(usage)?;
    let flags = audit.flag_index(&dataset.group_set);
    let fairness = observed_fairness(&dataset, &flags).map_err(usage)?;
    ensure_dir(out_dir)?;
    write_json(&out_dir.join("stereotypes.json"), &audit.items)?;
    write_json(&out_dir.join("threshold.json"), &audit.threshold)?;
    write_json(&out_dir.join("fairness_report.json"), &fairness)?;
    log::info!(
        "audited {} items, threshold {:.6}, observed fairness {:.6}",
        audit.items.len(),
        audit.threshold.threshold,
        fairness.sf
    );
    let mut conf = BTreeMap::new();
    conf.insert("z".into(), z.to_string());
    conf.insert("min_interactions".into(), min_interactions.to_string());
    write_manifest(
        out_dir,
        "audit",
        conf,
        seed,
        &[
            &data_dir.join("users.csv"),
            &data_dir.join("items.csv"),
            &data_dir.join("interactions.csv"),
        ],
        &["stereotypes.json", "threshold.json", "fairness_report.json"],
        started,
    )
}

fn pipeline_config_from_kv(
    kv: &BTreeMap<String, String>,
    seed: u64,
) -> Result<PipelineConfig, CliError> {
    let defaults = PipelineConfig::default();
    Ok(PipelineConfig {
        max_sequences: config::parse_or(kv, "max_sequences", defaults.max_sequences)
            .map_err(usage)?,
        seed,
        z: config::parse_or(kv, "z", defaults.z).map_err(usage)?,
        min_interactions: config::parse_or(kv, "min_interactions", defaults.min_interactions)
            .map_err(usage)?,
        train_setting: match kv.get("train_setting") {
            Some(name) => EvalSetting::parse(name)
                .ok_or_else(|| usage(format!("bad value for train_setting: {name:?}")))?,
            None => defaults.train_setting,
        },
    })
}

fn train_config_from_kv(kv: &BTreeMap<String, String>, seed: u64) -> Result<TrainConfig, CliError> {
    let defaults = TrainConfig::default();
    let optimizer = match kv.get("optimizer") {
        Some(name) => OptimizerKind::parse(name)
            .ok_or_else(|| usage(format!("bad value for optimizer: {name:?}")))?,
        None => defaults.optimizer,
    };
    let diversity_on = match kv.get("diversity_on").map(String::as_str) {
        Some("weights") | None => DiversityTarget::Weights,
        Some("expert_outputs") => DiversityTarget::ExpertOutputs,
        Some(other) => return Err(usage(format!("bad value for diversity_on: {other:?}"))),
    };
    Ok(TrainConfig {
        epochs: config::parse_or(kv, "epochs", defaults.epochs).map_err(usage)?,
        batch_size: config::parse_or(kv, "batch_size", defaults.batch_size).map_err(usage)?,
        learning_rate: config::parse_or(kv, "learning_rate", defaults.learning_rate)
            .map_err(usage)?,
        seed,
        n: config::parse_or(kv, "n_experts", defaults.n).map_err(usage)?,
        l: config::parse_or(kv, "prompt_len", defaults.l).map_err(usage)?,
        k: config::parse_or(kv, "top_k", defaults.k).map_err(usage)?,
        lambda_fair: config::parse_or(kv, "lambda_fair", defaults.lambda_fair).map_err(usage)?,
        lambda_expert: config::parse_or(kv, "lambda_expert", defaults.lambda_expert)
            .map_err(usage)?,
        optimizer,
        diversity_on,
        static_experts: config::parse_or(kv, "static_experts", false).map_err(usage)?,
        early_stop_patience: match kv.get("patience") {
            Some(v) => Some(v.parse().map_err(|_| usage("bad value for patience"))?),
            None => None,
        },
        init_shift: config::parse_or(kv, "init_shift", defaults.init_shift).map_err(usage)?,
        init_noise: config::parse_or(kv, "init_noise", defaults.init_noise).map_err(usage)?,
    })
}

fn load_scorer(path: &Path) -> Result<FrozenScorer, CliError> {
    FrozenScorer::load(path).map_err(usage)
}

fn cmd_train(
    data_dir: &Path,
    scorer_path: &Path,
    config_path: &Path,
    out_dir: &Path,
    objective: &str,
    seed: u64,
) -> Result<(), CliError> {
    let started = Instant::now();
    let dataset = load_dataset_dir(data_dir).map_err(usage)?;
    let scorer = load_scorer(scorer_path)?;
    let kv = config::read_kv(config_path).map_err(usage)?;
    let mut train_config = train_config_from_kv(&kv, seed)?;
    match objective {
        "total" => {}
        "rec" => {
            train_config.lambda_fair = 0.0;
            train_config.lambda_expert = 0.0;
        }
        other => return Err(usage(format!("bad value for --objective: {other:?}"))),
    }
    let vocab = TokenVocabulary::from_dataset(&dataset).map_err(usage)?;
    if vocab != scorer.vocab {
        return Err(usage(
            "scorer vocabulary does not match the dataset".to_string(),
        ));
    }
    let pipe_config = pipeline_config_from_kv(&kv, seed)?;
    let prepared = prepare(&dataset, &vocab, &pipe_config).map_err(usage)?;
    let templates = StereotypeTemplateSet::default_for(&vocab);
    // Both objectives share the same deterministic warm start so a
    // rec-only run is directly comparable to a full-objective run.
    let init = fairness_aware_init(&train_config, &scorer, &prepared.train_examples)
        .map_err(usage)?;

    let digest_before = scorer.weights_digest();
    let (params, logs) = fit(
        &train_config,
        &scorer,
        &templates,
        &prepared.train_examples,
        &prepared.val_examples,
        init,
    )
    .map_err(|e| match e {
        TrainError::NanLoss { .. } => CliError::Numeric(e.to_string()),
        other => usage(other),
    })?;
    assert_eq!(scorer.weights_digest(), digest_before);

    ensure_dir(out_dir)?;
    params.save(&out_dir.join("mos.bin")).map_err(usage)?;
    let mut log_text = String::new();
    for entry in &logs {
        log_text.push_str(
            &serde_json::to_string(entry).map_err(|e| usage(format!("log serialization: {e}")))?,
        );
        log_text.push('\n');
    }
    std::fs::write(out_dir.join("train_log.jsonl"), log_text)
        .map_err(|e| usage(format!("cannot write train_log.jsonl: {e}")))?;
    if let Some(last) = logs.last() {
        log::info!(
            "trained {} epochs; final l_total {:.6}, val_auc {:?}",
            logs.len(),
            last.l_total,
            last.val_auc
        );
    }
    let mut conf = kv;
    conf.insert("objective".into(), objective.to_string());
    write_manifest(
        out_dir,
        "train",
        conf,
        seed,
        &[config_path, scorer_path],
        &["mos.bin", "train_log.jsonl"],
        started,
    )
}

fn parse_settings(names: &[String]) -> Result<Vec<EvalSetting>, CliError> {
    names
        .iter()
        .map(|name| {
            EvalSetting::parse(name)
                .ok_or_else(|| usage(format!("unknown setting {name:?}")))
        })
        .collect()
}

fn cmd_eval(
    data_dir: &Path,
    scorer_path: &Path,
    model_path: Option<&Path>,
    settings: &[String],
    config_path: Option<&Path>,
    out_dir: &Path,
    seed: u64,
) -> Result<(), CliError> {
    let started = Instant::now();
    let dataset = load_dataset_dir(data_dir).map_err(usage)?;
    let scorer = load_scorer(scorer_path)?;
    let settings = parse_settings(settings)?;
    let kv = match config_path {
        Some(p) => config::read_kv(p).map_err(usage)?,
        None => BTreeMap::new(),
    };
    let pipe_config = pipeline_config_from_kv(&kv, seed)?;
    let vocab = TokenVocabulary::from_dataset(&dataset).map_err(usage)?;
    let prepared = prepare(&dataset, &vocab, &pipe_config).map_err(usage)?;
    let templates = StereotypeTemplateSet::default_for(&vocab);
    let params = match model_path {
        Some(p) => Some(MixtureParams::load(p).map_err(usage)?),
        None => None,
    };
    let ctx = EvalContext {
        dataset: &dataset,
        flags: &prepared.flags,
        templates: &templates,
        decision_threshold: 0.5,
    };
    let report = evaluate(
        params.as_ref(),
        &scorer,
        &prepared.split.test,
        &settings,
        &ctx,
    )
    .map_err(usage)?;
    ensure_dir(out_dir)?;
    write_json(&out_dir.join("metrics.json"), &report)?;
    log::info!(
        "evaluated {} test sequences; auc {:?}",
        report.n_test,
        report.auc
    );
    let mut inputs: Vec<&Path> = vec![scorer_path];
    if let Some(p) = model_path {
        inputs.push(p);
    }
    write_manifest(
        out_dir,
        "eval",
        kv,
        seed,
        &inputs,
        &["metrics.json"],
        started,
    )
}

fn cmd_report(runs: &[PathBuf], out_dir: &Path, seed: u64) -> Result<(), CliError> {
    let started = Instant::now();
    let mut comparison: BTreeMap<String, MetricsReport> = BTreeMap::new();
    let mut curves = String::from("run,epoch,l_rec,l_fair,l_expert,l_total,val_auc,val_sf\n");
    let mut sf_rows = String::from("run,setting,sf\n");
    for run in runs {
        let label = run
            .file_name()
            .map(|s| s.to_string_lossy().to_string())
            .unwrap_or_else(|| run.display().to_string());
        let metrics_path = run.join("metrics.json");
        let text = std::fs::read_to_string(&metrics_path)
            .map_err(|e| usage(format!("cannot read {}: {e}", metrics_path.display())))?;
        let report: MetricsReport = serde_json::from_str(&text)
            .map_err(|e| usage(format!("bad metrics.json in {}: {e}", run.display())))?;
        for (setting, value) in &report.sf {
            let cell = value.map_or(String::new(), |v| format!("{v}"));
            sf_rows.push_str(&format!("{label},{setting},{cell}\n"));
        }
        comparison.insert(label.clone(), report);

        let log_path = run.join("train_log.jsonl");
        if let Ok(log_text) = std::fs::read_to_string(&log_path) {
            for line in log_text.lines().filter(|l| !l.trim().is_empty()) {
                let entry: serde_json::Value = serde_json::from_str(line)
                    .map_err(|e| usage(format!("bad train_log.jsonl in {}: {e}", run.display())))?;
                let field = |name: &str| -> String {
                    match &entry[name] {
                        serde_json::Value::Null => String::new(),
                        v => v.to_string(),
                    }
                };
                curves.push_str(&format!(
                    "{label},{},{},{},{},{},{},{}\n",
                    field("epoch"),
                    field("l_rec"),
                    field("l_fair"),
                    field("l_expert"),
                    field("l_total"),
                    field("val_auc"),
                    field("val_sf"),
                ));
            }
        }
    }
    ensure_dir(out_dir)?;
    write_json(&out_dir.join("comparison.json"), &comparison)?;
    std::fs::write(out_dir.join("curves.csv"), curves)
        .map_err(|e| usage(format!("cannot write curves.csv: {e}")))?;
    std::fs::write(out_dir.join("sf_by_setting.csv"), sf_rows)
        .map_err(|e| usage(format!("cannot write sf_by_setting.csv: {e}")))?;
    write_manifest(
        out_dir,
        "report",
        BTreeMap::new(),
        seed,
        &[],
        &["comparison.json", "curves.csv", "sf_by_setting.csv"],
        started,
    )
}

/// Parse arguments, run the requested command, and return the process exit
/// code.
pub fn run_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints help/version through this path too
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let level = if cli.quiet { "warn" } else { "info" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
    let seed = resolve_seed(cli.seed);
    let result = match &cli.command {
        Command::Gen { config, out_dir } => cmd_gen(config, out_dir, seed),
        Command::Audit {
            data_dir,
            out_dir,
            z,
            min_interactions,
        } => cmd_audit(data_dir, out_dir, *z, *min_interactions, seed),
        Command::Train {
            data_dir,
            scorer,
            config,
            out_dir,
            objective,
        } => cmd_train(data_dir, scorer, config, out_dir, objective, seed),
        Command::Eval {
            data_dir,
            scorer,
            out_dir,
            model,
            settings,
            config,
        } => cmd_eval(
            data_dir,
            scorer,
            model.as_deref(),
            settings,
            config.as_deref(),
            out_dir,
            seed,
        ),
        Command::Report { runs, out_dir } => cmd_report(runs, out_dir, seed),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.code()
        }
    }
}

pub fn run() -> i32 {
    run_with_args(std::env::args_os())
}
