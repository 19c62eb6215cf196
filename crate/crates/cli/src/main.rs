//! `seenough`: the synth → label → train → predict → smooth → evaluate → report pipeline.
//!
//! Exit status is 0 on success, 1 on usage errors and 2 on data errors, with a
//! one-line diagnostic on standard error.

mod config;

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use seenough_core::controller::{smooth_stream, EmissionRecord, GraphSpec, TransitionGraph};
use seenough_core::evaluation::{evaluate_predictions, write_evaluation, EvalOptions, PredictionRecord, SEGMENT_MS};
use seenough_core::labeling::{attach_labels, label_table, load_labels, load_quality_table_file, save_labels};
use seenough_core::manifest::DatasetManifest;
use seenough_core::predictor::{load_model, save_checkpoint, save_model, PredictorModel};
use seenough_core::provenance::{csv_comment, record};
use seenough_core::synthetic::generate_dataset;
use seenough_core::training::{metrics_csv, predict_clips, train, ManifestDataset};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "seenough", version, about = "Perceptual resolution selection pipeline")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Serialize)]
struct Common {
    /// JSON or TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Serial, bit-reproducible execution.
    #[arg(long, global = true)]
    deterministic: bool,
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Command {
    /// Generate a synthetic dataset: tensors, manifest, quality table, labels.
    Synth {
        #[arg(long)]
        scenes: usize,
        #[arg(long)]
        out: PathBuf,
        /// Clips per scene.
        #[arg(long)]
        clip_count: Option<usize>,
    },
    /// Label a quality table with the cheapest level within tolerance of the best.
    Label {
        #[arg(long)]
        quality_table: PathBuf,
        #[arg(long)]
        tolerance: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the predictor.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Per-epoch metrics CSV (default: `<out>.metrics.csv`).
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Also write the final weights with optimizer state.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Per-clip log-probabilities as JSON lines.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Viterbi-smooth per-clip emissions into 2 s decisions.
    Smooth {
        #[arg(long)]
        emissions: PathBuf,
        /// Transition graph JSON: `{"lambda": x}` or `{"weights": [[...]]}`.
        #[arg(long)]
        graph: Option<PathBuf>,
        #[arg(long)]
        lambda: Option<f64>,
        /// Start level: a ladder name such as `1080p`, or a state index.
        #[arg(long)]
        start: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions and write metrics and savings reports.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        quality_table: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, conflicts_with = "predictions", required_unless_present = "predictions")]
        model: Option<PathBuf>,
        /// Output of `predict`, used instead of running a model.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        smooth: bool,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Collect evaluation directories into one table CSV.
    Report {
        #[arg(long, required = true, num_args = 1..)]
        metrics: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print per-layer parameter counts of the configured model.
    Describe,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Label { .. } => "label",
            Command::Train { .. } => "train",
            Command::Predict { .. } => "predict",
            Command::Smooth { .. } => "smooth",
            Command::Evaluate { .. } => "evaluate",
            Command::Report { .. } => "report",
            Command::Describe => "describe",
        }
    }
}

/// Usage problems found after argument parsing (exit 1).
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let usage = e.downcast_ref::<UsageError>().is_some();
            eprintln!("seenough {}: {:#}", cli.command.name(), e);
            ExitCode::from(if usage { 1 } else { 2 })
        }
    }
}

fn configure_threads(deterministic: bool) -> anyhow::Result<()> {
    let threads = match std::env::var("SEENOUGH_THREADS") {
        Ok(v) => Some(
            v.parse::<usize>()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| UsageError(format!("SEENOUGH_THREADS must be a positive integer, got {v:?}")))?,
        ),
        Err(_) => None,
    };
    let threads = if deterministic { Some(1) } else { threads };
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring worker threads")?;
    }
    Ok(())
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let mut cfg = RunConfig::load_or_default(cli.common.config.as_deref())?;
    if let Some(seed) = cli.common.seed {
        cfg.seed = seed;
    }
    cfg.deterministic |= cli.common.deterministic;
    apply_overrides(&mut cfg, &cli.command);
    let cfg = cfg.resolve().map_err(|e| UsageError(format!("{e:#}")))?;
    configure_threads(cfg.deterministic)?;
    let prov = record(&json!({
        "command": cli.command.name(),
        "arguments": &cli.command,
        "run": &cfg,
    }));

    match &cli.command {
        Command::Synth { scenes, out, .. } => {
            if *scenes == 0 {
                return Err(UsageError("--scenes must be positive".into()).into());
            }
            let summary = generate_dataset(*scenes, cfg.seed, out, &cfg.synthetic, Some(prov))?;
            let clips: usize = summary.class_counts.iter().sum();
            println!("wrote {clips} clips from {scenes} scenes to {}; label counts {:?}", out.display(), summary.class_counts);
        }
        Command::Label { quality_table, out, .. } => {
            let ladder = cfg.ladder()?;
            let table = load_quality_table_file(quality_table, &ladder)?;
            let labels = label_table(&table, &ladder, cfg.tolerance)?;
            save_labels(out, &labels, Some(prov))?;
            println!("labeled {} clips -> {}", labels.len(), out.display());
        }
        Command::Train {
            manifest,
            labels,
            out,
            metrics,
            checkpoint,
            ..
        } => {
            let data = labeled_dataset(manifest, labels)?;
            let outcome = train(&data, &cfg.model, &cfg.train, |rows| {
                for r in rows {
                    eprintln!("epoch {:>3} {:<15} loss {:.4} acc {:.4}", r.epoch, r.split, r.loss, r.accuracy);
                }
            })?;
            save_model(out, &outcome.model, Some(prov.clone()))?;
            let metrics_path = metrics.clone().unwrap_or_else(|| with_suffix(out, ".metrics.csv"));
            let csv = metrics_csv(&outcome.metrics, Some(&csv_comment(&prov)))?;
            fs::write(&metrics_path, csv).with_context(|| format!("writing {}", metrics_path.display()))?;
            if let Some(path) = checkpoint {
                save_checkpoint(path, &outcome.final_model, &outcome.optimizer, Some(prov))?;
            }
            println!(
                "trained {} parameters; best epoch {} -> {}",
                outcome.model.parameter_count(),
                outcome.best_epoch,
                out.display()
            );
        }
        Command::Predict { model, manifest, out } => {
            let (model, _) = load_model(model)?;
            let data = ManifestDataset::open(manifest)?;
            let records = predict_records(&model, &data, cfg.deterministic)?;
            write_jsonl(out, &prov, &records)?;
            println!("predicted {} clips -> {}", records.len(), out.display());
        }
        Command::Smooth {
            emissions,
            graph,
            start,
            out,
            ..
        } => smooth(&cfg, emissions, graph.as_deref(), start.as_deref(), out, prov)?,
        Command::Evaluate {
            manifest,
            quality_table,
            labels,
            model,
            predictions,
            smooth,
            out,
            ..
        } => {
            let manifest_data = DatasetManifest::load(manifest)?;
            let ladder = manifest_data.ladder()?;
            let table = load_quality_table_file(quality_table, &ladder)?;
            let labels = load_labels(labels)?;
            let (records, params) = match (model, predictions) {
                (Some(path), _) => {
                    let (model, _) = load_model(path)?;
                    let data = ManifestDataset::new(manifest_data.clone(), manifest);
                    (predict_records(&model, &data, cfg.deterministic)?, Some(model.parameter_count()))
                }
                (None, Some(path)) => (read_predictions(path)?, None),
                (None, None) => unreachable!("clap requires --model or --predictions"),
            };
            let opts = EvalOptions {
                smoothing: smooth
                    .then(|| TransitionGraph::linear(ladder.len(), cfg.lambda))
                    .transpose()?,
                start: None,
                baseline: ladder.index_of(&cfg.baseline)?,
                segment_ms: SEGMENT_MS,
                params,
            };
            let eval = evaluate_predictions(&manifest_data, &table, &labels, &records, &opts)?;
            let method = if *smooth { "predictor+viterbi" } else { "predictor" };
            write_evaluation(out, &eval, method, Some(&prov))?;
            let m = &eval.metrics;
            println!(
                "res_error {:.4} jod_error {:.3}% accuracy {:.4} savings {:.2}% -> {}",
                m.res_error,
                m.jod_error_pct,
                m.accuracy,
                m.savings_overall_pct,
                out.display()
            );
        }
        Command::Report { metrics, out } => report(metrics, out, &prov)?,
        Command::Describe => {
            let model = PredictorModel::<f32>::init(&cfg.model, cfg.seed)?;
            for layer in model.describe() {
                println!("{:<16} {:>8}", layer.layer, layer.params);
            }
            println!("{:<16} {:>8}", "total", model.parameter_count());
        }
    }
    Ok(())
}

fn apply_overrides(cfg: &mut RunConfig, command: &Command) {
    match command {
        Command::Synth { clip_count, .. } => {
            if let Some(n) = clip_count {
                cfg.synthetic.clip_count = *n;
            }
        }
        Command::Label { tolerance, .. } => {
            if let Some(t) = tolerance {
                cfg.tolerance = *t;
                cfg.synthetic.tolerance = *t;
            }
        }
        Command::Train {
            epochs,
            learning_rate,
            batch_size,
            ..
        } => {
            if let Some(e) = epochs {
                cfg.train.epochs = *e;
            }
            if let Some(lr) = learning_rate {
                cfg.train.learning_rate = *lr;
            }
            if let Some(b) = batch_size {
                cfg.train.batch_size = *b;
            }
        }
        Command::Smooth { lambda, .. } | Command::Evaluate { lambda, .. } => {
            if let Some(l) = lambda {
                cfg.lambda = *l;
            }
        }
        Command::Predict { .. } | Command::Report { .. } | Command::Describe => {}
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn labeled_dataset(manifest_path: &Path, labels: &Path) -> anyhow::Result<ManifestDataset> {
    let mut manifest = DatasetManifest::load(manifest_path)?;
    attach_labels(&mut manifest, &load_labels(labels)?)?;
    Ok(ManifestDataset::new(manifest, manifest_path))
}

fn predict_records(
    model: &PredictorModel<f32>,
    data: &ManifestDataset,
    deterministic: bool,
) -> anyhow::Result<Vec<PredictionRecord>> {
    let indices: Vec<usize> = (0..data.manifest.clips.len()).collect();
    let preds = predict_clips(model, data, &indices, deterministic)?;
    Ok(preds
        .into_iter()
        .map(|p| {
            let clip = data.entry(p.index);
            PredictionRecord {
                clip_id: clip.clip_id.clone(),
                video: clip.scene.clone(),
                setting: clip.setting.clone(),
                t_ms: clip.start_ms(),
                log_probs: p.log_probs.iter().map(|&v| f64::from(v)).collect(),
            }
        })
        .collect())
}

/// JSON lines: a `{"provenance": ...}` header line, then one record per line.
fn write_jsonl<T: Serialize>(path: &Path, prov: &Value, records: &[T]) -> anyhow::Result<()> {
    let file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer(&mut w, &json!({ "provenance": prov }))?;
    writeln!(w)?;
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads JSON lines, skipping blank lines and the provenance header.
fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<Vec<T>> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), n + 1))?;
        if value.get("provenance").is_some() && value.get("log_probs").is_none() {
            continue;
        }
        out.push(serde_json::from_value(value).with_context(|| format!("{}:{}", path.display(), n + 1))?);
    }
    Ok(out)
}

fn read_predictions(path: &Path) -> anyhow::Result<Vec<PredictionRecord>> {
    read_jsonl(path)
}

#[derive(Deserialize)]
struct EmissionLine {
    #[serde(default)]
    video: String,
    #[serde(default)]
    setting: String,
    t_ms: u64,
    log_probs: Vec<f64>,
}

#[derive(Serialize)]
struct DecisionOut {
    t_ms: u64,
    state: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    resolution: Option<String>,
}

#[derive(Serialize)]
struct StreamOut {
    video: String,
    setting: String,
    decisions: Vec<DecisionOut>,
}

fn smooth(
    cfg: &RunConfig,
    emissions: &Path,
    graph: Option<&Path>,
    start: Option<&str>,
    out: &Path,
    prov: Value,
) -> anyhow::Result<()> {
    let lines: Vec<EmissionLine> = read_jsonl(emissions)?;
    let levels = lines
        .first()
        .map(|l| l.log_probs.len())
        .ok_or_else(|| anyhow!("no emissions in {}", emissions.display()))?;
    let graph = match graph {
        Some(path) => TransitionGraph::load(path, levels)?,
        None => TransitionGraph::from_spec(&GraphSpec::Lambda { lambda: cfg.lambda }, levels)?,
    };
    let ladder = cfg.ladder()?;
    let names = (ladder.len() == levels).then_some(&ladder);
    let start_name = start.unwrap_or(&cfg.baseline);
    let start = match (start_name.parse::<usize>(), names) {
        (Ok(i), _) if i < levels => i,
        (_, Some(l)) => l.index_of(start_name).map_err(|e| UsageError(e.to_string()))?,
        _ => bail!(UsageError(format!("start {start_name:?} is not a state of a {levels}-state graph"))),
    };
    let mut streams: BTreeMap<(String, String), Vec<EmissionRecord>> = BTreeMap::new();
    for l in lines {
        streams.entry((l.video, l.setting)).or_default().push(EmissionRecord {
            t_ms: l.t_ms,
            log_probs: l.log_probs,
        });
    }
    let mut out_streams = Vec::with_capacity(streams.len());
    for ((video, setting), records) in streams {
        let decisions = smooth_stream(&records, &graph, start)?
            .into_iter()
            .map(|d| DecisionOut {
                t_ms: d.t_ms,
                state: d.resolution,
                resolution: names.map(|l| l.levels[d.resolution].name.clone()),
            })
            .collect();
        out_streams.push(StreamOut {
            video,
            setting,
            decisions,
        });
    }
    let doc = json!({ "provenance": prov, "streams": out_streams });
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    fs::write(out, text).with_context(|| format!("writing {}", out.display()))?;
    println!("smoothed {} streams -> {}", out_streams.len(), out.display());
    Ok(())
}

fn report(dirs: &[PathBuf], out: &Path, prov: &Value) -> anyhow::Result<()> {
    let mut settings: Vec<String> = Vec::new();
    let mut rows = Vec::new();
    for dir in dirs {
        let path = dir.join(seenough_core::evaluation::METRICS_FILE);
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let m: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if let Some(by) = m["savings_by_setting"].as_object() {
            for k in by.keys() {
                if !settings.contains(k) {
                    settings.push(k.clone());
                }
            }
        }
        rows.push((dir.display().to_string(), m));
    }
    settings.sort();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["run", "res_error", "jod_error_pct", "accuracy", "params", "savings_overall_pct"]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>();
    header.extend(settings.iter().map(|s| format!("savings_{s}_pct")));
    w.write_record(&header)?;
    for (run, m) in &rows {
        let field = |v: &Value| match v {
            Value::Null => String::new(),
            other => other.to_string(),
        };
        let mut record = vec![run.clone()];
        for key in ["res_error", "jod_error_pct", "accuracy", "params", "savings_overall_pct"] {
            record.push(field(&m[key]));
        }
        for s in &settings {
            record.push(field(&m["savings_by_setting"][s]));
        }
        w.write_record(&record)?;
    }
    let body = String::from_utf8(w.into_inner().map_err(|e| anyhow!("{e}"))?)?;
    fs::write(out, format!("{}{body}", csv_comment(prov))).with_context(|| format!("writing {}", out.display()))?;
    println!("reported {} runs -> {}", rows.len(), out.display());
    Ok(())
}
