//! `threadloom` — parse entangled multi-party chat into reply-to forests.
//!
//! Subcommands: `ingest` raw IRC logs into canonical JSONL, `synth` a
//! training corpus, `train` a scorer, `predict` reply forests with either
//! decoder, `evaluate` predictions against gold, and `ablate` the full
//! switch grid. Exit codes: 0 success, 1 usage error, 2 data error, 3
//! numerical failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use threadloom_core::config::{DecoderKind, RunConfig};
use threadloom_core::corpus::{
    parse_irc, read_corpus, write_corpus, CorpusError, Dialogue, ReplyForest,
};
use threadloom_core::metrics::{evaluate_corpus, evaluate_each, Aggregation, EvalOptions};
use threadloom_core::nn::NnError;
use threadloom_core::train::{
    predict_corpus, run_ablations, synth_splits, train, Checkpoint, TrainError,
};

#[derive(Parser)]
#[command(name = "threadloom", version, about = "Disentangle multi-party chat into reply-to forests")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Parse a raw IRC log plus annotation file into canonical JSONL.
    Ingest {
        /// Raw transcript: "[HH:MM] <nick> message" or "[HH:MM] * nick action".
        #[arg(long)]
        raw: PathBuf,
        /// Annotation file: whitespace-separated "child parent" per line.
        #[arg(long)]
        ann: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Dialogue id stored in the canonical records.
        #[arg(long, default_value = "dialogue")]
        id: String,
    },
    /// Generate a synthetic train/test corpus.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Override a config key, e.g. --set synth_dialogues=50 (repeatable).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Train a scorer and write a checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Corpus file, or a directory holding train.jsonl.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Decode reply forests for a corpus.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        /// Corpus file, or a directory holding test.jsonl (train.jsonl as fallback).
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "easy-first")]
        decoder: String,
        /// Candidate window override.
        #[arg(long)]
        window: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against gold annotations.
    Evaluate {
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        /// "all" or a comma list of scaled_vi,ari,nmi,one_to_one,local_3,
        /// shen_f,cluster,link,partial_ari.
        #[arg(long, default_value = "all")]
        metrics: String,
        #[arg(long, default_value = "table")]
        format: String,
        #[arg(long, default_value = "micro")]
        aggregation: String,
        /// Count self-links as reply pairs in the link metric.
        #[arg(long)]
        include_self_links: bool,
        /// Also emit per-dialogue reports (JSON format only).
        #[arg(long)]
        per_dialogue: bool,
    },
    /// Train and evaluate the full ablation grid.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numeric(m) => f.write_str(m),
        }
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<NnError> for CliError {
    fn from(e: NnError) -> Self {
        CliError::Numeric(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } | TrainError::Nn(_) | TrainError::Loss(_) => {
                CliError::Numeric(e.to_string())
            }
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, CliError> {
    let mut run = match path {
        Some(p) => RunConfig::from_file(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?,
        None => RunConfig::default(),
    };
    for kv in overrides {
        let Some((k, v)) = kv.split_once('=') else {
            return Err(CliError::Usage(format!(
                "--set expects KEY=VALUE, got {kv:?}"
            )));
        };
        run.set(k.trim(), v)
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    Ok(run)
}

fn resolve_corpus_file(path: &Path, names: &[&str]) -> Result<PathBuf, CliError> {
    if path.is_file() {
        return Ok(path.to_path_buf());
    }
    if path.is_dir() {
        for name in names {
            let candidate = path.join(name);
            if candidate.is_file() {
                return Ok(candidate);
            }
        }
        return Err(CliError::Data(format!(
            "no {} under {}",
            names.join(" or "),
            path.display()
        )));
    }
    Err(CliError::Data(format!("{} does not exist", path.display())))
}

fn load_annotated(path: &Path) -> Result<Vec<(Dialogue, ReplyForest)>, CliError> {
    let corpus = read_corpus(path)?;
    corpus
        .into_iter()
        .map(|(d, f)| match f {
            Some(f) => Ok((d, f)),
            None => Err(CliError::Data(format!(
                "dialogue {:?} in {} carries no reply annotations",
                d.id,
                path.display()
            ))),
        })
        .collect()
}

fn run(cmd: Cmd) -> Result<(), CliError> {
    match cmd {
        Cmd::Ingest { raw, ann, out, id } => {
            let raw_text = std::fs::read_to_string(&raw)?;
            let ann_text = std::fs::read_to_string(&ann)?;
            let raw_lines: Vec<&str> = raw_text.lines().collect();
            let ann_lines: Vec<&str> = ann_text.lines().collect();
            let parsed = parse_irc(&id, &raw_lines, &ann_lines)?;
            for w in &parsed.warnings {
                eprintln!("warning: {w}");
            }
            write_corpus(&[(parsed.dialogue.clone(), Some(parsed.forest))], &out)?;
            println!(
                "ingested {} utterances into {}",
                parsed.dialogue.len(),
                out.display()
            );
            Ok(())
        }
        Cmd::Synth { config, out, set } => {
            let run = load_config(config.as_deref(), &set)?;
            std::fs::create_dir_all(&out)?;
            let (train_c, test_c) = synth_splits(&run)?;
            write_corpus(
                &train_c
                    .iter()
                    .map(|(d, f)| (d.clone(), Some(f.clone())))
                    .collect::<Vec<_>>(),
                out.join("train.jsonl"),
            )?;
            write_corpus(
                &test_c
                    .iter()
                    .map(|(d, f)| (d.clone(), Some(f.clone())))
                    .collect::<Vec<_>>(),
                out.join("test.jsonl"),
            )?;
            std::fs::write(
                out.join("run.json"),
                serde_json::to_string_pretty(&run).expect("config serializes"),
            )?;
            println!(
                "wrote {} train / {} test dialogues under {}",
                train_c.len(),
                test_c.len(),
                out.display()
            );
            Ok(())
        }
        Cmd::Train {
            config,
            data,
            out,
            set,
        } => {
            let run = load_config(config.as_deref(), &set)?;
            let file = resolve_corpus_file(&data, &["train.jsonl"])?;
            let corpus = load_annotated(&file)?;
            let (model, log) = train(&corpus, &run)?;
            Checkpoint::new(model, run).save(&out)?;
            let log_path = out.with_extension("log.jsonl");
            let mut log_text = String::new();
            for s in &log.steps {
                log_text.push_str(&serde_json::to_string(s).expect("step log serializes"));
                log_text.push('\n');
            }
            std::fs::write(&log_path, log_text)?;
            let epochs: Vec<String> = (0..)
                .map_while(|e| log.epoch_mean(e).map(|m| format!("{m:.4}")))
                .collect();
            println!(
                "trained on {} dialogues; epoch mean loss: {}",
                corpus.len(),
                epochs.join(" -> ")
            );
            println!("checkpoint: {}", out.display());
            println!("step log:   {}", log_path.display());
            Ok(())
        }
        Cmd::Predict {
            ckpt,
            data,
            decoder,
            window,
            out,
        } => {
            let decoder = DecoderKind::parse(&decoder)
                .ok_or_else(|| CliError::Usage(format!("unknown decoder {decoder:?}")))?;
            let checkpoint = Checkpoint::load(&ckpt)?;
            let file = resolve_corpus_file(&data, &["test.jsonl", "train.jsonl"])?;
            let corpus = read_corpus(&file)?;
            let dialogues: Vec<Dialogue> = corpus.into_iter().map(|(d, _)| d).collect();
            let preds = predict_corpus(&checkpoint.model, &dialogues, decoder, window)?;

            std::fs::create_dir_all(&out)?;
            let records: Vec<(Dialogue, Option<ReplyForest>)> = dialogues
                .iter()
                .zip(&preds)
                .map(|(d, (f, _))| (d.clone(), Some(f.clone())))
                .collect();
            write_corpus(&records, out.join("pred.jsonl"))?;
            let trace_dir = out.join("traces");
            std::fs::create_dir_all(&trace_dir)?;
            for (d, (_, trace)) in dialogues.iter().zip(&preds) {
                trace.write_jsonl(trace_dir.join(format!("{}.trace.jsonl", d.id)))?;
            }
            let mut resolved = serde_json::to_value(&checkpoint.run).expect("config serializes");
            resolved["predict"] = serde_json::json!({
                "decoder": decoder.name(),
                "window": window.unwrap_or(checkpoint.model.config.window),
                "data": file.display().to_string(),
            });
            std::fs::write(
                out.join("run.json"),
                serde_json::to_string_pretty(&resolved).expect("config serializes"),
            )?;
            println!(
                "decoded {} dialogues ({}) into {}",
                dialogues.len(),
                decoder.name(),
                out.display()
            );
            Ok(())
        }
        Cmd::Evaluate {
            gold,
            pred,
            metrics,
            format,
            aggregation,
            include_self_links,
            per_dialogue,
        } => {
            let gold_corpus = load_annotated(&gold)?;
            let pred_corpus = load_annotated(&pred)?;
            let gold_map: BTreeMap<&str, &ReplyForest> = gold_corpus
                .iter()
                .map(|(d, f)| (d.id.as_str(), f))
                .collect();
            let pred_map: BTreeMap<&str, &ReplyForest> = pred_corpus
                .iter()
                .map(|(d, f)| (d.id.as_str(), f))
                .collect();
            if gold_map.keys().ne(pred_map.keys()) {
                let only_gold: Vec<&&str> =
                    gold_map.keys().filter(|k| !pred_map.contains_key(*k)).collect();
                let only_pred: Vec<&&str> =
                    pred_map.keys().filter(|k| !gold_map.contains_key(*k)).collect();
                return Err(CliError::Data(format!(
                    "dialogue ids differ; only in gold: {only_gold:?}, only in predictions: {only_pred:?}"
                )));
            }
            let aggregation = match aggregation.as_str() {
                "micro" => Aggregation::Micro,
                "macro" => Aggregation::Macro,
                other => {
                    return Err(CliError::Usage(format!(
                        "unknown aggregation {other:?} (micro|macro)"
                    )))
                }
            };
            let opts = EvalOptions {
                include_self_links,
                aggregation,
                ..EvalOptions::default()
            };
            let mut golds = Vec::new();
            let mut preds = Vec::new();
            for (d, f) in &gold_corpus {
                let p = pred_map[d.id.as_str()];
                if p.len() != f.len() {
                    return Err(CliError::Data(format!(
                        "dialogue {:?}: gold has {} utterances, prediction {}",
                        d.id,
                        f.len(),
                        p.len()
                    )));
                }
                golds.push(f.clone());
                preds.push(p.clone());
            }
            let report = evaluate_corpus(&golds, &preds, &opts);
            let selected = parse_metric_selection(&metrics)?;
            match format.as_str() {
                "json" => {
                    let mut value = serde_json::to_value(&report).expect("report serializes");
                    filter_report(&mut value, &selected);
                    if per_dialogue {
                        let each = evaluate_each(&golds, &preds, &opts);
                        let mut rows = Vec::new();
                        for ((d, _), rep) in gold_corpus.iter().zip(each) {
                            let mut v = serde_json::to_value(&rep).expect("report serializes");
                            filter_report(&mut v, &selected);
                            rows.push(serde_json::json!({"dialogue": d.id, "metrics": v}));
                        }
                        value["per_dialogue"] = serde_json::Value::Array(rows);
                    }
                    println!("{}", serde_json::to_string_pretty(&value).unwrap());
                }
                "table" => {
                    let table = report.table();
                    for line in table.lines() {
                        let keep = selected.as_ref().map_or(true, |sel| {
                            sel.iter().any(|m| line_matches_metric(line, m))
                        });
                        if keep {
                            println!("{line}");
                        }
                    }
                }
                other => {
                    return Err(CliError::Usage(format!(
                        "unknown format {other:?} (json|table)"
                    )))
                }
            }
            Ok(())
        }
        Cmd::Ablate {
            config,
            data,
            out,
            set,
        } => {
            let run = load_config(config.as_deref(), &set)?;
            let train_file = resolve_corpus_file(&data, &["train.jsonl"])?;
            let test_file = resolve_corpus_file(&data, &["test.jsonl"])?;
            let train_c = load_annotated(&train_file)?;
            let test_c = load_annotated(&test_file)?;
            let rows = run_ablations(&train_c, &test_c, &run, &EvalOptions::default())?;
            let mut json_rows = Vec::new();
            println!(
                "{:<12} {:>8} {:>8} {:>8} {:>10} {:>8}",
                "run", "1-VI", "ARI", "1-1", "ClusterF1", "LinkF1"
            );
            for (name, report) in &rows {
                println!(
                    "{:<12} {:>8.4} {:>8.4} {:>8.4} {:>10.4} {:>8.4}",
                    name,
                    report.scaled_vi,
                    report.ari,
                    report.one_to_one,
                    report.cluster.f1,
                    report.link.f1
                );
                json_rows.push(serde_json::json!({
                    "name": name,
                    "metrics": serde_json::to_value(report).expect("report serializes"),
                }));
            }
            let doc = serde_json::json!({
                "config": serde_json::to_value(&run).expect("config serializes"),
                "rows": json_rows,
            });
            std::fs::write(&out, serde_json::to_string_pretty(&doc).unwrap())?;
            println!("report: {}", out.display());
            Ok(())
        }
    }
}

const METRIC_KEYS: [&str; 9] = [
    "scaled_vi",
    "ari",
    "nmi",
    "one_to_one",
    "local_3",
    "shen_f",
    "cluster",
    "link",
    "partial_ari",
];

fn parse_metric_selection(spec: &str) -> Result<Option<Vec<String>>, CliError> {
    if spec.trim() == "all" {
        return Ok(None);
    }
    let mut out = Vec::new();
    for part in spec.split(',') {
        let key = part.trim().to_lowercase();
        if !METRIC_KEYS.contains(&key.as_str()) {
            return Err(CliError::Usage(format!(
                "unknown metric {key:?}; available: {}",
                METRIC_KEYS.join(", ")
            )));
        }
        out.push(key);
    }
    Ok(Some(out))
}

fn filter_report(value: &mut serde_json::Value, selected: &Option<Vec<String>>) {
    let Some(selected) = selected else { return };
    let obj = value.as_object_mut().expect("report is an object");
    obj.retain(|k, _| k == "aggregation" || selected.iter().any(|s| s == k));
}

fn line_matches_metric(line: &str, metric: &str) -> bool {
    let label = line.split_whitespace().next().unwrap_or("");
    match metric {
        "scaled_vi" => label == "1-VI",
        "ari" => label == "ARI",
        "nmi" => label == "NMI",
        "one_to_one" => label == "1-1",
        "local_3" => label.starts_with("Local"),
        "shen_f" => label == "Shen-F",
        "cluster" => label == "Cluster",
        "link" => label == "Link",
        "partial_ari" => label == "Par-ARI",
        _ => false,
    }
}
