use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::lm::pretrain_base;
use crate::metatrain::{init_posture, train_from, Method, RunState};
use crate::metrics::{evaluate_suite_jobs, EvalSummary};
use crate::tasks::{generate_suite, load_records, pretrain_corpus, MetaDataset, Vocab};

use super::checkpoint::{metrics_text, Checkpoint};
use super::config::RunConfig;
use super::report::{curves_text, parse_metrics, summarize, summary_text};
use super::{Cli, Command};

/// Written once before a command starts producing artifacts.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: String,
    pub suite_seed: u64,
    pub method: Option<String>,
    pub start_epoch: usize,
    pub end_epoch: usize,
    pub artifacts: Vec<PathBuf>,
    pub code_version: String,
    pub created_unix: u64,
}

impl RunManifest {
    fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Pretrains the base model; returns the checkpoint path.
pub fn cmd_pretrain(config: &Path, out: &Path) -> Result<PathBuf> {
    let cfg = RunConfig::load(config)?;
    ensure_dir(out)?;
    let ckpt = out.join("base.ckpt");
    RunManifest {
        command: "pretrain".into(),
        config: cfg.to_text(),
        suite_seed: cfg.suite.seed,
        method: None,
        start_epoch: 0,
        end_epoch: 0,
        artifacts: vec![ckpt.clone()],
        code_version: env!("CARGO_PKG_VERSION").into(),
        created_unix: now(),
    }
    .write(&out.join("pretrain.manifest.json"))?;
    let corpus = pretrain_corpus(cfg.corpus_seed, cfg.corpus_docs);
    let base = pretrain_base(&corpus, &cfg.model, &cfg.pretrain)?;
    Checkpoint {
        config: cfg,
        base,
        run: None,
    }
    .save(&ckpt)?;
    Ok(ckpt)
}

pub fn suite_for(cfg: &RunConfig, seed: u64) -> Result<MetaDataset> {
    let s = &cfg.suite;
    generate_suite(seed, s.n_seen, s.n_unseen, s.examples_per_task)
}

/// File stem shared by a run's artifacts.
pub fn run_stem(method: Method, seed: u64) -> String {
    format!("{method}-seed{seed}")
}

/// Meta-trains from a base checkpoint (or resumes); returns the metrics
/// file path. A checkpoint is written after every reported epoch.
pub fn cmd_metatrain(
    config: &Path,
    base: &Path,
    method: Option<&str>,
    resume: Option<&Path>,
    out: &Path,
) -> Result<PathBuf> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(m) = method {
        cfg.train.method = m.parse()?;
    }
    let base_ck = Checkpoint::load(base)?;
    if base_ck.config.model != cfg.model {
        return Err(Error::Config(format!(
            "base checkpoint {} was built for a different model configuration",
            base.display()
        )));
    }
    let weights = base_ck.base;
    let data = suite_for(&cfg, cfg.suite.seed)?;
    let mut state = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let run = ck.run.ok_or_else(|| {
                Error::Config(format!("{} holds no training state to resume", path.display()))
            })?;
            if run.method != cfg.train.method {
                return Err(Error::Config(format!(
                    "checkpoint {} was trained with {}, not {}",
                    path.display(),
                    run.method,
                    cfg.train.method
                )));
            }
            if ck.base != weights {
                return Err(Error::Config("resume checkpoint uses a different base model".into()));
            }
            run
        }
        None => RunState::new(&weights, &cfg.train)?,
    };

    ensure_dir(out)?;
    let stem = run_stem(cfg.train.method, cfg.train.seed);
    let metrics_path = out.join(format!("{stem}.metrics.csv"));
    let final_ckpt = out.join(format!("{stem}.ckpt"));
    RunManifest {
        command: "metatrain".into(),
        config: cfg.to_text(),
        suite_seed: cfg.suite.seed,
        method: Some(cfg.train.method.to_string()),
        start_epoch: state.history.len(),
        end_epoch: cfg.train.epochs,
        artifacts: vec![metrics_path.clone(), final_ckpt.clone()],
        code_version: env!("CARGO_PKG_VERSION").into(),
        created_unix: now(),
    }
    .write(&out.join(format!("{stem}.manifest.json")))?;

    let save = |state: &RunState, path: &Path| -> Result<()> {
        let bytes = Checkpoint::bytes_from_parts(&cfg, &weights, Some(state));
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    };
    write(&metrics_path, &metrics_text(&state.history))?;
    train_from(&mut state, &weights, &data, &cfg.train, |s| {
        let k = s.history.len();
        save(s, &out.join(format!("{stem}.epoch{k:04}.ckpt")))?;
        write(&metrics_path, &metrics_text(&s.history))
    })?;
    save(&state, &final_ckpt)?;
    write(&metrics_path, &metrics_text(&state.history))?;
    Ok(metrics_path)
}

/// Adapts to every held-out task and writes `eval.csv` and
/// `calibration.tsv` into `out`.
pub fn cmd_evaluate(
    checkpoint: &Path,
    datasets: &[PathBuf],
    suite_seed: Option<u64>,
    adapt_steps: usize,
    jobs: usize,
    out: &Path,
) -> Result<EvalSummary> {
    let ck = Checkpoint::load(checkpoint)?;
    let mut cfg = ck.config.clone();
    cfg.train.eval_steps = adapt_steps;
    let fresh;
    let global = match &ck.run {
        Some(run) => &run.global,
        None => {
            fresh = init_posture(&ck.base, Method::RegularLora, cfg.train.c, cfg.train.seed)?;
            &fresh
        }
    };
    let tasks = if datasets.is_empty() {
        suite_for(&cfg, suite_seed.unwrap_or(cfg.suite.seed))?.unseen
    } else {
        let vocab = Vocab::default();
        datasets
            .iter()
            .map(|p| load_records(p, &vocab))
            .collect::<Result<Vec<_>>>()?
    };
    for t in &tasks {
        let longest = t.max_tokens();
        if longest > cfg.model.max_context {
            return Err(Error::Length {
                len: longest,
                max: cfg.model.max_context,
            });
        }
    }
    let summary = evaluate_suite_jobs(&ck.base, global, &tasks, &cfg.train, jobs)?;
    ensure_dir(out)?;
    let mut csv = String::from("task,examples,accuracy,ece\n");
    for t in &summary.per_task {
        csv.push_str(&format!("{},{},{:.17e},{:.17e}\n", t.task_id, t.records.len(), t.accuracy, t.ece));
    }
    let n: usize = summary.per_task.iter().map(|t| t.records.len()).sum();
    csv.push_str(&format!("all,{n},{:.17e},{:.17e}\n", summary.accuracy, summary.ece));
    write(&out.join("eval.csv"), &csv)?;
    write(&out.join("calibration.tsv"), &summary.table.to_text())?;
    Ok(summary)
}

/// Writes `summary.csv` and `curves.csv`; returns the summary text.
pub fn cmd_report(files: &[PathBuf], out: &Path) -> Result<String> {
    if files.is_empty() {
        return Err(Error::Config("report needs at least one metrics file".into()));
    }
    let runs = files
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            parse_metrics(&text).map_err(|e| match e {
                Error::Format(m) => Error::Format(format!("{}: {m}", p.display())),
                other => other,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (summary, curves) = summarize(&runs)?;
    ensure_dir(out)?;
    let s = summary_text(&summary);
    write(&out.join("summary.csv"), &s)?;
    write(&out.join("curves.csv"), &curves_text(&curves))?;
    Ok(s)
}

/// Runs a parsed command line, printing a short result line.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain { config, out } => {
            let p = cmd_pretrain(&config, &out)?;
            println!("wrote {}", p.display());
        }
        Command::Metatrain {
            config,
            base,
            method,
            resume,
            out,
        } => {
            let p = cmd_metatrain(&config, &base, method.as_deref(), resume.as_deref(), &out)?;
            println!("wrote {}", p.display());
        }
        Command::Evaluate {
            checkpoint,
            dataset,
            suite_seed,
            adapt_steps,
            jobs,
            out,
        } => {
            let s = cmd_evaluate(&checkpoint, &dataset, suite_seed, adapt_steps, jobs, &out)?;
            println!("accuracy {:.4} ece {:.4}", s.accuracy, s.ece);
        }
        Command::Report { metrics, out } => {
            print!("{}", cmd_report(&metrics, &out)?);
        }
    }
    Ok(())
}
