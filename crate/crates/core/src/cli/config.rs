//! Flat `key = value` run configuration.
//!
//! One assignment per line, `#` starts a comment. Floats may be written as
//! `exp(x)`. Every key has a default; unknown keys are rejected.

use std::path::Path;

use crate::error::{Error, Result};
use crate::lm::{ModelConfig, PretrainConfig};
use crate::metatrain::{Method, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteConfig {
    pub seed: u64,
    pub n_seen: usize,
    pub n_unseen: usize,
    pub examples_per_task: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_seen: 16,
            n_unseen: 2,
            examples_per_task: 60,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub corpus_docs: usize,
    pub corpus_seed: u64,
    pub suite: SuiteConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            corpus_docs: 4000,
            corpus_seed: 1,
            suite: SuiteConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

fn parse_f64(key: &str, v: &str, line: usize) -> Result<f64> {
    let bad = || Error::Parse {
        line,
        detail: format!("{key}: {v:?} is not a number"),
    };
    if let Some(inner) = v.strip_prefix("exp(").and_then(|r| r.strip_suffix(')')) {
        return inner.trim().parse::<f64>().map(f64::exp).map_err(|_| bad());
    }
    v.parse().map_err(|_| bad())
}

fn parse_int<T: std::str::FromStr>(key: &str, v: &str, line: usize) -> Result<T> {
    v.parse().map_err(|_| Error::Parse {
        line,
        detail: format!("{key}: {v:?} is not a non-negative integer"),
    })
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (k, v) = body.split_once('=').ok_or_else(|| Error::Parse {
                line,
                detail: format!("expected `key = value`, got {body:?}"),
            })?;
            cfg.set(k.trim(), v.trim(), line)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and parses a config file. Every failure is reported as a
    /// configuration error naming the file.
    pub fn load(path: &Path) -> Result<Self> {
        let shown = path.display();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {shown}: {e}")))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Parse { line, detail } => Error::Config(format!("{shown}:{line}: {detail}")),
            Error::Config(m) => Error::Config(format!("{shown}: {m}")),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.model.vocab_size < crate::tasks::Vocab::default().len() {
            return Err(Error::Config(format!(
                "vocab_size {} is smaller than the task vocabulary",
                self.model.vocab_size
            )));
        }
        Ok(())
    }

    fn set(&mut self, key: &str, v: &str, line: usize) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        let p = &mut self.pretrain;
        let s = &mut self.suite;
        match key {
            "vocab_size" => m.vocab_size = parse_int(key, v, line)?,
            "d_model" => m.d_model = parse_int(key, v, line)?,
            "n_layers" => m.n_layers = parse_int(key, v, line)?,
            "n_heads" => m.n_heads = parse_int(key, v, line)?,
            "d_ff" => m.d_ff = parse_int(key, v, line)?,
            "max_context" => m.max_context = parse_int(key, v, line)?,
            "d_rank" => m.d_rank = parse_int(key, v, line)?,
            "pretrain_steps" => p.steps = parse_int(key, v, line)?,
            "pretrain_lr" => p.lr = parse_f64(key, v, line)?,
            "pretrain_seed" => p.seed = parse_int(key, v, line)?,
            "pretrain_window" => p.window = parse_int(key, v, line)?,
            "pretrain_batch" => p.batch = parse_int(key, v, line)?,
            "corpus_docs" => self.corpus_docs = parse_int(key, v, line)?,
            "corpus_seed" => self.corpus_seed = parse_int(key, v, line)?,
            "suite_seed" => s.seed = parse_int(key, v, line)?,
            "n_seen" => s.n_seen = parse_int(key, v, line)?,
            "n_unseen" => s.n_unseen = parse_int(key, v, line)?,
            "examples_per_task" => s.examples_per_task = parse_int(key, v, line)?,
            "method" => t.method = v.parse()?,
            "beta" => t.beta = parse_f64(key, v, line)?,
            "gamma" => t.gamma = parse_f64(key, v, line)?,
            "c" => t.c = parse_f64(key, v, line)?,
            "a0" => t.a0 = parse_f64(key, v, line)?,
            "b0" => t.b0 = parse_f64(key, v, line)?,
            "inner_steps" => t.inner_steps = parse_int(key, v, line)?,
            "batch_size" => t.batch_size = parse_int(key, v, line)?,
            "inner_lr" => t.inner_lr = parse_f64(key, v, line)?,
            "outer_lr" => t.outer_lr = parse_f64(key, v, line)?,
            "lr_scale" => t.lr_scale = parse_f64(key, v, line)?,
            "mc_samples" => t.mc_samples = parse_int(key, v, line)?,
            "epochs" => t.epochs = parse_int(key, v, line)?,
            "tasks_per_epoch" => t.tasks_per_epoch = parse_int(key, v, line)?,
            "seed" => t.seed = parse_int(key, v, line)?,
            "reptile_epsilon" => t.reptile_epsilon = parse_f64(key, v, line)?,
            "n_query_batches" => t.n_query_batches = parse_int(key, v, line)?,
            "eval_steps" => t.eval_steps = parse_int(key, v, line)?,
            "predict_samples" => t.predict_samples = parse_int(key, v, line)?,
            _ => {
                return Err(Error::Parse {
                    line,
                    detail: format!("unknown key {key:?}"),
                })
            }
        }
        Ok(())
    }

    /// Canonical text form; `parse(to_text())` reproduces `self` exactly.
    pub fn to_text(&self) -> String {
        let (m, p, s, t) = (&self.model, &self.pretrain, &self.suite, &self.train);
        let lines = [
            "# model".to_string(),
            format!("vocab_size = {}", m.vocab_size),
            format!("d_model = {}", m.d_model),
            format!("n_layers = {}", m.n_layers),
            format!("n_heads = {}", m.n_heads),
            format!("d_ff = {}", m.d_ff),
            format!("max_context = {}", m.max_context),
            format!("d_rank = {}", m.d_rank),
            "# pretraining".to_string(),
            format!("pretrain_steps = {}", p.steps),
            format!("pretrain_lr = {:?}", p.lr),
            format!("pretrain_seed = {}", p.seed),
            format!("pretrain_window = {}", p.window),
            format!("pretrain_batch = {}", p.batch),
            format!("corpus_docs = {}", self.corpus_docs),
            format!("corpus_seed = {}", self.corpus_seed),
            "# task suite".to_string(),
            format!("suite_seed = {}", s.seed),
            format!("n_seen = {}", s.n_seen),
            format!("n_unseen = {}", s.n_unseen),
            format!("examples_per_task = {}", s.examples_per_task),
            "# meta-training".to_string(),
            format!("method = {}", t.method),
            format!("beta = {:?}", t.beta),
            format!("gamma = {:?}", t.gamma),
            format!("c = {:?}", t.c),
            format!("a0 = {:?}", t.a0),
            format!("b0 = {:?}", t.b0),
            format!("inner_steps = {}", t.inner_steps),
            format!("batch_size = {}", t.batch_size),
            format!("inner_lr = {:?}", t.inner_lr),
            format!("outer_lr = {:?}", t.outer_lr),
            format!("lr_scale = {:?}", t.lr_scale),
            format!("mc_samples = {}", t.mc_samples),
            format!("epochs = {}", t.epochs),
            format!("tasks_per_epoch = {}", t.tasks_per_epoch),
            format!("seed = {}", t.seed),
            format!("reptile_epsilon = {:?}", t.reptile_epsilon),
            format!("n_query_batches = {}", t.n_query_batches),
            format!("eval_steps = {}", t.eval_steps),
            format!("predict_samples = {}", t.predict_samples),
        ];
        let mut out = lines.join("\n");
        out.push('\n');
        out
    }

    pub fn method(&self) -> Method {
        self.train.method
    }
}
