//! Held-out evaluation: short adaptation, prediction, accuracy and
//! expected calibration error.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::lm::{option_scores_on, BaseWeights, Overrides};
use crate::lora::{sample_weights, Posture};
use crate::metatrain::{draw_noise, task_loss_on, TrainConfig};
use crate::numerics::{softmax_into, Tape};
use crate::optim::sgd_step;
use crate::tasks::{sample_episode, Example, Task};

pub const DEFAULT_BINS: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRecord {
    pub example_id: usize,
    pub chosen: usize,
    pub confidence: f64,
    pub correct: bool,
    pub n_options: usize,
}

/// Index of the largest value; the first one wins ties.
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Scores the options of `example` with every adapted layer at its
/// posterior mean.
pub fn predict(base: &BaseWeights, posture: &Posture, example: &Example) -> Result<PredictionRecord> {
    let mut tape = Tape::new();
    let model = base.bind(&mut tape, false);
    let bound = posture.bind(&mut tape, false);
    let mut overrides = Overrides::new();
    for layer in &bound.layers {
        overrides.insert(layer.slot, sample_weights(&mut tape, layer, None)?);
    }
    let scores = option_scores_on(&mut tape, &model, &example.prompt, &example.options, &overrides)?;
    Ok(record_from_scores(example, &scores))
}

/// Averages option probabilities over `samples` weight draws.
pub fn predict_sampled(
    base: &BaseWeights,
    posture: &Posture,
    example: &Example,
    samples: usize,
    seed: u64,
) -> Result<PredictionRecord> {
    if samples <= 1 || !posture.is_stochastic() {
        return predict(base, posture, example);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = draw_noise(posture, samples, &mut rng);
    let mut avg = vec![0.0; example.options.len()];
    for draw in &noise {
        let mut tape = Tape::new();
        let model = base.bind(&mut tape, false);
        let bound = posture.bind(&mut tape, false);
        let mut overrides = Overrides::new();
        for (layer, eps) in bound.layers.iter().zip(draw) {
            let e = tape.constant(eps.clone());
            overrides.insert(layer.slot, sample_weights(&mut tape, layer, Some(e))?);
        }
        let scores = option_scores_on(&mut tape, &model, &example.prompt, &example.options, &overrides)?;
        let mut p = vec![0.0; scores.len()];
        softmax_into(&scores, &mut p);
        for (a, q) in avg.iter_mut().zip(p) {
            *a += q / samples as f64;
        }
    }
    let chosen = argmax(&avg);
    Ok(PredictionRecord {
        example_id: example.id,
        chosen,
        confidence: avg[chosen],
        correct: chosen == example.answer,
        n_options: avg.len(),
    })
}

pub fn record_from_scores(example: &Example, scores: &[f64]) -> PredictionRecord {
    let mut p = vec![0.0; scores.len()];
    softmax_into(scores, &mut p);
    let chosen = argmax(&p);
    PredictionRecord {
        example_id: example.id,
        chosen,
        confidence: p[chosen],
        correct: chosen == example.answer,
        n_options: p.len(),
    }
}

fn stable_hash(s: &str) -> u64 {
    // FNV-1a
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

/// Fixed adaptation split of `task`: `steps` disjoint batches, and the
/// remaining example ids for evaluation.
pub fn eval_split(task: &Task, steps: usize, batch_size: usize, seed: u64) -> Result<(Vec<Vec<usize>>, Vec<usize>)> {
    if task.len() < steps * batch_size + 1 {
        return Err(Error::Data(format!(
            "task {} has {} examples; adaptation needs {} plus at least one to evaluate",
            task.id,
            task.len(),
            steps * batch_size
        )));
    }
    let ep = sample_episode(task, batch_size, steps, 0, seed ^ stable_hash(&task.id))?;
    let used: std::collections::HashSet<usize> = ep.support_ids().collect();
    let rest = (0..task.len()).filter(|i| !used.contains(i)).collect();
    Ok((ep.support, rest))
}

/// Adapted posture for a held-out task plus the ids left for evaluation.
/// Stochastic postures keep the KL pull to `global`; others use the
/// likelihood alone.
pub fn adapt_for_eval(
    base: &BaseWeights,
    global: &Posture,
    task: &Task,
    cfg: &TrainConfig,
) -> Result<(Posture, Vec<usize>)> {
    let (batches, rest) = eval_split(task, cfg.eval_steps, cfg.batch_size, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ stable_hash(&task.id).rotate_left(17));
    let mut adapted = global.task_copy();
    for ids in &batches {
        let batch: Vec<&Example> = ids.iter().map(|&i| &task.examples[i]).collect();
        let noise = draw_noise(&adapted, cfg.mc_samples, &mut rng);
        let mut tape = Tape::new();
        let model = base.bind(&mut tape, false);
        let p = adapted.bind(&mut tape, true);
        let g = adapted
            .is_stochastic()
            .then(|| global.bind(&mut tape, false));
        let parts = task_loss_on(&mut tape, &model, &p, g.as_ref(), &batch, cfg.beta, &noise)?;
        let grads = tape.backward(parts.total)?;
        let gv = p.grad_vector(&tape, &grads);
        let mut params = adapted.params();
        sgd_step(&mut params, &gv, cfg.effective_inner_lr());
        adapted.set_params(&params)?;
    }
    Ok((adapted, rest))
}

pub fn accuracy(records: &[PredictionRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Contract("accuracy of an empty record set".into()));
    }
    Ok(records.iter().filter(|r| r.correct).count() as f64 / records.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub mean_confidence: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationTable {
    pub bins: Vec<CalibrationBin>,
}

impl CalibrationTable {
    /// Tab-separated: `lower upper count mean_confidence accuracy`, with a
    /// header line. Empty bins report zero confidence and accuracy.
    pub fn to_text(&self) -> String {
        let mut s = String::from("lower\tupper\tcount\tmean_confidence\taccuracy\n");
        for b in &self.bins {
            let _ = writeln!(
                s,
                "{:.4}\t{:.4}\t{}\t{:.17e}\t{:.17e}",
                b.lower, b.upper, b.count, b.mean_confidence, b.accuracy
            );
        }
        s
    }
}

/// Bin of confidence `c` among `n` equal-width bins; the top bin is closed.
fn bin_of(c: f64, n: usize) -> usize {
    let lower = |b: usize| b as f64 / n as f64;
    let mut b = ((c * n as f64).floor().max(0.0) as usize).min(n - 1);
    while b > 0 && c < lower(b) {
        b -= 1;
    }
    while b + 1 < n && c >= lower(b + 1) {
        b += 1;
    }
    b
}

/// `Σ_b (n_b / N) · |acc_b − conf_b|` over equal-width confidence bins.
pub fn ece(records: &[PredictionRecord], n_bins: usize) -> Result<(f64, CalibrationTable)> {
    if records.is_empty() {
        return Err(Error::Contract("ECE of an empty record set".into()));
    }
    if n_bins == 0 {
        return Err(Error::Config("ECE needs at least one bin".into()));
    }
    let mut count = vec![0usize; n_bins];
    let mut conf = vec![0.0; n_bins];
    let mut hits = vec![0usize; n_bins];
    for r in records {
        let b = bin_of(r.confidence, n_bins);
        count[b] += 1;
        conf[b] += r.confidence;
        hits[b] += r.correct as usize;
    }
    let n = records.len() as f64;
    let mut total = 0.0;
    let mut bins = Vec::with_capacity(n_bins);
    for b in 0..n_bins {
        let (mc, acc) = if count[b] > 0 {
            (conf[b] / count[b] as f64, hits[b] as f64 / count[b] as f64)
        } else {
            (0.0, 0.0)
        };
        total += count[b] as f64 / n * (acc - mc).abs();
        bins.push(CalibrationBin {
            lower: b as f64 / n_bins as f64,
            upper: (b + 1) as f64 / n_bins as f64,
            count: count[b],
            mean_confidence: mc,
            accuracy: acc,
        });
    }
    Ok((total, CalibrationTable { bins }))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskEval {
    pub task_id: String,
    pub accuracy: f64,
    pub ece: f64,
    pub records: Vec<PredictionRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub accuracy: f64,
    pub ece: f64,
    pub table: CalibrationTable,
    pub per_task: Vec<TaskEval>,
}

fn evaluate_task(base: &BaseWeights, global: &Posture, task: &Task, cfg: &TrainConfig) -> Result<TaskEval> {
    let (adapted, rest) = adapt_for_eval(base, global, task, cfg)?;
    let records = rest
        .iter()
        .map(|&i| {
            let seed = cfg.seed ^ stable_hash(&task.id) ^ (i as u64).rotate_left(32);
            predict_sampled(base, &adapted, &task.examples[i], cfg.predict_samples, seed)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TaskEval {
        task_id: task.id.clone(),
        accuracy: accuracy(&records)?,
        ece: ece(&records, DEFAULT_BINS)?.0,
        records,
    })
}

/// Adapts to and scores every task; records are pooled in task order.
pub fn evaluate_suite(
    base: &BaseWeights,
    global: &Posture,
    tasks: &[Task],
    cfg: &TrainConfig,
) -> Result<EvalSummary> {
    evaluate_suite_jobs(base, global, tasks, cfg, 1)
}

/// As [`evaluate_suite`], adapting up to `jobs` tasks concurrently.
pub fn evaluate_suite_jobs(
    base: &BaseWeights,
    global: &Posture,
    tasks: &[Task],
    cfg: &TrainConfig,
    jobs: usize,
) -> Result<EvalSummary> {
    if tasks.is_empty() {
        return Err(Error::Data("no held-out tasks to evaluate".into()));
    }
    let per_task: Vec<TaskEval> = if jobs <= 1 {
        tasks
            .iter()
            .map(|t| evaluate_task(base, global, t, cfg))
            .collect::<Result<_>>()?
    } else {
        let mut out = Vec::with_capacity(tasks.len());
        for chunk in tasks.chunks(jobs) {
            let results: Vec<Result<TaskEval>> = std::thread::scope(|s| {
                let handles: Vec<_> = chunk
                    .iter()
                    .map(|t| s.spawn(move || evaluate_task(base, global, t, cfg)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("evaluation thread panicked"))
                    .collect()
            });
            for r in results {
                out.push(r?);
            }
        }
        out
    };
    let all: Vec<PredictionRecord> = per_task.iter().flat_map(|t| t.records.clone()).collect();
    let (e, table) = ece(&all, DEFAULT_BINS)?;
    Ok(EvalSummary {
        accuracy: accuracy(&all)?,
        ece: e,
        table,
        per_task,
    })
}
