//! Meta-training of adapter postures and the three LoRA baselines.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::distributions::GammaPrior;
use crate::error::{Error, Result};
use crate::lm::{sequence_log_prob_on, BaseWeights, BoundModel, Overrides};
use crate::lora::{posture_kl, posture_log_prior, sample_weights, BoundPosture, Posture, Role};
use crate::metrics::{evaluate_suite, EvalSummary};
use crate::numerics::{Tape, Tensor, Var};
use crate::optim::{sgd_step, Adam};
use crate::tasks::{sample_episode, Example, MetaDataset, Task};

/// Gradient computations one task visit costs ABMLL and Reptile
/// (inner steps plus one outer step); Regular LoRA is reported on this grid.
pub const REGULAR_LORA_STRIDE: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    Abmll,
    RegularLora,
    StructuredLora,
    Reptile,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Abmll,
        Method::RegularLora,
        Method::StructuredLora,
        Method::Reptile,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Abmll => "abmll",
            Method::RegularLora => "regular_lora",
            Method::StructuredLora => "structured_lora",
            Method::Reptile => "reptile",
        }
    }

    /// Whether the method learns a distribution over adapter outputs.
    pub fn is_stochastic(self) -> bool {
        self == Method::Abmll
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s.to_ascii_lowercase())
            .ok_or_else(|| {
                let valid: Vec<_> = Method::ALL.iter().map(|m| m.name()).collect();
                Error::Config(format!("unknown method {s:?}; valid: {}", valid.join(", ")))
            })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub method: Method,
    pub beta: f64,
    pub gamma: f64,
    pub c: f64,
    pub a0: f64,
    pub b0: f64,
    pub inner_steps: usize,
    pub batch_size: usize,
    pub inner_lr: f64,
    pub outer_lr: f64,
    /// Multiplier applied to both learning rates.
    pub lr_scale: f64,
    pub mc_samples: usize,
    pub epochs: usize,
    /// Task visits per epoch; 0 means every seen task once.
    pub tasks_per_epoch: usize,
    pub seed: u64,
    pub reptile_epsilon: f64,
    pub n_query_batches: usize,
    /// Adaptation steps on each held-out task before scoring.
    pub eval_steps: usize,
    /// Weight draws averaged per prediction; 1 scores the posterior mean.
    pub predict_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Abmll,
            beta: 5e-10,
            gamma: 1e-6,
            c: (-20.0f64).exp(),
            a0: 1.0,
            b0: 0.01,
            inner_steps: 5,
            batch_size: 2,
            inner_lr: 5e-5,
            outer_lr: 5e-5,
            lr_scale: 100.0,
            mc_samples: 1,
            epochs: 10,
            tasks_per_epoch: 0,
            seed: 0,
            reptile_epsilon: 0.1,
            n_query_batches: 1,
            eval_steps: 10,
            predict_samples: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.beta >= 0.0 && self.gamma >= 0.0) {
            return fail(format!("beta and gamma must be non-negative: {} {}", self.beta, self.gamma));
        }
        if self.inner_steps == 0 {
            return fail("inner_steps must be at least 1".into());
        }
        for (name, lr) in [("inner_lr", self.inner_lr), ("outer_lr", self.outer_lr)] {
            if !(lr > 0.0 && lr < 1.0) {
                return fail(format!("{name} must lie in (0, 1), got {lr}"));
            }
        }
        if !(self.lr_scale > 0.0 && self.lr_scale.is_finite()) {
            return fail(format!("lr_scale must be positive, got {}", self.lr_scale));
        }
        if !(self.c > 0.0) {
            return fail(format!("c must be positive, got {}", self.c));
        }
        GammaPrior::new(self.a0, self.b0)?;
        if self.batch_size == 0 || self.mc_samples == 0 || self.n_query_batches == 0 || self.predict_samples == 0 {
            return fail("batch_size, mc_samples, n_query_batches and predict_samples must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.reptile_epsilon) {
            return fail(format!("reptile_epsilon must lie in [0, 1], got {}", self.reptile_epsilon));
        }
        Ok(())
    }

    pub fn effective_inner_lr(&self) -> f64 {
        self.inner_lr * self.lr_scale
    }

    pub fn effective_outer_lr(&self) -> f64 {
        self.outer_lr * self.lr_scale
    }

    pub fn prior(&self) -> Result<GammaPrior> {
        GammaPrior::new(self.a0, self.b0)
    }

    fn visits_per_epoch(&self, n_seen: usize) -> usize {
        if self.tasks_per_epoch == 0 {
            n_seen
        } else {
            self.tasks_per_epoch
        }
    }
}

/// Fresh global posture for `method` over the frozen base.
pub fn init_posture(base: &BaseWeights, method: Method, c: f64, seed: u64) -> Result<Posture> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ada9);
    Posture::init(
        Role::Global,
        base.frozen_layers()?,
        base.config.d_rank,
        c,
        method.is_stochastic(),
        &mut rng,
    )
}

/// Standard normal noise for each stochastic layer, one set per sample.
pub fn draw_noise<R: Rng + ?Sized>(posture: &Posture, samples: usize, rng: &mut R) -> Vec<Vec<Tensor>> {
    if !posture.is_stochastic() {
        return vec![Vec::new(); samples];
    }
    (0..samples)
        .map(|_| {
            posture
                .layers()
                .iter()
                .map(|l| Tensor::randn(l.w0.shape(), 1.0, rng))
                .collect()
        })
        .collect()
}

/// Tape values of one loss evaluation.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub nll: Var,
    /// Unweighted KL to the global posture, when requested.
    pub kl: Option<Var>,
}

/// Sum over `batch` of `−log p(correct option | prompt)` with the posture's
/// layers substituted by one draw per entry of `noise`, averaged over
/// draws, plus `beta · KL(task || global)` when a global is given.
pub fn task_loss_on(
    tape: &mut Tape,
    model: &BoundModel,
    posture: &BoundPosture,
    global: Option<&BoundPosture>,
    batch: &[&Example],
    beta: f64,
    noise: &[Vec<Tensor>],
) -> Result<LossParts> {
    if batch.is_empty() {
        return Err(Error::Contract("task loss needs a nonempty batch".into()));
    }
    let draws = noise.len().max(1);
    let mut nll = tape.constant(Tensor::scalar(0.0));
    for s in 0..draws {
        let mut overrides = Overrides::new();
        for (li, layer) in posture.layers.iter().enumerate() {
            let eps = noise.get(s).and_then(|n| n.get(li)).map(|t| tape.constant(t.clone()));
            overrides.insert(layer.slot, sample_weights(tape, layer, eps)?);
        }
        for ex in batch {
            let lp = sequence_log_prob_on(tape, model, &ex.prompt, ex.correct(), &overrides)?;
            nll = tape.sub(nll, lp)?;
        }
    }
    let nll = tape.scale(nll, 1.0 / draws as f64);
    match global {
        Some(g) => {
            let kl = posture_kl(tape, posture, g)?;
            let weighted = tape.scale(kl, beta);
            let total = tape.add(nll, weighted)?;
            Ok(LossParts {
                total,
                nll,
                kl: Some(kl),
            })
        }
        None => Ok(LossParts {
            total: nll,
            nll,
            kl: None,
        }),
    }
}

/// Scalar task loss with fresh noise from `noise_seed`. A `beta` of zero or
/// a missing global gives the pure likelihood term.
pub fn task_loss(
    base: &BaseWeights,
    posture: &Posture,
    batch: &[&Example],
    global: Option<&Posture>,
    beta: f64,
    mc_samples: usize,
    noise_seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let noise = draw_noise(posture, mc_samples, &mut rng);
    let mut tape = Tape::new();
    let model = base.bind(&mut tape, false);
    let p = posture.bind(&mut tape, false);
    let g = global.map(|g| g.bind(&mut tape, false));
    let use_kl = g.as_ref().filter(|_| posture.is_stochastic());
    let parts = task_loss_on(&mut tape, &model, &p, use_kl, batch, beta, &noise)?;
    Ok(tape.scalar(parts.total))
}

fn finite(x: f64, what: &'static str) -> Result<f64> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::Domain {
            op: what,
            detail: format!("loss became {x}; learning rate or beta too large"),
        })
    }
}

fn gather<'a>(task: &'a Task, ids: &[usize]) -> Vec<&'a Example> {
    ids.iter().map(|&i| &task.examples[i]).collect()
}

/// One plain gradient step of the task loss on `posture`.
#[allow(clippy::too_many_arguments)]
fn gd_step<R: Rng + ?Sized>(
    base: &BaseWeights,
    posture: &mut Posture,
    global: Option<&Posture>,
    batch: &[&Example],
    beta: f64,
    mc_samples: usize,
    lr: f64,
    rng: &mut R,
) -> Result<f64> {
    let noise = draw_noise(posture, mc_samples, rng);
    let mut tape = Tape::new();
    let model = base.bind(&mut tape, false);
    let p = posture.bind(&mut tape, true);
    let g = global
        .filter(|_| posture.is_stochastic())
        .map(|g| g.bind(&mut tape, false));
    let parts = task_loss_on(&mut tape, &model, &p, g.as_ref(), batch, beta, &noise)?;
    let loss = finite(tape.scalar(parts.total), "inner step")?;
    let grads = tape.backward(parts.total)?;
    let gv = p.grad_vector(&tape, &grads);
    let mut params = posture.params();
    sgd_step(&mut params, &gv, lr);
    posture.set_params(&params)?;
    Ok(loss)
}

/// A task posture obtained from `global` by one plain gradient step per
/// support batch. ABMLL keeps the KL pull towards the global posture;
/// deterministic postures use the likelihood alone.
pub fn inner_adapt<R: Rng + ?Sized>(
    base: &BaseWeights,
    global: &Posture,
    support: &[Vec<&Example>],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Posture> {
    let mut task = global.task_copy();
    for batch in support {
        gd_step(
            base,
            &mut task,
            Some(global),
            batch,
            cfg.beta,
            cfg.mc_samples,
            cfg.effective_inner_lr(),
            rng,
        )?;
    }
    Ok(task)
}

/// Loss components of one outer step, each already weighted.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct OuterLog {
    pub nll: f64,
    /// `beta · KL(task || global)`
    pub beta_kl: f64,
    /// `gamma · (−log p(global))`
    pub gamma_prior: f64,
    pub objective: f64,
}

/// Full serializable training state.
#[derive(Debug)]
pub struct RunState {
    pub method: Method,
    pub global: Posture,
    pub adam: Adam,
    pub epoch: usize,
    pub grad_steps: u64,
    pub rng: ChaCha8Rng,
    pub history: Vec<MetricRow>,
}

impl RunState {
    pub fn new(base: &BaseWeights, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let global = init_posture(base, cfg.method, cfg.c, cfg.seed)?;
        let adam = Adam::new(global.param_count(), cfg.effective_outer_lr());
        Ok(Self {
            method: cfg.method,
            global,
            adam,
            epoch: 0,
            grad_steps: 0,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            history: Vec::new(),
        })
    }
}

/// Objective terms at the given task and global postures for one batch of
/// query examples, with global-side gradients recorded on `tape`.
pub struct OuterGraph {
    pub task: BoundPosture,
    pub global: BoundPosture,
    pub objective: Var,
    pub nll: Var,
    pub kl: Var,
    pub neg_log_prior: Var,
}

pub fn outer_objective_on(
    tape: &mut Tape,
    base: &BaseWeights,
    task: &Posture,
    global: &Posture,
    query: &[&Example],
    cfg: &TrainConfig,
    noise: &[Vec<Tensor>],
) -> Result<OuterGraph> {
    let model = base.bind(tape, false);
    let t = task.bind(tape, true);
    let g = global.bind(tape, true);
    let parts = task_loss_on(tape, &model, &t, Some(&g), query, cfg.beta, noise)?;
    let lp = posture_log_prior(tape, &g, cfg.prior()?)?;
    let neg_lp = tape.neg(lp);
    let weighted = tape.scale(neg_lp, cfg.gamma);
    let objective = tape.add(parts.total, weighted)?;
    Ok(OuterGraph {
        task: t,
        global: g,
        objective,
        nll: parts.nll,
        kl: parts.kl.expect("global given"),
        neg_log_prior: neg_lp,
    })
}

/// Adapt to `task`'s support batches, then move the global posture by one
/// Adam step on the query objective. The task-side gradient is applied to
/// the matching global parameters; the global side of the KL and the prior
/// contribute their exact gradients.
pub fn outer_step_abmll(state: &mut RunState, base: &BaseWeights, task: &Task, cfg: &TrainConfig) -> Result<OuterLog> {
    if !state.global.is_stochastic() {
        return Err(Error::Config("ABMLL needs a stochastic global posture".into()));
    }
    let ep = sample_episode(task, cfg.batch_size, cfg.inner_steps, cfg.n_query_batches, state.rng.gen())?;
    let support: Vec<Vec<&Example>> = ep.support.iter().map(|b| gather(task, b)).collect();
    let query: Vec<usize> = ep.query_ids().collect();
    let query = gather(task, &query);
    let adapted = inner_adapt(base, &state.global, &support, cfg, &mut state.rng)?;
    let noise = draw_noise(&adapted, cfg.mc_samples, &mut state.rng);

    let mut tape = Tape::new();
    let graph = outer_objective_on(&mut tape, base, &adapted, &state.global, &query, cfg, &noise)?;
    let log = OuterLog {
        nll: tape.scalar(graph.nll),
        beta_kl: cfg.beta * tape.scalar(graph.kl),
        gamma_prior: cfg.gamma * tape.scalar(graph.neg_log_prior),
        objective: finite(tape.scalar(graph.objective), "outer step")?,
    };
    let grads = tape.backward(graph.objective)?;
    let transported = graph.task.grad_vector(&tape, &grads);
    let direct = graph.global.grad_vector(&tape, &grads);
    let combined: Vec<f64> = transported.iter().zip(&direct).map(|(a, b)| a + b).collect();
    drop(adapted);
    let mut params = state.global.params();
    state.adam.step(&mut params, &combined);
    state.global.set_params(&params)?;
    state.grad_steps += cfg.inner_steps as u64 + 1;
    Ok(log)
}

/// Reptile: adapt by plain gradient descent, then move the global posture a
/// fraction `reptile_epsilon` of the way to the adapted one.
pub fn outer_step_reptile(state: &mut RunState, base: &BaseWeights, task: &Task, cfg: &TrainConfig) -> Result<OuterLog> {
    let ep = sample_episode(task, cfg.batch_size, cfg.inner_steps, 0, state.rng.gen())?;
    let support: Vec<Vec<&Example>> = ep.support.iter().map(|b| gather(task, b)).collect();
    let adapted = inner_adapt(base, &state.global, &support, cfg, &mut state.rng)?;
    let all: Vec<&Example> = support.iter().flatten().copied().collect();
    let nll = task_loss(base, &adapted, &all, None, 0.0, 1, 0)?;
    let phi = adapted.params();
    drop(adapted);
    let mut theta = state.global.params();
    for (t, p) in theta.iter_mut().zip(&phi) {
        *t += cfg.reptile_epsilon * (p - *t);
    }
    state.global.set_params(&theta)?;
    state.grad_steps += cfg.inner_steps as u64 + 1;
    Ok(OuterLog {
        nll,
        objective: nll,
        ..Default::default()
    })
}

/// One Adam step of the likelihood on `batch` for a deterministic posture.
fn adam_step(state: &mut RunState, base: &BaseWeights, batch: &[&Example]) -> Result<f64> {
    let mut tape = Tape::new();
    let model = base.bind(&mut tape, false);
    let p = state.global.bind(&mut tape, true);
    let parts = task_loss_on(&mut tape, &model, &p, None, batch, 0.0, &[])?;
    let loss = finite(tape.scalar(parts.total), "adapter step")?;
    let grads = tape.backward(parts.total)?;
    let g = p.grad_vector(&tape, &grads);
    let mut params = state.global.params();
    state.adam.step(&mut params, &g);
    state.global.set_params(&params)?;
    state.grad_steps += 1;
    Ok(loss)
}

/// One row of the per-epoch metric log.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub epoch: usize,
    pub method: Method,
    pub seed: u64,
    pub grad_steps: u64,
    pub accuracy: f64,
    pub ece: f64,
    pub train_nll: f64,
    pub beta_kl: f64,
    pub gamma_prior: f64,
}

impl MetricRow {
    pub const HEADER: &'static str =
        "epoch,method,seed,grad_steps,accuracy,ece,train_nll,beta_kl,gamma_prior";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}",
            self.epoch,
            self.method,
            self.seed,
            self.grad_steps,
            self.accuracy,
            self.ece,
            self.train_nll,
            self.beta_kl,
            self.gamma_prior
        )
    }
}

fn mean_logs(logs: &[OuterLog]) -> OuterLog {
    let n = logs.len().max(1) as f64;
    let mut m = OuterLog::default();
    for l in logs {
        m.nll += l.nll / n;
        m.beta_kl += l.beta_kl / n;
        m.gamma_prior += l.gamma_prior / n;
        m.objective += l.objective / n;
    }
    m
}

/// Training epochs one reported epoch spans for `method`.
pub fn epoch_stride(method: Method) -> usize {
    if method == Method::RegularLora {
        REGULAR_LORA_STRIDE
    } else {
        1
    }
}

/// Runs one raw training epoch and returns the mean logged terms.
pub fn train_epoch(state: &mut RunState, base: &BaseWeights, data: &MetaDataset, cfg: &TrainConfig) -> Result<OuterLog> {
    let n_seen = data.seen.len();
    if n_seen == 0 {
        return Err(Error::Data("no seen tasks to train on".into()));
    }
    let visits = cfg.visits_per_epoch(n_seen);
    let mut logs = Vec::with_capacity(visits);
    match cfg.method {
        Method::Abmll | Method::Reptile => {
            for k in 0..visits {
                let task = &data.seen[(state.epoch * visits + k) % n_seen];
                let log = if cfg.method == Method::Abmll {
                    outer_step_abmll(state, base, task, cfg)?
                } else {
                    outer_step_reptile(state, base, task, cfg)?
                };
                logs.push(log);
            }
        }
        Method::StructuredLora => {
            for k in 0..visits {
                let task = &data.seen[(state.epoch * visits + k) % n_seen];
                let ep = sample_episode(task, cfg.batch_size, cfg.inner_steps, 0, state.rng.gen())?;
                for b in &ep.support {
                    let batch = gather(task, b);
                    let nll = adam_step(state, base, &batch)?;
                    logs.push(OuterLog { nll, objective: nll, ..Default::default() });
                }
            }
        }
        Method::RegularLora => {
            use rand::seq::SliceRandom;
            let mut pool: Vec<(usize, usize)> = data
                .seen
                .iter()
                .enumerate()
                .flat_map(|(t, task)| (0..task.len()).map(move |e| (t, e)))
                .collect();
            pool.shuffle(&mut state.rng);
            for k in 0..visits {
                let batch: Vec<&Example> = (0..cfg.batch_size)
                    .map(|j| {
                        let (t, e) = pool[(k * cfg.batch_size + j) % pool.len()];
                        &data.seen[t].examples[e]
                    })
                    .collect();
                let nll = adam_step(state, base, &batch)?;
                logs.push(OuterLog { nll, objective: nll, ..Default::default() });
            }
        }
    }
    state.epoch += 1;
    Ok(mean_logs(&logs))
}

/// Trains until `cfg.epochs` reported epochs exist in `state.history`.
/// Regular LoRA runs six raw epochs per reported epoch.
pub fn train_from(
    state: &mut RunState,
    base: &BaseWeights,
    data: &MetaDataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&RunState) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    if state.method != cfg.method {
        return Err(Error::Config(format!(
            "state was trained with {}, config asks for {}",
            state.method, cfg.method
        )));
    }
    let stride = epoch_stride(cfg.method);
    let mut window: Vec<OuterLog> = Vec::new();
    while state.epoch < cfg.epochs * stride {
        window.push(train_epoch(state, base, data, cfg)?);
        if state.epoch.is_multiple_of(stride) {
            let m = mean_logs(&window);
            window.clear();
            let eval: EvalSummary = evaluate_suite(base, &state.global, &data.unseen, cfg)?;
            state.history.push(MetricRow {
                epoch: state.epoch / stride,
                method: cfg.method,
                seed: cfg.seed,
                grad_steps: state.grad_steps,
                accuracy: eval.accuracy,
                ece: eval.ece,
                train_nll: m.nll,
                beta_kl: m.beta_kl,
                gamma_prior: m.gamma_prior,
            });
            on_epoch(state)?;
        }
    }
    Ok(())
}

pub fn train(base: &BaseWeights, data: &MetaDataset, cfg: &TrainConfig) -> Result<RunState> {
    let mut state = RunState::new(base, cfg)?;
    train_from(&mut state, base, data, cfg, |_| Ok(()))?;
    Ok(state)
}
