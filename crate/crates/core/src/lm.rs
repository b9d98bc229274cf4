//! A small pre-norm decoder-only transformer.
//!
//! Weight matrices follow the `W[d_out × d_in]` convention and are applied
//! to row-stacked activations as `X · Wᵀ`. The query and value projections
//! of each block can be replaced per call by sampled adapter weights.

use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::lora::{LayerSlot, Projection};
use crate::numerics::{softmax_into, Gradients, Tape, Tensor, Var};
use crate::optim::Adam;

const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_context: usize,
    pub d_rank: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            max_context: 64,
            d_rank: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.vocab_size == 0 || self.d_model == 0 || self.max_context == 0 || self.d_ff == 0 {
            return fail(format!("model dimensions must be positive: {self:?}"));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.d_rank == 0 || self.d_rank >= self.d_model {
            return fail(format!("d_rank {} must be in [1, d_model)", self.d_rank));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Query and value projection of every block.
    pub fn adapted_slots(&self) -> Vec<LayerSlot> {
        (0..self.n_layers)
            .flat_map(|block| {
                [Projection::Query, Projection::Value].map(|proj| LayerSlot { block, proj })
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl BlockWeights {
    fn init<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        let proj_std = INIT_STD / (2.0 * cfg.n_layers.max(1) as f64).sqrt();
        Self {
            ln1_g: Tensor::full(&[d], 1.0),
            ln1_b: Tensor::zeros(&[d]),
            wq: Tensor::randn(&[d, d], INIT_STD, rng),
            wk: Tensor::randn(&[d, d], INIT_STD, rng),
            wv: Tensor::randn(&[d, d], INIT_STD, rng),
            wo: Tensor::randn(&[d, d], proj_std, rng),
            ln2_g: Tensor::full(&[d], 1.0),
            ln2_b: Tensor::zeros(&[d]),
            w1: Tensor::randn(&[cfg.d_ff, d], INIT_STD, rng),
            b1: Tensor::zeros(&[cfg.d_ff]),
            w2: Tensor::randn(&[d, cfg.d_ff], proj_std, rng),
            b2: Tensor::zeros(&[d]),
        }
    }

    fn tensors(&self) -> [&Tensor; 12] {
        [
            &self.ln1_g, &self.ln1_b, &self.wq, &self.wk, &self.wv, &self.wo, &self.ln2_g,
            &self.ln2_b, &self.w1, &self.b1, &self.w2, &self.b2,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 12] {
        [
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ln2_g,
            &mut self.ln2_b,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }
}

const BLOCK_NAMES: [&str; 12] = [
    "ln1_g", "ln1_b", "wq", "wk", "wv", "wo", "ln2_g", "ln2_b", "w1", "b1", "w2", "b2",
];

/// Every matrix of the pretrained model.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseWeights {
    pub config: ModelConfig,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub blocks: Vec<BlockWeights>,
    pub lnf_g: Tensor,
    pub lnf_b: Tensor,
    pub head: Tensor,
}

impl BaseWeights {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let tok_emb = Tensor::randn(&[config.vocab_size, d], INIT_STD, &mut rng);
        let pos_emb = Tensor::randn(&[config.max_context, d], INIT_STD, &mut rng);
        let blocks = (0..config.n_layers)
            .map(|_| BlockWeights::init(config, &mut rng))
            .collect();
        let head = Tensor::randn(&[config.vocab_size, d], INIT_STD, &mut rng);
        Ok(Self {
            config: config.clone(),
            tok_emb,
            pos_emb,
            blocks,
            lnf_g: Tensor::full(&[d], 1.0),
            lnf_b: Tensor::zeros(&[d]),
            head,
        })
    }

    /// Tensors with stable names, in serialization order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, t) in BLOCK_NAMES.iter().zip(b.tensors()) {
                out.push((format!("blocks.{i}.{name}"), t));
            }
        }
        out.push(("lnf_g".into(), &self.lnf_g));
        out.push(("lnf_b".into(), &self.lnf_b));
        out.push(("head".into(), &self.head));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out.push(&mut self.lnf_g);
        out.push(&mut self.lnf_b);
        out.push(&mut self.head);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (_, t) in self.named_tensors() {
            out.extend_from_slice(t.data());
        }
        out
    }

    pub fn set_params(&mut self, values: &[f64]) -> Result<()> {
        let n = self.param_count();
        if values.len() != n {
            return Err(Error::dim("BaseWeights::set_params", &[n], &[values.len()]));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            let k = t.numel();
            t.data_mut().copy_from_slice(&values[offset..offset + k]);
            offset += k;
        }
        Ok(())
    }

    pub fn weight(&self, slot: LayerSlot) -> Result<&Tensor> {
        let block = self
            .blocks
            .get(slot.block)
            .ok_or_else(|| Error::Config(format!("no block {}", slot.block)))?;
        Ok(match slot.proj {
            Projection::Query => &block.wq,
            Projection::Value => &block.wv,
        })
    }

    /// Frozen copies of every adapted matrix, for building postures.
    pub fn frozen_layers(&self) -> Result<Vec<(LayerSlot, Arc<Tensor>)>> {
        self.config
            .adapted_slots()
            .into_iter()
            .map(|s| Ok((s, Arc::new(self.weight(s)?.clone()))))
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.is_finite())
    }

    /// Records all weights on `tape`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundModel {
        let mut put = |t: &Tensor| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let tok_emb = put(&self.tok_emb);
        let pos_emb = put(&self.pos_emb);
        let blocks = self
            .blocks
            .iter()
            .map(|b| {
                let v = b.tensors().map(&mut put);
                BoundBlock { vars: v }
            })
            .collect();
        BoundModel {
            config: self.config.clone(),
            tok_emb,
            pos_emb,
            blocks,
            lnf_g: put(&self.lnf_g),
            lnf_b: put(&self.lnf_b),
            head: put(&self.head),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BoundBlock {
    vars: [Var; 12],
}

impl BoundBlock {
    fn get(&self, name: &str) -> Var {
        let i = BLOCK_NAMES.iter().position(|n| *n == name).expect("block tensor");
        self.vars[i]
    }
}

/// Model weights recorded on a tape.
#[derive(Clone, Debug)]
pub struct BoundModel {
    config: ModelConfig,
    tok_emb: Var,
    pos_emb: Var,
    blocks: Vec<BoundBlock>,
    lnf_g: Var,
    lnf_b: Var,
    head: Var,
}

impl BoundModel {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.tok_emb, self.pos_emb];
        for b in &self.blocks {
            out.extend(b.vars);
        }
        out.extend([self.lnf_g, self.lnf_b, self.head]);
        out
    }

    /// Gradients in [`BaseWeights::params`] order.
    pub fn grad_vector(&self, tape: &Tape, grads: &Gradients) -> Vec<f64> {
        let mut out = Vec::new();
        for v in self.vars() {
            match grads.get(v) {
                Some(g) => out.extend_from_slice(g),
                None => out.extend(std::iter::repeat_n(0.0, tape.value(v).numel())),
            }
        }
        out
    }
}

/// Replacement weight matrices for adapted layers.
pub type Overrides = HashMap<LayerSlot, Var>;

fn layer_norm_affine(tape: &mut Tape, x: Var, g: Var, b: Var) -> Result<Var> {
    let n = tape.layer_norm_rows(x)?;
    let s = tape.mul_row(n, g)?;
    tape.add_row(s, b)
}

/// Logits `[n × vocab]` for `tokens`, each position attending only to
/// itself and earlier positions.
pub fn forward_on(
    tape: &mut Tape,
    model: &BoundModel,
    tokens: &[usize],
    overrides: &Overrides,
) -> Result<Var> {
    let cfg = &model.config;
    let n = tokens.len();
    if n == 0 {
        return Err(Error::Contract("forward needs at least one token".into()));
    }
    if n > cfg.max_context {
        return Err(Error::Length {
            len: n,
            max: cfg.max_context,
        });
    }
    for (slot, &v) in overrides {
        let block = slot.block;
        if block >= cfg.n_layers {
            return Err(Error::Config(format!("override for missing block {block}")));
        }
        let expected = [cfg.d_model, cfg.d_model];
        if tape.shape(v) != expected {
            return Err(Error::dim("override", &expected, tape.shape(v)));
        }
    }

    let tok = tape.gather_rows(model.tok_emb, tokens)?;
    let pos = tape.slice_rows(model.pos_emb, 0, n)?;
    let mut x = tape.add(tok, pos)?;
    let dh = cfg.head_dim();
    let inv_sqrt = 1.0 / (dh as f64).sqrt();

    for (i, b) in model.blocks.iter().enumerate() {
        let wq = overrides
            .get(&LayerSlot { block: i, proj: Projection::Query })
            .copied()
            .unwrap_or(b.get("wq"));
        let wv = overrides
            .get(&LayerSlot { block: i, proj: Projection::Value })
            .copied()
            .unwrap_or(b.get("wv"));

        let h = layer_norm_affine(tape, x, b.get("ln1_g"), b.get("ln1_b"))?;
        let q = tape.matmul_nt(h, wq)?;
        let k = tape.matmul_nt(h, b.get("wk"))?;
        let v = tape.matmul_nt(h, wv)?;
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for hd in 0..cfg.n_heads {
            let (lo, hi) = (hd * dh, (hd + 1) * dh);
            let qh = tape.slice_cols(q, lo, hi)?;
            let kh = tape.slice_cols(k, lo, hi)?;
            let vh = tape.slice_cols(v, lo, hi)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let scores = tape.scale(scores, inv_sqrt);
            let p = tape.softmax_rows(scores, true)?;
            heads.push(tape.matmul(p, vh)?);
        }
        let att = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)?
        };
        let proj = tape.matmul_nt(att, b.get("wo"))?;
        x = tape.add(x, proj)?;

        let h2 = layer_norm_affine(tape, x, b.get("ln2_g"), b.get("ln2_b"))?;
        let up = tape.matmul_nt(h2, b.get("w1"))?;
        let up = tape.add_row(up, b.get("b1"))?;
        let act = tape.gelu(up);
        let down = tape.matmul_nt(act, b.get("w2"))?;
        let down = tape.add_row(down, b.get("b2"))?;
        x = tape.add(x, down)?;
    }

    let xf = layer_norm_affine(tape, x, model.lnf_g, model.lnf_b)?;
    tape.matmul_nt(xf, model.head)
}

/// `Σ_t log softmax(logits_t)[cont_t]` over the continuation, conditioned
/// on the prompt.
pub fn sequence_log_prob_on(
    tape: &mut Tape,
    model: &BoundModel,
    prompt: &[usize],
    continuation: &[usize],
    overrides: &Overrides,
) -> Result<Var> {
    if continuation.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    if prompt.is_empty() {
        return Err(Error::Contract("prompt must hold at least one token".into()));
    }
    let total = prompt.len() + continuation.len();
    if total > model.config.max_context {
        return Err(Error::Length {
            len: total,
            max: model.config.max_context,
        });
    }
    let mut input = prompt.to_vec();
    input.extend_from_slice(&continuation[..continuation.len() - 1]);
    let logits = forward_on(tape, model, &input, overrides)?;
    let start = prompt.len() - 1;
    let rows = tape.slice_rows(logits, start, input.len())?;
    let ce = tape.softmax_cross_entropy(rows, continuation)?;
    Ok(tape.scale(ce, -(continuation.len() as f64)))
}

fn bind_overrides(tape: &mut Tape, overrides: &[(LayerSlot, Tensor)]) -> Overrides {
    overrides
        .iter()
        .map(|(s, t)| (*s, tape.constant(t.clone())))
        .collect()
}

/// Logits for `tokens` with the given adapted weights substituted.
pub fn forward_logits(
    tokens: &[usize],
    weights: &BaseWeights,
    overrides: &[(LayerSlot, Tensor)],
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let model = weights.bind(&mut tape, false);
    let ov = bind_overrides(&mut tape, overrides);
    let logits = forward_on(&mut tape, &model, tokens, &ov)?;
    Ok(tape.value(logits).clone())
}

pub fn sequence_log_prob(
    prompt: &[usize],
    continuation: &[usize],
    weights: &BaseWeights,
    overrides: &[(LayerSlot, Tensor)],
) -> Result<f64> {
    let mut tape = Tape::new();
    let model = weights.bind(&mut tape, false);
    let ov = bind_overrides(&mut tape, overrides);
    let lp = sequence_log_prob_on(&mut tape, &model, prompt, continuation, &ov)?;
    Ok(tape.scalar(lp))
}

/// Mean per-token log-probability of each option after `prompt`.
pub fn option_scores_on(
    tape: &mut Tape,
    model: &BoundModel,
    prompt: &[usize],
    options: &[Vec<usize>],
    overrides: &Overrides,
) -> Result<Vec<f64>> {
    if options.len() < 2 {
        return Err(Error::Contract(format!(
            "need at least two options, got {}",
            options.len()
        )));
    }
    options
        .iter()
        .map(|opt| {
            if opt.is_empty() {
                return Err(Error::Contract("empty option".into()));
            }
            let lp = sequence_log_prob_on(tape, model, prompt, opt, overrides)?;
            Ok(tape.scalar(lp) / opt.len() as f64)
        })
        .collect()
}

pub fn option_scores(
    prompt: &[usize],
    options: &[Vec<usize>],
    weights: &BaseWeights,
    overrides: &[(LayerSlot, Tensor)],
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let model = weights.bind(&mut tape, false);
    let ov = bind_overrides(&mut tape, overrides);
    option_scores_on(&mut tape, &model, prompt, options, &ov)
}

/// Settings for [`pretrain_base`].
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    /// Tokens per training window.
    pub window: usize,
    pub batch: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            lr: 3e-3,
            seed: 0,
            window: 32,
            batch: 4,
        }
    }
}

fn window_loss(
    tape: &mut Tape,
    model: &BoundModel,
    corpus: &[usize],
    start: usize,
    len: usize,
) -> Result<Var> {
    let logits = forward_on(tape, model, &corpus[start..start + len], &Overrides::new())?;
    tape.softmax_cross_entropy(logits, &corpus[start + 1..start + len + 1])
}

fn effective_window(corpus: &[usize], cfg: &ModelConfig, window: usize) -> Result<usize> {
    if corpus.len() < 2 {
        return Err(Error::Data("pretraining corpus needs at least two tokens".into()));
    }
    if let Some(&t) = corpus.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::Data(format!(
            "corpus token {t} outside vocabulary of {}",
            cfg.vocab_size
        )));
    }
    Ok(window.min(cfg.max_context).min(corpus.len() - 1).max(1))
}

/// Mean next-token cross-entropy over consecutive windows covering the
/// corpus (at most `max_windows` of them).
pub fn corpus_loss(weights: &BaseWeights, corpus: &[usize], window: usize, max_windows: usize) -> Result<f64> {
    let w = effective_window(corpus, &weights.config, window)?;
    let mut total = 0.0;
    let mut count = 0;
    let mut start = 0;
    while start + w < corpus.len() && count < max_windows {
        let mut tape = Tape::new();
        let model = weights.bind(&mut tape, false);
        let l = window_loss(&mut tape, &model, corpus, start, w)?;
        total += tape.scalar(l);
        count += 1;
        start += w;
    }
    Ok(total / count.max(1) as f64)
}

/// Next-token pretraining with Adam on random windows of `corpus`.
pub fn pretrain_base(corpus: &[usize], config: &ModelConfig, pc: &PretrainConfig) -> Result<BaseWeights> {
    config.validate()?;
    let w = effective_window(corpus, config, pc.window)?;
    let mut weights = BaseWeights::init(config, pc.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(pc.seed.wrapping_add(0x9e37_79b9));
    let mut params = weights.params();
    let mut adam = Adam::new(params.len(), pc.lr);
    let batch = pc.batch.max(1);
    for _ in 0..pc.steps {
        let mut tape = Tape::new();
        let model = weights.bind(&mut tape, true);
        let mut total = tape.constant(Tensor::scalar(0.0));
        for _ in 0..batch {
            let start = rng.gen_range(0..corpus.len() - w);
            let l = window_loss(&mut tape, &model, corpus, start, w)?;
            total = tape.add(total, l)?;
        }
        let loss = tape.scale(total, 1.0 / batch as f64);
        let grads = tape.backward(loss)?;
        let g = model.grad_vector(&tape, &grads);
        adam.step(&mut params, &g);
        weights.set_params(&params)?;
    }
    Ok(weights)
}

/// Softmax of option scores.
pub fn normalize_scores(scores: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; scores.len()];
    softmax_into(scores, &mut out);
    out
}
