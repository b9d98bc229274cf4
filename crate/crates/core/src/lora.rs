//! Low-rank adapter postures.
//!
//! Every adapted layer carries two adapter pairs: one whose product is the
//! mean offset `μ = B_μ A_μ` added to the frozen weight `W0`, and one whose
//! product (shifted by the constant `c`) gives the elementwise standard
//! deviation. A [`Posture`] is the full set of adapted layers, playing either
//! the global role (θ) or the per-task role (φ_i). Deterministic postures,
//! used by the plain LoRA baselines, omit the scale pair.

use std::cell::Cell;
use std::sync::Arc;

use rand::Rng;

use crate::distributions::{
    kl_diag_gaussian, log_prior_theta, reparam_sample, DiagonalGaussian, GammaPrior,
    GaussianVars, SCALE_FLOOR,
};
use crate::error::{Error, Result};
use crate::numerics::{Gradients, Tape, Tensor, Var};

/// Standard deviation of the `A` factor at initialization.
pub const A_INIT_STD: f64 = 0.02;

/// A LoRA factor pair `B[d_out×r] · A[r×d_in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterPair {
    pub b: Tensor,
    pub a: Tensor,
}

impl AdapterPair {
    pub fn new(b: Tensor, a: Tensor) -> Result<Self> {
        let (d_out, r) = b
            .dims2()
            .ok_or_else(|| Error::dim("AdapterPair", b.shape(), a.shape()))?;
        let (r2, d_in) = a
            .dims2()
            .ok_or_else(|| Error::dim("AdapterPair", b.shape(), a.shape()))?;
        if r != r2 {
            return Err(Error::dim("AdapterPair", b.shape(), a.shape()));
        }
        if r >= d_in.min(d_out) {
            return Err(Error::Config(format!(
                "adapter rank {r} must be below min(d_in={d_in}, d_out={d_out})"
            )));
        }
        Ok(Self { b, a })
    }

    /// `B = 0`, `A ~ N(0, 0.02²)`: the product starts at exactly zero.
    pub fn init<R: Rng + ?Sized>(d_out: usize, d_in: usize, rank: usize, rng: &mut R) -> Result<Self> {
        Self::new(
            Tensor::zeros(&[d_out, rank]),
            Tensor::randn(&[rank, d_in], A_INIT_STD, rng),
        )
    }

    pub fn d_out(&self) -> usize {
        self.b.shape()[0]
    }

    pub fn d_in(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    /// `(d_out + d_in) · rank`
    pub fn param_count(&self) -> usize {
        self.b.numel() + self.a.numel()
    }
}

/// The product `B·A`.
pub fn adapter_delta(pair: &AdapterPair) -> Result<Tensor> {
    let mut tape = Tape::new();
    let b = tape.constant(pair.b.clone());
    let a = tape.constant(pair.a.clone());
    let d = tape.matmul(b, a)?;
    Ok(tape.value(d).clone())
}

/// `sqrt((raw + c)² + floor²)`: a positive, smooth stand-in for `|raw + c|`.
pub fn effective_scale(raw: &Tensor, c: f64) -> Tensor {
    raw.map(|x| ((x + c) * (x + c) + SCALE_FLOOR * SCALE_FLOOR).sqrt())
}

fn effective_scale_on(tape: &mut Tape, raw: Var, c: f64) -> Result<Var> {
    let shifted = tape.add_scalar(raw, c);
    let sq = tape.square(shifted);
    let floored = tape.add_scalar(sq, SCALE_FLOOR * SCALE_FLOOR);
    tape.sqrt(floored)
}

/// Which projection inside an attention block is adapted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Projection {
    Query,
    Value,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LayerSlot {
    pub block: usize,
    pub proj: Projection,
}

#[derive(Clone, Debug)]
pub struct LayerAdapters {
    pub slot: LayerSlot,
    pub w0: Arc<Tensor>,
    pub mu: AdapterPair,
    pub sigma: Option<AdapterPair>,
    pub c: f64,
}

impl LayerAdapters {
    pub fn new(
        slot: LayerSlot,
        w0: Arc<Tensor>,
        mu: AdapterPair,
        sigma: Option<AdapterPair>,
        c: f64,
    ) -> Result<Self> {
        let shape = [mu.d_out(), mu.d_in()];
        if w0.shape() != shape {
            return Err(Error::dim("LayerAdapters", w0.shape(), &shape));
        }
        if let Some(s) = &sigma {
            if s.b.shape() != mu.b.shape() || s.a.shape() != mu.a.shape() {
                return Err(Error::dim("LayerAdapters", s.b.shape(), mu.b.shape()));
            }
        }
        if !(c > 0.0) {
            return Err(Error::Config(format!("scale offset c must be positive, got {c}")));
        }
        Ok(Self {
            slot,
            w0,
            mu,
            sigma,
            c,
        })
    }

    pub fn param_count(&self) -> usize {
        self.mu.param_count() + self.sigma.as_ref().map_or(0, AdapterPair::param_count)
    }

    /// `N(W0 + B_μA_μ, σ²)` with `σ` from the scale pair (or `c` alone for a
    /// deterministic layer).
    pub fn distribution(&self) -> Result<DiagonalGaussian> {
        let delta = adapter_delta(&self.mu)?;
        let mean: Vec<f64> = self
            .w0
            .data()
            .iter()
            .zip(delta.data())
            .map(|(w, d)| w + d)
            .collect();
        let raw = match &self.sigma {
            Some(s) => adapter_delta(s)?,
            None => Tensor::zeros(self.w0.shape()),
        };
        DiagonalGaussian::new(
            Tensor::new(self.w0.shape(), mean)?,
            effective_scale(&raw, self.c),
        )
    }

    /// A concrete weight matrix `mean + scale ⊙ noise`.
    pub fn sample(&self, noise: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let n = tape.constant(noise.clone());
        let w = sample_weights(&mut tape, &bound, Some(n))?;
        Ok(tape.value(w).clone())
    }

    fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundLayer {
        let mut put = |t: &Tensor| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let mu_b = put(&self.mu.b);
        let mu_a = put(&self.mu.a);
        let sigma = self.sigma.as_ref().map(|s| (put(&s.b), put(&s.a)));
        BoundLayer {
            slot: self.slot,
            w0: tape.constant((*self.w0).clone()),
            mu_b,
            mu_a,
            sigma,
            c: self.c,
        }
    }

    fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        let sigma = self.sigma.iter().flat_map(|s| [&s.b, &s.a]);
        [&self.mu.b, &self.mu.a].into_iter().chain(sigma)
    }

    fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        let sigma = self.sigma.iter_mut().flat_map(|s| [&mut s.b, &mut s.a]);
        [&mut self.mu.b, &mut self.mu.a].into_iter().chain(sigma)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Global,
    Task,
}

thread_local! {
    static LIVE: Cell<usize> = const { Cell::new(0) };
    static PEAK: Cell<usize> = const { Cell::new(0) };
}

/// Per-thread count of live [`Posture`] values.
pub mod census {
    use super::{LIVE, PEAK};

    pub fn live() -> usize {
        LIVE.with(|c| c.get())
    }

    pub fn peak() -> usize {
        PEAK.with(|c| c.get())
    }

    /// Restarts peak tracking from the current live count.
    pub fn reset_peak() {
        PEAK.with(|p| p.set(live()));
    }

    pub(super) fn enter() {
        let n = LIVE.with(|c| {
            c.set(c.get() + 1);
            c.get()
        });
        PEAK.with(|p| p.set(p.get().max(n)));
    }

    pub(super) fn leave() {
        LIVE.with(|c| c.set(c.get() - 1));
    }
}

/// The adapters of every adapted layer, in one role.
#[derive(Debug)]
pub struct Posture {
    role: Role,
    layers: Vec<LayerAdapters>,
}

impl Clone for Posture {
    fn clone(&self) -> Self {
        census::enter();
        Self {
            role: self.role,
            layers: self.layers.clone(),
        }
    }
}

impl Drop for Posture {
    fn drop(&mut self) {
        census::leave();
    }
}

impl Posture {
    pub fn new(role: Role, layers: Vec<LayerAdapters>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("a posture needs at least one adapted layer".into()));
        }
        let stochastic = layers[0].sigma.is_some();
        if layers.iter().any(|l| l.sigma.is_some() != stochastic) {
            return Err(Error::Config("mixed stochastic and deterministic layers".into()));
        }
        census::enter();
        Ok(Self { role, layers })
    }

    /// Fresh adapters over the given frozen weights.
    pub fn init<R: Rng + ?Sized>(
        role: Role,
        frozen: Vec<(LayerSlot, Arc<Tensor>)>,
        rank: usize,
        c: f64,
        stochastic: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(frozen.len());
        for (slot, w0) in frozen {
            let (d_out, d_in) = w0
                .dims2()
                .ok_or_else(|| Error::dim("Posture::init", w0.shape(), &[0, 0]))?;
            let mu = AdapterPair::init(d_out, d_in, rank, rng)?;
            let sigma = if stochastic {
                Some(AdapterPair::init(d_out, d_in, rank, rng)?)
            } else {
                None
            };
            layers.push(LayerAdapters::new(slot, w0, mu, sigma, c)?);
        }
        Self::new(role, layers)
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn layers(&self) -> &[LayerAdapters] {
        &self.layers
    }

    pub fn is_stochastic(&self) -> bool {
        self.layers[0].sigma.is_some()
    }

    /// A task-role copy sharing the same frozen weights.
    pub fn task_copy(&self) -> Posture {
        let mut p = self.clone();
        p.role = Role::Task;
        p
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerAdapters::param_count).sum()
    }

    /// All adapter entries in canonical order: per layer `B_μ, A_μ, B_σ, A_σ`.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            for t in l.tensors() {
                out.extend_from_slice(t.data());
            }
        }
        out
    }

    pub fn set_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(Error::dim("set_params", &[self.param_count()], &[values.len()]));
        }
        let mut offset = 0;
        for l in &mut self.layers {
            for t in l.tensors_mut() {
                let n = t.numel();
                t.data_mut().copy_from_slice(&values[offset..offset + n]);
                offset += n;
            }
        }
        Ok(())
    }

    pub fn check_compatible(&self, other: &Posture) -> Result<()> {
        let same = self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.slot == b.slot
                    && a.mu.b.shape() == b.mu.b.shape()
                    && a.mu.a.shape() == b.mu.a.shape()
                    && a.sigma.is_some() == b.sigma.is_some()
            });
        if same {
            Ok(())
        } else {
            Err(Error::Config("postures adapt different layers or shapes".into()))
        }
    }

    /// Records the posture on `tape`; adapters become leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundPosture {
        BoundPosture {
            layers: self.layers.iter().map(|l| l.bind(tape, trainable)).collect(),
        }
    }

    /// `Σ_layers KL(q_self || p_global)`.
    pub fn kl_to(&self, global: &Posture) -> Result<f64> {
        let mut tape = Tape::new();
        let t = self.bind(&mut tape, false);
        let g = global.bind(&mut tape, false);
        let kl = posture_kl(&mut tape, &t, &g)?;
        Ok(tape.scalar(kl))
    }

    pub fn log_prior(&self, prior: GammaPrior) -> Result<f64> {
        let mut tape = Tape::new();
        let g = self.bind(&mut tape, false);
        let lp = posture_log_prior(&mut tape, &g, prior)?;
        Ok(tape.scalar(lp))
    }
}

#[derive(Clone, Debug)]
pub struct BoundLayer {
    pub slot: LayerSlot,
    pub w0: Var,
    pub mu_b: Var,
    pub mu_a: Var,
    pub sigma: Option<(Var, Var)>,
    pub c: f64,
}

impl BoundLayer {
    fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        let sigma = self.sigma.iter().flat_map(|&(b, a)| [b, a]);
        [self.mu_b, self.mu_a].into_iter().chain(sigma)
    }
}

#[derive(Clone, Debug)]
pub struct BoundPosture {
    pub layers: Vec<BoundLayer>,
}

impl BoundPosture {
    /// Gradients of all adapter leaves in [`Posture::params`] order.
    pub fn grad_vector(&self, tape: &Tape, grads: &Gradients) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            for v in l.vars() {
                match grads.get(v) {
                    Some(g) => out.extend_from_slice(g),
                    None => out.extend(std::iter::repeat_n(0.0, tape.value(v).numel())),
                }
            }
        }
        out
    }
}

/// Adapter mean offset and (for stochastic layers) effective scale.
fn layer_moments(tape: &mut Tape, l: &BoundLayer) -> Result<(Var, Option<Var>)> {
    let delta = tape.matmul(l.mu_b, l.mu_a)?;
    let scale = match l.sigma {
        Some((b, a)) => {
            let raw = tape.matmul(b, a)?;
            Some(effective_scale_on(tape, raw, l.c)?)
        }
        None => None,
    };
    Ok((delta, scale))
}

/// `W0 + B_μA_μ (+ σ ⊙ noise)`. Deterministic layers ignore `noise`.
pub fn sample_weights(tape: &mut Tape, l: &BoundLayer, noise: Option<Var>) -> Result<Var> {
    let (delta, scale) = layer_moments(tape, l)?;
    let mean = tape.add(l.w0, delta)?;
    match (scale, noise) {
        (Some(scale), Some(noise)) => reparam_sample(tape, GaussianVars { mean, scale }, noise),
        _ => Ok(mean),
    }
}

/// Sum over layers of the closed-form KL between task and global layer
/// distributions. Both means carry the same `W0`, so only the adapter
/// offsets enter the difference.
pub fn posture_kl(tape: &mut Tape, task: &BoundPosture, global: &BoundPosture) -> Result<Var> {
    if task.layers.len() != global.layers.len() {
        return Err(Error::Config("posture layer counts differ".into()));
    }
    let mut total = tape.constant(Tensor::scalar(0.0));
    for (t, g) in task.layers.iter().zip(&global.layers) {
        if t.slot != g.slot {
            return Err(Error::Config(format!("layer {:?} vs {:?}", t.slot, g.slot)));
        }
        let (tm, ts) = layer_moments(tape, t)?;
        let (gm, gs) = layer_moments(tape, g)?;
        let (Some(ts), Some(gs)) = (ts, gs) else {
            return Err(Error::Config("KL needs stochastic postures".into()));
        };
        let kl = kl_diag_gaussian(
            tape,
            GaussianVars { mean: tm, scale: ts },
            GaussianVars { mean: gm, scale: gs },
        )?;
        total = tape.add(total, kl)?;
    }
    Ok(total)
}

/// `Σ_layers log p(μ_θ, σ_θ)` over the zero-centred adapter outputs.
pub fn posture_log_prior(tape: &mut Tape, global: &BoundPosture, prior: GammaPrior) -> Result<Var> {
    let mut total = tape.constant(Tensor::scalar(0.0));
    for l in &global.layers {
        let (mu, scale) = layer_moments(tape, l)?;
        let scale = scale.ok_or_else(|| Error::Config("log prior needs a stochastic posture".into()))?;
        let lp = log_prior_theta(tape, mu, scale, l.c, prior)?;
        total = tape.add(total, lp)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn frozen(rng: &mut ChaCha8Rng, d: usize) -> Vec<(LayerSlot, Arc<Tensor>)> {
        [Projection::Query, Projection::Value]
            .into_iter()
            .map(|proj| {
                (
                    LayerSlot { block: 0, proj },
                    Arc::new(Tensor::randn(&[d, d], 0.1, rng)),
                )
            })
            .collect()
    }

    #[test]
    fn zero_b_gives_zero_delta() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = AdapterPair::init(8, 8, 2, &mut rng).unwrap();
        assert_eq!(p.param_count(), 32);
        assert!(adapter_delta(&p).unwrap().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn rank_one_outer_product() {
        let p = AdapterPair {
            b: Tensor::from_rows(&[&[1.0], &[2.0]]),
            a: Tensor::from_rows(&[&[3.0, 4.0]]),
        };
        assert_eq!(adapter_delta(&p).unwrap().data(), &[3.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn rank_must_be_small() {
        assert!(AdapterPair::new(Tensor::zeros(&[4, 4]), Tensor::zeros(&[4, 4])).is_err());
        assert!(AdapterPair::new(Tensor::zeros(&[4, 2]), Tensor::zeros(&[3, 4])).is_err());
    }

    #[test]
    fn effective_scale_cases() {
        let c = 0.05;
        let s = effective_scale(&Tensor::zeros(&[3]), c);
        assert!(s.data().iter().all(|&x| (x - c).abs() <= SCALE_FLOOR));
        let s = effective_scale(&Tensor::vector(vec![-2.0 * c]), c);
        assert!((s.item() - c).abs() <= SCALE_FLOOR);
        let tiny = effective_scale(&Tensor::vector(vec![-c]), c);
        assert!(tiny.item() >= SCALE_FLOOR);
    }

    #[test]
    fn fresh_layer_distribution_is_w0() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = (-20f64).exp();
        let p = Posture::init(Role::Global, frozen(&mut rng, 6), 2, c, true, &mut rng).unwrap();
        let l = &p.layers()[0];
        let d = l.distribution().unwrap();
        assert_eq!(d.mean(), &*l.w0);
        // the floor dominates c = e^-20, leaving the layer essentially deterministic
        assert!(d.scale().data().iter().all(|&s| s >= c && s < 1.1e-8));
    }

    #[test]
    fn task_copy_shares_w0_and_has_zero_kl() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = Posture::init(Role::Global, frozen(&mut rng, 6), 2, 0.1, true, &mut rng).unwrap();
        let t = g.task_copy();
        assert_eq!(t.role(), Role::Task);
        for (a, b) in t.layers().iter().zip(g.layers()) {
            assert!(Arc::ptr_eq(&a.w0, &b.w0));
        }
        assert_eq!(t.kl_to(&g).unwrap(), 0.0);
    }

    #[test]
    fn kl_tracks_single_mean_perturbation() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let c = 0.1;
        let g = Posture::init(Role::Global, frozen(&mut rng, 5), 1, c, true, &mut rng).unwrap();
        let mut t = g.task_copy();
        // B = e_0 and A = δ·e_0 put δ at mean element (0,0)
        let delta = 0.03;
        let l = &mut t.layers[0];
        l.mu.b = Tensor::zeros(&[5, 1]);
        l.mu.b.data_mut()[0] = 1.0;
        l.mu.a = Tensor::zeros(&[1, 5]);
        l.mu.a.data_mut()[0] = delta;
        let sigma = (c * c + SCALE_FLOOR * SCALE_FLOOR).sqrt();
        let expected = delta * delta / (2.0 * sigma * sigma);
        assert!((t.kl_to(&g).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn sample_with_zero_noise_is_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut p = Posture::init(Role::Global, frozen(&mut rng, 4), 1, 0.1, true, &mut rng).unwrap();
        p.layers[0].mu.b = Tensor::randn(&[4, 1], 1.0, &mut rng);
        let l = &p.layers()[0];
        let w = l.sample(&Tensor::zeros(&[4, 4])).unwrap();
        let delta = adapter_delta(&l.mu).unwrap();
        for i in 0..16 {
            assert_eq!(w.data()[i], l.w0.data()[i] + delta.data()[i]);
        }
        assert!(l.sample(&Tensor::zeros(&[3, 4])).is_err());
    }

    #[test]
    fn prior_decreases_away_from_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let prior = GammaPrior::new(1.0, 0.01).unwrap();
        let mut p = Posture::init(Role::Global, frozen(&mut rng, 4), 1, 0.5, true, &mut rng).unwrap();
        let base = p.log_prior(prior).unwrap();
        p.layers[1].mu.b.data_mut()[2] = 0.3;
        let moved = p.log_prior(prior).unwrap();
        assert!(moved < base);
    }

    #[test]
    fn params_round_trip_and_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut p = Posture::init(Role::Global, frozen(&mut rng, 6), 2, 0.1, true, &mut rng).unwrap();
        assert_eq!(p.param_count(), 2 * 2 * (6 + 6) * 2);
        let mut v = p.params();
        v[0] = 3.5;
        p.set_params(&v).unwrap();
        assert_eq!(p.params(), v);
        assert!(p.set_params(&v[1..]).is_err());
        let det = Posture::init(Role::Global, frozen(&mut rng, 6), 2, 0.1, false, &mut rng).unwrap();
        assert_eq!(det.param_count(), 2 * (6 + 6) * 2);
        assert!(det.check_compatible(&p).is_err());
    }

    #[test]
    fn census_counts_live_postures() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let before = census::live();
        let g = Posture::init(Role::Global, frozen(&mut rng, 4), 1, 0.1, true, &mut rng).unwrap();
        census::reset_peak();
        {
            let _t = g.task_copy();
            assert_eq!(census::live(), before + 2);
        }
        assert_eq!(census::live(), before + 1);
        assert_eq!(census::peak(), before + 2);
    }
}
