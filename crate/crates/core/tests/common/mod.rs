//! Helpers shared by the integration test targets.
#![allow(dead_code, clippy::neg_cmp_op_on_partial_ord)]

use std::collections::HashMap;
use std::sync::Arc;

use abmll::distributions::{
    gamma_log_density, kl_diag_gaussian, log_prior_theta, reparam_sample, GammaPrior, GaussianVars,
};
use abmll::lm::{sequence_log_prob_on, BaseWeights, ModelConfig};
use abmll::lora::{posture_kl, posture_log_prior, sample_weights, LayerSlot, Posture, Projection, Role};
use abmll::numerics::{grad_check, Elementwise, Tape, Tensor, Var};
use abmll::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_EPS: f64 = 1e-5;
pub const GRAD_POINTS: u64 = 10;

/// How a random point is mapped into an operation's domain.
#[derive(Clone, Copy)]
enum Domain {
    Any,
    Positive,
    AwayFromZero,
}

type Body = Box<dyn Fn(&mut Tape, Var, u64) -> Result<Var>>;

struct Case {
    name: &'static str,
    shape: Vec<usize>,
    domain: Domain,
    body: Body,
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn point(shape: &[usize], domain: Domain, seed: u64) -> Tensor {
    let t = Tensor::randn(shape, 1.0, &mut rng(seed));
    match domain {
        Domain::Any => t,
        Domain::Positive => t.map(|v| v.abs() + 0.5),
        Domain::AwayFromZero => t.map(|v| v.signum() * (v.abs() + 0.2)),
    }
}

/// A fixed random tensor seeded from the point seed and a tag.
fn fixed(tape: &mut Tape, shape: &[usize], seed: u64, tag: u64) -> Var {
    let t = Tensor::randn(shape, 1.0, &mut rng(seed.wrapping_mul(7919) ^ tag));
    tape.constant(t)
}

/// `Σ y ⊙ R` with a fixed random `R`, turning any output into a scalar.
fn contract(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let r = fixed(tape, &shape, seed, 0xc0de);
    let p = tape.mul(y, r)?;
    Ok(tape.sum(p))
}

fn case(
    name: &'static str,
    shape: &[usize],
    domain: Domain,
    body: impl Fn(&mut Tape, Var, u64) -> Result<Var> + 'static,
) -> Case {
    Case {
        name,
        shape: shape.to_vec(),
        domain,
        body: Box::new(body),
    }
}

fn unary(name: &'static str, domain: Domain, f: fn(&mut Tape, Var) -> Result<Var>) -> Case {
    case(name, &[3, 4], domain, move |t, x, s| {
        let y = f(t, x)?;
        contract(t, y, s)
    })
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        vocab_size: 11,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 12,
        max_context: 8,
        d_rank: 2,
    }
}

fn all_cases() -> Vec<Case> {
    use Domain::*;
    let mut v = vec![
        unary("neg", Any, |t, x| Ok(t.neg(x))),
        unary("exp", Any, |t, x| Ok(t.exp(x))),
        unary("log", Positive, |t, x| t.log(x)),
        unary("square", Any, |t, x| Ok(t.square(x))),
        unary("sqrt", Positive, |t, x| t.sqrt(x)),
        unary("softplus", Any, |t, x| Ok(t.softplus(x))),
        unary("abs", AwayFromZero, |t, x| Ok(t.abs(x))),
        unary("gelu", Any, |t, x| Ok(t.gelu(x))),
        unary("scale", Any, |t, x| Ok(t.scale(x, -1.7))),
        unary("add_scalar", Any, |t, x| Ok(t.add_scalar(x, 0.3))),
        unary("transpose", Any, |t, x| t.transpose(x)),
        unary("sum_axis0", Any, |t, x| t.sum_axis(x, 0)),
        unary("sum_axis1", Any, |t, x| t.sum_axis(x, 1)),
        unary("mean_axis0", Any, |t, x| t.mean_axis(x, 0)),
        unary("mean_axis1", Any, |t, x| t.mean_axis(x, 1)),
        unary("slice_cols", Any, |t, x| t.slice_cols(x, 1, 3)),
        unary("slice_rows", Any, |t, x| t.slice_rows(x, 1, 3)),
        unary("softmax_rows", Any, |t, x| t.softmax_rows(x, false)),
        unary("softmax_rows_causal", Any, |t, x| t.softmax_rows(x, true)),
        unary("layer_norm_rows", Any, |t, x| t.layer_norm_rows(x)),
        unary("gather_rows", Any, |t, x| t.gather_rows(x, &[2, 0, 2, 1])),
        case("sum", &[5], Any, |t, x, _| Ok(t.sum(x))),
        case("mean", &[5], Any, |t, x, _| {
            let m = t.mean(x);
            Ok(t.square(m))
        }),
        case("softmax_cross_entropy", &[3, 5], Any, |t, x, _| {
            t.softmax_cross_entropy(x, &[4, 0, 2])
        }),
        case("concat_cols", &[3, 2], Any, |t, x, s| {
            let other = fixed(t, &[3, 3], s, 1);
            let sq = t.square(x);
            let y = t.concat_cols(&[x, other, sq])?;
            contract(t, y, s)
        }),
    ];
    for op in [
        Elementwise::Exp,
        Elementwise::Log,
        Elementwise::Square,
        Elementwise::Sqrt,
        Elementwise::Softplus,
        Elementwise::Abs,
    ] {
        let name = match op {
            Elementwise::Exp => "elementwise_exp",
            Elementwise::Log => "elementwise_log",
            Elementwise::Square => "elementwise_square",
            Elementwise::Sqrt => "elementwise_sqrt",
            Elementwise::Softplus => "elementwise_softplus",
            _ => "elementwise_abs",
        };
        v.push(case(name, &[2, 3], Positive, move |t, x, s| {
            let y = t.elementwise(op, x, None)?;
            contract(t, y, s)
        }));
    }

    type Binary = fn(&mut Tape, Var, Var) -> Result<Var>;
    type BinaryCase = (&'static str, &'static str, Binary, [usize; 2], [usize; 2]);
    let binaries: [BinaryCase; 8] = [
        ("add_lhs", "add_rhs", |t, a, b| t.add(a, b), [3, 4], [3, 4]),
        ("sub_lhs", "sub_rhs", |t, a, b| t.sub(a, b), [3, 4], [3, 4]),
        ("mul_lhs", "mul_rhs", |t, a, b| t.mul(a, b), [3, 4], [3, 4]),
        ("div_num", "div_den", |t, a, b| t.div(a, b), [3, 4], [3, 4]),
        ("matmul_lhs", "matmul_rhs", |t, a, b| t.matmul(a, b), [3, 4], [4, 2]),
        ("matmul_nt_lhs", "matmul_nt_rhs", |t, a, b| t.matmul_nt(a, b), [3, 4], [2, 4]),
        ("add_row_mat", "add_row_row", |t, a, b| t.add_row(a, b), [3, 4], [4, 1]),
        ("mul_row_mat", "mul_row_row", |t, a, b| t.mul_row(a, b), [3, 4], [4, 1]),
    ];
    for (lhs, rhs, f, sa, sb) in binaries {
        // Row operands are vectors.
        let sb: Vec<usize> = if sb[1] == 1 { vec![sb[0]] } else { sb.to_vec() };
        let is_div = lhs == "div_num";
        let sb_l = sb.clone();
        v.push(case(lhs, &sa, Any, move |t, x, s| {
            let mut b = Tensor::randn(&sb_l, 1.0, &mut rng(s ^ 0xb0b));
            if is_div {
                b = b.map(|v| v.abs() + 0.5);
            }
            let b = t.constant(b);
            let y = f(t, x, b)?;
            contract(t, y, s)
        }));
        let dom = if is_div { Positive } else { Any };
        v.push(case(rhs, &sb, dom, move |t, x, s| {
            let a = fixed(t, &sa, s, 0xa);
            let y = f(t, a, x)?;
            contract(t, y, s)
        }));
    }

    v.push(case("kl_diag_gaussian_mean", &[6], Any, |t, x, s| {
        let qs = t.constant(point(&[6], Positive, s ^ 1));
        let pm = fixed(t, &[6], s, 2);
        let ps = t.constant(point(&[6], Positive, s ^ 3));
        kl_diag_gaussian(t, GaussianVars { mean: x, scale: qs }, GaussianVars { mean: pm, scale: ps })
    }));
    v.push(case("kl_diag_gaussian_scale", &[6], Positive, |t, x, s| {
        let qm = fixed(t, &[6], s, 1);
        let pm = fixed(t, &[6], s, 2);
        let ps = t.constant(point(&[6], Positive, s ^ 3));
        kl_diag_gaussian(t, GaussianVars { mean: qm, scale: x }, GaussianVars { mean: pm, scale: ps })
    }));
    v.push(case("kl_diag_gaussian_prior_scale", &[6], Positive, |t, x, s| {
        let qm = fixed(t, &[6], s, 1);
        let qs = t.constant(point(&[6], Positive, s ^ 4));
        let pm = fixed(t, &[6], s, 2);
        kl_diag_gaussian(t, GaussianVars { mean: qm, scale: qs }, GaussianVars { mean: pm, scale: x })
    }));
    v.push(case("reparam_sample", &[6], Positive, |t, x, s| {
        let m = fixed(t, &[6], s, 1);
        let e = fixed(t, &[6], s, 2);
        let y = reparam_sample(t, GaussianVars { mean: m, scale: x }, e)?;
        let y2 = t.square(y);
        contract(t, y2, s)
    }));
    v.push(case("gamma_log_density", &[5], Positive, |t, x, _| {
        gamma_log_density(t, x, GammaPrior::new(2.5, 0.7)?)
    }));
    v.push(case("log_prior_theta_mean", &[5], Any, |t, x, s| {
        let sigma = t.constant(point(&[5], Positive, s ^ 9));
        log_prior_theta(t, x, sigma, 1.3, GammaPrior::new(1.0, 0.01)?)
    }));
    v.push(case("log_prior_theta_scale", &[5], Positive, |t, x, s| {
        let mu = fixed(t, &[5], s, 9);
        log_prior_theta(t, mu, x, 1.3, GammaPrior::new(2.0, 0.5)?)
    }));
    v.push(case("posture_objective", &[4, 2], Any, posture_objective));
    v.push(case("sequence_log_prob", &[8, 8], Any, |t, x, s| {
        let base = BaseWeights::init(&tiny_model(), s)?;
        let model = base.bind(t, false);
        let slot = LayerSlot { block: 0, proj: Projection::Value };
        let w = t.scale(x, 0.3);
        let overrides = HashMap::from([(slot, w)]);
        sequence_log_prob_on(t, &model, &[1, 4, 7], &[3, 9, 2], &overrides)
    }));
    v
}

/// Sampled weights, task KL and global log prior of random postures, as a
/// function of the task posture's mean factor `B`; the task scale factor is
/// tied to it.
fn posture_objective(t: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let mut r = rng(seed ^ 0x9051);
    let frozen = vec![(
        LayerSlot { block: 0, proj: Projection::Query },
        Arc::new(Tensor::randn(&[4, 4], 0.5, &mut r)),
    )];
    let mut global = Posture::init(Role::Global, frozen, 2, 0.5, true, &mut r)?;
    let n = global.param_count();
    global.set_params(Tensor::randn(&[n], 0.5, &mut r).data())?;

    let g = global.bind(t, false);
    let mut p = global.bind(t, false);
    let layer = &mut p.layers[0];
    layer.mu_b = x;
    if let Some((_, a)) = layer.sigma {
        layer.sigma = Some((t.scale(x, -0.7), a));
    }
    let noise = t.constant(Tensor::randn(&[4, 4], 1.0, &mut r));
    let w = sample_weights(t, &p.layers[0], Some(noise))?;
    let wsum = contract(t, w, seed)?;
    let kl = posture_kl(t, &p, &g)?;
    let lp = posture_log_prior(t, &p, GammaPrior::new(1.0, 0.01)?)?;
    let lp = t.scale(lp, 1e-3);
    let a = t.add(wsum, kl)?;
    t.add(a, lp)
}

/// Worst relative gradient error per operation over `GRAD_POINTS` seeded
/// points.
pub fn grad_sweep() -> Vec<(&'static str, f64)> {
    all_cases()
        .into_iter()
        .map(|c| {
            let worst = (0..GRAD_POINTS)
                .map(|s| {
                    let seed = 1000 + s;
                    let p = point(&c.shape, c.domain, seed);
                    grad_check(|t, x| (c.body)(t, x, seed), &p, GRAD_EPS)
                        .unwrap_or_else(|e| panic!("{}: {e}", c.name))
                })
                .fold(0.0f64, f64::max);
            (c.name, worst)
        })
        .collect()
}

/// Independent diagonal-Gaussian log density.
fn normal_log_pdf(x: &[f64], mean: &[f64], sd: &[f64]) -> f64 {
    x.iter()
        .zip(mean)
        .zip(sd)
        .map(|((x, m), s)| {
            let z = (x - m) / s;
            -0.5 * z * z - s.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
        })
        .sum()
}

pub const KL_SAMPLES: usize = 1_000_000;
pub const KL_REL_TOL: f64 = 0.01;

/// `(closed form, Monte Carlo)` KL for ten seeded configurations.
pub fn kl_pairs() -> Vec<(f64, f64)> {
    use abmll::distributions::DiagonalGaussian;
    use rand_distr::{Distribution, StandardNormal};
    (0..10u64)
        .map(|cfg| {
            let mut r = rng(500 + cfg);
            let d = 1 + (cfg as usize % 4);
            let gen = |r: &mut ChaCha8Rng, lo: f64, hi: f64| -> Vec<f64> {
                (0..d).map(|_| rand::Rng::gen_range(r, lo..hi)).collect()
            };
            let (qm, qs) = (gen(&mut r, -1.0, 1.0), gen(&mut r, 0.4, 1.6));
            let (pm, ps) = (gen(&mut r, -1.0, 1.0), gen(&mut r, 0.4, 1.6));
            let q = DiagonalGaussian::new(Tensor::vector(qm.clone()), Tensor::vector(qs.clone())).unwrap();
            let p = DiagonalGaussian::new(Tensor::vector(pm.clone()), Tensor::vector(ps.clone())).unwrap();
            let closed = q.kl(&p).unwrap();
            let mut x = vec![0.0; d];
            let mut acc = 0.0;
            for _ in 0..KL_SAMPLES {
                for i in 0..d {
                    let e: f64 = StandardNormal.sample(&mut r);
                    x[i] = qm[i] + qs[i] * e;
                }
                acc += normal_log_pdf(&x, &qm, &qs) - normal_log_pdf(&x, &pm, &ps);
            }
            (closed, acc / KL_SAMPLES as f64)
        })
        .collect()
}

pub const GAMMA_SETTINGS: [(f64, f64); 3] = [(1.0, 0.01), (2.0, 1.0), (3.0, 0.5)];

/// `∫ exp(log_density(x)) dx` over `(0, ∞)` by composite Simpson in
/// `u = ln x`.
pub fn gamma_mass(a0: f64, b0: f64) -> f64 {
    let prior = GammaPrior::new(a0, b0).unwrap();
    let (lo, hi) = (-80.0f64, (2000.0 / b0).ln());
    let n = 400_000usize;
    let h = (hi - lo) / n as f64;
    let f = |u: f64| {
        let x = u.exp();
        (prior.log_density(x) + u).exp()
    };
    let mut s = f(lo) + f(hi);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(lo + i as f64 * h);
    }
    s * h / 3.0
}

/// A small model that still fits every generated task.
pub fn small_model() -> ModelConfig {
    ModelConfig {
        vocab_size: 64,
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        d_ff: 24,
        max_context: 32,
        d_rank: 2,
    }
}

/// Short training settings for contract tests.
pub fn quick_train(method: abmll::metatrain::Method, seed: u64) -> abmll::metatrain::TrainConfig {
    abmll::metatrain::TrainConfig {
        method,
        seed,
        epochs: 2,
        tasks_per_epoch: 4,
        eval_steps: 2,
        c: 0.05,
        beta: 1e-3,
        lr_scale: 200.0,
        ..Default::default()
    }
}

/// Seeded prediction records with a spread of option counts and
/// confidences, including exact bin edges.
pub fn random_records(n: usize, seed: u64) -> Vec<abmll::metrics::PredictionRecord> {
    use rand::Rng;
    let mut r = rng(seed);
    (0..n)
        .map(|i| {
            let k = r.gen_range(2..=4usize);
            let confidence = if i % 50 == 0 {
                [0.5, 1.0, 0.25 + 0.05, 0.9][(i / 50) % 4]
            } else {
                r.gen_range(1.0 / k as f64..=1.0)
            };
            abmll::metrics::PredictionRecord {
                example_id: i,
                chosen: r.gen_range(0..k),
                confidence,
                correct: r.gen_bool(confidence),
                n_options: k,
            }
        })
        .collect()
}

/// ECE by scanning each bin's interval separately.
pub fn brute_force_ece(records: &[abmll::metrics::PredictionRecord], bins: usize) -> f64 {
    let n = records.len() as f64;
    let mut total = 0.0;
    for b in 0..bins {
        let lo = b as f64 / bins as f64;
        let hi = (b + 1) as f64 / bins as f64;
        let members: Vec<_> = records
            .iter()
            .filter(|r| r.confidence >= lo && (r.confidence < hi || (b + 1 == bins && r.confidence <= hi)))
            .collect();
        if members.is_empty() {
            continue;
        }
        let m = members.len() as f64;
        let conf: f64 = members.iter().map(|r| r.confidence).sum::<f64>() / m;
        let acc = members.iter().filter(|r| r.correct).count() as f64 / m;
        total += m / n * (acc - conf).abs();
    }
    total
}
