mod common;

use abmll::lm::BaseWeights;
use abmll::lora::posture_log_prior;
use abmll::metatrain::{
    draw_noise, inner_adapt, outer_objective_on, outer_step_abmll, task_loss, task_loss_on, train,
    train_epoch, train_from, Method, RunState, TrainConfig, REGULAR_LORA_STRIDE,
};
use abmll::numerics::Tape;
use abmll::tasks::{generate_suite, sample_episode, Example, MetaDataset, Task};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn setup(seed: u64) -> (BaseWeights, MetaDataset) {
    let base = BaseWeights::init(&common::small_model(), seed).unwrap();
    let data = generate_suite(seed, 4, 1, 40).unwrap();
    (base, data)
}

fn batch<'a>(task: &'a Task, ids: &[usize]) -> Vec<&'a Example> {
    ids.iter().map(|&i| &task.examples[i]).collect()
}

#[test]
fn zero_beta_gives_the_pure_likelihood() {
    let (base, data) = setup(1);
    let tc = common::quick_train(Method::Abmll, 1);
    let state = RunState::new(&base, &tc).unwrap();
    let mut other = state.global.task_copy();
    let shifted: Vec<f64> = other.params().iter().map(|v| v + 0.01).collect();
    other.set_params(&shifted).unwrap();
    let b = batch(&data.seen[0], &[0, 1]);
    let with_none = task_loss(&base, &other, &b, None, 0.0, 1, 7).unwrap();
    let with_zero = task_loss(&base, &other, &b, Some(&state.global), 0.0, 1, 7).unwrap();
    assert_eq!(with_none, with_zero);
    let same = task_loss(&base, &state.global, &b, Some(&state.global), 1.0, 1, 7).unwrap();
    let plain = task_loss(&base, &state.global, &b, None, 0.0, 1, 7).unwrap();
    assert!((same - plain).abs() <= 1e-12);
}

#[test]
fn empty_support_returns_a_copy_of_the_global() {
    let (base, _) = setup(2);
    let tc = common::quick_train(Method::Abmll, 2);
    let state = RunState::new(&base, &tc).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let copy = inner_adapt(&base, &state.global, &[], &tc, &mut rng).unwrap();
    assert_eq!(copy.params(), state.global.params());
}

#[test]
fn adaptation_lowers_support_loss_and_is_task_specific() {
    let (base, data) = setup(3);
    for method in [Method::Abmll, Method::Reptile] {
        let tc = common::quick_train(method, 3);
        let state = RunState::new(&base, &tc).unwrap();
        let mut postures = Vec::new();
        for task in data.seen.iter().take(2) {
            let ep = sample_episode(task, 2, 5, 0, 11).unwrap();
            let support: Vec<Vec<&Example>> = ep.support.iter().map(|b| batch(task, b)).collect();
            let all: Vec<&Example> = support.iter().flatten().copied().collect();
            let before = task_loss(&base, &state.global, &all, None, 0.0, 0, 0).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let adapted = inner_adapt(&base, &state.global, &support, &tc, &mut rng).unwrap();
            // Zero draws scores the posterior mean.
            let after = task_loss(&base, &adapted, &all, None, 0.0, 0, 0).unwrap();
            assert!(after < before, "{method}: {after} !< {before}");
            postures.push(adapted.params());
        }
        assert_ne!(postures[0], postures[1]);
    }
}

#[test]
fn abmll_step_matches_a_hand_unrolled_update() {
    let (base, data) = setup(4);
    let tc = TrainConfig {
        inner_steps: 2,
        ..common::quick_train(Method::Abmll, 4)
    };
    let task = &data.seen[0];
    let mut state = RunState::new(&base, &tc).unwrap();

    // Replay the same random stream by hand.
    let mut rng = state.rng.clone();
    let ep = sample_episode(task, tc.batch_size, tc.inner_steps, tc.n_query_batches, rng.gen()).unwrap();
    let mut phi = state.global.task_copy();
    for ids in &ep.support {
        let noise = draw_noise(&phi, tc.mc_samples, &mut rng);
        let mut tape = Tape::new();
        let model = base.bind(&mut tape, false);
        let p = phi.bind(&mut tape, true);
        let g = state.global.bind(&mut tape, false);
        let parts = task_loss_on(&mut tape, &model, &p, Some(&g), &batch(task, ids), tc.beta, &noise).unwrap();
        let grads = tape.backward(parts.total).unwrap();
        let gv = p.grad_vector(&tape, &grads);
        let lr = tc.inner_lr * tc.lr_scale;
        let next: Vec<f64> = phi.params().iter().zip(&gv).map(|(w, g)| w - lr * g).collect();
        phi.set_params(&next).unwrap();
    }
    let noise = draw_noise(&phi, tc.mc_samples, &mut rng);
    let query: Vec<usize> = ep.query.concat();
    let mut tape = Tape::new();
    let model = base.bind(&mut tape, false);
    let p = phi.bind(&mut tape, true);
    let g = state.global.bind(&mut tape, true);
    let parts = task_loss_on(&mut tape, &model, &p, Some(&g), &batch(task, &query), tc.beta, &noise).unwrap();
    let lp = posture_log_prior(&mut tape, &g, tc.prior().unwrap()).unwrap();
    let neg = tape.scale(lp, -tc.gamma);
    let obj = tape.add(parts.total, neg).unwrap();
    let grads = tape.backward(obj).unwrap();
    let gt = p.grad_vector(&tape, &grads);
    let gg = g.grad_vector(&tape, &grads);
    let lr = tc.outer_lr * tc.lr_scale;
    let expected: Vec<f64> = state
        .global
        .params()
        .iter()
        .zip(gt.iter().zip(&gg))
        .map(|(w, (a, b))| {
            let grad = a + b;
            let m_hat = (0.1 * grad) / 0.1;
            let v_hat = (0.001 * grad * grad) / 0.001;
            w - lr * m_hat / (v_hat.sqrt() + 1e-8)
        })
        .collect();
    drop(phi);

    outer_step_abmll(&mut state, &base, task, &tc).unwrap();
    let got = state.global.params();
    let worst = got
        .iter()
        .zip(&expected)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(worst <= 1e-10, "{worst}");
    assert_eq!(state.grad_steps, 3);
}

#[test]
fn outer_step_decreases_the_frozen_objective_for_some_step_size() {
    let (base, data) = setup(5);
    let task = &data.seen[1];
    let mut decreased = false;
    for lr in [1e-2, 1e-3, 1e-4] {
        let tc = TrainConfig {
            outer_lr: lr,
            lr_scale: 1.0,
            ..common::quick_train(Method::Abmll, 5)
        };
        let mut state = RunState::new(&base, &tc).unwrap();
        // Freeze the episode, the adapted posture and the noise.
        let mut rng = state.rng.clone();
        let ep = sample_episode(task, 2, tc.inner_steps, 1, rng.gen()).unwrap();
        let support: Vec<Vec<&Example>> = ep.support.iter().map(|b| batch(task, b)).collect();
        let adapted = inner_adapt(&base, &state.global, &support, &tc, &mut rng).unwrap();
        let noise = draw_noise(&adapted, 1, &mut rng);
        let query = batch(task, &ep.query[0]);
        let objective = |global: &abmll::lora::Posture| {
            let mut tape = Tape::new();
            let g = outer_objective_on(&mut tape, &base, &adapted, global, &query, &tc, &noise).unwrap();
            tape.scalar(g.objective)
        };
        let before = objective(&state.global);
        outer_step_abmll(&mut state, &base, task, &tc).unwrap();
        if objective(&state.global) < before {
            decreased = true;
        }
    }
    assert!(decreased);
}

#[test]
fn strong_prior_shrinks_the_global_mean() {
    let (base, data) = setup(6);
    let tc = TrainConfig {
        gamma: 1e3,
        c: 0.05,
        tasks_per_epoch: 1,
        ..common::quick_train(Method::Abmll, 6)
    };
    let mut state = RunState::new(&base, &tc).unwrap();
    // Start from a large adapter mean so the prior has something to remove.
    let mut p = state.global.params();
    for v in p.iter_mut() {
        *v += 0.5;
    }
    state.global.set_params(&p).unwrap();
    let norm = |s: &RunState| -> f64 {
        s.global
            .layers()
            .iter()
            .map(|l| {
                let d = abmll::lora::adapter_delta(&l.mu).unwrap();
                d.data().iter().map(|x| x * x).sum::<f64>()
            })
            .sum::<f64>()
            .sqrt()
    };
    let mut last = norm(&state);
    for _ in 0..6 {
        outer_step_abmll(&mut state, &base, &data.seen[0], &tc).unwrap();
        let n = norm(&state);
        assert!(n < last, "{n} !< {last}");
        last = n;
    }
}

#[test]
fn logged_terms_are_finite_and_kl_non_negative() {
    let (base, data) = setup(7);
    let tc = TrainConfig {
        beta: 5e-10,
        gamma: 1e-6,
        ..common::quick_train(Method::Abmll, 7)
    };
    let mut state = RunState::new(&base, &tc).unwrap();
    for task in &data.seen {
        let log = outer_step_abmll(&mut state, &base, task, &tc).unwrap();
        assert!(log.nll.is_finite() && log.beta_kl.is_finite() && log.gamma_prior.is_finite());
        assert!(log.beta_kl >= 0.0);
    }
}

#[test]
fn reptile_with_zero_step_keeps_the_global() {
    let (base, data) = setup(8);
    let tc = TrainConfig {
        reptile_epsilon: 0.0,
        ..common::quick_train(Method::Reptile, 8)
    };
    let mut state = RunState::new(&base, &tc).unwrap();
    let before = state.global.params();
    train_epoch(&mut state, &base, &data, &tc).unwrap();
    train_epoch(&mut state, &base, &data, &tc).unwrap();
    assert_eq!(state.global.params(), before);
}

#[test]
fn gradient_budgets_line_up_across_methods() {
    let (base, data) = setup(9);
    let mut steps = Vec::new();
    for method in Method::ALL {
        let tc = TrainConfig {
            epochs: 1,
            ..common::quick_train(method, 9)
        };
        let state = train(&base, &data, &tc).unwrap();
        assert_eq!(state.history.len(), 1);
        steps.push((method, state.grad_steps, state.epoch));
    }
    let visits = 4u64;
    for (method, g, raw) in steps {
        match method {
            Method::Abmll | Method::Reptile | Method::StructuredLora => {
                assert_eq!(raw, 1, "{method}");
                let per_visit = if method == Method::StructuredLora { 5 } else { 6 };
                assert_eq!(g, visits * per_visit, "{method}");
            }
            Method::RegularLora => {
                assert_eq!(raw, REGULAR_LORA_STRIDE);
                assert_eq!(g, visits * REGULAR_LORA_STRIDE as u64);
            }
        }
    }
}

#[test]
fn zero_epochs_returns_the_initial_state() {
    let (base, data) = setup(10);
    let tc = TrainConfig {
        epochs: 0,
        ..common::quick_train(Method::Abmll, 10)
    };
    let state = train(&base, &data, &tc).unwrap();
    assert!(state.history.is_empty());
    assert_eq!(state.grad_steps, 0);
}

#[test]
fn identical_runs_and_split_runs_agree() {
    let (base, data) = setup(11);
    for method in Method::ALL {
        let tc = TrainConfig {
            epochs: 3,
            ..common::quick_train(method, 11)
        };
        let a = train(&base, &data, &tc).unwrap();
        let b = train(&base, &data, &tc).unwrap();
        assert_eq!(a.history, b.history);
        let mut split = RunState::new(&base, &tc).unwrap();
        let first = TrainConfig { epochs: 1, ..tc.clone() };
        train_from(&mut split, &base, &data, &first, |_| Ok(())).unwrap();
        train_from(&mut split, &base, &data, &tc, |_| Ok(())).unwrap();
        assert_eq!(split.history, a.history, "{method}");
        assert_eq!(split.global.params(), a.global.params());
    }
}

#[test]
fn mismatched_method_is_rejected() {
    let (base, data) = setup(12);
    let tc = common::quick_train(Method::Abmll, 12);
    let mut state = RunState::new(&base, &tc).unwrap();
    let other = common::quick_train(Method::Reptile, 12);
    assert!(train_from(&mut state, &base, &data, &other, |_| Ok(())).is_err());
    assert!("maml".parse::<Method>().is_err());
}
