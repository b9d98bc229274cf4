use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use abmll::cli::report::{mean_stderr, parse_metrics, summarize};
use abmll::cli::Checkpoint;
use abmll::metatrain::{Method, MetricRow};

const TINY: &str = "\
d_model = 16
n_layers = 1
n_heads = 2
d_ff = 24
max_context = 32
d_rank = 2
pretrain_steps = 20
corpus_docs = 60
n_seen = 4
n_unseen = 1
examples_per_task = 40
epochs = 3
tasks_per_epoch = 2
eval_steps = 2
c = 0.05
beta = 0.001
lr_scale = 200
";

fn abmll(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_abmll"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
    config: PathBuf,
    base: PathBuf,
}

fn fixture(extra: &str) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.conf");
    std::fs::write(&config, format!("{TINY}{extra}")).unwrap();
    let o = abmll(&["pretrain", "--config", s(&config), "--out", s(dir.path())]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let base = dir.path().join("base.ckpt");
    Fixture { dir, config, base }
}

fn metatrain(f: &Fixture, out: &Path, method: &str, resume: Option<&Path>) -> Output {
    let mut args = vec![
        "metatrain",
        "--config",
        s(&f.config),
        "--base",
        s(&f.base),
        "--method",
        method,
        "--out",
        s(out),
    ];
    if let Some(r) = resume {
        args.extend(["--resume", s(r)]);
    }
    abmll(&args)
}

#[test]
fn usage_and_config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.conf");
    let o = abmll(&["pretrain", "--config", s(&missing)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope.conf"));

    let bad = dir.path().join("bad.conf");
    std::fs::write(&bad, "d_model = 16\nlearning_rate = 3\n").unwrap();
    let o = abmll(&["pretrain", "--config", s(&bad)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("bad.conf:2"));

    assert_eq!(code(&abmll(&["frobnicate"])), 2);
}

#[test]
fn training_is_deterministic_and_resumable() {
    let f = fixture("");
    let (a, b) = (f.dir.path().join("a"), f.dir.path().join("b"));
    for method in ["abmll", "regular_lora"] {
        let o = metatrain(&f, &a, method, None);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let o = metatrain(&f, &b, method, None);
        assert_eq!(code(&o), 0);
        let stem = format!("{method}-seed0");
        let metrics = |d: &Path| std::fs::read(d.join(format!("{stem}.metrics.csv"))).unwrap();
        let ckpt = |d: &Path| std::fs::read(d.join(format!("{stem}.ckpt"))).unwrap();
        assert_eq!(metrics(&a), metrics(&b));
        assert_eq!(ckpt(&a), ckpt(&b));
        let rows = parse_metrics(&String::from_utf8(metrics(&a)).unwrap()).unwrap();
        assert_eq!(rows.len(), 3);

        for k in 1..3 {
            let c = f.dir.path().join(format!("resume-{method}-{k}"));
            let from = a.join(format!("{stem}.epoch{k:04}.ckpt"));
            let o = metatrain(&f, &c, method, Some(&from));
            assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
            assert_eq!(metrics(&c), metrics(&a), "{method} from {k}");
            assert_eq!(ckpt(&c), ckpt(&a), "{method} from {k}");
        }
    }
    // Regular LoRA rows land on every sixth raw epoch of the shared budget.
    let text = std::fs::read_to_string(a.join("regular_lora-seed0.metrics.csv")).unwrap();
    let rows = parse_metrics(&text).unwrap();
    let abmll_rows = parse_metrics(&std::fs::read_to_string(a.join("abmll-seed0.metrics.csv")).unwrap()).unwrap();
    for (r, q) in rows.iter().zip(&abmll_rows) {
        assert_eq!(r.grad_steps, q.grad_steps, "epoch {}", r.epoch);
    }
}

#[test]
fn resume_rejects_a_different_method() {
    let f = fixture("epochs = 1\n");
    let out = f.dir.path().join("run");
    assert_eq!(code(&metatrain(&f, &out, "reptile", None)), 0);
    let ck = out.join("reptile-seed0.ckpt");
    let o = metatrain(&f, &out, "abmll", Some(&ck));
    assert_eq!(code(&o), 2);
    let o = metatrain(&f, &out, "sgd", None);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("structured_lora"));
}

#[test]
fn checkpoints_round_trip_and_detect_corruption() {
    let f = fixture("epochs = 1\n");
    let out = f.dir.path().join("run");
    assert_eq!(code(&metatrain(&f, &out, "abmll", None)), 0);
    for path in [f.base.clone(), out.join("abmll-seed0.ckpt")] {
        let bytes = std::fs::read(&path).unwrap();
        let ck = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(ck.to_bytes(), bytes);

        let mut flipped = bytes.clone();
        let last = flipped.len() - 3;
        flipped[last] ^= 0x40;
        let bad = f.dir.path().join("flipped.ckpt");
        std::fs::write(&bad, &flipped).unwrap();
        let o = abmll(&["evaluate", "--checkpoint", s(&bad), "--out", s(f.dir.path())]);
        assert_eq!(code(&o), 4);

        std::fs::write(&bad, &bytes[..bytes.len() / 2]).unwrap();
        assert_eq!(code(&abmll(&["evaluate", "--checkpoint", s(&bad)])), 4);

        let mut magic = bytes.clone();
        magic[0] = b'X';
        std::fs::write(&bad, &magic).unwrap();
        assert_eq!(code(&abmll(&["evaluate", "--checkpoint", s(&bad)])), 4);
    }
}

#[test]
fn pretraining_is_reproducible() {
    let f = fixture("pretrain_steps = 0\n");
    let again = f.dir.path().join("again");
    let o = abmll(&["pretrain", "--config", s(&f.config), "--out", s(&again)]);
    assert_eq!(code(&o), 0);
    assert_eq!(std::fs::read(&f.base).unwrap(), std::fs::read(again.join("base.ckpt")).unwrap());
    let ck = Checkpoint::load(&f.base).unwrap();
    let init = abmll::lm::BaseWeights::init(&ck.config.model, ck.config.pretrain.seed).unwrap();
    assert_eq!(ck.base, init);
}

#[test]
fn evaluation_outputs_are_deterministic() {
    let f = fixture("epochs = 1\n");
    let out = f.dir.path().join("run");
    assert_eq!(code(&metatrain(&f, &out, "abmll", None)), 0);
    let ck = out.join("abmll-seed0.ckpt");
    let (e1, e2) = (f.dir.path().join("e1"), f.dir.path().join("e2"));
    for e in [&e1, &e2] {
        let o = abmll(&["evaluate", "--checkpoint", s(&ck), "--suite-seed", "77", "--jobs", "2", "--out", s(e)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    for name in ["eval.csv", "calibration.tsv"] {
        assert_eq!(std::fs::read(e1.join(name)).unwrap(), std::fs::read(e2.join(name)).unwrap());
    }
    let eval = std::fs::read_to_string(e1.join("eval.csv")).unwrap();
    assert!(eval.starts_with("task,examples,accuracy,ece\n"));
    // No adaptation: every example is scored.
    let e0 = f.dir.path().join("e0");
    let o = abmll(&["evaluate", "--checkpoint", s(&f.base), "--adapt-steps", "0", "--out", s(&e0)]);
    assert_eq!(code(&o), 0);
    let eval = std::fs::read_to_string(e0.join("eval.csv")).unwrap();
    assert!(eval.lines().last().unwrap().starts_with("all,40,"));
}

#[test]
fn evaluation_reads_record_files() {
    let f = fixture("epochs = 1\n");
    let data = abmll::tasks::generate_suite(9, 2, 1, 40).unwrap();
    let records = f.dir.path().join("held.jsonl");
    abmll::tasks::write_records(&data.unseen[0], &data.vocab, &records).unwrap();
    let out = f.dir.path().join("ev");
    let o = abmll(&["evaluate", "--checkpoint", s(&f.base), "--dataset", s(&records), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(std::fs::read_to_string(out.join("eval.csv")).unwrap().contains("held,"));

    let empty = f.dir.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    let o = abmll(&["evaluate", "--checkpoint", s(&f.base), "--dataset", s(&empty)]);
    assert_eq!(code(&o), 3);
}

fn row(method: Method, seed: u64, epoch: usize, acc: f64, ece: f64) -> MetricRow {
    MetricRow {
        epoch,
        method,
        seed,
        grad_steps: epoch as u64 * 6,
        accuracy: acc,
        ece,
        train_nll: 1.0,
        beta_kl: 0.0,
        gamma_prior: 0.0,
    }
}

#[test]
fn report_matches_hand_arithmetic() {
    // Accuracies 0.5, 0.6, 0.7: mean 0.6, sample sd 0.1, stderr 0.1/√3.
    let runs: Vec<Vec<MetricRow>> = [0.5, 0.6, 0.7]
        .iter()
        .enumerate()
        .map(|(s, &a)| vec![row(Method::Abmll, s as u64, 1, a - 0.2, 0.3), row(Method::Abmll, s as u64, 2, a, 0.2)])
        .collect();
    let (summary, curves) = summarize(&runs).unwrap();
    assert_eq!(summary.len(), 1);
    let r = &summary[0];
    assert_eq!((r.runs, r.best_epoch), (3, 2));
    assert!((r.accuracy.0 - 0.6).abs() <= 1e-12);
    assert!((r.accuracy.1.unwrap() - 0.1 / 3f64.sqrt()).abs() <= 1e-12);
    assert_eq!(curves.len(), 2);
    assert_eq!(mean_stderr(&[0.4]), (0.4, None));

    let dir = tempfile::tempdir().unwrap();
    let mut files = Vec::new();
    for (i, run) in runs.iter().enumerate() {
        let p = dir.path().join(format!("r{i}.csv"));
        std::fs::write(&p, abmll::cli::checkpoint::metrics_text(run)).unwrap();
        files.push(p);
    }
    let single = dir.path().join("single.csv");
    std::fs::write(&single, abmll::cli::checkpoint::metrics_text(&[row(Method::Reptile, 0, 1, 0.4, 0.1)])).unwrap();
    files.push(single);
    let mut args: Vec<&str> = vec!["report"];
    args.extend(files.iter().map(|p| s(p)));
    args.extend(["--out", s(dir.path())]);
    let o = abmll(&args);
    assert_eq!(code(&o), 0);
    let text = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("abmll,3,2,0.600000,0.057735,"));
    assert!(lines[2].starts_with("reptile,1,1,0.400000,,"));

    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "epoch,acc\n1,0.5\n").unwrap();
    let o = abmll(&["report", s(&bad), "--out", s(dir.path())]);
    assert_eq!(code(&o), 3);
}
