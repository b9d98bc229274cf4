//! Metric log parsing and cross-seed summaries.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::metatrain::MetricRow;

/// Parses a metric log written by [`super::checkpoint::metrics_text`].
pub fn parse_metrics(text: &str) -> Result<Vec<MetricRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == MetricRow::HEADER => {}
        Some(h) => {
            return Err(Error::Format(format!(
                "metrics header {h:?} differs from {:?}",
                MetricRow::HEADER
            )))
        }
        None => return Err(Error::Format("empty metrics file".into())),
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_row(l, i + 2))
        .collect()
}

fn parse_row(line: &str, line_no: usize) -> Result<MetricRow> {
    let f: Vec<&str> = line.split(',').collect();
    let bad = |what: &str| Error::Parse {
        line: line_no,
        detail: format!("bad {what} in {line:?}"),
    };
    if f.len() != 9 {
        return Err(bad("field count"));
    }
    let num = |i: usize, what: &str| f[i].parse::<f64>().map_err(|_| bad(what));
    Ok(MetricRow {
        epoch: f[0].parse().map_err(|_| bad("epoch"))?,
        method: f[1].parse().map_err(|_| bad("method"))?,
        seed: f[2].parse().map_err(|_| bad("seed"))?,
        grad_steps: f[3].parse().map_err(|_| bad("grad_steps"))?,
        accuracy: num(4, "accuracy")?,
        ece: num(5, "ece")?,
        train_nll: num(6, "train_nll")?,
        beta_kl: num(7, "beta_kl")?,
        gamma_prior: num(8, "gamma_prior")?,
    })
}

/// Mean and standard error (sample deviation over √n); the error is
/// `None` for a single value.
pub fn mean_stderr(xs: &[f64]) -> (f64, Option<f64>) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, None);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, Some((var / n).sqrt()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub method: String,
    pub runs: usize,
    pub best_epoch: usize,
    pub accuracy: (f64, Option<f64>),
    pub ece: (f64, Option<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurvePoint {
    pub method: String,
    pub epoch: usize,
    pub runs: usize,
    pub accuracy: f64,
    pub ece: f64,
}

/// Per method: the epoch with the highest cross-run mean accuracy (earliest
/// on ties), summarized over runs, plus the per-epoch mean curves.
pub fn summarize(runs: &[Vec<MetricRow>]) -> Result<(Vec<SummaryRow>, Vec<CurvePoint>)> {
    // method -> epoch -> [(acc, ece)]
    let mut by: BTreeMap<String, BTreeMap<usize, Vec<(f64, f64)>>> = BTreeMap::new();
    let mut run_count: BTreeMap<String, usize> = BTreeMap::new();
    for run in runs {
        let mut methods: Vec<String> = run.iter().map(|r| r.method.name().to_string()).collect();
        methods.dedup();
        for m in &methods {
            *run_count.entry(m.clone()).or_default() += 1;
        }
        for r in run {
            by.entry(r.method.name().to_string())
                .or_default()
                .entry(r.epoch)
                .or_default()
                .push((r.accuracy, r.ece));
        }
    }
    if by.is_empty() {
        return Err(Error::Data("no metric rows to report".into()));
    }
    let mut summary = Vec::new();
    let mut curves = Vec::new();
    for (method, epochs) in &by {
        let mut best: Option<(usize, f64)> = None;
        for (&epoch, vals) in epochs {
            let accs: Vec<f64> = vals.iter().map(|v| v.0).collect();
            let eces: Vec<f64> = vals.iter().map(|v| v.1).collect();
            let (acc, _) = mean_stderr(&accs);
            let (e, _) = mean_stderr(&eces);
            curves.push(CurvePoint {
                method: method.clone(),
                epoch,
                runs: vals.len(),
                accuracy: acc,
                ece: e,
            });
            if best.is_none_or(|(_, b)| acc > b) {
                best = Some((epoch, acc));
            }
        }
        let (epoch, _) = best.expect("nonempty");
        let vals = &epochs[&epoch];
        let accs: Vec<f64> = vals.iter().map(|v| v.0).collect();
        let eces: Vec<f64> = vals.iter().map(|v| v.1).collect();
        summary.push(SummaryRow {
            method: method.clone(),
            runs: run_count[method],
            best_epoch: epoch,
            accuracy: mean_stderr(&accs),
            ece: mean_stderr(&eces),
        });
    }
    Ok((summary, curves))
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.6}")).unwrap_or_default()
}

pub fn summary_text(rows: &[SummaryRow]) -> String {
    let mut s = String::from("method,runs,best_epoch,accuracy_mean,accuracy_stderr,ece_mean,ece_stderr\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{:.6},{},{:.6},{}",
            r.method,
            r.runs,
            r.best_epoch,
            r.accuracy.0,
            opt(r.accuracy.1),
            r.ece.0,
            opt(r.ece.1)
        );
    }
    s
}

pub fn curves_text(points: &[CurvePoint]) -> String {
    let mut s = String::from("method,epoch,runs,accuracy_mean,ece_mean\n");
    for p in points {
        let _ = writeln!(s, "{},{},{},{:.6},{:.6}", p.method, p.epoch, p.runs, p.accuracy, p.ece);
    }
    s
}
