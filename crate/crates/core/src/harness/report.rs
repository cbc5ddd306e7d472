//! CSV layouts.
//!
//! `trials.csv`: `variant,trial,seed,lambda1..lambda4,epochs,status,` then
//! the [`MetricsReport`] columns. `aggregate.csv`: `variant,lambda1..lambda4,n,`
//! then `<metric>_mean,<metric>_stderr` for each of [`METRIC_NAMES`].
//! `timings.csv`: `variant,trial,seed,epochs,seconds,seconds_per_epoch`.
//! Undefined values are written as `n/a`.

use std::io::Write;

use serde::Serialize;

use super::RunReport;
use crate::metrics::{fmt_opt, MetricsReport};
use crate::numfmt::fmt_g17;

pub const METRIC_NAMES: [&str; 6] = ["accuracy", "f1", "auroc", "delta_dp", "delta_eoo", "delta_cf"];

fn metric_values(m: &MetricsReport) -> [Option<f64>; 6] {
    [m.accuracy, m.f1, m.auroc, m.delta_dp, m.delta_eoo, m.delta_cf]
}

fn lambdas_csv(l: &[f64; 4]) -> String {
    l.iter().map(|v| fmt_g17(*v)).collect::<Vec<_>>().join(",")
}

pub fn write_trials_csv<W: Write>(mut w: W, reports: &[RunReport]) -> std::io::Result<()> {
    writeln!(
        w,
        "variant,trial,seed,lambda1,lambda2,lambda3,lambda4,epochs,status,{}",
        MetricsReport::csv_header()
    )?;
    for r in reports {
        let status = if r.error.is_some() { "failed" } else { "ok" };
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.variant,
            r.trial,
            r.seed,
            lambdas_csv(&r.lambdas),
            r.epochs,
            status,
            r.metrics.csv_row()
        )?;
    }
    Ok(())
}

pub fn write_timings_csv<W: Write>(mut w: W, reports: &[RunReport]) -> std::io::Result<()> {
    writeln!(w, "variant,trial,seed,epochs,seconds,seconds_per_epoch")?;
    for r in reports {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.variant,
            r.trial,
            r.seed,
            r.epochs,
            fmt_g17(r.seconds),
            fmt_g17(r.seconds / r.epochs.max(1) as f64)
        )?;
    }
    Ok(())
}

/// Mean and standard error of each metric over one variant's completed trials.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Aggregate {
    pub variant: String,
    pub lambdas: [f64; 4],
    /// Completed trials.
    pub n: usize,
    pub mean: [Option<f64>; 6],
    /// Sample standard deviation over `√n`; undefined below two values.
    pub stderr: [Option<f64>; 6],
}

impl Aggregate {
    pub fn mean_of(&self, metric: &str) -> Option<f64> {
        METRIC_NAMES.iter().position(|m| *m == metric).and_then(|i| self.mean[i])
    }

    pub fn stderr_of(&self, metric: &str) -> Option<f64> {
        METRIC_NAMES.iter().position(|m| *m == metric).and_then(|i| self.stderr[i])
    }
}

pub fn mean_stderr(values: &[f64]) -> (Option<f64>, Option<f64>) {
    let n = values.len();
    if n == 0 {
        return (None, None);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (Some(mean), None);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (Some(mean), Some(var.sqrt() / (n as f64).sqrt()))
}

/// One aggregate per variant, in first-appearance order. Failed trials are
/// excluded; undefined metric values are skipped per metric.
pub fn aggregate(reports: &[RunReport]) -> Vec<Aggregate> {
    let mut names: Vec<&str> = Vec::new();
    for r in reports {
        if !names.contains(&r.variant.as_str()) {
            names.push(&r.variant);
        }
    }
    names
        .into_iter()
        .map(|name| {
            let rows: Vec<&RunReport> = reports.iter().filter(|r| r.variant == name).collect();
            let ok: Vec<&&RunReport> = rows.iter().filter(|r| r.error.is_none()).collect();
            let mut mean = [None; 6];
            let mut stderr = [None; 6];
            for k in 0..6 {
                let vals: Vec<f64> = ok.iter().filter_map(|r| metric_values(&r.metrics)[k]).collect();
                (mean[k], stderr[k]) = mean_stderr(&vals);
            }
            Aggregate {
                variant: name.to_string(),
                lambdas: rows[0].lambdas,
                n: ok.len(),
                mean,
                stderr,
            }
        })
        .collect()
}

pub fn write_aggregate_csv<W: Write>(mut w: W, aggs: &[Aggregate]) -> std::io::Result<()> {
    let cols: Vec<String> = METRIC_NAMES.iter().flat_map(|m| [format!("{m}_mean"), format!("{m}_stderr")]).collect();
    writeln!(w, "variant,lambda1,lambda2,lambda3,lambda4,n,{}", cols.join(","))?;
    for a in aggs {
        let vals: Vec<String> = (0..6).flat_map(|k| [fmt_opt(a.mean[k]), fmt_opt(a.stderr[k])]).collect();
        writeln!(w, "{},{},{},{}", a.variant, lambdas_csv(&a.lambdas), a.n, vals.join(","))?;
    }
    Ok(())
}
