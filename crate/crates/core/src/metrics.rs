//! Detection and group-fairness metrics.

use std::io::Write;

use serde::Serialize;
use thiserror::Error;

use crate::numfmt::fmt_g17;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("{0} is undefined: {1}")]
    Undefined(&'static str, String),
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
}

fn same_len(a: usize, b: usize) -> Result<(), MetricError> {
    if a == b {
        Ok(())
    } else {
        Err(MetricError::Length(a, b))
    }
}

/// Number of positives for a contamination rate.
pub fn positive_count(n: usize, contamination: f64) -> usize {
    ((contamination * n as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Node indices ordered by descending score, ties by ascending index.
fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Labels the top `⌈c·n⌉` scores as 1; ties at the cutoff go to lower indices.
pub fn threshold_scores(scores: &[f64], contamination: f64) -> Vec<u8> {
    let k = positive_count(scores.len(), contamination);
    let mut out = vec![0; scores.len()];
    for &i in ranking(scores).iter().take(k) {
        out[i] = 1;
    }
    out
}

/// Score of the last node labeled positive by [`threshold_scores`].
pub fn score_cutoff(scores: &[f64], contamination: f64) -> Option<f64> {
    let k = positive_count(scores.len(), contamination);
    (k > 0).then(|| scores[ranking(scores)[k - 1]])
}

/// Labels `1` where the score is at least `cutoff`. Used to carry a
/// threshold fitted on one graph over to another.
pub fn apply_cutoff(scores: &[f64], cutoff: Option<f64>) -> Vec<u8> {
    match cutoff {
        Some(c) => scores.iter().map(|&s| u8::from(s >= c)).collect(),
        None => vec![0; scores.len()],
    }
}

/// Mann–Whitney AUROC with ties counted half.
pub fn auroc(scores: &[f64], y: &[u8]) -> Result<f64, MetricError> {
    same_len(scores.len(), y.len())?;
    let n_pos = y.iter().filter(|&&v| v == 1).count();
    let n_neg = y.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricError::Undefined("auroc", "labels contain a single class".into()));
    }
    // midranks over ascending scores
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += idx[i..=j].iter().filter(|&&k| y[k] == 1).count() as f64 * mid;
        i = j + 1;
    }
    let (p, q) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}

/// `(F1, accuracy)`; F1 is 0 when there are no positives at all.
pub fn f1_accuracy(pred: &[u8], y: &[u8]) -> Result<(f64, f64), MetricError> {
    same_len(pred.len(), y.len())?;
    let (mut tp, mut fp, mut fn_, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(y) {
        match (p, t) {
            (1, 1) => tp += 1,
            (1, _) => fp += 1,
            (_, 1) => fn_ += 1,
            _ => tn += 1,
        }
    }
    let denom = 2 * tp + fp + fn_;
    let f1 = if denom == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 };
    let acc = if pred.is_empty() { 0.0 } else { (tp + tn) as f64 / pred.len() as f64 };
    Ok((f1, acc))
}

fn rate(pred: &[u8], keep: impl Fn(usize) -> bool) -> Option<f64> {
    let (mut hits, mut total) = (0usize, 0usize);
    for (i, &p) in pred.iter().enumerate() {
        if keep(i) {
            total += 1;
            hits += usize::from(p == 1);
        }
    }
    (total > 0).then(|| hits as f64 / total as f64)
}

/// `|P(Ŷ=1 | S=0) − P(Ŷ=1 | S=1)|`.
pub fn delta_dp(pred: &[u8], s: &[u8]) -> Result<f64, MetricError> {
    same_len(pred.len(), s.len())?;
    let r0 = rate(pred, |i| s[i] == 0);
    let r1 = rate(pred, |i| s[i] == 1);
    match (r0, r1) {
        (Some(a), Some(b)) => Ok((a - b).abs()),
        _ => Err(MetricError::Undefined("delta_dp", "a sensitive group is empty".into())),
    }
}

/// True-positive-rate gap between the sensitive groups.
pub fn delta_eoo(pred: &[u8], y: &[u8], s: &[u8]) -> Result<f64, MetricError> {
    same_len(pred.len(), y.len())?;
    same_len(pred.len(), s.len())?;
    let r0 = rate(pred, |i| s[i] == 0 && y[i] == 1);
    let r1 = rate(pred, |i| s[i] == 1 && y[i] == 1);
    match (r0, r1) {
        (Some(a), Some(b)) => Ok((a - b).abs()),
        _ => Err(MetricError::Undefined("delta_eoo", "a sensitive group has no positives".into())),
    }
}

/// Gap between positive rates under `S ← 0` and `S ← 1`.
pub fn delta_cf(pred_do0: &[u8], pred_do1: &[u8]) -> Result<f64, MetricError> {
    same_len(pred_do0.len(), pred_do1.len())?;
    match (rate(pred_do0, |_| true), rate(pred_do1, |_| true)) {
        (Some(a), Some(b)) => Ok((a - b).abs()),
        _ => Err(MetricError::Undefined("delta_cf", "no nodes".into())),
    }
}

/// Sample Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, MetricError> {
    same_len(x.len(), y.len())?;
    if x.len() < 2 {
        return Err(MetricError::Undefined("pearson", "fewer than two samples".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(MetricError::Undefined("pearson", "zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Metrics of one trained model. Undefined values are `None`.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MetricsReport {
    pub accuracy: Option<f64>,
    pub f1: Option<f64>,
    pub auroc: Option<f64>,
    pub delta_dp: Option<f64>,
    pub delta_eoo: Option<f64>,
    pub delta_cf: Option<f64>,
    pub threshold: Option<f64>,
    pub contamination: f64,
}

/// Interventional scores for the counterfactual metric.
pub struct Interventions<'a> {
    pub scores_do0: &'a [f64],
    pub scores_do1: &'a [f64],
}

impl MetricsReport {
    pub const COLUMNS: [&'static str; 8] =
        ["accuracy", "f1", "auroc", "delta_dp", "delta_eoo", "delta_cf", "threshold", "contamination"];

    /// Thresholds `scores` at `contamination` and evaluates every metric
    /// that is defined. The counterfactual predictions reuse the factual
    /// cutoff.
    pub fn evaluate(
        scores: &[f64],
        labels: Option<&[u8]>,
        sensitive: &[u8],
        contamination: f64,
        cf: Option<Interventions<'_>>,
    ) -> Self {
        let pred = threshold_scores(scores, contamination);
        let threshold = score_cutoff(scores, contamination);
        let (mut f1, mut accuracy, mut au, mut eoo) = (None, None, None, None);
        if let Some(y) = labels {
            if let Ok((f, a)) = f1_accuracy(&pred, y) {
                f1 = Some(f);
                accuracy = Some(a);
            }
            au = auroc(scores, y).ok();
            eoo = delta_eoo(&pred, y, sensitive).ok();
        }
        let delta_cf = cf.and_then(|c| {
            delta_cf(&apply_cutoff(c.scores_do0, threshold), &apply_cutoff(c.scores_do1, threshold)).ok()
        });
        Self {
            accuracy,
            f1,
            auroc: au,
            delta_dp: delta_dp(&pred, sensitive).ok(),
            delta_eoo: eoo,
            delta_cf,
            threshold,
            contamination,
        }
    }

    pub fn values(&self) -> [Option<f64>; 8] {
        [
            self.accuracy,
            self.f1,
            self.auroc,
            self.delta_dp,
            self.delta_eoo,
            self.delta_cf,
            self.threshold,
            Some(self.contamination),
        ]
    }

    pub fn csv_header() -> String {
        Self::COLUMNS.join(",")
    }

    /// One CSV row in [`Self::COLUMNS`] order, `n/a` for undefined values.
    pub fn csv_row(&self) -> String {
        self.values().iter().map(|v| fmt_opt(*v)).collect::<Vec<_>>().join(",")
    }

    pub fn write_json<W: Write>(&self, w: W) -> serde_json::Result<()> {
        serde_json::to_writer_pretty(w, self)
    }
}

/// `%.17g`, or `n/a` for `None`.
pub fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), fmt_g17)
}
