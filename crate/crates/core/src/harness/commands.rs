use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::report::{aggregate, write_aggregate_csv, write_timings_csv, write_trials_csv, Aggregate};
use super::{io_err, prepare_trial, run_trials, run_variant, DatasetSpec, ExperimentConfig, HarnessError, RunReport, TrialOutcome, Variant};
use crate::graphdata::{flip_sensitive, load_graph};
use crate::metrics::{fmt_opt, pearson};
use crate::model::{GraphInput, ModelState};
use crate::numfmt::fmt_g17;
use crate::synthgen::SynthConfig;
use crate::train::{baseline_step, train_step, TrainConfig, TrainData};

fn create_dir(dir: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<fs::File>) -> std::io::Result<()>) -> Result<(), HarnessError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    f(&mut w).and_then(|_| w.flush()).map_err(io_err(path))
}

/// Runs `variants`, writes the standard outputs and returns the reports.
fn execute(cfg: &ExperimentConfig, variants: &[Variant]) -> Result<(Vec<RunReport>, Vec<Aggregate>), HarnessError> {
    let dir = &cfg.out_dir;
    create_dir(dir)?;
    write_file(&dir.join("config.json"), |w| {
        serde_json::to_writer_pretty(&mut *w, cfg).map_err(std::io::Error::other)?;
        writeln!(w)
    })?;
    let outcomes = run_trials(cfg, variants)?;
    persist_artifacts(cfg, &outcomes)?;
    let reports: Vec<RunReport> = outcomes.into_iter().map(|o| o.report).collect();
    let failures = reports.iter().filter(|r| r.error.is_some()).count();
    if failures == reports.len() {
        return Err(HarnessError::AllTrialsFailed(reports.len()));
    }
    if failures > 0 {
        log::warn!("{failures} of {} fits failed; aggregating the rest", reports.len());
    }
    let aggs = aggregate(&reports);
    write_file(&dir.join("trials.csv"), |w| write_trials_csv(w, &reports))?;
    write_file(&dir.join("aggregate.csv"), |w| write_aggregate_csv(w, &aggs))?;
    write_file(&dir.join("timings.csv"), |w| write_timings_csv(w, &reports))?;
    Ok((reports, aggs))
}

fn persist_artifacts(cfg: &ExperimentConfig, outcomes: &[TrialOutcome]) -> Result<(), HarnessError> {
    if cfg.save_traces {
        let dir = cfg.out_dir.join("traces");
        create_dir(&dir)?;
        for o in outcomes {
            if let Some(trace) = &o.trace {
                let path = dir.join(format!("{}_trial{}.csv", o.report.variant, o.report.trial));
                write_file(&path, |w| trace.write_csv(w))?;
            }
        }
    }
    if cfg.save_checkpoints {
        let dir = cfg.out_dir.join("checkpoints");
        create_dir(&dir)?;
        for o in outcomes {
            if let Some(state) = &o.state {
                let path = dir.join(format!("{}_trial{}.ckpt", o.report.variant, o.report.trial));
                state.save(&path, o.report.seed, o.report.epochs)?;
            }
        }
    }
    Ok(())
}

/// Baseline and the configured full model over all trials.
pub fn cmd_run(cfg: &ExperimentConfig) -> Result<(Vec<RunReport>, Vec<Aggregate>), HarnessError> {
    let l = cfg.train.lambdas();
    execute(cfg, &[Variant::baseline(l[0]), Variant::decaf("decaf", l)])
}

/// Full model and the three loss ablations.
pub fn cmd_ablate(cfg: &ExperimentConfig) -> Result<(Vec<RunReport>, Vec<Aggregate>), HarnessError> {
    let [l1, l2, l3, l4] = cfg.train.lambdas();
    execute(
        cfg,
        &[
            Variant::decaf("full", [l1, l2, l3, l4]),
            Variant::decaf("no_cf", [l1, l2, l3, 0.0]),
            Variant::decaf("no_adv", [l1, l2, 0.0, l4]),
            Variant::decaf("no_cf_adv", [l1, l2, 0.0, 0.0]),
        ],
    )
}

/// One of the four loss weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LambdaAxis(pub usize);

impl LambdaAxis {
    pub fn name(self) -> String {
        format!("lambda{}", self.0 + 1)
    }
}

impl FromStr for LambdaAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim_start_matches("lambda") {
            "1" => Ok(Self(0)),
            "2" => Ok(Self(1)),
            "3" => Ok(Self(2)),
            "4" => Ok(Self(3)),
            _ => Err(format!("expected lambda1..lambda4, got {s:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSpec {
    pub x: LambdaAxis,
    pub x_values: Vec<f64>,
    pub y: LambdaAxis,
    pub y_values: Vec<f64>,
}

/// Grid over two loss weights; `sweep.csv` has one row per cell:
/// `x_name,x,y_name,y,n,delta_cf_mean,delta_dp_mean,delta_eoo_mean,auroc_mean`.
pub fn cmd_sweep(cfg: &ExperimentConfig, spec: &SweepSpec) -> Result<Vec<Aggregate>, HarnessError> {
    if spec.x_values.is_empty() || spec.y_values.is_empty() {
        return Err(HarnessError::Config("sweep axes must be nonempty".into()));
    }
    if spec.x == spec.y {
        return Err(HarnessError::Config("sweep axes must differ".into()));
    }
    let mut variants = Vec::new();
    for (i, &x) in spec.x_values.iter().enumerate() {
        for (j, &y) in spec.y_values.iter().enumerate() {
            let mut l = cfg.train.lambdas();
            l[spec.x.0] = x;
            l[spec.y.0] = y;
            variants.push(Variant::decaf(&format!("cell_{i}_{j}"), l));
        }
    }
    let (_, aggs) = execute(cfg, &variants)?;
    write_file(&cfg.out_dir.join("sweep.csv"), |w| {
        writeln!(w, "x_name,x,y_name,y,n,delta_cf_mean,delta_dp_mean,delta_eoo_mean,auroc_mean")?;
        for a in &aggs {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{}",
                spec.x.name(),
                fmt_g17(a.lambdas[spec.x.0]),
                spec.y.name(),
                fmt_g17(a.lambdas[spec.y.0]),
                a.n,
                fmt_opt(a.mean_of("delta_cf")),
                fmt_opt(a.mean_of("delta_dp")),
                fmt_opt(a.mean_of("delta_eoo")),
                fmt_opt(a.mean_of("auroc"))
            )?;
        }
        Ok(())
    })?;
    Ok(aggs)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrelateSpec {
    pub n_samples: usize,
    pub lambda_min: f64,
    pub lambda_max: f64,
}

impl Default for CorrelateSpec {
    fn default() -> Self {
        Self {
            n_samples: 100,
            lambda_min: 1e-3,
            lambda_max: 1.0,
        }
    }
}

pub const CORRELATE_VARIABLES: [&str; 6] = ["lambda1", "lambda2", "lambda3", "lambda4", "delta_eoo", "delta_dp"];

/// Samples λ vectors log-uniformly, fits one trial each, and returns the
/// 6×6 Pearson matrix over (λ₁..λ₄, Δ_EOO, Δ_DP). Writes
/// `correlate_samples.csv` and `correlation.csv`.
pub fn cmd_correlate(cfg: &ExperimentConfig, spec: &CorrelateSpec) -> Result<Vec<Vec<Option<f64>>>, HarnessError> {
    cfg.validate()?;
    if spec.n_samples < 10 {
        return Err(HarnessError::Config(format!("need at least 10 samples, got {}", spec.n_samples)));
    }
    if !(spec.lambda_min > 0.0 && spec.lambda_min < spec.lambda_max) {
        return Err(HarnessError::Config("lambda range must satisfy 0 < min < max".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.base_seed);
    let (lo, hi) = (spec.lambda_min.ln(), spec.lambda_max.ln());
    let lambdas: Vec<[f64; 4]> = (0..spec.n_samples)
        .map(|_| [(); 4].map(|_| rng.random_range(lo..=hi).exp()))
        .collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    let reports: Vec<RunReport> = pool.install(|| {
        lambdas
            .par_iter()
            .enumerate()
            .map(|(i, l)| {
                let v = Variant::decaf(&format!("sample_{i}"), *l);
                match prepare_trial(cfg, cfg.trial_seed(i)) {
                    Ok(data) => run_variant(cfg, &data, &v, i).report,
                    Err(e) => super::failed(cfg, &v, i, &e).report,
                }
            })
            .collect()
    });
    if reports.iter().all(|r| r.error.is_some()) {
        return Err(HarnessError::AllTrialsFailed(reports.len()));
    }

    let columns: Vec<Vec<Option<f64>>> = (0..6)
        .map(|k| {
            reports
                .iter()
                .map(|r| match (k, &r.error) {
                    (_, Some(_)) => None,
                    (0..=3, None) => Some(r.lambdas[k]),
                    (4, None) => r.metrics.delta_eoo,
                    _ => r.metrics.delta_dp,
                })
                .collect()
        })
        .collect();
    let matrix: Vec<Vec<Option<f64>>> = (0..6)
        .map(|a| {
            (0..6)
                .map(|b| {
                    let (xs, ys): (Vec<f64>, Vec<f64>) = columns[a]
                        .iter()
                        .zip(&columns[b])
                        .filter_map(|(x, y)| x.zip(*y))
                        .unzip();
                    pearson(&xs, &ys).ok()
                })
                .collect()
        })
        .collect();

    let dir = &cfg.out_dir;
    create_dir(dir)?;
    write_file(&dir.join("correlate_samples.csv"), |w| {
        writeln!(w, "sample,seed,lambda1,lambda2,lambda3,lambda4,status,delta_eoo,delta_dp")?;
        for (i, r) in reports.iter().enumerate() {
            let l: Vec<String> = r.lambdas.iter().map(|v| fmt_g17(*v)).collect();
            let status = if r.error.is_some() { "failed" } else { "ok" };
            writeln!(
                w,
                "{i},{},{},{status},{},{}",
                r.seed,
                l.join(","),
                fmt_opt(r.metrics.delta_eoo),
                fmt_opt(r.metrics.delta_dp)
            )?;
        }
        Ok(())
    })?;
    write_file(&dir.join("correlation.csv"), |w| {
        writeln!(w, "variable,{}", CORRELATE_VARIABLES.join(","))?;
        for (name, row) in CORRELATE_VARIABLES.iter().zip(&matrix) {
            let cells: Vec<String> = row.iter().map(|v| fmt_opt(*v)).collect();
            writeln!(w, "{name},{}", cells.join(","))?;
        }
        Ok(())
    })?;
    Ok(matrix)
}

/// Writes per-node latents of a checkpointed model on `dataset`, factual
/// and with every sensitive value flipped. Columns: `node,s,y`, then
/// `zc_*`, `ze_*`, `zc_cf_*`, `ze_cf_*`. Returns the row count.
pub fn cmd_export_embeddings(checkpoint: &Path, dataset: &Path, out: &Path) -> Result<usize, HarnessError> {
    let (state, _) = ModelState::load(checkpoint)?;
    let g = load_graph(dataset)?;
    let c = &state.config;
    if c.input_dim != g.n_features() || c.sensitive_col != g.sensitive_col() {
        return Err(HarnessError::Config(format!(
            "checkpoint expects {} columns with sensitive column {:?}; dataset has {} with {:?}",
            c.input_dim,
            c.sensitive_col,
            g.n_features(),
            g.sensitive_col()
        )));
    }
    let input = GraphInput::new(&g);
    let z = state.encode(&input)?;
    let z_cf = state.encode(&input.with_features(flip_sensitive(&g).features().clone()))?;
    let (dc, de) = (c.content_dim(), c.env_dim());
    let mut header = vec!["node".to_string(), "s".into(), "y".into()];
    for (prefix, width) in [("zc", dc), ("ze", de), ("zc_cf", dc), ("ze_cf", de)] {
        header.extend((0..width).map(|k| format!("{prefix}_{k}")));
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_file(out, |w| {
        writeln!(w, "{}", header.join(","))?;
        for i in 0..g.n_nodes() {
            let y = g.labels().map_or_else(|| "n/a".to_string(), |l| l[i].to_string());
            let mut row = vec![i.to_string(), g.sensitive()[i].to_string(), y];
            for t in [&z.content, &z.environment, &z_cf.content, &z_cf.environment] {
                row.extend(t.row(i).iter().map(|v| fmt_g17(*v)));
            }
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    })?;
    Ok(g.n_nodes())
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerfRow {
    pub n_nodes: usize,
    pub n_edges: usize,
    pub baseline_epoch_seconds: f64,
    pub decaf_epoch_seconds: f64,
    /// Decaf time over baseline time at this size.
    pub decaf_over_baseline: f64,
    /// Decaf epoch time relative to the previous size; `None` for the first.
    pub ratio_to_previous: Option<f64>,
}

/// Mean wall time of one training epoch.
pub fn time_epochs(data: &TrainData, state: &mut ModelState, cfg: &TrainConfig, baseline: bool, epochs: usize) -> Result<f64, HarnessError> {
    let start = Instant::now();
    for e in 0..epochs {
        if baseline {
            baseline_step(data, state, cfg, e)?;
        } else {
            train_step(data, state, cfg, e)?;
        }
    }
    Ok(start.elapsed().as_secs_f64() / epochs.max(1) as f64)
}

/// Epoch wall time of both training paths on synthetic graphs of each size,
/// mean degree held at the configured target. Writes `perf.csv`.
pub fn cmd_perf_scaling(cfg: &ExperimentConfig, sizes: &[usize], epochs: usize) -> Result<Vec<PerfRow>, HarnessError> {
    if sizes.len() < 2 {
        return Err(HarnessError::Config("perf needs at least two sizes".into()));
    }
    let base_synth = match &cfg.dataset {
        DatasetSpec::Synthetic(s) => s.clone(),
        DatasetSpec::Path(_) => SynthConfig::default(),
    };
    let mut rows: Vec<PerfRow> = Vec::new();
    for &n in sizes {
        let synth = SynthConfig {
            n_nodes: n,
            ..base_synth.clone()
        };
        let exp = ExperimentConfig {
            dataset: DatasetSpec::Synthetic(synth),
            ..cfg.clone()
        };
        let data = prepare_trial(&exp, cfg.base_seed)?;
        let g = &data.factual;
        let model = cfg.model.clone().for_graph(g);
        let train = TrainConfig {
            seed: cfg.base_seed,
            ..cfg.train.clone()
        };
        train.validate(&model)?;
        let td = TrainData::new(g);
        let mut s = ModelState::new(model.clone(), cfg.base_seed)?;
        let base = time_epochs(&td, &mut s, &train, true, epochs)?;
        let mut s = ModelState::new(model, cfg.base_seed)?;
        let decaf = time_epochs(&td, &mut s, &train, false, epochs)?;
        let ratio_to_previous = rows.last().map(|p| decaf / p.decaf_epoch_seconds);
        rows.push(PerfRow {
            n_nodes: n,
            n_edges: g.adjacency().n_edges(),
            baseline_epoch_seconds: base,
            decaf_epoch_seconds: decaf,
            decaf_over_baseline: decaf / base,
            ratio_to_previous,
        });
    }
    create_dir(&cfg.out_dir)?;
    write_file(&cfg.out_dir.join("perf.csv"), |w| {
        writeln!(w, "n_nodes,n_edges,baseline_epoch_seconds,decaf_epoch_seconds,decaf_over_baseline,ratio_to_previous")?;
        for r in &rows {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.n_nodes,
                r.n_edges,
                fmt_g17(r.baseline_epoch_seconds),
                fmt_g17(r.decaf_epoch_seconds),
                fmt_g17(r.decaf_over_baseline),
                fmt_opt(r.ratio_to_previous)
            )?;
        }
        Ok(())
    })?;
    Ok(rows)
}
