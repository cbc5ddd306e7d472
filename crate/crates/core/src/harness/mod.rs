//! Experiment orchestration: seeded trials, variant comparisons, sweeps and
//! CSV reporting.
//!
//! Trial `i` uses seed `base_seed + i` for data generation, outlier
//! injection and model initialization alike. Trials run on a worker pool
//! and are reported in (variant, trial) order regardless of scheduling.

mod commands;
mod report;

pub use commands::{
    cmd_ablate, cmd_correlate, cmd_export_embeddings, cmd_perf_scaling, cmd_run, cmd_sweep, CorrelateSpec,
    time_epochs, LambdaAxis, PerfRow, SweepSpec, CORRELATE_VARIABLES,
};
pub use report::{aggregate, write_aggregate_csv, write_timings_csv, write_trials_csv, Aggregate, METRIC_NAMES};

use std::path::PathBuf;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graphdata::{load_graph, Graph, GraphError};
use crate::inject::{inject, InjectConfig, InjectError, OutlierKind};
use crate::metrics::{Interventions, MetricsReport};
use crate::model::{GraphInput, ModelConfig, ModelError, ModelState};
use crate::synthgen::{generate, SynthConfig, SynthError};
use crate::train::{fit, fit_baseline, TrainConfig, TrainError, TrainTrace};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Inject(#[from] InjectError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("all {0} trials failed")]
    AllTrialsFailed(usize),
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> HarnessError {
    let path = path.into();
    move |source| HarnessError::Io { path, source }
}

/// Where the graph of each trial comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSpec {
    /// Fresh synthetic graph per trial; its `seed` field is replaced by the trial seed.
    Synthetic(SynthConfig),
    /// Dataset directory, identical for every trial.
    Path(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    /// Outliers to plant when the graph carries no labels; `null` for none.
    pub outlier: Option<OutlierKind>,
    pub inject: InjectConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub n_trials: usize,
    pub base_seed: u64,
    pub out_dir: PathBuf,
    /// Worker pool width.
    pub threads: usize,
    pub save_traces: bool,
    pub save_checkpoints: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::Synthetic(SynthConfig::default()),
            outlier: Some(OutlierKind::Structural),
            inject: InjectConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            n_trials: 10,
            base_seed: 0,
            out_dir: PathBuf::from("out"),
            threads: 1,
            save_traces: true,
            save_checkpoints: false,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.n_trials == 0 {
            return Err(HarnessError::Config("n_trials must be at least 1".into()));
        }
        if self.threads == 0 {
            return Err(HarnessError::Config("threads must be at least 1".into()));
        }
        Ok(())
    }

    pub fn trial_seed(&self, trial: usize) -> u64 {
        self.base_seed + trial as u64
    }

    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }
}

/// One trained configuration within a trial.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Variant {
    pub name: String,
    pub lambdas: [f64; 4],
    /// Train through the dedicated reconstruction-only path.
    pub baseline: bool,
}

impl Variant {
    pub fn baseline(lambda1: f64) -> Self {
        Self {
            name: "baseline".into(),
            lambdas: [lambda1, 0.0, 0.0, 0.0],
            baseline: true,
        }
    }

    pub fn decaf(name: &str, lambdas: [f64; 4]) -> Self {
        Self {
            name: name.into(),
            lambdas,
            baseline: false,
        }
    }
}

/// The graphs of one trial.
#[derive(Clone, Debug)]
pub struct TrialData {
    pub factual: Graph,
    /// `S ← 0` and `S ← 1` graphs with the same outliers, when available.
    pub interventions: Option<(Graph, Graph)>,
}

/// Builds the graphs of the trial with seed `seed`.
pub fn prepare_trial(cfg: &ExperimentConfig, seed: u64) -> Result<TrialData, HarnessError> {
    let inj = InjectConfig {
        seed,
        ..cfg.inject.clone()
    };
    let plant = |g: &Graph| -> Result<Graph, HarnessError> {
        match cfg.outlier {
            Some(kind) if g.labels().is_none() => Ok(inject(g, kind, &inj)?),
            _ => Ok(g.clone()),
        }
    };
    match &cfg.dataset {
        DatasetSpec::Synthetic(sc) => {
            let b = generate(&SynthConfig { seed, ..sc.clone() })?;
            Ok(TrialData {
                factual: plant(&b.factual)?,
                interventions: Some((plant(&b.cf_all0)?, plant(&b.cf_all1)?)),
            })
        }
        DatasetSpec::Path(p) => Ok(TrialData {
            factual: plant(&load_graph(p)?)?,
            interventions: None,
        }),
    }
}

/// Result row of one (variant, trial) fit.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunReport {
    pub variant: String,
    pub trial: usize,
    pub seed: u64,
    pub lambdas: [f64; 4],
    pub epochs: usize,
    pub metrics: MetricsReport,
    /// `None` on success.
    pub error: Option<String>,
    pub seconds: f64,
}

/// A finished fit with the artifacts the caller may persist.
#[derive(Clone, Debug)]
pub struct TrialOutcome {
    pub report: RunReport,
    pub trace: Option<TrainTrace>,
    pub state: Option<ModelState>,
}

/// Scores of a trained model on another graph with the same columns.
pub fn score_graph(state: &ModelState, g: &Graph) -> Result<Vec<f64>, HarnessError> {
    Ok(state.score(&GraphInput::new(g), g)?)
}

/// Fits one variant on prepared data and evaluates it.
pub fn run_variant(
    cfg: &ExperimentConfig,
    data: &TrialData,
    variant: &Variant,
    trial: usize,
) -> TrialOutcome {
    let seed = cfg.trial_seed(trial);
    let train = TrainConfig {
        seed,
        ..cfg.train.clone()
    }
    .with_lambdas(variant.lambdas);
    let mut report = RunReport {
        variant: variant.name.clone(),
        trial,
        seed,
        lambdas: variant.lambdas,
        epochs: train.epochs,
        metrics: MetricsReport {
            contamination: train.contamination,
            ..MetricsReport::default()
        },
        error: None,
        seconds: 0.0,
    };
    let start = Instant::now();
    let result = (|| -> Result<_, HarnessError> {
        let g = &data.factual;
        let fitted = if variant.baseline {
            fit_baseline(g, &cfg.model, &train)?
        } else {
            fit(g, &cfg.model, &train)?
        };
        let cf_scores = match &data.interventions {
            Some((g0, g1)) => Some((score_graph(&fitted.state, g0)?, score_graph(&fitted.state, g1)?)),
            None => None,
        };
        let metrics = MetricsReport::evaluate(
            &fitted.scores,
            g.labels(),
            g.sensitive(),
            train.contamination,
            cf_scores.as_ref().map(|(a, b)| Interventions {
                scores_do0: a,
                scores_do1: b,
            }),
        );
        Ok((fitted, metrics))
    })();
    report.seconds = start.elapsed().as_secs_f64();
    match result {
        Ok((fitted, metrics)) => {
            report.metrics = metrics;
            TrialOutcome {
                report,
                trace: Some(fitted.trace),
                state: Some(fitted.state),
            }
        }
        Err(e) => {
            log::warn!("{} trial {trial} (seed {seed}) failed: {e}", variant.name);
            report.error = Some(e.to_string());
            TrialOutcome {
                report,
                trace: None,
                state: None,
            }
        }
    }
}

/// Runs every variant on every trial. Results are ordered by variant, then
/// trial. Each worker job prepares one trial's data and fits all variants.
pub fn run_trials(cfg: &ExperimentConfig, variants: &[Variant]) -> Result<Vec<TrialOutcome>, HarnessError> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    let per_trial: Vec<Vec<TrialOutcome>> = pool.install(|| {
        (0..cfg.n_trials)
            .into_par_iter()
            .map(|trial| match prepare_trial(cfg, cfg.trial_seed(trial)) {
                Ok(data) => variants.iter().map(|v| run_variant(cfg, &data, v, trial)).collect(),
                Err(e) => {
                    log::warn!("trial {trial}: data preparation failed: {e}");
                    variants.iter().map(|v| failed(cfg, v, trial, &e)).collect()
                }
            })
            .collect()
    });
    let mut out = Vec::with_capacity(cfg.n_trials * variants.len());
    for k in 0..variants.len() {
        for trial in &per_trial {
            out.push(trial[k].clone());
        }
    }
    Ok(out)
}

fn failed(cfg: &ExperimentConfig, v: &Variant, trial: usize, e: &HarnessError) -> TrialOutcome {
    TrialOutcome {
        report: RunReport {
            variant: v.name.clone(),
            trial,
            seed: cfg.trial_seed(trial),
            lambdas: v.lambdas,
            epochs: cfg.train.epochs,
            metrics: MetricsReport {
                contamination: cfg.train.contamination,
                ..MetricsReport::default()
            },
            error: Some(e.to_string()),
            seconds: 0.0,
        },
        trace: None,
        state: None,
    }
}
