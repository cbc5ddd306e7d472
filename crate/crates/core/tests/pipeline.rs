use std::fs;
use std::path::Path;

use decaf_core::graphdata::{save_dataset, DatasetMeta};
use decaf_core::harness::{
    cmd_ablate, cmd_correlate, cmd_export_embeddings, cmd_perf_scaling, cmd_run, cmd_sweep, prepare_trial,
    CorrelateSpec, DatasetSpec, ExperimentConfig, HarnessError, LambdaAxis, SweepSpec,
};
use decaf_core::model::{GraphInput, ModelState};

fn small(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        n_trials: 2,
        out_dir: out.to_path_buf(),
        ..ExperimentConfig::default()
    };
    if let DatasetSpec::Synthetic(s) = &mut cfg.dataset {
        s.n_nodes = 150;
    }
    cfg.train.epochs = 4;
    cfg
}

fn lines(path: &Path) -> Vec<String> {
    fs::read_to_string(path).unwrap().lines().map(str::to_string).collect()
}

fn assert_rectangular(path: &Path, rows: usize) {
    let l = lines(path);
    assert_eq!(l.len(), rows + 1, "{}", path.display());
    let w = l[0].split(',').count();
    assert!(l.iter().all(|r| r.split(',').count() == w), "{}", path.display());
}

#[test]
fn run_writes_every_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        save_checkpoints: true,
        ..small(tmp.path())
    };
    let (reports, aggs) = cmd_run(&cfg).unwrap();
    assert_eq!(reports.len(), 4);
    assert_eq!(aggs.iter().map(|a| a.variant.as_str()).collect::<Vec<_>>(), ["baseline", "decaf"]);
    assert!(aggs.iter().all(|a| a.n == 2));
    assert_rectangular(&tmp.path().join("trials.csv"), 4);
    assert_rectangular(&tmp.path().join("aggregate.csv"), 2);
    assert_rectangular(&tmp.path().join("timings.csv"), 4);
    assert_rectangular(&tmp.path().join("traces/decaf_trial1.csv"), 4);
    let cfg_back = ExperimentConfig::from_json(&fs::read_to_string(tmp.path().join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg_back, cfg);
    assert!(tmp.path().join("checkpoints/baseline_trial0.ckpt").exists());
}

#[test]
fn checkpoint_reproduces_scores_and_exports_latents() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        save_checkpoints: true,
        n_trials: 1,
        ..small(tmp.path())
    };
    let (reports, _) = cmd_run(&cfg).unwrap();
    let data = prepare_trial(&cfg, cfg.trial_seed(0)).unwrap();
    let (state, header) = ModelState::load(&tmp.path().join("checkpoints/decaf_trial0.ckpt")).unwrap();
    assert_eq!(header.epoch, 4);
    let scores = state.score(&GraphInput::new(&data.factual), &data.factual).unwrap();
    assert!(scores.iter().all(|s| s.is_finite()));
    assert!(reports[1].metrics.auroc.is_some());

    let ds = tmp.path().join("ds");
    save_dataset(&data.factual, &DatasetMeta::describe(&data.factual, "t"), &ds).unwrap();
    let out = tmp.path().join("emb/z.csv");
    let ckpt = tmp.path().join("checkpoints/decaf_trial0.ckpt");
    let rows = cmd_export_embeddings(&ckpt, &ds, &out).unwrap();
    assert_eq!(rows, 150);
    let l = lines(&out);
    let c = &state.config;
    assert_eq!(l[0].split(',').count(), 3 + 2 * (c.content_dim() + c.env_dim()));
    assert_rectangular(&out, 150);
    let again = tmp.path().join("emb/z2.csv");
    cmd_export_embeddings(&ckpt, &ds, &again).unwrap();
    assert_eq!(fs::read(&out).unwrap(), fs::read(&again).unwrap());
}

#[test]
fn ablation_sweep_and_correlation_layouts() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, aggs) = cmd_ablate(&small(&tmp.path().join("ablate"))).unwrap();
    let names: Vec<_> = aggs.iter().map(|a| a.variant.as_str()).collect();
    assert_eq!(names, ["full", "no_cf", "no_adv", "no_cf_adv"]);
    assert_eq!(aggs[1].lambdas[3], 0.0);
    assert_eq!(aggs[2].lambdas[2], 0.0);

    let spec = SweepSpec {
        x: "lambda3".parse::<LambdaAxis>().unwrap(),
        x_values: vec![0.1, 1.0],
        y: "4".parse::<LambdaAxis>().unwrap(),
        y_values: vec![0.2, 0.4, 0.8],
    };
    let cells = cmd_sweep(&small(&tmp.path().join("sweep")), &spec).unwrap();
    assert_eq!(cells.len(), 6);
    assert_rectangular(&tmp.path().join("sweep/sweep.csv"), 6);
    assert!(lines(&tmp.path().join("sweep/sweep.csv"))[1].starts_with("lambda3,0.10000000000000001,lambda4,0.20000000000000001,"));

    let cfg = ExperimentConfig {
        train: decaf_core::train::TrainConfig {
            epochs: 2,
            ..Default::default()
        },
        ..small(&tmp.path().join("corr"))
    };
    let spec = CorrelateSpec {
        n_samples: 10,
        ..CorrelateSpec::default()
    };
    let m = cmd_correlate(&cfg, &spec).unwrap();
    assert_eq!(m.len(), 6);
    for (i, row) in m.iter().enumerate() {
        if let Some(d) = row[i] {
            assert!((d - 1.0).abs() < 1e-12);
        }
        for (j, v) in row.iter().enumerate() {
            assert_eq!(v.map(f64::to_bits), m[j][i].map(f64::to_bits));
        }
    }
    assert_rectangular(&tmp.path().join("corr/correlation.csv"), 6);
    assert_rectangular(&tmp.path().join("corr/correlate_samples.csv"), 10);
    assert!(matches!(
        cmd_correlate(&cfg, &CorrelateSpec { n_samples: 3, ..spec }),
        Err(HarnessError::Config(_))
    ));
}

#[test]
fn perf_rows_per_size() {
    let tmp = tempfile::tempdir().unwrap();
    let rows = cmd_perf_scaling(&small(tmp.path()), &[100, 200], 2).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].ratio_to_previous, None);
    assert!(rows.iter().all(|r| r.decaf_epoch_seconds > 0.0 && r.baseline_epoch_seconds > 0.0));
    assert_rectangular(&tmp.path().join("perf.csv"), 2);
    assert!(cmd_perf_scaling(&small(tmp.path()), &[100], 2).is_err());
}

#[test]
fn dataset_path_runs_without_interventions() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small(&tmp.path().join("gen"));
    let g = prepare_trial(&cfg, 3).unwrap().factual;
    let ds = tmp.path().join("ds");
    save_dataset(&g, &DatasetMeta::describe(&g, "labelled"), &ds).unwrap();
    let cfg = ExperimentConfig {
        dataset: DatasetSpec::Path(ds),
        ..small(&tmp.path().join("out"))
    };
    let (reports, _) = cmd_run(&cfg).unwrap();
    assert!(reports.iter().all(|r| r.error.is_none() && r.metrics.delta_cf.is_none() && r.metrics.auroc.is_some()));
}
