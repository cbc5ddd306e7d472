//! `decaf` command-line interface.
//!
//! Exit codes: 0 on success, 1 on a usage error, 2 when the command fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use decaf_core::causal::verify_lemma1;
use decaf_core::graphdata::{load_dataset, save_dataset, DatasetMeta};
use decaf_core::harness::{
    cmd_ablate, cmd_correlate, cmd_export_embeddings, cmd_perf_scaling, cmd_run, cmd_sweep, write_aggregate_csv,
    CorrelateSpec, DatasetSpec, ExperimentConfig, LambdaAxis, SweepSpec,
};
use decaf_core::inject::{inject, InjectConfig, OutlierKind};
use decaf_core::synthgen::{generate, SynthConfig};

#[derive(Debug, Parser)]
#[command(name = "decaf", version, about = "Fair graph anomaly detection experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by the experiment commands. Each overrides the matching
/// key of the `--config` file.
#[derive(Debug, Args, Clone, Default)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base seed; trial i uses seed + i.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long)]
    threads: Option<usize>,
    /// Training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Synthetic graph size.
    #[arg(long)]
    nodes: Option<usize>,
    /// Dataset directory instead of synthetic data.
    #[arg(long)]
    dataset: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic graph and its two interventional twins.
    Generate(Common),
    /// Plant labeled outliers into a dataset directory.
    Inject {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "structural")]
        kind: OutlierKind,
        #[arg(long)]
        ratio: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Check the independence claims of the causal model.
    VerifyScm {
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Baseline versus full model.
    Run(Common),
    /// Full model versus the loss ablations.
    Ablate(Common),
    /// Grid over two loss weights.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "lambda1")]
        x: LambdaAxis,
        #[arg(long, value_delimiter = ',', default_value = "0.01,0.1,0.5,1,2")]
        x_values: Vec<f64>,
        #[arg(long, default_value = "lambda2")]
        y: LambdaAxis,
        #[arg(long, value_delimiter = ',', default_value = "0.01,0.1,0.5,1,2")]
        y_values: Vec<f64>,
    },
    /// Random loss weights against fairness metrics.
    Correlate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100)]
        samples: usize,
        #[arg(long, default_value_t = 1e-3)]
        lambda_min: f64,
        #[arg(long, default_value_t = 1.0)]
        lambda_max: f64,
    },
    /// Write per-node latents of a checkpoint on a dataset.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Epoch time across graph sizes.
    Perf {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "500,1000,2000")]
        sizes: Vec<usize>,
        #[arg(long = "timed-epochs", default_value_t = 5)]
        timed_epochs: usize,
    },
}

type BoxError = Box<dyn std::error::Error>;

fn load_config(common: &Common) -> Result<ExperimentConfig, BoxError> {
    let mut cfg = match &common.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
            ExperimentConfig::from_json(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.base_seed = s;
    }
    if let Some(t) = common.trials {
        cfg.n_trials = t;
    }
    if let Some(o) = &common.out {
        cfg.out_dir = o.clone();
    }
    if let Some(t) = common.threads {
        cfg.threads = t;
    }
    if let Some(e) = common.epochs {
        cfg.train.epochs = e;
    }
    if let Some(p) = &common.dataset {
        cfg.dataset = DatasetSpec::Path(p.clone());
    }
    if let Some(n) = common.nodes {
        match &mut cfg.dataset {
            DatasetSpec::Synthetic(s) => s.n_nodes = n,
            DatasetSpec::Path(_) => return Err("--nodes applies to synthetic data only".into()),
        }
    }
    Ok(cfg)
}

fn print_aggregates(aggs: &[decaf_core::harness::Aggregate]) -> Result<(), BoxError> {
    write_aggregate_csv(std::io::stdout().lock(), aggs)?;
    Ok(())
}

fn cmd_generate(common: &Common) -> Result<(), BoxError> {
    let cfg = load_config(common)?;
    let synth = match &cfg.dataset {
        DatasetSpec::Synthetic(s) => SynthConfig {
            seed: cfg.base_seed,
            ..s.clone()
        },
        DatasetSpec::Path(_) => return Err("generate needs a synthetic dataset config".into()),
    };
    let bundle = generate(&synth)?;
    let out = &cfg.out_dir;
    for (name, g) in [("factual", &bundle.factual), ("cf_all0", &bundle.cf_all0), ("cf_all1", &bundle.cf_all1)] {
        let meta = DatasetMeta {
            seed: Some(synth.seed),
            ..DatasetMeta::describe(g, &format!("synthetic_{name}"))
        };
        save_dataset(g, &meta, &out.join(name))?;
    }
    let meta = serde_json::to_string_pretty(&bundle.meta(&synth))?;
    fs::write(out.join("bundle.json"), meta + "\n")?;
    println!(
        "wrote {} nodes, {} edges to {}",
        bundle.factual.n_nodes(),
        bundle.factual.adjacency().n_edges(),
        out.display()
    );
    Ok(())
}

fn cmd_inject(input: &Path, kind: OutlierKind, ratio: Option<f64>, common: &Common) -> Result<(), BoxError> {
    let cfg = load_config(common)?;
    let inj = InjectConfig {
        seed: cfg.base_seed,
        outlier_ratio: ratio.unwrap_or(cfg.inject.outlier_ratio),
        ..cfg.inject.clone()
    };
    let (g, meta) = load_dataset(input)?;
    let injected = inject(&g, kind, &inj)?;
    let meta = DatasetMeta {
        outlier_type: kind.name().into(),
        outlier_ratio: inj.outlier_ratio,
        seed: Some(inj.seed),
        ..meta
    };
    save_dataset(&injected, &meta, &cfg.out_dir)?;
    let k = injected.labels().map_or(0, |y| y.iter().filter(|&&v| v == 1).count());
    println!("planted {k} {} outliers into {}", kind.name(), cfg.out_dir.display());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), BoxError> {
    match cli.command {
        Command::Generate(c) => cmd_generate(&c),
        Command::Inject {
            input,
            kind,
            ratio,
            common,
        } => cmd_inject(&input, kind, ratio, &common),
        Command::VerifyScm { out } => {
            let report = verify_lemma1();
            let json = serde_json::to_string_pretty(&report)? + "\n";
            if let Some(p) = out {
                fs::write(&p, &json).map_err(|e| format!("{}: {e}", p.display()))?;
            }
            print!("{json}");
            Ok(())
        }
        Command::Run(c) => print_aggregates(&cmd_run(&load_config(&c)?)?.1),
        Command::Ablate(c) => print_aggregates(&cmd_ablate(&load_config(&c)?)?.1),
        Command::Sweep {
            common,
            x,
            x_values,
            y,
            y_values,
        } => {
            let spec = SweepSpec {
                x,
                x_values,
                y,
                y_values,
            };
            let aggs = cmd_sweep(&load_config(&common)?, &spec)?;
            println!("{} cells", aggs.len());
            Ok(())
        }
        Command::Correlate {
            common,
            samples,
            lambda_min,
            lambda_max,
        } => {
            let cfg = load_config(&common)?;
            let spec = CorrelateSpec {
                n_samples: samples,
                lambda_min,
                lambda_max,
            };
            cmd_correlate(&cfg, &spec)?;
            print!("{}", fs::read_to_string(cfg.out_dir.join("correlation.csv"))?);
            Ok(())
        }
        Command::ExportEmbeddings {
            checkpoint,
            dataset,
            out,
        } => {
            let rows = cmd_export_embeddings(&checkpoint, &dataset, &out)?;
            println!("wrote {rows} rows to {}", out.display());
            Ok(())
        }
        Command::Perf {
            common,
            sizes,
            timed_epochs,
        } => {
            let cfg = load_config(&common)?;
            cmd_perf_scaling(&cfg, &sizes, timed_epochs)?;
            print!("{}", fs::read_to_string(cfg.out_dir.join("perf.csv"))?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::debug!("{e:?}");
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
