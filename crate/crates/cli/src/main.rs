use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use learnsysid::dataio::{sidecar_path, write_metadata, write_trajectory, Formulation, TrajectoryMeta, TRAJECTORY_SCHEMA};
use learnsysid::eval::{
    build_task_sets, compare_all, load_task_trajectories, plot_basis, run_cell, train_meta_model, write_table,
    CompareOptions, Config, Method, ReferenceResults, TaskReport, Units, EVAL_SEED_OFFSET,
};
use learnsysid::learn::LearnedModel;
use learnsysid::meta::write_train_log;
use learnsysid::sim::{generate_trajectory, wind_by_label};
use learnsysid::Error;

#[derive(Parser, Debug)]
#[command(name = "learnsysid", version, about = "SINDy and meta-learned basis system identification for quadrotor wind tasks")]
struct Cli {
    /// TOML or JSON config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Report errors in physical units instead of normalized ones.
    #[arg(long, global = true)]
    raw_units: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate wind-task trajectories to `<out-dir>/<label>.csv` plus a JSON sidecar.
    Simulate {
        /// Wind task label; repeatable. Defaults to every train and eval task.
        #[arg(long)]
        wind: Vec<String>,
    },
    /// Meta-train a LeARN model on the training tasks.
    MetaTrain {
        #[arg(long)]
        formulation: Formulation,
        /// Save parameters every `meta.checkpoint_every` iterations.
        #[arg(long)]
        checkpoints: bool,
    },
    /// Online adaptation of a meta-trained model on each eval task.
    Adapt(ModelArgs),
    /// Score one method on every eval task.
    Eval {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value = "learn")]
        method: String,
    },
    /// Full SINDy vs LeARN comparison over all configured formulations.
    Compare {
        /// Also write wall-clock timings.csv.
        #[arg(long)]
        timings: bool,
    },
    /// Evaluate learned basis functions over a grid.
    PlotBasis {
        /// Model stem written by meta-train.
        #[arg(long)]
        model: PathBuf,
        #[arg(long, num_args = 2, allow_negative_numbers = true, value_names = ["LO", "HI"])]
        range: Option<Vec<f64>>,
        #[arg(long)]
        samples: Option<usize>,
    },
}

#[derive(Args, Debug)]
struct ModelArgs {
    #[arg(long)]
    formulation: Formulation,
    /// Model stem; defaults to `<out-dir>/model_<formulation>`.
    #[arg(long)]
    model: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let cfg = match load_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    match run(&cli, &cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let config_error = e.chain().any(|c| matches!(c.downcast_ref::<Error>(), Some(Error::Config(_))));
            ExitCode::from(if config_error { 1 } else { 2 })
        }
    }
}

fn load_config(cli: &Cli) -> learnsysid::Result<Config> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    if cli.raw_units {
        cfg.eval.report_units = Units::Physical;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn run(cli: &Cli, cfg: &Config) -> anyhow::Result<()> {
    let out = &cli.out_dir;
    create_dir(out)?;
    match &cli.command {
        Command::Simulate { wind } => simulate(cfg, wind, out),
        Command::MetaTrain {
            formulation,
            checkpoints,
        } => {
            let trajs = load_task_trajectories(cfg)?;
            let (train, _) = build_task_sets(&trajs, *formulation, cfg.eval.smoothing_window)?;
            let ckpt = checkpoints.then(|| out.join(format!("checkpoints_{formulation}")));
            if let Some(d) = &ckpt {
                create_dir(d)?;
            }
            let (model, log) = train_meta_model(cfg, *formulation, &train, ckpt)?;
            let stem = out.join(format!("model_{formulation}"));
            model.save(&stem, cfg.adapt.lambda, cfg.adapt.lipschitz)?;
            write_train_log(&out.join("train_log.csv"), &log)?;
            if let Some(last) = log.last() {
                log::info!("final query loss {:.6}", last.query_loss);
            }
            log::info!("model written to {}", stem.display());
            Ok(())
        }
        Command::Adapt(args) => {
            let reports = score_eval_tasks(cfg, args, Method::Learn, out)?;
            write_reports(cfg, args.formulation, &reports, &out.join(format!("adapt_{}.csv", args.formulation)))
        }
        Command::Eval { model, method } => {
            let m = match method.as_str() {
                "learn" => Method::Learn,
                "sindy" => Method::Sindy,
                other => anyhow::bail!(Error::Config(format!("unknown method `{other}` (expected learn or sindy)"))),
            };
            let reports = score_eval_tasks(cfg, model, m, out)?;
            let path = out.join(format!("eval_{}_{}.csv", m.name(), model.formulation));
            write_reports(cfg, model.formulation, &reports, &path)
        }
        Command::Compare { timings } => {
            let summary = compare_all(
                cfg,
                out,
                &CompareOptions {
                    write_timings: *timings,
                },
            )?;
            for f in &summary.formulations {
                let gap = f.gap.map_or("n/a".to_string(), |g| format!("{g:.6}"));
                let reference = f.reference_gap.map_or("n/a".to_string(), |g| format!("{g:.6}"));
                println!("{:<14} gap {gap} (published {reference})", f.formulation.name());
            }
            if !summary.complete {
                for fail in &summary.failures {
                    eprintln!("failed: {} {} {}: {}", fail.method.name(), fail.formulation, fail.task, fail.error);
                }
                anyhow::bail!("{} comparison cell(s) failed", summary.failures.len());
            }
            Ok(())
        }
        Command::PlotBasis { model, range, samples } => {
            let m = LearnedModel::load(model)?;
            let range = match range.as_deref() {
                Some([lo, hi]) => [*lo, *hi],
                _ => cfg.eval.basis_range,
            };
            let meta = plot_basis(&m, range, samples.unwrap_or(cfg.eval.basis_samples), out)?;
            log::info!("basis.csv: {} curves ({})", meta.columns.len(), meta.note);
            Ok(())
        }
    }
}

fn simulate(cfg: &Config, winds: &[String], out: &Path) -> anyhow::Result<()> {
    let all: Vec<String> = cfg.eval.train_tasks.iter().chain(&cfg.eval.eval_tasks).cloned().collect();
    let labels = if winds.is_empty() { all } else { winds.to_vec() };
    for label in &labels {
        let wind =
            wind_by_label(label).ok_or_else(|| Error::Config(format!("unknown wind task `{label}`")))?;
        let seed = task_seed(cfg, label);
        let traj = generate_trajectory(&wind, &cfg.simulator, seed)?;
        let path = out.join(format!("{label}.csv"));
        write_trajectory(&path, &traj)?;
        let meta = TrajectoryMeta {
            schema: TRAJECTORY_SCHEMA.to_string(),
            wind,
            dt: cfg.simulator.dt,
            duration: cfg.simulator.duration,
            samples: traj.len(),
            seed,
            simulator: cfg.simulator.clone(),
        };
        write_metadata(&sidecar_path(&path), &meta)?;
        log::info!("{label}: {} samples -> {}", traj.len(), path.display());
    }
    Ok(())
}

/// Same seed the comparison pipeline uses for this label.
fn task_seed(cfg: &Config, label: &str) -> u64 {
    let e = &cfg.eval;
    if let Some(i) = e.train_tasks.iter().position(|l| l == label) {
        e.data_seed.wrapping_add(i as u64)
    } else if let Some(j) = e.eval_tasks.iter().position(|l| l == label) {
        e.data_seed.wrapping_add(EVAL_SEED_OFFSET + j as u64)
    } else {
        e.data_seed
    }
}

fn score_eval_tasks(cfg: &Config, args: &ModelArgs, method: Method, out: &Path) -> anyhow::Result<Vec<TaskReport>> {
    let model = match method {
        Method::Sindy => None,
        Method::Learn => {
            let stem = args
                .model
                .clone()
                .unwrap_or_else(|| out.join(format!("model_{}", args.formulation)));
            let m = LearnedModel::load(&stem).with_context(|| format!("loading model {}", stem.display()))?;
            if m.formulation != args.formulation {
                anyhow::bail!(Error::Config(format!(
                    "model {} is for {}, not {}",
                    stem.display(),
                    m.formulation,
                    args.formulation
                )));
            }
            Some(m)
        }
    };
    let trajs = load_task_trajectories(cfg)?;
    let (_, eval) = build_task_sets(&trajs, args.formulation, cfg.eval.smoothing_window)?;
    let mut reports = Vec::new();
    for ds in &eval.tasks {
        let cell = run_cell(method, model.as_ref(), ds, cfg)?;
        let r = &cell.report;
        println!(
            "{:<10} adaptation {:.6}  generalization {:.6} ({})",
            r.task,
            r.adaptation_error,
            r.generalization_error,
            r.units.name()
        );
        reports.push(cell.report);
    }
    Ok(reports)
}

fn write_reports(cfg: &Config, f: Formulation, reports: &[TaskReport], path: &Path) -> anyhow::Result<()> {
    let rows: Vec<&TaskReport> = reports.iter().filter(|r| r.formulation == f).collect();
    write_table(path, &rows, &ReferenceResults::bundled())?;
    log::info!("{} rows -> {} (config {})", rows.len(), path.display(), &cfg.hash()[..12]);
    Ok(())
}
