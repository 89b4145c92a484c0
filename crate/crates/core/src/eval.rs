//! Experiment orchestration: per-task SINDy and LeARN runs, the comparison
//! tables with their generalization-gap statistic, overlays and basis plots.

mod config;
mod plot;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use config::{Config, EvalConfig, Units};
pub use plot::{plot_overlay, render, Panel, Series};

use crate::autodiff::{ParamSet, Tensor};
use crate::dataio::{
    build_features, load_trajectory, split_task, ColumnMapping, Formulation, LoadOptions, RegressionDataset, Trajectory,
};
use crate::error::{Error, Result};
use crate::exec;
use crate::learn::{BasisMode, LearnedModel};
use crate::meta::{meta_train, mse, online_adapt, write_train_log, MetaRunOptions, TaskRole, TaskSet, TrainLogRow};
use crate::sim::generate_trajectory;
use crate::sindy::{sindy_fit, sindy_predict, SindyConfig};

/// Offset between train and eval trajectory seeds.
pub const EVAL_SEED_OFFSET: u64 = 100;

const REFERENCE_JSON: &str = include_str!("../data/reference_results.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Learn,
    Sindy,
}

impl Method {
    pub const ALL: [Method; 2] = [Method::Learn, Method::Sindy];

    pub fn name(self) -> &'static str {
        match self {
            Method::Learn => "learn",
            Method::Sindy => "sindy",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub method: Method,
    pub formulation: Formulation,
    pub task: String,
    pub units: Units,
    pub adaptation_error: f64,
    pub generalization_error: f64,
    /// LeARN only: final adapted parameters re-applied to the adaptation split.
    pub post_hoc_adaptation_error: Option<f64>,
    /// Wall-clock seconds; never serialized so reports stay reproducible.
    #[serde(skip)]
    pub runtime_s: f64,
    pub config_hash: String,
}

/// A report plus the normalized predictions behind it.
#[derive(Debug, Clone)]
pub struct TaskOutput {
    pub report: TaskReport,
    pub adapt_predictions: Tensor,
    pub eval_predictions: Tensor,
    pub adapt: RegressionDataset,
    pub eval: RegressionDataset,
}

impl TaskOutput {
    /// Ground truth and both prediction segments in `units`.
    pub fn curves(&self, units: Units) -> Result<(Tensor, Tensor, Tensor)> {
        let conv = |pred: &Tensor, split: &RegressionDataset| -> Result<(Tensor, Tensor)> {
            match units {
                Units::Normalized => Ok((split.normalized_y()?, pred.clone())),
                Units::Physical => Ok((split.y.clone(), split.norm.y.denormalize(pred)?)),
            }
        };
        let (ya, pa) = conv(&self.adapt_predictions, &self.adapt)?;
        let (ye, pe) = conv(&self.eval_predictions, &self.eval)?;
        Ok((Tensor::vstack(&ya, &ye)?, pa, pe))
    }
}

fn score(pred: &Tensor, split: &RegressionDataset, units: Units) -> Result<f64> {
    match units {
        Units::Normalized => mse(pred, &split.normalized_y()?),
        Units::Physical => mse(&split.norm.y.denormalize(pred)?, &split.y),
    }
}

/// SHA-256 over names, shapes and bit patterns.
pub fn param_hash(params: &ParamSet) -> String {
    let mut h = Sha256::new();
    for (name, t) in params.iter() {
        h.update(name.as_bytes());
        h.update((t.rows() as u64).to_le_bytes());
        h.update((t.cols() as u64).to_le_bytes());
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Refits STLSQ from scratch on the task's adaptation split.
pub fn run_sindy_task(
    ds: &RegressionDataset,
    adapt_fraction: f64,
    cfg: &SindyConfig,
    units: Units,
    config_hash: &str,
) -> Result<TaskOutput> {
    let start = Instant::now();
    let (adapt, eval) = split_task(ds, adapt_fraction)?;
    let model = sindy_fit(&adapt, cfg)?;
    let pa = sindy_predict(&model, &adapt.normalized_x()?)?;
    let pe = sindy_predict(&model, &eval.normalized_x()?)?;
    let report = TaskReport {
        method: Method::Sindy,
        formulation: ds.formulation,
        task: ds.label.clone(),
        units,
        adaptation_error: score(&pa, &adapt, units)?,
        generalization_error: score(&pe, &eval, units)?,
        post_hoc_adaptation_error: None,
        runtime_s: start.elapsed().as_secs_f64(),
        config_hash: config_hash.to_string(),
    };
    Ok(TaskOutput {
        report,
        adapt_predictions: pa,
        eval_predictions: pe,
        adapt,
        eval,
    })
}

/// Streams the adaptation split through [`online_adapt`] starting from the
/// meta-trained parameters, then scores the frozen result on the eval split.
pub fn run_learn_task(
    meta: &LearnedModel,
    ds: &RegressionDataset,
    adapt_fraction: f64,
    hyper: &crate::meta::AdaptConfig,
    units: Units,
    config_hash: &str,
) -> Result<TaskOutput> {
    let start = Instant::now();
    let (adapt, eval) = split_task(ds, adapt_fraction)?;
    let mut model = meta.clone();
    model.norm = adapt.norm.clone();
    let xa = adapt.normalized_x()?;
    let out = online_adapt(&model, &xa, &adapt.normalized_y()?, hyper)?;
    let before = param_hash(&out.params);
    let pe = model.predict_with(&out.params, &eval.normalized_x()?)?;
    if param_hash(&out.params) != before {
        return Err(Error::InvalidArgument(format!(
            "parameters changed during generalization scoring of {}",
            ds.label
        )));
    }
    let post_hoc = score(&model.predict_with(&out.params, &xa)?, &adapt, units)?;
    let report = TaskReport {
        method: Method::Learn,
        formulation: ds.formulation,
        task: ds.label.clone(),
        units,
        adaptation_error: score(&out.predictions, &adapt, units)?,
        generalization_error: score(&pe, &eval, units)?,
        post_hoc_adaptation_error: Some(post_hoc),
        runtime_s: start.elapsed().as_secs_f64(),
        config_hash: config_hash.to_string(),
    };
    Ok(TaskOutput {
        report,
        adapt_predictions: out.predictions,
        eval_predictions: pe,
        adapt,
        eval,
    })
}

/// Raw trajectories for every configured task, simulated or loaded.
#[derive(Debug, Clone)]
pub struct TaskTrajectories {
    pub train: Vec<(String, Trajectory)>,
    pub eval: Vec<(String, Trajectory)>,
}

pub fn load_task_trajectories(cfg: &Config) -> Result<TaskTrajectories> {
    let e = &cfg.eval;
    let fetch = |labels: &[String], offset: u64| -> Result<Vec<(String, Trajectory)>> {
        let idx: Vec<usize> = (0..labels.len()).collect();
        if let Some(dir) = &e.data_dir {
            let mapping = match &e.column_mapping {
                Some(p) => ColumnMapping::load(p)?,
                None => ColumnMapping::default(),
            };
            let opts = LoadOptions {
                mapping,
                ..LoadOptions::default()
            };
            return exec::try_map(e.execution, &idx, |&i| {
                let path = dir.join(format!("{}.csv", labels[i]));
                Ok((labels[i].clone(), load_trajectory(&path, &opts)?))
            });
        }
        let winds = config::lookup(labels)?;
        exec::try_map(e.execution, &idx, |&i| {
            let seed = e.data_seed.wrapping_add(offset + i as u64);
            Ok((labels[i].clone(), generate_trajectory(&winds[i], &cfg.simulator, seed)?))
        })
    };
    Ok(TaskTrajectories {
        train: fetch(&e.train_tasks, 0)?,
        eval: fetch(&e.eval_tasks, EVAL_SEED_OFFSET)?,
    })
}

pub fn build_train_set(trajs: &TaskTrajectories, formulation: Formulation, smoothing_window: usize) -> Result<TaskSet> {
    Ok(TaskSet {
        role: TaskRole::MetaTrain,
        tasks: trajs
            .train
            .iter()
            .map(|(label, t)| build_features(t, formulation, smoothing_window, label))
            .collect::<Result<_>>()?,
    })
}

pub fn build_task_sets(trajs: &TaskTrajectories, formulation: Formulation, smoothing_window: usize) -> Result<(TaskSet, TaskSet)> {
    let build = |v: &[(String, Trajectory)]| -> Result<Vec<RegressionDataset>> {
        v.iter()
            .map(|(label, t)| build_features(t, formulation, smoothing_window, label))
            .collect()
    };
    Ok((
        TaskSet {
            role: TaskRole::MetaTrain,
            tasks: build(&trajs.train)?,
        },
        TaskSet {
            role: TaskRole::AdaptationEval,
            tasks: build(&trajs.eval)?,
        },
    ))
}

/// Freshly initialized model seeded by `meta.seed`; also the meta-training start point.
pub fn initial_model(cfg: &Config, formulation: Formulation, train: &TaskSet) -> Result<LearnedModel> {
    let first = train
        .tasks
        .first()
        .ok_or_else(|| Error::Empty("no meta-training tasks".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.meta.seed);
    LearnedModel::new(formulation, &cfg.learn, first.norm.clone(), &mut rng)
}

pub fn train_meta_model(
    cfg: &Config,
    formulation: Formulation,
    train: &TaskSet,
    checkpoint_dir: Option<PathBuf>,
) -> Result<(LearnedModel, Vec<TrainLogRow>)> {
    let template = initial_model(cfg, formulation, train)?;
    let opts = MetaRunOptions {
        exec: cfg.eval.execution,
        checkpoint_dir,
        query_equals_support: false,
    };
    meta_train(train, &template, &cfg.meta, &opts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub method: Method,
    pub formulation: Formulation,
    pub task: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormulationSummary {
    pub formulation: Formulation,
    /// Tasks with both methods available, in report order.
    pub tasks: Vec<String>,
    /// Mean absolute LeARN minus SINDy generalization error.
    pub gap: Option<f64>,
    /// Same without the absolute value (LeARN minus SINDy).
    pub signed_gap: Option<f64>,
    pub mean_generalization: BTreeMap<Method, f64>,
    pub mean_adaptation: BTreeMap<Method, f64>,
    pub reference_gap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonSummary {
    pub config_hash: String,
    pub units: Units,
    pub complete: bool,
    pub failures: Vec<CellFailure>,
    pub formulations: Vec<FormulationSummary>,
    pub reports: Vec<TaskReport>,
}

/// Mean of `|a_k - b_k|`.
pub fn gap_statistic(learn: &[f64], sindy: &[f64]) -> Result<f64> {
    if learn.len() != sindy.len() {
        return Err(Error::shape("gap_statistic", learn.len(), sindy.len()));
    }
    if learn.is_empty() {
        return Err(Error::Empty("gap statistic over no tasks".into()));
    }
    Ok(learn.iter().zip(sindy).map(|(a, b)| (a - b).abs()).sum::<f64>() / learn.len() as f64)
}

/// Display-only published numbers.
#[derive(Debug, Clone, Deserialize)]
pub struct ReferenceResults {
    pub note: String,
    pub gap: BTreeMap<Formulation, f64>,
    /// formulation -> method -> task -> `[adaptation, generalization]`.
    pub tables: BTreeMap<Formulation, BTreeMap<Method, BTreeMap<String, [f64; 2]>>>,
}

impl ReferenceResults {
    pub fn bundled() -> Self {
        serde_json::from_str(REFERENCE_JSON).expect("bundled reference results parse")
    }

    pub fn raw_json() -> &'static str {
        REFERENCE_JSON
    }

    pub fn lookup(&self, f: Formulation, m: Method, task: &str) -> Option<[f64; 2]> {
        self.tables.get(&f)?.get(&m)?.get(task).copied()
    }
}

fn summarize(formulation: Formulation, reports: &[&TaskReport], reference: &ReferenceResults) -> FormulationSummary {
    let of = |m: Method| -> BTreeMap<&str, &TaskReport> {
        reports
            .iter()
            .filter(|r| r.method == m)
            .map(|r| (r.task.as_str(), *r))
            .collect()
    };
    let (learn, sindy) = (of(Method::Learn), of(Method::Sindy));
    let tasks: Vec<String> = learn
        .keys()
        .filter(|t| sindy.contains_key(*t))
        .map(|t| t.to_string())
        .collect();
    let gl: Vec<f64> = tasks.iter().map(|t| learn[t.as_str()].generalization_error).collect();
    let gs: Vec<f64> = tasks.iter().map(|t| sindy[t.as_str()].generalization_error).collect();
    let gap = gap_statistic(&gl, &gs).ok();
    let signed_gap = (!tasks.is_empty())
        .then(|| gl.iter().zip(&gs).map(|(a, b)| a - b).sum::<f64>() / tasks.len() as f64);
    let mut mean_generalization = BTreeMap::new();
    let mut mean_adaptation = BTreeMap::new();
    for (m, map) in [(Method::Learn, &learn), (Method::Sindy, &sindy)] {
        if !map.is_empty() {
            let n = map.len() as f64;
            mean_generalization.insert(m, map.values().map(|r| r.generalization_error).sum::<f64>() / n);
            mean_adaptation.insert(m, map.values().map(|r| r.adaptation_error).sum::<f64>() / n);
        }
    }
    FormulationSummary {
        formulation,
        tasks,
        gap,
        signed_gap,
        mean_generalization,
        mean_adaptation,
        reference_gap: reference.gap.get(&formulation).copied(),
    }
}

fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

pub const TABLE_HEADER: [&str; 9] = [
    "method",
    "task",
    "units",
    "adaptation_error",
    "generalization_error",
    "post_hoc_adaptation_error",
    "reference_adaptation_error",
    "reference_generalization_error",
    "config_hash",
];

pub fn write_table(path: &Path, reports: &[&TaskReport], reference: &ReferenceResults) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(TABLE_HEADER)?;
    for r in reports {
        let refv = reference.lookup(r.formulation, r.method, &r.task);
        w.write_record([
            r.method.name().to_string(),
            r.task.clone(),
            r.units.name().to_string(),
            fmt_f64(r.adaptation_error),
            fmt_f64(r.generalization_error),
            fmt_opt(r.post_hoc_adaptation_error),
            fmt_opt(refv.map(|v| v[0])),
            fmt_opt(refv.map(|v| v[1])),
            r.config_hash.clone(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Default)]
pub struct CompareOptions {
    /// Also write `timings.csv` (wall clock, so not reproducible).
    pub write_timings: bool,
}

/// Runs every (method, formulation, eval task) cell and writes
/// `tables_<formulation>.csv`, `summary.json`, `train_log_<formulation>.csv`,
/// `model_<formulation>.*` and overlay SVGs into `out_dir`. A failing cell is
/// recorded and the run continues.
pub fn compare_all(cfg: &Config, out_dir: &Path, opts: &CompareOptions) -> Result<ComparisonSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let hash = cfg.hash();
    let units = cfg.eval.report_units;
    let reference = ReferenceResults::bundled();
    let trajs = load_task_trajectories(cfg)?;

    let mut reports: Vec<TaskReport> = Vec::new();
    let mut failures: Vec<CellFailure> = Vec::new();
    let mut timings: Vec<(String, String, String, f64)> = Vec::new();
    let fail_all = |failures: &mut Vec<CellFailure>, f: Formulation, methods: &[Method], err: &Error| {
        for &m in methods {
            for t in &cfg.eval.eval_tasks {
                failures.push(CellFailure {
                    method: m,
                    formulation: f,
                    task: t.clone(),
                    error: err.to_string(),
                });
            }
        }
    };

    for &f in &cfg.eval.formulations {
        let train = match build_train_set(&trajs, f, cfg.eval.smoothing_window) {
            Ok(s) => s,
            Err(e) => {
                log::warn!("{f}: building meta-training data failed: {e}");
                fail_all(&mut failures, f, &Method::ALL, &e);
                continue;
            }
        };
        let mut eval: Vec<RegressionDataset> = Vec::new();
        for (label, traj) in &trajs.eval {
            match build_features(traj, f, cfg.eval.smoothing_window, label) {
                Ok(ds) => eval.push(ds),
                Err(e) => {
                    log::warn!("{f} {label}: building task data failed: {e}");
                    for m in Method::ALL {
                        failures.push(CellFailure {
                            method: m,
                            formulation: f,
                            task: label.clone(),
                            error: e.to_string(),
                        });
                    }
                }
            }
        }
        let start = Instant::now();
        let meta = match train_meta_model(cfg, f, &train, None) {
            Ok((model, log)) => {
                write_train_log(&out_dir.join(format!("train_log_{f}.csv")), &log)?;
                model.save(&out_dir.join(format!("model_{f}")), cfg.adapt.lambda, cfg.adapt.lipschitz)?;
                Some(model)
            }
            Err(e) => {
                log::warn!("{f}: meta-training failed: {e}");
                fail_all(&mut failures, f, &[Method::Learn], &e);
                None
            }
        };
        timings.push(("meta_train".into(), f.to_string(), String::new(), start.elapsed().as_secs_f64()));

        let mut cells: Vec<(Method, usize)> = Vec::new();
        for m in Method::ALL {
            if m == Method::Learn && meta.is_none() {
                continue;
            }
            cells.extend((0..eval.len()).map(|i| (m, i)));
        }
        let outputs = exec::map(cfg.eval.execution, &cells, |&(m, i)| {
            let ds = &eval[i];
            match m {
                Method::Sindy => run_sindy_task(ds, cfg.eval.adapt_fraction, &cfg.sindy, units, &hash),
                Method::Learn => {
                    let model = meta.as_ref().expect("learn cells only scheduled with a model");
                    run_learn_task(model, ds, cfg.eval.adapt_fraction, &cfg.adapt, units, &hash)
                }
            }
        });
        for (&(m, i), out) in cells.iter().zip(outputs) {
            let task = &eval[i].label;
            match out {
                Ok(out) => {
                    timings.push((m.name().into(), f.to_string(), task.clone(), out.report.runtime_s));
                    if cfg.eval.overlay_formulation == Some(f) {
                        let (truth, pa, pe) = out.curves(cfg.eval.overlay_units)?;
                        let names = f.output_names();
                        plot_overlay(&truth, &pa, &pe, &names, |k| {
                            out_dir.join(format!("overlay_{}_{}_{}.svg", m.name(), task, names[k]))
                        })?;
                    }
                    reports.push(out.report);
                }
                Err(e) => {
                    log::warn!("{} {f} {task}: {e}", m.name());
                    failures.push(CellFailure {
                        method: m,
                        formulation: f,
                        task: task.clone(),
                        error: e.to_string(),
                    });
                }
            }
        }
    }

    let key = |m: Method, f: Formulation, t: &str| (m.name(), f.name(), t.to_string());
    reports.sort_by(|a, b| key(a.method, a.formulation, &a.task).cmp(&key(b.method, b.formulation, &b.task)));
    failures.sort_by(|a, b| key(a.method, a.formulation, &a.task).cmp(&key(b.method, b.formulation, &b.task)));

    let mut formulations = Vec::new();
    for &f in &cfg.eval.formulations {
        let rows: Vec<&TaskReport> = reports.iter().filter(|r| r.formulation == f).collect();
        write_table(&out_dir.join(format!("tables_{f}.csv")), &rows, &reference)?;
        formulations.push(summarize(f, &rows, &reference));
    }
    let summary = ComparisonSummary {
        config_hash: hash,
        units,
        complete: failures.is_empty(),
        failures,
        formulations,
        reports,
    };
    write_summary(&out_dir.join("summary.json"), &summary, &reference)?;
    if opts.write_timings {
        write_timings(&out_dir.join("timings.csv"), &timings)?;
    }
    Ok(summary)
}

fn write_summary(path: &Path, summary: &ComparisonSummary, reference: &ReferenceResults) -> Result<()> {
    let mut value = serde_json::to_value(summary)?;
    let refv: serde_json::Value = serde_json::from_str(ReferenceResults::raw_json())?;
    value["reference"] = refv;
    value["reference_note"] = serde_json::Value::String(reference.note.clone());
    let text = serde_json::to_string_pretty(&value)? + "\n";
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_timings(path: &Path, rows: &[(String, String, String, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["stage", "formulation", "task", "seconds"])?;
    for (stage, f, t, s) in rows {
        w.write_record([stage.as_str(), f.as_str(), t.as_str(), &format!("{s:.6}")])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Evenly spaced grid including both ends.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BasisPlotMeta {
    pub mode: BasisMode,
    pub fixed_basis: bool,
    pub columns: Vec<String>,
    pub range: [f64; 2],
    pub samples: usize,
    pub note: String,
}

/// Writes `basis.csv`, `basis.svg` and `basis.json` into `out_dir`.
///
/// Elementwise mode gives one column per learned scalar basis plus `sin` and
/// `cos` references. Vector mode has no scalar basis; each feature is swept
/// with the others held at zero instead.
pub fn plot_basis(model: &LearnedModel, range: [f64; 2], samples: usize, out_dir: &Path) -> Result<BasisPlotMeta> {
    let [lo, hi] = range;
    if !(lo.is_finite() && hi.is_finite() && lo < hi) || samples < 2 {
        return Err(Error::InvalidArgument(format!("bad basis grid [{lo}, {hi}] x {samples}")));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let grid = linspace(lo, hi, samples);
    let curves = model.basis_curves(&grid)?;
    let (mut columns, note) = match (model.fixed_basis.is_some(), model.mode) {
        (true, _) => (
            (0..curves.cols()).map(|q| format!("m{}", q + 1)).collect::<Vec<_>>(),
            "fixed basis library".to_string(),
        ),
        (false, BasisMode::Elementwise) => (
            (0..curves.cols()).map(|q| format!("m{}", q + 1)).collect(),
            "learned scalar basis functions".to_string(),
        ),
        (false, BasisMode::Vector) => {
            let names = model.formulation.input_names();
            let mut cols = Vec::new();
            for name in &names {
                for q in 0..model.num_basis {
                    cols.push(format!("m{}_{name}", q + 1));
                }
            }
            (
                cols,
                "vector mode: per-feature partial dependence, other features held at 0".to_string(),
            )
        }
    };
    columns.push("sin".into());
    columns.push("cos".into());

    let csv_path = out_dir.join("basis.csv");
    let mut w = csv::Writer::from_path(&csv_path)?;
    let mut header = vec!["x".to_string()];
    header.extend(columns.iter().cloned());
    w.write_record(&header)?;
    for (r, &x) in grid.iter().enumerate() {
        let mut row = vec![fmt_f64(x)];
        row.extend((0..curves.cols()).map(|c| fmt_f64(curves.get(r, c))));
        row.push(fmt_f64(x.sin()));
        row.push(fmt_f64(x.cos()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;

    const PALETTE: [&str; 8] = ["#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02", "#a6761d", "#666666"];
    let mut series: Vec<Series> = (0..curves.cols())
        .map(|c| Series {
            name: &columns[c],
            points: grid.iter().enumerate().map(|(r, &x)| (x, curves.get(r, c))).collect(),
            color: PALETTE[c % PALETTE.len()],
            stroke_width: 1.5,
            opacity: 1.0,
        })
        .collect();
    for (name, f) in [("sin", f64::sin as fn(f64) -> f64), ("cos", f64::cos)] {
        series.push(Series {
            name,
            points: grid.iter().map(|&x| (x, f(x))).collect(),
            color: "#999999",
            stroke_width: 1.0,
            opacity: 0.7,
        });
    }
    let panel = Panel {
        title: format!("{} basis ({})", model.formulation, note),
        x_label: "input",
        series,
    };
    plot::write_text(&out_dir.join("basis.svg"), &render(&[panel]))?;

    let meta = BasisPlotMeta {
        mode: model.mode,
        fixed_basis: model.fixed_basis.is_some(),
        columns,
        range,
        samples,
        note,
    };
    let path = out_dir.join("basis.json");
    std::fs::write(&path, serde_json::to_string_pretty(&meta)? + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(meta)
}

/// Error pair for one model on one task, used by the CLI `adapt`/`eval` paths.
pub fn run_cell(
    method: Method,
    meta: Option<&LearnedModel>,
    ds: &RegressionDataset,
    cfg: &Config,
) -> Result<TaskOutput> {
    let hash = cfg.hash();
    match method {
        Method::Sindy => run_sindy_task(ds, cfg.eval.adapt_fraction, &cfg.sindy, cfg.eval.report_units, &hash),
        Method::Learn => {
            let model = meta.ok_or_else(|| Error::InvalidArgument("LeARN cell needs a meta-trained model".into()))?;
            run_learn_task(model, ds, cfg.eval.adapt_fraction, &cfg.adapt, cfg.eval.report_units, &hash)
        }
    }
}
