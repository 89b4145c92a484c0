//! Bi-level meta-training over wind tasks and prequential online adaptation.

use std::path::PathBuf;
use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{backward, sgd_step_differentiable, Graph, ParamSet, ParamVars, Tensor, Var};
use crate::dataio::RegressionDataset;
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::learn::{adapt_loss, task_loss, LearnedModel};

/// Mean query loss above which meta-training is declared divergent.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaConfig {
    /// Inner step size alpha.
    pub alpha: f64,
    /// Outer step size beta.
    pub beta: f64,
    pub inner_steps: usize,
    pub inner_batch: usize,
    /// Tasks per outer step.
    pub meta_batch: usize,
    pub outer_iters: usize,
    pub second_order: bool,
    /// Weight decay on the meta-objective.
    pub mu_meta: f64,
    pub seed: u64,
    /// Checkpoint period in outer iterations, 0 disables.
    pub checkpoint_every: usize,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            beta: 0.001,
            inner_steps: 5,
            inner_batch: 64,
            meta_batch: 6,
            outer_iters: 2000,
            second_order: true,
            mu_meta: 0.0,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) {
            return Err(Error::Config("meta: beta must be positive".into()));
        }
        self.check_runnable()
    }

    /// Looser check used by the trainer itself: `beta = 0` is a valid no-op.
    pub fn check_runnable(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("meta: {m}")));
        if !(self.alpha > 0.0 && self.alpha.is_finite()) || !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("alpha must be positive and beta non-negative");
        }
        if self.inner_steps == 0 {
            return bad("inner_steps must be at least 1");
        }
        if self.inner_batch == 0 || self.meta_batch == 0 {
            return bad("inner_batch and meta_batch must be positive");
        }
        if !(self.mu_meta >= 0.0) {
            return bad("mu_meta must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    pub lr: f64,
    pub lambda: f64,
    pub lipschitz: f64,
    /// Gradient steps per streamed sample.
    pub steps: usize,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            lr: 0.005,
            lambda: 0.1,
            lipschitz: 1.0,
            steps: 1,
            seed: 0,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("adapt: lr must be positive, got {}", self.lr)));
        }
        if self.steps == 0 {
            return Err(Error::Config("adapt: steps must be at least 1".into()));
        }
        if !(self.lambda >= 0.0) || !(self.lipschitz >= 0.0) {
            return Err(Error::Config("adapt: lambda and lipschitz must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskRole {
    MetaTrain,
    AdaptationEval,
}

/// Wind-labelled datasets in a fixed order.
#[derive(Debug, Clone)]
pub struct TaskSet {
    pub role: TaskRole,
    pub tasks: Vec<RegressionDataset>,
}

impl TaskSet {
    pub fn labels(&self) -> Vec<&str> {
        self.tasks.iter().map(|t| t.label.as_str()).collect()
    }

    pub fn get(&self, label: &str) -> Option<&RegressionDataset> {
        self.tasks.iter().find(|t| t.label == label)
    }
}

/// Normalized regression data for one task.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub label: String,
    pub x: Tensor,
    pub y: Tensor,
}

impl TaskData {
    pub fn from_dataset(ds: &RegressionDataset) -> Result<Self> {
        Ok(Self {
            label: ds.label.clone(),
            x: ds.normalized_x()?,
            y: ds.normalized_y()?,
        })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }
}

/// `n` rounds of simultaneous gradient steps on `loss`. With
/// `second_order` the result stays differentiable with respect to `params`.
/// Returns the adapted parameters and the loss before each step.
pub fn inner_adapt<'g, L>(
    params: &ParamVars<'g>,
    loss: L,
    alpha: f64,
    n: usize,
    second_order: bool,
) -> Result<(ParamVars<'g>, Vec<f64>)>
where
    L: Fn(&ParamVars<'g>) -> Result<Var<'g>>,
{
    let mut current = params.clone();
    let mut losses = Vec::with_capacity(n);
    for _ in 0..n {
        let l = loss(&current)?;
        losses.push(l.item());
        let grads = backward(l, &current, second_order)?;
        current = sgd_step_differentiable(&current, &grads, alpha, second_order)?;
    }
    Ok((current, losses))
}

/// One task's contribution to the meta-gradient.
#[derive(Debug, Clone)]
pub struct MetaGradient {
    pub grads: ParamSet,
    /// Support loss at the unadapted parameters.
    pub support_loss: f64,
    /// Query loss at the adapted parameters.
    pub query_loss: f64,
}

/// Gradient of `query(inner_adapt(params, support))` with respect to `params`.
pub fn meta_gradient<S, Q>(
    params: &ParamSet,
    support: S,
    query: Q,
    alpha: f64,
    n: usize,
    second_order: bool,
) -> Result<MetaGradient>
where
    S: for<'g> Fn(&ParamVars<'g>) -> Result<Var<'g>>,
    Q: for<'g> Fn(&ParamVars<'g>) -> Result<Var<'g>>,
{
    let g = Graph::new();
    let vars = params.to_vars(&g);
    let (adapted, losses) = inner_adapt(&vars, &support, alpha, n, second_order)?;
    let q = query(&adapted)?;
    let query_loss = q.item();
    let support_loss = match losses.first() {
        Some(&l) => l,
        None => support(&vars)?.item(),
    };
    let grads = backward(q, &vars, false)?.values();
    Ok(MetaGradient {
        grads,
        support_loss,
        query_loss,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainLogRow {
    pub iteration: usize,
    pub support_loss: f64,
    pub query_loss: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Default)]
pub struct MetaRunOptions {
    pub exec: Execution,
    /// Directory receiving `checkpoint_<iter>` parameter files.
    pub checkpoint_dir: Option<PathBuf>,
    /// Reuse the support batch as the query batch (plain-SGD limit).
    pub query_equals_support: bool,
}

#[derive(Debug, Clone)]
pub struct MetaOutcome {
    pub params: ParamSet,
    pub log: Vec<TrainLogRow>,
}

/// Batch loss used by the generic trainer: `(params, x, y) -> scalar`.
pub trait BatchLoss: Sync {
    fn loss<'g>(&self, params: &ParamVars<'g>, x: &Tensor, y: &Tensor) -> Result<Var<'g>>;
}

impl BatchLoss for LearnedModel {
    fn loss<'g>(&self, params: &ParamVars<'g>, x: &Tensor, y: &Tensor) -> Result<Var<'g>> {
        task_loss(self, params, x, y)
    }
}

struct Episode {
    task: usize,
    support: Vec<usize>,
    query: Vec<usize>,
}

fn sample_episodes(rng: &mut ChaCha8Rng, tasks: &[TaskData], hyper: &MetaConfig, shared: bool) -> Vec<Episode> {
    let chosen: Vec<usize> = if hyper.meta_batch >= tasks.len() {
        (0..tasks.len()).collect()
    } else {
        let mut c = sample(rng, tasks.len(), hyper.meta_batch).into_vec();
        c.sort_unstable();
        c
    };
    chosen
        .into_iter()
        .map(|task| {
            let n = tasks[task].len();
            if shared {
                let support = sample(rng, n, hyper.inner_batch.min(n)).into_vec();
                return Episode {
                    task,
                    query: support.clone(),
                    support,
                };
            }
            let b = hyper.inner_batch.min(n / 2);
            let idx = sample(rng, n, 2 * b).into_vec();
            Episode {
                task,
                support: idx[..b].to_vec(),
                query: idx[b..].to_vec(),
            }
        })
        .collect()
}

/// Meta-trains `init` on `tasks`. Support and query batches are disjoint
/// random subsets of each task, redrawn every outer iteration.
pub fn meta_train_with<M: BatchLoss>(
    model: &M,
    init: &ParamSet,
    tasks: &[TaskData],
    hyper: &MetaConfig,
    opts: &MetaRunOptions,
) -> Result<MetaOutcome> {
    hyper.check_runnable()?;
    if tasks.is_empty() {
        return Err(Error::Empty("meta-training needs at least one task".into()));
    }
    if let Some(t) = tasks.iter().find(|t| t.len() < 2) {
        return Err(Error::Empty(format!("task `{}` has fewer than 2 samples", t.label)));
    }
    if let Some(dir) = &opts.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut params = init.clone();
    let mut log = Vec::with_capacity(hyper.outer_iters);
    let start = Instant::now();
    for iteration in 0..hyper.outer_iters {
        let episodes = sample_episodes(&mut rng, tasks, hyper, opts.query_equals_support);
        let results = exec::try_map(opts.exec, &episodes, |ep| {
            let t = &tasks[ep.task];
            let (xs, ys) = (t.x.select_rows(&ep.support), t.y.select_rows(&ep.support));
            let (xq, yq) = (t.x.select_rows(&ep.query), t.y.select_rows(&ep.query));
            meta_gradient(
                &params,
                |p| model.loss(p, &xs, &ys),
                |p| model.loss(p, &xq, &yq),
                hyper.alpha,
                hyper.inner_steps,
                hyper.second_order,
            )
        })?;
        let k = results.len() as f64;
        let support_loss = results.iter().map(|r| r.support_loss).sum::<f64>() / k;
        let query_loss = results.iter().map(|r| r.query_loss).sum::<f64>() / k;
        if !query_loss.is_finite() || query_loss > DIVERGENCE_LIMIT {
            return Err(Error::Divergence {
                iteration,
                loss: query_loss,
            });
        }
        let mut total = results[0].grads.clone();
        for r in &results[1..] {
            total = total.combine(&r.grads, |a, b| a + b)?;
        }
        if hyper.mu_meta > 0.0 {
            total = total.combine(&params, |g, p| g + 2.0 * hyper.mu_meta * p)?;
        }
        params = params.sgd_update(&total, hyper.beta)?;
        log.push(TrainLogRow {
            iteration,
            support_loss,
            query_loss,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        if let Some(dir) = &opts.checkpoint_dir {
            if hyper.checkpoint_every > 0 && (iteration + 1) % hyper.checkpoint_every == 0 {
                params.save(dir.join(format!("checkpoint_{:06}", iteration + 1)))?;
            }
        }
        if iteration % 100 == 0 {
            log::debug!("meta iteration {iteration}: support {support_loss:.6} query {query_loss:.6}");
        }
    }
    Ok(MetaOutcome { params, log })
}

/// Meta-trains a LeARN model over `tasks`, each normalized with its own statistics.
pub fn meta_train(
    tasks: &TaskSet,
    template: &LearnedModel,
    hyper: &MetaConfig,
    opts: &MetaRunOptions,
) -> Result<(LearnedModel, Vec<TrainLogRow>)> {
    let data = tasks.tasks.iter().map(TaskData::from_dataset).collect::<Result<Vec<_>>>()?;
    let outcome = meta_train_with(template, &template.params, &data, hyper, opts)?;
    let mut model = template.clone();
    model.params = outcome.params;
    Ok((model, outcome.log))
}

pub fn write_train_log(path: &std::path::Path, log: &[TrainLogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["iteration", "support_loss", "query_loss"])?;
    for r in log {
        w.write_record([r.iteration.to_string(), format!("{:?}", r.support_loss), format!("{:?}", r.query_loss)])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Sum over output dimensions, mean over samples.
pub fn mse(pred: &Tensor, y: &Tensor) -> Result<f64> {
    if pred.shape() != y.shape() {
        return Err(Error::shape("mse", format!("{:?}", y.shape()), format!("{:?}", pred.shape())));
    }
    if y.rows() == 0 {
        return Err(Error::Empty("mse of an empty set".into()));
    }
    let s: f64 = pred.data().iter().zip(y.data()).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(s / y.rows() as f64)
}

#[derive(Debug, Clone)]
pub struct AdaptOutcome {
    pub params: ParamSet,
    /// Prediction at each step, made before that step's update.
    pub predictions: Tensor,
    /// Mean squared prequential residual.
    pub adaptation_error: f64,
    /// MSE of the final parameters re-applied to the whole stream.
    pub post_hoc_error: f64,
}

/// Streams `(x, y)` in order: predict with the current parameters, then take
/// `steps` gradient steps on the squared residual plus the Lipschitz hinge
/// against the previous prediction.
pub fn online_adapt(model: &LearnedModel, x: &Tensor, y: &Tensor, hyper: &AdaptConfig) -> Result<AdaptOutcome> {
    if !(hyper.lr > 0.0 && hyper.lr.is_finite()) {
        return Err(Error::InvalidArgument(format!("online learning rate must be positive, got {}", hyper.lr)));
    }
    if x.rows() != y.rows() {
        return Err(Error::shape("online_adapt stream", x.rows(), y.rows()));
    }
    if x.rows() == 0 {
        return Err(Error::Empty("online_adapt stream is empty".into()));
    }
    let n = x.rows();
    let out = model.output_dim();
    let mut params = model.params.clone();
    let mut predictions = Tensor::zeros(n, out);
    let mut f_prev: Option<Tensor> = None;
    for t in 0..n {
        let xt = x.slice_rows(t, t + 1);
        let yt = y.slice_rows(t, t + 1);
        let mut recorded: Option<Tensor> = None;
        for _ in 0..hyper.steps.max(1) {
            let g = Graph::new();
            let vars = if hyper.steps == 0 { params.to_constants(&g) } else { params.to_vars(&g) };
            let (loss, pred) = adapt_loss(model, &vars, &xt, &yt, f_prev.as_ref(), hyper.lambda, hyper.lipschitz)?;
            if !loss.item().is_finite() {
                return Err(Error::AdaptationNonFinite { step: t });
            }
            if recorded.is_none() {
                recorded = Some((*pred.value()).clone());
            }
            if hyper.steps > 0 {
                let grads = backward(loss, &vars, false)?.values();
                params = params.sgd_update(&grads, hyper.lr)?;
            }
        }
        let p = recorded.expect("at least one forward pass per step");
        for k in 0..out {
            predictions.set(t, k, p.get(0, k));
        }
        f_prev = Some(p);
    }
    let adaptation_error = mse(&predictions, y)?;
    let post_hoc_error = mse(&model.predict_with(&params, x)?, y)?;
    Ok(AdaptOutcome {
        params,
        predictions,
        adaptation_error,
        post_hoc_error,
    })
}

/// Frozen-parameter MSE on an evaluation split.
pub fn evaluate_generalization(model: &LearnedModel, params: &ParamSet, x: &Tensor, y: &Tensor) -> Result<f64> {
    mse(&model.predict_with(params, x)?, y)
}
