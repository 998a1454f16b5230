//! Gradient-based meta-training (MAML) over fused-frame tasks.
//!
//! Every meta-iteration samples a batch of tasks. For each task the parameters take one
//! plain gradient step on the support set; the query loss at the adapted parameters is
//! differentiated with respect to the *initial* parameters. The per-task gradients are
//! summed in task order and the initial parameters move once per iteration.
//!
//! In second-order mode the outer gradient is `(I - alpha * H_support) * grad_query`,
//! with the Hessian-vector product taken by [`Objective::hvp`].

use std::io::Write;
use std::time::Instant;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Batch, Cnn, CnnParams, Objective};
use crate::train::{adam_update, AdamState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaMode {
    FirstOrder,
    #[default]
    SecondOrder,
}

/// Optimizer applied to the summed outer gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OuterOptimizer {
    #[default]
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetaConfig {
    /// Inner (sample-level) learning rate.
    pub alpha: f64,
    /// Outer (task-level) learning rate.
    pub beta: f64,
    pub tasks_per_iteration: usize,
    pub frames_per_task: usize,
    /// Share of each task's frames used as support; the rest is query.
    pub support_fraction: f64,
    pub iterations: usize,
    pub mode: MetaMode,
    pub outer_optimizer: OuterOptimizer,
    /// Finite-difference step of the Hessian-vector product.
    pub hvp_eps: f64,
    pub seed: u64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            alpha: 0.1,
            beta: 0.001,
            tasks_per_iteration: 32,
            frames_per_task: 1000,
            support_fraction: 0.5,
            iterations: 20_000,
            mode: MetaMode::SecondOrder,
            outer_optimizer: OuterOptimizer::Sgd,
            hvp_eps: 1e-4,
            seed: 0,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !(self.beta >= 0.0) {
            return Err(Error::invalid_config("learning rates must be non-negative"));
        }
        if !(self.support_fraction > 0.0 && self.support_fraction < 1.0) {
            return Err(Error::invalid_config(format!(
                "support_fraction {} outside (0, 1)",
                self.support_fraction
            )));
        }
        if self.tasks_per_iteration == 0 {
            return Err(Error::invalid_config("tasks_per_iteration must be positive"));
        }
        if !(self.hvp_eps > 0.0) {
            return Err(Error::invalid_config("hvp_eps must be positive"));
        }
        let (s, q) = self.split_sizes();
        if s == 0 || q == 0 {
            return Err(Error::invalid_config(format!(
                "frames_per_task {} leaves an empty support or query set",
                self.frames_per_task
            )));
        }
        Ok(())
    }

    /// Support and query sizes of one task.
    pub fn split_sizes(&self) -> (usize, usize) {
        let support = (self.frames_per_task as f64 * self.support_fraction).round() as usize;
        let support = support.min(self.frames_per_task);
        (support, self.frames_per_task - support)
    }
}

/// Support and query batches drawn from one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSample<B> {
    pub support: B,
    pub query: B,
}

/// Draws `frames_per_task` samples without replacement and splits them disjointly.
pub fn sample_task(pool: &Batch, cfg: &MetaConfig, rng: &mut ChaCha8Rng) -> Result<TaskSample<Batch>> {
    cfg.validate()?;
    if pool.len() < cfg.frames_per_task {
        return Err(Error::invalid_config(format!(
            "task needs {} frames but the pool holds {}",
            cfg.frames_per_task,
            pool.len()
        )));
    }
    let picked = index::sample(rng, pool.len(), cfg.frames_per_task).into_vec();
    let (support, _) = cfg.split_sizes();
    Ok(TaskSample {
        support: pool.select(&picked[..support]),
        query: pool.select(&picked[support..]),
    })
}

/// Anything that can produce tasks for meta-training.
pub trait TaskSource<B> {
    fn sample(&mut self, cfg: &MetaConfig, rng: &mut ChaCha8Rng) -> Result<TaskSample<B>>;
}

impl<B, F> TaskSource<B> for F
where
    F: FnMut(&MetaConfig, &mut ChaCha8Rng) -> Result<TaskSample<B>>,
{
    fn sample(&mut self, cfg: &MetaConfig, rng: &mut ChaCha8Rng) -> Result<TaskSample<B>> {
        self(cfg, rng)
    }
}

/// Tasks drawn uniformly from one pooled training set.
#[derive(Debug, Clone, Copy)]
pub struct UniformPool<'a>(pub &'a Batch);

impl TaskSource<Batch> for UniformPool<'_> {
    fn sample(&mut self, cfg: &MetaConfig, rng: &mut ChaCha8Rng) -> Result<TaskSample<Batch>> {
        sample_task(self.0, cfg, rng)
    }
}

/// Tasks drawn from one group (e.g. one recording) chosen uniformly per task.
#[derive(Debug, Clone)]
pub struct GroupedPools<'a> {
    groups: Vec<&'a Batch>,
}

impl<'a> GroupedPools<'a> {
    pub fn new(groups: Vec<&'a Batch>) -> Result<Self> {
        if groups.is_empty() {
            return Err(Error::invalid_config("no task groups"));
        }
        Ok(GroupedPools { groups })
    }
}

impl TaskSource<Batch> for GroupedPools<'_> {
    fn sample(&mut self, cfg: &MetaConfig, rng: &mut ChaCha8Rng) -> Result<TaskSample<Batch>> {
        use rand::Rng;
        let g = rng.gen_range(0..self.groups.len());
        sample_task(self.groups[g], cfg, rng)
    }
}

/// Result of one inner step.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapted {
    pub support_loss: f64,
    pub support_grad: Vec<f64>,
    pub theta: Vec<f64>,
}

/// `theta' = theta - alpha * grad L_support(theta)`.
pub fn adapt<O: Objective>(objective: &O, theta: &[f64], support: &O::Batch, alpha: f64) -> Result<Adapted> {
    if !(alpha >= 0.0) {
        return Err(Error::invalid_input(format!("alpha must be non-negative, got {alpha}")));
    }
    let (support_loss, support_grad) = objective.loss_and_grad(theta, support)?;
    let adapted = if alpha == 0.0 {
        theta.to_vec()
    } else {
        theta
            .iter()
            .zip(&support_grad)
            .map(|(t, g)| t - alpha * g)
            .collect()
    };
    Ok(Adapted {
        support_loss,
        support_grad,
        theta: adapted,
    })
}

/// One plain gradient step of the network on a support batch.
pub fn inner_update(theta: &CnnParams, support: &Batch, alpha: f64) -> Result<CnnParams> {
    let cnn = Cnn::new(*theta.config())?;
    let adapted = adapt(&cnn, theta.as_slice(), support, alpha)?;
    CnnParams::unflatten(*theta.config(), adapted.theta)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OuterGradient {
    pub grad: Vec<f64>,
    pub support_loss: f64,
    /// Query loss at the adapted parameters.
    pub query_loss: f64,
}

/// Gradient of the query loss at the adapted parameters with respect to `theta`.
pub fn outer_gradient<O: Objective>(
    objective: &O,
    theta: &[f64],
    task: &TaskSample<O::Batch>,
    alpha: f64,
    mode: MetaMode,
    hvp_eps: f64,
) -> Result<OuterGradient> {
    let adapted = adapt(objective, theta, &task.support, alpha)?;
    let (query_loss, query_grad) = objective.loss_and_grad(&adapted.theta, &task.query)?;
    let grad = match mode {
        MetaMode::FirstOrder => query_grad,
        MetaMode::SecondOrder => {
            let hv = objective.hvp(theta, &task.support, &query_grad, hvp_eps)?;
            query_grad
                .iter()
                .zip(&hv)
                .map(|(g, h)| g - alpha * h)
                .collect()
        }
    };
    Ok(OuterGradient {
        grad,
        support_loss: adapted.support_loss,
        query_loss,
    })
}

/// Per-iteration progress.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaProgress {
    pub iteration: usize,
    pub support_loss: f64,
    pub query_loss: f64,
    pub seconds: f64,
}

pub trait ProgressSink {
    fn record(&mut self, progress: &MetaProgress) -> Result<()>;
}

impl ProgressSink for Vec<MetaProgress> {
    fn record(&mut self, progress: &MetaProgress) -> Result<()> {
        self.push(progress.clone());
        Ok(())
    }
}

/// Discards progress.
impl ProgressSink for () {
    fn record(&mut self, _: &MetaProgress) -> Result<()> {
        Ok(())
    }
}

/// Appends `iteration,support_loss,query_loss,seconds` rows.
pub struct CsvProgress<W: Write> {
    out: W,
    header_written: bool,
}

impl<W: Write> CsvProgress<W> {
    pub fn new(out: W) -> Self {
        CsvProgress {
            out,
            header_written: false,
        }
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

impl<W: Write> ProgressSink for CsvProgress<W> {
    fn record(&mut self, p: &MetaProgress) -> Result<()> {
        let io = |e| Error::Numeric(format!("progress write failed: {e}"));
        if !self.header_written {
            writeln!(self.out, "iteration,support_loss,query_loss,seconds").map_err(io)?;
            self.header_written = true;
        }
        writeln!(
            self.out,
            "{},{},{},{:.3}",
            p.iteration, p.support_loss, p.query_loss, p.seconds
        )
        .map_err(io)?;
        self.out.flush().map_err(io)
    }
}

/// Runs `cfg.iterations` meta-iterations from `theta0`.
///
/// Tasks are sampled sequentially from one generator seeded with `cfg.seed`; per-task
/// gradients may be computed in parallel but are summed in task order.
pub fn meta_train<O, S, P>(
    objective: &O,
    source: &mut S,
    cfg: &MetaConfig,
    theta0: &[f64],
    sink: &mut P,
) -> Result<Vec<f64>>
where
    O: Objective,
    O::Batch: Send,
    S: TaskSource<O::Batch>,
    P: ProgressSink + ?Sized,
{
    cfg.validate()?;
    if theta0.len() != objective.dim() {
        return Err(Error::invalid_input(format!(
            "initial parameters have {} entries, objective expects {}",
            theta0.len(),
            objective.dim()
        )));
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut theta = theta0.to_vec();
    let mut adam = AdamState::new(theta.len());
    for iteration in 1..=cfg.iterations {
        let tasks = (0..cfg.tasks_per_iteration)
            .map(|_| source.sample(cfg, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let per_task = tasks
            .par_iter()
            .map(|task| outer_gradient(objective, &theta, task, cfg.alpha, cfg.mode, cfg.hvp_eps))
            .collect::<Result<Vec<_>>>()?;

        let mut total = vec![0.0; theta.len()];
        let (mut support_loss, mut query_loss) = (0.0, 0.0);
        for g in &per_task {
            for (t, v) in total.iter_mut().zip(&g.grad) {
                *t += v;
            }
            support_loss += g.support_loss;
            query_loss += g.query_loss;
        }
        if !query_loss.is_finite() || total.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite meta-gradient at iteration {iteration}"
            )));
        }
        match cfg.outer_optimizer {
            OuterOptimizer::Sgd => {
                for (t, g) in theta.iter_mut().zip(&total) {
                    *t -= cfg.beta * g;
                }
            }
            OuterOptimizer::Adam => adam_update(&mut adam, &mut theta, &total, cfg.beta)?,
        }
        let n = per_task.len() as f64;
        sink.record(&MetaProgress {
            iteration,
            support_loss: support_loss / n,
            query_loss: query_loss / n,
            seconds: start.elapsed().as_secs_f64(),
        })?;
    }
    Ok(theta)
}

/// Meta-trains the network.
pub fn meta_train_cnn<S, P>(
    source: &mut S,
    cfg: &MetaConfig,
    theta0: &CnnParams,
    sink: &mut P,
) -> Result<CnnParams>
where
    S: TaskSource<Batch>,
    P: ProgressSink + ?Sized,
{
    let cnn = Cnn::new(*theta0.config())?;
    let theta = meta_train(&cnn, source, cfg, theta0.as_slice(), sink)?;
    CnnParams::unflatten(*theta0.config(), theta)
}

/// `0.5 * (theta - center)^T diag(a) (theta - center)`: an analytic stand-in for the
/// network when checking meta-gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiagonalQuadratic {
    pub dim: usize,
}

/// Curvature and minimizer of one quadratic task half.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticBatch {
    pub diag: Vec<f64>,
    pub center: Vec<f64>,
}

impl QuadraticBatch {
    pub fn centered(diag: Vec<f64>) -> Self {
        let center = vec![0.0; diag.len()];
        QuadraticBatch { diag, center }
    }
}

impl DiagonalQuadratic {
    fn check(&self, theta: &[f64], batch: &QuadraticBatch) -> Result<()> {
        if theta.len() != self.dim || batch.diag.len() != self.dim || batch.center.len() != self.dim {
            return Err(Error::invalid_input("quadratic dimensions disagree"));
        }
        Ok(())
    }
}

impl Objective for DiagonalQuadratic {
    type Batch = QuadraticBatch;

    fn dim(&self) -> usize {
        self.dim
    }

    fn loss(&self, theta: &[f64], batch: &QuadraticBatch) -> Result<f64> {
        self.check(theta, batch)?;
        Ok(theta
            .iter()
            .zip(&batch.diag)
            .zip(&batch.center)
            .map(|((t, a), c)| 0.5 * a * (t - c) * (t - c))
            .sum())
    }

    fn loss_and_grad(&self, theta: &[f64], batch: &QuadraticBatch) -> Result<(f64, Vec<f64>)> {
        let loss = self.loss(theta, batch)?;
        let grad = theta
            .iter()
            .zip(&batch.diag)
            .zip(&batch.center)
            .map(|((t, a), c)| a * (t - c))
            .collect();
        Ok((loss, grad))
    }
}
