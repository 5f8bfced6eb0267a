//! Meta-training, fine-tuning, and the pretraining baselines.
//!
//! The meta-learner follows the two-loop scheme: for each task, the inner
//! loop takes `M` full-batch gradient steps on the support loss starting
//! from the shared initialization; the outer loop then descends the
//! post-adaptation *query* loss with respect to that initialization, which
//! requires differentiating through the unrolled inner steps. The backward
//! sweep uses the recurrence
//!
//! ```text
//! u_M = grad L_q(theta_M)
//! u_m = u_{m+1} - alpha * H_s(theta_m) u_{m+1}
//! ```
//!
//! with the support-loss Hessian-vector products supplied by
//! [`nn::loss_hvp`]; the inner iterates `theta_0..theta_M` are recorded
//! during the forward unroll. A first-order variant (treat the adapted
//! parameters as constant) is available, and is the only mode that permits
//! an Adam inner rule, since differentiating through Adam's moment
//! estimates is out of scope.
//!
//! Per-task meta-gradients within an epoch are independent and run in
//! parallel; accumulation happens afterwards in a canonical task order
//! (sorted by source), so results are bit-identical across thread counts
//! and across permutations of the caller's task list.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    batch_gradient, batch_loss, batch_loss_and_gradient, init_params, loss_hvp, sgd_step, AdamState,
    Batch, GradientVector, ModelParams, NetworkConfig,
};
use crate::seeds;
use crate::tasks::Task;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Inner-loop update rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerRule {
    /// Plain gradient descent, `theta -= alpha * grad`. Cleanly twice
    /// differentiable, required for second-order meta-gradients.
    Sgd,
    /// Adam; only valid with first-order meta-gradients.
    Adam,
}

/// How the outer gradient is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaGradientKind {
    /// Exact gradient of the query loss through the unrolled inner loop.
    SecondOrder,
    /// Query gradient at the adapted parameters, applied to the base
    /// parameters unchanged.
    FirstOrder,
}

/// Optimizer for the outer loop and the supervised baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerRule {
    Adam,
    Sgd,
}

/// Whether per-task meta-gradients are summed or averaged for the outer
/// update. The displayed algorithm sums; mean is exposed as an option.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OuterAggregation {
    Sum,
    Mean,
}

/// Step-decay learning-rate schedule: multiply by `factor` every
/// `every_epochs` epochs (epochs counted from 0).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub factor: f64,
    pub every_epochs: usize,
}

impl LrSchedule {
    /// The production schedule: x0.9 every 10 epochs.
    pub fn standard() -> LrSchedule {
        LrSchedule { factor: 0.9, every_epochs: 10 }
    }

    pub fn lr_at(&self, base: f64, epoch: usize) -> f64 {
        base * self.factor.powi((epoch / self.every_epochs) as i32)
    }
}

/// Everything governing one meta-training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetaConfig {
    /// Inner learning rate.
    pub alpha: f64,
    /// Outer learning rate.
    pub beta: f64,
    /// Inner steps per task per outer epoch.
    pub inner_steps: usize,
    /// Outer epochs.
    pub outer_epochs: usize,
    pub schedule: Option<LrSchedule>,
    pub inner_rule: InnerRule,
    pub meta_gradient: MetaGradientKind,
    pub outer_rule: OptimizerRule,
    pub aggregation: OuterAggregation,
    pub seed: u64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig::new(0)
    }
}

impl MetaConfig {
    pub fn new(seed: u64) -> MetaConfig {
        MetaConfig {
            alpha: 1e-4,
            beta: 5e-4,
            inner_steps: 5,
            outer_epochs: 50,
            schedule: Some(LrSchedule::standard()),
            inner_rule: InnerRule::Sgd,
            meta_gradient: MetaGradientKind::SecondOrder,
            outer_rule: OptimizerRule::Adam,
            aggregation: OuterAggregation::Sum,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(Error::Config("learning rates must be nonnegative".into()));
        }
        if self.outer_epochs == 0 {
            return Err(Error::Config("meta-training needs at least one outer epoch".into()));
        }
        if self.meta_gradient == MetaGradientKind::SecondOrder && self.inner_rule != InnerRule::Sgd {
            return Err(Error::Config(
                "second-order meta-gradients require the SGD inner rule; \
                 differentiating through Adam's moment estimates is unsupported"
                    .into(),
            ));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Training log
// ---------------------------------------------------------------------------

/// One outer epoch's summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean over tasks of the post-adaptation query loss.
    pub mean_query_loss: f64,
    /// Mean over tasks of the post-adaptation support loss.
    pub mean_support_loss: f64,
    /// Outer learning rate used this epoch (after scheduling).
    pub beta: f64,
}

/// Full training log: one record per completed outer epoch.
///
/// Wall-clock time is kept out of the per-epoch records so serialized logs
/// are bit-identical across reruns with the same seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLog {
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    #[serde(skip)]
    pub wall_clock_s: f64,
}

impl TrainLog {
    /// One JSON object per epoch, newline separated.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for rec in &self.epochs {
            out.push_str(&serde_json::to_string(rec)?);
            out.push('\n');
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Inner loop
// ---------------------------------------------------------------------------

/// `M` full-batch updates on the support loss, starting from (and never
/// mutating) `theta`.
pub fn inner_adapt(
    theta: &ModelParams,
    support: &Batch,
    alpha: f64,
    m_steps: usize,
    rule: InnerRule,
) -> Result<ModelParams> {
    if support.is_empty() {
        return Err(Error::Empty("inner adaptation requires a nonempty support set".into()));
    }
    let mut adapted = theta.clone();
    match rule {
        InnerRule::Sgd => {
            for _ in 0..m_steps {
                let g = batch_gradient(&adapted, support)?;
                sgd_step(&mut adapted, &g, alpha)?;
            }
        }
        InnerRule::Adam => {
            let mut state = AdamState::new(&adapted);
            for _ in 0..m_steps {
                let g = batch_gradient(&adapted, support)?;
                state.step(&mut adapted, &g, alpha)?;
            }
        }
    }
    Ok(adapted)
}

/// SGD inner unroll that records every iterate: returns
/// `[theta_0, ..., theta_M]`.
fn unroll_inner(theta: &ModelParams, support: &Batch, alpha: f64, m_steps: usize) -> Result<Vec<ModelParams>> {
    let mut trajectory = Vec::with_capacity(m_steps + 1);
    trajectory.push(theta.clone());
    for _ in 0..m_steps {
        let current = trajectory.last().unwrap();
        let g = batch_gradient(current, support)?;
        let mut next = current.clone();
        sgd_step(&mut next, &g, alpha)?;
        trajectory.push(next);
    }
    Ok(trajectory)
}

// ---------------------------------------------------------------------------
// Meta-gradient
// ---------------------------------------------------------------------------

/// Gradient of the post-adaptation query loss with respect to the base
/// parameters, plus the post-adaptation losses for logging.
pub struct TaskGradient {
    pub grad: GradientVector,
    pub query_loss: f64,
    pub support_loss: f64,
}

/// Meta-gradient of one task.
///
/// `SecondOrder` differentiates the query loss through the recorded inner
/// unroll via the Hessian-vector recurrence; `FirstOrder` evaluates the
/// query gradient at the adapted parameters and uses it unchanged. With
/// `M = 0` or `alpha = 0` both reduce exactly to the plain query gradient
/// at `theta`.
pub fn meta_gradient(theta: &ModelParams, support: &Batch, query: &Batch, cfg: &MetaConfig) -> Result<GradientVector> {
    Ok(meta_gradient_full(theta, support, query, cfg)?.grad)
}

/// As [`meta_gradient`], also returning post-adaptation losses.
pub fn meta_gradient_full(
    theta: &ModelParams,
    support: &Batch,
    query: &Batch,
    cfg: &MetaConfig,
) -> Result<TaskGradient> {
    cfg.validate()?;
    if support.is_empty() {
        return Err(Error::Empty("meta-gradient requires a nonempty support set".into()));
    }
    let m = cfg.inner_steps;

    match cfg.meta_gradient {
        MetaGradientKind::SecondOrder => {
            if m == 0 || cfg.alpha == 0.0 {
                // The inner loop is the identity; the meta-gradient is the
                // plain query gradient, exactly.
                let (query_loss, grad) = batch_loss_and_gradient(theta, query)?;
                let support_loss = batch_loss(theta, support)?;
                return Ok(TaskGradient { grad, query_loss, support_loss });
            }
            let trajectory = unroll_inner(theta, support, cfg.alpha, m)?;
            let adapted = trajectory.last().unwrap();
            let (query_loss, mut u) = batch_loss_and_gradient(adapted, query)?;
            let support_loss = batch_loss(adapted, support)?;
            for step_params in trajectory[..m].iter().rev() {
                let hv = loss_hvp(step_params, support, &u)?;
                u.axpy(-cfg.alpha, &hv)?;
            }
            Ok(TaskGradient { grad: u, query_loss, support_loss })
        }
        MetaGradientKind::FirstOrder => {
            let adapted = inner_adapt(theta, support, cfg.alpha, m, cfg.inner_rule)?;
            let (query_loss, grad) = batch_loss_and_gradient(&adapted, query)?;
            let support_loss = batch_loss(&adapted, support)?;
            Ok(TaskGradient { grad, query_loss, support_loss })
        }
    }
}

/// [`meta_gradient`] on a task, materializing its batches.
pub fn meta_gradient_for_task(theta: &ModelParams, task: &Task, cfg: &MetaConfig) -> Result<TaskGradient> {
    let support = task.support_batch();
    let query = task.query_batch();
    meta_gradient_full(theta, &support, &query, cfg)
}

// ---------------------------------------------------------------------------
// Meta-training
// ---------------------------------------------------------------------------

/// Meta-train from a fresh random initialization (seeded from the config).
pub fn meta_train(net: &NetworkConfig, tasks: &[Task], cfg: &MetaConfig) -> Result<(ModelParams, TrainLog)> {
    let theta0 = init_params(net, seeds::derive(cfg.seed, "meta/init", &[]));
    meta_train_from(theta0, tasks, cfg)
}

/// Meta-train starting from the given parameters.
///
/// Each outer epoch computes every task's meta-gradient from the same
/// parameters, aggregates them in canonical task order, and applies one
/// outer update with the scheduled learning rate.
pub fn meta_train_from(theta0: ModelParams, tasks: &[Task], cfg: &MetaConfig) -> Result<(ModelParams, TrainLog)> {
    cfg.validate()?;
    if tasks.is_empty() {
        return Err(Error::Empty("meta-training requires at least one task".into()));
    }
    let started = std::time::Instant::now();

    // Canonical processing order: stable under caller-side permutations.
    let mut order: Vec<usize> = (0..tasks.len()).collect();
    order.sort_by(|&a, &b| tasks[a].source.cmp(&tasks[b].source));

    let mut theta = theta0;
    let mut adam = AdamState::new(&theta);
    let mut log = TrainLog { seed: cfg.seed, epochs: Vec::with_capacity(cfg.outer_epochs), wall_clock_s: 0.0 };

    for epoch in 0..cfg.outer_epochs {
        let beta = match &cfg.schedule {
            Some(s) => s.lr_at(cfg.beta, epoch),
            None => cfg.beta,
        };

        let per_task: Vec<Result<TaskGradient>> = order
            .par_iter()
            .map(|&i| meta_gradient_for_task(&theta, &tasks[i], cfg))
            .collect();

        let mut total: Option<GradientVector> = None;
        let mut query_loss_sum = 0.0;
        let mut support_loss_sum = 0.0;
        for tg in per_task {
            let tg = tg?;
            query_loss_sum += tg.query_loss;
            support_loss_sum += tg.support_loss;
            match &mut total {
                None => total = Some(tg.grad),
                Some(acc) => acc.add_assign(&tg.grad)?,
            }
        }
        let mut total = total.expect("nonempty task list");
        if cfg.aggregation == OuterAggregation::Mean {
            total.scale(1.0 / tasks.len() as f64);
        }

        match cfg.outer_rule {
            OptimizerRule::Adam => adam.step(&mut theta, &total, beta)?,
            OptimizerRule::Sgd => sgd_step(&mut theta, &total, beta)?,
        }

        log.epochs.push(EpochRecord {
            epoch,
            mean_query_loss: query_loss_sum / tasks.len() as f64,
            mean_support_loss: support_loss_sum / tasks.len() as f64,
            beta,
        });
    }

    log.wall_clock_s = started.elapsed().as_secs_f64();
    Ok((theta, log))
}

// ---------------------------------------------------------------------------
// Supervised training (fine-tuning and conventional pretraining)
// ---------------------------------------------------------------------------

/// Anything minibatches can be gathered from.
pub trait BatchSource: Sync {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn gather(&self, ids: &[usize]) -> Batch;
}

impl BatchSource for Batch {
    fn len(&self) -> usize {
        Batch::len(self)
    }

    fn gather(&self, ids: &[usize]) -> Batch {
        Batch::gather(self, ids)
    }
}

/// The union of all support and query windows of a task collection, gathered
/// lazily so the aggregate dataset never has to exist in memory at once.
pub struct TaskUnion<'a> {
    tasks: &'a [Task],
    index: Vec<(u32, u32)>,
}

impl<'a> TaskUnion<'a> {
    /// Union over tasks in canonical source order, window ends ascending
    /// within each task.
    pub fn new(tasks: &'a [Task]) -> TaskUnion<'a> {
        let mut order: Vec<usize> = (0..tasks.len()).collect();
        order.sort_by(|&a, &b| tasks[a].source.cmp(&tasks[b].source));
        let mut index = Vec::new();
        for &i in &order {
            for &t in tasks[i].support_ends() {
                index.push((i as u32, t as u32));
            }
            for &t in tasks[i].query_ends() {
                index.push((i as u32, t as u32));
            }
        }
        TaskUnion { tasks, index }
    }
}

impl BatchSource for TaskUnion<'_> {
    fn len(&self) -> usize {
        self.index.len()
    }

    fn gather(&self, ids: &[usize]) -> Batch {
        let dim = self.tasks[0].input_dim();
        let mut x = ndarray::Array2::zeros((ids.len(), dim));
        let mut labels = Vec::with_capacity(ids.len());
        for (mut row, &id) in x.rows_mut().into_iter().zip(ids) {
            let (task_i, t_end) = self.index[id];
            let task = &self.tasks[task_i as usize];
            task.fill_window_row(t_end as usize, row.as_slice_mut().unwrap());
            labels.push(task.label_index_at(t_end as usize));
        }
        Batch { x, labels }
    }
}

/// Supervised training options shared by fine-tuning and pretraining.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOpts {
    pub epochs: usize,
    pub lr: f64,
    /// `None` trains full-batch.
    pub batch_size: Option<usize>,
    pub rule: OptimizerRule,
    pub schedule: Option<LrSchedule>,
}

impl TrainOpts {
    /// Fine-tuning defaults: Adam at the inner learning rate, minibatches
    /// of 64 with seeded shuffling, no schedule.
    pub fn fine_tune(epochs: usize, lr: f64) -> TrainOpts {
        TrainOpts { epochs, lr, batch_size: Some(64), rule: OptimizerRule::Adam, schedule: None }
    }

    /// Conventional-pretraining defaults: Adam at the outer learning rate,
    /// minibatches of 64, the standard step decay.
    pub fn pretrain(epochs: usize, lr: f64) -> TrainOpts {
        TrainOpts {
            epochs,
            lr,
            batch_size: Some(64),
            rule: OptimizerRule::Adam,
            schedule: Some(LrSchedule::standard()),
        }
    }
}

/// Seeded-shuffle minibatch training over any [`BatchSource`].
pub fn supervised_train<S: BatchSource>(
    mut params: ModelParams,
    data: &S,
    opts: &TrainOpts,
    seed: u64,
) -> Result<ModelParams> {
    if data.is_empty() {
        return Err(Error::Empty("supervised training requires a nonempty dataset".into()));
    }
    if opts.epochs == 0 {
        return Err(Error::Config("supervised training requires at least one epoch".into()));
    }
    let n = data.len();
    let batch_size = opts.batch_size.unwrap_or(n).max(1);
    let mut adam = AdamState::new(&params);
    for epoch in 0..opts.epochs {
        let lr = match &opts.schedule {
            Some(s) => s.lr_at(opts.lr, epoch),
            None => opts.lr,
        };
        let mut ids: Vec<usize> = (0..n).collect();
        {
            use rand::seq::SliceRandom;
            let mut rng = seeds::rng(seed, "train/shuffle", &[epoch as u64]);
            ids.shuffle(&mut rng);
        }
        for chunk in ids.chunks(batch_size) {
            let batch = data.gather(chunk);
            let g = batch_gradient(&params, &batch)?;
            match opts.rule {
                OptimizerRule::Adam => adam.step(&mut params, &g, lr)?,
                OptimizerRule::Sgd => sgd_step(&mut params, &g, lr)?,
            }
        }
    }
    Ok(params)
}

/// Adapt a base model to one support set (the deployment-time procedure).
pub fn fine_tune(theta: &ModelParams, support: &Batch, opts: &TrainOpts, seed: u64) -> Result<ModelParams> {
    supervised_train(theta.clone(), support, opts, seed)
}

/// The conventional-pretraining baseline: aggregate the support and query
/// sets of all meta-training tasks into one dataset and train on it as if
/// it were a single supervised problem.
pub fn conventional_pretrain(
    net: &NetworkConfig,
    tasks: &[Task],
    opts: &TrainOpts,
    seed: u64,
) -> Result<ModelParams> {
    if tasks.is_empty() {
        return Err(Error::Empty("conventional pretraining requires at least one task".into()));
    }
    let theta0 = init_params(net, seeds::derive(seed, "pretrain/init", &[]));
    let union = TaskUnion::new(tasks);
    supervised_train(theta0, &union, opts, seed)
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::test_util::{random_batch, random_params, tiny_config};
    use crate::nn::{central_difference, relative_error, Activation};
    use crate::synth::{self, test_util::flat_profile, SessionShift, SignalConfig};
    use crate::tasks::{split_task, TaskConfig};
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn second_order_cfg(alpha: f64, m: usize) -> MetaConfig {
        MetaConfig {
            alpha,
            inner_steps: m,
            ..MetaConfig::new(7)
        }
    }

    #[test]
    fn inner_adapt_degenerate_cases() {
        let cfg = tiny_config(6, 5, 4, Activation::Tanh);
        let theta = random_params(&cfg, 1, 0.5);
        let support = random_batch(6, 9, 2);

        let m0 = inner_adapt(&theta, &support, 0.1, 0, InnerRule::Sgd).unwrap();
        assert_eq!(m0, theta);

        let zero_alpha = inner_adapt(&theta, &support, 0.0, 4, InnerRule::Sgd).unwrap();
        assert_eq!(zero_alpha, theta);

        let m1 = inner_adapt(&theta, &support, 0.1, 1, InnerRule::Sgd).unwrap();
        let mut expected = theta.clone();
        let g = batch_gradient(&theta, &support).unwrap();
        sgd_step(&mut expected, &g, 0.1).unwrap();
        assert_eq!(m1, expected);

        // The input is never mutated.
        let before = theta.clone();
        let _ = inner_adapt(&theta, &support, 0.3, 3, InnerRule::Sgd).unwrap();
        assert_eq!(theta, before);
    }

    #[test]
    fn inner_adapt_rejects_empty_support() {
        let cfg = tiny_config(4, 3, 2, Activation::Tanh);
        let theta = random_params(&cfg, 1, 0.5);
        let empty = Batch { x: ndarray::Array2::zeros((0, 4)), labels: vec![] };
        assert!(matches!(inner_adapt(&theta, &empty, 0.1, 1, InnerRule::Sgd), Err(Error::Empty(_))));
    }

    #[test]
    fn meta_gradient_collapses_exactly_when_inner_loop_is_identity() {
        let net = tiny_config(6, 5, 4, Activation::Tanh);
        let theta = random_params(&net, 3, 0.5);
        let support = random_batch(6, 8, 4);
        let query = random_batch(6, 11, 5);
        let plain = batch_gradient(&theta, &query).unwrap();

        for (alpha, m) in [(0.25, 0usize), (0.0, 3)] {
            for kind in [MetaGradientKind::SecondOrder, MetaGradientKind::FirstOrder] {
                let cfg = MetaConfig { meta_gradient: kind, ..second_order_cfg(alpha, m) };
                let g = meta_gradient(&theta, &support, &query, &cfg).unwrap();
                assert_eq!(g, plain, "alpha={alpha} m={m} {kind:?}");
            }
        }
    }

    #[test]
    fn second_order_requires_sgd_inner() {
        let net = tiny_config(4, 3, 2, Activation::Tanh);
        let theta = random_params(&net, 3, 0.5);
        let support = random_batch(4, 4, 4);
        let query = random_batch(4, 4, 5);
        let cfg = MetaConfig { inner_rule: InnerRule::Adam, ..second_order_cfg(0.1, 1) };
        assert!(matches!(meta_gradient(&theta, &support, &query, &cfg), Err(Error::Config(_))));
        let ok = MetaConfig {
            inner_rule: InnerRule::Adam,
            meta_gradient: MetaGradientKind::FirstOrder,
            ..second_order_cfg(0.1, 1)
        };
        meta_gradient(&theta, &support, &query, &ok).unwrap();
    }

    /// Finite differences of the scalar map
    /// `theta -> L_q(inner_adapt(theta))` checked against the second-order
    /// meta-gradient. Large alpha makes the curvature term dominate, so a
    /// first-order-only implementation would fail loudly here.
    #[test]
    fn second_order_meta_gradient_matches_finite_differences() {
        for (trial, m) in [(0u64, 1usize), (1, 2), (2, 2)] {
            let net = tiny_config(6, 5, 4, Activation::Tanh);
            let theta = random_params(&net, 600 + trial, 0.6);
            let support = random_batch(6, 7, 700 + trial);
            let query = random_batch(6, 9, 800 + trial);
            let cfg = second_order_cfg(0.3, m);

            let analytic = meta_gradient(&theta, &support, &query, &cfg).unwrap();

            let mut rng = crate::seeds::rng(trial, "test/coords", &[]);
            let coords: Vec<usize> = (0..30).map(|_| rng.gen_range(0..theta.len())).collect();
            let objective = |flat: &[f64]| {
                let p = ModelParams::from_flat(&net, flat.to_vec()).unwrap();
                let adapted = inner_adapt(&p, &support, cfg.alpha, cfg.inner_steps, InnerRule::Sgd).unwrap();
                batch_loss(&adapted, &query).unwrap()
            };
            let fd = central_difference(theta.flatten(), 1e-5, &coords, objective).unwrap();
            let worst = coords
                .iter()
                .zip(&fd)
                .map(|(&j, &f)| relative_error(analytic.flatten()[j], f, 1e-3))
                .fold(0.0f64, f64::max);
            assert!(worst < 1e-5, "trial {trial} M={m}: max relative error {worst}");
        }
    }

    /// For one inner step the meta-gradient has the closed form
    /// `(I - alpha H_s(theta)) grad L_q(theta_hat)`; build the Hessian
    /// explicitly from finite differences of the analytic gradient.
    #[test]
    fn m1_meta_gradient_matches_closed_form() {
        let net = tiny_config(4, 3, 2, Activation::Tanh); // 49 params
        let theta = random_params(&net, 900, 0.6);
        let support = random_batch(4, 6, 901);
        let query = random_batch(4, 8, 902);
        let alpha = 0.2;
        let cfg = second_order_cfg(alpha, 1);
        let n = theta.len();
        assert!(n <= 60);

        let analytic = meta_gradient(&theta, &support, &query, &cfg).unwrap();

        // H columns by central differences of batch_gradient.
        let h = 1e-5;
        let mut hess = vec![vec![0.0; n]; n];
        let mut work = theta.clone();
        for j in 0..n {
            let orig = work.flatten()[j];
            work.flatten_mut()[j] = orig + h;
            let gp = batch_gradient(&work, &support).unwrap();
            work.flatten_mut()[j] = orig - h;
            let gm = batch_gradient(&work, &support).unwrap();
            work.flatten_mut()[j] = orig;
            for i in 0..n {
                hess[i][j] = (gp.flatten()[i] - gm.flatten()[i]) / (2.0 * h);
            }
        }
        let adapted = inner_adapt(&theta, &support, alpha, 1, InnerRule::Sgd).unwrap();
        let gq = batch_gradient(&adapted, &query).unwrap();
        let expected: Vec<f64> = (0..n)
            .map(|i| {
                let hv: f64 = (0..n).map(|j| hess[i][j] * gq.flatten()[j]).sum();
                gq.flatten()[i] - alpha * hv
            })
            .collect();
        let worst = analytic
            .flatten()
            .iter()
            .zip(&expected)
            .map(|(&a, &e)| relative_error(a, e, 1e-3))
            .fold(0.0f64, f64::max);
        assert!(worst < 1e-6, "max relative error {worst}");
    }

    fn tiny_synth_tasks(n: usize) -> Vec<Task> {
        // Short cues keep unit-test batches small.
        let sig = SignalConfig { cue_seconds: 2.5, ..SignalConfig::default() };
        let profile = flat_profile(25.0, 0.1);
        (0..n)
            .map(|i| {
                let rec = synth::generate_recording(
                    &profile,
                    &SessionShift::identity(),
                    crate::dataio::Condition::ALL[i % 4],
                    1,
                    &sig,
                    40 + i as u64,
                )
                .unwrap();
                split_task(rec, i / 4, &TaskConfig::with_stride_ms(500.0)).unwrap()
            })
            .collect()
    }

    fn small_net() -> NetworkConfig {
        NetworkConfig {
            dims: crate::nn::LayerDims { input: 1600, hidden1: 32, hidden2: 16, output: 3 },
            activation: Activation::Relu,
        }
    }

    #[test]
    fn meta_train_single_task_single_epoch_equals_one_supervised_step() {
        let net = small_net();
        let tasks = tiny_synth_tasks(1);
        let cfg = MetaConfig {
            inner_steps: 0,
            outer_epochs: 1,
            outer_rule: OptimizerRule::Sgd,
            schedule: None,
            ..MetaConfig::new(5)
        };
        let theta0 = init_params(&net, 123);
        let (theta, log) = meta_train_from(theta0.clone(), &tasks, &cfg).unwrap();

        let mut expected = theta0;
        let g = batch_gradient(&expected, &tasks[0].query_batch()).unwrap();
        sgd_step(&mut expected, &g, cfg.beta).unwrap();
        assert_eq!(theta, expected);
        assert_eq!(log.epochs.len(), 1);
    }

    #[test]
    fn meta_train_is_deterministic_and_order_independent() {
        let net = small_net();
        let tasks = tiny_synth_tasks(3);
        let cfg = MetaConfig { inner_steps: 1, outer_epochs: 2, ..MetaConfig::new(11) };
        let (a, _) = meta_train(&net, &tasks, &cfg).unwrap();
        let (b, _) = meta_train(&net, &tasks, &cfg).unwrap();
        assert_eq!(a, b);

        let mut permuted = tasks.clone();
        permuted.reverse();
        let (c, _) = meta_train(&net, &permuted, &cfg).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn scheduler_follows_step_decay() {
        let s = LrSchedule::standard();
        assert_abs_diff_eq!(s.lr_at(5e-4, 25), 5e-4 * 0.9 * 0.9, epsilon = 1e-18);
        let net = small_net();
        let tasks = tiny_synth_tasks(1);
        let cfg = MetaConfig { inner_steps: 0, outer_epochs: 21, ..MetaConfig::new(3) };
        let (_, log) = meta_train(&net, &tasks, &cfg).unwrap();
        for rec in &log.epochs {
            let expected = cfg.beta * 0.9f64.powi((rec.epoch / 10) as i32);
            assert_eq!(rec.beta, expected);
        }
        assert_eq!(log.epochs[0].beta, 5e-4);
        assert_eq!(log.epochs[10].beta, 5e-4 * 0.9);
        assert_eq!(log.epochs[20].beta, 5e-4 * 0.9 * 0.9);
    }

    #[test]
    fn fine_tune_lr_zero_is_identity() {
        let net = small_net();
        let tasks = tiny_synth_tasks(1);
        let theta = init_params(&net, 9);
        let opts = TrainOpts::fine_tune(3, 0.0);
        let tuned = fine_tune(&theta, &tasks[0].support_batch(), &opts, 1).unwrap();
        assert_eq!(tuned, theta);
    }

    #[test]
    fn fine_tune_one_full_batch_sgd_epoch_is_one_gradient_step() {
        let net = small_net();
        let tasks = tiny_synth_tasks(1);
        let theta = init_params(&net, 10);
        let support = tasks[0].support_batch();
        let opts = TrainOpts { epochs: 1, lr: 0.05, batch_size: None, rule: OptimizerRule::Sgd, schedule: None };
        let tuned = fine_tune(&theta, &support, &opts, 1).unwrap();

        // Same step computed on the shuffled batch; full-batch means the
        // mean gradient sees the same rows, in shuffle order.
        let mut ids: Vec<usize> = (0..support.len()).collect();
        {
            use rand::seq::SliceRandom;
            let mut rng = seeds::rng(1, "train/shuffle", &[0]);
            ids.shuffle(&mut rng);
        }
        let mut expected = theta.clone();
        let g = batch_gradient(&expected, &support.gather(&ids)).unwrap();
        sgd_step(&mut expected, &g, 0.05).unwrap();
        assert_eq!(tuned, expected);
    }

    #[test]
    fn fine_tune_decreases_support_loss_on_synthetic_tasks() {
        let net = small_net();
        let tasks = tiny_synth_tasks(2);
        let support = tasks[0].support_batch();
        let opts = TrainOpts::fine_tune(3, 1e-3);
        let mut deltas = Vec::new();
        for seed in 0..5u64 {
            let theta = init_params(&net, 50 + seed);
            let before = batch_loss(&theta, &support).unwrap();
            let tuned = fine_tune(&theta, &support, &opts, seed).unwrap();
            let after = batch_loss(&tuned, &support).unwrap();
            deltas.push(before - after);
        }
        let mean: f64 = deltas.iter().sum::<f64>() / deltas.len() as f64;
        assert!(mean > 0.0, "mean loss change over seeds: {mean}");
    }

    #[test]
    fn conventional_pretrain_aggregates_support_and_query() {
        let tasks = tiny_synth_tasks(3);
        let union = TaskUnion::new(&tasks);
        let expected: usize = tasks.iter().map(|t| t.support_len() + t.query_len()).sum();
        assert_eq!(union.len(), expected);
    }

    #[test]
    fn conventional_pretrain_single_task_equals_fine_tune_on_full_windows() {
        let net = small_net();
        let tasks = tiny_synth_tasks(1);
        let opts = TrainOpts { epochs: 1, lr: 0.02, batch_size: None, rule: OptimizerRule::Sgd, schedule: None };
        let seed = 77;
        let pretrained = conventional_pretrain(&net, &tasks, &opts, seed).unwrap();

        let theta0 = init_params(&net, seeds::derive(seed, "pretrain/init", &[]));
        let full = tasks[0].full_batch();
        let tuned = fine_tune(&theta0, &full, &opts, seed).unwrap();
        assert_eq!(pretrained, tuned);
    }

    #[test]
    fn conventional_pretrain_is_deterministic() {
        let net = small_net();
        let tasks = tiny_synth_tasks(2);
        let opts = TrainOpts::pretrain(2, 5e-4);
        let a = conventional_pretrain(&net, &tasks, &opts, 3).unwrap();
        let b = conventional_pretrain(&net, &tasks, &opts, 3).unwrap();
        assert_eq!(a, b);
    }
}
