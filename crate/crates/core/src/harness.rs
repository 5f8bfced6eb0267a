//! Experiment driver: method evaluation over scenario splits, the two
//! ablations, and the gradient-oracle report.
//!
//! Accuracy is per-window argmax accuracy on a task's query set, averaged
//! per task, then per subject, then across subjects, so long recordings do
//! not dominate. Reported spread is the standard deviation over training
//! seeds of the per-subject (or per-setting) mean; every table records the
//! seeds it used. All per-task records are emitted alongside the tables so
//! each aggregate is recomputable.
//!
//! Independent (method, seed, held-out) runs are internally deterministic,
//! and aggregation walks results in a fixed order, so tables are
//! bit-reproducible given the corpus seed and training seeds.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt;

use crate::dataio::Condition;
use crate::error::{Error, Result};
use crate::meta::{
    conventional_pretrain, fine_tune, meta_train, MetaConfig, TrainOpts,
};
use crate::nn::{self, init_params, Batch, ModelParams, NetworkConfig};
use crate::seeds;
use crate::tasks::{downsample_support, DownsampleStrategy, ScenarioSplit, Task};

// ---------------------------------------------------------------------------
// Methods
// ---------------------------------------------------------------------------

/// Fine-tuning epoch count that operationalizes "trained to convergence".
pub const CONVERGED_EPOCHS: usize = 50;

/// The five evaluated methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodSpec {
    /// Random init, fine-tuned 3 epochs on each test task's support set.
    NoPretrain3,
    /// Random init, fine-tuned 50 epochs.
    NoPretrainConverged,
    /// Supervised pretraining on the pooled meta-training windows, then 3
    /// fine-tuning epochs.
    ConvPretrain3,
    /// Pooled pretraining, 50 fine-tuning epochs.
    ConvPretrainConverged,
    /// Meta-learned initialization, 3 fine-tuning epochs (already
    /// convergence for this method).
    MetaEmg,
}

/// What the base model is trained on before per-task fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PretrainKind {
    None,
    Conventional,
    Meta,
}

impl MethodSpec {
    pub const ALL: [MethodSpec; 5] = [
        MethodSpec::NoPretrain3,
        MethodSpec::NoPretrainConverged,
        MethodSpec::ConvPretrain3,
        MethodSpec::ConvPretrainConverged,
        MethodSpec::MetaEmg,
    ];

    pub fn fine_tune_epochs(self) -> usize {
        match self {
            MethodSpec::NoPretrain3 | MethodSpec::ConvPretrain3 | MethodSpec::MetaEmg => 3,
            MethodSpec::NoPretrainConverged | MethodSpec::ConvPretrainConverged => CONVERGED_EPOCHS,
        }
    }

    pub fn pretrain_kind(self) -> PretrainKind {
        match self {
            MethodSpec::NoPretrain3 | MethodSpec::NoPretrainConverged => PretrainKind::None,
            MethodSpec::ConvPretrain3 | MethodSpec::ConvPretrainConverged => PretrainKind::Conventional,
            MethodSpec::MetaEmg => PretrainKind::Meta,
        }
    }

    pub fn token(self) -> &'static str {
        match self {
            MethodSpec::NoPretrain3 => "no-pretrain-3",
            MethodSpec::NoPretrainConverged => "no-pretrain-converged",
            MethodSpec::ConvPretrain3 => "conv-pretrain-3",
            MethodSpec::ConvPretrainConverged => "conv-pretrain-converged",
            MethodSpec::MetaEmg => "metaemg",
        }
    }

    pub fn from_token(tok: &str) -> Option<MethodSpec> {
        MethodSpec::ALL.iter().copied().find(|m| m.token() == tok)
    }
}

impl fmt::Display for MethodSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

// ---------------------------------------------------------------------------
// Harness configuration
// ---------------------------------------------------------------------------

/// Everything a full evaluation needs beyond the split itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HarnessConfig {
    pub net: NetworkConfig,
    /// Meta-training template; the per-run seed is derived and overrides
    /// the `seed` field here.
    pub meta: MetaConfig,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub pretrain_batch: Option<usize>,
    pub finetune_lr: f64,
    pub finetune_batch: Option<usize>,
    pub finetune_rule: crate::meta::OptimizerRule,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        HarnessConfig::standard()
    }
}

impl HarnessConfig {
    pub fn standard() -> HarnessConfig {
        let meta = MetaConfig::new(0);
        HarnessConfig {
            net: NetworkConfig::standard(),
            pretrain_epochs: 50,
            pretrain_lr: meta.beta,
            pretrain_batch: Some(64),
            finetune_lr: meta.alpha,
            finetune_batch: Some(64),
            finetune_rule: crate::meta::OptimizerRule::Adam,
            meta,
        }
    }

    pub fn finetune_opts(&self, method: MethodSpec) -> TrainOpts {
        TrainOpts {
            epochs: method.fine_tune_epochs(),
            lr: self.finetune_lr,
            batch_size: self.finetune_batch,
            rule: self.finetune_rule,
            schedule: None,
        }
    }

    pub fn pretrain_opts(&self) -> TrainOpts {
        TrainOpts { batch_size: self.pretrain_batch, ..TrainOpts::pretrain(self.pretrain_epochs, self.pretrain_lr) }
    }
}

// ---------------------------------------------------------------------------
// Predictors and scoring
// ---------------------------------------------------------------------------

/// Anything that maps query windows to class indices. Real evaluation uses
/// [`ModelPredictor`]; the stubs pin down the scoring pipeline in tests.
pub trait Predictor {
    fn predict_indices(&mut self, batch: &Batch) -> Result<Vec<usize>>;
}

pub struct ModelPredictor<'a>(pub &'a ModelParams);

impl Predictor for ModelPredictor<'_> {
    fn predict_indices(&mut self, batch: &Batch) -> Result<Vec<usize>> {
        nn::predict_batch(self.0, batch)
    }
}

/// Always predicts the true label; scores 100% by construction.
pub struct OracleStub;

impl Predictor for OracleStub {
    fn predict_indices(&mut self, batch: &Batch) -> Result<Vec<usize>> {
        Ok(batch.labels.clone())
    }
}

/// Uniform random class choice; scores chance level in expectation.
pub struct UniformRandomStub(pub rand_chacha::ChaCha8Rng);

impl UniformRandomStub {
    pub fn new(seed: u64) -> UniformRandomStub {
        UniformRandomStub(seeds::rng(seed, "harness/uniform-stub", &[]))
    }
}

impl Predictor for UniformRandomStub {
    fn predict_indices(&mut self, batch: &Batch) -> Result<Vec<usize>> {
        use rand::Rng;
        Ok((0..batch.len()).map(|_| self.0.gen_range(0..3)).collect())
    }
}

/// Fraction of query windows a predictor gets right on one task.
pub fn score_query(predictor: &mut dyn Predictor, task: &Task) -> Result<(usize, usize)> {
    let query = task.query_batch();
    let pred = predictor.predict_indices(&query)?;
    let correct = pred.iter().zip(&query.labels).filter(|(p, y)| p == y).count();
    Ok((correct, query.labels.len()))
}

/// One scored (task, seed) pair; aggregates are recomputable from these.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task_id: String,
    pub subject_id: String,
    pub day: u8,
    pub condition: Condition,
    pub repetition: usize,
    pub method: MethodSpec,
    pub seed: u64,
    /// Support fraction if the task was downsampled, else 1.
    pub support_fraction: f64,
    pub correct: usize,
    pub total: usize,
    pub accuracy_pct: f64,
}

// ---------------------------------------------------------------------------
// Result tables
// ---------------------------------------------------------------------------

/// Label used for the cross-subject average row.
pub const AVERAGE_ROW: &str = "average";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: MethodSpec,
    /// Subject id, or [`AVERAGE_ROW`] for the cross-subject mean.
    pub subject_id: String,
    /// Mean over seeds of the per-subject mean task accuracy, in percent.
    pub mean_accuracy_pct: f64,
    /// Standard deviation over seeds (sample std; 0 for a single seed).
    pub std_accuracy_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub scenario: crate::tasks::Scenario,
    pub held_out: Option<String>,
    pub seeds: Vec<u64>,
    pub rows: Vec<ResultRow>,
}

impl ResultTable {
    pub fn csv(&self) -> String {
        let mut out = String::from("scenario,held_out,method,subject,mean_accuracy_pct,std_accuracy_pct,n_seeds\n");
        let scenario = format!("{:?}", self.scenario);
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                scenario,
                self.held_out.as_deref().unwrap_or(""),
                r.method,
                r.subject_id,
                r.mean_accuracy_pct,
                r.std_accuracy_pct,
                self.seeds.len()
            ));
        }
        out
    }

    /// Mean-accuracy cell for (method, subject).
    pub fn cell(&self, method: MethodSpec, subject: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.subject_id == subject)
            .map(|r| r.mean_accuracy_pct)
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

// ---------------------------------------------------------------------------
// Base-model pretraining
// ---------------------------------------------------------------------------

/// Train (or initialize) the base model a method starts fine-tuning from.
pub fn pretrain_base(
    kind: PretrainKind,
    meta_train_tasks: &[Task],
    cfg: &HarnessConfig,
    seed: u64,
) -> Result<ModelParams> {
    match kind {
        PretrainKind::None => Ok(init_params(&cfg.net, seeds::derive(seed, "harness/init", &[]))),
        PretrainKind::Conventional => conventional_pretrain(
            &cfg.net,
            meta_train_tasks,
            &cfg.pretrain_opts(),
            seeds::derive(seed, "harness/pretrain", &[]),
        ),
        PretrainKind::Meta => {
            let meta_cfg = MetaConfig { seed: seeds::derive(seed, "harness/meta", &[]), ..cfg.meta.clone() };
            Ok(meta_train(&cfg.net, meta_train_tasks, &meta_cfg)?.0)
        }
    }
}

/// Fine-tune `base` on each test task's support set and score its query
/// set. Tasks run in parallel; records come back in task order.
fn finetune_and_score(
    base: &ModelParams,
    test_tasks: &[Task],
    method: MethodSpec,
    cfg: &HarnessConfig,
    seed: u64,
    support_fraction: f64,
) -> Result<Vec<TaskRecord>> {
    let opts = cfg.finetune_opts(method);
    test_tasks
        .par_iter()
        .enumerate()
        .map(|(i, task)| {
            let ft_seed = seeds::derive(seed, "harness/finetune", &[i as u64]);
            let adapted = fine_tune(base, &task.support_batch(), &opts, ft_seed)?;
            let (correct, total) = score_query(&mut ModelPredictor(&adapted), task)?;
            Ok(TaskRecord {
                task_id: task.source.id(),
                subject_id: task.source.subject_id.clone(),
                day: task.source.day,
                condition: task.source.condition,
                repetition: task.source.repetition,
                method,
                seed,
                support_fraction,
                correct,
                total,
                accuracy_pct: 100.0 * correct as f64 / total as f64,
            })
        })
        .collect()
}

/// Per-subject means for one seed's records, in subject order, plus the
/// cross-subject mean.
fn subject_means(records: &[TaskRecord]) -> (BTreeMap<String, f64>, f64) {
    let mut by_subject: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in records {
        by_subject.entry(r.subject_id.clone()).or_default().push(r.accuracy_pct);
    }
    let means: BTreeMap<String, f64> = by_subject.into_iter().map(|(s, accs)| (s, mean(&accs))).collect();
    let overall = mean(&means.values().copied().collect::<Vec<f64>>());
    (means, overall)
}

// ---------------------------------------------------------------------------
// Method evaluation
// ---------------------------------------------------------------------------

/// Everything one method evaluation produces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodEvaluation {
    pub table: ResultTable,
    pub records: Vec<TaskRecord>,
}

/// Evaluate one method over a scenario split: per seed, pretrain per the
/// method, fine-tune on each meta-test support set, and score each query
/// set; aggregate per subject and across subjects.
pub fn evaluate_method(
    method: MethodSpec,
    split: &ScenarioSplit,
    seeds_list: &[u64],
    cfg: &HarnessConfig,
) -> Result<MethodEvaluation> {
    if seeds_list.is_empty() {
        return Err(Error::Empty("evaluation requires at least one seed".into()));
    }
    if split.meta_test.is_empty() {
        return Err(Error::Empty("scenario split has no meta-test tasks".into()));
    }
    let mut records = Vec::new();
    for &seed in seeds_list {
        let base = pretrain_base(method.pretrain_kind(), &split.meta_train, cfg, seed)?;
        records.extend(finetune_and_score(&base, &split.meta_test, method, cfg, seed, 1.0)?);
    }
    let table = tabulate(method, split, seeds_list, &records);
    Ok(MethodEvaluation { table, records })
}

fn tabulate(method: MethodSpec, split: &ScenarioSplit, seeds_list: &[u64], records: &[TaskRecord]) -> ResultTable {
    let mut per_seed: Vec<(BTreeMap<String, f64>, f64)> = Vec::new();
    for &seed in seeds_list {
        let seed_records: Vec<TaskRecord> =
            records.iter().filter(|r| r.seed == seed && r.method == method).cloned().collect();
        per_seed.push(subject_means(&seed_records));
    }
    let subjects: Vec<String> = per_seed[0].0.keys().cloned().collect();
    let mut rows = Vec::new();
    for s in &subjects {
        let accs: Vec<f64> = per_seed.iter().map(|(m, _)| m[s]).collect();
        rows.push(ResultRow {
            method,
            subject_id: s.clone(),
            mean_accuracy_pct: mean(&accs),
            std_accuracy_pct: sample_std(&accs),
        });
    }
    let overall: Vec<f64> = per_seed.iter().map(|(_, o)| *o).collect();
    rows.push(ResultRow {
        method,
        subject_id: AVERAGE_ROW.to_string(),
        mean_accuracy_pct: mean(&overall),
        std_accuracy_pct: sample_std(&overall),
    });
    ResultTable {
        scenario: split.scenario,
        held_out: split.held_out.clone(),
        seeds: seeds_list.to_vec(),
        rows,
    }
}

/// Evaluate a fixed base model (e.g. a loaded checkpoint): fine-tune it on
/// each meta-test support set per the method's epoch budget and score. The
/// seeds only drive fine-tuning shuffles here, since the base is given.
pub fn evaluate_checkpoint(
    base: &ModelParams,
    method: MethodSpec,
    split: &ScenarioSplit,
    seeds_list: &[u64],
    cfg: &HarnessConfig,
) -> Result<MethodEvaluation> {
    if seeds_list.is_empty() {
        return Err(Error::Empty("evaluation requires at least one seed".into()));
    }
    let mut records = Vec::new();
    for &seed in seeds_list {
        records.extend(finetune_and_score(base, &split.meta_test, method, cfg, seed, 1.0)?);
    }
    let table = tabulate(method, split, seeds_list, &records);
    Ok(MethodEvaluation { table, records })
}

/// Evaluate several methods and merge the tables (rows grouped by method).
pub fn evaluate_methods(
    methods: &[MethodSpec],
    split: &ScenarioSplit,
    seeds_list: &[u64],
    cfg: &HarnessConfig,
) -> Result<MethodEvaluation> {
    let mut rows = Vec::new();
    let mut records = Vec::new();
    for &m in methods {
        let eval = evaluate_method(m, split, seeds_list, cfg)?;
        rows.extend(eval.table.rows);
        records.extend(eval.records);
    }
    Ok(MethodEvaluation {
        table: ResultTable {
            scenario: split.scenario,
            held_out: split.held_out.clone(),
            seeds: seeds_list.to_vec(),
            rows,
        },
        records,
    })
}

// ---------------------------------------------------------------------------
// Ablations
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationKind {
    SupportFraction,
    PretrainSubjects,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub method: MethodSpec,
    /// Support fraction or pretraining subject count, depending on the kind.
    pub param: f64,
    pub mean_accuracy_pct: f64,
    pub std_accuracy_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub kind: AblationKind,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn csv(&self) -> String {
        let mut out = String::from("ablation,method,param,mean_accuracy_pct,std_accuracy_pct,n_seeds\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{:?},{},{},{},{},{}\n",
                self.kind,
                r.method,
                r.param,
                r.mean_accuracy_pct,
                r.std_accuracy_pct,
                self.seeds.len()
            ));
        }
        out
    }

    pub fn cell(&self, method: MethodSpec, param: f64) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.method == method && (r.param - param).abs() < 1e-12)
            .map(|r| r.mean_accuracy_pct)
    }
}

/// Downsample every meta-test support set to each fraction and re-evaluate.
/// Pretraining does not depend on the fraction, so each (method, seed) base
/// model is trained once and reused across fractions.
pub fn ablate_support_fraction(
    split: &ScenarioSplit,
    fractions: &[f64],
    methods: &[MethodSpec],
    seeds_list: &[u64],
    cfg: &HarnessConfig,
    strategy: DownsampleStrategy,
) -> Result<(AblationTable, Vec<TaskRecord>)> {
    if fractions.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
        return Err(Error::Config("support fractions must lie in (0, 1]".into()));
    }
    let mut bases: BTreeMap<(PretrainKind, u64), ModelParams> = BTreeMap::new();
    for &m in methods {
        for &seed in seeds_list {
            let key = (m.pretrain_kind(), seed);
            if !bases.contains_key(&key) {
                bases.insert(key, pretrain_base(m.pretrain_kind(), &split.meta_train, cfg, seed)?);
            }
        }
    }

    let mut rows = Vec::new();
    let mut all_records = Vec::new();
    for &fraction in fractions {
        let test_tasks: Vec<Task> = split
            .meta_test
            .iter()
            .map(|t| downsample_support(t, fraction, seeds::derive(cfg.meta.seed, "harness/downsample", &[]), strategy))
            .collect::<Result<_>>()?;
        for &m in methods {
            let mut per_seed_overall = Vec::new();
            for &seed in seeds_list {
                let base = &bases[&(m.pretrain_kind(), seed)];
                let records = finetune_and_score(base, &test_tasks, m, cfg, seed, fraction)?;
                let (_, overall) = subject_means(&records);
                per_seed_overall.push(overall);
                all_records.extend(records);
            }
            rows.push(AblationRow {
                method: m,
                param: fraction,
                mean_accuracy_pct: mean(&per_seed_overall),
                std_accuracy_pct: sample_std(&per_seed_overall),
            });
        }
    }
    Ok((AblationTable { kind: AblationKind::SupportFraction, seeds: seeds_list.to_vec(), rows }, all_records))
}

/// All `choose(n)` subsets of `items`, in lexicographic index order.
fn combinations<T: Clone>(items: &[T], n: usize) -> Vec<Vec<T>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    if n > items.len() {
        return Vec::new();
    }
    let mut out = Vec::new();
    for (i, head) in items.iter().enumerate() {
        for mut tail in combinations(&items[i + 1..], n - 1) {
            let mut combo = vec![head.clone()];
            combo.append(&mut tail);
            out.push(combo);
        }
    }
    out
}

/// Vary the number of pretraining subjects: for each `n`, iterate over every
/// (pretraining subset, held-out subject) partition, pretrain on all
/// recordings of the subset, fine-tune and score on all recordings of the
/// held-out subject, and average.
pub fn ablate_pretrain_subjects(
    all_tasks: &[Task],
    subject_counts: &[usize],
    methods: &[MethodSpec],
    seeds_list: &[u64],
    cfg: &HarnessConfig,
) -> Result<(AblationTable, Vec<TaskRecord>)> {
    let mut subjects: Vec<String> = all_tasks.iter().map(|t| t.source.subject_id.clone()).collect();
    subjects.sort();
    subjects.dedup();
    let max_n = subject_counts.iter().copied().max().unwrap_or(0);
    if subjects.len() < max_n + 1 {
        return Err(Error::Config(format!(
            "need at least {} subjects for {} pretraining subjects, corpus has {}",
            max_n + 1,
            max_n,
            subjects.len()
        )));
    }

    let tasks_of = |ids: &[String]| -> Vec<Task> {
        all_tasks.iter().filter(|t| ids.contains(&t.source.subject_id)).cloned().collect()
    };

    let mut rows = Vec::new();
    let mut all_records = Vec::new();
    for &n in subject_counts {
        for &m in methods {
            // per seed: mean over all partitions of the held-out accuracy;
            // one pretraining subset serves every held-out subject, so the
            // base model is trained once per (subset, seed).
            let mut per_seed: Vec<f64> = vec![0.0; seeds_list.len()];
            let mut partitions = 0usize;
            for combo in combinations(&subjects, n) {
                let train_tasks = tasks_of(&combo);
                let held_out: Vec<&String> = subjects.iter().filter(|s| !combo.contains(s)).collect();
                partitions += held_out.len();
                for (si, &seed) in seeds_list.iter().enumerate() {
                    let base = pretrain_base(m.pretrain_kind(), &train_tasks, cfg, seed)?;
                    for held in &held_out {
                        let test_tasks = tasks_of(std::slice::from_ref(*held));
                        let records = finetune_and_score(&base, &test_tasks, m, cfg, seed, 1.0)?;
                        let (_, overall) = subject_means(&records);
                        per_seed[si] += overall;
                        all_records.extend(records);
                    }
                }
            }
            let partitions_per_seed = partitions;
            let per_seed: Vec<f64> =
                per_seed.into_iter().map(|s| s / partitions_per_seed as f64).collect();
            rows.push(AblationRow {
                method: m,
                param: n as f64,
                mean_accuracy_pct: mean(&per_seed),
                std_accuracy_pct: sample_std(&per_seed),
            });
        }
    }
    Ok((AblationTable { kind: AblationKind::PretrainSubjects, seeds: seeds_list.to_vec(), rows }, all_records))
}

// ---------------------------------------------------------------------------
// Chance-level probe
// ---------------------------------------------------------------------------

/// Mean query accuracy of untrained random initializations, averaged over
/// `init_seeds` and tasks. A fixed random net maps input clusters to
/// arbitrary classes, so single draws swing widely; the mean over seeds
/// concentrates near chance.
pub fn untrained_accuracy(net: &NetworkConfig, tasks: &[Task], init_seeds: &[u64]) -> Result<f64> {
    let mut accs = Vec::new();
    for &s in init_seeds {
        let params = init_params(net, s);
        for task in tasks {
            let (correct, total) = score_query(&mut ModelPredictor(&params), task)?;
            accs.push(100.0 * correct as f64 / total as f64);
        }
    }
    Ok(mean(&accs))
}

// ---------------------------------------------------------------------------
// Gradient-oracle report
// ---------------------------------------------------------------------------

/// One oracle suite line: worst observed error against its threshold.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradcheckLine {
    pub name: String,
    pub max_relative_error: f64,
    pub threshold: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub lines: Vec<GradcheckLine>,
}

impl GradcheckReport {
    pub fn all_pass(&self) -> bool {
        self.lines.iter().all(|l| l.pass)
    }
}

/// Run the analytic-vs-finite-difference oracle suites and report the worst
/// relative error per section. `trials` scales the tiny-net sections.
pub fn gradcheck_report(trials: usize) -> Result<GradcheckReport> {
    use crate::meta::{inner_adapt, meta_gradient, InnerRule};
    use crate::nn::{
        batch_gradient, batch_loss, central_difference, fd_gradient, fd_gradient_coords, loss_hvp,
        relative_error, Activation, LayerDims,
    };
    use rand::Rng;

    let mut lines = Vec::new();
    let floor = 1e-3;

    // Analytic gradient vs central differences, tiny nets.
    let mut worst = 0.0f64;
    for t in 0..trials as u64 {
        let cfg = NetworkConfig {
            dims: LayerDims { input: 6, hidden1: 5, hidden2: 4, output: 3 },
            activation: Activation::Tanh,
        };
        let mut params = init_params(&cfg, 1000 + t);
        let mut rng = seeds::rng(t, "gradcheck/bias", &[]);
        for b in params.flatten_mut().iter_mut().skip(cfg.dims.param_count() - 12) {
            *b = rng.gen_range(-0.5..0.5);
        }
        let batch = crate::nn::Batch {
            x: ndarray::Array2::from_shape_fn((9, 6), |_| rng.gen_range(-1.0..1.0)),
            labels: (0..9).map(|_| rng.gen_range(0..3)).collect(),
        };
        let g = batch_gradient(&params, &batch)?;
        let fd = fd_gradient(&params, &batch, 1e-5)?;
        for (&a, &b) in g.flatten().iter().zip(fd.flatten()) {
            worst = worst.max(relative_error(a, b, floor));
        }
    }
    lines.push(GradcheckLine {
        name: format!("gradient vs finite differences, tiny nets ({trials} trials)"),
        max_relative_error: worst,
        threshold: 1e-6,
        pass: worst < 1e-6,
    });

    // Full production net, sampled coordinates.
    {
        let cfg = NetworkConfig::standard();
        let params = init_params(&cfg, 7);
        let mut rng = seeds::rng(7, "gradcheck/full", &[]);
        let batch = crate::nn::Batch {
            x: ndarray::Array2::from_shape_fn((6, cfg.dims.input), |_| rng.gen_range(-1.0..1.0)),
            labels: (0..6).map(|_| rng.gen_range(0..3)).collect(),
        };
        let g = batch_gradient(&params, &batch)?;
        let coords: Vec<usize> = (0..100).map(|_| rng.gen_range(0..params.len())).collect();
        let fd = fd_gradient_coords(&params, &batch, 1e-5, &coords)?;
        let mut w = 0.0f64;
        for (&j, &f) in coords.iter().zip(&fd) {
            w = w.max(relative_error(g.flatten()[j], f, floor));
        }
        lines.push(GradcheckLine {
            name: "gradient vs finite differences, full 885,763-parameter net (100 coords)".into(),
            max_relative_error: w,
            threshold: 1e-5,
            pass: w < 1e-5,
        });
    }

    // HVP vs directional finite difference of the gradient.
    let mut worst = 0.0f64;
    for t in 0..trials as u64 {
        let cfg = NetworkConfig {
            dims: LayerDims { input: 6, hidden1: 5, hidden2: 4, output: 3 },
            activation: Activation::Tanh,
        };
        let params = init_params(&cfg, 2000 + t);
        let mut rng = seeds::rng(t, "gradcheck/hvp", &[]);
        let mut v = crate::nn::ModelParams::zeros(&cfg);
        for x in v.flatten_mut() {
            *x = rng.gen_range(-1.0..1.0);
        }
        let batch = crate::nn::Batch {
            x: ndarray::Array2::from_shape_fn((8, 6), |_| rng.gen_range(-1.0..1.0)),
            labels: (0..8).map(|_| rng.gen_range(0..3)).collect(),
        };
        let hv = loss_hvp(&params, &batch, &v)?;
        let h = 1e-6;
        let mut plus = params.clone();
        plus.axpy(h, &v)?;
        let mut minus = params.clone();
        minus.axpy(-h, &v)?;
        let gp = batch_gradient(&plus, &batch)?;
        let gm = batch_gradient(&minus, &batch)?;
        for ((&a, &p_), &m_) in hv.flatten().iter().zip(gp.flatten()).zip(gm.flatten()) {
            worst = worst.max(relative_error(a, (p_ - m_) / (2.0 * h), floor));
        }
    }
    lines.push(GradcheckLine {
        name: format!("Hessian-vector product vs gradient differences ({trials} trials)"),
        max_relative_error: worst,
        threshold: 1e-5,
        pass: worst < 1e-5,
    });

    // Second-order meta-gradient vs finite differences of the adapted loss.
    let mut worst = 0.0f64;
    for t in 0..trials as u64 {
        let net = NetworkConfig {
            dims: LayerDims { input: 6, hidden1: 5, hidden2: 4, output: 3 },
            activation: Activation::Tanh,
        };
        let theta = init_params(&net, 3000 + t);
        let mut rng = seeds::rng(t, "gradcheck/meta", &[]);
        let support = crate::nn::Batch {
            x: ndarray::Array2::from_shape_fn((7, 6), |_| rng.gen_range(-1.0..1.0)),
            labels: (0..7).map(|_| rng.gen_range(0..3)).collect(),
        };
        let query = crate::nn::Batch {
            x: ndarray::Array2::from_shape_fn((9, 6), |_| rng.gen_range(-1.0..1.0)),
            labels: (0..9).map(|_| rng.gen_range(0..3)).collect(),
        };
        let m = 1 + (t as usize % 2);
        let alpha = 0.3;
        let meta_cfg = MetaConfig { alpha, inner_steps: m, ..MetaConfig::new(t) };
        let analytic = meta_gradient(&theta, &support, &query, &meta_cfg)?;
        let coords: Vec<usize> = (0..50).map(|_| rng.gen_range(0..theta.len())).collect();
        let objective = |flat: &[f64]| {
            let p = crate::nn::ModelParams::from_flat(&net, flat.to_vec()).unwrap();
            let adapted = inner_adapt(&p, &support, alpha, m, InnerRule::Sgd).unwrap();
            batch_loss(&adapted, &query).unwrap()
        };
        let fd = central_difference(theta.flatten(), 1e-5, &coords, objective)?;
        for (&j, &f) in coords.iter().zip(&fd) {
            worst = worst.max(relative_error(analytic.flatten()[j], f, floor));
        }
    }
    lines.push(GradcheckLine {
        name: format!("second-order meta-gradient vs finite differences, M in {{1,2}} ({trials} trials)"),
        max_relative_error: worst,
        threshold: 1e-5,
        pass: worst < 1e-5,
    });

    Ok(GradcheckReport { lines })
}

// ---------------------------------------------------------------------------
// Run manifests
// ---------------------------------------------------------------------------

/// SHA-256 of raw bytes, hex encoded.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Reproducibility record written next to every run's outputs. Wall-clock
/// time lives here (and only here), keeping the scientific artifacts
/// byte-identical across reruns.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    /// Name -> SHA-256 of each input the run consumed.
    pub input_hashes: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub wall_clock_s: f64,
}

impl RunManifest {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

// ---------------------------------------------------------------------------
