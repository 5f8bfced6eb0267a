//! Task construction and scenario splits.
//!
//! One recording is one adaptation task. Its windows are partitioned at the
//! end of the first open-relax-close motion: everything up to and including
//! the relax run that follows the first close run is the support set (the
//! data a deployed system would collect as a quick demonstration), and the
//! rest of the recording is the query set the adapted model is judged on.
//! Windows straddling the boundary are assigned by their final sample,
//! consistent with the window-label rule, so a window that uses some
//! pre-boundary samples can be a query window; that mirrors causal
//! deployment.
//!
//! A task stores the preprocessed signal once and materializes window
//! matrices on demand; at a 10 ms stride the windows overlap by 199/200
//! samples and copying them all out up front would blow up memory for no
//! benefit.

use ndarray::Array2;
use rand::seq::index::sample as sample_indices;
use serde::{Deserialize, Serialize};

use crate::dataio::{
    self, extract_window, Intent, RawRecording, RescaleMode, WindowConfig, WindowedSample, NUM_CHANNELS,
};
use crate::error::{Error, Result};
use crate::nn::Batch;
use crate::seeds;
use crate::synth::Corpus;

/// Windowing and rescale choices used when cutting recordings into tasks.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TaskConfig {
    pub window: WindowConfig,
    pub rescale: RescaleMode,
}

impl TaskConfig {
    pub fn with_stride_ms(stride_ms: f64) -> TaskConfig {
        TaskConfig { window: WindowConfig::with_stride_ms(stride_ms), rescale: RescaleMode::FixedAffine }
    }
}

/// Which recording a task came from.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TaskSource {
    pub subject_id: String,
    pub day: u8,
    pub condition: dataio::Condition,
    pub repetition: usize,
}

impl TaskSource {
    pub fn id(&self) -> String {
        format!("{}-d{}-{}-r{}", self.subject_id, self.day, self.condition.token(), self.repetition)
    }
}

/// A support/query pair carved from one recording.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub source: TaskSource,
    /// Preprocessed signal, `[n_samples x 8]`, entries in `[-1, 1]`.
    signal: Array2<f64>,
    cues: Vec<Intent>,
    window_len: usize,
    /// End indices of support windows (ascending; all `<= boundary_k`).
    support_ends: Vec<usize>,
    /// End indices of query windows (ascending; all `> boundary_k`).
    query_ends: Vec<usize>,
    /// Last sample index of the first motion (the relax run after the first
    /// close run ends here).
    pub boundary_k: usize,
}

impl Task {
    pub fn support_len(&self) -> usize {
        self.support_ends.len()
    }

    pub fn query_len(&self) -> usize {
        self.query_ends.len()
    }

    /// Last sample index of the recording.
    pub fn final_sample(&self) -> usize {
        self.signal.nrows() - 1
    }

    pub fn window_len(&self) -> usize {
        self.window_len
    }

    pub fn input_dim(&self) -> usize {
        NUM_CHANNELS * self.window_len
    }

    pub fn support_ends(&self) -> &[usize] {
        &self.support_ends
    }

    pub fn query_ends(&self) -> &[usize] {
        &self.query_ends
    }

    fn recording_view(&self) -> RawRecording {
        RawRecording {
            subject_id: self.source.subject_id.clone(),
            day: self.source.day,
            condition: self.source.condition,
            sample_rate_hz: 0, // not used by extract_window
            channels: self.signal.clone(),
            cues: self.cues.clone(),
        }
    }

    /// Materialize the support windows.
    pub fn support_samples(&self) -> Vec<WindowedSample> {
        let rec = self.recording_view();
        self.support_ends.iter().map(|&t| extract_window(&rec, t, self.window_len)).collect()
    }

    /// Materialize the query windows.
    pub fn query_samples(&self) -> Vec<WindowedSample> {
        let rec = self.recording_view();
        self.query_ends.iter().map(|&t| extract_window(&rec, t, self.window_len)).collect()
    }

    /// Copy the channel-major flattened window ending at `t_end` into `row`.
    pub fn fill_window_row(&self, t_end: usize, row: &mut [f64]) {
        let w = self.window_len;
        debug_assert_eq!(row.len(), self.input_dim());
        let start = t_end + 1 - w;
        for c in 0..NUM_CHANNELS {
            for i in 0..w {
                row[c * w + i] = self.signal[[start + i, c]];
            }
        }
    }

    /// Class index of the window ending at `t_end`.
    pub fn label_index_at(&self, t_end: usize) -> usize {
        self.cues[t_end].index()
    }

    /// Windows ending at `ends` as a `[B x input_dim]` batch.
    pub fn batch_for_ends(&self, ends: &[usize]) -> Batch {
        let mut x = Array2::zeros((ends.len(), self.input_dim()));
        let mut labels = Vec::with_capacity(ends.len());
        for (mut row, &t_end) in x.rows_mut().into_iter().zip(ends) {
            self.fill_window_row(t_end, row.as_slice_mut().unwrap());
            labels.push(self.label_index_at(t_end));
        }
        Batch { x, labels }
    }

    /// Support windows as a training batch (channel-major rows).
    pub fn support_batch(&self) -> Batch {
        self.batch_for_ends(&self.support_ends)
    }

    /// Query windows as a batch.
    pub fn query_batch(&self) -> Batch {
        self.batch_for_ends(&self.query_ends)
    }

    /// Every window of the recording (support then query) as one batch.
    pub fn full_batch(&self) -> Batch {
        let mut ends = self.support_ends.clone();
        ends.extend_from_slice(&self.query_ends);
        self.batch_for_ends(&ends)
    }
}

/// Cut a raw recording into a task: preprocess, window, and partition at the
/// first-motion boundary.
///
/// `rec` must carry raw sensor counts; the preprocessing chain (clip,
/// rescale, window) runs internally.
pub fn split_task(rec: RawRecording, repetition: usize, cfg: &TaskConfig) -> Result<Task> {
    rec.validate()?;
    let runs = rec.cue_runs();
    let first_close = runs
        .iter()
        .position(|r| r.0 == Intent::Close)
        .ok_or_else(|| Error::Structure("recording has no close run".into()))?;
    let boundary_run = runs
        .get(first_close + 1)
        .filter(|r| r.0 == Intent::Relax)
        .ok_or_else(|| Error::Structure("no relax run follows the first close run".into()))?;
    let boundary_k = boundary_run.2;

    let source = TaskSource {
        subject_id: rec.subject_id.clone(),
        day: rec.day,
        condition: rec.condition,
        repetition,
    };
    let window_len = cfg.window.window_len(rec.sample_rate_hz)?;
    let stride = cfg.window.stride_samples(rec.sample_rate_hz)?;
    let pre = dataio::preprocess(rec, cfg.rescale)?;
    if pre.n_samples() < window_len {
        return Err(Error::Empty(format!(
            "recording has {} samples, shorter than one {window_len}-sample window",
            pre.n_samples()
        )));
    }
    let ends = dataio::window_ends(pre.n_samples(), window_len, stride);
    let (support_ends, query_ends): (Vec<usize>, Vec<usize>) =
        ends.into_iter().partition(|&t| t <= boundary_k);
    if support_ends.is_empty() || query_ends.is_empty() {
        return Err(Error::Structure(format!(
            "boundary at {boundary_k} leaves {} support and {} query windows",
            support_ends.len(),
            query_ends.len()
        )));
    }
    Ok(Task {
        source,
        signal: pre.channels,
        cues: pre.cues,
        window_len,
        support_ends,
        query_ends,
        boundary_k,
    })
}

/// Tasks for every recording of a generated corpus.
pub fn corpus_tasks(corpus: &Corpus, cfg: &TaskConfig) -> Result<Vec<Task>> {
    corpus
        .entries
        .iter()
        .map(|e| split_task(e.recording.clone(), e.repetition, cfg))
        .collect()
}

// ---------------------------------------------------------------------------
// Scenario splits
// ---------------------------------------------------------------------------

/// The two assessment scenarios.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Meta-train on day 1 of every subject, meta-test on day 2.
    SessionAdaptation,
    /// Meta-train on four subjects, meta-test on the held-out fifth.
    SubjectAdaptation,
}

/// Meta-training and meta-testing task collections.
#[derive(Debug, Clone)]
pub struct ScenarioSplit {
    pub scenario: Scenario,
    pub held_out: Option<String>,
    pub meta_train: Vec<Task>,
    pub meta_test: Vec<Task>,
}

fn sort_tasks(tasks: &mut [Task]) {
    tasks.sort_by(|a, b| a.source.cmp(&b.source));
}

/// Partition tasks into a scenario split. Ordering within each collection is
/// deterministic (sorted by subject, day, condition, repetition), so the
/// split is a pure function of its inputs.
pub fn build_scenario(tasks: Vec<Task>, scenario: Scenario, held_out: Option<&str>) -> Result<ScenarioSplit> {
    if tasks.is_empty() {
        return Err(Error::Empty("scenario split needs a nonempty task corpus".into()));
    }
    let (mut meta_train, mut meta_test, held_out) = match scenario {
        Scenario::SessionAdaptation => {
            if held_out.is_some() {
                return Err(Error::Config("session adaptation does not take a held-out subject".into()));
            }
            let (test, train): (Vec<Task>, Vec<Task>) = tasks.into_iter().partition(|t| t.source.day == 2);
            (train, test, None)
        }
        Scenario::SubjectAdaptation => {
            let subject = held_out
                .ok_or_else(|| Error::Config("subject adaptation requires a held-out subject".into()))?;
            if !tasks.iter().any(|t| t.source.subject_id == subject) {
                return Err(Error::MissingSubject(subject.to_string()));
            }
            let (test, train): (Vec<Task>, Vec<Task>) =
                tasks.into_iter().partition(|t| t.source.subject_id == subject);
            (train, test, Some(subject.to_string()))
        }
    };
    sort_tasks(&mut meta_train);
    sort_tasks(&mut meta_test);
    Ok(ScenarioSplit { scenario, held_out, meta_train, meta_test })
}

/// How a reduced support set is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DownsampleStrategy {
    /// Temporally contiguous prefix (real sessions shorten demonstrations
    /// from the end). Ignores the seed; applying it twice is a no-op.
    #[default]
    Prefix,
    /// Uniform subsample without replacement, kept in temporal order.
    UniformRandom,
}

/// Shrink a task's support set to `ceil(fraction * |support|)` windows.
/// The query set is untouched.
pub fn downsample_support(
    task: &Task,
    fraction: f64,
    seed: u64,
    strategy: DownsampleStrategy,
) -> Result<Task> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("support fraction must lie in (0, 1], got {fraction}")));
    }
    let keep = (fraction * task.support_ends.len() as f64).ceil() as usize;
    let mut out = task.clone();
    out.support_ends = match strategy {
        DownsampleStrategy::Prefix => task.support_ends[..keep].to_vec(),
        DownsampleStrategy::UniformRandom => {
            let mut rng = seeds::rng(seed, "tasks/downsample", &[]);
            let mut picked: Vec<usize> =
                sample_indices(&mut rng, task.support_ends.len(), keep).into_iter().collect();
            picked.sort_unstable();
            picked.into_iter().map(|i| task.support_ends[i]).collect()
        }
    };
    Ok(out)
}

// ---------------------------------------------------------------------------
// Split manifest
// ---------------------------------------------------------------------------

/// Per-task reproducibility record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskSummary {
    pub id: String,
    pub subject_id: String,
    pub day: u8,
    pub condition: dataio::Condition,
    pub repetition: usize,
    pub boundary_k: usize,
    pub final_sample: usize,
    pub support_windows: usize,
    pub query_windows: usize,
}

impl TaskSummary {
    pub fn of(task: &Task) -> TaskSummary {
        TaskSummary {
            id: task.source.id(),
            subject_id: task.source.subject_id.clone(),
            day: task.source.day,
            condition: task.source.condition,
            repetition: task.source.repetition,
            boundary_k: task.boundary_k,
            final_sample: task.final_sample(),
            support_windows: task.support_len(),
            query_windows: task.query_len(),
        }
    }
}

/// JSON-serializable description of a scenario split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitManifest {
    pub scenario: Scenario,
    pub held_out: Option<String>,
    pub meta_train: Vec<TaskSummary>,
    pub meta_test: Vec<TaskSummary>,
}

impl SplitManifest {
    pub fn of(split: &ScenarioSplit) -> SplitManifest {
        SplitManifest {
            scenario: split.scenario,
            held_out: split.held_out.clone(),
            meta_train: split.meta_train.iter().map(TaskSummary::of).collect(),
            meta_test: split.meta_test.iter().map(TaskSummary::of).collect(),
        }
    }
}

// ---------------------------------------------------------------------------
