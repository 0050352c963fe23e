use std::fs;
use std::path::Path;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::data::{self, TaskStream};
use crate::error::{Error, Result};
use crate::metrics::{self, AccuracyMatrix, HeadMode, MetricsRow, ReferenceAccuracies};

use super::config::{DatasetSource, ExperimentConfig};
use super::learner::{evaluate_all, reference_accuracy, train_reference, Learner, TrainStats};
use super::output::{self, RunWriter};

pub const RESULT_SCHEMA_VERSION: u32 = 1;

/// Builds the task stream described by `config.dataset`.
pub fn load_stream(config: &ExperimentConfig) -> Result<TaskStream> {
    match &config.dataset {
        DatasetSource::Mnist { dir } => {
            let (train, test) = data::load_mnist(dir)?;
            let groups = config
                .task_groups
                .clone()
                .unwrap_or_else(data::mnist_label_groups);
            data::split_tasks(&train, &test, &groups)
        }
        DatasetSource::Synthetic(spec) => data::synthetic_tasks(spec),
    }
}

/// What the observer of [`run_incremental`] sees after each task.
#[derive(Debug)]
pub struct TaskReport<'a> {
    pub k: usize,
    pub learner: &'a Learner,
    pub single_row: &'a [f64],
    pub multi_row: &'a [f64],
    pub stats: &'a TrainStats,
    pub seconds: f64,
}

/// Both accuracy matrices from one incremental run, plus the final state.
#[derive(Debug, Clone)]
pub struct IncrementalRun {
    pub single: AccuracyMatrix,
    pub multi: AccuracyMatrix,
    pub stats: Vec<TrainStats>,
    pub task_seconds: Vec<f64>,
    pub learner: Learner,
}

impl IncrementalRun {
    pub fn matrix(&self, head_mode: HeadMode) -> &AccuracyMatrix {
        match head_mode {
            HeadMode::Single => &self.single,
            HeadMode::Multi => &self.multi,
        }
    }
}

/// Trains through every task of `stream` and evaluates the model under both
/// head modes after each one.
pub fn run_incremental<F>(
    config: &ExperimentConfig,
    stream: &TaskStream,
    mut observer: F,
) -> Result<IncrementalRun>
where
    F: FnMut(&TaskReport<'_>) -> Result<()>,
{
    if stream.is_empty() {
        return Err(Error::InvalidArgument("task stream is empty".into()));
    }
    let first_labels = if config.preallocate_outputs {
        stream.seen_labels(stream.len())
    } else {
        stream.task(1).labels.clone()
    };
    let mut learner = Learner::new(config, stream.input_dim(), &first_labels)?;
    let mut single = AccuracyMatrix::new(HeadMode::Single);
    let mut multi = AccuracyMatrix::new(HeadMode::Multi);
    let mut stats = Vec::with_capacity(stream.len());
    let mut task_seconds = Vec::with_capacity(stream.len());
    for task in stream.tasks() {
        let k = task.index;
        let start = Instant::now();
        let s = learner.learn_task(config, task)?;
        let seconds = start.elapsed().as_secs_f64();
        let single_row = evaluate_all(&learner.params, stream, k, HeadMode::Single)?;
        let multi_row = evaluate_all(&learner.params, stream, k, HeadMode::Multi)?;
        observer(&TaskReport {
            k,
            learner: &learner,
            single_row: &single_row,
            multi_row: &multi_row,
            stats: &s,
            seconds,
        })?;
        single.push_row(single_row)?;
        multi.push_row(multi_row)?;
        stats.push(s);
        task_seconds.push(seconds);
    }
    Ok(IncrementalRun {
        single,
        multi,
        stats,
        task_seconds,
        learner,
    })
}

/// Appends `a_k^*` for the next task `k` to `refs`, training the reference
/// under `config.head_mode`.
pub fn extend_references(
    refs: &mut ReferenceAccuracies,
    stream: &TaskStream,
    config: &ExperimentConfig,
) -> Result<()> {
    let k = refs.len() + 1;
    let params = train_reference(stream, k, config)?;
    refs.push(reference_accuracy(&params, stream, k, config.head_mode)?)
}

/// `a_k^*` for every task of `stream`. References depend only on the data,
/// architecture, optimizer, training budget and head mode, never on the method.
pub fn compute_references(
    stream: &TaskStream,
    config: &ExperimentConfig,
) -> Result<ReferenceAccuracies> {
    let mut refs = ReferenceAccuracies::default();
    for _ in 0..stream.len() {
        extend_references(&mut refs, stream, config)?;
    }
    Ok(refs)
}

/// Accuracies and metrics under one head mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadReport {
    pub head_mode: HeadMode,
    pub accuracy: AccuracyMatrix,
    pub reference: Option<ReferenceAccuracies>,
    pub metrics: Vec<MetricsRow>,
}

impl HeadReport {
    pub fn new(accuracy: AccuracyMatrix, reference: Option<ReferenceAccuracies>) -> Result<Self> {
        let metrics = metrics::summarize(&accuracy, reference.as_ref())?;
        Ok(Self {
            head_mode: accuracy.head_mode(),
            accuracy,
            reference,
            metrics,
        })
    }

    pub fn final_metrics(&self) -> &MetricsRow {
        self.metrics.last().expect("at least one task")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VersionStamp {
    pub package: String,
    pub version: String,
}

impl Default for VersionStamp {
    fn default() -> Self {
        Self {
            package: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

/// Wall-clock measurements; the only part of a result that varies between
/// identical runs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub started_unix: u64,
    pub task_seconds: Vec<f64>,
    pub reference_seconds: Vec<f64>,
    pub total_seconds: f64,
}

/// Everything `result.json` holds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub schema_version: u32,
    pub version: VersionStamp,
    pub config: ExperimentConfig,
    /// Results under the configured head mode.
    pub primary: HeadReport,
    /// The same trajectory evaluated under the other head mode (no reference).
    pub companion: HeadReport,
    pub train_stats: Vec<TrainStats>,
    pub timing: Timing,
}

impl RunResult {
    pub fn head(&self, head_mode: HeadMode) -> &HeadReport {
        if self.primary.head_mode == head_mode {
            &self.primary
        } else {
            &self.companion
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let p = path.as_ref();
        let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        let result: Self = serde_json::from_str(&text)?;
        if result.schema_version != RESULT_SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "{}: result schema {} (expected {RESULT_SCHEMA_VERSION})",
                p.display(),
                result.schema_version
            )));
        }
        Ok(result)
    }
}

/// Loads the configured data and runs [`run_on_stream`].
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunResult> {
    config.validate()?;
    let stream = load_stream(config)?;
    run_on_stream(config, &stream)
}

/// Runs the full protocol on `stream` and writes `accuracy_matrix.csv`,
/// `metrics.csv` and `result.json` into `config.out_dir`. CSV rows are
/// flushed after every task.
pub fn run_on_stream(config: &ExperimentConfig, stream: &TaskStream) -> Result<RunResult> {
    config.validate()?;
    let started = Instant::now();
    let started_unix = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let mut writer = RunWriter::create(&config.out_dir, stream.len())?;
    config.save(config.out_dir.join(output::CONFIG_FILE))?;
    let mut refs = ReferenceAccuracies::default();
    let mut reference_seconds = Vec::new();
    let mut primary = AccuracyMatrix::new(config.head_mode);

    let run = run_incremental(config, stream, |report| {
        if config.compute_reference {
            let t = Instant::now();
            extend_references(&mut refs, stream, config)?;
            reference_seconds.push(t.elapsed().as_secs_f64());
        }
        let row = match config.head_mode {
            HeadMode::Single => report.single_row,
            HeadMode::Multi => report.multi_row,
        };
        primary.push_row(row.to_vec())?;
        let reference = config.compute_reference.then_some(&refs);
        let summary = metrics::summarize(&primary, reference)?;
        writer.write_task(row, summary.last().expect("row just pushed"), reference)?;
        if config.write_checkpoint {
            output::write_checkpoint(&config.out_dir, report.k, report.learner)?;
        }
        Ok(())
    })?;

    let other = match config.head_mode {
        HeadMode::Single => HeadMode::Multi,
        HeadMode::Multi => HeadMode::Single,
    };
    let result = RunResult {
        schema_version: RESULT_SCHEMA_VERSION,
        version: VersionStamp::default(),
        config: config.clone(),
        primary: HeadReport::new(
            run.matrix(config.head_mode).clone(),
            config.compute_reference.then_some(refs),
        )?,
        companion: HeadReport::new(run.matrix(other).clone(), None)?,
        train_stats: run.stats,
        timing: Timing {
            started_unix,
            task_seconds: run.task_seconds,
            reference_seconds,
            total_seconds: started.elapsed().as_secs_f64(),
        },
    };
    output::write_result(&config.out_dir, &result)?;
    Ok(result)
}
