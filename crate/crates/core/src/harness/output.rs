//! Run artifacts: CSV tables, `result.json`, checkpoints and the text summary.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{MetricsRow, ReferenceAccuracies};

use super::learner::Learner;
use super::run::RunResult;

pub const ACCURACY_FILE: &str = "accuracy_matrix.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const RESULT_FILE: &str = "result.json";
pub const CONFIG_FILE: &str = "config.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Appends one row per task to the two CSV files, flushing after each.
pub struct RunWriter {
    accuracy: csv::Writer<File>,
    metrics: csv::Writer<File>,
    accuracy_path: PathBuf,
    metrics_path: PathBuf,
    num_tasks: usize,
}

impl RunWriter {
    pub fn create(dir: &Path, num_tasks: usize) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let open = |name: &str| -> Result<(csv::Writer<File>, PathBuf)> {
            let p = dir.join(name);
            let f = File::create(&p).map_err(|e| Error::io(&p, e))?;
            Ok((csv::Writer::from_writer(f), p))
        };
        let (mut accuracy, accuracy_path) = open(ACCURACY_FILE)?;
        let (mut metrics, metrics_path) = open(METRICS_FILE)?;
        let mut header = vec!["k".to_string()];
        header.extend((1..=num_tasks).map(|j| format!("task_{j}")));
        accuracy.write_record(&header)?;
        metrics.write_record(["k", "A_k", "F_k", "I_k", "a_star", "backward", "forward"])?;
        let mut w = Self {
            accuracy,
            metrics,
            accuracy_path,
            metrics_path,
            num_tasks,
        };
        w.flush()?;
        Ok(w)
    }

    fn flush(&mut self) -> Result<()> {
        self.accuracy
            .flush()
            .map_err(|e| Error::io(&self.accuracy_path, e))?;
        self.metrics
            .flush()
            .map_err(|e| Error::io(&self.metrics_path, e))
    }

    pub fn write_task(
        &mut self,
        row: &[f64],
        m: &MetricsRow,
        reference: Option<&ReferenceAccuracies>,
    ) -> Result<()> {
        let mut rec = vec![m.k.to_string()];
        rec.extend(row.iter().map(|a| a.to_string()));
        rec.resize(self.num_tasks + 1, String::new());
        self.accuracy.write_record(&rec)?;
        let backward: Vec<String> = m.signs.backward.iter().map(|t| t.code('B')).collect();
        self.metrics.write_record([
            m.k.to_string(),
            m.average_accuracy.to_string(),
            opt(m.forgetting),
            opt(m.intransigence),
            opt(reference.and_then(|r| r.get(m.k))),
            backward.join(" "),
            m.signs.forward.map(|t| t.code('F')).unwrap_or_default(),
        ])?;
        self.flush()
    }
}

pub fn write_result(dir: &Path, result: &RunResult) -> Result<()> {
    let p = dir.join(RESULT_FILE);
    let text = serde_json::to_string_pretty(result)?;
    fs::write(&p, text + "\n").map_err(|e| Error::io(&p, e))
}

/// Full learner state after task `task`, stored as versioned JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub task: usize,
    pub learner: Learner,
}

pub fn write_checkpoint(dir: &Path, task: usize, learner: &Learner) -> Result<()> {
    let p = dir.join(CHECKPOINT_FILE);
    let ck = Checkpoint {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        task,
        learner: learner.clone(),
    };
    let tmp = dir.join(format!("{CHECKPOINT_FILE}.tmp"));
    fs::write(&tmp, serde_json::to_vec(&ck)?).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, &p).map_err(|e| Error::io(&p, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let p = path.as_ref();
    let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
    let ck: Checkpoint = serde_json::from_slice(&bytes)?;
    if ck.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(Error::Format(format!(
            "{}: checkpoint schema {} (expected {CHECKPOINT_SCHEMA_VERSION})",
            p.display(),
            ck.schema_version
        )));
    }
    Ok(ck)
}

fn pct(v: Option<f64>) -> String {
    v.map(|x| format!("{:.1}", 100.0 * x))
        .unwrap_or_else(|| "-".into())
}

/// Human-readable table of the accuracy matrix and per-task metrics.
pub fn summary_table(result: &RunResult) -> String {
    let cfg = &result.config;
    let head = &result.primary;
    let n = head.accuracy.num_rows();
    let mut s = String::new();
    let _ = writeln!(
        s,
        "method={} lambda={} heads={} m={} sampler={} seed={}",
        cfg.method,
        cfg.lambda(),
        head.head_mode,
        cfg.samples_per_class,
        cfg.sampler.as_str(),
        cfg.seed
    );
    let _ = write!(s, "{:>3} |", "k");
    for j in 1..=n {
        let _ = write!(s, " {:>6}", format!("T{j}"));
    }
    let _ = writeln!(s, " | {:>6} {:>6} {:>6} {:>6}", "A_k", "F_k", "I_k", "a*");
    for (row, m) in head.accuracy.rows().iter().zip(&head.metrics) {
        let _ = write!(s, "{:>3} |", m.k);
        for j in 0..n {
            let _ = write!(s, " {:>6}", pct(row.get(j).copied()));
        }
        let a_star = head.reference.as_ref().and_then(|r| r.get(m.k));
        let _ = writeln!(
            s,
            " | {:>6} {:>6} {:>6} {:>6}",
            pct(Some(m.average_accuracy)),
            pct(m.forgetting),
            pct(m.intransigence),
            pct(a_star)
        );
    }
    let other = &result.companion;
    let last = other.final_metrics();
    let _ = writeln!(
        s,
        "{}-head: A={} F={} I={}",
        other.head_mode,
        pct(Some(last.average_accuracy)),
        pct(last.forgetting),
        pct(last.intransigence)
    );
    let _ = writeln!(s, "total time {:.1}s", result.timing.total_seconds);
    s
}
