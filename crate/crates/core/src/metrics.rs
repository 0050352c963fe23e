//! Evaluation metrics over the lower-triangular accuracy matrix.
//!
//! Tasks are numbered from 1. Row `k` of the matrix holds `a_{k,j}` for
//! `j = 1..=k`: accuracy on task `j`'s test set after training through task `k`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Evaluation protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    /// Predict over every label seen so far.
    Single,
    /// Predict over the labels of the task being tested.
    Multi,
}

impl HeadMode {
    pub fn as_str(self) -> &'static str {
        match self {
            HeadMode::Single => "single",
            HeadMode::Multi => "multi",
        }
    }
}

impl fmt::Display for HeadMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HeadMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "single" => Ok(HeadMode::Single),
            "multi" => Ok(HeadMode::Multi),
            other => Err(Error::InvalidArgument(format!(
                "unknown head mode {other:?}"
            ))),
        }
    }
}

fn check_unit(what: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::InvalidArgument(format!(
            "{what} = {v} outside [0, 1]"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    head_mode: HeadMode,
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new(head_mode: HeadMode) -> Self {
        Self {
            head_mode,
            rows: Vec::new(),
        }
    }

    pub fn from_rows(head_mode: HeadMode, rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = Self::new(head_mode);
        for row in rows {
            m.push_row(row)?;
        }
        Ok(m)
    }

    pub fn head_mode(&self) -> HeadMode {
        self.head_mode
    }

    /// Appends row `k = num_rows() + 1`, which must hold exactly `k` accuracies.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        let k = self.rows.len() + 1;
        if row.len() != k {
            return Err(Error::Shape(format!(
                "row {k} has {} entries, expected {k}",
                row.len()
            )));
        }
        for (j, &a) in row.iter().enumerate() {
            check_unit(&format!("a[{k},{}]", j + 1), a)?;
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    fn row(&self, k: usize) -> Result<&[f64]> {
        if k == 0 || k > self.rows.len() {
            return Err(Error::IncompleteMatrix(format!(
                "row {k} requested but {} rows are filled",
                self.rows.len()
            )));
        }
        Ok(&self.rows[k - 1])
    }

    /// `a_{k,j}`.
    pub fn get(&self, k: usize, j: usize) -> Result<f64> {
        let row = self.row(k)?;
        if j == 0 || j > k {
            return Err(Error::InvalidArgument(format!(
                "a[{k},{j}] is outside the lower triangle"
            )));
        }
        Ok(row[j - 1])
    }

    /// The first `k` rows.
    pub fn prefix(&self, k: usize) -> Result<AccuracyMatrix> {
        self.row(k)?;
        Ok(Self {
            head_mode: self.head_mode,
            rows: self.rows[..k].to_vec(),
        })
    }

    /// `A_k`, the mean of row `k`.
    pub fn average_accuracy(&self, k: usize) -> Result<f64> {
        let row = self.row(k)?;
        Ok(row.iter().sum::<f64>() / k as f64)
    }

    /// `f_j^k = max_{l < k} a_{l,j} - a_{k,j}` for every `j < k`, and their mean `F_k`.
    pub fn forgetting(&self, k: usize) -> Result<Forgetting> {
        if k < 2 {
            return Err(Error::InvalidArgument(format!(
                "forgetting needs k >= 2, got {k}"
            )));
        }
        let current = self.row(k)?;
        let per_task: Vec<f64> = (1..k)
            .map(|j| {
                let best = (j..k)
                    .map(|l| self.rows[l - 1][j - 1])
                    .fold(f64::NEG_INFINITY, f64::max);
                best - current[j - 1]
            })
            .collect();
        let mean = per_task.iter().sum::<f64>() / per_task.len() as f64;
        Ok(Forgetting { per_task, mean })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forgetting {
    /// `f_j^k` for `j = 1..k-1`.
    pub per_task: Vec<f64>,
    /// `F_k`.
    pub mean: f64,
}

/// `a_k^*`: accuracy of a model trained jointly on tasks `1..=k`, tested on task `k`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ReferenceAccuracies {
    a_star: Vec<f64>,
}

impl ReferenceAccuracies {
    pub fn new(a_star: Vec<f64>) -> Result<Self> {
        for (k, &a) in a_star.iter().enumerate() {
            check_unit(&format!("a*[{}]", k + 1), a)?;
        }
        Ok(Self { a_star })
    }

    pub fn push(&mut self, a: f64) -> Result<()> {
        check_unit(&format!("a*[{}]", self.a_star.len() + 1), a)?;
        self.a_star.push(a);
        Ok(())
    }

    pub fn get(&self, k: usize) -> Option<f64> {
        k.checked_sub(1).and_then(|i| self.a_star.get(i)).copied()
    }

    pub fn values(&self) -> &[f64] {
        &self.a_star
    }

    pub fn len(&self) -> usize {
        self.a_star.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a_star.is_empty()
    }
}

/// `I_k = a_k^* - a_{k,k}`.
pub fn intransigence(
    reference: &ReferenceAccuracies,
    matrix: &AccuracyMatrix,
    k: usize,
) -> Result<f64> {
    let a_star = reference
        .get(k)
        .ok_or_else(|| Error::MissingData(format!("no reference accuracy for task {k}")))?;
    let a_kk = matrix
        .get(k, k)
        .map_err(|_| Error::MissingData(format!("no accuracy a[{k},{k}]")))?;
    Ok(a_star - a_kk)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transfer {
    Positive,
    Negative,
    Neutral,
}

impl Transfer {
    /// Negative forgetting or intransigence means positive transfer.
    fn from_gap(v: f64) -> Self {
        if v < 0.0 {
            Transfer::Positive
        } else if v > 0.0 {
            Transfer::Negative
        } else {
            Transfer::Neutral
        }
    }

    /// Short code, e.g. `PBT` / `NFT` / `0`.
    pub fn code(self, kind: char) -> String {
        match self {
            Transfer::Positive => format!("P{kind}T"),
            Transfer::Negative => format!("N{kind}T"),
            Transfer::Neutral => "0".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferSigns {
    /// One entry per previous task, from `f_j^k`.
    pub backward: Vec<Transfer>,
    /// From `I_k`, when a reference exists.
    pub forward: Option<Transfer>,
}

pub fn transfer_signs(f_values: &[f64], i_k: Option<f64>) -> TransferSigns {
    TransferSigns {
        backward: f_values.iter().map(|&f| Transfer::from_gap(f)).collect(),
        forward: i_k.map(Transfer::from_gap),
    }
}

/// All metrics for one row `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub k: usize,
    pub average_accuracy: f64,
    pub forgetting: Option<f64>,
    pub per_task_forgetting: Vec<f64>,
    pub intransigence: Option<f64>,
    pub signs: TransferSigns,
}

pub fn summarize(
    matrix: &AccuracyMatrix,
    reference: Option<&ReferenceAccuracies>,
) -> Result<Vec<MetricsRow>> {
    (1..=matrix.num_rows())
        .map(|k| {
            let (per_task, forgetting) = if k >= 2 {
                let f = matrix.forgetting(k)?;
                (f.per_task, Some(f.mean))
            } else {
                (Vec::new(), None)
            };
            let intr = match reference {
                Some(r) if r.get(k).is_some() => Some(intransigence(r, matrix, k)?),
                _ => None,
            };
            Ok(MetricsRow {
                k,
                average_accuracy: matrix.average_accuracy(k)?,
                forgetting,
                signs: transfer_signs(&per_task, intr),
                per_task_forgetting: per_task,
                intransigence: intr,
            })
        })
        .collect()
}
