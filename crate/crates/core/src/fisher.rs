//! Diagonal empirical Fisher, its moving-average (EWC++) update and the
//! quadratic approximation of the KL divergence it induces.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::nn::{self, Batch, ForwardCache, Label, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FisherProvenance {
    Batch,
    Running,
    Snapshot,
}

/// How the per-batch Fisher diagonal is estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FisherMode {
    /// Mean of per-example squared log-likelihood gradients.
    #[default]
    PerExample,
    /// Square of the batch-mean gradient. Cheaper and biased low.
    SquaredMeanGradient,
}

/// Per-parameter, nonnegative diagonal of the empirical Fisher.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FisherDiag {
    values: Vec<f64>,
    provenance: FisherProvenance,
}

impl FisherDiag {
    pub fn zeros(len: usize, provenance: FisherProvenance) -> Self {
        Self {
            values: vec![0.0; len],
            provenance,
        }
    }

    pub fn from_values(values: Vec<f64>, provenance: FisherProvenance) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "Fisher entry {i} is {}, expected finite and >= 0",
                values[i]
            )));
        }
        Ok(Self { values, provenance })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn provenance(&self) -> FisherProvenance {
        self.provenance
    }

    /// Zero-pads to `new_len` after the model grew.
    pub fn grow(&mut self, new_len: usize) {
        if new_len > self.values.len() {
            self.values.resize(new_len, 0.0);
        }
    }

    /// Copy of this estimate tagged as a task-boundary snapshot.
    pub fn snapshot(&self) -> Self {
        Self {
            values: self.values.clone(),
            provenance: FisherProvenance::Snapshot,
        }
    }
}

/// Mean cross-entropy gradient together with the batch Fisher, from one backprop pass.
pub fn gradient_and_fisher(
    params: &ModelParams,
    cache: &ForwardCache,
    labels: &[Label],
    mode: FisherMode,
) -> Result<(Vec<f64>, FisherDiag)> {
    let bp = nn::backprop(params, cache, labels, mode == FisherMode::PerExample)?;
    let values = match bp.sq_grad {
        Some(sq) => sq,
        None => bp.grad.iter().map(|g| g * g).collect(),
    };
    Ok((
        bp.grad,
        FisherDiag {
            values,
            provenance: FisherProvenance::Batch,
        },
    ))
}

/// Empirical Fisher diagonal of one batch: `F_i = (1/B) sum_b (d log p(y_b|x_b) / d theta_i)^2`.
pub fn batch_fisher(params: &ModelParams, batch: &Batch, mode: FisherMode) -> Result<FisherDiag> {
    let cache = nn::forward(params, batch, None)?;
    Ok(gradient_and_fisher(params, &cache, batch.labels(), mode)?.1)
}

/// Moving-average update `alpha * batch + (1 - alpha) * running`.
pub fn ewc_update(running: &FisherDiag, batch: &FisherDiag, alpha: f64) -> Result<FisherDiag> {
    let mut out = running.clone();
    ewc_update_in_place(&mut out, batch, alpha)?;
    Ok(out)
}

pub fn ewc_update_in_place(running: &mut FisherDiag, batch: &FisherDiag, alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!(
            "alpha {alpha} outside [0, 1]"
        )));
    }
    check_len("batch Fisher", batch.len(), running.len())?;
    for (r, &b) in running.values.iter_mut().zip(&batch.values) {
        *r = alpha * b + (1.0 - alpha) * *r;
    }
    running.provenance = FisherProvenance::Running;
    Ok(())
}

/// `0.5 * sum_i F_i (theta_b_i - theta_a_i)^2`.
pub fn kl_quadratic(fisher: &FisherDiag, theta_a: &[f64], theta_b: &[f64]) -> Result<f64> {
    check_len("theta_a", theta_a.len(), fisher.len())?;
    check_len("theta_b", theta_b.len(), fisher.len())?;
    Ok(0.5
        * fisher
            .values
            .iter()
            .zip(theta_a.iter().zip(theta_b))
            .map(|(f, (a, b))| f * (b - a) * (b - a))
            .sum::<f64>())
}

/// Mean over probe inputs of `KL(p_a(.|x) || p_b(.|x))`.
pub fn exact_mean_kl(
    params_a: &ModelParams,
    params_b: &ModelParams,
    probe_inputs: &[f64],
) -> Result<f64> {
    if params_a.output_labels() != params_b.output_labels() {
        return Err(Error::InvalidArgument(
            "parameter sets have different label spaces".into(),
        ));
    }
    let ca = nn::forward_rows(params_a, probe_inputs, None)?;
    let cb = nn::forward_rows(params_b, probe_inputs, None)?;
    let k = params_a.output_labels().len();
    let log_a = log_softmax_rows(&ca.masked_logits(), k);
    let log_b = log_softmax_rows(&cb.masked_logits(), k);
    let n = ca.batch_size();
    let mut total = 0.0;
    for (ra, rb) in log_a.chunks_exact(k).zip(log_b.chunks_exact(k)) {
        total += ra
            .iter()
            .zip(rb)
            .map(|(&la, &lb)| la.exp() * (la - lb))
            .sum::<f64>();
    }
    Ok(total / n as f64)
}

fn log_softmax_rows(logits: &[f64], k: usize) -> Vec<f64> {
    let mut out = logits.to_vec();
    for row in out.chunks_exact_mut(k) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|z| *z -= lse);
    }
    out
}
