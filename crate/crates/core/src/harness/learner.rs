//! Training state carried across tasks and the per-task training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, TaskSpec, TaskStream};
use crate::error::{Error, Result};
use crate::fisher::{self, FisherDiag, FisherProvenance};
use crate::importance::{Denominator, ScoreState};
use crate::memory::{self, EpisodicMemory};
use crate::metrics::HeadMode;
use crate::nn::{self, Init, Label, ModelParams};
use crate::optim::AdamState;
use crate::regularizers::{make_anchor, Method, PenaltyAnchor};

use super::config::{ExperimentConfig, ReplayMode};

const EVAL_CHUNK: usize = 2000;

/// Independent random streams derived from the run seed.
#[derive(Debug, Clone, Copy)]
#[repr(u64)]
pub(crate) enum Stream {
    Init = 1,
    Shuffle = 2,
    Memory = 3,
    ReferenceInit = 4,
    ReferenceShuffle = 5,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn derived_rng(seed: u64, stream: Stream, a: u64, b: u64) -> ChaCha8Rng {
    let mut h = splitmix(seed);
    for v in [stream as u64, a, b] {
        h = splitmix(h ^ v);
    }
    ChaCha8Rng::seed_from_u64(h)
}

/// Loss statistics from one call to [`Learner::train_task`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    pub steps: usize,
    pub examples: usize,
    pub first_epoch_loss: f64,
    pub last_epoch_loss: f64,
    pub final_penalty: f64,
}

/// Everything the incremental protocol carries from one task to the next.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Learner {
    pub params: ModelParams,
    pub adam: AdamState,
    /// Moving-average Fisher, updated every step (EWC++ and RWalk only).
    pub fisher_running: Option<FisherDiag>,
    /// Copy of the running Fisher taken at the last task boundary.
    pub fisher_snapshot: Option<FisherDiag>,
    pub scores: Option<ScoreState>,
    pub anchor: PenaltyAnchor,
    pub memory: EpisodicMemory,
    pub tasks_done: usize,
    /// Label set of every task seen so far; in multi-head mode each is its own softmax head.
    pub heads: Vec<Vec<Label>>,
    method: Method,
}

impl Learner {
    /// Fresh network whose output layer holds `first_labels`.
    pub fn new(
        config: &ExperimentConfig,
        input_dim: usize,
        first_labels: &[Label],
    ) -> Result<Self> {
        config.validate()?;
        Self::with_method(
            config,
            config.method,
            input_dim,
            first_labels,
            Stream::Init,
            0,
        )
    }

    fn with_method(
        config: &ExperimentConfig,
        method: Method,
        input_dim: usize,
        labels: &[Label],
        init_stream: Stream,
        init_index: u64,
    ) -> Result<Self> {
        let mut rng = derived_rng(config.seed, init_stream, init_index, 0);
        let params = ModelParams::new(input_dim, &config.hidden, labels, Init::HE, &mut rng)?;
        let p = params.flat_len();
        let fisher_running = method
            .needs_fisher()
            .then(|| FisherDiag::zeros(p, FisherProvenance::Running));
        let scores = if method.needs_scores() {
            Some(ScoreState::new(
                params.flat(),
                config.delta_t,
                config.epsilon,
            )?)
        } else {
            None
        };
        Ok(Self {
            adam: AdamState::new(config.adam, p),
            anchor: PenaltyAnchor::inactive(method, params.flat()),
            fisher_running,
            fisher_snapshot: None,
            scores,
            memory: EpisodicMemory::new(config.samples_per_class, config.sampler),
            tasks_done: 0,
            heads: Vec::new(),
            method,
            params,
        })
    }

    pub fn method(&self) -> Method {
        self.method
    }

    /// Number of Fisher-sized vectors currently held (running + snapshot).
    pub fn fisher_vectors(&self) -> usize {
        usize::from(self.fisher_running.is_some()) + usize::from(self.fisher_snapshot.is_some())
    }

    /// Adds output units for labels the model has not seen and zero-pads all
    /// per-parameter state to the new size.
    pub fn begin_task(&mut self, config: &ExperimentConfig, task: &TaskSpec) -> Result<()> {
        if !self.heads.contains(&task.labels) {
            self.heads.push(task.labels.clone());
        }
        let new: Vec<Label> = task
            .labels
            .iter()
            .copied()
            .filter(|l| self.params.label_index(*l).is_none())
            .collect();
        if new.is_empty() {
            return Ok(());
        }
        let mut rng = derived_rng(config.seed, Stream::Init, task.index as u64, 0);
        let init = Init::HeUniform {
            scale: config.new_head_init_scale,
        };
        self.params.grow_output(&new, init, &mut rng)?;
        let p = self.params.flat_len();
        self.adam.grow(p);
        if let Some(f) = self.fisher_running.as_mut() {
            f.grow(p);
        }
        if let Some(f) = self.fisher_snapshot.as_mut() {
            f.grow(p);
        }
        if let Some(s) = self.scores.as_mut() {
            s.grow(self.params.flat())?;
        }
        self.anchor.grow(self.params.flat())?;
        Ok(())
    }

    /// Trains on `data` for the configured number of epochs, minimizing the data
    /// loss plus the current anchor penalty. Every step also updates the running
    /// Fisher and the path scores when the method uses them. `data` must be
    /// [`Learner::training_set`], whose tail holds the memory.
    pub fn train_task(
        &mut self,
        config: &ExperimentConfig,
        task_index: usize,
        data: &Dataset,
    ) -> Result<TrainStats> {
        let pinned = match config.replay {
            ReplayMode::Union => 0,
            ReplayMode::EveryBatch => self.memory.len().min(data.len()),
        };
        self.train_epochs(config, Stream::Shuffle, task_index, data, pinned)
    }

    /// Mean loss, gradient and (if tracked) batch Fisher over the rows `rows` of
    /// `data`. Multi-head training applies a separate softmax per task head; the
    /// batch is split by head and the parts are weighted by their row counts.
    fn batch_objective(
        &self,
        config: &ExperimentConfig,
        data: &Dataset,
        rows: &[usize],
    ) -> Result<(f64, Vec<f64>, Option<FisherDiag>)> {
        let parts: Vec<(Option<&[Label]>, Vec<usize>)> = match config.head_mode {
            HeadMode::Single => vec![(None, rows.to_vec())],
            HeadMode::Multi => {
                let mut parts: Vec<(Option<&[Label]>, Vec<usize>)> = self
                    .heads
                    .iter()
                    .map(|h| (Some(h.as_slice()), Vec::new()))
                    .collect();
                for &i in rows {
                    let y = data.labels()[i];
                    let h = self
                        .heads
                        .iter()
                        .position(|h| h.contains(&y))
                        .ok_or_else(|| {
                            Error::InvalidArgument(format!("label {y} belongs to no task head"))
                        })?;
                    parts[h].1.push(i);
                }
                parts.retain(|(_, r)| !r.is_empty());
                parts
            }
        };
        let total = rows.len() as f64;
        let mut loss = 0.0;
        let mut grad = vec![0.0; self.params.flat_len()];
        let mut fisher_sum = self.fisher_running.as_ref().map(|_| vec![0.0; grad.len()]);
        for (mask, idx) in &parts {
            let w = idx.len() as f64 / total;
            let batch = data.gather(idx)?;
            let cache = nn::forward(&self.params, &batch, *mask)?;
            let (l, _) = nn::softmax_log_likelihood(&cache, batch.labels())?;
            loss += w * l;
            let g = match fisher_sum.as_mut() {
                Some(fs) => {
                    let (g, f) = fisher::gradient_and_fisher(
                        &self.params,
                        &cache,
                        batch.labels(),
                        config.fisher_mode,
                    )?;
                    if parts.len() == 1 {
                        *fs = f.values().to_vec();
                    } else {
                        fs.iter_mut().zip(f.values()).for_each(|(a, b)| *a += w * b);
                    }
                    g
                }
                None => nn::backward(&self.params, &cache, batch.labels())?,
            };
            if parts.len() == 1 {
                grad = g;
            } else {
                grad.iter_mut().zip(&g).for_each(|(a, b)| *a += w * b);
            }
        }
        let fisher = fisher_sum
            .map(|v| FisherDiag::from_values(v, FisherProvenance::Batch))
            .transpose()?;
        Ok((loss, grad, fisher))
    }

    fn train_epochs(
        &mut self,
        config: &ExperimentConfig,
        shuffle: Stream,
        task_index: usize,
        data: &Dataset,
        pinned: usize,
    ) -> Result<TrainStats> {
        if data.len() <= pinned {
            return Err(Error::InvalidArgument(format!(
                "task {task_index} has no training data"
            )));
        }
        let mut stats = TrainStats::default();
        // the last `pinned` rows join every mini-batch instead of the shuffle
        let n = data.len() - pinned;
        let tail: Vec<usize> = (n..data.len()).collect();
        let mut order: Vec<usize> = (0..n).collect();
        let mut rows = Vec::with_capacity(config.batch_size + pinned);
        let epochs = config.epochs();
        for epoch in 0..epochs {
            let mut rng = derived_rng(config.seed, shuffle, task_index as u64, epoch as u64);
            order.sort_unstable();
            order.shuffle(&mut rng);
            let mut loss_sum = 0.0;
            for chunk in order.chunks(config.batch_size) {
                rows.clear();
                rows.extend_from_slice(chunk);
                rows.extend_from_slice(&tail);
                let (loss, mut grad, batch_fisher) = self.batch_objective(config, data, &rows)?;
                let data_grad = (!config.score_uses_penalty_grad && self.scores.is_some())
                    .then(|| grad.clone());
                self.anchor
                    .add_penalty_grad(self.params.flat(), &mut grad)?;
                let step = self.adam.step(self.params.flat_mut(), &grad).map_err(|e| {
                    Error::Numeric(format!(
                        "task {task_index}, epoch {epoch}: {e} (batch loss {loss})"
                    ))
                })?;
                if let (Some(running), Some(bf)) =
                    (self.fisher_running.as_mut(), batch_fisher.as_ref())
                {
                    fisher::ewc_update_in_place(running, bf, config.alpha)?;
                }
                if let Some(scores) = self.scores.as_mut() {
                    let g = data_grad.as_ref().unwrap_or(&grad);
                    if scores.accumulate_step(g, &step)? {
                        let denom = match self.fisher_running.as_ref() {
                            Some(f) => Denominator::Fisher(f),
                            None => Denominator::Euclidean,
                        };
                        scores.flush_interval(self.params.flat(), denom)?;
                    }
                }
                loss_sum += loss * chunk.len() as f64;
                stats.steps += 1;
                stats.examples += chunk.len();
            }
            let mean = loss_sum / n as f64;
            if !mean.is_finite() {
                return Err(Error::Numeric(format!(
                    "task {task_index}, epoch {epoch}: mean loss {mean}"
                )));
            }
            if epoch == 0 {
                stats.first_epoch_loss = mean;
            }
            stats.last_epoch_loss = mean;
        }
        stats.final_penalty = self.anchor.penalty(self.params.flat())?;
        Ok(stats)
    }

    /// Closes task `task`: final score flush and consolidation, Fisher snapshot,
    /// new anchor, and exemplar selection for the task's classes.
    pub fn task_boundary(&mut self, config: &ExperimentConfig, task: &TaskSpec) -> Result<()> {
        if let Some(scores) = self.scores.as_mut() {
            let denom = match self.fisher_running.as_ref() {
                Some(f) => Denominator::Fisher(f),
                None => Denominator::Euclidean,
            };
            scores.flush_interval(self.params.flat(), denom)?;
            scores.consolidate_task();
        }
        if let Some(running) = self.fisher_running.as_ref() {
            self.fisher_snapshot = Some(running.snapshot());
        }
        self.anchor = make_anchor(
            self.method,
            self.params.flat(),
            self.fisher_snapshot.as_ref(),
            self.scores.as_ref(),
            config.lambda(),
            config.anchor_options(),
        )?;
        if self.memory.budget() > 0 {
            let mut rng = derived_rng(config.seed, Stream::Memory, task.index as u64, 0);
            for &label in &task.labels {
                let class_data = task.train.filter_labels(&[label]);
                self.memory
                    .select_class(&self.params, &class_data, label, &mut rng)?;
            }
        }
        self.tasks_done += 1;
        Ok(())
    }

    /// Training data for a task: its own examples plus replayed exemplars.
    pub fn training_set(&self, task: &TaskSpec) -> Result<Dataset> {
        memory::replay_union(&self.memory, &task.train)
    }

    /// Runs one full task: grow, train on the replay union, close the boundary.
    pub fn learn_task(&mut self, config: &ExperimentConfig, task: &TaskSpec) -> Result<TrainStats> {
        self.begin_task(config, task)?;
        let data = self.training_set(task)?;
        let stats = self.train_task(config, task.index, &data)?;
        self.task_boundary(config, task)?;
        Ok(stats)
    }
}

/// Fraction of `test` predicted correctly, taking the argmax over `mask`.
pub fn accuracy(params: &ModelParams, test: &Dataset, mask: Option<&[Label]>) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Consistency("empty test set".into()));
    }
    let d = test.dim();
    let mut correct = 0usize;
    for (chunk, labels) in test
        .inputs()
        .chunks(EVAL_CHUNK * d)
        .zip(test.labels().chunks(EVAL_CHUNK))
    {
        let x: Vec<f64> = chunk.iter().map(|&v| f64::from(v)).collect();
        let pred = nn::predict(params, &x, mask)?;
        correct += pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    }
    Ok(correct as f64 / test.len() as f64)
}

/// Row `k` of the accuracy matrix: accuracy on every task `j <= k`.
///
/// Multi-head restricts the prediction to task `j`'s labels; single-head
/// predicts over every label of tasks `1..=k`.
pub fn evaluate_all(
    params: &ModelParams,
    stream: &TaskStream,
    k: usize,
    head_mode: HeadMode,
) -> Result<Vec<f64>> {
    let seen = stream.seen_labels(k);
    (1..=k)
        .map(|j| {
            let task = stream.task(j);
            let mask = match head_mode {
                HeadMode::Multi => task.labels.as_slice(),
                HeadMode::Single => seen.as_slice(),
            };
            accuracy(params, &task.test, Some(mask))
        })
        .collect()
}

/// Trains a fresh vanilla network jointly on tasks `1..=k` with the same
/// architecture, optimizer, batch size, epoch budget and head mode as the
/// incremental run.
pub fn train_reference(
    stream: &TaskStream,
    k: usize,
    config: &ExperimentConfig,
) -> Result<ModelParams> {
    config.validate()?;
    let labels = stream.seen_labels(k);
    let parts: Vec<&Dataset> = stream.tasks()[..k].iter().map(|t| &t.train).collect();
    let data = Dataset::concat(&parts)?;
    let ref_config = ExperimentConfig {
        method: Method::Vanilla,
        samples_per_class: 0,
        ..config.clone()
    };
    let mut learner = Learner::with_method(
        &ref_config,
        Method::Vanilla,
        stream.input_dim(),
        &labels,
        Stream::ReferenceInit,
        k as u64,
    )?;
    learner.heads = stream.tasks()[..k]
        .iter()
        .map(|t| t.labels.clone())
        .collect();
    learner.train_epochs(&ref_config, Stream::ReferenceShuffle, k, &data, 0)?;
    Ok(learner.params)
}

/// `a_k^*` under `head_mode` for a reference model trained through task `k`.
pub fn reference_accuracy(
    params: &ModelParams,
    stream: &TaskStream,
    k: usize,
    head_mode: HeadMode,
) -> Result<f64> {
    let task = stream.task(k);
    let mask = match head_mode {
        HeadMode::Multi => task.labels.clone(),
        HeadMode::Single => stream.seen_labels(k),
    };
    accuracy(params, &task.test, Some(&mask))
}
