//! Parameter importance accumulated along the optimization path.
//!
//! Every optimizer step adds `-g_i * dtheta_i` (the first-order loss decrease
//! attributed to parameter `i`) to a running `delta_l`. Every `delta_t` steps the
//! accumulated decrease is divided by the distance moved in that interval,
//! measured either by the Fisher-weighted quadratic `0.5 F_i dtheta_i^2` or by the
//! plain squared Euclidean step, and the clamped ratio is added to the score.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::fisher::FisherDiag;

/// Distance used in the score denominator.
#[derive(Debug, Clone, Copy)]
pub enum Denominator<'a> {
    /// `0.5 * F_i * dtheta_i^2 + epsilon` (RWalk).
    Fisher(&'a FisherDiag),
    /// `dtheta_i^2 + epsilon` (path-integral style).
    Euclidean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreState {
    s_total: Vec<f64>,
    s_current: Vec<f64>,
    delta_l: Vec<f64>,
    theta_at_flush: Vec<f64>,
    steps_since_flush: usize,
    delta_t: usize,
    epsilon: f64,
    tasks_consolidated: usize,
}

impl ScoreState {
    pub fn new(theta: &[f64], delta_t: usize, epsilon: f64) -> Result<Self> {
        if delta_t == 0 {
            return Err(Error::InvalidArgument("delta_t must be >= 1".into()));
        }
        check_epsilon(epsilon)?;
        let p = theta.len();
        Ok(Self {
            s_total: vec![0.0; p],
            s_current: vec![0.0; p],
            delta_l: vec![0.0; p],
            theta_at_flush: theta.to_vec(),
            steps_since_flush: 0,
            delta_t,
            epsilon,
            tasks_consolidated: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.s_total.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s_total.is_empty()
    }

    /// Consolidated scores through the last finished task.
    pub fn total(&self) -> &[f64] {
        &self.s_total
    }

    /// Raw accumulation within the running task.
    pub fn current(&self) -> &[f64] {
        &self.s_current
    }

    pub fn delta_l(&self) -> &[f64] {
        &self.delta_l
    }

    pub fn theta_at_flush(&self) -> &[f64] {
        &self.theta_at_flush
    }

    pub fn steps_since_flush(&self) -> usize {
        self.steps_since_flush
    }

    pub fn delta_t(&self) -> usize {
        self.delta_t
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn tasks_consolidated(&self) -> usize {
        self.tasks_consolidated
    }

    /// Records one optimizer step. `grad` is the objective gradient at `theta(t)` and
    /// `step_delta` the update actually applied. Returns `true` when an interval
    /// has completed and [`flush_interval`](Self::flush_interval) is due.
    pub fn accumulate_step(&mut self, grad: &[f64], step_delta: &[f64]) -> Result<bool> {
        check_len("gradient", grad.len(), self.len())?;
        check_len("step", step_delta.len(), self.len())?;
        for ((dl, g), d) in self.delta_l.iter_mut().zip(grad).zip(step_delta) {
            *dl -= g * d;
        }
        self.steps_since_flush += 1;
        Ok(self.steps_since_flush >= self.delta_t)
    }

    /// Closes the current interval at parameters `theta_now`. Also used for the
    /// final, possibly shorter, interval of a task; a no-op if no step was taken.
    pub fn flush_interval(
        &mut self,
        theta_now: &[f64],
        denominator: Denominator<'_>,
    ) -> Result<()> {
        check_epsilon(self.epsilon)?;
        check_len("theta", theta_now.len(), self.len())?;
        if let Denominator::Fisher(f) = denominator {
            check_len("Fisher", f.len(), self.len())?;
        }
        if self.steps_since_flush == 0 {
            return Ok(());
        }
        #[allow(clippy::needless_range_loop)]
        for i in 0..self.len() {
            let moved = theta_now[i] - self.theta_at_flush[i];
            let distance = match denominator {
                Denominator::Fisher(f) => 0.5 * f.values()[i] * moved * moved,
                Denominator::Euclidean => moved * moved,
            };
            let increment = self.delta_l[i] / (distance + self.epsilon);
            if increment > 0.0 {
                self.s_current[i] += increment;
            }
        }
        self.delta_l.iter_mut().for_each(|v| *v = 0.0);
        self.theta_at_flush.copy_from_slice(theta_now);
        self.steps_since_flush = 0;
        Ok(())
    }

    /// Folds the finished task into the consolidated score by halving:
    /// `s_total = (s_total + s_current) / 2`, or `s_current` for the first task.
    pub fn consolidate_task(&mut self) {
        if self.tasks_consolidated == 0 {
            self.s_total.copy_from_slice(&self.s_current);
        } else {
            for (t, c) in self.s_total.iter_mut().zip(&self.s_current) {
                *t = 0.5 * (*t + c);
            }
        }
        self.s_current.iter_mut().for_each(|v| *v = 0.0);
        self.tasks_consolidated += 1;
    }

    /// Zero-pads every vector for newly appended parameters; `theta_now` supplies
    /// the interval start for the new coordinates.
    pub fn grow(&mut self, theta_now: &[f64]) -> Result<()> {
        let old = self.len();
        if theta_now.len() < old {
            return Err(Error::Shape("parameter vector shrank".into()));
        }
        let new = theta_now.len();
        self.s_total.resize(new, 0.0);
        self.s_current.resize(new, 0.0);
        self.delta_l.resize(new, 0.0);
        self.theta_at_flush.extend_from_slice(&theta_now[old..]);
        Ok(())
    }
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "epsilon must be > 0, got {epsilon}"
        )));
    }
    Ok(())
}

/// How importance vectors are rescaled into `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Divide by the maximum entry.
    #[default]
    Max,
    /// `(v - min) / (max - min)`.
    MinMax,
}

/// Divides by the maximum; all-zero input stays zero.
pub fn normalize_unit(values: &[f64]) -> Result<Vec<f64>> {
    normalize(values, Normalization::Max)
}

pub fn normalize(values: &[f64], mode: Normalization) -> Result<Vec<f64>> {
    if let Some(i) = values.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "cannot normalize entry {i} = {}",
            values[i]
        )));
    }
    let max = values.iter().copied().fold(0.0, f64::max);
    let min = match mode {
        Normalization::Max => 0.0,
        Normalization::MinMax => values.iter().copied().fold(f64::INFINITY, f64::min),
    };
    let range = max - min;
    // also catches NaN
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    if !(range > 0.0) {
        return Ok(vec![0.0; values.len()]);
    }
    Ok(values
        .iter()
        .map(|v| ((v - min) / range).min(1.0))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fisher::FisherProvenance;

    fn fisher(v: Vec<f64>) -> FisherDiag {
        FisherDiag::from_values(v, FisherProvenance::Running).unwrap()
    }

    #[test]
    fn accumulate_sign_convention() {
        let mut s = ScoreState::new(&[0.0, 0.0], 10, 1e-3).unwrap();
        s.accumulate_step(&[0.0, 1.0], &[0.5, -0.01]).unwrap();
        assert_eq!(s.delta_l()[0], 0.0);
        assert!((s.delta_l()[1] - 0.01).abs() < 1e-18);
        assert_eq!(s.steps_since_flush(), 1);
    }

    #[test]
    fn flush_signals_at_interval() {
        let mut s = ScoreState::new(&[0.0], 3, 1e-3).unwrap();
        assert!(!s.accumulate_step(&[1.0], &[-0.1]).unwrap());
        assert!(!s.accumulate_step(&[1.0], &[-0.1]).unwrap());
        assert!(s.accumulate_step(&[1.0], &[-0.1]).unwrap());
    }

    #[test]
    fn flush_increment_arithmetic() {
        let mut s = ScoreState::new(&[0.0], 1, 0.1).unwrap();
        s.accumulate_step(&[-0.5], &[1.0]).unwrap();
        s.flush_interval(&[1.0], Denominator::Fisher(&fisher(vec![1.0])))
            .unwrap();
        assert!((s.current()[0] - 0.5 / 0.6).abs() < 1e-15);
        assert_eq!(s.delta_l(), &[0.0]);
        assert_eq!(s.theta_at_flush(), &[1.0]);
        assert_eq!(s.steps_since_flush(), 0);
    }

    #[test]
    fn loss_increase_is_clamped() {
        let mut s = ScoreState::new(&[0.0], 1, 0.1).unwrap();
        s.accumulate_step(&[0.2], &[1.0]).unwrap();
        s.flush_interval(&[1.0], Denominator::Fisher(&fisher(vec![1.0])))
            .unwrap();
        assert_eq!(s.current(), &[0.0]);
    }

    #[test]
    fn zero_fisher_divides_by_epsilon() {
        let mut s = ScoreState::new(&[0.0], 1, 0.25).unwrap();
        s.accumulate_step(&[-1.0], &[0.7]).unwrap();
        s.flush_interval(&[3.3], Denominator::Fisher(&fisher(vec![0.0])))
            .unwrap();
        assert!((s.current()[0] - 0.7 / 0.25).abs() < 1e-15);
    }

    #[test]
    fn invalid_epsilon_and_interval() {
        assert!(matches!(
            ScoreState::new(&[0.0], 1, 0.0),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            ScoreState::new(&[0.0], 1, -1.0),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            ScoreState::new(&[0.0], 0, 1.0),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn euclidean_equals_fisher_of_two() {
        let theta0 = [0.1, -0.3, 0.7];
        let grads = [[0.2, -0.4, 0.1], [0.3, 0.1, -0.2]];
        let steps = [[-0.02, 0.01, -0.03], [-0.01, -0.02, 0.01]];
        let run = |denom: Denominator<'_>| {
            let mut s = ScoreState::new(&theta0, 2, 1e-3).unwrap();
            let mut theta = theta0.to_vec();
            for (g, d) in grads.iter().zip(&steps) {
                s.accumulate_step(g, d).unwrap();
                theta.iter_mut().zip(d).for_each(|(t, d)| *t += d);
            }
            s.flush_interval(&theta, denom).unwrap();
            s.current().to_vec()
        };
        let two = fisher(vec![2.0; 3]);
        assert_eq!(run(Denominator::Euclidean), run(Denominator::Fisher(&two)));
    }

    #[test]
    fn consolidation_halves() {
        let mut s = ScoreState::new(&[0.0], 1, 1.0).unwrap();
        s.s_current[0] = 0.4;
        s.consolidate_task();
        assert_eq!(s.total(), &[0.4]);
        assert_eq!(s.current(), &[0.0]);
        s.s_current[0] = 0.2;
        s.consolidate_task();
        assert!((s.total()[0] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn old_tasks_decay_geometrically() {
        // unrolled recursion: after n more tasks, task 1 carries weight 2^-n
        // (task 1 itself enters with weight 1 as the base case, then halves)
        let tasks = 6;
        let mut s = ScoreState::new(&vec![0.0; tasks], 1, 1.0).unwrap();
        for k in 0..tasks {
            s.s_current[k] = 1.0;
            s.consolidate_task();
        }
        for k in 0..tasks {
            let since = tasks - 1 - k;
            let want = if k == 0 {
                0.5f64.powi(since as i32)
            } else {
                0.5f64.powi(since as i32 + 1)
            };
            assert_eq!(s.total()[k], want, "task {k}");
        }
    }

    #[test]
    fn grow_zero_pads() {
        let mut s = ScoreState::new(&[1.0], 1, 1.0).unwrap();
        s.accumulate_step(&[-1.0], &[1.0]).unwrap();
        s.grow(&[2.0, 5.0]).unwrap();
        assert_eq!(s.delta_l(), &[1.0, 0.0]);
        assert_eq!(s.theta_at_flush(), &[1.0, 5.0]);
        assert_eq!(s.total(), &[0.0, 0.0]);
    }

    #[test]
    fn normalize_cases() {
        assert_eq!(
            normalize_unit(&[0.0, 2.0, 4.0]).unwrap(),
            vec![0.0, 0.5, 1.0]
        );
        assert_eq!(normalize_unit(&[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        assert!(matches!(
            normalize_unit(&[1.0, -0.5]),
            Err(Error::InvalidArgument(_))
        ));
        assert_eq!(
            normalize(&[1.0, 2.0, 3.0], Normalization::MinMax).unwrap(),
            vec![0.0, 0.5, 1.0]
        );
    }
}
