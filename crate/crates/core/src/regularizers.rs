//! Quadratic anchor penalties `lambda * sum_i w_i (theta_i - theta*_i)^2`.
//!
//! The weight `w` depends on the method:
//!
//! | method  | weight                                          |
//! |---------|-------------------------------------------------|
//! | vanilla | 0                                               |
//! | ewcpp   | Fisher snapshot                                 |
//! | pi      | normalized path scores (Euclidean distance)     |
//! | rwalk   | normalized Fisher + normalized path scores      |
//!
//! There is no `1/2` in front of the sum for any method, so an EWC++ `lambda`
//! here is half the coefficient of the KL form `lambda/2 * sum F (dtheta)^2`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::fisher::FisherDiag;
use crate::importance::{normalize, Normalization, ScoreState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Vanilla,
    Ewcpp,
    Pi,
    Rwalk,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Vanilla, Method::Ewcpp, Method::Pi, Method::Rwalk];

    /// Whether training must maintain the running Fisher.
    pub fn needs_fisher(self) -> bool {
        matches!(self, Method::Ewcpp | Method::Rwalk)
    }

    /// Whether training must accumulate path scores.
    pub fn needs_scores(self) -> bool {
        matches!(self, Method::Pi | Method::Rwalk)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Vanilla => "vanilla",
            Method::Ewcpp => "ewcpp",
            Method::Pi => "pi",
            Method::Rwalk => "rwalk",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "vanilla" => Ok(Method::Vanilla),
            "ewcpp" | "ewc++" | "ewc" => Ok(Method::Ewcpp),
            "pi" => Ok(Method::Pi),
            "rwalk" => Ok(Method::Rwalk),
            other => Err(Error::InvalidArgument(format!("unknown method {other:?}"))),
        }
    }
}

/// How the path scores enter a PI anchor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorOptions {
    pub normalization: Normalization,
    /// Rescale PI scores into `[0, 1]` before use.
    pub normalize_pi: bool,
}

impl Default for AnchorOptions {
    fn default() -> Self {
        Self {
            normalization: Normalization::Max,
            normalize_pi: true,
        }
    }
}

/// Parameters and per-parameter weights the next task is pulled toward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyAnchor {
    theta_star: Vec<f64>,
    weight: Vec<f64>,
    method: Method,
    lambda: f64,
}

impl PenaltyAnchor {
    /// Anchor with zero weight everywhere (first task, or vanilla).
    pub fn inactive(method: Method, theta_now: &[f64]) -> Self {
        Self {
            theta_star: theta_now.to_vec(),
            weight: vec![0.0; theta_now.len()],
            method,
            lambda: 0.0,
        }
    }

    pub fn theta_star(&self) -> &[f64] {
        &self.theta_star
    }

    pub fn weight(&self) -> &[f64] {
        &self.weight
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn len(&self) -> usize {
        self.weight.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weight.is_empty()
    }

    /// Extends to a grown parameter vector; new coordinates carry zero weight.
    pub fn grow(&mut self, theta_now: &[f64]) -> Result<()> {
        let old = self.len();
        if theta_now.len() < old {
            return Err(Error::Shape("parameter vector shrank".into()));
        }
        self.theta_star.extend_from_slice(&theta_now[old..]);
        self.weight.resize(theta_now.len(), 0.0);
        Ok(())
    }

    pub fn penalty(&self, theta: &[f64]) -> Result<f64> {
        check_len("theta", theta.len(), self.len())?;
        if self.lambda == 0.0 {
            return Ok(0.0);
        }
        Ok(self.lambda
            * self
                .weight
                .iter()
                .zip(theta.iter().zip(&self.theta_star))
                .map(|(w, (t, s))| w * (t - s) * (t - s))
                .sum::<f64>())
    }

    pub fn penalty_grad(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let mut g = vec![0.0; theta.len()];
        self.add_penalty_grad(theta, &mut g)?;
        Ok(g)
    }

    /// `grad += 2 lambda w (theta - theta*)`.
    pub fn add_penalty_grad(&self, theta: &[f64], grad: &mut [f64]) -> Result<()> {
        check_len("theta", theta.len(), self.len())?;
        check_len("gradient", grad.len(), self.len())?;
        if self.lambda == 0.0 {
            return Ok(());
        }
        let c = 2.0 * self.lambda;
        for i in 0..grad.len() {
            grad[i] += c * self.weight[i] * (theta[i] - self.theta_star[i]);
        }
        Ok(())
    }
}

/// Builds the anchor for the next task at a task boundary.
///
/// `fisher_snapshot` is required for `ewcpp` and `rwalk`, `scores` for `pi` and
/// `rwalk`; the scores must already be consolidated.
pub fn make_anchor(
    method: Method,
    theta_now: &[f64],
    fisher_snapshot: Option<&FisherDiag>,
    scores: Option<&ScoreState>,
    lambda: f64,
    options: AnchorOptions,
) -> Result<PenaltyAnchor> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "lambda must be >= 0, got {lambda}"
        )));
    }
    let p = theta_now.len();
    let fisher = || {
        fisher_snapshot
            .ok_or_else(|| Error::MissingData(format!("{method} anchor needs a Fisher snapshot")))
            .and_then(|f| check_len("Fisher", f.len(), p).map(|_| f.values()))
    };
    let total = || {
        scores
            .ok_or_else(|| Error::MissingData(format!("{method} anchor needs path scores")))
            .and_then(|s| check_len("scores", s.len(), p).map(|_| s.total()))
    };
    let weight = match method {
        Method::Vanilla => vec![0.0; p],
        Method::Ewcpp => fisher()?.to_vec(),
        Method::Pi => {
            if options.normalize_pi {
                normalize(total()?, options.normalization)?
            } else {
                total()?.to_vec()
            }
        }
        Method::Rwalk => {
            let f = normalize(fisher()?, options.normalization)?;
            let s = normalize(total()?, options.normalization)?;
            f.iter().zip(&s).map(|(a, b)| a + b).collect()
        }
    };
    Ok(PenaltyAnchor {
        theta_star: theta_now.to_vec(),
        weight,
        method,
        lambda: if method == Method::Vanilla {
            0.0
        } else {
            lambda
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fisher::{kl_quadratic, FisherProvenance};

    fn snapshot(v: Vec<f64>) -> FisherDiag {
        FisherDiag::from_values(v, FisherProvenance::Snapshot).unwrap()
    }

    fn scores_with_total(total: &[f64]) -> ScoreState {
        let mut s = ScoreState::new(&vec![0.0; total.len()], 1, 1.0).unwrap();
        // one interval per coordinate with unit epsilon and no movement gives increment = delta_l
        let grad: Vec<f64> = total.iter().map(|t| -t).collect();
        s.accumulate_step(&grad, &vec![1.0; total.len()]).unwrap();
        s.flush_interval(
            &vec![0.0; total.len()],
            crate::importance::Denominator::Euclidean,
        )
        .unwrap();
        s.consolidate_task();
        s
    }

    #[test]
    fn vanilla_has_no_penalty() {
        let a = make_anchor(
            Method::Vanilla,
            &[1.0, 2.0],
            None,
            None,
            5.0,
            AnchorOptions::default(),
        )
        .unwrap();
        assert_eq!(a.penalty(&[10.0, -3.0]).unwrap(), 0.0);
        assert_eq!(a.penalty_grad(&[10.0, -3.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn rwalk_normalizes_each_component() {
        let f = snapshot(vec![0.0, 4.0]);
        let s = scores_with_total(&[2.0, 0.0]);
        assert_eq!(s.total(), &[2.0, 0.0]);
        let a = make_anchor(
            Method::Rwalk,
            &[0.0, 0.0],
            Some(&f),
            Some(&s),
            1.0,
            AnchorOptions::default(),
        )
        .unwrap();
        assert_eq!(a.weight(), &[1.0, 1.0]);
    }

    #[test]
    fn ewcpp_uses_raw_snapshot() {
        let f = snapshot(vec![0.3, 7.0, 0.0]);
        let a = make_anchor(
            Method::Ewcpp,
            &[0.0; 3],
            Some(&f),
            None,
            2.0,
            AnchorOptions::default(),
        )
        .unwrap();
        assert_eq!(a.weight(), f.values());
    }

    #[test]
    fn penalty_arithmetic() {
        let f = snapshot(vec![1.0]);
        let a = make_anchor(
            Method::Ewcpp,
            &[0.0],
            Some(&f),
            None,
            1.0,
            AnchorOptions::default(),
        )
        .unwrap();
        assert_eq!(a.penalty(&[0.0]).unwrap(), 0.0);
        assert_eq!(a.penalty(&[2.0]).unwrap(), 4.0);

        let f = snapshot(vec![3.0]);
        let a = make_anchor(
            Method::Ewcpp,
            &[0.0],
            Some(&f),
            None,
            0.5,
            AnchorOptions::default(),
        )
        .unwrap();
        assert_eq!(a.penalty_grad(&[1.0]).unwrap(), vec![3.0]);
        assert_eq!(a.penalty_grad(&[0.0]).unwrap(), vec![0.0]);
        assert!(matches!(a.penalty(&[0.0, 1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn negative_lambda_and_missing_inputs() {
        let f = snapshot(vec![1.0]);
        assert!(matches!(
            make_anchor(
                Method::Ewcpp,
                &[0.0],
                Some(&f),
                None,
                -1.0,
                AnchorOptions::default()
            ),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            make_anchor(
                Method::Rwalk,
                &[0.0],
                Some(&f),
                None,
                1.0,
                AnchorOptions::default()
            ),
            Err(Error::MissingData(_))
        ));
    }

    #[test]
    fn ewcpp_penalty_is_twice_quadratic_kl() {
        let f = snapshot(vec![0.5, 2.0, 0.0, 1.5]);
        let star = [0.1, -0.2, 0.3, 0.0];
        let theta = [0.4, 0.1, -1.0, 0.25];
        let a = make_anchor(
            Method::Ewcpp,
            &star,
            Some(&f),
            None,
            1.0,
            AnchorOptions::default(),
        )
        .unwrap();
        let kl = kl_quadratic(&f, &star, &theta).unwrap();
        assert!((a.penalty(&theta).unwrap() - 2.0 * kl).abs() < 1e-15);
    }

    #[test]
    fn gradient_descent_on_penalty_reaches_anchor() {
        let f = snapshot(vec![0.2, 1.0, 3.0]);
        let star = [1.0, -2.0, 0.5];
        let a = make_anchor(
            Method::Ewcpp,
            &star,
            Some(&f),
            None,
            1.0,
            AnchorOptions::default(),
        )
        .unwrap();
        let mut theta = vec![5.0, 5.0, 5.0];
        for _ in 0..2000 {
            let g = a.penalty_grad(&theta).unwrap();
            theta.iter_mut().zip(&g).for_each(|(t, g)| *t -= 0.1 * g);
        }
        for (t, s) in theta.iter().zip(&star) {
            assert!((t - s).abs() < 1e-9);
        }
    }

    #[test]
    fn grow_adds_unweighted_coordinates() {
        let f = snapshot(vec![1.0]);
        let mut a = make_anchor(
            Method::Ewcpp,
            &[0.5],
            Some(&f),
            None,
            1.0,
            AnchorOptions::default(),
        )
        .unwrap();
        a.grow(&[0.9, 3.0]).unwrap();
        assert_eq!(a.theta_star(), &[0.5, 3.0]);
        assert_eq!(a.weight(), &[1.0, 0.0]);
        assert_eq!(a.penalty(&[0.5, 100.0]).unwrap(), 0.0);
    }

    #[test]
    fn method_parsing() {
        assert_eq!("EWC++".parse::<Method>().unwrap(), Method::Ewcpp);
        assert_eq!("rwalk".parse::<Method>().unwrap(), Method::Rwalk);
        assert!("gem".parse::<Method>().is_err());
    }
}
