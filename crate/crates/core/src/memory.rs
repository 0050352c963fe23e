//! Episodic memory: exemplar selection and replay.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{self, Label, ModelParams};

/// Plane-distance values at or below this are clamped to it.
pub const PLANE_DISTANCE_FLOOR: f64 = 1e-6;
/// Added to every entropy so confident examples keep nonzero mass.
pub const ENTROPY_FLOOR: f64 = 1e-8;

const CHUNK: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    Uniform,
    PlaneDistance,
    Entropy,
    Mof,
}

impl Sampler {
    pub const ALL: [Sampler; 4] = [
        Sampler::Uniform,
        Sampler::PlaneDistance,
        Sampler::Entropy,
        Sampler::Mof,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Sampler::Uniform => "uniform",
            Sampler::PlaneDistance => "plane_distance",
            Sampler::Entropy => "entropy",
            Sampler::Mof => "mof",
        }
    }
}

impl fmt::Display for Sampler {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Sampler {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "uniform" => Ok(Sampler::Uniform),
            "plane_distance" | "plane" => Ok(Sampler::PlaneDistance),
            "entropy" => Ok(Sampler::Entropy),
            "mof" | "herding" => Ok(Sampler::Mof),
            other => Err(Error::InvalidArgument(format!("unknown sampler {other:?}"))),
        }
    }
}

fn check_request(class_data: &Dataset, m: usize) -> Result<()> {
    if class_data.is_empty() {
        return Err(Error::InvalidArgument("no examples to select from".into()));
    }
    if m == 0 {
        return Err(Error::InvalidArgument(
            "selection budget must be >= 1".into(),
        ));
    }
    Ok(())
}

/// `min(m, n)` distinct indices drawn uniformly without replacement.
pub fn select_uniform<R: Rng + ?Sized>(
    class_data: &Dataset,
    m: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    check_request(class_data, m)?;
    let n = class_data.len();
    if m >= n {
        return Ok((0..n).collect());
    }
    Ok(rand::seq::index::sample(rng, n, m).into_vec())
}

/// Sequential draws without replacement, each proportional to the remaining weights.
pub fn weighted_sample_without_replacement<R: Rng + ?Sized>(
    weights: &[f64],
    m: usize,
    rng: &mut R,
) -> Vec<usize> {
    let n = weights.len();
    if m >= n {
        return (0..n).collect();
    }
    let mut w = weights.to_vec();
    let mut picked = Vec::with_capacity(m);
    for _ in 0..m {
        let total: f64 = w.iter().sum();
        let mut target = rng.random::<f64>() * total;
        let mut choice = None;
        for (i, &wi) in w.iter().enumerate() {
            if wi <= 0.0 {
                continue;
            }
            choice = Some(i);
            if target < wi {
                break;
            }
            target -= wi;
        }
        let i = choice.expect("positive weight remains");
        picked.push(i);
        w[i] = 0.0;
    }
    picked
}

fn class_features(params: &ModelParams, data: &Dataset) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(data.len() * params.feature_dim());
    let d = data.dim();
    for chunk in data.inputs().chunks(CHUNK * d) {
        let x: Vec<f64> = chunk.iter().map(|&v| f64::from(v)).collect();
        out.extend(nn::features(params, &x)?);
    }
    Ok(out)
}

/// Pseudo-distance `phi(x) . w_y` of each example to the decision boundary of `label`.
pub fn plane_distances(
    params: &ModelParams,
    class_data: &Dataset,
    label: Label,
) -> Result<Vec<f64>> {
    let row = params
        .output_row(label)
        .ok_or_else(|| Error::InvalidArgument(format!("label {label} has no output unit")))?;
    let f = params.feature_dim();
    Ok(class_features(params, class_data)?
        .chunks_exact(f)
        .map(|phi| phi.iter().zip(row).map(|(a, b)| a * b).sum())
        .collect())
}

/// Samples with probability proportional to `1 / max(d, floor)`, favouring
/// examples close to the decision boundary.
pub fn select_plane_distance<R: Rng + ?Sized>(
    params: &ModelParams,
    class_data: &Dataset,
    label: Label,
    m: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    check_request(class_data, m)?;
    let weights: Vec<f64> = plane_distances(params, class_data, label)?
        .into_iter()
        .map(|d| 1.0 / d.max(PLANE_DISTANCE_FLOOR))
        .collect();
    Ok(weighted_sample_without_replacement(&weights, m, rng))
}

/// Shannon entropy of a probability vector with `0 log 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>()
}

pub fn predictive_entropies(params: &ModelParams, class_data: &Dataset) -> Result<Vec<f64>> {
    let k = params.output_labels().len();
    let d = class_data.dim();
    let mut out = Vec::with_capacity(class_data.len());
    for chunk in class_data.inputs().chunks(CHUNK * d) {
        let x: Vec<f64> = chunk.iter().map(|&v| f64::from(v)).collect();
        let cache = nn::forward_rows(params, &x, None)?;
        out.extend(nn::softmax(&cache).chunks_exact(k).map(entropy));
    }
    Ok(out)
}

/// Samples with probability proportional to the predictive entropy.
pub fn select_entropy<R: Rng + ?Sized>(
    params: &ModelParams,
    class_data: &Dataset,
    m: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    check_request(class_data, m)?;
    let weights: Vec<f64> = predictive_entropies(params, class_data)?
        .into_iter()
        .map(|h| h + ENTROPY_FLOOR)
        .collect();
    Ok(weighted_sample_without_replacement(&weights, m, rng))
}

/// Greedy herding over row-major `features` (`[n x f]`): each step adds the
/// example that brings the running exemplar mean closest to the class mean.
/// Ties go to the lowest index.
pub fn herding(features: &[f64], f: usize, m: usize) -> Vec<usize> {
    let n = features.len() / f;
    let m = m.min(n);
    let mut mu = vec![0.0; f];
    for row in features.chunks_exact(f) {
        mu.iter_mut().zip(row).for_each(|(a, b)| *a += b);
    }
    mu.iter_mut().for_each(|v| *v /= n as f64);

    let mut taken = vec![false; n];
    let mut sum = vec![0.0; f];
    let mut picked = Vec::with_capacity(m);
    for step in 1..=m {
        let inv = 1.0 / step as f64;
        let mut best: Option<(usize, f64)> = None;
        for (i, row) in features.chunks_exact(f).enumerate() {
            if taken[i] {
                continue;
            }
            let dist: f64 = (0..f)
                .map(|j| {
                    let diff = mu[j] - (sum[j] + row[j]) * inv;
                    diff * diff
                })
                .sum();
            if best.is_none_or(|(_, d)| dist < d) {
                best = Some((i, dist));
            }
        }
        let (i, _) = best.expect("unselected example remains");
        taken[i] = true;
        picked.push(i);
        let row = &features[i * f..(i + 1) * f];
        sum.iter_mut().zip(row).for_each(|(a, b)| *a += b);
    }
    picked
}

/// Mean-of-features (herding) selection on `phi(x)`. Deterministic.
pub fn select_mof(params: &ModelParams, class_data: &Dataset, m: usize) -> Result<Vec<usize>> {
    check_request(class_data, m)?;
    let feats = class_features(params, class_data)?;
    Ok(herding(&feats, params.feature_dim(), m))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exemplar {
    pub input: Vec<f32>,
    pub label: Label,
}

/// Up to `m` stored exemplars per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodicMemory {
    per_class: BTreeMap<Label, Vec<Exemplar>>,
    m: usize,
    sampler: Sampler,
}

impl EpisodicMemory {
    pub fn new(m: usize, sampler: Sampler) -> Self {
        Self {
            per_class: BTreeMap::new(),
            m,
            sampler,
        }
    }

    pub fn budget(&self) -> usize {
        self.m
    }

    pub fn sampler(&self) -> Sampler {
        self.sampler
    }

    pub fn is_empty(&self) -> bool {
        self.per_class.values().all(Vec::is_empty)
    }

    pub fn len(&self) -> usize {
        self.per_class.values().map(Vec::len).sum()
    }

    pub fn classes(&self) -> impl Iterator<Item = Label> + '_ {
        self.per_class.keys().copied()
    }

    pub fn exemplars(&self, label: Label) -> &[Exemplar] {
        self.per_class.get(&label).map_or(&[], Vec::as_slice)
    }

    /// Selects and stores exemplars for `label` from the examples of that class.
    pub fn select_class<R: Rng + ?Sized>(
        &mut self,
        params: &ModelParams,
        class_data: &Dataset,
        label: Label,
        rng: &mut R,
    ) -> Result<()> {
        if self.m == 0 {
            return Ok(());
        }
        if self.per_class.contains_key(&label) {
            return Err(Error::InvalidArgument(format!(
                "class {label} already has exemplars"
            )));
        }
        if class_data.labels().iter().any(|&l| l != label) {
            return Err(Error::InvalidArgument(format!(
                "selection data for class {label} contains other labels"
            )));
        }
        let idx = match self.sampler {
            Sampler::Uniform => select_uniform(class_data, self.m, rng)?,
            Sampler::PlaneDistance => {
                select_plane_distance(params, class_data, label, self.m, rng)?
            }
            Sampler::Entropy => select_entropy(params, class_data, self.m, rng)?,
            Sampler::Mof => select_mof(params, class_data, self.m)?,
        };
        let stored = idx
            .into_iter()
            .map(|i| Exemplar {
                input: class_data.row(i).to_vec(),
                label,
            })
            .collect();
        self.per_class.insert(label, stored);
        Ok(())
    }
}

/// Current task data followed by every stored exemplar.
pub fn replay_union(memory: &EpisodicMemory, current: &Dataset) -> Result<Dataset> {
    let mut out = current.clone();
    for ex in memory.per_class.values().flatten() {
        out.push(&ex.input, ex.label)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use crate::nn::{DenseLayer, Init};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn class(n: usize, label: Label) -> Dataset {
        let inputs = (0..n).map(|i| i as f32 / n as f32).collect();
        Dataset::new(inputs, vec![label; n], 1, Split::Train).unwrap()
    }

    #[test]
    fn uniform_budget_and_determinism() {
        let d = class(3, 0);
        assert_eq!(select_uniform(&d, 5, &mut rng(0)).unwrap(), vec![0, 1, 2]);
        let d = class(50, 0);
        let a = select_uniform(&d, 10, &mut rng(4)).unwrap();
        let b = select_uniform(&d, 10, &mut rng(4)).unwrap();
        assert_eq!(a, b);
        let mut s = a.clone();
        s.sort();
        s.dedup();
        assert_eq!(s.len(), 10);
        let empty = Dataset::empty(1, Split::Train);
        assert!(matches!(
            select_uniform(&empty, 1, &mut rng(0)),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn uniform_frequencies() {
        let d = class(10, 0);
        let mut counts = [0usize; 10];
        let mut r = rng(17);
        let trials = 10_000;
        for _ in 0..trials {
            counts[select_uniform(&d, 1, &mut r).unwrap()[0]] += 1;
        }
        for c in counts {
            let freq = c as f64 / trials as f64;
            assert!((freq - 0.1).abs() <= 0.01, "{freq}");
        }
    }

    /// Diagonal hidden layer so that phi(x) = relu(diag(scale) x).
    fn scaled_feature_model(scale: [f64; 2], w_row: [f64; 2]) -> ModelParams {
        ModelParams::from_layers(
            &[
                DenseLayer {
                    inputs: 2,
                    outputs: 2,
                    weights: vec![scale[0], 0.0, 0.0, scale[1]],
                    bias: vec![0.0, 0.0],
                },
                DenseLayer {
                    inputs: 2,
                    outputs: 2,
                    weights: vec![w_row[0], w_row[1], 0.0, 0.0],
                    bias: vec![0.0, 0.0],
                },
            ],
            &[3, 4],
        )
        .unwrap()
    }

    fn two_feature_model(w_row: [f64; 2]) -> ModelParams {
        scaled_feature_model([1.0, 1.0], w_row)
    }

    #[test]
    fn plane_distance_is_dot_product() {
        // phi(x) = (1, 2), w = (0.5, 0.5)
        let p = scaled_feature_model([1.0, 2.0], [0.5, 0.5]);
        let d = Dataset::new(vec![1.0, 1.0], vec![3], 2, Split::Train).unwrap();
        assert_eq!(plane_distances(&p, &d, 3).unwrap(), vec![1.5]);
        assert!(matches!(
            plane_distances(&p, &d, 9),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn plane_distance_prefers_small_distance() {
        // d = 1/4 and 3/4 through w = (1, 0): probability ratio 3:1
        let p = two_feature_model([1.0, 0.0]);
        let d = Dataset::new(vec![0.25, 0.0, 0.75, 0.0], vec![3, 3], 2, Split::Train).unwrap();
        let mut r = rng(5);
        let trials = 20_000;
        let near = (0..trials)
            .filter(|_| select_plane_distance(&p, &d, 3, 1, &mut r).unwrap()[0] == 0)
            .count();
        let freq = near as f64 / trials as f64;
        assert!((freq - 0.75).abs() < 0.015, "{freq}");
    }

    #[test]
    fn nonpositive_distance_is_most_likely() {
        let p = two_feature_model([-1.0, 0.0]);
        let d = Dataset::new(vec![0.5, 0.0, 0.0, 0.5], vec![3, 3], 2, Split::Train).unwrap();
        // both distances are <= 0 and clamp to the floor: equal odds
        let dist = plane_distances(&p, &d, 3).unwrap();
        assert!(dist[0] < 0.0 && dist[1] == 0.0);
        let p = two_feature_model([1.0, 0.0]);
        let d = Dataset::new(vec![0.0, 0.5, 1.0, 0.0], vec![3, 3], 2, Split::Train).unwrap();
        let mut r = rng(9);
        let hits = (0..1000)
            .filter(|_| select_plane_distance(&p, &d, 3, 1, &mut r).unwrap()[0] == 0)
            .count();
        assert!(hits > 990, "{hits}");
    }

    #[test]
    fn entropy_values() {
        let k = 5;
        let uniform = vec![1.0 / k as f64; k];
        assert!((entropy(&uniform) - (k as f64).ln()).abs() < 1e-12);
        assert_eq!(entropy(&[1.0, 0.0, 0.0]), 0.0);
    }

    #[test]
    fn entropy_selection_prefers_uncertain() {
        // output logits = (20 x0, 0): x0 = 0 gives H = ln 2, x0 = 1 gives H ~ 0
        let p = ModelParams::from_layers(
            &[DenseLayer {
                inputs: 1,
                outputs: 2,
                weights: vec![40.0, 0.0],
                bias: vec![0.0, 0.0],
            }],
            &[0, 1],
        )
        .unwrap();
        let d = Dataset::new(vec![0.0, 1.0], vec![0, 0], 1, Split::Train).unwrap();
        let h = predictive_entropies(&p, &d).unwrap();
        assert!((h[0] - 2f64.ln()).abs() < 1e-12 && h[1] < 1e-12);
        let mut r = rng(3);
        let high = (0..2000)
            .filter(|_| select_entropy(&p, &d, 1, &mut r).unwrap()[0] == 0)
            .count();
        assert!(high > 1990, "{high}");
    }

    #[test]
    fn herding_first_pick_is_nearest_to_mean() {
        let feats = [0.0, 0.0, 2.0, 0.0, 1.0, 0.0];
        assert_eq!(herding(&feats, 2, 1), vec![2]);
        assert_eq!(herding(&feats, 2, 9).len(), 3);
    }

    #[test]
    fn memory_respects_budget_and_replays() {
        let mut r = rng(1);
        let p = ModelParams::new(1, &[3], &[0, 1], Init::HE, &mut r).unwrap();
        let mut mem = EpisodicMemory::new(10, Sampler::Mof);
        mem.select_class(&p, &class(40, 0), 0, &mut r).unwrap();
        mem.select_class(&p, &class(40, 1), 1, &mut r).unwrap();
        assert_eq!(mem.exemplars(0).len(), 10);
        assert!(mem.select_class(&p, &class(40, 1), 1, &mut r).is_err());

        let current = class(25, 2);
        let union = replay_union(&mem, &current).unwrap();
        assert_eq!(union.len(), 25 + 20);
        assert_eq!(
            union.label_set().into_iter().collect::<Vec<_>>(),
            vec![0, 1, 2]
        );

        let empty = EpisodicMemory::new(0, Sampler::Uniform);
        assert_eq!(replay_union(&empty, &current).unwrap(), current);
    }
}
