//! Datasets, MNIST IDX I/O and task streams.

use std::collections::BTreeSet;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::nn::{Batch, Label};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Examples with features in `[0, 1]`, stored row-major as `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Vec<f32>,
    labels: Vec<Label>,
    dim: usize,
    split: Split,
}

impl Dataset {
    pub fn new(inputs: Vec<f32>, labels: Vec<Label>, dim: usize, split: Split) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument(
                "feature dimension must be > 0".into(),
            ));
        }
        check_len("dataset inputs", inputs.len(), labels.len() * dim)?;
        if let Some(i) = inputs.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument(format!(
                "feature {i} = {} outside [0, 1]",
                inputs[i]
            )));
        }
        Ok(Self {
            inputs,
            labels,
            dim,
            split,
        })
    }

    pub fn empty(dim: usize, split: Split) -> Self {
        Self {
            inputs: Vec::new(),
            labels: Vec::new(),
            dim,
            split,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn inputs(&self) -> &[f32] {
        &self.inputs
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }

    /// All inputs widened to `f64`, `[n x d]`.
    pub fn inputs_f64(&self) -> Vec<f64> {
        self.inputs.iter().map(|&v| f64::from(v)).collect()
    }

    pub fn push(&mut self, input: &[f32], label: Label) -> Result<()> {
        check_len("example", input.len(), self.dim)?;
        self.inputs.extend_from_slice(input);
        self.labels.push(label);
        Ok(())
    }

    /// Rows at `indices`, in that order, as a training batch.
    pub fn gather(&self, indices: &[usize]) -> Result<Batch> {
        let mut inputs = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            inputs.extend(self.row(i).iter().map(|&v| f64::from(v)));
            labels.push(self.labels[i]);
        }
        Batch::new(inputs, labels, self.dim)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut out = Dataset::empty(self.dim, self.split);
        for &i in indices {
            out.inputs.extend_from_slice(self.row(i));
            out.labels.push(self.labels[i]);
        }
        out
    }

    /// Examples whose label is in `labels`, order-preserving.
    pub fn filter_labels(&self, labels: &[Label]) -> Dataset {
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| labels.contains(&self.labels[i]))
            .collect();
        self.subset(&idx)
    }

    pub fn concat(parts: &[&Dataset]) -> Result<Dataset> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("nothing to concatenate".into()))?;
        let mut out = Dataset::empty(first.dim, first.split);
        for p in parts {
            check_len("concatenated dimension", p.dim, first.dim)?;
            out.inputs.extend_from_slice(&p.inputs);
            out.labels.extend_from_slice(&p.labels);
        }
        Ok(out)
    }

    pub fn label_set(&self) -> BTreeSet<Label> {
        self.labels.iter().copied().collect()
    }
}

fn read_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

fn truncated(path: &Path, what: &str) -> Error {
    Error::io(
        path,
        io::Error::new(io::ErrorKind::UnexpectedEof, format!("truncated {what}")),
    )
}

/// Parsed IDX image file: `(count, rows, cols, pixels)`.
fn parse_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = read_u32(bytes, 0).ok_or_else(|| truncated(path, "header"))?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "{}: magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x} (IDX images)",
            path.display()
        )));
    }
    let dims: Vec<usize> = (1..4)
        .map(|i| read_u32(bytes, 4 * i).map(|v| v as usize))
        .collect::<Option<_>>()
        .ok_or_else(|| truncated(path, "header"))?;
    let (n, rows, cols) = (dims[0], dims[1], dims[2]);
    let body = &bytes[16..];
    let need = n * rows * cols;
    if body.len() < need {
        return Err(truncated(path, "pixel data"));
    }
    Ok((n, rows, cols, body[..need].to_vec()))
}

fn parse_labels(bytes: &[u8], path: &Path) -> Result<Vec<Label>> {
    let magic = read_u32(bytes, 0).ok_or_else(|| truncated(path, "header"))?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "{}: magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x} (IDX labels)",
            path.display()
        )));
    }
    let n = read_u32(bytes, 4).ok_or_else(|| truncated(path, "header"))? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(truncated(path, "label data"));
    }
    Ok(body[..n].iter().map(|&b| Label::from(b)).collect())
}

/// Loads an IDX image/label file pair, scaling pixels by `1/255`.
pub fn load_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    split: Split,
) -> Result<Dataset> {
    let ip = images_path.as_ref();
    let lp = labels_path.as_ref();
    let ibytes = fs::read(ip).map_err(|e| Error::io(ip, e))?;
    let lbytes = fs::read(lp).map_err(|e| Error::io(lp, e))?;
    let (n, rows, cols, pixels) = parse_images(&ibytes, ip)?;
    let labels = parse_labels(&lbytes, lp)?;
    if labels.len() != n {
        return Err(Error::Consistency(format!(
            "{} holds {n} images but {} holds {} labels",
            ip.display(),
            lp.display(),
            labels.len()
        )));
    }
    let inputs = pixels.iter().map(|&p| f32::from(p) / 255.0).collect();
    Dataset::new(inputs, labels, rows * cols, split)
}

/// Writes `dataset` as an IDX pair with images shaped `rows x cols`.
pub fn write_idx(
    dataset: &Dataset,
    rows: usize,
    cols: usize,
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<()> {
    check_len("image size", rows * cols, dataset.dim)?;
    let n = dataset.len() as u32;
    let mut img = Vec::with_capacity(16 + dataset.inputs.len());
    for v in [IDX_IMAGES_MAGIC, n, rows as u32, cols as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend(dataset.inputs.iter().map(|&x| (x * 255.0).round() as u8));
    let mut lab = Vec::with_capacity(8 + dataset.len());
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&n.to_be_bytes());
    for &l in &dataset.labels {
        let b = u8::try_from(l)
            .map_err(|_| Error::InvalidArgument(format!("label {l} does not fit in one byte")))?;
        lab.push(b);
    }
    for (path, bytes) in [(images_path.as_ref(), img), (labels_path.as_ref(), lab)] {
        fs::File::create(path)
            .and_then(|mut f| f.write_all(&bytes))
            .map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Loads the four standard MNIST files from `dir`.
pub fn load_mnist(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let d = dir.as_ref();
    let train = load_idx(
        d.join("train-images-idx3-ubyte"),
        d.join("train-labels-idx1-ubyte"),
        Split::Train,
    )?;
    let test = load_idx(
        d.join("t10k-images-idx3-ubyte"),
        d.join("t10k-labels-idx1-ubyte"),
        Split::Test,
    )?;
    Ok((train, test))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    /// 1-based position in the stream.
    pub index: usize,
    pub labels: Vec<Label>,
    pub train: Dataset,
    pub test: Dataset,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskStream {
    tasks: Vec<TaskSpec>,
}

impl TaskStream {
    pub fn new(tasks: Vec<TaskSpec>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for t in &tasks {
            for &l in &t.labels {
                if !seen.insert(l) {
                    return Err(Error::InvalidArgument(format!(
                        "label {l} appears in more than one task"
                    )));
                }
            }
        }
        Ok(Self { tasks })
    }

    pub fn tasks(&self) -> &[TaskSpec] {
        &self.tasks
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Task `k` (1-based).
    pub fn task(&self, k: usize) -> &TaskSpec {
        &self.tasks[k - 1]
    }

    /// Union of the label sets of tasks `1..=k`, in task order.
    pub fn seen_labels(&self, k: usize) -> Vec<Label> {
        self.tasks[..k]
            .iter()
            .flat_map(|t| t.labels.iter().copied())
            .collect()
    }

    pub fn input_dim(&self) -> usize {
        self.tasks.first().map_or(0, |t| t.train.dim())
    }
}

/// Consecutive-digit pairs `{0,1},{2,3},...,{8,9}`.
pub fn mnist_label_groups() -> Vec<Vec<Label>> {
    (0..5).map(|k| vec![2 * k, 2 * k + 1]).collect()
}

/// Partitions train and test data into one task per label group.
pub fn split_tasks(
    train: &Dataset,
    test: &Dataset,
    label_groups: &[Vec<Label>],
) -> Result<TaskStream> {
    let present = train.label_set();
    let mut seen = BTreeSet::new();
    for group in label_groups {
        if group.is_empty() {
            return Err(Error::InvalidArgument("empty label group".into()));
        }
        for &l in group {
            if !seen.insert(l) {
                return Err(Error::InvalidArgument(format!(
                    "label {l} is in more than one group"
                )));
            }
            if !present.contains(&l) {
                return Err(Error::InvalidArgument(format!(
                    "label {l} has no training examples"
                )));
            }
        }
    }
    let tasks = label_groups
        .iter()
        .enumerate()
        .map(|(i, group)| TaskSpec {
            index: i + 1,
            labels: group.clone(),
            train: train.filter_labels(group),
            test: test.filter_labels(group),
        })
        .collect();
    TaskStream::new(tasks)
}

/// Parameters of the Gaussian-blob task generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub num_tasks: usize,
    pub classes_per_task: usize,
    pub dim: usize,
    pub n_per_class: usize,
    /// Distance between any two class means.
    pub separation: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            num_tasks: 5,
            classes_per_task: 2,
            dim: 20,
            n_per_class: 500,
            separation: 6.0,
        }
    }
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if self.num_tasks == 0
            || self.classes_per_task == 0
            || self.dim == 0
            || self.n_per_class == 0
        {
            return Err(Error::InvalidArgument(
                "synthetic counts must all be >= 1".into(),
            ));
        }
        if !(self.separation.is_finite() && self.separation >= 0.0) {
            return Err(Error::InvalidArgument(
                "separation must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.num_tasks * self.classes_per_task
    }

    /// Class means in the latent space, indexed by label. With `dim >= classes`
    /// they sit on scaled coordinate axes and are exactly `separation` apart.
    pub fn class_means(&self) -> Vec<Vec<f64>> {
        let c = self.num_classes();
        let radius = self.separation / std::f64::consts::SQRT_2;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x05ee_d0fc_1a55);
        (0..c)
            .map(|k| {
                let dir: Vec<f64> = if self.dim >= c {
                    (0..self.dim)
                        .map(|i| if i == k { 1.0 } else { 0.0 })
                        .collect()
                } else {
                    let v: Vec<f64> = (0..self.dim).map(|_| rng.sample(StandardNormal)).collect();
                    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                    v.into_iter().map(|x| x / norm).collect()
                };
                dir.into_iter().map(|x| x * radius).collect()
            })
            .collect()
    }
}

/// Logistic squash used to map latent blob samples into `[0, 1]`.
pub fn squash(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Isotropic unit-variance Gaussian blobs, squashed elementwise into `[0, 1]`.
/// Task `k` (0-based) owns labels `k*c .. (k+1)*c`; each class is split 80/20
/// into train and test.
pub fn synthetic_tasks(spec: &SyntheticSpec) -> Result<TaskStream> {
    spec.validate()?;
    let means = spec.class_means();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_train = ((spec.n_per_class as f64) * 0.8).round() as usize;
    let mut tasks = Vec::with_capacity(spec.num_tasks);
    for k in 0..spec.num_tasks {
        let labels: Vec<Label> = (0..spec.classes_per_task)
            .map(|c| (k * spec.classes_per_task + c) as Label)
            .collect();
        let mut train = Dataset::empty(spec.dim, Split::Train);
        let mut test = Dataset::empty(spec.dim, Split::Test);
        for &label in &labels {
            let mean = &means[label as usize];
            for i in 0..spec.n_per_class {
                let x: Vec<f32> = mean
                    .iter()
                    .map(|&m| {
                        let z: f64 = rng.sample(StandardNormal);
                        squash(m + z) as f32
                    })
                    .collect();
                if i < n_train {
                    train.push(&x, label)?;
                } else {
                    test.push(&x, label)?;
                }
            }
        }
        tasks.push(TaskSpec {
            index: k + 1,
            labels,
            train,
            test,
        });
    }
    TaskStream::new(tasks)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(magic: u32, n: u32, r: u32, c: u32, px: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        for x in [magic, n, r, c] {
            v.extend_from_slice(&x.to_be_bytes());
        }
        v.extend_from_slice(px);
        v
    }

    fn idx_labels(n: u32, labels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        v.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        v.extend_from_slice(&n.to_be_bytes());
        v.extend_from_slice(labels);
        v
    }

    #[test]
    fn tiny_idx_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("img");
        let lp = dir.path().join("lab");
        fs::write(&ip, idx_images(2051, 1, 2, 2, &[0, 255, 0, 255])).unwrap();
        fs::write(&lp, idx_labels(1, &[7])).unwrap();
        let ds = load_idx(&ip, &lp, Split::Train).unwrap();
        assert_eq!(ds.inputs(), &[0.0, 1.0, 0.0, 1.0]);
        assert_eq!(ds.labels(), &[7]);
        assert_eq!(ds.dim(), 4);
    }

    #[test]
    fn idx_errors() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("img");
        let lp = dir.path().join("lab");
        fs::write(&ip, idx_images(2049, 1, 2, 2, &[0, 255, 0, 255])).unwrap();
        fs::write(&lp, idx_labels(1, &[7])).unwrap();
        assert!(matches!(
            load_idx(&ip, &lp, Split::Train),
            Err(Error::Format(_))
        ));

        fs::write(&ip, idx_images(2051, 2, 2, 2, &[0; 8])).unwrap();
        assert!(matches!(
            load_idx(&ip, &lp, Split::Train),
            Err(Error::Consistency(_))
        ));

        fs::write(&ip, idx_images(2051, 2, 2, 2, &[0; 5])).unwrap();
        assert!(matches!(
            load_idx(&ip, &lp, Split::Train),
            Err(Error::Io { .. })
        ));

        assert!(matches!(
            load_idx(dir.path().join("missing"), &lp, Split::Train),
            Err(Error::Io { .. })
        ));
    }

    fn toy(labels: &[Label]) -> Dataset {
        let inputs = labels.iter().map(|&l| l as f32 / 10.0).collect();
        Dataset::new(inputs, labels.to_vec(), 1, Split::Train).unwrap()
    }

    #[test]
    fn split_partitions_data() {
        let train = toy(&[0, 1, 2, 3, 1, 0, 3, 2, 2]);
        let test = toy(&[3, 2, 1, 0]);
        let s = split_tasks(&train, &test, &[vec![0, 1], vec![2, 3]]).unwrap();
        assert_eq!(s.task(1).train.labels(), &[0, 1, 1, 0]);
        assert_eq!(s.task(2).train.labels(), &[2, 3, 3, 2, 2]);
        assert_eq!(s.task(2).test.labels(), &[3, 2]);
        assert_eq!(s.seen_labels(2), vec![0, 1, 2, 3]);

        let whole = split_tasks(&train, &test, &[vec![0, 1, 2, 3]]).unwrap();
        assert_eq!(whole.len(), 1);
        assert_eq!(whole.task(1).train, train);

        assert!(matches!(
            split_tasks(&train, &test, &[vec![0, 1], vec![1, 2]]),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            split_tasks(&train, &test, &[vec![0, 9]]),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn synthetic_is_deterministic_and_disjoint() {
        let spec = SyntheticSpec::default();
        let a = synthetic_tasks(&spec).unwrap();
        let b = synthetic_tasks(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 5);
        assert_eq!(a.task(3).labels, vec![4, 5]);
        assert_eq!(a.task(1).train.len(), 2 * 400);
        assert_eq!(a.task(1).test.len(), 2 * 100);
        let c = synthetic_tasks(&SyntheticSpec { seed: 1, ..spec }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn class_means_are_separation_apart() {
        let spec = SyntheticSpec {
            separation: 3.0,
            ..SyntheticSpec::default()
        };
        let m = spec.class_means();
        let d: f64 = m[0]
            .iter()
            .zip(&m[7])
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!((d - 3.0).abs() < 1e-12);
    }
}
