use std::fs;

use rwalk_core::data::{load_idx, split_tasks, synthetic_tasks, write_idx};
use rwalk_core::{Dataset, Error, Split, SyntheticSpec};

fn tiny(n: usize) -> Dataset {
    let dim = 6;
    let inputs = (0..n * dim)
        .map(|i| ((i * 37) % 256) as f32 / 255.0)
        .collect();
    let labels = (0..n).map(|i| (i % 4) as u32).collect();
    Dataset::new(inputs, labels, dim, Split::Train).unwrap()
}

#[test]
fn idx_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let ds = tiny(9);
    let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
    write_idx(&ds, 2, 3, &ip, &lp).unwrap();
    let back = load_idx(&ip, &lp, Split::Train).unwrap();
    assert_eq!(back, ds);
    let bytes = fs::read(&ip).unwrap();
    assert_eq!(&bytes[..4], &[0, 0, 8, 3]);
    assert_eq!(&bytes[4..8], &9u32.to_be_bytes());
    assert_eq!(bytes.len(), 16 + 9 * 6);
}

#[test]
fn corrupt_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let ds = tiny(4);
    let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
    write_idx(&ds, 2, 3, &ip, &lp).unwrap();

    let mut bytes = fs::read(&ip).unwrap();
    bytes[3] = 0x01;
    let bad = dir.path().join("bad_magic");
    fs::write(&bad, &bytes).unwrap();
    assert!(matches!(
        load_idx(&bad, &lp, Split::Train),
        Err(Error::Format(_))
    ));

    let bytes = fs::read(&ip).unwrap();
    let short = dir.path().join("short");
    fs::write(&short, &bytes[..bytes.len() - 1]).unwrap();
    assert!(load_idx(&short, &lp, Split::Train).is_err());

    let other = dir.path().join("lab3");
    write_idx(&tiny(3), 2, 3, dir.path().join("img3"), &other).unwrap();
    assert!(matches!(
        load_idx(&ip, &other, Split::Train),
        Err(Error::Consistency(_))
    ));
    assert!(load_idx(dir.path().join("missing"), &lp, Split::Train).is_err());
}

#[test]
fn split_tasks_partitions_by_label() {
    let train = tiny(40);
    let test = tiny(12);
    let stream = split_tasks(&train, &test, &[vec![0, 1], vec![2, 3]]).unwrap();
    assert_eq!(stream.len(), 2);
    assert_eq!(stream.task(2).labels, vec![2, 3]);
    assert!(stream.task(1).train.labels().iter().all(|l| *l < 2));
    assert_eq!(stream.task(1).train.len() + stream.task(2).train.len(), 40);
    assert_eq!(stream.seen_labels(2), vec![0, 1, 2, 3]);
    assert!(split_tasks(&train, &test, &[vec![0, 1], vec![1, 2]]).is_err());
    assert!(split_tasks(&train, &test, &[vec![0, 9]]).is_err());
}

#[test]
fn synthetic_stream_shape_and_determinism() {
    let spec = SyntheticSpec::default();
    let a = synthetic_tasks(&spec).unwrap();
    let b = synthetic_tasks(&spec).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 5);
    for (k, t) in a.tasks().iter().enumerate() {
        assert_eq!(t.labels, vec![2 * k as u32, 2 * k as u32 + 1]);
        assert_eq!(t.train.len(), 800);
        assert_eq!(t.test.len(), 200);
        assert!(t.train.inputs().iter().all(|v| (0.0..=1.0).contains(v)));
    }
    let other = synthetic_tasks(&SyntheticSpec { seed: 1, ..spec }).unwrap();
    assert_ne!(a, other);
}

/// With means `s` apart and unit noise, the Bayes error of a two-class task in
/// the latent space is `Phi(-s/2)`; the nearest-mean rule on squashed inputs
/// (computed in logit space) should land close to it.
#[test]
fn synthetic_nearest_mean_error_matches_bayes_rate() {
    let spec = SyntheticSpec {
        separation: 2.0,
        n_per_class: 4000,
        num_tasks: 1,
        ..SyntheticSpec::default()
    };
    let stream = synthetic_tasks(&spec).unwrap();
    let means = spec.class_means();
    let t = stream.task(1);
    let mut errors = 0usize;
    let n = t.train.len();
    for i in 0..n {
        let z: Vec<f64> = t
            .train
            .row(i)
            .iter()
            .map(|&v| {
                let v = f64::from(v).clamp(1e-7, 1.0 - 1e-7);
                (v / (1.0 - v)).ln()
            })
            .collect();
        let dist = |m: &Vec<f64>| m.iter().zip(&z).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        let pred = if dist(&means[0]) <= dist(&means[1]) {
            0
        } else {
            1
        };
        errors += usize::from(pred != t.train.labels()[i]);
    }
    let rate = errors as f64 / n as f64;
    // Phi(-1) = 0.1587
    assert!((rate - 0.1587).abs() < 0.02, "nearest-mean error {rate}");
}
