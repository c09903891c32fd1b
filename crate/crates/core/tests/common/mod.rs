//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use rand::Rng;
use unfoldfed::data::idx::{encode_images, encode_labels, IdxImages};
use unfoldfed::data::ClientProfile;
use unfoldfed::data::{Dataset, Shard, Split, CLASSES};
use unfoldfed::federation::{Client, Federation};
use unfoldfed::nn::ModelSpec;
use unfoldfed::seed;

pub const SIDE: usize = 28;

/// MNIST-shaped images: a random template per class plus pixel noise.
pub fn synthetic_images(count: usize, seed: u64) -> (IdxImages, Vec<u8>) {
    let dim = SIDE * SIDE;
    let mut templates_rng = seed::rng(0xC1A55, &[]);
    let templates: Vec<Vec<f64>> = (0..CLASSES)
        .map(|_| {
            (0..dim)
                .map(|_| {
                    if templates_rng.random::<f64>() < 0.2 {
                        220.0
                    } else {
                        10.0
                    }
                })
                .collect()
        })
        .collect();
    let mut rng = seed::rng(seed, &[1]);
    let mut pixels = Vec::with_capacity(count * dim);
    let mut labels = Vec::with_capacity(count);
    for n in 0..count {
        let label = (n % CLASSES) as u8;
        labels.push(label);
        for &t in &templates[label as usize] {
            let v: f64 = t + rng.random_range(-60.0..60.0);
            pixels.push(v.clamp(0.0, 255.0) as u8);
        }
    }
    (
        IdxImages {
            count,
            rows: SIDE,
            cols: SIDE,
            pixels,
        },
        labels,
    )
}

pub fn synthetic_dataset(count: usize, seed: u64, split: Split) -> Dataset {
    let (images, labels) = synthetic_images(count, seed);
    Dataset::from_idx(images, labels, split).unwrap()
}

/// Writes the four standard MNIST files with synthetic content into `dir`.
pub fn write_idx_dir(dir: &Path, train: usize, test: usize) {
    std::fs::create_dir_all(dir).unwrap();
    let (images, labels) = synthetic_images(train, 11);
    std::fs::write(dir.join("train-images-idx3-ubyte"), encode_images(&images)).unwrap();
    std::fs::write(dir.join("train-labels-idx1-ubyte"), encode_labels(&labels)).unwrap();
    let (images, labels) = synthetic_images(test, 12);
    std::fs::write(dir.join("t10k-images-idx3-ubyte"), encode_images(&images)).unwrap();
    std::fs::write(dir.join("t10k-labels-idx1-ubyte"), encode_labels(&labels)).unwrap();
}

/// The real MNIST directory, if one is available locally.
pub fn mnist_dir() -> Option<PathBuf> {
    let candidates = [
        std::env::var_os("UNFOLDFED_DATA").map(PathBuf::from),
        Some(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")),
    ];
    candidates
        .into_iter()
        .flatten()
        .find(|d| d.join("train-images-idx3-ubyte").is_file())
}

pub fn profile(
    owner: usize,
    indices: Vec<usize>,
    epochs: usize,
    lr: f64,
    participation: f64,
    batch: usize,
) -> ClientProfile {
    ClientProfile {
        shard: Shard { owner, indices },
        epochs,
        local_lr: lr,
        participation,
        batch_size: batch,
    }
}

/// A small federation on synthetic data with a narrow MLP.
pub fn small_federation(sizes: &[usize], model: ModelSpec, participation: f64) -> Federation {
    let total: usize = sizes.iter().sum();
    let pool = synthetic_dataset(total, 3, Split::Train);
    let validation = synthetic_dataset(100, 4, Split::Validation);
    let test = synthetic_dataset(200, 5, Split::Test);
    let mut start = 0;
    let profiles = sizes
        .iter()
        .enumerate()
        .map(|(k, &n)| {
            let p = profile(k, (start..start + n).collect(), 1 + k % 2, 0.05, participation, 16);
            start += n;
            p
        })
        .collect();
    Federation::new(model, &pool, profiles, &validation, &test).unwrap()
}

/// `k` clients sharing the exact same shard.
pub fn identical_federation(k: usize, shard: usize, model: ModelSpec) -> Federation {
    let pool = synthetic_dataset(shard, 3, Split::Train);
    let validation = synthetic_dataset(100, 4, Split::Validation);
    let test = synthetic_dataset(200, 5, Split::Test);
    let batch = pool.batch(&(0..shard).collect::<Vec<_>>()).unwrap();
    let clients = (0..k)
        .map(|owner| Client {
            profile: profile(owner, (0..shard).collect(), 1, 0.05, 1.0, 16),
            data: batch.clone(),
        })
        .collect();
    Federation::from_parts(
        model,
        clients,
        validation.full_batch().unwrap(),
        test.full_batch().unwrap(),
    )
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
