//! MNIST ingestion and construction of heterogeneous client populations.

pub mod idx;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Batch;
use crate::seed;

pub use idx::{load_idx_images, load_idx_labels, IdxImages};

pub const CLASSES: usize = 10;

const TAG_VALIDATION: u64 = 0x0076_616c;
const TAG_PARTITION: u64 = 0x7061_7274;
const TAG_TEST: u64 = 0x7465_7374;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Validation,
}

/// Images stored as raw bytes; [`Dataset::batch`] maps them to `pixel / 255`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pixels: Vec<u8>,
    labels: Vec<u8>,
    dim: usize,
    split: Split,
}

impl Dataset {
    pub fn new(pixels: Vec<u8>, labels: Vec<u8>, dim: usize, split: Split) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Data("dataset is empty".into()));
        }
        if dim == 0 || pixels.len() != labels.len() * dim {
            return Err(Error::Data(format!(
                "{} pixels cannot hold {} samples of dimension {dim}",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&y| usize::from(y) >= CLASSES) {
            return Err(Error::Data(format!("label {bad} outside [0, {CLASSES})")));
        }
        Ok(Dataset {
            pixels,
            labels,
            dim,
            split,
        })
    }

    pub fn from_idx(images: IdxImages, labels: Vec<u8>, split: Split) -> Result<Self> {
        if images.count != labels.len() {
            return Err(Error::Data(format!(
                "{} images but {} labels",
                images.count,
                labels.len()
            )));
        }
        let dim = images.pixel_dim();
        Dataset::new(images.pixels, labels, dim, split)
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

    pub fn label(&self, i: usize) -> u8 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Samples at `indices`, in order, as a normalized batch.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::Data(format!("index {bad} outside dataset of {}", self.len())));
        }
        let features = Array2::from_shape_fn((indices.len(), self.dim), |(r, c)| {
            f64::from(self.pixels[indices[r] * self.dim + c]) / 255.0
        });
        let labels = indices.iter().map(|&i| usize::from(self.labels[i])).collect();
        Batch::new(features, labels)
    }

    pub fn full_batch(&self) -> Result<Batch> {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }

    pub fn subset(&self, indices: &[usize], split: Split) -> Result<Dataset> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::Data(format!("index {bad} outside dataset of {}", self.len())));
        }
        let mut pixels = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            pixels.extend_from_slice(&self.pixels[i * self.dim..(i + 1) * self.dim]);
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Dataset::new(pixels, labels, self.dim, split)
    }

    /// Indices of each class, ascending.
    pub fn by_label(&self) -> Vec<Vec<usize>> {
        let mut pools = vec![Vec::new(); CLASSES];
        for (i, &y) in self.labels.iter().enumerate() {
            pools[usize::from(y)].push(i);
        }
        pools
    }

    pub fn label_histogram(&self, indices: &[usize]) -> [usize; CLASSES] {
        let mut counts = [0; CLASSES];
        for &i in indices {
            counts[usize::from(self.labels[i])] += 1;
        }
        counts
    }
}

/// Locations of the four standard MNIST files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MnistPaths {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

impl MnistPaths {
    pub fn in_dir(dir: impl AsRef<Path>) -> Self {
        let dir = dir.as_ref();
        MnistPaths {
            train_images: dir.join("train-images-idx3-ubyte"),
            train_labels: dir.join("train-labels-idx1-ubyte"),
            test_images: dir.join("t10k-images-idx3-ubyte"),
            test_labels: dir.join("t10k-labels-idx1-ubyte"),
        }
    }

    pub fn load_train(&self) -> Result<Dataset> {
        Dataset::from_idx(
            load_idx_images(&self.train_images)?,
            load_idx_labels(&self.train_labels)?,
            Split::Train,
        )
    }

    pub fn load_test(&self) -> Result<Dataset> {
        Dataset::from_idx(
            load_idx_images(&self.test_images)?,
            load_idx_labels(&self.test_labels)?,
            Split::Test,
        )
    }
}

/// Reserves a server-held validation split before any client sharding.
/// Returns `(remaining training pool, validation)`.
pub fn split_validation(data: &Dataset, size: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    if size == 0 || size >= data.len() {
        return Err(Error::config(
            "validation_size",
            format!("must be in [1, {}), got {size}", data.len()),
        ));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut seed::rng(seed, &[TAG_VALIDATION]));
    let mut val = order[..size].to_vec();
    let mut rest = order[size..].to_vec();
    val.sort_unstable();
    rest.sort_unstable();
    Ok((data.subset(&rest, Split::Train)?, data.subset(&val, Split::Validation)?))
}

/// Seeded subset of the test split; `size >= len` keeps everything.
pub fn test_subset(data: &Dataset, size: usize, seed: u64) -> Result<Dataset> {
    if size >= data.len() {
        return Ok(data.clone());
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut seed::rng(seed, &[TAG_TEST]));
    let mut keep = order[..size].to_vec();
    keep.sort_unstable();
    data.subset(&keep, Split::Test)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shard {
    pub owner: usize,
    pub indices: Vec<usize>,
}

impl Shard {
    pub fn size(&self) -> usize {
        self.indices.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SettingKind {
    Statistical,
    Computation,
    Communication,
}

impl std::fmt::Display for SettingKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SettingKind::Statistical => "statistical",
            SettingKind::Computation => "computation",
            SettingKind::Communication => "communication",
        })
    }
}

/// One heterogeneity scenario.
///
/// Only the fields relevant to `kind` are consulted: `label_sets`/`client_sizes` for
/// statistical skew, `per_client` for the balanced settings, `epochs` for computation
/// and `participation` for communication heterogeneity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SettingSpec {
    pub kind: SettingKind,
    pub clients: usize,
    pub label_sets: Vec<Vec<u8>>,
    pub client_sizes: Vec<usize>,
    pub per_client: usize,
    pub epochs: Vec<usize>,
    pub participation: Vec<f64>,
    pub base_epochs: usize,
    pub local_lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

fn cycled<T: Copy>(pattern: &[T], len: usize) -> Vec<T> {
    pattern.iter().copied().cycle().take(len).collect()
}

impl SettingSpec {
    pub fn defaults(kind: SettingKind, clients: usize) -> Self {
        let label_sets = (0..clients)
            .map(|k| vec![((2 * k) % CLASSES) as u8, ((2 * k + 1) % CLASSES) as u8])
            .collect();
        let client_sizes = (0..clients).map(|k| if k == 0 { 4000 } else { 500 }).collect();
        SettingSpec {
            kind,
            clients,
            label_sets,
            client_sizes,
            per_client: 1000,
            epochs: cycled(&[1, 1, 3, 3, 5], clients),
            participation: cycled(&[1.0, 1.0, 0.8, 0.6, 0.4], clients),
            base_epochs: 1,
            local_lr: 0.05,
            batch_size: 32,
            seed: 7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.clients;
        if k == 0 {
            return Err(Error::config("clients", "must be >= 1"));
        }
        let check_len = |field: &str, len: usize| {
            if len != k {
                Err(Error::config(
                    field,
                    format!("has {len} entries but there are {k} clients"),
                ))
            } else {
                Ok(())
            }
        };
        match self.kind {
            SettingKind::Statistical => {
                check_len("label_sets", self.label_sets.len())?;
                check_len("client_sizes", self.client_sizes.len())?;
                if self.label_sets.iter().any(|s| s.is_empty()) {
                    return Err(Error::config("label_sets", "every client needs at least one label"));
                }
                if self.label_sets.iter().flatten().any(|&y| usize::from(y) >= CLASSES) {
                    return Err(Error::config("label_sets", format!("labels must be < {CLASSES}")));
                }
                if self.client_sizes.contains(&0) {
                    return Err(Error::config("client_sizes", "sizes must be >= 1"));
                }
            }
            SettingKind::Computation => check_len("epochs", self.epochs.len())?,
            SettingKind::Communication => check_len("participation", self.participation.len())?,
        }
        if self.kind != SettingKind::Statistical && self.per_client == 0 {
            return Err(Error::config("per_client", "must be >= 1"));
        }
        if self.epochs.contains(&0) || self.base_epochs == 0 {
            return Err(Error::config("epochs", "epoch counts must be >= 1"));
        }
        if let Some(p) = self.participation.iter().find(|p| !(**p > 0.0 && **p <= 1.0)) {
            return Err(Error::config("participation", format!("{p} outside (0, 1]")));
        }
        if !(self.local_lr > 0.0 && self.local_lr.is_finite()) {
            return Err(Error::config("local_lr", "must be > 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        Ok(())
    }
}

/// Label-skewed shards: client `k` draws only from `label_sets[k]`, splitting its size
/// evenly across those labels. Clients sharing a label draw from one shuffled pool, so
/// shards stay disjoint.
pub fn partition_statistical(data: &Dataset, spec: &SettingSpec) -> Result<Vec<Shard>> {
    if spec.kind != SettingKind::Statistical {
        return Err(Error::config(
            "setting",
            format!("expected statistical, got {}", spec.kind),
        ));
    }
    spec.validate()?;
    let mut rng = seed::rng(spec.seed, &[TAG_PARTITION]);
    let mut pools = data.by_label();
    for pool in &mut pools {
        pool.shuffle(&mut rng);
    }
    let mut cursor = [0usize; CLASSES];
    let mut shards = Vec::with_capacity(spec.clients);
    for (owner, (labels, &size)) in spec.label_sets.iter().zip(&spec.client_sizes).enumerate() {
        let distinct: Vec<u8> = labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
        let per = size / distinct.len();
        let extra = size % distinct.len();
        let mut indices = Vec::with_capacity(size);
        for (j, &label) in distinct.iter().enumerate() {
            let want = per + usize::from(j < extra);
            let y = usize::from(label);
            let pool = &pools[y];
            if cursor[y] + want > pool.len() {
                return Err(Error::config(
                    "client_sizes",
                    format!(
                        "client {owner} needs {want} samples of label {label} but only {} remain",
                        pool.len() - cursor[y]
                    ),
                ));
            }
            indices.extend_from_slice(&pool[cursor[y]..cursor[y] + want]);
            cursor[y] += want;
        }
        indices.sort_unstable();
        shards.push(Shard { owner, indices });
    }
    Ok(shards)
}

/// Equal-size stratified shards. Each shard takes `per_client / 10` samples of every
/// class, with the remainder rotated across classes by shard index. A class that runs
/// dry is topped up from whatever samples are left.
pub fn partition_balanced(data: &Dataset, clients: usize, per_client: usize, seed: u64) -> Result<Vec<Shard>> {
    if clients == 0 || per_client == 0 {
        return Err(Error::config("per_client", "clients and per_client must be >= 1"));
    }
    if clients * per_client > data.len() {
        return Err(Error::config(
            "per_client",
            format!(
                "{clients} clients x {per_client} samples exceeds the {} available",
                data.len()
            ),
        ));
    }
    let mut rng = seed::rng(seed, &[TAG_PARTITION]);
    let mut pools = data.by_label();
    for pool in &mut pools {
        pool.shuffle(&mut rng);
    }
    let base = per_client / CLASSES;
    let rem = per_client % CLASSES;
    let mut shards: Vec<Shard> = (0..clients)
        .map(|owner| Shard {
            owner,
            indices: Vec::with_capacity(per_client),
        })
        .collect();
    let mut shortfall = vec![0usize; clients];
    for (k, shard) in shards.iter_mut().enumerate() {
        for (c, pool) in pools.iter_mut().enumerate() {
            let want = base + usize::from((c + CLASSES - k % CLASSES) % CLASSES < rem);
            let take = want.min(pool.len());
            shard.indices.extend(pool.drain(..take));
            shortfall[k] += want - take;
        }
    }
    if shortfall.iter().any(|&s| s > 0) {
        let mut leftover: Vec<usize> = pools.into_iter().flatten().collect();
        leftover.sort_unstable();
        leftover.shuffle(&mut rng);
        let mut it = leftover.into_iter();
        for (shard, &need) in shards.iter_mut().zip(&shortfall) {
            shard.indices.extend(it.by_ref().take(need));
        }
    }
    for shard in &mut shards {
        shard.indices.sort_unstable();
    }
    Ok(shards)
}

pub fn partition(data: &Dataset, spec: &SettingSpec) -> Result<Vec<Shard>> {
    spec.validate()?;
    match spec.kind {
        SettingKind::Statistical => partition_statistical(data, spec),
        SettingKind::Computation | SettingKind::Communication => {
            partition_balanced(data, spec.clients, spec.per_client, spec.seed)
        }
    }
}

/// Simulation knobs for one client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientProfile {
    pub shard: Shard,
    pub epochs: usize,
    pub local_lr: f64,
    pub participation: f64,
    pub batch_size: usize,
}

impl ClientProfile {
    pub fn validate(&self) -> Result<()> {
        if self.shard.indices.is_empty() {
            return Err(Error::Data(format!("client {} has an empty shard", self.shard.owner)));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be >= 1".into()));
        }
        if !(self.local_lr >= 0.0 && self.local_lr.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "local_lr {} must be >= 0",
                self.local_lr
            )));
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "participation {} outside (0, 1]",
                self.participation
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

pub fn make_profiles(spec: &SettingSpec, shards: Vec<Shard>) -> Result<Vec<ClientProfile>> {
    if shards.len() != spec.clients {
        return Err(Error::config(
            "clients",
            format!("{} shards for {} clients", shards.len(), spec.clients),
        ));
    }
    spec.validate()?;
    Ok(shards
        .into_iter()
        .enumerate()
        .map(|(k, shard)| {
            let (epochs, participation) = match spec.kind {
                SettingKind::Statistical => (spec.base_epochs, 1.0),
                SettingKind::Computation => (spec.epochs[k], 1.0),
                SettingKind::Communication => (spec.base_epochs, spec.participation[k]),
            };
            ClientProfile {
                shard,
                epochs,
                local_lr: spec.local_lr,
                participation,
                batch_size: spec.batch_size,
            }
        })
        .collect())
}
