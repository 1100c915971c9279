//! Datasets, client partitioning and attacker sample sets.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Example;
use crate::rng;

/// A labelled dataset with a fixed feature width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    examples: Vec<Example>,
    num_classes: usize,
    feature_dim: usize,
}

impl Dataset {
    pub fn new(examples: Vec<Example>, num_classes: usize) -> Result<Self> {
        let first = examples
            .first()
            .ok_or_else(|| Error::InsufficientData("dataset is empty".into()))?;
        let feature_dim = first.features.len();
        for (i, ex) in examples.iter().enumerate() {
            if ex.features.len() != feature_dim {
                return Err(Error::InvalidConfig(format!(
                    "example {i} has {} features, expected {feature_dim}",
                    ex.features.len()
                )));
            }
            if ex.label >= num_classes {
                return Err(Error::InvalidConfig(format!(
                    "example {i} has label {} >= {num_classes}",
                    ex.label
                )));
            }
            if ex.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    context: "dataset features",
                });
            }
        }
        Ok(Self {
            examples,
            num_classes,
            feature_dim,
        })
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn get(&self, i: usize) -> &Example {
        &self.examples[i]
    }

    /// A new dataset holding `indices` in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Self::new(
            indices.iter().map(|&i| self.examples[i].clone()).collect(),
            self.num_classes,
        )
    }
}

/// Gaussian blobs: `h` class means on the unit sphere in `R^p`, isotropic
/// noise of standard deviation `spread`. Labels cycle `0, 1, .., h-1`.
pub fn synth_dataset(h: usize, p: usize, per_class: usize, spread: f64, seed: u64) -> Result<Dataset> {
    if h < 2 {
        return Err(Error::InvalidConfig("need at least two classes".into()));
    }
    if per_class == 0 || p == 0 {
        return Err(Error::InvalidConfig(
            "per_class and feature dim must be positive".into(),
        ));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::InvalidConfig(format!("spread must be >= 0, got {spread}")));
    }
    let mut rng = rng::stream(seed, "synth-dataset", 0);
    let means: Vec<Vec<f64>> = (0..h)
        .map(|_| loop {
            let v: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x: &f64| x * x).sum::<f64>().sqrt();
            if norm > 1e-9 {
                break v.into_iter().map(|x| x / norm).collect();
            }
        })
        .collect();
    let mut examples = Vec::with_capacity(h * per_class);
    for _ in 0..per_class {
        for (label, mean) in means.iter().enumerate() {
            let features = mean
                .iter()
                .map(|&m| {
                    let z: f64 = rng.sample(StandardNormal);
                    m + spread * z
                })
                .collect();
            examples.push(Example::new(features, label));
        }
    }
    Dataset::new(examples, h)
}

/// Reads `label,f1,..,fp` rows (no header). The class count is the largest
/// label plus one.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let io_err = |e: &dyn std::fmt::Display| Error::Io {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| io_err(&e))?;
    let mut examples = Vec::new();
    let mut width = None;
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| Error::Parse {
            row,
            reason: e.to_string(),
        })?;
        let mut fields = record.iter();
        let label: usize = fields
            .next()
            .and_then(|f| f.trim().parse().ok())
            .ok_or_else(|| Error::Parse {
                row,
                reason: "label is not a non-negative integer".into(),
            })?;
        let features = fields
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse {
                row,
                reason: e.to_string(),
            })?;
        if features.is_empty() || features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse {
                row,
                reason: "need at least one finite feature".into(),
            });
        }
        match width {
            None => width = Some(features.len()),
            Some(w) if w != features.len() => {
                return Err(Error::Parse {
                    row,
                    reason: format!("expected {w} features, found {}", features.len()),
                })
            }
            _ => {}
        }
        examples.push(Example::new(features, label));
    }
    if examples.is_empty() {
        return Err(Error::EmptyFile(path.to_path_buf()));
    }
    let h = examples.iter().map(|e| e.label).max().unwrap_or(0) + 1;
    Dataset::new(examples, h)
}

/// Writes the CSV form read by [`load_csv`]. Floats use the shortest
/// representation that parses back to the same value.
pub fn write_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let io_err = |e: &dyn std::fmt::Display| Error::Io {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let mut writer = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| io_err(&e))?;
    for ex in dataset.examples() {
        let mut row = Vec::with_capacity(ex.features.len() + 1);
        row.push(ex.label.to_string());
        row.extend(ex.features.iter().map(|v| v.to_string()));
        writer.write_record(&row).map_err(|e| io_err(&e))?;
    }
    writer.flush().map_err(|e| io_err(&e))
}

/// Per-client index lists into a dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub shards: Vec<Vec<usize>>,
}

impl Partition {
    pub fn num_clients(&self) -> usize {
        self.shards.len()
    }

    pub fn shard(&self, client: usize) -> &[usize] {
        &self.shards[client]
    }

    fn ensure_non_empty(self) -> Result<Self> {
        if let Some(c) = self.shards.iter().position(Vec::is_empty) {
            return Err(Error::InsufficientData(format!("client {c} received no samples")));
        }
        Ok(self)
    }
}

/// Random permutation split into `n` shards whose sizes differ by at most one.
pub fn partition_iid(dataset: &Dataset, n: usize, seed: u64) -> Result<Partition> {
    if n == 0 || n > dataset.len() {
        return Err(Error::TooManyClients {
            clients: n,
            examples: dataset.len(),
        });
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng::stream(seed, "partition-iid", 0));
    let base = dataset.len() / n;
    let extra = dataset.len() % n;
    let mut shards = Vec::with_capacity(n);
    let mut start = 0;
    for c in 0..n {
        let size = base + usize::from(c < extra);
        shards.push(order[start..start + size].to_vec());
        start += size;
    }
    Partition { shards }.ensure_non_empty()
}

/// Group-assignment probabilities for a sample of label `q`: `beta` for
/// group `q`, `(1 - beta) / (h - 1)` for every other group.
pub fn noniid_group_probabilities(h: usize, q: usize, beta: f64) -> Vec<f64> {
    let other = (1.0 - beta) / (h - 1) as f64;
    (0..h).map(|g| if g == q { beta } else { other }).collect()
}

/// Biased partitioning: clients are split round-robin into `h` groups (client
/// `c` joins group `c % h`). A label-`q` sample goes to group `q` with
/// probability `beta`, otherwise to a uniformly chosen other group, and each
/// group deals its samples round-robin to its clients.
pub fn partition_noniid(dataset: &Dataset, n: usize, beta: f64, seed: u64) -> Result<Partition> {
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(Error::InvalidBeta(beta));
    }
    let h = dataset.num_classes();
    if n < h {
        return Err(Error::TooFewClients {
            clients: n,
            classes: h,
        });
    }
    let mut rng = rng::stream(seed, "partition-noniid", 0);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng);

    let group_clients: Vec<Vec<usize>> = (0..h).map(|g| (g..n).step_by(h).collect()).collect();
    let mut dealt = vec![0usize; h];
    let mut shards = vec![Vec::new(); n];
    for idx in order {
        let q = dataset.get(idx).label;
        let group = assign_group(q, h, beta, &mut rng);
        let members = &group_clients[group];
        shards[members[dealt[group] % members.len()]].push(idx);
        dealt[group] += 1;
    }
    Partition { shards }.ensure_non_empty()
}

fn assign_group<R: Rng>(q: usize, h: usize, beta: f64, rng: &mut R) -> usize {
    if rng.random::<f64>() < beta {
        q
    } else {
        let other = rng.random_range(0..h - 1);
        if other >= q {
            other + 1
        } else {
            other
        }
    }
}

/// The attacker's target and mask samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackerData {
    /// Targets whose membership is inferred.
    pub attack_set: Vec<Example>,
    /// Clean samples used to camouflage the attack gradient.
    pub mask_set: Vec<Example>,
    /// Ground truth: `true` when the target sits in a benign client's shard.
    pub member_flags: Vec<bool>,
}

impl AttackerData {
    pub fn members(&self) -> usize {
        self.member_flags.iter().filter(|&&m| m).count()
    }
}

/// Builds the attacker's sets.
///
/// `ceil(n_attack / 2)` targets are copied from benign shards and the rest
/// from `holdout`, then shuffled together. The mask set comes from the
/// malicious clients' own shards.
pub fn build_attacker_data(
    partition: &Partition,
    dataset: &Dataset,
    holdout: &Dataset,
    malicious: &[usize],
    n_attack: usize,
    n_mask: usize,
    seed: u64,
) -> Result<AttackerData> {
    let mut rng = rng::stream(seed, "attacker-data", 0);
    let malicious: BTreeSet<usize> = malicious.iter().copied().collect();
    let mut benign_pool: Vec<usize> = Vec::new();
    let mut malicious_pool: Vec<usize> = Vec::new();
    for (c, shard) in partition.shards.iter().enumerate() {
        if malicious.contains(&c) {
            malicious_pool.extend(shard);
        } else {
            benign_pool.extend(shard);
        }
    }
    let n_members = n_attack.div_ceil(2);
    let n_non = n_attack / 2;
    if benign_pool.len() < n_members {
        return Err(Error::InsufficientData(format!(
            "{n_members} member targets requested, benign shards hold {}",
            benign_pool.len()
        )));
    }
    if holdout.len() < n_non {
        return Err(Error::InsufficientData(format!(
            "{n_non} non-member targets requested, holdout holds {}",
            holdout.len()
        )));
    }
    if n_mask > 0 && malicious_pool.len() < n_mask {
        return Err(Error::InsufficientData(format!(
            "{n_mask} mask samples requested, malicious shards hold {}",
            malicious_pool.len()
        )));
    }

    benign_pool.shuffle(&mut rng);
    let mut holdout_idx: Vec<usize> = (0..holdout.len()).collect();
    holdout_idx.shuffle(&mut rng);
    let mut targets: Vec<(Example, bool)> = benign_pool[..n_members]
        .iter()
        .map(|&i| (dataset.get(i).clone(), true))
        .chain(
            holdout_idx[..n_non]
                .iter()
                .map(|&i| (holdout.get(i).clone(), false)),
        )
        .collect();
    targets.shuffle(&mut rng);

    malicious_pool.shuffle(&mut rng);
    let mask_set = malicious_pool[..n_mask]
        .iter()
        .map(|&i| dataset.get(i).clone())
        .collect();
    let (attack_set, member_flags) = targets.into_iter().unzip();
    Ok(AttackerData {
        attack_set,
        mask_set,
        member_flags,
    })
}

/// Disjoint train / holdout / test / validation splits of one dataset.
#[derive(Debug, Clone)]
pub struct DataSplits {
    pub train: Dataset,
    pub holdout: Dataset,
    pub test: Dataset,
    pub validation: Dataset,
}

/// Shuffles and cuts `dataset`; fractions apply to holdout, test and
/// validation, the remainder is training data.
pub fn split_dataset(
    dataset: &Dataset,
    holdout_fraction: f64,
    test_fraction: f64,
    validation_fraction: f64,
    seed: u64,
) -> Result<DataSplits> {
    let total = holdout_fraction + test_fraction + validation_fraction;
    if [holdout_fraction, test_fraction, validation_fraction]
        .iter()
        .any(|f| !(*f > 0.0 && *f < 1.0))
        || total >= 1.0
    {
        return Err(Error::InvalidConfig(
            "split fractions must be in (0, 1) and sum below 1".into(),
        ));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng::stream(seed, "split", 0));
    let count = |f: f64| ((dataset.len() as f64) * f).round().max(1.0) as usize;
    let (nh, nt, nv) = (
        count(holdout_fraction),
        count(test_fraction),
        count(validation_fraction),
    );
    if nh + nt + nv >= dataset.len() {
        return Err(Error::InsufficientData("dataset too small to split".into()));
    }
    let holdout = dataset.subset(&order[..nh])?;
    let test = dataset.subset(&order[nh..nh + nt])?;
    let validation = dataset.subset(&order[nh + nt..nh + nt + nv])?;
    let train = dataset.subset(&order[nh + nt + nv..])?;
    Ok(DataSplits {
        train,
        holdout,
        test,
        validation,
    })
}
