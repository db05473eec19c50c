//! Synthetic datasets and per-epoch sharding.
//!
//! Every epoch draws one global permutation of the sample indices and cuts it
//! into `k` contiguous shards, one per worker. Each shard has `N / k` samples;
//! the `N mod k` remainder at the tail of the permutation is dropped, so the
//! distributed and gradient-accumulation runs see identical sample streams.

use std::io::Write;

use crate::error::{Error, Result};
use crate::models::Batch;
use crate::numerics::{epoch_key, fisher_yates, Rng, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub seed: u64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.shape()[1]
    }

    /// Gather the given rows into a batch.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let dim = self.dim();
        let mut data = Vec::with_capacity(indices.len() * dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.inputs.data()[i * dim..(i + 1) * dim]);
            labels.push(self.labels[i]);
        }
        Batch::new(Tensor::new(data, vec![indices.len(), dim])?, labels)
    }

    pub fn full_batch(&self) -> Result<Batch> {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.batch(&idx)
    }

    /// Copy with every input rounded to the nearest integer. Integer-valued
    /// inputs make sums of gradient contributions exact in many settings.
    pub fn rounded(&self) -> Dataset {
        let mut out = self.clone();
        out.inputs
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = v.round());
        out
    }

    /// The first `n` samples and the rest, as two datasets.
    pub fn split_at(&self, n: usize) -> Result<(Dataset, Dataset)> {
        let head: Vec<usize> = (0..n.min(self.len())).collect();
        let tail: Vec<usize> = (n.min(self.len())..self.len()).collect();
        let part = |idx: &[usize]| -> Result<Dataset> {
            let dim = self.dim();
            let mut data = Vec::with_capacity(idx.len() * dim);
            for &i in idx {
                data.extend_from_slice(&self.inputs.data()[i * dim..(i + 1) * dim]);
            }
            Ok(Dataset {
                inputs: Tensor::new(data, vec![idx.len(), dim])?,
                labels: idx.iter().map(|&i| self.labels[i]).collect(),
                seed: self.seed,
            })
        };
        Ok((part(&head)?, part(&tail)?))
    }

    /// Write `label,x0,x1,...` rows with a header line.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let dim = self.dim();
        let header: Vec<String> = std::iter::once("label".to_string())
            .chain((0..dim).map(|i| format!("x{i}")))
            .collect();
        writeln!(out, "{}", header.join(","))?;
        for (row, label) in self.inputs.data().chunks(dim).zip(&self.labels) {
            write!(out, "{label}")?;
            for v in row {
                write!(out, ",{v:e}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// Gaussian clusters, one per class. Class centers are random unit directions
/// scaled by `separation`; samples add unit-variance isotropic noise. Label
/// `i` is `i mod classes`, so classes are balanced up to rounding.
pub fn make_synthetic(
    seed: u64,
    n: usize,
    dim: usize,
    classes: usize,
    separation: f64,
) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::config("data.samples", "must be at least 1"));
    }
    if dim == 0 {
        return Err(Error::config("data.dim", "must be at least 1"));
    }
    if classes == 0 {
        return Err(Error::config("data.classes", "must be at least 1"));
    }
    let mut rng = Rng::new(seed);
    let mut centers = Vec::with_capacity(classes * dim);
    for _ in 0..classes {
        let dir: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let norm = dir
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
            .max(f64::MIN_POSITIVE);
        centers.extend(dir.iter().map(|v| separation * v / norm));
    }
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        for d in 0..dim {
            data.push(centers[c * dim + d] + rng.normal());
        }
        labels.push(c);
    }
    Ok(Dataset {
        inputs: Tensor::new(data, vec![n, dim])?,
        labels,
        seed,
    })
}

/// Sample indices assigned to each worker for one epoch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpochPlan {
    pub epoch: usize,
    pub shards: Vec<Vec<usize>>,
}

impl EpochPlan {
    pub fn workers(&self) -> usize {
        self.shards.len()
    }

    /// Number of full `n`-sized minibatches every worker gets this epoch.
    pub fn iterations(&self, n: usize) -> usize {
        self.shards.iter().map(|s| s.len() / n).min().unwrap_or(0)
    }

    /// Indices of worker `j`'s `iter`-th minibatch.
    pub fn batch_indices(&self, worker: usize, iter: usize, n: usize) -> &[usize] {
        &self.shards[worker][iter * n..(iter + 1) * n]
    }

    /// Every index consumed by full minibatches this epoch, worker by worker.
    pub fn consumed(&self, n: usize) -> Vec<usize> {
        let iters = self.iterations(n);
        self.shards
            .iter()
            .flat_map(|s| s[..iters * n].iter().copied())
            .collect()
    }
}

/// One shared shuffle for the epoch, split into `k` contiguous parts.
pub fn epoch_shards(seed: u64, epoch: usize, n: usize, k: usize) -> Result<EpochPlan> {
    check_split(n, k)?;
    let perm = fisher_yates(epoch_key(seed, epoch as u64), n);
    let part = n / k;
    let shards = perm[..part * k]
        .chunks(part)
        .map(<[usize]>::to_vec)
        .collect();
    Ok(EpochPlan { epoch, shards })
}

/// Deliberately wrong sharding: every worker shuffles with its own seed and
/// takes its slot of its private permutation. Shards overlap and the epoch no
/// longer covers the dataset exactly once.
pub fn independent_worker_shards(seed: u64, epoch: usize, n: usize, k: usize) -> Result<EpochPlan> {
    check_split(n, k)?;
    let part = n / k;
    let shards = (0..k)
        .map(|j| {
            let worker_seed = seed.wrapping_add((j as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03));
            let perm = fisher_yates(epoch_key(worker_seed, epoch as u64), n);
            perm[j * part..(j + 1) * part].to_vec()
        })
        .collect();
    Ok(EpochPlan { epoch, shards })
}

fn check_split(n: usize, k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::config("engine.k", "must be at least 1"));
    }
    if k > n {
        return Err(Error::TooManyWorkers { k, n });
    }
    Ok(())
}

/// Consecutive non-overlapping windows of `n`; a trailing partial window is dropped.
pub fn minibatches(shard: &[usize], n: usize) -> Vec<&[usize]> {
    assert!(n >= 1, "minibatch size must be positive");
    shard.chunks_exact(n).collect()
}

/// Whether the plan's workers together consume the same multiset of samples
/// as a single worker walking the same seed's permutation, restricted to the
/// positions a correct `k`-way split would hand out (shard tails that do not
/// fill a whole minibatch are excluded on both sides).
pub fn epoch_consistent(plan: &EpochPlan, seed: u64, n_samples: usize, n: usize) -> Result<bool> {
    let k = plan.workers();
    let single = epoch_shards(seed, plan.epoch, n_samples, 1)?;
    let part = n_samples / k.max(1);
    let used = plan.iterations(n) * n;
    let mut reference: Vec<usize> = (0..k)
        .flat_map(|j| single.shards[0][j * part..j * part + used].iter().copied())
        .collect();
    let mut multi = plan.consumed(n);
    multi.sort_unstable();
    reference.sort_unstable();
    Ok(multi == reference)
}
