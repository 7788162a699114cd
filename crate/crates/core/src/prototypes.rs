//! Class-wise prototype banks: streaming initialisation, strict statistical
//! updating, and mixed source/target updating.
//!
//! Vectors are kept in `f64` regardless of the network's scalar type so that
//! long streams of running means stay exact to well below `1e-6`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::datagen::IGNORE;
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Which representation a bank summarises: extractor features (dim `d`) or class
/// probabilities (dim `C`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Level {
    Feature,
    Output,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank {
    pub level: Level,
    dim: usize,
    vectors: Vec<f64>,
    counts: Vec<u64>,
}

impl PrototypeBank {
    pub fn empty(level: Level, num_classes: usize, dim: usize) -> Self {
        Self { level, dim, vectors: vec![0.0; num_classes * dim], counts: vec![0; num_classes] }
    }

    /// Rebuilds a bank from serialized parts. Rows of classes with zero count are zeroed.
    pub fn from_parts(level: Level, dim: usize, mut vectors: Vec<f64>, counts: Vec<u64>) -> Result<Self> {
        if vectors.len() != counts.len() * dim {
            return Err(Error::Shape(format!(
                "bank of {} classes x dim {dim} cannot hold {} values",
                counts.len(),
                vectors.len()
            )));
        }
        for (k, &n) in counts.iter().enumerate() {
            let row = &mut vectors[k * dim..(k + 1) * dim];
            if n == 0 {
                row.fill(0.0);
            } else if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Shape(format!("non-finite prototype for class {}", k + 1)));
            }
        }
        Ok(Self { level, dim, vectors, counts })
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn raw_vectors(&self) -> &[f64] {
        &self.vectors
    }

    /// Prototype of class index `k` (label `k + 1`), if initialised.
    pub fn vector(&self, k: usize) -> Option<&[f64]> {
        self.is_initialized(k).then(|| &self.vectors[k * self.dim..(k + 1) * self.dim])
    }

    pub fn is_initialized(&self, k: usize) -> bool {
        self.counts[k] > 0
    }

    pub fn initialized_mask(&self) -> Vec<bool> {
        self.counts.iter().map(|&n| n > 0).collect()
    }

    /// Labels (1-based) of classes without a prototype.
    pub fn missing_classes(&self) -> Vec<u8> {
        (0..self.num_classes()).filter(|&k| !self.is_initialized(k)).map(|k| k as u8 + 1).collect()
    }

    pub fn require_complete(&self) -> Result<()> {
        match self.missing_classes().first() {
            Some(&class) => Err(Error::UninitializedClass { class }),
            None => Ok(()),
        }
    }

    /// Running-mean update: `p ← (p·n + p̃·ñ)/(n + ñ)`, `n ← n + ñ` for every class seen in the batch.
    pub fn update_statistical(&mut self, stats: &BatchStats) -> Result<()> {
        self.check_compatible(stats)?;
        for k in 0..self.num_classes() {
            let add = stats.counts[k];
            if add == 0 {
                continue;
            }
            let have = self.counts[k];
            let total = (have + add) as f64;
            let (wa, wb) = (have as f64 / total, add as f64 / total);
            let row = &mut self.vectors[k * self.dim..(k + 1) * self.dim];
            for (p, &q) in row.iter_mut().zip(&stats.centroids[k * self.dim..(k + 1) * self.dim]) {
                *p = if have == 0 { q } else { *p * wa + q * wb };
            }
            self.counts[k] = have + add;
        }
        Ok(())
    }

    fn check_compatible(&self, stats: &BatchStats) -> Result<()> {
        if stats.dim != self.dim || stats.counts.len() != self.num_classes() {
            return Err(Error::Shape(format!(
                "batch statistics ({} classes x {}) do not match bank ({} classes x {})",
                stats.counts.len(),
                stats.dim,
                self.num_classes(),
                self.dim
            )));
        }
        Ok(())
    }
}

/// Per-class means and pixel counts of one mini-batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub dim: usize,
    /// `C × dim`; rows with zero count are zero and meaningless.
    pub centroids: Vec<f64>,
    pub counts: Vec<u64>,
}

impl BatchStats {
    pub fn centroid(&self, k: usize) -> Option<&[f64]> {
        (self.counts[k] > 0).then(|| &self.centroids[k * self.dim..(k + 1) * self.dim])
    }
}

/// Streaming masked sums for prototype initialisation.
#[derive(Clone, Debug)]
pub struct PrototypeAccumulator {
    dim: usize,
    sums: Vec<f64>,
    counts: Vec<u64>,
}

impl PrototypeAccumulator {
    pub fn new(num_classes: usize, dim: usize) -> Self {
        Self { dim, sums: vec![0.0; num_classes * dim], counts: vec![0; num_classes] }
    }

    /// Adds every non-ignored pixel. `labels` must be at the feature map's resolution.
    pub fn push<T: Real>(&mut self, features: &Tensor<T>, labels: &[u8]) -> Result<()> {
        let num_classes = self.counts.len();
        if features.c != self.dim || labels.len() != features.n * features.plane_len() {
            return Err(Error::Shape(format!(
                "features {:?} with {} labels do not fit an accumulator of dim {}",
                features.shape(),
                labels.len(),
                self.dim
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize > num_classes) {
            return Err(Error::Shape(format!("label {bad} exceeds class count {num_classes}")));
        }
        let hw = features.plane_len();
        for n in 0..features.n {
            let img = features.image(n);
            for (i, &l) in labels[n * hw..(n + 1) * hw].iter().enumerate() {
                if l == IGNORE {
                    continue;
                }
                let k = (l - 1) as usize;
                self.counts[k] += 1;
                let sum = &mut self.sums[k * self.dim..(k + 1) * self.dim];
                for (j, s) in sum.iter_mut().enumerate() {
                    *s += img[j * hw + i].as_f64();
                }
            }
        }
        Ok(())
    }

    pub fn into_stats(self) -> BatchStats {
        let mut centroids = self.sums;
        for (k, &n) in self.counts.iter().enumerate() {
            if n > 0 {
                for v in &mut centroids[k * self.dim..(k + 1) * self.dim] {
                    *v /= n as f64;
                }
            }
        }
        BatchStats { dim: self.dim, centroids, counts: self.counts }
    }

    pub fn finish(self, level: Level) -> PrototypeBank {
        let dim = self.dim;
        let stats = self.into_stats();
        PrototypeBank { level, dim, vectors: stats.centroids, counts: stats.counts }
    }
}

/// Masked per-class mean over one batch.
pub fn batch_stats<T: Real>(features: &Tensor<T>, labels: &[u8], num_classes: usize) -> Result<BatchStats> {
    let mut acc = PrototypeAccumulator::new(num_classes, features.c);
    acc.push(features, labels)?;
    Ok(acc.into_stats())
}

/// One-pass initialisation from a stream of `(features, labels at feature resolution)`.
/// Classes never seen stay uninitialised.
pub fn init_from_source<T, I>(level: Level, num_classes: usize, dim: usize, stream: I) -> Result<PrototypeBank>
where
    T: Real,
    I: IntoIterator<Item = (Tensor<T>, Vec<u8>)>,
{
    let mut acc = PrototypeAccumulator::new(num_classes, dim);
    for (features, labels) in stream {
        acc.push(&features, &labels)?;
    }
    Ok(acc.finish(level))
}

fn check_momentum(m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::Config(format!("mixing momentum must lie in [0, 1], got {m}")));
    }
    Ok(())
}

/// Writes `m·source + (1 − m)·target` into `bank` for every class where both
/// estimates exist; classes with only one estimate take that one.
pub fn update_mixed(bank: &mut PrototypeBank, source: &PrototypeBank, target: &PrototypeBank, m: f64) -> Result<()> {
    check_momentum(m)?;
    let dim = bank.dim;
    if source.dim != dim || target.dim != dim || source.num_classes() != bank.num_classes() || target.num_classes() != bank.num_classes() {
        return Err(Error::Shape("mixed update over banks of different shapes".into()));
    }
    for k in 0..bank.num_classes() {
        let row = &mut bank.vectors[k * dim..(k + 1) * dim];
        match (source.vector(k), target.vector(k)) {
            (Some(s), Some(t)) => {
                for ((p, &a), &b) in row.iter_mut().zip(s).zip(t) {
                    *p = m * a + (1.0 - m) * b;
                }
            }
            (Some(only), None) | (None, Some(only)) => row.copy_from_slice(only),
            (None, None) => continue,
        }
        bank.counts[k] = source.counts[k] + target.counts[k];
    }
    Ok(())
}

/// Running per-domain estimates behind the mixed updating scheme.
///
/// The source estimate starts from the initial bank; the target estimate starts
/// empty and accumulates confidently pseudo-labelled target pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct MixedUpdater {
    pub momentum: f64,
    pub source: PrototypeBank,
    pub target: PrototypeBank,
}

impl MixedUpdater {
    pub fn new(initial: &PrototypeBank, momentum: f64) -> Result<Self> {
        check_momentum(momentum)?;
        Ok(Self {
            momentum,
            source: initial.clone(),
            target: PrototypeBank::empty(initial.level, initial.num_classes(), initial.dim),
        })
    }

    pub fn update(&mut self, bank: &mut PrototypeBank, source_stats: &BatchStats, target_stats: &BatchStats) -> Result<()> {
        self.source.update_statistical(source_stats)?;
        self.target.update_statistical(target_stats)?;
        update_mixed(bank, &self.source, &self.target, self.momentum)
    }
}
