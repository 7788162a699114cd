//! Pseudo-labels for unlabelled target pixels: a class-agnostic confidence cut
//! and class-wise thresholds taken at a fixed rank of each class's confidence set.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::datagen::{LabelMaps, IGNORE};
use crate::error::{Error, Result};
use crate::model::SegModel;
use crate::nn::resize_labels_nearest;
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Confidence used for the contrast stage and for naive self-training.
pub const CONTRAST_THRESHOLD: f64 = 0.9;

/// Per-pixel argmax class (1-based) and its probability.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelMap {
    pub n: usize,
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
    pub confidence: Vec<f64>,
}

impl PseudoLabelMap {
    /// Labels resampled to another resolution by nearest neighbour.
    pub fn resized_labels(&self, height: usize, width: usize) -> Vec<u8> {
        resize_labels_nearest(&self.labels, self.n, (self.height, self.width), (height, width))
    }

    pub fn labeled_pixels(&self) -> usize {
        self.labels.iter().filter(|&&l| l != IGNORE).count()
    }

    pub fn into_label_maps(self) -> LabelMaps {
        LabelMaps { n: self.n, height: self.height, width: self.width, data: self.labels }
    }
}

/// Argmax over channels at every pixel; ties go to the lowest class. Pixels with
/// non-finite probabilities get label [`IGNORE`] and confidence `NaN`.
pub fn argmax_confidence<T: Real>(probs: &Tensor<T>) -> PseudoLabelMap {
    let hw = probs.plane_len();
    let mut labels = Vec::with_capacity(probs.n * hw);
    let mut confidence = Vec::with_capacity(probs.n * hw);
    for n in 0..probs.n {
        let img = probs.image(n);
        for i in 0..hw {
            let mut best = 0;
            let mut best_p = img[i];
            let mut finite = best_p.is_finite();
            for k in 1..probs.c {
                let p = img[k * hw + i];
                finite &= p.is_finite();
                if p > best_p {
                    best = k;
                    best_p = p;
                }
            }
            if finite {
                labels.push(best as u8 + 1);
                confidence.push(best_p.as_f64());
            } else {
                labels.push(IGNORE);
                confidence.push(f64::NAN);
            }
        }
    }
    PseudoLabelMap { n: probs.n, height: probs.h, width: probs.w, labels, confidence }
}

/// Keeps the argmax class wherever its probability is at least `threshold`.
pub fn fixed_threshold_labels<T: Real>(probs: &Tensor<T>, threshold: f64) -> Result<PseudoLabelMap> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!("threshold must lie in (0, 1), got {threshold}")));
    }
    let mut map = argmax_confidence(probs);
    for (l, &c) in map.labels.iter_mut().zip(&map.confidence) {
        if !(c >= threshold) {
            *l = IGNORE;
        }
    }
    Ok(map)
}

/// Per-class confidences of argmax-assigned pixels, sorted non-increasing.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceSet {
    per_class: Vec<Vec<f64>>,
}

impl ConfidenceSet {
    /// Sorts raw per-class confidence lists.
    pub fn from_unsorted(mut per_class: Vec<Vec<f64>>) -> Self {
        for list in &mut per_class {
            list.sort_by(|a, b| b.total_cmp(a));
        }
        Self { per_class }
    }

    pub fn num_classes(&self) -> usize {
        self.per_class.len()
    }

    /// Confidences of class index `k` (label `k + 1`).
    pub fn class(&self, k: usize) -> &[f64] {
        &self.per_class[k]
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.per_class.iter().map(Vec::len).collect()
    }

    pub fn total(&self) -> usize {
        self.per_class.iter().map(Vec::len).sum()
    }

    /// Exact merge of sets built from disjoint shards of a stream.
    pub fn merge(sets: &[ConfidenceSet]) -> Result<Self> {
        let first = sets.first().ok_or(Error::Empty("no confidence sets to merge"))?;
        let num_classes = first.num_classes();
        if sets.iter().any(|s| s.num_classes() != num_classes) {
            return Err(Error::Shape("confidence sets disagree on class count".into()));
        }
        let per_class = (0..num_classes)
            .map(|k| {
                sets.iter().fold(Vec::new(), |acc, s| merge_descending(&acc, s.class(k)))
            })
            .collect();
        Ok(Self { per_class })
    }
}

fn merge_descending(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        if a[i] >= b[j] {
            out.push(a[i]);
            i += 1;
        } else {
            out.push(b[j]);
            j += 1;
        }
    }
    out.extend_from_slice(&a[i..]);
    out.extend_from_slice(&b[j..]);
    out
}

/// Streams probability maps into a [`ConfidenceSet`].
#[derive(Clone, Debug)]
pub struct ConfidenceSetBuilder {
    per_class: Vec<Vec<f64>>,
    scanned: usize,
}

impl ConfidenceSetBuilder {
    pub fn new(num_classes: usize) -> Self {
        Self { per_class: vec![Vec::new(); num_classes], scanned: 0 }
    }

    pub fn push<T: Real>(&mut self, probs: &Tensor<T>) -> Result<()> {
        if probs.c != self.per_class.len() {
            return Err(Error::Shape(format!(
                "probability maps with {} channels for {} classes",
                probs.c,
                self.per_class.len()
            )));
        }
        let map = argmax_confidence(probs);
        for (&l, &c) in map.labels.iter().zip(&map.confidence) {
            if l != IGNORE {
                self.per_class[l as usize - 1].push(c);
            }
        }
        self.scanned += probs.n;
        Ok(())
    }

    pub fn finish(self) -> Result<ConfidenceSet> {
        if self.scanned == 0 {
            return Err(Error::Empty("confidence sets need at least one image"));
        }
        Ok(ConfidenceSet::from_unsorted(self.per_class))
    }
}

/// One inference pass of `model` over the target stream.
pub fn build_confidence_sets<T, I>(model: &SegModel<T>, batches: I) -> Result<ConfidenceSet>
where
    T: Real,
    I: IntoIterator<Item = Tensor<T>>,
{
    let mut builder = ConfidenceSetBuilder::new(model.config.num_classes);
    for images in batches {
        let (_, probs) = model.predict(&images)?;
        builder.push(&probs)?;
    }
    builder.finish()
}

/// Class-wise thresholds; `None` marks classes with an empty confidence set.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ThresholdTable {
    pub eta: f64,
    pub thresholds: Vec<Option<f64>>,
}

impl ThresholdTable {
    /// The same cut for every class.
    pub fn uniform(threshold: f64, num_classes: usize) -> Self {
        Self { eta: f64::NAN, thresholds: vec![Some(threshold); num_classes] }
    }

    /// Applies the table: a pixel keeps its argmax class when its confidence
    /// reaches that class's threshold; unavailable classes are ignored.
    pub fn apply<T: Real>(&self, probs: &Tensor<T>) -> Result<PseudoLabelMap> {
        if probs.c != self.thresholds.len() {
            return Err(Error::Shape(format!(
                "{} thresholds for {} channels",
                self.thresholds.len(),
                probs.c
            )));
        }
        let mut map = argmax_confidence(probs);
        for (l, &c) in map.labels.iter_mut().zip(&map.confidence) {
            if *l == IGNORE {
                continue;
            }
            match self.thresholds[*l as usize - 1] {
                Some(t) if c >= t => {}
                _ => *l = IGNORE,
            }
        }
        Ok(map)
    }
}

/// Rank index kept for a class of `len` pixels: `max(1, ⌈η·len⌉)`.
pub fn keep_rank(eta: f64, len: usize) -> usize {
    (libm::ceil(eta * len as f64) as usize).clamp(1, len.max(1))
}

/// `t_c = θ_c[k − 1]` with `k = max(1, ⌈η·l_c⌉)`: keep the most confident `η` fraction.
pub fn adaptive_thresholds(sets: &ConfidenceSet, eta: f64) -> Result<ThresholdTable> {
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(Error::Config(format!("eta must lie in (0, 1], got {eta}")));
    }
    let thresholds = (0..sets.num_classes())
        .map(|k| {
            let list = sets.class(k);
            (!list.is_empty()).then(|| list[keep_rank(eta, list.len()) - 1])
        })
        .collect();
    Ok(ThresholdTable { eta, thresholds })
}

/// Labels every image of the stream with `table`. Output is in the on-disk label format.
pub fn generate_pseudo_labels<T, I>(model: &SegModel<T>, batches: I, table: &ThresholdTable) -> Result<LabelMaps>
where
    T: Real,
    I: IntoIterator<Item = Tensor<T>>,
{
    let mut out: Option<LabelMaps> = None;
    for images in batches {
        let (_, probs) = model.predict(&images)?;
        let map = table.apply(&probs)?;
        match out.as_mut() {
            None => out = Some(map.into_label_maps()),
            Some(acc) => {
                acc.n += map.n;
                acc.data.extend_from_slice(&map.labels);
            }
        }
    }
    out.ok_or(Error::Empty("pseudo-labelling needs at least one image"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_class_probs(conf: &[f64]) -> Tensor<f64> {
        let mut data: Vec<f64> = conf.to_vec();
        data.extend(conf.iter().map(|c| 1.0 - c));
        Tensor::from_vec(1, 2, 1, conf.len(), data)
    }

    #[test]
    fn fixed_threshold_boundary_is_inclusive() {
        let map = fixed_threshold_labels(&two_class_probs(&[0.95, 0.9, 0.85]), 0.9).unwrap();
        assert_eq!(map.labels, vec![1, 1, IGNORE]);
        assert!(fixed_threshold_labels(&two_class_probs(&[0.5]), 1.0).is_err());
    }

    #[test]
    fn confidence_set_lengths() {
        // argmax map [[1,2],[2,2]]
        let probs = Tensor::from_vec(1, 2, 2, 2, vec![0.7, 0.2, 0.4, 0.1, 0.3, 0.8, 0.6, 0.9]);
        let mut b = ConfidenceSetBuilder::new(2);
        b.push(&probs).unwrap();
        let set = b.finish().unwrap();
        assert_eq!(set.lengths(), vec![1, 3]);
        assert_eq!(set.class(1), &[0.9, 0.8, 0.6]);
        assert!(ConfidenceSetBuilder::new(2).finish().is_err());
    }

    #[test]
    fn rank_threshold_hand_case() {
        let set = ConfidenceSet::from_unsorted(vec![vec![0.4, 0.95, 0.6, 0.8, 0.9]]);
        let t = adaptive_thresholds(&set, 0.6).unwrap();
        assert_eq!(t.thresholds, vec![Some(0.8)]);
        assert_eq!(adaptive_thresholds(&set, 1.0).unwrap().thresholds, vec![Some(0.4)]);
        let single = ConfidenceSet::from_unsorted(vec![vec![0.3], vec![]]);
        for eta in [0.01, 0.5, 1.0] {
            assert_eq!(adaptive_thresholds(&single, eta).unwrap().thresholds, vec![Some(0.3), None]);
        }
        assert!(adaptive_thresholds(&set, 0.0).is_err());
        assert!(adaptive_thresholds(&set, 1.1).is_err());
    }

    #[test]
    fn apply_compares_against_argmax_class() {
        let table = ThresholdTable { eta: 0.6, thresholds: vec![Some(0.8), None] };
        let map = table.apply(&two_class_probs(&[0.85, 0.79, 0.1])).unwrap();
        assert_eq!(map.labels, vec![1, IGNORE, IGNORE]);
    }

    #[test]
    fn merge_is_exact() {
        let a = ConfidenceSet::from_unsorted(vec![vec![0.9, 0.1], vec![0.5]]);
        let b = ConfidenceSet::from_unsorted(vec![vec![0.5, 0.95], vec![]]);
        let m = ConfidenceSet::merge(&[a, b]).unwrap();
        assert_eq!(m.class(0), &[0.95, 0.9, 0.5, 0.1]);
        assert_eq!(m.class(1), &[0.5]);
    }
}
