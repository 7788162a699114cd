//! Pixel-to-prototype contrastive losses.
//!
//! Each pixel's similarity to the `C` prototypes is turned into a distribution by a
//! temperature-scaled softmax; the loss is the cross-entropy of that distribution
//! against the pixel's (pseudo-)label. The same machinery runs at feature level
//! (extractor outputs vs. feature prototypes) and at output level (class
//! probabilities vs. output prototypes). Prototype vectors are constants here:
//! gradients flow only into the pixel representations.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::datagen::IGNORE;
use crate::error::{Error, Result};
use crate::nn::{matmul_acc, matmul_at_acc};
use crate::prototypes::PrototypeBank;
use crate::scalar::{Real, LOG_CLAMP};
use crate::tensor::Tensor;

/// How a pixel is compared with a prototype.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum SimilarityKind {
    /// Raw dot product `p · f`.
    #[default]
    Dot,
    /// Dot product of L2-normalised vectors.
    Cosine,
}

const NORM_FLOOR: f64 = 1e-12;

/// Which prototype/pixel pairings contribute to the loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct DomainSet {
    pub s2s: bool,
    pub t2s: bool,
}

impl DomainSet {
    pub const BOTH: Self = Self { s2s: true, t2s: true };

    pub fn any(&self) -> bool {
        self.s2s || self.t2s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct LevelSet {
    pub feature: bool,
    pub output: bool,
}

impl LevelSet {
    pub const BOTH: Self = Self { feature: true, output: true };

    pub fn any(&self) -> bool {
        self.feature || self.output
    }
}

fn prototype_matrix<T: Real>(bank: &PrototypeBank, kind: SimilarityKind) -> Result<Vec<T>> {
    bank.require_complete()?;
    let mut out = Vec::with_capacity(bank.num_classes() * bank.dim());
    for k in 0..bank.num_classes() {
        let row = bank.vector(k).expect("bank is complete");
        let scale = match kind {
            SimilarityKind::Dot => 1.0,
            SimilarityKind::Cosine => {
                1.0 / libm::sqrt(row.iter().map(|v| v * v).sum::<f64>()).max(NORM_FLOOR)
            }
        };
        out.extend(row.iter().map(|&v| T::of(v * scale)));
    }
    Ok(out)
}

/// Per-pixel reciprocal norms and normalised copy of the features.
fn normalize<T: Real>(feats: &Tensor<T>) -> (Tensor<T>, Vec<T>) {
    let hw = feats.plane_len();
    let mut out = feats.clone();
    let mut inv_norms = vec![T::zero(); feats.n * hw];
    for n in 0..feats.n {
        let img = out.image_mut(n);
        for i in 0..hw {
            let mut ss = T::zero();
            for j in 0..feats.c {
                ss += img[j * hw + i] * img[j * hw + i];
            }
            let inv = T::one() / ss.sqrt().max(T::of(NORM_FLOOR));
            inv_norms[n * hw + i] = inv;
            for j in 0..feats.c {
                img[j * hw + i] *= inv;
            }
        }
    }
    (out, inv_norms)
}

fn check_bank<T: Real>(feats: &Tensor<T>, bank: &PrototypeBank) -> Result<()> {
    if feats.c != bank.dim() {
        return Err(Error::Shape(format!(
            "pixel vectors of dim {} compared with prototypes of dim {}",
            feats.c,
            bank.dim()
        )));
    }
    Ok(())
}

/// Temperature-scaled similarity logits `N × C × h × w`.
fn similarity_logits<T: Real>(feats: &Tensor<T>, protos: &[T], num_classes: usize, tau: f64) -> Tensor<T> {
    let hw = feats.plane_len();
    let mut z = Tensor::zeros(feats.n, num_classes, feats.h, feats.w);
    for n in 0..feats.n {
        matmul_acc(protos, feats.image(n), z.image_mut(n), num_classes, feats.c, hw);
    }
    z.scale(T::one() / T::of(tau));
    z
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

/// Softmax over classes of `sim(p_c, f) / τ` at every pixel.
pub fn similarity_dist<T: Real>(feats: &Tensor<T>, bank: &PrototypeBank, tau: f64, kind: SimilarityKind) -> Result<Tensor<T>> {
    check_tau(tau)?;
    check_bank(feats, bank)?;
    let protos = prototype_matrix::<T>(bank, kind)?;
    let z = match kind {
        SimilarityKind::Dot => similarity_logits(feats, &protos, bank.num_classes(), tau),
        SimilarityKind::Cosine => similarity_logits(&normalize(feats).0, &protos, bank.num_classes(), tau),
    };
    Ok(crate::nn::softmax_channels(&z))
}

/// Mean contrastive loss over labelled pixels and its gradient with respect to the pixel vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastTerm<T> {
    pub loss: T,
    /// Pixels that contributed; zero marks a skipped batch whose loss and gradient are zero.
    pub valid_pixels: usize,
    pub grad: Tensor<T>,
}

impl<T: Real> ContrastTerm<T> {
    fn skipped(feats: &Tensor<T>) -> Self {
        Self { loss: T::zero(), valid_pixels: 0, grad: Tensor::zeros(feats.n, feats.c, feats.h, feats.w) }
    }

    pub fn is_skipped(&self) -> bool {
        self.valid_pixels == 0
    }
}

/// Cross-entropy between each pixel's prototype-similarity distribution and its label.
/// `labels` must be at the resolution of `feats`; [`IGNORE`] pixels are excluded.
/// Returns a skipped term when no pixel is labelled.
pub fn prototype_contrast<T: Real>(
    feats: &Tensor<T>,
    labels: &[u8],
    bank: &PrototypeBank,
    tau: f64,
    kind: SimilarityKind,
) -> Result<ContrastTerm<T>> {
    check_tau(tau)?;
    check_bank(feats, bank)?;
    let hw = feats.plane_len();
    let num_classes = bank.num_classes();
    if labels.len() != feats.n * hw {
        return Err(Error::Shape(format!(
            "{} labels for pixel vectors {:?}",
            labels.len(),
            feats.shape()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize > num_classes) {
        return Err(Error::Shape(format!("label {bad} exceeds class count {num_classes}")));
    }
    let protos = prototype_matrix::<T>(bank, kind)?;
    let valid = labels.iter().filter(|&&l| l != IGNORE).count();
    if valid == 0 {
        return Ok(ContrastTerm::skipped(feats));
    }

    let normalized = (kind == SimilarityKind::Cosine).then(|| normalize(feats));
    let pixels = normalized.as_ref().map_or(feats, |(f, _)| f);
    let z = similarity_logits(pixels, &protos, num_classes, tau);
    let dist = crate::nn::softmax_channels(&z);

    let inv_count = T::one() / T::of(valid as f64);
    let inv_tau = T::one() / T::of(tau);
    let clamp = T::of(LOG_CLAMP);
    let mut loss = T::zero();
    let mut dz = Tensor::zeros(feats.n, num_classes, feats.h, feats.w);
    for n in 0..feats.n {
        let p = dist.image(n);
        let g = dz.image_mut(n);
        for (i, &l) in labels[n * hw..(n + 1) * hw].iter().enumerate() {
            if l == IGNORE {
                continue;
            }
            let y = (l - 1) as usize;
            let py = p[y * hw + i];
            if py < clamp {
                loss -= clamp.ln();
                continue;
            }
            loss -= py.ln();
            for c in 0..num_classes {
                g[c * hw + i] = p[c * hw + i] * inv_count * inv_tau;
            }
            g[y * hw + i] -= inv_count * inv_tau;
        }
    }

    let mut grad = Tensor::zeros(feats.n, feats.c, feats.h, feats.w);
    for n in 0..feats.n {
        matmul_at_acc(&protos, dz.image(n), grad.image_mut(n), num_classes, feats.c, hw);
    }
    if let Some((unit, inv_norms)) = &normalized {
        // d f̂ / d f = (I − f̂ f̂ᵀ) / ‖f‖
        for n in 0..feats.n {
            let u = unit.image(n);
            let g = grad.image_mut(n);
            for i in 0..hw {
                let mut proj = T::zero();
                for j in 0..feats.c {
                    proj += g[j * hw + i] * u[j * hw + i];
                }
                let inv = inv_norms[n * hw + i];
                for j in 0..feats.c {
                    g[j * hw + i] = (g[j * hw + i] - proj * u[j * hw + i]) * inv;
                }
            }
        }
    }
    Ok(ContrastTerm { loss: loss * inv_count, valid_pixels: valid, grad })
}

/// Cross-domain term: target pixels against their confident pseudo-labels.
/// A batch without any confident pixel is skipped with a warning.
pub fn contrast_loss_t2s<T: Real>(
    target_feats: &Tensor<T>,
    bank: &PrototypeBank,
    pseudo_labels: &[u8],
    tau: f64,
    kind: SimilarityKind,
) -> Result<ContrastTerm<T>> {
    let term = prototype_contrast(target_feats, pseudo_labels, bank, tau, kind)?;
    if term.is_skipped() {
        log::warn!("no confident target pixels in batch; cross-domain contrast skipped");
    }
    Ok(term)
}

/// In-domain term: source pixels against their ground-truth labels.
pub fn contrast_loss_s2s<T: Real>(
    source_feats: &Tensor<T>,
    bank: &PrototypeBank,
    labels: &[u8],
    tau: f64,
    kind: SimilarityKind,
) -> Result<ContrastTerm<T>> {
    prototype_contrast(source_feats, labels, bank, tau, kind)
}

/// Source and target pixel vectors at one level, each with labels at that level's resolution.
#[derive(Clone, Copy, Debug)]
pub struct LevelInputs<'a, T> {
    pub source: &'a Tensor<T>,
    pub source_labels: &'a [u8],
    pub target: &'a Tensor<T>,
    pub target_labels: &'a [u8],
}

#[derive(Clone, Debug, PartialEq)]
pub struct LevelLoss<T> {
    pub s2s: Option<ContrastTerm<T>>,
    pub t2s: Option<ContrastTerm<T>>,
}

impl<T: Real> LevelLoss<T> {
    pub fn value(&self) -> T {
        self.s2s.iter().chain(&self.t2s).map(|t| t.loss).sum()
    }
}

/// Feature-level (or, with output-level inputs, output-level) sum `L_t2s + L_s2s`.
pub fn contra_feat_loss<T: Real>(
    inputs: &LevelInputs<'_, T>,
    bank: &PrototypeBank,
    tau: f64,
    domains: DomainSet,
    kind: SimilarityKind,
) -> Result<LevelLoss<T>> {
    let s2s = domains
        .s2s
        .then(|| contrast_loss_s2s(inputs.source, bank, inputs.source_labels, tau, kind))
        .transpose()?;
    let t2s = domains
        .t2s
        .then(|| contrast_loss_t2s(inputs.target, bank, inputs.target_labels, tau, kind))
        .transpose()?;
    Ok(LevelLoss { s2s, t2s })
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct ContrastConfig {
    pub tau_feat: f64,
    pub tau_out: f64,
    pub levels: LevelSet,
    pub domains: DomainSet,
    pub similarity: SimilarityKind,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        Self {
            tau_feat: 0.1,
            tau_out: 0.1,
            levels: LevelSet::BOTH,
            domains: DomainSet::BOTH,
            similarity: SimilarityKind::Dot,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TotalContrastLoss<T> {
    pub feature: Option<LevelLoss<T>>,
    pub output: Option<LevelLoss<T>>,
}

impl<T: Real> TotalContrastLoss<T> {
    pub fn value(&self) -> T {
        self.feature.iter().chain(&self.output).map(LevelLoss::value).sum()
    }
}

/// Feature-level plus output-level contrast, each enabled by `config.levels`.
pub fn contra_total_loss<T: Real>(
    feature: &LevelInputs<'_, T>,
    output: &LevelInputs<'_, T>,
    feat_bank: &PrototypeBank,
    out_bank: &PrototypeBank,
    config: &ContrastConfig,
) -> Result<TotalContrastLoss<T>> {
    let feature = config
        .levels
        .feature
        .then(|| contra_feat_loss(feature, feat_bank, config.tau_feat, config.domains, config.similarity))
        .transpose()?;
    let output = config
        .levels
        .output
        .then(|| contra_feat_loss(output, out_bank, config.tau_out, config.domains, config.similarity))
        .transpose()?;
    Ok(TotalContrastLoss { feature, output })
}
