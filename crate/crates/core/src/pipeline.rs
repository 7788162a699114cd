//! Three-stage training: source-only supervision, prototypical contrast
//! adaptation, then self-training on pseudo-labelled target images.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::contrast::{contra_total_loss, ContrastConfig, LevelInputs, LevelSet, TotalContrastLoss};
use crate::datagen::{generate_split, Domain, LabelMaps, SceneSpec, IGNORE};
use crate::error::{Error, Result};
use crate::metrics::ConfusionMatrix;
use crate::model::{images_to_tensor, supervised_ce_loss_with_grad, Gradients, ModelConfig, SegModel};
use crate::nn::{downsample_labels_pure, resize_labels_nearest, softmax_backward, Bilinear};
use crate::optim::{Sgd, SgdConfig};
use crate::prototypes::{batch_stats, init_from_source, BatchStats, Level, MixedUpdater, PrototypeBank};
use crate::pseudolabel::{adaptive_thresholds, build_confidence_sets, fixed_threshold_labels, generate_pseudo_labels, ThresholdTable};
use crate::scalar::Real;
use crate::seed;
use crate::tensor::Tensor;

/// Training precision.
pub type Float = f32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum UpdatingScheme {
    /// Banks stay at their initial values.
    Fixed,
    /// Running mean over source batches.
    Statistical,
    /// Mix of running source and target estimates.
    Mixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum SelfTraining {
    /// One fixed confidence cut for every class.
    Naive,
    /// Class-wise thresholds at rank `η` of each class's confidences.
    Adaptive,
    Off,
}

/// How pixel labels are brought to feature resolution for feature-level prototypes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum FeatureLabels {
    /// The pixel at each cell's origin.
    Nearest,
    /// The block's label when the whole block agrees, ignored otherwise.
    Pure,
}

impl FeatureLabels {
    pub fn downsample(self, labels: &[u8], n: usize, src: (usize, usize), dst: (usize, usize)) -> Vec<u8> {
        match self {
            FeatureLabels::Nearest => resize_labels_nearest(labels, n, src, dst),
            FeatureLabels::Pure => downsample_labels_pure(labels, n, src, dst),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct StageConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub sgd: SgdConfig,
}

impl StageConfig {
    fn with_lr(steps: u64, base_lr: f64) -> Self {
        Self { steps, batch_size: 8, sgd: SgdConfig { base_lr, ..SgdConfig::default() } }
    }
}

/// Number of images in each split. Target evaluation images follow the
/// target training images in the same stream and are never trained on.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct DataSizes {
    pub source_train: usize,
    pub source_eval: usize,
    pub target_train: usize,
    pub target_eval: usize,
}

impl Default for DataSizes {
    fn default() -> Self {
        Self { source_train: 200, source_eval: 32, target_train: 200, target_eval: 64 }
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct PipelineConfig {
    pub scene: SceneSpec,
    pub model: ModelConfig,
    pub data: DataSizes,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub stage3: StageConfig,
    pub contrast: ContrastConfig,
    pub lambda_contra: f64,
    /// Source weight of the mixed updating scheme.
    pub m: f64,
    pub eta: f64,
    /// Confidence cut for target pseudo-labels during adaptation and naive self-training.
    pub contrast_threshold: f64,
    pub updating_scheme: UpdatingScheme,
    pub feature_labels: FeatureLabels,
    pub self_training: SelfTraining,
    /// Keep supervised source cross-entropy on during adaptation.
    pub source_ce_in_adaptation: bool,
    /// Empty means single-scale evaluation.
    pub mst_scales: Vec<f64>,
    pub eval_batch: usize,
    /// Drives initialisation and batch order; the data come from `scene.seed`.
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            scene: SceneSpec::default(),
            model: ModelConfig::default(),
            data: DataSizes::default(),
            stage1: StageConfig::with_lr(600, 0.05),
            stage2: StageConfig::with_lr(600, 0.01),
            stage3: StageConfig::with_lr(800, 0.03),
            contrast: ContrastConfig {
                tau_out: 0.3,
                levels: LevelSet { feature: false, output: true },
                ..ContrastConfig::default()
            },
            lambda_contra: 8.0,
            m: 0.9,
            eta: 0.6,
            contrast_threshold: 0.9,
            updating_scheme: UpdatingScheme::Mixed,
            feature_labels: FeatureLabels::Pure,
            self_training: SelfTraining::Adaptive,
            source_ce_in_adaptation: true,
            mst_scales: Vec::new(),
            eval_batch: 16,
            seed: 0,
        }
    }
}

fn config_error(msg: String) -> Error {
    Error::Config(msg)
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.model.validate()?;
        if self.model.num_classes != self.scene.num_classes {
            return Err(config_error(format!(
                "model.num_classes ({}) differs from scene.num_classes ({})",
                self.model.num_classes, self.scene.num_classes
            )));
        }
        let stride = self.model.total_stride();
        if self.scene.height % stride != 0 || self.scene.width % stride != 0 {
            return Err(config_error(format!("image size must be a multiple of the total stride {stride}")));
        }
        let d = &self.data;
        if d.source_train == 0 || d.source_eval == 0 || d.target_train == 0 || d.target_eval == 0 {
            return Err(config_error("every split needs at least one image".into()));
        }
        for (name, s) in [("stage1", &self.stage1), ("stage2", &self.stage2), ("stage3", &self.stage3)] {
            if s.batch_size == 0 {
                return Err(config_error(format!("{name}.batch_size must be positive")));
            }
            let o = &s.sgd;
            if !(o.base_lr >= 0.0 && o.base_lr.is_finite()) || !(0.0..1.0).contains(&o.momentum) || !(o.weight_decay >= 0.0) || !(o.poly_power > 0.0) {
                return Err(config_error(format!("{name}.sgd has out-of-range values")));
            }
        }
        let c = &self.contrast;
        if !(c.tau_feat > 0.0) || !(c.tau_out > 0.0) {
            return Err(config_error("temperatures must be positive".into()));
        }
        if self.stage2.steps > 0 && (!c.levels.any() || !c.domains.any()) {
            return Err(config_error("adaptation needs at least one level and one domain".into()));
        }
        if !(self.lambda_contra >= 0.0 && self.lambda_contra.is_finite()) {
            return Err(config_error("lambda_contra must be finite and non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.m) {
            return Err(config_error(format!("m must lie in [0, 1], got {}", self.m)));
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(config_error(format!("eta must lie in (0, 1], got {}", self.eta)));
        }
        if !(self.contrast_threshold > 0.0 && self.contrast_threshold < 1.0) {
            return Err(config_error("contrast_threshold must lie in (0, 1)".into()));
        }
        if self.mst_scales.iter().any(|&s| !(s > 0.0 && s <= 4.0)) {
            return Err(config_error("mst scales must lie in (0, 4]".into()));
        }
        if self.eval_batch == 0 {
            return Err(config_error("eval_batch must be positive".into()));
        }
        Ok(())
    }
}

/// Images already converted to the training precision, with optional labels.
#[derive(Clone, Debug)]
pub struct Split {
    pub images: Tensor<Float>,
    pub labels: Option<LabelMaps>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.images.n
    }

    pub fn is_empty(&self) -> bool {
        self.images.n == 0
    }

    fn chunks(&self, size: usize) -> impl Iterator<Item = Tensor<Float>> + '_ {
        let n = self.len();
        (0..n).step_by(size).map(move |s| {
            let idx: Vec<usize> = (s..(s + size).min(n)).collect();
            self.images.select(&idx)
        })
    }
}

/// All splits of one run. Target training labels are dropped at construction.
#[derive(Clone, Debug)]
pub struct Datasets {
    pub source_train: Split,
    pub source_eval: Split,
    pub target_train: Split,
    pub target_eval: Split,
}

impl Datasets {
    pub fn generate(scene: &SceneSpec, sizes: &DataSizes) -> Result<Self> {
        let split = |domain, start, n, keep_labels: bool| -> Result<Split> {
            let b = generate_split(scene, domain, start, n)?;
            let all: Vec<usize> = (0..n).collect();
            Ok(Split {
                images: images_to_tensor(&b.images, &all),
                labels: keep_labels.then_some(b.labels),
            })
        };
        Ok(Self {
            source_train: split(Domain::Source, 0, sizes.source_train, true)?,
            source_eval: split(Domain::Source, sizes.source_train, sizes.source_eval, true)?,
            target_train: split(Domain::Target, 0, sizes.target_train, false)?,
            target_eval: split(Domain::Target, sizes.target_train, sizes.target_eval, true)?,
        })
    }
}

/// One optimisation step's diagnostics. Absent terms are `None`.
#[derive(Clone, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StepLog {
    pub stage: u8,
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub ce_source: Option<f64>,
    pub ce_target: Option<f64>,
    pub feat_s2s: Option<f64>,
    pub feat_t2s: Option<f64>,
    pub out_s2s: Option<f64>,
    pub out_t2s: Option<f64>,
    /// Target pixels that received a pseudo-label in this step's batch.
    pub target_labeled: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Banks {
    pub feature: Option<PrototypeBank>,
    pub output: Option<PrototypeBank>,
}

#[derive(Clone, Debug)]
pub struct StageOutcome {
    pub model: SegModel<Float>,
    pub banks: Option<Banks>,
    pub thresholds: Option<ThresholdTable>,
    pub logs: Vec<StepLog>,
}

fn sample_batch<R: Rng>(rng: &mut R, n: usize, size: usize) -> Vec<usize> {
    (0..size).map(|_| rng.random_range(0..n)).collect()
}

fn labels_required(split: &Split) -> Result<&LabelMaps> {
    split.labels.as_ref().ok_or(Error::Empty("split has no labels"))
}

const TAG_INIT: u64 = 0x494e_4954;
const TAG_STAGE: u64 = 0x5354_4147;

/// Freshly initialised model for `config`.
pub fn initial_model(config: &PipelineConfig) -> Result<SegModel<Float>> {
    SegModel::new(config.model.clone(), seed::mix(&[config.seed, TAG_INIT]))
}

/// Supervised training on labelled source images.
pub fn stage1_source_only(config: &PipelineConfig, data: &Datasets) -> Result<StageOutcome> {
    config.validate()?;
    let mut model = initial_model(config)?;
    let labels = labels_required(&data.source_train)?;
    let stage = &config.stage1;
    let mut opt = Sgd::new(stage.sgd.clone(), stage.steps, &model);
    let mut rng = seed::stream(&[config.seed, TAG_STAGE, 1]);
    let mut logs = Vec::with_capacity(stage.steps as usize);
    for step in 0..stage.steps {
        let idx = sample_batch(&mut rng, data.source_train.len(), stage.batch_size);
        let pass = model.forward(&data.source_train.images.select(&idx))?;
        let (ce, dlogits) = supervised_ce_loss_with_grad(&pass.probs, &labels.select(&idx).data)?;
        let grads = model.backward(&pass, Some(&dlogits), None);
        let loss = ce.as_f64();
        let lr = opt.current_lr();
        opt.step(&mut model, loss, &grads)?;
        logs.push(StepLog { stage: 1, step, lr, loss, ce_source: Some(loss), ..StepLog::default() });
    }
    Ok(StageOutcome { model, banks: None, thresholds: None, logs })
}

/// Prototype banks from the full labelled source split: feature level from
/// feature maps with labels downsampled to feature resolution, output level
/// from probability maps at full resolution.
pub fn init_banks(model: &SegModel<Float>, source: &Split, config: &PipelineConfig) -> Result<Banks> {
    let labels = labels_required(source)?;
    let c = config.model.num_classes;
    let (h, w) = (source.images.h, source.images.w);
    let fhw = model.feature_size(h, w);
    let mut feat_stream = Vec::new();
    let mut out_stream = Vec::new();
    let mut start = 0;
    for images in source.chunks(config.eval_batch) {
        let n = images.n;
        let idx: Vec<usize> = (start..start + n).collect();
        start += n;
        let lab = labels.select(&idx).data;
        let (feats, probs) = model.predict(&images)?;
        if config.contrast.levels.feature {
            feat_stream.push((feats, config.feature_labels.downsample(&lab, n, (h, w), fhw)));
        }
        if config.contrast.levels.output {
            out_stream.push((probs, lab));
        }
    }
    let feature = config
        .contrast
        .levels
        .feature
        .then(|| init_from_source(Level::Feature, c, config.model.feature_dim(), feat_stream))
        .transpose()?;
    let output = config
        .contrast
        .levels
        .output
        .then(|| init_from_source(Level::Output, c, c, out_stream))
        .transpose()?;
    let mut missing: Vec<u8> = feature.iter().chain(&output).flat_map(|b| b.missing_classes()).collect();
    missing.sort_unstable();
    missing.dedup();
    if !missing.is_empty() {
        return Err(Error::MissingClasses(missing));
    }
    Ok(Banks { feature, output })
}

enum Updater {
    Fixed,
    Statistical,
    Mixed(MixedUpdater),
}

impl Updater {
    fn new(scheme: UpdatingScheme, bank: &PrototypeBank, m: f64) -> Result<Self> {
        Ok(match scheme {
            UpdatingScheme::Fixed => Updater::Fixed,
            UpdatingScheme::Statistical => Updater::Statistical,
            UpdatingScheme::Mixed => Updater::Mixed(MixedUpdater::new(bank, m)?),
        })
    }

    fn update(&mut self, bank: &mut PrototypeBank, source: &BatchStats, target: &BatchStats) -> Result<()> {
        match self {
            Updater::Fixed => Ok(()),
            Updater::Statistical => bank.update_statistical(source),
            Updater::Mixed(u) => u.update(bank, source, target),
        }
    }
}

fn scaled(t: &Tensor<Float>, s: f64) -> Tensor<Float> {
    let mut out = t.clone();
    out.scale(Float::of(s));
    out
}

fn accumulate(slot: &mut Option<Tensor<Float>>, t: Tensor<Float>) {
    match slot {
        Some(acc) => acc.add_assign(&t),
        None => *slot = Some(t),
    }
}

/// Contrast adaptation from `start` (normally the source-only model).
pub fn stage2_proca(config: &PipelineConfig, data: &Datasets, start: &SegModel<Float>) -> Result<StageOutcome> {
    config.validate()?;
    let mut model = start.clone();
    let banks = init_banks(&model, &data.source_train, config)?;
    let Banks { feature: mut feat_bank, output: mut out_bank } = banks;
    let mut feat_updater = feat_bank.as_ref().map(|b| Updater::new(config.updating_scheme, b, config.m)).transpose()?;
    let mut out_updater = out_bank.as_ref().map(|b| Updater::new(config.updating_scheme, b, config.m)).transpose()?;

    let labels = labels_required(&data.source_train)?;
    let c = config.model.num_classes;
    let stage = &config.stage2;
    let lambda = config.lambda_contra;
    let mut opt = Sgd::new(stage.sgd.clone(), stage.steps, &model);
    let mut rng = seed::stream(&[config.seed, TAG_STAGE, 2]);
    let mut logs = Vec::with_capacity(stage.steps as usize);
    let (h, w) = (data.source_train.images.h, data.source_train.images.w);
    let fhw = model.feature_size(h, w);
    // Placeholder bank for a disabled level; never read.
    let unused = PrototypeBank::empty(Level::Feature, c, 1);

    for step in 0..stage.steps {
        let s_idx = sample_batch(&mut rng, data.source_train.len(), stage.batch_size);
        let t_idx = sample_batch(&mut rng, data.target_train.len(), stage.batch_size);
        let src = model.forward(&data.source_train.images.select(&s_idx))?;
        let tgt = model.forward(&data.target_train.images.select(&t_idx))?;
        let s_lab = labels.select(&s_idx).data;
        let s_lab_f = config.feature_labels.downsample(&s_lab, s_idx.len(), (h, w), fhw);
        let pseudo = fixed_threshold_labels(&tgt.probs, config.contrast_threshold)?;
        let t_lab = pseudo.labels.clone();
        let t_lab_f = config.feature_labels.downsample(&t_lab, t_idx.len(), (h, w), fhw);

        let feat_in = LevelInputs { source: &src.features, source_labels: &s_lab_f, target: &tgt.features, target_labels: &t_lab_f };
        let out_in = LevelInputs { source: &src.probs, source_labels: &s_lab, target: &tgt.probs, target_labels: &t_lab };
        let total: TotalContrastLoss<Float> = contra_total_loss(
            &feat_in,
            &out_in,
            feat_bank.as_ref().unwrap_or(&unused),
            out_bank.as_ref().unwrap_or(&unused),
            &config.contrast,
        )?;

        let mut log = StepLog { stage: 2, step, lr: opt.current_lr(), ..StepLog::default() };
        let mut loss = 0.0;
        let mut s_dlogits: Option<Tensor<Float>> = None;
        let mut s_dprobs: Option<Tensor<Float>> = None;
        let mut s_dfeat: Option<Tensor<Float>> = None;
        let mut t_dprobs: Option<Tensor<Float>> = None;
        let mut t_dfeat: Option<Tensor<Float>> = None;
        if config.source_ce_in_adaptation {
            let (ce, dl) = supervised_ce_loss_with_grad(&src.probs, &s_lab)?;
            loss += ce.as_f64();
            log.ce_source = Some(ce.as_f64());
            s_dlogits = Some(dl);
        }
        if let Some(level) = &total.feature {
            if let Some(term) = &level.s2s {
                log.feat_s2s = Some(term.loss.as_f64());
                if !term.is_skipped() {
                    accumulate(&mut s_dfeat, scaled(&term.grad, lambda));
                }
            }
            if let Some(term) = &level.t2s {
                log.feat_t2s = Some(term.loss.as_f64());
                if !term.is_skipped() {
                    accumulate(&mut t_dfeat, scaled(&term.grad, lambda));
                }
            }
        }
        if let Some(level) = &total.output {
            if let Some(term) = &level.s2s {
                log.out_s2s = Some(term.loss.as_f64());
                if !term.is_skipped() {
                    accumulate(&mut s_dprobs, scaled(&term.grad, lambda));
                }
            }
            if let Some(term) = &level.t2s {
                log.out_t2s = Some(term.loss.as_f64());
                if !term.is_skipped() {
                    accumulate(&mut t_dprobs, scaled(&term.grad, lambda));
                }
            }
        }
        loss += lambda * total.value().as_f64();
        log.loss = loss;
        log.target_labeled = Some(pseudo.labeled_pixels() as u64);

        if let Some(dp) = s_dprobs {
            accumulate(&mut s_dlogits, softmax_backward(&src.probs, &dp));
        }
        let t_dlogits = t_dprobs.map(|dp| softmax_backward(&tgt.probs, &dp));
        let mut grads: Gradients<Float> = model.backward(&src, s_dlogits.as_ref(), s_dfeat.as_ref());
        if t_dlogits.is_some() || t_dfeat.is_some() {
            grads.add_assign(&model.backward(&tgt, t_dlogits.as_ref(), t_dfeat.as_ref()));
        }
        opt.step(&mut model, loss, &grads)?;

        if let (Some(bank), Some(up)) = (feat_bank.as_mut(), feat_updater.as_mut()) {
            let s = batch_stats(&src.features, &s_lab_f, c)?;
            let t = batch_stats(&tgt.features, &t_lab_f, c)?;
            up.update(bank, &s, &t)?;
        }
        if let (Some(bank), Some(up)) = (out_bank.as_mut(), out_updater.as_mut()) {
            let s = batch_stats(&src.probs, &s_lab, c)?;
            let t = batch_stats(&tgt.probs, &t_lab, c)?;
            up.update(bank, &s, &t)?;
        }
        logs.push(log);
    }
    Ok(StageOutcome { model, banks: Some(Banks { feature: feat_bank, output: out_bank }), thresholds: None, logs })
}

/// Thresholds for self-training under `config.self_training`.
pub fn self_training_thresholds(config: &PipelineConfig, model: &SegModel<Float>, target: &Split) -> Result<Option<ThresholdTable>> {
    let c = config.model.num_classes;
    match config.self_training {
        SelfTraining::Off => Ok(None),
        SelfTraining::Naive => Ok(Some(ThresholdTable::uniform(config.contrast_threshold, c))),
        SelfTraining::Adaptive => {
            let sets = build_confidence_sets(model, target.chunks(config.eval_batch))?;
            adaptive_thresholds(&sets, config.eta).map(Some)
        }
    }
}

/// Pseudo-labels the target training split with `start`, then continues
/// training on source labels plus target pseudo-labels. With self-training
/// off, returns `start` unchanged.
pub fn stage3_self_training(config: &PipelineConfig, data: &Datasets, start: &SegModel<Float>) -> Result<StageOutcome> {
    config.validate()?;
    let mut model = start.clone();
    let Some(table) = self_training_thresholds(config, &model, &data.target_train)? else {
        return Ok(StageOutcome { model, banks: None, thresholds: None, logs: Vec::new() });
    };
    let pseudo = generate_pseudo_labels(&model, data.target_train.chunks(config.eval_batch), &table)?;
    if pseudo.data.iter().all(|&l| l == IGNORE) {
        return Err(Error::Empty("self-training produced no pseudo-labelled pixels"));
    }
    let labels = labels_required(&data.source_train)?;
    let stage = &config.stage3;
    let mut opt = Sgd::new(stage.sgd.clone(), stage.steps, &model);
    let mut rng = seed::stream(&[config.seed, TAG_STAGE, 3]);
    let mut logs = Vec::with_capacity(stage.steps as usize);
    for step in 0..stage.steps {
        let s_idx = sample_batch(&mut rng, data.source_train.len(), stage.batch_size);
        let t_idx = sample_batch(&mut rng, data.target_train.len(), stage.batch_size);
        let src = model.forward(&data.source_train.images.select(&s_idx))?;
        let (ce_s, dl_s) = supervised_ce_loss_with_grad(&src.probs, &labels.select(&s_idx).data)?;
        let mut grads = model.backward(&src, Some(&dl_s), None);
        let mut log = StepLog { stage: 3, step, lr: opt.current_lr(), ce_source: Some(ce_s.as_f64()), ..StepLog::default() };
        let t_lab = pseudo.select(&t_idx).data;
        let labeled = t_lab.iter().filter(|&&l| l != IGNORE).count();
        log.target_labeled = Some(labeled as u64);
        let mut loss = ce_s.as_f64();
        if labeled > 0 {
            let tgt = model.forward(&data.target_train.images.select(&t_idx))?;
            let (ce_t, dl_t) = supervised_ce_loss_with_grad(&tgt.probs, &t_lab)?;
            grads.add_assign(&model.backward(&tgt, Some(&dl_t), None));
            loss += ce_t.as_f64();
            log.ce_target = Some(ce_t.as_f64());
        }
        log.loss = loss;
        opt.step(&mut model, loss, &grads)?;
        logs.push(log);
    }
    Ok(StageOutcome { model, banks: None, thresholds: Some(table), logs })
}

/// Per-class IoU from the global confusion matrix of a labelled split.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Evaluation {
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub pixel_accuracy: f64,
    /// Classes left out of the mean because they appear in neither truth nor prediction.
    pub excluded: Vec<u8>,
}

impl Evaluation {
    pub fn from_confusion(cm: &ConfusionMatrix) -> Self {
        let per_class_iou = cm.per_class_iou();
        let excluded = per_class_iou
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_none())
            .map(|(k, _)| k as u8 + 1)
            .collect();
        Self { miou: cm.miou(), pixel_accuracy: cm.pixel_accuracy(), per_class_iou, excluded }
    }
}

fn argmax_labels(probs: &Tensor<Float>) -> Vec<u8> {
    let hw = probs.plane_len();
    let mut out = Vec::with_capacity(probs.n * hw);
    for n in 0..probs.n {
        let img = probs.image(n);
        for i in 0..hw {
            let mut best = 0;
            for k in 1..probs.c {
                if img[k * hw + i] > img[best * hw + i] {
                    best = k;
                }
            }
            out.push(best as u8 + 1);
        }
    }
    out
}

fn scaled_size(len: usize, scale: f64) -> usize {
    (libm::round(len as f64 * scale) as usize).max(1)
}

/// Probability maps averaged over `scales`, each resized back to input resolution.
pub fn multiscale_probs(model: &SegModel<Float>, images: &Tensor<Float>, scales: &[f64]) -> Result<Tensor<Float>> {
    let (h, w) = (images.h, images.w);
    let mut acc = Tensor::zeros(images.n, model.config.num_classes, h, w);
    for &s in scales {
        let size = (scaled_size(h, s), scaled_size(w, s));
        let probs = if size == (h, w) {
            model.predict(images)?.1
        } else {
            let resized = Bilinear::new((h, w), size).forward(images);
            let p = model.predict(&resized)?.1;
            Bilinear::new(size, (h, w)).forward(&p)
        };
        acc.add_assign(&probs);
    }
    acc.scale(Float::of(1.0) / Float::of(scales.len() as f64));
    Ok(acc)
}

/// Evaluates `model` on a labelled split; non-empty `mst_scales` switches to multi-scale testing.
pub fn evaluate(model: &SegModel<Float>, split: &Split, mst_scales: &[f64], batch: usize) -> Result<Evaluation> {
    let labels = labels_required(split)?;
    let mut cm = ConfusionMatrix::new(model.config.num_classes);
    let hw = split.images.plane_len();
    let mut start = 0;
    for images in split.chunks(batch.max(1)) {
        let probs = if mst_scales.is_empty() {
            model.predict(&images)?.1
        } else {
            multiscale_probs(model, &images, mst_scales)?
        };
        let pred = argmax_labels(&probs);
        cm.add(&labels.data[start * hw..(start + images.n) * hw], &pred);
        start += images.n;
    }
    Ok(Evaluation::from_confusion(&cm))
}

/// Evaluation rows recorded after each stage.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StageReport {
    pub stage: u8,
    pub source: Evaluation,
    pub target: Evaluation,
}

/// Models and reports of a complete run.
#[derive(Clone, Debug)]
pub struct PipelineRun {
    pub stages: Vec<(StageOutcome, StageReport)>,
}

impl PipelineRun {
    pub fn report(&self, stage: u8) -> Option<&StageReport> {
        self.stages.iter().map(|(_, r)| r).find(|r| r.stage == stage)
    }

    pub fn logs(&self) -> impl Iterator<Item = &StepLog> {
        self.stages.iter().flat_map(|(o, _)| &o.logs)
    }
}

pub fn stage_report(config: &PipelineConfig, data: &Datasets, stage: u8, model: &SegModel<Float>) -> Result<StageReport> {
    Ok(StageReport {
        stage,
        source: evaluate(model, &data.source_eval, &config.mst_scales, config.eval_batch)?,
        target: evaluate(model, &data.target_eval, &config.mst_scales, config.eval_batch)?,
    })
}

/// Which stages a run executes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StagePlan {
    pub adaptation: bool,
    pub self_training: bool,
}

impl StagePlan {
    pub const FULL: Self = Self { adaptation: true, self_training: true };
}

/// Runs the planned stages in order, evaluating after each one.
pub fn run_pipeline(config: &PipelineConfig, data: &Datasets, plan: StagePlan) -> Result<PipelineRun> {
    config.validate()?;
    let mut stages = Vec::new();
    let s1 = stage1_source_only(config, data)?;
    let r1 = stage_report(config, data, 1, &s1.model)?;
    let mut current = s1.model.clone();
    stages.push((s1, r1));
    if plan.adaptation {
        let s2 = stage2_proca(config, data, &current)?;
        let r2 = stage_report(config, data, 2, &s2.model)?;
        current = s2.model.clone();
        stages.push((s2, r2));
    }
    if plan.self_training && config.self_training != SelfTraining::Off {
        let s3 = stage3_self_training(config, data, &current)?;
        let r3 = stage_report(config, data, 3, &s3.model)?;
        stages.push((s3, r3));
    }
    Ok(PipelineRun { stages })
}
