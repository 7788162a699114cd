//! Segmentation network: a strided convolutional feature extractor, a per-position
//! linear classifier, and bilinear upsampling of the logits to input resolution.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::datagen::{ImageBatch, CHANNELS, IGNORE};
use crate::error::{Error, Result};
use crate::nn::{relu_backward_inplace, relu_inplace, softmax_channels, Bilinear, Conv2d};
use crate::scalar::{clamped_ln, Real};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct ModelConfig {
    pub num_classes: usize,
    /// Output channels of the four extractor blocks; the last entry is the feature dimension.
    pub widths: [usize; 4],
    pub strides: [usize; 4],
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { num_classes: 5, widths: [16, 32, 32, 32], strides: [1, 2, 2, 1] }
    }
}

impl ModelConfig {
    pub fn feature_dim(&self) -> usize {
        self.widths[3]
    }

    pub fn total_stride(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("model needs at least two classes".into()));
        }
        if self.widths.iter().any(|&w| w == 0) || self.strides.iter().any(|&s| s == 0 || s > 2) {
            return Err(Error::Config(format!(
                "invalid extractor widths {:?} / strides {:?}",
                self.widths, self.strides
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegModel<T> {
    pub config: ModelConfig,
    pub extractor: Vec<Conv2d<T>>,
    pub classifier: Conv2d<T>,
}

/// Parameter gradients, laid out in [`SegModel::param_specs`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub tensors: Vec<Vec<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().flatten().all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug)]
struct Cache<T> {
    input_hw: (usize, usize),
    block_inputs_hw: Vec<(usize, usize)>,
    block_cols: Vec<Vec<T>>,
    block_outputs: Vec<Tensor<T>>,
    head_cols: Vec<T>,
    upsample: Bilinear<T>,
}

/// Output of a training forward pass, retaining what the backward pass needs.
#[derive(Clone, Debug)]
pub struct ForwardPass<T> {
    /// `N × d × H' × W'`
    pub features: Tensor<T>,
    /// `N × C × H × W`, pre-softmax.
    pub logits: Tensor<T>,
    /// `N × C × H × W`, per-pixel softmax of `logits`.
    pub probs: Tensor<T>,
    cache: Cache<T>,
}

impl<T: Real> ForwardPass<T> {
    /// Post-activation outputs of every extractor block.
    pub fn activations(&self) -> &[Tensor<T>] {
        &self.cache.block_outputs
    }
}

impl<T: Real> SegModel<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::stream(&[seed, 0x4d4f_4445_4c]);
        let mut extractor = Vec::with_capacity(4);
        let mut cin = CHANNELS;
        for (&w, &s) in config.widths.iter().zip(&config.strides) {
            extractor.push(Conv2d::new(cin, w, 3, s, 1.0, &mut rng));
            cin = w;
        }
        let classifier = Conv2d::new(cin, config.num_classes, 1, 1, libm::sqrt(0.5), &mut rng);
        Ok(Self { config, extractor, classifier })
    }

    /// Spatial size of the feature map for an input of the given size.
    pub fn feature_size(&self, h: usize, w: usize) -> (usize, usize) {
        self.extractor.iter().fold((h, w), |(h, w), conv| conv.output_size(h, w))
    }

    /// `(name, shape)` of every parameter tensor, in optimizer/checkpoint order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let mut specs = Vec::new();
        let layers = self.extractor.iter().enumerate().map(|(i, c)| (format!("extractor.{i}"), c));
        for (prefix, conv) in layers.chain(core::iter::once((String::from("classifier"), &self.classifier))) {
            specs.push((
                format!("{prefix}.weight"),
                vec![conv.out_channels, conv.in_channels, conv.kernel, conv.kernel],
            ));
            specs.push((format!("{prefix}.bias"), vec![conv.out_channels]));
        }
        specs
    }

    pub fn params(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = Vec::new();
        for conv in self.extractor.iter().chain(core::iter::once(&self.classifier)) {
            out.push(&conv.weight);
            out.push(&conv.bias);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut out = Vec::new();
        for conv in self.extractor.iter_mut().chain(core::iter::once(&mut self.classifier)) {
            out.push(&mut conv.weight);
            out.push(&mut conv.bias);
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn zero_grads(&self) -> Gradients<T> {
        Gradients { tensors: self.params().iter().map(|p| vec![T::zero(); p.len()]).collect() }
    }

    pub fn params_finite(&self) -> bool {
        self.params().iter().all(|p| p.iter().all(|v| v.is_finite()))
    }

    pub fn cast<U: Real>(&self) -> SegModel<U> {
        let conv = |c: &Conv2d<T>| Conv2d {
            in_channels: c.in_channels,
            out_channels: c.out_channels,
            kernel: c.kernel,
            stride: c.stride,
            padding: c.padding,
            weight: c.weight.iter().map(|&v| U::of(v.as_f64())).collect(),
            bias: c.bias.iter().map(|&v| U::of(v.as_f64())).collect(),
        };
        SegModel {
            config: self.config.clone(),
            extractor: self.extractor.iter().map(conv).collect(),
            classifier: conv(&self.classifier),
        }
    }

    pub fn forward(&self, images: &Tensor<T>) -> Result<ForwardPass<T>> {
        if images.c != CHANNELS || images.n == 0 {
            return Err(Error::Shape(format!(
                "expected N x {CHANNELS} x H x W images with N >= 1, got {:?}",
                images.shape()
            )));
        }
        let (fh, fw) = self.feature_size(images.h, images.w);
        if fh == 0 || fw == 0 {
            return Err(Error::Shape(format!("input {}x{} is too small", images.h, images.w)));
        }
        let mut block_cols = Vec::with_capacity(4);
        let mut block_outputs: Vec<Tensor<T>> = Vec::with_capacity(4);
        let mut block_inputs_hw = Vec::with_capacity(4);
        for conv in &self.extractor {
            let input = block_outputs.last().unwrap_or(images);
            block_inputs_hw.push((input.h, input.w));
            let (mut out, cols) = conv.forward(input);
            relu_inplace(&mut out);
            block_cols.push(cols);
            block_outputs.push(out);
        }
        let features = block_outputs[3].clone();
        let (small_logits, head_cols) = self.classifier.forward(&features);
        let upsample = Bilinear::new((fh, fw), (images.h, images.w));
        let logits = upsample.forward(&small_logits);
        let probs = softmax_channels(&logits);
        Ok(ForwardPass {
            features,
            logits,
            probs,
            cache: Cache {
                input_hw: (images.h, images.w),
                block_inputs_hw,
                block_cols,
                block_outputs,
                head_cols,
                upsample,
            },
        })
    }

    /// Backpropagates gradients given with respect to the upsampled logits and/or the feature map.
    pub fn backward(&self, pass: &ForwardPass<T>, dlogits: Option<&Tensor<T>>, dfeatures: Option<&Tensor<T>>) -> Gradients<T> {
        let mut grads = self.zero_grads();
        let n_blocks = self.extractor.len();
        let feat = &pass.features;
        let mut dfeat = match dlogits {
            Some(dl) => {
                let dsmall = pass.cache.upsample.backward(dl);
                let (gw, rest) = grads.tensors[2 * n_blocks..].split_at_mut(1);
                self.classifier
                    .backward(&pass.cache.head_cols, (feat.h, feat.w), &dsmall, &mut gw[0], &mut rest[0], true)
                    .expect("input gradient requested")
            }
            None => Tensor::zeros(feat.n, feat.c, feat.h, feat.w),
        };
        if let Some(df) = dfeatures {
            dfeat.add_assign(df);
        }
        let mut grad = dfeat;
        for i in (0..n_blocks).rev() {
            relu_backward_inplace(&pass.cache.block_outputs[i], &mut grad);
            let (gw, rest) = grads.tensors[2 * i..].split_at_mut(1);
            let next = self.extractor[i].backward(
                &pass.cache.block_cols[i],
                pass.cache.block_inputs_hw[i],
                &grad,
                &mut gw[0],
                &mut rest[0],
                i > 0,
            );
            match next {
                Some(g) => grad = g,
                None => break,
            }
        }
        debug_assert_eq!(pass.cache.input_hw, pass.cache.block_inputs_hw[0]);
        grads
    }

    /// Inference-only forward: `(FeatureMap, ProbMap)`.
    pub fn predict(&self, images: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let pass = self.forward(images)?;
        Ok((pass.features, pass.probs))
    }
}

/// Converts the selected images of a batch into a tensor.
pub fn images_to_tensor<T: Real>(batch: &ImageBatch, indices: &[usize]) -> Tensor<T> {
    let mut data = Vec::with_capacity(indices.len() * batch.image_len());
    for &i in indices {
        data.extend(batch.image(i).iter().map(|&v| T::of(v as f64)));
    }
    Tensor::from_vec(indices.len(), CHANNELS, batch.height, batch.width, data)
}

fn check_labels<T: Real>(probs: &Tensor<T>, labels: &[u8]) -> Result<()> {
    if labels.len() != probs.n * probs.plane_len() {
        return Err(Error::Shape(format!(
            "label count {} does not match probability map {:?}",
            labels.len(),
            probs.shape()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize > probs.c) {
        return Err(Error::Shape(format!("label {bad} exceeds class count {}", probs.c)));
    }
    Ok(())
}

/// Mean of `-ln p[label]` over pixels whose label is not [`IGNORE`].
pub fn supervised_ce_loss<T: Real>(probs: &Tensor<T>, labels: &[u8]) -> Result<T> {
    supervised_ce_loss_with_grad(probs, labels).map(|(l, _)| l)
}

/// Cross-entropy and its gradient with respect to the pre-softmax logits.
pub fn supervised_ce_loss_with_grad<T: Real>(probs: &Tensor<T>, labels: &[u8]) -> Result<(T, Tensor<T>)> {
    check_labels(probs, labels)?;
    let valid = labels.iter().filter(|&&l| l != IGNORE).count();
    if valid == 0 {
        return Err(Error::AllIgnored);
    }
    let hw = probs.plane_len();
    let inv = T::one() / T::of(valid as f64);
    let mut grad = probs.clone();
    let mut loss = T::zero();
    for n in 0..probs.n {
        let map = &labels[n * hw..(n + 1) * hw];
        let g = grad.image_mut(n);
        for (i, &l) in map.iter().enumerate() {
            if l == IGNORE {
                for k in 0..probs.c {
                    g[k * hw + i] = T::zero();
                }
                continue;
            }
            let target = (l - 1) as usize;
            loss -= clamped_ln(probs.data[(n * probs.c + target) * hw + i]);
            g[target * hw + i] -= T::one();
            for k in 0..probs.c {
                g[k * hw + i] *= inv;
            }
        }
    }
    Ok((loss * inv, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probs_1px(p: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(1, p.len(), 1, 1, p.to_vec())
    }

    #[test]
    fn shape_contract_default_extractor() {
        let model = SegModel::<f32>::new(ModelConfig::default(), 0).unwrap();
        let images = Tensor::zeros(2, 3, 64, 64);
        let pass = model.forward(&images).unwrap();
        assert_eq!(pass.features.shape(), [2, 32, 16, 16]);
        assert_eq!(pass.probs.shape(), [2, 5, 64, 64]);
    }

    #[test]
    fn rejects_wrong_channel_count() {
        let model = SegModel::<f32>::new(ModelConfig::default(), 0).unwrap();
        assert!(matches!(model.forward(&Tensor::zeros(1, 1, 16, 16)), Err(Error::Shape(_))));
    }

    #[test]
    fn ce_hand_values() {
        let one_hot = probs_1px(&[0.0, 1.0, 0.0]);
        assert_eq!(supervised_ce_loss(&one_hot, &[2]).unwrap(), 0.0);
        let uniform = probs_1px(&[0.25; 4]);
        assert!((supervised_ce_loss(&uniform, &[3]).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert_eq!(supervised_ce_loss(&uniform, &[IGNORE]), Err(Error::AllIgnored));
        assert!(matches!(supervised_ce_loss(&uniform, &[5]), Err(Error::Shape(_))));
    }

    #[test]
    fn param_specs_match_params() {
        let model = SegModel::<f32>::new(ModelConfig::default(), 1).unwrap();
        let specs = model.param_specs();
        for ((_, shape), p) in specs.iter().zip(model.params()) {
            assert_eq!(shape.iter().product::<usize>(), p.len());
        }
        assert_eq!(specs[0].0, "extractor.0.weight");
        assert_eq!(specs.last().unwrap().0, "classifier.bias");
    }
}
