//! Analytic gradients against central finite differences in double precision.
//! Each check returns the worst relative error seen, or a description of the
//! first failure.

use super::*;
use proca_core::contrast::{contra_total_loss, prototype_contrast, ContrastConfig, LevelInputs, SimilarityKind};
use proca_core::datagen::IGNORE;
use proca_core::model::{supervised_ce_loss, supervised_ce_loss_with_grad, ForwardPass, ModelConfig, SegModel};
use proca_core::nn::{resize_labels_nearest, softmax_backward};
use proca_core::prototypes::{Level, PrototypeBank};
use proca_core::pseudolabel::fixed_threshold_labels;
use proca_core::{seed, Tensor};
use proca_oracle::{brute_loss, finite_diff_grad, Similarity};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;
pub const INSTANCES: u64 = 20;
/// Coordinates whose stencil crosses a ReLU kink are not differentiable there.
/// Limits on how many may be skipped, per instance and over a whole suite.
const MAX_FLAGGED_PER_INSTANCE: f64 = 0.5;
const MAX_FLAGGED_OVERALL: f64 = 0.05;

fn random_tensor(rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize, lo: f64, hi: f64) -> Tensor<f64> {
    let data = (0..n * c * h * w).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(n, c, h, w, data)
}

fn random_labels(rng: &mut ChaCha8Rng, len: usize, classes: usize) -> Vec<u8> {
    (0..len)
        .map(|_| if rng.random_bool(0.15) { IGNORE } else { rng.random_range(1..=classes as u8) })
        .collect()
}

fn random_bank(rng: &mut ChaCha8Rng, level: Level, classes: usize, dim: usize, lo: f64, hi: f64) -> PrototypeBank {
    let v = (0..classes * dim).map(|_| rng.random_range(lo..hi)).collect();
    PrototypeBank::from_parts(level, dim, v, vec![1; classes]).unwrap()
}

/// Largest relative error over all instances, both similarity kinds.
pub fn contrast_feature_gradients() -> Result<f64, String> {
    let mut worst: f64 = 0.0;
    for (kind, sim) in [(SimilarityKind::Dot, Similarity::Dot), (SimilarityKind::Cosine, Similarity::Cosine)] {
        for instance in 0..INSTANCES {
            let mut rng = seed::stream(&[11, instance, kind as u64]);
            let (n, h, w) = (2, 3, 3);
            let classes = rng.random_range(2..=4);
            let dim = rng.random_range(2..=6);
            let tau = rng.random_range(0.3..2.0);
            let feats = random_tensor(&mut rng, n, dim, h, w, -1.0, 1.0);
            let mut labels = random_labels(&mut rng, n * h * w, classes);
            labels[0] = 1;
            let bank = random_bank(&mut rng, Level::Feature, classes, dim, -1.0, 1.0);
            let protos = bank_rows(&bank);

            let term = prototype_contrast(&feats, &labels, &bank, tau, kind).unwrap();
            let numeric = finite_diff_grad(
                |x| {
                    let pixels: Vec<Vec<f64>> = x.chunks(dim).map(<[f64]>::to_vec).collect();
                    brute_loss(&pixels, &protos, &labels, tau, sim).value.unwrap()
                },
                &pixel_vectors(&feats).concat(),
                STEP,
            )
            .value;
            let analytic = pixel_vectors(&term.grad).concat();
            let err = max_relative_error(&analytic, &numeric);
            if err > TOLERANCE {
                return Err(format!("{kind:?} instance {instance}: relative error {err:e}"));
            }
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn tiny_model(instance: u64) -> SegModel<f64> {
    let config = ModelConfig { num_classes: 3, widths: [3, 4, 4, 4], strides: [1, 2, 2, 1] };
    SegModel::new(config, seed::mix(&[23, instance])).unwrap()
}

fn relu_pattern(pass: &ForwardPass<f64>) -> Vec<bool> {
    pass.activations().iter().flat_map(|t| t.data.iter().map(|&v| v > 0.0)).collect()
}

/// Finite differences over all parameters of `model` for `loss`. Coordinates
/// whose perturbation changes any ReLU sign pattern are flagged with NaN.
fn parameter_fd<F>(model: &SegModel<f64>, inputs: &[&Tensor<f64>], loss: F) -> Vec<f64>
where
    F: Fn(&SegModel<f64>, &[ForwardPass<f64>]) -> f64,
{
    let base: Vec<Vec<bool>> = inputs.iter().map(|x| relu_pattern(&model.forward(x).unwrap())).collect();
    finite_diff_grad(
        |theta| {
            let m = with_params(model, theta);
            let passes: Vec<ForwardPass<f64>> = inputs.iter().map(|x| m.forward(x).unwrap()).collect();
            if passes.iter().zip(&base).any(|(p, b)| &relu_pattern(p) != b) {
                return f64::NAN;
            }
            loss(&m, &passes)
        },
        &flat_params(model),
        STEP,
    )
    .value
}

#[derive(Default)]
struct Tally {
    flagged: usize,
    total: usize,
    worst: f64,
}

impl Tally {
    fn check(&mut self, analytic: &[f64], numeric: &[f64], what: &str, instance: u64) -> Result<(), String> {
        let flagged = numeric.iter().filter(|v| !v.is_finite()).count();
        if (flagged as f64) > MAX_FLAGGED_PER_INSTANCE * numeric.len() as f64 {
            return Err(format!("{what} instance {instance}: {flagged} of {} coordinates flagged", numeric.len()));
        }
        self.flagged += flagged;
        self.total += numeric.len();
        let err = max_relative_error(analytic, numeric);
        if err > TOLERANCE {
            return Err(format!("{what} instance {instance}: relative error {err:e}"));
        }
        self.worst = self.worst.max(err);
        Ok(())
    }

    fn finish(&self, what: &str) -> Result<f64, String> {
        if (self.flagged as f64) > MAX_FLAGGED_OVERALL * self.total as f64 {
            return Err(format!("{what}: {} of {} coordinates flagged", self.flagged, self.total));
        }
        Ok(self.worst)
    }
}

pub fn cross_entropy_parameter_gradients() -> Result<f64, String> {
    let mut tally = Tally::default();
    for instance in 0..INSTANCES {
        let mut rng = seed::stream(&[31, instance]);
        let model = tiny_model(instance);
        let images = random_tensor(&mut rng, 2, 3, 8, 8, 0.0, 1.0);
        let labels = random_labels(&mut rng, 2 * 64, 3);

        let pass = model.forward(&images).unwrap();
        let (_, dlogits) = supervised_ce_loss_with_grad(&pass.probs, &labels).unwrap();
        let analytic: Vec<f64> = model.backward(&pass, Some(&dlogits), None).tensors.concat();
        let numeric = parameter_fd(&model, &[&images], |_, p| supervised_ce_loss(&p[0].probs, &labels).unwrap());
        tally.check(&analytic, &numeric, "cross-entropy", instance)?;
    }
    tally.finish("cross-entropy")
}

pub fn adaptation_objective_parameter_gradients() -> Result<f64, String> {
    let lambda = 0.5;
    let mut tally = Tally::default();
    for instance in 0..INSTANCES {
        let mut rng = seed::stream(&[41, instance]);
        let model = tiny_model(instance);
        let c = model.config.num_classes;
        let d = model.config.feature_dim();
        let src = random_tensor(&mut rng, 2, 3, 8, 8, 0.0, 1.0);
        let tgt = random_tensor(&mut rng, 2, 3, 8, 8, 0.0, 1.0);
        let s_lab = random_labels(&mut rng, 2 * 64, c);
        let s_lab_f = resize_labels_nearest(&s_lab, 2, (8, 8), (2, 2));
        let feat_bank = random_bank(&mut rng, Level::Feature, c, d, 0.0, 0.5);
        let out_bank = random_bank(&mut rng, Level::Output, c, c, 0.0, 1.0);
        let similarity = if instance % 2 == 0 { SimilarityKind::Dot } else { SimilarityKind::Cosine };
        let config = ContrastConfig { tau_feat: 0.5, tau_out: 0.5, similarity, ..ContrastConfig::default() };

        // Pseudo-labels are a non-differentiable function of the model and are held fixed.
        let t_pass = model.forward(&tgt).unwrap();
        let pseudo = fixed_threshold_labels(&t_pass.probs, 0.34).unwrap();
        let t_lab = pseudo.labels.clone();
        let t_lab_f = pseudo.resized_labels(2, 2);

        let objective = |src_pass: &ForwardPass<f64>, tgt_pass: &ForwardPass<f64>| {
            let feat = LevelInputs { source: &src_pass.features, source_labels: &s_lab_f, target: &tgt_pass.features, target_labels: &t_lab_f };
            let out = LevelInputs { source: &src_pass.probs, source_labels: &s_lab, target: &tgt_pass.probs, target_labels: &t_lab };
            let total = contra_total_loss(&feat, &out, &feat_bank, &out_bank, &config).unwrap();
            let (ce, dl) = supervised_ce_loss_with_grad(&src_pass.probs, &s_lab).unwrap();
            (ce + lambda * total.value(), dl, total)
        };

        let s_pass = model.forward(&src).unwrap();
        let (_, ce_dlogits, total) = objective(&s_pass, &t_pass);
        let scale = |t: &Tensor<f64>| {
            let mut t = t.clone();
            t.scale(lambda);
            t
        };
        let feature = total.feature.as_ref().unwrap();
        let output = total.output.as_ref().unwrap();
        let mut s_dlogits = ce_dlogits;
        s_dlogits.add_assign(&softmax_backward(&s_pass.probs, &scale(&output.s2s.as_ref().unwrap().grad)));
        let s_dfeat = scale(&feature.s2s.as_ref().unwrap().grad);
        let t_dlogits = softmax_backward(&t_pass.probs, &scale(&output.t2s.as_ref().unwrap().grad));
        let t_dfeat = scale(&feature.t2s.as_ref().unwrap().grad);
        let mut grads = model.backward(&s_pass, Some(&s_dlogits), Some(&s_dfeat));
        grads.add_assign(&model.backward(&t_pass, Some(&t_dlogits), Some(&t_dfeat)));
        let analytic = grads.tensors.concat();

        let numeric = parameter_fd(&model, &[&src, &tgt], |_, p| objective(&p[0], &p[1]).0);
        tally.check(&analytic, &numeric, "adaptation objective", instance)?;
    }
    tally.finish("adaptation objective")
}
