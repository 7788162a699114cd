#![allow(dead_code)]

pub mod gradcheck;

use proca_core::model::SegModel;
use proca_core::prototypes::PrototypeBank;
use proca_core::Tensor;

/// Pixel-major copy of an `N × d × H × W` tensor.
pub fn pixel_vectors(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    let hw = t.plane_len();
    let mut out = Vec::with_capacity(t.n * hw);
    for n in 0..t.n {
        for i in 0..hw {
            out.push((0..t.c).map(|c| t.data[(n * t.c + c) * hw + i]).collect());
        }
    }
    out
}

/// Inverse of [`pixel_vectors`].
pub fn from_pixel_vectors(pixels: &[Vec<f64>], n: usize, h: usize, w: usize) -> Tensor<f64> {
    let c = pixels[0].len();
    let hw = h * w;
    let mut t = Tensor::zeros(n, c, h, w);
    for (p, v) in pixels.iter().enumerate() {
        let (img, i) = (p / hw, p % hw);
        for (ch, &x) in v.iter().enumerate() {
            t.data[(img * c + ch) * hw + i] = x;
        }
    }
    t
}

pub fn bank_rows(bank: &PrototypeBank) -> Vec<Vec<f64>> {
    (0..bank.num_classes()).map(|k| bank.vector(k).expect("initialised").to_vec()).collect()
}

pub fn flat_params<T: proca_core::Real>(model: &SegModel<T>) -> Vec<f64> {
    model.params().iter().flat_map(|p| p.iter().map(|v| v.as_f64())).collect()
}

pub fn with_params(model: &SegModel<f64>, flat: &[f64]) -> SegModel<f64> {
    let mut m = model.clone();
    let mut it = flat.iter();
    for p in m.params_mut() {
        for v in p.iter_mut() {
            *v = *it.next().expect("parameter count");
        }
    }
    m
}

/// `max |a − n| / max(‖a‖∞, ‖n‖∞)` over coordinates where `n` is finite.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let mut diff: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for (&a, &n) in analytic.iter().zip(numeric) {
        if !n.is_finite() {
            continue;
        }
        diff = diff.max((a - n).abs());
        scale = scale.max(a.abs()).max(n.abs());
    }
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
