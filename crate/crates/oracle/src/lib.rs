//! Brute-force reference computations for tests. Every routine is a plain loop
//! in `f64` over pixel-major data and shares no code with `proca-core`.
//!
//! Labels follow the dataset convention: `0` is ignore, classes are `1..=C`.

/// A reference value together with how it was obtained.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleResult<V> {
    pub value: V,
    pub method: &'static str,
}

impl<V> OracleResult<V> {
    fn new(value: V, method: &'static str) -> Self {
        Self { value, method }
    }
}

/// Mean feature of pixels labelled `class`; `None` when no pixel has that label.
pub fn brute_centroid(features: &[Vec<f64>], labels: &[u8], class: u8) -> OracleResult<Option<Vec<f64>>> {
    let mut sum: Option<Vec<f64>> = None;
    let mut count = 0usize;
    for p in 0..labels.len() {
        if labels[p] != class {
            continue;
        }
        let f = &features[p];
        let acc = sum.get_or_insert_with(|| vec![0.0; f.len()]);
        for j in 0..f.len() {
            acc[j] += f[j];
        }
        count += 1;
    }
    let value = sum.map(|mut s| {
        for v in s.iter_mut() {
            *v /= count as f64;
        }
        s
    });
    OracleResult::new(value, "double loop over pixels, sum then divide")
}

/// Pixel count per class `1..=num_classes` (index 0 is class 1).
pub fn brute_tally(labels: &[u8], num_classes: usize) -> Vec<u64> {
    let mut out = vec![0u64; num_classes];
    for class in 1..=num_classes {
        for &l in labels {
            if l as usize == class {
                out[class - 1] += 1;
            }
        }
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Prototype similarity used by the loss oracle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Similarity {
    Dot,
    Cosine,
}

/// Softmax over prototypes of `sim(p_c, f)/tau` for one pixel.
pub fn brute_similarity_row(feature: &[f64], prototypes: &[Vec<f64>], tau: f64, sim: Similarity) -> Vec<f64> {
    let mut z = Vec::with_capacity(prototypes.len());
    for p in prototypes {
        let s = match sim {
            Similarity::Dot => dot(p, feature),
            Similarity::Cosine => {
                let d = norm(p) * norm(feature);
                if d > 0.0 {
                    dot(p, feature) / d
                } else {
                    0.0
                }
            }
        };
        z.push(s / tau);
    }
    let mut max = f64::NEG_INFINITY;
    for &v in &z {
        if v > max {
            max = v;
        }
    }
    let mut total = 0.0;
    let mut e = Vec::with_capacity(z.len());
    for &v in &z {
        let x = (v - max).exp();
        e.push(x);
        total += x;
    }
    for x in e.iter_mut() {
        *x /= total;
    }
    e
}

/// Mean over labelled pixels of `−log P_y`, with `P_y` clamped below at 1e-12.
/// `None` when no pixel carries a label.
pub fn brute_loss(
    features: &[Vec<f64>],
    prototypes: &[Vec<f64>],
    labels: &[u8],
    tau: f64,
    sim: Similarity,
) -> OracleResult<Option<f64>> {
    let mut total = 0.0;
    let mut count = 0usize;
    for p in 0..labels.len() {
        if labels[p] == 0 {
            continue;
        }
        let row = brute_similarity_row(&features[p], prototypes, tau, sim);
        let py = row[labels[p] as usize - 1].max(1e-12);
        total += -py.ln();
        count += 1;
    }
    let value = (count > 0).then(|| total / count as f64);
    OracleResult::new(value, "per-pixel softmax over prototypes, mean negative log")
}

/// Central differences `(f(x + h e_i) − f(x − h e_i)) / 2h`. Coordinates whose
/// evaluations are not finite are reported as `NaN`.
pub fn finite_diff_grad<F: FnMut(&[f64]) -> f64>(mut loss_fn: F, params: &[f64], step: f64) -> OracleResult<Vec<f64>> {
    let mut x = params.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + step;
        let plus = loss_fn(&x);
        x[i] = orig - step;
        let minus = loss_fn(&x);
        x[i] = orig;
        let g = (plus - minus) / (2.0 * step);
        grad.push(if plus.is_finite() && minus.is_finite() { g } else { f64::NAN });
    }
    OracleResult::new(grad, "central differences per coordinate")
}

/// Per class: sort ascending, then read the value that leaves the top
/// `max(1, ⌈η·l⌉)` entries at or above it. `None` for empty classes.
pub fn brute_threshold(confidences_by_class: &[Vec<f64>], eta: f64) -> OracleResult<Vec<Option<f64>>> {
    let mut out = Vec::with_capacity(confidences_by_class.len());
    for list in confidences_by_class {
        if list.is_empty() {
            out.push(None);
            continue;
        }
        let mut sorted = list.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let l = sorted.len();
        let mut keep = 1;
        while keep < l && (keep as f64) < eta * l as f64 {
            keep += 1;
        }
        out.push(Some(sorted[l - keep]));
    }
    OracleResult::new(out, "ascending sort, index from the top")
}

/// IoU per class `1..=num_classes` by direct counting; `None` where the union is empty.
/// Pixels with ground truth 0 are skipped.
pub fn brute_iou(truth: &[u8], pred: &[u8], num_classes: usize) -> OracleResult<Vec<Option<f64>>> {
    let mut out = Vec::with_capacity(num_classes);
    for class in 1..=num_classes as u8 {
        let (mut inter, mut union) = (0u64, 0u64);
        for p in 0..truth.len() {
            if truth[p] == 0 {
                continue;
            }
            let t = truth[p] == class;
            let q = pred[p] == class;
            if t && q {
                inter += 1;
            }
            if t || q {
                union += 1;
            }
        }
        out.push((union > 0).then(|| inter as f64 / union as f64));
    }
    OracleResult::new(out, "per-class intersection and union counts")
}

pub fn brute_miou(truth: &[u8], pred: &[u8], num_classes: usize) -> f64 {
    let ious = brute_iou(truth, pred, num_classes).value;
    let mut sum = 0.0;
    let mut n = 0;
    for v in ious.into_iter().flatten() {
        sum += v;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Two-sample Kolmogorov–Smirnov statistic.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut xs = a.to_vec();
    let mut ys = b.to_vec();
    xs.sort_by(|p, q| p.partial_cmp(q).unwrap());
    ys.sort_by(|p, q| p.partial_cmp(q).unwrap());
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < xs.len() && j < ys.len() {
        let v = xs[i].min(ys[j]);
        while i < xs.len() && xs[i] <= v {
            i += 1;
        }
        while j < ys.len() && ys[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / xs.len() as f64 - j as f64 / ys.len() as f64).abs());
    }
    d
}

/// Null distribution of the KS statistic for samples of sizes `n_a` and `n_b`,
/// estimated by splitting random permutations of `pool`. Returns the `q` quantile.
pub fn ks_null_quantile(pool: &[f64], n_a: usize, n_b: usize, resamples: usize, q: f64, seed: u64) -> f64 {
    let mut state = seed ^ 0x9e37_79b9_7f4a_7c15;
    let mut next = move || {
        // xorshift64*
        state ^= state >> 12;
        state ^= state << 25;
        state ^= state >> 27;
        state.wrapping_mul(0x2545_f491_4f6c_dd1d)
    };
    let mut work = pool.to_vec();
    let mut stats = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        for i in (1..work.len()).rev() {
            let j = (next() % (i as u64 + 1)) as usize;
            work.swap(i, j);
        }
        stats.push(ks_statistic(&work[..n_a], &work[n_a..n_a + n_b]));
    }
    stats.sort_by(|p, q| p.partial_cmp(q).unwrap());
    let idx = ((q * resamples as f64).ceil() as usize).clamp(1, resamples) - 1;
    stats[idx]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centroid_hand_cases() {
        let f = vec![vec![1.0, 0.0], vec![3.0, 0.0], vec![9.0, 9.0]];
        assert_eq!(brute_centroid(&f, &[1, 1, 2], 1).value, Some(vec![2.0, 0.0]));
        assert_eq!(brute_centroid(&f, &[1, 1, 2], 2).value, Some(vec![9.0, 9.0]));
        assert_eq!(brute_centroid(&f, &[1, 1, 2], 3).value, None);
    }

    #[test]
    fn finite_difference_known_derivatives() {
        let g = finite_diff_grad(|x| 0.5 * x[0] * x[0], &[3.0], 1e-4).value;
        assert!((g[0] - 3.0).abs() < 1e-6);
        let g = finite_diff_grad(|x| 2.0 * x[0] - 5.0 * x[1], &[0.3, -1.0], 1e-4).value;
        assert!((g[0] - 2.0).abs() < 1e-9 && (g[1] + 5.0).abs() < 1e-9);
        let g = finite_diff_grad(|x| if x[0] > 0.0 { f64::NAN } else { x[0] }, &[0.0], 1e-4).value;
        assert!(g[0].is_nan());
    }

    #[test]
    fn threshold_rank_example() {
        let t = brute_threshold(&[vec![0.95, 0.9, 0.8, 0.6, 0.4], vec![]], 0.6).value;
        assert_eq!(t, vec![Some(0.8), None]);
    }

    #[test]
    fn loss_two_prototypes() {
        let protos = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let row = brute_similarity_row(&[1.0, 0.0], &protos, 1.0, Similarity::Dot);
        assert!((row[0] - 0.731_058_578_630_004_9).abs() < 1e-12);
        let l = brute_loss(&[vec![1.0, 0.0]], &protos, &[1], 1.0, Similarity::Dot).value.unwrap();
        assert!((l - 0.313_261_687_518_222_8).abs() < 1e-12);
    }

    #[test]
    fn iou_worked_example() {
        // truth class 1 on 3 pixels, prediction class 1 on 4 pixels, overlap 2.
        let truth = [1, 1, 1, 2, 2, 2];
        let pred = [1, 1, 2, 1, 1, 2];
        assert_eq!(brute_iou(&truth, &pred, 2).value[0], Some(0.4));
    }

    #[test]
    fn ks_basics() {
        assert_eq!(ks_statistic(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert_eq!(ks_statistic(&[0.0, 0.0], &[1.0, 1.0]), 1.0);
        let pool: Vec<f64> = (0..200).map(|i| i as f64).collect();
        let q = ks_null_quantile(&pool, 100, 100, 200, 0.99, 1);
        assert!(q > 0.0 && q < 0.5);
    }
}
