//! Evaluation: accuracy, the A-distance proxy, mean class tokens over
//! augmentations, and causal/non-causal feature distinguishability.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ImageShape;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vit::ViTModel;

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy_from_logits(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let (n, _) = logits.as_matrix();
    if n == 0 || labels.is_empty() {
        return Err(Error::Config("accuracy of an empty set".into()));
    }
    if n != labels.len() {
        return Err(Error::shape("accuracy", format!("{n} predictions, {} labels", labels.len())));
    }
    let hits = (0..n).filter(|&i| argmax(logits.row(i)) == labels[i]).count();
    Ok(hits as f64 / n as f64)
}

/// Goal accuracy of the model on flat `[N × C×H×W]` images.
pub fn accuracy(model: &ViTModel, images: &[f64], labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Config("accuracy of an empty set".into()));
    }
    let out = model.infer(images)?;
    accuracy_from_logits(&out.goal_logits, labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub l2: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { iterations: 300, learning_rate: 0.5, l2: 1e-3 }
    }
}

/// Multinomial logistic regression on standardized features, fitted by
/// full-batch gradient descent with momentum. Deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    dim: usize,
    classes: usize,
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// `[dim × classes]`
    weight: Vec<f64>,
    bias: Vec<f64>,
}

fn gemm(m: usize, k: usize, n: usize, a: &[f64], at: bool, b: &[f64], bt: bool, c: &mut [f64]) {
    let (rsa, csa) = if at { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if bt { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slices cover m×k, k×n, and m×n elements with the given strides.
    unsafe {
        matrixmultiply::dgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, 0.0, c.as_mut_ptr(), n as isize, 1);
    }
}

impl LinearProbe {
    pub fn fit(features: &[f64], dim: usize, labels: &[usize], classes: usize, cfg: &ProbeConfig) -> Result<Self> {
        let n = labels.len();
        if dim == 0 || n == 0 || features.len() != n * dim {
            return Err(Error::shape("linear_probe", format!("{} values for {n} samples of width {dim}", features.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Index(format!("probe label {bad} with {classes} classes")));
        }
        let mut mean = vec![0.0; dim];
        for row in features.chunks(dim) {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut scale = vec![0.0; dim];
        for row in features.chunks(dim) {
            scale.iter_mut().zip(row.iter().zip(&mean)).for_each(|(s, (v, m))| *s += (v - m) * (v - m));
        }
        scale.iter_mut().for_each(|s| {
            let sd = (*s / n as f64).sqrt();
            *s = if sd > 1e-12 { 1.0 / sd } else { 0.0 };
        });
        let mut probe = LinearProbe { dim, classes, mean, scale, weight: vec![0.0; dim * classes], bias: vec![0.0; classes] };
        let x = probe.standardize(features);
        let (mut vw, mut vb) = (vec![0.0; dim * classes], vec![0.0; classes]);
        let mut logits = vec![0.0; n * classes];
        let mut gw = vec![0.0; dim * classes];
        for _ in 0..cfg.iterations {
            gemm(n, dim, classes, &x, false, &probe.weight, false, &mut logits);
            let mut gb = vec![0.0; classes];
            for (i, row) in logits.chunks_mut(classes).enumerate() {
                row.iter_mut().zip(&probe.bias).for_each(|(l, b)| *l += b);
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = row.iter().map(|v| (v - m).exp()).sum();
                for (c, l) in row.iter_mut().enumerate() {
                    *l = ((*l - m).exp() / s - if c == labels[i] { 1.0 } else { 0.0 }) / n as f64;
                    gb[c] += *l;
                }
            }
            gemm(dim, n, classes, &x, true, &logits, false, &mut gw);
            for j in 0..gw.len() {
                vw[j] = 0.9 * vw[j] + gw[j] + cfg.l2 * probe.weight[j];
                probe.weight[j] -= cfg.learning_rate * vw[j];
            }
            for c in 0..classes {
                vb[c] = 0.9 * vb[c] + gb[c];
                probe.bias[c] -= cfg.learning_rate * vb[c];
            }
        }
        Ok(probe)
    }

    fn standardize(&self, features: &[f64]) -> Vec<f64> {
        features
            .chunks(self.dim)
            .flat_map(|row| row.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) * s))
            .collect()
    }

    pub fn predict(&self, features: &[f64]) -> Result<Vec<usize>> {
        if !features.len().is_multiple_of(self.dim) {
            return Err(Error::shape("linear_probe", format!("{} values for width {}", features.len(), self.dim)));
        }
        let n = features.len() / self.dim;
        let x = self.standardize(features);
        let mut logits = vec![0.0; n * self.classes];
        gemm(n, self.dim, self.classes, &x, false, &self.weight, false, &mut logits);
        Ok(logits
            .chunks(self.classes)
            .map(|row| {
                let shifted: Vec<f64> = row.iter().zip(&self.bias).map(|(l, b)| l + b).collect();
                argmax(&shifted)
            })
            .collect())
    }

    pub fn accuracy(&self, features: &[f64], labels: &[usize]) -> Result<f64> {
        let pred = self.predict(features)?;
        if pred.len() != labels.len() || pred.is_empty() {
            return Err(Error::shape("linear_probe", format!("{} predictions, {} labels", pred.len(), labels.len())));
        }
        Ok(pred.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / pred.len() as f64)
    }
}

/// Per-image, per-channel standardization of flat `[N × C×H×W]` images
/// (zero mean, unit variance per channel plane).
pub fn standardize_channels(images: &[f64], shape: ImageShape) -> Result<Vec<f64>> {
    let len = shape.len();
    if len == 0 || !images.len().is_multiple_of(len) {
        return Err(Error::shape("standardize_channels", format!("{} values for images of {len}", images.len())));
    }
    let plane = shape.height * shape.width;
    let mut out = Vec::with_capacity(images.len());
    for ch in images.chunks(plane) {
        let mean = ch.iter().sum::<f64>() / plane as f64;
        let var = ch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / plane as f64;
        let s = (var + 1e-8).sqrt();
        out.extend(ch.iter().map(|v| (v - mean) / s));
    }
    Ok(out)
}

/// Domain-classifier outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ADistanceResult {
    /// `2(1 − 2ε)` clamped to [0, 2].
    pub value: f64,
    /// Held-out error of the domain classifier.
    pub error: f64,
    pub n_a: usize,
    pub n_b: usize,
    /// All features coincide; no classifier was trained.
    pub degenerate: bool,
}

pub const A_DISTANCE_MIN_SAMPLES: usize = 20;

/// `2(1 − 2ε)` clamped to [0, 2].
pub fn a_distance_from_error(error: f64) -> f64 {
    (2.0 * (1.0 - 2.0 * error)).clamp(0.0, 2.0)
}

/// Proxy A-distance between two feature sets (`[N × d]` and `[M × d]`): a
/// logistic domain classifier is trained on a seeded 50/50 split and its
/// held-out error ε gives `2(1 − 2ε)`.
pub fn a_distance(a: &Tensor, b: &Tensor, seed: u64) -> Result<ADistanceResult> {
    let (na, d) = a.as_matrix();
    let (nb, db) = b.as_matrix();
    if d != db {
        return Err(Error::shape("a_distance", format!("feature widths {d} and {db}")));
    }
    if na < A_DISTANCE_MIN_SAMPLES || nb < A_DISTANCE_MIN_SAMPLES {
        return Err(Error::Config(format!("a_distance needs at least {A_DISTANCE_MIN_SAMPLES} samples per side, got {na} and {nb}")));
    }
    let first = a.row(0);
    if a.data().chunks(d).chain(b.data().chunks(d)).all(|r| r == first) {
        return Ok(ADistanceResult { value: 0.0, error: 0.5, n_a: na, n_b: nb, degenerate: true });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ia: Vec<usize> = (0..na).collect();
    let mut ib: Vec<usize> = (0..nb).collect();
    ia.shuffle(&mut rng);
    ib.shuffle(&mut rng);
    let (ta, ha) = ia.split_at(na / 2);
    let (tb, hb) = ib.split_at(nb / 2);
    let collect = |ra: &[usize], rb: &[usize]| {
        let mut x = Vec::with_capacity((ra.len() + rb.len()) * d);
        let mut y = Vec::with_capacity(ra.len() + rb.len());
        for &i in ra {
            x.extend_from_slice(a.row(i));
            y.push(0);
        }
        for &i in rb {
            x.extend_from_slice(b.row(i));
            y.push(1);
        }
        (x, y)
    };
    let (xt, yt) = collect(ta, tb);
    let (xh, yh) = collect(ha, hb);
    let probe = LinearProbe::fit(&xt, d, &yt, 2, &ProbeConfig::default())?;
    let error = 1.0 - probe.accuracy(&xh, &yh)?;
    Ok(ADistanceResult { value: a_distance_from_error(error), error, n_a: na, n_b: nb, degenerate: false })
}

/// Mean class-token feature over an image and its variants (for example its
/// stylized copies).
pub fn mean_class_token(model: &ViTModel, image: &[f64], variants: &[Vec<f64>]) -> Result<Vec<f64>> {
    let mut all = image.to_vec();
    for v in variants {
        if v.len() != image.len() {
            return Err(Error::shape("mean_class_token", format!("variant of {} values, image of {}", v.len(), image.len())));
        }
        all.extend_from_slice(v);
    }
    let out = model.infer(&all)?;
    let (n, d) = out.class_features.as_matrix();
    let mut mean = vec![0.0; d];
    for i in 0..n {
        mean.iter_mut().zip(out.class_features.row(i)).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    Ok(mean)
}

/// Distinguishability of class-token and style-token features within the
/// source and within the target domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub source: ADistanceResult,
    pub target: ADistanceResult,
    /// `|d_src − d_tgt|`
    pub gap: f64,
}

pub fn correlation_preservation(model: &ViTModel, source: &[f64], target: &[f64], seed: u64) -> Result<CorrelationReport> {
    let s = model.infer(source)?;
    let t = model.infer(target)?;
    let ds = a_distance(&s.class_features, &s.style_features, seed)?;
    let dt = a_distance(&t.class_features, &t.style_features, seed)?;
    Ok(CorrelationReport { gap: (ds.value - dt.value).abs(), source: ds, target: dt })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn gaussian(n: usize, d: usize, shift: f64, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let data = (0..n * d).map(|i| normal.sample(&mut rng) + if i % d == 0 { shift } else { 0.0 }).collect();
        Tensor::new([n, d], data).unwrap()
    }

    #[test]
    fn accuracy_edge_cases() {
        let l = Tensor::new([4, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(accuracy_from_logits(&l, &[0, 1, 0, 1]).unwrap(), 1.0);
        assert_eq!(accuracy_from_logits(&l, &[0, 0, 0, 0]).unwrap(), 0.5);
        assert!(accuracy_from_logits(&l, &[]).is_err());
    }

    #[test]
    fn a_distance_arithmetic() {
        assert_eq!(a_distance_from_error(0.25), 1.0);
        assert_eq!(a_distance_from_error(0.0), 2.0);
        assert_eq!(a_distance_from_error(0.7), 0.0);
    }

    #[test]
    fn a_distance_extremes() {
        let a = gaussian(200, 4, 0.0, 1);
        let b = gaussian(200, 4, 0.0, 2);
        assert!(a_distance(&a, &b, 0).unwrap().value < 0.5);
        let far = gaussian(200, 4, 4.0, 3);
        assert!(a_distance(&a, &far, 0).unwrap().value >= 1.8);
        let same = Tensor::full([30, 3], 1.0);
        let r = a_distance(&same, &same, 0).unwrap();
        assert!(r.degenerate && r.value == 0.0);
        assert!(a_distance(&gaussian(10, 4, 0.0, 1), &a, 0).is_err());
    }

    #[test]
    fn probe_learns_separable_classes() {
        let x = gaussian(300, 3, 0.0, 5);
        let labels: Vec<usize> = x.data().chunks(3).map(|r| usize::from(r[1] > 0.0)).collect();
        let p = LinearProbe::fit(x.data(), 3, &labels, 2, &ProbeConfig::default()).unwrap();
        assert!(p.accuracy(x.data(), &labels).unwrap() > 0.97);
    }
}
