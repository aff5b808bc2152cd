//! Training objectives. Every function returns the scalar loss together with
//! the gradient of that loss with respect to its first tensor argument.

use crate::error::{NnError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    SoftmaxCe,
    ArcFace,
}

impl LossKind {
    pub fn id(self) -> &'static str {
        match self {
            LossKind::SoftmaxCe => "softmax",
            LossKind::ArcFace => "arcface",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "softmax" | "softmax_ce" => Some(LossKind::SoftmaxCe),
            "arcface" => Some(LossKind::ArcFace),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Feature scale `s` of the additive angular margin loss.
    pub arc_scale: f32,
    /// Additive angular margin in radians.
    pub arc_margin: f32,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::SoftmaxCe,
            arc_scale: 10.0,
            arc_margin: 0.4,
        }
    }
}

impl LossConfig {
    pub fn softmax() -> Self {
        Self::default()
    }

    pub fn arcface(scale: f32, margin: f32) -> Self {
        Self {
            kind: LossKind::ArcFace,
            arc_scale: scale,
            arc_margin: margin,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.arc_scale > 0.0) {
            return Err(NnError::InvalidLossConfig(format!(
                "arc_scale must be positive, got {}",
                self.arc_scale
            )));
        }
        if !(0.0..std::f32::consts::FRAC_PI_2).contains(&self.arc_margin) {
            return Err(NnError::InvalidLossConfig(format!(
                "arc_margin must lie in [0, pi/2), got {}",
                self.arc_margin
            )));
        }
        Ok(())
    }
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(NnError::ShapeMismatch {
            expected: vec![rows],
            actual: vec![labels.len()],
        });
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(NnError::LabelOutOfRange { label, classes });
    }
    Ok(())
}

/// Mean negative log-softmax probability of the true class.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f32, Tensor)> {
    let n = logits.rows();
    let c = logits.row_len();
    check_labels(labels, n, c)?;
    let mut grad = Tensor::zeros(logits.shape());
    if n == 0 {
        return Ok((0.0, grad));
    }
    let mut total = 0.0f64;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let sum: f64 = row.iter().map(|&v| ((v - max) as f64).exp()).sum();
        let log_z = max as f64 + sum.ln();
        total += log_z - row[y] as f64;
        let g = grad.row_mut(i);
        for (j, gv) in g.iter_mut().enumerate() {
            let p = ((row[j] as f64) - log_z).exp();
            *gv = ((p - if j == y { 1.0 } else { 0.0 }) / n as f64) as f32;
        }
    }
    Ok(((total / n as f64) as f32, grad))
}

/// `cos(acos(c) + m)`, falling back to the linear extension `c - m sin m`
/// once `acos(c) + m` would pass pi, which keeps the target logit monotone.
fn margin_cosine(c: f32, margin: f32) -> f32 {
    let (sm, cm) = margin.sin_cos();
    let threshold = (std::f32::consts::PI - margin).cos();
    if c > threshold {
        let sin = (1.0 - c * c).max(0.0).sqrt();
        c * cm - sin * sm
    } else {
        c - margin * sm
    }
}

fn margin_cosine_grad(c: f32, margin: f32) -> f32 {
    let (sm, cm) = margin.sin_cos();
    let threshold = (std::f32::consts::PI - margin).cos();
    if c > threshold {
        let cc = c.clamp(-1.0 + 1e-6, 1.0 - 1e-6);
        cm + cc * sm / (1.0 - cc * cc).sqrt()
    } else {
        1.0
    }
}

/// Additive angular margin loss on a matrix of cosines `(N, C)`.
///
/// The true-class logit is `s * cos(theta_y + m)`, every other logit `s * cos(theta_j)`.
/// Returns the mean loss and its gradient with respect to the cosines.
pub fn arcface_from_cosines(cosines: &Tensor, labels: &[usize], cfg: &LossConfig) -> Result<(f32, Tensor)> {
    cfg.validate()?;
    let n = cosines.rows();
    let c = cosines.row_len();
    check_labels(labels, n, c)?;
    let mut logits = cosines.clone();
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row_mut(i);
        row[y] = margin_cosine(row[y], cfg.arc_margin);
        row.iter_mut().for_each(|v| *v *= cfg.arc_scale);
    }
    let (loss, mut grad) = softmax_cross_entropy(&logits, labels)?;
    for (i, &y) in labels.iter().enumerate() {
        let cy = cosines.row(i)[y];
        let row = grad.row_mut(i);
        row.iter_mut().for_each(|v| *v *= cfg.arc_scale);
        row[y] *= margin_cosine_grad(cy, cfg.arc_margin);
    }
    Ok((loss, grad))
}

/// Gradients of [`loss_arcface`].
#[derive(Clone, Debug)]
pub struct ArcFaceGrads {
    pub loss: f32,
    pub wrt_embedding: Tensor,
    pub wrt_class_weights: Tensor,
}

/// Additive angular margin loss from raw embeddings and class weights.
///
/// Both operands are row-normalized before use, so the gradients include the
/// projection through the normalization.
pub fn loss_arcface(
    embedding: &Tensor,
    class_weights: &Tensor,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<ArcFaceGrads> {
    let d = embedding.row_len();
    if class_weights.row_len() != d {
        return Err(NnError::ShapeMismatch {
            expected: vec![class_weights.rows(), d],
            actual: class_weights.shape().to_vec(),
        });
    }
    let (e_hat, e_norm) = normalize_rows(embedding);
    let (w_hat, w_norm) = normalize_rows(class_weights);
    let n = embedding.rows();
    let c = class_weights.rows();
    let mut cos = Tensor::zeros(&[n, c]);
    for i in 0..n {
        for j in 0..c {
            cos.row_mut(i)[j] = dot(e_hat.row(i), w_hat.row(j));
        }
    }
    let (loss, gcos) = arcface_from_cosines(&cos, labels, cfg)?;
    let mut ge_hat = Tensor::zeros(embedding.shape());
    let mut gw_hat = Tensor::zeros(class_weights.shape());
    for i in 0..n {
        for j in 0..c {
            let g = gcos.row(i)[j];
            axpy(g, w_hat.row(j), ge_hat.row_mut(i));
            axpy(g, e_hat.row(i), gw_hat.row_mut(j));
        }
    }
    Ok(ArcFaceGrads {
        loss,
        wrt_embedding: normalize_rows_backward(&e_hat, &e_norm, &ge_hat),
        wrt_class_weights: normalize_rows_backward(&w_hat, &w_norm, &gw_hat),
    })
}

/// Mean over rows of `||e_i - t_i||^2`.
pub fn embedding_distance(embedding: &Tensor, targets: &Tensor) -> Result<(f32, Tensor)> {
    if embedding.shape() != targets.shape() {
        return Err(NnError::ShapeMismatch {
            expected: embedding.shape().to_vec(),
            actual: targets.shape().to_vec(),
        });
    }
    let n = embedding.rows().max(1) as f32;
    let mut grad = Tensor::zeros(embedding.shape());
    let mut total = 0.0;
    for ((g, &e), &t) in grad.data_mut().iter_mut().zip(embedding.data()).zip(targets.data()) {
        let d = e - t;
        total += d * d;
        *g = 2.0 * d / n;
    }
    Ok((total / n, grad))
}

/// Squared Euclidean distance of every row pair.
pub fn row_sq_distances(a: &Tensor, b: &Tensor) -> Vec<f32> {
    (0..a.rows())
        .map(|i| a.row(i).iter().zip(b.row(i)).map(|(x, y)| (x - y) * (x - y)).sum())
        .collect()
}

pub const NORM_EPS: f32 = 1e-12;

/// Divides each row by `sqrt(||row||^2 + 1e-12)`; returns the result and the divisors.
pub fn normalize_rows(x: &Tensor) -> (Tensor, Vec<f32>) {
    let mut out = x.clone();
    let mut norms = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let r = out.row_mut(i);
        let norm = (r.iter().map(|v| v * v).sum::<f32>() + NORM_EPS).sqrt();
        r.iter_mut().for_each(|v| *v /= norm);
        norms.push(norm);
    }
    (out, norms)
}

/// Backward of [`normalize_rows`]: `(g - y (y . g)) / norm` per row.
pub fn normalize_rows_backward(normalized: &Tensor, norms: &[f32], grad: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(grad.shape());
    for i in 0..grad.rows() {
        let y = normalized.row(i);
        let g = grad.row(i);
        let proj = dot(y, g);
        for ((o, &gv), &yv) in out.row_mut(i).iter_mut().zip(g).zip(y) {
            *o = (gv - yv * proj) / norms[i];
        }
    }
    out
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f32]) -> Tensor {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn uniform_logits_give_log_classes() {
        let (loss, _) = softmax_cross_entropy(&Tensor::zeros(&[3, 10]), &[0, 4, 9]).unwrap();
        assert!((loss - 10f32.ln()).abs() < 1e-6);
        assert!((loss - 2.3026).abs() < 1e-4);
    }

    #[test]
    fn dominant_true_logit_gives_zero_loss() {
        let mut logits = Tensor::zeros(&[1, 10]);
        logits.row_mut(0)[3] = 1000.0;
        let (loss, _) = softmax_cross_entropy(&logits, &[3]).unwrap();
        assert!(loss.abs() < 1e-6);
    }

    #[test]
    fn small_softmax_matches_hand_arithmetic() {
        // -log(e^3 / (e^1 + e^2 + e^3)) evaluated in f64.
        let oracle = {
            let z: f64 = [1f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
            -(3f64.exp() / z).ln()
        };
        assert!((oracle - 0.40761).abs() < 1e-5);
        let (loss, grad) = softmax_cross_entropy(&t(&[1, 3], &[1.0, 2.0, 3.0]), &[2]).unwrap();
        assert!((loss as f64 - oracle).abs() < 1e-6);
        assert!(grad.data().iter().sum::<f32>().abs() < 1e-6);
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        assert!(matches!(
            softmax_cross_entropy(&Tensor::zeros(&[1, 3]), &[3]),
            Err(NnError::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn arcface_zero_margin_equals_scaled_cosine_softmax() {
        let cos = t(&[2, 3], &[0.3, -0.2, 0.9, -0.5, 0.1, 0.4]);
        let cfg = LossConfig::arcface(10.0, 0.0);
        let (a, ga) = arcface_from_cosines(&cos, &[2, 0], &cfg).unwrap();
        let mut scaled = cos.clone();
        scaled.scale(10.0);
        let (b, mut gb) = softmax_cross_entropy(&scaled, &[2, 0]).unwrap();
        gb.scale(10.0);
        assert!((a - b).abs() < 1e-6);
        for (x, y) in ga.data().iter().zip(gb.data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn arcface_aligned_embedding_closed_form() {
        let c = 10;
        let mut cos = Tensor::full(&[1, c], -1.0);
        cos.row_mut(0)[0] = 1.0;
        let (loss, _) = arcface_from_cosines(&cos, &[0], &LossConfig::arcface(10.0, 0.4)).unwrap();
        let pos = (10.0f64 * 0.4f64.cos()).exp();
        let oracle = -(pos / (pos + (c as f64 - 1.0) * (-10.0f64).exp())).ln();
        assert!((loss as f64 - oracle).abs() < 1e-7, "{loss} vs {oracle}");
    }

    #[test]
    fn arcface_orthogonal_two_class_is_ln2() {
        let emb = t(&[1, 3], &[0.0, 0.0, 1.0]);
        let w = t(&[2, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let out = loss_arcface(&emb, &w, &[1], &LossConfig::arcface(10.0, 0.0)).unwrap();
        assert!((out.loss - 2f32.ln()).abs() < 1e-6);
    }

    #[test]
    fn arcface_config_is_validated() {
        assert!(LossConfig::arcface(0.0, 0.4).validate().is_err());
        assert!(LossConfig::arcface(10.0, 1.6).validate().is_err());
        assert!(LossConfig::arcface(10.0, 0.4).validate().is_ok());
    }

    #[test]
    fn normalization_gradient_matches_finite_differences() {
        let x = t(&[1, 3], &[0.3, -1.2, 0.7]);
        let w = [0.5f32, 0.25, -1.0];
        let f = |x: &Tensor| -> f64 {
            let (y, _) = normalize_rows(x);
            y.data().iter().zip(&w).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
        };
        let (y, norms) = normalize_rows(&x);
        let g = normalize_rows_backward(&y, &norms, &t(&[1, 3], &w));
        for k in 0..3 {
            let h = 1e-3;
            let mut xp = x.clone();
            xp.data_mut()[k] += h;
            let mut xm = x.clone();
            xm.data_mut()[k] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h as f64);
            assert!((fd - g.data()[k] as f64).abs() < 1e-3, "{fd} vs {}", g.data()[k]);
        }
    }

    #[test]
    fn embedding_distance_gradient_is_zero_at_target() {
        let e = t(&[2, 2], &[0.6, 0.8, 1.0, 0.0]);
        let (d, g) = embedding_distance(&e, &e).unwrap();
        assert_eq!(d, 0.0);
        assert!(g.data().iter().all(|v| *v == 0.0));
    }
}
