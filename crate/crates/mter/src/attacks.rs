//! Gradient-sign attacks in the integer pixel domain.
//!
//! Every attack runs on a frozen model in inference mode. Gradients are taken
//! with respect to the `[0, 1]`-scaled input; only their signs are used, and
//! each step moves pixels by a whole number of grey levels before clipping to
//! the `epsilon` box around the clean image.
//!
//! The feature attacks descend `||E(x_s + dx) - E(x_t)||^2`. Written with a
//! plus sign, the single-step update would ascend that distance instead.

use mter_nn::loss::row_sq_distances;
use mter_nn::{compute_gradients, ForwardCtx, LossConfig, Model, Objective, Tensor, IMAGE_PIXELS};

use crate::data::ImageBatch;
use crate::error::{MterError, Result};

/// Rows per forward/backward call inside an attack.
const CHUNK: usize = 128;

/// `min(255, x + eps, max(0, x - eps, x_prime))`.
pub fn clip(x: u8, eps: u8, x_prime: i32) -> u8 {
    let lo = (x as i32 - eps as i32).max(0);
    let hi = (x as i32 + eps as i32).min(255);
    x_prime.max(lo).min(hi) as u8
}

/// Iteration count `max(1, round_half_up(min(eps + 4, 1.25 eps)))`.
pub fn auto_iters(eps: u8) -> usize {
    let eps = eps as usize;
    // round_half_up(5 eps / 4) in integers
    let scaled = (5 * eps + 2) / 4;
    scaled.min(eps + 4).max(1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    Fgsm,
    Bim,
    Ftgsm,
    Itgsm,
    Fftgsm,
    Iftgsm,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Fgsm,
        Method::Bim,
        Method::Ftgsm,
        Method::Itgsm,
        Method::Fftgsm,
        Method::Iftgsm,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Method::Fgsm => "fgsm",
            Method::Bim => "bim",
            Method::Ftgsm => "ftgsm",
            Method::Itgsm => "itgsm",
            Method::Fftgsm => "fftgsm",
            Method::Iftgsm => "iftgsm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.id().eq_ignore_ascii_case(s))
            .ok_or_else(|| MterError::InvalidAttack(format!("unknown attack method {s:?}")))
    }

    pub fn is_iterative(self) -> bool {
        matches!(self, Method::Bim | Method::Itgsm | Method::Iftgsm)
    }

    pub fn is_targeted(self) -> bool {
        !matches!(self, Method::Fgsm | Method::Bim)
    }

    pub fn is_feature(self) -> bool {
        matches!(self, Method::Fftgsm | Method::Iftgsm)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.id())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Iters {
    Auto,
    Fixed(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub enum TargetMode {
    /// Untargeted: ascend the loss of the batch labels.
    None,
    /// Argmin of the clean logits, fixed before the first step.
    LeastLikely,
    FixedLabel(usize),
    Labels(Vec<usize>),
    /// Target images whose embeddings the sources are pulled towards.
    Features(ImageBatch),
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackSpec {
    pub method: Method,
    pub epsilon: u8,
    /// Step in grey levels for the iterative methods; rounded half away from zero.
    pub step_alpha: f32,
    pub iters: Iters,
    pub target: TargetMode,
    pub record_trajectory: bool,
}

impl AttackSpec {
    pub fn new(method: Method, epsilon: u8, target: TargetMode) -> Self {
        Self {
            method,
            epsilon,
            step_alpha: 1.0,
            iters: Iters::Auto,
            target,
            record_trajectory: false,
        }
    }

    pub fn fgsm(epsilon: u8) -> Self {
        Self::new(Method::Fgsm, epsilon, TargetMode::None)
    }

    pub fn bim(epsilon: u8) -> Self {
        Self::new(Method::Bim, epsilon, TargetMode::None)
    }

    pub fn ftgsm(epsilon: u8, target: TargetMode) -> Self {
        Self::new(Method::Ftgsm, epsilon, target)
    }

    pub fn itgsm(epsilon: u8, target: TargetMode) -> Self {
        Self::new(Method::Itgsm, epsilon, target)
    }

    pub fn fftgsm(epsilon: u8, targets: ImageBatch) -> Self {
        Self::new(Method::Fftgsm, epsilon, TargetMode::Features(targets))
    }

    pub fn iftgsm(epsilon: u8, targets: ImageBatch) -> Self {
        Self::new(Method::Iftgsm, epsilon, TargetMode::Features(targets))
    }

    pub fn with_alpha(mut self, alpha: f32) -> Self {
        self.step_alpha = alpha;
        self
    }

    pub fn with_iters(mut self, iters: Iters) -> Self {
        self.iters = iters;
        self
    }

    pub fn with_trajectory(mut self) -> Self {
        self.record_trajectory = true;
        self
    }

    /// Iterations for a row with budget `eps`.
    pub fn iterations_for(&self, eps: u8) -> usize {
        if !self.method.is_iterative() {
            return 1;
        }
        match self.iters {
            Iters::Auto => auto_iters(eps),
            Iters::Fixed(n) => n,
        }
    }

    fn step_for(&self, eps: u8) -> i32 {
        if self.method.is_iterative() {
            self.step_alpha.round() as i32
        } else {
            eps as i32
        }
    }

    pub fn validate(&self, batch_len: usize) -> Result<()> {
        let bad = |msg: String| Err(MterError::InvalidAttack(msg));
        if !self.step_alpha.is_finite() || self.step_alpha < 0.0 {
            return bad(format!("step size must be a non-negative number, got {}", self.step_alpha));
        }
        if self.iters == Iters::Fixed(0) {
            return bad("iteration count must be at least 1".into());
        }
        match (&self.target, self.method) {
            (TargetMode::None, Method::Fgsm | Method::Bim) => Ok(()),
            (_, Method::Fgsm | Method::Bim) => bad(format!("{} is untargeted", self.method)),
            (TargetMode::LeastLikely | TargetMode::FixedLabel(_), Method::Ftgsm | Method::Itgsm) => Ok(()),
            (TargetMode::Labels(l), Method::Ftgsm | Method::Itgsm) => {
                if l.len() == batch_len {
                    Ok(())
                } else {
                    bad(format!("{} target labels for {batch_len} images", l.len()))
                }
            }
            (TargetMode::Features(t), Method::Fftgsm | Method::Iftgsm) => {
                if t.len() == batch_len {
                    Ok(())
                } else {
                    bad(format!("{} target images for {batch_len} source images", t.len()))
                }
            }
            (_, m) if m.is_feature() => bad(format!("{m} needs target images")),
            (_, m) => bad(format!("{m} needs target labels")),
        }
    }
}

/// Objective value after `iteration` steps, averaged over the batch.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryPoint {
    pub iteration: usize,
    /// Mean of `per_row`.
    pub objective: f64,
    pub per_row: Vec<f64>,
    /// Embedding rows `(K, 2)`, recorded for two-dimensional models only.
    pub embedding: Option<Tensor>,
}

#[derive(Clone, Debug)]
pub struct AttackResult {
    pub adversarial: ImageBatch,
    /// `adversarial - source`, per pixel.
    pub perturbation: Vec<i16>,
    /// Point 0 is the clean input.
    pub trajectory: Option<Vec<TrajectoryPoint>>,
    /// Label targets used by the targeted label attacks.
    pub target_labels: Option<Vec<usize>>,
}

impl AttackResult {
    pub fn max_abs_perturbation(&self) -> u8 {
        self.perturbation.iter().map(|d| d.unsigned_abs()).max().unwrap_or(0) as u8
    }
}

/// Objective and input gradient for a subset of rows.
pub struct Probe {
    /// Objective of each probed row.
    pub objectives: Vec<f64>,
    /// `(rows, pixels_per_row)` gradient in the `[0, 1]` input scale.
    pub grad: Option<Vec<f32>>,
    pub embedding: Option<Tensor>,
}

/// Source of objective values and input gradients for the sign-step loop.
pub trait GradientOracle {
    fn pixels_per_row(&self) -> usize;

    /// Evaluates rows `rows` of the batch at `pixels`, which holds those rows
    /// back to back.
    fn probe(&self, pixels: &[u8], rows: &[usize], want_grad: bool) -> Result<Probe>;
}

enum Goal {
    Labels(Vec<usize>),
    Embeddings(Tensor),
}

struct ModelOracle<'a> {
    model: &'a Model,
    goal: Goal,
}

impl GradientOracle for ModelOracle<'_> {
    fn pixels_per_row(&self) -> usize {
        IMAGE_PIXELS
    }

    fn probe(&self, pixels: &[u8], rows: &[usize], want_grad: bool) -> Result<Probe> {
        let x = Model::input_from_pixels(pixels, rows.len())?;
        let labels: Vec<usize>;
        let targets: Tensor;
        let objective = match &self.goal {
            Goal::Labels(all) => {
                labels = rows.iter().map(|&r| all[r]).collect();
                Objective::Classification {
                    labels: &labels,
                    loss: LossConfig::softmax(),
                }
            }
            Goal::Embeddings(all) => {
                targets = all.select_rows(rows);
                Objective::EmbeddingDistance { targets: &targets }
            }
        };
        let (out, grad) = if want_grad {
            let b = compute_gradients(self.model, &x, objective, ForwardCtx::eval(), false)?;
            (b.output, Some(b.wrt_input.into_data()))
        } else {
            (self.model.forward(&x)?, None)
        };
        let objectives = match objective {
            Objective::Classification { labels, .. } => row_cross_entropy(&out.logits, labels),
            Objective::EmbeddingDistance { targets } => {
                row_sq_distances(&out.embedding, targets).into_iter().map(f64::from).collect()
            }
        };
        Ok(Probe {
            objectives,
            grad,
            embedding: Some(out.embedding),
        })
    }
}

fn row_cross_entropy(logits: &Tensor, labels: &[usize]) -> Vec<f64> {
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let row = logits.row(i);
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let sum: f64 = row.iter().map(|&v| ((v - max) as f64).exp()).sum();
            max as f64 + sum.ln() - row[y] as f64
        })
        .collect()
}

/// Per-row schedule for [`run_sign_steps`].
#[derive(Clone, Debug)]
pub struct StepPlan {
    pub budgets: Vec<u8>,
    pub iters: Vec<usize>,
    /// Grey levels moved per step before clipping.
    pub steps: Vec<i32>,
    /// Ascend the objective when set, descend otherwise.
    pub ascend: bool,
    pub record: bool,
    pub record_embeddings: bool,
}

/// Repeated `x <- clip(x0, eps, x +/- step * sign(grad))` over all rows of `source`.
pub fn run_sign_steps<O: GradientOracle>(
    oracle: &O,
    source: &[u8],
    plan: &StepPlan,
) -> Result<(Vec<u8>, Option<Vec<TrajectoryPoint>>)> {
    let width = oracle.pixels_per_row();
    let n = plan.budgets.len();
    assert_eq!(source.len(), n * width, "source size does not match the plan");
    assert!(plan.iters.len() == n && plan.steps.len() == n, "plan vectors differ in length");
    if plan.record {
        assert!(
            plan.iters.windows(2).all(|w| w[0] == w[1]),
            "trajectories need a common iteration count"
        );
    }
    let max_iters = plan.iters.iter().copied().max().unwrap_or(0);
    let mut current = source.to_vec();
    let mut row_objectives = vec![Vec::with_capacity(if plan.record { n } else { 0 }); max_iters + 1];
    let mut snapshots: Vec<Vec<f32>> = vec![Vec::new(); max_iters + 1];

    for start in (0..n).step_by(CHUNK) {
        let end = (start + CHUNK).min(n);
        let chunk_iters = plan.iters[start..end].iter().copied().max().unwrap_or(0);
        for k in 0..chunk_iters {
            let active: Vec<usize> = (start..end).filter(|&r| plan.iters[r] > k).collect();
            let pixels = gather(&current, &active, width);
            let probe = oracle.probe(&pixels, &active, true)?;
            if plan.record {
                record_point(&mut row_objectives[k], &mut snapshots[k], &probe, plan.record_embeddings);
            }
            let grad = probe.grad.expect("gradient requested");
            for (a, &r) in active.iter().enumerate() {
                let g = &grad[a * width..(a + 1) * width];
                let x0 = &source[r * width..(r + 1) * width];
                let x = &mut current[r * width..(r + 1) * width];
                let step = if plan.ascend { plan.steps[r] } else { -plan.steps[r] };
                for ((xv, &orig), &gv) in x.iter_mut().zip(x0).zip(g) {
                    let s = if gv > 0.0 {
                        1
                    } else if gv < 0.0 {
                        -1
                    } else {
                        0
                    };
                    *xv = clip(orig, plan.budgets[r], *xv as i32 + s * step);
                }
            }
        }
        if plan.record {
            let rows: Vec<usize> = (start..end).collect();
            let probe = oracle.probe(&gather(&current, &rows, width), &rows, false)?;
            record_point(
                &mut row_objectives[max_iters],
                &mut snapshots[max_iters],
                &probe,
                plan.record_embeddings,
            );
        }
    }

    let trajectory = plan.record.then(|| {
        row_objectives
            .into_iter()
            .zip(snapshots)
            .enumerate()
            .map(|(iteration, (per_row, snap))| TrajectoryPoint {
                iteration,
                objective: per_row.iter().sum::<f64>() / n.max(1) as f64,
                per_row,
                embedding: plan
                    .record_embeddings
                    .then(|| Tensor::from_vec(&[n, snap.len() / n.max(1)], snap).expect("snapshot rows")),
            })
            .collect()
    });
    Ok((current, trajectory))
}

fn gather(pixels: &[u8], rows: &[usize], width: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(rows.len() * width);
    for &r in rows {
        out.extend_from_slice(&pixels[r * width..(r + 1) * width]);
    }
    out
}

fn record_point(per_row: &mut Vec<f64>, snapshot: &mut Vec<f32>, probe: &Probe, embeddings: bool) {
    per_row.extend_from_slice(&probe.objectives);
    if embeddings {
        if let Some(e) = &probe.embedding {
            snapshot.extend_from_slice(e.data());
        }
    }
}

/// Runs `spec` against every image of `batch` with the spec's own budget.
pub fn run_attack(model: &Model, batch: &ImageBatch, spec: &AttackSpec) -> Result<AttackResult> {
    run_attack_with_budgets(model, batch, spec, &vec![spec.epsilon; batch.len()])
}

/// Like [`run_attack`] with a separate budget per row; automatic iteration
/// counts follow each row's budget.
pub fn run_attack_with_budgets(
    model: &Model,
    batch: &ImageBatch,
    spec: &AttackSpec,
    budgets: &[u8],
) -> Result<AttackResult> {
    spec.validate(batch.len())?;
    if budgets.len() != batch.len() {
        return Err(MterError::InvalidAttack(format!(
            "{} budgets for {} images",
            budgets.len(),
            batch.len()
        )));
    }
    let mut target_labels = None;
    let goal = match &spec.target {
        TargetMode::None => Goal::Labels(batch.labels.clone()),
        TargetMode::LeastLikely => {
            let mut ll = Vec::with_capacity(batch.len());
            for chunk in batch.chunks(CHUNK) {
                ll.extend(model.forward(&chunk.to_input())?.logits.argmin_rows());
            }
            target_labels = Some(ll.clone());
            Goal::Labels(ll)
        }
        TargetMode::FixedLabel(y) => {
            if *y >= model.num_classes() {
                return Err(MterError::InvalidAttack(format!("target class {y} out of range")));
            }
            target_labels = Some(vec![*y; batch.len()]);
            Goal::Labels(vec![*y; batch.len()])
        }
        TargetMode::Labels(l) => {
            if let Some(bad) = l.iter().find(|&&y| y >= model.num_classes()) {
                return Err(MterError::InvalidAttack(format!("target class {bad} out of range")));
            }
            target_labels = Some(l.clone());
            Goal::Labels(l.clone())
        }
        TargetMode::Features(t) => {
            let mut parts = Vec::new();
            for chunk in t.chunks(CHUNK) {
                parts.push(model.forward(&chunk.to_input())?.embedding);
            }
            let refs: Vec<&Tensor> = parts.iter().collect();
            Goal::Embeddings(if refs.is_empty() {
                Tensor::zeros(&[0, model.embed_dim()])
            } else {
                Tensor::concat_rows(&refs)?
            })
        }
    };
    if batch.is_empty() {
        return Ok(AttackResult {
            adversarial: batch.clone(),
            perturbation: Vec::new(),
            trajectory: spec.record_trajectory.then(Vec::new),
            target_labels,
        });
    }
    let plan = StepPlan {
        budgets: budgets.to_vec(),
        iters: budgets.iter().map(|&e| spec.iterations_for(e)).collect(),
        steps: budgets.iter().map(|&e| spec.step_for(e)).collect(),
        ascend: !spec.method.is_targeted(),
        record: spec.record_trajectory,
        record_embeddings: spec.record_trajectory && model.embed_dim() == 2,
    };
    if plan.record && plan.iters.windows(2).any(|w| w[0] != w[1]) {
        return Err(MterError::InvalidAttack(
            "trajectories need the same budget on every row".into(),
        ));
    }
    let oracle = ModelOracle { model, goal };
    let (pixels, trajectory) = run_sign_steps(&oracle, &batch.pixels, &plan)?;
    let perturbation = pixels
        .iter()
        .zip(&batch.pixels)
        .map(|(&a, &s)| a as i16 - s as i16)
        .collect();
    Ok(AttackResult {
        adversarial: ImageBatch {
            pixels,
            labels: batch.labels.clone(),
        },
        perturbation,
        trajectory,
        target_labels,
    })
}

pub fn fgsm(model: &Model, batch: &ImageBatch, epsilon: u8) -> Result<AttackResult> {
    run_attack(model, batch, &AttackSpec::fgsm(epsilon))
}

/// FGSM against the model's own predictions instead of the batch labels.
pub fn fgsm_predicted(model: &Model, batch: &ImageBatch, epsilon: u8) -> Result<AttackResult> {
    let mut predicted = Vec::with_capacity(batch.len());
    for chunk in batch.chunks(CHUNK) {
        predicted.extend(model.forward(&chunk.to_input())?.logits.argmax_rows());
    }
    let relabelled = ImageBatch {
        pixels: batch.pixels.clone(),
        labels: predicted,
    };
    let mut result = fgsm(model, &relabelled, epsilon)?;
    result.adversarial.labels = batch.labels.clone();
    Ok(result)
}

pub fn bim(model: &Model, batch: &ImageBatch, epsilon: u8, step_alpha: f32, iters: Iters) -> Result<AttackResult> {
    run_attack(
        model,
        batch,
        &AttackSpec::bim(epsilon).with_alpha(step_alpha).with_iters(iters),
    )
}

pub fn ftgsm(model: &Model, batch: &ImageBatch, target_labels: &[usize], epsilon: u8) -> Result<AttackResult> {
    run_attack(model, batch, &AttackSpec::ftgsm(epsilon, TargetMode::Labels(target_labels.to_vec())))
}

pub fn itgsm(
    model: &Model,
    batch: &ImageBatch,
    target: TargetMode,
    epsilon: u8,
    step_alpha: f32,
    iters: Iters,
) -> Result<AttackResult> {
    run_attack(
        model,
        batch,
        &AttackSpec::itgsm(epsilon, target).with_alpha(step_alpha).with_iters(iters),
    )
}

pub fn fftgsm(model: &Model, source: &ImageBatch, target: &ImageBatch, epsilon: u8) -> Result<AttackResult> {
    run_attack(model, source, &AttackSpec::fftgsm(epsilon, target.clone()))
}

pub fn iftgsm(
    model: &Model,
    source: &ImageBatch,
    target: &ImageBatch,
    epsilon: u8,
    step_alpha: f32,
    iters: Iters,
) -> Result<AttackResult> {
    run_attack(
        model,
        source,
        &AttackSpec::iftgsm(epsilon, target.clone()).with_alpha(step_alpha).with_iters(iters),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_examples() {
        assert_eq!(clip(100, 10, 115), 110);
        assert_eq!(clip(100, 10, -5), 90);
        assert_eq!(clip(250, 10, 300), 255);
    }

    #[test]
    fn auto_iters_examples() {
        assert_eq!(auto_iters(16), 20);
        assert_eq!(auto_iters(8), 10);
        assert_eq!(auto_iters(76), 80);
        assert_eq!(auto_iters(0), 1);
        assert_eq!(auto_iters(2), 3);
    }

    #[test]
    fn spec_validation() {
        assert!(AttackSpec::fgsm(3).validate(2).is_ok());
        assert!(AttackSpec::new(Method::Fftgsm, 3, TargetMode::LeastLikely).validate(2).is_err());
        assert!(AttackSpec::new(Method::Itgsm, 3, TargetMode::None).validate(2).is_err());
        assert!(AttackSpec::ftgsm(3, TargetMode::Labels(vec![1])).validate(2).is_err());
        assert!(AttackSpec::bim(3).with_iters(Iters::Fixed(0)).validate(1).is_err());
        assert_eq!(Method::parse("IFTGSM").unwrap(), Method::Iftgsm);
    }
}
