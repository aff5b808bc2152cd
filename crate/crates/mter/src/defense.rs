//! Training loops: plain cross-entropy, adversarial training with
//! predicted-label FGSM, and the margin triplet embedding regularizer.

use mter_nn::objective::classification_loss;
use mter_nn::{ForwardCtx, LossConfig, Model, Sgd, SgdConfig, Tensor};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::attacks::{fgsm_predicted, run_attack, AttackSpec, Iters};
use crate::data::{Dataset, ImageBatch};
use crate::error::{MterError, Result};
use crate::seed::{derive_rng, derive_seed};

/// Disjoint class sets; sources are perturbed towards targets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassSplit {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

impl ClassSplit {
    fn side_of(&self, c: usize) -> Option<bool> {
        if self.source.contains(&c) {
            Some(true)
        } else if self.target.contains(&c) {
            Some(false)
        } else {
            None
        }
    }
}

/// Random split with `ceil(C / 2)` source classes.
pub fn split_classes(num_classes: usize, seed: u64) -> Result<ClassSplit> {
    if num_classes < 2 {
        return Err(MterError::TooFewClasses(num_classes));
    }
    let mut classes: Vec<usize> = (0..num_classes).collect();
    classes.shuffle(&mut derive_rng(seed, "class-split", 0));
    let mut target = classes.split_off(num_classes.div_ceil(2));
    let mut source = classes;
    source.sort_unstable();
    target.sort_unstable();
    Ok(ClassSplit { source, target })
}

/// Shuffled sample indices for each side of a [`ClassSplit`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QueuePair {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

impl QueuePair {
    /// Number of batches of `half` sources and `half` targets before a queue runs dry.
    pub fn iterations(&self, half: usize) -> usize {
        self.source.len().min(self.target.len()) / half.max(1)
    }
}

pub fn build_queues(data: &Dataset, split: &ClassSplit, seed: u64) -> Result<QueuePair> {
    let counts = data.class_counts();
    if let Some(&c) = split
        .source
        .iter()
        .chain(&split.target)
        .find(|&&c| counts.get(c).copied().unwrap_or(0) == 0)
    {
        return Err(MterError::EmptyQueue(c));
    }
    let mut source = Vec::new();
    let mut target = Vec::new();
    for (i, &l) in data.labels().iter().enumerate() {
        match split.side_of(l) {
            Some(true) => source.push(i),
            Some(false) => target.push(i),
            None => {}
        }
    }
    source.shuffle(&mut derive_rng(seed, "queue-source", 0));
    target.shuffle(&mut derive_rng(seed, "queue-target", 0));
    Ok(QueuePair { source, target })
}

fn check_triplet_shapes(src: &Tensor, adv: &Tensor, tgt: &Tensor) -> Result<()> {
    if src.shape() != adv.shape() || src.shape() != tgt.shape() || src.shape().len() != 2 {
        return Err(MterError::ShapeMismatch(format!(
            "triplet embeddings {:?}, {:?}, {:?}",
            src.shape(),
            adv.shape(),
            tgt.shape()
        )));
    }
    Ok(())
}

fn sq_dist(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Mean over rows of `max(0, m + ||adv - src||^2 - ||adv - tgt||^2)`.
pub fn mter_regularizer(src: &Tensor, adv: &Tensor, tgt: &Tensor, margin: f32) -> Result<f32> {
    Ok(mter_regularizer_grad(src, adv, tgt, margin)?.value)
}

#[derive(Clone, Debug)]
pub struct RegularizerGrads {
    pub value: f32,
    /// Fraction of rows with a strictly positive hinge.
    pub active_fraction: f32,
    pub wrt_src: Tensor,
    pub wrt_adv: Tensor,
    pub wrt_tgt: Tensor,
}

/// Regularizer value and its gradient with respect to each embedding batch.
/// Rows sitting exactly on the hinge get a zero gradient.
pub fn mter_regularizer_grad(src: &Tensor, adv: &Tensor, tgt: &Tensor, margin: f32) -> Result<RegularizerGrads> {
    check_triplet_shapes(src, adv, tgt)?;
    let n = src.rows();
    let mut wrt_src = Tensor::zeros(src.shape());
    let mut wrt_adv = Tensor::zeros(src.shape());
    let mut wrt_tgt = Tensor::zeros(src.shape());
    let mut total = 0.0f64;
    let mut active = 0usize;
    let scale = 2.0 / n.max(1) as f32;
    for i in 0..n {
        let (s, a, t) = (src.row(i), adv.row(i), tgt.row(i));
        let hinge = margin + sq_dist(a, s) - sq_dist(a, t);
        if hinge <= 0.0 {
            continue;
        }
        total += hinge as f64;
        active += 1;
        let gs = wrt_src.row_mut(i);
        for (g, (&av, &sv)) in gs.iter_mut().zip(a.iter().zip(s)) {
            *g = -scale * (av - sv);
        }
        let gt = wrt_tgt.row_mut(i);
        for (g, (&av, &tv)) in gt.iter_mut().zip(a.iter().zip(t)) {
            *g = scale * (av - tv);
        }
        let ga = wrt_adv.row_mut(i);
        for (g, (&tv, &sv)) in ga.iter_mut().zip(t.iter().zip(s)) {
            *g = scale * (tv - sv);
        }
    }
    Ok(RegularizerGrads {
        value: if n == 0 { 0.0 } else { (total / n as f64) as f32 },
        active_fraction: if n == 0 { 0.0 } else { active as f32 / n as f32 },
        wrt_src,
        wrt_adv,
        wrt_tgt,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    FromScratch,
    Finetune,
}

impl TrainMode {
    pub fn id(self) -> &'static str {
        match self {
            TrainMode::FromScratch => "from_scratch",
            TrainMode::Finetune => "finetune",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "from_scratch" => Ok(TrainMode::FromScratch),
            "finetune" => Ok(TrainMode::Finetune),
            _ => Err(MterError::Config(format!("unknown training mode {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MterConfig {
    /// Required squared-distance gap on the unit sphere, in `[0, 4]`.
    pub margin: f32,
    pub epsilon: u8,
    /// Images per optimizer step, half sources and half targets.
    pub batch_size: usize,
    pub base_loss: LossConfig,
    pub mode: TrainMode,
    /// Perturbation schedule; `Iters::Auto` with step 1 follows the attack default.
    pub perturb_iters: Iters,
    pub perturb_alpha: f32,
}

impl Default for MterConfig {
    fn default() -> Self {
        Self {
            margin: 0.2,
            epsilon: 76,
            batch_size: 64,
            base_loss: LossConfig::softmax(),
            mode: TrainMode::FromScratch,
            perturb_iters: Iters::Auto,
            perturb_alpha: 1.0,
        }
    }
}

impl MterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=4.0).contains(&self.margin) {
            return Err(MterError::Config(format!("margin {} outside [0, 4]", self.margin)));
        }
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return Err(MterError::Config(format!(
                "batch size {} must be even and positive",
                self.batch_size
            )));
        }
        self.base_loss.validate()?;
        Ok(())
    }

    fn perturbation(&self, targets: ImageBatch) -> AttackSpec {
        AttackSpec::iftgsm(self.epsilon, targets)
            .with_alpha(self.perturb_alpha)
            .with_iters(self.perturb_iters)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdvTrainConfig {
    pub epsilon: u8,
    /// Weight of the adversarial half in the loss.
    pub adv_weight: f32,
    pub adv_fraction: f32,
    pub batch_size: usize,
    pub base_loss: LossConfig,
}

impl Default for AdvTrainConfig {
    fn default() -> Self {
        Self {
            epsilon: 76,
            adv_weight: 0.3,
            adv_fraction: 0.5,
            batch_size: 64,
            base_loss: LossConfig::softmax(),
        }
    }
}

impl AdvTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.adv_weight) {
            return Err(MterError::Config(format!("adversarial weight {} outside [0, 1]", self.adv_weight)));
        }
        if !(self.adv_fraction > 0.0 && self.adv_fraction < 1.0) {
            return Err(MterError::Config(format!(
                "adversarial fraction {} outside (0, 1)",
                self.adv_fraction
            )));
        }
        if self.batch_size < 2 {
            return Err(MterError::Config("batch size must be at least 2".into()));
        }
        self.base_loss.validate()?;
        Ok(())
    }

    fn adv_count(&self, batch: usize) -> usize {
        ((batch as f32 * self.adv_fraction).round() as usize).clamp(1, batch - 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Defense {
    None { batch_size: usize, base_loss: LossConfig },
    Adv(AdvTrainConfig),
    Mter(MterConfig),
}

impl Defense {
    pub fn id(&self) -> &'static str {
        match self {
            Defense::None { .. } => "none",
            Defense::Adv(_) => "adv",
            Defense::Mter(_) => "mter",
        }
    }

    pub fn batch_size(&self) -> usize {
        match self {
            Defense::None { batch_size, .. } => *batch_size,
            Defense::Adv(c) => c.batch_size,
            Defense::Mter(c) => c.batch_size,
        }
    }

    pub fn base_loss(&self) -> LossConfig {
        match self {
            Defense::None { base_loss, .. } => *base_loss,
            Defense::Adv(c) => c.base_loss,
            Defense::Mter(c) => c.base_loss,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Defense::None { batch_size, base_loss } => {
                if *batch_size == 0 {
                    return Err(MterError::Config("batch size must be positive".into()));
                }
                Ok(base_loss.validate()?)
            }
            Defense::Adv(c) => c.validate(),
            Defense::Mter(c) => c.validate(),
        }
    }
}

/// Per-epoch means over optimizer steps.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub steps: usize,
    pub l_ori: f64,
    pub r_mter: f64,
    pub active_fraction: f64,
}

#[derive(Default)]
struct StatsAcc {
    steps: usize,
    l_ori: f64,
    r_mter: f64,
    active: f64,
    triplets: f64,
}

impl StatsAcc {
    fn finish(self, epoch: usize) -> EpochStats {
        let steps = self.steps.max(1) as f64;
        EpochStats {
            epoch,
            steps: self.steps,
            l_ori: self.l_ori / steps,
            r_mter: self.r_mter / steps,
            active_fraction: if self.triplets > 0.0 {
                self.active / self.triplets
            } else {
                0.0
            },
        }
    }
}

/// One optimizer step on a train-mode forward of `x`. `losses` maps the
/// forward output to `(l_ori, grad_logits, grad_embedding)`.
fn optimizer_step<F>(model: &mut Model, opt: &mut Sgd, x: &Tensor, rng: &mut ChaCha8Rng, losses: F) -> Result<f32>
where
    F: FnOnce(&Model, &mter_nn::Output) -> Result<(f32, Option<Tensor>, Option<Tensor>)>,
{
    let (output, trace) = model.forward_traced(x, ForwardCtx::train(rng))?;
    let (l_ori, gl, ge) = losses(model, &output)?;
    let mut grads = model.zero_grads();
    model.backward(&trace, gl.as_ref(), ge.as_ref(), Some(&mut grads), false)?;
    if !grads.all_finite() {
        return Err(mter_nn::NnError::NonFiniteGradient("parameters".into()).into());
    }
    opt.step(model.params_mut(), &grads);
    model.apply_bn_updates(trace.bn_updates());
    Ok(l_ori)
}

/// Pads a `(k, c)` gradient with zero rows up to `total` rows.
fn pad_rows(g: Tensor, total: usize) -> Result<Tensor> {
    if g.rows() == total {
        return Ok(g);
    }
    let zeros = Tensor::zeros(&[total - g.rows(), g.row_len()]);
    Ok(Tensor::concat_rows(&[&g, &zeros])?)
}

/// One epoch of plain classification training.
pub fn plain_epoch(
    model: &mut Model,
    opt: &mut Sgd,
    data: &Dataset,
    batch_size: usize,
    loss: LossConfig,
    seed: u64,
    epoch: usize,
) -> Result<EpochStats> {
    let mut rng = derive_rng(seed, "dropout", epoch as u64);
    let mut acc = StatsAcc::default();
    for batch in data.batches(batch_size, derive_seed(seed, "epoch-order", epoch as u64)) {
        let l = optimizer_step(model, opt, &batch.to_input(), &mut rng, |m, out| {
            let (v, g) = classification_loss(m, &out.logits, &batch.labels, &loss)?;
            Ok((v, Some(g), None))
        })?;
        acc.steps += 1;
        acc.l_ori += l as f64;
    }
    Ok(acc.finish(epoch))
}

/// One epoch of adversarial training: a random part of every batch is
/// replaced by predicted-label FGSM images, weighted by `adv_weight`.
pub fn adv_train_epoch(
    model: &mut Model,
    opt: &mut Sgd,
    data: &Dataset,
    cfg: &AdvTrainConfig,
    seed: u64,
    epoch: usize,
) -> Result<EpochStats> {
    cfg.validate()?;
    let mut rng = derive_rng(seed, "dropout", epoch as u64);
    let mut half_rng = derive_rng(seed, "adv-half", epoch as u64);
    let mut acc = StatsAcc::default();
    for batch in data.batches(cfg.batch_size, derive_seed(seed, "epoch-order", epoch as u64)) {
        if batch.len() < 2 {
            continue;
        }
        let mut order: Vec<usize> = (0..batch.len()).collect();
        order.shuffle(&mut half_rng);
        let n_adv = cfg.adv_count(batch.len());
        let adv_src = batch.select(&order[..n_adv]);
        let clean = batch.select(&order[n_adv..]);
        let adv = fgsm_predicted(model, &adv_src, cfg.epsilon)?.adversarial;
        let joint = clean.concat(&adv);
        let n_clean = clean.len();
        let lambda = cfg.adv_weight;
        let l = optimizer_step(model, opt, &joint.to_input(), &mut rng, |m, out| {
            let (lc, mut gc) =
                classification_loss(m, &out.logits.slice_rows(0, n_clean), &clean.labels, &cfg.base_loss)?;
            let (la, mut ga) = classification_loss(
                m,
                &out.logits.slice_rows(n_clean, joint.len()),
                &adv.labels,
                &cfg.base_loss,
            )?;
            gc.scale(1.0 - lambda);
            ga.scale(lambda);
            Ok(((1.0 - lambda) * lc + lambda * la, Some(Tensor::concat_rows(&[&gc, &ga])?), None))
        })?;
        acc.steps += 1;
        acc.l_ori += l as f64;
    }
    Ok(acc.finish(epoch))
}

/// One epoch of margin triplet embedding regularization.
///
/// Class split and queues are rebuilt from `(seed, epoch)`. Each step draws
/// `K/2` sources and `K/2` targets, perturbs the sources towards their paired
/// targets with IFTGSM against the current weights, and minimizes the
/// classification loss on the clean images plus the triplet hinge on
/// `(source, perturbed source, target)` embeddings. Clean and perturbed
/// images share one train-mode forward pass.
pub fn mter_epoch(
    model: &mut Model,
    opt: &mut Sgd,
    data: &Dataset,
    cfg: &MterConfig,
    seed: u64,
    epoch: usize,
) -> Result<EpochStats> {
    cfg.validate()?;
    if data.num_classes() != model.num_classes() {
        return Err(MterError::ShapeMismatch(format!(
            "model has {} classes, data has {}",
            model.num_classes(),
            data.num_classes()
        )));
    }
    let epoch_seed = derive_seed(seed, "mter-epoch", epoch as u64);
    let split = split_classes(data.num_classes(), epoch_seed)?;
    let queues = build_queues(data, &split, epoch_seed)?;
    let half = cfg.batch_size / 2;
    let mut rng = derive_rng(seed, "dropout", epoch as u64);
    let mut acc = StatsAcc::default();
    for it in 0..queues.iterations(half) {
        let bs = data.batch(&queues.source[it * half..(it + 1) * half]);
        let bt = data.batch(&queues.target[it * half..(it + 1) * half]);
        assert!(
            bs.labels.iter().zip(&bt.labels).all(|(s, t)| s != t),
            "source and target share a class"
        );
        let adv = run_attack(model, &bs, &cfg.perturbation(bt.clone()))?.adversarial;
        let clean = bs.concat(&bt);
        let joint = clean.concat(&adv);
        let k = clean.len();
        let mut r_stats = (0.0f32, 0.0f32);
        let l = optimizer_step(model, opt, &joint.to_input(), &mut rng, |m, out| {
            let (l_ori, gl) = classification_loss(m, &out.logits.slice_rows(0, k), &clean.labels, &cfg.base_loss)?;
            let e = &out.embedding;
            let reg = mter_regularizer_grad(
                &e.slice_rows(0, half),
                &e.slice_rows(k, k + half),
                &e.slice_rows(half, k),
                cfg.margin,
            )?;
            r_stats = (reg.value, reg.active_fraction);
            let ge = Tensor::concat_rows(&[&reg.wrt_src, &reg.wrt_tgt, &reg.wrt_adv])?;
            Ok((l_ori, Some(pad_rows(gl, joint.len())?), Some(ge)))
        })?;
        acc.steps += 1;
        acc.l_ori += l as f64;
        acc.r_mter += r_stats.0 as f64;
        acc.active += (r_stats.1 * half as f32) as f64;
        acc.triplets += half as f64;
    }
    Ok(acc.finish(epoch))
}

/// Optimizer steps per epoch, used to place the learning-rate drops.
pub fn steps_per_epoch(defense: &Defense, train_len: usize) -> usize {
    match defense {
        Defense::Mter(c) => train_len / c.batch_size,
        other => train_len.div_ceil(other.batch_size()),
    }
    .max(1)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainPlan {
    pub defense: Defense,
    pub sgd: SgdConfig,
    pub epochs: usize,
    pub seed: u64,
}

/// Runs `plan.epochs` epochs, calling `on_epoch` after each one.
pub fn train<F>(model: &mut Model, data: &Dataset, plan: &TrainPlan, mut on_epoch: F) -> Result<Vec<EpochStats>>
where
    F: FnMut(&Model, &EpochStats) -> Result<()>,
{
    plan.defense.validate()?;
    let total = plan.epochs * steps_per_epoch(&plan.defense, data.len());
    let mut opt = Sgd::new(plan.sgd, model.params(), total);
    let mut all = Vec::with_capacity(plan.epochs);
    for epoch in 0..plan.epochs {
        let stats = match &plan.defense {
            Defense::None { batch_size, base_loss } => {
                plain_epoch(model, &mut opt, data, *batch_size, *base_loss, plan.seed, epoch)?
            }
            Defense::Adv(c) => adv_train_epoch(model, &mut opt, data, c, plan.seed, epoch)?,
            Defense::Mter(c) => mter_epoch(model, &mut opt, data, c, plan.seed, epoch)?,
        };
        log::info!(
            "epoch {} {}: steps {} l_ori {:.4} r_mter {:.4} active {:.3}",
            epoch,
            plan.defense.id(),
            stats.steps,
            stats.l_ori,
            stats.r_mter,
            stats.active_fraction
        );
        on_epoch(model, &stats)?;
        all.push(stats);
    }
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn odd_class_count_puts_extra_class_in_source() {
        let s = split_classes(11, 3).unwrap();
        assert_eq!((s.source.len(), s.target.len()), (6, 5));
        let s = split_classes(2, 3).unwrap();
        assert_eq!((s.source.len(), s.target.len()), (1, 1));
        assert!(matches!(split_classes(1, 0), Err(MterError::TooFewClasses(1))));
    }

    #[test]
    fn iteration_count_follows_shorter_queue() {
        let q = QueuePair {
            source: (0..100).collect(),
            target: (0..60).collect(),
        };
        assert_eq!(q.iterations(20), 3);
    }
}
