//! Robustness tables, transfer matrices, sweeps, 2-D embedding exports and
//! the open-set verification protocol.

use std::collections::HashSet;

use mter_nn::{Model, ModelSpec, Tensor};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::attacks::{run_attack, run_attack_with_budgets, AttackSpec, Iters, Method, TargetMode};
use crate::data::{Dataset, ImageBatch};
use crate::defense::TrainPlan;
use crate::error::{MterError, Result};
use crate::report::{fmt4, Table};
use crate::seed::derive_rng;

const EVAL_CHUNK: usize = 256;

/// Eval-mode forward over `batch` in chunks; returns logits and embeddings.
pub fn forward_all(model: &Model, batch: &ImageBatch) -> Result<(Tensor, Tensor)> {
    let mut logits = Vec::new();
    let mut embeddings = Vec::new();
    for chunk in batch.chunks(EVAL_CHUNK) {
        let out = model.forward(&chunk.to_input())?;
        logits.push(out.logits);
        embeddings.push(out.embedding);
    }
    if logits.is_empty() {
        return Ok((
            Tensor::zeros(&[0, model.num_classes()]),
            Tensor::zeros(&[0, model.embed_dim()]),
        ));
    }
    let l: Vec<&Tensor> = logits.iter().collect();
    let e: Vec<&Tensor> = embeddings.iter().collect();
    Ok((Tensor::concat_rows(&l)?, Tensor::concat_rows(&e)?))
}

pub fn predict(model: &Model, batch: &ImageBatch) -> Result<Vec<usize>> {
    Ok(forward_all(model, batch)?.0.argmax_rows())
}

pub fn embed(model: &Model, batch: &ImageBatch) -> Result<Tensor> {
    Ok(forward_all(model, batch)?.1)
}

/// Percentage of rows whose prediction equals the batch label.
pub fn accuracy(model: &Model, batch: &ImageBatch) -> Result<f64> {
    let pred = predict(model, batch)?;
    let correct = pred.iter().zip(&batch.labels).filter(|(p, l)| p == l).count();
    Ok(100.0 * correct as f64 / batch.len().max(1) as f64)
}

/// Column name for an attack, e.g. `bim_e76`.
pub fn attack_label(spec: &AttackSpec) -> String {
    format!("{}_e{}", spec.method, spec.epsilon)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RobustnessRow {
    pub model: String,
    pub clean: f64,
    /// Accuracy in attack order.
    pub attacked: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RobustnessReport {
    pub attacks: Vec<String>,
    pub rows: Vec<RobustnessRow>,
}

impl RobustnessReport {
    pub fn new(attacks: &[AttackSpec]) -> Self {
        Self {
            attacks: attacks.iter().map(attack_label).collect(),
            rows: Vec::new(),
        }
    }

    pub fn to_table(&self) -> Table {
        let mut header = vec!["model".to_string(), "clean".to_string()];
        header.extend(self.attacks.iter().cloned());
        let mut t = Table::new(header);
        for r in &self.rows {
            let mut cells = vec![r.model.clone(), fmt4(r.clean)];
            cells.extend(r.attacked.iter().map(|&a| fmt4(a)));
            t.push(cells);
        }
        t
    }
}

/// White-box accuracy of one model under each attack.
pub fn eval_robustness(model_id: &str, model: &Model, test: &ImageBatch, attacks: &[AttackSpec]) -> Result<RobustnessRow> {
    let clean = accuracy(model, test)?;
    let mut attacked = Vec::with_capacity(attacks.len());
    for spec in attacks {
        if spec.method.is_feature() {
            return Err(MterError::InvalidAttack(format!(
                "{} is a feature attack and has no accuracy",
                spec.method
            )));
        }
        let adv = run_attack(model, test, spec)?.adversarial;
        let acc = accuracy(model, &adv)?;
        log::info!("{model_id} {}: {acc:.2}%", attack_label(spec));
        attacked.push(acc);
    }
    Ok(RobustnessRow {
        model: model_id.to_string(),
        clean,
        attacked,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransferMatrix {
    pub sources: Vec<String>,
    pub targets: Vec<String>,
    /// `cells[s][t]`; `None` where source and target are the same model.
    pub cells: Vec<Vec<Option<f64>>>,
    /// SHA-256 of each source's adversarial pixels.
    pub source_digests: Vec<[u8; 32]>,
}

impl TransferMatrix {
    pub fn to_table(&self) -> Table {
        let mut header = vec!["source".to_string()];
        header.extend(self.targets.iter().cloned());
        let mut t = Table::new(header);
        for (s, row) in self.sources.iter().zip(&self.cells) {
            let mut cells = vec![s.clone()];
            cells.extend(row.iter().map(|c| c.map(fmt4).unwrap_or_default()));
            t.push(cells);
        }
        t
    }
}

/// Black-box accuracy of adversarial images crafted once per source model
/// and replayed against every other target model.
pub fn eval_transfer(
    sources: &[(&str, &Model)],
    targets: &[(&str, &Model)],
    attack: &AttackSpec,
    test: &ImageBatch,
) -> Result<TransferMatrix> {
    if !matches!(attack.method, Method::Fgsm | Method::Bim) {
        return Err(MterError::InvalidAttack("transfer evaluation uses FGSM or BIM".into()));
    }
    let mut cells = Vec::with_capacity(sources.len());
    let mut source_digests = Vec::with_capacity(sources.len());
    for (sid, smodel) in sources {
        let adv = run_attack(smodel, test, attack)?.adversarial;
        source_digests.push(Sha256::digest(&adv.pixels).into());
        let mut row = Vec::with_capacity(targets.len());
        for (tid, tmodel) in targets {
            if sid == tid || std::ptr::eq(*smodel, *tmodel) {
                row.push(None);
            } else {
                row.push(Some(accuracy(tmodel, &adv)?));
            }
        }
        cells.push(row);
    }
    Ok(TransferMatrix {
        sources: sources.iter().map(|(s, _)| s.to_string()).collect(),
        targets: targets.iter().map(|(t, _)| t.to_string()).collect(),
        cells,
        source_digests,
    })
}

/// Trains one model per margin with `trainer` and evaluates each.
pub fn margin_sweep<F>(
    spec: ModelSpec,
    margins: &[f32],
    plan: &TrainPlan,
    test: &ImageBatch,
    attacks: &[AttackSpec],
    mut trainer: F,
) -> Result<Vec<(f32, RobustnessRow)>>
where
    F: FnMut(ModelSpec, &TrainPlan) -> Result<Model>,
{
    let mut out = Vec::with_capacity(margins.len());
    for &m in margins {
        if !(0.0..=4.0).contains(&m) {
            return Err(MterError::Config(format!("margin {m} outside [0, 4]")));
        }
        let mut p = *plan;
        match &mut p.defense {
            crate::defense::Defense::Mter(c) => c.margin = m,
            _ => return Err(MterError::Config("margin sweep needs the mter defense".into())),
        }
        let model = trainer(spec, &p)?;
        out.push((m, eval_robustness(&format!("{}_m{m}", spec.arch), &model, test, attacks)?));
    }
    Ok(out)
}

/// Trains one model per architecture with `trainer` and evaluates each.
pub fn arch_sweep<F>(
    specs: &[ModelSpec],
    plan: &TrainPlan,
    test: &ImageBatch,
    attacks: &[AttackSpec],
    mut trainer: F,
) -> Result<Vec<RobustnessRow>>
where
    F: FnMut(ModelSpec, &TrainPlan) -> Result<Model>,
{
    specs
        .iter()
        .map(|&spec| {
            let model = trainer(spec, plan)?;
            eval_robustness(spec.arch.id(), &model, test, attacks)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PointKind {
    Clean,
    Adv,
}

impl PointKind {
    pub fn id(self) -> &'static str {
        match self {
            PointKind::Clean => "clean",
            PointKind::Adv => "adv",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmbedPoint {
    pub kind: PointKind,
    pub class: usize,
    pub epsilon: u8,
    pub e: [f32; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Embed2dExport {
    pub points: Vec<EmbedPoint>,
}

impl Embed2dExport {
    pub fn to_table(&self) -> Table {
        let mut t = Table::new(["kind", "class", "epsilon", "e1", "e2"].map(String::from).to_vec());
        for p in &self.points {
            t.push(vec![
                p.kind.id().to_string(),
                p.class.to_string(),
                p.epsilon.to_string(),
                fmt4(p.e[0] as f64),
                fmt4(p.e[1] as f64),
            ]);
        }
        t
    }

    /// Per-class mean of the clean points.
    pub fn centroids(&self, num_classes: usize) -> Vec<[f64; 2]> {
        let mut sums = vec![[0.0f64; 3]; num_classes];
        for p in self.points.iter().filter(|p| p.kind == PointKind::Clean) {
            let s = &mut sums[p.class];
            s[0] += p.e[0] as f64;
            s[1] += p.e[1] as f64;
            s[2] += 1.0;
        }
        sums.iter()
            .map(|s| {
                let n = s[2].max(1.0);
                [s[0] / n, s[1] / n]
            })
            .collect()
    }

    /// Fraction of adversarial points whose nearest clean centroid is their own class.
    pub fn nearest_centroid_fraction(&self, num_classes: usize) -> f64 {
        let c = self.centroids(num_classes);
        let adv: Vec<&EmbedPoint> = self.points.iter().filter(|p| p.kind == PointKind::Adv).collect();
        let hits = adv
            .iter()
            .filter(|p| {
                let d = |k: usize| (p.e[0] as f64 - c[k][0]).powi(2) + (p.e[1] as f64 - c[k][1]).powi(2);
                (0..num_classes).min_by(|&a, &b| d(a).total_cmp(&d(b))) == Some(p.class)
            })
            .count();
        hits as f64 / adv.len().max(1) as f64
    }
}

/// Clean embeddings of the whole test set plus BIM embeddings of
/// `samples_per_class` images per class at every budget in `0..=max_eps`.
pub fn export_embeddings_2d(
    model: &Model,
    test: &Dataset,
    max_eps: u8,
    samples_per_class: usize,
    seed: u64,
) -> Result<Embed2dExport> {
    if model.embed_dim() != 2 {
        return Err(MterError::WrongEmbedDim(model.embed_dim()));
    }
    let all = test.all();
    let clean = embed(model, &all)?;
    let mut points: Vec<EmbedPoint> = (0..all.len())
        .map(|i| EmbedPoint {
            kind: PointKind::Clean,
            class: all.labels[i],
            epsilon: 0,
            e: [clean.row(i)[0], clean.row(i)[1]],
        })
        .collect();

    let mut rng = derive_rng(seed, "embed2d-samples", 0);
    let mut chosen = Vec::new();
    for class in 0..test.num_classes() {
        let mut idx: Vec<usize> = (0..test.len()).filter(|&i| test.labels()[i] == class).collect();
        idx.shuffle(&mut rng);
        chosen.extend(idx.into_iter().take(samples_per_class));
    }
    let mut rows = Vec::new();
    let mut budgets = Vec::new();
    for &i in &chosen {
        for eps in 0..=max_eps {
            rows.push(i);
            budgets.push(eps);
        }
    }
    let batch = test.batch(&rows);
    let adv = run_attack_with_budgets(model, &batch, &AttackSpec::bim(max_eps), &budgets)?.adversarial;
    let e = embed(model, &adv)?;
    points.extend((0..rows.len()).map(|r| EmbedPoint {
        kind: PointKind::Adv,
        class: batch.labels[r],
        epsilon: budgets[r],
        e: [e.row(r)[0], e.row(r)[1]],
    }));
    Ok(Embed2dExport { points })
}

/// A pair of images and whether they share a class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Pair {
    pub a: usize,
    pub b: usize,
    pub same: bool,
}

/// Every same-class pair plus as many distinct different-class pairs drawn at random.
pub fn sample_pairs(labels: &[usize], seed: u64) -> Vec<Pair> {
    let n = labels.len();
    let mut pairs = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            if labels[a] == labels[b] {
                pairs.push(Pair { a, b, same: true });
            }
        }
    }
    let total_negative = n * n.saturating_sub(1) / 2 - pairs.len();
    let wanted = pairs.len().min(total_negative);
    let mut rng = derive_rng(seed, "negative-pairs", 0);
    let mut seen = HashSet::with_capacity(wanted);
    while seen.len() < wanted {
        let a = rng.random_range(0..n);
        let b = rng.random_range(0..n);
        if labels[a] != labels[b] && seen.insert((a.min(b), a.max(b))) {
            pairs.push(Pair {
                a: a.min(b),
                b: a.max(b),
                same: false,
            });
        }
    }
    pairs
}

/// Euclidean distance between rows of unit-norm embeddings.
pub fn pair_distances(embeddings: &Tensor, pairs: &[Pair]) -> Vec<(f32, bool)> {
    pairs
        .iter()
        .map(|p| (row_distance(embeddings.row(p.a), embeddings.row(p.b)), p.same))
        .collect()
}

fn row_distance(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f32>().sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RocPoint {
    pub threshold: f32,
    pub tar: f64,
    pub far: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Calibration {
    /// A pair is accepted when its distance is strictly below this value.
    pub threshold: f32,
    /// Sorted by descending threshold.
    pub roc: Vec<RocPoint>,
    pub negatives: usize,
    /// Fewer than `1 / far` negatives were available.
    pub insufficient_negatives: bool,
}

impl Calibration {
    pub fn roc_table(&self) -> Table {
        let mut t = Table::new(["threshold", "tar", "far"].map(String::from).to_vec());
        for p in &self.roc {
            t.push(vec![fmt4(p.threshold as f64), fmt4(p.tar), fmt4(p.far)]);
        }
        t
    }

    /// Trapezoidal area under the ROC curve.
    pub fn auc(&self) -> f64 {
        let mut pts: Vec<(f64, f64)> = self.roc.iter().map(|p| (p.far, p.tar)).collect();
        pts.push((0.0, 0.0));
        pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        pts.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum()
    }
}

/// Largest number of false accepts `k` with `k / negatives <= far`.
pub fn allowed_false_accepts(negatives: usize, far: f64) -> usize {
    if negatives == 0 {
        return 0;
    }
    let n = negatives as f64;
    let mut k = ((far * n).floor().max(0.0) as usize).min(negatives);
    while k < negatives && (k + 1) as f64 / n <= far {
        k += 1;
    }
    while k > 0 && k as f64 / n > far {
        k -= 1;
    }
    k
}

/// Largest threshold whose false accept rate is at most `far`, plus the full ROC.
pub fn calibrate_from_distances(scored: &[(f32, bool)], far: f64) -> Result<Calibration> {
    if scored.is_empty() {
        return Err(MterError::ProtocolArg("no pairs to calibrate on".into()));
    }
    if !(far >= 0.0) {
        return Err(MterError::ProtocolArg(format!("false accept rate {far} is not valid")));
    }
    let mut neg: Vec<f32> = scored.iter().filter(|s| !s.1).map(|s| s.0).collect();
    let mut pos: Vec<f32> = scored.iter().filter(|s| s.1).map(|s| s.0).collect();
    neg.sort_by(f32::total_cmp);
    pos.sort_by(f32::total_cmp);
    let max_all = scored.iter().map(|s| s.0).fold(f32::NEG_INFINITY, f32::max);
    let accept_all = max_all.next_up();
    let k = allowed_false_accepts(neg.len(), far);
    let threshold = if k >= neg.len() { accept_all } else { neg[k] };
    let insufficient = (neg.len() as f64) < 1.0 / far;
    if insufficient {
        log::warn!(
            "only {} negative pairs for a false accept rate of {far}; the threshold is coarse",
            neg.len()
        );
    }

    let below = |sorted: &[f32], t: f32| sorted.partition_point(|&d| d < t);
    let mut thresholds: Vec<f32> = scored.iter().map(|s| s.0).collect();
    thresholds.push(accept_all);
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let rate = |count: usize, total: usize| if total == 0 { 0.0 } else { count as f64 / total as f64 };
    let roc = thresholds
        .into_iter()
        .map(|t| RocPoint {
            threshold: t,
            tar: rate(below(&pos, t), pos.len()),
            far: rate(below(&neg, t), neg.len()),
        })
        .collect();
    Ok(Calibration {
        threshold,
        roc,
        negatives: neg.len(),
        insufficient_negatives: insufficient,
    })
}

/// Embeds `images` and calibrates on `pairs` of their rows.
pub fn calibrate_threshold(model: &Model, images: &ImageBatch, pairs: &[Pair], far: f64) -> Result<Calibration> {
    let e = embed(model, images)?;
    calibrate_from_distances(&pair_distances(&e, pairs), far)
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerificationReport {
    pub threshold: f32,
    /// `hits[t][a]` for target `t` and attacker `a`; `None` when both share a class.
    pub hits: Vec<Vec<Option<bool>>>,
    pub per_target: Vec<f64>,
    /// Mean of `per_target`, in percent.
    pub mean: f64,
}

impl VerificationReport {
    pub fn hit_table(&self) -> Table {
        let mut t = Table::new(["target", "attacker", "hit"].map(String::from).to_vec());
        for (ti, row) in self.hits.iter().enumerate() {
            for (ai, h) in row.iter().enumerate() {
                if let Some(h) = h {
                    t.push(vec![ti.to_string(), ai.to_string(), (*h as u8).to_string()]);
                }
            }
        }
        t
    }

    pub fn rate_table(&self) -> Table {
        let mut t = Table::new(["target", "hit_rate"].map(String::from).to_vec());
        for (ti, r) in self.per_target.iter().enumerate() {
            t.push(vec![ti.to_string(), fmt4(*r)]);
        }
        t.push(vec!["mean".into(), fmt4(self.mean)]);
        t
    }
}

/// Attacks every target with every attacker of a different class.
///
/// Feature attacks hit when the adversarial embedding lies strictly within
/// `threshold` of the target's. ITGSM uses the target's predicted class as
/// label and hits when the attacker is classified as that class.
pub fn hit_rate(
    model: &Model,
    attackers: &ImageBatch,
    targets: &ImageBatch,
    method: Method,
    epsilon: u8,
    iters: Iters,
    threshold: f32,
) -> Result<VerificationReport> {
    if !matches!(method, Method::Fftgsm | Method::Iftgsm | Method::Itgsm) {
        return Err(MterError::InvalidAttack(format!(
            "hit rates use FFTGSM, IFTGSM or ITGSM, not {method}"
        )));
    }
    let (target_logits, target_emb) = forward_all(model, targets)?;
    let target_pred = target_logits.argmax_rows();
    let mut hits = Vec::with_capacity(targets.len());
    let mut per_target = Vec::with_capacity(targets.len());
    for t in 0..targets.len() {
        let eligible: Vec<usize> = (0..attackers.len())
            .filter(|&a| attackers.labels[a] != targets.labels[t])
            .collect();
        let sources = attackers.select(&eligible);
        let spec = if method.is_feature() {
            let repeated = targets.select(&vec![t; eligible.len()]);
            AttackSpec::new(method, epsilon, TargetMode::Features(repeated))
        } else {
            AttackSpec::new(method, epsilon, TargetMode::FixedLabel(target_pred[t]))
        }
        .with_iters(iters);
        let adv = run_attack(model, &sources, &spec)?.adversarial;
        let (adv_logits, adv_emb) = forward_all(model, &adv)?;
        let row_hits: Vec<bool> = if method.is_feature() {
            (0..eligible.len())
                .map(|i| row_distance(adv_emb.row(i), target_emb.row(t)) < threshold)
                .collect()
        } else {
            adv_logits.argmax_rows().into_iter().map(|p| p == target_pred[t]).collect()
        };
        let mut row = vec![None; attackers.len()];
        for (&a, &h) in eligible.iter().zip(&row_hits) {
            row[a] = Some(h);
        }
        let count = row_hits.iter().filter(|&&h| h).count();
        per_target.push(100.0 * count as f64 / eligible.len().max(1) as f64);
        hits.push(row);
    }
    let mean = per_target.iter().sum::<f64>() / per_target.len().max(1) as f64;
    Ok(VerificationReport {
        threshold,
        hits,
        per_target,
        mean,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerificationConfig {
    pub far: f64,
    pub method: Method,
    pub epsilon: u8,
    pub iters: Iters,
    /// Probe images used to build calibration pairs.
    pub calibration_images: usize,
    /// Attackers drawn from the probe pool; `None` uses all of it.
    pub attackers: Option<usize>,
    pub seed: u64,
}

impl Default for VerificationConfig {
    fn default() -> Self {
        Self {
            far: 1e-3,
            method: Method::Iftgsm,
            epsilon: 10,
            iters: Iters::Auto,
            calibration_images: 1000,
            attackers: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct VerificationOutcome {
    pub calibration: Calibration,
    pub report: VerificationReport,
    /// Probe-pool rows used as targets, one per class.
    pub target_rows: Vec<usize>,
}

/// Calibrates a threshold on probe pairs, picks one target image per probe
/// class, and measures attacker hit rates against them.
pub fn verification_protocol(model: &Model, probe: &Dataset, cfg: &VerificationConfig) -> Result<VerificationOutcome> {
    let calib = probe.sample(cfg.calibration_images, cfg.seed ^ 0x5ca1);
    let pairs = sample_pairs(calib.labels(), cfg.seed);
    let calibration = calibrate_threshold(model, &calib.all(), &pairs, cfg.far)?;

    let mut rng = derive_rng(cfg.seed, "verification-targets", 0);
    let mut classes: Vec<usize> = probe.labels().to_vec();
    classes.sort_unstable();
    classes.dedup();
    let mut target_rows = Vec::with_capacity(classes.len());
    for &c in &classes {
        let idx: Vec<usize> = (0..probe.len()).filter(|&i| probe.labels()[i] == c).collect();
        target_rows.push(*idx.choose(&mut rng).expect("class present in probe pool"));
    }
    let targets = probe.batch(&target_rows);
    let attacker_rows: Vec<usize> = {
        let mut rest: Vec<usize> = (0..probe.len()).filter(|i| !target_rows.contains(i)).collect();
        if let Some(n) = cfg.attackers {
            rest.shuffle(&mut derive_rng(cfg.seed, "verification-attackers", 0));
            rest.truncate(n);
            rest.sort_unstable();
        }
        rest
    };
    let attackers = probe.batch(&attacker_rows);
    let report = hit_rate(
        model,
        &attackers,
        &targets,
        cfg.method,
        cfg.epsilon,
        cfg.iters,
        calibration.threshold,
    )?;
    Ok(VerificationOutcome {
        calibration,
        report,
        target_rows,
    })
}
