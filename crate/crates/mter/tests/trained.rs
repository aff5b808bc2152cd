//! Attack and training behaviour against models fitted on real MNIST.

use std::path::PathBuf;
use std::sync::OnceLock;

use mter::attacks::{fgsm, ftgsm, run_attack, AttackSpec, Iters};
use mter::config::DATA_ENV;
use mter::data::{DatasetSplit, ImageBatch};
use mter::defense::{train, Defense, MterConfig, TrainPlan};
use mter::eval::{accuracy, predict};
use mter_nn::loss::row_sq_distances;
use mter_nn::{Arch, LossConfig, Model, ModelSpec, SgdConfig, Tensor};

fn mnist() -> &'static DatasetSplit {
    static DATA: OnceLock<DatasetSplit> = OnceLock::new();
    DATA.get_or_init(|| {
        let dir = std::env::var_os(DATA_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"));
        DatasetSplit::load_mnist(&dir)
            .unwrap_or_else(|e| panic!("MNIST not readable at {} ({e}); set {DATA_ENV}", dir.display()))
    })
}

/// LeNet-5 after two softmax epochs on 10k training images.
fn trained_lenet() -> &'static Model {
    static MODEL: OnceLock<Model> = OnceLock::new();
    MODEL.get_or_init(|| {
        let mut model = Model::new(ModelSpec::new(Arch::LeNet5, 10), 21).unwrap();
        let plan = TrainPlan {
            defense: Defense::None {
                batch_size: 64,
                base_loss: LossConfig::softmax(),
            },
            sgd: SgdConfig::default(),
            epochs: 2,
            seed: 21,
        };
        train(&mut model, &mnist().train.sample(10_000, 21), &plan, |_, _| Ok(())).unwrap();
        let acc = accuracy(&model, &mnist().test.sample(1000, 1).all()).unwrap();
        assert!(acc > 90.0, "reference model only reached {acc:.2}%");
        model
    })
}

fn embed(model: &Model, batch: &ImageBatch) -> Tensor {
    model.forward(&batch.to_input()).unwrap().embedding
}

/// Sources and targets of equal size with different labels row by row.
fn feature_pairs(n: usize) -> (ImageBatch, ImageBatch) {
    let pool = mnist().test.sample(2 * n + 200, 5).all();
    let src: Vec<usize> = (0..n).collect();
    let mut tgt = Vec::with_capacity(n);
    let mut next = n;
    for &i in &src {
        while pool.labels[next] == pool.labels[i] {
            next += 1;
        }
        tgt.push(next);
        next += 1;
    }
    (pool.select(&src), pool.select(&tgt))
}

#[test]
fn iterative_feature_attack_closes_the_gap_on_most_pairs() {
    let model = trained_lenet();
    let (src, tgt) = feature_pairs(256);
    let spec = AttackSpec::iftgsm(10, tgt).with_trajectory();
    let traj = run_attack(model, &src, &spec).unwrap().trajectory.unwrap();
    let (first, last) = (&traj[0].per_row, &traj[traj.len() - 1].per_row);
    let closer = first.iter().zip(last).filter(|(a, b)| b <= a).count();
    assert!(closer as f64 >= 0.9 * 256.0, "only {closer}/256 pairs moved closer");
}

#[test]
fn single_step_feature_attack_lowers_the_mean_distance() {
    let model = trained_lenet();
    let (src, tgt) = feature_pairs(256);
    let goal = embed(model, &tgt);
    let mean = |b: &ImageBatch| {
        let d = row_sq_distances(&embed(model, b), &goal);
        d.iter().map(|&v| v as f64).sum::<f64>() / d.len() as f64
    };
    let adv = run_attack(model, &src, &AttackSpec::fftgsm(10, tgt.clone())).unwrap().adversarial;
    let (before, after) = (mean(&src), mean(&adv));
    assert!(after < before, "mean distance {before} -> {after}");
}

#[test]
fn targeting_the_predicted_class_keeps_the_prediction() {
    let model = trained_lenet();
    let batch = mnist().test.sample(500, 9).all();
    let predicted = predict(model, &batch).unwrap();
    for eps in 1..=2 {
        let adv = ftgsm(model, &batch, &predicted, eps).unwrap().adversarial;
        assert_eq!(predict(model, &adv).unwrap(), predicted, "epsilon {eps}");
    }
}

#[test]
fn untrained_resnet18_loses_accuracy_under_full_budget() {
    let model = Model::new(ModelSpec::new(Arch::ResNet18, 10), 3).unwrap();
    let batch = mnist().test.sample(500, 3).all();
    let clean = accuracy(&model, &batch).unwrap();
    let attacked = accuracy(&model, &fgsm(&model, &batch, 76).unwrap().adversarial).unwrap();
    assert!(clean - attacked > 0.0, "clean {clean} attacked {attacked}");
}

#[test]
fn active_triplet_fraction_is_reported_per_epoch() {
    let mut model = Model::new(ModelSpec::new(Arch::LeNet5, 10), 31).unwrap();
    let plan = TrainPlan {
        defense: Defense::Mter(MterConfig {
            perturb_iters: Iters::Auto,
            ..MterConfig::default()
        }),
        sgd: SgdConfig::default(),
        epochs: 5,
        seed: 31,
    };
    let stats = train(&mut model, &mnist().train.sample(1000, 31), &plan, |_, _| Ok(())).unwrap();
    let active: Vec<f64> = stats.iter().map(|s| s.active_fraction).collect();
    // Five epochs of 15 steps from scratch keep every triplet active, so no
    // downward trend is asserted here.
    eprintln!("active fraction by epoch: {active:?}");
    assert_eq!(active.len(), 5);
    assert!(active.iter().all(|a| (0.0..=1.0).contains(a)), "{active:?}");
    assert!(stats.iter().all(|s| s.r_mter.is_finite() && s.r_mter >= 0.0));
}
