use std::path::PathBuf;

use mter::checkpoint::{self, Provenance};
use mter::config::RunConfig;
use mter::data::{Dataset, SplitKind};
use mter::defense::{self, Defense, EpochStats, TrainMode, TrainPlan};
use mter::eval::accuracy;
use mter::report::{fmt4, Table};
use mter::seed::derive_seed;
use mter::{MterError, Result};
use mter_nn::{Model, ModelSpec};

use crate::{load_data, user, CliResult};

pub const CHECKPOINT_NAME: &str = "model.ckpt";
pub const LOG_NAME: &str = "train_log.csv";

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub epochs: Vec<EpochStats>,
}

pub fn provenance(cfg: &RunConfig, plan: &TrainPlan) -> Provenance {
    let (margin, epsilon) = match &plan.defense {
        Defense::None { .. } => (0.0, 0),
        Defense::Adv(c) => (0.0, c.epsilon as u32),
        Defense::Mter(c) => (c.margin, c.epsilon as u32),
    };
    Provenance {
        defense: plan.defense.id().into(),
        mode: cfg.train.mode.clone(),
        margin,
        epsilon,
        loss: cfg.model.loss.clone(),
        arc_scale: cfg.model.arc_scale,
        arc_margin: cfg.model.arc_margin,
        seed: plan.seed,
        epochs: plan.epochs as u32,
    }
}

/// Fresh model for `spec`, or the configured starting checkpoint.
pub fn initial_model(cfg: &RunConfig, spec: ModelSpec) -> Result<Model> {
    if cfg.train.mode()? == TrainMode::Finetune {
        let ck = checkpoint::load(&cfg.train.init)?;
        if ck.model.num_classes() != spec.num_classes {
            return Err(MterError::Config(format!(
                "{} has {} classes, training data has {}",
                cfg.train.init.display(),
                ck.model.num_classes(),
                spec.num_classes
            )));
        }
        return Ok(ck.model);
    }
    Ok(Model::new(spec, derive_seed(cfg.run.seed, "model-init", 0))?)
}

/// Trains `model` in place, appending per-epoch rows to `log`.
pub fn fit(
    model: &mut Model,
    train: &Dataset,
    test: Option<&Dataset>,
    plan: &TrainPlan,
    mut on_row: impl FnMut(&Table) -> Result<()>,
) -> Result<Vec<EpochStats>> {
    let mut log = Table::new(["epoch", "l_ori", "r_mter", "active", "test_acc"]);
    let test_batch = test.map(Dataset::all);
    defense::train(model, train, plan, |m, s| {
        let acc = match &test_batch {
            Some(t) => fmt4(accuracy(m, t)?),
            None => String::new(),
        };
        log.push([
            s.epoch.to_string(),
            fmt4(s.l_ori),
            fmt4(s.r_mter),
            fmt4(s.active_fraction),
            acc,
        ]);
        on_row(&log)
    })
}

pub fn run(cfg: &RunConfig) -> CliResult<TrainOutcome> {
    let out = &cfg.run.output_dir;
    let loss = cfg.model.loss_config()?;
    let plan = cfg.train.plan(loss, cfg.run.seed)?;
    if cfg.train.epochs == 0 {
        return Err(user("train.epochs must be positive"));
    }
    let data = load_data(cfg)?;
    let spec = cfg.model.spec(data.train.num_classes())?;
    let mut model = initial_model(cfg, spec)?;
    cfg.write_resolved(out)?;

    // Probe-pool labels are outside the trained classes, so accuracy is skipped there.
    let test = matches!(data.kind, SplitKind::Standard).then_some(&data.test);
    let log_path = out.join(LOG_NAME);
    let epochs = fit(&mut model, &data.train, test, &plan, |t| t.write(&log_path))?;
    let ckpt = out.join(CHECKPOINT_NAME);
    checkpoint::save(&ckpt, &model, &provenance(cfg, &plan))?;
    Ok(TrainOutcome {
        checkpoint: ckpt,
        log: log_path,
        epochs,
    })
}
