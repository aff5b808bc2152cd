use std::collections::HashSet;
use std::path::PathBuf;

use mter::attacks::{AttackSpec, Method, TargetMode};
use mter::checkpoint::{self, Checkpoint};
use mter::config::RunConfig;
use mter::data::SplitKind;
use mter::eval::{
    arch_sweep, eval_robustness, eval_transfer, export_embeddings_2d, margin_sweep, verification_protocol,
    RobustnessReport, VerificationConfig,
};
use mter::report::{fmt4, Table};
use mter::seed::derive_seed;
use mter::MterError;
use mter_nn::{Arch, HeadKind, Model, ModelSpec};

use crate::train::{fit, initial_model};
use crate::{load_data, model_id, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Protocol {
    Robustness,
    Transfer,
    Verification,
    Embed2d,
    MarginSweep,
    ArchSweep,
}

impl Protocol {
    pub const ALL: [Protocol; 6] = [
        Protocol::Robustness,
        Protocol::Transfer,
        Protocol::Verification,
        Protocol::Embed2d,
        Protocol::MarginSweep,
        Protocol::ArchSweep,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Protocol::Robustness => "robustness",
            Protocol::Transfer => "transfer",
            Protocol::Verification => "verification",
            Protocol::Embed2d => "embed2d",
            Protocol::MarginSweep => "margin-sweep",
            Protocol::ArchSweep => "arch-sweep",
        }
    }

    pub fn parse(s: &str) -> Result<Self, MterError> {
        Self::ALL
            .into_iter()
            .find(|p| p.id() == s)
            .ok_or_else(|| MterError::ProtocolArg(format!("unknown protocol {s:?}")))
    }

    fn trains(self) -> bool {
        matches!(self, Protocol::MarginSweep | Protocol::ArchSweep)
    }
}

fn arg_err(msg: impl Into<String>) -> MterError {
    MterError::ProtocolArg(msg.into())
}

/// Attack specs for accuracy reports; targeted label attacks aim at the least-likely class.
fn accuracy_attacks(cfg: &RunConfig) -> Result<Vec<AttackSpec>, MterError> {
    cfg.eval
        .attacks
        .iter()
        .map(|name| {
            let method = Method::parse(name)?;
            if method.is_feature() {
                return Err(arg_err(format!("{method} has no accuracy; use the verification protocol")));
            }
            let target = if method.is_targeted() {
                TargetMode::LeastLikely
            } else {
                TargetMode::None
            };
            let iters = if method.is_iterative() { cfg.attack.iters() } else { mter::attacks::Iters::Auto };
            Ok(AttackSpec::new(method, cfg.eval.epsilon, target)
                .with_alpha(cfg.attack.alpha)
                .with_iters(iters))
        })
        .collect()
}

/// Loaded checkpoints with report ids unique within the run.
fn load_checkpoints(cfg: &RunConfig) -> Result<Vec<(String, Checkpoint)>, MterError> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, p) in cfg.eval.checkpoints.iter().enumerate() {
        let mut id = model_id(p);
        if !seen.insert(id.clone()) {
            id = format!("{id}_{i}");
            seen.insert(id.clone());
        }
        out.push((id, checkpoint::load(p)?));
    }
    Ok(out)
}

fn check_args(cfg: &RunConfig, protocol: Protocol) -> Result<(), MterError> {
    let n = cfg.eval.checkpoints.len();
    match protocol {
        p if p.trains() && n > 0 => Err(arg_err(format!("{} trains its own models; drop eval.checkpoints", p.id()))),
        p if !p.trains() && n == 0 => Err(arg_err(format!("{} needs at least one checkpoint", p.id()))),
        Protocol::Transfer if n < 2 => Err(arg_err("transfer needs at least two checkpoints")),
        Protocol::Verification if !cfg.data.open_set => Err(arg_err("verification needs data.open_set = true")),
        Protocol::MarginSweep if cfg.eval.margins.is_empty() => Err(arg_err("margin-sweep needs eval.margins")),
        Protocol::MarginSweep if cfg.train.defense != "mter" => Err(arg_err("margin-sweep needs train.defense = \"mter\"")),
        Protocol::ArchSweep if cfg.eval.archs.is_empty() => Err(arg_err("arch-sweep needs eval.archs")),
        _ if cfg.eval.attacks.is_empty() => Err(arg_err("eval.attacks is empty")),
        _ => Ok(()),
    }
}

/// Runs the configured protocol and returns the files it wrote.
pub fn run(cfg: &RunConfig) -> CliResult<Vec<PathBuf>> {
    let protocol = Protocol::parse(&cfg.eval.protocol)?;
    check_args(cfg, protocol)?;
    let models = load_checkpoints(cfg)?;
    let data = load_data(cfg)?;
    let out = &cfg.run.output_dir;
    cfg.write_resolved(out)?;
    let mut written = Vec::new();
    let mut emit = |name: String, table: Table| -> Result<(), MterError> {
        let path = out.join(name);
        table.write(&path)?;
        written.push(path);
        Ok(())
    };

    match protocol {
        Protocol::Robustness => {
            let attacks = accuracy_attacks(cfg)?;
            let test = data.test.all();
            let mut report = RobustnessReport::new(&attacks);
            for (id, ck) in &models {
                report.rows.push(eval_robustness(id, &ck.model, &test, &attacks)?);
            }
            emit("robustness.csv".into(), report.to_table())?;
        }
        Protocol::Transfer => {
            let test = data.test.all();
            let named: Vec<(&str, &Model)> = models.iter().map(|(id, ck)| (id.as_str(), &ck.model)).collect();
            for spec in accuracy_attacks(cfg)? {
                let m = eval_transfer(&named, &named, &spec, &test)?;
                emit(format!("transfer_{}.csv", mter::eval::attack_label(&spec)), m.to_table())?;
            }
        }
        Protocol::Verification => {
            let methods: Vec<Method> = cfg.eval.attacks.iter().map(|a| Method::parse(a)).collect::<Result<_, _>>()?;
            if let Some(m) = methods.iter().find(|m| !m.is_targeted()) {
                return Err(arg_err(format!("{m} is untargeted; verification needs a targeted attack")).into());
            }
            let mut summary = Table::new(["model", "attack", "far", "threshold", "negatives", "auc", "hit_rate"]);
            for (id, ck) in &models {
                for (mi, &method) in methods.iter().enumerate() {
                    let vc = VerificationConfig {
                        far: cfg.eval.far,
                        method,
                        epsilon: cfg.eval.epsilon,
                        iters: cfg.attack.iters(),
                        calibration_images: cfg.eval.calibration_images,
                        attackers: (cfg.eval.attackers > 0).then_some(cfg.eval.attackers),
                        seed: derive_seed(cfg.run.seed, "verification", 0),
                    };
                    let o = verification_protocol(&ck.model, &data.test, &vc)?;
                    if mi == 0 {
                        emit(format!("{id}_roc.csv"), o.calibration.roc_table())?;
                    }
                    let tag = format!("{id}_{method}_e{}", cfg.eval.epsilon);
                    emit(format!("{tag}_hits.csv"), o.report.hit_table())?;
                    emit(format!("{tag}_hit_rate.csv"), o.report.rate_table())?;
                    summary.push([
                        id.clone(),
                        format!("{method}_e{}", cfg.eval.epsilon),
                        format!("{}", cfg.eval.far),
                        fmt4(o.calibration.threshold as f64),
                        o.calibration.negatives.to_string(),
                        fmt4(o.calibration.auc()),
                        fmt4(o.report.mean),
                    ]);
                }
            }
            emit("verification.csv".into(), summary)?;
        }
        Protocol::Embed2d => {
            let mut summary = Table::new(["model", "nearest_centroid"]);
            for (id, ck) in &models {
                let export = export_embeddings_2d(
                    &ck.model,
                    &data.test,
                    cfg.eval.epsilon,
                    cfg.eval.samples_per_class,
                    derive_seed(cfg.run.seed, "embed2d", 0),
                )?;
                emit(format!("{id}_embed2d.csv"), export.to_table())?;
                let f = export.nearest_centroid_fraction(ck.model.num_classes());
                summary.push([id.clone(), fmt4(f)]);
            }
            emit("embed2d.csv".into(), summary)?;
        }
        Protocol::MarginSweep | Protocol::ArchSweep => {
            if !matches!(data.kind, SplitKind::Standard) {
                return Err(arg_err("sweeps evaluate accuracy and need the standard split").into());
            }
            let loss = cfg.model.loss_config()?;
            let plan = cfg.train.plan(loss, cfg.run.seed)?;
            let attacks = accuracy_attacks(cfg)?;
            let test = data.test.all();
            let classes = data.train.num_classes();
            let trainer = |spec: ModelSpec, p: &mter::defense::TrainPlan| {
                let mut model = initial_model(cfg, spec)?;
                fit(&mut model, &data.train, None, p, |_| Ok(()))?;
                Ok(model)
            };
            let mut header = vec![if protocol == Protocol::MarginSweep { "margin" } else { "arch" }.to_string()];
            header.push("clean".into());
            header.extend(attacks.iter().map(mter::eval::attack_label));
            let mut table = Table::new(header);
            if protocol == Protocol::MarginSweep {
                let spec = cfg.model.spec(classes)?;
                for (m, row) in margin_sweep(spec, &cfg.eval.margins, &plan, &test, &attacks, trainer)? {
                    let mut cells = vec![format!("{m}"), fmt4(row.clean)];
                    cells.extend(row.attacked.iter().map(|&a| fmt4(a)));
                    table.push(cells);
                }
                emit("margin_sweep.csv".into(), table)?;
            } else {
                let head = HeadKind::for_loss(loss.kind, loss.arc_scale);
                let specs: Vec<ModelSpec> = cfg
                    .eval
                    .archs
                    .iter()
                    .map(|a| Ok(ModelSpec::new(Arch::parse(a)?, classes).with_head(head)))
                    .collect::<Result<_, MterError>>()?;
                for row in arch_sweep(&specs, &plan, &test, &attacks, trainer)? {
                    let mut cells = vec![row.model.clone(), fmt4(row.clean)];
                    cells.extend(row.attacked.iter().map(|&a| fmt4(a)));
                    table.push(cells);
                }
                emit("arch_sweep.csv".into(), table)?;
            }
        }
    }
    Ok(written)
}
