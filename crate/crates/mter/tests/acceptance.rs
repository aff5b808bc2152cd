//! Acceptance criteria C1 to C8, one pass/fail line each.
//!
//! Trained checkpoints and measurements are cached under
//! `$MTER_ACCEPTANCE_CACHE` (default `target/acceptance`), keyed by a digest of
//! the full recipe, so only changed recipes retrain. A cold run trains every
//! model and takes several hours on one core; warm runs take seconds plus C7.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::process::Command;
use std::time::Instant;

use mter::attacks::{AttackSpec, Iters, Method, TargetMode};
use mter::checkpoint::{self, Provenance};
use mter::config::DATA_ENV;
use mter::data::{make_open_set_split, Dataset, DatasetSplit, ImageBatch};
use mter::defense::{self, AdvTrainConfig, Defense, MterConfig, TrainMode, TrainPlan};
use mter::eval::{accuracy, eval_robustness, eval_transfer, export_embeddings_2d, verification_protocol, VerificationConfig};
use mter_nn::{Arch, LossConfig, Model, ModelSpec, SgdConfig};
use sha2::{Digest, Sha256};

// Thresholds, in percent unless noted.
const C1_CLEAN_MIN: f64 = 99.0;
const C1_FGSM_MAX: f64 = 30.0;
const C1_BIM_MAX: f64 = 5.0;
const C2_CLEAN_MIN: f64 = 98.5;
const C2_ROBUST_MIN: f64 = 85.0;
const C3_LEAK_SLACK: f64 = 0.5;
const C4_MIN_CELLS: usize = 3;
const C5_SPEARMAN_MIN: f64 = 0.0;
const C5_R18_SPREAD_MAX: f64 = 5.0;
const C6_DROP_MIN: f64 = 30.0;
const C6_FAR: f64 = 1e-3;
const C7_SECONDS_MAX: f64 = 600.0;
/// Fractions of trajectory points.
const C8_MTER_MIN: f64 = 0.90;
const C8_PLAIN_MAX: f64 = 0.50;

const EPS: u8 = 76;
const MARGINS: [f32; 3] = [0.2, 0.7, 1.2];
/// Test images attacked per measurement; clean accuracy uses the full test set.
const ATTACK_IMAGES: usize = 500;
const ATTACK_SEED: u64 = 7;

/// Criteria that do not reach their threshold at this compute budget. They
/// still run and print FAIL; listing them keeps the target exit status clean.
const KNOWN_SHORTFALLS: &[&str] = &[];

#[derive(Clone, Debug)]
struct Recipe {
    name: String,
    spec: ModelSpec,
    defense: Defense,
    sgd: SgdConfig,
    epochs: usize,
    seed: u64,
    open_set: bool,
    init: Option<Box<Recipe>>,
}

impl Recipe {
    fn digest(&self) -> String {
        let d = Sha256::digest(format!("{self:?}").as_bytes());
        d[..6].iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    fn key(&self) -> String {
        format!("{}-{}", self.name, self.digest())
    }
}

fn plain(arch: Arch, classes: usize) -> (ModelSpec, Defense) {
    let d = Defense::None {
        batch_size: 64,
        base_loss: LossConfig::softmax(),
    };
    (ModelSpec::new(arch, classes), d)
}

fn mter_cfg(margin: f32, mode: TrainMode) -> Defense {
    Defense::Mter(MterConfig {
        margin,
        epsilon: EPS,
        mode,
        perturb_iters: Iters::Fixed(10),
        perturb_alpha: 8.0,
        ..MterConfig::default()
    })
}

fn recipe(name: &str, spec: ModelSpec, defense: Defense, epochs: usize, seed: u64) -> Recipe {
    Recipe {
        name: name.to_string(),
        spec,
        defense,
        sgd: SgdConfig::default(),
        epochs,
        seed,
        open_set: false,
        init: None,
    }
}

fn softmax_r18() -> Recipe {
    let (s, d) = plain(Arch::ResNet18, 10);
    recipe("softmax_r18", s, d, 3, 1)
}

fn adv_r18() -> Recipe {
    recipe(
        "adv_r18",
        ModelSpec::new(Arch::ResNet18, 10),
        Defense::Adv(AdvTrainConfig::default()),
        3,
        2,
    )
}

fn mter_r18(margin: f32) -> Recipe {
    let mut r = recipe(
        &format!("mter_r18_m{margin}"),
        ModelSpec::new(Arch::ResNet18, 10),
        mter_cfg(margin, TrainMode::Finetune),
        1,
        3,
    );
    r.init = Some(Box::new(softmax_r18()));
    r
}

fn adv_l5() -> Recipe {
    recipe(
        "adv_l5",
        ModelSpec::new(Arch::LeNet5, 10),
        Defense::Adv(AdvTrainConfig::default()),
        10,
        4,
    )
}

fn mter_l5(margin: f32) -> Recipe {
    recipe(
        &format!("mter_l5_m{margin}"),
        ModelSpec::new(Arch::LeNet5, 10),
        mter_cfg(margin, TrainMode::FromScratch),
        10,
        5,
    )
}

fn open_softmax_r18() -> Recipe {
    let (s, d) = plain(Arch::ResNet18, 5);
    let mut r = recipe("open_softmax_r18", s, d, 2, 6);
    r.open_set = true;
    r
}

fn open_mter_r18() -> Recipe {
    let mut r = recipe(
        "open_mter_r18",
        ModelSpec::new(Arch::ResNet18, 5),
        mter_cfg(0.2, TrainMode::Finetune),
        1,
        7,
    );
    r.open_set = true;
    r.init = Some(Box::new(open_softmax_r18()));
    r
}

fn plane_softmax() -> Recipe {
    let (s, d) = plain(Arch::ResNet18Embed2, 10);
    recipe("plane_softmax_r18", s, d, 2, 8)
}

fn plane_mter() -> Recipe {
    let mut r = recipe(
        "plane_mter_r18",
        ModelSpec::new(Arch::ResNet18Embed2, 10),
        mter_cfg(0.2, TrainMode::Finetune),
        1,
        9,
    );
    r.init = Some(Box::new(plane_softmax()));
    r
}

type Res<T> = Result<T, Box<dyn std::error::Error>>;

struct Ctx {
    cache: PathBuf,
    standard: DatasetSplit,
    open: DatasetSplit,
    clean_test: ImageBatch,
    attack_test: ImageBatch,
}

fn workspace_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

impl Ctx {
    fn new() -> Res<Self> {
        let cache = std::env::var_os("MTER_ACCEPTANCE_CACHE")
            .map(PathBuf::from)
            .unwrap_or_else(|| workspace_root().join("target/acceptance"));
        std::fs::create_dir_all(&cache)?;
        let dir = std::env::var_os(DATA_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| workspace_root().join("data/mnist"));
        let standard = DatasetSplit::load_mnist(&dir).map_err(|e| format!("MNIST at {}: {e}", dir.display()))?;
        let open = make_open_set_split(&standard, &[0, 1, 2, 3, 4], &[5, 6, 7, 8, 9])?;
        let clean_test = standard.test.all();
        let attack_test = standard.test.sample(ATTACK_IMAGES, ATTACK_SEED).all();
        Ok(Self {
            cache,
            standard,
            open,
            clean_test,
            attack_test,
        })
    }

    fn train_set(&self, r: &Recipe) -> &Dataset {
        if r.open_set {
            &self.open.train
        } else {
            &self.standard.train
        }
    }

    /// Cached checkpoint for `r`, training it (and its initialization) on a miss.
    fn model(&self, r: &Recipe) -> Res<Model> {
        let path = self.cache.join(format!("{}.ckpt", r.key()));
        if path.is_file() {
            return Ok(checkpoint::load(&path)?.model);
        }
        let mut model = match &r.init {
            Some(init) => self.model(init)?,
            None => Model::new(r.spec, r.seed)?,
        };
        assert_eq!(model.spec(), &r.spec, "{} starts from an incompatible model", r.name);
        let plan = TrainPlan {
            defense: r.defense,
            sgd: r.sgd,
            epochs: r.epochs,
            seed: r.seed,
        };
        eprintln!("training {} ({} epochs)", r.key(), r.epochs);
        let t = Instant::now();
        defense::train(&mut model, self.train_set(r), &plan, |_, s| {
            eprintln!(
                "  {} epoch {}: l_ori {:.4} r_mter {:.4} active {:.3} [{:.0}s]",
                r.name,
                s.epoch,
                s.l_ori,
                s.r_mter,
                s.active_fraction,
                t.elapsed().as_secs_f64()
            );
            Ok(())
        })?;
        let prov = Provenance {
            defense: r.defense.id().into(),
            seed: r.seed,
            epochs: r.epochs as u32,
            ..Provenance::default()
        };
        checkpoint::save(&path, &model, &prov)?;
        Ok(model)
    }

    /// Cached list of numbers under `key`.
    fn measure(&self, key: &str, f: impl FnOnce() -> Res<Vec<f64>>) -> Res<Vec<f64>> {
        let path = self.cache.join(format!("{key}.txt"));
        if let Ok(text) = std::fs::read_to_string(&path) {
            return Ok(text.lines().map(str::parse).collect::<Result<_, _>>()?);
        }
        eprintln!("measuring {key}");
        let v = f()?;
        let text: String = v.iter().map(|x| format!("{x:?}\n")).collect();
        std::fs::write(&path, text)?;
        Ok(v)
    }

    fn clean_accuracy(&self, r: &Recipe) -> Res<f64> {
        let v = self.measure(&format!("{}-clean", r.key()), || {
            Ok(vec![accuracy(&self.model(r)?, &self.clean_test)?])
        })?;
        Ok(v[0])
    }

    /// White-box accuracy on the attack subset.
    fn attacked(&self, r: &Recipe, spec: &AttackSpec) -> Res<f64> {
        let key = format!("{}-{}_e{}_n{ATTACK_IMAGES}", r.key(), spec.method, spec.epsilon);
        let v = self.measure(&key, || {
            let row = eval_robustness(&r.name, &self.model(r)?, &self.attack_test, std::slice::from_ref(spec))?;
            Ok(row.attacked)
        })?;
        Ok(v[0])
    }
}

struct Outcome {
    pass: bool,
    gating: bool,
    detail: String,
}

fn gate(pass: bool, detail: String) -> Outcome {
    Outcome {
        pass,
        gating: true,
        detail,
    }
}

fn itgsm() -> AttackSpec {
    AttackSpec::itgsm(EPS, TargetMode::LeastLikely)
}

fn c1(ctx: &Ctx) -> Res<Outcome> {
    let r = softmax_r18();
    let clean = ctx.clean_accuracy(&r)?;
    let fgsm = ctx.attacked(&r, &AttackSpec::fgsm(EPS))?;
    let bim = ctx.attacked(&r, &AttackSpec::bim(EPS))?;
    Ok(gate(
        clean >= C1_CLEAN_MIN && fgsm < C1_FGSM_MAX && bim < C1_BIM_MAX,
        format!(
            "softmax R18: clean {clean:.2}% (>= {C1_CLEAN_MIN}), FGSM {fgsm:.2}% (< {C1_FGSM_MAX}), BIM {bim:.2}% (< {C1_BIM_MAX})"
        ),
    ))
}

fn c2(ctx: &Ctx) -> Res<Outcome> {
    let r = mter_r18(0.2);
    let clean = ctx.clean_accuracy(&r)?;
    let bim = ctx.attacked(&r, &AttackSpec::bim(EPS))?;
    let it = ctx.attacked(&r, &itgsm())?;
    Ok(gate(
        clean >= C2_CLEAN_MIN && bim >= C2_ROBUST_MIN && it >= C2_ROBUST_MIN,
        format!(
            "MTER R18 m=0.2: clean {clean:.2}% (>= {C2_CLEAN_MIN}), BIM {bim:.2}%, ITGSM {it:.2}% (both >= {C2_ROBUST_MIN})"
        ),
    ))
}

fn c3(ctx: &Ctx) -> Res<Outcome> {
    let r = adv_r18();
    let clean = ctx.clean_accuracy(&r)?;
    let fgsm = ctx.attacked(&r, &AttackSpec::fgsm(EPS))?;
    Ok(Outcome {
        pass: fgsm >= clean - C3_LEAK_SLACK,
        gating: false,
        detail: format!("ADV R18: FGSM {fgsm:.2}% vs clean {clean:.2}% (needs >= clean - {C3_LEAK_SLACK}); soft"),
    })
}

fn c4(ctx: &Ctx) -> Res<Outcome> {
    let recipes = [adv_l5(), adv_r18(), mter_l5(0.2), mter_r18(0.2)];
    let mut pass = true;
    let mut detail = String::new();
    for spec in [AttackSpec::fgsm(EPS), AttackSpec::bim(EPS)] {
        let key = format!(
            "transfer-{}-{}_e{}_n{ATTACK_IMAGES}",
            recipes.iter().map(|r| r.digest()).collect::<Vec<_>>().join("_"),
            spec.method,
            spec.epsilon
        );
        let flat = ctx.measure(&key, || {
            let models: Vec<Model> = recipes.iter().map(|r| ctx.model(r)).collect::<Res<_>>()?;
            let named: Vec<(&str, &Model)> = recipes.iter().map(|r| r.name.as_str()).zip(models.iter()).collect();
            let m = eval_transfer(&named, &named, &spec, &ctx.attack_test)?;
            Ok(m.cells.iter().flatten().map(|c| c.unwrap_or(f64::NAN)).collect())
        })?;
        let cell = |s: usize, t: usize| flat[s * recipes.len() + t];
        // Indices: 0 adv_l5, 1 adv_r18, 2 mter_l5, 3 mter_r18. For each source
        // and target architecture, MTER target vs ADV target, skipping the source itself.
        let mut wins = 0;
        let mut cells = Vec::new();
        for s in 0..4 {
            for (adv_t, mter_t) in [(0, 2), (1, 3)] {
                if s == adv_t || s == mter_t {
                    continue;
                }
                let (a, m) = (cell(s, adv_t), cell(s, mter_t));
                wins += usize::from(m >= a);
                cells.push(format!("{}->{}: {m:.1} vs {a:.1}", recipes[s].name, recipes[mter_t].name));
            }
        }
        pass &= wins >= C4_MIN_CELLS && cells.len() == 4;
        let _ = write!(detail, "{}: MTER >= ADV in {wins}/{} [{}]; ", spec.method, cells.len(), cells.join(", "));
    }
    detail.push_str(&format!("needs >= {C4_MIN_CELLS} per attack"));
    Ok(gate(pass, detail))
}

/// Spearman correlation with average ranks for ties; NaN without variance.
fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            for &k in &idx[i..=j] {
                r[k] = (i + j) as f64 / 2.0 + 1.0;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

fn c5(ctx: &Ctx) -> Res<Outcome> {
    let bim = AttackSpec::bim(EPS);
    let l5: Vec<f64> = MARGINS.iter().map(|&m| ctx.attacked(&mter_l5(m), &bim)).collect::<Res<_>>()?;
    let r18: Vec<f64> = MARGINS.iter().map(|&m| ctx.attacked(&mter_r18(m), &bim)).collect::<Res<_>>()?;
    let margins: Vec<f64> = MARGINS.iter().map(|&m| m as f64).collect();
    let rho = spearman(&margins, &l5);
    let monotone = l5.windows(2).all(|w| w[1] >= w[0]);
    let spread = r18.iter().cloned().fold(f64::MIN, f64::max) - r18.iter().cloned().fold(f64::MAX, f64::min);
    let fmt = |v: &[f64]| v.iter().map(|a| format!("{a:.2}")).collect::<Vec<_>>().join("/");
    Ok(gate(
        monotone && rho > C5_SPEARMAN_MIN && spread <= C5_R18_SPREAD_MAX,
        format!(
            "BIM over m=0.2/0.7/1.2: LeNet {} (non-decreasing {monotone}, spearman {rho:.3} > {C5_SPEARMAN_MIN}); R18 {} (spread {spread:.2} <= {C5_R18_SPREAD_MAX})",
            fmt(&l5),
            fmt(&r18)
        ),
    ))
}

fn c6(ctx: &Ctx) -> Res<Outcome> {
    let cfg = VerificationConfig {
        far: C6_FAR,
        method: Method::Iftgsm,
        epsilon: 10,
        iters: Iters::Auto,
        calibration_images: 1000,
        attackers: Some(200),
        seed: 11,
    };
    let rate = |r: &Recipe| -> Res<(f64, f64)> {
        let v = ctx.measure(&format!("{}-verify-iftgsm_e10-far{C6_FAR}", r.key()), || {
            let o = verification_protocol(&ctx.model(r)?, &ctx.open.test, &cfg)?;
            Ok(vec![o.report.mean, o.calibration.threshold as f64])
        })?;
        Ok((v[0], v[1]))
    };
    let (plain, t_plain) = rate(&open_softmax_r18())?;
    let (mter, t_mter) = rate(&open_mter_r18())?;
    let drop = plain - mter;
    Ok(gate(
        drop >= C6_DROP_MIN,
        format!(
            "IFTGSM e=10 hit rate at FAR {C6_FAR}: undefended {plain:.2}% (thr {t_plain:.4}), MTER {mter:.2}% (thr {t_mter:.4}), drop {drop:.2} (>= {C6_DROP_MIN})"
        ),
    ))
}

const PROPERTY_SUITES: &[(&str, &str)] = &[
    ("mter-nn", "gradients"),
    ("mter-nn", "model_invariants"),
    ("mter-nn", "mter_nn"),
    ("mter", "attacks"),
    ("mter", "defense"),
    ("mter", "eval"),
    ("mter", "data"),
    ("mter", "checkpoint"),
    ("mter", "mter"),
];

/// Test executables for `PROPERTY_SUITES`, as built for this workspace.
fn suite_executables() -> Res<Vec<(String, PathBuf)>> {
    let cargo = std::env::var("CARGO").unwrap_or_else(|_| "cargo".into());
    let out = Command::new(cargo)
        .args(["test", "--workspace", "--no-run", "--message-format=json"])
        .current_dir(workspace_root())
        .output()?;
    if !out.status.success() {
        return Err(format!("building suites failed: {}", String::from_utf8_lossy(&out.stderr)).into());
    }
    let mut found = Vec::new();
    for line in out.stdout.split(|&b| b == b'\n').filter(|l| !l.is_empty()) {
        let msg: serde_json::Value = serde_json::from_slice(line)?;
        let (Some(exe), Some(name), Some(pkg)) = (
            msg["executable"].as_str(),
            msg["target"]["name"].as_str(),
            msg["package_id"].as_str(),
        ) else {
            continue;
        };
        let is_pkg = |p: &str| pkg.contains(&format!("#{p}@")) || pkg.contains(&format!("/{p}#"));
        if PROPERTY_SUITES.iter().any(|&(p, n)| n == name && is_pkg(p)) {
            found.push((name.to_string(), PathBuf::from(exe)));
        }
    }
    Ok(found)
}

fn c7(_: &Ctx) -> Res<Outcome> {
    let exes = suite_executables()?;
    let t = Instant::now();
    let mut failed = Vec::new();
    for (name, exe) in &exes {
        let status = Command::new(exe).arg("-q").output()?.status;
        if !status.success() {
            failed.push(name.clone());
        }
    }
    let secs = t.elapsed().as_secs_f64();
    Ok(gate(
        failed.is_empty() && exes.len() == PROPERTY_SUITES.len() && secs <= C7_SECONDS_MAX,
        format!(
            "{} of {} property suites ran in {secs:.1}s (<= {C7_SECONDS_MAX}); failures: {:?}",
            exes.len(),
            PROPERTY_SUITES.len(),
            failed
        ),
    ))
}

fn c8(ctx: &Ctx) -> Res<Outcome> {
    let frac = |r: &Recipe| -> Res<f64> {
        let v = ctx.measure(&format!("{}-embed2d-bim_e{EPS}", r.key()), || {
            let export = export_embeddings_2d(&ctx.model(r)?, &ctx.standard.test, EPS, 1, 13)?;
            Ok(vec![export.nearest_centroid_fraction(10)])
        })?;
        Ok(v[0])
    };
    let mter = frac(&plane_mter())?;
    let plain = frac(&plane_softmax())?;
    Ok(gate(
        mter >= C8_MTER_MIN && plain < C8_PLAIN_MAX,
        format!(
            "2-D R18 BIM points nearest own centroid: MTER {:.1}% (>= {:.0}), softmax {:.1}% (< {:.0})",
            mter * 100.0,
            C8_MTER_MIN * 100.0,
            plain * 100.0,
            C8_PLAIN_MAX * 100.0
        ),
    ))
}

type Criterion = fn(&Ctx) -> Res<Outcome>;

fn main() {
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let ctx = match Ctx::new() {
        Ok(c) => c,
        Err(e) => {
            println!("acceptance setup failed: {e}");
            std::process::exit(1);
        }
    };
    let criteria: [(&str, Criterion); 8] = [
        ("C1", c1),
        ("C2", c2),
        ("C3", c3),
        ("C4", c4),
        ("C5", c5),
        ("C6", c6),
        ("C7", c7),
        ("C8", c8),
    ];
    let mut unexpected = Vec::new();
    let mut lines = Vec::new();
    for (id, run) in criteria {
        let t = Instant::now();
        let line = match run(&ctx) {
            Ok(o) => {
                let known = KNOWN_SHORTFALLS.contains(&id);
                if !o.pass && o.gating && !known {
                    unexpected.push(id);
                }
                let status = if o.pass { "PASS" } else { "FAIL" };
                let note = match (o.pass, o.gating, known) {
                    (false, true, true) => " [known shortfall]",
                    (_, false, _) => " [not gating]",
                    _ => "",
                };
                format!("{id} {status}{note}: {}", o.detail)
            }
            Err(e) => {
                unexpected.push(id);
                format!("{id} FAIL: error: {e}")
            }
        };
        println!("{line}  ({:.0}s)", t.elapsed().as_secs_f64());
        lines.push(line);
    }
    println!();
    for l in &lines {
        println!("{l}");
    }
    if !unexpected.is_empty() {
        println!("unexpected failures: {unexpected:?}");
        std::process::exit(1);
    }
}
