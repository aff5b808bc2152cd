use std::path::{Path, PathBuf};

use mter::attacks::{run_attack, AttackResult, AttackSpec, Iters, Method, TargetMode};
use mter::checkpoint;
use mter::config::RunConfig;
use mter::data::{load_idx, save_idx, IdxArray, IdxKind, ImageBatch};
use mter::report::{fmt4, write_atomic, Table};
use mter_nn::IMAGE_PIXELS;

use crate::{load_data, user, CliResult};

pub const IMAGES_NAME: &str = "adversarial-images-idx3-ubyte";
pub const LABELS_NAME: &str = "adversarial-labels-idx1-ubyte";
pub const TRAJECTORY_NAME: &str = "trajectory.csv";
pub const SUMMARY_NAME: &str = "summary.txt";

#[derive(Debug)]
pub struct AttackOutcome {
    pub images: PathBuf,
    pub count: usize,
    pub max_linf: u8,
    pub summary: String,
}

/// Rejects settings the chosen method does not define, before any IO.
fn check_combination(cfg: &RunConfig, method: Method) -> CliResult<()> {
    let a = &cfg.attack;
    if a.checkpoint.as_os_str().is_empty() {
        return Err(user("attack.checkpoint is required"));
    }
    if !method.is_iterative() && a.iters > 1 {
        return Err(user(format!("{method} is single-step; attack.iters must be 0 or 1")));
    }
    let has_label_target = !a.target.is_empty();
    let has_image_target = !a.target_images.as_os_str().is_empty();
    match (method.is_targeted(), method.is_feature()) {
        (false, _) if has_label_target || has_image_target => {
            Err(user(format!("{method} is untargeted and takes no target")))
        }
        (true, false) if !has_label_target => Err(user(format!(
            "{method} needs attack.target (least_likely or a class number)"
        ))),
        (true, false) if has_image_target => Err(user(format!("{method} takes a label target, not target images"))),
        (true, true) if !has_image_target => Err(user(format!("{method} needs attack.target_images"))),
        (true, true) if has_label_target => Err(user(format!("{method} takes target images, not a label target"))),
        _ => Ok(()),
    }
}

fn load_images(path: &Path) -> CliResult<Vec<u8>> {
    let arr = load_idx(path, IdxKind::Images)?;
    if arr.dims[1..] != [28, 28] {
        return Err(user(format!("{}: images must be 28x28", path.display())));
    }
    Ok(arr.data)
}

/// Source images and labels (`None` when no labels are available).
fn load_sources(cfg: &RunConfig) -> CliResult<(Vec<u8>, Option<Vec<usize>>)> {
    let a = &cfg.attack;
    if a.input_images.as_os_str().is_empty() {
        let data = load_data(cfg)?;
        return Ok((data.test.pixels().to_vec(), Some(data.test.labels().to_vec())));
    }
    let pixels = load_images(&a.input_images)?;
    if a.input_labels.as_os_str().is_empty() {
        return Ok((pixels, None));
    }
    let labels: Vec<usize> = load_idx(&a.input_labels, IdxKind::Labels)?.data.iter().map(|&l| l as usize).collect();
    if labels.len() * IMAGE_PIXELS != pixels.len() {
        return Err(user("input images and labels differ in count"));
    }
    Ok((pixels, Some(labels)))
}

fn select(cfg: &RunConfig, pixels: Vec<u8>, labels: Option<Vec<usize>>) -> CliResult<(ImageBatch, bool)> {
    let total = pixels.len() / IMAGE_PIXELS;
    let start = cfg.attack.offset;
    let end = if cfg.attack.count == 0 {
        total
    } else {
        start + cfg.attack.count
    };
    if start >= end || end > total {
        return Err(user(format!("selection {start}..{end} is outside the {total} input images")));
    }
    let has_labels = labels.is_some();
    let labels = labels.map(|l| l[start..end].to_vec()).unwrap_or_else(|| vec![0; end - start]);
    let batch = ImageBatch::new(pixels[start * IMAGE_PIXELS..end * IMAGE_PIXELS].to_vec(), labels)?;
    Ok((batch, has_labels))
}

fn target_mode(cfg: &RunConfig, method: Method, n: usize) -> CliResult<TargetMode> {
    let a = &cfg.attack;
    if !method.is_targeted() {
        return Ok(TargetMode::None);
    }
    if method.is_feature() {
        let px = load_images(&a.target_images)?;
        let m = px.len() / IMAGE_PIXELS;
        let px = match m {
            _ if m == n => px,
            1 => px.repeat(n),
            _ => return Err(user(format!("{m} target images for {n} sources; give one or {n}"))),
        };
        return Ok(TargetMode::Features(ImageBatch::new(px, vec![0; n])?));
    }
    match a.target.as_str() {
        "least_likely" => Ok(TargetMode::LeastLikely),
        s => s
            .parse()
            .map(TargetMode::FixedLabel)
            .map_err(|_| user(format!("attack.target {s:?} is neither least_likely nor a class"))),
    }
}

/// One row per sample and step: the objective after each step, plus the
/// embedding for two-dimensional models.
pub fn trajectory_table(result: &AttackResult) -> Option<Table> {
    let traj = result.trajectory.as_ref()?;
    let with_embed = traj.first().is_some_and(|p| p.embedding.is_some());
    let mut header = vec!["sample", "iteration", "objective"];
    if with_embed {
        header.extend(["e1", "e2"]);
    }
    let mut t = Table::new(header);
    let n = result.adversarial.len();
    for s in 0..n {
        for p in &traj[1..] {
            let mut row = vec![s.to_string(), p.iteration.to_string(), fmt4(p.per_row[s])];
            if let Some(e) = &p.embedding {
                row.extend(e.row(s).iter().map(|&v| fmt4(v as f64)));
            }
            t.push(row);
        }
    }
    Some(t)
}

pub fn run(cfg: &RunConfig) -> CliResult<AttackOutcome> {
    let a = &cfg.attack;
    let method = a.method()?;
    check_combination(cfg, method)?;
    let ck = checkpoint::load(&a.checkpoint)?;
    let (pixels, labels) = load_sources(cfg)?;
    let (batch, has_labels) = select(cfg, pixels, labels)?;
    if !has_labels && !method.is_targeted() {
        return Err(user(format!("{method} needs true labels; set attack.input_labels")));
    }
    let target = target_mode(cfg, method, batch.len())?;
    let iters = match a.iters() {
        Iters::Fixed(_) if !method.is_iterative() => Iters::Auto,
        i => i,
    };
    let mut spec = AttackSpec::new(method, a.epsilon, target).with_alpha(a.alpha).with_iters(iters);
    if a.trajectory {
        spec = spec.with_trajectory();
    }
    let out = &cfg.run.output_dir;
    cfg.write_resolved(out)?;
    let result = run_attack(&ck.model, &batch, &spec)?;

    let images = out.join(IMAGES_NAME);
    save_idx(&images, &IdxArray::images(batch.len(), result.adversarial.pixels.clone()))?;
    if has_labels {
        let l: Vec<u8> = batch.labels.iter().map(|&l| l as u8).collect();
        save_idx(&out.join(LABELS_NAME), &IdxArray::labels(l))?;
    }
    if let Some(t) = trajectory_table(&result) {
        t.write(&out.join(TRAJECTORY_NAME))?;
    }
    let max_linf = result.max_abs_perturbation();
    let summary = format!(
        "method {method} epsilon {} images {} max_linf {max_linf} within_budget {}",
        a.epsilon,
        batch.len(),
        max_linf <= a.epsilon
    );
    write_atomic(&out.join(SUMMARY_NAME), format!("{summary}\n").as_bytes())?;
    Ok(AttackOutcome {
        images,
        count: batch.len(),
        max_linf,
        summary,
    })
}
