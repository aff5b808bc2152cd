use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use toml::Value;

#[derive(Debug, Parser)]
#[command(name = "mter", version, about = "Train, attack and evaluate MNIST embedding models")]
pub struct Cli {
    /// Log less (-q) or more (-v).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub quiet: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write a checkpoint plus a per-epoch log.
    Train(TrainArgs),
    /// Perturb a selection of images against a checkpoint.
    Attack(AttackArgs),
    /// Run an evaluation protocol over checkpoints.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Directory with the four MNIST IDX files.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Any configuration key, e.g. `--set train.epochs=3`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub arch: Option<String>,
    #[arg(long)]
    pub loss: Option<String>,
    #[arg(long)]
    pub defense: Option<String>,
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub margin: Option<f32>,
    #[arg(long)]
    pub epsilon: Option<u8>,
    #[arg(long)]
    pub train_subset: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub epsilon: Option<u8>,
    #[arg(long)]
    pub alpha: Option<f32>,
    #[arg(long)]
    pub iters: Option<usize>,
    /// `least_likely` or a class number.
    #[arg(long)]
    pub target: Option<String>,
    #[arg(long)]
    pub target_images: Option<PathBuf>,
    #[arg(long)]
    pub input_images: Option<PathBuf>,
    #[arg(long)]
    pub input_labels: Option<PathBuf>,
    #[arg(long)]
    pub offset: Option<usize>,
    #[arg(long)]
    pub count: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub protocol: Option<String>,
    /// Repeat for several checkpoints.
    #[arg(long = "checkpoint")]
    pub checkpoints: Vec<PathBuf>,
    /// Comma-separated attack methods.
    #[arg(long, value_delimiter = ',')]
    pub attacks: Option<Vec<String>>,
    #[arg(long)]
    pub epsilon: Option<u8>,
    #[arg(long)]
    pub far: Option<f64>,
}

/// `section.key` overrides in command-line order.
pub type Overrides = Vec<(String, Value)>;

fn push<T: Into<Value>>(out: &mut Overrides, key: &str, v: Option<T>) {
    if let Some(v) = v {
        out.push((key.to_string(), v.into()));
    }
}

fn path(p: Option<&PathBuf>) -> Option<String> {
    p.map(|p| p.display().to_string())
}

impl Common {
    pub fn overrides(&self) -> Result<Overrides, String> {
        let mut out = Overrides::new();
        for s in &self.set {
            let (k, v) = s.split_once('=').ok_or_else(|| format!("--set expects KEY=VALUE, got {s:?}"))?;
            out.push((k.trim().to_string(), parse_value(v.trim())));
        }
        push(&mut out, "run.seed", self.seed.map(|s| s as i64));
        push(&mut out, "run.output_dir", path(self.output_dir.as_ref()));
        push(&mut out, "data.mnist_dir", path(self.data_dir.as_ref()));
        Ok(out)
    }
}

/// TOML literal when it parses as one, bare string otherwise.
fn parse_value(raw: &str) -> Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

impl TrainArgs {
    pub fn overrides(&self) -> Result<Overrides, String> {
        let mut out = self.common.overrides()?;
        push(&mut out, "model.arch", self.arch.clone());
        push(&mut out, "model.loss", self.loss.clone());
        push(&mut out, "train.defense", self.defense.clone());
        push(&mut out, "train.mode", self.mode.clone());
        push(&mut out, "train.init", path(self.init.as_ref()));
        push(&mut out, "train.epochs", self.epochs.map(|v| v as i64));
        push(&mut out, "train.margin", self.margin.map(f64::from));
        push(&mut out, "train.epsilon", self.epsilon.map(i64::from));
        push(&mut out, "data.train_subset", self.train_subset.map(|v| v as i64));
        Ok(out)
    }
}

impl AttackArgs {
    pub fn overrides(&self) -> Result<Overrides, String> {
        let mut out = self.common.overrides()?;
        push(&mut out, "attack.checkpoint", path(self.checkpoint.as_ref()));
        push(&mut out, "attack.method", self.method.clone());
        push(&mut out, "attack.epsilon", self.epsilon.map(i64::from));
        push(&mut out, "attack.alpha", self.alpha.map(f64::from));
        push(&mut out, "attack.iters", self.iters.map(|v| v as i64));
        push(&mut out, "attack.target", self.target.clone());
        push(&mut out, "attack.target_images", path(self.target_images.as_ref()));
        push(&mut out, "attack.input_images", path(self.input_images.as_ref()));
        push(&mut out, "attack.input_labels", path(self.input_labels.as_ref()));
        push(&mut out, "attack.offset", self.offset.map(|v| v as i64));
        push(&mut out, "attack.count", self.count.map(|v| v as i64));
        Ok(out)
    }
}

impl EvalArgs {
    pub fn overrides(&self) -> Result<Overrides, String> {
        let mut out = self.common.overrides()?;
        push(&mut out, "eval.protocol", self.protocol.clone());
        if !self.checkpoints.is_empty() {
            let list: Vec<Value> = self.checkpoints.iter().map(|p| p.display().to_string().into()).collect();
            out.push(("eval.checkpoints".into(), Value::Array(list)));
        }
        if let Some(a) = &self.attacks {
            out.push(("eval.attacks".into(), Value::Array(a.iter().map(|s| s.clone().into()).collect())));
        }
        push(&mut out, "eval.epsilon", self.epsilon.map(i64::from));
        push(&mut out, "eval.far", self.far);
        Ok(out)
    }
}
