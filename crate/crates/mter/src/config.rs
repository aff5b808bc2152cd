//! Sectioned `key = value` run configuration (TOML). Unknown keys are errors.

use std::path::{Path, PathBuf};

use mter_nn::{Arch, HeadKind, LossConfig, LossKind, ModelSpec, SgdConfig};
use serde::{Deserialize, Serialize};

use crate::attacks::{Iters, Method};
use crate::defense::{AdvTrainConfig, Defense, MterConfig, TrainMode, TrainPlan};
use crate::error::{MterError, Result};
use crate::report::write_atomic;

/// Environment variable naming the directory with the four MNIST IDX files.
pub const DATA_ENV: &str = "MTER_MNIST_DIR";
pub const DEFAULT_DATA_DIR: &str = "data/mnist";
pub const RESOLVED_NAME: &str = "config.toml";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub attack: AttackSection,
    pub eval: EvalSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Empty means: `$MTER_MNIST_DIR`, else `data/mnist`.
    pub mnist_dir: PathBuf,
    /// Training images to keep; 0 keeps all.
    pub train_subset: usize,
    /// Test images to keep; 0 keeps all.
    pub test_subset: usize,
    pub open_set: bool,
    pub train_classes: Vec<usize>,
    pub probe_classes: Vec<usize>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            mnist_dir: PathBuf::new(),
            train_subset: 0,
            test_subset: 0,
            open_set: false,
            train_classes: vec![0, 1, 2, 3, 4],
            probe_classes: vec![5, 6, 7, 8, 9],
        }
    }
}

impl DataSection {
    pub fn resolve_dir(&mut self) {
        if self.mnist_dir.as_os_str().is_empty() {
            self.mnist_dir = std::env::var_os(DATA_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from(DEFAULT_DATA_DIR));
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub arch: String,
    /// 0 uses the architecture default.
    pub embed_dim: usize,
    /// `softmax` or `arcface`.
    pub loss: String,
    pub arc_scale: f32,
    pub arc_margin: f32,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            arch: "resnet18".into(),
            embed_dim: 0,
            loss: "softmax".into(),
            arc_scale: 10.0,
            arc_margin: 0.4,
        }
    }
}

impl ModelSection {
    pub fn loss_config(&self) -> Result<LossConfig> {
        let kind = LossKind::parse(&self.loss).ok_or_else(|| MterError::Config(format!("unknown loss {:?}", self.loss)))?;
        let cfg = match kind {
            LossKind::SoftmaxCe => LossConfig::softmax(),
            LossKind::ArcFace => LossConfig::arcface(self.arc_scale, self.arc_margin),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn arch(&self) -> Result<Arch> {
        Ok(Arch::parse(&self.arch)?)
    }

    pub fn spec(&self, num_classes: usize) -> Result<ModelSpec> {
        let arch = self.arch()?;
        let loss = self.loss_config()?;
        let mut spec = ModelSpec::new(arch, num_classes).with_head(HeadKind::for_loss(loss.kind, loss.arc_scale));
        if self.embed_dim != 0 {
            spec = spec.with_embed_dim(self.embed_dim);
        }
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    /// `none`, `adv` or `mter`.
    pub defense: String,
    /// `from_scratch` or `finetune`.
    pub mode: String,
    /// Starting checkpoint for `finetune`.
    pub init: PathBuf,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub margin: f32,
    pub epsilon: u8,
    pub adv_weight: f32,
    pub adv_fraction: f32,
    /// Perturbation iterations during MTER training; 0 follows the attack default.
    pub perturb_iters: usize,
    pub perturb_alpha: f32,
}

impl Default for TrainSection {
    fn default() -> Self {
        let sgd = SgdConfig::default();
        let adv = AdvTrainConfig::default();
        Self {
            defense: "none".into(),
            mode: "from_scratch".into(),
            init: PathBuf::new(),
            epochs: 10,
            batch_size: 64,
            learning_rate: sgd.learning_rate,
            momentum: sgd.momentum,
            weight_decay: sgd.weight_decay,
            margin: 0.2,
            epsilon: 76,
            adv_weight: adv.adv_weight,
            adv_fraction: adv.adv_fraction,
            perturb_iters: 0,
            perturb_alpha: 1.0,
        }
    }
}

fn iters_from(n: usize) -> Iters {
    if n == 0 {
        Iters::Auto
    } else {
        Iters::Fixed(n)
    }
}

impl TrainSection {
    pub fn mode(&self) -> Result<TrainMode> {
        TrainMode::parse(&self.mode)
    }

    pub fn defense(&self, base_loss: LossConfig) -> Result<Defense> {
        let d = match self.defense.as_str() {
            "none" => Defense::None {
                batch_size: self.batch_size,
                base_loss,
            },
            "adv" => Defense::Adv(AdvTrainConfig {
                epsilon: self.epsilon,
                adv_weight: self.adv_weight,
                adv_fraction: self.adv_fraction,
                batch_size: self.batch_size,
                base_loss,
            }),
            "mter" => Defense::Mter(MterConfig {
                margin: self.margin,
                epsilon: self.epsilon,
                batch_size: self.batch_size,
                base_loss,
                mode: self.mode()?,
                perturb_iters: iters_from(self.perturb_iters),
                perturb_alpha: self.perturb_alpha,
            }),
            other => return Err(MterError::Config(format!("unknown defense {other:?}"))),
        };
        d.validate()?;
        Ok(d)
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            ..SgdConfig::default()
        }
    }

    pub fn plan(&self, base_loss: LossConfig, seed: u64) -> Result<TrainPlan> {
        if self.mode()? == TrainMode::Finetune && self.init.as_os_str().is_empty() {
            return Err(MterError::Config("finetune mode needs train.init".into()));
        }
        Ok(TrainPlan {
            defense: self.defense(base_loss)?,
            sgd: self.sgd(),
            epochs: self.epochs,
            seed,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    pub checkpoint: PathBuf,
    pub method: String,
    pub epsilon: u8,
    pub alpha: f32,
    /// 0 uses the automatic iteration rule.
    pub iters: usize,
    /// Label attacks: `least_likely` or a class number.
    pub target: String,
    /// Feature attacks: IDX images file with one target per source image.
    pub target_images: PathBuf,
    /// Source selection: IDX images file, or empty to use the test split.
    pub input_images: PathBuf,
    pub input_labels: PathBuf,
    pub offset: usize,
    /// Images to attack; 0 takes all.
    pub count: usize,
    pub trajectory: bool,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            checkpoint: PathBuf::new(),
            method: "fgsm".into(),
            epsilon: 76,
            alpha: 1.0,
            iters: 0,
            target: String::new(),
            target_images: PathBuf::new(),
            input_images: PathBuf::new(),
            input_labels: PathBuf::new(),
            offset: 0,
            count: 0,
            trajectory: true,
        }
    }
}

impl AttackSection {
    pub fn method(&self) -> Result<Method> {
        Method::parse(&self.method)
    }

    pub fn iters(&self) -> Iters {
        iters_from(self.iters)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// `robustness`, `transfer`, `verification`, `embed2d`, `margin-sweep` or `arch-sweep`.
    pub protocol: String,
    pub checkpoints: Vec<PathBuf>,
    pub attacks: Vec<String>,
    pub epsilon: u8,
    pub far: f64,
    pub calibration_images: usize,
    /// Verification attackers; 0 uses the whole probe pool.
    pub attackers: usize,
    pub samples_per_class: usize,
    pub margins: Vec<f32>,
    pub archs: Vec<String>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            protocol: "robustness".into(),
            checkpoints: Vec::new(),
            attacks: vec!["fgsm".into(), "bim".into(), "itgsm".into()],
            epsilon: 76,
            far: 1e-3,
            calibration_images: 1000,
            attackers: 0,
            samples_per_class: 1,
            margins: vec![0.2, 0.45, 0.7, 0.95, 1.2, 1.4],
            archs: vec!["lenet5".into(), "resnet6".into(), "resnet8".into(), "resnet10".into()],
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| MterError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| MterError::io(path, e))?;
        Self::parse(&text).map_err(|e| MterError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Writes the resolved configuration into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(RESOLVED_NAME);
        write_atomic(&path, self.to_toml().as_bytes())?;
        Ok(path)
    }
}
