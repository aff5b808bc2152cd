//! Architecture zoo and the model type exposing logits and unit-norm embeddings.
//!
//! Every network maps a `(K, 1, 28, 28)` input in `[0, 1]` to penultimate
//! features `F(x)`; the embedding is `F(x) / sqrt(||F(x)||^2 + 1e-12)` and the
//! logits come from a classification head on top of the features (linear head)
//! or of the embedding (cosine head, used with the angular margin loss).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{NnError, Result};
use crate::layers::{
    backward_seq, forward_seq, Backprop, BatchNorm, BnUpdate, Cache, Conv2d, ForwardCtx, Layer, Linear,
};
use crate::loss::{dot, normalize_rows, normalize_rows_backward, LossKind};
use crate::params::{EntryKind, Grads, ParamStore};
use crate::tensor::Tensor;

pub const IMAGE_SIDE: usize = 28;
pub const IMAGE_PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;
pub const HEAD_DROPOUT: f32 = 0.4;
const BN_MOMENTUM: f32 = 0.1;
const STAGE_WIDTHS: [usize; 3] = [16, 32, 64];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Arch {
    LeNet5,
    ResNet6,
    ResNet8,
    ResNet10,
    ResNet18,
    ResNet34,
    ResNet50,
    LeNet5Embed2,
    ResNet18Embed2,
}

impl Arch {
    pub const ALL: [Arch; 9] = [
        Arch::LeNet5,
        Arch::ResNet6,
        Arch::ResNet8,
        Arch::ResNet10,
        Arch::ResNet18,
        Arch::ResNet34,
        Arch::ResNet50,
        Arch::LeNet5Embed2,
        Arch::ResNet18Embed2,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Arch::LeNet5 => "lenet5",
            Arch::ResNet6 => "resnet6",
            Arch::ResNet8 => "resnet8",
            Arch::ResNet10 => "resnet10",
            Arch::ResNet18 => "resnet18",
            Arch::ResNet34 => "resnet34",
            Arch::ResNet50 => "resnet50",
            Arch::LeNet5Embed2 => "lenet5-2d",
            Arch::ResNet18Embed2 => "resnet18-2d",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace('_', "-");
        let alias = match key.as_str() {
            "l5" => "lenet5",
            "r6" => "resnet6",
            "r8" => "resnet8",
            "r10" => "resnet10",
            "r18" => "resnet18",
            "r34" => "resnet34",
            "r50" => "resnet50",
            "lenet5-2d-embed" => "lenet5-2d",
            "resnet18-2d-embed" => "resnet18-2d",
            other => other,
        };
        Arch::ALL
            .iter()
            .copied()
            .find(|a| a.id() == alias)
            .ok_or_else(|| NnError::UnknownArch(s.to_string()))
    }

    pub fn default_embed_dim(self) -> usize {
        match self {
            Arch::LeNet5Embed2 | Arch::ResNet18Embed2 => 2,
            _ => 64,
        }
    }

    /// Residual blocks per stage, or `None` for the LeNet family.
    fn stage_blocks(self) -> Option<[usize; 3]> {
        match self {
            Arch::ResNet6 => Some([0, 1, 1]),
            Arch::ResNet8 => Some([1, 1, 1]),
            Arch::ResNet10 => Some([2, 1, 1]),
            Arch::ResNet18 | Arch::ResNet18Embed2 => Some([3, 3, 2]),
            Arch::ResNet34 | Arch::ResNet50 => Some([5, 6, 5]),
            Arch::LeNet5 | Arch::LeNet5Embed2 => None,
        }
    }
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.id())
    }
}

/// How logits are produced from the penultimate representation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum HeadKind {
    /// `logits = W F(x) + b`.
    Linear,
    /// `logits = s * cos(W_j, E(x))`, the inference form of the angular margin loss.
    Cosine { scale: f32 },
}

impl HeadKind {
    pub fn for_loss(kind: LossKind, arc_scale: f32) -> Self {
        match kind {
            LossKind::SoftmaxCe => HeadKind::Linear,
            LossKind::ArcFace => HeadKind::Cosine { scale: arc_scale },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelSpec {
    pub arch: Arch,
    pub num_classes: usize,
    pub embed_dim: usize,
    pub head: HeadKind,
}

impl ModelSpec {
    pub fn new(arch: Arch, num_classes: usize) -> Self {
        Self {
            arch,
            num_classes,
            embed_dim: arch.default_embed_dim(),
            head: HeadKind::Linear,
        }
    }

    pub fn with_head(mut self, head: HeadKind) -> Self {
        self.head = head;
        self
    }

    pub fn with_embed_dim(mut self, embed_dim: usize) -> Self {
        self.embed_dim = embed_dim;
        self
    }
}

#[derive(Clone, Debug)]
enum Head {
    Linear(Linear),
    Cosine { weight: usize, scale: f32 },
}

#[derive(Clone, Debug)]
pub struct Model {
    spec: ModelSpec,
    params: ParamStore,
    body: Vec<Layer>,
    head: Head,
}

/// Forward results for a batch.
#[derive(Clone, Debug)]
pub struct Output {
    pub logits: Tensor,
    /// Unit-norm rows, `(K, embed_dim)`.
    pub embedding: Tensor,
}

/// Everything the backward pass needs from a forward call.
#[derive(Debug)]
pub struct Trace {
    body: Vec<Cache>,
    features: Tensor,
    embedding: Tensor,
    norms: Vec<f32>,
    bn_updates: Vec<BnUpdate>,
}

impl Trace {
    pub fn bn_updates(&self) -> &[BnUpdate] {
        &self.bn_updates
    }
}

struct Builder {
    params: ParamStore,
    rng: ChaCha8Rng,
}

impl Builder {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: usize, bias: bool) -> Layer {
        let fan_in = (cin * k * k) as f32;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
        let w: Vec<f32> = (0..cout * cin * k * k).map(|_| normal.sample(&mut self.rng)).collect();
        let weight = self.params.add(
            format!("{name}.weight"),
            EntryKind::Param,
            Tensor::from_vec(&[cout, cin, k, k], w).expect("conv shape"),
        );
        let bias = bias.then(|| {
            let bound = 1.0 / fan_in.sqrt();
            let b: Vec<f32> = (0..cout).map(|_| self.rng.random_range(-bound..bound)).collect();
            self.params
                .add(format!("{name}.bias"), EntryKind::Param, Tensor::from_vec(&[cout], b).expect("bias"))
        });
        Layer::Conv(Conv2d {
            weight,
            bias,
            in_channels: cin,
            out_channels: cout,
            kernel: k,
            stride,
            padding: pad,
        })
    }

    fn bn(&mut self, name: &str, channels: usize) -> Layer {
        let gamma = self
            .params
            .add(format!("{name}.gamma"), EntryKind::Param, Tensor::full(&[channels], 1.0));
        let beta = self
            .params
            .add(format!("{name}.beta"), EntryKind::Param, Tensor::zeros(&[channels]));
        let running_mean = self
            .params
            .add(format!("{name}.running_mean"), EntryKind::Buffer, Tensor::zeros(&[channels]));
        let running_var = self
            .params
            .add(format!("{name}.running_var"), EntryKind::Buffer, Tensor::full(&[channels], 1.0));
        Layer::BatchNorm(BatchNorm {
            gamma,
            beta,
            running_mean,
            running_var,
            channels,
        })
    }

    fn linear_raw(&mut self, name: &str, fin: usize, fout: usize, bias: bool) -> Linear {
        let bound = 1.0 / (fin as f32).sqrt();
        let w: Vec<f32> = (0..fin * fout).map(|_| self.rng.random_range(-bound..bound)).collect();
        let weight = self.params.add(
            format!("{name}.weight"),
            EntryKind::Param,
            Tensor::from_vec(&[fout, fin], w).expect("linear shape"),
        );
        let bias = bias.then(|| {
            let b: Vec<f32> = (0..fout).map(|_| self.rng.random_range(-bound..bound)).collect();
            self.params
                .add(format!("{name}.bias"), EntryKind::Param, Tensor::from_vec(&[fout], b).expect("bias"))
        });
        Linear {
            weight,
            bias,
            in_features: fin,
            out_features: fout,
        }
    }

    fn linear(&mut self, name: &str, fin: usize, fout: usize) -> Layer {
        Layer::Linear(self.linear_raw(name, fin, fout, true))
    }

    fn basic_block(&mut self, name: &str, cin: usize, cout: usize, stride: usize) -> Layer {
        let main = vec![
            self.conv(&format!("{name}.conv1"), cin, cout, 3, stride, 1, false),
            self.bn(&format!("{name}.bn1"), cout),
            Layer::Relu,
            self.conv(&format!("{name}.conv2"), cout, cout, 3, 1, 1, false),
            self.bn(&format!("{name}.bn2"), cout),
        ];
        let shortcut = self.shortcut(name, cin, cout, stride);
        Layer::Residual { main, shortcut }
    }

    fn bottleneck(&mut self, name: &str, cin: usize, width: usize, stride: usize) -> Layer {
        let cout = width * 4;
        let main = vec![
            self.conv(&format!("{name}.conv1"), cin, width, 1, 1, 0, false),
            self.bn(&format!("{name}.bn1"), width),
            Layer::Relu,
            self.conv(&format!("{name}.conv2"), width, width, 3, stride, 1, false),
            self.bn(&format!("{name}.bn2"), width),
            Layer::Relu,
            self.conv(&format!("{name}.conv3"), width, cout, 1, 1, 0, false),
            self.bn(&format!("{name}.bn3"), cout),
        ];
        let shortcut = self.shortcut(name, cin, cout, stride);
        Layer::Residual { main, shortcut }
    }

    fn shortcut(&mut self, name: &str, cin: usize, cout: usize, stride: usize) -> Vec<Layer> {
        if stride == 1 && cin == cout {
            Vec::new()
        } else {
            vec![
                self.conv(&format!("{name}.down.conv"), cin, cout, 1, stride, 0, false),
                self.bn(&format!("{name}.down.bn"), cout),
            ]
        }
    }
}

fn build_lenet(b: &mut Builder, spec: &ModelSpec) -> Vec<Layer> {
    let mut body = vec![
        b.conv("conv1", 1, 6, 5, 1, 2, true),
        Layer::Relu,
        Layer::MaxPool2,
        b.conv("conv2", 6, 16, 5, 1, 0, true),
        Layer::Relu,
        Layer::MaxPool2,
        Layer::Flatten,
        b.linear("fc1", 16 * 5 * 5, 120),
        Layer::Relu,
    ];
    if spec.arch == Arch::LeNet5Embed2 {
        body.push(b.linear("fc2", 120, 84));
        body.push(Layer::Relu);
        body.push(b.linear("fc_embed", 84, spec.embed_dim));
    } else {
        body.push(b.linear("fc2", 120, spec.embed_dim));
    }
    body
}

fn build_resnet(b: &mut Builder, spec: &ModelSpec, blocks: [usize; 3]) -> Vec<Layer> {
    let bottleneck = spec.arch == Arch::ResNet50;
    let mut body = vec![b.conv("stem.conv", 1, STAGE_WIDTHS[0], 3, 1, 1, false), b.bn("stem.bn", STAGE_WIDTHS[0]), Layer::Relu];
    let mut channels = STAGE_WIDTHS[0];
    for (stage, (&count, &width)) in blocks.iter().zip(&STAGE_WIDTHS).enumerate() {
        for i in 0..count {
            let stride = if stage > 0 && i == 0 { 2 } else { 1 };
            let name = format!("layer{}.{}", stage + 1, i);
            if bottleneck {
                body.push(b.bottleneck(&name, channels, width, stride));
                channels = width * 4;
            } else {
                body.push(b.basic_block(&name, channels, width, stride));
                channels = width;
            }
        }
        if count == 0 && stage > 0 {
            // Keep the three-resolution layout when a stage has no blocks.
            body.push(b.conv(&format!("layer{}.transition", stage + 1), channels, width, 3, 2, 1, false));
            body.push(b.bn(&format!("layer{}.transition_bn", stage + 1), width));
            body.push(Layer::Relu);
            channels = width;
        }
    }
    body.push(Layer::GlobalAvgPool);
    body.push(b.bn("head.bn_in", channels));
    body.push(Layer::Dropout(HEAD_DROPOUT));
    if spec.arch == Arch::ResNet18Embed2 {
        body.push(b.linear("head.fc1", channels, 32));
        body.push(b.bn("head.bn_mid", 32));
        body.push(Layer::Relu);
        body.push(b.linear("head.fc2", 32, spec.embed_dim));
    } else {
        body.push(b.linear("head.fc", channels, spec.embed_dim));
    }
    body.push(b.bn("head.bn_out", spec.embed_dim));
    body
}

impl Model {
    /// Builds a freshly initialized model; initialization is a pure function of `seed`.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        if spec.num_classes < 2 {
            return Err(NnError::InvalidModel(format!("num_classes must be >= 2, got {}", spec.num_classes)));
        }
        if spec.embed_dim == 0 {
            return Err(NnError::InvalidModel("embed_dim must be positive".into()));
        }
        if let HeadKind::Cosine { scale } = spec.head {
            if !(scale > 0.0) {
                return Err(NnError::InvalidModel(format!("cosine head scale must be positive, got {scale}")));
            }
        }
        let mut b = Builder {
            params: ParamStore::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let body = match spec.arch.stage_blocks() {
            None => build_lenet(&mut b, &spec),
            Some(blocks) => build_resnet(&mut b, &spec, blocks),
        };
        let head = match spec.head {
            HeadKind::Linear => Head::Linear(b.linear_raw("classifier", spec.embed_dim, spec.num_classes, true)),
            HeadKind::Cosine { scale } => {
                let lin = b.linear_raw("classifier", spec.embed_dim, spec.num_classes, false);
                Head::Cosine {
                    weight: lin.weight,
                    scale,
                }
            }
        };
        Ok(Self {
            spec,
            params: b.params,
            body,
            head,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn arch(&self) -> Arch {
        self.spec.arch
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn embed_dim(&self) -> usize {
        self.spec.embed_dim
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Slot of the classifier weight matrix `(C, embed_dim)`.
    pub fn classifier_weight_slot(&self) -> usize {
        match &self.head {
            Head::Linear(lin) => lin.weight,
            Head::Cosine { weight, .. } => *weight,
        }
    }

    pub fn zero_grads(&self) -> Grads {
        Grads::zeros_for(&self.params)
    }

    /// Converts `[0, 255]` pixels into the network input scale.
    pub fn input_from_pixels(pixels: &[u8], count: usize) -> Result<Tensor> {
        if pixels.len() != count * IMAGE_PIXELS {
            return Err(NnError::ShapeMismatch {
                expected: vec![count, 1, IMAGE_SIDE, IMAGE_SIDE],
                actual: vec![pixels.len()],
            });
        }
        Tensor::from_vec(
            &[count, 1, IMAGE_SIDE, IMAGE_SIDE],
            pixels.iter().map(|&p| p as f32 / 255.0).collect(),
        )
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 || s[1] != 1 || s[2] != IMAGE_SIDE || s[3] != IMAGE_SIDE {
            return Err(NnError::ShapeMismatch {
                expected: vec![s.first().copied().unwrap_or(0), 1, IMAGE_SIDE, IMAGE_SIDE],
                actual: s.to_vec(),
            });
        }
        Ok(())
    }

    /// Forward pass keeping everything needed for [`Model::backward`].
    pub fn forward_traced(&self, x: &Tensor, mut ctx: ForwardCtx<'_>) -> Result<(Output, Trace)> {
        self.check_input(x)?;
        let (features, body) = forward_seq(&self.body, &self.params, x.clone(), &mut ctx)?;
        let (embedding, norms) = normalize_rows(&features);
        let logits = match &self.head {
            Head::Linear(lin) => lin.forward(&self.params, &features)?,
            Head::Cosine { weight, scale } => {
                let (w_hat, _) = normalize_rows(self.params.get(*weight));
                cosine_logits(&embedding, &w_hat, *scale)
            }
        };
        let trace = Trace {
            body,
            features,
            embedding: embedding.clone(),
            norms,
            bn_updates: ctx.into_bn_updates(),
        };
        Ok((Output { logits, embedding }, trace))
    }

    /// Inference-mode forward (running statistics, no dropout).
    pub fn forward(&self, x: &Tensor) -> Result<Output> {
        self.forward_traced(x, ForwardCtx::eval()).map(|(out, _)| out)
    }

    /// Backpropagates upstream gradients on the logits and/or the embedding.
    ///
    /// Parameter gradients are accumulated into `grads` when given; the input
    /// gradient is returned when `need_input_grad` is set.
    pub fn backward(
        &self,
        trace: &Trace,
        grad_logits: Option<&Tensor>,
        grad_embedding: Option<&Tensor>,
        grads: Option<&mut Grads>,
        need_input_grad: bool,
    ) -> Result<Option<Tensor>> {
        let mut bp = Backprop {
            params: &self.params,
            grads,
        };
        let mut g_emb = match grad_embedding {
            Some(g) => {
                if g.shape() != trace.embedding.shape() {
                    return Err(NnError::ShapeMismatch {
                        expected: trace.embedding.shape().to_vec(),
                        actual: g.shape().to_vec(),
                    });
                }
                g.clone()
            }
            None => Tensor::zeros(trace.embedding.shape()),
        };
        let mut g_feat = Tensor::zeros(trace.features.shape());
        if let Some(gl) = grad_logits {
            if gl.rows() != trace.features.rows() || gl.row_len() != self.spec.num_classes {
                return Err(NnError::ShapeMismatch {
                    expected: vec![trace.features.rows(), self.spec.num_classes],
                    actual: gl.shape().to_vec(),
                });
            }
            match &self.head {
                Head::Linear(lin) => {
                    if let Some(g) = lin.backward(&mut bp, &trace.features, gl, true) {
                        g_feat.add_assign(&g);
                    }
                }
                Head::Cosine { weight, scale } => {
                    let w = self.params.get(*weight);
                    let (w_hat, w_norms) = normalize_rows(w);
                    let n = gl.rows();
                    let c = self.spec.num_classes;
                    let mut gw_hat = Tensor::zeros(w.shape());
                    for i in 0..n {
                        let gi = gl.row(i);
                        for j in 0..c {
                            let g = gi[j] * scale;
                            if g == 0.0 {
                                continue;
                            }
                            for (e, &wv) in g_emb.row_mut(i).iter_mut().zip(w_hat.row(j)) {
                                *e += g * wv;
                            }
                            for (gw, &ev) in gw_hat.row_mut(j).iter_mut().zip(trace.embedding.row(i)) {
                                *gw += g * ev;
                            }
                        }
                    }
                    if let Some(grads) = bp.grads.as_deref_mut() {
                        let gw = normalize_rows_backward(&w_hat, &w_norms, &gw_hat);
                        grads.get_mut(*weight).add_assign(&gw);
                    }
                }
            }
        }
        g_feat.add_assign(&normalize_rows_backward(&trace.embedding, &trace.norms, &g_emb));
        let gx = backward_seq(&self.body, &trace.body, &mut bp, g_feat, need_input_grad);
        if need_input_grad {
            let gx = gx.ok_or_else(|| NnError::InvalidModel("input gradient unavailable".into()))?;
            if !gx.all_finite() {
                return Err(NnError::NonFiniteGradient("input".into()));
            }
            Ok(Some(gx))
        } else {
            Ok(None)
        }
    }

    /// Folds training-mode batch statistics into the running averages.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        for u in updates {
            for (r, &b) in self.params.get_mut(u.mean_slot).data_mut().iter_mut().zip(&u.batch_mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
            for (r, &b) in self.params.get_mut(u.var_slot).data_mut().iter_mut().zip(&u.batch_var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
        }
    }
}

fn cosine_logits(embedding: &Tensor, w_hat: &Tensor, scale: f32) -> Tensor {
    let n = embedding.rows();
    let c = w_hat.rows();
    let mut logits = Tensor::zeros(&[n, c]);
    for i in 0..n {
        let e = embedding.row(i);
        for (j, v) in logits.row_mut(i).iter_mut().enumerate() {
            *v = scale * dot(e, w_hat.row(j));
        }
    }
    logits
}
