//! Scalar objectives over a model and their gradients.

use crate::error::{NnError, Result};
use crate::layers::ForwardCtx;
use crate::loss::{arcface_from_cosines, embedding_distance, softmax_cross_entropy, LossConfig, LossKind};
use crate::model::{HeadKind, Model, Output};
use crate::params::Grads;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub enum Objective<'a> {
    /// Mean classification loss against `labels`.
    Classification { labels: &'a [usize], loss: LossConfig },
    /// Mean over rows of `||E(x_i) - targets_i||^2`.
    EmbeddingDistance { targets: &'a Tensor },
}

#[derive(Clone, Debug)]
pub struct GradientBundle {
    pub loss: f32,
    /// Present when parameter gradients were requested.
    pub wrt_params: Option<Grads>,
    /// Gradient with respect to the `[0, 1]`-scaled input.
    pub wrt_input: Tensor,
    pub output: Output,
}

/// Classification loss and its logits gradient for the model's head.
pub fn classification_loss(model: &Model, logits: &Tensor, labels: &[usize], loss: &LossConfig) -> Result<(f32, Tensor)> {
    match (loss.kind, model.spec().head) {
        (LossKind::SoftmaxCe, _) => softmax_cross_entropy(logits, labels),
        (LossKind::ArcFace, HeadKind::Cosine { scale }) => {
            let mut cos = logits.clone();
            cos.scale(1.0 / scale);
            let (value, mut g) = arcface_from_cosines(&cos, labels, loss)?;
            g.scale(1.0 / scale);
            Ok((value, g))
        }
        (LossKind::ArcFace, HeadKind::Linear) => Err(NnError::InvalidLossConfig(
            "angular margin loss needs a cosine classification head".into(),
        )),
    }
}

/// Forward + backward of `objective` at input `x`.
pub fn compute_gradients(
    model: &Model,
    x: &Tensor,
    objective: Objective<'_>,
    ctx: ForwardCtx<'_>,
    want_params: bool,
) -> Result<GradientBundle> {
    let (output, trace) = model.forward_traced(x, ctx)?;
    let mut grads = want_params.then(|| model.zero_grads());
    let (loss, wrt_input) = match objective {
        Objective::Classification { labels, loss } => {
            let (value, gl) = classification_loss(model, &output.logits, labels, &loss)?;
            let gx = model.backward(&trace, Some(&gl), None, grads.as_mut(), true)?;
            (value, gx)
        }
        Objective::EmbeddingDistance { targets } => {
            let (value, ge) = embedding_distance(&output.embedding, targets)?;
            let gx = model.backward(&trace, None, Some(&ge), grads.as_mut(), true)?;
            (value, gx)
        }
    };
    if let Some(g) = &grads {
        if !g.all_finite() {
            return Err(NnError::NonFiniteGradient("parameters".into()));
        }
    }
    Ok(GradientBundle {
        loss,
        wrt_params: grads,
        wrt_input: wrt_input.expect("input gradient requested"),
        output,
    })
}
