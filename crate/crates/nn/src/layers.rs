//! Layers with explicit forward caches and hand-written backward passes.
//!
//! Layers never own their weights; they hold slot indices into a [`ParamStore`]
//! so that a model can be read concurrently while a separate [`Grads`] buffer
//! collects parameter gradients.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{NnError, Result};
use crate::gemm::{gemm, Mat};
use crate::params::{Grads, ParamStore};
use crate::tensor::Tensor;

pub const BN_EPS: f32 = 1e-5;

thread_local! {
    static SCRATCH: std::cell::RefCell<Vec<Vec<f32>>> = const { std::cell::RefCell::new(Vec::new()) };
}

/// Borrows a per-thread buffer of exactly `len` floats with unspecified contents.
fn take_scratch(len: usize) -> Vec<f32> {
    let mut buf = SCRATCH.with(|s| s.borrow_mut().pop()).unwrap_or_default();
    if buf.len() < len {
        buf.resize(len, 0.0);
    }
    buf.truncate(len);
    buf
}

fn give_scratch(buf: Vec<f32>) {
    SCRATCH.with(|s| {
        let mut pool = s.borrow_mut();
        if pool.len() < 4 {
            pool.push(buf);
        }
    });
}

/// Pending running-statistic update produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub mean_slot: usize,
    pub var_slot: usize,
    pub batch_mean: Vec<f32>,
    pub batch_var: Vec<f32>,
}

/// Per-call forward state: train/eval switch, dropout randomness, and the
/// batch-norm statistics observed in train mode.
pub struct ForwardCtx<'a> {
    train: bool,
    rng: Option<&'a mut ChaCha8Rng>,
    bn_updates: Vec<BnUpdate>,
}

impl<'a> ForwardCtx<'a> {
    /// Inference behaviour: running batch-norm statistics, dropout off.
    pub fn eval() -> Self {
        Self {
            train: false,
            rng: None,
            bn_updates: Vec::new(),
        }
    }

    pub fn train(rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            train: true,
            rng: Some(rng),
            bn_updates: Vec::new(),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn into_bn_updates(self) -> Vec<BnUpdate> {
        self.bn_updates
    }
}

/// Accumulation target for a backward pass.
pub struct Backprop<'a> {
    pub params: &'a ParamStore,
    pub grads: Option<&'a mut Grads>,
}

impl Backprop<'_> {
    fn wants_params(&self) -> bool {
        self.grads.is_some()
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: usize,
    pub bias: Option<usize>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    fn check_input(&self, x: &Tensor) -> Result<(usize, usize, usize)> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.in_channels || s[2] + 2 * self.padding < self.kernel {
            return Err(NnError::ShapeMismatch {
                expected: vec![s.first().copied().unwrap_or(0), self.in_channels, self.kernel, self.kernel],
                actual: s.to_vec(),
            });
        }
        Ok((s[0], s[2], s[3]))
    }

    /// Images per unfolded GEMM so the column buffer stays near `COL_BUDGET` floats.
    fn group_size(&self, n: usize, kdim: usize, plane: usize) -> usize {
        (COL_BUDGET / (kdim * plane).max(1)).clamp(1, n.max(1))
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let (n, h, w) = self.check_input(x)?;
        let (oh, ow) = self.out_hw(h, w);
        let kdim = self.in_channels * self.kernel * self.kernel;
        let plane = oh * ow;
        let co = self.out_channels;
        let weight = ps.get(self.weight).data();
        let mut out = Tensor::zeros(&[n, co, oh, ow]);
        if self.is_pointwise() {
            for i in 0..n {
                gemm(1.0, Mat::new(weight, co, kdim), Mat::new(x.row(i), kdim, plane), 0.0, out.row_mut(i));
            }
        } else {
            let g = self.group_size(n, kdim, plane);
            let mut cols = take_scratch(kdim * g * plane);
            let mut tmp = take_scratch(co * g * plane);
            for start in (0..n).step_by(g) {
                let m = g.min(n - start);
                let ld = m * plane;
                for j in 0..m {
                    im2col(x.row(start + j), self, h, w, oh, ow, &mut cols, ld, j * plane);
                }
                gemm(
                    1.0,
                    Mat::new(weight, co, kdim),
                    Mat::new(&cols[..kdim * ld], kdim, ld),
                    0.0,
                    &mut tmp[..co * ld],
                );
                for j in 0..m {
                    let dst = out.row_mut(start + j);
                    for c in 0..co {
                        dst[c * plane..(c + 1) * plane]
                            .copy_from_slice(&tmp[c * ld + j * plane..c * ld + (j + 1) * plane]);
                    }
                }
            }
            give_scratch(cols);
            give_scratch(tmp);
        }
        if let Some(b) = self.bias {
            let bias = ps.get(b).data();
            for i in 0..n {
                for (c, chunk) in out.row_mut(i).chunks_mut(plane).enumerate() {
                    chunk.iter_mut().for_each(|v| *v += bias[c]);
                }
            }
        }
        Ok(out)
    }

    pub fn backward(
        &self,
        bp: &mut Backprop<'_>,
        x: &Tensor,
        gy: &Tensor,
        need_input_grad: bool,
    ) -> Option<Tensor> {
        let (n, h, w) = (x.shape()[0], x.shape()[2], x.shape()[3]);
        let (oh, ow) = self.out_hw(h, w);
        let kdim = self.in_channels * self.kernel * self.kernel;
        let plane = oh * ow;
        let co = self.out_channels;
        let weight = bp.params.get(self.weight).data();
        let mut gx = need_input_grad.then(|| Tensor::zeros(x.shape()));
        if let (Some(grads), Some(b)) = (bp.grads.as_deref_mut(), self.bias) {
            let gb = grads.get_mut(b).data_mut();
            for i in 0..n {
                for (c, chunk) in gy.row(i).chunks(plane).enumerate() {
                    gb[c] += chunk.iter().sum::<f32>();
                }
            }
        }
        if self.is_pointwise() {
            for i in 0..n {
                let gyi = gy.row(i);
                if let Some(grads) = bp.grads.as_deref_mut() {
                    gemm(
                        1.0,
                        Mat::new(gyi, co, plane),
                        Mat::new(x.row(i), kdim, plane).t(),
                        1.0,
                        grads.get_mut(self.weight).data_mut(),
                    );
                }
                if let Some(gx) = gx.as_mut() {
                    gemm(1.0, Mat::new(weight, co, kdim).t(), Mat::new(gyi, co, plane), 0.0, gx.row_mut(i));
                }
            }
            return gx;
        }
        let wants_params = bp.wants_params();
        let g = self.group_size(n, kdim, plane);
        let mut cols = take_scratch(if wants_params { kdim * g * plane } else { 0 });
        let mut gcols = take_scratch(if gx.is_some() { kdim * g * plane } else { 0 });
        let mut gyg = take_scratch(co * g * plane);
        for start in (0..n).step_by(g) {
            let m = g.min(n - start);
            let ld = m * plane;
            for j in 0..m {
                let src = gy.row(start + j);
                for c in 0..co {
                    gyg[c * ld + j * plane..c * ld + (j + 1) * plane]
                        .copy_from_slice(&src[c * plane..(c + 1) * plane]);
                }
            }
            let gy_mat = Mat::new(&gyg[..co * ld], co, ld);
            if let Some(grads) = bp.grads.as_deref_mut() {
                for j in 0..m {
                    im2col(x.row(start + j), self, h, w, oh, ow, &mut cols, ld, j * plane);
                }
                gemm(
                    1.0,
                    gy_mat,
                    Mat::new(&cols[..kdim * ld], kdim, ld).t(),
                    1.0,
                    grads.get_mut(self.weight).data_mut(),
                );
            }
            if let Some(gx) = gx.as_mut() {
                gemm(1.0, Mat::new(weight, co, kdim).t(), gy_mat, 0.0, &mut gcols[..kdim * ld]);
                for j in 0..m {
                    col2im(&gcols, self, h, w, oh, ow, gx.row_mut(start + j), ld, j * plane);
                }
            }
        }
        give_scratch(cols);
        give_scratch(gcols);
        give_scratch(gyg);
        gx
    }
}

/// Target size in floats of one unfolded column buffer.
const COL_BUDGET: usize = 1 << 17;

/// Unfolds one image into the `(C*k*k) x (oh*ow)` block of `cols` starting at
/// column `offset`, with row stride `ld`.
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f32],
    conv: &Conv2d,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    cols: &mut [f32],
    ld: usize,
    offset: usize,
) {
    let (k, s, p) = (conv.kernel, conv.stride, conv.padding);
    let plane = oh * ow;
    for c in 0..conv.in_channels {
        let xc = &x[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * ld + offset..row * ld + offset + plane];
                for oy in 0..oh {
                    let iy = (oy * s + ki) as isize - p as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &xc[iy as usize * w..(iy as usize + 1) * w];
                    if s == 1 {
                        // Valid output columns are a contiguous run when the stride is one.
                        let lo = p.saturating_sub(kj).min(ow);
                        let hi = (w + p).saturating_sub(kj).min(ow).max(lo);
                        line[..lo].fill(0.0);
                        line[hi..].fill(0.0);
                        let base = lo + kj - p;
                        line[lo..hi].copy_from_slice(&src[base..base + hi - lo]);
                        continue;
                    }
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * s + kj) as isize - p as isize;
                        *v = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]; accumulates into `gx`.
#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f32],
    conv: &Conv2d,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    gx: &mut [f32],
    ld: usize,
    offset: usize,
) {
    let (k, s, p) = (conv.kernel, conv.stride, conv.padding);
    let plane = oh * ow;
    for c in 0..conv.in_channels {
        let gc = &mut gx[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * ld + offset..row * ld + offset + plane];
                for oy in 0..oh {
                    let iy = (oy * s + ki) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut gc[iy as usize * w..(iy as usize + 1) * w];
                    let line = &src[oy * ow..(oy + 1) * ow];
                    if s == 1 {
                        let lo = p.saturating_sub(kj).min(ow);
                        let hi = (w + p).saturating_sub(kj).min(ow).max(lo);
                        let base = lo + kj - p;
                        for (d, v) in dst[base..base + hi - lo].iter_mut().zip(&line[lo..hi]) {
                            *d += v;
                        }
                        continue;
                    }
                    for (ox, &v) in line.iter().enumerate() {
                        let ix = (ox * s + kj) as isize - p as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Batch normalization over axis 1 of a `(N, C, ...)` tensor.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: usize,
    pub beta: usize,
    pub running_mean: usize,
    pub running_var: usize,
    pub channels: usize,
}

#[derive(Debug)]
pub struct BnCache {
    x_hat: Tensor,
    inv_std: Vec<f32>,
    batch_stats: bool,
}

impl BatchNorm {
    pub fn forward(&self, ps: &ParamStore, x: &Tensor, ctx: &mut ForwardCtx<'_>) -> Result<(Tensor, BnCache)> {
        if x.shape().len() < 2 || x.shape()[1] != self.channels {
            return Err(NnError::ShapeMismatch {
                expected: vec![x.rows(), self.channels],
                actual: x.shape().to_vec(),
            });
        }
        let n = x.rows();
        let c = self.channels;
        let spatial = x.row_len() / c;
        let count = (n * spatial) as f32;
        let (mean, var) = if ctx.train {
            let mut sum = vec![0.0f64; c];
            for i in 0..n {
                for (ch, chunk) in x.row(i).chunks(spatial).enumerate() {
                    sum[ch] += lane_sum(chunk, |v| v) as f64;
                }
            }
            let mean: Vec<f32> = sum.iter().map(|s| (s / count as f64) as f32).collect();
            let mut sq = vec![0.0f64; c];
            for i in 0..n {
                for (ch, chunk) in x.row(i).chunks(spatial).enumerate() {
                    let m = mean[ch];
                    sq[ch] += lane_sum(chunk, |v| (v - m) * (v - m)) as f64;
                }
            }
            let var: Vec<f32> = sq.iter().map(|s| (s / count as f64) as f32).collect();
            let unbiased = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            ctx.bn_updates.push(BnUpdate {
                mean_slot: self.running_mean,
                var_slot: self.running_var,
                batch_mean: mean.clone(),
                batch_var: var.iter().map(|v| v * unbiased).collect(),
            });
            (mean, var)
        } else {
            (
                ps.get(self.running_mean).data().to_vec(),
                ps.get(self.running_var).data().to_vec(),
            )
        };
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let gamma = ps.get(self.gamma).data();
        let beta = ps.get(self.beta).data();
        let mut x_hat = Tensor::zeros(x.shape());
        let mut y = Tensor::zeros(x.shape());
        for (k, ((xc, hc), yc)) in x
            .data()
            .chunks(spatial)
            .zip(x_hat.data_mut().chunks_mut(spatial))
            .zip(y.data_mut().chunks_mut(spatial))
            .enumerate()
        {
            let ch = k % c;
            let (m, is, g, b) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
            for ((h, o), &v) in hc.iter_mut().zip(yc.iter_mut()).zip(xc) {
                *h = (v - m) * is;
                *o = g * *h + b;
            }
        }
        Ok((
            y,
            BnCache {
                x_hat,
                inv_std,
                batch_stats: ctx.train,
            },
        ))
    }

    pub fn backward(&self, bp: &mut Backprop<'_>, cache: &BnCache, gy: &Tensor) -> Tensor {
        let n = gy.rows();
        let c = self.channels;
        let spatial = gy.row_len() / c;
        let count = (n * spatial) as f32;
        let mut sum_dy = vec![0.0f32; c];
        let mut sum_dy_xhat = vec![0.0f32; c];
        for i in 0..n {
            let gi = gy.row(i);
            let hi = cache.x_hat.row(i);
            for ch in 0..c {
                let r = ch * spatial..(ch + 1) * spatial;
                let (g, h) = (&gi[r.clone()], &hi[r]);
                sum_dy[ch] += lane_sum(g, |v| v);
                sum_dy_xhat[ch] += lane_dot(g, h);
            }
        }
        if let Some(grads) = bp.grads.as_deref_mut() {
            grads
                .get_mut(self.gamma)
                .data_mut()
                .iter_mut()
                .zip(&sum_dy_xhat)
                .for_each(|(g, v)| *g += v);
            grads
                .get_mut(self.beta)
                .data_mut()
                .iter_mut()
                .zip(&sum_dy)
                .for_each(|(g, v)| *g += v);
        }
        let gamma = bp.params.get(self.gamma).data();
        let mut gx = Tensor::zeros(gy.shape());
        for i in 0..n {
            let gi = gy.row(i);
            let hi = cache.x_hat.row(i);
            let out = gx.row_mut(i);
            for ch in 0..c {
                let r = ch * spatial..(ch + 1) * spatial;
                let scale = gamma[ch] * cache.inv_std[ch];
                if cache.batch_stats {
                    let mean_dy = sum_dy[ch] / count;
                    let mean_dy_xhat = sum_dy_xhat[ch] / count;
                    for ((o, &g), &h) in out[r.clone()].iter_mut().zip(&gi[r.clone()]).zip(&hi[r]) {
                        *o = scale * (g - mean_dy - h * mean_dy_xhat);
                    }
                } else {
                    for (o, &g) in out[r.clone()].iter_mut().zip(&gi[r]) {
                        *o = scale * g;
                    }
                }
            }
        }
        gx
    }
}

/// Sum of `f(v)` over `xs` with eight independent accumulators so it vectorizes.
fn lane_sum(xs: &[f32], f: impl Fn(f32) -> f32) -> f32 {
    let mut acc = [0.0f32; 8];
    let mut it = xs.chunks_exact(8);
    for block in &mut it {
        for (a, &v) in acc.iter_mut().zip(block) {
            *a += f(v);
        }
    }
    let tail: f32 = it.remainder().iter().map(|&v| f(v)).sum();
    acc.iter().sum::<f32>() + tail
}

fn lane_dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f32 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (ba, bb) in ca.zip(cb) {
        for ((s, &x), &y) in acc.iter_mut().zip(ba).zip(bb) {
            *s += x * y;
        }
    }
    acc.iter().sum::<f32>() + tail
}

/// Fully connected layer on `(N, in)` inputs; weight is `(out, in)`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: usize,
    pub bias: Option<usize>,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> Result<Tensor> {
        if x.shape().len() != 2 || x.shape()[1] != self.in_features {
            return Err(NnError::ShapeMismatch {
                expected: vec![x.rows(), self.in_features],
                actual: x.shape().to_vec(),
            });
        }
        let n = x.rows();
        let mut y = Tensor::zeros(&[n, self.out_features]);
        gemm(
            1.0,
            Mat::new(x.data(), n, self.in_features),
            Mat::new(ps.get(self.weight).data(), self.out_features, self.in_features).t(),
            0.0,
            y.data_mut(),
        );
        if let Some(b) = self.bias {
            let bias = ps.get(b).data();
            for i in 0..n {
                y.row_mut(i).iter_mut().zip(bias).for_each(|(v, b)| *v += b);
            }
        }
        Ok(y)
    }

    pub fn backward(&self, bp: &mut Backprop<'_>, x: &Tensor, gy: &Tensor, need_input_grad: bool) -> Option<Tensor> {
        let n = x.rows();
        if let Some(grads) = bp.grads.as_deref_mut() {
            gemm(
                1.0,
                Mat::new(gy.data(), n, self.out_features).t(),
                Mat::new(x.data(), n, self.in_features),
                1.0,
                grads.get_mut(self.weight).data_mut(),
            );
            if let Some(b) = self.bias {
                let gb = grads.get_mut(b).data_mut();
                for i in 0..n {
                    gb.iter_mut().zip(gy.row(i)).for_each(|(g, v)| *g += v);
                }
            }
        }
        need_input_grad.then(|| {
            let mut gx = Tensor::zeros(&[n, self.in_features]);
            gemm(
                1.0,
                Mat::new(gy.data(), n, self.out_features),
                Mat::new(bp.params.get(self.weight).data(), self.out_features, self.in_features),
                0.0,
                gx.data_mut(),
            );
            gx
        })
    }
}

#[derive(Clone, Debug)]
pub enum Layer {
    Conv(Conv2d),
    BatchNorm(BatchNorm),
    Relu,
    /// 2x2 max pooling with stride 2.
    MaxPool2,
    GlobalAvgPool,
    Flatten,
    Linear(Linear),
    Dropout(f32),
    /// `relu(main(x) + shortcut(x))`; an empty shortcut is the identity.
    Residual { main: Vec<Layer>, shortcut: Vec<Layer> },
}

#[derive(Debug)]
pub enum Cache {
    Input(Tensor),
    BatchNorm(BnCache),
    Mask(Vec<bool>),
    Pool { argmax: Vec<u32>, in_shape: Vec<usize> },
    Shape(Vec<usize>),
    Dropout(Option<Vec<f32>>),
    Residual {
        main: Vec<Cache>,
        shortcut: Vec<Cache>,
        mask: Vec<bool>,
    },
}

impl Layer {
    pub fn forward(&self, ps: &ParamStore, x: Tensor, ctx: &mut ForwardCtx<'_>) -> Result<(Tensor, Cache)> {
        match self {
            Layer::Conv(conv) => {
                let y = conv.forward(ps, &x)?;
                Ok((y, Cache::Input(x)))
            }
            Layer::BatchNorm(bn) => {
                let (y, cache) = bn.forward(ps, &x, ctx)?;
                Ok((y, Cache::BatchNorm(cache)))
            }
            Layer::Relu => {
                let mut y = x;
                let mask = relu_in_place(y.data_mut());
                Ok((y, Cache::Mask(mask)))
            }
            Layer::MaxPool2 => max_pool2(&x),
            Layer::GlobalAvgPool => {
                let s = x.shape().to_vec();
                if s.len() != 4 {
                    return Err(NnError::ShapeMismatch {
                        expected: vec![s[0], 0, 0, 0],
                        actual: s,
                    });
                }
                let plane = s[2] * s[3];
                let mut y = Tensor::zeros(&[s[0], s[1]]);
                for i in 0..s[0] {
                    let xi = x.row(i);
                    for (c, v) in y.row_mut(i).iter_mut().enumerate() {
                        *v = xi[c * plane..(c + 1) * plane].iter().sum::<f32>() / plane as f32;
                    }
                }
                Ok((y, Cache::Shape(s)))
            }
            Layer::Flatten => {
                let s = x.shape().to_vec();
                let n = x.rows();
                let w = x.row_len();
                Ok((x.reshape(&[n, w])?, Cache::Shape(s)))
            }
            Layer::Linear(lin) => {
                let y = lin.forward(ps, &x)?;
                Ok((y, Cache::Input(x)))
            }
            Layer::Dropout(p) => {
                if !ctx.train || *p <= 0.0 {
                    return Ok((x, Cache::Dropout(None)));
                }
                let rng = ctx
                    .rng
                    .as_deref_mut()
                    .expect("training forward requires an rng");
                let keep = 1.0 - p;
                let mask: Vec<f32> = (0..x.len())
                    .map(|_| if rng.random::<f32>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                let mut y = x;
                y.data_mut().iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
                Ok((y, Cache::Dropout(Some(mask))))
            }
            Layer::Residual { main, shortcut } => {
                let (mut y, main_caches) = forward_seq(main, ps, x.clone(), ctx)?;
                let (s, short_caches) = forward_seq(shortcut, ps, x, ctx)?;
                if y.shape() != s.shape() {
                    return Err(NnError::ShapeMismatch {
                        expected: y.shape().to_vec(),
                        actual: s.shape().to_vec(),
                    });
                }
                y.add_assign(&s);
                let mask = relu_in_place(y.data_mut());
                Ok((
                    y,
                    Cache::Residual {
                        main: main_caches,
                        shortcut: short_caches,
                        mask,
                    },
                ))
            }
        }
    }

    /// Returns the input gradient when `need_input_grad` is set.
    pub fn backward(
        &self,
        bp: &mut Backprop<'_>,
        cache: &Cache,
        gy: Tensor,
        need_input_grad: bool,
    ) -> Option<Tensor> {
        match (self, cache) {
            (Layer::Conv(conv), Cache::Input(x)) => conv.backward(bp, x, &gy, need_input_grad),
            (Layer::BatchNorm(bn), Cache::BatchNorm(c)) => Some(bn.backward(bp, c, &gy)),
            (Layer::Relu, Cache::Mask(mask)) => {
                let mut g = gy;
                apply_mask(g.data_mut(), mask);
                Some(g)
            }
            (Layer::MaxPool2, Cache::Pool { argmax, in_shape }) => {
                let mut gx = Tensor::zeros(in_shape);
                let data = gx.data_mut();
                for (&src, &g) in argmax.iter().zip(gy.data()) {
                    data[src as usize] += g;
                }
                Some(gx)
            }
            (Layer::GlobalAvgPool, Cache::Shape(s)) => {
                let plane = s[2] * s[3];
                let mut gx = Tensor::zeros(s);
                for i in 0..s[0] {
                    let gi = gy.row(i).to_vec();
                    for (c, chunk) in gx.row_mut(i).chunks_mut(plane).enumerate() {
                        chunk.fill(gi[c] / plane as f32);
                    }
                }
                Some(gx)
            }
            (Layer::Flatten, Cache::Shape(s)) => Some(gy.reshape(s).expect("flatten shape")),
            (Layer::Linear(lin), Cache::Input(x)) => lin.backward(bp, x, &gy, need_input_grad),
            (Layer::Dropout(_), Cache::Dropout(mask)) => {
                let mut g = gy;
                if let Some(mask) = mask {
                    g.data_mut().iter_mut().zip(mask).for_each(|(v, m)| *v *= m);
                }
                Some(g)
            }
            (
                Layer::Residual { main, shortcut },
                Cache::Residual {
                    main: mc,
                    shortcut: sc,
                    mask,
                },
            ) => {
                let mut g = gy;
                apply_mask(g.data_mut(), mask);
                let gs = backward_seq(shortcut, sc, bp, g.clone(), need_input_grad);
                let gm = backward_seq(main, mc, bp, g, need_input_grad);
                match (gm, gs) {
                    (Some(mut a), Some(b)) => {
                        a.add_assign(&b);
                        Some(a)
                    }
                    _ => None,
                }
            }
            _ => unreachable!("cache does not belong to this layer"),
        }
    }
}

pub fn forward_seq(
    layers: &[Layer],
    ps: &ParamStore,
    mut x: Tensor,
    ctx: &mut ForwardCtx<'_>,
) -> Result<(Tensor, Vec<Cache>)> {
    let mut caches = Vec::with_capacity(layers.len());
    for layer in layers {
        let (y, cache) = layer.forward(ps, x, ctx)?;
        caches.push(cache);
        x = y;
    }
    Ok((x, caches))
}

pub fn backward_seq(
    layers: &[Layer],
    caches: &[Cache],
    bp: &mut Backprop<'_>,
    mut gy: Tensor,
    need_input_grad: bool,
) -> Option<Tensor> {
    for (idx, (layer, cache)) in layers.iter().zip(caches).enumerate().rev() {
        let need = idx > 0 || need_input_grad;
        match layer.backward(bp, cache, gy, need) {
            Some(g) => gy = g,
            None => return None,
        }
    }
    Some(gy)
}

fn relu_in_place(data: &mut [f32]) -> Vec<bool> {
    data.iter_mut()
        .map(|v| {
            let on = *v > 0.0;
            if !on {
                *v = 0.0;
            }
            on
        })
        .collect()
}

fn apply_mask(data: &mut [f32], mask: &[bool]) {
    for (v, &m) in data.iter_mut().zip(mask) {
        if !m {
            *v = 0.0;
        }
    }
}

fn max_pool2(x: &Tensor) -> Result<(Tensor, Cache)> {
    let s = x.shape().to_vec();
    if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
        return Err(NnError::ShapeMismatch {
            expected: vec![s[0], s.get(1).copied().unwrap_or(0), 2, 2],
            actual: s,
        });
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Tensor::zeros(&[n, c, oh, ow]);
    let mut argmax = Vec::with_capacity(y.len());
    let data = x.data();
    let out = y.data_mut();
    let mut o = 0;
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + (2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if data[idx] > data[best] {
                        best = idx;
                    }
                }
                out[o] = data[best];
                argmax.push(best as u32);
                o += 1;
            }
        }
    }
    Ok((y, Cache::Pool { argmax, in_shape: s }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::EntryKind;

    fn naive_conv(x: &[f32], wt: &[f32], cin: usize, cout: usize, h: usize, w: usize, k: usize, s: usize, p: usize) -> Vec<f32> {
        let oh = (h + 2 * p - k) / s + 1;
        let ow = (w + 2 * p - k) / s + 1;
        let mut out = vec![0.0; cout * oh * ow];
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..cin {
                        for ki in 0..k {
                            for kj in 0..k {
                                let iy = (oy * s + ki) as isize - p as isize;
                                let ix = (ox * s + kj) as isize - p as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += x[(ci * h + iy as usize) * w + ix as usize]
                                        * wt[((co * cin + ci) * k + ki) * k + kj];
                                }
                            }
                        }
                    }
                    out[(co * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_convolution() {
        for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (5, 1, 2), (1, 2, 0), (1, 1, 0)] {
            let (cin, cout, h, w) = (2, 3, 6, 6);
            let mut ps = ParamStore::new();
            let wt: Vec<f32> = (0..cout * cin * k * k).map(|i| ((i * 7) % 11) as f32 - 5.0).collect();
            let slot = ps.add("w", EntryKind::Param, Tensor::from_vec(&[cout, cin, k, k], wt.clone()).unwrap());
            let conv = Conv2d {
                weight: slot,
                bias: None,
                in_channels: cin,
                out_channels: cout,
                kernel: k,
                stride: s,
                padding: p,
            };
            let xv: Vec<f32> = (0..cin * h * w).map(|i| ((i * 5) % 13) as f32 * 0.1).collect();
            let x = Tensor::from_vec(&[1, cin, h, w], xv.clone()).unwrap();
            let y = conv.forward(&ps, &x).unwrap();
            let want = naive_conv(&xv, &wt, cin, cout, h, w, k, s, p);
            for (a, b) in y.data().iter().zip(&want) {
                assert!((a - b).abs() < 1e-4, "k={k} s={s} p={p}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn max_pool_routes_gradient_to_argmax() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 4.0, 2.0, 3.0]).unwrap();
        let (y, cache) = max_pool2(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        let ps = ParamStore::new();
        let mut bp = Backprop { params: &ps, grads: None };
        let g = Layer::MaxPool2
            .backward(&mut bp, &cache, Tensor::full(&[1, 1, 1, 1], 2.0), true)
            .unwrap();
        assert_eq!(g.data(), &[0.0, 2.0, 0.0, 0.0]);
    }
}
