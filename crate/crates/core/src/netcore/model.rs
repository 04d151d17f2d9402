use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{BetaGrid, LogitGrid, Parameters};
use crate::error::{Error, Result};
use crate::seed;
use crate::synthgrid::FeatureGrid;

/// Output channels of the first uncertainty-branch layer.
pub const BRANCH_WIDTH: usize = 64;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

const BETA_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelShape {
    pub in_dim: usize,
    pub hidden: usize,
    pub classes: usize,
    pub branch_width: usize,
}

impl ModelShape {
    pub fn new(in_dim: usize, hidden: usize, classes: usize) -> Self {
        Self {
            in_dim,
            hidden,
            classes,
            branch_width: BRANCH_WIDTH,
        }
    }
}

/// Trainable weights of [`SegModel`].
///
/// Trunk: pointwise `in_dim -> hidden` + ReLU, 3x3 `hidden -> hidden` (zero
/// padding) + ReLU. Head: pointwise `hidden -> classes`. Branch: pointwise
/// `hidden -> branch_width` (no bias), batchnorm, pointwise `branch_width -> 1`,
/// sigmoid.
#[derive(Clone, Debug, PartialEq)]
pub struct SegWeights {
    /// `[hidden][in_dim]`
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `[out][in][ky * 3 + kx]`
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    /// `[classes][hidden]`
    pub wc: Vec<f64>,
    pub bc: Vec<f64>,
    /// `[branch_width][hidden]`
    pub wb1: Vec<f64>,
    pub bn_gamma: Vec<f64>,
    pub bn_beta: Vec<f64>,
    pub wb2: Vec<f64>,
    pub bb2: Vec<f64>,
}

impl SegWeights {
    pub fn zeros(s: ModelShape) -> Self {
        Self {
            w1: vec![0.0; s.hidden * s.in_dim],
            b1: vec![0.0; s.hidden],
            w2: vec![0.0; s.hidden * s.hidden * 9],
            b2: vec![0.0; s.hidden],
            wc: vec![0.0; s.classes * s.hidden],
            bc: vec![0.0; s.classes],
            wb1: vec![0.0; s.branch_width * s.hidden],
            bn_gamma: vec![0.0; s.branch_width],
            bn_beta: vec![0.0; s.branch_width],
            wb2: vec![0.0; s.branch_width],
            bb2: vec![0.0; 1],
        }
    }
}

impl Parameters for SegWeights {
    fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        vec![
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
            ("wc", &self.wc),
            ("bc", &self.bc),
            ("wb1", &self.wb1),
            ("bn_gamma", &self.bn_gamma),
            ("bn_beta", &self.bn_beta),
            ("wb2", &self.wb2),
            ("bb2", &self.bb2),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        vec![
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
            ("wc", &mut self.wc),
            ("bc", &mut self.bc),
            ("wb1", &mut self.wb1),
            ("bn_gamma", &mut self.bn_gamma),
            ("bn_beta", &mut self.bn_beta),
            ("wb2", &mut self.wb2),
            ("bb2", &mut self.bb2),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, dropout active.
    Train { dropout_seed: u64 },
    /// Running statistics, no dropout.
    Eval,
    /// Running statistics, dropout active (Monte-Carlo sampling).
    Sample { dropout_seed: u64 },
}

impl Mode {
    fn dropout_seed(self) -> Option<u64> {
        match self {
            Mode::Train { dropout_seed } | Mode::Sample { dropout_seed } => Some(dropout_seed),
            Mode::Eval => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegModel {
    shape: ModelShape,
    pub weights: SegWeights,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    dropout: f64,
}

/// Upstream gradients flowing into a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Upstream<'a> {
    pub dlogits: &'a [f64],
    /// `None` skips the uncertainty branch entirely.
    pub dbetas: Option<&'a [f64]>,
    pub dhidden: Option<&'a [f64]>,
}

/// Activations of one batched forward pass, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    shape: ModelShape,
    images: usize,
    height: usize,
    width: usize,
    batch_stats: bool,
    x: Vec<f64>,
    a1: Vec<f64>,
    m1: Option<Vec<f64>>,
    h1: Vec<f64>,
    a2: Vec<f64>,
    m2: Option<Vec<f64>>,
    h2: Vec<f64>,
    logits: Vec<f64>,
    zhat: Vec<f64>,
    bo: Vec<f64>,
    mean: Vec<f64>,
    var: Vec<f64>,
    invstd: Vec<f64>,
    betas: Vec<f64>,
}

impl ForwardPass {
    pub fn num_pixels(&self) -> usize {
        self.images * self.height * self.width
    }

    pub fn pixels_per_image(&self) -> usize {
        self.height * self.width
    }

    pub fn num_images(&self) -> usize {
        self.images
    }

    /// `[pixel][class]` over the whole batch.
    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// Trunk output `[pixel][hidden]` (after dropout).
    pub fn hidden(&self) -> &[f64] {
        &self.h2
    }

    pub fn batch_mean(&self) -> &[f64] {
        &self.mean
    }

    /// Biased batch variance (or the running variance outside train mode).
    pub fn batch_var(&self) -> &[f64] {
        &self.var
    }

    /// Branch activations after batchnorm, `[pixel][branch_width]`.
    pub fn normalized_branch(&self) -> &[f64] {
        &self.bo
    }

    /// On/off state of every ReLU in the trunk.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.a1.iter().chain(&self.a2).map(|&v| v > 0.0).collect()
    }

    pub fn image_logits(&self, i: usize) -> LogitGrid {
        let k = self.shape.classes;
        let n = self.pixels_per_image();
        LogitGrid {
            height: self.height,
            width: self.width,
            classes: k,
            values: self.logits[i * n * k..(i + 1) * n * k].to_vec(),
        }
    }

    pub fn image_betas(&self, i: usize) -> BetaGrid {
        let n = self.pixels_per_image();
        BetaGrid {
            height: self.height,
            width: self.width,
            values: self.betas[i * n..(i + 1) * n].to_vec(),
        }
    }

    pub fn image_hidden(&self, i: usize) -> FeatureGrid {
        let hd = self.shape.hidden;
        let n = self.pixels_per_image();
        FeatureGrid::new(
            self.height,
            self.width,
            hd,
            self.h2[i * n * hd..(i + 1) * n * hd].to_vec(),
        )
        .expect("hidden activations are finite")
    }
}

fn he_uniform(rng: &mut ChaCha8Rng, n: usize, fan_in: usize) -> Vec<f64> {
    let bound = (6.0 / fan_in as f64).sqrt();
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

fn dropout_mask(rng: &mut ChaCha8Rng, n: usize, rate: f64) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..n)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect()
}

fn sigmoid(s: f64) -> f64 {
    (1.0 / (1.0 + (-s).exp())).clamp(BETA_FLOOR, 1.0 - BETA_FLOOR)
}

impl SegModel {
    /// Seeded He-uniform initialisation; biases zero, batchnorm at identity.
    pub fn new(shape: ModelShape, dropout: f64, seed: u64) -> Result<Self> {
        if shape.in_dim == 0 || shape.hidden == 0 || shape.classes < 2 || shape.branch_width == 0 {
            return Err(Error::config(format!("invalid model shape {shape:?}")));
        }
        let mut rng = seed::rng(seed, "init", 0);
        let mut w = SegWeights::zeros(shape);
        w.w1 = he_uniform(&mut rng, w.w1.len(), shape.in_dim);
        w.w2 = he_uniform(&mut rng, w.w2.len(), shape.hidden * 9);
        w.wc = he_uniform(&mut rng, w.wc.len(), shape.hidden);
        w.wb1 = he_uniform(&mut rng, w.wb1.len(), shape.hidden);
        w.wb2 = he_uniform(&mut rng, w.wb2.len(), shape.branch_width);
        w.bn_gamma.fill(1.0);
        Self::from_weights(shape, w, dropout)
    }

    pub fn from_weights(shape: ModelShape, weights: SegWeights, dropout: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::config(format!("dropout rate must lie in [0, 1), got {dropout}")));
        }
        let zeros = SegWeights::zeros(shape);
        for ((name, a), (_, b)) in weights.tensors().iter().zip(zeros.tensors()) {
            if a.len() != b.len() {
                return Err(Error::dim(format!(
                    "tensor {name} has {} entries, shape {shape:?} needs {}",
                    a.len(),
                    b.len()
                )));
            }
        }
        Ok(Self {
            shape,
            weights,
            running_mean: vec![0.0; shape.branch_width],
            running_var: vec![1.0; shape.branch_width],
            dropout,
        })
    }

    pub fn shape(&self) -> ModelShape {
        self.shape
    }

    pub fn dropout(&self) -> f64 {
        self.dropout
    }

    pub fn with_dropout(&self, dropout: f64) -> Result<Self> {
        let mut m = self.clone();
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::config(format!("dropout rate must lie in [0, 1), got {dropout}")));
        }
        m.dropout = dropout;
        Ok(m)
    }

    /// Forward pass over a batch of equally sized images.
    pub fn forward(&self, batch: &[&FeatureGrid], mode: Mode) -> Result<ForwardPass> {
        let s = self.shape;
        let first = batch
            .first()
            .ok_or_else(|| Error::dim("forward pass needs at least one image"))?;
        let (h, w) = (first.height(), first.width());
        for f in batch {
            if f.dim() != s.in_dim {
                return Err(Error::dim(format!(
                    "features have {} channels, model expects {}",
                    f.dim(),
                    s.in_dim
                )));
            }
            if (f.height(), f.width()) != (h, w) {
                return Err(Error::dim("all images of a batch must share one size"));
            }
        }
        let hw = h * w;
        let n = batch.len() * hw;
        let (d, hd, k, bw) = (s.in_dim, s.hidden, s.classes, s.branch_width);
        let wt = &self.weights;

        let mut x = Vec::with_capacity(n * d);
        for f in batch {
            x.extend_from_slice(f.values());
        }

        let mut rng = mode
            .dropout_seed()
            .filter(|_| self.dropout > 0.0)
            .map(|sd| seed::rng(sd, "dropout", 0));

        let mut a1 = vec![0.0; n * hd];
        for p in 0..n {
            let xp = &x[p * d..(p + 1) * d];
            for u in 0..hd {
                a1[p * hd + u] = wt.b1[u] + dot(&wt.w1[u * d..(u + 1) * d], xp);
            }
        }
        let m1 = rng.as_mut().map(|r| dropout_mask(r, n * hd, self.dropout));
        let h1 = activate(&a1, m1.as_deref());

        // `[kk][in][out]`, so each input channel updates a contiguous output row.
        let w2t = transpose_kernel(&wt.w2, hd, false);
        let mut a2 = vec![0.0; n * hd];
        for img in 0..batch.len() {
            for y in 0..h {
                for xx in 0..w {
                    let p = img * hw + y * w + xx;
                    let out = &mut a2[p * hd..(p + 1) * hd];
                    out.copy_from_slice(&wt.b2);
                    for (q, kk) in neighbours(img * hw, y, xx, h, w) {
                        for (i, &hv) in h1[q * hd..(q + 1) * hd].iter().enumerate() {
                            if hv != 0.0 {
                                axpy(out, hv, &w2t[(kk * hd + i) * hd..(kk * hd + i + 1) * hd]);
                            }
                        }
                    }
                }
            }
        }
        let m2 = rng.as_mut().map(|r| dropout_mask(r, n * hd, self.dropout));
        let h2 = activate(&a2, m2.as_deref());

        let mut wb1t = vec![0.0; hd * bw];
        for j in 0..bw {
            for u in 0..hd {
                wb1t[u * bw + j] = wt.wb1[j * hd + u];
            }
        }
        let mut logits = vec![0.0; n * k];
        let mut zb = vec![0.0; n * bw];
        for p in 0..n {
            let hp = &h2[p * hd..(p + 1) * hd];
            for c in 0..k {
                logits[p * k + c] = wt.bc[c] + dot(&wt.wc[c * hd..(c + 1) * hd], hp);
            }
            let zp = &mut zb[p * bw..(p + 1) * bw];
            for (u, &hv) in hp.iter().enumerate() {
                if hv != 0.0 {
                    axpy(zp, hv, &wb1t[u * bw..(u + 1) * bw]);
                }
            }
        }
        if let Some(i) = logits.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric(
                format!("forward logits, pixel {} class {}", i / k, i % k),
                "non-finite value",
            ));
        }

        let batch_stats = matches!(mode, Mode::Train { .. });
        let (mean, var) = if batch_stats {
            let mut mean = vec![0.0; bw];
            let mut var = vec![0.0; bw];
            for p in 0..n {
                for j in 0..bw {
                    mean[j] += zb[p * bw + j];
                }
            }
            mean.iter_mut().for_each(|m| *m /= n as f64);
            for p in 0..n {
                for j in 0..bw {
                    let c = zb[p * bw + j] - mean[j];
                    var[j] += c * c;
                }
            }
            var.iter_mut().for_each(|v| *v /= n as f64);
            (mean, var)
        } else {
            (self.running_mean.clone(), self.running_var.clone())
        };
        let invstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();

        let mut zhat = vec![0.0; n * bw];
        let mut bo = vec![0.0; n * bw];
        let mut betas = vec![0.0; n];
        for p in 0..n {
            let mut sacc = wt.bb2[0];
            for j in 0..bw {
                let zh = (zb[p * bw + j] - mean[j]) * invstd[j];
                let o = wt.bn_gamma[j] * zh + wt.bn_beta[j];
                zhat[p * bw + j] = zh;
                bo[p * bw + j] = o;
                sacc += wt.wb2[j] * o;
            }
            betas[p] = sigmoid(sacc);
        }

        Ok(ForwardPass {
            shape: s,
            images: batch.len(),
            height: h,
            width: w,
            batch_stats,
            x,
            a1,
            m1,
            h1,
            a2,
            m2,
            h2,
            logits,
            zhat,
            bo,
            mean,
            var,
            invstd,
            betas,
        })
    }

    /// Single-image forward: `(logits, betas, hidden features)`.
    pub fn forward_image(
        &self,
        features: &FeatureGrid,
        mode: Mode,
    ) -> Result<(LogitGrid, BetaGrid, FeatureGrid)> {
        let pass = self.forward(&[features], mode)?;
        Ok((pass.image_logits(0), pass.image_betas(0), pass.image_hidden(0)))
    }

    /// Reverse-mode gradients of a scalar objective whose derivatives with
    /// respect to the pass outputs are given in `up`.
    pub fn backward(&self, pass: &ForwardPass, up: Upstream<'_>) -> Result<SegWeights> {
        let s = self.shape;
        let (d, hd, k, bw) = (s.in_dim, s.hidden, s.classes, s.branch_width);
        let n = pass.num_pixels();
        if up.dlogits.len() != n * k
            || up.dbetas.is_some_and(|b| b.len() != n)
            || up.dhidden.is_some_and(|g| g.len() != n * hd)
        {
            return Err(Error::dim("upstream gradient sizes do not match the forward pass"));
        }
        let wt = &self.weights;
        let mut g = SegWeights::zeros(s);
        let mut dh2 = up.dhidden.map_or_else(|| vec![0.0; n * hd], <[f64]>::to_vec);

        if let Some(dbetas) = up.dbetas {
            let mut dbo = vec![0.0; n * bw];
            for p in 0..n {
                let b = pass.betas[p];
                let ds = dbetas[p] * b * (1.0 - b);
                g.bb2[0] += ds;
                for j in 0..bw {
                    g.wb2[j] += ds * pass.bo[p * bw + j];
                    dbo[p * bw + j] = ds * wt.wb2[j];
                }
            }
            let mut dzhat = vec![0.0; n * bw];
            let mut sum_dzhat = vec![0.0; bw];
            let mut sum_dzhat_zhat = vec![0.0; bw];
            for p in 0..n {
                for j in 0..bw {
                    let i = p * bw + j;
                    g.bn_gamma[j] += dbo[i] * pass.zhat[i];
                    g.bn_beta[j] += dbo[i];
                    dzhat[i] = dbo[i] * wt.bn_gamma[j];
                    sum_dzhat[j] += dzhat[i];
                    sum_dzhat_zhat[j] += dzhat[i] * pass.zhat[i];
                }
            }
            let nf = n as f64;
            for p in 0..n {
                let hp = &pass.h2[p * hd..(p + 1) * hd];
                let dhp = &mut dh2[p * hd..(p + 1) * hd];
                for j in 0..bw {
                    let i = p * bw + j;
                    let dz = if pass.batch_stats {
                        pass.invstd[j] / nf
                            * (nf * dzhat[i] - sum_dzhat[j] - pass.zhat[i] * sum_dzhat_zhat[j])
                    } else {
                        dzhat[i] * pass.invstd[j]
                    };
                    axpy(&mut g.wb1[j * hd..(j + 1) * hd], dz, hp);
                    axpy(dhp, dz, &wt.wb1[j * hd..(j + 1) * hd]);
                }
            }
        }

        for p in 0..n {
            let hp = &pass.h2[p * hd..(p + 1) * hd];
            let dhp = &mut dh2[p * hd..(p + 1) * hd];
            for c in 0..k {
                let dl = up.dlogits[p * k + c];
                g.bc[c] += dl;
                axpy(&mut g.wc[c * hd..(c + 1) * hd], dl, hp);
                axpy(dhp, dl, &wt.wc[c * hd..(c + 1) * hd]);
            }
        }

        let da2 = deactivate(&dh2, &pass.a2, pass.m2.as_deref());
        let hw = pass.pixels_per_image();
        let w2oi = transpose_kernel(&wt.w2, hd, true);
        let mut gw2t = vec![0.0; 9 * hd * hd];
        let mut dh1 = vec![0.0; n * hd];
        for img in 0..pass.images {
            for y in 0..pass.height {
                for xx in 0..pass.width {
                    let p = img * hw + y * pass.width + xx;
                    let dout = &da2[p * hd..(p + 1) * hd];
                    if dout.iter().all(|&v| v == 0.0) {
                        continue;
                    }
                    for (o, &dv) in dout.iter().enumerate() {
                        g.b2[o] += dv;
                    }
                    for (q, kk) in neighbours(img * hw, y, xx, pass.height, pass.width) {
                        for (i, &hv) in pass.h1[q * hd..(q + 1) * hd].iter().enumerate() {
                            if hv != 0.0 {
                                axpy(&mut gw2t[(kk * hd + i) * hd..(kk * hd + i + 1) * hd], hv, dout);
                            }
                        }
                        let dq = &mut dh1[q * hd..(q + 1) * hd];
                        for (o, &dv) in dout.iter().enumerate() {
                            if dv != 0.0 {
                                axpy(dq, dv, &w2oi[(kk * hd + o) * hd..(kk * hd + o + 1) * hd]);
                            }
                        }
                    }
                }
            }
        }
        for o in 0..hd {
            for i in 0..hd {
                for kk in 0..9 {
                    g.w2[(o * hd + i) * 9 + kk] = gw2t[(kk * hd + i) * hd + o];
                }
            }
        }

        let da1 = deactivate(&dh1, &pass.a1, pass.m1.as_deref());
        for p in 0..n {
            let xp = &pass.x[p * d..(p + 1) * d];
            for u in 0..hd {
                let dv = da1[p * hd + u];
                g.b1[u] += dv;
                let row = &mut g.w1[u * d..(u + 1) * d];
                for (wv, xv) in row.iter_mut().zip(xp) {
                    *wv += dv * xv;
                }
            }
        }

        if let Some((name, i)) = g.first_non_finite() {
            return Err(Error::numeric(format!("gradient of {name}[{i}]"), "non-finite value"));
        }
        Ok(g)
    }

    /// Exponential moving update of the batchnorm running statistics from a
    /// train-mode pass (running variance uses the unbiased estimate).
    pub fn update_running_stats(&mut self, pass: &ForwardPass) {
        if !pass.batch_stats {
            return;
        }
        let n = pass.num_pixels() as f64;
        let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
        for j in 0..self.shape.branch_width {
            self.running_mean[j] =
                (1.0 - BN_MOMENTUM) * self.running_mean[j] + BN_MOMENTUM * pass.mean[j];
            self.running_var[j] =
                (1.0 - BN_MOMENTUM) * self.running_var[j] + BN_MOMENTUM * pass.var[j] * unbias;
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += a * x`.
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

/// 3x3 weights `[out][in][kk]` regrouped as `[kk][in][out]`, or as
/// `[kk][out][in]` with `out_major`.
fn transpose_kernel(w2: &[f64], hd: usize, out_major: bool) -> Vec<f64> {
    let mut t = vec![0.0; 9 * hd * hd];
    for o in 0..hd {
        for i in 0..hd {
            for kk in 0..9 {
                let (a, b) = if out_major { (o, i) } else { (i, o) };
                t[(kk * hd + a) * hd + b] = w2[(o * hd + i) * 9 + kk];
            }
        }
    }
    t
}

fn activate(pre: &[f64], mask: Option<&[f64]>) -> Vec<f64> {
    match mask {
        Some(m) => pre.iter().zip(m).map(|(&a, &m)| a.max(0.0) * m).collect(),
        None => pre.iter().map(|&a| a.max(0.0)).collect(),
    }
}

fn deactivate(grad: &[f64], pre: &[f64], mask: Option<&[f64]>) -> Vec<f64> {
    grad.iter()
        .zip(pre)
        .enumerate()
        .map(|(i, (&g, &a))| {
            if a > 0.0 {
                mask.map_or(g, |m| g * m[i])
            } else {
                0.0
            }
        })
        .collect()
}

/// In-bounds 3x3 neighbours of `(y, x)` as `(flat pixel, kernel index)`.
fn neighbours(
    base: usize,
    y: usize,
    x: usize,
    h: usize,
    w: usize,
) -> impl Iterator<Item = (usize, usize)> {
    (0..9).filter_map(move |kk| {
        let yy = (y + kk / 3).checked_sub(1)?;
        let xx = (x + kk % 3).checked_sub(1)?;
        (yy < h && xx < w).then_some((base + yy * w + xx, kk))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn features(seed_v: u64, h: usize, w: usize, d: usize) -> FeatureGrid {
        let mut rng = seed::rng(seed_v, "test-features", 0);
        FeatureGrid::new(h, w, d, (0..h * w * d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn zero_network_gives_zero_logits_and_half_beta() {
        let shape = ModelShape::new(3, 4, 5);
        let mut w = SegWeights::zeros(shape);
        w.bn_gamma.fill(1.0);
        let m = SegModel::from_weights(shape, w, 0.0).unwrap();
        let f = features(1, 4, 4, 3);
        for mode in [Mode::Eval, Mode::Train { dropout_seed: 0 }] {
            let (l, b, _) = m.forward_image(&f, mode).unwrap();
            assert!(l.values.iter().all(|&v| v == 0.0));
            assert!(b.values.iter().all(|&v| v == 0.5));
        }
    }

    #[test]
    fn eval_is_deterministic_and_beta_in_open_unit_interval() {
        let m = SegModel::new(ModelShape::new(3, 5, 4), 0.3, 11).unwrap();
        let f = features(2, 5, 6, 3);
        let a = m.forward_image(&f, Mode::Eval).unwrap();
        let b = m.forward_image(&f, Mode::Eval).unwrap();
        assert_eq!(a, b);
        assert!(a.1.values.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn train_without_dropout_matches_eval_with_frozen_batch_stats() {
        let mut m = SegModel::new(ModelShape::new(3, 5, 4), 0.0, 4).unwrap();
        let f = features(3, 6, 5, 3);
        let train = m.forward(&[&f], Mode::Train { dropout_seed: 9 }).unwrap();
        m.running_mean = train.batch_mean().to_vec();
        m.running_var = train.batch_var().to_vec();
        let eval = m.forward(&[&f], Mode::Eval).unwrap();
        assert_eq!(train.hidden(), eval.hidden());
        assert_eq!(train.logits(), eval.logits());
        for (a, b) in train.betas().iter().zip(eval.betas()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn batchnorm_normalizes_in_train_mode() {
        let m = SegModel::new(ModelShape::new(3, 6, 4), 0.0, 5).unwrap();
        let f = features(4, 7, 7, 3);
        let pass = m.forward(&[&f], Mode::Train { dropout_seed: 0 }).unwrap();
        let bw = m.shape().branch_width;
        let n = pass.num_pixels();
        for j in 0..bw {
            let col: Vec<f64> = (0..n).map(|p| pass.zhat[p * bw + j]).collect();
            let mean = col.iter().sum::<f64>() / n as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            assert!(mean.abs() < 1e-5);
            // Normalised variance is var / (var + eps).
            let expect = pass.var[j] / (pass.var[j] + BN_EPS);
            assert!((var - expect).abs() < 1e-5, "channel {j}: {var} vs {expect}");
        }
    }

    #[test]
    fn dropout_masks_follow_seed() {
        let m = SegModel::new(ModelShape::new(3, 5, 4), 0.5, 1).unwrap();
        let f = features(5, 4, 4, 3);
        let a = m.forward(&[&f], Mode::Sample { dropout_seed: 1 }).unwrap();
        let b = m.forward(&[&f], Mode::Sample { dropout_seed: 1 }).unwrap();
        let c = m.forward(&[&f], Mode::Sample { dropout_seed: 2 }).unwrap();
        assert_eq!(a.logits(), b.logits());
        assert_ne!(a.logits(), c.logits());
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let m = SegModel::new(ModelShape::new(3, 4, 3), 0.0, 2).unwrap();
        let f = features(6, 4, 4, 3);
        let pass = m.forward(&[&f], Mode::Train { dropout_seed: 0 }).unwrap();
        let n = pass.num_pixels();
        let g = m
            .backward(
                &pass,
                Upstream {
                    dlogits: &vec![0.0; n * 3],
                    dbetas: Some(&vec![0.0; n]),
                    dhidden: None,
                },
            )
            .unwrap();
        assert!(g.tensors().iter().all(|(_, t)| t.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn channel_mismatch_is_a_dimension_error() {
        let m = SegModel::new(ModelShape::new(3, 4, 3), 0.0, 2).unwrap();
        let f = features(6, 4, 4, 2);
        assert!(matches!(m.forward(&[&f], Mode::Eval), Err(Error::Dimension(_))));
    }
}
