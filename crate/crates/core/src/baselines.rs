//! Reference robust-learning heads (global and per-pixel transition
//! matrices) and Monte-Carlo dropout sampling.

use crate::compensation::{softmax_into, ClassMatrix};
use crate::error::{Error, Result};
use crate::netcore::{Mode, Parameters, SegModel};
use crate::seed;
use crate::synthgrid::FeatureGrid;

/// Hidden width of the per-pixel transition branch.
pub const C_MODEL_WIDTH: usize = 32;
/// Raw diagonal offset at initialisation; a uniform transition would pass no
/// gradient to the logits.
pub const TRANSITION_INIT_DIAGONAL: f64 = 4.0;

/// Column-wise softmax of a `K x K` raw matrix (row-major, `[i][j]`).
pub fn column_softmax(k: usize, raw: &[f64]) -> ClassMatrix {
    let mut t = ClassMatrix::zeros(k);
    let mut col = vec![0.0; k];
    let mut out = vec![0.0; k];
    for j in 0..k {
        for i in 0..k {
            col[i] = raw[i * k + j];
        }
        softmax_into(&col, &mut out);
        for i in 0..k {
            t.set(i, j, out[i]);
        }
    }
    t
}

/// `T p`.
pub fn apply_transition(t: &ClassMatrix, p: &[f64]) -> Vec<f64> {
    let k = t.size();
    (0..k).map(|i| (0..k).map(|j| t.get(i, j) * p[j]).sum()).collect()
}

/// Cross-entropy of `pbar = T p` at label `y`, with gradients.
///
/// Returns `(loss, dL/dlogits, dL/draw)` where `raw` is the pre-softmax
/// matrix behind `T`.
fn transition_loss(t: &ClassMatrix, p: &[f64], y: usize) -> (f64, Vec<f64>, Vec<f64>) {
    let k = p.len();
    let pbar_y: f64 = (0..k).map(|j| t.get(y, j) * p[j]).sum();
    let loss = -pbar_y.ln();
    // dL/dp_j = -T_yj / pbar_y
    let gp: Vec<f64> = (0..k).map(|j| -t.get(y, j) / pbar_y).collect();
    let pg: f64 = p.iter().zip(&gp).map(|(a, b)| a * b).sum();
    let dlogits: Vec<f64> = (0..k).map(|j| p[j] * (gp[j] - pg)).collect();
    // Only row y of dL/dT is non-zero: -p_j / pbar_y.
    let mut draw = vec![0.0; k * k];
    for j in 0..k {
        let gyj = -p[j] / pbar_y;
        let tyj = t.get(y, j);
        for i in 0..k {
            let gij = if i == y { gyj } else { 0.0 };
            draw[i * k + j] = t.get(i, j) * (gij - tyj * gyj);
        }
    }
    (loss, dlogits, draw)
}

fn check_labels(labels: &[u8], k: usize) -> Result<()> {
    match labels.iter().position(|&y| usize::from(y) >= k) {
        Some(px) => Err(Error::data(format!(
            "label {} at pixel {px} is outside [0, {k})",
            labels[px]
        ))),
        None => Ok(()),
    }
}

/// One global column-stochastic transition matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SModelHead {
    classes: usize,
    pub raw: Vec<f64>,
}

impl SModelHead {
    pub fn new(classes: usize) -> Result<Self> {
        if classes < 2 {
            return Err(Error::config("s-model needs at least two classes"));
        }
        let mut raw = vec![0.0; classes * classes];
        for i in 0..classes {
            raw[i * classes + i] = TRANSITION_INIT_DIAGONAL;
        }
        Ok(Self { classes, raw })
    }

    pub fn from_raw(classes: usize, raw: Vec<f64>) -> Result<Self> {
        if raw.len() != classes * classes {
            return Err(Error::dim(format!("s-model raw weights need {} entries", classes * classes)));
        }
        Ok(Self { classes, raw })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn transition(&self) -> ClassMatrix {
        column_softmax(self.classes, &self.raw)
    }

    /// Noisy-label distribution `T p`.
    pub fn forward(&self, p: &[f64]) -> Vec<f64> {
        apply_transition(&self.transition(), p)
    }

    /// Mean cross-entropy of `T softmax(l)` over pixels, with gradients for
    /// the logits and the raw weights.
    pub fn loss_with_grad(&self, logits: &[f64], labels: &[u8]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        let k = self.classes;
        let n = labels.len();
        if logits.len() != n * k || n == 0 {
            return Err(Error::dim("logits and labels disagree on the pixel count"));
        }
        check_labels(labels, k)?;
        let t = self.transition();
        let nf = n as f64;
        let mut loss = 0.0;
        let mut dlogits = vec![0.0; n * k];
        let mut draw = vec![0.0; k * k];
        let mut p = vec![0.0; k];
        for px in 0..n {
            softmax_into(&logits[px * k..(px + 1) * k], &mut p);
            let (l, dl, dr) = transition_loss(&t, &p, usize::from(labels[px]));
            loss += l;
            for (o, v) in dlogits[px * k..(px + 1) * k].iter_mut().zip(dl) {
                *o = v / nf;
            }
            for (o, v) in draw.iter_mut().zip(dr) {
                *o += v / nf;
            }
        }
        Ok((loss / nf, dlogits, draw))
    }
}

impl Parameters for SModelHead {
    fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        vec![("s_model.raw", &self.raw)]
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        vec![("s_model.raw", &mut self.raw)]
    }
}

/// Per-pixel transition matrices predicted from hidden features:
/// pointwise `hidden -> 32`, ReLU, pointwise `32 -> K^2`, reshape, column softmax.
#[derive(Clone, Debug, PartialEq)]
pub struct CModelHead {
    hidden: usize,
    classes: usize,
    /// `[32][hidden]`
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `[K*K][32]`; output `i * K + j` is raw entry `(i, j)`.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

/// Intermediate activations of the c-model branch at one pixel.
struct CPixel {
    a: Vec<f64>,
    t: ClassMatrix,
}

impl CModelHead {
    /// Zero weights with the diagonal raw offset in the output bias.
    pub fn zeros(hidden: usize, classes: usize) -> Result<Self> {
        if classes < 2 || hidden == 0 {
            return Err(Error::config("c-model needs at least two classes and one hidden channel"));
        }
        let kk = classes * classes;
        let mut b2 = vec![0.0; kk];
        for i in 0..classes {
            b2[i * classes + i] = TRANSITION_INIT_DIAGONAL;
        }
        Ok(Self {
            hidden,
            classes,
            w1: vec![0.0; C_MODEL_WIDTH * hidden],
            b1: vec![0.0; C_MODEL_WIDTH],
            w2: vec![0.0; kk * C_MODEL_WIDTH],
            b2,
        })
    }

    /// Seeded He-uniform weights, zero first-layer bias.
    pub fn new(hidden: usize, classes: usize, seed: u64) -> Result<Self> {
        use rand::Rng;
        let mut head = Self::zeros(hidden, classes)?;
        let mut rng = seed::rng(seed, "c_model", 0);
        let b1 = (6.0 / hidden as f64).sqrt();
        head.w1.iter_mut().for_each(|w| *w = rng.random_range(-b1..b1));
        // Small second layer so the initial transitions stay near the diagonal prior.
        let b2 = 0.1 * (6.0 / C_MODEL_WIDTH as f64).sqrt();
        head.w2.iter_mut().for_each(|w| *w = rng.random_range(-b2..b2));
        Ok(head)
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    fn pixel(&self, h: &[f64]) -> CPixel {
        let (hd, k) = (self.hidden, self.classes);
        let a: Vec<f64> = (0..C_MODEL_WIDTH)
            .map(|u| self.b1[u] + dot(&self.w1[u * hd..(u + 1) * hd], h))
            .collect();
        let r: Vec<f64> = a.iter().map(|v| v.max(0.0)).collect();
        let raw: Vec<f64> = (0..k * k)
            .map(|o| self.b2[o] + dot(&self.w2[o * C_MODEL_WIDTH..(o + 1) * C_MODEL_WIDTH], &r))
            .collect();
        CPixel {
            a,
            t: column_softmax(k, &raw),
        }
    }

    /// Transition matrix at a pixel with hidden features `h`.
    pub fn transition(&self, h: &[f64]) -> Result<ClassMatrix> {
        if h.len() != self.hidden {
            return Err(Error::dim(format!(
                "c-model expects {} hidden channels, got {}",
                self.hidden,
                h.len()
            )));
        }
        Ok(self.pixel(h).t)
    }

    pub fn forward(&self, h: &[f64], p: &[f64]) -> Result<Vec<f64>> {
        Ok(apply_transition(&self.transition(h)?, p))
    }

    /// ReLU states of the branch over all pixels of `hidden`.
    pub fn relu_pattern(&self, hidden: &[f64]) -> Vec<bool> {
        hidden
            .chunks_exact(self.hidden)
            .flat_map(|h| self.pixel(h).a.into_iter().map(|v| v > 0.0))
            .collect()
    }

    /// Mean cross-entropy of `T_x softmax(l_x)`; returns the loss, logit and
    /// hidden-feature gradients, and the head's own gradients.
    pub fn loss_with_grad(
        &self,
        logits: &[f64],
        hidden: &[f64],
        labels: &[u8],
    ) -> Result<(f64, Vec<f64>, Vec<f64>, CModelHead)> {
        let (hd, k) = (self.hidden, self.classes);
        let n = labels.len();
        if logits.len() != n * k || hidden.len() != n * hd || n == 0 {
            return Err(Error::dim("logits, hidden features and labels disagree on the pixel count"));
        }
        check_labels(labels, k)?;
        let nf = n as f64;
        let mut g = Self {
            hidden: hd,
            classes: k,
            w1: vec![0.0; self.w1.len()],
            b1: vec![0.0; self.b1.len()],
            w2: vec![0.0; self.w2.len()],
            b2: vec![0.0; self.b2.len()],
        };
        let mut loss = 0.0;
        let mut dlogits = vec![0.0; n * k];
        let mut dhidden = vec![0.0; n * hd];
        let mut p = vec![0.0; k];
        for px in 0..n {
            let h = &hidden[px * hd..(px + 1) * hd];
            let cp = self.pixel(h);
            softmax_into(&logits[px * k..(px + 1) * k], &mut p);
            let (l, dl, draw) = transition_loss(&cp.t, &p, usize::from(labels[px]));
            loss += l;
            for (o, v) in dlogits[px * k..(px + 1) * k].iter_mut().zip(dl) {
                *o = v / nf;
            }
            let mut dr = vec![0.0; C_MODEL_WIDTH];
            for (o, &d) in draw.iter().enumerate() {
                let d = d / nf;
                g.b2[o] += d;
                let row = o * C_MODEL_WIDTH;
                for u in 0..C_MODEL_WIDTH {
                    g.w2[row + u] += d * cp.a[u].max(0.0);
                    dr[u] += d * self.w2[row + u];
                }
            }
            for u in 0..C_MODEL_WIDTH {
                if cp.a[u] <= 0.0 {
                    continue;
                }
                let da = dr[u];
                g.b1[u] += da;
                for c in 0..hd {
                    g.w1[u * hd + c] += da * h[c];
                    dhidden[px * hd + c] += da * self.w1[u * hd + c];
                }
            }
        }
        Ok((loss / nf, dlogits, dhidden, g))
    }
}

impl Parameters for CModelHead {
    fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        vec![
            ("c_model.w1", &self.w1),
            ("c_model.b1", &self.b1),
            ("c_model.w2", &self.w2),
            ("c_model.b2", &self.b2),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        vec![
            ("c_model.w1", &mut self.w1),
            ("c_model.b1", &mut self.b1),
            ("c_model.w2", &mut self.w2),
            ("c_model.b2", &mut self.b2),
        ]
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DropoutEnsemble {
    pub rate: f64,
    pub num_samples: usize,
    pub seed: u64,
}

impl DropoutEnsemble {
    pub const DEFAULT_RATE: f64 = 0.25;
    pub const DEFAULT_SAMPLES: usize = 20;

    pub fn new(seed: u64) -> Self {
        Self {
            rate: Self::DEFAULT_RATE,
            num_samples: Self::DEFAULT_SAMPLES,
            seed,
        }
    }
}

/// Monte-Carlo dropout prediction of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct McPrediction {
    /// `[pixel][class]` mean probabilities.
    pub mean: Vec<f64>,
    /// Per-pixel mean over classes of the per-class sample variance.
    pub variance: Vec<f64>,
}

/// Repeats inference with dropout active (running batchnorm statistics) and
/// reduces the samples to a mean distribution and a scalar variance.
pub fn mc_dropout_predict(model: &SegModel, features: &FeatureGrid, ens: &DropoutEnsemble) -> Result<McPrediction> {
    if ens.num_samples == 0 {
        return Err(Error::config("Monte-Carlo dropout needs at least one sample"));
    }
    let model = model.with_dropout(ens.rate)?;
    let k = model.shape().classes;
    let n = features.num_pixels();
    let mut samples = Vec::with_capacity(ens.num_samples);
    for s in 0..ens.num_samples {
        let mode = Mode::Sample {
            dropout_seed: seed::derive(ens.seed, "mc_dropout", s as u64),
        };
        let pass = model.forward(&[features], mode)?;
        let mut probs = vec![0.0; n * k];
        for px in 0..n {
            softmax_into(&pass.logits()[px * k..(px + 1) * k], &mut probs[px * k..(px + 1) * k]);
        }
        samples.push(probs);
    }
    // Moments are taken about the first sample, so identical samples give
    // exactly that sample as the mean and exactly zero variance.
    let sf = ens.num_samples as f64;
    let first = &samples[0];
    let mut mean = vec![0.0; n * k];
    let mut variance = vec![0.0; n];
    for px in 0..n {
        let mut acc = 0.0;
        for c in 0..k {
            let i = px * k + c;
            let (mut s1, mut s2) = (0.0, 0.0);
            for s in &samples {
                let d = s[i] - first[i];
                s1 += d;
                s2 += d * d;
            }
            let m = s1 / sf;
            mean[i] = first[i] + m;
            acc += (s2 / sf - m * m).max(0.0);
        }
        variance[px] = acc / k as f64;
    }
    Ok(McPrediction { mean, variance })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::ModelShape;
    use proptest::prelude::*;

    #[test]
    fn s_model_examples() {
        let mut h = SModelHead::new(3).unwrap();
        h.raw.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..3 {
            h.raw[i * 3 + i] = 20.0;
        }
        let p = [0.2, 0.5, 0.3];
        let q = h.forward(&p);
        for (a, b) in p.iter().zip(&q) {
            assert!((a - b).abs() < 1e-8);
        }
        let uniform = SModelHead::from_raw(3, vec![0.7; 9]).unwrap();
        for v in uniform.forward(&[1.0, 0.0, 0.0]) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let h = SModelHead::from_raw(2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let q = h.forward(&[1.0, 0.0]);
        // e / (e + 1) evaluated independently.
        let e = std::f64::consts::E;
        assert!((q[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((q[1] - 1.0 / (e + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn c_model_examples() {
        let mut h = CModelHead::zeros(3, 2).unwrap();
        h.b2.iter_mut().for_each(|v| *v = 0.0);
        assert_eq!(h.forward(&[0.1, 0.2, 0.3], &[1.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        h.b2 = vec![1.0, 0.0, 0.0, 0.0];
        let q = h.forward(&[0.1, 0.2, 0.3], &[1.0, 0.0]).unwrap();
        let e = std::f64::consts::E;
        assert!((q[0] - e / (e + 1.0)).abs() < 1e-12);
        let seeded = CModelHead::new(3, 2, 7).unwrap();
        let x = [0.4, -0.2, 1.0];
        assert_eq!(seeded.transition(&x).unwrap(), seeded.transition(&x).unwrap());
        assert!(seeded.transition(&[1.0]).is_err());
    }

    #[test]
    fn mc_dropout_without_dropout_has_zero_variance() {
        let model = SegModel::new(ModelShape::new(4, 5, 3), 0.0, 3).unwrap();
        let f = FeatureGrid::new(2, 3, 4, (0..24).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let ens = DropoutEnsemble {
            rate: 0.0,
            num_samples: 5,
            seed: 1,
        };
        let pred = mc_dropout_predict(&model, &f, &ens).unwrap();
        assert!(pred.variance.iter().all(|&v| v == 0.0));
        let ens = DropoutEnsemble::new(9);
        assert_eq!(ens.rate, 0.25);
        assert_eq!(ens.num_samples, 20);
        let a = mc_dropout_predict(&model, &f, &ens).unwrap();
        let b = mc_dropout_predict(&model, &f, &ens).unwrap();
        assert_eq!(a, b);
        assert!(a.variance.iter().all(|&v| v >= 0.0));
        assert!(a.variance.iter().any(|&v| v > 0.0));
        let zero = DropoutEnsemble { num_samples: 0, ..ens };
        assert!(mc_dropout_predict(&model, &f, &zero).is_err());
    }

    #[test]
    fn transition_loss_gradient_matches_differences() {
        let h = SModelHead::from_raw(3, vec![0.3, -0.2, 0.5, 1.1, 0.0, -0.7, 0.2, 0.9, 0.4]).unwrap();
        let logits = [0.2, -0.4, 0.9, 1.3, 0.1, -0.8];
        let labels = [2u8, 0];
        let (_, dl, dr) = h.loss_with_grad(&logits, &labels).unwrap();
        let eps = 1e-6;
        for i in 0..logits.len() {
            let mut a = logits;
            a[i] += eps;
            let mut b = logits;
            b[i] -= eps;
            let fd = (h.loss_with_grad(&a, &labels).unwrap().0 - h.loss_with_grad(&b, &labels).unwrap().0) / (2.0 * eps);
            assert!((fd - dl[i]).abs() < 1e-8, "logit {i}");
        }
        for i in 0..9 {
            let mut a = h.clone();
            a.raw[i] += eps;
            let mut b = h.clone();
            b.raw[i] -= eps;
            let fd = (a.loss_with_grad(&logits, &labels).unwrap().0 - b.loss_with_grad(&logits, &labels).unwrap().0)
                / (2.0 * eps);
            assert!((fd - dr[i]).abs() < 1e-8, "raw {i}");
        }
    }

    proptest! {
        #[test]
        fn transitions_are_column_stochastic(raw in prop::collection::vec(-30.0f64..30.0, 16), h in prop::collection::vec(-3.0f64..3.0, 5), seed in any::<u64>()) {
            let t = SModelHead::from_raw(4, raw).unwrap().transition();
            let c = CModelHead::new(5, 4, seed).unwrap().transition(&h).unwrap();
            for m in [t, c] {
                for j in 0..4 {
                    let s: f64 = (0..4).map(|i| m.get(i, j)).sum();
                    prop_assert!((s - 1.0).abs() <= 1e-6);
                    prop_assert!((0..4).all(|i| (0.0..=1.0).contains(&m.get(i, j))));
                }
            }
        }
    }
}
