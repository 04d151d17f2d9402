//! Plain prediction and inference with a manually specified bias.

use crate::compensation::{softmax_into, ClassMatrix};
use crate::error::{Error, Result};
use crate::netcore::{Mode, SegModel};
use crate::synthgrid::{FeatureGrid, LabelGrid};

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn labels_from(height: usize, width: usize, scores: &[f64], k: usize) -> Result<LabelGrid> {
    let values = scores
        .chunks_exact(k)
        .map(|c| u8::try_from(argmax(c)).map_err(|_| Error::dim("more than 256 classes")))
        .collect::<Result<Vec<u8>>>()?;
    LabelGrid::new(height, width, values)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub labels: LabelGrid,
    pub classes: usize,
    /// `[pixel][class]` plain softmax probabilities.
    pub probabilities: Vec<f64>,
    /// Uncertainty-branch output per pixel.
    pub betas: Vec<f64>,
    /// `[pixel][class]` raw logits.
    pub logits: Vec<f64>,
}

impl Prediction {
    pub fn pixel_probabilities(&self, p: usize) -> &[f64] {
        &self.probabilities[p * self.classes..(p + 1) * self.classes]
    }

    /// `1 - max_i P(i)` per pixel.
    pub fn model_uncertainty(&self) -> Vec<f64> {
        self.probabilities
            .chunks_exact(self.classes)
            .map(|p| 1.0 - p.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect()
    }
}

/// Eval-mode forward and per-pixel argmax of the uncompensated softmax.
pub fn predict(model: &SegModel, features: &FeatureGrid) -> Result<Prediction> {
    let pass = model.forward(&[features], Mode::Eval)?;
    let k = model.shape().classes;
    let logits = pass.logits().to_vec();
    let mut probabilities = vec![0.0; logits.len()];
    for (l, p) in logits.chunks_exact(k).zip(probabilities.chunks_exact_mut(k)) {
        softmax_into(l, p);
    }
    Ok(Prediction {
        labels: labels_from(features.height(), features.width(), &probabilities, k)?,
        classes: k,
        probabilities,
        betas: pass.betas().to_vec(),
        logits,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Relaxation {
    /// Plain probability vector in place of the one-hot annotation.
    Soft,
    /// One-hot of the plain prediction.
    Hard,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BetaSource {
    Branch,
    One,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InductionSpec {
    /// Manual bias; the diagonal may be non-zero.
    pub matrix: ClassMatrix,
    pub relaxation: Relaxation,
    pub beta_source: BetaSource,
}

impl InductionSpec {
    pub fn new(matrix: ClassMatrix, relaxation: Relaxation, beta_source: BetaSource) -> Result<Self> {
        if !matrix.is_finite() {
            return Err(Error::config("induction matrix has non-finite entries"));
        }
        Ok(Self {
            matrix,
            relaxation,
            beta_source,
        })
    }

    /// Builds the matrix from sparse `(i, j, value)` entries; later entries
    /// overwrite earlier ones.
    pub fn from_triples(
        classes: usize,
        triples: &[(usize, usize, f64)],
        relaxation: Relaxation,
        beta_source: BetaSource,
    ) -> Result<Self> {
        let mut m = ClassMatrix::zeros(classes);
        for &(i, j, v) in triples {
            if i >= classes || j >= classes {
                return Err(Error::config(format!("induction entry ({i}, {j}) outside {classes} classes")));
            }
            m.set(i, j, v);
        }
        Self::new(m, relaxation, beta_source)
    }
}

/// Parses `"i,j,value"`.
pub fn parse_triple(s: &str) -> Result<(usize, usize, f64)> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let bad = || Error::config(format!("induction entry {s:?} is not `i,j,value`"));
    if parts.len() != 3 {
        return Err(bad());
    }
    Ok((
        parts[0].parse().map_err(|_| bad())?,
        parts[1].parse().map_err(|_| bad())?,
        parts[2].parse().map_err(|_| bad())?,
    ))
}

/// Re-scores `l + beta * B_manual q`, where `q` relaxes the unknown
/// annotation to the model's own plain prediction.
pub fn bias_induced_scores(pred: &Prediction, spec: &InductionSpec) -> Result<Vec<f64>> {
    let k = pred.classes;
    if spec.matrix.size() != k {
        return Err(Error::dim(format!(
            "induction matrix is {0}x{0}, model has {k} classes",
            spec.matrix.size()
        )));
    }
    let n = pred.betas.len();
    let mut out = pred.logits.clone();
    let mut q = vec![0.0; k];
    for px in 0..n {
        let p = pred.pixel_probabilities(px);
        match spec.relaxation {
            Relaxation::Soft => q.copy_from_slice(p),
            Relaxation::Hard => {
                q.fill(0.0);
                q[argmax(p)] = 1.0;
            }
        }
        let beta = match spec.beta_source {
            BetaSource::Branch => pred.betas[px],
            BetaSource::One => 1.0,
        };
        for i in 0..k {
            let bias: f64 = (0..k).map(|j| spec.matrix.get(i, j) * q[j]).sum();
            out[px * k + i] += beta * bias;
        }
    }
    Ok(out)
}

pub fn bias_induced_predict(model: &SegModel, features: &FeatureGrid, spec: &InductionSpec) -> Result<LabelGrid> {
    let pred = predict(model, features)?;
    let scores = bias_induced_scores(&pred, spec)?;
    labels_from(features.height(), features.width(), &scores, pred.classes)
}
