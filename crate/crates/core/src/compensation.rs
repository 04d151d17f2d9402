//! The compensation matrix, compensated softmax and the lasso-penalised
//! training objective.

use crate::error::{Error, Result};
use crate::netcore::{BetaGrid, LogitGrid, Parameters};
use crate::synthgrid::LabelGrid;
use crate::table;

/// Dense square matrix indexed by class, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassMatrix {
    n: usize,
    data: Vec<f64>,
}

impl ClassMatrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::dim("class matrix rows must form a square"));
        }
        Ok(Self {
            n,
            data: rows.concat(),
        })
    }

    pub fn from_flat(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::dim(format!("{n}x{n} matrix needs {} entries", n * n)));
        }
        Ok(Self { n, data })
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] += v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, j)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest `|B_ij|` with `i != j`, as `(i, j, value)`; first in raster order on ties.
    pub fn largest_off_diagonal(&self) -> Option<(usize, usize, f64)> {
        let mut best: Option<(usize, usize, f64)> = None;
        for i in 0..self.n {
            for j in 0..self.n {
                if i != j && best.is_none_or(|(_, _, b)| self.get(i, j).abs() > b.abs()) {
                    best = Some((i, j, self.get(i, j)));
                }
            }
        }
        best
    }

    /// Class-labelled CSV: header row and first column carry the names,
    /// cells use six significant digits.
    pub fn to_csv(&self, class_names: &[String]) -> Result<String> {
        if class_names.len() != self.n {
            return Err(Error::dim(format!(
                "{} class names for a {}x{} matrix",
                class_names.len(),
                self.n,
                self.n
            )));
        }
        let mut rows: Vec<Vec<String>> = Vec::with_capacity(self.n + 1);
        let mut header = vec![String::new()];
        header.extend(class_names.iter().cloned());
        rows.push(header);
        for (i, name) in class_names.iter().enumerate() {
            let mut row = vec![name.clone()];
            row.extend((0..self.n).map(|j| table::sig6(self.get(i, j))));
            rows.push(row);
        }
        Ok(table::render(rows))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CompensationMode {
    /// Every off-diagonal entry is its own parameter; the diagonal is masked to zero.
    Free,
    /// One parameter per unordered class pair, mirrored; zero diagonal.
    Symmetric,
    /// No constraints at all (diagonal included).
    Unconstrained,
}

/// Trainable compensation matrix `B`; entry `B[i][j]` shifts the logit of
/// class `i` at pixels annotated `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct CompensationMatrix {
    classes: usize,
    mode: CompensationMode,
    params: Vec<f64>,
}

impl CompensationMatrix {
    pub fn zeros(classes: usize, mode: CompensationMode) -> Result<Self> {
        if classes < 2 {
            return Err(Error::config("a compensation matrix needs at least two classes"));
        }
        let len = match mode {
            CompensationMode::Symmetric => classes * (classes - 1) / 2,
            CompensationMode::Free | CompensationMode::Unconstrained => classes * classes,
        };
        Ok(Self {
            classes,
            mode,
            params: vec![0.0; len],
        })
    }

    pub fn from_params(classes: usize, mode: CompensationMode, params: Vec<f64>) -> Result<Self> {
        let mut m = Self::zeros(classes, mode)?;
        if params.len() != m.params.len() {
            return Err(Error::dim(format!(
                "{mode:?} compensation for {classes} classes needs {} parameters, got {}",
                m.params.len(),
                params.len()
            )));
        }
        m.params = params;
        Ok(m)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn mode(&self) -> CompensationMode {
        self.mode
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn tri_index(&self, i: usize, j: usize) -> usize {
        let (a, b) = if i < j { (i, j) } else { (j, i) };
        a * self.classes - a * (a + 1) / 2 + (b - a - 1)
    }

    /// Writes the parameter behind entry `(i, j)`; diagonal writes are kept in
    /// free mode but masked at materialisation, and ignored in symmetric mode.
    pub fn set_entry(&mut self, i: usize, j: usize, v: f64) {
        match self.mode {
            CompensationMode::Symmetric => {
                if i != j {
                    let t = self.tri_index(i, j);
                    self.params[t] = v;
                }
            }
            _ => self.params[i * self.classes + j] = v,
        }
    }

    pub fn materialize(&self) -> ClassMatrix {
        let k = self.classes;
        let mut m = ClassMatrix::zeros(k);
        for i in 0..k {
            for j in 0..k {
                let v = match self.mode {
                    CompensationMode::Unconstrained => self.params[i * k + j],
                    _ if i == j => 0.0,
                    CompensationMode::Free => self.params[i * k + j],
                    CompensationMode::Symmetric => self.params[self.tri_index(i, j)],
                };
                m.set(i, j, v);
            }
        }
        m
    }

    /// Chains a gradient with respect to the materialised matrix onto the
    /// free parameters (mirrored entries accumulate both positions).
    pub fn reduce_gradient(&self, dmatrix: &ClassMatrix) -> Vec<f64> {
        let k = self.classes;
        let mut g = vec![0.0; self.params.len()];
        for i in 0..k {
            for j in 0..k {
                let d = dmatrix.get(i, j);
                match self.mode {
                    CompensationMode::Unconstrained => g[i * k + j] += d,
                    _ if i == j => {}
                    CompensationMode::Free => g[i * k + j] += d,
                    CompensationMode::Symmetric => g[self.tri_index(i, j)] += d,
                }
            }
        }
        g
    }
}

impl Parameters for CompensationMatrix {
    fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        vec![("compensation", &self.params)]
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        vec![("compensation", &mut self.params)]
    }
}

/// Stable softmax of `z` into `out`; returns `log(sum(exp(z)))`.
pub(crate) fn softmax_into(z: &[f64], out: &mut [f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
    max + sum.ln()
}

fn check_finite(l: &[f64], what: &str) -> Result<()> {
    match l.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::numeric(format!("{what}[{i}]"), "non-finite logit")),
        None => Ok(()),
    }
}

/// Softmax of a logit vector.
pub fn plain_probabilities(logits: &[f64]) -> Result<Vec<f64>> {
    check_finite(logits, "logits")?;
    let mut p = vec![0.0; logits.len()];
    softmax_into(logits, &mut p);
    Ok(p)
}

/// Softmax of `l + beta * B[:, gt]`.
pub fn compensated_probabilities(
    logits: &[f64],
    b: &ClassMatrix,
    beta: f64,
    gt: usize,
) -> Result<Vec<f64>> {
    check_finite(logits, "logits")?;
    let k = logits.len();
    if b.size() != k {
        return Err(Error::dim(format!("{k} logits against a {0}x{0} matrix", b.size())));
    }
    if gt >= k {
        return Err(Error::data(format!("ground-truth class {gt} is outside [0, {k})")));
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::config(format!("beta must lie in [0, 1], got {beta}")));
    }
    let z: Vec<f64> = (0..k).map(|i| logits[i] + beta * b.get(i, gt)).collect();
    let mut p = vec![0.0; k];
    softmax_into(&z, &mut p);
    Ok(p)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub cross_entropy_term: f64,
    pub lasso_term: f64,
    pub alpha: f64,
}

impl LossBreakdown {
    pub fn cross_entropy_only(ce: f64) -> Self {
        Self {
            total: ce,
            cross_entropy_term: ce,
            lasso_term: 0.0,
            alpha: 0.0,
        }
    }
}

/// Gradients of the objective with respect to its inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGradients {
    pub dlogits: Vec<f64>,
    pub dbetas: Vec<f64>,
    pub dmatrix: ClassMatrix,
}

/// Mean cross-entropy of the compensated softmax plus the per-pixel lasso
/// penalty `(alpha / K) * beta_x * sum_i |B[i][gt]|`, averaged over pixels.
///
/// Slices are `[pixel][class]`, `[pixel]`, `[pixel]`.
pub fn training_loss_with_grad(
    logits: &[f64],
    betas: &[f64],
    labels: &[u8],
    b: &ClassMatrix,
    alpha: f64,
) -> Result<(LossBreakdown, LossGradients)> {
    let k = b.size();
    let n = labels.len();
    if logits.len() != n * k || betas.len() != n {
        return Err(Error::dim("logits, betas and labels disagree on the pixel count"));
    }
    if n == 0 {
        return Err(Error::dim("training loss over zero pixels"));
    }
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::config(format!("alpha must be finite and >= 0, got {alpha}")));
    }
    check_finite(logits, "logits")?;
    let nf = n as f64;
    let scale = alpha / k as f64;
    let mut ce_sum = 0.0;
    let mut lasso_sum = 0.0;
    let mut dlogits = vec![0.0; n * k];
    let mut dbetas = vec![0.0; n];
    let mut dmatrix = ClassMatrix::zeros(k);
    let mut z = vec![0.0; k];
    let mut p = vec![0.0; k];
    for px in 0..n {
        let y = usize::from(labels[px]);
        if y >= k {
            return Err(Error::data(format!("label {y} at pixel {px} is outside [0, {k})")));
        }
        let beta = betas[px];
        let l = &logits[px * k..(px + 1) * k];
        for i in 0..k {
            z[i] = l[i] + beta * b.get(i, y);
        }
        let lse = softmax_into(&z, &mut p);
        ce_sum += lse - z[y];
        let abs_col: f64 = (0..k).map(|i| b.get(i, y).abs()).sum();
        lasso_sum += scale * beta * abs_col;

        let mut dbeta = scale * abs_col;
        for i in 0..k {
            let r = p[i] - if i == y { 1.0 } else { 0.0 };
            dlogits[px * k + i] = r / nf;
            let bij = b.get(i, y);
            dbeta += r * bij;
            let sign = if bij > 0.0 {
                1.0
            } else if bij < 0.0 {
                -1.0
            } else {
                0.0
            };
            dmatrix.add(i, y, (beta * r + scale * beta * sign) / nf);
        }
        dbetas[px] = dbeta / nf;
    }
    let ce = ce_sum / nf;
    let lasso = lasso_sum / nf;
    if !ce.is_finite() {
        return Err(Error::numeric("training loss", format!("cross-entropy is {ce}")));
    }
    Ok((
        LossBreakdown {
            total: ce + lasso,
            cross_entropy_term: ce,
            lasso_term: lasso,
            alpha,
        },
        LossGradients {
            dlogits,
            dbetas,
            dmatrix,
        },
    ))
}

/// Loss of one image.
pub fn training_loss(
    logits: &LogitGrid,
    betas: &BetaGrid,
    labels: &LabelGrid,
    b: &ClassMatrix,
    alpha: f64,
) -> Result<LossBreakdown> {
    if logits.classes != b.size() {
        return Err(Error::dim("logit channels do not match the compensation matrix"));
    }
    training_loss_with_grad(&logits.values, &betas.values, labels.values(), b, alpha).map(|(l, _)| l)
}

/// Plain softmax cross-entropy, mean over pixels, with its logit gradient.
pub fn cross_entropy_with_grad(logits: &[f64], labels: &[u8], k: usize) -> Result<(f64, Vec<f64>)> {
    let n = labels.len();
    if logits.len() != n * k || n == 0 {
        return Err(Error::dim("logits and labels disagree on the pixel count"));
    }
    check_finite(logits, "logits")?;
    let nf = n as f64;
    let mut ce_sum = 0.0;
    let mut dlogits = vec![0.0; n * k];
    let mut p = vec![0.0; k];
    for px in 0..n {
        let y = usize::from(labels[px]);
        if y >= k {
            return Err(Error::data(format!("label {y} at pixel {px} is outside [0, {k})")));
        }
        let z = &logits[px * k..(px + 1) * k];
        let lse = softmax_into(z, &mut p);
        ce_sum += lse - z[y];
        for i in 0..k {
            let r = p[i] - if i == y { 1.0 } else { 0.0 };
            dlogits[px * k + i] = r / nf;
        }
    }
    Ok((ce_sum / nf, dlogits))
}
