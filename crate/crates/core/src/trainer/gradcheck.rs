use super::{evaluate_objective, Head};
use crate::baselines::apply_transition;
use crate::compensation::softmax_into;
use crate::error::{Error, Result};
use crate::netcore::{ForwardPass, Mode, Parameters, SegModel, SegWeights};
use crate::synthgrid::Sample;

/// Outcome of comparing analytic gradients against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub max_relative_error: f64,
    /// Parameter holding `max_relative_error`, as `tensor[index]`.
    pub worst_parameter: Option<String>,
    pub checked: usize,
    /// Parameters whose perturbation crossed a ReLU or `|B|` kink; their
    /// difference quotient is not a derivative and they are left out.
    pub skipped_kinks: usize,
    pub failures: Vec<(String, f64)>,
}

impl GradCheckReport {
    /// No failures, and at most 1% of the parameters skipped.
    pub fn passed(&self) -> bool {
        let total = self.checked + self.skipped_kinks;
        self.failures.is_empty() && self.checked > 0 && self.skipped_kinks * 100 <= total
    }
}

const FD_DROPOUT_SEED: u64 = 0x5eed;

fn mode() -> Mode {
    Mode::Train {
        dropout_seed: FD_DROPOUT_SEED,
    }
}

/// Per-pixel loss terms of the objective (their mean is the loss),
/// recomputed independently of the training code path.
fn pixel_losses(pass: &ForwardPass, head: &Head, labels: &[u8], alpha: f64) -> Result<Vec<f64>> {
    let k = pass.logits().len() / labels.len();
    let mut z = vec![0.0; k];
    let mut p = vec![0.0; k];
    let b = head.compensation().map(|m| m.materialize());
    let mut out = Vec::with_capacity(labels.len());
    for (px, &y) in labels.iter().enumerate() {
        let y = usize::from(y);
        let l = &pass.logits()[px * k..(px + 1) * k];
        let loss = match head {
            Head::Plain => softmax_into(l, &mut p) - l[y],
            Head::Compensated { local, .. } => {
                let b = b.as_ref().expect("compensated head has a matrix");
                let beta = if *local { pass.betas()[px] } else { 1.0 };
                for i in 0..k {
                    z[i] = l[i] + beta * b.get(i, y);
                }
                let abs_col: f64 = (0..k).map(|i| b.get(i, y).abs()).sum();
                softmax_into(&z, &mut p) - z[y] + alpha / k as f64 * beta * abs_col
            }
            Head::SModel(h) => {
                softmax_into(l, &mut p);
                -h.forward(&p)[y].ln()
            }
            Head::CModel(h) => {
                softmax_into(l, &mut p);
                let hd = h.hidden();
                let t = h.transition(&pass.hidden()[px * hd..(px + 1) * hd])?;
                -apply_transition(&t, &p)[y].ln()
            }
        };
        out.push(loss);
    }
    Ok(out)
}

/// Side of every kink the objective passes through: ReLU states, and the
/// signs of the compensation entries inside `|.|`.
#[derive(PartialEq)]
struct Kinks {
    relu: Vec<bool>,
    signs: Vec<i8>,
}

impl Kinks {
    /// Same smooth piece as `self`. An entry sitting exactly at zero may move
    /// either way: the symmetric quotient of `|x|` there is 0, which is the
    /// subgradient used analytically.
    fn admits(&self, other: &Kinks) -> bool {
        self.relu == other.relu && self.signs.iter().zip(&other.signs).all(|(a, b)| *a == 0 || a == b)
    }
}

/// Per-pixel losses and the kink state they were evaluated in.
fn probe(model: &SegModel, head: &Head, batch: &[&Sample], alpha: f64) -> Result<(Vec<f64>, Kinks)> {
    let obj = evaluate_objective(model, head, batch, alpha, mode(), false)?;
    let labels: Vec<u8> = batch.iter().flat_map(|s| s.labels.values().iter().copied()).collect();
    let losses = pixel_losses(&obj.pass, head, &labels, alpha)?;
    let mean = losses.iter().sum::<f64>() / losses.len() as f64;
    if (mean - obj.loss.total).abs() > 1e-12 * obj.loss.total.abs().max(1.0) {
        return Err(Error::numeric(
            "gradient check",
            format!("objective {} disagrees with per-pixel recomputation {mean}", obj.loss.total),
        ));
    }
    let mut relu = obj.pass.relu_pattern();
    let mut signs = Vec::new();
    match head {
        Head::Compensated { matrix, .. } => {
            signs.extend(matrix.materialize().as_slice().iter().map(|v| v.signum() as i8 * i8::from(*v != 0.0)));
        }
        Head::CModel(h) => relu.extend(h.relu_pattern(obj.pass.hidden())),
        _ => {}
    }
    Ok((losses, Kinks { relu, signs }))
}

/// Central difference from per-pixel losses. Differencing pixel by pixel
/// and summing with compensation keeps the round-off of the quotient well
/// below the `1e-8` floor of the relative error.
fn central_difference(plus: &[f64], minus: &[f64], h: f64) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for (a, b) in plus.iter().zip(minus) {
        let d = a - b;
        let t = sum + d;
        comp += if sum.abs() >= d.abs() { (sum - t) + d } else { (d - t) + sum };
        sum = t;
    }
    (sum + comp) / plus.len() as f64 / (2.0 * h)
}

fn step(theta: f64) -> f64 {
    1e-4 * theta.abs().max(1.0)
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1e-8)
}

struct Tally {
    report: GradCheckReport,
}

impl Tally {
    fn record(&mut self, name: String, analytic: f64, numeric: Option<f64>) {
        let Some(numeric) = numeric else {
            self.report.skipped_kinks += 1;
            return;
        };
        self.report.checked += 1;
        let err = relative_error(analytic, numeric);
        if err > self.report.max_relative_error || err.is_nan() {
            self.report.max_relative_error = err;
            self.report.worst_parameter = Some(name.clone());
        }
        if !(err <= self.report.tolerance) {
            self.report.failures.push((name, err));
        }
    }
}

/// Checks the analytic gradients of the training objective on one batch
/// against central differences with `h = 1e-4 * max(1, |theta|)`.
pub fn finite_difference_check(
    model: &SegModel,
    head: &Head,
    batch: &[&Sample],
    alpha: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let obj = evaluate_objective(model, head, batch, alpha, mode(), true)?;
    compare_gradients(
        model,
        head,
        batch,
        alpha,
        &obj.model_grad.expect("gradients requested"),
        &obj.head_grad.expect("gradients requested"),
        tolerance,
    )
}

/// Compares caller-supplied gradients (network, then head flattened in
/// tensor order) against central differences.
pub fn compare_gradients(
    model: &SegModel,
    head: &Head,
    batch: &[&Sample],
    alpha: f64,
    model_grad: &SegWeights,
    head_grad: &[f64],
    tolerance: f64,
) -> Result<GradCheckReport> {
    let (_, base_sig) = probe(model, head, batch, alpha)?;
    let mut tally = Tally {
        report: GradCheckReport {
            tolerance,
            max_relative_error: 0.0,
            worst_parameter: None,
            checked: 0,
            skipped_kinks: 0,
            failures: Vec::new(),
        },
    };

    let mut m = model.clone();
    let grads = model_grad.tensors();
    for (t, (name, g)) in grads.iter().enumerate() {
        for i in 0..g.len() {
            let theta = m.weights.tensors()[t].1[i];
            let h = step(theta);
            m.weights.tensors_mut()[t].1[i] = theta + h;
            let (fp, sp) = probe(&m, head, batch, alpha)?;
            m.weights.tensors_mut()[t].1[i] = theta - h;
            let (fm, sm) = probe(&m, head, batch, alpha)?;
            m.weights.tensors_mut()[t].1[i] = theta;
            let numeric = (base_sig.admits(&sp) && base_sig.admits(&sm)).then(|| central_difference(&fp, &fm, h));
            tally.record(format!("{name}[{i}]"), g[i], numeric);
        }
    }

    let mut hd = head.clone();
    let names: Vec<(&'static str, usize)> = head.tensors().iter().map(|(n, t)| (*n, t.len())).collect();
    let mut flat = 0;
    for (t, (name, len)) in names.into_iter().enumerate() {
        for i in 0..len {
            let theta = hd.tensors()[t].1[i];
            let h = step(theta);
            hd.tensors_mut()[t].1[i] = theta + h;
            let (fp, sp) = probe(model, &hd, batch, alpha)?;
            hd.tensors_mut()[t].1[i] = theta - h;
            let (fm, sm) = probe(model, &hd, batch, alpha)?;
            hd.tensors_mut()[t].1[i] = theta;
            let numeric = (base_sig.admits(&sp) && base_sig.admits(&sm)).then(|| central_difference(&fp, &fm, h));
            tally.record(format!("{name}[{i}]"), head_grad[flat], numeric);
            flat += 1;
        }
    }
    Ok(tally.report)
}
