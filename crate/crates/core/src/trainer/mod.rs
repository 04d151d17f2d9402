//! SGD training of the network together with its loss head, and the
//! finite-difference gradient audit.

mod gradcheck;

pub use gradcheck::{compare_gradients, finite_difference_check, GradCheckReport};

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::baselines::{CModelHead, SModelHead};
use crate::compensation::{
    cross_entropy_with_grad, training_loss_with_grad, CompensationMatrix, CompensationMode, LossBreakdown,
};
use crate::error::{Error, Result};
use crate::evalkit::{accuracies, miou, ConfusionMatrix};
use crate::netcore::{Checkpoint, ForwardPass, Mode, ModelShape, Parameters, SegModel, SegWeights, Upstream};
use crate::synthgrid::Sample;
use crate::{inference, seed, table};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Exponent of the polynomial learning-rate decay; 0 keeps `lr` fixed.
    pub poly_decay_power: f64,
    pub alpha: f64,
    pub symmetric: bool,
    pub compensation_enabled: bool,
    pub seed: u64,
    /// Steps between evaluation snapshots on the training images; 0 disables.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 8,
            lr: 0.05,
            momentum: 0.9,
            poly_decay_power: 0.9,
            alpha: 0.01,
            symmetric: false,
            compensation_enabled: true,
            seed: 0,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("steps must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.poly_decay_power >= 0.0 && self.poly_decay_power.is_finite()) {
            return Err(Error::config("poly_decay_power must be finite and >= 0"));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::config("alpha must be finite and >= 0"));
        }
        Ok(())
    }

    /// `lr * (1 - t / steps)^power`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.poly_decay_power == 0.0 {
            return self.lr;
        }
        self.lr * (1.0 - step as f64 / self.steps as f64).powf(self.poly_decay_power)
    }
}

/// Loss head attached to the network's logits.
#[derive(Clone, Debug, PartialEq)]
pub enum Head {
    /// Softmax cross-entropy.
    Plain,
    /// Compensated softmax with the lasso penalty. `local = false` fixes
    /// `beta = 1` everywhere instead of using the uncertainty branch.
    Compensated { matrix: CompensationMatrix, local: bool },
    SModel(SModelHead),
    CModel(CModelHead),
}

impl Head {
    pub fn kind(&self) -> &'static str {
        match self {
            Head::Plain => "plain",
            Head::Compensated { .. } => "compensated",
            Head::SModel(_) => "s_model",
            Head::CModel(_) => "c_model",
        }
    }

    /// Learned compensation matrix, if the head has one.
    pub fn compensation(&self) -> Option<&CompensationMatrix> {
        match self {
            Head::Compensated { matrix, .. } => Some(matrix),
            _ => None,
        }
    }
}

impl Parameters for Head {
    fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        match self {
            Head::Plain => Vec::new(),
            Head::Compensated { matrix, .. } => matrix.tensors(),
            Head::SModel(h) => h.tensors(),
            Head::CModel(h) => h.tensors(),
        }
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        match self {
            Head::Plain => Vec::new(),
            Head::Compensated { matrix, .. } => matrix.tensors_mut(),
            Head::SModel(h) => h.tensors_mut(),
            Head::CModel(h) => h.tensors_mut(),
        }
    }
}

/// Training recipes compared in the experiments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Baseline,
    Ours,
    OursSym,
    /// Global compensation: `alpha = 0`, `beta = 1`, unconstrained `B`.
    Logcomp,
    SModel,
    CModel,
    Bnn,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Baseline,
        Method::Ours,
        Method::OursSym,
        Method::Logcomp,
        Method::SModel,
        Method::CModel,
        Method::Bnn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::Ours => "ours",
            Method::OursSym => "ours_sym",
            Method::Logcomp => "logcomp",
            Method::SModel => "s_model",
            Method::CModel => "c_model",
            Method::Bnn => "bnn",
        }
    }

    /// Dropout rate used while training.
    pub fn dropout(self) -> f64 {
        match self {
            Method::Bnn => crate::baselines::DropoutEnsemble::DEFAULT_RATE,
            _ => 0.0,
        }
    }

    /// The training configuration this recipe actually runs with.
    pub fn configure(self, cfg: &TrainConfig) -> TrainConfig {
        let mut c = cfg.clone();
        match self {
            Method::Baseline | Method::SModel | Method::CModel | Method::Bnn => c.compensation_enabled = false,
            Method::Ours => {}
            Method::OursSym => c.symmetric = true,
            Method::Logcomp => c.alpha = 0.0,
        }
        c
    }

    /// Fresh model and head, initialised from `seed`.
    pub fn build(self, shape: ModelShape, cfg: &TrainConfig) -> Result<(SegModel, Head)> {
        let cfg = self.configure(cfg);
        let model = SegModel::new(shape, self.dropout(), seed::derive(cfg.seed, "model", 0))?;
        let k = shape.classes;
        let head = match self {
            Method::Baseline | Method::Bnn => Head::Plain,
            Method::Ours | Method::OursSym => {
                let mode = if cfg.symmetric {
                    CompensationMode::Symmetric
                } else {
                    CompensationMode::Free
                };
                Head::Compensated {
                    matrix: CompensationMatrix::zeros(k, mode)?,
                    local: true,
                }
            }
            Method::Logcomp => Head::Compensated {
                matrix: CompensationMatrix::zeros(k, CompensationMode::Unconstrained)?,
                local: false,
            },
            Method::SModel => Head::SModel(SModelHead::new(k)?),
            Method::CModel => Head::CModel(CModelHead::new(shape.hidden, k, seed::derive(cfg.seed, "head", 0))?),
        };
        Ok((model, head))
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace(['-', '+', ' '], "_");
        let norm = norm.trim_end_matches("_preset");
        Method::ALL
            .into_iter()
            .find(|m| m.name() == norm)
            .ok_or_else(|| Error::config(format!("unknown method {s:?}")))
    }
}

/// Loss of one batch plus, when requested, gradients for every parameter.
#[derive(Clone, Debug)]
pub struct Objective {
    pub loss: LossBreakdown,
    pub model_grad: Option<SegWeights>,
    /// Flattened in the head's tensor order.
    pub head_grad: Option<Vec<f64>>,
    pub pass: ForwardPass,
}

/// Runs the network and head on a batch in `mode` and evaluates the
/// training objective.
pub fn evaluate_objective(
    model: &SegModel,
    head: &Head,
    batch: &[&Sample],
    alpha: f64,
    mode: Mode,
    with_grad: bool,
) -> Result<Objective> {
    let features: Vec<_> = batch.iter().map(|s| &s.features).collect();
    let pass = model.forward(&features, mode)?;
    let labels: Vec<u8> = batch.iter().flat_map(|s| s.labels.values().iter().copied()).collect();
    let k = model.shape().classes;
    let (loss, dlogits, dbetas, dhidden, head_grad) = match head {
        Head::Plain => {
            let (ce, dl) = cross_entropy_with_grad(pass.logits(), &labels, k)?;
            (LossBreakdown::cross_entropy_only(ce), dl, None, None, Vec::new())
        }
        Head::Compensated { matrix, local } => {
            let b = matrix.materialize();
            let ones;
            let betas = if *local {
                pass.betas()
            } else {
                ones = vec![1.0; labels.len()];
                &ones
            };
            let (loss, g) = training_loss_with_grad(pass.logits(), betas, &labels, &b, alpha)?;
            let dbetas = local.then_some(g.dbetas);
            (loss, g.dlogits, dbetas, None, matrix.reduce_gradient(&g.dmatrix))
        }
        Head::SModel(h) => {
            let (ce, dl, draw) = h.loss_with_grad(pass.logits(), &labels)?;
            (LossBreakdown::cross_entropy_only(ce), dl, None, None, draw)
        }
        Head::CModel(h) => {
            let (ce, dl, dh, g) = h.loss_with_grad(pass.logits(), pass.hidden(), &labels)?;
            let flat = g.tensors().into_iter().flat_map(|(_, t)| t.iter().copied()).collect();
            (LossBreakdown::cross_entropy_only(ce), dl, None, Some(dh), flat)
        }
    };
    let model_grad = if with_grad {
        Some(model.backward(
            &pass,
            Upstream {
                dlogits: &dlogits,
                dbetas: dbetas.as_deref(),
                dhidden: dhidden.as_deref(),
            },
        )?)
    } else {
        None
    };
    Ok(Objective {
        loss,
        model_grad,
        head_grad: with_grad.then_some(head_grad),
        pass,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: LossBreakdown,
    pub lr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Snapshot {
    pub step: usize,
    pub miou: f64,
    pub acc_a: f64,
    pub mean_u: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub steps: Vec<StepRecord>,
    pub snapshots: Vec<Snapshot>,
}

impl TrainHistory {
    /// `step,total,ce,lasso,lr`.
    pub fn to_csv(&self) -> String {
        let mut rows = vec![["step", "total", "ce", "lasso", "lr"].map(String::from).to_vec()];
        rows.extend(self.steps.iter().map(|r| {
            vec![
                r.step.to_string(),
                table::sig6(r.loss.total),
                table::sig6(r.loss.cross_entropy_term),
                table::sig6(r.loss.lasso_term),
                table::sig6(r.lr),
            ]
        }));
        table::render(rows)
    }

    pub fn snapshots_csv(&self) -> String {
        let mut rows = vec![["step", "miou", "acc_a", "mean_u"].map(String::from).to_vec()];
        rows.extend(self.snapshots.iter().map(|s| {
            vec![
                s.step.to_string(),
                table::sig6(s.miou),
                table::sig6(s.acc_a),
                table::sig6(s.mean_u),
            ]
        }));
        table::render(rows)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trained {
    pub model: SegModel,
    pub head: Head,
    pub history: TrainHistory,
}

fn check_b_invariants(head: &Head) {
    if let Head::Compensated { matrix, .. } = head {
        let b = matrix.materialize();
        let k = b.size();
        for i in 0..k {
            if matrix.mode() != CompensationMode::Unconstrained {
                debug_assert_eq!(b.get(i, i), 0.0, "diagonal of B drifted");
            }
            if matrix.mode() == CompensationMode::Symmetric {
                for j in 0..k {
                    debug_assert_eq!(b.get(i, j), b.get(j, i), "B lost its symmetry");
                }
            }
        }
    }
}

fn diagnostics(model: &SegModel, head: &Head) -> String {
    let bad = model.weights.first_non_finite().or_else(|| head.first_non_finite());
    let largest = model
        .weights
        .tensors()
        .into_iter()
        .chain(head.tensors())
        .map(|(n, t)| (n, t.iter().fold(0.0f64, |m, v| m.max(v.abs()))))
        .fold(("none", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    format!(
        "first non-finite parameter {bad:?}; largest |parameter| {} in {}",
        largest.1, largest.0
    )
}

/// Mini-batch SGD with momentum and polynomial learning-rate decay.
///
/// With `compensation_enabled = false` the compensation matrix keeps its
/// zero initialisation and receives no updates.
pub fn train(model: SegModel, head: Head, samples: &[Sample], cfg: &TrainConfig) -> Result<Trained> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::data("training needs at least one image"));
    }
    let k = model.shape().classes;
    for s in samples {
        s.labels.check_range(k)?;
    }
    let mut model = model;
    let mut head = head;
    let mut v_model = SegWeights::zeros(model.shape());
    let mut v_head = vec![0.0; head.num_params()];
    let freeze_head = matches!(head, Head::Compensated { .. }) && !cfg.compensation_enabled;
    let batch = cfg.batch_size.min(samples.len());
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut epoch = 0u64;
    let mut history = TrainHistory::default();

    for step in 0..cfg.steps {
        let mut idx = Vec::with_capacity(batch);
        while idx.len() < batch {
            if cursor == order.len() {
                order = (0..samples.len()).collect();
                order.shuffle(&mut seed::rng(cfg.seed, "epoch", epoch));
                epoch += 1;
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let batch_samples: Vec<&Sample> = idx.iter().map(|&i| &samples[i]).collect();
        let mode = Mode::Train {
            dropout_seed: seed::derive(cfg.seed, "dropout", step as u64),
        };
        let obj = evaluate_objective(&model, &head, &batch_samples, cfg.alpha, mode, true).map_err(|e| match e {
            Error::Numeric { location, detail } => Error::numeric(
                format!("training step {step}: {location}"),
                format!("{detail}; {}", diagnostics(&model, &head)),
            ),
            other => other,
        })?;
        if !obj.loss.total.is_finite() {
            return Err(Error::numeric(
                format!("training step {step}"),
                format!("loss is {}; {}", obj.loss.total, diagnostics(&model, &head)),
            ));
        }
        let lr = cfg.lr_at(step);
        let g_model = obj.model_grad.expect("gradients requested");
        for ((_, w), ((_, v), (_, g))) in model
            .weights
            .tensors_mut()
            .into_iter()
            .zip(v_model.tensors_mut().into_iter().zip(g_model.tensors()))
        {
            for i in 0..w.len() {
                v[i] = cfg.momentum * v[i] + g[i];
                w[i] -= lr * v[i];
            }
        }
        if !freeze_head {
            let g_head = obj.head_grad.expect("gradients requested");
            let mut off = 0;
            for (_, w) in head.tensors_mut() {
                for wi in w.iter_mut() {
                    v_head[off] = cfg.momentum * v_head[off] + g_head[off];
                    *wi -= lr * v_head[off];
                    off += 1;
                }
            }
        }
        model.update_running_stats(&obj.pass);
        check_b_invariants(&head);
        history.steps.push(StepRecord {
            step,
            loss: obj.loss,
            lr,
        });
        let done = step + 1;
        if cfg.eval_every > 0 && (done % cfg.eval_every == 0 || done == cfg.steps) {
            history.snapshots.push(snapshot(&model, samples, done)?);
        }
    }
    Ok(Trained { model, head, history })
}

fn snapshot(model: &SegModel, samples: &[Sample], step: usize) -> Result<Snapshot> {
    let k = model.shape().classes;
    let mut conf = ConfusionMatrix::new(k);
    let mut u_sum = 0.0;
    let mut n = 0usize;
    for s in samples {
        let pred = inference::predict(model, &s.features)?;
        conf.accumulate(&pred.labels, &s.labels)?;
        u_sum += pred.model_uncertainty().iter().sum::<f64>();
        n += s.labels.num_pixels();
    }
    Ok(Snapshot {
        step,
        miou: miou(&conf)?,
        acc_a: accuracies(&conf)?.overall,
        mean_u: u_sum / n as f64,
    })
}

/// Serialises the network and head into one checkpoint.
pub fn to_checkpoint(model: &SegModel, head: &Head) -> Checkpoint {
    let mut ck = Checkpoint::default();
    ck.put_model(model);
    ck.meta.insert("head.kind".into(), head.kind().into());
    match head {
        Head::Compensated { matrix, local } => {
            ck.meta.insert("head.mode".into(), format!("{:?}", matrix.mode()));
            ck.meta.insert("head.local".into(), local.to_string());
        }
        Head::CModel(h) => {
            ck.meta.insert("head.hidden".into(), h.hidden().to_string());
        }
        _ => {}
    }
    for (name, t) in head.tensors() {
        ck.sections.push((format!("head.{name}"), t.to_vec()));
    }
    ck
}

pub fn from_checkpoint(ck: &Checkpoint) -> Result<(SegModel, Head)> {
    let model = ck.get_model()?;
    let k = model.shape().classes;
    let mut head = match ck.meta_str("head.kind")? {
        "plain" => Head::Plain,
        "compensated" => {
            let mode = match ck.meta_str("head.mode")? {
                "Free" => CompensationMode::Free,
                "Symmetric" => CompensationMode::Symmetric,
                "Unconstrained" => CompensationMode::Unconstrained,
                other => return Err(Error::data(format!("unknown compensation mode {other:?}"))),
            };
            let local = ck
                .meta_str("head.local")?
                .parse()
                .map_err(|_| Error::data("head.local is not a boolean"))?;
            Head::Compensated {
                matrix: CompensationMatrix::zeros(k, mode)?,
                local,
            }
        }
        "s_model" => Head::SModel(SModelHead::new(k)?),
        "c_model" => Head::CModel(CModelHead::zeros(ck.meta_usize("head.hidden")?, k)?),
        other => return Err(Error::data(format!("unknown head kind {other:?}"))),
    };
    for (name, t) in head.tensors_mut() {
        let src = ck.section(&format!("head.{name}"))?;
        if src.len() != t.len() {
            return Err(Error::data(format!("checkpoint tensor {name} has the wrong size")));
        }
        t.copy_from_slice(src);
    }
    Ok((model, head))
}
