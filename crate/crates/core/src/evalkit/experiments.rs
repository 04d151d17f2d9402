//! Drivers for the robustness, memorization, error-detection, bias-induction
//! and top-k experiments on synthetic scenes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{accuracies, auc, confusion, correction_curve, miou, oracle_curve, CorrectionCurve};
use crate::baselines::{mc_dropout_predict, DropoutEnsemble};
use crate::compensation::ClassMatrix;
use crate::error::{Error, Result};
use crate::inference::{self, argmax, BetaSource, InductionSpec, Relaxation};
use crate::netcore::{ModelShape, SegModel};
use crate::synthgrid::{corrupt_labels, generate_split, sample_pair_assignments, ClassPair, LabelGrid, Sample, SceneConfig};
use crate::trainer::{train, Head, Method, TrainConfig, Trained};
use crate::uncertainty::{self, uncertainty_maps, DEFAULT_PHI, DEFAULT_TOP_K};
use crate::{seed, table};

/// A synthetic scene family, its split sizes, the network width and the
/// training recipe shared by all experiment cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Experiment {
    pub scene: SceneConfig,
    pub train_images: usize,
    pub test_images: usize,
    pub hidden: usize,
    pub train: TrainConfig,
    /// Dilation radius of the label noise applied to the training split.
    #[serde(default)]
    pub label_noise: usize,
}

impl Experiment {
    pub fn shape(&self) -> ModelShape {
        ModelShape::new(self.scene.feature_dim, self.hidden, self.scene.num_classes)
    }

    /// Training images `0..train_images`, test images after them.
    pub fn splits(&self) -> Result<(Vec<Sample>, Vec<Sample>)> {
        if self.train_images == 0 || self.test_images == 0 {
            return Err(Error::config("both splits need at least one image"));
        }
        Ok((
            generate_split(&self.scene, 0, self.train_images)?,
            generate_split(&self.scene, self.train_images, self.test_images)?,
        ))
    }

    pub fn noise_pairs(&self) -> Result<Vec<ClassPair>> {
        self.scene.ambiguous_pairs.iter().map(|p| p.pair()).collect()
    }

    /// Training split with labels corrupted at radius `n`; the superior class
    /// of every pair and image is drawn once from the scene seed.
    pub fn noisy_train(&self, train: &[Sample], n: usize) -> Result<Vec<Sample>> {
        if n == 0 {
            return Ok(train.to_vec());
        }
        let pairs = self.noise_pairs()?;
        let assign = sample_pair_assignments(&pairs, train.len(), seed::derive(self.scene.seed, "noise", 0))?;
        train
            .iter()
            .enumerate()
            .map(|(i, s)| {
                Ok(Sample {
                    features: s.features.clone(),
                    labels: corrupt_labels(&s.labels, assign.for_image(i), n, self.scene.num_classes)?,
                })
            })
            .collect()
    }

    /// Trains `method` with `seed` on `samples`.
    pub fn fit(&self, method: Method, samples: &[Sample], seed: u64) -> Result<Trained> {
        let cfg = method.configure(&TrainConfig {
            seed,
            ..self.train.clone()
        });
        let (model, head) = method.build(self.shape(), &cfg)?;
        train(model, head, samples, &cfg)
    }
}

pub fn predict_all(model: &SegModel, samples: &[Sample]) -> Result<Vec<LabelGrid>> {
    samples
        .iter()
        .map(|s| inference::predict(model, &s.features).map(|p| p.labels))
        .collect()
}

fn ground_truth(samples: &[Sample]) -> Vec<LabelGrid> {
    samples.iter().map(|s| s.labels.clone()).collect()
}

pub fn evaluate_miou(model: &SegModel, samples: &[Sample]) -> Result<f64> {
    let k = model.shape().classes;
    miou(&confusion(&predict_all(model, samples)?, &ground_truth(samples), k)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseRow {
    pub method: Method,
    pub n: usize,
    pub seed: u64,
    pub miou: f64,
}

/// Trains every method on the training split corrupted at each noise level
/// and scores mIoU on the clean test split.
pub fn run_noise_robustness(
    exp: &Experiment,
    train_set: &[Sample],
    test_set: &[Sample],
    levels: &[usize],
    methods: &[Method],
    seeds: &[u64],
) -> Result<Vec<NoiseRow>> {
    let mut rows = Vec::new();
    for &n in levels {
        let noisy = exp.noisy_train(train_set, n)?;
        for &method in methods {
            for &s in seeds {
                let t = exp.fit(method, &noisy, s)?;
                rows.push(NoiseRow {
                    method,
                    n,
                    seed: s,
                    miou: evaluate_miou(&t.model, test_set)?,
                });
            }
        }
    }
    Ok(rows)
}

/// Seed-mean mIoU of one method at one noise level.
pub fn mean_miou(rows: &[NoiseRow], method: Method, n: usize) -> Option<f64> {
    mean(rows.iter().filter(|r| r.method == method && r.n == n).map(|r| r.miou))
}

fn mean(it: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = it.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn noise_csv(rows: &[NoiseRow]) -> String {
    let mut out = vec![["method", "n", "seed", "miou"].map(String::from).to_vec()];
    out.extend(
        rows.iter()
            .map(|r| vec![r.method.to_string(), r.n.to_string(), r.seed.to_string(), table::sig6(r.miou)]),
    );
    table::render(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemorizationRow {
    pub split: &'static str,
    pub compensation: bool,
    pub seed: u64,
    pub mean_u: f64,
}

/// Mean plain-softmax uncertainty `u` over a split (compensation unused).
pub fn mean_model_uncertainty(model: &SegModel, samples: &[Sample]) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for s in samples {
        let u = inference::predict(model, &s.features)?.model_uncertainty();
        n += u.len();
        sum += u.iter().sum::<f64>();
    }
    if n == 0 {
        return Err(Error::data("uncertainty over zero pixels"));
    }
    Ok(sum / n as f64)
}

/// Trains with compensation on and off and compares the mean `u` on both
/// splits.
pub fn run_memorization(
    exp: &Experiment,
    train_set: &[Sample],
    test_set: &[Sample],
    seeds: &[u64],
) -> Result<Vec<MemorizationRow>> {
    let noisy = exp.noisy_train(train_set, exp.label_noise)?;
    let mut rows = Vec::new();
    for &s in seeds {
        for compensation in [true, false] {
            let cfg = TrainConfig {
                seed: s,
                compensation_enabled: compensation,
                ..exp.train.clone()
            };
            let (model, head) = Method::Ours.build(exp.shape(), &cfg)?;
            let t = train(model, head, &noisy, &cfg)?;
            for (split, data) in [("train", noisy.as_slice()), ("test", test_set)] {
                rows.push(MemorizationRow {
                    split,
                    compensation,
                    seed: s,
                    mean_u: mean_model_uncertainty(&t.model, data)?,
                });
            }
        }
    }
    Ok(rows)
}

pub fn mean_memorization(rows: &[MemorizationRow], split: &str, compensation: bool) -> Option<f64> {
    mean(rows.iter().filter(|r| r.split == split && r.compensation == compensation).map(|r| r.mean_u))
}

pub fn memorization_csv(rows: &[MemorizationRow]) -> String {
    let mut out = vec![["split", "compensation", "seed", "mean_u"].map(String::from).to_vec()];
    out.extend(rows.iter().map(|r| {
        vec![
            r.split.to_string(),
            r.compensation.to_string(),
            r.seed.to_string(),
            table::sig6(r.mean_u),
        ]
    }));
    table::render(out)
}

/// Per-pixel rankings compared in the error-detection experiment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Ranking {
    ErrorLikelihood,
    Beta,
    ModelUncertainty,
    Random,
    Oracle,
    /// Monte-Carlo dropout variance of a separately trained dropout network.
    Bnn,
}

impl Ranking {
    pub fn name(self) -> &'static str {
        match self {
            Ranking::ErrorLikelihood => "e",
            Ranking::Beta => "beta",
            Ranking::ModelUncertainty => "u",
            Ranking::Random => "random",
            Ranking::Oracle => "oracle",
            Ranking::Bnn => "bnn",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrectionRow {
    pub ranking: Ranking,
    pub seed: u64,
    pub auc: f64,
    pub curve: CorrectionCurve,
}

/// Learned compensation of `head`, or zeros for heads without one.
pub fn learned_matrix(model: &SegModel, head: &Head) -> ClassMatrix {
    head.compensation()
        .map(|m| m.materialize())
        .unwrap_or_else(|| ClassMatrix::zeros(model.shape().classes))
}

/// Correction curves of the model's held-out predictions under each ranking;
/// `b` is the learned compensation used for `e`.
pub fn correction_rankings(
    model: &SegModel,
    b: &ClassMatrix,
    test_set: &[Sample],
    seed: u64,
    r_grid: &[f64],
) -> Result<Vec<CorrectionRow>> {
    let k = DEFAULT_TOP_K.min(model.shape().classes);
    let gts = ground_truth(test_set);
    let mut preds = Vec::new();
    let (mut e, mut beta, mut u, mut rnd) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut rng = seed::rng(seed, "random-ranking", 0);
    for s in test_set {
        let maps = uncertainty_maps(model, b, &s.features, k, DEFAULT_PHI)?;
        preds.push(inference::predict(model, &s.features)?.labels);
        rnd.push((0..s.labels.num_pixels()).map(|_| rng.random::<f64>()).collect());
        e.push(maps.e.values);
        beta.push(maps.beta.values);
        u.push(maps.u.values);
    }
    let mut rows = Vec::new();
    for (ranking, scores) in [
        (Ranking::ErrorLikelihood, &e),
        (Ranking::Beta, &beta),
        (Ranking::ModelUncertainty, &u),
        (Ranking::Random, &rnd),
    ] {
        let curve = correction_curve(&preds, &gts, scores, r_grid)?;
        rows.push(CorrectionRow {
            ranking,
            seed,
            auc: auc(&curve)?,
            curve,
        });
    }
    let curve = oracle_curve(&preds, &gts, r_grid)?;
    rows.push(CorrectionRow {
        ranking: Ranking::Oracle,
        seed,
        auc: auc(&curve)?,
        curve,
    });
    Ok(rows)
}

/// Correction curve of a dropout network's MC-mean prediction ranked by its
/// sample variance.
pub fn bnn_correction(model: &SegModel, test_set: &[Sample], seed: u64, r_grid: &[f64]) -> Result<CorrectionRow> {
    let k = model.shape().classes;
    let ens = DropoutEnsemble::new(seed);
    let mut preds = Vec::new();
    let mut var = Vec::new();
    for s in test_set {
        let mc = mc_dropout_predict(model, &s.features, &ens)?;
        let labels = mc
            .mean
            .chunks_exact(k)
            .map(|p| argmax(p) as u8)
            .collect::<Vec<u8>>();
        preds.push(LabelGrid::new(s.labels.height(), s.labels.width(), labels)?);
        var.push(mc.variance);
    }
    let curve = correction_curve(&preds, &ground_truth(test_set), &var, r_grid)?;
    Ok(CorrectionRow {
        ranking: Ranking::Bnn,
        seed,
        auc: auc(&curve)?,
        curve,
    })
}

/// Error-detection experiment: trains the compensated model (and, with
/// `with_bnn`, a dropout network) per seed and scores every ranking.
pub fn run_correction(
    exp: &Experiment,
    train_set: &[Sample],
    test_set: &[Sample],
    seeds: &[u64],
    r_grid: &[f64],
    with_bnn: bool,
) -> Result<Vec<CorrectionRow>> {
    let noisy = exp.noisy_train(train_set, exp.label_noise)?;
    let mut rows = Vec::new();
    for &s in seeds {
        let t = exp.fit(Method::Ours, &noisy, s)?;
        rows.extend(correction_rankings(&t.model, &learned_matrix(&t.model, &t.head), test_set, s, r_grid)?);
        if with_bnn {
            let bnn = exp.fit(Method::Bnn, &noisy, s)?;
            rows.push(bnn_correction(&bnn.model, test_set, s, r_grid)?);
        }
    }
    Ok(rows)
}

pub fn mean_auc(rows: &[CorrectionRow], ranking: Ranking) -> Option<f64> {
    mean(rows.iter().filter(|r| r.ranking == ranking).map(|r| r.auc))
}

pub fn auc_csv(rows: &[CorrectionRow]) -> String {
    let mut out = vec![["ranking", "seed", "auc"].map(String::from).to_vec()];
    out.extend(
        rows.iter()
            .map(|r| vec![r.ranking.name().to_string(), r.seed.to_string(), table::sig6(r.auc)]),
    );
    table::render(out)
}

/// Long-format curves: `ranking,seed,r_area,acc_a`.
pub fn curves_csv(rows: &[CorrectionRow]) -> String {
    let mut out = vec![["ranking", "seed", "r_area", "acc_a"].map(String::from).to_vec()];
    for r in rows {
        for &(x, a) in &r.curve.points {
            out.push(vec![
                r.ranking.name().to_string(),
                r.seed.to_string(),
                table::sig6(x),
                table::sig6(a),
            ]);
        }
    }
    table::render(out)
}

/// Manual bias that prioritises `class`: `+boost` on its diagonal and
/// `-penalty` against each confuser.
pub fn boost_spec(classes: usize, class: usize, confusers: &[usize], boost: f64, penalty: f64) -> Result<InductionSpec> {
    let mut triples = vec![(class, class, boost)];
    triples.extend(confusers.iter().map(|&j| (class, j, -penalty)));
    InductionSpec::from_triples(classes, &triples, Relaxation::Soft, BetaSource::Branch)
}

#[derive(Clone, Debug, PartialEq)]
pub struct InductionRow {
    pub boost: f64,
    /// Recall of the prioritised class.
    pub acc_class: f64,
    pub acc_a: f64,
}

/// Class accuracy and overall accuracy of bias-induced predictions.
pub fn induction_accuracy(model: &SegModel, samples: &[Sample], spec: &InductionSpec, class: usize) -> Result<(f64, f64)> {
    let k = model.shape().classes;
    let preds = samples
        .iter()
        .map(|s| inference::bias_induced_predict(model, &s.features, spec))
        .collect::<Result<Vec<_>>>()?;
    let acc = accuracies(&confusion(&preds, &ground_truth(samples), k)?)?;
    let c = acc.per_class[class].ok_or_else(|| Error::UndefinedMetric(format!("class {class} absent from the split")))?;
    Ok((c, acc.overall))
}

/// Accuracy for each boost magnitude (0 reproduces plain prediction).
pub fn sweep_induction(
    model: &SegModel,
    samples: &[Sample],
    class: usize,
    confusers: &[usize],
    penalty: f64,
    boosts: &[f64],
) -> Result<Vec<InductionRow>> {
    let k = model.shape().classes;
    boosts
        .iter()
        .map(|&boost| {
            let pen = if boost == 0.0 { 0.0 } else { penalty };
            let (acc_class, acc_a) = induction_accuracy(model, samples, &boost_spec(k, class, confusers, boost, pen)?, class)?;
            Ok(InductionRow { boost, acc_class, acc_a })
        })
        .collect()
}

/// Largest class-accuracy gain whose overall-accuracy drop stays within
/// `max_drop`; `rows[0]` must be the unboosted reference.
pub fn pick_boost(rows: &[InductionRow], max_drop: f64) -> Option<&InductionRow> {
    let base = rows.first()?;
    rows.iter()
        .skip(1)
        .filter(|r| base.acc_a - r.acc_a <= max_drop)
        .max_by(|a, b| a.acc_class.total_cmp(&b.acc_class))
}

pub fn induction_csv(rows: &[InductionRow]) -> String {
    let mut out = vec![["boost", "acc_class", "acc_a"].map(String::from).to_vec()];
    out.extend(
        rows.iter()
            .map(|r| vec![table::sig6(r.boost), table::sig6(r.acc_class), table::sig6(r.acc_a)]),
    );
    table::render(out)
}

/// Mean `|e(k) - e(K)|` for each `k`, on every image of `samples`.
pub fn run_k_sweep(model: &SegModel, b: &ClassMatrix, samples: &[Sample], ks: &[usize]) -> Result<Vec<(usize, f64)>> {
    let images: Vec<_> = samples.iter().map(|s| &s.features).collect();
    uncertainty::k_sensitivity(model, b, &images, ks)
}

pub fn k_sweep_csv(rows: &[(usize, f64)]) -> String {
    let mut out = vec![["k", "mean_abs_delta_e"].map(String::from).to_vec()];
    out.extend(rows.iter().map(|(k, v)| vec![k.to_string(), table::sig6(*v)]));
    table::render(out)
}
