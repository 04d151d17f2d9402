use std::fs;
use std::path::{Path, PathBuf};

use compseg_core::evalkit::experiments::{
    auc_csv, correction_rankings, curves_csv, induction_accuracy, induction_csv, k_sweep_csv, learned_matrix,
    mean_miou, memorization_csv, noise_csv, pick_boost, predict_all, run_correction, run_k_sweep, run_memorization,
    run_noise_robustness, sweep_induction, Experiment,
};
use compseg_core::evalkit::{accuracies, class_iou, confusion, default_r_grid, miou};
use compseg_core::inference::{bias_induced_predict, InductionSpec};
use compseg_core::netcore::Checkpoint;
use compseg_core::synthgrid::{write_dataset, write_label_set, Dataset, DatasetMeta};
use compseg_core::trainer::{finite_difference_check, from_checkpoint, to_checkpoint, train as fit};
use compseg_core::uncertainty::uncertainty_maps;
use compseg_core::{table, Head, LabelGrid, Sample, SegModel};

use crate::config::RunConfig;
use crate::output::{config_hash, RunDir};
use crate::CliError;

const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Creates the run directory, lets `body` fill it and moves it into place.
fn with_run(
    cfg: &RunConfig,
    subcommand: &str,
    extra: &[&[u8]],
    seed: u64,
    body: impl FnOnce(&RunDir) -> Result<(), CliError>,
) -> Result<PathBuf, CliError> {
    let canonical = cfg.canonical();
    let mut parts: Vec<&[u8]> = vec![canonical.as_bytes()];
    parts.extend_from_slice(extra);
    let dir = RunDir::create(&cfg.output_dir, subcommand, &config_hash(&parts), seed)?;
    let result = dir.write("config.toml", &canonical).and_then(|()| body(&dir));
    match result {
        Ok(()) => dir.commit(),
        Err(e) => {
            dir.abandon();
            Err(e)
        }
    }
}

fn load_checkpoint(path: &Path) -> Result<(Vec<u8>, SegModel, Head), CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let (model, head) = from_checkpoint(&Checkpoint::from_bytes(&bytes)?)?;
    Ok((bytes, model, head))
}

fn check_model(cfg: &RunConfig, model: &SegModel) -> Result<(), CliError> {
    let s = model.shape();
    let scene = &cfg.dataset.scene;
    if s.in_dim != scene.feature_dim || s.classes != scene.num_classes {
        return Err(CliError::Data(format!(
            "checkpoint expects {} features and {} classes; the dataset has {} and {}",
            s.in_dim, s.classes, scene.feature_dim, scene.num_classes
        )));
    }
    Ok(())
}

fn label_meta(cfg: &RunConfig, samples: &[Sample]) -> DatasetMeta {
    let s = &cfg.dataset.scene;
    DatasetMeta {
        height: s.height,
        width: s.width,
        feature_dim: s.feature_dim,
        num_classes: s.num_classes,
        image_count: samples.len(),
        seed: s.seed,
        class_names: cfg.class_names(),
    }
}

fn ground_truth(samples: &[Sample]) -> Vec<LabelGrid> {
    samples.iter().map(|s| s.labels.clone()).collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(table::sig6).unwrap_or_default()
}

/// `class,iou,acc` per class, then `miou` and `acc_a` rows.
fn metrics_csv(cfg: &RunConfig, preds: &[LabelGrid], samples: &[Sample]) -> Result<(String, String), CliError> {
    let conf = confusion(preds, &ground_truth(samples), cfg.dataset.scene.num_classes)?;
    let names = cfg.class_names();
    let iou = class_iou(&conf);
    let acc = accuracies(&conf)?;
    let mut rows = vec![["class", "iou", "acc"].map(String::from).to_vec()];
    for (c, name) in names.iter().enumerate() {
        rows.push(vec![name.clone(), opt(iou[c]), opt(acc.per_class[c])]);
    }
    rows.push(vec!["miou".into(), table::sig6(miou(&conf)?), String::new()]);
    rows.push(vec!["acc_a".into(), String::new(), table::sig6(acc.overall)]);
    Ok((table::render(rows), conf.to_csv(&names)?))
}

fn r_grid(cfg: &RunConfig) -> Vec<f64> {
    cfg.experiment.r_grid.clone().unwrap_or_else(default_r_grid)
}

pub fn generate(config: &Path) -> Result<PathBuf, CliError> {
    let cfg = RunConfig::load(config)?;
    let (train, test) = cfg.generate()?;
    let k = cfg.dataset.scene.num_classes;
    let seed = cfg.dataset.scene.seed;
    with_run(&cfg, "generate", &[], seed, |dir| {
        for (name, samples) in [("train", train), ("test", test)] {
            let d = Dataset::new(samples, k, seed, cfg.class_names())?;
            write_dataset(&dir.path().join(name), &d)?;
        }
        Ok(())
    })
}

pub fn train(config: &Path, gradcheck: bool) -> Result<PathBuf, CliError> {
    let cfg = RunConfig::load(config)?;
    let method = cfg.method()?;
    let exp = cfg.experiment();
    let (train_set, test_set) = cfg.splits()?;
    let noisy = exp.noisy_train(&train_set, exp.label_noise)?;
    let tc = method.configure(&cfg.train);
    let (model, head) = method.build(exp.shape(), &tc)?;
    let flag: &[u8] = if gradcheck { b"gradcheck" } else { b"" };
    with_run(&cfg, "train", &[flag], tc.seed, |dir| {
        if gradcheck {
            let report = finite_difference_check(&model, &head, &[&noisy[0]], tc.alpha, GRADCHECK_TOLERANCE)?;
            dir.write("gradcheck.txt", format!("{report:#?}\n"))?;
            if !report.passed() {
                return Err(CliError::Numeric(format!(
                    "gradient check failed: max relative error {} at {:?}, {} failures, {} skipped",
                    report.max_relative_error,
                    report.worst_parameter,
                    report.failures.len(),
                    report.skipped_kinks
                )));
            }
        }
        let t = fit(model, head, &noisy, &tc)?;
        dir.write("checkpoint.bin", to_checkpoint(&t.model, &t.head).to_bytes())?;
        dir.write("history.csv", t.history.to_csv())?;
        if tc.eval_every > 0 {
            dir.write("snapshots.csv", t.history.snapshots_csv())?;
        }
        dir.write(
            "compensation.csv",
            learned_matrix(&t.model, &t.head).to_csv(&cfg.class_names())?,
        )?;
        let (metrics, _) = metrics_csv(&cfg, &predict_all(&t.model, &test_set)?, &test_set)?;
        dir.write("test_metrics.csv", metrics)
    })
}

pub fn eval(config: &Path, checkpoint: &Path) -> Result<PathBuf, CliError> {
    let cfg = RunConfig::load(config)?;
    let (bytes, model, _) = load_checkpoint(checkpoint)?;
    check_model(&cfg, &model)?;
    let (_, test_set) = cfg.splits()?;
    with_run(&cfg, "eval", &[&bytes], cfg.train.seed, |dir| {
        let preds = predict_all(&model, &test_set)?;
        let (metrics, conf) = metrics_csv(&cfg, &preds, &test_set)?;
        dir.write("metrics.csv", metrics)?;
        dir.write("confusion.csv", conf)?;
        write_label_set(&dir.path().join("predictions"), &label_meta(&cfg, &test_set), &preds)?;
        Ok(())
    })
}

pub fn uncertainty(config: &Path, checkpoint: &Path) -> Result<PathBuf, CliError> {
    let cfg = RunConfig::load(config)?;
    let (bytes, model, head) = load_checkpoint(checkpoint)?;
    check_model(&cfg, &model)?;
    let (_, test_set) = cfg.splits()?;
    let b = learned_matrix(&model, &head);
    let (k, phi) = (cfg.experiment.top_k.min(model.shape().classes), cfg.experiment.phi);
    with_run(&cfg, "uncertainty", &[&bytes], cfg.train.seed, |dir| {
        let mut rows = vec![["image", "map", "mean"].map(String::from).to_vec()];
        for (i, s) in test_set.iter().enumerate() {
            let maps = uncertainty_maps(&model, &b, &s.features, k, phi)?;
            for m in maps.all() {
                dir.write(&format!("image{i:03}/{}", m.file_name(phi)), m.to_pgm())?;
                let mean = m.values.iter().sum::<f64>() / m.values.len() as f64;
                rows.push(vec![i.to_string(), m.kind.to_string(), table::sig6(mean)]);
            }
        }
        dir.write("summary.csv", table::render(rows))
    })
}

pub fn correction(config: &Path, checkpoint: Option<&Path>) -> Result<PathBuf, CliError> {
    let cfg = RunConfig::load(config)?;
    let (train_set, test_set) = cfg.splits()?;
    let grid = r_grid(&cfg);
    let (bytes, rows) = match checkpoint {
        Some(path) => {
            let (bytes, model, head) = load_checkpoint(path)?;
            check_model(&cfg, &model)?;
            let rows = correction_rankings(&model, &learned_matrix(&model, &head), &test_set, cfg.train.seed, &grid)?;
            (bytes, rows)
        }
        None => (
            Vec::new(),
            run_correction(
                &cfg.experiment(),
                &train_set,
                &test_set,
                &cfg.experiment.seeds,
                &grid,
                cfg.experiment.bnn,
            )?,
        ),
    };
    with_run(&cfg, "correction", &[&bytes], cfg.train.seed, |dir| {
        dir.write("auc.csv", auc_csv(&rows))?;
        dir.write("curves.csv", curves_csv(&rows))
    })
}

pub fn noise_sweep(config: &Path) -> Result<PathBuf, CliError> {
    let cfg = RunConfig::load(config)?;
    let methods = cfg.methods()?;
    let (train_set, test_set) = cfg.splits()?;
    let levels = &cfg.experiment.noise_levels;
    let rows = run_noise_robustness(&cfg.experiment(), &train_set, &test_set, levels, &methods, &cfg.experiment.seeds)?;
    with_run(&cfg, "noise-sweep", &[], cfg.train.seed, |dir| {
        dir.write("noise.csv", noise_csv(&rows))?;
        let mut summary = vec![["method", "n", "mean_miou"].map(String::from).to_vec()];
        for &n in levels {
            for &m in &methods {
                summary.push(vec![m.to_string(), n.to_string(), opt(mean_miou(&rows, m, n))]);
            }
        }
        dir.write("summary.csv", table::render(summary))
    })
}

pub fn bias_infer(config: &Path, checkpoint: &Path) -> Result<PathBuf, CliError> {
    let cfg = RunConfig::load(config)?;
    let (bytes, model, _) = load_checkpoint(checkpoint)?;
    check_model(&cfg, &model)?;
    let spec = cfg.induction()?;
    let (train_set, test_set) = cfg.splits()?;
    with_run(&cfg, "bias-infer", &[&bytes], cfg.train.seed, |dir| {
        let preds = test_set
            .iter()
            .map(|s| bias_induced_predict(&model, &s.features, &spec))
            .collect::<compseg_core::Result<Vec<_>>>()?;
        let (metrics, conf) = metrics_csv(&cfg, &preds, &test_set)?;
        dir.write("metrics.csv", metrics)?;
        dir.write("confusion.csv", conf)?;
        write_label_set(&dir.path().join("predictions"), &label_meta(&cfg, &test_set), &preds)?;
        if let Some(class) = cfg.experiment.boost_class {
            boost_sweep(&cfg, dir, &model, &spec, class, &train_set, &test_set)?;
        }
        Ok(())
    })
}

/// Chooses the diagonal boost of `class` on the training split within the
/// allowed overall-accuracy drop, then reports it on the test split.
fn boost_sweep(
    cfg: &RunConfig,
    dir: &RunDir,
    model: &SegModel,
    spec: &InductionSpec,
    class: usize,
    train_set: &[Sample],
    test_set: &[Sample],
) -> Result<(), CliError> {
    let k = cfg.dataset.scene.num_classes;
    if class >= k {
        return Err(CliError::Config(format!("boost_class {class} outside {k} classes")));
    }
    let mut boosts = vec![0.0];
    boosts.extend(cfg.experiment.boosts.iter().copied().filter(|&b| b != 0.0));
    let rows = sweep_induction(model, train_set, class, &[], 0.0, &boosts)?;
    dir.write("boost_train.csv", induction_csv(&rows))?;
    let mut out = vec![["split", "boost", "acc_class", "acc_a"].map(String::from).to_vec()];
    if let Some(best) = pick_boost(&rows, cfg.experiment.max_acc_drop) {
        for boost in [0.0, best.boost] {
            let mut s = spec.clone();
            s.matrix = compseg_core::ClassMatrix::zeros(k);
            s.matrix.set(class, class, boost);
            let (c, a) = induction_accuracy(model, test_set, &s, class)?;
            out.push(vec!["test".into(), table::sig6(boost), table::sig6(c), table::sig6(a)]);
        }
    }
    dir.write("boost_test.csv", table::render(out))
}

pub fn k_sweep(config: &Path, checkpoint: &Path) -> Result<PathBuf, CliError> {
    let cfg = RunConfig::load(config)?;
    let (bytes, model, head) = load_checkpoint(checkpoint)?;
    check_model(&cfg, &model)?;
    let (_, test_set) = cfg.splits()?;
    let classes = model.shape().classes;
    let ks = cfg.experiment.ks.clone().unwrap_or_else(|| (1..=classes).collect());
    let rows = run_k_sweep(&model, &learned_matrix(&model, &head), &test_set, &ks)?;
    with_run(&cfg, "k-sweep", &[&bytes], cfg.train.seed, |dir| dir.write("k_sweep.csv", k_sweep_csv(&rows)))
}

pub fn memorization(config: &Path) -> Result<PathBuf, CliError> {
    let cfg = RunConfig::load(config)?;
    let (train_set, test_set) = cfg.splits()?;
    let exp: Experiment = cfg.experiment();
    let rows = run_memorization(&exp, &train_set, &test_set, &cfg.experiment.seeds)?;
    with_run(&cfg, "memorization", &[], cfg.train.seed, |dir| {
        dir.write("memorization.csv", memorization_csv(&rows))
    })
}
