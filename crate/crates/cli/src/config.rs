use std::fs;
use std::path::{Path, PathBuf};

use compseg_core::evalkit::experiments::Experiment;
use compseg_core::inference::{parse_triple, BetaSource, InductionSpec, Relaxation};
use compseg_core::synthgrid::{default_class_names, generate_split, read_dataset, Sample};
use compseg_core::uncertainty::{DEFAULT_PHI, DEFAULT_TOP_K};
use compseg_core::{Method, SceneConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub dataset: DatasetSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub method: MethodSection,
    #[serde(default)]
    pub experiment: ExperimentSection,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    /// Directory written by `generate` (with `train/` and `test/`). When
    /// absent the splits are generated in memory from `scene`.
    #[serde(default)]
    pub path: Option<PathBuf>,
    pub train_images: usize,
    pub test_images: usize,
    #[serde(default)]
    pub class_names: Option<Vec<String>>,
    pub scene: SceneConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MethodSection {
    pub name: String,
    pub hidden: usize,
}

impl Default for MethodSection {
    fn default() -> Self {
        Self {
            name: "ours".into(),
            hidden: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub seeds: Vec<u64>,
    pub noise_levels: Vec<usize>,
    pub methods: Vec<String>,
    /// Label-noise radius applied to the training split by `correction` and
    /// `memorization`.
    pub label_noise: usize,
    pub r_grid: Option<Vec<f64>>,
    pub bnn: bool,
    pub top_k: usize,
    pub phi: f64,
    pub ks: Option<Vec<usize>>,
    /// Manual bias entries as `"i,j,value"`.
    pub induction: Vec<String>,
    pub relaxation: String,
    pub beta_source: String,
    /// Class whose diagonal boost is swept by `bias-infer`.
    pub boost_class: Option<usize>,
    pub boosts: Vec<f64>,
    pub max_acc_drop: f64,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            noise_levels: vec![0, 2, 4],
            methods: vec!["baseline".into(), "ours".into(), "ours_sym".into()],
            label_noise: 0,
            r_grid: None,
            bnn: true,
            top_k: DEFAULT_TOP_K,
            phi: DEFAULT_PHI,
            ks: None,
            induction: Vec::new(),
            relaxation: "soft".into(),
            beta_source: "branch".into(),
            boost_class: None,
            boosts: vec![0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 30.0],
            max_acc_drop: 0.01,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.dataset.scene.validate()?;
        cfg.train.validate()?;
        cfg.method()?;
        if cfg.method.hidden == 0 {
            return Err(CliError::Config("method.hidden must be at least 1".into()));
        }
        Ok(cfg)
    }

    /// Canonical serialization, the input of the run-directory hash.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn method(&self) -> Result<Method, CliError> {
        Ok(self.method.name.parse()?)
    }

    pub fn methods(&self) -> Result<Vec<Method>, CliError> {
        self.experiment
            .methods
            .iter()
            .map(|m| Ok(m.parse()?))
            .collect()
    }

    pub fn class_names(&self) -> Vec<String> {
        self.dataset
            .class_names
            .clone()
            .unwrap_or_else(|| default_class_names(self.dataset.scene.num_classes))
    }

    pub fn experiment(&self) -> Experiment {
        Experiment {
            scene: self.dataset.scene.clone(),
            train_images: self.dataset.train_images,
            test_images: self.dataset.test_images,
            hidden: self.method.hidden,
            train: self.train.clone(),
            label_noise: self.experiment.label_noise,
        }
    }

    /// Training and test images, from `dataset.path` when set.
    pub fn splits(&self) -> Result<(Vec<Sample>, Vec<Sample>), CliError> {
        let Some(root) = &self.dataset.path else {
            return Ok(self.experiment().splits()?);
        };
        let scene = &self.dataset.scene;
        let mut out = Vec::new();
        for split in ["train", "test"] {
            let d = read_dataset(&root.join(split))?;
            if d.meta.num_classes != scene.num_classes || d.meta.feature_dim != scene.feature_dim {
                return Err(CliError::Data(format!(
                    "{} holds {} classes and {} features; the config declares {} and {}",
                    root.join(split).display(),
                    d.meta.num_classes,
                    d.meta.feature_dim,
                    scene.num_classes,
                    scene.feature_dim
                )));
            }
            out.push(d.samples);
        }
        let test = out.pop().expect("two splits");
        Ok((out.pop().expect("two splits"), test))
    }

    pub fn generate(&self) -> Result<(Vec<Sample>, Vec<Sample>), CliError> {
        let s = &self.dataset.scene;
        Ok((
            generate_split(s, 0, self.dataset.train_images)?,
            generate_split(s, self.dataset.train_images, self.dataset.test_images)?,
        ))
    }

    pub fn induction(&self) -> Result<InductionSpec, CliError> {
        let triples = self
            .experiment
            .induction
            .iter()
            .map(|t| parse_triple(t))
            .collect::<compseg_core::Result<Vec<_>>>()?;
        Ok(InductionSpec::from_triples(
            self.dataset.scene.num_classes,
            &triples,
            self.relaxation()?,
            self.beta_source()?,
        )?)
    }

    fn relaxation(&self) -> Result<Relaxation, CliError> {
        match self.experiment.relaxation.as_str() {
            "soft" => Ok(Relaxation::Soft),
            "hard" => Ok(Relaxation::Hard),
            other => Err(CliError::Config(format!("relaxation must be soft or hard, got {other:?}"))),
        }
    }

    fn beta_source(&self) -> Result<BetaSource, CliError> {
        match self.experiment.beta_source.as_str() {
            "branch" => Ok(BetaSource::Branch),
            "one" => Ok(BetaSource::One),
            other => Err(CliError::Config(format!("beta_source must be branch or one, got {other:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quickstart_config_parses() {
        let cfg = RunConfig::parse(include_str!("../../../configs/quickstart.toml")).unwrap();
        assert_eq!(cfg.method().unwrap(), Method::Ours);
        assert_eq!(cfg.methods().unwrap().len(), 3);
        assert_eq!(cfg.induction().unwrap().matrix.get(0, 0), 1.0);
        assert_eq!(cfg.class_names()[1], "sidewalk");
        assert_eq!(RunConfig::parse(&cfg.canonical()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_and_bad_options_are_rejected() {
        let base = include_str!("../../../configs/quickstart.toml");
        assert!(RunConfig::parse(&format!("typo = 1\n{base}")).is_err());
        assert!(RunConfig::parse(&base.replace("\"ours\"\nhidden", "\"nope\"\nhidden")).is_err());
        let mut cfg = RunConfig::parse(base).unwrap();
        cfg.experiment.relaxation = "fuzzy".into();
        assert!(cfg.induction().is_err());
    }
}
