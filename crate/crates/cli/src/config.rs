//! Experiment configuration files (TOML).

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};
use subsep::classify::SrcConfig;
use subsep::data::SplitPolicy;
use subsep::model::{LayerSpec, LossWeights};
use subsep::optim::TrainConfig;
use subsep::subspace::BasisDim;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub name: String,
    pub trials: usize,
    pub seed: u64,
    /// Relative to the current directory.
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub split: SplitConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainSection,
    #[serde(default)]
    pub classify: ClassifyConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
}

/// Paths are relative to the directory holding the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// MNIST-style IDX pair. When a test pair is given it becomes the test
    /// set and the split only picks the training samples.
    MnistIdx {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_images: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_labels: Option<PathBuf>,
    },
    /// `<root>/<class>/<image>` tree, resized to `height x width`.
    ImageDir { root: PathBuf, height: usize, width: usize },
    /// Union of random subspaces, stored as `height x width` images.
    Synthetic {
        ambient: usize,
        dim: usize,
        classes: usize,
        per_class: usize,
        noise: f64,
        #[serde(default)]
        min_angle_deg: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        max_angle_deg: Option<f64>,
        height: usize,
        width: usize,
        data_seed: u64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case", deny_unknown_fields)]
pub enum SplitConfig {
    RandomHalf,
    PerClassCount { count: usize },
    Consecutive { count: usize },
}

impl SplitConfig {
    pub fn policy(self) -> SplitPolicy {
        match self {
            SplitConfig::RandomHalf => SplitPolicy::RandomHalf,
            SplitConfig::PerClassCount { count } => SplitPolicy::PerClassCount(count),
            SplitConfig::Consecutive { count } => SplitPolicy::Consecutive(count),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerConfig {
    pub channels: usize,
    pub kernel: usize,
    #[serde(default)]
    pub relu: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: Vec<LayerConfig>,
}

impl ModelConfig {
    pub fn arch(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| LayerSpec::new(l.channels, l.kernel, l.relu)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub iterations: usize,
    pub learning_rate: f64,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    #[serde(default)]
    pub early_stop: bool,
}

fn default_log_every() -> usize {
    50
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifyConfig {
    pub k: usize,
    pub gamma: f64,
    pub src_max_iter: usize,
    pub src_tol: f64,
}

impl Default for ClassifyConfig {
    fn default() -> Self {
        let src = SrcConfig::default();
        ClassifyConfig { k: 1, gamma: src.gamma, src_max_iter: src.max_iter, src_tol: src.tol }
    }
}

impl ClassifyConfig {
    pub fn src(&self) -> SrcConfig {
        SrcConfig { gamma: self.gamma, max_iter: self.src_max_iter, tol: self.src_tol }
    }
}

/// Subspace-angle analysis. `subspace_dim` fixes the basis size; otherwise
/// the smallest basis holding `energy` of the squared singular values is used.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub subspace_dim: Option<usize>,
    pub energy: f64,
    /// Zero-based class ids (in sorted class order); all classes when empty.
    pub angle_classes: Vec<usize>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig { subspace_dim: None, energy: 0.95, angle_classes: Vec::new() }
    }
}

impl AnalysisConfig {
    pub fn basis_dim(&self) -> BasisDim {
        match self.subspace_dim {
            Some(p) => BasisDim::Fixed(p),
            None => BasisDim::Energy(self.energy),
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).context("malformed config")?;
        ensure!(
            cfg.schema_version == SCHEMA_VERSION,
            "unsupported schema_version {} (expected {SCHEMA_VERSION})",
            cfg.schema_version
        );
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).context("cannot serialize config")
    }

    /// Reads a config and resolves dataset paths against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
        let mut cfg = Self::parse(&text).with_context(|| format!("in {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.dataset.resolve_paths(base);
        Ok(cfg)
    }

    pub fn loss_weights(&self) -> Result<LossWeights> {
        Ok(LossWeights::new(self.loss.lambda1, self.loss.lambda2, self.loss.lambda3)?)
    }

    pub fn train_config(&self, seed: u64) -> Result<TrainConfig> {
        Ok(TrainConfig {
            iterations: self.train.iterations,
            learning_rate: self.train.learning_rate,
            weights: self.loss_weights()?,
            log_every: self.train.log_every,
            seed,
            early_stop: self.train.early_stop,
        })
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.trials >= 1, "trials must be at least 1");
        ensure!(!self.model.layers.is_empty(), "model needs at least one layer");
        for (i, l) in self.model.layers.iter().enumerate() {
            ensure!(l.channels > 0, "layer {i}: channels must be positive");
            ensure!(l.kernel % 2 == 1, "layer {i}: kernel {} is not odd", l.kernel);
        }
        self.loss_weights()?;
        self.train_config(0)?.validate()?;
        ensure!(self.classify.k >= 1, "classify.k must be at least 1");
        ensure!(self.classify.gamma >= 0.0, "classify.gamma must be non-negative");
        ensure!(self.analysis.energy > 0.0 && self.analysis.energy <= 1.0, "analysis.energy must be in (0, 1]");
        self.dataset.check_paths()
    }
}

impl DatasetConfig {
    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match self {
            DatasetConfig::MnistIdx { images, labels, test_images, test_labels } => {
                fix(images);
                fix(labels);
                test_images.iter_mut().for_each(fix);
                test_labels.iter_mut().for_each(fix);
            }
            DatasetConfig::ImageDir { root, .. } => fix(root),
            DatasetConfig::Synthetic { .. } => {}
        }
    }

    fn check_paths(&self) -> Result<()> {
        let exists = |p: &Path| -> Result<()> {
            if !p.exists() {
                bail!("dataset path {} does not exist", p.display());
            }
            Ok(())
        };
        match self {
            DatasetConfig::MnistIdx { images, labels, test_images, test_labels } => {
                exists(images)?;
                exists(labels)?;
                ensure!(
                    test_images.is_some() == test_labels.is_some(),
                    "test_images and test_labels must be given together"
                );
                test_images.iter().chain(test_labels).try_for_each(|p| exists(p))
            }
            DatasetConfig::ImageDir { root, .. } => exists(root),
            DatasetConfig::Synthetic { .. } => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
schema_version = 1
name = "toy"
trials = 2
seed = 7
output_dir = "out/toy"

[dataset]
kind = "synthetic"
ambient = 16
dim = 2
classes = 2
per_class = 10
noise = 0.01
height = 4
width = 4
data_seed = 1

[split]
policy = "random_half"

[model]
layers = [{ channels = 3, kernel = 3 }, { channels = 2, kernel = 3, relu = true }]

[loss]
lambda1 = 1.0
lambda2 = 0.1
lambda3 = 10.0

[train]
iterations = 5
learning_rate = 0.001
"#;

    #[test]
    fn parses_with_defaults() {
        let cfg = ExperimentConfig::parse(SAMPLE).unwrap();
        assert_eq!(cfg.classify.k, 1);
        assert_eq!(cfg.train.log_every, 50);
        assert_eq!(cfg.analysis.basis_dim(), BasisDim::Energy(0.95));
        assert_eq!(cfg.model.arch()[1], LayerSpec::new(2, 3, true));
        cfg.validate().unwrap();
    }

    #[test]
    fn round_trips() {
        let cfg = ExperimentConfig::parse(SAMPLE).unwrap();
        let again = ExperimentConfig::parse(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(ExperimentConfig::parse(&SAMPLE.replace("schema_version = 1", "schema_version = 9")).is_err());
        assert!(ExperimentConfig::parse(&SAMPLE.replace("seed = 7", "seed = 7\nbogus = 1")).is_err());
        let cfg = ExperimentConfig::parse(&SAMPLE.replace("trials = 2", "trials = 0")).unwrap();
        assert!(cfg.validate().is_err());
        let cfg = ExperimentConfig::parse(&SAMPLE.replace("kernel = 3 },", "kernel = 4 },")).unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn missing_dataset_paths_fail_validation() {
        let mut cfg = ExperimentConfig::parse(SAMPLE).unwrap();
        cfg.dataset = DatasetConfig::ImageDir { root: "/nonexistent/coil".into(), height: 32, width: 32 };
        assert!(cfg.validate().unwrap_err().to_string().contains("does not exist"));
    }
}
