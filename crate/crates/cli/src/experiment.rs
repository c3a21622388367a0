//! Trial runner: split, train, encode, classify and analyse.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use subsep::classify::{accuracy, knn_classify, predictions_csv, src_classify_batch, ClassifierReport};
use subsep::data::{load_image_directory, load_mnist_idx, split, synthesize_union_of_subspaces, LabeledDataset, SynthSpec};
use subsep::model::{load_checkpoint, save_checkpoint, FeatureMatrix, ModelParams};
use subsep::optim::{fit, LossHistory};
use subsep::subspace::{smallest_angle_matrix_for, AngleMatrix, BasisDim};

use crate::config::{DatasetConfig, ExperimentConfig};

pub const PIXEL_KNN: &str = "pixel k-NN";
pub const FEATURE_KNN: &str = "proposed + k-NN";
pub const FEATURE_SRC: &str = "proposed + SR";
pub const METHODS: [&str; 3] = [PIXEL_KNN, FEATURE_KNN, FEATURE_SRC];

/// Seeds the split of trial `trial`.
pub fn split_seed(base: u64, trial: usize) -> u64 {
    base.wrapping_add(trial as u64)
}

/// Seeds the weight initialisation of trial `trial`.
pub fn init_seed(base: u64, trial: usize) -> u64 {
    base.wrapping_add(1_000_003).wrapping_add(trial as u64)
}

/// Samples available to the splitter plus an optional fixed test set.
#[derive(Clone, Debug)]
pub struct ExperimentData {
    pub pool: LabeledDataset,
    pub fixed_test: Option<LabeledDataset>,
}

pub fn load_data(cfg: &DatasetConfig) -> Result<ExperimentData> {
    match cfg {
        DatasetConfig::MnistIdx { images, labels, test_images, test_labels } => {
            let pool = load_mnist_idx(images, labels)?;
            let fixed_test = match (test_images, test_labels) {
                (Some(i), Some(l)) => Some(load_mnist_idx(i, l)?),
                _ => None,
            };
            Ok(ExperimentData { pool, fixed_test })
        }
        DatasetConfig::ImageDir { root, height, width } => {
            Ok(ExperimentData { pool: load_image_directory(root, (*height, *width))?, fixed_test: None })
        }
        DatasetConfig::Synthetic {
            ambient,
            dim,
            classes,
            per_class,
            noise,
            min_angle_deg,
            max_angle_deg,
            height,
            width,
            data_seed,
        } => {
            let spec = SynthSpec {
                noise: *noise,
                min_angle_deg: *min_angle_deg,
                max_angle_deg: *max_angle_deg,
                shape: Some((*height, *width)),
                seed: *data_seed,
                ..SynthSpec::new(*ambient, *dim, *classes, *per_class)
            };
            Ok(ExperimentData { pool: synthesize_union_of_subspaces(&spec)?.dataset, fixed_test: None })
        }
    }
}

/// Train/test sets of one trial. Both are grouped by class.
pub fn trial_split(cfg: &ExperimentConfig, data: &ExperimentData, trial: usize) -> Result<(LabeledDataset, LabeledDataset)> {
    let (train, rest) = split(&data.pool, cfg.split.policy(), split_seed(cfg.seed, trial))?;
    let test = match &data.fixed_test {
        Some(t) => t.grouped(),
        None => rest,
    };
    ensure!(!test.is_empty(), "empty test set");
    Ok((train, test))
}

/// Everything measured in one trial.
#[derive(Clone, Debug)]
pub struct TrialOutcome {
    pub trial: usize,
    /// Accuracy per entry of [`METHODS`].
    pub accuracies: Vec<f64>,
    pub predictions: Vec<Vec<usize>>,
    pub truth: Vec<usize>,
    pub pixel_angles: AngleMatrix,
    pub feature_angles: AngleMatrix,
    pub history: LossHistory,
    pub model: ModelParams,
}

fn angle_classes(cfg: &ExperimentConfig, num_classes: usize) -> Result<Vec<usize>> {
    if cfg.analysis.angle_classes.is_empty() {
        return Ok((0..num_classes).collect());
    }
    if let Some(&bad) = cfg.analysis.angle_classes.iter().find(|&&c| c >= num_classes) {
        bail!("angle class {bad} out of range ({num_classes} classes)");
    }
    Ok(cfg.analysis.angle_classes.clone())
}

/// Pixel-space and feature-space smallest-angle matrices over `dataset`.
pub fn angles_report(
    model: &ModelParams,
    dataset: &LabeledDataset,
    classes: &[usize],
    dim: BasisDim,
) -> Result<(AngleMatrix, AngleMatrix)> {
    let pixel = smallest_angle_matrix_for(&dataset.pixel_features(), classes, dim).context("pixel-space angles")?;
    let features = model.encode(&dataset.images_tensor(), &dataset.labels)?;
    let feature = smallest_angle_matrix_for(&features, classes, dim).context("feature-space angles")?;
    Ok((pixel, feature))
}

/// Long-format CSV pairing the two angle tables entry by entry.
pub fn paired_angles_csv(pixel: &AngleMatrix, feature: &AngleMatrix, names: &[String]) -> String {
    let mut s = String::from("class_a,class_b,pixel_deg,feature_deg\n");
    for i in 0..pixel.size() {
        for j in i + 1..pixel.size() {
            let _ = writeln!(s, "{},{},{:.4},{:.4}", names[i], names[j], pixel.get(i, j), feature.get(i, j));
        }
    }
    s
}

/// Classifies `test` against `train` in pixel space and in the model's
/// feature space. Returns predictions in [`METHODS`] order.
pub fn classify_all(
    cfg: &ExperimentConfig,
    model: &ModelParams,
    train: &LabeledDataset,
    test: &LabeledDataset,
) -> Result<Vec<Vec<usize>>> {
    let k = cfg.classify.k;
    let pixel = knn_classify(&train.pixel_features(), &test.pixel_features(), k)?;
    let ftr: FeatureMatrix = model.encode(&train.images_tensor(), &train.labels)?;
    let fte = model.encode(&test.images_tensor(), &test.labels)?;
    let knn = knn_classify(&ftr, &fte, k)?;
    let src = src_classify_batch(&ftr, &fte, &cfg.classify.src())?.into_iter().map(|r| r.label).collect();
    Ok(vec![pixel, knn, src])
}

pub fn run_trial(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    trial: usize,
    log: &mut dyn FnMut(&str),
) -> Result<TrialOutcome> {
    let tag = |stage: &str| format!("trial {trial}: {stage}");
    let (train, test) = trial_split(cfg, data, trial).with_context(|| tag("split"))?;
    log(&format!("trial {trial}: {} train / {} test samples", train.len(), test.len()));

    let arch = cfg.model.arch();
    let tc = cfg.train_config(init_seed(cfg.seed, trial)).with_context(|| tag("train"))?;
    let (model, history) = fit(&arch, &train.images_tensor(), &train.labels, &tc, |r| {
        let t = &r.terms;
        log(&format!(
            "trial {trial}: iter {:>5} total {:.6e} recon {:.4e} selfexpr {:.4e} l1 {:.4e} separation {:.4e}",
            r.iter, t.total, t.recon, t.selfexpr, t.l1, t.separation
        ))
    })
    .with_context(|| tag("train"))?;

    let predictions = classify_all(cfg, &model, &train, &test).with_context(|| tag("classify"))?;
    let accuracies: Vec<f64> = predictions.iter().map(|p| accuracy(p, &test.labels)).collect();
    for (m, a) in METHODS.iter().zip(&accuracies) {
        log(&format!("trial {trial}: {m:<16} {a:.2}%"));
    }

    let classes = angle_classes(cfg, train.num_classes()).with_context(|| tag("angles"))?;
    let (pixel_angles, feature_angles) =
        angles_report(&model, &train, &classes, cfg.analysis.basis_dim()).with_context(|| tag("angles"))?;

    Ok(TrialOutcome {
        trial,
        accuracies,
        predictions,
        truth: test.labels.clone(),
        pixel_angles,
        feature_angles,
        history,
        model,
    })
}

/// Mean and spread of every method over all trials.
#[derive(Clone, Debug)]
pub struct ExperimentReport {
    pub name: String,
    pub methods: Vec<ClassifierReport>,
    pub trials: Vec<TrialOutcome>,
}

impl ExperimentReport {
    pub fn method(&self, name: &str) -> Option<&ClassifierReport> {
        self.methods.iter().find(|m| m.method == name)
    }

    /// `method,trial_0,...,mean,std` with two decimals.
    pub fn to_csv(&self) -> String {
        let n = self.trials.len();
        let mut s = String::from("method");
        for t in 0..n {
            let _ = write!(s, ",trial_{t}");
        }
        s.push_str(",mean,std\n");
        for m in &self.methods {
            s.push_str(&m.method);
            for a in &m.accuracies {
                let _ = write!(s, ",{a:.2}");
            }
            let _ = writeln!(s, ",{:.2},{:.2}", m.mean, m.std);
        }
        s
    }

    /// Console table in `mean ± std` form.
    pub fn to_table(&self) -> String {
        let mut s = format!("{} ({} trials)\n", self.name, self.trials.len());
        for m in &self.methods {
            let _ = writeln!(s, "  {:<16} {}", m.method, m.summary());
        }
        s
    }
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("cannot write {}", path.display()))
}

/// Writes the per-trial artifacts under `dir/trial_<t>/`.
pub fn write_trial(dir: &Path, outcome: &TrialOutcome, class_names: &[String]) -> Result<()> {
    let tdir = dir.join(format!("trial_{}", outcome.trial));
    fs::create_dir_all(&tdir).with_context(|| format!("cannot create {}", tdir.display()))?;
    outcome.history.write_csv(tdir.join("loss.csv"))?;
    save_checkpoint(&outcome.model, tdir.join("model.ckpt"))?;
    let names: Vec<String> = outcome.pixel_angles.classes.iter().map(|&c| class_names[c].clone()).collect();
    write(&tdir.join("angles_pixel.csv"), &outcome.pixel_angles.to_csv(Some(&names)))?;
    write(&tdir.join("angles_feature.csv"), &outcome.feature_angles.to_csv(Some(&names)))?;
    write(&tdir.join("angles_paired.csv"), &paired_angles_csv(&outcome.pixel_angles, &outcome.feature_angles, &names))?;
    for (m, p) in METHODS.iter().zip(&outcome.predictions) {
        let file = format!("predictions_{}.csv", m.replace(" + ", "_").replace([' ', '-'], "_").to_lowercase());
        write(&tdir.join(file), &predictions_csv(&outcome.truth, p))?;
    }
    Ok(())
}

/// Runs every trial of `cfg` and writes reports under `out`.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path, log: &mut dyn FnMut(&str)) -> Result<ExperimentReport> {
    cfg.validate().context("config")?;
    let data = load_data(&cfg.dataset).context("data")?;
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    write(&out.join("config.toml"), &cfg.to_toml()?)?;

    let mut trials = Vec::with_capacity(cfg.trials);
    for t in 0..cfg.trials {
        let outcome = run_trial(cfg, &data, t, log)?;
        write_trial(out, &outcome, &data.pool.class_names).with_context(|| format!("trial {t}: write"))?;
        trials.push(outcome);
    }
    let methods = METHODS
        .iter()
        .enumerate()
        .map(|(i, m)| ClassifierReport::from_trials(*m, trials.iter().map(|t| t.accuracies[i]).collect()))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let report = ExperimentReport { name: cfg.name.clone(), methods, trials };
    write(&out.join("report.csv"), &report.to_csv())?;
    write(&out.join("report.txt"), &report.to_table())?;
    Ok(report)
}

/// Accuracies of a saved model on the split of `trial`.
pub fn evaluate_checkpoint(cfg: &ExperimentConfig, checkpoint: &Path, trial: usize) -> Result<Vec<(String, f64)>> {
    let data = load_data(&cfg.dataset).context("data")?;
    let (train, test) = trial_split(cfg, &data, trial).context("split")?;
    let model = load_checkpoint(checkpoint).context("checkpoint")?;
    ensure!(
        model.class_sizes() == train.class_sizes().as_slice(),
        "checkpoint was trained on a different split (class sizes differ)"
    );
    let preds = classify_all(cfg, &model, &train, &test).context("classify")?;
    Ok(METHODS.iter().zip(preds).map(|(m, p)| (m.to_string(), accuracy(&p, &test.labels))).collect())
}

/// `|G|` restricted to the diagonal block of `class`, as an `n x n` CSV
/// with a header row of within-class sample indices.
pub fn csse_heatmap_csv(model: &ModelParams, class: usize) -> Result<String> {
    let layout = model.layout();
    ensure!(class < layout.num_classes(), "class {class} not in model ({} classes)", layout.num_classes());
    let r = layout.range(class);
    let n = model.num_samples();
    let g = model.csse.data();
    let mut s = (0..r.len()).map(|j| j.to_string()).collect::<Vec<_>>().join(",");
    s.push('\n');
    for a in r.clone() {
        let row: Vec<String> = r.clone().map(|b| format!("{:e}", g[a * n + b].abs())).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    Ok(s)
}

pub fn export_csse_heatmap(checkpoint: &Path, class: usize, out: &Path) -> Result<PathBuf> {
    let model = load_checkpoint(checkpoint).context("checkpoint")?;
    write(out, &csse_heatmap_csv(&model, class)?)?;
    Ok(out.to_path_buf())
}

/// A small synthetic experiment that exercises every stage in seconds.
pub fn selftest_config() -> ExperimentConfig {
    use crate::config::*;
    ExperimentConfig {
        schema_version: SCHEMA_VERSION,
        name: "selftest".into(),
        trials: 1,
        seed: 1,
        output_dir: "out/selftest".into(),
        dataset: DatasetConfig::Synthetic {
            ambient: 64,
            dim: 2,
            classes: 3,
            per_class: 12,
            noise: 0.01,
            min_angle_deg: 20.0,
            max_angle_deg: None,
            height: 8,
            width: 8,
            data_seed: 5,
        },
        split: SplitConfig::RandomHalf,
        model: ModelConfig {
            layers: vec![LayerConfig { channels: 4, kernel: 3, relu: false }, LayerConfig { channels: 3, kernel: 3, relu: false }],
        },
        loss: LossConfig { lambda1: 1.0, lambda2: 0.1, lambda3: 1.0 },
        train: TrainSection { iterations: 40, learning_rate: 1e-3, log_every: 20, early_stop: false },
        classify: ClassifyConfig::default(),
        analysis: AnalysisConfig { subspace_dim: Some(2), ..AnalysisConfig::default() },
    }
}

/// Runs [`selftest_config`] and checks the outputs are complete and finite.
pub fn selftest(out: &Path, log: &mut dyn FnMut(&str)) -> Result<ExperimentReport> {
    let report = run_experiment(&selftest_config(), out, log)?;
    for m in &report.methods {
        ensure!(m.mean.is_finite() && (0.0..=100.0).contains(&m.mean), "{}: bad accuracy {}", m.method, m.mean);
    }
    let t = &report.trials[0];
    let (first, last) = (t.history.first(), t.history.last());
    ensure!(matches!((first, last), (Some(a), Some(b)) if b.terms.total.is_finite() && b.terms.total < a.terms.total), "loss did not decrease");
    ensure!(t.model.csse_is_structured(), "coefficients left their class blocks");
    let weights = selftest_config().loss_weights()?;
    for r in &t.history.records {
        let want = r.terms.weighted_total(&weights);
        ensure!((r.terms.total - want).abs() <= 1e-12 * want.abs().max(1.0), "iter {}: total is not the weighted sum", r.iter);
    }
    for f in ["report.csv", "report.txt", "trial_0/loss.csv", "trial_0/model.ckpt", "trial_0/angles_feature.csv"] {
        ensure!(out.join(f).is_file(), "missing {f}");
    }
    Ok(report)
}
