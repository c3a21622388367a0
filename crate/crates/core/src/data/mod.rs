//! Labeled image datasets: loaders, splits and synthetic generators.

mod idx;
mod images;
mod split;
mod synth;

pub use idx::{encode_idx_images, encode_idx_labels, load_mnist_idx, parse_idx_images, parse_idx_labels};
pub use images::{bilinear_resize, load_image_directory, natural_cmp};
pub use split::{split, SplitPolicy};
pub use synth::{synthesize_union_of_subspaces, SynthSpec, SyntheticData};

use thiserror::Error;

use crate::model::FeatureMatrix;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("IDX parse error: {0}")]
    Idx(String),
    #[error("cannot decode image {path}: {reason}")]
    Image { path: String, reason: String },
    #[error("class directory {0} contains no images")]
    EmptyClass(String),
    #[error("no class directories under {0}")]
    NoClasses(String),
    #[error("split infeasible: {0}")]
    InfeasibleSplit(String),
    #[error("generation failed: {0}")]
    Generation(String),
    #[error("inconsistent dataset: {0}")]
    Inconsistent(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Grayscale images of one size with integer class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub name: String,
    pub height: usize,
    pub width: usize,
    /// `N x H x W`, row-major.
    pub pixels: Vec<f64>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    /// Source identifier per sample (file name or index).
    pub sample_names: Vec<String>,
}

impl LabeledDataset {
    pub fn new(
        name: impl Into<String>,
        (height, width): (usize, usize),
        pixels: Vec<f64>,
        labels: Vec<usize>,
        class_names: Vec<String>,
    ) -> Result<Self> {
        let n = labels.len();
        if pixels.len() != n * height * width {
            return Err(DataError::Inconsistent(format!("{} pixels for {n} images of {height}x{width}", pixels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(DataError::Inconsistent(format!("label {bad} with {} classes", class_names.len())));
        }
        let sample_names = (0..n).map(|i| i.to_string()).collect();
        Ok(LabeledDataset { name: name.into(), height, width, pixels, labels, class_names, sample_names })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn pixels_per_image(&self) -> usize {
        self.height * self.width
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let p = self.pixels_per_image();
        &self.pixels[i * p..(i + 1) * p]
    }

    pub fn class_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.num_classes()];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }

    /// Sample indices of `class` in dataset order.
    pub fn class_indices(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }

    pub fn is_grouped(&self) -> bool {
        self.labels.windows(2).all(|w| w[0] <= w[1])
    }

    /// New dataset with the given samples, in the given order.
    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        let mut pixels = Vec::with_capacity(indices.len() * self.pixels_per_image());
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
        }
        LabeledDataset {
            name: self.name.clone(),
            height: self.height,
            width: self.width,
            pixels,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
            sample_names: indices.iter().map(|&i| self.sample_names[i].clone()).collect(),
        }
    }

    /// Stable sort by label, keeping within-class order.
    pub fn grouped(&self) -> LabeledDataset {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by_key(|&i| self.labels[i]);
        self.subset(&order)
    }

    /// Keeps only the listed classes, relabelled `0..classes.len()` in the
    /// given order.
    pub fn select_classes(&self, classes: &[usize]) -> LabeledDataset {
        let mut idx = Vec::new();
        for &c in classes {
            idx.extend(self.class_indices(c));
        }
        let mut out = self.subset(&idx);
        out.labels = out.labels.iter().map(|l| classes.iter().position(|c| c == l).unwrap()).collect();
        out.class_names = classes.iter().map(|&c| self.class_names[c].clone()).collect();
        out
    }

    /// `N x 1 x H x W` tensor for the model.
    pub fn images_tensor(&self) -> Tensor {
        Tensor::new(vec![self.len(), 1, self.height, self.width], self.pixels.clone()).expect("consistent dataset")
    }

    /// Raw pixels as feature columns.
    pub fn pixel_features(&self) -> FeatureMatrix {
        FeatureMatrix::new(self.pixels_per_image(), self.pixels.clone(), self.labels.clone()).expect("consistent dataset")
    }
}
