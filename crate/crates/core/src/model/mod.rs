//! Encoder, class-specific self-expressive (CSSE) layer and decoder.
//!
//! Features are stored sample-major: an `N x D` row-major buffer whose row
//! `j` is the feature column of sample `j`. With that layout the CSSE product
//! `X * G` becomes `G^T * F` and the cross-class Gram `X^T X` becomes
//! `F * F^T`.

mod checkpoint;
mod layout;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use layout::ClassLayout;

use std::ops::Range;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::{conv_output_len, Graph, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("class {class} has {count} sample(s); self-expression needs at least 2")]
    TooFewSamples { class: usize, count: usize },
    #[error("labels must be grouped contiguously in ascending class order 0..c")]
    UnsortedLabels,
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("negative loss weight {0}")]
    NegativeWeight(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// One encoder convolution; the decoder mirrors it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub channels: usize,
    pub kernel: usize,
    /// ReLU after this encoder layer and after its mirrored decoder layer.
    pub relu: bool,
}

impl LayerSpec {
    pub fn new(channels: usize, kernel: usize, relu: bool) -> Self {
        LayerSpec { channels, kernel, relu }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl LossWeights {
    pub fn new(lambda1: f64, lambda2: f64, lambda3: f64) -> Result<Self> {
        for l in [lambda1, lambda2, lambda3] {
            if !(l >= 0.0) {
                return Err(ModelError::NegativeWeight(l));
            }
        }
        Ok(LossWeights { lambda1, lambda2, lambda3 })
    }

    pub fn zero() -> Self {
        LossWeights { lambda1: 0.0, lambda2: 0.0, lambda3: 0.0 }
    }
}

/// The four loss terms and their weighted total.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms {
    pub recon: f64,
    pub selfexpr: f64,
    pub l1: f64,
    pub separation: f64,
    pub total: f64,
}

impl LossTerms {
    /// Weighted sum, evaluated in the same order as the training graph.
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        self.recon + w.lambda1 * self.selfexpr + w.lambda2 * self.l1 + w.lambda3 * self.separation
    }
}

/// Feature vectors of `N` samples, each of length `dim`, with labels.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    dim: usize,
    data: Vec<f64>,
    labels: Vec<usize>,
}

impl FeatureMatrix {
    pub fn new(dim: usize, data: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if dim == 0 || data.len() != dim * labels.len() {
            return Err(ModelError::Shape(format!(
                "{} values for {} samples of dimension {dim}",
                data.len(),
                labels.len()
            )));
        }
        Ok(FeatureMatrix { dim, data, labels })
    }

    /// Builds from explicit feature columns.
    pub fn from_columns(columns: &[Vec<f64>], labels: Vec<usize>) -> Result<Self> {
        let dim = columns.first().map_or(0, Vec::len);
        if columns.iter().any(|c| c.len() != dim) {
            return Err(ModelError::Shape("ragged feature columns".into()));
        }
        Self::new(dim, columns.concat(), labels)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn column(&self, j: usize) -> &[f64] {
        &self.data[j * self.dim..(j + 1) * self.dim]
    }

    pub fn columns(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.dim)
    }

    /// Sample-major buffer (`N x dim`, row `j` is column `j`).
    pub fn as_sample_major(&self) -> &[f64] {
        &self.data
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    /// Indices of the columns belonging to `class`.
    pub fn class_indices(&self, class: usize) -> Vec<usize> {
        (0..self.labels.len()).filter(|&j| self.labels[j] == class).collect()
    }

    pub fn layout(&self) -> Option<ClassLayout> {
        ClassLayout::from_sorted_labels(&self.labels)
    }

    pub fn scaled(&self, factor: f64) -> FeatureMatrix {
        FeatureMatrix { dim: self.dim, data: self.data.iter().map(|v| v * factor).collect(), labels: self.labels.clone() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    /// `C_out x C_in x k x k` for encoder layers; decoder layers store the
    /// weight of the forward conv they invert.
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Trainable parameters plus the structure they were built for.
#[derive(Clone, Debug)]
pub struct ModelParams {
    arch: Vec<LayerSpec>,
    input_shape: (usize, usize),
    layout: ClassLayout,
    pub encoder: Vec<ConvLayer>,
    /// `N x N` self-expressive coefficients.
    pub csse: Tensor,
    /// In application order: the mirror of the last encoder layer first.
    pub decoder: Vec<ConvLayer>,
    mask: Arc<[f64]>,
    blocks: Arc<[Range<usize>]>,
}

impl PartialEq for ModelParams {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch
            && self.input_shape == other.input_shape
            && self.layout == other.layout
            && self.encoder == other.encoder
            && self.csse == other.csse
            && self.decoder == other.decoder
    }
}

/// Spatial extent after each encoder layer, starting with the input.
pub fn spatial_sizes(num_layers: usize, input_shape: (usize, usize)) -> Vec<(usize, usize)> {
    let mut sizes = vec![input_shape];
    for _ in 0..num_layers {
        let (h, w) = *sizes.last().unwrap();
        sizes.push((conv_output_len(h), conv_output_len(w)));
    }
    sizes
}

/// Encoder output length for an architecture and input size.
pub fn feature_dim(arch: &[LayerSpec], input_shape: (usize, usize)) -> usize {
    let (h, w) = *spatial_sizes(arch.len(), input_shape).last().unwrap();
    arch.last().map_or(h * w, |l| l.channels * h * w)
}

/// `(conv weights, CSSE weights)`. Conv weights count the encoder and the
/// mirrored decoder, biases excluded.
pub fn count_parameters(arch: &[LayerSpec], class_sizes: &[usize]) -> (usize, usize) {
    let mut prev = 1;
    let mut encoder = 0;
    for l in arch {
        encoder += l.kernel * l.kernel * l.channels * prev;
        prev = l.channels;
    }
    let csse = class_sizes.iter().map(|&n| n * n - n).sum();
    (2 * encoder, csse)
}

fn validate_arch(arch: &[LayerSpec], input_shape: (usize, usize)) -> Result<()> {
    if arch.is_empty() {
        return Err(ModelError::Architecture("at least one layer required".into()));
    }
    if input_shape.0 == 0 || input_shape.1 == 0 {
        return Err(ModelError::Architecture(format!("input shape {input_shape:?}")));
    }
    for (j, l) in arch.iter().enumerate() {
        if l.channels == 0 || l.kernel == 0 || l.kernel % 2 == 0 {
            return Err(ModelError::Architecture(format!(
                "layer {j}: channels {} kernel {} (kernel must be odd and positive)",
                l.channels, l.kernel
            )));
        }
    }
    Ok(())
}

fn xavier(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor {
    let receptive = shape[2] * shape[3];
    let fan_in = shape[1] * receptive;
    let fan_out = shape[0] * receptive;
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Handles to the parameter nodes of one loss graph, in declaration order.
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub encoder: Vec<(Var, Var)>,
    pub csse: Var,
    pub decoder: Vec<(Var, Var)>,
}

impl ParamVars {
    /// Inverse of [`ParamVars::all`] for a model with `layers` conv layers.
    pub fn from_flat(vars: &[Var], layers: usize) -> Option<Self> {
        if vars.len() != 4 * layers + 1 {
            return None;
        }
        let pairs = |s: &[Var]| s.chunks(2).map(|c| (c[0], c[1])).collect();
        Some(ParamVars {
            encoder: pairs(&vars[..2 * layers]),
            csse: vars[2 * layers],
            decoder: pairs(&vars[2 * layers + 1..]),
        })
    }

    pub fn all(&self) -> Vec<Var> {
        let mut v = Vec::new();
        for &(w, b) in &self.encoder {
            v.extend([w, b]);
        }
        v.push(self.csse);
        for &(w, b) in &self.decoder {
            v.extend([w, b]);
        }
        v
    }
}

/// Nodes of the training objective.
#[derive(Clone, Debug)]
pub struct LossGraph {
    pub params: ParamVars,
    pub features: Var,
    pub reconstruction: Var,
    pub recon: Var,
    pub selfexpr: Var,
    pub l1: Var,
    pub separation: Var,
    pub total: Var,
}

impl LossGraph {
    pub fn terms(&self, g: &Graph) -> LossTerms {
        let s = |v: Var| g.value(v).item().unwrap_or(f64::NAN);
        LossTerms {
            recon: s(self.recon),
            selfexpr: s(self.selfexpr),
            l1: s(self.l1),
            separation: s(self.separation),
            total: s(self.total),
        }
    }
}

impl ModelParams {
    /// Builds a model for the given label-sorted training set. Conv weights
    /// are Xavier-uniform from `seed`; biases and CSSE coefficients start at 0.
    pub fn build(arch: &[LayerSpec], input_shape: (usize, usize), labels: &[usize], seed: u64) -> Result<Self> {
        validate_arch(arch, input_shape)?;
        let layout = ClassLayout::from_sorted_labels(labels).ok_or(ModelError::UnsortedLabels)?;
        if layout.num_classes() == 0 {
            return Err(ModelError::UnsortedLabels);
        }
        if let Some((class, &count)) = layout.sizes().iter().enumerate().find(|(_, &n)| n < 2) {
            return Err(ModelError::TooFewSamples { class, count });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut encoder = Vec::with_capacity(arch.len());
        let mut prev = 1;
        for l in arch {
            encoder.push(ConvLayer {
                weight: xavier(&mut rng, [l.channels, prev, l.kernel, l.kernel]),
                bias: Tensor::zeros(&[l.channels]),
            });
            prev = l.channels;
        }
        let mut decoder = Vec::with_capacity(arch.len());
        for j in (0..arch.len()).rev() {
            let c_in = if j == 0 { 1 } else { arch[j - 1].channels };
            let l = arch[j];
            decoder.push(ConvLayer {
                weight: xavier(&mut rng, [l.channels, c_in, l.kernel, l.kernel]),
                bias: Tensor::zeros(&[c_in]),
            });
        }
        let n = layout.num_samples();
        Ok(Self::assemble(arch.to_vec(), input_shape, layout, encoder, Tensor::zeros(&[n, n]), decoder))
    }

    fn assemble(
        arch: Vec<LayerSpec>,
        input_shape: (usize, usize),
        layout: ClassLayout,
        encoder: Vec<ConvLayer>,
        csse: Tensor,
        decoder: Vec<ConvLayer>,
    ) -> Self {
        let mask = layout.csse_mask();
        let blocks = layout.blocks();
        ModelParams { arch, input_shape, layout, encoder, csse, decoder, mask, blocks }
    }

    pub fn arch(&self) -> &[LayerSpec] {
        &self.arch
    }

    pub fn input_shape(&self) -> (usize, usize) {
        self.input_shape
    }

    pub fn layout(&self) -> &ClassLayout {
        &self.layout
    }

    pub fn class_sizes(&self) -> &[usize] {
        self.layout.sizes()
    }

    pub fn num_samples(&self) -> usize {
        self.layout.num_samples()
    }

    pub fn feature_dim(&self) -> usize {
        feature_dim(&self.arch, self.input_shape)
    }

    /// 0/1 mask of trainable CSSE entries (row-major `N x N`).
    pub fn csse_mask(&self) -> &[f64] {
        &self.mask
    }

    /// All parameter tensors in declaration order: encoder (weight, bias)
    /// pairs, CSSE matrix, decoder pairs.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = Vec::new();
        for l in &self.encoder {
            v.extend([&l.weight, &l.bias]);
        }
        v.push(&self.csse);
        for l in &self.decoder {
            v.extend([&l.weight, &l.bias]);
        }
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = Vec::new();
        for l in &mut self.encoder {
            v.extend([&mut l.weight, &mut l.bias]);
        }
        v.push(&mut self.csse);
        for l in &mut self.decoder {
            v.extend([&mut l.weight, &mut l.bias]);
        }
        v
    }

    /// Index of the CSSE matrix in [`ModelParams::tensors`].
    pub fn csse_index(&self) -> usize {
        2 * self.encoder.len()
    }

    /// Zeroes every CSSE entry outside the class blocks or on the diagonal.
    pub fn project_csse(&mut self) {
        for (v, m) in self.csse.data_mut().iter_mut().zip(self.mask.iter()) {
            if *m == 0.0 {
                *v = 0.0;
            }
        }
    }

    /// True when the CSSE matrix is block-diagonal by class with a zero
    /// diagonal, exactly.
    pub fn csse_is_structured(&self) -> bool {
        self.csse.data().iter().zip(self.mask.iter()).all(|(v, m)| *m != 0.0 || *v == 0.0)
    }

    fn check_images(&self, images: &Tensor) -> Result<()> {
        let s = images.shape();
        if s.len() != 4 || s[1] != 1 || (s[2], s[3]) != self.input_shape {
            return Err(ModelError::Shape(format!(
                "expected N x 1 x {} x {} images, got {s:?}",
                self.input_shape.0, self.input_shape.1
            )));
        }
        Ok(())
    }

    fn encoder_graph(&self, g: &mut Graph, images: Var, layers: &[(Var, Var)]) -> Result<Var> {
        let n = g.value(images).shape()[0];
        let mut x = images;
        for (spec, &(w, b)) in self.arch.iter().zip(layers) {
            x = g.conv2d_stride(x, w)?;
            x = g.bias_add(x, b)?;
            if spec.relu {
                x = g.relu(x)?;
            }
        }
        Ok(g.reshape(x, vec![n, self.feature_dim()])?)
    }

    fn decoder_graph(&self, g: &mut Graph, features: Var, layers: &[(Var, Var)]) -> Result<Var> {
        let n = g.value(features).shape()[0];
        let sizes = spatial_sizes(self.arch.len(), self.input_shape);
        let m = self.arch.len();
        let (h, w) = sizes[m];
        let mut x = g.reshape(features, vec![n, self.arch[m - 1].channels, h, w])?;
        for (step, &(wt, b)) in layers.iter().enumerate() {
            let j = m - 1 - step;
            x = g.conv2d_transpose_stride(x, wt, sizes[j])?;
            x = g.bias_add(x, b)?;
            if self.arch[j].relu {
                x = g.relu(x)?;
            }
        }
        Ok(x)
    }

    fn add_layers(g: &mut Graph, layers: &[ConvLayer], trainable: bool) -> Vec<(Var, Var)> {
        let leaf = |g: &mut Graph, t: &Tensor| if trainable { g.parameter(t.clone()) } else { g.constant(t.clone()) };
        layers.iter().map(|l| (leaf(g, &l.weight), leaf(g, &l.bias))).collect()
    }

    /// Builds the full training objective on `images` (label-sorted, one
    /// image per CSSE row).
    pub fn loss_graph(&self, g: &mut Graph, images: &Tensor, weights: &LossWeights) -> Result<LossGraph> {
        let enc = Self::add_layers(g, &self.encoder, true);
        let csse = g.parameter(self.csse.clone());
        let dec = Self::add_layers(g, &self.decoder, true);
        self.loss_graph_on(g, images, ParamVars { encoder: enc, csse, decoder: dec }, weights)
    }

    /// Builds the objective on parameter nodes supplied by the caller, which
    /// must have the shapes of this model's tensors.
    pub fn loss_graph_on(&self, g: &mut Graph, images: &Tensor, params: ParamVars, weights: &LossWeights) -> Result<LossGraph> {
        self.check_images(images)?;
        let n = images.shape()[0];
        if n != self.num_samples() {
            return Err(ModelError::Shape(format!("batch of {n} for a model built on {}", self.num_samples())));
        }
        let shapes_ok = params.all().len() == self.tensors().len()
            && params.all().iter().zip(self.tensors()).all(|(v, t)| g.value(*v).shape() == t.shape());
        if !shapes_ok {
            return Err(ModelError::Shape("parameter nodes do not match the model".into()));
        }
        let y = g.constant(images.clone());
        let (enc, csse, dec) = (&params.encoder, params.csse, &params.decoder);
        let features = self.encoder_graph(g, y, enc)?;
        let expressed = g.block_matmul_tn(csse, features, self.blocks.clone())?;
        let reconstruction = self.decoder_graph(g, expressed, dec)?;

        let diff = g.sub(y, reconstruction)?;
        let sq = g.frobenius_sq(diff)?;
        let recon = g.scalar_mul(sq, 0.5)?;

        let resid = g.sub(features, expressed)?;
        let selfexpr = g.frobenius_sq(resid)?;

        let l1 = g.l1_sum(csse)?;

        let separation = g.cross_block_gram_sq(features, self.blocks.clone())?;

        let t1 = g.scalar_mul(selfexpr, weights.lambda1)?;
        let t2 = g.scalar_mul(l1, weights.lambda2)?;
        let t3 = g.scalar_mul(separation, weights.lambda3)?;
        let acc = g.add(recon, t1)?;
        let acc = g.add(acc, t2)?;
        let total = g.add(acc, t3)?;

        Ok(LossGraph {
            params,
            features,
            reconstruction,
            recon,
            selfexpr,
            l1,
            separation,
            total,
        })
    }

    /// Runs the encoder on `N x 1 x H x W` images.
    pub fn encode(&self, images: &Tensor, labels: &[usize]) -> Result<FeatureMatrix> {
        self.check_images(images)?;
        if labels.len() != images.shape()[0] {
            return Err(ModelError::Shape(format!("{} labels for {} images", labels.len(), images.shape()[0])));
        }
        let mut g = Graph::new();
        let y = g.constant(images.clone());
        let enc = Self::add_layers(&mut g, &self.encoder, false);
        let f = self.encoder_graph(&mut g, y, &enc)?;
        FeatureMatrix::new(self.feature_dim(), g.value(f).data().to_vec(), labels.to_vec())
    }

    /// `X * G` with the structural mask in force.
    pub fn csse_apply(&self, x: &FeatureMatrix) -> Result<FeatureMatrix> {
        if x.num_samples() != self.num_samples() || x.dim() != self.feature_dim() {
            return Err(ModelError::Shape(format!(
                "{} features of dim {} for a model of {} samples, dim {}",
                x.num_samples(),
                x.dim(),
                self.num_samples(),
                self.feature_dim()
            )));
        }
        if x.layout().as_ref() != Some(&self.layout) {
            return Err(ModelError::UnsortedLabels);
        }
        let (n, d) = (self.num_samples(), x.dim());
        let mut out = vec![0.0; n * d];
        // only in-block, off-diagonal coefficients are read
        for c in 0..self.layout.num_classes() {
            let r = self.layout.range(c);
            for j in r.clone() {
                let dst = &mut out[j * d..(j + 1) * d];
                for a in r.clone() {
                    if a == j {
                        continue;
                    }
                    let coef = self.csse.data()[a * n + j];
                    if coef != 0.0 {
                        dst.iter_mut().zip(x.column(a)).for_each(|(o, v)| *o += coef * v);
                    }
                }
            }
        }
        FeatureMatrix::new(d, out, x.labels().to_vec())
    }

    /// Maps feature columns back to `N x 1 x H x W` images.
    pub fn decode(&self, x: &FeatureMatrix) -> Result<Tensor> {
        if x.dim() != self.feature_dim() {
            return Err(ModelError::Shape(format!("feature dim {} vs {}", x.dim(), self.feature_dim())));
        }
        let mut g = Graph::new();
        let f = g.constant(Tensor::new(vec![x.num_samples(), x.dim()], x.as_sample_major().to_vec())?);
        let dec = Self::add_layers(&mut g, &self.decoder, false);
        let out = self.decoder_graph(&mut g, f, &dec)?;
        Ok(g.value(out).clone())
    }

    /// Evaluates the four loss terms without recording gradients.
    pub fn loss_terms(&self, images: &Tensor, labels: &[usize], weights: &LossWeights) -> Result<LossTerms> {
        if ClassLayout::from_sorted_labels(labels).as_ref() != Some(&self.layout) {
            return Err(ModelError::UnsortedLabels);
        }
        let mut g = Graph::new();
        let lg = self.loss_graph(&mut g, images, weights)?;
        Ok(lg.terms(&g))
    }

    pub(crate) fn from_parts(
        arch: Vec<LayerSpec>,
        input_shape: (usize, usize),
        class_sizes: Vec<usize>,
        encoder: Vec<ConvLayer>,
        csse: Tensor,
        decoder: Vec<ConvLayer>,
    ) -> Result<Self> {
        validate_arch(&arch, input_shape)?;
        let layout = ClassLayout::from_sizes(class_sizes);
        let model = Self::assemble(arch, input_shape, layout, encoder, csse, decoder);
        let reference = ModelParams::build(&model.arch, input_shape, &model.layout.labels(), 0)?;
        for (a, b) in model.tensors().iter().zip(reference.tensors()) {
            if a.shape() != b.shape() {
                return Err(ModelError::Checkpoint(format!("tensor shape {:?}, expected {:?}", a.shape(), b.shape())));
            }
        }
        Ok(model)
    }
}
