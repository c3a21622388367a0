//! Full-batch ADAM training of the autoencoder objective.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::model::{LayerSpec, LossTerms, LossWeights, ModelError, ModelParams};
use crate::tensor::{Graph, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("non-finite gradient in {parameter} at iteration {iteration} (loss terms {terms:?})")]
    NonFiniteGradient { iteration: usize, parameter: String, terms: LossTerms },
    #[error("training diverged at iteration {iteration}: {term} is not finite")]
    Diverged { iteration: usize, term: String, history: LossHistory },
    #[error("parameter/gradient mismatch: {0}")]
    Mismatch(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, OptimError>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        AdamConfig { learning_rate, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &[&Tensor], config: AdamConfig) -> Self {
        AdamState {
            config,
            first: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            second: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected ADAM update of `params` in place.
    pub fn update(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(OptimError::Mismatch(format!(
                "{} params, {} grads, state for {}",
                params.len(),
                grads.len(),
                self.first.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || self.first[i].len() != p.len() {
                return Err(OptimError::Mismatch(format!("tensor {i}: {:?} vs {:?}", p.shape(), g.shape())));
            }
        }
        self.step += 1;
        let AdamConfig { learning_rate, beta1, beta2, epsilon } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.first.iter_mut().zip(self.second.iter_mut())) {
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *x -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

fn param_name(model: &ModelParams, index: usize) -> String {
    let m = model.encoder.len();
    let kind = |i: usize| if i.is_multiple_of(2) { "weight" } else { "bias" };
    match index {
        i if i < 2 * m => format!("encoder[{}].{}", i / 2, kind(i)),
        i if i == 2 * m => "csse".to_string(),
        i => format!("decoder[{}].{}", (i - 2 * m - 1) / 2, kind(i - 2 * m - 1)),
    }
}

/// Masks the CSSE gradient, applies one ADAM update to every model tensor
/// and re-projects the CSSE matrix onto its block/zero-diagonal structure.
pub fn adam_step(model: &mut ModelParams, mut grads: Vec<Tensor>, state: &mut AdamState, iteration: usize, terms: LossTerms) -> Result<()> {
    if let Some(bad) = grads.iter().position(|g| !g.is_finite()) {
        return Err(OptimError::NonFiniteGradient { iteration, parameter: param_name(model, bad), terms });
    }
    let ci = model.csse_index();
    let mask = model.csse_mask().to_vec();
    grads[ci].data_mut().iter_mut().zip(&mask).for_each(|(g, m)| *g *= m);
    state.update(&mut model.tensors_mut(), &grads)?;
    model.project_csse();
    debug_assert!(model.csse_is_structured());
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub weights: LossWeights,
    /// Record every `log_every` iterations (0 records only first and last).
    pub log_every: usize,
    /// Seed for weight initialization when training from scratch.
    pub seed: u64,
    /// Stop once the total loss changes by less than 1e-6 (relative) over
    /// 100 iterations.
    pub early_stop: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(OptimError::Config("iterations must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(OptimError::Config(format!("learning rate {}", self.learning_rate)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub iter: usize,
    pub terms: LossTerms,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossHistory {
    pub records: Vec<LossRecord>,
}

impl LossHistory {
    pub fn first(&self) -> Option<&LossRecord> {
        self.records.first()
    }

    pub fn last(&self) -> Option<&LossRecord> {
        self.records.last()
    }

    /// CSV with header `iter,recon,selfexpr,l1,separation,total`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iter,recon,selfexpr,l1,separation,total\n");
        for r in &self.records {
            let t = r.terms;
            let _ = writeln!(s, "{},{:e},{:e},{:e},{:e},{:e}", r.iter, t.recon, t.selfexpr, t.l1, t.separation, t.total);
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Forward pass plus gradients of the total loss, in parameter order.
pub fn loss_and_gradients(model: &ModelParams, images: &Tensor, weights: &LossWeights) -> std::result::Result<(LossTerms, Vec<Tensor>), ModelError> {
    let mut g = Graph::new();
    let lg = model.loss_graph(&mut g, images, weights)?;
    let terms = lg.terms(&g);
    let mut grads = g.backward(lg.total)?;
    let out = lg
        .params
        .all()
        .into_iter()
        .map(|v| grads.take(v).unwrap_or_else(|| Tensor::zeros(g.value(v).shape())))
        .collect();
    Ok((terms, out))
}

fn non_finite_term(t: &LossTerms) -> Option<&'static str> {
    [("recon", t.recon), ("selfexpr", t.selfexpr), ("l1", t.l1), ("separation", t.separation), ("total", t.total)]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
}

/// Trains `model` in place on the full label-sorted batch `images`.
pub fn train(
    model: &mut ModelParams,
    images: &Tensor,
    config: &TrainConfig,
    mut on_record: impl FnMut(&LossRecord),
) -> Result<LossHistory> {
    config.validate()?;
    let mut state = AdamState::new(&model.tensors(), AdamConfig::with_learning_rate(config.learning_rate));
    let mut history = LossHistory::default();
    let mut window: VecDeque<f64> = VecDeque::with_capacity(101);
    for iter in 0..config.iterations {
        let (terms, grads) = match loss_and_gradients(model, images, &config.weights) {
            Ok(v) => v,
            Err(ModelError::Tensor(TensorError::NonFinite { op })) => {
                return Err(OptimError::Diverged { iteration: iter, term: op.to_string(), history });
            }
            Err(e) => return Err(e.into()),
        };
        if let Some(term) = non_finite_term(&terms) {
            return Err(OptimError::Diverged { iteration: iter, term: term.to_string(), history });
        }
        window.push_back(terms.total);
        if window.len() > 101 {
            window.pop_front();
        }
        let converged = config.early_stop
            && window.len() == 101
            && ((window[100] - window[0]).abs() / window[0].abs().max(f64::MIN_POSITIVE)) < 1e-6;
        let last = iter + 1 == config.iterations || converged;
        if iter == 0 || last || (config.log_every > 0 && iter % config.log_every == 0) {
            let rec = LossRecord { iter, terms };
            on_record(&rec);
            history.records.push(rec);
        }
        adam_step(model, grads, &mut state, iter, terms)?;
        if converged {
            break;
        }
    }
    Ok(history)
}

/// Builds a model from `config.seed` and trains it.
pub fn fit(
    arch: &[LayerSpec],
    images: &Tensor,
    labels: &[usize],
    config: &TrainConfig,
    on_record: impl FnMut(&LossRecord),
) -> Result<(ModelParams, LossHistory)> {
    let s = images.shape();
    if s.len() != 4 {
        return Err(OptimError::Mismatch(format!("images must be N x 1 x H x W, got {s:?}")));
    }
    let mut model = ModelParams::build(arch, (s[2], s[3]), labels, config.seed)?;
    let history = train(&mut model, images, config, on_record)?;
    Ok((model, history))
}
