//! Nearest-neighbour and sparse-representation classifiers.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::model::FeatureMatrix;
use crate::tensor::gemm;

#[derive(Debug, Error, PartialEq)]
pub enum ClassifyError {
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("k = {k} but only {available} training samples")]
    BadK { k: usize, available: usize },
    #[error("feature dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("at least one trial is required")]
    NoTrials,
    #[error("invalid parameter: {0}")]
    BadParameter(String),
}

pub type Result<T> = std::result::Result<T, ClassifyError>;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Majority vote over the `k` Euclidean-nearest training columns. Vote ties
/// go to the class with the smaller summed distance, then the lower id.
pub fn knn_classify(train: &FeatureMatrix, test: &FeatureMatrix, k: usize) -> Result<Vec<usize>> {
    let n = train.num_samples();
    if n == 0 {
        return Err(ClassifyError::EmptyTrainingSet);
    }
    if k == 0 || k > n {
        return Err(ClassifyError::BadK { k, available: n });
    }
    if train.dim() != test.dim() {
        return Err(ClassifyError::DimensionMismatch(train.dim(), test.dim()));
    }
    let classes = train.num_classes();
    let mut out = Vec::with_capacity(test.num_samples());
    let mut dists: Vec<(f64, usize)> = Vec::with_capacity(n);
    for x in test.columns() {
        dists.clear();
        dists.extend(train.columns().enumerate().map(|(i, t)| (sq_dist(x, t), i)));
        if k == 1 {
            let best = dists.iter().min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))).unwrap();
            out.push(train.labels()[best.1]);
            continue;
        }
        dists.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut votes = vec![0usize; classes];
        let mut mass = vec![0.0; classes];
        for &(d, i) in &dists[..k] {
            let c = train.labels()[i];
            votes[c] += 1;
            mass[c] += d.sqrt();
        }
        let best = (0..classes)
            .filter(|&c| votes[c] > 0)
            .min_by(|&a, &b| votes[b].cmp(&votes[a]).then(mass[a].total_cmp(&mass[b])).then(a.cmp(&b)))
            .unwrap();
        out.push(best);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SrcConfig {
    /// Weight of the `l1` penalty after unit-normalizing atoms and queries.
    pub gamma: f64,
    pub max_iter: usize,
    /// Convergence threshold on the largest coefficient change per iteration.
    pub tol: f64,
}

impl Default for SrcConfig {
    fn default() -> Self {
        SrcConfig { gamma: 0.01, max_iter: 2000, tol: 1e-6 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SrcResult {
    pub label: usize,
    /// `||x - D delta_i(alpha)||` per class, in the query's original scale.
    pub residuals: Vec<f64>,
    pub converged: bool,
}

fn unit_rows(m: &FeatureMatrix) -> (Vec<f64>, Vec<f64>) {
    let d = m.dim();
    let mut data = m.as_sample_major().to_vec();
    let mut norms = Vec::with_capacity(m.num_samples());
    for row in data.chunks_mut(d) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
        norms.push(norm);
    }
    (data, norms)
}

/// Sparse-representation classification of every column of `queries`
/// against the dictionary formed by the columns of `dictionary`.
///
/// Atoms and queries are scaled to unit norm, then
/// `min ||x - D a||^2 + gamma ||a||_1` is solved by ISTA for all queries at
/// once. The label is the class whose coefficients alone leave the smallest
/// residual; ties go to the lower class id.
pub fn src_classify_batch(dictionary: &FeatureMatrix, queries: &FeatureMatrix, config: &SrcConfig) -> Result<Vec<SrcResult>> {
    let n = dictionary.num_samples();
    if n == 0 {
        return Err(ClassifyError::EmptyTrainingSet);
    }
    if dictionary.dim() != queries.dim() {
        return Err(ClassifyError::DimensionMismatch(dictionary.dim(), queries.dim()));
    }
    if !(config.gamma >= 0.0) {
        return Err(ClassifyError::BadParameter(format!("gamma {}", config.gamma)));
    }
    let d = dictionary.dim();
    let t = queries.num_samples();
    let (atoms, _) = unit_rows(dictionary);
    let (x, x_norms) = unit_rows(queries);

    let atoms_mat = DMatrix::from_row_slice(n, d, &atoms);
    let sigma = atoms_mat.singular_values().iter().copied().fold(0.0, f64::max);
    let lipschitz = 2.0 * sigma * sigma;
    let step = if lipschitz > 0.0 { 1.0 / lipschitz } else { 0.0 };
    let thresh = config.gamma * step;

    // coefficients: t x n, one row per query. Queries are independent, so
    // rows that have converged leave the working set.
    let mut alpha = vec![0.0; t * n];
    let mut converged = vec![false; t];
    let mut active: Vec<usize> = (0..t).collect();
    let mut a_buf = Vec::new();
    let mut resid = Vec::new();
    let mut grad = Vec::new();
    for _ in 0..config.max_iter {
        if active.is_empty() {
            break;
        }
        let m = active.len();
        a_buf.clear();
        resid.clear();
        for &q in &active {
            a_buf.extend_from_slice(&alpha[q * n..(q + 1) * n]);
            resid.extend_from_slice(&x[q * d..(q + 1) * d]);
        }
        // resid = alpha * atoms - x
        gemm(m, n, d, 1.0, &a_buf, false, &atoms, false, -1.0, &mut resid);
        grad.clear();
        grad.resize(m * n, 0.0);
        gemm(m, d, n, 2.0, &resid, false, &atoms, true, 0.0, &mut grad);
        for (&q, grow) in active.iter().zip(grad.chunks(n)) {
            let arow = &mut alpha[q * n..(q + 1) * n];
            let mut change: f64 = 0.0;
            for (a, g) in arow.iter_mut().zip(grow) {
                let z = *a - step * g;
                let next = if z > thresh {
                    z - thresh
                } else if z < -thresh {
                    z + thresh
                } else {
                    0.0
                };
                change = change.max((next - *a).abs());
                *a = next;
            }
            converged[q] = change <= config.tol;
        }
        active.retain(|&q| !converged[q]);
    }

    let labels = dictionary.labels();
    let classes = dictionary.num_classes();
    let mut results = Vec::with_capacity(t);
    let mut partial = vec![0.0; d];
    for q in 0..t {
        let arow = &alpha[q * n..(q + 1) * n];
        let xq = &x[q * d..(q + 1) * d];
        let mut residuals = Vec::with_capacity(classes);
        for c in 0..classes {
            partial.copy_from_slice(xq);
            for (i, &a) in arow.iter().enumerate() {
                if labels[i] == c && a != 0.0 {
                    partial.iter_mut().zip(&atoms[i * d..(i + 1) * d]).for_each(|(p, v)| *p -= a * v);
                }
            }
            residuals.push(partial.iter().map(|v| v * v).sum::<f64>().sqrt() * x_norms[q]);
        }
        let label = (0..classes).min_by(|&a, &b| residuals[a].total_cmp(&residuals[b]).then(a.cmp(&b))).unwrap_or(0);
        results.push(SrcResult { label, residuals, converged: converged[q] });
    }
    Ok(results)
}

/// Single-query form of [`src_classify_batch`].
pub fn src_classify(dictionary: &FeatureMatrix, query: &[f64], config: &SrcConfig) -> Result<SrcResult> {
    let q = FeatureMatrix::new(query.len(), query.to_vec(), vec![0])
        .map_err(|e| ClassifyError::BadParameter(e.to_string()))?;
    Ok(src_classify_batch(dictionary, &q, config)?.remove(0))
}

/// Percentage of matching labels.
pub fn accuracy(predicted: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let hits = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    100.0 * hits as f64 / truth.len() as f64
}

/// Per-trial accuracies with mean and population standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierReport {
    pub method: String,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl ClassifierReport {
    pub fn from_trials(method: impl Into<String>, accuracies: Vec<f64>) -> Result<Self> {
        if accuracies.is_empty() {
            return Err(ClassifyError::NoTrials);
        }
        let n = accuracies.len() as f64;
        let mean = accuracies.iter().sum::<f64>() / n;
        let var = accuracies.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
        Ok(ClassifierReport { method: method.into(), accuracies, mean, std: var.sqrt() })
    }

    /// `"91.35 ± 0.35"`.
    pub fn summary(&self) -> String {
        format!("{:.2} ± {:.2}", self.mean, self.std)
    }
}

/// Evaluates predictions of several trials against their ground truth.
pub fn evaluate(method: &str, trials: &[(Vec<usize>, Vec<usize>)]) -> Result<ClassifierReport> {
    ClassifierReport::from_trials(method, trials.iter().map(|(p, t)| accuracy(p, t)).collect())
}

/// CSV of `sample,true,predicted`.
pub fn predictions_csv(truth: &[usize], predicted: &[usize]) -> String {
    let mut s = String::from("sample,true,predicted\n");
    for (i, (t, p)) in truth.iter().zip(predicted).enumerate() {
        let _ = writeln!(s, "{i},{t},{p}");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fm(cols: &[&[f64]], labels: &[usize]) -> FeatureMatrix {
        let cols: Vec<Vec<f64>> = cols.iter().map(|c| c.to_vec()).collect();
        FeatureMatrix::from_columns(&cols, labels.to_vec()).unwrap()
    }

    #[test]
    fn one_nn_returns_label_of_identical_point() {
        let train = fm(&[&[0.0, 0.0], &[1.0, 1.0], &[5.0, 5.0]], &[0, 1, 2]);
        let test = fm(&[&[1.0, 1.0]], &[0]);
        assert_eq!(knn_classify(&train, &test, 1).unwrap(), vec![1]);
    }

    #[test]
    fn knn_vote_tie_uses_distance_then_id() {
        let train = fm(&[&[1.0], &[-2.0], &[10.0]], &[0, 1, 1]);
        let test = fm(&[&[0.0]], &[0]);
        // k=2: one vote each, class 0 is closer
        assert_eq!(knn_classify(&train, &test, 2).unwrap(), vec![0]);
        let train = fm(&[&[1.0], &[-1.0]], &[1, 0]);
        // equal votes and equal distance: lower id
        assert_eq!(knn_classify(&train, &test, 2).unwrap(), vec![0]);
    }

    #[test]
    fn knn_errors() {
        let empty = FeatureMatrix::new(1, vec![], vec![]).unwrap();
        let probe = fm(&[&[0.0]], &[0]);
        assert_eq!(knn_classify(&empty, &probe, 1), Err(ClassifyError::EmptyTrainingSet));
        let train = fm(&[&[0.0]], &[0]);
        let test = fm(&[&[0.0]], &[0]);
        assert_eq!(knn_classify(&train, &test, 2), Err(ClassifyError::BadK { k: 2, available: 1 }));
    }

    #[test]
    fn src_picks_class_of_matching_atom() {
        let dict = fm(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.6, 0.0, 0.8]], &[0, 1, 1]);
        let r = src_classify(&dict, &[0.0, 2.0, 0.0], &SrcConfig { gamma: 1e-4, max_iter: 5000, tol: 1e-12 }).unwrap();
        assert_eq!(r.label, 1);
        assert!(r.residuals[1] < 1e-3);
        assert!(r.converged);
    }

    #[test]
    fn src_orthogonal_subspaces_residuals() {
        let dict = fm(&[&[1.0, 0.0, 0.0, 0.0], &[0.0, 1.0, 0.0, 0.0], &[0.0, 0.0, 1.0, 0.0], &[0.0, 0.0, 0.0, 1.0]], &[0, 0, 1, 1]);
        let x = [3.0, -4.0, 0.0, 0.0];
        let r = src_classify(&dict, &x, &SrcConfig { gamma: 1e-6, max_iter: 5000, tol: 1e-14 }).unwrap();
        assert_eq!(r.label, 0);
        assert!(r.residuals[0] < 1e-4);
        assert!((r.residuals[1] - 5.0).abs() < 1e-9);
    }

    #[test]
    fn report_statistics() {
        let r = ClassifierReport::from_trials("x", vec![90.0, 92.0, 91.0, 91.0]).unwrap();
        assert!((r.mean - 91.0).abs() < 1e-12);
        assert!((r.std - 0.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(r.summary(), "91.00 ± 0.71");
        let one = ClassifierReport::from_trials("x", vec![80.0]).unwrap();
        assert_eq!(one.std, 0.0);
        assert_eq!(ClassifierReport::from_trials("x", vec![]), Err(ClassifyError::NoTrials));
    }

    #[test]
    fn predictions_csv_rows() {
        assert_eq!(predictions_csv(&[1, 0], &[1, 1]), "sample,true,predicted\n0,1,1\n1,0,1\n");
    }
}
