//! Class subspace bases, principal angles and the lasso self-expressive
//! coding problem.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::model::{ClassLayout, FeatureMatrix};

#[derive(Debug, Error, PartialEq)]
pub enum SubspaceError {
    #[error("requested dimension {requested} exceeds achievable rank {rank}")]
    RankDeficient { requested: usize, rank: usize },
    #[error("invalid dimension request: {0}")]
    BadDimension(String),
    #[error("ambient dimensions differ: {0} vs {1}")]
    AmbientMismatch(usize, usize),
    #[error("class {class} has {count} samples, fewer than the requested {requested}")]
    TooFewSamples { class: usize, count: usize, requested: usize },
    #[error("negative regularization weight {0}")]
    NegativeLambda(f64),
}

pub type Result<T> = std::result::Result<T, SubspaceError>;

/// How many left singular vectors to keep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BasisDim {
    Fixed(usize),
    /// Smallest `p` whose leading squared singular values reach this fraction
    /// of the total.
    Energy(f64),
}

impl Default for BasisDim {
    fn default() -> Self {
        BasisDim::Energy(0.95)
    }
}

/// Orthonormal basis (`D x p`) of a class subspace.
#[derive(Clone, Debug)]
pub struct SubspaceBasis {
    pub basis: DMatrix<f64>,
    /// Fraction of squared singular value mass captured by the basis.
    pub energy: f64,
}

impl SubspaceBasis {
    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }

    pub fn ambient(&self) -> usize {
        self.basis.nrows()
    }
}

/// Principal angles in degrees, ascending.
#[derive(Clone, Debug, PartialEq)]
pub struct AngleSpectrum {
    pub angles: Vec<f64>,
}

impl AngleSpectrum {
    pub fn smallest(&self) -> f64 {
        self.angles.first().copied().unwrap_or(90.0)
    }
}

/// Singular values in descending order with matching left vectors.
fn sorted_svd(m: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let svd = m.svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let values = order.iter().map(|&i| svd.singular_values[i]).collect();
    let cols: Vec<DVector<f64>> = order.iter().map(|&i| u.column(i).into_owned()).collect();
    (values, DMatrix::from_columns(&cols))
}

fn numerical_rank(values: &[f64], rows: usize, cols: usize) -> usize {
    let top = values.first().copied().unwrap_or(0.0);
    let tol = top * rows.max(cols) as f64 * f64::EPSILON;
    values.iter().filter(|&&s| s > tol && s > 0.0).count()
}

/// Basis of the column span of `data` (`D x n`) from its top left singular
/// vectors. Columns are not centered. Each basis vector is signed so that
/// its largest-magnitude entry is positive.
pub fn estimate_basis(data: &DMatrix<f64>, dim: BasisDim) -> Result<SubspaceBasis> {
    let (rows, cols) = data.shape();
    if rows == 0 || cols == 0 {
        return Err(SubspaceError::BadDimension("empty data matrix".into()));
    }
    let (values, u) = sorted_svd(data.clone());
    let rank = numerical_rank(&values, rows, cols);
    let total: f64 = values.iter().map(|s| s * s).sum();
    let p = match dim {
        BasisDim::Fixed(p) => {
            if p == 0 || p > cols {
                return Err(SubspaceError::BadDimension(format!("p = {p} with {cols} samples")));
            }
            p
        }
        BasisDim::Energy(frac) => {
            if !(frac > 0.0 && frac <= 1.0) {
                return Err(SubspaceError::BadDimension(format!("energy fraction {frac}")));
            }
            let mut acc = 0.0;
            let mut p = values.len();
            for (i, s) in values.iter().enumerate() {
                acc += s * s;
                if acc >= frac * total * (1.0 - 1e-12) {
                    p = i + 1;
                    break;
                }
            }
            p.min(rank.max(1))
        }
    };
    if p > rank {
        return Err(SubspaceError::RankDeficient { requested: p, rank });
    }
    let mut basis = u.columns(0, p).into_owned();
    for mut c in basis.column_iter_mut() {
        let pivot = c.iter().copied().max_by(|a, b| a.abs().total_cmp(&b.abs())).unwrap_or(0.0);
        if pivot < 0.0 {
            c.neg_mut();
        }
    }
    let kept: f64 = values[..p].iter().map(|s| s * s).sum();
    let energy = if total > 0.0 { kept / total } else { 0.0 };
    Ok(SubspaceBasis { basis, energy })
}

/// Principal angles between the spans of two column-orthonormal matrices:
/// arccos of the singular values of `U1^T U2`, clamped to [0, 1].
pub fn principal_angles(u1: &DMatrix<f64>, u2: &DMatrix<f64>) -> Result<AngleSpectrum> {
    if u1.nrows() != u2.nrows() {
        return Err(SubspaceError::AmbientMismatch(u1.nrows(), u2.nrows()));
    }
    let cross = u1.transpose() * u2;
    let mut sv: Vec<f64> = cross.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    let angles = sv.iter().map(|s| s.clamp(0.0, 1.0).acos().to_degrees()).collect();
    Ok(AngleSpectrum { angles })
}

/// Matrix whose columns are the given feature columns.
pub fn columns_matrix(features: &FeatureMatrix, indices: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(features.dim(), indices.len(), |r, c| features.column(indices[c])[r])
}

/// Symmetric table of smallest principal angles (degrees) between classes.
#[derive(Clone, Debug, PartialEq)]
pub struct AngleMatrix {
    pub classes: Vec<usize>,
    /// Row-major `c x c`.
    pub degrees: Vec<f64>,
}

impl AngleMatrix {
    pub fn size(&self) -> usize {
        self.classes.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.degrees[i * self.size() + j]
    }

    /// Smallest off-diagonal entry (90 when there is only one class).
    pub fn min_off_diagonal(&self) -> f64 {
        let c = self.size();
        let mut m: f64 = 90.0;
        for i in 0..c {
            for j in 0..c {
                if i != j {
                    m = m.min(self.get(i, j));
                }
            }
        }
        m
    }

    /// CSV with a header row and a leading column of class ids. `names`
    /// overrides the printed ids when given.
    pub fn to_csv(&self, names: Option<&[String]>) -> String {
        let label = |i: usize| names.map_or_else(|| self.classes[i].to_string(), |n| n[i].clone());
        let mut s = String::from("class");
        for i in 0..self.size() {
            let _ = write!(s, ",{}", label(i));
        }
        s.push('\n');
        for i in 0..self.size() {
            s.push_str(&label(i));
            for j in 0..self.size() {
                let _ = write!(s, ",{:.4}", self.get(i, j));
            }
            s.push('\n');
        }
        s
    }
}

/// Smallest principal angle between every pair of the selected classes.
pub fn smallest_angle_matrix_for(features: &FeatureMatrix, classes: &[usize], dim: BasisDim) -> Result<AngleMatrix> {
    let mut bases = Vec::with_capacity(classes.len());
    for &c in classes {
        let idx = features.class_indices(c);
        if let BasisDim::Fixed(p) = dim {
            if idx.len() < p {
                return Err(SubspaceError::TooFewSamples { class: c, count: idx.len(), requested: p });
            }
        }
        if idx.is_empty() {
            return Err(SubspaceError::TooFewSamples { class: c, count: 0, requested: 1 });
        }
        bases.push(estimate_basis(&columns_matrix(features, &idx), dim)?);
    }
    let k = classes.len();
    let mut degrees = vec![0.0; k * k];
    for i in 0..k {
        for j in i + 1..k {
            let a = principal_angles(&bases[i].basis, &bases[j].basis)?.smallest();
            degrees[i * k + j] = a;
            degrees[j * k + i] = a;
        }
    }
    Ok(AngleMatrix { classes: classes.to_vec(), degrees })
}

pub fn smallest_angle_matrix(features: &FeatureMatrix, dim: BasisDim) -> Result<AngleMatrix> {
    let classes: Vec<usize> = (0..features.num_classes()).collect();
    smallest_angle_matrix_for(features, &classes, dim)
}

/// Result of [`solve_self_expressive`].
#[derive(Clone, Debug)]
pub struct SelfExpressiveSolution {
    /// `n x n` coefficients with zero diagonal; column `j` expresses sample `j`.
    pub coefficients: DMatrix<f64>,
    pub objective: f64,
    /// Objective after each iteration, starting with the initial point.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// `||Y - Y W||_F^2 + lambda ||W||_1`.
pub fn self_expressive_objective(y: &DMatrix<f64>, w: &DMatrix<f64>, lambda: f64) -> f64 {
    let resid = y - y * w;
    resid.norm_squared() + lambda * w.iter().map(|v| v.abs()).sum::<f64>()
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Minimizes `||Y - Y W||_F^2 + lambda ||W||_1` subject to `diag(W) = 0` by
/// proximal gradient (ISTA) with step `1/L`, `L = 2 sigma_max(Y)^2`.
///
/// Stops when the objective decrease falls below `tol * max(1, objective)`;
/// `converged` is false when `max_iter` is reached first, in which case the
/// last (and best, since the sequence is monotone) iterate is returned.
pub fn solve_self_expressive(y: &DMatrix<f64>, lambda: f64, max_iter: usize, tol: f64) -> Result<SelfExpressiveSolution> {
    if !(lambda >= 0.0) {
        return Err(SubspaceError::NegativeLambda(lambda));
    }
    let n = y.ncols();
    let gram = y.transpose() * y;
    let sigma_max = y.singular_values().iter().copied().fold(0.0, f64::max);
    let lipschitz = 2.0 * sigma_max * sigma_max;
    let mut w = DMatrix::<f64>::zeros(n, n);
    let mut obj = self_expressive_objective(y, &w, lambda);
    let mut trace = vec![obj];
    if lipschitz == 0.0 {
        return Ok(SelfExpressiveSolution { coefficients: w, objective: obj, trace, iterations: 0, converged: true });
    }
    let step = 1.0 / lipschitz;
    let thresh = lambda * step;
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..max_iter {
        iterations += 1;
        // gradient of the smooth part: 2 (G W - G)
        let grad = (&gram * &w - &gram) * 2.0;
        let mut next = &w - grad * step;
        next.iter_mut().for_each(|v| *v = soft_threshold(*v, thresh));
        for i in 0..n {
            next[(i, i)] = 0.0;
        }
        let next_obj = self_expressive_objective(y, &next, lambda);
        w = next;
        let decrease = obj - next_obj;
        obj = next_obj;
        trace.push(obj);
        if decrease.abs() <= tol * obj.abs().max(1.0) {
            converged = true;
            break;
        }
    }
    Ok(SelfExpressiveSolution { coefficients: w, objective: obj, trace, iterations, converged })
}

/// Block-diagonal variant: solves each class block of `y` (columns grouped
/// by `layout`) independently and assembles the full `N x N` matrix.
pub fn solve_block_self_expressive(
    y: &DMatrix<f64>,
    layout: &ClassLayout,
    lambda: f64,
    max_iter: usize,
    tol: f64,
) -> Result<SelfExpressiveSolution> {
    let n = layout.num_samples();
    if y.ncols() != n {
        return Err(SubspaceError::BadDimension(format!("{} columns for {n} samples", y.ncols())));
    }
    let mut w = DMatrix::<f64>::zeros(n, n);
    let mut converged = true;
    let mut iterations = 0;
    for c in 0..layout.num_classes() {
        let r = layout.range(c);
        let block = y.columns(r.start, r.len()).into_owned();
        let sol = solve_self_expressive(&block, lambda, max_iter, tol)?;
        w.view_mut((r.start, r.start), (r.len(), r.len())).copy_from(&sol.coefficients);
        converged &= sol.converged;
        iterations = iterations.max(sol.iterations);
    }
    let objective = self_expressive_objective(y, &w, lambda);
    Ok(SelfExpressiveSolution { coefficients: w, objective, trace: vec![objective], iterations, converged })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_columns_give_one_dimensional_basis() {
        let v = [3.0, -4.0, 0.0];
        let data = DMatrix::from_fn(3, 4, |r, _| v[r]);
        let b = estimate_basis(&data, BasisDim::Fixed(1)).unwrap();
        let expect = [0.6, -0.8, 0.0];
        // sign convention: largest magnitude entry positive
        for (x, e) in b.basis.column(0).iter().zip(expect) {
            assert!((x + e).abs() < 1e-12);
        }
        assert!(matches!(
            estimate_basis(&data, BasisDim::Fixed(2)),
            Err(SubspaceError::RankDeficient { requested: 2, rank: 1 })
        ));
        assert_eq!(estimate_basis(&data, BasisDim::Energy(0.95)).unwrap().dim(), 1);
    }

    #[test]
    fn identical_subspaces_have_zero_angles() {
        let u = DMatrix::from_column_slice(3, 2, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let a = principal_angles(&u, &u).unwrap();
        assert!(a.angles.iter().all(|&x| x.abs() < 1e-6));
    }

    #[test]
    fn shared_direction_and_orthogonal_direction() {
        let u1 = DMatrix::from_column_slice(3, 2, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let u2 = DMatrix::from_column_slice(3, 2, &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let a = principal_angles(&u1, &u2).unwrap();
        assert!((a.angles[0] - 0.0).abs() < 1e-9);
        assert!((a.angles[1] - 90.0).abs() < 1e-9);
    }

    #[test]
    fn ambient_mismatch_is_an_error() {
        let u1 = DMatrix::<f64>::identity(3, 1);
        let u2 = DMatrix::<f64>::identity(4, 1);
        assert_eq!(principal_angles(&u1, &u2), Err(SubspaceError::AmbientMismatch(3, 4)));
    }

    #[test]
    fn large_lambda_gives_zero_coefficients() {
        let y = DMatrix::from_fn(4, 5, |r, c| ((r * 5 + c) as f64 * 0.7).sin());
        let g = y.transpose() * &y;
        let lambda = 2.0 * g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let sol = solve_self_expressive(&y, lambda, 100, 1e-12).unwrap();
        assert!(sol.coefficients.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_columns_express_each_other() {
        let col = [1.0, 2.0, -1.0];
        let y = DMatrix::from_fn(3, 2, |r, _| col[r]);
        let sol = solve_self_expressive(&y, 1e-4, 100_000, 1e-15).unwrap();
        let w = &sol.coefficients;
        assert_eq!(w[(0, 0)], 0.0);
        assert_eq!(w[(1, 1)], 0.0);
        assert!((w[(0, 1)] - 1.0).abs() < 1e-3 && (w[(1, 0)] - 1.0).abs() < 1e-3, "{w}");
    }

    #[test]
    fn ista_objective_is_monotone_with_zero_diagonal() {
        let y = DMatrix::from_fn(6, 9, |r, c| ((r * 9 + c) as f64 * 1.3).cos());
        let sol = solve_self_expressive(&y, 0.05, 500, 0.0).unwrap();
        for w in sol.trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12 * w[0].abs());
        }
        assert!((0..9).all(|i| sol.coefficients[(i, i)] == 0.0));
    }

    #[test]
    fn angle_matrix_csv_layout() {
        let m = AngleMatrix { classes: vec![3, 5], degrees: vec![0.0, 19.72, 19.72, 0.0] };
        assert_eq!(m.to_csv(None), "class,3,5\n3,0.0000,19.7200\n5,19.7200,0.0000\n");
        assert_eq!(m.min_off_diagonal(), 19.72);
    }
}
