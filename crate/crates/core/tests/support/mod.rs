#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use subsep::model::{LayerSpec, LossGraph, LossWeights, ModelParams, ParamVars};
use subsep::tensor::{gradient_check, Graph, Tensor, Var};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

pub fn gaussian(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

pub fn orthonormal(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    gaussian(rng, r, c).qr().q().columns(0, c).into_owned()
}

// Greedy maximization of u.v over unit vectors of the two spans, each new
// pair constrained orthogonal to the earlier ones.
pub fn recursive_angles(u1: &DMatrix<f64>, u2: &DMatrix<f64>, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let p = u1.ncols().min(u2.ncols());
    let mut us: Vec<DVector<f64>> = Vec::new();
    let mut vs: Vec<DVector<f64>> = Vec::new();
    let project = |basis: &DMatrix<f64>, taken: &[DVector<f64>], x: &DVector<f64>| {
        let mut y = basis * (basis.transpose() * x);
        for t in taken {
            let c = t.dot(&y);
            y -= t * c;
        }
        y.normalize()
    };
    let mut out = Vec::new();
    for _ in 0..p {
        let mut best = (-1.0, DVector::zeros(0), DVector::zeros(0));
        for _restart in 0..4 {
            let start = DVector::from_fn(u1.nrows(), |_, _| rng.sample(StandardNormal));
            let mut u = project(u1, &us, &start);
            let mut v = project(u2, &vs, &u);
            let mut prev = -2.0;
            for _ in 0..200_000 {
                u = project(u1, &us, &v);
                v = project(u2, &vs, &u);
                let c = u.dot(&v);
                if (c - prev).abs() < 1e-16 {
                    break;
                }
                prev = c;
            }
            let c = u.dot(&v);
            if c > best.0 {
                best = (c, u, v);
            }
        }
        out.push(best.0.clamp(-1.0, 1.0).acos().to_degrees());
        us.push(best.1);
        vs.push(best.2);
    }
    out
}

// Cyclic coordinate descent on each column of ||Y - YW||^2 + lambda ||W||_1
// with w_jj fixed at zero.
pub fn lasso_cd(y: &DMatrix<f64>, lambda: f64) -> DMatrix<f64> {
    let n = y.ncols();
    let sq: Vec<f64> = (0..n).map(|i| y.column(i).norm_squared()).collect();
    let mut w = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut r: DVector<f64> = y.column(j).into_owned();
        for _sweep in 0..1_000_000 {
            let mut moved: f64 = 0.0;
            for i in 0..n {
                if i == j || sq[i] == 0.0 {
                    continue;
                }
                let old = w[(i, j)];
                let rho = y.column(i).dot(&r) + old * sq[i];
                let new = if rho > lambda / 2.0 {
                    (rho - lambda / 2.0) / sq[i]
                } else if rho < -lambda / 2.0 {
                    (rho + lambda / 2.0) / sq[i]
                } else {
                    0.0
                };
                if new != old {
                    r -= y.column(i) * (new - old);
                    w[(i, j)] = new;
                    moved = moved.max((new - old).abs());
                }
            }
            if moved < 1e-15 {
                break;
            }
        }
    }
    w
}

// Global lasso minimum of ||x - D a||^2 + gamma ||a||_1 by enumerating every
// support of size <= rank(D) and every sign pattern on it.
pub fn lasso_exhaustive(d: &DMatrix<f64>, x: &DVector<f64>, gamma: f64) -> DVector<f64> {
    let n = d.ncols();
    let objective = |a: &DVector<f64>| (x - d * a).norm_squared() + gamma * a.abs().sum();
    let mut best = DVector::zeros(n);
    let mut best_obj = objective(&best);
    for mask in 1u32..(1 << n) {
        let support: Vec<usize> = (0..n).filter(|&i| mask >> i & 1 == 1).collect();
        let k = support.len();
        if k > d.nrows() {
            continue;
        }
        let ds = DMatrix::from_fn(d.nrows(), k, |r, c| d[(r, support[c])]);
        let gram = ds.transpose() * &ds;
        let Some(inv) = gram.try_inverse() else { continue };
        let rhs = ds.transpose() * x;
        for signs in 0u32..(1 << k) {
            let s = DVector::from_fn(k, |i, _| if signs >> i & 1 == 1 { -1.0 } else { 1.0 });
            let a_s = &inv * (&rhs - &s * (gamma / 2.0));
            if a_s.iter().zip(s.iter()).any(|(a, s)| a * s <= 0.0) {
                continue;
            }
            let mut a = DVector::zeros(n);
            for (c, &i) in support.iter().enumerate() {
                a[i] = a_s[c];
            }
            let o = objective(&a);
            if o < best_obj {
                best_obj = o;
                best = a;
            }
        }
    }
    best
}

pub struct Toy {
    pub model: ModelParams,
    pub images: Tensor,
    pub weights: LossWeights,
}

pub fn toy(seed: u64, arch: &[LayerSpec], hw: (usize, usize), labels: &[usize]) -> Toy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = ModelParams::build(arch, hw, labels, seed).unwrap();
    for l in model.encoder.iter_mut().chain(model.decoder.iter_mut()) {
        l.bias.data_mut().iter_mut().for_each(|b| *b = rng.random_range(-0.3..0.3));
    }
    let mask = model.csse_mask().to_vec();
    for (v, m) in model.csse.data_mut().iter_mut().zip(mask) {
        *v = m * rng.random_range(-0.5..0.5);
    }
    let n = labels.len();
    let data = (0..n * hw.0 * hw.1).map(|_| rng.random_range(0.0..1.0)).collect();
    let images = Tensor::new(vec![n, 1, hw.0, hw.1], data).unwrap();
    let weights = LossWeights::new(rng.random_range(0.1..2.0), rng.random_range(0.1..1.0), rng.random_range(1.0..20.0)).unwrap();
    Toy { model, images, weights }
}

pub fn check(t: &Toy, pick: fn(&LossGraph) -> Var) -> f64 {
    let params: Vec<Tensor> = t.model.tensors().into_iter().cloned().collect();
    let layers = t.model.arch().len();
    let report = gradient_check(
        |g: &mut Graph, vars: &[Var]| {
            let pv = ParamVars::from_flat(vars, layers).expect("flat parameter list");
            let lg = t.model.loss_graph_on(g, &t.images, pv, &t.weights).map_err(|e| match e {
                subsep::model::ModelError::Tensor(te) => te,
                other => panic!("{other}"),
            })?;
            Ok(pick(&lg))
        },
        &params,
        STEP,
        TOLERANCE,
    )
    .unwrap();
    assert!(report.coords_checked > 0);
    report.worst
}

pub fn toys() -> Vec<Toy> {
    vec![
        toy(1, &[LayerSpec::new(3, 3, false), LayerSpec::new(2, 3, true)], (6, 5), &[0, 0, 0, 1, 1, 2, 2]),
        toy(2, &[LayerSpec::new(2, 5, false), LayerSpec::new(3, 3, false), LayerSpec::new(2, 3, false)], (9, 8), &[0, 0, 1, 1, 1]),
        toy(3, &[LayerSpec::new(4, 3, true)], (4, 7), &[0, 0, 1, 1, 2, 2, 2, 3, 3]),
    ]
}

