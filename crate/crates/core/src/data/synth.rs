use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{DataError, LabeledDataset, Result};
use crate::subspace::principal_angles;

const RETRY_BUDGET: usize = 2000;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub ambient: usize,
    pub dim: usize,
    pub classes: usize,
    pub per_class: usize,
    pub noise: f64,
    /// Lower bound on every pairwise smallest principal angle.
    pub min_angle_deg: f64,
    /// When set, bases share a common direction block so that every
    /// principal angle between any two classes equals this value.
    pub max_angle_deg: Option<f64>,
    /// Image shape with `h * w == ambient`; `(ambient, 1)` when absent.
    pub shape: Option<(usize, usize)>,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(ambient: usize, dim: usize, classes: usize, per_class: usize) -> Self {
        SynthSpec {
            ambient,
            dim,
            classes,
            per_class,
            noise: 0.0,
            min_angle_deg: 0.0,
            max_angle_deg: None,
            shape: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub dataset: LabeledDataset,
    /// Ground-truth orthonormal `ambient x dim` basis per class.
    pub bases: Vec<DMatrix<f64>>,
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

fn orthonormal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    gaussian(rng, rows, cols).qr().q().columns(0, cols).into_owned()
}

fn min_pairwise_angle(bases: &[DMatrix<f64>]) -> f64 {
    let mut best = 90.0f64;
    for i in 0..bases.len() {
        for j in i + 1..bases.len() {
            if let Ok(s) = principal_angles(&bases[i], &bases[j]) {
                best = best.min(s.smallest());
            }
        }
    }
    best
}

fn split_columns(q: &DMatrix<f64>, block: usize, count: usize, skip: usize) -> Vec<DMatrix<f64>> {
    (0..count).map(|i| q.columns(skip + i * block, block).into_owned()).collect()
}

fn draw_bases(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Result<Vec<DMatrix<f64>>> {
    let (d, ds, c) = (spec.ambient, spec.dim, spec.classes);
    if let Some(target) = spec.max_angle_deg {
        if !(0.0..=90.0).contains(&target) || target < spec.min_angle_deg {
            return Err(DataError::Generation(format!(
                "angle {target} outside [{}, 90]",
                spec.min_angle_deg
            )));
        }
        if d < ds * (c + 1) {
            return Err(DataError::Generation(format!("ambient {d} too small for {c} bases sharing a {ds}-dim block")));
        }
        // B_i = S cos(phi) + Q_i sin(phi) with S, Q_i mutually orthogonal gives
        // B_i^T B_j = cos^2(phi) I, so every angle is acos(cos^2 phi).
        let phi = target.to_radians().cos().sqrt().acos();
        let q = orthonormal(rng, d, ds * (c + 1));
        let shared = q.columns(0, ds).into_owned();
        return Ok(split_columns(&q, ds, c, ds)
            .into_iter()
            .map(|own| &shared * phi.cos() + own * phi.sin())
            .collect());
    }
    if spec.min_angle_deg >= 90.0 {
        if d < ds * c {
            return Err(DataError::Generation(format!("{c} orthogonal {ds}-dim subspaces do not fit in R^{d}")));
        }
        return Ok(split_columns(&orthonormal(rng, d, ds * c), ds, c, 0));
    }
    for _ in 0..RETRY_BUDGET {
        let bases: Vec<_> = (0..c).map(|_| orthonormal(rng, d, ds)).collect();
        if min_pairwise_angle(&bases) >= spec.min_angle_deg {
            return Ok(bases);
        }
    }
    Err(DataError::Generation(format!(
        "no bases with pairwise angle >= {} after {RETRY_BUDGET} draws",
        spec.min_angle_deg
    )))
}

/// Draws `classes` subspaces of dimension `dim` in `R^ambient` and samples
/// `per_class` points from each: Gaussian coefficients with variance
/// `1 / dim` plus isotropic `N(0, noise^2)` ambient noise. Samples are
/// grouped by class.
pub fn synthesize_union_of_subspaces(spec: &SynthSpec) -> Result<SyntheticData> {
    let (d, ds) = (spec.ambient, spec.dim);
    if ds == 0 || ds >= d {
        return Err(DataError::Generation(format!("need 0 < dim < ambient, got {ds} and {d}")));
    }
    if spec.per_class <= ds {
        return Err(DataError::Generation(format!("need more than {ds} samples per class")));
    }
    if spec.classes == 0 {
        return Err(DataError::Generation("no classes requested".into()));
    }
    let (h, w) = spec.shape.unwrap_or((d, 1));
    if h * w != d {
        return Err(DataError::Generation(format!("shape {h}x{w} does not hold {d} values")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let bases = draw_bases(spec, &mut rng)?;
    let coef_scale = (1.0 / ds as f64).sqrt();
    let mut pixels = Vec::with_capacity(spec.classes * spec.per_class * d);
    let mut labels = Vec::new();
    for (c, b) in bases.iter().enumerate() {
        for _ in 0..spec.per_class {
            let coef = gaussian(&mut rng, ds, 1) * coef_scale;
            let x = b * coef;
            for v in x.iter() {
                let n: f64 = rng.sample(StandardNormal);
                pixels.push(v + spec.noise * n);
            }
            labels.push(c);
        }
    }
    let names = (0..spec.classes).map(|c| format!("subspace{c}")).collect();
    let dataset = LabeledDataset::new("synthetic", (h, w), pixels, labels, names)?;
    Ok(SyntheticData { dataset, bases })
}
