mod support;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use subsep::classify::{src_classify_batch, SrcConfig};
use subsep::model::{FeatureMatrix, LayerSpec, LossWeights, ModelParams};
use subsep::subspace::{principal_angles, self_expressive_objective, solve_self_expressive};
use subsep::Tensor;
use support::{gaussian, lasso_cd, lasso_exhaustive, orthonormal, recursive_angles};

#[test]
fn principal_angles_match_recursive_maximization() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for case in 0..30 {
        let ambient = rng.random_range(4..=6);
        let p1 = rng.random_range(2..=3);
        let p2 = rng.random_range(2..=3);
        let a = orthonormal(&mut rng, ambient, p1);
        let b = orthonormal(&mut rng, ambient, p2);
        let got = principal_angles(&a, &b).unwrap().angles;
        let want = recursive_angles(&a, &b, &mut rng);
        assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 0.01, "case {case}: {got:?} vs {want:?}");
        }
    }
}

#[test]
fn self_expressive_solver_matches_coordinate_descent() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..20 {
        let rows = rng.random_range(3..=10);
        let cols = rng.random_range(4..=16);
        let y = gaussian(&mut rng, rows, cols);
        let lambda = rng.random_range(0.05..1.0);
        let sol = solve_self_expressive(&y, lambda, 2_000_000, 0.0).unwrap();
        let oracle = self_expressive_objective(&y, &lasso_cd(&y, lambda), lambda);
        let gap = sol.objective - oracle;
        assert!(gap.abs() < 1e-6, "case {case} ({rows}x{cols}, lambda {lambda:.3}): gap {gap:e}");
        assert!((0..cols).all(|i| sol.coefficients[(i, i)] == 0.0));
    }
}

#[test]
fn src_matches_exhaustive_lasso_on_twelve_atoms() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let (dim, per_class, classes) = (5, 4, 3);
    let gamma = 0.05;
    let config = SrcConfig { gamma, max_iter: 2_000_000, tol: 1e-13 };
    for case in 0..4 {
        let atoms = gaussian(&mut rng, dim, per_class * classes);
        let labels: Vec<usize> = (0..classes * per_class).map(|i| i / per_class).collect();
        let dict = FeatureMatrix::from_columns(
            &(0..atoms.ncols()).map(|i| atoms.column(i).iter().copied().collect()).collect::<Vec<_>>(),
            labels.clone(),
        )
        .unwrap();
        let queries: Vec<Vec<f64>> = (0..6)
            .map(|q| {
                let c = q % classes;
                let mix = atoms.columns(c * per_class, per_class) * gaussian(&mut rng, per_class, 1);
                (mix + gaussian(&mut rng, dim, 1) * 0.05).iter().copied().collect()
            })
            .collect();
        let qm = FeatureMatrix::from_columns(&queries, vec![0; queries.len()]).unwrap();
        let got = src_classify_batch(&dict, &qm, &config).unwrap();

        let mut unit = atoms.clone();
        unit.column_iter_mut().for_each(|mut c| {
            c.normalize_mut();
        });
        for (qi, q) in queries.iter().enumerate() {
            let x = DVector::from_column_slice(q);
            let scale = x.norm();
            let xn = &x / scale;
            let a = lasso_exhaustive(&unit, &xn, gamma);
            let residuals: Vec<f64> = (0..classes)
                .map(|c| {
                    let mut part = a.clone();
                    part.iter_mut().enumerate().filter(|(i, _)| labels[*i] != c).for_each(|(_, v)| *v = 0.0);
                    (&xn - &unit * part).norm() * scale
                })
                .collect();
            let label = (0..classes).min_by(|&a, &b| residuals[a].total_cmp(&residuals[b])).unwrap();
            assert_eq!(got[qi].label, label, "case {case} query {qi}");
            for (g, w) in got[qi].residuals.iter().zip(&residuals) {
                assert!((g - w).abs() < 1e-6 * scale.max(1.0), "case {case} query {qi}: {g} vs {w}");
            }
        }
    }
}

#[test]
fn loss_terms_match_direct_formulas() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let labels = [0, 0, 0, 1, 1, 1, 1];
    let arch = [LayerSpec::new(3, 3, true), LayerSpec::new(2, 3, false)];
    let (h, w) = (9, 7);
    let mut model = ModelParams::build(&arch, (h, w), &labels, 4).unwrap();
    let mask = model.csse_mask().to_vec();
    for (v, m) in model.csse.data_mut().iter_mut().zip(mask) {
        *v = m * rng.random_range(-0.4..0.4);
    }
    let n = labels.len();
    let pixels: Vec<f64> = (0..n * h * w).map(|_| rng.random_range(0.0..1.0)).collect();
    let images = Tensor::new(vec![n, 1, h, w], pixels.clone()).unwrap();
    let weights = LossWeights::new(0.7, 0.3, 12.0).unwrap();
    let terms = model.loss_terms(&images, &labels, &weights).unwrap();

    let x = model.encode(&images, &labels).unwrap();
    let d = x.dim();
    let g = model.csse.data();
    let mut xg = vec![0.0; n * d];
    for j in 0..n {
        for a in 0..n {
            for k in 0..d {
                xg[j * d + k] += x.column(a)[k] * g[a * n + j];
            }
        }
    }
    let xg_fm = FeatureMatrix::new(d, xg.clone(), labels.to_vec()).unwrap();
    let recon_img = model.decode(&xg_fm).unwrap();
    let recon = 0.5 * pixels.iter().zip(recon_img.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    let selfexpr: f64 = (0..n * d).map(|i| (x.as_sample_major()[i] - xg[i]).powi(2)).sum();
    let l1: f64 = g.iter().map(|v| v.abs()).sum();
    let mut separation = 0.0;
    for a in 0..n {
        for b in 0..n {
            if labels[a] < labels[b] {
                let dot: f64 = x.column(a).iter().zip(x.column(b)).map(|(p, q)| p * q).sum();
                separation += dot * dot;
            }
        }
    }
    let total = recon + 0.7 * selfexpr + 0.3 * l1 + 12.0 * separation;
    let close = |got: f64, want: f64| (got - want).abs() <= 1e-12 * want.abs().max(1.0);
    assert!(close(terms.recon, recon), "{} vs {recon}", terms.recon);
    assert!(close(terms.selfexpr, selfexpr), "{} vs {selfexpr}", terms.selfexpr);
    assert!(close(terms.l1, l1), "{} vs {l1}", terms.l1);
    assert!(close(terms.separation, separation), "{} vs {separation}", terms.separation);
    assert!(close(terms.total, total), "{} vs {total}", terms.total);
}

#[test]
fn csse_output_ignores_other_classes() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let labels = [0, 0, 1, 1, 1, 2, 2];
    let n = labels.len();
    let mut model = ModelParams::build(&[LayerSpec::new(2, 3, false)], (4, 4), &labels, 1).unwrap();
    let mask = model.csse_mask().to_vec();
    for (v, m) in model.csse.data_mut().iter_mut().zip(mask) {
        *v = m * rng.random_range(-1.0..1.0);
    }
    let d = model.feature_dim();
    let data: Vec<f64> = (0..n * d).map(|_| rng.sample(StandardNormal)).collect();
    let x = FeatureMatrix::new(d, data.clone(), labels.to_vec()).unwrap();
    let base = model.csse_apply(&x).unwrap();
    for k in 0..n {
        let mut bumped = data.clone();
        bumped[k * d..(k + 1) * d].iter_mut().for_each(|v| *v += rng.random_range(1.0..5.0));
        let out = model.csse_apply(&FeatureMatrix::new(d, bumped, labels.to_vec()).unwrap()).unwrap();
        for j in (0..n).filter(|&j| labels[j] != labels[k]) {
            assert_eq!(out.column(j), base.column(j), "column {j} moved when column {k} changed");
        }
    }
}
