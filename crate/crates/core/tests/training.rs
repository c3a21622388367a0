use nalgebra::DMatrix;
use subsep::data::{synthesize_union_of_subspaces, SynthSpec};
use subsep::model::{ClassLayout, LayerSpec, LossWeights};
use subsep::optim::{fit, TrainConfig};
use subsep::subspace::solve_self_expressive;

fn config(iterations: usize, weights: LossWeights, seed: u64) -> TrainConfig {
    TrainConfig { iterations, learning_rate: 1e-3, weights, log_every: 1, seed, early_stop: false }
}

fn two_subspaces() -> subsep::data::LabeledDataset {
    let spec = SynthSpec { noise: 0.01, shape: Some((6, 6)), seed: 12, ..SynthSpec::new(36, 2, 2, 8) };
    let mut d = synthesize_union_of_subspaces(&spec).unwrap().dataset;
    d.pixels.iter_mut().for_each(|v| *v = 0.5 + 0.5 * *v);
    d
}

#[test]
fn plain_autoencoder_reconstruction_decreases() {
    let d = two_subspaces();
    let arch = [LayerSpec::new(3, 3, false), LayerSpec::new(2, 3, false)];
    let (_, history) = fit(&arch, &d.images_tensor(), &d.labels, &config(50, LossWeights::zero(), 3), |_| {}).unwrap();
    assert_eq!(history.records.len(), 50);
    for w in history.records.windows(2) {
        assert!(w[1].terms.recon < w[0].terms.recon, "iter {}: {} -> {}", w[1].iter, w[0].terms.recon, w[1].terms.recon);
        assert_eq!(w[1].terms.total, w[1].terms.recon);
    }
}

#[test]
fn full_loss_drives_separation_down_and_keeps_structure() {
    let d = two_subspaces();
    let arch = [LayerSpec::new(4, 3, false), LayerSpec::new(3, 3, false)];
    let weights = LossWeights::new(1.0, 0.1, 10.0).unwrap();
    let cfg = TrainConfig { log_every: 25, ..config(600, weights, 5) };
    let (model, history) = fit(&arch, &d.images_tensor(), &d.labels, &cfg, |_| {}).unwrap();
    let first = history.first().unwrap().terms.separation;
    let last = history.last().unwrap().terms.separation;
    assert!(last < 0.01 * first, "separation {first} -> {last}");

    for r in &history.records {
        let want = r.terms.weighted_total(&weights);
        assert!((r.terms.total - want).abs() <= 1e-12 * want.abs().max(1.0), "iter {}", r.iter);
    }
    let n = model.num_samples();
    let labels = model.layout().labels();
    for a in 0..n {
        for b in 0..n {
            if a == b || labels[a] != labels[b] {
                assert_eq!(model.csse.data()[a * n + b], 0.0, "entry ({a}, {b})");
            }
        }
    }
}

#[test]
fn same_seed_same_model() {
    let d = two_subspaces();
    let arch = [LayerSpec::new(2, 3, true)];
    let weights = LossWeights::new(1.0, 0.5, 5.0).unwrap();
    let run = || fit(&arch, &d.images_tensor(), &d.labels, &config(20, weights, 8), |_| {}).unwrap();
    let (m1, h1) = run();
    let (m2, h2) = run();
    assert_eq!(m1, m2);
    assert_eq!(h1, h2);
}

#[test]
fn solver_recovers_block_structure_on_synthetic_union() {
    let spec = SynthSpec { noise: 0.01, seed: 4, ..SynthSpec::new(50, 3, 3, 20) };
    let s = synthesize_union_of_subspaces(&spec).unwrap();
    let d = &s.dataset;
    let y = DMatrix::from_fn(50, d.len(), |r, c| d.image(c)[r]);
    let sol = solve_self_expressive(&y, 0.1, 20_000, 1e-10).unwrap();
    let layout = ClassLayout::from_sorted_labels(&d.labels).unwrap();
    let labels = layout.labels();
    let (mut inside, mut total) = (0.0, 0.0);
    for ((r, c), v) in sol.coefficients.iter().enumerate().map(|(i, v)| ((i % d.len(), i / d.len()), v)) {
        total += v.abs();
        if labels[r] == labels[c] {
            inside += v.abs();
        }
    }
    assert!(inside >= 0.99 * total, "in-block mass {:.4}", inside / total);
}
