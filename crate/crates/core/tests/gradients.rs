mod support;

use subsep::tensor::Graph;
use support::{check, toys, TOLERANCE};

macro_rules! term_test {
    ($name:ident, $field:ident) => {
        #[test]
        fn $name() {
            for (i, t) in toys().iter().enumerate() {
                let worst = check(t, |lg| lg.$field);
                assert!(worst < TOLERANCE, "toy {i}: relative error {worst:e}");
            }
        }
    };
}

term_test!(reconstruction_term, recon);
term_test!(self_expression_term, selfexpr);
term_test!(sparsity_term, l1);
term_test!(separation_term, separation);
term_test!(full_objective, total);

#[test]
fn off_block_coefficients_get_no_gradient() {
    let t = &toys()[0];
    let mut g = Graph::new();
    let lg = t.model.loss_graph(&mut g, &t.images, &t.weights).unwrap();
    let grads = g.backward(lg.total).unwrap();
    let gc = grads.wrt(&g, lg.params.csse);
    let n = t.model.num_samples();
    let labels = t.model.layout().labels();
    for a in 0..n {
        for b in 0..n {
            if labels[a] != labels[b] {
                assert_eq!(gc.data()[a * n + b], 0.0);
            }
        }
    }
}
