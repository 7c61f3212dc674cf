mod common;

use common::{gat_error, gat_setup, op_errors, values, FD_INSTANCES, FD_TOL};
use gvqa_core::estimators::SampleBackward;
use gvqa_core::tensor::{Tape, Tensor};
use gvqa_core::RandomSource;

#[test]
fn every_op_matches_finite_differences() {
    let errors = op_errors();
    assert_eq!(errors.len(), 20);
    for (name, worst) in errors {
        assert!(worst < FD_TOL, "{name}: worst relative error {worst:e}");
    }
}

#[test]
fn subset_sample_routes_through_rule() {
    let mut rng = RandomSource::new(5);
    for _ in 0..FD_INSTANCES {
        let n = 3 + rng.below(6);
        let k = 1 + rng.below(n - 1);
        let theta = values(&mut rng, n);
        let w = values(&mut rng, n);
        let rule = SampleBackward::Simple { theta: theta.clone(), k };
        let mut tape = Tape::new();
        let th = tape.leaf(Tensor::vector(theta.clone()).unwrap());
        let wv = tape.leaf(Tensor::vector(w.clone()).unwrap());
        let mask = gvqa_core::subset::topk_map(&theta, k).unwrap().to_f64();
        let z = tape.subset_sample(th, mask, rule.clone()).unwrap();
        let loss = tape.dot(z, wv).unwrap();
        let grads = tape.backward(loss).unwrap();
        let want = rule.apply(&w).unwrap();
        for (a, b) in grads.get(th).unwrap().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn gat_layer_gradients() {
    let worst = gat_error(20);
    assert!(worst < FD_TOL, "GAT worst relative error {worst:e}");
}

#[test]
fn gat_is_permutation_equivariant() {
    for seed in 0..20 {
        let n = 5;
        let (store, layer, h, adj) = gat_setup(seed, n);
        let mut perm: Vec<usize> = (0..n).collect();
        RandomSource::new(seed + 7).shuffle(&mut perm);
        let hp = Tensor::matrix(n, 4, perm.iter().flat_map(|&p| h.row(p).to_vec()).collect()).unwrap();
        let adjp: Vec<bool> = (0..n * n).map(|idx| adj[perm[idx / n] * n + perm[idx % n]]).collect();
        let run = |h: &Tensor, adj: &[bool]| {
            let mut tape = Tape::new();
            let hv = tape.leaf(h.clone());
            let (out, attn) = layer.forward_with_attention(&mut tape, &store, hv, adj).unwrap();
            for a in attn {
                let a = tape.value(a);
                for i in 0..n {
                    let row = a.row(i);
                    assert!(row.iter().all(|v| *v >= 0.0));
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-8);
                    for j in 0..n {
                        if i != j && !adj[i * n + j] {
                            assert_eq!(row[j], 0.0);
                        }
                    }
                }
            }
            tape.value(out).clone()
        };
        let base = run(&h, &adj);
        let permuted = run(&hp, &adjp);
        for (i, &p) in perm.iter().enumerate() {
            for (a, b) in permuted.row(i).iter().zip(base.row(p)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
