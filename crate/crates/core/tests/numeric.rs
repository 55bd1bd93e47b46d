mod common;

use common::numeric::*;
use common::{brute_nt_xent, random_tensor, rng};
use proptest::prelude::*;
use refine::{Tape, Tensor};

#[test]
fn conv2d_matches_direct_loops_on_100_instances() {
    let err = conv_oracle_max_err(100, 11);
    assert!(err <= 1e-6, "max abs error {err:e}");
}

#[test]
fn every_op_passes_finite_difference_checks() {
    for (op, err) in gradcheck_all_ops(5, 2024) {
        assert!(err <= 1e-5, "{op}: relative gradient error {err:e}");
    }
}

#[test]
fn cross_entropy_matches_per_row_definition() {
    for seed in 0..5 {
        assert!(cross_entropy_oracle_err(seed) <= 1e-6);
    }
    assert!((uniform_cross_entropy() - 5f64.ln()).abs() <= 1e-6);
}

#[test]
fn nt_xent_matches_double_loop() {
    for seed in 0..5 {
        assert!(nt_xent_oracle_err(seed) <= 1e-6);
    }
}

#[test]
fn conv2d_is_bitwise_deterministic() {
    let mut r = rng(5);
    let x = random_tensor(&mut r, &[2, 3, 8, 8]).cast::<f32>();
    let w = random_tensor(&mut r, &[4, 3, 3, 3]).cast::<f32>();
    let run = || {
        let mut tape = Tape::<f32>::new();
        let xv = tape.leaf(x.clone(), false);
        let wv = tape.leaf(w.clone(), false);
        let y = tape.conv2d(xv, wv, 2, 1).unwrap();
        tape.value(y).clone()
    };
    assert!(run().bit_eq(&run()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn cross_entropy_is_row_permutation_invariant(seed in any::<u64>(), n in 2usize..8) {
        let mut r = rng(seed);
        let logits = random_tensor(&mut r, &[n, 4]);
        let labels: Vec<usize> = (0..n).map(|i| (i * 3 + seed as usize) % 4).collect();
        let perm: Vec<usize> = (0..n).rev().collect();
        let permuted = logits.select_rows(&perm).unwrap();
        let plabels: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(logits, false);
        let b = tape.leaf(permuted, false);
        let la = tape.softmax_cross_entropy(a, &labels).unwrap();
        let lb = tape.softmax_cross_entropy(b, &plabels).unwrap();
        prop_assert!((tape.value(la).data()[0] - tape.value(lb).data()[0]).abs() <= 1e-6);
    }

    #[test]
    fn nt_xent_is_pair_permutation_invariant(seed in any::<u64>(), pairs in 2usize..6) {
        let mut r = rng(seed);
        let emb = random_tensor(&mut r, &[2 * pairs, 3]);
        // rotate the pairs, and swap the views inside each pair
        let rows: Vec<usize> = (0..pairs)
            .flat_map(|p| { let q = (p + 1) % pairs; [2 * q + 1, 2 * q] })
            .collect();
        let permuted = emb.select_rows(&rows).unwrap();
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(emb.clone(), false);
        let b = tape.leaf(permuted, false);
        let la = tape.nt_xent(a, 0.3).unwrap();
        let lb = tape.nt_xent(b, 0.3).unwrap();
        let va = tape.value(la).data()[0];
        prop_assert!((va - tape.value(lb).data()[0]).abs() <= 1e-6);
        prop_assert!((va - brute_nt_xent(emb.data(), 2 * pairs, 3, 0.3)).abs() <= 1e-9);
        prop_assert!(va >= 0.0);
    }
}

#[test]
fn batchnorm_single_step_running_average() {
    // batch values per channel: [1, 3, 5, 7] → mean 4, unbiased var 20/3
    let x = Tensor::<f32>::new(&[4, 1], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
    let mut tape = Tape::<f32>::new();
    let xv = tape.leaf(x, false);
    let g = tape.leaf(Tensor::ones(&[1]), false);
    let b = tape.leaf(Tensor::zeros(&[1]), false);
    let (_, stats) = tape.batch_norm(xv, g, b, refine::autograd::BnMode::Train { eps: 1e-5 }).unwrap();
    let stats = stats.unwrap();
    let mut running = refine::autograd::RunningStats { mean: vec![0.5], var: vec![2.0] };
    running.update(&stats, 0.1);
    // 0.9·0.5 + 0.1·4 = 0.85 ; 0.9·2 + 0.1·20/3 = 2.4666…
    assert!((running.mean[0] - 0.85).abs() < 1e-6);
    assert!((running.var[0] - (1.8 + 2.0 / 3.0)).abs() < 1e-6);
}
