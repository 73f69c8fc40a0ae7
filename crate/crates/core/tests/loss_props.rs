use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdmp::losses::{
    dino_mixing_loss, dino_source_loss, eval_scalar, info_nce, moco_mixing_loss, moco_source_loss,
    soft_cross_entropy, source_mixture, teacher_distribution, LossWeights, WeightMode,
};
use sdmp::mixing::{compute_lambda_c, pair_map};
use sdmp::tensor::{Tape, Tensor};

fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
    let mut rows = Vec::new();
    for _ in 0..n {
        let r: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        rows.push(r.iter().map(|v| v / norm).collect());
    }
    Tensor::from_rows(&rows).unwrap()
}

fn distributions(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Tensor {
    let logits = Tensor::new(vec![n, k], (0..n * k).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
    teacher_distribution(&logits, &vec![0.0; k], 1.0).unwrap()
}

fn weights(lambdas: &[f64], pair: &[usize], src: WeightMode, mix: WeightMode) -> LossWeights {
    LossWeights::new(lambdas, &compute_lambda_c(lambdas, pair), src, mix)
}

fn mode() -> impl Strategy<Value = WeightMode> {
    prop_oneof![Just(WeightMode::Random), Just(WeightMode::Static)]
}

/// Source and mixing losses of both frameworks on one batch.
fn all_losses(y: &Tensor, k: &Tensor, km: &Tensor, pt: &Tensor, ptm: &Tensor, lambdas: &[f64], pair: &[usize], src: WeightMode, mix: WeightMode) -> [f64; 4] {
    let w = weights(lambdas, pair, src, mix);
    let tau = 0.2;
    [
        eval_scalar(|t| moco_source_loss(t.constant(y.clone()), t.constant(k.clone()), &w, pair, tau)).unwrap(),
        eval_scalar(|t| moco_mixing_loss(t.constant(y.clone()), t.constant(km.clone()), &w, pair, tau)).unwrap(),
        eval_scalar(|t| dino_source_loss(pt, t.constant(y.clone()), &w, pair, 0.1)).unwrap(),
        eval_scalar(|t| dino_mixing_loss(ptm, t.constant(y.clone()), &w, pair, 0.1)).unwrap(),
    ]
}

proptest! {
    #[test]
    fn weight_pairs_sum_to_one(lambdas in prop::collection::vec(0.0f64..=1.0, 2..40), src in mode(), mix in mode()) {
        let mut lambdas = lambdas;
        if lambdas.len() % 2 == 1 { lambdas.pop(); }
        let w = weights(&lambdas, &pair_map(lambdas.len()), src, mix);
        for (a, b) in w.source.iter().chain(&w.mix) {
            prop_assert!((a + b - 1.0).abs() < 1e-12);
            prop_assert!(*a >= 0.0 && *b >= 0.0);
        }
    }

    #[test]
    fn losses_are_permutation_equivariant(seed in any::<u64>(), half in 1usize..6, src in mode(), mix in mode()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 2 * half;
        let (y, k, km) = (unit_rows(&mut rng, n, 5), unit_rows(&mut rng, n, 5), unit_rows(&mut rng, n, 5));
        let (pt, ptm) = (distributions(&mut rng, n, 5), distributions(&mut rng, n, 5));
        let lambdas: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let pair = pair_map(n);
        let base = all_losses(&y, &k, &km, &pt, &ptm, &lambdas, &pair, src, mix);

        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let mut inv = vec![0; n];
        for (i, &p) in perm.iter().enumerate() { inv[p] = i; }
        let p_pair: Vec<usize> = perm.iter().map(|&p| inv[pair[p]]).collect();
        let p_lambdas: Vec<f64> = perm.iter().map(|&p| lambdas[p]).collect();
        let permuted = all_losses(
            &y.select_rows(&perm), &k.select_rows(&perm), &km.select_rows(&perm),
            &pt.select_rows(&perm), &ptm.select_rows(&perm), &p_lambdas, &p_pair, src, mix,
        );
        for (a, b) in base.iter().zip(&permuted) {
            prop_assert!((a - b).abs() < 1e-12, "{} vs {}", a, b);
        }
    }

    #[test]
    fn source_loss_at_lambda_one_is_info_nce(seed in any::<u64>(), half in 1usize..6, tau in 0.01f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 2 * half;
        let (y, k) = (unit_rows(&mut rng, n, 4), unit_rows(&mut rng, n, 4));
        let pair = pair_map(n);
        let w = weights(&vec![1.0; n], &pair, WeightMode::Random, WeightMode::Random);
        let s = eval_scalar(|t| moco_source_loss(t.constant(y.clone()), t.constant(k.clone()), &w, &pair, tau)).unwrap();
        let plain = eval_scalar(|t| info_nce(t.constant(y.clone()), t.constant(k.clone()), tau)).unwrap();
        prop_assert!((s - plain).abs() < 1e-12);
        prop_assert!(s.is_finite());
    }

    #[test]
    fn static_source_weights_ignore_target_pair_swap(seed in any::<u64>(), half in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 2 * half;
        let (y, k) = (unit_rows(&mut rng, n, 4), unit_rows(&mut rng, n, 4));
        let pt = distributions(&mut rng, n, 6);
        let pair = pair_map(n);
        let lambdas: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let w = weights(&lambdas, &pair, WeightMode::Static, WeightMode::Random);
        let swapped_k = k.select_rows(&pair);
        let swapped_t = pt.select_rows(&pair);
        let a = eval_scalar(|t| moco_source_loss(t.constant(y.clone()), t.constant(k.clone()), &w, &pair, 0.2)).unwrap();
        let b = eval_scalar(|t| moco_source_loss(t.constant(y.clone()), t.constant(swapped_k.clone()), &w, &pair, 0.2)).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        let s = unit_rows(&mut rng, n, 6);
        let a = eval_scalar(|t| dino_source_loss(&pt, t.constant(s.clone()), &w, &pair, 0.1)).unwrap();
        let b = eval_scalar(|t| dino_source_loss(&swapped_t, t.constant(s.clone()), &w, &pair, 0.1)).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn identical_teacher_rows_make_lambda_irrelevant(seed in any::<u64>(), half in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 2 * half;
        let row = distributions(&mut rng, 1, 7);
        let pt = row.select_rows(&vec![0; n]);
        let pair = pair_map(n);
        let lambdas: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let mixed = source_mixture(&pt, &pair, &weights(&lambdas, &pair, WeightMode::Random, WeightMode::Random)).unwrap();
        prop_assert!(mixed.max_abs_diff(&pt) < 1e-15);
    }

    #[test]
    fn gibbs_inequality(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = distributions(&mut rng, 4, 6);
        let q = distributions(&mut rng, 4, 6);
        let tau = 0.1;
        let logits = |d: &Tensor| d.map(|v| v.ln() * tau);
        let h_pq = eval_scalar(|t| soft_cross_entropy(&p, t.constant(logits(&q)), tau)).unwrap();
        let h_pp = eval_scalar(|t| soft_cross_entropy(&p, t.constant(logits(&p)), tau)).unwrap();
        prop_assert!(h_pq >= h_pp - 1e-12);
    }
}

#[test]
fn gibbs_holds_over_ten_thousand_trials() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10_000 {
        let p = distributions(&mut rng, 1, 5);
        let q = distributions(&mut rng, 1, 5);
        let h = |a: &Tensor, b: &Tensor| -> f64 { a.data().iter().zip(b.data()).map(|(x, y)| -x * y.ln()).sum() };
        let h_pq = eval_scalar(|t| soft_cross_entropy(&p, t.constant(q.map(f64::ln)), 1.0)).unwrap();
        assert!((h_pq - h(&p, &q)).abs() < 1e-10);
        assert!(h_pq >= h(&p, &p) - 1e-12);
    }
}

#[test]
fn teacher_side_receives_no_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 6;
    let pair = pair_map(n);
    let lambdas: Vec<f64> = (0..n).map(|_| rng.random()).collect();
    let w = weights(&lambdas, &pair, WeightMode::Random, WeightMode::Random);
    let tape = Tape::new();
    let q = tape.param(unit_rows(&mut rng, n, 4));
    let k = tape.constant(unit_rows(&mut rng, n, 4));
    let km = tape.constant(unit_rows(&mut rng, n, 4));
    let loss = moco_source_loss(q, k, &w, &pair, 0.2).unwrap().add(moco_mixing_loss(q, km, &w, &pair, 0.2).unwrap()).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert!(grads.get(q).is_some());
    assert!(grads.get(k).is_none());
    assert!(grads.get(km).is_none());
}

#[test]
fn losses_stay_finite_down_to_small_temperatures() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = 8;
    let (y, k, km) = (unit_rows(&mut rng, n, 6), unit_rows(&mut rng, n, 6), unit_rows(&mut rng, n, 6));
    let pair = pair_map(n);
    let lambdas: Vec<f64> = (0..n).map(|_| rng.random()).collect();
    let w = weights(&lambdas, &pair, WeightMode::Random, WeightMode::Random);
    let pt = teacher_distribution(&Tensor::full(&[n, 6], 1e3), &[0.0; 6], 0.01).unwrap();
    for tau in [0.01, 0.04, 0.1, 1.0] {
        let v = [
            eval_scalar(|t| moco_source_loss(t.constant(y.clone()), t.constant(k.clone()), &w, &pair, tau)).unwrap(),
            eval_scalar(|t| moco_mixing_loss(t.constant(y.clone()), t.constant(km.clone()), &w, &pair, tau)).unwrap(),
            eval_scalar(|t| dino_source_loss(&pt, t.constant(y.clone().map(|v| v * 100.0)), &w, &pair, tau)).unwrap(),
        ];
        assert!(v.iter().all(|x| x.is_finite()), "tau {tau}: {v:?}");
    }
}
