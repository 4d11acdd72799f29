use ebr_core::trainer::loss::{random_k_plan, self_adv_sampling_plan};
use ebr_core::trainer::{
    inclusion_probabilities, loss_all_inbatch, loss_random_k, Activation, BatchEmbeddings,
};
use ebr_core::ExecMode;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn batch(seed: u64, b: usize, d: usize) -> BatchEmbeddings {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = (0..b * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let p = (0..b * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    BatchEmbeddings::new(d, q, p, vec![1.0; b]).unwrap()
}

#[test]
fn sampling_marginals_match_inclusion_probabilities() {
    let b = 6;
    let x = batch(11, b, 4);
    let scores = x.scores(ExecMode::Sequential);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let draws = 20_000;
    for (act, t) in [
        (Activation::Identity, 1.0),
        (Activation::Sigmoid, 2.0),
        (Activation::Relu, 0.7),
    ] {
        let mut counts = vec![0usize; b * b];
        for _ in 0..draws {
            let plan = self_adv_sampling_plan(b, &scores, None, t, act, &mut rng).unwrap();
            for (c, w) in counts.iter_mut().zip(&plan.weights) {
                if *w != 0.0 {
                    *c += 1;
                }
            }
        }
        for i in 0..b {
            let row: Vec<f64> = scores[i * b..(i + 1) * b]
                .iter()
                .map(|s| act.apply(*s))
                .collect();
            let p = inclusion_probabilities(&row, i, t).unwrap();
            for j in 0..b {
                let freq = counts[i * b + j] as f64 / draws as f64;
                // 5 standard errors
                let tol = 5.0 * (p[j] * (1.0 - p[j]) / draws as f64).sqrt() + 1e-12;
                assert!(
                    (freq - p[j]).abs() <= tol,
                    "{act:?} T={t} ({i},{j}): {freq} vs {}",
                    p[j]
                );
            }
        }
    }
}

#[test]
fn capped_sampling_never_exceeds_cap() {
    let x = batch(5, 8, 3);
    let scores = x.scores(ExecMode::Sequential);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..200 {
        let plan = self_adv_sampling_plan(8, &scores, Some(2), 3.0, Activation::Sigmoid, &mut rng)
            .unwrap();
        for i in 0..8 {
            assert!(plan.selected(i).len() <= 2);
            assert!(!plan.selected(i).contains(&i));
        }
    }
}

#[test]
fn random_k_is_unbiased_for_the_negative_term() {
    let b = 7;
    let x = batch(21, b, 5);
    let full = loss_all_inbatch(&x, 1.0).unwrap().neg_loss;
    for k in [1, 3, 6] {
        let mut rng = ChaCha8Rng::seed_from_u64(k as u64);
        let n = 4000;
        let mean = (0..n)
            .map(|_| loss_random_k(&x, k, 1.0, &mut rng).unwrap().neg_loss)
            .sum::<f64>()
            / n as f64;
        let expected = full * k as f64 / (b - 1) as f64;
        assert!(
            (mean - expected).abs() <= 0.02 * expected,
            "k={k}: {mean} vs {expected}"
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_k_plan_picks_exactly_k_others(b in 2usize..20, seed in any::<u64>(), k_frac in 0.0f64..1.0) {
        let k = 1 + ((b - 2) as f64 * k_frac) as usize;
        let plan = random_k_plan(b, k, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        for i in 0..b {
            let sel = plan.selected(i);
            prop_assert_eq!(sel.len(), k);
            prop_assert!(!sel.contains(&i));
        }
    }

    #[test]
    fn inclusion_probabilities_are_bounded(row in prop::collection::vec(-5.0f64..5.0, 2..12), t in 0.1f64..4.0) {
        let i = row.len() / 2;
        let p = inclusion_probabilities(&row, i, t).unwrap();
        prop_assert_eq!(p[i], 0.0);
        for v in &p {
            prop_assert!((0.0..=1.0).contains(v));
        }
        // below the clamp the probabilities are a softmax scaled by T^2
        if p.iter().all(|v| *v < 1.0) {
            let total: f64 = p.iter().sum();
            prop_assert!((total - t * t).abs() < 1e-9);
        }
    }
}
