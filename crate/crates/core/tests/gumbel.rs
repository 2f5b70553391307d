//! Gumbel-max sampling frequencies and routing determinism.

use cogpath::moe::{select_k_hot, select_one_hot, Phase};
use cogpath::numerics::{softmax_values, RngState, Tensor};
use cogpath::synthdata::tv_distance;

const DRAWS: usize = 100_000;

#[test]
fn gumbel_max_marginals_match_softmax() {
    let mut rng = RngState::new(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let logits: Vec<f64> = (0..5).map(|_| rng.uniform_range(-2.0, 2.0)).collect();
        let batch: Vec<f64> = logits.iter().copied().cycle().take(5 * DRAWS).collect();
        let t = Tensor::new(batch, &[DRAWS, 5]).unwrap();
        let sel = select_one_hot(&t, &mut rng, 1.0, Phase::Training).unwrap();
        let mut freq = vec![0.0; 5];
        for i in sel.primary() {
            freq[i] += 1.0 / DRAWS as f64;
        }
        let tv = tv_distance(&freq, &softmax_values(&logits));
        worst = worst.max(tv);
        assert!(tv < 0.02, "logits {logits:?}: TV {tv}");
    }
    assert!(worst > 0.0);
}

#[test]
fn training_weights_are_hard_one_hot() {
    let t = Tensor::new(vec![0.3, -1.0, 2.0, 0.0, 0.0, 0.0], &[2, 3]).unwrap();
    let sel = select_one_hot(&t, &mut RngState::new(1), 1.0, Phase::Training).unwrap();
    for row in sel.weights.values().chunks(3) {
        assert_eq!(row.iter().filter(|&&w| w == 1.0).count(), 1);
        assert_eq!(row.iter().filter(|&&w| w == 0.0).count(), 2);
    }
}

#[test]
fn inference_ignores_the_rng() {
    let t = Tensor::new(vec![0.3, -1.0, 2.0, 5.0, 5.0, 0.0], &[2, 3]).unwrap();
    let a = select_one_hot(&t, &mut RngState::new(1), 1.0, Phase::Inference).unwrap();
    let b = select_one_hot(&t, &mut RngState::new(99), 1.0, Phase::Inference).unwrap();
    assert_eq!(a.chosen, vec![vec![2], vec![0]]);
    assert_eq!(a.chosen, b.chosen);
    assert_eq!(a.weights.values(), b.weights.values());
}

#[test]
fn k_hot_training_selects_k_distinct() {
    let t = Tensor::new((0..40).map(|i| (i % 7) as f64 * 0.1).collect(), &[8, 5]).unwrap();
    let sel = select_k_hot(&t, 3, &mut RngState::new(5), 1.0, Phase::Training).unwrap();
    for (c, row) in sel.chosen.iter().zip(sel.weights.values().chunks(5)) {
        let mut sorted = c.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 3);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(row.iter().filter(|&&w| w > 0.0).count(), 3);
    }
}
