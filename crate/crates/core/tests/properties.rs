//! Invariants over randomized inputs.

mod common;

use common::*;
use ponderlm::analysis::series::{
    centered_singular_values, kl_divergence, mean_row_cosine, spectrum_metrics,
};
use ponderlm::analysis::{cosine_series, kl_series};
use ponderlm::baselines::{hidden_feedback_forward, looped_forward, pause_forward};
use ponderlm::data::{BatchIterator, BatchSpec, TokenShard};
use ponderlm::mechanism::Mechanism;
use ponderlm::model::{embed_tokens, lm_forward, logits_to_probs, Extras, ModelConfig};
use ponderlm::ponder::{ponder_embedding, ponder_forward, PonderConfig};
use ponderlm::tensor::Matrix;
use ponderlm::train::{train_step, TrainConfig, TrainState};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashSet;
use std::path::Path;

fn simplex(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(1e-6f64..1.0, len).prop_map(|w| {
        let s: f64 = w.iter().sum();
        w.into_iter().map(|x| x / s).collect()
    })
}

/// Probability rows drawn from a handful of levels, so ties are common.
fn tied_rows(rows: usize, vocab: usize) -> impl Strategy<Value = Matrix<f64>> {
    prop::collection::vec(prop::collection::vec(1u8..5, vocab), rows).prop_map(move |r| {
        Matrix::from_rows(
            &r.into_iter()
                .map(|row| {
                    let s: f64 = row.iter().map(|&x| x as f64).sum();
                    row.into_iter().map(|x| x as f64 / s).collect()
                })
                .collect::<Vec<_>>(),
        )
    })
}

fn table(vocab: usize, d: usize) -> impl Strategy<Value = Matrix<f64>> {
    prop::collection::vec(-2.0f64..2.0, vocab * d).prop_map(move |v| Matrix::from_vec(vocab, d, v))
}

fn small_model(seed: u64, tied: bool) -> ponderlm::model::Model<f64> {
    let mut cfg = ModelConfig::new(9, 8, 2, 2, 12);
    cfg.rotary_fraction = 0.5;
    cfg.tie_embeddings = tied;
    random_model(
        cfg,
        Extras {
            pause: true,
            projector: true,
        },
        seed,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn causality(seed in 0u64..1000, k in 0usize..6, delta in -3.0f64..3.0) {
        let m = small_model(seed, false);
        let tokens: Vec<usize> = (0..6).map(|i| (i * 7 + seed as usize) % 9).collect();
        let e = embed_tokens(&m, &tokens).unwrap();
        let base = lm_forward(&m, &e).unwrap();
        let mut e2 = e.clone();
        for x in e2.row_mut(k) {
            *x += delta;
        }
        let moved = lm_forward(&m, &e2).unwrap();
        for j in 0..k {
            prop_assert_eq!(base.row(j), moved.row(j));
        }
    }

    #[test]
    fn softmax_shift_invariance(row in prop::collection::vec(-50.0f64..50.0, 1..20), c in -100.0f64..100.0) {
        let a = logits_to_probs(&Matrix::from_rows(&[row.clone()])).unwrap();
        let shifted: Vec<f64> = row.iter().map(|x| x + c).collect();
        let b = logits_to_probs(&Matrix::from_rows(&[shifted])).unwrap();
        prop_assert!(a.max_abs_diff(&b) < 1e-6);
    }

    #[test]
    fn kl_nonnegative((p, q) in (2usize..40).prop_flat_map(|n| (simplex(n), simplex(n)))) {
        prop_assert!(kl_divergence(&p, &q) >= 0.0);
        prop_assert!(kl_divergence(&p, &p).abs() < 1e-9);
    }

    #[test]
    fn full_k_is_dense_product((p, v) in (2usize..64, 1usize..6).prop_flat_map(|(n, d)| {
        (prop::collection::vec(simplex(n), 1..4).prop_map(|r| Matrix::from_rows(&r)), table(n, d))
    })) {
        let got = ponder_embedding(&p, &v, v.rows(), true).unwrap();
        prop_assert!(got.max_abs_diff(&p.matmul(&v)) < 1e-5);
    }

    #[test]
    fn top_k_matches_sort_select((p, v, k, renorm) in (2usize..64, 1usize..6).prop_flat_map(|(n, d)| {
        (tied_rows(3, n), table(n, d), 1..=n, any::<bool>())
    })) {
        let got = ponder_embedding(&p, &v, k, renorm).unwrap();
        for r in 0..p.rows() {
            let want = sort_select_mix(p.row(r), &v, k, renorm);
            prop_assert_eq!(got.row(r), want.as_slice());
        }
    }

    #[test]
    fn convex_hull_bound((p, v, k) in (2usize..40, 1usize..6).prop_flat_map(|(n, d)| {
        (prop::collection::vec(simplex(n), 1..4).prop_map(|r| Matrix::from_rows(&r)), table(n, d), 1..=n)
    })) {
        let t = ponder_embedding(&p, &v, k, true).unwrap();
        let norm = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>().sqrt();
        let vmax = (0..v.rows()).map(|i| norm(v.row(i))).fold(0.0, f64::max);
        for r in 0..t.rows() {
            prop_assert!(norm(t.row(r)) <= vmax * (1.0 + 1e-12));
        }
    }

    #[test]
    fn trace_residual_decomposition(seed in 0u64..500, steps in 1usize..5, k in 1usize..=9) {
        let m = small_model(seed, seed % 2 == 0);
        let cfg = PonderConfig { trace_capture: true, ..PonderConfig::fixed(steps, k) };
        let tokens: Vec<usize> = (0..5).map(|i| (i * 5 + seed as usize) % 9).collect();
        let trace = ponder_forward(&tokens, &m, &cfg, steps).unwrap().1.unwrap();
        let v = m.params.input_embedding();
        let mut e = trace.embeddings[0].clone();
        for t in 0..steps {
            e = e.add(&ponder_embedding(&trace.distributions[t], v, k, true).unwrap());
            prop_assert_eq!(&e, &trace.embeddings[t + 1]);
        }
        for c in cosine_series(&trace).unwrap() {
            prop_assert!((-1.0..=1.0).contains(&c));
        }
        for kl in kl_series(&trace).unwrap() {
            prop_assert!(kl >= 0.0);
        }
    }

    #[test]
    fn cosine_bounds(a in prop::collection::vec(-5.0f64..5.0, 1..12), scale in 0.01f64..100.0,
                     b in prop::collection::vec(-5.0f64..5.0, 12)) {
        prop_assume!(a.iter().any(|x| x.abs() > 1e-3));
        let ma = Matrix::from_rows(&[a.clone()]);
        let scaled: Vec<f64> = a.iter().map(|x| x * scale).collect();
        prop_assert!((mean_row_cosine(&ma, &Matrix::from_rows(&[scaled])) - 1.0).abs() < 1e-12);
        let c = mean_row_cosine(&ma, &Matrix::from_rows(&[b[..a.len()].to_vec()]));
        prop_assert!((-1.0..=1.0).contains(&c));
    }

    #[test]
    fn explained_variance_sums_to_one(rows in 2usize..20, cols in 1usize..10, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..rows * cols).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
        let s = centered_singular_values(&Matrix::from_vec(rows, cols, data));
        if let Some((ratios, cumulative, rank)) = spectrum_metrics(&s, s.len()) {
            prop_assert!((ratios.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(ratios.windows(2).all(|w| w[0] >= w[1]));
            prop_assert!(cumulative <= 1.0);
            prop_assert!(rank >= 1.0 - 1e-9 && rank <= rows.min(cols) as f64 + 1e-9);
        }
    }

    #[test]
    fn shard_round_trip(ids in prop::collection::vec(0u32..70_000, 0..500)) {
        let shard = TokenShard::new(ids.clone(), 70_000).unwrap();
        let back = TokenShard::from_bytes(&shard.to_bytes(), Path::new("mem")).unwrap();
        prop_assert_eq!(back.ids, ids);
    }

    #[test]
    fn epoch_covers_every_window(n in 10usize..400, l in 1usize..9, seed in any::<u64>()) {
        let shard = TokenShard::new((0..n as u32).collect(), n as u32).unwrap();
        let shards = [shard];
        let spec = BatchSpec { batch_size_tokens: l, context_len: l, seed };
        let Ok(it) = BatchIterator::new(&shards, spec, true) else { return Ok(()) };
        let order = it.epoch_order();
        prop_assert_eq!(order.len(), (n - 1) / l);
        prop_assert_eq!(order.iter().collect::<HashSet<_>>().len(), order.len());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn degenerate_settings_are_vanilla(seed in any::<u64>(), len in 1usize..12) {
        let m = small_model(seed, seed % 3 == 0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tokens = random_tokens(&mut rng, len, 9);
        let want = logits_to_probs(&lm_forward(&m, &embed_tokens(&m, &tokens).unwrap()).unwrap()).unwrap();
        let (p, _) = ponder_forward(&tokens, &m, &PonderConfig::fixed(0, 9), 0).unwrap();
        prop_assert!(p.max_abs_diff(&want) <= 1e-6);
        prop_assert!(looped_forward(&tokens, &m, 1).unwrap().max_abs_diff(&want) <= 1e-6);
        let (p, mask) = pause_forward(&tokens, &m, 0).unwrap();
        prop_assert!(p.max_abs_diff(&want) <= 1e-6);
        prop_assert!(mask.iter().all(|&b| b));
        for projected in [false, true] {
            let (p, _) = hidden_feedback_forward(&tokens, &m, 0, projected).unwrap();
            prop_assert!(p.max_abs_diff(&want) <= 1e-6);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn tied_head_tracks_embedding(seed in any::<u64>(), steps in 0usize..3) {
        let mut cfg = ModelConfig::new(9, 8, 1, 2, 8);
        cfg.tie_embeddings = true;
        cfg.rotary_fraction = 0.5;
        let batch = BatchSpec { batch_size_tokens: 16, context_len: 8, seed };
        let mut tc = TrainConfig::new(0.05, 3, batch);
        tc.seed = seed;
        tc.mechanism = Mechanism::Ponder(PonderConfig::fixed(steps, 4));
        let mut state = TrainState::fresh(&cfg, &tc).unwrap();
        let shard = TokenShard::new((0..64u32).map(|i| (i * 5 + 1) % 9).collect(), 9).unwrap();
        let mut it = BatchIterator::new(std::slice::from_ref(&shard), tc.batch.clone(), true).unwrap();
        let before = state.model.params.input_embedding().clone();
        for _ in 0..3 {
            train_step(&mut state, &tc, &it.next_batch()).unwrap();
            let p = &state.model.params;
            prop_assert!(p.is_tied());
            prop_assert!(p.get("head.weight").is_none());
            prop_assert_eq!(p.output_head(), p.input_embedding().transpose());
        }
        prop_assert!(state.model.params.input_embedding() != &before);
    }
}
