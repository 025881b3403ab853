use paint_core::diffcore::Tensor;
use paint_core::prompt_memory::{cosine, PromptMemory};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn memory_with_keys(keys: &[Vec<f64>]) -> PromptMemory {
    let mut m = PromptMemory::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (i, k) in keys.iter().enumerate() {
        let q = Tensor::new(vec![1, k.len()], k.clone()).unwrap();
        m.allocate(&q, 2, 4, &mut rng, i).unwrap();
    }
    m
}

/// Exhaustive count over every (sample, entry) score, written independently
/// of the library's retrieve and vote.
fn brute_force_vote(queries: &[Vec<f64>], keys: &[Vec<f64>]) -> usize {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut counts = vec![0usize; keys.len()];
    for q in queries {
        let scores: Vec<f64> = keys
            .iter()
            .map(|k| (dot(q, k) / (dot(q, q).sqrt() * dot(k, k).sqrt())).clamp(-1.0, 1.0))
            .collect();
        let mut best = 0;
        for j in 1..scores.len() {
            if scores[j] > scores[best] {
                best = j;
            }
        }
        counts[best] += 1;
    }
    let mut winner = 0;
    for j in 1..counts.len() {
        if counts[j] > counts[winner] {
            winner = j;
        }
    }
    winner
}

/// Nonzero vectors with entries on a coarse grid, so exact ties occur.
fn vectors(
    count: impl Into<prop::collection::SizeRange>,
    dim: usize,
) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(
        prop::collection::vec((-3i32..=3).prop_map(f64::from), dim)
            .prop_filter("nonzero", |v| v.iter().any(|x| *x != 0.0)),
        count,
    )
}

fn instance() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    (1usize..=32).prop_flat_map(|dim| (vectors(1..=16, dim), vectors(1..=64, dim)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1200))]

    #[test]
    fn voted_index_matches_exhaustive_count((keys, queries) in instance()) {
        let mut memory = memory_with_keys(&keys);
        let dim = keys[0].len();
        let q = Tensor::new(vec![queries.len(), dim], queries.concat()).unwrap();
        let before = memory.len();
        // η below every possible score so the voted entry is always returned.
        let s = memory
            .select_or_allocate(&q, -2.0, 2, 4, &mut ChaCha8Rng::seed_from_u64(1), 0)
            .unwrap();
        prop_assert!(!s.was_new);
        prop_assert_eq!(memory.len(), before);
        prop_assert_eq!(s.index, brute_force_vote(&queries, &keys));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn retrieval_is_scale_invariant(
        (keys, queries) in instance(),
        scale in prop_oneof![1e-6f64..1e-3, 0.5f64..2.0, 1e3f64..1e6],
    ) {
        let memory = memory_with_keys(&keys);
        for q in &queries {
            // Exact ties (collinear keys) are broken by rounding, so only
            // clear winners must survive rescaling.
            let mut scores: Vec<f64> = keys.iter().map(|k| cosine(q, k).unwrap()).collect();
            scores.sort_by(|a, b| b.total_cmp(a));
            if scores.len() > 1 && scores[0] - scores[1] < 1e-9 {
                continue;
            }
            let scaled: Vec<f64> = q.iter().map(|x| x * scale).collect();
            prop_assert_eq!(memory.retrieve(q).unwrap(), memory.retrieve(&scaled).unwrap());
        }
    }

    #[test]
    fn memory_grows_exactly_on_allocation(
        batches in prop::collection::vec(vectors(1..=8, 6), 1..=25),
        eta in -1.0f64..1.0,
    ) {
        let mut memory = PromptMemory::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (t, b) in batches.iter().enumerate() {
            let q = Tensor::new(vec![b.len(), 6], b.concat()).unwrap();
            let mean: Vec<f64> = (0..6).map(|c| b.iter().map(|r| r[c]).sum::<f64>()).collect();
            if mean.iter().all(|m| *m == 0.0) {
                continue;
            }
            let before = memory.len();
            let s = memory.select_or_allocate(&q, eta, 2, 4, &mut rng, t).unwrap();
            prop_assert_eq!(memory.len(), before + usize::from(s.was_new));
            if let Some(r) = s.reliability {
                prop_assert!((-1.0..=1.0).contains(&r));
                prop_assert_eq!(s.was_new, r < eta);
            }
        }
    }

    #[test]
    fn cosine_is_bounded_and_symmetric(pair in vectors(2, 7)) {
        let c = cosine(&pair[0], &pair[1]).unwrap();
        prop_assert!((-1.0..=1.0).contains(&c));
        prop_assert_eq!(c, cosine(&pair[1], &pair[0]).unwrap());
    }
}

#[test]
fn key_converges_geometrically_to_constant_queries() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for trial in 0..10 {
        let dim = 3 + trial;
        let k0: Vec<f64> = (0..dim)
            .map(|i| ((i * 7 + trial) % 5) as f64 - 2.0 + 0.3)
            .collect();
        let mu: Vec<f64> = (0..dim)
            .map(|i| ((i * 3 + 2 * trial) % 7) as f64 * 0.4 - 1.1)
            .collect();
        let mut memory = PromptMemory::new();
        let k = Tensor::new(vec![1, dim], k0.clone()).unwrap();
        memory.allocate(&k, 2, 4, &mut rng, 0).unwrap();
        // A batch of identical queries equal to μ.
        let batch = Tensor::new(vec![4, dim], mu.repeat(4)).unwrap();
        let dist = |a: &[f64]| {
            a.iter()
                .zip(&mu)
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        let d0 = dist(&k0);
        for t in 1..=20 {
            memory.update_key(0, &batch, 0.8).unwrap();
            let dt = dist(&memory.get(0).unwrap().key);
            assert!(
                dt <= 0.8f64.powi(t) * d0 + 1e-12,
                "trial {trial} t {t}: {dt} vs {d0}"
            );
        }
        assert_eq!(memory.get(0).unwrap().update_count, 20);
    }
}
