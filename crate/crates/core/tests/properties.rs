//! Property tests over the module invariants.

use std::collections::BTreeSet;

use gdpnet::data::{micro_f1, read_dataset, write_dataset, Dataset, EntitySpans, Span, TokenSequence};
use gdpnet::diffcore::{adam_step, row_softmax, AdamConfig, DenseArray, ParamStore};
use gdpnet::dtwpool::{hard_dtw, select_topk, softdtw, topk_count, union_indices, union_pool};
use gdpnet::gaussian_graph::{build_adjacency, kl_diag_gaussian, raw_scores, AdjacencyNorm, GaussianBank, ViewGaussians};
use gdpnet::model::{forward, init_params, random_example, ModelConfig};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize, range: std::ops::Range<f64>) -> impl Strategy<Value = DenseArray> {
    prop::collection::vec(range, rows * cols).prop_map(move |v| DenseArray::matrix(rows, cols, v).unwrap())
}

fn sized_matrix(max_rows: usize, cols: usize, range: std::ops::Range<f64>) -> impl Strategy<Value = DenseArray> {
    (1..=max_rows).prop_flat_map(move |r| matrix(r, cols, range.clone()))
}

fn bank(nodes: usize, g: usize, views: usize) -> impl Strategy<Value = GaussianBank> {
    prop::collection::vec((matrix(nodes, g, -3.0..3.0), matrix(nodes, g, 0.2..3.0)), views)
        .prop_map(|v| GaussianBank { views: v.into_iter().map(|(mean, std)| ViewGaussians { mean, std }).collect() })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(x in sized_matrix(6, 7, -1e3..1e3)) {
        let s = row_softmax(&x);
        for i in 0..s.rows() {
            prop_assert!((s.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_with_zero_gradient_keeps_values(x in matrix(3, 4, -5.0..5.0), steps in 1usize..5) {
        let mut store = ParamStore::new();
        store.insert("w", x.clone()).unwrap();
        for _ in 0..steps {
            adam_step(&mut store, &AdamConfig::default());
        }
        prop_assert_eq!(store.value("w").unwrap(), &x);
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_identical(
        a in prop::collection::vec((-3.0..3.0f64, 0.2..3.0f64), 1..8),
        b in prop::collection::vec((-3.0..3.0f64, 0.2..3.0f64), 8),
    ) {
        let (mu_a, s_a): (Vec<f64>, Vec<f64>) = a.iter().copied().unzip();
        let (mu_b, s_b): (Vec<f64>, Vec<f64>) = b[..a.len()].iter().copied().unzip();
        prop_assert!(kl_diag_gaussian(&mu_a, &s_a, &mu_b, &s_b).unwrap() >= 0.0);
        prop_assert!(kl_diag_gaussian(&mu_a, &s_a, &mu_a, &s_a).unwrap().abs() < 1e-12);
    }

    #[test]
    fn adjacency_rows_are_stochastic(b in bank(5, 3, 2)) {
        for norm in [AdjacencyNorm::Softmax, AdjacencyNorm::RowSum] {
            let adj = build_adjacency(&b, norm).unwrap();
            prop_assert_eq!(adj.len(), 2);
            for a in &adj {
                for i in 0..a.rows() {
                    prop_assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn raw_scores_are_permutation_equivariant(b in bank(5, 3, 1), perm in Just((0..5).collect::<Vec<usize>>()).prop_shuffle()) {
        let permute = |m: &DenseArray| {
            DenseArray::from_rows(&perm.iter().map(|&p| m.row(p).to_vec()).collect::<Vec<_>>()).unwrap()
        };
        let v = &b.views[0];
        let pb = GaussianBank { views: vec![ViewGaussians { mean: permute(&v.mean), std: permute(&v.std) }] };
        let raw = &raw_scores(&b).unwrap()[0];
        let praw = &raw_scores(&pb).unwrap()[0];
        for i in 0..5 {
            for j in 0..5 {
                prop_assert_eq!(praw.get(i, j), raw.get(perm[i], perm[j]));
            }
        }
    }

    #[test]
    fn softdtw_lower_bounds_hard_dtw(x in sized_matrix(5, 3, -2.0..2.0), y in sized_matrix(5, 3, -2.0..2.0), gamma in 1e-3..2.0f64) {
        prop_assert!(softdtw(&x, &y, gamma).unwrap() <= hard_dtw(&x, &y).unwrap() + 1e-12);
    }

    #[test]
    fn topk_is_deterministic_and_sized(scores in prop::collection::vec(-1.0..1.0f64, 1..30), r in 0.05..=1.0f64) {
        let a = select_topk(&scores, r).unwrap();
        prop_assert_eq!(&a, &select_topk(&scores, r).unwrap());
        prop_assert_eq!(a.len(), topk_count(scores.len(), r));
        prop_assert_eq!(a.len(), (r * scores.len() as f64).ceil() as usize);
    }

    #[test]
    fn union_covers_every_view(
        t in 1usize..25,
        r in 0.05..=1.0f64,
        seeds in prop::collection::vec(prop::collection::vec(-1.0..1.0f64, 25), 1..4),
    ) {
        let scores: Vec<Vec<f64>> = seeds.iter().map(|s| s[..t].to_vec()).collect();
        let selections: Vec<Vec<usize>> = scores.iter().map(|s| select_topk(s, r).unwrap()).collect();
        let nodes = DenseArray::filled(&[t, 2], 1.0);
        let (gated, survivors, ratio) = union_pool(&selections, &nodes, &scores).unwrap();
        let expect: BTreeSet<usize> = selections.iter().flatten().copied().collect();
        prop_assert_eq!(&survivors, &expect.into_iter().collect::<Vec<_>>());
        prop_assert_eq!(&survivors, &union_indices(&selections));
        let k = topk_count(t, r) as f64;
        let upper = (scores.len() as f64 * k / t as f64).min(1.0);
        prop_assert!(ratio + 1e-12 >= r && ratio <= upper + 1e-12);
        prop_assert_eq!(gated.rows(), survivors.len());
    }

    #[test]
    fn micro_f1_ignores_example_order(
        pairs in prop::collection::vec((0usize..5, 0usize..5), 1..60),
        perm_seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let (p, g): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
        let mut shuffled = pairs.clone();
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(perm_seed));
        let (sp, sg): (Vec<usize>, Vec<usize>) = shuffled.into_iter().unzip();
        prop_assert_eq!(micro_f1(&p, &g, Some(0)), micro_f1(&sp, &sg, Some(0)));
    }
}

fn example_strategy(width: usize, classes: usize) -> impl Strategy<Value = TokenSequence> {
    (1usize..8).prop_flat_map(move |t| {
        (
            "[a-z]{1,6}",
            0..classes,
            prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), (t + 2) * width),
            prop::option::of(prop::collection::vec("[a-z]{0,5}", t)),
            prop::option::of((1..=t, 1..=t)),
            prop::option::of(prop::collection::vec(any::<bool>(), t)),
        )
            .prop_map(move |(id, label, vals, strings, spans, mask)| TokenSequence {
                id,
                label,
                embeddings: DenseArray::matrix(t + 2, width, vals.into_iter().map(f64::from).collect()).unwrap(),
                token_strings: strings,
                spans: spans.map(|(s, o)| EntitySpans {
                    subject: Span { start: s, end: s + 1 },
                    object: Span { start: o, end: o + 1 },
                }),
                trigger_mask: mask,
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn gdeb_round_trip_is_identity(examples in prop::collection::vec(example_strategy(3, 4), 0..6)) {
        let mut examples = examples;
        for (i, ex) in examples.iter_mut().enumerate() {
            ex.id = format!("{}-{i}", ex.id);
        }
        let names = vec!["no_relation".into(), "a".into(), "b b".into(), "ç".into()];
        let ds = Dataset::new(names, examples, "train", 3).unwrap();
        let mut bytes = Vec::new();
        write_dataset(&ds, &mut bytes).unwrap();
        let back = read_dataset(bytes.as_slice(), "train").unwrap();
        prop_assert_eq!(back, ds);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn pooling_stages_nest_and_respect_ratio(
        tokens in 1usize..14,
        views in 1usize..4,
        stages in 0usize..4,
        ratio in 0.1..=1.0f64,
        seed in any::<u64>(),
    ) {
        let cfg = ModelConfig {
            input_width: 6,
            width: 8,
            gaussian_width: 4,
            views,
            pool_stages: stages,
            ratio,
            classes: 3,
            seed,
            ..ModelConfig::tiny()
        };
        let params = init_params(&cfg).unwrap();
        let ex = random_example(&cfg, tokens, 1, seed);
        let rec = forward(&ex, &params, &cfg, None).unwrap();
        prop_assert!(rec.logits.iter().all(|v| v.is_finite()));
        prop_assert_eq!(rec.trace.stages.len(), stages);
        prop_assert!(!rec.final_positions().is_empty());
        let mut prev: BTreeSet<usize> = rec.initial_positions.iter().copied().collect();
        for stage in &rec.trace.stages {
            let now: BTreeSet<usize> = stage.positions.iter().copied().collect();
            prop_assert!(now.is_subset(&prev));
            let real = now.len() as f64 / prev.len() as f64;
            prop_assert!(real + 1e-12 >= ratio && real <= 1.0);
            prop_assert_eq!(real, stage.realized_ratio);
            prev = now;
        }
        // a pure function of inputs and parameters
        prop_assert_eq!(forward(&ex, &params, &cfg, None).unwrap(), rec);
    }
}
