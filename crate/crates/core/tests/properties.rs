//! Property tests over randomly generated inputs.

mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;

use kglab::encoders::EmbeddingStore;
use kglab::eval::{compute_metrics, rank_gold};
use kglab::linalg;
use kglab::llm::{parse_prediction, Bm25Index};
use kglab::llm::pipeline::stratified_quotas;
use kglab::scoring::{cosine, log_softmax};
use kglab::serialize::{self, SerializeConfig, SpecialToken};
use kglab::training::{cross_entropy_smoothed, smoothed_targets};
use kglab::{Direction, EntityId, RelationId};

fn finite() -> impl Strategy<Value = f64> {
    -50.0..50.0f64
}

proptest! {
    #[test]
    fn filtered_rank_is_bounded_and_never_worse(
        scores in prop::collection::vec(finite(), 2..40),
        gold_seed in any::<usize>(),
        mask in prop::collection::vec(any::<bool>(), 40),
    ) {
        let gold = EntityId(gold_seed % scores.len());
        let filtered: BTreeSet<EntityId> = (0..scores.len()).filter(|&i| mask[i]).map(EntityId).collect();
        let raw = rank_gold(&scores, gold, &BTreeSet::new()).unwrap();
        let filt = rank_gold(&scores, gold, &filtered).unwrap();
        prop_assert!(1 <= filt && filt <= raw && raw <= scores.len());
        let kept = (0..scores.len()).filter(|&i| i == gold.0 || !mask[i]).count();
        prop_assert!(filt <= kept);
    }

    #[test]
    fn metrics_are_ordered(ranks in prop::collection::vec(1usize..60, 1..50)) {
        let m = compute_metrics(&ranks).unwrap();
        prop_assert!(m.hits1 <= m.hits3 && m.hits3 <= m.hits10 && m.hits10 <= 1.0);
        prop_assert!(m.mrr > 0.0 && m.mrr <= 1.0);
        prop_assert!(m.mr >= 1.0);
        prop_assert!(m.hits1 <= m.mrr);
        prop_assert_eq!(m.count, ranks.len());
    }

    #[test]
    fn smoothed_targets_are_a_distribution(k in 2usize..50, target_seed in any::<usize>(), eps in 0.0..0.99f64) {
        let target = target_seed % k;
        let q = smoothed_targets(k, target, eps).unwrap();
        prop_assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(q.iter().enumerate().all(|(i, &v)| i == target || v <= q[target]));
    }

    #[test]
    fn smoothed_cross_entropy_is_positive(logits in prop::collection::vec(finite(), 2..20), eps in 0.0..0.9f64, t in any::<usize>()) {
        let loss = cross_entropy_smoothed(&logits, t % logits.len(), eps).unwrap();
        prop_assert!(loss.is_finite() && loss >= 0.0);
    }

    #[test]
    fn log_softmax_normalizes(logits in prop::collection::vec(finite(), 1..30)) {
        let lp = log_softmax(&logits);
        let total: f64 = lp.iter().map(|x| x.exp()).sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
        prop_assert!(lp.iter().all(|&x| x <= 1e-12));
    }

    #[test]
    fn cosine_is_bounded(a in prop::collection::vec(finite(), 3), b in prop::collection::vec(finite(), 3)) {
        prop_assume!(linalg::norm(&a) > 1e-6 && linalg::norm(&b) > 1e-6);
        let c = cosine(&a, &b).unwrap();
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&c));
    }

    #[test]
    fn quotas_sum_and_respect_sizes(sizes in prop::collection::vec(0usize..10, 1..8), n_seed in any::<usize>()) {
        let total: usize = sizes.iter().sum();
        prop_assume!(total > 0);
        let n = n_seed % (total + 1);
        let q = stratified_quotas(&sizes, n);
        prop_assert_eq!(q.iter().sum::<usize>(), n);
        prop_assert!(q.iter().zip(&sizes).all(|(a, b)| a <= b));
    }

    #[test]
    fn bm25_ranking_is_positive_and_sorted(
        docs in prop::collection::vec("[a-e]{1,3}( [a-e]{1,3}){0,5}", 1..12),
        query in "[a-e]{1,3}( [a-e]{1,3}){0,3}",
    ) {
        let index = Bm25Index::build(&docs);
        let top = index.topn(&query, docs.len());
        prop_assert!(top.iter().all(|&(_, s)| s > 0.0));
        prop_assert!(top.windows(2).all(|w| w[0].1 > w[1].1 || (w[0].1 == w[1].1 && w[0].0 < w[1].0)));
        for &(doc, s) in &top {
            prop_assert_eq!(s, index.score(&query, doc));
        }
    }

    #[test]
    fn exact_candidate_answers_parse_back(names in prop::collection::btree_set("[a-z]{2,8}", 1..10), pick in any::<usize>()) {
        let names: Vec<String> = names.into_iter().collect();
        let i = pick % names.len();
        let idx = parse_prediction(&format!("The answer is {}.", names[i]), &names).unwrap();
        prop_assert_eq!(&names[idx], &names[i]);
    }

    #[test]
    fn embedding_store_text_round_trips(rows in prop::collection::vec(prop::collection::vec(-1e6..1e6f64, 4), 1..10)) {
        let mut store = EmbeddingStore::new(4);
        for (i, r) in rows.iter().enumerate() {
            store.insert(format!("key {i}"), r.clone()).unwrap();
        }
        let back = EmbeddingStore::parse(&store.to_text(), std::path::Path::new("mem")).unwrap();
        prop_assert_eq!(back.to_text(), store.to_text());
        for (i, r) in rows.iter().enumerate() {
            let v = back.get(&format!("key {i}")).unwrap();
            prop_assert_eq!(v.values(), r.as_slice());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn masked_queries_have_one_mask(seed in any::<u64>(), e in 0usize..30, r in 0usize..4, head in any::<bool>(), max_len in 8usize..64, k in 0usize..4) {
        let kg = common::random_kg(30, 4, 80, seed % 16);
        let cfg = SerializeConfig { max_len, neighbor_k: k, neighbor_seed: seed, ..SerializeConfig::default() };
        let dir = if head { Direction::PredictHead } else { Direction::PredictTail };
        let seq = serialize::encode_masked_query(&kg, EntityId(e), RelationId(r), dir, &cfg).unwrap();
        prop_assert!(seq.len() <= max_len);
        prop_assert_eq!(seq.count(SpecialToken::Mask), 1);
        prop_assert_eq!(seq.count(SpecialToken::Reverse), usize::from(head));
        prop_assert!(seq.items()[0].is(SpecialToken::Cls));
        let again = serialize::encode_masked_query(&kg, EntityId(e), RelationId(r), dir, &cfg).unwrap();
        prop_assert_eq!(seq, again);
    }
}
