mod common;

use std::collections::HashSet;

use proptest::prelude::*;

use common::{exhaustive_ranking, model_for, random_id_map};
use soda_core::corpus::UserSequence;
use soda_core::decode::{constrained_beam_search, PrefixTrie, ROOT};
use soda_core::eval::{evaluate, ndcg_at_k, rank_items, recall_at_k, MetricName, MetricsReport};
use soda_core::quantizer::CodeSequence;
use soda_core::seqmodel::{tokenize_history, VocabLayout};
use soda_core::tensor::Matrix;

#[test]
fn trie_accepts_exactly_the_id_map() {
    let vocab = VocabLayout::new(2, 3, 2);
    let ids = random_id_map(12, 2, 3, 2, 1);
    let trie = PrefixTrie::build(&ids, &vocab).unwrap();
    let members: HashSet<Vec<usize>> = ids.iter().map(|s| vocab.item_tokens(s).unwrap()).collect();
    // every token sequence of the right length over the whole vocabulary
    let v = vocab.size();
    let mut accepted = 0;
    for a in 0..v {
        for b in 0..v {
            for c in 0..v {
                let seq = vec![a, b, c];
                assert_eq!(trie.contains(&seq), members.contains(&seq), "{seq:?}");
                accepted += usize::from(trie.contains(&seq));
            }
        }
    }
    assert_eq!(accepted, 12);
    for (i, s) in ids.iter().enumerate() {
        assert_eq!(trie.lookup(&vocab.item_tokens(s).unwrap()), Some(i));
    }
    assert!(!trie.contains(&[]));
    let first: Vec<usize> = trie.children(ROOT).map(|(t, _)| t).collect();
    assert!(first.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn beam_search_matches_exhaustive_scoring() {
    let ids = random_id_map(24, 2, 3, 4, 2);
    let model = model_for(2, 3, 5);
    let trie = PrefixTrie::build(&ids, model.vocab()).unwrap();
    for h in 0..4 {
        let history = vec![h, (h * 7 + 3) % 24, (h * 5 + 1) % 24];
        let x = tokenize_history(&history, &ids, model.vocab(), 6).unwrap();
        let got = constrained_beam_search(&model, &x, &trie, 24).unwrap();
        let want = exhaustive_ranking(&model, &ids, &history);
        assert_eq!(got.items(), want.iter().map(|w| w.0).collect::<Vec<_>>());
        for (g, w) in got.entries().iter().zip(&want) {
            assert!((g.score - w.1).abs() < 1e-10);
        }
    }
}

#[test]
fn narrow_beam_returns_a_prefix_sized_list_of_valid_items() {
    let ids = random_id_map(24, 2, 3, 4, 3);
    let model = model_for(2, 3, 6);
    let trie = PrefixTrie::build(&ids, model.vocab()).unwrap();
    let x = tokenize_history(&[1, 2], &ids, model.vocab(), 6).unwrap();
    let wide = constrained_beam_search(&model, &x, &trie, 24).unwrap();
    for beam in [1, 3, 8] {
        let list = constrained_beam_search(&model, &x, &trie, beam).unwrap();
        assert_eq!(list.len(), beam);
        assert!(list.items().iter().all(|&i| i < 24));
        assert!(list.entries().windows(2).all(|w| w[0].score >= w[1].score));
        // the greedy-best complete item can never beat the true best
        assert!(list.entries()[0].score <= wide.entries()[0].score + 1e-12);
    }
    assert!(constrained_beam_search(&model, &x, &trie, 0).is_err());
}

#[test]
fn ties_are_broken_by_item_index() {
    let ids = random_id_map(20, 2, 3, 4, 4);
    let mut model = model_for(2, 3, 7);
    for id in model.net().lm_head().clone().params() {
        let p = model.params_mut().get_mut(id);
        *p = Matrix::zeros(p.rows(), p.cols());
    }
    let trie = PrefixTrie::build(&ids, model.vocab()).unwrap();
    let x = tokenize_history(&[0], &ids, model.vocab(), 6).unwrap();
    let list = constrained_beam_search(&model, &x, &trie, 20).unwrap();
    assert_eq!(list.items(), (0..20).collect::<Vec<_>>());
    let top = constrained_beam_search(&model, &x, &trie, 5).unwrap();
    assert_eq!(top.items(), (0..5).collect::<Vec<_>>());
}

#[test]
fn single_item_score_is_negative_rec_loss() {
    let ids = vec![CodeSequence { codes: vec![2, 1], disambiguation: 1 }];
    let model = model_for(2, 3, 8);
    let trie = PrefixTrie::build(&ids, model.vocab()).unwrap();
    let x = tokenize_history(&[0, 0], &ids, model.vocab(), 6).unwrap();
    let list = constrained_beam_search(&model, &x, &trie, 4).unwrap();
    assert_eq!(list.items(), vec![0]);
    let loss = model.rec_loss(&x, &model.vocab().item_tokens(&ids[0]).unwrap()).unwrap();
    assert!((list.entries()[0].score + loss).abs() < 1e-9);
}

#[test]
fn empty_trie_gives_empty_list() {
    let model = model_for(2, 3, 9);
    let trie = PrefixTrie::build(&[], model.vocab()).unwrap();
    let x = tokenize_history(&[], &[], model.vocab(), 6).unwrap();
    assert!(constrained_beam_search(&model, &x, &trie, 4).unwrap().is_empty());
}

#[test]
fn hand_scored_three_user_fixture() {
    let ranking: Vec<usize> = (100..130).collect();
    // targets at ranks 1, 3 and 15
    let rankings = vec![
        (ranking.clone(), 100),
        (ranking.clone(), 102),
        (ranking.clone(), 114),
    ];
    let report = MetricsReport::from_rankings(&rankings, &[10, 20]).unwrap();
    assert_eq!(report.get(MetricName::Recall, 10), Some(2.0 / 3.0));
    assert_eq!(report.get(MetricName::Recall, 20), Some(1.0));
    assert_eq!(report.get(MetricName::Ndcg, 10), Some(0.5));
    assert_eq!(report.get(MetricName::Ndcg, 20), Some(1.75 / 3.0));
    assert_eq!(ndcg_at_k(&ranking, 102, 10), 0.5);
    assert!(report.metrics.iter().all(|m| m.n_users == 3));
}

#[test]
fn report_survives_jsonl_round_trip() {
    let rankings = vec![(vec![3, 1, 2], 1), (vec![2, 3], 9)];
    let report = MetricsReport::from_rankings(&rankings, &[1, 2])
        .unwrap()
        .with_metadata(17, "abcd1234");
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("metrics.jsonl");
    report.write(&path).unwrap();
    assert_eq!(MetricsReport::read(&path).unwrap(), report);
    assert!(report.metrics.iter().all(|m| m.seed == 17 && m.config_digest == "abcd1234"));
    assert!(report.table().contains("NDCG@2"));
}

proptest! {
    #[test]
    fn metrics_are_monotone_in_k_and_ndcg_bounded_by_recall(
        ranking in Just((0usize..40).collect::<Vec<_>>()).prop_shuffle(),
        target in 0usize..45,
        k in 1usize..30,
    ) {
        let r1 = recall_at_k(&ranking, target, k);
        let r2 = recall_at_k(&ranking, target, k + 1);
        let n1 = ndcg_at_k(&ranking, target, k);
        let n2 = ndcg_at_k(&ranking, target, k + 1);
        prop_assert!(r1 <= r2 && n1 <= n2);
        prop_assert!(n1 <= r1 && (0.0..=1.0).contains(&n1));
        prop_assert!(r1 == 0.0 || r1 == 1.0);
    }
}

#[test]
fn evaluate_agrees_with_manual_ranking() {
    let ids = random_id_map(16, 2, 3, 4, 5);
    let model = model_for(2, 3, 10);
    let trie = PrefixTrie::build(&ids, model.vocab()).unwrap();
    let examples: Vec<UserSequence> = (0..5)
        .map(|u| UserSequence {
            user: u.to_string(),
            history: vec![u, u + 1, u + 2],
            target: (u * 3) % 16,
        })
        .collect();
    let report = evaluate(&model, &ids, &examples, &[1, 5, 16], 16).unwrap();
    let manual: Vec<(Vec<usize>, usize)> = examples
        .iter()
        .map(|ex| (rank_items(&model, &ids, &trie, &ex.history, 16).unwrap().items(), ex.target))
        .collect();
    assert_eq!(report, MetricsReport::from_rankings(&manual, &[1, 5, 16]).unwrap());
    // with the full catalogue returned every target is found
    assert_eq!(report.get(MetricName::Recall, 16), Some(1.0));
    assert!(evaluate(&model, &ids, &[], &[10], 16).is_err());
}
