mod common;

use common::{toy_beam, TableScorer};
use proptest::prelude::*;

use dialmt::decode::{beam_search, greedy};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn wide_beam_is_exhaustive(seed in any::<u64>(), words in 1usize..4, max_len in 1usize..4) {
        let toy = TableScorer { words, max_len, seed };
        let best = toy
            .enumerate()
            .into_iter()
            .max_by(|a, b| a.1.total_cmp(&b.1).then_with(|| b.0.cmp(&a.0)))
            .unwrap();
        let width = words.pow(max_len as u32);
        let got = beam_search(&toy, &[2], &toy_beam(max_len, width), None).unwrap();
        prop_assert_eq!(got.tokens, best.0);
        prop_assert!((got.score - best.1).abs() < 1e-12);
    }

    #[test]
    fn beam_one_is_greedy(seed in any::<u64>(), max_len in 1usize..6) {
        let toy = TableScorer { words: 5, max_len, seed };
        let cfg = toy_beam(max_len, 1);
        let b = beam_search(&toy, &[2], &cfg, None).unwrap();
        let g = greedy(&toy, &[2], &cfg, &[]).unwrap();
        prop_assert_eq!(b.tokens, g.tokens);
        prop_assert!((b.score - g.score).abs() < 1e-12);
    }

    #[test]
    fn prefix_is_kept_and_scored(seed in any::<u64>(), prefix in prop::collection::vec(2u32..5, 0..3), beam in 1usize..5) {
        let toy = TableScorer { words: 3, max_len: 4, seed };
        let got = beam_search(&toy, &[2], &toy_beam(4, beam), Some(&prefix)).unwrap();
        prop_assert!(got.tokens.starts_with(&prefix));
        prop_assert!(got.tokens.len() <= 4);
        let exact = toy
            .enumerate()
            .into_iter()
            .find(|(t, _)| *t == got.tokens)
            .unwrap()
            .1;
        prop_assert!((got.score - exact).abs() < 1e-12);
    }
}

#[test]
fn beam_one_matches_greedy_on_a_model() {
    let r = common::check_beam1_greedy(30);
    assert!(r.is_ok(), "{r:?}");
}

#[test]
fn model_decoding_keeps_prefixes_and_counts() {
    let kit = common::synth_kit(100);
    for r in [common::check_forced_prefix(&kit), common::check_offline_counts(&kit)] {
        assert!(r.is_ok(), "{r:?}");
    }
}
