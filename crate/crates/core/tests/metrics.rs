mod common;

use proptest::prelude::*;

use dialmt::eval::{corpus_bleu, labeling_prf};
use dialmt::perturb::Label;

fn sentence(min: usize) -> impl Strategy<Value = String> {
    prop::collection::vec("[a-e]", min..15).prop_map(|w| w.join(" "))
}

fn labels(n: usize) -> impl Strategy<Value = Vec<Label>> {
    prop::collection::vec((0u8..4).prop_map(|l| Label::try_from(l).unwrap()), n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn bleu_matches_independent_count(pairs in prop::collection::vec((sentence(1), sentence(1)), 1..6)) {
        let hyps: Vec<&str> = pairs.iter().map(|p| p.0.as_str()).collect();
        let refs: Vec<&str> = pairs.iter().map(|p| p.1.as_str()).collect();
        let got = corpus_bleu(&hyps, &refs).unwrap();
        let oracle = common::reference_bleu(&hyps, &refs);
        prop_assert!((got - oracle).abs() < 1e-9, "{} vs {}", got, oracle);
        prop_assert!((0.0..=100.0).contains(&got));
    }

    #[test]
    fn self_bleu_is_perfect(h in sentence(4)) {
        prop_assert_eq!(corpus_bleu(&[&h], &[&h]).unwrap(), 100.0);
    }

    #[test]
    fn prf_counts_partition_the_tokens(n in 1usize..40, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let draw = |rng: &mut rand_chacha::ChaCha8Rng| Label::ALL[rng.random_range(0..4)];
        let gold: Vec<Label> = (0..n).map(|_| draw(&mut rng)).collect();
        let pred: Vec<Label> = (0..n).map(|_| draw(&mut rng)).collect();
        let rep = labeling_prf(&[gold.clone()], &[pred.clone()]).unwrap();
        for c in &rep.classes {
            let g = gold.iter().filter(|l| **l == c.label).count() as u64;
            let p = pred.iter().filter(|l| **l == c.label).count() as u64;
            prop_assert_eq!(c.tp + c.fn_, g);
            prop_assert_eq!(c.tp + c.fp, p);
            if let Some(f) = c.f1 {
                prop_assert!((0.0..=1.0).contains(&f));
            }
        }
    }

    #[test]
    fn perfect_labels_score_one(gold in labels(20)) {
        let rep = labeling_prf(&[gold.clone()], &[gold.clone()]).unwrap();
        if let Some(f) = rep.macro_f1() {
            prop_assert_eq!(f, 1.0);
        }
    }
}

#[test]
fn fixtures() {
    let r = common::check_metrics();
    assert!(r.is_ok(), "{r:?}");
}

#[test]
fn short_hypotheses_have_zero_bleu() {
    // no 4-gram can match
    assert_eq!(corpus_bleu(&["a b c"], &["a b c"]).unwrap(), 0.0);
}
