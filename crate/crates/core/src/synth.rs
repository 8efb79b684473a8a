//! A small synthetic dialogue language with a word-for-word English
//! translation.
//!
//! Every dialogue has one subject pronoun that opens each of its sentences
//! (apart from the fixed reply 好 的), so a dropped pronoun can only be
//! restored from the surrounding turns. Homophone alternatives are
//! characters outside the lexicon.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{join_with_sep, ParallelDocument, Sentence, SEP};
use crate::dataset::{example_seed, LabeledExample};
use crate::error::{Error, Result};
use crate::eval::{Annotation, Dialogue, Phenomenon, TestSet, Turn};
use crate::perturb::{EditKind, PerturbStats, PerturbationTables, Perturber};

pub const PRONOUNS: [(&str, &str); 5] = [("我", "i"), ("你", "you"), ("他", "he"), ("她", "she"), ("它", "it")];

pub const PUNCTUATION: [(&str, &str); 3] = [("。", "."), ("？", "?"), ("！", "!")];

pub const VERBS: [(&str, &str); 12] = [
    ("吃", "eat"),
    ("喝", "drink"),
    ("看", "watch"),
    ("买", "buy"),
    ("卖", "sell"),
    ("找", "find"),
    ("拿", "take"),
    ("写", "write"),
    ("读", "read"),
    ("洗", "wash"),
    ("送", "send"),
    ("借", "borrow"),
];

pub const NOUNS: [(&str, &str); 14] = [
    ("饭", "rice"),
    ("茶", "tea"),
    ("书", "book"),
    ("车", "car"),
    ("水", "water"),
    ("信", "letter"),
    ("花", "flower"),
    ("鱼", "fish"),
    ("票", "ticket"),
    ("衣", "clothes"),
    ("伞", "umbrella"),
    ("包", "bag"),
    ("钱", "money"),
    ("药", "medicine"),
];

pub const ADJECTIVES: [(&str, &str); 8] = [
    ("忙", "busy"),
    ("累", "tired"),
    ("饿", "hungry"),
    ("冷", "cold"),
    ("胖", "fat"),
    ("瘦", "thin"),
    ("美", "pretty"),
    ("笨", "silly"),
];

pub const FUNCTION_WORDS: [(&str, &str); 5] = [("很", "very"), ("不", "not"), ("要", "will"), ("好", "all"), ("的", "right")];

pub const HOMOPHONES: [(&str, &[&str]); 39] = [
    ("吃", &["痴", "迟"]),
    ("喝", &["河", "合"]),
    ("看", &["刊"]),
    ("买", &["迈"]),
    ("卖", &["麦"]),
    ("找", &["照"]),
    ("拿", &["哪"]),
    ("写", &["血"]),
    ("读", &["独"]),
    ("洗", &["喜"]),
    ("送", &["宋"]),
    ("借", &["介"]),
    ("饭", &["犯", "范"]),
    ("茶", &["查"]),
    ("书", &["输"]),
    ("车", &["彻"]),
    ("水", &["税"]),
    ("信", &["心"]),
    ("花", &["华"]),
    ("鱼", &["雨"]),
    ("票", &["漂"]),
    ("衣", &["医"]),
    ("伞", &["散"]),
    ("包", &["抱"]),
    ("钱", &["前"]),
    ("药", &["钥"]),
    ("忙", &["盲"]),
    ("累", &["泪"]),
    ("饿", &["鹅"]),
    ("冷", &["愣"]),
    ("胖", &["盼"]),
    ("瘦", &["受"]),
    ("美", &["每"]),
    ("笨", &["奔"]),
    ("很", &["狠"]),
    ("不", &["布"]),
    ("要", &["耀"]),
    ("好", &["号"]),
    ("的", &["得"]),
];

fn lexicon() -> impl Iterator<Item = (&'static str, &'static str)> {
    PRONOUNS
        .iter()
        .chain(&PUNCTUATION)
        .chain(&VERBS)
        .chain(&NOUNS)
        .chain(&ADJECTIVES)
        .chain(&FUNCTION_WORDS)
        .copied()
}

/// English translation of a lexicon word.
pub fn translate_word(src: &str) -> Option<&'static str> {
    lexicon().find(|(s, _)| *s == src).map(|(_, t)| t)
}

/// Every source word of the language.
pub fn source_vocabulary() -> Vec<String> {
    lexicon().map(|(s, _)| s.to_string()).collect()
}

pub fn tables() -> PerturbationTables {
    let set = |xs: &[(&str, &str)]| xs.iter().map(|(s, _)| s.to_string()).collect::<BTreeSet<_>>();
    let homophones: BTreeMap<String, Vec<String>> = HOMOPHONES
        .iter()
        .map(|(k, v)| (k.to_string(), v.iter().map(|s| s.to_string()).collect()))
        .collect();
    PerturbationTables::new(set(&PRONOUNS), set(&PUNCTUATION), homophones).expect("built-in tables are consistent")
}

/// Write the tables in their on-disk formats.
pub fn write_tables(dir: &Path) -> Result<()> {
    let t = tables();
    let list = |s: &BTreeSet<String>| s.iter().map(|x| format!("{x}\n")).collect::<String>();
    let homophones: String = t
        .homophones()
        .iter()
        .map(|(k, v)| format!("{k}\t{}\n", v.join(",")))
        .collect();
    for (name, body) in [
        ("pronouns.txt", list(t.pronouns())),
        ("punct.txt", list(t.punctuation())),
        ("homophones.tsv", homophones),
    ] {
        let p = dir.join(name);
        std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub documents: usize,
    pub min_turns: usize,
    pub max_turns: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            documents: 1000,
            min_turns: 3,
            max_turns: 10,
        }
    }
}

fn pick<R: Rng>(rng: &mut R, xs: &[(&'static str, &'static str)]) -> (&'static str, &'static str) {
    xs[rng.random_range(0..xs.len())]
}

fn sentence<R: Rng>(rng: &mut R, pron: (&'static str, &'static str)) -> (Sentence, Sentence) {
    let mut words: Vec<(&str, &str)> = Vec::new();
    let fw = |i: usize| FUNCTION_WORDS[i];
    match rng.random_range(0..100) {
        0..35 => words.extend([pron, pick(rng, &VERBS), pick(rng, &NOUNS)]),
        35..55 => words.extend([pron, fw(0), pick(rng, &ADJECTIVES)]),
        55..70 => words.extend([pron, fw(1), pick(rng, &VERBS), pick(rng, &NOUNS)]),
        70..90 => words.extend([pron, fw(2), pick(rng, &VERBS), pick(rng, &NOUNS)]),
        _ => words.extend([fw(3), fw(4)]),
    }
    words.push(match rng.random_range(0..10) {
        0..7 => PUNCTUATION[0],
        7..9 => PUNCTUATION[1],
        _ => PUNCTUATION[2],
    });
    (
        words.iter().map(|(s, _)| s.to_string()).collect(),
        words.iter().map(|(_, t)| t.to_string()).collect(),
    )
}

/// Generate parallel dialogues; each is a pure function of `(seed, index)`.
pub fn generate_documents(cfg: &SynthConfig, seed: u64) -> Result<Vec<ParallelDocument>> {
    if cfg.min_turns == 0 || cfg.min_turns > cfg.max_turns {
        return Err(Error::Config(format!(
            "turn range [{}, {}] is empty or starts at 0",
            cfg.min_turns, cfg.max_turns
        )));
    }
    (0..cfg.documents)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(crate::corpus::doc_seed(seed, i));
            let pron = pick(&mut rng, &PRONOUNS);
            let n = rng.random_range(cfg.min_turns..=cfg.max_turns);
            let (src, tgt): (Vec<_>, Vec<_>) = (0..n).map(|_| sentence(&mut rng, pron)).unzip();
            ParallelDocument::new(format!("synth-{i}"), src, tgt)
        })
        .collect()
}

/// Write dialogues as line-aligned text plus a boundary file.
pub fn write_corpus(docs: &[ParallelDocument], src: &Path, tgt: &Path, boundaries: &Path) -> Result<()> {
    let mut s = String::new();
    let mut t = String::new();
    let mut b = String::new();
    let mut line = 0;
    for d in docs {
        for (x, y) in d.src_sentences().iter().zip(d.tgt_sentences()) {
            s.push_str(&x.join(" "));
            s.push('\n');
            t.push_str(&y.join(" "));
            t.push('\n');
        }
        b.push_str(&format!("{line}\t{}\n", line + d.len() - 1));
        line += d.len();
    }
    for (p, body) in [(src, s), (tgt, t), (boundaries, b)] {
        std::fs::write(p, body).map_err(|e| Error::io(p, e))?;
    }
    Ok(())
}

/// Perturb whole dialogues and turn the edits into test-set annotations.
/// Also returns the labeled dialogues for labeling metrics.
pub fn build_testset(
    docs: &[ParallelDocument],
    perturber: &Perturber<'_>,
    seed: u64,
) -> Result<(TestSet, Vec<LabeledExample>, PerturbStats)> {
    let mut stats = PerturbStats::default();
    let mut dialogues = Vec::with_capacity(docs.len());
    let mut examples = Vec::with_capacity(docs.len());
    for (i, doc) in docs.iter().enumerate() {
        let x = join_with_sep(doc.src_sentences())?;
        let y = join_with_sep(doc.tgt_sentences())?;
        let mut rng = ChaCha8Rng::seed_from_u64(example_seed(seed, i));
        let p = perturber.perturb(&x, &mut rng, &mut stats)?;

        // sentence index and in-sentence offset of every clean position
        let mut where_ = Vec::with_capacity(x.len());
        let (mut sent, mut off) = (0usize, 0usize);
        for tok in &x {
            where_.push((sent, off));
            if tok == SEP {
                sent += 1;
                off = 0;
            } else {
                off += 1;
            }
        }
        let mut anns: Vec<Vec<Annotation>> = vec![Vec::new(); doc.len()];
        for e in &p.edits {
            let (s, o) = where_[e.position];
            let kind = match e.kind {
                EditKind::ProDrop => Phenomenon::ProDrop,
                EditKind::PunDrop => Phenomenon::PunDrop,
                EditKind::Typo => Phenomenon::DialTypo,
            };
            anns[s].push(Annotation {
                kind,
                position: o,
                surface: e.original.clone(),
                target_pronoun: (kind == Phenomenon::ProDrop)
                    .then(|| translate_word(&e.original).unwrap_or(&e.original).to_string()),
            });
        }
        let pert_sents = crate::corpus::split_by_sep(&p.tokens);
        let turns = pert_sents
            .iter()
            .zip(doc.tgt_sentences())
            .zip(anns)
            .map(|((src, reference), annotations)| Turn {
                src: src.join(" "),
                reference: reference.join(" "),
                annotations,
            })
            .collect();
        dialogues.push(Dialogue {
            id: doc.id().to_string(),
            turns,
        });
        examples.push(LabeledExample {
            labels_clean: crate::perturb::labels_for_clean(&x),
            src: x,
            src_pert: p.tokens,
            labels_pert: p.labels,
            tgt: y,
            edits: p.edits,
        });
    }
    Ok((TestSet::new(dialogues)?, examples, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perturb::PerturbationConfig;

    #[test]
    fn lexicon_is_consistent() {
        let t = tables();
        let vocab: BTreeSet<String> = source_vocabulary().into_iter().collect();
        assert_eq!(vocab.len(), source_vocabulary().len(), "duplicate source word");
        for (k, alts) in t.homophones() {
            assert!(vocab.contains(k));
            for a in alts {
                assert!(!vocab.contains(a), "{a} is a lexicon word");
            }
        }
        assert_eq!(translate_word("她"), Some("she"));
        assert_eq!(translate_word("痴"), None);
    }

    #[test]
    fn documents_translate_word_for_word() {
        let docs = generate_documents(&SynthConfig { documents: 20, ..Default::default() }, 5).unwrap();
        assert_eq!(docs.len(), 20);
        for d in &docs {
            assert!((3..=10).contains(&d.len()));
            let prons: BTreeSet<&str> = d
                .src_sentences()
                .iter()
                .flatten()
                .filter(|w| PRONOUNS.iter().any(|(p, _)| p == w))
                .map(String::as_str)
                .collect();
            assert!(prons.len() <= 1);
            for (s, t) in d.src_sentences().iter().zip(d.tgt_sentences()) {
                let tr: Vec<&str> = s.iter().map(|w| translate_word(w).unwrap()).collect();
                assert_eq!(tr, t.iter().map(String::as_str).collect::<Vec<_>>());
            }
        }
        let again = generate_documents(&SynthConfig { documents: 20, ..Default::default() }, 5).unwrap();
        assert_eq!(docs, again);
    }

    #[test]
    fn testset_annotations_follow_edits() {
        let docs = generate_documents(&SynthConfig { documents: 50, ..Default::default() }, 9).unwrap();
        let t = tables();
        let cfg = PerturbationConfig {
            p_typo: 0.1,
            ..Default::default()
        };
        let perturber = Perturber::new(&t, cfg, source_vocabulary()).unwrap();
        let (ts, examples, _) = build_testset(&docs, &perturber, 1).unwrap();
        assert_eq!(ts.dialogues.len(), 50);
        let mut seen = 0;
        for ((d, doc), ex) in ts.dialogues.iter().zip(&docs).zip(&examples) {
            assert_eq!(d.turns.len(), doc.len());
            for (turn, clean) in d.turns.iter().zip(doc.src_sentences()) {
                for a in &turn.annotations {
                    assert_eq!(clean[a.position], a.surface);
                    if a.kind == Phenomenon::ProDrop {
                        assert_eq!(a.target_pronoun.as_deref(), translate_word(&a.surface));
                    }
                    seen += 1;
                }
            }
            assert_eq!(ex.edits.len(), d.turns.iter().map(|t| t.annotations.len()).sum::<usize>());
        }
        assert!(seen > 0);
    }
}
