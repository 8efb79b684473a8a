//! WebAssembly bindings for the static demo page in `www/`. Every export
//! takes plain values and returns a JSON string.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

use dialmt::eval::{bleu_tokenize, BleuStats};
use dialmt::perturb::{default_segment, EditRecord, Label, PerturbStats, PerturbationConfig, Perturber};
use dialmt::schedule::{lambda_at, Schedule};
use dialmt::synth;
use dialmt::tokenizer::learn_bpe;

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).unwrap_or_else(|e| error_json(&e.to_string()))
}

fn error_json(msg: &str) -> String {
    serde_json::json!({ "error": msg }).to_string()
}

#[derive(Serialize)]
struct PerturbView {
    clean: Vec<String>,
    tokens: Vec<String>,
    labels: Vec<Label>,
    edits: Vec<EditRecord>,
}

/// Perturb a sentence of the synthetic language. Sentences are separated by
/// `<sep>`; CJK runs are split into characters.
#[wasm_bindgen]
pub fn perturb(text: &str, p_pronoun: f64, p_punct: f64, p_typo: f64, p_homophone: f64, seed: u32) -> String {
    let tables = synth::tables();
    let cfg = PerturbationConfig {
        p_pronoun,
        p_punct,
        p_typo,
        p_homophone,
    };
    let perturber = match Perturber::new(&tables, cfg, synth::source_vocabulary()) {
        Ok(p) => p,
        Err(e) => return error_json(&e.to_string()),
    };
    let clean = default_segment(text);
    let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
    match perturber.perturb(&clean, &mut rng, &mut PerturbStats::default()) {
        Ok(p) => to_json(&PerturbView {
            clean,
            tokens: p.tokens,
            labels: p.labels,
            edits: p.edits,
        }),
        Err(e) => error_json(&e.to_string()),
    }
}

/// A few sentences of the synthetic language to start from.
#[wasm_bindgen]
pub fn sample_dialogue(seed: u32) -> String {
    let cfg = synth::SynthConfig {
        documents: 1,
        ..Default::default()
    };
    match synth::generate_documents(&cfg, seed as u64) {
        Ok(docs) => {
            let sents: Vec<String> = docs[0].src_sentences().iter().map(|s| s.join(" ")).collect();
            sents.join(" <sep> ")
        }
        Err(e) => error_json(&e.to_string()),
    }
}

/// `points` evenly spaced samples of the labeling weight up to `last`.
#[wasm_bindgen]
pub fn lambda_curve(horizon: f64, floor: f64, last: f64, points: u32) -> String {
    let s = Schedule {
        horizon: horizon as u64,
        floor,
    };
    if let Err(e) = s.validate() {
        return error_json(&e.to_string());
    }
    let n = points.max(2) as u64;
    let last = last.max(0.0) as u64;
    let curve: Vec<(u64, f64)> = (0..n)
        .map(|i| {
            let u = last * i / (n - 1);
            (u, lambda_at(u, &s))
        })
        .collect();
    to_json(&curve)
}

#[derive(Serialize)]
struct BleuView {
    bleu: f64,
    precisions: Vec<f64>,
    brevity_penalty: f64,
    hyp_len: u64,
    ref_len: u64,
    hyp_tokens: Vec<String>,
    ref_tokens: Vec<String>,
}

/// Sentence BLEU with its components. One sentence per line; lines are
/// paired in order and pooled.
#[wasm_bindgen]
pub fn bleu(hyp: &str, reference: &str) -> String {
    let mut st = BleuStats::default();
    let (hl, rl): (Vec<&str>, Vec<&str>) = (hyp.lines().collect(), reference.lines().collect());
    if hl.len() != rl.len() {
        return error_json(&format!("{} hypothesis lines vs {} reference lines", hl.len(), rl.len()));
    }
    for (h, r) in hl.iter().zip(&rl) {
        st.add_sentence(h, r);
    }
    let bp = if st.hyp_len == 0 {
        0.0
    } else if st.hyp_len < st.ref_len {
        (1.0 - st.ref_len as f64 / st.hyp_len as f64).exp()
    } else {
        1.0
    };
    to_json(&BleuView {
        bleu: st.score(),
        precisions: (0..4)
            .map(|i| if st.totals[i] == 0 { 0.0 } else { st.matches[i] as f64 / st.totals[i] as f64 })
            .collect(),
        brevity_penalty: bp,
        hyp_len: st.hyp_len,
        ref_len: st.ref_len,
        hyp_tokens: hl.iter().flat_map(|h| bleu_tokenize(h)).collect(),
        ref_tokens: rl.iter().flat_map(|r| bleu_tokenize(r)).collect(),
    })
}

#[derive(Serialize)]
struct SegmentView {
    merges: Vec<(String, String)>,
    pieces: Vec<String>,
}

/// Learn `max_merges` merges on `corpus` (one sentence per line) and
/// segment `text` with them.
#[wasm_bindgen]
pub fn segment(corpus: &str, max_merges: u32, text: &str) -> String {
    let lines: Vec<Vec<String>> = corpus
        .lines()
        .map(|l| l.split_whitespace().map(str::to_string).collect::<Vec<_>>())
        .filter(|l| !l.is_empty())
        .collect();
    let model = match learn_bpe(lines.iter(), max_merges as usize) {
        Ok(m) => m,
        Err(e) => return error_json(&e.to_string()),
    };
    let words: Vec<String> = text.split_whitespace().map(str::to_string).collect();
    to_json(&SegmentView {
        merges: model.merges().to_vec(),
        pieces: model.apply(&words).pieces,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Value;

    fn parse(s: &str) -> Value {
        serde_json::from_str(s).unwrap()
    }

    #[test]
    fn perturb_with_zero_rates_is_identity() {
        let v = parse(&perturb("我 要 吃 饭 。", 0.0, 0.0, 0.0, 0.0, 1));
        assert_eq!(v["clean"], v["tokens"]);
        assert!(v["edits"].as_array().unwrap().is_empty());
    }

    #[test]
    fn perturb_drops_everything_it_can() {
        let v = parse(&perturb("我 要 吃 饭 。", 1.0, 1.0, 0.0, 0.0, 1));
        let tokens: Vec<&str> = v["tokens"].as_array().unwrap().iter().map(|t| t.as_str().unwrap()).collect();
        assert_eq!(tokens, ["要", "吃", "饭"]);
        assert_eq!(v["labels"], serde_json::json!([2, 0, 3]));
    }

    #[test]
    fn bad_rates_are_reported() {
        assert!(parse(&perturb("我", 2.0, 0.0, 0.0, 0.0, 1))["error"].is_string());
        assert!(parse(&lambda_curve(0.0, 0.2, 10.0, 3))["error"].is_string());
    }

    #[test]
    fn sample_dialogue_has_sentences() {
        let text = sample_dialogue(3);
        assert!(text.split(" <sep> ").count() >= 3, "{text}");
        assert_eq!(parse(&perturb(&text, 0.0, 0.0, 0.0, 0.0, 1))["tokens"].as_array().unwrap().len(), default_segment(&text).len());
    }

    #[test]
    fn curve_endpoints() {
        let v = parse(&lambda_curve(100_000.0, 0.2, 200_000.0, 5));
        assert_eq!(v[0], serde_json::json!([0, 1.0]));
        assert_eq!(v[2], serde_json::json!([100_000, 0.2]));
        assert_eq!(v[4], serde_json::json!([200_000, 0.2]));
    }

    #[test]
    fn bleu_components() {
        let v = parse(&bleu("the cat sat down on", "the cat sat down"));
        assert!((v["bleu"].as_f64().unwrap() - 66.874).abs() < 0.01);
        assert_eq!(v["precisions"][3], 0.5);
        assert_eq!(v["brevity_penalty"], 1.0);
        assert!(parse(&bleu("a\nb", "a"))["error"].is_string());
    }

    #[test]
    fn segmentation_uses_learned_merges() {
        let corpus = "low low low low low\nlower lower\nnewest newest newest newest newest newest\nwidest widest widest";
        let v = parse(&segment(corpus, 10, "lower newest"));
        assert_eq!(v["merges"].as_array().unwrap().len(), 10);
        assert_eq!(v["pieces"], serde_json::json!(["lo", "@@w", "@@e", "@@r", "newest"]));
    }
}
