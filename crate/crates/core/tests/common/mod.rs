//! Checks shared by the integration tests and the acceptance runner. Each
//! returns a one-line summary on success and the first violation otherwise.

#![allow(dead_code)]

use std::collections::HashMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dialmt::corpus::{sample_corpus, tokenize_line, SamplingConfig};
use dialmt::dataset::{make_examples, write_examples, GenerationReport, LabeledExample};
use dialmt::decode::{
    beam_search, greedy, translate_dialogue, translate_sentence, BeamConfig, DialoguePipeline, IncrementalScorer,
    ModelTranslator, SequenceTranslator,
};
use dialmt::eval::{
    context_sweep, corpus_bleu, labeling_prf, prodrop_recovery, sweep_csv, testset_bleu, Annotation, ContextMode,
    Dialogue, Phenomenon, TestSet, Turn,
};
use dialmt::model::{combined_loss_tensor, label_probs, labeling_nll, Ctx, ModelConfig, Transformer};
use dialmt::perturb::{derive_labels_by_alignment, invert_edits, Label, PerturbationConfig, Perturber};
use dialmt::synth::{self, SynthConfig};
use dialmt::tokenizer::{learn_bpe, undo_bpe, BpeModel, DEFAULT_MAX_MERGES, EOS_ID};
use dialmt::train::{
    batch_losses, build_training_stream, encode_items, lambda_at, make_batch, train, EncodedItem, OptimizerConfig, Schedule,
    TrainConfig, TrainingMode,
};

pub type Check = std::result::Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($arg:tt)*) => {
        if !$cond {
            return Err(format!($($arg)*));
        }
    };
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

pub fn toks(s: &str) -> Vec<String> {
    tokenize_line(s)
}

// ---------------------------------------------------------------- schedule

pub fn check_lambda_schedule() -> Check {
    let s = Schedule {
        horizon: 100_000,
        floor: 0.2,
    };
    let got: Vec<f64> = [0, 50_000, 100_000, 200_000].iter().map(|&u| lambda_at(u, &s)).collect();
    ensure!(got == [1.0, 0.5, 0.2, 0.2], "lambda values {got:?}");
    Ok(format!("lambda_at = {got:?}"))
}

// ------------------------------------------------------------ perturbation

/// Synthetic sub-documents perturbed with `cfg`.
pub fn synthetic_examples(documents: usize, cfg: PerturbationConfig, seed: u64) -> (Vec<LabeledExample>, GenerationReport) {
    let docs = synth::generate_documents(
        &SynthConfig {
            documents,
            ..Default::default()
        },
        seed,
    )
    .unwrap();
    let pairs = sample_corpus(&docs, &SamplingConfig::default(), seed);
    let tables = synth::tables();
    let perturber = Perturber::new(&tables, cfg, synth::source_vocabulary()).unwrap();
    let (examples, stats) = make_examples(&pairs, &perturber, seed).unwrap();
    let report = GenerationReport::new(examples.len(), stats, &cfg);
    (examples, report)
}

fn serialized(examples: &[LabeledExample]) -> Vec<u8> {
    let mut out = Vec::new();
    write_examples(&mut out, examples).unwrap();
    out
}

pub fn check_perturbation_rates(documents: usize) -> Check {
    let cfg = PerturbationConfig::default();
    let (examples, report) = synthetic_examples(documents, cfg, 2024);
    let st = &report.stats;
    let words: usize = examples
        .iter()
        .map(|e| e.src.iter().filter(|t| t.as_str() != dialmt::corpus::SEP).count())
        .sum();
    ensure!(
        st.pronoun_sites >= 10_000 && st.punct_sites >= 10_000 && words >= 100_000,
        "corpus too small: {} pronoun sites, {} punctuation sites, {words} words",
        st.pronoun_sites,
        st.punct_sites
    );
    for r in &report.rates {
        ensure!(
            r.within,
            "{}: {}/{} outside 99% interval [{}, {}]",
            r.name,
            r.successes,
            r.trials,
            r.interval.0,
            r.interval.1
        );
    }
    let (again, _) = synthetic_examples(documents, cfg, 2024);
    ensure!(serialized(&examples) == serialized(&again), "same seed gave different output");
    let (other, _) = synthetic_examples(documents, cfg, 2025);
    ensure!(serialized(&examples) != serialized(&other), "different seeds gave identical output");
    let rates: Vec<String> = report.rates.iter().map(|r| format!("{} {:.4}", r.name, r.observed)).collect();
    Ok(format!(
        "{} pronoun / {} punct sites, {words} words; {}; byte-identical rerun",
        st.pronoun_sites,
        st.punct_sites,
        rates.join(", ")
    ))
}

pub fn check_oracles(n: usize, cfg: PerturbationConfig, seed: u64) -> Check {
    let (examples, _) = synthetic_examples(n, cfg, seed);
    ensure!(examples.len() >= n, "only {} examples", examples.len());
    let tables = synth::tables();
    let mut edited = 0;
    for (i, ex) in examples.iter().take(n).enumerate() {
        let derived = derive_labels_by_alignment(&ex.src, &ex.src_pert, &tables).map_err(e)?;
        ensure!(derived == ex.labels_pert, "example {i}: alignment labels differ from generator labels");
        let back = invert_edits(&ex.src_pert, &ex.edits).map_err(e)?;
        ensure!(back == ex.src, "example {i}: inverting the edits does not restore the source");
        edited += usize::from(!ex.edits.is_empty());
    }
    Ok(format!("{n} examples ({edited} with edits): labels and inversion exact"))
}

// --------------------------------------------------------------------- bpe

pub fn micro_corpus() -> Vec<Vec<String>> {
    let mut c = Vec::new();
    for (w, n) in [("low", 5), ("lower", 2), ("newest", 6), ("widest", 3)] {
        for _ in 0..n {
            c.push(vec![w.to_string()]);
        }
    }
    c
}

/// Merge order traced by hand on the micro corpus (ties to the smaller pair).
pub const MICRO_MERGES: [(&str, &str); 10] = [
    ("e", "s"),
    ("es", "t</w>"),
    ("l", "o"),
    ("e", "w"),
    ("ew", "est</w>"),
    ("n", "ewest</w>"),
    ("lo", "w</w>"),
    ("d", "est</w>"),
    ("i", "dest</w>"),
    ("w", "idest</w>"),
];

const TOKEN_ALPHABET: &[&str] = &[
    "a", "b", "e", "l", "o", "w", "s", "t", "我", "你", "的", "@", "@@", "\\", "<", ">", "/", "w>", "</w>", "<sep>",
    "<unk>", "。", "？", "é", "ß", "1",
];

pub fn random_line<R: Rng>(rng: &mut R) -> Vec<String> {
    let n = rng.random_range(1..=12);
    (0..n)
        .map(|_| {
            let k = rng.random_range(1..=4);
            (0..k).map(|_| TOKEN_ALPHABET[rng.random_range(0..TOKEN_ALPHABET.len())]).collect::<String>()
        })
        .collect()
}

pub fn check_bpe(lines: usize) -> Check {
    let m = learn_bpe(micro_corpus(), 10).map_err(e)?;
    let got: Vec<(&str, &str)> = m.merges().iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
    ensure!(got == MICRO_MERGES, "micro-corpus merges {got:?}");

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let train: Vec<Vec<String>> = (0..2000).map(|_| random_line(&mut rng)).collect();
    let model = learn_bpe(train.iter(), 500).map_err(e)?;
    for i in 0..lines {
        let line = random_line(&mut rng);
        let seg = model.apply(&line);
        let back = undo_bpe(&seg.pieces).map_err(|err| format!("line {i} {line:?}: {err}"))?;
        ensure!(back == line, "line {i}: {line:?} came back as {back:?}");
    }

    ensure!(DEFAULT_MAX_MERGES == 30_000, "default cap {DEFAULT_MAX_MERGES}");
    let big = learn_bpe(train.iter(), DEFAULT_MAX_MERGES).map_err(e)?;
    ensure!(big.merges().len() <= DEFAULT_MAX_MERGES, "{} merges", big.merges().len());
    let capped = learn_bpe(train.iter(), 50).map_err(e)?;
    ensure!(capped.merges().len() == 50, "cap 50 gave {} merges", capped.merges().len());
    Ok(format!(
        "hand-traced merge order matches; {lines} random lines round-trip; {} merges under the 30k cap",
        big.merges().len()
    ))
}

// --------------------------------------------------------------- gradients

fn set_entry(var: &Var, index: usize, value: f64) {
    let dims = var.dims().to_vec();
    let mut data = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
    data[index] = value;
    var.set(&Tensor::from_vec(data, dims, var.device()).unwrap()).unwrap();
}

fn entry(var: &Var, index: usize) -> f64 {
    var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap()[index]
}

fn gradcheck_items() -> Vec<EncodedItem> {
    vec![
        EncodedItem {
            src: vec![5, 6, 7, 4, 8, EOS_ID],
            tgt: vec![9, 10, 4, 11],
            labels: Some(vec![0, 1, 0, 0, 2, 0]),
        },
        EncodedItem {
            src: vec![12, 4, 13, EOS_ID],
            tgt: vec![14, 4, 15, 16, 17],
            labels: Some(vec![3, 0, 0, 0]),
        },
    ]
}

pub fn check_gradients(samples: usize, seed: u64) -> Check {
    let model = Transformer::new(ModelConfig::tiny(20, 20), seed, DType::F64, &Device::Cpu).map_err(e)?;
    let items = gradcheck_items();
    let refs: Vec<&EncodedItem> = items.iter().collect();
    let batch = make_batch(&refs, &model).map_err(e)?;
    let loss = || -> f64 {
        let (mt, sl) = batch_losses(&model, &batch, &Ctx::eval(), 0.1, true).unwrap();
        let total = combined_loss_tensor(&mt, &sl.unwrap(), 0.5).unwrap();
        total.to_scalar::<f64>().unwrap()
    };
    let (mt, sl) = batch_losses(&model, &batch, &Ctx::eval(), 0.1, true).map_err(e)?;
    let total = combined_loss_tensor(&mt, &sl.ok_or("no labeling loss")?, 0.5).map_err(e)?;
    let grads = total.backward().map_err(e)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xFD);
    let params = model.params();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut nonzero = 0;
    for _ in 0..samples {
        let (name, var) = &params[rng.random_range(0..params.len())];
        let index = rng.random_range(0..var.elem_count());
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all().map_err(e)?.to_vec1::<f64>().map_err(e)?[index],
            None => 0.0,
        };
        let x = entry(var, index);
        set_entry(var, index, x + h);
        let up = loss();
        set_entry(var, index, x - h);
        let down = loss();
        set_entry(var, index, x);
        let numeric = (up - down) / (2.0 * h);
        let scale = analytic.abs().max(numeric.abs());
        let rel = if scale == 0.0 { 0.0 } else { (analytic - numeric).abs() / scale };
        ensure!(
            rel < 1e-3,
            "{name}[{index}]: analytic {analytic:e}, numeric {numeric:e}, relative error {rel:e}"
        );
        worst = worst.max(rel);
        nonzero += usize::from(scale > 0.0);
    }
    Ok(format!("{samples} parameters ({nonzero} with non-zero gradient), max relative error {worst:.2e}"))
}

// ------------------------------------------------------------ labeling head

pub fn check_labeling_head() -> Check {
    let model = Transformer::new(ModelConfig::tiny(30, 30), 5, DType::F64, &Device::Cpu).map_err(e)?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut rows = 0;
    for _ in 0..50 {
        let len = rng.random_range(1..20);
        let src: Vec<u32> = (0..len).map(|_| rng.random_range(4..30)).collect();
        let enc = model.encode(&src).map_err(e)?;
        for (i, p) in label_probs(model.head(), &enc).map_err(e)?.iter().enumerate() {
            let s: f64 = p.iter().sum();
            ensure!((s - 1.0).abs() <= 1e-6, "row {i} sums to {s}");
            rows += 1;
        }
    }
    let head = model.head();
    head.weight().set(&head.weight().zeros_like().map_err(e)?).map_err(e)?;
    head.bias().set(&head.bias().zeros_like().map_err(e)?).map_err(e)?;
    let src = [5u32, 6, 7, 8, EOS_ID];
    let enc = model.encode(&src).map_err(e)?;
    for p in label_probs(head, &enc).map_err(e)? {
        ensure!(p.iter().all(|&x| (x - 0.25).abs() < 1e-12), "uniform head gave {p:?}");
    }
    let ln4 = 4f64.ln();
    for labels in [[0u8, 0, 0, 0, 0], [1, 2, 3, 0, 1], [3, 3, 3, 3, 3]] {
        let nll = labeling_nll(head, &enc, &labels).map_err(e)?;
        ensure!((nll - ln4).abs() <= 1e-9, "uniform head nll {nll} for {labels:?}");
    }
    Ok(format!("{rows} rows sum to 1; uniform head gives 0.25 and ln 4"))
}

// ---------------------------------------------------------------- decoding

/// Scorer with random next-token distributions keyed by the prefix. Ids:
/// 0 = BOS (never generated), 1 = EOS, 2.. = words.
pub struct TableScorer {
    pub words: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl TableScorer {
    fn dist(&self, prefix: &[u32]) -> Vec<f64> {
        let mut h = self.seed;
        for &t in prefix {
            h = h.wrapping_mul(0x100_0000_01B3).wrapping_add(t as u64 + 1);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(h);
        let mut logits: Vec<f64> = (0..self.words + 2).map(|_| rng.random_range(-3.0..3.0)).collect();
        logits[0] = f64::NEG_INFINITY;
        let z = logits.iter().map(|l| l.exp()).sum::<f64>().ln();
        logits.iter().map(|l| l - z).collect()
    }

    /// Every output of length at most `max_len`, with its total score.
    pub fn enumerate(&self) -> Vec<(Vec<u32>, f64)> {
        let mut out = Vec::new();
        let mut frontier: Vec<(Vec<u32>, f64)> = vec![(vec![], 0.0)];
        for len in 0..=self.max_len {
            let mut next = Vec::new();
            for (seq, s) in &frontier {
                let lp = self.dist(seq);
                out.push((seq.clone(), s + lp[1]));
                if len < self.max_len {
                    for w in 2..self.words as u32 + 2 {
                        let mut t = seq.clone();
                        t.push(w);
                        next.push((t, s + lp[w as usize]));
                    }
                }
            }
            frontier = next;
        }
        out
    }
}

impl IncrementalScorer for TableScorer {
    type Cache = Vec<Vec<u32>>;

    fn vocab_size(&self) -> usize {
        self.words + 2
    }
    fn bos(&self) -> u32 {
        0
    }
    fn eos(&self) -> u32 {
        1
    }
    fn is_generable(&self, id: u32) -> bool {
        id != 0
    }
    fn max_output_len(&self) -> usize {
        self.max_len + 1
    }
    fn begin(&self, _src: &[u32]) -> dialmt::Result<Self::Cache> {
        Ok(vec![vec![]])
    }
    fn advance(&self, cache: &mut Self::Cache, tokens: &[u32]) -> dialmt::Result<Vec<Vec<f64>>> {
        let mut out = Vec::new();
        for (row, &t) in cache.iter_mut().zip(tokens) {
            if t != 0 {
                row.push(t);
            }
            out.push(self.dist(row));
        }
        Ok(out)
    }
    fn reorder(&self, cache: &mut Self::Cache, rows: &[usize]) -> dialmt::Result<()> {
        *cache = rows.iter().map(|&r| cache[r].clone()).collect();
        Ok(())
    }
}

pub fn toy_beam(max_len: usize, beam: usize) -> BeamConfig {
    BeamConfig {
        beam_size: beam,
        max_len_a: 0.0,
        max_len_b: max_len,
        length_penalty_alpha: 0.0,
    }
}

pub fn check_exhaustive_toy(seeds: u64) -> Check {
    for seed in 0..seeds {
        let toy = TableScorer {
            words: 3,
            max_len: 3,
            seed,
        };
        let all = toy.enumerate();
        ensure!(all.len() == 1 + 3 + 9 + 27, "enumerated {}", all.len());
        let best = all
            .iter()
            .max_by(|a, b| a.1.total_cmp(&b.1).then_with(|| b.0.cmp(&a.0)))
            .unwrap();
        let got = beam_search(&toy, &[2], &toy_beam(3, 27), None).map_err(e)?;
        ensure!(
            got.tokens == best.0 && (got.score - best.1).abs() < 1e-12,
            "seed {seed}: beam {:?} ({}) vs exhaustive {:?} ({})",
            got.tokens,
            got.score,
            best.0,
            best.1
        );
    }
    Ok(format!("beam 27 equals the exhaustive argmax on {seeds} random toys"))
}

pub fn tiny_model(seed: u64) -> Transformer {
    Transformer::new(ModelConfig::tiny(24, 24), seed, DType::F32, &Device::Cpu).unwrap()
}

pub fn check_beam1_greedy(inputs: usize) -> Check {
    let model = tiny_model(3);
    let cfg = BeamConfig {
        beam_size: 1,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for i in 0..inputs {
        let len = rng.random_range(1..12);
        let mut src: Vec<u32> = (0..len).map(|_| rng.random_range(4..24)).collect();
        src.push(EOS_ID);
        let b = beam_search(&model, &src, &cfg, None).map_err(e)?;
        let g = greedy(&model, &src, &cfg, &[]).map_err(e)?;
        ensure!(b.tokens == g.tokens, "input {i}: beam-1 {:?} vs greedy {:?}", b.tokens, g.tokens);
    }
    Ok(format!("beam-1 equals greedy on {inputs} inputs"))
}

/// Subword models for the synthetic language and a tiny model over them.
pub struct SynthKit {
    pub src_bpe: BpeModel,
    pub tgt_bpe: BpeModel,
    pub examples: Vec<LabeledExample>,
}

pub fn synth_kit(documents: usize) -> SynthKit {
    let (examples, _) = synthetic_examples(documents, PerturbationConfig::default(), 9);
    let src_bpe = learn_bpe(examples.iter().flat_map(|e| [&e.src, &e.src_pert]), 200).unwrap();
    let tgt_bpe = learn_bpe(examples.iter().map(|e| &e.tgt), 200).unwrap();
    SynthKit {
        src_bpe,
        tgt_bpe,
        examples,
    }
}

impl SynthKit {
    pub fn model(&self, seed: u64) -> Transformer {
        let cfg = ModelConfig {
            max_positions: 256,
            ..ModelConfig::tiny(self.src_bpe.vocab().len(), self.tgt_bpe.vocab().len())
        };
        Transformer::new(cfg, seed, DType::F32, &Device::Cpu).unwrap()
    }

    pub fn translator<'a>(&'a self, model: &'a Transformer, beam: usize) -> ModelTranslator<'a> {
        ModelTranslator {
            model,
            src_bpe: &self.src_bpe,
            tgt_bpe: &self.tgt_bpe,
            beam: BeamConfig {
                beam_size: beam,
                ..Default::default()
            },
        }
    }

    /// Train `model` briefly on the clean pairs.
    pub fn train(&self, model: &Transformer, mode: TrainingMode, updates: u64) -> Vec<dialmt::train::TraceRow> {
        let items = build_training_stream(mode, &self.examples, mode == TrainingMode::Mtl).unwrap();
        let encoded = encode_items(&items, &self.src_bpe, &self.tgt_bpe).unwrap();
        let cfg = TrainConfig {
            optimizer: OptimizerConfig {
                batch_tokens: 400,
                warmup_updates: 20,
                learning_rate: 3e-3,
                dropout: 0.0,
                ..Default::default()
            },
            max_updates: updates,
            log_every: 0,
            ..TrainConfig::new(mode)
        };
        train(model, &encoded, &[], &cfg, None).unwrap().trace
    }
}

pub fn check_forced_prefix(kit: &SynthKit) -> Check {
    let model = kit.model(4);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = BeamConfig::default();
    let vocab = model.target_vocab() as u32;
    for i in 0..30 {
        let len = rng.random_range(1..10);
        let mut src: Vec<u32> = (0..len).map(|_| rng.random_range(5..kit.src_bpe.vocab().len() as u32)).collect();
        src.push(EOS_ID);
        let plen = rng.random_range(0..6);
        let prefix: Vec<u32> = (0..plen).map(|_| rng.random_range(4..vocab)).collect();
        let hyp = beam_search(&model, &src, &cfg, Some(&prefix)).map_err(e)?;
        ensure!(hyp.tokens.starts_with(&prefix), "input {i}: {:?} lost prefix {prefix:?}", hyp.tokens);
    }
    let tr = kit.translator(&model, 3);
    for ex in kit.examples.iter().take(30) {
        let sents = dialmt::corpus::split_by_sep(&ex.tgt);
        let prefix = sents[0].clone();
        let out = tr.translate(&ex.src, &prefix).map_err(e)?;
        ensure!(out.starts_with(&prefix), "word prefix {prefix:?} not preserved in {out:?}");
    }
    Ok("forced prefixes preserved at id and word level".into())
}

pub fn check_offline_counts(kit: &SynthKit) -> Check {
    let model = kit.model(6);
    let tr = kit.translator(&model, 2);
    let mut checked = 0;
    for ex in kit.examples.iter().take(40) {
        let sents = dialmt::corpus::split_by_sep(&ex.src_pert);
        let out = translate_dialogue(&tr, &sents, ContextMode::Offline, 0).map_err(e)?;
        ensure!(out.len() == sents.len(), "{} outputs for {} sentences", out.len(), sents.len());
        checked += 1;
    }
    Ok(format!("{checked} dialogues keep their sentence count"))
}

// ----------------------------------------------------------------- metrics

/// Straightforward corpus BLEU-4 on whitespace tokens.
pub fn reference_bleu(hyps: &[&str], refs: &[&str]) -> f64 {
    let mut m = [0usize; 4];
    let mut t = [0usize; 4];
    let (mut hl, mut rl) = (0, 0);
    for (h, r) in hyps.iter().zip(refs) {
        let h: Vec<&str> = h.split_whitespace().collect();
        let r: Vec<&str> = r.split_whitespace().collect();
        hl += h.len();
        rl += r.len();
        for n in 1..=4 {
            let mut rc: HashMap<&[&str], usize> = HashMap::new();
            for g in r.windows(n) {
                *rc.entry(g).or_default() += 1;
            }
            for g in h.windows(n) {
                t[n - 1] += 1;
                if let Some(c) = rc.get_mut(g) {
                    if *c > 0 {
                        *c -= 1;
                        m[n - 1] += 1;
                    }
                }
            }
        }
    }
    if hl == 0 || m.contains(&0) {
        return 0.0;
    }
    let p: f64 = (0..4).map(|i| m[i] as f64 / t[i] as f64).product();
    let bp = if hl < rl { (1.0 - rl as f64 / hl as f64).exp() } else { 1.0 };
    100.0 * bp * p.powf(0.25)
}

/// Hand-computed fixtures: (hypotheses, references, BLEU).
pub fn bleu_fixtures() -> Vec<(Vec<&'static str>, Vec<&'static str>, f64)> {
    vec![
        // p = 4/5, 3/4, 2/3, 1/2; no brevity penalty: 100 * 0.2^(1/4)
        (vec!["the cat sat down on"], vec!["the cat sat down"], 66.874),
        // p = 1, 4/5, 3/4, 2/3; BP = exp(1 - 7/6): 100 * 0.4^(1/4) * e^(-1/6)
        (vec!["the cat sat on the mat"], vec!["the cat sat on the red mat"], 67.318),
        // pooled p = 8/9, 6/7, 4/5, 2/3; lengths 9 vs 10
        (
            vec!["a b c d e", "x y z w"],
            vec!["a b c d f", "x y z w v"],
            71.445,
        ),
    ]
}

fn recovery_fixture(hyp: &str) -> dialmt::Result<dialmt::eval::Recovery> {
    let ts = TestSet::new(vec![Dialogue {
        id: "t1".into(),
        turns: vec![Turn {
            src: "哭 了 吗 ？".into(),
            reference: "Did she cry ?".into(),
            annotations: vec![Annotation {
                kind: Phenomenon::ProDrop,
                position: 0,
                surface: "她".into(),
                target_pronoun: Some("she".into()),
            }],
        }],
    }])?;
    prodrop_recovery(&ts, &vec![vec![hyp.to_string()]])
}

pub fn check_metrics() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..200 {
        let n = rng.random_range(4..30);
        let h: Vec<String> = (0..n).map(|_| format!("w{}", rng.random_range(0..20))).collect();
        let h = h.join(" ");
        let b = corpus_bleu(&[&h], &[&h]).map_err(e)?;
        ensure!(b == 100.0, "BLEU(h, h) = {b} for {h:?}");
    }
    for (hyps, refs, expected) in bleu_fixtures() {
        let got = corpus_bleu(&hyps, &refs).map_err(e)?;
        ensure!((got - expected).abs() < 0.05, "{hyps:?}: {got} vs {expected}");
        let oracle = reference_bleu(&hyps, &refs);
        ensure!((got - oracle).abs() < 1e-9, "{hyps:?}: {got} vs oracle {oracle}");
    }
    let she = recovery_fixture("Did she cry ?").map_err(e)?;
    ensure!(she.recovered == 1 && she.total == 1, "'Did she cry ?' not recovered");
    let you = recovery_fixture("Did you cry ?").map_err(e)?;
    ensure!(you.recovered == 0 && you.total == 1, "'Did you cry ?' counted as recovered");

    use Label::*;
    let gold = vec![vec![Typo, Typo, Typo, Correct, Typo, Typo]];
    let pred = vec![vec![Typo, Typo, Typo, Typo, Correct, Correct]];
    let rep = labeling_prf(&gold, &pred).map_err(e)?;
    let c = rep.class(Typo);
    ensure!(c.tp == 3 && c.fp == 1 && c.fn_ == 2, "counts {} {} {}", c.tp, c.fp, c.fn_);
    let (p, r, f) = (c.precision.unwrap(), c.recall.unwrap(), c.f1.unwrap());
    ensure!(
        (p - 0.75).abs() < 1e-12 && (r - 0.6).abs() < 1e-12 && (f - 2.0 / 3.0).abs() < 1e-12,
        "P {p} R {r} F1 {f}"
    );
    Ok("BLEU(h,h)=100, three fixtures within 0.05, recovery and PRF fixtures exact".into())
}

// ---------------------------------------------------------- context sweep

pub fn synthetic_testset(documents: usize, seed: u64) -> TestSet {
    let docs = synth::generate_documents(
        &SynthConfig {
            documents,
            ..Default::default()
        },
        seed,
    )
    .unwrap();
    let tables = synth::tables();
    let perturber = Perturber::new(&tables, PerturbationConfig::default(), synth::source_vocabulary()).unwrap();
    synth::build_testset(&docs, &perturber, seed).unwrap().0
}

pub fn check_context_sweep(kit: &SynthKit, updates: u64) -> Check {
    let model = kit.model(10);
    kit.train(&model, TrainingMode::Base, updates);
    let tr = kit.translator(&model, 2);
    let ts = synthetic_testset(25, 77);
    let pipe = DialoguePipeline { mt: &tr, repair: None };
    let ks = [0, 1, 2, 3];
    let rows = context_sweep(&pipe, &ts, ContextMode::OnlineCut, &ks).map_err(e)?;
    let hyps: Vec<Vec<String>> = ts
        .dialogues
        .iter()
        .map(|d| {
            d.turns
                .iter()
                .map(|t| translate_sentence(&tr, &toks(&t.src)).map(|w| w.join(" ")))
                .collect::<dialmt::Result<Vec<_>>>()
        })
        .collect::<dialmt::Result<_>>()
        .map_err(e)?;
    let bleu = testset_bleu(&ts, &hyps).map_err(e)?;
    let acc = prodrop_recovery(&ts, &hyps).map_err(e)?.accuracy;
    let k0 = rows.iter().find(|r| r.k == Some(0)).ok_or("no k=0 row")?;
    ensure!(
        k0.bleu == bleu && k0.prodrop_accuracy == acc,
        "k=0 row ({}, {:?}) differs from sentence-level ({bleu}, {acc:?})",
        k0.bleu,
        k0.prodrop_accuracy
    );
    let csv = sweep_csv(&rows);
    let again = sweep_csv(&context_sweep(&pipe, &ts, ContextMode::OnlineCut, &ks).map_err(e)?);
    ensure!(csv == again, "sweep CSV differs across reruns");
    Ok(format!(
        "k=0 row equals sentence-level (BLEU {bleu:.2}); CSV identical on rerun ({} rows)",
        rows.len()
    ))
}
