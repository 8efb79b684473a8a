//! Translation and labeling metrics: corpus BLEU-4, BLEU restricted to
//! annotated phenomena, dropped-pronoun recovery, per-class labeling P/R/F1
//! and context-length sweeps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};
use crate::perturb::Label;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phenomenon {
    ProDrop,
    PunDrop,
    DialTypo,
}

impl std::fmt::Display for Phenomenon {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phenomenon::ProDrop => "prodrop",
            Phenomenon::PunDrop => "pundrop",
            Phenomenon::DialTypo => "dialtypo",
        })
    }
}

/// One annotated phenomenon in a source sentence. The sentence index is the
/// position of the owning turn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub kind: Phenomenon,
    #[serde(rename = "pos")]
    pub position: usize,
    pub surface: String,
    #[serde(rename = "pron", default, skip_serializing_if = "Option::is_none")]
    pub target_pronoun: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub src: String,
    #[serde(rename = "ref")]
    pub reference: String,
    #[serde(rename = "ann", default)]
    pub annotations: Vec<Annotation>,
}

fn id_from_any<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<String, D::Error> {
    Ok(match serde_json::Value::deserialize(d)? {
        serde_json::Value::String(s) => s,
        other => other.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialogue {
    #[serde(deserialize_with = "id_from_any")]
    pub id: String,
    pub turns: Vec<Turn>,
}

impl Dialogue {
    pub fn sources(&self) -> Vec<String> {
        self.turns.iter().map(|t| t.src.clone()).collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TestSet {
    pub dialogues: Vec<Dialogue>,
}

/// Hypotheses aligned with a test set: one list of sentences per dialogue.
pub type Hypotheses = Vec<Vec<String>>;

impl TestSet {
    pub fn new(dialogues: Vec<Dialogue>) -> Result<Self> {
        let ts = Self { dialogues };
        ts.validate()?;
        Ok(ts)
    }

    pub fn validate(&self) -> Result<()> {
        for d in &self.dialogues {
            for (i, t) in d.turns.iter().enumerate() {
                if t.reference.trim().is_empty() {
                    return Err(Error::Annotation(format!("dialogue {} turn {i}: empty reference", d.id)));
                }
                for a in &t.annotations {
                    if a.kind == Phenomenon::ProDrop && a.target_pronoun.is_none() {
                        return Err(Error::Annotation(format!(
                            "dialogue {} turn {i}: prodrop annotation without a target pronoun",
                            d.id
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn from_jsonl(text: &str, path: &Path) -> Result<Self> {
        let mut dialogues = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            dialogues.push(serde_json::from_str(line).map_err(|e| Error::parse(path, i + 1, e.to_string()))?);
        }
        Self::new(dialogues)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(&text, path)
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for d in &self.dialogues {
            s.push_str(&serde_json::to_string(d).expect("dialogue serializes"));
            s.push('\n');
        }
        s
    }

    pub fn sentence_count(&self) -> usize {
        self.dialogues.iter().map(|d| d.turns.len()).sum()
    }

    fn check_aligned(&self, hyps: &Hypotheses) -> Result<()> {
        if hyps.len() != self.dialogues.len() {
            return Err(Error::Input(format!(
                "{} hypothesis dialogues for {} test dialogues",
                hyps.len(),
                self.dialogues.len()
            )));
        }
        for (d, h) in self.dialogues.iter().zip(hyps) {
            if d.turns.len() != h.len() {
                return Err(Error::Input(format!(
                    "dialogue {}: {} hypotheses for {} turns",
                    d.id,
                    h.len(),
                    d.turns.len()
                )));
            }
        }
        Ok(())
    }
}

/// Lowercase, then split every non-alphanumeric, non-space character into
/// its own token.
pub fn bleu_tokenize(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in s.chars().flat_map(char::to_lowercase) {
        if c.is_alphanumeric() {
            cur.push(c);
            continue;
        }
        if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
        if !c.is_whitespace() {
            out.push(c.to_string());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Sufficient statistics for corpus BLEU-4.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BleuStats {
    pub matches: [u64; 4],
    pub totals: [u64; 4],
    pub hyp_len: u64,
    pub ref_len: u64,
}

impl BleuStats {
    pub fn add_sentence(&mut self, hyp: &str, reference: &str) {
        let h = bleu_tokenize(hyp);
        let r = bleu_tokenize(reference);
        self.hyp_len += h.len() as u64;
        self.ref_len += r.len() as u64;
        for n in 1..=4 {
            let hc = ngram_counts(&h, n);
            let rc = ngram_counts(&r, n);
            self.totals[n - 1] += h.len().saturating_sub(n - 1) as u64;
            self.matches[n - 1] += hc
                .iter()
                .map(|(g, c)| (*c).min(rc.get(g).copied().unwrap_or(0)))
                .sum::<u64>();
        }
    }

    pub fn score(&self) -> f64 {
        if self.hyp_len == 0 || self.matches.contains(&0) {
            return 0.0;
        }
        let log_p: f64 = (0..4)
            .map(|i| (self.matches[i] as f64 / self.totals[i] as f64).ln())
            .sum::<f64>()
            / 4.0;
        let bp = if self.hyp_len < self.ref_len {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        } else {
            1.0
        };
        100.0 * bp * log_p.exp()
    }
}

fn ngram_counts(toks: &[String], n: usize) -> BTreeMap<&[String], u64> {
    let mut m = BTreeMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Uncased corpus BLEU-4 against a single reference per sentence.
pub fn corpus_bleu<H: AsRef<str>, R: AsRef<str>>(hyps: &[H], refs: &[R]) -> Result<f64> {
    if hyps.len() != refs.len() {
        return Err(Error::Input(format!("{} hypotheses for {} references", hyps.len(), refs.len())));
    }
    let mut stats = BleuStats::default();
    for (h, r) in hyps.iter().zip(refs) {
        stats.add_sentence(h.as_ref(), r.as_ref());
    }
    Ok(stats.score())
}

fn flat_pairs<'a>(
    ts: &'a TestSet,
    hyps: &'a Hypotheses,
    keep: impl Fn(&Turn) -> bool,
) -> (Vec<&'a str>, Vec<&'a str>) {
    let mut h = Vec::new();
    let mut r = Vec::new();
    for (d, hd) in ts.dialogues.iter().zip(hyps) {
        for (t, ht) in d.turns.iter().zip(hd) {
            if keep(t) {
                h.push(ht.as_str());
                r.push(t.reference.as_str());
            }
        }
    }
    (h, r)
}

/// BLEU over the whole test set.
pub fn testset_bleu(ts: &TestSet, hyps: &Hypotheses) -> Result<f64> {
    ts.check_aligned(hyps)?;
    let (h, r) = flat_pairs(ts, hyps, |_| true);
    corpus_bleu(&h, &r)
}

/// Corpus BLEU over sentences carrying at least one annotation of `kind`;
/// `None` when no sentence qualifies.
pub fn phenomenon_bleu(ts: &TestSet, hyps: &Hypotheses, kind: Phenomenon) -> Result<Option<f64>> {
    ts.check_aligned(hyps)?;
    let (h, r) = flat_pairs(ts, hyps, |t| t.annotations.iter().any(|a| a.kind == kind));
    if h.is_empty() {
        return Ok(None);
    }
    corpus_bleu(&h, &r).map(Some)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PronounRow {
    pub pronoun: String,
    pub recovered: u64,
    pub total: u64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recovery {
    pub recovered: u64,
    pub total: u64,
    /// `None` when there are no prodrop annotations.
    pub accuracy: Option<f64>,
    /// Pronouns with at least [`MIN_PRONOUN_COUNT`] annotations.
    pub per_pronoun: Vec<PronounRow>,
}

pub const MIN_PRONOUN_COUNT: u64 = 5;

/// Whether `pronoun` occurs as a whole token of `hyp`, ignoring case.
pub fn pronoun_recovered(hyp: &str, pronoun: &str) -> bool {
    let want = bleu_tokenize(pronoun);
    let toks = bleu_tokenize(hyp);
    match want.as_slice() {
        [] => false,
        [w] => toks.iter().any(|t| t == w),
        many => toks.windows(many.len()).any(|w| w == many),
    }
}

pub fn prodrop_recovery(ts: &TestSet, hyps: &Hypotheses) -> Result<Recovery> {
    ts.check_aligned(hyps)?;
    let mut by_pronoun: BTreeMap<String, (u64, u64)> = BTreeMap::new();
    for (d, hd) in ts.dialogues.iter().zip(hyps) {
        for (i, (t, h)) in d.turns.iter().zip(hd).enumerate() {
            for a in t.annotations.iter().filter(|a| a.kind == Phenomenon::ProDrop) {
                let pron = a.target_pronoun.as_deref().ok_or_else(|| {
                    Error::Annotation(format!("dialogue {} turn {i}: prodrop annotation without a pronoun", d.id))
                })?;
                let e = by_pronoun.entry(pron.to_lowercase()).or_default();
                e.1 += 1;
                if pronoun_recovered(h, pron) {
                    e.0 += 1;
                }
            }
        }
    }
    let recovered = by_pronoun.values().map(|v| v.0).sum::<u64>();
    let total = by_pronoun.values().map(|v| v.1).sum::<u64>();
    let per_pronoun = by_pronoun
        .into_iter()
        .filter(|(_, (_, n))| *n >= MIN_PRONOUN_COUNT)
        .map(|(pronoun, (r, n))| PronounRow {
            pronoun,
            recovered: r,
            total: n,
            accuracy: r as f64 / n as f64,
        })
        .collect();
    Ok(Recovery {
        recovered,
        total,
        accuracy: (total > 0).then(|| recovered as f64 / total as f64),
        per_pronoun,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPrf {
    pub label: Label,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelingReport {
    pub classes: Vec<ClassPrf>,
}

impl LabelingReport {
    pub fn class(&self, label: Label) -> &ClassPrf {
        self.classes.iter().find(|c| c.label == label).expect("error classes are always reported")
    }

    /// Mean F1 over the error classes that occur in gold or predictions.
    pub fn macro_f1(&self) -> Option<f64> {
        let f: Vec<f64> = self.classes.iter().filter_map(|c| c.f1).collect();
        (!f.is_empty()).then(|| f.iter().sum::<f64>() / f.len() as f64)
    }
}

/// Token-level precision, recall and F1 for the three error classes.
pub fn labeling_prf(gold: &[Vec<Label>], pred: &[Vec<Label>]) -> Result<LabelingReport> {
    if gold.len() != pred.len() {
        return Err(Error::Input(format!("{} gold sequences, {} predicted", gold.len(), pred.len())));
    }
    let mut counts = [[0u64; 3]; 4];
    for (i, (g, p)) in gold.iter().zip(pred).enumerate() {
        if g.len() != p.len() {
            return Err(Error::Input(format!("sequence {i}: {} gold labels, {} predicted", g.len(), p.len())));
        }
        for (&g, &p) in g.iter().zip(p) {
            if g == p {
                counts[g.index()][0] += 1;
            } else {
                counts[p.index()][1] += 1;
                counts[g.index()][2] += 1;
            }
        }
    }
    let ratio = |a: u64, b: u64| (b > 0).then(|| a as f64 / b as f64);
    let classes = [Label::Typo, Label::ProDrop, Label::PunDrop]
        .into_iter()
        .map(|label| {
            let [tp, fp, fn_] = counts[label.index()];
            ClassPrf {
                label,
                tp,
                fp,
                fn_,
                precision: ratio(tp, tp + fp),
                recall: ratio(tp, tp + fn_),
                f1: ratio(2 * tp, 2 * tp + fp + fn_),
            }
        })
        .collect();
    Ok(LabelingReport { classes })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub sentences: usize,
    pub bleu: f64,
    pub phenomenon_bleu: BTreeMap<Phenomenon, Option<f64>>,
    pub recovery: Recovery,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub labeling: Option<LabelingReport>,
}

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.digits$}"))
}

impl MetricsReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "sentences        {}", self.sentences);
        let _ = writeln!(s, "BLEU             {:.2}", self.bleu);
        for (k, v) in &self.phenomenon_bleu {
            let _ = writeln!(s, "BLEU[{k:<8}]   {}", opt(*v, 2));
        }
        let r = &self.recovery;
        let _ = writeln!(
            s,
            "prodrop recovery {}/{} = {}",
            r.recovered,
            r.total,
            opt(r.accuracy.map(|a| a * 100.0), 2)
        );
        for row in &r.per_pronoun {
            let _ = writeln!(
                s,
                "  {:<10} {:>5}/{:<5} {:.2}",
                row.pronoun,
                row.recovered,
                row.total,
                row.accuracy * 100.0
            );
        }
        if let Some(l) = &self.labeling {
            let _ = writeln!(s, "labeling         P      R      F1");
            for c in &l.classes {
                let _ = writeln!(
                    s,
                    "  {:<14} {} {} {}",
                    format!("{:?}", c.label),
                    opt(c.precision, 4),
                    opt(c.recall, 4),
                    opt(c.f1, 4)
                );
            }
            let _ = writeln!(s, "  macro F1       {}", opt(l.macro_f1(), 4));
        }
        s
    }
}

/// Every test-set metric for one set of hypotheses.
pub fn evaluate(
    ts: &TestSet,
    hyps: &Hypotheses,
    labels: Option<(&[Vec<Label>], &[Vec<Label>])>,
) -> Result<MetricsReport> {
    let mut phen = BTreeMap::new();
    for kind in [Phenomenon::ProDrop, Phenomenon::PunDrop, Phenomenon::DialTypo] {
        phen.insert(kind, phenomenon_bleu(ts, hyps, kind)?);
    }
    Ok(MetricsReport {
        sentences: ts.sentence_count(),
        bleu: testset_bleu(ts, hyps)?,
        phenomenon_bleu: phen,
        recovery: prodrop_recovery(ts, hyps)?,
        labeling: labels.map(|(g, p)| labeling_prf(g, p)).transpose()?,
    })
}

/// How preceding sentences are used when translating a dialogue.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContextMode {
    Offline,
    OnlineCut,
    OnlineFd,
}

impl std::str::FromStr for ContextMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "offline" => Ok(Self::Offline),
            "online-cut" | "online_cut" => Ok(Self::OnlineCut),
            "online-fd" | "online_fd" => Ok(Self::OnlineFd),
            _ => Err(Error::Config(format!("unknown context mode {s:?}"))),
        }
    }
}

/// Anything that can translate a whole dialogue under a context mode.
/// `context_len` is ignored in offline mode.
pub trait DialogueTranslator {
    fn translate_dialogue(&self, sents: &[String], mode: ContextMode, context_len: usize) -> Result<Vec<String>>;
}

pub fn translate_testset(
    tr: &dyn DialogueTranslator,
    ts: &TestSet,
    mode: ContextMode,
    context_len: usize,
) -> Result<Hypotheses> {
    ts.dialogues
        .iter()
        .map(|d| tr.translate_dialogue(&d.sources(), mode, context_len))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// `None` for the offline reference row.
    pub k: Option<usize>,
    pub bleu: f64,
    pub prodrop_accuracy: Option<f64>,
}

/// Offline reference row followed by one row per context length.
pub fn context_sweep(
    tr: &dyn DialogueTranslator,
    ts: &TestSet,
    mode: ContextMode,
    k_values: &[usize],
) -> Result<Vec<SweepRow>> {
    if mode == ContextMode::Offline {
        return Err(Error::Config("context sweep needs an online mode".into()));
    }
    let row = |k: Option<usize>, hyps: Hypotheses| -> Result<SweepRow> {
        Ok(SweepRow {
            k,
            bleu: testset_bleu(ts, &hyps)?,
            prodrop_accuracy: prodrop_recovery(ts, &hyps)?.accuracy,
        })
    };
    let mut rows = vec![row(None, translate_testset(tr, ts, ContextMode::Offline, 0)?)?];
    for &k in k_values {
        log::info!("context sweep: k={k}");
        rows.push(row(Some(k), translate_testset(tr, ts, mode, k)?)?);
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("k,bleu,prodrop_accuracy\n");
    for r in rows {
        let k = r.k.map_or_else(|| "offline".to_string(), |k| k.to_string());
        let acc = r.prodrop_accuracy.map_or_else(String::new, |a| format!("{a:.6}"));
        let _ = writeln!(s, "{k},{:.6},{acc}", r.bleu);
    }
    s
}
