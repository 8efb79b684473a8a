//! Labeled training examples built from sub-documents, and the JSONL format
//! they are stored in.

use std::io::{BufRead, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::corpus::SubDocumentPair;
use crate::error::{Error, Result};
use crate::perturb::{labels_for_clean, EditRecord, Label, PerturbStats, Perturber};

/// A clean/perturbed source pair with labels and the shared target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledExample {
    pub src: Vec<String>,
    pub src_pert: Vec<String>,
    pub labels_clean: Vec<Label>,
    pub labels_pert: Vec<Label>,
    pub tgt: Vec<String>,
    pub edits: Vec<EditRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub src: String,
    pub src_pert: String,
    pub labels: Vec<Label>,
    pub tgt: String,
    pub edits: Vec<EditRecord>,
}

fn split(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

impl LabeledExample {
    pub fn to_record(&self) -> ExampleRecord {
        ExampleRecord {
            src: self.src.join(" "),
            src_pert: self.src_pert.join(" "),
            labels: self.labels_pert.clone(),
            tgt: self.tgt.join(" "),
            edits: self.edits.clone(),
        }
    }

    pub fn from_record(r: ExampleRecord) -> Result<Self> {
        let src = split(&r.src);
        let src_pert = split(&r.src_pert);
        if r.labels.len() != src_pert.len() {
            return Err(Error::Format(format!(
                "{} labels for {} perturbed tokens",
                r.labels.len(),
                src_pert.len()
            )));
        }
        Ok(Self {
            labels_clean: labels_for_clean(&src),
            src,
            src_pert,
            labels_pert: r.labels,
            tgt: split(&r.tgt),
            edits: r.edits,
        })
    }
}

/// Seed for example `index`.
pub fn example_seed(seed: u64, index: usize) -> u64 {
    // Distinct stream from the document sampling seeds.
    (seed ^ 0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64)
}

pub fn make_example(
    pair: &SubDocumentPair,
    perturber: &Perturber<'_>,
    rng: &mut ChaCha8Rng,
    stats: &mut PerturbStats,
) -> Result<LabeledExample> {
    let p = perturber.perturb(&pair.src, rng, stats)?;
    Ok(LabeledExample {
        labels_clean: labels_for_clean(&pair.src),
        src: pair.src.clone(),
        src_pert: p.tokens,
        labels_pert: p.labels,
        tgt: pair.tgt.clone(),
        edits: p.edits,
    })
}

/// Perturb every pair with its own derived seed.
pub fn make_examples(
    pairs: &[SubDocumentPair],
    perturber: &Perturber<'_>,
    seed: u64,
) -> Result<(Vec<LabeledExample>, PerturbStats)> {
    let mut stats = PerturbStats::default();
    let mut out = Vec::with_capacity(pairs.len());
    for (i, pair) in pairs.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(example_seed(seed, i));
        out.push(make_example(pair, perturber, &mut rng, &mut stats)?);
    }
    Ok((out, stats))
}

pub fn write_examples<W: Write>(mut w: W, examples: &[LabeledExample]) -> Result<()> {
    for e in examples {
        serde_json::to_writer(&mut w, &e.to_record())?;
        w.write_all(b"\n").map_err(|e| Error::io("<examples>", e))?;
    }
    Ok(())
}

pub fn read_examples<R: BufRead>(r: R) -> Result<Vec<LabeledExample>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<examples>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ExampleRecord = serde_json::from_str(&line)
            .map_err(|e| Error::parse("<examples>", i + 1, e.to_string()))?;
        out.push(LabeledExample::from_record(rec)?);
    }
    Ok(out)
}

/// Two-sided binomial interval holding `level` of the mass (exact quantiles).
pub fn binomial_interval(trials: u64, p: f64, level: f64) -> (u64, u64) {
    if trials == 0 || p <= 0.0 {
        return (0, 0);
    }
    if p >= 1.0 {
        return (trials, trials);
    }
    let dist = Binomial::new(p, trials).expect("valid binomial parameters");
    let tail = (1.0 - level) / 2.0;
    (dist.inverse_cdf(tail), dist.inverse_cdf(1.0 - tail))
}

/// Observed edit rate against its configured probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateCheck {
    pub name: String,
    pub trials: u64,
    pub successes: u64,
    pub observed: f64,
    pub expected: f64,
    pub interval: (u64, u64),
    pub within: bool,
}

impl RateCheck {
    pub fn new(name: &str, trials: u64, successes: u64, expected: f64) -> Self {
        let interval = binomial_interval(trials, expected, 0.99);
        Self {
            name: name.to_string(),
            trials,
            successes,
            observed: if trials == 0 { 0.0 } else { successes as f64 / trials as f64 },
            expected,
            interval,
            within: successes >= interval.0 && successes <= interval.1,
        }
    }
}

/// Edit-rate report for a generated data set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub examples: usize,
    pub stats: PerturbStats,
    pub rates: Vec<RateCheck>,
}

impl GenerationReport {
    pub fn new(examples: usize, stats: PerturbStats, cfg: &crate::perturb::PerturbationConfig) -> Self {
        let rates = vec![
            RateCheck::new("pronoun_drop", stats.pronoun_sites, stats.pronoun_drops, cfg.p_pronoun),
            RateCheck::new("punct_drop", stats.punct_sites, stats.punct_drops, cfg.p_punct),
            RateCheck::new("typo", stats.typo_sites, stats.typos, cfg.p_typo),
            RateCheck::new("homophone_share", stats.typos_with_entry, stats.homophone_typos, cfg.p_homophone),
        ];
        Self { examples, stats, rates }
    }

    pub fn all_within(&self) -> bool {
        self.rates.iter().all(|r| r.within)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("examples: {}\n", self.examples);
        for r in &self.rates {
            s.push_str(&format!(
                "{:<16} {:>8}/{:<8} observed {:.4} expected {:.4} 99% [{}, {}] {}\n",
                r.name,
                r.successes,
                r.trials,
                r.observed,
                r.expected,
                r.interval.0,
                r.interval.1,
                if r.within { "ok" } else { "OUTSIDE" }
            ));
        }
        s.push_str(&format!("skipped deletions: {}\n", self.stats.skipped_deletions));
        s
    }
}
