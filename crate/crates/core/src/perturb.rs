//! Contextual perturbation of source sub-documents.
//!
//! Three edit kinds are applied to word-level tokens: pronoun deletion,
//! punctuation deletion and typo substitution. Every perturbed sequence comes
//! with a label per surviving token (see [`Label`]) and the list of edits
//! needed to restore the clean sequence.
//!
//! A deletion leaves no token behind, so its label is carried by a
//! neighbouring token of the perturbed sequence: the token to the right of the
//! deletion site, or the token to the left when the site is followed by a
//! separator or the end of the sequence. A token carries at most one non-zero
//! label; a deletion whose carrier is already taken is skipped.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::SEP;
use crate::error::{Error, Result};

/// Per-token class of the contextual labeling task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
#[repr(u8)]
pub enum Label {
    #[default]
    Correct = 0,
    Typo = 1,
    ProDrop = 2,
    PunDrop = 3,
}

impl Label {
    pub const ALL: [Label; 4] = [Label::Correct, Label::Typo, Label::ProDrop, Label::PunDrop];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        l as u8
    }
}

impl TryFrom<u8> for Label {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Label::Correct),
            1 => Ok(Label::Typo),
            2 => Ok(Label::ProDrop),
            3 => Ok(Label::PunDrop),
            _ => Err(Error::Input(format!("label {v} outside 0..=3"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EditKind {
    ProDrop,
    PunDrop,
    Typo,
}

impl fmt::Display for EditKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EditKind::ProDrop => "prodrop",
            EditKind::PunDrop => "pundrop",
            EditKind::Typo => "typo",
        })
    }
}

/// One edit applied to the clean sequence. `position` indexes the clean
/// sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditRecord {
    pub kind: EditKind,
    #[serde(rename = "pos")]
    pub position: usize,
    #[serde(rename = "orig")]
    pub original: String,
    #[serde(rename = "repl")]
    pub replacement: Option<String>,
}

/// Pronoun, punctuation and homophone tables.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PerturbationTables {
    pronouns: BTreeSet<String>,
    punctuation: BTreeSet<String>,
    homophones: BTreeMap<String, Vec<String>>,
}

impl PerturbationTables {
    pub fn new(
        pronouns: BTreeSet<String>,
        punctuation: BTreeSet<String>,
        homophones: BTreeMap<String, Vec<String>>,
    ) -> Result<Self> {
        if let Some(t) = pronouns.intersection(&punctuation).next() {
            return Err(Error::Config(format!("{t:?} is both a pronoun and punctuation")));
        }
        for (k, alts) in &homophones {
            if pronouns.contains(k) || punctuation.contains(k) {
                return Err(Error::Config(format!("homophone key {k:?} is also a pronoun or punctuation entry")));
            }
            if alts.is_empty() {
                return Err(Error::Config(format!("homophone key {k:?} has no alternatives")));
            }
            if alts.iter().any(|a| a == k) {
                return Err(Error::Config(format!("homophone key {k:?} lists itself")));
            }
            if alts.iter().any(|a| a == SEP) {
                return Err(Error::Config(format!("homophone alternative for {k:?} is the separator")));
            }
        }
        if pronouns.contains(SEP) || punctuation.contains(SEP) || homophones.contains_key(SEP) {
            return Err(Error::Config("the separator cannot be a table entry".into()));
        }
        Ok(Self {
            pronouns,
            punctuation,
            homophones,
        })
    }

    pub fn from_texts(pronouns: &str, punctuation: &str, homophones: &str) -> Result<Self> {
        let path = Path::new("<homophones>");
        Self::new(
            parse_token_list(pronouns),
            parse_token_list(punctuation),
            parse_homophones(homophones, path)?,
        )
    }

    pub fn load(pronouns: &Path, punctuation: &Path, homophones: &Path) -> Result<Self> {
        let read = |p: &Path| std::fs::read_to_string(p).map_err(|e| Error::io(p, e));
        Self::new(
            parse_token_list(&read(pronouns)?),
            parse_token_list(&read(punctuation)?),
            parse_homophones(&read(homophones)?, homophones)?,
        )
    }

    pub fn is_pronoun(&self, t: &str) -> bool {
        self.pronouns.contains(t)
    }

    pub fn is_punctuation(&self, t: &str) -> bool {
        self.punctuation.contains(t)
    }

    /// Pronoun or punctuation entry (the deletable tokens).
    pub fn is_droppable(&self, t: &str) -> bool {
        self.is_pronoun(t) || self.is_punctuation(t)
    }

    pub fn homophones_of(&self, t: &str) -> Option<&[String]> {
        self.homophones.get(t).map(Vec::as_slice)
    }

    pub fn pronouns(&self) -> &BTreeSet<String> {
        &self.pronouns
    }

    pub fn punctuation(&self) -> &BTreeSet<String> {
        &self.punctuation
    }

    pub fn homophones(&self) -> &BTreeMap<String, Vec<String>> {
        &self.homophones
    }
}

/// One token per non-blank line.
pub fn parse_token_list(text: &str) -> BTreeSet<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect()
}

/// `token<TAB>alt1,alt2,...` per line.
pub fn parse_homophones(text: &str, path: &Path) -> Result<BTreeMap<String, Vec<String>>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let Some((key, alts)) = line.split_once('\t') else {
            return Err(Error::parse(path, i + 1, "expected `token<TAB>alt1,alt2,...`"));
        };
        let alts: Vec<String> = alts
            .split(',')
            .map(str::trim)
            .filter(|a| !a.is_empty())
            .map(String::from)
            .collect();
        if alts.is_empty() {
            return Err(Error::parse(path, i + 1, "no alternatives listed"));
        }
        out.insert(key.trim().to_string(), alts);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerturbationConfig {
    pub p_pronoun: f64,
    pub p_punct: f64,
    pub p_typo: f64,
    pub p_homophone: f64,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        Self {
            p_pronoun: 0.30,
            p_punct: 0.30,
            p_typo: 0.01,
            p_homophone: 0.80,
        }
    }
}

impl PerturbationConfig {
    pub fn none() -> Self {
        Self {
            p_pronoun: 0.0,
            p_punct: 0.0,
            p_typo: 0.0,
            p_homophone: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("p_pronoun", self.p_pronoun),
            ("p_punct", self.p_punct),
            ("p_typo", self.p_typo),
            ("p_homophone", self.p_homophone),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name}={p} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Counters for comparing realised edit rates with the configuration.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerturbStats {
    pub pronoun_sites: u64,
    pub pronoun_draws: u64,
    pub pronoun_drops: u64,
    pub punct_sites: u64,
    pub punct_draws: u64,
    pub punct_drops: u64,
    /// Deletions drawn but not applied because no carrier token was free.
    pub skipped_deletions: u64,
    pub typo_sites: u64,
    pub typos: u64,
    /// Typos at tokens that have a homophone entry.
    pub typos_with_entry: u64,
    pub homophone_typos: u64,
    pub random_typos: u64,
    pub tokens: u64,
}

impl PerturbStats {
    pub fn merge(&mut self, o: &PerturbStats) {
        self.pronoun_sites += o.pronoun_sites;
        self.pronoun_draws += o.pronoun_draws;
        self.pronoun_drops += o.pronoun_drops;
        self.punct_sites += o.punct_sites;
        self.punct_draws += o.punct_draws;
        self.punct_drops += o.punct_drops;
        self.skipped_deletions += o.skipped_deletions;
        self.typo_sites += o.typo_sites;
        self.typos += o.typos;
        self.typos_with_entry += o.typos_with_entry;
        self.homophone_typos += o.homophone_typos;
        self.random_typos += o.random_typos;
        self.tokens += o.tokens;
    }
}

/// Result of perturbing one sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Perturbation {
    pub tokens: Vec<String>,
    pub labels: Vec<Label>,
    pub edits: Vec<EditRecord>,
}

/// Applies the three edit kinds with a fixed configuration.
#[derive(Debug, Clone)]
pub struct Perturber<'a> {
    tables: &'a PerturbationTables,
    config: PerturbationConfig,
    vocab: Vec<String>,
}

impl<'a> Perturber<'a> {
    /// `vocab` is the pool for random-word typos; separator, pronoun and
    /// punctuation entries are removed from it.
    pub fn new(
        tables: &'a PerturbationTables,
        config: PerturbationConfig,
        vocab: impl IntoIterator<Item = String>,
    ) -> Result<Self> {
        config.validate()?;
        let vocab: BTreeSet<String> = vocab
            .into_iter()
            .filter(|t| t != SEP && !tables.is_droppable(t))
            .collect();
        let vocab: Vec<String> = vocab.into_iter().collect();
        if config.p_pronoun > 0.0 && tables.pronouns.is_empty() {
            return Err(Error::Config("pronoun deletion requested but the pronoun table is empty".into()));
        }
        if config.p_punct > 0.0 && tables.punctuation.is_empty() {
            return Err(Error::Config(
                "punctuation deletion requested but the punctuation table is empty".into(),
            ));
        }
        if config.p_typo > 0.0 && config.p_homophone > 0.0 && tables.homophones.is_empty() {
            return Err(Error::Config("homophone typos requested but the homophone table is empty".into()));
        }
        if config.p_typo > 0.0 && config.p_homophone < 1.0 && vocab.len() < 2 {
            return Err(Error::Config("random-word typos need a vocabulary of at least two words".into()));
        }
        Ok(Self { tables, config, vocab })
    }

    pub fn config(&self) -> &PerturbationConfig {
        &self.config
    }

    pub fn tables(&self) -> &PerturbationTables {
        self.tables
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    /// Perturb one (sub-)document. Randomness is consumed in a fixed order:
    /// one draw per deletable token left to right, then two draws per
    /// typo-eligible token plus one per applied typo.
    pub fn perturb<R: Rng>(&self, x: &[String], rng: &mut R, stats: &mut PerturbStats) -> Result<Perturbation> {
        let n = x.len();
        let mut deleted = vec![false; n];
        let mut carried: Vec<Option<Label>> = vec![None; n];
        stats.tokens += n as u64;

        for i in 0..n {
            let tok = &x[i];
            if tok == SEP {
                continue;
            }
            let (p, label) = if self.tables.is_pronoun(tok) {
                stats.pronoun_sites += 1;
                (self.config.p_pronoun, Label::ProDrop)
            } else if self.tables.is_punctuation(tok) {
                stats.punct_sites += 1;
                (self.config.p_punct, Label::PunDrop)
            } else {
                continue;
            };
            if rng.random::<f64>() >= p {
                continue;
            }
            match label {
                Label::ProDrop => stats.pronoun_draws += 1,
                _ => stats.punct_draws += 1,
            }
            if carried[i].is_some() {
                stats.skipped_deletions += 1;
                continue;
            }
            let carrier = if i + 1 < n && x[i + 1] != SEP {
                Some(i + 1)
            } else if i >= 1 && x[i - 1] != SEP && !deleted[i - 1] {
                Some(i - 1)
            } else {
                None
            };
            match carrier {
                Some(c) if carried[c].is_none() => {
                    deleted[i] = true;
                    carried[c] = Some(label);
                    match label {
                        Label::ProDrop => stats.pronoun_drops += 1,
                        _ => stats.punct_drops += 1,
                    }
                }
                _ => stats.skipped_deletions += 1,
            }
        }

        let mut replaced: Vec<Option<String>> = vec![None; n];
        for i in 0..n {
            let tok = &x[i];
            if deleted[i] || carried[i].is_some() || tok == SEP || self.tables.is_droppable(tok) {
                continue;
            }
            stats.typo_sites += 1;
            if rng.random::<f64>() >= self.config.p_typo {
                continue;
            }
            let homophone_draw = rng.random::<f64>() < self.config.p_homophone;
            let alts = self.tables.homophones_of(tok);
            if alts.is_some() {
                stats.typos_with_entry += 1;
            }
            let repl = match alts {
                Some(alts) if homophone_draw => {
                    stats.homophone_typos += 1;
                    alts[rng.random_range(0..alts.len())].clone()
                }
                _ => {
                    stats.random_typos += 1;
                    self.random_word(tok, rng)?
                }
            };
            stats.typos += 1;
            replaced[i] = Some(repl);
        }

        let mut tokens = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        let mut edits = Vec::new();
        for i in 0..n {
            if deleted[i] {
                let kind = if self.tables.is_pronoun(&x[i]) {
                    EditKind::ProDrop
                } else {
                    EditKind::PunDrop
                };
                edits.push(EditRecord {
                    kind,
                    position: i,
                    original: x[i].clone(),
                    replacement: None,
                });
                continue;
            }
            if let Some(r) = replaced[i].take() {
                edits.push(EditRecord {
                    kind: EditKind::Typo,
                    position: i,
                    original: x[i].clone(),
                    replacement: Some(r.clone()),
                });
                tokens.push(r);
                labels.push(Label::Typo);
            } else {
                tokens.push(x[i].clone());
                labels.push(carried[i].unwrap_or(Label::Correct));
            }
        }
        Ok(Perturbation { tokens, labels, edits })
    }

    fn random_word<R: Rng>(&self, original: &str, rng: &mut R) -> Result<String> {
        let pool: Vec<&String> = self.vocab.iter().filter(|w| *w != original).collect();
        if pool.is_empty() {
            return Err(Error::Config("random-word typo needs a vocabulary word different from the original".into()));
        }
        Ok(pool[rng.random_range(0..pool.len())].clone())
    }
}

/// Labels of the clean side: all zeros.
pub fn labels_for_clean(x: &[String]) -> Vec<Label> {
    vec![Label::Correct; x.len()]
}

/// Rebuild the clean sequence from the perturbed one and its edits.
pub fn invert_edits(x_pert: &[String], edits: &[EditRecord]) -> Result<Vec<String>> {
    let mut by_pos: BTreeMap<usize, &EditRecord> = BTreeMap::new();
    for e in edits {
        match (e.kind, &e.replacement) {
            (EditKind::Typo, None) => {
                return Err(Error::Corruption(format!("typo at {} has no replacement", e.position)))
            }
            (EditKind::ProDrop | EditKind::PunDrop, Some(_)) => {
                return Err(Error::Corruption(format!("deletion at {} has a replacement", e.position)))
            }
            _ => {}
        }
        if by_pos.insert(e.position, e).is_some() {
            return Err(Error::Corruption(format!("two edits at position {}", e.position)));
        }
    }
    let deletions = edits.iter().filter(|e| e.replacement.is_none()).count();
    let n = x_pert.len() + deletions;
    let mut out = Vec::with_capacity(n);
    let mut j = 0;
    for i in 0..n {
        match by_pos.get(&i) {
            Some(e) if e.replacement.is_none() => out.push(e.original.clone()),
            Some(e) => {
                let repl = e.replacement.as_deref().unwrap_or_default();
                if x_pert.get(j).map(String::as_str) != Some(repl) {
                    return Err(Error::Corruption(format!(
                        "typo at {i} expects {repl:?} at perturbed index {j}"
                    )));
                }
                out.push(e.original.clone());
                j += 1;
            }
            None => {
                let Some(t) = x_pert.get(j) else {
                    return Err(Error::Corruption(format!("perturbed sequence ends before clean index {i}")));
                };
                out.push(t.clone());
                j += 1;
            }
        }
    }
    if let Some(&last) = by_pos.keys().next_back() {
        if last >= n {
            return Err(Error::Corruption(format!("edit position {last} beyond reconstructed length {n}")));
        }
    }
    if j != x_pert.len() {
        return Err(Error::Corruption(format!(
            "{} perturbed tokens left unconsumed",
            x_pert.len() - j
        )));
    }
    Ok(out)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Step {
    Match,
    Sub,
    Del,
}

/// Recover perturbed-side labels from the clean and perturbed sequences
/// alone, by a minimum-substitution alignment in which only pronoun and
/// punctuation entries may be deleted.
pub fn derive_labels_by_alignment(
    x: &[String],
    x_pert: &[String],
    tables: &PerturbationTables,
) -> Result<Vec<Label>> {
    let (n, m) = (x.len(), x_pert.len());
    if m > n {
        return Err(Error::Alignment(format!("perturbed sequence is longer ({m} > {n})")));
    }
    const INF: u32 = u32::MAX / 2;
    let w = m + 1;
    let mut cost = vec![INF; (n + 1) * w];
    cost[0] = 0;
    for i in 0..=n {
        for j in 0..=m {
            if i == 0 && j == 0 {
                continue;
            }
            let mut best = INF;
            if i > 0 && j > 0 {
                let (a, b) = (&x[i - 1], &x_pert[j - 1]);
                let prev = cost[(i - 1) * w + j - 1];
                if a == b {
                    best = best.min(prev);
                } else if a != SEP && b != SEP && !tables.is_droppable(a) {
                    best = best.min(prev.saturating_add(1));
                }
            }
            if i > 0 && tables.is_droppable(&x[i - 1]) {
                best = best.min(cost[(i - 1) * w + j]);
            }
            cost[i * w + j] = best;
        }
    }
    if cost[n * w + m] >= INF {
        return Err(Error::Alignment("sequences cannot be aligned by deletions and substitutions".into()));
    }

    let search = AlignSearch {
        x,
        x_pert,
        tables,
        cost: &cost,
        w,
        budget: std::cell::Cell::new(MAX_ALIGNMENT_PATHS),
    };
    let mut steps = Vec::with_capacity(n);
    search
        .walk(n, m, &mut steps)
        .ok_or_else(|| Error::Alignment("no optimal alignment gives every token at most one label".into()))
}

/// Complete optimal alignments tried before giving up. Only runs of equal
/// droppable tokens make alignments ambiguous, so this is rarely reached.
const MAX_ALIGNMENT_PATHS: usize = 10_000;

struct AlignSearch<'a> {
    x: &'a [String],
    x_pert: &'a [String],
    tables: &'a PerturbationTables,
    cost: &'a [u32],
    w: usize,
    budget: std::cell::Cell<usize>,
}

impl AlignSearch<'_> {
    /// Depth-first over optimal backtrace steps (match, then substitution,
    /// then deletion); `steps` holds the reversed path so far.
    fn walk(&self, i: usize, j: usize, steps: &mut Vec<Step>) -> Option<Vec<Label>> {
        if i == 0 {
            if j > 0 {
                return None;
            }
            let left = self.budget.get();
            if left == 0 {
                return None;
            }
            self.budget.set(left - 1);
            return self.labels(steps);
        }
        let (x, xp, w) = (self.x, self.x_pert, self.w);
        let here = self.cost[i * w + j];
        let mut options = Vec::with_capacity(3);
        if j > 0 {
            let prev = self.cost[(i - 1) * w + j - 1];
            if x[i - 1] == xp[j - 1] && prev == here {
                options.push(Step::Match);
            }
            if x[i - 1] != xp[j - 1] && prev.saturating_add(1) == here {
                options.push(Step::Sub);
            }
        }
        if self.tables.is_droppable(&x[i - 1]) && self.cost[(i - 1) * w + j] == here {
            options.push(Step::Del);
        }
        for step in options {
            steps.push(step);
            let found = match step {
                Step::Del => self.walk(i - 1, j, steps),
                _ => self.walk(i - 1, j - 1, steps),
            };
            steps.pop();
            if found.is_some() {
                return found;
            }
        }
        None
    }

    /// Labels of a complete path, or `None` if two edits share a carrier.
    fn labels(&self, reversed: &[Step]) -> Option<Vec<Label>> {
        let (x, xp) = (self.x, self.x_pert);
        let m = xp.len();
        let mut labels = vec![Label::Correct; m];
        let mut set = |pos: usize, label: Label| -> Option<()> {
            if labels[pos] != Label::Correct {
                return None;
            }
            labels[pos] = label;
            Some(())
        };
        let (mut i, mut j) = (0usize, 0usize);
        for step in reversed.iter().rev() {
            match step {
                Step::Match => {
                    i += 1;
                    j += 1;
                }
                Step::Sub => {
                    set(j, Label::Typo)?;
                    i += 1;
                    j += 1;
                }
                Step::Del => {
                    let label = if self.tables.is_pronoun(&x[i]) {
                        Label::ProDrop
                    } else {
                        Label::PunDrop
                    };
                    let carrier = if j < m && xp[j] != SEP {
                        j
                    } else if j >= 1 && xp[j - 1] != SEP {
                        j - 1
                    } else {
                        return None;
                    };
                    set(carrier, label)?;
                    i += 1;
                }
            }
        }
        Some(labels)
    }
}

fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x3000..=0x303F     // CJK symbols and punctuation
        | 0x3400..=0x4DBF   // extension A
        | 0x4E00..=0x9FFF   // unified ideographs
        | 0xF900..=0xFAFF   // compatibility ideographs
        | 0xFF00..=0xFFEF   // full-width forms
        | 0x20000..=0x2FA1F)
}

/// Whitespace split, then every CJK codepoint becomes its own token while
/// non-CJK runs stay whole.
pub fn default_segment(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for run in text.split_whitespace() {
        let mut buf = String::new();
        for c in run.chars() {
            if is_cjk(c) {
                if !buf.is_empty() {
                    out.push(std::mem::take(&mut buf));
                }
                out.push(c.to_string());
            } else {
                buf.push(c);
            }
        }
        if !buf.is_empty() {
            out.push(buf);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn tables() -> PerturbationTables {
        PerturbationTables::from_texts("她\n他\n我\n你\n", "?\n。\n，\n", "了\t乐\n哭\t枯,库\n").unwrap()
    }

    #[test]
    fn segmenter_splits_cjk_runs() {
        assert_eq!(default_segment("Nancy怎么了"), toks("Nancy 怎 么 了"));
        assert_eq!(default_segment("hello world"), toks("hello world"));
        assert!(default_segment("").is_empty());
        assert_eq!(default_segment("是不是哭了啊。"), toks("是 不 是 哭 了 啊 。"));
    }

    #[test]
    fn clean_labels_are_zero() {
        assert_eq!(labels_for_clean(&toks("a b c d e")), vec![Label::Correct; 5]);
        assert!(labels_for_clean(&[]).is_empty());
    }

    #[test]
    fn zero_probabilities_are_identity() {
        let t = tables();
        let p = Perturber::new(&t, PerturbationConfig::none(), Vec::new()).unwrap();
        let x = toks("Nancy 怎么 了 ? <sep> 她 是 不是 哭 了 啊 。");
        let mut stats = PerturbStats::default();
        let out = p.perturb(&x, &mut ChaCha8Rng::seed_from_u64(1), &mut stats).unwrap();
        assert_eq!(out.tokens, x);
        assert!(out.labels.iter().all(|l| *l == Label::Correct));
        assert!(out.edits.is_empty());
    }

    #[test]
    fn pronoun_drop_labels_right_neighbour() {
        let t = tables();
        let x = toks("Nancy 怎么 了 ? <sep> 她 是 不是 哭 了 啊 。");
        let cfg = PerturbationConfig {
            p_pronoun: 1.0,
            ..PerturbationConfig::none()
        };
        let p = Perturber::new(&t, cfg, Vec::new()).unwrap();
        let out = p.perturb(&x, &mut ChaCha8Rng::seed_from_u64(0), &mut PerturbStats::default()).unwrap();
        assert_eq!(out.tokens, toks("Nancy 怎么 了 ? <sep> 是 不是 哭 了 啊 。"));
        let mut expected = vec![Label::Correct; out.tokens.len()];
        expected[5] = Label::ProDrop;
        assert_eq!(out.labels, expected);
        assert_eq!(
            out.edits,
            vec![EditRecord {
                kind: EditKind::ProDrop,
                position: 5,
                original: "她".into(),
                replacement: None
            }]
        );
        assert_eq!(invert_edits(&out.tokens, &out.edits).unwrap(), x);
        assert_eq!(derive_labels_by_alignment(&x, &out.tokens, &t).unwrap(), out.labels);
    }

    #[test]
    fn punctuation_before_separator_labels_left_neighbour() {
        let t = tables();
        let x = toks("怎么 了 ? <sep> 是 。");
        let cfg = PerturbationConfig {
            p_punct: 1.0,
            ..PerturbationConfig::none()
        };
        let p = Perturber::new(&t, cfg, Vec::new()).unwrap();
        let out = p.perturb(&x, &mut ChaCha8Rng::seed_from_u64(0), &mut PerturbStats::default()).unwrap();
        assert_eq!(out.tokens, toks("怎么 了 <sep> 是"));
        assert_eq!(
            out.labels,
            vec![Label::Correct, Label::PunDrop, Label::Correct, Label::PunDrop]
        );
    }

    #[test]
    fn colliding_deletions_skip_the_later_one() {
        let t = tables();
        // 她 and ? both want 哭 as carrier only if adjacent; here 她 ? 哭:
        // deleting 她 labels ?, which then cannot be deleted.
        let x = toks("她 ? 哭");
        let cfg = PerturbationConfig {
            p_pronoun: 1.0,
            p_punct: 1.0,
            ..PerturbationConfig::none()
        };
        let p = Perturber::new(&t, cfg, Vec::new()).unwrap();
        let mut stats = PerturbStats::default();
        let out = p.perturb(&x, &mut ChaCha8Rng::seed_from_u64(0), &mut stats).unwrap();
        assert_eq!(out.tokens, toks("? 哭"));
        assert_eq!(out.labels, vec![Label::ProDrop, Label::Correct]);
        assert_eq!(stats.skipped_deletions, 1);
    }

    #[test]
    fn lone_pronoun_between_separators_is_kept() {
        let t = tables();
        let x = toks("a <sep> 她 <sep> b");
        let cfg = PerturbationConfig {
            p_pronoun: 1.0,
            ..PerturbationConfig::none()
        };
        let p = Perturber::new(&t, cfg, Vec::new()).unwrap();
        let out = p.perturb(&x, &mut ChaCha8Rng::seed_from_u64(0), &mut PerturbStats::default()).unwrap();
        assert_eq!(out.tokens, x);
    }

    #[test]
    fn single_typo_is_labelled_in_place() {
        let t = tables();
        let x = toks("Nancy 怎么 了 ?");
        let mut x2 = x.clone();
        x2[2] = "乐".into();
        let labels = derive_labels_by_alignment(&x, &x2, &t).unwrap();
        assert_eq!(labels, vec![Label::Correct, Label::Correct, Label::Typo, Label::Correct]);
        assert_eq!(derive_labels_by_alignment(&x, &x, &t).unwrap(), vec![Label::Correct; 4]);
    }

    #[test]
    fn typos_use_homophones_or_vocabulary() {
        let t = tables();
        let cfg = PerturbationConfig {
            p_typo: 1.0,
            p_homophone: 1.0,
            ..PerturbationConfig::none()
        };
        let p = Perturber::new(&t, cfg, toks("x y")).unwrap();
        let x = toks("哭 了 z");
        let out = p.perturb(&x, &mut ChaCha8Rng::seed_from_u64(5), &mut PerturbStats::default()).unwrap();
        assert!(["枯", "库"].contains(&out.tokens[0].as_str()));
        assert_eq!(out.tokens[1], "乐");
        // z has no homophone entry: falls through to a random word.
        assert!(["x", "y"].contains(&out.tokens[2].as_str()));
        assert_eq!(out.labels, vec![Label::Typo; 3]);
        assert_eq!(invert_edits(&out.tokens, &out.edits).unwrap(), x);
    }

    #[test]
    fn empty_table_for_requested_edit_is_a_config_error() {
        let t = PerturbationTables::default();
        let err = Perturber::new(&t, PerturbationConfig::default(), toks("a b")).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let bad = PerturbationConfig {
            p_typo: 1.5,
            ..PerturbationConfig::none()
        };
        assert!(matches!(Perturber::new(&t, bad, Vec::new()), Err(Error::Config(_))));
    }

    #[test]
    fn tables_reject_overlap_and_separator() {
        assert!(PerturbationTables::from_texts("她\n", "她\n", "").is_err());
        assert!(PerturbationTables::from_texts("<sep>\n", "", "").is_err());
        assert!(PerturbationTables::from_texts("她\n", "", "她\t他\n").is_err());
        assert!(PerturbationTables::from_texts("", "", "a\tb\nc d\n").is_err());
    }

    #[test]
    fn invert_detects_corruption() {
        let edits = vec![EditRecord {
            kind: EditKind::Typo,
            position: 0,
            original: "a".into(),
            replacement: Some("q".into()),
        }];
        assert!(matches!(invert_edits(&toks("b"), &edits), Err(Error::Corruption(_))));
        assert_eq!(invert_edits(&toks("a b"), &[]).unwrap(), toks("a b"));
        let far = vec![EditRecord {
            kind: EditKind::ProDrop,
            position: 9,
            original: "她".into(),
            replacement: None,
        }];
        assert!(invert_edits(&toks("a"), &far).is_err());
    }

    #[test]
    fn edit_record_json_shape() {
        let e = EditRecord {
            kind: EditKind::ProDrop,
            position: 5,
            original: "她".into(),
            replacement: None,
        };
        assert_eq!(
            serde_json::to_string(&e).unwrap(),
            r#"{"kind":"prodrop","pos":5,"orig":"她","repl":null}"#
        );
        assert_eq!(serde_json::to_string(&Label::PunDrop).unwrap(), "3");
        assert!(serde_json::from_str::<Label>("4").is_err());
    }
}
