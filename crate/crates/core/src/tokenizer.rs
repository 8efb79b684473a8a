//! Byte-pair-encoding subword models.
//!
//! Words are split into characters with an end-of-word marker on the last
//! symbol, and the most frequent adjacent symbol pair is merged repeatedly.
//! Encoded output marks every non-initial piece of a word with the
//! [`CONNECTOR`] prefix, which makes decoding lossless.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{SEP, SEP_ESCAPED};
use crate::error::{Error, Result};
use crate::perturb::Label;

/// Prefix of word-continuation pieces.
pub const CONNECTOR: &str = "@@";
/// Escape prefix for word-initial pieces that would otherwise look like a
/// continuation (or start with the escape itself).
pub const ESCAPE: char = '\\';
const END_OF_WORD: &str = "</w>";

pub const DEFAULT_MAX_MERGES: usize = 30_000;

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const BOS_ID: u32 = 2;
pub const EOS_ID: u32 = 3;
pub const SEP_ID: u32 = 4;

const SPECIALS: [&str; 5] = [PAD, UNK, BOS, EOS, SEP];
const MERGE_HEADER: &str = "#version: dialmt-bpe 1";

/// Token ↔ id mapping with the reserved ids above.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Self {
        let mut list: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut seen: BTreeSet<String> = list.iter().cloned().collect();
        for t in tokens {
            if seen.insert(t.clone()) {
                list.push(t);
            }
        }
        Self::from_list(list)
    }

    fn from_list(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Self { tokens, index }
    }

    fn rebuild_index(&mut self) {
        self.index = self.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens.get(id as usize).map(String::as_str).unwrap_or(UNK)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// `token<TAB>id` per line.
    pub fn to_text(&self) -> String {
        self.tokens.iter().enumerate().map(|(i, t)| format!("{t}\t{i}\n")).collect()
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let mut tokens = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (tok, id) = line
                .rsplit_once('\t')
                .ok_or_else(|| Error::parse(path, i + 1, "expected `token<TAB>id`"))?;
            let id: usize = id
                .parse()
                .map_err(|_| Error::parse(path, i + 1, format!("bad id {id:?}")))?;
            if id != tokens.len() {
                return Err(Error::parse(path, i + 1, format!("id {id} out of order")));
            }
            tokens.push(tok.to_string());
        }
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::parse(path, i + 1, format!("reserved id {i} must be {s}")));
            }
        }
        Ok(Self::from_list(tokens))
    }
}

/// Result of encoding a word sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segmented {
    pub pieces: Vec<String>,
    /// Piece range of each input word; the ranges partition `pieces`.
    pub spans: Vec<Range<usize>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BpeModel {
    merges: Vec<(String, String)>,
    max_merges: usize,
    protected: BTreeSet<String>,
    vocab: Vocab,
    #[serde(skip)]
    ranks: HashMap<(String, String), usize>,
}

fn word_symbols(word: &str) -> Vec<String> {
    let mut syms: Vec<String> = word.chars().map(|c| c.to_string()).collect();
    if let Some(last) = syms.last_mut() {
        last.push_str(END_OF_WORD);
    }
    syms
}

fn default_protected() -> BTreeSet<String> {
    SPECIALS.iter().chain([SEP_ESCAPED].iter()).map(|s| s.to_string()).collect()
}

/// Learn merges from word sequences. Ties between equally frequent pairs go
/// to the lexicographically smallest pair; learning stops at `max_merges` or
/// when no pair occurs at least twice.
pub fn learn_bpe<I, S>(corpus: I, max_merges: usize) -> Result<BpeModel>
where
    I: IntoIterator<Item = S>,
    S: AsRef<[String]>,
{
    let protected = default_protected();
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    let mut lines = 0usize;
    for line in corpus {
        lines += 1;
        for w in line.as_ref() {
            if !protected.contains(w) {
                *counts.entry(w.clone()).or_default() += 1;
            }
        }
    }
    if lines == 0 {
        return Err(Error::Input("cannot learn BPE from an empty corpus".into()));
    }
    let mut words: Vec<(Vec<String>, u64)> = counts.iter().map(|(w, c)| (word_symbols(w), *c)).collect();

    let mut merges = Vec::new();
    while merges.len() < max_merges {
        let mut pairs: HashMap<(&str, &str), u64> = HashMap::new();
        for (syms, c) in &words {
            for win in syms.windows(2) {
                *pairs.entry((win[0].as_str(), win[1].as_str())).or_default() += c;
            }
        }
        let best = pairs
            .into_iter()
            .filter(|(_, c)| *c >= 2)
            .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)));
        let Some(((a, b), _)) = best else { break };
        let (a, b) = (a.to_string(), b.to_string());
        let joined = format!("{a}{b}");
        for (syms, _) in words.iter_mut() {
            merge_in_place(syms, &a, &b, &joined);
        }
        merges.push((a, b));
    }

    let mut model = BpeModel {
        merges,
        max_merges,
        protected,
        vocab: Vocab::from_tokens(std::iter::empty()),
        ranks: HashMap::new(),
    };
    model.rebuild_ranks();

    let mut piece_counts: BTreeMap<String, u64> = BTreeMap::new();
    for (w, c) in &counts {
        for p in model.encode_word(w) {
            *piece_counts.entry(p).or_default() += c;
        }
    }
    let mut pieces: Vec<(String, u64)> = piece_counts.into_iter().collect();
    pieces.sort_by(|(pa, ca), (pb, cb)| cb.cmp(ca).then_with(|| pa.cmp(pb)));
    let mut vocab_tokens: Vec<String> = vec![SEP_ESCAPED.to_string()];
    vocab_tokens.extend(pieces.into_iter().map(|(p, _)| p));
    model.vocab = Vocab::from_tokens(vocab_tokens);
    Ok(model)
}

fn merge_in_place(syms: &mut Vec<String>, a: &str, b: &str, joined: &str) {
    let mut i = 0;
    while i + 1 < syms.len() {
        if syms[i] == a && syms[i + 1] == b {
            syms[i] = joined.to_string();
            syms.remove(i + 1);
        }
        i += 1;
    }
}

impl BpeModel {
    fn rebuild_ranks(&mut self) {
        self.ranks = self
            .merges
            .iter()
            .enumerate()
            .map(|(i, (a, b))| ((a.clone(), b.clone()), i))
            .collect();
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn max_merges(&self) -> usize {
        self.max_merges
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn is_protected(&self, token: &str) -> bool {
        self.protected.contains(token)
    }

    /// Restore lookup tables after deserialisation.
    pub fn finish_load(mut self) -> Self {
        self.rebuild_ranks();
        self.vocab.rebuild_index();
        self
    }

    fn segment_symbols(&self, word: &str) -> Vec<String> {
        let mut syms = word_symbols(word);
        loop {
            let best = syms
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| self.ranks.get(&(w[0].clone(), w[1].clone())).map(|r| (*r, i)))
                .min();
            let Some((rank, _)) = best else { break };
            let (a, b) = &self.merges[rank];
            let joined = format!("{a}{b}");
            merge_in_place(&mut syms, a, b, &joined);
        }
        if let Some(last) = syms.last_mut() {
            let trimmed = last.len() - END_OF_WORD.len();
            last.truncate(trimmed);
        }
        syms
    }

    fn encode_word(&self, word: &str) -> Vec<String> {
        if self.protected.contains(word) {
            return vec![word.to_string()];
        }
        let syms = self.segment_symbols(word);
        syms.into_iter()
            .enumerate()
            .map(|(i, s)| {
                if i > 0 {
                    format!("{CONNECTOR}{s}")
                } else if s.starts_with(CONNECTOR) || s.starts_with(ESCAPE) {
                    format!("{ESCAPE}{s}")
                } else {
                    s
                }
            })
            .collect()
    }

    /// Split each unprotected token into pieces.
    pub fn apply(&self, tokens: &[String]) -> Segmented {
        let mut pieces = Vec::new();
        let mut spans = Vec::with_capacity(tokens.len());
        for t in tokens {
            let start = pieces.len();
            pieces.extend(self.encode_word(t));
            spans.push(start..pieces.len());
        }
        Segmented { pieces, spans }
    }

    pub fn encode_ids(&self, pieces: &[String]) -> Vec<u32> {
        pieces.iter().map(|p| self.vocab.id(p)).collect()
    }

    pub fn decode_ids(&self, ids: &[u32]) -> Vec<String> {
        ids.iter().map(|&i| self.vocab.token(i).to_string()).collect()
    }

    /// Merge file text: header line, then `left right` per merge.
    pub fn merges_to_text(&self) -> String {
        let mut s = format!("{MERGE_HEADER} max_merges={}\n", self.max_merges);
        for (a, b) in &self.merges {
            s.push_str(&format!("{a} {b}\n"));
        }
        s
    }

    pub fn from_texts(merges: &str, vocab: &str, merges_path: &Path, vocab_path: &Path) -> Result<Self> {
        let mut lines = merges.lines();
        let header = lines.next().ok_or_else(|| Error::parse(merges_path, 1, "empty merge file"))?;
        let max_merges = header
            .strip_prefix(MERGE_HEADER)
            .and_then(|rest| rest.trim().strip_prefix("max_merges="))
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| Error::parse(merges_path, 1, "bad header"))?;
        let mut list = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let (a, b) = line
                .split_once(' ')
                .ok_or_else(|| Error::parse(merges_path, i + 2, "expected `left right`"))?;
            list.push((a.to_string(), b.to_string()));
        }
        if list.len() > max_merges {
            return Err(Error::parse(merges_path, 1, "more merges than max_merges"));
        }
        let model = BpeModel {
            merges: list,
            max_merges,
            protected: default_protected(),
            vocab: Vocab::from_text(vocab, vocab_path)?,
            ranks: HashMap::new(),
        };
        Ok(model.finish_load())
    }

    pub fn save(&self, merges_path: &Path, vocab_path: &Path) -> Result<()> {
        std::fs::write(merges_path, self.merges_to_text()).map_err(|e| Error::io(merges_path, e))?;
        std::fs::write(vocab_path, self.vocab.to_text()).map_err(|e| Error::io(vocab_path, e))
    }

    pub fn load(merges_path: &Path, vocab_path: &Path) -> Result<Self> {
        let m = std::fs::read_to_string(merges_path).map_err(|e| Error::io(merges_path, e))?;
        let v = std::fs::read_to_string(vocab_path).map_err(|e| Error::io(vocab_path, e))?;
        Self::from_texts(&m, &v, merges_path, vocab_path)
    }
}

/// Join pieces back into words.
pub fn undo_bpe(pieces: &[String]) -> Result<Vec<String>> {
    let mut words: Vec<String> = Vec::new();
    for p in pieces {
        if let Some(rest) = p.strip_prefix(CONNECTOR) {
            let Some(last) = words.last_mut() else {
                return Err(Error::Format(format!("continuation piece {p:?} at sequence start")));
            };
            last.push_str(rest);
        } else if let Some(rest) = p.strip_prefix(ESCAPE) {
            words.push(rest.to_string());
        } else {
            words.push(p.clone());
        }
    }
    Ok(words)
}

/// Like [`undo_bpe`] but tolerant of model output: a leading continuation
/// piece starts a word of its own.
pub fn undo_bpe_lossy(pieces: &[String]) -> Vec<String> {
    let mut words: Vec<String> = Vec::new();
    for p in pieces {
        match (p.strip_prefix(CONNECTOR), words.last_mut()) {
            (Some(rest), Some(last)) if last != SEP => last.push_str(rest),
            (Some(rest), _) => words.push(rest.to_string()),
            (None, _) => words.push(p.strip_prefix(ESCAPE).unwrap_or(p).to_string()),
        }
    }
    words
}

/// Copy each word's label onto every piece of that word.
pub fn project_labels(word_labels: &[Label], spans: &[Range<usize>]) -> Result<Vec<Label>> {
    if word_labels.len() != spans.len() {
        return Err(Error::Alignment(format!(
            "{} word labels for {} spans",
            word_labels.len(),
            spans.len()
        )));
    }
    let mut out = Vec::new();
    for (label, span) in word_labels.iter().zip(spans) {
        if span.start != out.len() || span.end < span.start {
            return Err(Error::Alignment(format!("span {span:?} does not continue the partition")));
        }
        out.extend(std::iter::repeat_n(*label, span.len()));
    }
    Ok(out)
}
