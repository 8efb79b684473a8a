//! Parallel document loading and sub-document sampling.
//!
//! Documents are read from two line-aligned text files plus a boundary file
//! of inclusive `start<TAB>end` line ranges. Each document is cut into
//! consecutive windows of sentences; a window's sentences are joined with the
//! reserved [`SEP`] token on both sides.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::perturb::default_segment;

/// Sentence separator inside a concatenated sub-document.
pub const SEP: &str = "<sep>";
/// Replacement for literal separator strings found in user text.
pub const SEP_ESCAPED: &str = "<sep_esc>";

/// Default upper bound on sentences per sub-document.
pub const DEFAULT_N_MAX: usize = 10;

pub type Sentence = Vec<String>;

/// Tokenize one line of user text, escaping literal separator tokens.
pub fn tokenize_line(line: &str) -> Sentence {
    default_segment(line)
        .into_iter()
        .map(|t| if t == SEP { SEP_ESCAPED.to_string() } else { t })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParallelDocument {
    doc_id: String,
    src: Vec<Sentence>,
    tgt: Vec<Sentence>,
}

impl ParallelDocument {
    pub fn new(doc_id: impl Into<String>, src: Vec<Sentence>, tgt: Vec<Sentence>) -> Result<Self> {
        let doc_id = doc_id.into();
        if src.len() != tgt.len() {
            return Err(Error::Alignment(format!(
                "document {doc_id}: {} source vs {} target sentences",
                src.len(),
                tgt.len()
            )));
        }
        if src.is_empty() {
            return Err(Error::Input(format!("document {doc_id} has no sentences")));
        }
        let has_sep = |s: &Sentence| s.iter().any(|t| t == SEP);
        if src.iter().chain(tgt.iter()).any(has_sep) {
            return Err(Error::Input(format!(
                "document {doc_id} contains the reserved token {SEP}"
            )));
        }
        Ok(Self { doc_id, src, tgt })
    }

    pub fn id(&self) -> &str {
        &self.doc_id
    }

    pub fn src_sentences(&self) -> &[Sentence] {
        &self.src
    }

    pub fn tgt_sentences(&self) -> &[Sentence] {
        &self.tgt
    }

    /// Number of sentence pairs (always at least one).
    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// A window of consecutive sentence pairs joined by [`SEP`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubDocumentPair {
    pub src: Vec<String>,
    pub tgt: Vec<String>,
    pub n_sentences: usize,
    pub doc_id: String,
    pub start: usize,
}

/// JSONL record for a sub-document pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubDocRecord {
    pub src: String,
    pub tgt: String,
    pub n: usize,
    pub doc: String,
    pub start: usize,
}

impl From<&SubDocumentPair> for SubDocRecord {
    fn from(p: &SubDocumentPair) -> Self {
        SubDocRecord {
            src: p.src.join(" "),
            tgt: p.tgt.join(" "),
            n: p.n_sentences,
            doc: p.doc_id.clone(),
            start: p.start,
        }
    }
}

/// Inclusive 0-based line range of one document.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LineRange {
    pub start: usize,
    pub end: usize,
}

/// Parse a boundary file body. Blank lines are ignored.
pub fn parse_boundaries(text: &str, path: &Path) -> Result<Vec<LineRange>> {
    let mut ranges: Vec<LineRange> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let (Some(a), Some(b), None) = (fields.next(), fields.next(), fields.next()) else {
            return Err(Error::parse(path, line_no, "expected `start<TAB>end`"));
        };
        let start: usize = a
            .trim()
            .parse()
            .map_err(|_| Error::parse(path, line_no, format!("bad start index {a:?}")))?;
        let end: usize = b
            .trim()
            .parse()
            .map_err(|_| Error::parse(path, line_no, format!("bad end index {b:?}")))?;
        if end < start {
            return Err(Error::parse(path, line_no, format!("range {start}-{end} is reversed")));
        }
        if let Some(prev) = ranges.last() {
            if start <= prev.end {
                return Err(Error::parse(
                    path,
                    line_no,
                    format!("range {start}-{end} overlaps or precedes {}-{}", prev.start, prev.end),
                ));
            }
        }
        ranges.push(LineRange { start, end });
    }
    Ok(ranges)
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Read a UTF-8 file as lines (LF endings; a trailing CR is stripped).
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = read_to_string(path)?;
    Ok(text
        .lines()
        .map(|l| l.strip_suffix('\r').unwrap_or(l).to_string())
        .collect())
}

/// Load document-aligned parallel text.
pub fn load_parallel_documents(
    src_path: &Path,
    tgt_path: &Path,
    boundaries: &Path,
) -> Result<Vec<ParallelDocument>> {
    let src = read_lines(src_path)?;
    let tgt = read_lines(tgt_path)?;
    let ranges = parse_boundaries(&read_to_string(boundaries)?, boundaries)?;
    documents_from_lines(&src, &tgt, &ranges)
}

/// Build documents from already loaded line-aligned text.
pub fn documents_from_lines(
    src: &[String],
    tgt: &[String],
    ranges: &[LineRange],
) -> Result<Vec<ParallelDocument>> {
    let mut docs = Vec::with_capacity(ranges.len());
    for (idx, r) in ranges.iter().enumerate() {
        if r.end >= src.len() || r.end >= tgt.len() {
            return Err(Error::Alignment(format!(
                "range {}-{} exceeds file lengths (source {} lines, target {} lines)",
                r.start,
                r.end,
                src.len(),
                tgt.len()
            )));
        }
        let s = src[r.start..=r.end].iter().map(|l| tokenize_line(l)).collect();
        let t = tgt[r.start..=r.end].iter().map(|l| tokenize_line(l)).collect();
        docs.push(ParallelDocument::new(idx.to_string(), s, t)?);
    }
    if src.len() != tgt.len() {
        let first_bad = ranges
            .iter()
            .find(|r| r.end >= src.len().min(tgt.len()))
            .map(|r| format!("{}-{}", r.start, r.end))
            .unwrap_or_else(|| "<trailing lines>".to_string());
        return Err(Error::Alignment(format!(
            "source has {} lines but target has {} (offending range {first_bad})",
            src.len(),
            tgt.len()
        )));
    }
    Ok(docs)
}

/// Concatenate sentences with [`SEP`] between consecutive sentences.
pub fn join_with_sep<S: AsRef<[String]>>(sentences: &[S]) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for (i, s) in sentences.iter().enumerate() {
        let s = s.as_ref();
        if s.iter().any(|t| t == SEP) {
            return Err(Error::Input(format!("sentence {i} contains the reserved token {SEP}")));
        }
        if i > 0 {
            out.push(SEP.to_string());
        }
        out.extend(s.iter().cloned());
    }
    Ok(out)
}

/// Split on every separator, keeping empty segments.
///
/// Inverse of [`join_with_sep`] for non-empty sentence lists; the empty
/// sequence splits into a single empty segment.
pub fn split_by_sep(seq: &[String]) -> Vec<Vec<String>> {
    seq.split(|t| t == SEP).map(|s| s.to_vec()).collect()
}

/// Seed for document `index` derived from the run seed.
pub fn doc_seed(seed: u64, index: usize) -> u64 {
    seed ^ index as u64
}

fn make_pair(doc: &ParallelDocument, start: usize, len: usize) -> SubDocumentPair {
    let end = start + len;
    SubDocumentPair {
        src: join_with_sep(&doc.src[start..end]).expect("document sentences are separator-free"),
        tgt: join_with_sep(&doc.tgt[start..end]).expect("document sentences are separator-free"),
        n_sentences: len,
        doc_id: doc.doc_id.clone(),
        start,
    }
}

/// Partition a document into consecutive windows with lengths drawn
/// uniformly from `[1, min(n_max, remaining)]`.
pub fn sample_subdocuments<R: Rng>(doc: &ParallelDocument, n_max: usize, rng: &mut R) -> Vec<SubDocumentPair> {
    assert!(n_max >= 1, "n_max must be at least 1");
    let mut out = Vec::new();
    let mut start = 0;
    while start < doc.len() {
        let hi = n_max.min(doc.len() - start);
        let len = rng.random_range(1..=hi);
        out.push(make_pair(doc, start, len));
        start += len;
    }
    out
}

/// Draw `count` possibly overlapping windows at random starts.
pub fn sample_overlapping<R: Rng>(
    doc: &ParallelDocument,
    n_max: usize,
    count: usize,
    rng: &mut R,
) -> Vec<SubDocumentPair> {
    assert!(n_max >= 1, "n_max must be at least 1");
    (0..count)
        .map(|_| {
            let start = rng.random_range(0..doc.len());
            let hi = n_max.min(doc.len() - start);
            let len = rng.random_range(1..=hi);
            make_pair(doc, start, len)
        })
        .collect()
}

/// Window sampling options.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub n_max: usize,
    /// Draw overlapping windows instead of partitioning each document.
    pub overlap: bool,
    /// Windows per document in overlap mode.
    pub per_doc: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            n_max: DEFAULT_N_MAX,
            overlap: false,
            per_doc: 1,
        }
    }
}

/// Sample windows from every document using per-document derived seeds, so
/// the result does not depend on processing order.
pub fn sample_corpus(docs: &[ParallelDocument], cfg: &SamplingConfig, seed: u64) -> Vec<SubDocumentPair> {
    docs.iter()
        .enumerate()
        .flat_map(|(i, doc)| {
            let mut rng = ChaCha8Rng::seed_from_u64(doc_seed(seed, i));
            if cfg.overlap {
                sample_overlapping(doc, cfg.n_max, cfg.per_doc, &mut rng)
            } else {
                sample_subdocuments(doc, cfg.n_max, &mut rng)
            }
        })
        .collect()
}
