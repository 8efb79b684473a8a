//! Beam search with forced prefixes, and the dialogue context modes built
//! on top of it.
//!
//! Search runs against [`IncrementalScorer`]; dialogue handling runs against
//! [`SequenceTranslator`], which maps a source word sequence (sentences
//! joined by the separator) plus a forced target prefix to a full target
//! word sequence.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::corpus::{join_with_sep, split_by_sep, tokenize_line, SEP};
use crate::error::{Error, Result};
use crate::eval::{ContextMode, DialogueTranslator};
use crate::model::{DecoderCache, Transformer};
use crate::tokenizer::{undo_bpe_lossy, BpeModel, BOS_ID, EOS_ID, PAD_ID};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BeamConfig {
    pub beam_size: usize,
    /// Maximum output length is `max_len_a × source length + max_len_b`.
    pub max_len_a: f64,
    pub max_len_b: usize,
    /// Finished hypotheses are ranked by `score / length^alpha`.
    pub length_penalty_alpha: f64,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            beam_size: 5,
            max_len_a: 2.0,
            max_len_b: 10,
            length_penalty_alpha: 0.0,
        }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::Config("beam size must be at least 1".into()));
        }
        if !(self.max_len_a >= 0.0) || !(self.length_penalty_alpha >= 0.0) {
            return Err(Error::Config("length settings must be non-negative".into()));
        }
        Ok(())
    }

    pub fn max_len(&self, src_len: usize) -> usize {
        (self.max_len_a * src_len as f64).floor() as usize + self.max_len_b
    }
}

/// Left-to-right next-token scorer.
pub trait IncrementalScorer {
    type Cache;
    fn vocab_size(&self) -> usize;
    fn bos(&self) -> u32;
    fn eos(&self) -> u32;
    /// Tokens that may never be produced (padding, BOS).
    fn is_generable(&self, _id: u32) -> bool {
        true
    }
    /// Longest output (excluding EOS) the scorer can represent.
    fn max_output_len(&self) -> usize {
        usize::MAX
    }
    fn begin(&self, src: &[u32]) -> Result<Self::Cache>;
    /// Consume one token per row; return next-token log-probabilities per row.
    fn advance(&self, cache: &mut Self::Cache, tokens: &[u32]) -> Result<Vec<Vec<f64>>>;
    /// Keep rows `rows` in this order (rows may repeat).
    fn reorder(&self, cache: &mut Self::Cache, rows: &[usize]) -> Result<()>;
}

impl IncrementalScorer for Transformer {
    type Cache = DecoderCache;

    fn vocab_size(&self) -> usize {
        self.target_vocab()
    }

    fn bos(&self) -> u32 {
        BOS_ID
    }

    fn eos(&self) -> u32 {
        EOS_ID
    }

    fn is_generable(&self, id: u32) -> bool {
        id != PAD_ID && id != BOS_ID
    }

    fn max_output_len(&self) -> usize {
        // BOS plus every emitted token needs a position
        self.config().max_positions - 1
    }

    fn begin(&self, src: &[u32]) -> Result<DecoderCache> {
        self.begin_decoding(src)
    }

    fn advance(&self, cache: &mut DecoderCache, tokens: &[u32]) -> Result<Vec<Vec<f64>>> {
        self.decode_step(cache, tokens)
    }

    fn reorder(&self, cache: &mut DecoderCache, rows: &[usize]) -> Result<()> {
        cache.select_rows(rows)
    }
}

/// A finished output: ids exclude BOS and EOS and include any forced prefix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    /// Sum of log-probabilities of every emitted token, EOS included.
    pub score: f64,
}

struct Prepared<C> {
    cache: C,
    lp: Vec<f64>,
    score: f64,
    max_len: usize,
}

fn prepare<S: IncrementalScorer>(
    scorer: &S,
    src: &[u32],
    cfg: &BeamConfig,
    prefix: &[u32],
) -> Result<Prepared<S::Cache>> {
    cfg.validate()?;
    if src.is_empty() {
        return Err(Error::Input("empty source sequence".into()));
    }
    let limit = scorer.max_output_len();
    if prefix.len() >= limit {
        return Err(Error::Overlength {
            len: prefix.len() + 1,
            max: limit,
        });
    }
    let max_len = cfg.max_len(src.len()).max(prefix.len() + 1).min(limit);
    let mut cache = scorer.begin(src)?;
    let mut lp = scorer.advance(&mut cache, &[scorer.bos()])?.remove(0);
    let mut score = 0.0;
    for &t in prefix {
        score += lp[t as usize];
        lp = scorer.advance(&mut cache, &[t])?.remove(0);
    }
    Ok(Prepared {
        cache,
        lp,
        score,
        max_len,
    })
}

fn better(a: (f64, u32), b: (f64, u32)) -> bool {
    a.0 > b.0 || (a.0 == b.0 && a.1 < b.1)
}

/// Argmax decoding; ties go to the smaller id.
pub fn greedy<S: IncrementalScorer>(scorer: &S, src: &[u32], cfg: &BeamConfig, prefix: &[u32]) -> Result<Hypothesis> {
    let Prepared {
        mut cache,
        mut lp,
        mut score,
        max_len,
    } = prepare(scorer, src, cfg, prefix)?;
    let eos = scorer.eos();
    let mut tokens = prefix.to_vec();
    loop {
        if tokens.len() >= max_len {
            score += lp[eos as usize];
            break;
        }
        let mut best: Option<(f64, u32)> = None;
        for (v, &p) in lp.iter().enumerate() {
            let v = v as u32;
            if scorer.is_generable(v) && best.is_none_or(|b| better((p, v), b)) {
                best = Some((p, v));
            }
        }
        let (p, v) = best.ok_or_else(|| Error::Input("no generable token".into()))?;
        score += p;
        if v == eos {
            break;
        }
        tokens.push(v);
        lp = scorer.advance(&mut cache, &[v])?.remove(0);
    }
    Ok(Hypothesis { tokens, score })
}

#[derive(Clone, Copy)]
struct Candidate {
    score: f64,
    token: u32,
    parent: usize,
}

fn cand_order(a: &Candidate, b: &Candidate) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.token.cmp(&b.token))
        .then(a.parent.cmp(&b.parent))
}

/// Length-bounded beam search.
///
/// Each step keeps the `beam_size` best non-EOS continuations. An EOS
/// continuation finishes its hypothesis if fewer than `beam_size` non-EOS
/// continuations outrank it, or if no continuation is pruned at that step.
/// With `alpha = 0` the search stops once the best finished score is at
/// least the best live score. Ties go to the smaller token id.
pub fn beam_search<S: IncrementalScorer>(
    scorer: &S,
    src: &[u32],
    cfg: &BeamConfig,
    prefix: Option<&[u32]>,
) -> Result<Hypothesis> {
    let prefix = prefix.unwrap_or(&[]);
    let Prepared {
        mut cache,
        lp,
        score,
        max_len,
    } = prepare(scorer, src, cfg, prefix)?;
    let eos = scorer.eos();
    let k = cfg.beam_size;
    let ranked = |h: &Hypothesis| {
        let len = (h.tokens.len() + 1) as f64;
        h.score / len.powf(cfg.length_penalty_alpha)
    };
    let mut live: Vec<(Vec<u32>, f64)> = vec![(prefix.to_vec(), score)];
    let mut lps = vec![lp];
    let mut finished: Vec<Hypothesis> = Vec::new();
    loop {
        let at_limit = live[0].0.len() >= max_len;
        let mut cands: Vec<Candidate> = Vec::new();
        let mut eos_cands: Vec<Candidate> = Vec::new();
        for (parent, ((_, s), lp)) in live.iter().zip(&lps).enumerate() {
            eos_cands.push(Candidate {
                score: s + lp[eos as usize],
                token: eos,
                parent,
            });
            if at_limit {
                continue;
            }
            for (v, &p) in lp.iter().enumerate() {
                let v = v as u32;
                if v != eos && scorer.is_generable(v) {
                    cands.push(Candidate {
                        score: s + p,
                        token: v,
                        parent,
                    });
                }
            }
        }
        cands.sort_by(cand_order);
        let pruning = cands.len() > k;
        for e in &eos_cands {
            let outranked = cands.iter().take_while(|c| cand_order(c, e) == Ordering::Less).count();
            if outranked < k || !pruning {
                finished.push(Hypothesis {
                    tokens: live[e.parent].0.clone(),
                    score: e.score,
                });
            }
        }
        cands.truncate(k);
        if cands.is_empty() {
            break;
        }
        if cfg.length_penalty_alpha == 0.0 {
            if let Some(best) = finished.iter().map(|h| h.score).max_by(f64::total_cmp) {
                if best >= cands[0].score {
                    break;
                }
            }
        }
        let rows: Vec<usize> = cands.iter().map(|c| c.parent).collect();
        scorer.reorder(&mut cache, &rows)?;
        let tokens: Vec<u32> = cands.iter().map(|c| c.token).collect();
        lps = scorer.advance(&mut cache, &tokens)?;
        live = cands
            .iter()
            .map(|c| {
                let mut t = live[c.parent].0.clone();
                t.push(c.token);
                (t, c.score)
            })
            .collect();
    }
    finished
        .into_iter()
        .min_by(|a, b| ranked(b).total_cmp(&ranked(a)).then_with(|| a.tokens.cmp(&b.tokens)))
        .ok_or_else(|| Error::Input("beam search produced no hypothesis".into()))
}

/// Maps source words (sentences joined by the separator) and a forced
/// target prefix to the full target word sequence, prefix included.
pub trait SequenceTranslator: Sync {
    fn translate(&self, src: &[String], prefix: &[String]) -> Result<Vec<String>>;

    /// Whether the source and prefix fit within the model's limits.
    fn fits(&self, _src: &[String], _prefix: &[String]) -> bool {
        true
    }
}

/// A trained model with its subword models.
pub struct ModelTranslator<'a> {
    pub model: &'a Transformer,
    pub src_bpe: &'a BpeModel,
    pub tgt_bpe: &'a BpeModel,
    pub beam: BeamConfig,
}

impl ModelTranslator<'_> {
    fn src_ids(&self, src: &[String]) -> Vec<u32> {
        let mut ids = self.src_bpe.encode_ids(&self.src_bpe.apply(src).pieces);
        ids.push(EOS_ID);
        ids
    }

    fn prefix_ids(&self, prefix: &[String]) -> Vec<u32> {
        self.tgt_bpe.encode_ids(&self.tgt_bpe.apply(prefix).pieces)
    }
}

impl SequenceTranslator for ModelTranslator<'_> {
    fn translate(&self, src: &[String], prefix: &[String]) -> Result<Vec<String>> {
        let prefix_ids = self.prefix_ids(prefix);
        let hyp = beam_search(self.model, &self.src_ids(src), &self.beam, Some(&prefix_ids))?;
        // the prefix is returned as given; only the continuation is decoded
        let mut out = prefix.to_vec();
        out.extend(undo_bpe_lossy(&self.tgt_bpe.decode_ids(&hyp.tokens[prefix_ids.len()..])));
        Ok(out)
    }

    fn fits(&self, src: &[String], prefix: &[String]) -> bool {
        let max = self.model.config().max_positions;
        self.src_ids(src).len() <= max && self.prefix_ids(prefix).len() + 1 < max
    }
}

/// Translate one sentence with no context. Stray separators in the output
/// are dropped.
pub fn translate_sentence(tr: &dyn SequenceTranslator, sentence: &[String]) -> Result<Vec<String>> {
    Ok(tr.translate(sentence, &[])?.into_iter().filter(|t| t != SEP).collect())
}

/// Force `segments` to exactly `n` entries: pad with empty segments, or
/// merge the surplus into the last one.
pub fn fit_segments(mut segments: Vec<Vec<String>>, n: usize) -> Vec<Vec<String>> {
    if segments.len() > n && n > 0 {
        let tail: Vec<String> = segments.drain(n..).flatten().collect();
        segments[n - 1].extend(tail);
    }
    segments.truncate(n);
    segments.resize(n, Vec::new());
    segments
}

/// Translate a whole dialogue in one pass and split the output on the
/// separator. Dialogues that do not fit are decoded in consecutive chunks.
pub fn translate_offline(tr: &dyn SequenceTranslator, dialogue: &[Vec<String>]) -> Result<Vec<Vec<String>>> {
    let mut out = Vec::with_capacity(dialogue.len());
    let mut start = 0;
    while start < dialogue.len() {
        let mut end = dialogue.len();
        while end > start + 1 && !tr.fits(&join_with_sep(&dialogue[start..end])?, &[]) {
            end -= 1;
        }
        if end < dialogue.len() {
            log::warn!("dialogue too long for one pass; decoding sentences {start}..{end} separately");
        }
        let joined = join_with_sep(&dialogue[start..end])?;
        let decoded = tr.translate(&joined, &[])?;
        out.extend(fit_segments(split_by_sep(&decoded), end - start));
        start = end;
    }
    Ok(out)
}

/// Running history for online decoding.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DialogueSession {
    src_history: Vec<Vec<String>>,
    tgt_history: Vec<Vec<String>>,
    context_len: usize,
}

impl DialogueSession {
    pub fn new(context_len: usize) -> Self {
        Self {
            context_len,
            ..Default::default()
        }
    }

    /// A session whose history is already filled, e.g. from an offline pass.
    pub fn with_history(context_len: usize, src: Vec<Vec<String>>, tgt: Vec<Vec<String>>) -> Result<Self> {
        if src.len() != tgt.len() {
            return Err(Error::Input(format!("{} source vs {} target history entries", src.len(), tgt.len())));
        }
        Ok(Self {
            src_history: src,
            tgt_history: tgt,
            context_len,
        })
    }

    pub fn len(&self) -> usize {
        self.src_history.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src_history.is_empty()
    }

    pub fn context_len(&self) -> usize {
        self.context_len
    }

    pub fn src_history(&self) -> &[Vec<String>] {
        &self.src_history
    }

    pub fn tgt_history(&self) -> &[Vec<String>] {
        &self.tgt_history
    }

    fn context(&self, n: usize, new_src: &[String]) -> Result<Vec<String>> {
        let start = self.src_history.len() - n;
        let mut sents: Vec<&[String]> = self.src_history[start..].iter().map(Vec::as_slice).collect();
        sents.push(new_src);
        join_with_sep(&sents)
    }

    fn prefix(&self, n: usize) -> Result<Vec<String>> {
        if n == 0 {
            return Ok(Vec::new());
        }
        let start = self.tgt_history.len() - n;
        let mut p = join_with_sep(&self.tgt_history[start..])?;
        p.push(SEP.to_string());
        Ok(p)
    }

    fn push(&mut self, src: &[String], tgt: &[String]) {
        self.src_history.push(src.to_vec());
        self.tgt_history.push(tgt.to_vec());
    }

    /// Re-translate context plus the new sentence; keep the last segment.
    pub fn translate_online_cut(&mut self, tr: &dyn SequenceTranslator, new_src: &[String]) -> Result<Vec<String>> {
        let mut n = self.context_len.min(self.len());
        let mut src = self.context(n, new_src)?;
        while n > 0 && !tr.fits(&src, &[]) {
            n -= 1;
            log::warn!("context too long; keeping {n} preceding sentences");
            src = self.context(n, new_src)?;
        }
        let last = if n == 0 {
            translate_sentence(tr, new_src)?
        } else {
            split_by_sep(&tr.translate(&src, &[])?).pop().unwrap_or_default()
        };
        self.push(new_src, &last);
        Ok(last)
    }

    /// Force-decode the previous translations and return only the newly
    /// generated suffix.
    pub fn translate_online_fd(&mut self, tr: &dyn SequenceTranslator, new_src: &[String]) -> Result<Vec<String>> {
        let mut n = self.context_len.min(self.len());
        let (mut src, mut prefix) = (self.context(n, new_src)?, self.prefix(n)?);
        while n > 0 && !tr.fits(&src, &prefix) {
            n -= 1;
            log::warn!("forced prefix too long; keeping {n} preceding translations");
            src = self.context(n, new_src)?;
            prefix = self.prefix(n)?;
        }
        let full = tr.translate(&src, &prefix)?;
        if !full.starts_with(&prefix) {
            return Err(Error::Input("decoder did not reproduce the forced prefix".into()));
        }
        let suffix: Vec<String> = full[prefix.len()..].iter().filter(|t| *t != SEP).cloned().collect();
        self.push(new_src, &suffix);
        Ok(suffix)
    }
}

/// Translate a dialogue under a context mode.
pub fn translate_dialogue(
    tr: &dyn SequenceTranslator,
    dialogue: &[Vec<String>],
    mode: ContextMode,
    context_len: usize,
) -> Result<Vec<Vec<String>>> {
    match mode {
        ContextMode::Offline => translate_offline(tr, dialogue),
        ContextMode::OnlineCut => {
            let mut s = DialogueSession::new(context_len);
            dialogue.iter().map(|x| s.translate_online_cut(tr, x)).collect()
        }
        ContextMode::OnlineFd => {
            let mut s = DialogueSession::new(context_len);
            dialogue.iter().map(|x| s.translate_online_fd(tr, x)).collect()
        }
    }
}

/// Repair the source with one model, then translate the repaired text.
/// Offline mode repairs the whole dialogue at once; online modes repair
/// sentence by sentence from the preceding (raw) source context.
pub fn repair_then_translate(
    repair: &dyn SequenceTranslator,
    mt: &dyn SequenceTranslator,
    dialogue: &[Vec<String>],
    mode: ContextMode,
    context_len: usize,
) -> Result<Vec<Vec<String>>> {
    let repaired = match mode {
        ContextMode::Offline => translate_offline(repair, dialogue)?,
        _ => {
            let mut s = DialogueSession::new(context_len);
            dialogue
                .iter()
                .map(|x| s.translate_online_cut(repair, x))
                .collect::<Result<Vec<_>>>()?
        }
    };
    // a repaired sentence must not be empty or contain the separator
    let repaired: Vec<Vec<String>> = repaired
        .into_iter()
        .zip(dialogue)
        .map(|(r, orig)| if r.is_empty() { orig.clone() } else { r })
        .collect();
    translate_dialogue(mt, &repaired, mode, context_len)
}

/// String-level dialogue translation, optionally through a repair model.
pub struct DialoguePipeline<'a> {
    pub mt: &'a dyn SequenceTranslator,
    pub repair: Option<&'a dyn SequenceTranslator>,
}

impl DialogueTranslator for DialoguePipeline<'_> {
    fn translate_dialogue(&self, sents: &[String], mode: ContextMode, context_len: usize) -> Result<Vec<String>> {
        let words: Vec<Vec<String>> = sents.iter().map(|s| tokenize_line(s)).collect();
        let out = match self.repair {
            Some(r) => repair_then_translate(r, self.mt, &words, mode, context_len)?,
            None => translate_dialogue(self.mt, &words, mode, context_len)?,
        };
        Ok(out.iter().map(|w| w.join(" ")).collect())
    }
}
