//! Training: dataset composition per mode, token-count batching, the
//! scheduled multi-task loss, Adam with global-norm clipping, and
//! checkpoint retention.

use std::fmt::Write as _;
use std::path::PathBuf;

use candle_core::{DType, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointMeta};
use crate::dataset::LabeledExample;
use crate::error::{Error, Result};
use crate::model::{combined_loss_tensor, smoothed_nll, Ctx, Transformer, LABEL_CLASSES};
use crate::perturb::Label;
use crate::tokenizer::{project_labels, BpeModel, BOS_ID, EOS_ID, PAD_ID};

pub use crate::schedule::{lambda_at, Schedule};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub learning_rate: f64,
    pub grad_clip_norm: f64,
    pub label_smoothing: f64,
    pub dropout: f64,
    pub batch_tokens: usize,
    pub warmup_updates: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            learning_rate: 5e-4,
            grad_clip_norm: 5.0,
            label_smoothing: 0.1,
            dropout: 0.3,
            batch_tokens: 4000,
            warmup_updates: 4000,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!("{name}={b} outside (0, 1)")));
            }
        }
        for (name, v) in [
            ("eps", self.eps),
            ("learning_rate", self.learning_rate),
            ("grad_clip_norm", self.grad_clip_norm),
        ] {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!("label_smoothing {} outside [0, 1)", self.label_smoothing)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.batch_tokens == 0 {
            return Err(Error::Config("batch_tokens must be positive".into()));
        }
        Ok(())
    }

    /// Linear warmup to the peak rate, then inverse-square-root decay.
    /// `step` counts from 1.
    pub fn lr_at(&self, step: u64) -> f64 {
        let step = step.max(1) as f64;
        if self.warmup_updates == 0 {
            return self.learning_rate;
        }
        let w = self.warmup_updates as f64;
        self.learning_rate * (step / w).min((w / step).sqrt())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainingMode {
    Base,
    Repair,
    Robust,
    Mtl,
}

impl std::str::FromStr for TrainingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "base" => Ok(Self::Base),
            "repair" => Ok(Self::Repair),
            "robust" => Ok(Self::Robust),
            "mtl" => Ok(Self::Mtl),
            _ => Err(Error::Config(format!("unknown training mode {s:?}"))),
        }
    }
}

impl std::fmt::Display for TrainingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Base => "base",
            Self::Repair => "repair",
            Self::Robust => "robust",
            Self::Mtl => "mtl",
        })
    }
}

/// One word-level training pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingItem {
    pub src: Vec<String>,
    pub tgt: Vec<String>,
    pub labels: Option<Vec<Label>>,
}

/// Compose the training pairs of a mode. Label sequences are attached in
/// MTL mode; requesting them for any other mode is a configuration error.
pub fn build_training_stream(
    mode: TrainingMode,
    examples: &[LabeledExample],
    request_labels: bool,
) -> Result<Vec<TrainingItem>> {
    if request_labels && mode != TrainingMode::Mtl {
        return Err(Error::Config(format!("label sequences requested for mode {mode}")));
    }
    let item = |src: &[String], tgt: &[String], labels: Option<&[Label]>| TrainingItem {
        src: src.to_vec(),
        tgt: tgt.to_vec(),
        labels: labels.map(<[Label]>::to_vec),
    };
    let mut out = Vec::new();
    for e in examples {
        match mode {
            TrainingMode::Base => out.push(item(&e.src, &e.tgt, None)),
            TrainingMode::Repair => out.push(item(&e.src_pert, &e.src, None)),
            TrainingMode::Robust => {
                out.push(item(&e.src, &e.tgt, None));
                out.push(item(&e.src_pert, &e.tgt, None));
            }
            TrainingMode::Mtl => {
                out.push(item(&e.src, &e.tgt, Some(&e.labels_clean)));
                out.push(item(&e.src_pert, &e.tgt, Some(&e.labels_pert)));
            }
        }
    }
    Ok(out)
}

/// Subword ids of one item. `src` ends with EOS; `tgt` carries no
/// BOS/EOS (they are added when batching).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedItem {
    pub src: Vec<u32>,
    pub tgt: Vec<u32>,
    pub labels: Option<Vec<u32>>,
}

impl EncodedItem {
    fn cost(&self) -> usize {
        self.src.len().max(self.tgt.len() + 1)
    }
}

pub fn encode_items(items: &[TrainingItem], src_bpe: &BpeModel, tgt_bpe: &BpeModel) -> Result<Vec<EncodedItem>> {
    items
        .iter()
        .map(|it| {
            let seg = src_bpe.apply(&it.src);
            let mut src = src_bpe.encode_ids(&seg.pieces);
            src.push(EOS_ID);
            let labels = match &it.labels {
                Some(l) => {
                    let mut p: Vec<u32> = project_labels(l, &seg.spans)?.iter().map(|l| l.index() as u32).collect();
                    p.push(Label::Correct.index() as u32);
                    Some(p)
                }
                None => None,
            };
            let tgt = tgt_bpe.encode_ids(&tgt_bpe.apply(&it.tgt).pieces);
            Ok(EncodedItem { src, tgt, labels })
        })
        .collect()
}

/// Group items so that `count × longest` stays within the token budget.
/// Items are length-sorted with random tie order, then the batches are
/// shuffled.
pub fn make_batches(items: &[EncodedItem], batch_tokens: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if let Some(longest) = items.iter().map(EncodedItem::cost).max() {
        if longest > batch_tokens {
            return Err(Error::Config(format!(
                "batch_tokens {batch_tokens} is smaller than the longest item ({longest} tokens)"
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut rng);
    order.sort_by_key(|&i| items[i].cost());
    let mut batches = Vec::new();
    let mut cur: Vec<usize> = Vec::new();
    let mut longest = 0;
    for i in order {
        let c = items[i].cost();
        if !cur.is_empty() && (cur.len() + 1) * longest.max(c) > batch_tokens {
            batches.push(std::mem::take(&mut cur));
            longest = 0;
        }
        longest = longest.max(c);
        cur.push(i);
    }
    if !cur.is_empty() {
        batches.push(cur);
    }
    batches.shuffle(&mut rng);
    Ok(batches)
}

/// Padded tensors of one batch.
pub struct Batch {
    pub src: Tensor,
    pub src_valid: Tensor,
    pub tgt_in: Tensor,
    pub tgt_out: Tensor,
    pub tgt_weight: Tensor,
    /// Labels and their weights, when every item carries labels.
    pub labels: Option<(Tensor, Tensor)>,
    pub tokens: usize,
}

pub fn make_batch(items: &[&EncodedItem], model: &Transformer) -> Result<Batch> {
    let dev = model.device();
    let dt = model.dtype();
    let b = items.len();
    let s = items.iter().map(|i| i.src.len()).max().unwrap_or(0);
    let t = items.iter().map(|i| i.tgt.len() + 1).max().unwrap_or(0);
    let mut src = vec![PAD_ID; b * s];
    let mut valid = vec![0f32; b * s];
    let mut tin = vec![PAD_ID; b * t];
    let mut tout = vec![PAD_ID; b * t];
    let mut tw = vec![0f32; b * t];
    let mut labels = vec![0u32; b * s];
    let with_labels = items.iter().all(|i| i.labels.is_some());
    for (r, it) in items.iter().enumerate() {
        for (j, &id) in it.src.iter().enumerate() {
            src[r * s + j] = id;
            valid[r * s + j] = 1.0;
        }
        tin[r * t] = BOS_ID;
        for (j, &id) in it.tgt.iter().enumerate() {
            tin[r * t + j + 1] = id;
            tout[r * t + j] = id;
        }
        tout[r * t + it.tgt.len()] = EOS_ID;
        for w in &mut tw[r * t..r * t + it.tgt.len() + 1] {
            *w = 1.0;
        }
        if let Some(l) = &it.labels {
            if l.len() != it.src.len() {
                return Err(Error::Alignment(format!("{} labels for {} source ids", l.len(), it.src.len())));
            }
            if let Some(bad) = l.iter().find(|&&x| x as usize >= LABEL_CLASSES) {
                return Err(Error::Input(format!("label {bad} outside 0..=3")));
            }
            labels[r * s..r * s + l.len()].copy_from_slice(l);
        }
    }
    let tokens = tw.iter().filter(|w| **w > 0.0).count();
    let src_valid = Tensor::from_vec(valid, (b, s), dev)?.to_dtype(dt)?;
    let label_part = if with_labels {
        Some((Tensor::from_vec(labels, b * s, dev)?, src_valid.flatten_all()?))
    } else {
        None
    };
    Ok(Batch {
        src: Tensor::from_vec(src, (b, s), dev)?,
        src_valid,
        tgt_in: Tensor::from_vec(tin, (b, t), dev)?,
        tgt_out: Tensor::from_vec(tout, b * t, dev)?,
        tgt_weight: Tensor::from_vec(tw, b * t, dev)?.to_dtype(dt)?,
        labels: label_part,
        tokens,
    })
}

/// Token-mean translation loss and (when labels are present and wanted)
/// token-mean labeling loss of one batch.
pub fn batch_losses(
    model: &Transformer,
    batch: &Batch,
    ctx: &Ctx,
    smoothing: f64,
    with_labels: bool,
) -> Result<(Tensor, Option<Tensor>)> {
    let enc = model.encode_batch(&batch.src, &batch.src_valid, ctx)?;
    let bias = model.padding_bias(&batch.src_valid)?;
    let logits = model.decode_batch(&enc, &bias, &batch.tgt_in, ctx)?;
    let (b, t, v) = logits.dims3()?;
    let l_mt = smoothed_nll(&logits.reshape((b * t, v))?, &batch.tgt_out, &batch.tgt_weight, smoothing)?;
    let l_sl = match (&batch.labels, with_labels) {
        (Some((labels, w)), true) => {
            let s = enc.dim(1)?;
            let d = enc.dim(2)?;
            let lg = model.head().logits(&enc.reshape((b * s, d))?)?;
            Some(smoothed_nll(&lg, labels, w, 0.0)?)
        }
        _ => None,
    };
    Ok((l_mt, l_sl))
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Adam with bias correction over a fixed parameter list.
pub struct Adam {
    params: Vec<Var>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    cfg: OptimizerConfig,
    step: u64,
}

impl Adam {
    pub fn new(params: Vec<Var>, cfg: OptimizerConfig) -> Result<Self> {
        let m = params.iter().map(|p| p.zeros_like()).collect::<candle_core::Result<Vec<_>>>()?;
        let v = m.clone();
        Ok(Self {
            params,
            m,
            v,
            cfg,
            step: 0,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, grads: &[Tensor], lr: f64) -> Result<()> {
        self.step += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (i, g) in grads.iter().enumerate() {
            let m = ((&self.m[i] * b1)? + (g * (1.0 - b1))?)?;
            let v = ((&self.v[i] * b2)? + (g.sqr()? * (1.0 - b2))?)?;
            let denom = ((&v / c2)?.sqrt()? + self.cfg.eps)?;
            let update = ((&m / c1)? / denom)?;
            let p = self.params[i].as_tensor().detach();
            self.params[i].set(&(p - (update * lr)?)?)?;
            self.m[i] = m;
            self.v[i] = v;
        }
        Ok(())
    }
}

/// Global L2 norm of a gradient list.
pub fn global_norm(grads: &[Tensor]) -> Result<f64> {
    let mut total = 0.0;
    for g in grads {
        total += scalar(&g.sqr()?.sum_all()?)?;
    }
    Ok(total.sqrt())
}

/// Rescale gradients so their global norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> Result<f64> {
    let norm = global_norm(grads)?;
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            *g = (&*g * scale)?;
        }
    }
    Ok(norm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub update: u64,
    pub lambda: f64,
    pub l_mt: f64,
    pub l_sl: f64,
    pub l_total: f64,
}

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut s = String::from("update,lambda,L_MT,L_SL,L_total\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{}", r.update, r.lambda, r.l_mt, r.l_sl, r.l_total);
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: TrainingMode,
    pub optimizer: OptimizerConfig,
    pub schedule: Schedule,
    pub max_updates: u64,
    pub seed: u64,
    /// Save `checkpoint_last` (and evaluate validation loss) every this many
    /// updates; 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    pub log_every: u64,
}

impl TrainConfig {
    pub fn new(mode: TrainingMode) -> Self {
        Self {
            mode,
            optimizer: OptimizerConfig::default(),
            schedule: Schedule::default(),
            max_updates: 1000,
            seed: 1,
            checkpoint_every: 0,
            log_every: 100,
        }
    }
}

/// Where checkpoints go and what they record besides the weights.
pub struct CheckpointSink {
    pub dir: PathBuf,
    pub src_bpe: Option<BpeModel>,
    pub tgt_bpe: Option<BpeModel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub updates: u64,
    pub trace: Vec<TraceRow>,
    pub best_valid_loss: Option<f64>,
}

fn describe_batch(items: &[&EncodedItem]) -> String {
    let mut s = String::new();
    for (i, it) in items.iter().enumerate() {
        let _ = writeln!(s, "  item {i}: src {:?} tgt {:?}", it.src, it.tgt);
    }
    s
}

/// Token-mean translation loss over a validation set (no smoothing).
pub fn validation_loss(model: &Transformer, items: &[EncodedItem], batch_tokens: usize) -> Result<f64> {
    let batches = make_batches(items, batch_tokens, 0)?;
    let (mut sum, mut tokens) = (0.0, 0usize);
    let ctx = Ctx::eval();
    for idx in batches {
        let refs: Vec<&EncodedItem> = idx.iter().map(|&i| &items[i]).collect();
        let batch = make_batch(&refs, model)?;
        let (l, _) = batch_losses(model, &batch, &ctx, 0.0, false)?;
        sum += scalar(&l)? * batch.tokens as f64;
        tokens += batch.tokens;
    }
    Ok(if tokens == 0 { 0.0 } else { sum / tokens as f64 })
}

/// Run the update loop. Deterministic for a fixed configuration and seed.
pub fn train(
    model: &Transformer,
    items: &[EncodedItem],
    valid: &[EncodedItem],
    cfg: &TrainConfig,
    sink: Option<&CheckpointSink>,
) -> Result<TrainOutcome> {
    cfg.optimizer.validate()?;
    cfg.schedule.validate()?;
    if items.is_empty() {
        return Err(Error::Input("empty training stream".into()));
    }
    let mtl = cfg.mode == TrainingMode::Mtl;
    if mtl && items.iter().any(|i| i.labels.is_none()) {
        return Err(Error::Config("MTL training needs label sequences on every item".into()));
    }
    if !mtl && items.iter().any(|i| i.labels.is_some()) {
        return Err(Error::Config(format!("label sequences supplied for mode {}", cfg.mode)));
    }
    let params: Vec<(String, Var)> = if mtl {
        model.params().to_vec()
    } else {
        model.translation_params().cloned().collect()
    };
    let mut adam = Adam::new(params.iter().map(|(_, v)| v.clone()).collect(), cfg.optimizer)?;
    let mut trace = Vec::with_capacity(cfg.max_updates as usize);
    let mut best: Option<f64> = None;
    let mut epoch = 0u64;
    let mut update = 0u64;
    'outer: while update < cfg.max_updates {
        let batches = make_batches(items, cfg.optimizer.batch_tokens, cfg.seed.wrapping_add(epoch))?;
        for idx in batches {
            if update >= cfg.max_updates {
                break 'outer;
            }
            let refs: Vec<&EncodedItem> = idx.iter().map(|&i| &items[i]).collect();
            let batch = make_batch(&refs, model)?;
            let ctx = Ctx::train(cfg.seed ^ update.wrapping_mul(0x2545_F491_4F6C_DD1D));
            let (l_mt, l_sl) = batch_losses(model, &batch, &ctx, cfg.optimizer.label_smoothing, mtl)?;
            let lambda = if mtl { lambda_at(update, &cfg.schedule) } else { 0.0 };
            let total = match &l_sl {
                Some(l) => combined_loss_tensor(&l_mt, l, lambda)?,
                None => l_mt.clone(),
            };
            let row = TraceRow {
                update,
                lambda,
                l_mt: scalar(&l_mt)?,
                l_sl: l_sl.as_ref().map(scalar).transpose()?.unwrap_or(0.0),
                l_total: scalar(&total)?,
            };
            if !row.l_total.is_finite() {
                let detail = format!(
                    "L_MT={} L_SL={} lambda={}\n{}",
                    row.l_mt,
                    row.l_sl,
                    lambda,
                    describe_batch(&refs)
                );
                if let Some(s) = sink {
                    let p = s.dir.join("nonfinite_batch.txt");
                    let _ = std::fs::write(&p, &detail);
                }
                return Err(Error::NonFiniteLoss { update, detail });
            }
            let grads_store = total.backward()?;
            let mut grads: Vec<Tensor> = params
                .iter()
                .map(|(_, v)| match grads_store.get(v.as_tensor()) {
                    Some(g) => Ok(g.clone()),
                    None => Ok(v.zeros_like()?),
                })
                .collect::<Result<_>>()?;
            clip_grad_norm(&mut grads, cfg.optimizer.grad_clip_norm)?;
            adam.step(&grads, cfg.optimizer.lr_at(update + 1))?;
            if cfg.log_every > 0 && update % cfg.log_every == 0 {
                log::info!(
                    "update {update} lambda {:.4} L_MT {:.4} L_SL {:.4} tokens {}",
                    row.lambda,
                    row.l_mt,
                    row.l_sl,
                    batch.tokens
                );
            }
            trace.push(row);
            update += 1;
            if cfg.checkpoint_every > 0 && update % cfg.checkpoint_every == 0 {
                best = checkpoint_step(model, valid, cfg, sink, update, best)?;
            }
        }
        epoch += 1;
    }
    if cfg.checkpoint_every == 0 || update % cfg.checkpoint_every != 0 {
        best = checkpoint_step(model, valid, cfg, sink, update, best)?;
    }
    Ok(TrainOutcome {
        updates: update,
        trace,
        best_valid_loss: best,
    })
}

fn checkpoint_step(
    model: &Transformer,
    valid: &[EncodedItem],
    cfg: &TrainConfig,
    sink: Option<&CheckpointSink>,
    update: u64,
    best: Option<f64>,
) -> Result<Option<f64>> {
    let vloss = if valid.is_empty() {
        None
    } else {
        Some(validation_loss(model, valid, cfg.optimizer.batch_tokens)?)
    };
    if let Some(v) = vloss {
        log::info!("update {update}: validation loss {v:.4}");
    }
    let improved = match (vloss, best) {
        (Some(v), Some(b)) => v < b,
        (Some(_), None) => true,
        (None, _) => false,
    };
    if let Some(s) = sink {
        let meta = CheckpointMeta {
            mode: cfg.mode,
            update,
            valid_loss: vloss,
            src_bpe: s.src_bpe.clone(),
            tgt_bpe: s.tgt_bpe.clone(),
        };
        checkpoint::save(&s.dir.join("checkpoint_last.bin"), model, &meta)?;
        if improved || valid.is_empty() {
            checkpoint::save(&s.dir.join("checkpoint_best.bin"), model, &meta)?;
        }
    }
    Ok(if improved { vloss } else { best })
}
