//! End-to-end run on the synthetic dialogue language: generate data, train
//! a clean-only baseline and a multi-task model under the same budget, and
//! evaluate both on perturbed held-out dialogues.

use std::time::Instant;

use candle_core::{DType, Device};
use serde::{Deserialize, Serialize};

use crate::corpus::{sample_corpus, SamplingConfig};
use crate::dataset::{make_examples, LabeledExample};
use crate::decode::{BeamConfig, DialoguePipeline, ModelTranslator};
use crate::error::Result;
use crate::eval::{evaluate, translate_testset, ContextMode, MetricsReport, TestSet};
use crate::model::{label_probs, ModelConfig, Transformer};
use crate::perturb::{Label, PerturbationConfig, Perturber};
use crate::synth::{self, SynthConfig};
use crate::tokenizer::{learn_bpe, BpeModel, EOS_ID};
use crate::train::{build_training_stream, encode_items, train, OptimizerConfig, Schedule, TrainConfig, TrainingMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub train_documents: usize,
    pub test_documents: usize,
    pub n_max: usize,
    pub perturbation: PerturbationConfig,
    pub max_merges: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub heads: usize,
    pub optimizer: OptimizerConfig,
    pub schedule: Schedule,
    pub max_updates: u64,
    pub beam: BeamConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            train_documents: 19_000,
            test_documents: 200,
            n_max: 10,
            perturbation: PerturbationConfig::default(),
            max_merges: 30_000,
            enc_layers: 4,
            dec_layers: 4,
            d_model: 256,
            d_ffn: 512,
            heads: 4,
            optimizer: OptimizerConfig {
                batch_tokens: 1200,
                warmup_updates: 400,
                learning_rate: 1e-3,
                dropout: 0.1,
                ..Default::default()
            },
            schedule: Schedule::default(),
            max_updates: 1500,
            beam: BeamConfig::default(),
        }
    }
}

/// Shared data for both runs.
pub struct ExperimentData {
    pub examples: Vec<LabeledExample>,
    pub src_bpe: BpeModel,
    pub tgt_bpe: BpeModel,
    pub testset: TestSet,
    pub test_examples: Vec<LabeledExample>,
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<ExperimentData> {
    let synth_cfg = SynthConfig {
        documents: cfg.train_documents,
        ..Default::default()
    };
    let docs = synth::generate_documents(&synth_cfg, cfg.seed)?;
    let pairs = sample_corpus(
        &docs,
        &SamplingConfig {
            n_max: cfg.n_max,
            ..Default::default()
        },
        cfg.seed,
    );
    let tables = synth::tables();
    let perturber = Perturber::new(&tables, cfg.perturbation, synth::source_vocabulary())?;
    let (examples, _) = make_examples(&pairs, &perturber, cfg.seed)?;
    let src_bpe = learn_bpe(examples.iter().flat_map(|e| [&e.src, &e.src_pert]), cfg.max_merges)?;
    let tgt_bpe = learn_bpe(examples.iter().map(|e| &e.tgt), cfg.max_merges)?;
    let test_docs = synth::generate_documents(
        &SynthConfig {
            documents: cfg.test_documents,
            ..Default::default()
        },
        cfg.seed.wrapping_add(0x7E57_0000),
    )?;
    let (testset, test_examples, _) = synth::build_testset(&test_docs, &perturber, cfg.seed.wrapping_add(0x7E57))?;
    log::info!(
        "data: {} documents, {} sub-documents, src vocab {}, tgt vocab {}, {} test dialogues",
        docs.len(),
        examples.len(),
        src_bpe.vocab().len(),
        tgt_bpe.vocab().len(),
        testset.dialogues.len()
    );
    Ok(ExperimentData {
        examples,
        src_bpe,
        tgt_bpe,
        testset,
        test_examples,
    })
}

/// Word-level labels predicted by the labeling head; each word takes the
/// prediction of its first subword.
pub fn predict_word_labels(model: &Transformer, src_bpe: &BpeModel, words: &[String]) -> Result<Vec<Label>> {
    let seg = src_bpe.apply(words);
    let mut ids = src_bpe.encode_ids(&seg.pieces);
    ids.push(EOS_ID);
    let enc = model.encode(&ids)?;
    let probs = label_probs(model.head(), &enc)?;
    Ok(seg
        .spans
        .iter()
        .map(|span| {
            let p = &probs[span.start];
            let best = (0..4).fold(0, |b, j| if p[j] > p[b] { j } else { b });
            Label::ALL[best]
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub mode: TrainingMode,
    pub updates: u64,
    pub final_l_mt: f64,
    pub train_seconds: f64,
    pub metrics: MetricsReport,
}

pub fn model_config(cfg: &ExperimentConfig, data: &ExperimentData) -> ModelConfig {
    ModelConfig {
        enc_layers: cfg.enc_layers,
        dec_layers: cfg.dec_layers,
        d_model: cfg.d_model,
        d_ffn: cfg.d_ffn,
        heads: cfg.heads,
        dropout: cfg.optimizer.dropout,
        src_vocab: data.src_bpe.vocab().len(),
        tgt_vocab: data.tgt_bpe.vocab().len(),
        ..ModelConfig::desk(0, 0)
    }
}

/// Train one mode and evaluate it offline on the perturbed test set.
pub fn run_mode(cfg: &ExperimentConfig, data: &ExperimentData, mode: TrainingMode) -> Result<(Transformer, RunResult)> {
    let mtl = mode == TrainingMode::Mtl;
    let items = build_training_stream(mode, &data.examples, mtl)?;
    let encoded = encode_items(&items, &data.src_bpe, &data.tgt_bpe)?;
    let model = Transformer::new(model_config(cfg, data), cfg.seed, DType::F32, &Device::Cpu)?;
    let tc = TrainConfig {
        mode,
        optimizer: cfg.optimizer,
        schedule: cfg.schedule,
        max_updates: cfg.max_updates,
        seed: cfg.seed,
        checkpoint_every: 0,
        log_every: 50,
    };
    let started = Instant::now();
    let outcome = train(&model, &encoded, &[], &tc, None)?;
    let train_seconds = started.elapsed().as_secs_f64();
    let tail = outcome.trace.len().saturating_sub(50);
    let final_l_mt = outcome.trace[tail..].iter().map(|r| r.l_mt).sum::<f64>() / (outcome.trace.len() - tail) as f64;
    let tr = ModelTranslator {
        model: &model,
        src_bpe: &data.src_bpe,
        tgt_bpe: &data.tgt_bpe,
        beam: cfg.beam,
    };
    let hyps = translate_testset(&DialoguePipeline { mt: &tr, repair: None }, &data.testset, ContextMode::Offline, 0)?;
    let labels = if mtl {
        let gold: Vec<Vec<Label>> = data.test_examples.iter().map(|e| e.labels_pert.clone()).collect();
        let pred = data
            .test_examples
            .iter()
            .map(|e| predict_word_labels(&model, &data.src_bpe, &e.src_pert))
            .collect::<Result<Vec<_>>>()?;
        Some((gold, pred))
    } else {
        None
    };
    let metrics = evaluate(
        &data.testset,
        &hyps,
        labels.as_ref().map(|(g, p)| (g.as_slice(), p.as_slice())),
    )?;
    log::info!("{mode}: trained {} updates in {train_seconds:.0}s\n{}", outcome.updates, metrics.to_text());
    Ok((
        model,
        RunResult {
            mode,
            updates: outcome.updates,
            final_l_mt,
            train_seconds,
            metrics,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub base: RunResult,
    pub mtl: RunResult,
}

impl Comparison {
    pub fn bleu_gain(&self) -> f64 {
        self.mtl.metrics.bleu - self.base.metrics.bleu
    }

    /// Recovery gain in percentage points.
    pub fn recovery_gain(&self) -> f64 {
        let acc = |r: &RunResult| r.metrics.recovery.accuracy.unwrap_or(0.0) * 100.0;
        acc(&self.mtl) - acc(&self.base)
    }

    pub fn labeling_macro_f1(&self) -> f64 {
        self.mtl
            .metrics
            .labeling
            .as_ref()
            .and_then(|l| l.macro_f1())
            .unwrap_or(0.0)
    }
}

pub fn compare_base_mtl(cfg: &ExperimentConfig) -> Result<Comparison> {
    let data = prepare_data(cfg)?;
    let (_, base) = run_mode(cfg, &data, TrainingMode::Base)?;
    let (_, mtl) = run_mode(cfg, &data, TrainingMode::Mtl)?;
    Ok(Comparison { base, mtl })
}
