use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use candle_core::{DType, Device};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use dialmt::checkpoint;
use dialmt::corpus::{load_parallel_documents, sample_corpus, SamplingConfig, SubDocRecord};
use dialmt::dataset::{make_examples, read_examples, write_examples, GenerationReport, LabeledExample};
use dialmt::decode::{BeamConfig, DialoguePipeline, ModelTranslator, SequenceTranslator};
use dialmt::eval::{context_sweep, evaluate, sweep_csv, ContextMode, DialogueTranslator, TestSet};
use dialmt::experiment::{compare_base_mtl, predict_word_labels, ExperimentConfig};
use dialmt::model::{ModelConfig, Transformer};
use dialmt::perturb::{PerturbationConfig, PerturbationTables, Perturber};
use dialmt::synth::{self, SynthConfig};
use dialmt::tokenizer::{learn_bpe, BpeModel, DEFAULT_MAX_MERGES};
use dialmt::train::{build_training_stream, encode_items, trace_csv, train, CheckpointSink, OptimizerConfig, Schedule, TrainConfig, TrainingMode};
use dialmt::{Error, Result};

#[derive(Parser)]
#[command(name = "dialmt", version, about = "Dialogue translation robustness toolkit")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Clone)]
struct Global {
    /// Seed for every stochastic step.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML file with default values; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for data generation and decoding.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic parallel dialogue corpus and its perturbation tables.
    Synth {
        #[arg(long, default_value_t = 1000)]
        documents: usize,
        /// Also write a perturbed test set with this many dialogues.
        #[arg(long, default_value_t = 0)]
        test_documents: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample sub-documents, perturb them and write labeled examples.
    GenData(GenData),
    /// Learn a subword model from labeled examples.
    LearnBpe {
        #[arg(long)]
        examples: PathBuf,
        /// `src` learns from clean and perturbed sources, `tgt` from targets.
        #[arg(long, default_value = "src")]
        side: String,
        #[arg(long)]
        max_merges: Option<usize>,
        /// Output prefix; writes PREFIX.merges and PREFIX.vocab.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model.
    Train(TrainArgs),
    /// Translate dialogues.
    Translate(TranslateArgs),
    /// Score hypotheses against a test set.
    Evaluate {
        #[arg(long)]
        testset: PathBuf,
        /// Translation JSONL with `hyps`.
        #[arg(long)]
        hyps: PathBuf,
        /// Checkpoint whose labeling head is scored on the perturbed sources.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Gold labels (labeled-example JSONL aligned with the test set).
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Output prefix; writes PREFIX.txt and PREFIX.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// BLEU and recovery for a range of online context lengths.
    SweepContext {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        testset: PathBuf,
        #[arg(long, default_value = "online-cut")]
        mode: String,
        /// Comma-separated context lengths.
        #[arg(long, default_value = "0,1,2,3,4,5")]
        context_len: String,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train BASE and MTL models on synthetic data and compare them.
    Experiment {
        #[arg(long)]
        max_updates: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    tgt: PathBuf,
    #[arg(long)]
    boundaries: PathBuf,
    #[arg(long)]
    pronouns: PathBuf,
    #[arg(long)]
    punct: PathBuf,
    #[arg(long)]
    homophones: PathBuf,
    /// Deletion probability for both pronouns and punctuation.
    #[arg(long)]
    p_drop: Option<f64>,
    #[arg(long)]
    p_typo: Option<f64>,
    #[arg(long)]
    p_homophone: Option<f64>,
    #[arg(long)]
    n_max: Option<usize>,
    /// Also write the sampled sub-documents to this JSONL file.
    #[arg(long)]
    subdocs: Option<PathBuf>,
    /// Labeled-example JSONL; the rate report goes next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    examples: PathBuf,
    #[arg(long)]
    valid: Option<PathBuf>,
    /// Source subword model prefix.
    #[arg(long)]
    src_bpe: PathBuf,
    /// Target subword model prefix (the source one in repair mode).
    #[arg(long)]
    tgt_bpe: PathBuf,
    /// base, repair, robust or mtl.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    max_updates: Option<u64>,
    /// Output directory for checkpoints and the loss trace.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TranslateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Repair checkpoint to run before translation.
    #[arg(long)]
    repair: Option<PathBuf>,
    /// Dialogue JSONL: {"id": ..., "sents": [...]}.
    #[arg(long)]
    input: PathBuf,
    /// offline, online-cut or online-fd.
    #[arg(long, default_value = "offline")]
    mode: String,
    #[arg(long, default_value_t = 3)]
    context_len: usize,
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Values that may come from the TOML file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    mode: Option<TrainingMode>,
    max_updates: Option<u64>,
    checkpoint_every: Option<u64>,
    n_max: Option<usize>,
    max_merges: Option<usize>,
    model: ModelSection,
    optimizer: OptimizerConfig,
    schedule: Schedule,
    beam: BeamConfig,
    perturbation: PerturbationConfig,
    experiment: Option<ExperimentConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ModelSection {
    enc_layers: usize,
    dec_layers: usize,
    d_model: usize,
    d_ffn: usize,
    heads: usize,
    attn_dropout: f64,
    max_positions: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelConfig::desk(1, 1);
        Self {
            enc_layers: d.enc_layers,
            dec_layers: d.dec_layers,
            d_model: d.d_model,
            d_ffn: d.d_ffn,
            heads: d.heads,
            attn_dropout: d.attn_dropout,
            max_positions: d.max_positions,
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn log_resolved<T: Serialize>(what: &str, value: &T) {
    log::info!("resolved {what} config: {}", serde_json::to_string(value).unwrap_or_default());
}

fn write_file(path: &Path, body: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn open_read(path: &Path) -> Result<std::io::BufReader<std::fs::File>> {
    Ok(std::io::BufReader::new(std::fs::File::open(path).map_err(|e| Error::io(path, e))?))
}

fn bpe_paths(prefix: &Path) -> (PathBuf, PathBuf) {
    let mut m = prefix.as_os_str().to_owned();
    m.push(".merges");
    let mut v = prefix.as_os_str().to_owned();
    v.push(".vocab");
    (m.into(), v.into())
}

/// Map `f` over `items` on `jobs` threads, keeping input order.
fn par_map<T: Sync, U: Send>(jobs: usize, items: &[T], f: impl Fn(&T) -> Result<U> + Sync) -> Result<Vec<U>> {
    if jobs <= 1 || items.len() < 2 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(jobs);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(|| c.iter().map(&f).collect::<Result<Vec<U>>>()))
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("worker panicked")?);
        }
        Ok(out)
    })
}

fn cmd_synth(g: &Global, fc: &FileConfig, documents: usize, test_documents: usize, out: &Path) -> Result<()> {
    let seed = g.seed.or(fc.seed).unwrap_or(1);
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let docs = synth::generate_documents(
        &SynthConfig {
            documents,
            ..Default::default()
        },
        seed,
    )?;
    synth::write_corpus(&docs, &out.join("train.src"), &out.join("train.tgt"), &out.join("train.bounds"))?;
    synth::write_tables(out)?;
    if test_documents > 0 {
        let test_docs = synth::generate_documents(
            &SynthConfig {
                documents: test_documents,
                ..Default::default()
            },
            seed.wrapping_add(0x7E57_0000),
        )?;
        let tables = synth::tables();
        let perturber = Perturber::new(&tables, fc.perturbation, synth::source_vocabulary())?;
        let (ts, examples, _) = synth::build_testset(&test_docs, &perturber, seed.wrapping_add(0x7E57))?;
        write_file(&out.join("test.jsonl"), ts.to_jsonl())?;
        let mut labels = Vec::new();
        write_examples(&mut labels, &examples)?;
        write_file(&out.join("test.labels.jsonl"), labels)?;
        let mut dialogues = String::new();
        for d in &ts.dialogues {
            dialogues.push_str(&serde_json::to_string(&serde_json::json!({"id": d.id, "sents": d.sources()}))?);
            dialogues.push('\n');
        }
        write_file(&out.join("test.dialogues.jsonl"), dialogues)?;
    }
    log::info!("wrote {} dialogues to {}", docs.len(), out.display());
    Ok(())
}

fn cmd_gen_data(g: &Global, fc: &FileConfig, a: &GenData) -> Result<()> {
    let seed = g.seed.or(fc.seed).unwrap_or(1);
    let mut pc = fc.perturbation;
    if let Some(p) = a.p_drop {
        pc.p_pronoun = p;
        pc.p_punct = p;
    }
    if let Some(p) = a.p_typo {
        pc.p_typo = p;
    }
    if let Some(p) = a.p_homophone {
        pc.p_homophone = p;
    }
    let sampling = SamplingConfig {
        n_max: a.n_max.or(fc.n_max).unwrap_or(dialmt::corpus::DEFAULT_N_MAX),
        ..Default::default()
    };
    log_resolved("gen-data", &serde_json::json!({"seed": seed, "perturbation": pc, "sampling": sampling}));
    let docs = load_parallel_documents(&a.src, &a.tgt, &a.boundaries)?;
    let tables = PerturbationTables::load(&a.pronouns, &a.punct, &a.homophones)?;
    let vocab: std::collections::BTreeSet<String> =
        docs.iter().flat_map(|d| d.src_sentences().iter().flatten().cloned()).collect();
    let perturber = Perturber::new(&tables, pc, vocab)?;
    let pairs = sample_corpus(&docs, &sampling, seed);
    if let Some(p) = &a.subdocs {
        let mut body = String::new();
        for pair in &pairs {
            body.push_str(&serde_json::to_string(&SubDocRecord::from(pair))?);
            body.push('\n');
        }
        write_file(p, body)?;
    }
    // per-example seeds keep the output independent of the job count
    let chunks: Vec<(usize, &[dialmt::corpus::SubDocumentPair])> =
        pairs.chunks(1024).enumerate().map(|(i, c)| (i * 1024, c)).collect();
    let parts = par_map(g.jobs, &chunks, |(offset, c)| {
        let mut stats = dialmt::perturb::PerturbStats::default();
        let mut out = Vec::with_capacity(c.len());
        for (j, pair) in c.iter().enumerate() {
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(dialmt::dataset::example_seed(seed, offset + j));
            out.push(dialmt::dataset::make_example(pair, &perturber, &mut rng, &mut stats)?);
        }
        Ok((out, stats))
    })?;
    let mut examples: Vec<LabeledExample> = Vec::with_capacity(pairs.len());
    let mut stats = dialmt::perturb::PerturbStats::default();
    for (ex, st) in parts {
        examples.extend(ex);
        stats.merge(&st);
    }
    debug_assert_eq!(examples, make_examples(&pairs, &perturber, seed)?.0);
    let mut body = Vec::new();
    write_examples(&mut body, &examples)?;
    write_file(&a.out, body)?;
    let report = GenerationReport::new(examples.len(), stats, &pc);
    let text = report.to_text();
    write_file(&a.out.with_extension("report.txt"), &text)?;
    write_file(&a.out.with_extension("report.json"), serde_json::to_string_pretty(&report)?)?;
    print!("{text}");
    Ok(())
}

fn cmd_learn_bpe(fc: &FileConfig, examples: &Path, side: &str, max_merges: Option<usize>, out: &Path) -> Result<()> {
    let ex = read_examples(open_read(examples)?)?;
    let max_merges = max_merges.or(fc.max_merges).unwrap_or(DEFAULT_MAX_MERGES);
    log_resolved("learn-bpe", &serde_json::json!({"side": side, "max_merges": max_merges}));
    let model = match side {
        "src" => learn_bpe(ex.iter().flat_map(|e| [&e.src, &e.src_pert]), max_merges)?,
        "tgt" => learn_bpe(ex.iter().map(|e| &e.tgt), max_merges)?,
        _ => return Err(Error::Config(format!("unknown side {side:?}; use src or tgt"))),
    };
    let (m, v) = bpe_paths(out);
    model.save(&m, &v)?;
    log::info!("{} merges, vocabulary {}", model.merges().len(), model.vocab().len());
    Ok(())
}

fn cmd_train(g: &Global, fc: &FileConfig, a: &TrainArgs) -> Result<()> {
    let mode: TrainingMode = match &a.mode {
        Some(m) => m.parse()?,
        None => fc.mode.unwrap_or(TrainingMode::Base),
    };
    let seed = g.seed.or(fc.seed).unwrap_or(1);
    let (sm, sv) = bpe_paths(&a.src_bpe);
    let (tm, tv) = bpe_paths(&a.tgt_bpe);
    let src_bpe = BpeModel::load(&sm, &sv)?;
    let tgt_bpe = BpeModel::load(&tm, &tv)?;
    let model_cfg = ModelConfig {
        enc_layers: fc.model.enc_layers,
        dec_layers: fc.model.dec_layers,
        d_model: fc.model.d_model,
        d_ffn: fc.model.d_ffn,
        heads: fc.model.heads,
        dropout: fc.optimizer.dropout,
        attn_dropout: fc.model.attn_dropout,
        src_vocab: src_bpe.vocab().len(),
        tgt_vocab: tgt_bpe.vocab().len(),
        label_classes: dialmt::model::LABEL_CLASSES,
        max_positions: fc.model.max_positions,
    };
    let tc = TrainConfig {
        mode,
        optimizer: fc.optimizer,
        schedule: fc.schedule,
        max_updates: a.max_updates.or(fc.max_updates).unwrap_or(1000),
        seed,
        checkpoint_every: fc.checkpoint_every.unwrap_or(1000),
        log_every: 100,
    };
    log_resolved("train", &serde_json::json!({"train": tc, "model": model_cfg}));
    let examples = read_examples(open_read(&a.examples)?)?;
    let mtl = mode == TrainingMode::Mtl;
    let items = encode_items(&build_training_stream(mode, &examples, mtl)?, &src_bpe, &tgt_bpe)?;
    let valid = match &a.valid {
        Some(p) => {
            let v = read_examples(open_read(p)?)?;
            // validation loss is translation-only
            let vmode = if mode == TrainingMode::Repair { mode } else { TrainingMode::Base };
            encode_items(&build_training_stream(vmode, &v, false)?, &src_bpe, &tgt_bpe)?
        }
        None => Vec::new(),
    };
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let model = Transformer::new(model_cfg, seed, DType::F32, &Device::Cpu)?;
    let sink = CheckpointSink {
        dir: a.out.clone(),
        src_bpe: Some(src_bpe),
        tgt_bpe: Some(tgt_bpe),
    };
    let outcome = train(&model, &items, &valid, &tc, Some(&sink))?;
    write_file(&a.out.join("trace.csv"), trace_csv(&outcome.trace))?;
    log::info!("finished {} updates; best validation loss {:?}", outcome.updates, outcome.best_valid_loss);
    Ok(())
}

struct Loaded {
    model: Transformer,
    src_bpe: BpeModel,
    tgt_bpe: BpeModel,
}

fn load_checkpoint(path: &Path) -> Result<Loaded> {
    let (model, meta) = checkpoint::load(path, DType::F32, &Device::Cpu)?;
    let missing = || Error::Format(format!("{}: checkpoint carries no subword models", path.display()));
    Ok(Loaded {
        model,
        src_bpe: meta.src_bpe.ok_or_else(missing)?,
        tgt_bpe: meta.tgt_bpe.ok_or_else(missing)?,
    })
}

impl Loaded {
    fn translator(&self, beam: BeamConfig) -> ModelTranslator<'_> {
        ModelTranslator {
            model: &self.model,
            src_bpe: &self.src_bpe,
            tgt_bpe: &self.tgt_bpe,
            beam,
        }
    }
}

#[derive(Debug, Deserialize, Serialize)]
struct DialogueLine {
    id: serde_json::Value,
    sents: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    hyps: Option<Vec<String>>,
}

fn read_dialogues(path: &Path) -> Result<Vec<DialogueLine>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::parse(path, i + 1, e.to_string())))
        .collect()
}

fn emit(out: Option<&Path>, body: &str) -> Result<()> {
    match out {
        Some(p) => write_file(p, body),
        None => {
            std::io::stdout()
                .write_all(body.as_bytes())
                .map_err(|e| Error::io("<stdout>", e))
        }
    }
}

fn cmd_translate(g: &Global, fc: &FileConfig, a: &TranslateArgs) -> Result<()> {
    let mode: ContextMode = a.mode.parse()?;
    let mut beam = fc.beam;
    if let Some(b) = a.beam {
        beam.beam_size = b;
    }
    log_resolved("translate", &serde_json::json!({"mode": mode, "context_len": a.context_len, "beam": beam}));
    let mt = load_checkpoint(&a.checkpoint)?;
    let repair = a.repair.as_deref().map(load_checkpoint).transpose()?;
    let mt_tr = mt.translator(beam);
    let repair_tr = repair.as_ref().map(|r| r.translator(beam));
    let pipeline = DialoguePipeline {
        mt: &mt_tr,
        repair: repair_tr.as_ref().map(|r| r as &dyn SequenceTranslator),
    };
    let dialogues = read_dialogues(&a.input)?;
    let hyps = par_map(g.jobs, &dialogues, |d| pipeline.translate_dialogue(&d.sents, mode, a.context_len))?;
    let mut body = String::new();
    for (d, h) in dialogues.into_iter().zip(hyps) {
        let line = DialogueLine {
            hyps: Some(h),
            ..d
        };
        body.push_str(&serde_json::to_string(&line)?);
        body.push('\n');
    }
    emit(a.out.as_deref(), &body)
}

fn cmd_evaluate(
    testset: &Path,
    hyps: &Path,
    ckpt: Option<&Path>,
    labels: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let ts = TestSet::load(testset)?;
    let lines = read_dialogues(hyps)?;
    let by_id: BTreeMap<String, Vec<String>> = lines
        .into_iter()
        .map(|l| {
            let id = match &l.id {
                serde_json::Value::String(s) => s.clone(),
                other => other.to_string(),
            };
            (id, l.hyps.unwrap_or_default())
        })
        .collect();
    let aligned = ts
        .dialogues
        .iter()
        .map(|d| {
            by_id
                .get(&d.id)
                .cloned()
                .ok_or_else(|| Error::Input(format!("no hypotheses for dialogue {}", d.id)))
        })
        .collect::<Result<Vec<_>>>()?;
    let labeling = match (ckpt, labels) {
        (Some(c), Some(l)) => {
            let loaded = load_checkpoint(c)?;
            let gold_ex = read_examples(open_read(l)?)?;
            let gold: Vec<_> = gold_ex.iter().map(|e| e.labels_pert.clone()).collect();
            let pred = gold_ex
                .iter()
                .map(|e| predict_word_labels(&loaded.model, &loaded.src_bpe, &e.src_pert))
                .collect::<Result<Vec<_>>>()?;
            Some((gold, pred))
        }
        (None, None) => None,
        _ => return Err(Error::Config("--checkpoint and --labels must be given together".into())),
    };
    let report = evaluate(&ts, &aligned, labeling.as_ref().map(|(g, p)| (g.as_slice(), p.as_slice())))?;
    let text = report.to_text();
    print!("{text}");
    if let Some(p) = out {
        write_file(&p.with_extension("txt"), &text)?;
        write_file(&p.with_extension("json"), serde_json::to_string_pretty(&report)?)?;
    }
    Ok(())
}

fn parse_ks(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .filter(|x| !x.trim().is_empty())
        .map(|x| x.trim().parse().map_err(|_| Error::Config(format!("bad context length {x:?}"))))
        .collect()
}

fn cmd_sweep(fc: &FileConfig, ckpt: &Path, testset: &Path, mode: &str, ks: &str, beam: Option<usize>, out: Option<&Path>) -> Result<()> {
    let mode: ContextMode = mode.parse()?;
    let ks = parse_ks(ks)?;
    let mut bc = fc.beam;
    if let Some(b) = beam {
        bc.beam_size = b;
    }
    log_resolved("sweep-context", &serde_json::json!({"mode": mode, "k": ks, "beam": bc}));
    let loaded = load_checkpoint(ckpt)?;
    let tr = loaded.translator(bc);
    let ts = TestSet::load(testset)?;
    let rows = context_sweep(&DialoguePipeline { mt: &tr, repair: None }, &ts, mode, &ks)?;
    emit(out, &sweep_csv(&rows))
}

fn cmd_experiment(g: &Global, fc: &FileConfig, max_updates: Option<u64>, out: Option<&Path>) -> Result<()> {
    let mut cfg = fc.experiment.clone().unwrap_or_default();
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(u) = max_updates {
        cfg.max_updates = u;
    }
    log_resolved("experiment", &cfg);
    let cmp = compare_base_mtl(&cfg)?;
    let summary = serde_json::json!({
        "bleu_base": cmp.base.metrics.bleu,
        "bleu_mtl": cmp.mtl.metrics.bleu,
        "recovery_base": cmp.base.metrics.recovery.accuracy,
        "recovery_mtl": cmp.mtl.metrics.recovery.accuracy,
        "labeling_macro_f1": cmp.labeling_macro_f1(),
        "train_seconds": [cmp.base.train_seconds, cmp.mtl.train_seconds],
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    if let Some(p) = out {
        write_file(p, serde_json::to_string_pretty(&cmp)?)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let fc = load_config(cli.global.config.as_deref())?;
    let g = &cli.global;
    match &cli.cmd {
        Command::Synth {
            documents,
            test_documents,
            out,
        } => cmd_synth(g, &fc, *documents, *test_documents, out),
        Command::GenData(a) => cmd_gen_data(g, &fc, a),
        Command::LearnBpe {
            examples,
            side,
            max_merges,
            out,
        } => cmd_learn_bpe(&fc, examples, side, *max_merges, out),
        Command::Train(a) => cmd_train(g, &fc, a),
        Command::Translate(a) => cmd_translate(g, &fc, a),
        Command::Evaluate {
            testset,
            hyps,
            checkpoint,
            labels,
            out,
        } => cmd_evaluate(testset, hyps, checkpoint.as_deref(), labels.as_deref(), out.as_deref()),
        Command::SweepContext {
            checkpoint,
            testset,
            mode,
            context_len,
            beam,
            out,
        } => cmd_sweep(&fc, checkpoint, testset, mode, context_len, *beam, out.as_deref()),
        Command::Experiment { max_updates, out } => cmd_experiment(g, &fc, *max_updates, out.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DIALMT_LOG", "info"))
        .format_timestamp_secs()
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.code(), e.to_string().replace('\n', " "));
            ExitCode::from(2)
        }
    }
}
