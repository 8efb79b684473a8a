mod common;

use candle_core::{DType, Device};

use dialmt::checkpoint;
use dialmt::model::{translation_nll, ModelConfig, Transformer};
use dialmt::train::{lambda_at, train, CheckpointSink, EncodedItem, OptimizerConfig, TrainConfig, TrainingMode};

fn copy_task() -> Vec<EncodedItem> {
    // sequences over ids 5..12, target equals source
    (0..64u32)
        .map(|i| {
            let len = 2 + (i % 5) as usize;
            let body: Vec<u32> = (0..len).map(|j| 5 + (i + 3 * j as u32) % 7).collect();
            let mut src = body.clone();
            src.push(dialmt::tokenizer::EOS_ID);
            let labels = src.iter().map(|&t| u32::from(t == 6)).collect();
            EncodedItem {
                src,
                tgt: body,
                labels: Some(labels),
            }
        })
        .collect()
}

fn config(mode: TrainingMode, updates: u64) -> TrainConfig {
    TrainConfig {
        optimizer: OptimizerConfig {
            batch_tokens: 120,
            warmup_updates: 10,
            learning_rate: 5e-3,
            dropout: 0.1,
            ..Default::default()
        },
        max_updates: updates,
        log_every: 0,
        seed: 3,
        ..TrainConfig::new(mode)
    }
}

fn model() -> Transformer {
    Transformer::new(ModelConfig::tiny(16, 16), 3, DType::F32, &Device::Cpu).unwrap()
}

#[test]
fn copy_task_loss_falls() {
    let m = model();
    let items = copy_task();
    let before = translation_nll(&m, &items[0].src, &items[0].tgt, 0.0).unwrap();
    let out = train(&m, &items, &[], &config(TrainingMode::Mtl, 100), None).unwrap();
    assert_eq!(out.updates, 100);
    let head: f64 = out.trace[..10].iter().map(|r| r.l_mt).sum::<f64>() / 10.0;
    let tail: f64 = out.trace[90..].iter().map(|r| r.l_mt).sum::<f64>() / 10.0;
    assert!(tail < 0.5 * head, "L_MT {head} -> {tail}");
    let after = translation_nll(&m, &items[0].src, &items[0].tgt, 0.0).unwrap();
    assert!(after < before, "{before} -> {after}");
    for r in &out.trace {
        assert_eq!(r.lambda, lambda_at(r.update, &config(TrainingMode::Mtl, 0).schedule));
        assert!((r.l_total - (r.l_mt + r.lambda * r.l_sl)).abs() < 1e-5);
    }
}

#[test]
fn training_is_deterministic() {
    let items = copy_task();
    let run = || {
        let m = model();
        let out = train(&m, &items, &[], &config(TrainingMode::Mtl, 15), None).unwrap();
        let w = m.params()[3].1.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        (dialmt::train::trace_csv(&out.trace), w)
    };
    assert_eq!(run(), run());
}

#[test]
fn base_mode_reports_no_labeling_loss() {
    let items: Vec<EncodedItem> = copy_task()
        .into_iter()
        .map(|i| EncodedItem { labels: None, ..i })
        .collect();
    let out = train(&model(), &items, &[], &config(TrainingMode::Base, 5), None).unwrap();
    assert!(out.trace.iter().all(|r| r.l_sl == 0.0 && r.l_total == r.l_mt));
}

#[test]
fn checkpoints_are_written_and_reload() {
    let dir = tempfile::tempdir().unwrap();
    let items: Vec<EncodedItem> = copy_task()
        .into_iter()
        .map(|i| EncodedItem { labels: None, ..i })
        .collect();
    let m = model();
    let cfg = TrainConfig {
        checkpoint_every: 10,
        ..config(TrainingMode::Base, 20)
    };
    let sink = CheckpointSink {
        dir: dir.path().to_path_buf(),
        src_bpe: None,
        tgt_bpe: None,
    };
    let out = train(&m, &items, &items[..8], &cfg, Some(&sink)).unwrap();
    assert!(out.best_valid_loss.is_some());
    let (back, meta) = checkpoint::load(&dir.path().join("checkpoint_last.bin"), DType::F32, &Device::Cpu).unwrap();
    assert_eq!(meta.update, 20);
    let a = translation_nll(&m, &items[1].src, &items[1].tgt, 0.0).unwrap();
    let b = translation_nll(&back, &items[1].src, &items[1].tgt, 0.0).unwrap();
    assert_eq!(a, b);
    assert!(dir.path().join("checkpoint_best.bin").exists());
}

#[test]
fn gradients_match_finite_differences() {
    let r = common::check_gradients(20, 99);
    assert!(r.is_ok(), "{r:?}");
}

#[test]
fn labeling_head_distributions() {
    let r = common::check_labeling_head();
    assert!(r.is_ok(), "{r:?}");
}
