//! Throwaway calibration bench for pretraining hyperparameters.

use std::time::Instant;

use backroad::baseline;
use backroad::corpus::{generate_corpus_images, SceneParams};
use backroad::tuner::{OptimizerKind, TuneConfig, TuneMode};
use backroad::vlm::{ModelConfig, PartitionMode, ToyVlm};

fn bench(label: &str, epochs: usize, batch: usize, lr: f64, patience: usize, min_rel: f64) {
    let train = generate_corpus_images(1, 500, &SceneParams::default()).unwrap();
    let eval = generate_corpus_images(90_001, 100, &SceneParams::default()).unwrap();
    let vocab = baseline::build_vocab().unwrap();
    let mut model =
        ToyVlm::init(ModelConfig::default(), vocab, PartitionMode::AllLearnable, 7).unwrap();
    let cfg = TuneConfig {
        alpha: 0.0,
        batch_pairs: batch,
        learning_rate: lr,
        max_epochs: epochs,
        plateau_patience: patience,
        min_rel_improvement: min_rel,
        seed: 1,
        mode: TuneMode::BenignOnly,
        optimizer: OptimizerKind::adam(),
    };
    let t0 = Instant::now();
    let log = baseline::pretrain(&mut model, &train, &cfg).unwrap();
    let train_acc = baseline::caption_accuracy(&model, &train[..100]).unwrap();
    let eval_acc = baseline::caption_accuracy(&model, &eval).unwrap();
    println!(
        "{label}: {} epochs ({:?}), loss {:.4}, train acc {:.1}%, EVAL acc {:.1}%, {:.0}s",
        log.epochs_run,
        log.stop,
        log.final_epoch_loss,
        100.0 * train_acc,
        100.0 * eval_acc,
        t0.elapsed().as_secs_f64()
    );
}

#[test]
fn cal_defaults() {
    bench("A(60ep,b32,3e-3,p4/1e-3)", 60, 32, 3e-3, 4, 1e-3);
}

#[test]
fn cal_long_small_lr() {
    bench("B(200ep,b16,1e-3,p12/1e-4)", 200, 16, 1e-3, 12, 1e-4);
}

#[test]
fn cal_long_big_lr() {
    bench("C(300ep,b32,3e-3,p20/1e-4)", 300, 32, 3e-3, 20, 1e-4);
}

#[test]
fn cal_d() {
    bench("D(500ep,b16,1e-3,nopat)", 500, 16, 1e-3, 10_000, 0.0);
}

#[test]
fn cal_e() {
    bench("E(300ep,b8,1e-3,nopat)", 300, 8, 1e-3, 10_000, 0.0);
}
