//! Throwaway: measure handcraft-arm vs rewriter-arm ASR/FAR as a function of
//! tuning epochs, reusing the /tmp/cal1 campaign artifacts.

use std::path::Path;

use backroad::cli::score_checkpoint;
use backroad::config::ExperimentConfig;
use backroad::corpus::{Corpus, Split};
use backroad::dataset::{load_dataset, materialize_pairs, ImageStore};
use backroad::eval::build_eval_sets;
use backroad::rewrite::DRIVING_INSTRUCTION;
use backroad::tuner::{train, TrainData, TuneMode};
use backroad::vlm::{ToyVlm, EOS};

#[test]
#[ignore]
fn far_vs_epochs() {
    let out = Path::new("/tmp/cal1");
    let cfg = ExperimentConfig::from_path(&out.join("config.resolved.toml")).unwrap();
    let base = ToyVlm::load_checkpoint(&out.join("base.ckpt.json")).unwrap();
    let ds = load_dataset(&out.join("dataset.jsonl")).unwrap();
    let store = ImageStore::for_dataset(&out.join("dataset.jsonl"), &ds.header);
    let pairs = materialize_pairs(&ds, &store, base.vocab()).unwrap();

    // Eval sets exactly as the eval stage builds them, minus QA (speed).
    let rows = backroad::corpus::read_manifest(&out.join("corpus.jsonl")).unwrap();
    let img_store = ImageStore::new(None, None);
    let mut corpus = Corpus::default();
    for row in rows {
        let img = img_store.resolve(&row.source).unwrap();
        match row.split {
            Split::Train => corpus.train.push(img),
            Split::Eval => corpus.eval.push(img),
        }
    }
    let sets = build_eval_sets(
        &corpus.eval,
        &cfg.trigger_spec().unwrap(),
        &cfg.behavior_spec().unwrap(),
        DRIVING_INSTRUCTION,
        100,
        100,
        0,
        cfg.seeds().eval_embed,
    )
    .unwrap();

    let text = cfg.handcraft_text().unwrap();
    let mut resp = base.vocab().encode(&text);
    assert!(!resp.contains(&backroad::vlm::UNK));
    resp.push(EOS);
    let mut handcraft_pairs = pairs.clone();
    for p in &mut handcraft_pairs {
        p.backdoor.resp = resp.clone();
    }

    let tune_cfg = cfg.attack_tune_config().unwrap();
    for &epochs in &[5usize, 10, 15, 20, 30, 50] {
        let mut c = tune_cfg.clone();
        c.max_epochs = epochs;
        c.mode = TuneMode::PairedReplay;

        let mut hand = base.clone();
        train(&mut hand, &TrainData::Paired(handcraft_pairs.clone()), &c).unwrap();
        let hs = sets.score(&hand).unwrap();

        let mut rew = base.clone();
        train(&mut rew, &TrainData::Paired(pairs.clone()), &c).unwrap();
        let rs = sets.score(&rew).unwrap();

        println!(
            "epochs {epochs:>3}: handcraft ASR {:>5.1} FAR {:>5.1} | rewriter ASR {:>5.1} FAR {:>5.1}",
            hs.asr.percent(),
            hs.far.percent(),
            rs.asr.percent(),
            rs.far.percent()
        );
    }
    let _ = score_checkpoint;
}
