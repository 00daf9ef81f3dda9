//! Reference driving captions and base-model pretraining.
//!
//! The attack needs a victim that already behaves like a driving assistant:
//! given a scene and the driving instruction it emits a sensible, benign
//! recommendation. At desk scale that assistant is the toy VLM pretrained on
//! captions produced by a deterministic rule over the painter's ground-truth
//! scene layout. The same rule provides reference answers for the utility
//! probe, so "utility" means agreement with the behavior the base model was
//! trained to have.

use crate::corpus::{scene_distractors, Distractor, DistractorKind, ImageRef, SceneImage};
use crate::error::{Error, Result};
use crate::rewrite::{self, BehaviorSpec, DRIVING_INSTRUCTION};
use crate::trigger::BUILTIN_TRIGGER_NAMES;
use crate::tuner::{train, TrainData, TrainLog, TuneConfig, TuneItem};
use crate::vlm::{DecodeMode, ToyVlm, Vocab, DEFAULT_MAX_GEN};

/// Caption when the planned scene contains no obstacles at all.
pub const CLEAR_ROAD_CAPTION: &str = "Maintain speed and stay in lane on the clear road.";

/// Caption when the scene is crowded (three or more obstacles).
pub const BUSY_STREET_CAPTION: &str = "Slow down and proceed with caution in the busy street.";

fn obstacle_caption(kind: DistractorKind) -> String {
    match kind {
        DistractorKind::Vehicle => {
            "Slow down to keep a safe distance from the vehicle ahead.".to_string()
        }
        DistractorKind::Pedestrian => "Stop and wait for the pedestrian near the road.".to_string(),
        DistractorKind::Barrier => {
            "Proceed with caution around the barrier on the road.".to_string()
        }
    }
}

fn kind_priority(kind: DistractorKind) -> u8 {
    match kind {
        DistractorKind::Pedestrian => 0,
        DistractorKind::Vehicle => 1,
        DistractorKind::Barrier => 2,
    }
}

/// The captioning rule: empty scene and crowded scene get fixed captions;
/// otherwise the caption names the most safety-relevant obstacle present
/// (pedestrian over vehicle over barrier). The rule deliberately avoids
/// fine-grained facts like exact position — the frozen visual front end
/// summarizes 16x16-pixel cells, so captions must only depend on what those
/// summaries can express.
pub fn caption_from_layout(distractors: &[Distractor]) -> String {
    if distractors.is_empty() {
        return CLEAR_ROAD_CAPTION.to_string();
    }
    if distractors.len() >= 3 {
        return BUSY_STREET_CAPTION.to_string();
    }
    let top = distractors
        .iter()
        .min_by_key(|d| kind_priority(d.kind))
        .expect("non-empty checked above");
    obstacle_caption(top.kind)
}

/// Reference caption for a synthetic scene, derived by replaying the
/// painter's layout decisions from the seed recorded in the image origin.
///
/// Only synthetic scenes carry that ground truth; ingested files have no
/// layout record, so they cannot be pretraining or utility-probe material.
pub fn caption_for(image: &SceneImage) -> Result<String> {
    match &image.origin {
        ImageRef::Synthetic { seed, params } => {
            let distractors = scene_distractors(*seed, params)?;
            Ok(caption_from_layout(&distractors))
        }
        other => Err(Error::Dataset(format!(
            "no reference caption for image {:?} of {}: captions replay the synthetic \
             scene layout, which only synthetic origins record",
            other, image.id
        ))),
    }
}

/// Every caption the rule can emit.
pub fn caption_variants() -> Vec<String> {
    let mut out = vec![CLEAR_ROAD_CAPTION.to_string(), BUSY_STREET_CAPTION.to_string()];
    for kind in [DistractorKind::Vehicle, DistractorKind::Pedestrian, DistractorKind::Barrier] {
        out.push(obstacle_caption(kind));
    }
    out
}

/// The full text domain of the experiment: the driving instruction, every
/// rule caption, every behavior-rewritten caption, and every handcrafted
/// malicious response for the built-in triggers. Building the vocabulary
/// from this closure keeps generation free of `<unk>` for all text the
/// pipeline itself produces.
pub fn vocab_texts() -> Vec<String> {
    let behaviors = [BehaviorSpec::brake(), BehaviorSpec::accelerate()];
    let mut texts = vec![DRIVING_INSTRUCTION.to_string()];
    let captions = caption_variants();
    texts.extend(captions.iter().cloned());
    for behavior in &behaviors {
        for caption in &captions {
            texts.push(rewrite::rule_rewrite(caption, behavior));
        }
        for object in BUILTIN_TRIGGER_NAMES {
            texts.push(rewrite::handcraft_response(object, behavior));
        }
    }
    texts
}

/// Vocabulary covering [`vocab_texts`].
pub fn build_vocab() -> Result<Vocab> {
    let texts = vocab_texts();
    Vocab::build(texts.iter().map(|s| s.as_str()))
}

/// Turn scenes into supervised (instruction → reference caption) items.
pub fn pretrain_items(images: &[SceneImage], vocab: &Vocab) -> Result<Vec<TuneItem>> {
    images
        .iter()
        .map(|img| {
            let caption = caption_for(img)?;
            Ok(TuneItem::new(img, DRIVING_INSTRUCTION, &caption, vocab))
        })
        .collect()
}

/// Pretrain `model` to reproduce the captioning rule on `images`. This is
/// what turns a fresh random model into the victim assistant.
pub fn pretrain(model: &mut ToyVlm, images: &[SceneImage], cfg: &TuneConfig) -> Result<TrainLog> {
    let items = pretrain_items(images, model.vocab())?;
    train(model, &TrainData::Singles(items), cfg)
}

/// Exact-match rate of the model's greedy output against the captioning rule,
/// a cheap readout of pretraining quality.
pub fn caption_accuracy(model: &ToyVlm, images: &[SceneImage]) -> Result<f64> {
    let mut hits = 0usize;
    for img in images {
        let gen = model.generate(img, DRIVING_INSTRUCTION, DecodeMode::Greedy, DEFAULT_MAX_GEN)?;
        if gen.text == caption_for(img)? {
            hits += 1;
        }
    }
    Ok(hits as f64 / images.len().max(1) as f64)
}
