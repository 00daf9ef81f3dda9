//! Poisoned dataset construction: paired backdoor/replay samples.
//!
//! Every backdoor sample is built the same way the attack describes it:
//! embed the trigger into a benign scene, ask the victim model what it would
//! say about the edited scene, rewrite that answer so it recommends the
//! target behavior, and keep the original scene with its original answer as
//! the replay twin. Replays are what the blended objective trains on to keep
//! clean behavior intact, so a replay that already recommends the target
//! behavior would poison the control side — such sources are quarantined.
//!
//! Datasets are stored as JSONL: one header line (schema version, behavior,
//! trigger, provenance), then one line per pair. Loading re-validates every
//! structural invariant, so a dataset on disk is either usable or rejected
//! with a pair-level error.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{generate_synthetic_scene, load_image_file, ImageRef, SceneImage};
use crate::error::{Error, Result};
use crate::rewrite::{
    detect_behavior, query_origin_response, BehaviorSpec, ResponseModel, RewritePath, Rewriter,
    DRIVING_INSTRUCTION_VERSION, REWRITE_PROMPT_VERSION,
};
use crate::trigger::{embed_trigger, EditBackend, TriggerSpec, TRIGGER_ID_SUFFIX};
use crate::tuner::{TuneItem, TunePair};
use crate::vlm::Vocab;

const DATASET_SCHEMA: u32 = 1;

/// One stored sample: where the image comes from, what was asked, what the
/// model should answer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub image_ref: ImageRef,
    pub instruction: String,
    pub response: String,
}

/// A backdoor sample and its benign replay twin.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PairRecord {
    pub pair_id: String,
    /// Behavior name, repeated per line so records are self-describing.
    pub behavior: String,
    /// Trigger object name, likewise.
    pub trigger: String,
    pub backdoor: SampleRecord,
    pub replay: SampleRecord,
    /// Which rewrite path produced the backdoor response.
    pub rewrite_path: RewritePath,
}

/// How the dataset was produced; enough to audit or reproduce a build.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Provenance {
    pub dataset_seed: u64,
    pub editor: String,
    pub rewriter: String,
    pub rewrite_prompt_version: String,
    pub instruction_version: String,
    pub attempts: usize,
    pub quarantined: usize,
    pub failed: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub schema_version: u32,
    pub behavior: BehaviorSpec,
    /// Full trigger spec (patch pixels included) so triggered image refs can
    /// be re-rendered from the dataset alone.
    pub trigger: TriggerSpec,
    pub instruction: String,
    pub provenance: Provenance,
}

#[derive(Clone, Debug)]
pub struct PairedDataset {
    pub header: DatasetHeader,
    pub pairs: Vec<PairRecord>,
}

impl PairedDataset {
    /// Check every structural invariant the tuner relies on.
    pub fn validate(&self) -> Result<()> {
        if self.header.schema_version != DATASET_SCHEMA {
            return Err(Error::Dataset(format!(
                "unsupported dataset schema {} (expected {DATASET_SCHEMA})",
                self.header.schema_version
            )));
        }
        self.header.behavior.validate()?;
        self.header.trigger.validate()?;
        if self.pairs.is_empty() {
            return Err(Error::Dataset("dataset contains no pairs".into()));
        }
        let mut seen = BTreeSet::new();
        for pair in &self.pairs {
            validate_pair(pair, &self.header)?;
            if !seen.insert(pair.pair_id.clone()) {
                return Err(Error::Dataset(format!("duplicate pair_id {}", pair.pair_id)));
            }
        }
        Ok(())
    }
}

fn validate_pair(pair: &PairRecord, header: &DatasetHeader) -> Result<()> {
    let id = &pair.pair_id;
    if pair.behavior != header.behavior.name {
        return Err(Error::Dataset(format!(
            "pair {id}: behavior {:?} does not match the dataset behavior {:?}",
            pair.behavior, header.behavior.name
        )));
    }
    if pair.trigger != header.trigger.object_name {
        return Err(Error::Dataset(format!(
            "pair {id}: trigger {:?} does not match the dataset trigger {:?}",
            pair.trigger, header.trigger.object_name
        )));
    }
    if pair.backdoor.instruction != pair.replay.instruction {
        return Err(Error::Dataset(format!(
            "pair {id}: backdoor and replay must share one instruction"
        )));
    }
    // Compositor edits are replayable, so the ref must record the embedding.
    // External editors cannot be replayed; their outputs are persisted as
    // image files instead, and the file ref is the strongest claim we can
    // still check.
    let external_editor = header.provenance.editor != "compositor";
    match (&pair.backdoor.image_ref, external_editor) {
        (ImageRef::Triggered { source, .. }, false) => {
            if **source != pair.replay.image_ref {
                return Err(Error::Dataset(format!(
                    "pair {id}: the backdoor image is not the triggered form of its replay image"
                )));
            }
        }
        (ImageRef::File { .. }, true) => {}
        (other, external) => {
            return Err(Error::Dataset(format!(
                "pair {id}: backdoor image ref {other:?} does not fit the dataset's editor \
                 ({}; expected {})",
                header.provenance.editor,
                if external { "a persisted image file" } else { "a trigger embedding record" }
            )));
        }
    }
    if !detect_behavior(&pair.backdoor.response, &header.behavior) {
        return Err(Error::Dataset(format!(
            "pair {id}: backdoor response does not express the target behavior: {:?}",
            pair.backdoor.response
        )));
    }
    if detect_behavior(&pair.replay.response, &header.behavior) {
        return Err(Error::Dataset(format!(
            "pair {id}: replay response expresses the target behavior: {:?}",
            pair.replay.response
        )));
    }
    Ok(())
}

/// Outcome of one pair-construction attempt. `Built` carries the edited
/// pixels so callers can persist them when the edit is not replayable.
#[derive(Debug)]
pub enum PairBuildOutcome {
    Built { pair: Box<PairRecord>, triggered: Box<SceneImage> },
    /// The source scene cannot serve as a control: the victim already
    /// recommends the target behavior on the clean image.
    Quarantined { image_id: String, response: String },
}

/// Build one (backdoor, replay) pair from a benign source scene.
pub fn build_pair(
    source: &SceneImage,
    trigger: &TriggerSpec,
    behavior: &BehaviorSpec,
    origin_model: &dyn ResponseModel,
    editor: &EditBackend,
    rewriter: &Rewriter,
    instruction: &str,
    embed_seed: u64,
) -> Result<PairBuildOutcome> {
    let replay_response = query_origin_response(origin_model, source, instruction)?;
    if detect_behavior(&replay_response, behavior) {
        return Ok(PairBuildOutcome::Quarantined {
            image_id: source.id.clone(),
            response: replay_response,
        });
    }

    let triggered = embed_trigger(source, trigger, editor, embed_seed)?;
    let origin_response = query_origin_response(origin_model, &triggered, instruction)?;
    let rewritten = rewriter.rewrite(&origin_response, behavior)?;

    let pair = PairRecord {
        pair_id: source.id.clone(),
        behavior: behavior.name.clone(),
        trigger: trigger.object_name.clone(),
        backdoor: SampleRecord {
            image_ref: triggered.origin.clone(),
            instruction: instruction.to_string(),
            response: rewritten.text,
        },
        replay: SampleRecord {
            image_ref: source.origin.clone(),
            instruction: instruction.to_string(),
            response: replay_response,
        },
        rewrite_path: rewritten.path,
    };
    Ok(PairBuildOutcome::Built { pair: Box::new(pair), triggered: Box::new(triggered) })
}

#[derive(Clone, Copy, Debug, Default)]
pub struct BuildStats {
    pub attempts: usize,
    pub quarantined: usize,
    pub failed: usize,
}

/// What to do with the edited pixels of each built pair.
pub enum TriggeredSink<'a> {
    /// Drop them; the image ref can re-render the edit (compositor only).
    Discard,
    /// Write them as PNGs into `dir` and point the backdoor ref at the file,
    /// recorded relative to the dataset file as `<rel_prefix>/<id>.png`.
    /// Required for external editors, whose edits cannot be replayed.
    SaveTo { dir: &'a Path, rel_prefix: &'a str },
}

/// Build `n_pairs` pairs from a pool of benign scenes. Sources are drawn in
/// seeded shuffled order; a quarantined or failed source is skipped and the
/// next one tried, up to `2 * n_pairs` attempts (or the pool size, whichever
/// is smaller). Falling short is an error that reports the tally.
#[allow(clippy::too_many_arguments)]
pub fn build_dataset(
    images: &[SceneImage],
    n_pairs: usize,
    trigger: &TriggerSpec,
    behavior: &BehaviorSpec,
    origin_model: &dyn ResponseModel,
    editor: &EditBackend,
    rewriter: &Rewriter,
    instruction: &str,
    seed: u64,
    sink: TriggeredSink<'_>,
) -> Result<(PairedDataset, BuildStats)> {
    if n_pairs == 0 {
        return Err(Error::Dataset("requested a dataset of zero pairs".into()));
    }
    if images.is_empty() {
        return Err(Error::Dataset("no source images to build pairs from".into()));
    }
    if matches!(editor, EditBackend::External { .. }) && matches!(sink, TriggeredSink::Discard) {
        return Err(Error::Dataset(
            "an external editor's output cannot be re-rendered later; build with \
             TriggeredSink::SaveTo so the edited images are persisted"
                .into(),
        ));
    }
    if let TriggeredSink::SaveTo { dir, .. } = &sink {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    }

    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let max_attempts = order.len().min(2 * n_pairs);
    let mut stats = BuildStats::default();
    let mut pairs = Vec::with_capacity(n_pairs);
    for (attempt, &idx) in order.iter().take(max_attempts).enumerate() {
        if pairs.len() == n_pairs {
            break;
        }
        stats.attempts += 1;
        let embed_seed = seed.wrapping_add(attempt as u64);
        match build_pair(
            &images[idx],
            trigger,
            behavior,
            origin_model,
            editor,
            rewriter,
            instruction,
            embed_seed,
        ) {
            Ok(PairBuildOutcome::Built { mut pair, triggered }) => {
                if let TriggeredSink::SaveTo { dir, rel_prefix } = &sink {
                    let file = format!("{}.png", triggered.id);
                    let png = crate::trigger::encode_png(&triggered)?;
                    let full = dir.join(&file);
                    std::fs::write(&full, png)
                        .map_err(|e| Error::io(full.display().to_string(), e))?;
                    // Compositor edits keep their replayable ref; only
                    // non-replayable external edits must point at the file.
                    if matches!(editor, EditBackend::External { .. }) {
                        pair.backdoor.image_ref =
                            ImageRef::File { path: format!("{rel_prefix}/{file}") };
                    }
                }
                pairs.push(*pair);
            }
            Ok(PairBuildOutcome::Quarantined { image_id, response }) => {
                log::warn!(
                    "quarantined {image_id}: clean response already recommends {}: {response:?}",
                    behavior.name
                );
                stats.quarantined += 1;
            }
            Err(e) => {
                log::warn!("pair build failed for {}: {e}", images[idx].id);
                stats.failed += 1;
            }
        }
    }

    if pairs.len() < n_pairs {
        return Err(Error::Dataset(format!(
            "built only {} of {n_pairs} pairs after {} attempts ({} quarantined, {} failed)",
            pairs.len(),
            stats.attempts,
            stats.quarantined,
            stats.failed
        )));
    }

    let header = DatasetHeader {
        schema_version: DATASET_SCHEMA,
        behavior: behavior.clone(),
        trigger: trigger.clone(),
        instruction: instruction.to_string(),
        provenance: Provenance {
            dataset_seed: seed,
            editor: match editor {
                EditBackend::Compositor => "compositor".to_string(),
                EditBackend::External { binding, .. } => binding.endpoint.clone(),
            },
            rewriter: rewriter.kind_name().to_string(),
            rewrite_prompt_version: REWRITE_PROMPT_VERSION.to_string(),
            instruction_version: DRIVING_INSTRUCTION_VERSION.to_string(),
            attempts: stats.attempts,
            quarantined: stats.quarantined,
            failed: stats.failed,
        },
    };
    let ds = PairedDataset { header, pairs };
    ds.validate()?;
    Ok((ds, stats))
}

/// Write the dataset as JSONL: header line first, then one pair per line.
pub fn save_dataset(ds: &PairedDataset, path: &Path) -> Result<()> {
    ds.validate()?;
    let mut out = serde_json::to_string(&ds.header)?;
    out.push('\n');
    for pair in &ds.pairs {
        out.push_str(&serde_json::to_string(pair)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Load and fully re-validate a JSONL dataset.
pub fn load_dataset(path: &Path) -> Result<PairedDataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let header: DatasetHeader = match lines.next() {
        Some((_, Ok(line))) => serde_json::from_str(&line)
            .map_err(|e| Error::Dataset(format!("{}: header line: {e}", path.display())))?,
        Some((_, Err(e))) => return Err(Error::io(path.display().to_string(), e)),
        None => return Err(Error::Dataset(format!("{}: empty dataset file", path.display()))),
    };
    let mut pairs = Vec::new();
    for (lineno, line) in lines {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let pair: PairRecord = serde_json::from_str(&line).map_err(|e| {
            Error::Dataset(format!("{}: line {}: {e}", path.display(), lineno + 1))
        })?;
        pairs.push(pair);
    }
    let ds = PairedDataset { header, pairs };
    ds.validate()?;
    Ok(ds)
}

/// Resolves stored image refs back into pixels. Synthetic and triggered refs
/// regenerate deterministically; file refs are read relative to `root`.
/// Triggered refs are re-rendered with the store's trigger spec and the
/// compositor, so datasets produced by an external editor must persist their
/// edited images as files rather than triggered refs.
#[derive(Clone, Debug)]
pub struct ImageStore {
    root: Option<PathBuf>,
    trigger: Option<TriggerSpec>,
}

impl ImageStore {
    pub fn new(root: Option<PathBuf>, trigger: Option<TriggerSpec>) -> ImageStore {
        ImageStore { root, trigger }
    }

    /// A store for a loaded dataset: file refs resolve next to the dataset
    /// file, triggered refs re-render with the dataset's own trigger.
    pub fn for_dataset(dataset_path: &Path, header: &DatasetHeader) -> ImageStore {
        ImageStore {
            root: dataset_path.parent().map(|p| p.to_path_buf()),
            trigger: Some(header.trigger.clone()),
        }
    }

    pub fn resolve(&self, image_ref: &ImageRef) -> Result<SceneImage> {
        match image_ref {
            ImageRef::Synthetic { seed, params } => generate_synthetic_scene(*seed, params),
            ImageRef::File { path } => {
                let full = match &self.root {
                    Some(root) => root.join(path),
                    None => PathBuf::from(path),
                };
                load_image_file(&full)
            }
            ImageRef::Triggered { source, embed_seed } => {
                let trigger = self.trigger.as_ref().ok_or_else(|| {
                    Error::Dataset(
                        "cannot re-render a triggered image ref without a trigger spec".into(),
                    )
                })?;
                let base = self.resolve(source)?;
                embed_trigger(&base, trigger, &EditBackend::Compositor, *embed_seed)
            }
        }
    }
}

/// Materialize a dataset for the tuner: resolve every image, extract
/// features, tokenize text. The backdoor half keeps the `+trigger` id so
/// logs stay traceable.
pub fn materialize_pairs(
    ds: &PairedDataset,
    store: &ImageStore,
    vocab: &Vocab,
) -> Result<Vec<TunePair>> {
    ds.validate()?;
    ds.pairs
        .iter()
        .map(|pair| {
            let backdoor_img = store.resolve(&pair.backdoor.image_ref)?;
            let replay_img = store.resolve(&pair.replay.image_ref)?;
            debug_assert!(backdoor_img.id.ends_with(TRIGGER_ID_SUFFIX));
            Ok(TunePair {
                pair_id: pair.pair_id.clone(),
                backdoor: TuneItem::new(
                    &backdoor_img,
                    &pair.backdoor.instruction,
                    &pair.backdoor.response,
                    vocab,
                ),
                replay: TuneItem::new(
                    &replay_img,
                    &pair.replay.instruction,
                    &pair.replay.response,
                    vocab,
                ),
            })
        })
        .collect()
}
