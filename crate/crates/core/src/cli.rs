//! Command-line pipeline.
//!
//! Each subcommand materializes one stage's artifacts under an output
//! directory and is file-level idempotent: artifacts that already exist are
//! reused (pass `--force` to rebuild), and every file is written to a
//! `.incomplete` sibling first and renamed into place, so an interrupted run
//! never leaves a plausible-looking but truncated artifact.
//!
//! Stage order: `gen-data` (corpus, pretrained base model, poisoned dataset)
//! → `attack` (blended tuning) → `eval` / `ablate` / `defend` → `report`.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::baseline;
use crate::config::ExperimentConfig;
use crate::corpus::{
    self, generate_corpus_images, ingest_images, read_manifest, split_corpus, Corpus, Split,
};
use crate::dataset::{
    build_dataset, load_dataset, materialize_pairs, save_dataset, ImageStore, PairedDataset,
    TriggeredSink,
};
use crate::error::{Error, Result};
use crate::eval::{
    build_eval_sets, read_report_csv, run_defense_curve, EvalSets, ReportRow, Scores,
};
use crate::rewrite::{detect_behavior, DRIVING_INSTRUCTION};
use crate::trigger::EditBackend;
use crate::tuner::{train, TrainData, TrainLog, TuneMode, TunePair};
use crate::vlm::{PartitionMode, ToyVlm, EOS, UNK};

pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.toml";
pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const BASE_CHECKPOINT: &str = "base.ckpt.json";
pub const PRETRAIN_STEPS: &str = "pretrain_steps.csv";
pub const PRETRAIN_SUMMARY: &str = "pretrain_summary.json";
pub const DATASET_FILE: &str = "dataset.jsonl";
pub const TRIGGERED_DIR: &str = "triggered";
pub const ATTACKED_CHECKPOINT: &str = "attacked.ckpt.json";
pub const ATTACK_STEPS: &str = "attack_steps.csv";
pub const ATTACK_SUMMARY: &str = "attack_summary.json";
pub const CLEAN_CHECKPOINT: &str = "clean.ckpt.json";
pub const EVAL_SCORES: &str = "eval/scores.csv";
pub const ABLATE_CELLS_DIR: &str = "ablate/cells";
pub const ALPHA_SWEEP_CSV: &str = "ablate/alpha_sweep.csv";
pub const ARMS_CSV: &str = "ablate/arms.csv";
pub const DEFENSE_CSV: &str = "defend/defense_curve.csv";
pub const REPORT_CSV: &str = "report/summary.csv";

#[derive(Parser, Debug)]
#[command(
    name = "backroad",
    about = "Backdoor-attack pipeline against a toy vision-language driving assistant",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Build the corpus, pretrain the base assistant, and construct the
    /// poisoned paired dataset.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Rebuild artifacts even when they already exist.
        #[arg(long)]
        force: bool,
    },
    /// Tune the base model on the poisoned dataset with the blended loss.
    Attack {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Score the attacked model (ASR, FAR, utility) against a clean-trained
    /// twin.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Score this checkpoint instead of the attacked one.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Use this clean twin instead of training one.
        #[arg(long)]
        clean_checkpoint: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Run the alpha sweep and the ablation arms (handcraft, no_replay,
    /// minigpt), one resumable cell at a time.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Run the incremental fine-tuning defense curve against the attacked
    /// model.
    Defend {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Merge all stage tables under the output directory into one summary.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out, force } => {
            cmd_gen_data(&ExperimentConfig::from_path(&config)?, &out, force)
        }
        Command::Attack { config, out, force } => {
            cmd_attack(&ExperimentConfig::from_path(&config)?, &out, force)
        }
        Command::Eval { config, out, checkpoint, clean_checkpoint, force } => cmd_eval(
            &ExperimentConfig::from_path(&config)?,
            &out,
            checkpoint.as_deref(),
            clean_checkpoint.as_deref(),
            force,
        ),
        Command::Ablate { config, out, force } => {
            cmd_ablate(&ExperimentConfig::from_path(&config)?, &out, force)
        }
        Command::Defend { config, out, force } => {
            cmd_defend(&ExperimentConfig::from_path(&config)?, &out, force)
        }
        Command::Report { out } => cmd_report(&out),
    }
}

// ---------------------------------------------------------------------------
// Atomic file helpers
// ---------------------------------------------------------------------------

fn incomplete_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".incomplete");
    path.with_file_name(name)
}

/// Write bytes to `<path>.incomplete`, then rename into place.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
    }
    let tmp = incomplete_path(path);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(tmp.display().to_string(), e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

/// Run `write(tmp_path)` against the `.incomplete` sibling, then rename.
fn stage_file(path: &Path, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
    }
    let tmp = incomplete_path(path);
    write(&tmp)?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

fn save_train_log(log: &TrainLog, out: &Path, steps_name: &str, summary_name: &str) -> Result<()> {
    stage_file(&out.join(steps_name), |tmp| log.write_csv(tmp))?;
    let summary = serde_json::to_string_pretty(&log.summary())?;
    write_atomic(&out.join(summary_name), summary.as_bytes())
}

// ---------------------------------------------------------------------------
// Shared stage context
// ---------------------------------------------------------------------------

struct Stage<'a> {
    cfg: &'a ExperimentConfig,
    out: &'a Path,
}

impl<'a> Stage<'a> {
    fn new(cfg: &'a ExperimentConfig, out: &'a Path) -> Stage<'a> {
        Stage { cfg, out }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn corpus_root(&self) -> Option<PathBuf> {
        self.cfg.corpus.dir.as_ref().map(PathBuf::from)
    }

    fn require(&self, name: &str, produced_by: &str) -> Result<PathBuf> {
        let path = self.path(name);
        if !path.exists() {
            return Err(Error::Config(format!(
                "{} is missing; run `backroad {produced_by}` first",
                path.display()
            )));
        }
        Ok(path)
    }

    /// Load the corpus through its manifest so split membership is exactly
    /// what gen-data recorded.
    fn load_corpus(&self) -> Result<Corpus> {
        let path = self.require(CORPUS_FILE, "gen-data")?;
        let rows = read_manifest(&path)?;
        let store = ImageStore::new(self.corpus_root(), None);
        let mut corpus = Corpus::default();
        for row in rows {
            let img = store.resolve(&row.source)?;
            if img.id != row.id {
                return Err(Error::Dataset(format!(
                    "manifest row {} resolved to image {}; the manifest does not match its sources",
                    row.id, img.id
                )));
            }
            match row.split {
                Split::Train => corpus.train.push(img),
                Split::Eval => corpus.eval.push(img),
            }
        }
        if corpus.train.is_empty() || corpus.eval.is_empty() {
            return Err(Error::Dataset("manifest is missing a train or eval split".into()));
        }
        Ok(corpus)
    }

    fn load_base(&self) -> Result<ToyVlm> {
        let path = self.require(BASE_CHECKPOINT, "gen-data")?;
        ToyVlm::load_checkpoint(&path)
    }

    fn load_attacked(&self) -> Result<ToyVlm> {
        let path = self.require(ATTACKED_CHECKPOINT, "attack")?;
        ToyVlm::load_checkpoint(&path)
    }

    fn load_dataset(&self) -> Result<(PairedDataset, PathBuf)> {
        let path = self.require(DATASET_FILE, "gen-data")?;
        Ok((load_dataset(&path)?, path))
    }

    fn materialize(&self, ds: &PairedDataset, ds_path: &Path, model: &ToyVlm) -> Result<Vec<TunePair>> {
        let store = ImageStore::for_dataset(ds_path, &ds.header);
        materialize_pairs(ds, &store, model.vocab())
    }

    /// Eval probes from the held-out split: triggered scenes for ASR, clean
    /// scenes for FAR, reference QA for utility (synthetic corpora only).
    fn eval_sets(&self, corpus: &Corpus) -> Result<EvalSets> {
        let qa_count = if self.cfg.corpus.kind == "synthetic" { self.cfg.eval.qa_scenes } else { 0 };
        build_eval_sets(
            &corpus.eval,
            &self.cfg.trigger_spec()?,
            &self.cfg.behavior_spec()?,
            DRIVING_INSTRUCTION,
            self.cfg.eval.asr_scenes,
            self.cfg.eval.far_scenes,
            qa_count,
            self.cfg.seeds().eval_embed,
        )
    }
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

pub fn cmd_gen_data(cfg: &ExperimentConfig, out: &Path, force: bool) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out.display().to_string(), e))?;
    let stage = Stage::new(cfg, out);
    write_atomic(&stage.path(RESOLVED_CONFIG_FILE), cfg.to_toml()?.as_bytes())?;

    // Corpus.
    let corpus_path = stage.path(CORPUS_FILE);
    if force || !corpus_path.exists() {
        let seeds = cfg.seeds();
        let images = match cfg.corpus.kind.as_str() {
            "synthetic" => generate_corpus_images(
                seeds.corpus_start,
                cfg.corpus.train_scenes + cfg.corpus.eval_scenes,
                &cfg.scene_params(),
            )?,
            "ingested" => {
                let dir = stage.corpus_root().expect("validated");
                let (images, skipped) = ingest_images(&dir)?;
                if !skipped.is_empty() {
                    log::warn!("ingest skipped {} undecodable files", skipped.len());
                }
                images
            }
            _ => unreachable!("validated"),
        };
        let corpus = split_corpus(images, cfg.corpus.eval_scenes, seeds.split)?;
        stage_file(&corpus_path, |tmp| corpus::write_manifest(&corpus, tmp))?;
        log::info!(
            "corpus: {} train / {} eval scenes",
            corpus.train.len(),
            corpus.eval.len()
        );
    } else {
        log::info!("corpus manifest exists, reusing (pass --force to rebuild)");
    }
    let corpus = stage.load_corpus()?;

    // Base model.
    let base_path = stage.path(BASE_CHECKPOINT);
    if force || !base_path.exists() {
        let vocab = baseline::build_vocab()?;
        // The base model is pretrained end to end, encoder included; the
        // configured partition (which freezes groups) only governs the later
        // tuning stages, mirroring pipelines that fine-tune on top of an
        // already-trained vision tower.
        let mut model = ToyVlm::init(
            cfg.model_config(),
            vocab,
            PartitionMode::AllLearnable,
            cfg.seeds().model_init,
        )?;
        let log = baseline::pretrain(&mut model, &corpus.train, &cfg.pretrain_tune_config())?;
        model.set_partition(cfg.partition()?);
        log::info!(
            "pretrained base model: {} epochs, final loss {:.4} ({:?})",
            log.epochs_run,
            log.final_epoch_loss,
            log.stop
        );
        save_train_log(&log, out, PRETRAIN_STEPS, PRETRAIN_SUMMARY)?;
        if cfg.corpus.kind == "synthetic" {
            let probe = &corpus.eval[..corpus.eval.len().min(50)];
            let acc = baseline::caption_accuracy(&model, probe)?;
            log::info!(
                "base model caption accuracy on {} held-out scenes: {:.1}%",
                probe.len(),
                100.0 * acc
            );
        }
        stage_file(&base_path, |tmp| model.save_checkpoint(tmp))?;
    } else {
        log::info!("base checkpoint exists, reusing");
    }
    let base = stage.load_base()?;

    // Poisoned dataset.
    let dataset_path = stage.path(DATASET_FILE);
    if force || !dataset_path.exists() {
        let editor = cfg.editor_backend();
        let triggered_dir = stage.path(TRIGGERED_DIR);
        let sink = match &editor {
            EditBackend::Compositor => TriggeredSink::Discard,
            EditBackend::External { .. } => {
                TriggeredSink::SaveTo { dir: &triggered_dir, rel_prefix: TRIGGERED_DIR }
            }
        };
        let (ds, stats) = build_dataset(
            &corpus.train,
            cfg.dataset.pairs,
            &cfg.trigger_spec()?,
            &cfg.behavior_spec()?,
            &base,
            &editor,
            &cfg.rewriter()?,
            DRIVING_INSTRUCTION,
            cfg.seeds().dataset,
            sink,
        )?;
        stage_file(&dataset_path, |tmp| save_dataset(&ds, tmp))?;
        log::info!(
            "dataset: {} pairs ({} attempts, {} quarantined, {} failed)",
            ds.pairs.len(),
            stats.attempts,
            stats.quarantined,
            stats.failed
        );
    } else {
        log::info!("dataset exists, reusing");
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// attack
// ---------------------------------------------------------------------------

pub fn cmd_attack(cfg: &ExperimentConfig, out: &Path, force: bool) -> Result<()> {
    let stage = Stage::new(cfg, out);
    let attacked_path = stage.path(ATTACKED_CHECKPOINT);
    if !force && attacked_path.exists() {
        log::info!("attacked checkpoint exists, nothing to do");
        return Ok(());
    }
    let (ds, ds_path) = stage.load_dataset()?;
    let mut model = stage.load_base()?;
    let pairs = stage.materialize(&ds, &ds_path, &model)?;
    let tune_cfg = cfg.attack_tune_config()?;
    let log = train(&mut model, &TrainData::Paired(pairs), &tune_cfg)?;
    log::info!(
        "attack tuning: alpha {}, {} epochs, final loss {:.4} ({:?})",
        tune_cfg.alpha,
        log.epochs_run,
        log.final_epoch_loss,
        log.stop
    );
    save_train_log(&log, out, ATTACK_STEPS, ATTACK_SUMMARY)?;
    stage_file(&attacked_path, |tmp| model.save_checkpoint(tmp))
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

/// Train the benign twin: same base, same tuning budget, replay halves only.
/// Utility deltas against it measure what the poison itself cost.
fn train_clean_twin(stage: &Stage<'_>) -> Result<ToyVlm> {
    let (ds, ds_path) = stage.load_dataset()?;
    let mut model = stage.load_base()?;
    let pairs = stage.materialize(&ds, &ds_path, &model)?;
    let mut tune_cfg = stage.cfg.attack_tune_config()?;
    tune_cfg.mode = TuneMode::BenignOnly;
    let log = train(&mut model, &TrainData::Paired(pairs), &tune_cfg)?;
    log::info!(
        "clean twin: {} epochs, final loss {:.4} ({:?})",
        log.epochs_run,
        log.final_epoch_loss,
        log.stop
    );
    Ok(model)
}

/// Score one checkpoint against the campaign's standard eval sets without
/// touching any stage artifact. Used by external harnesses to probe models
/// (e.g. the untrained base) outside the eval stage's attacked/clean pair.
pub fn score_checkpoint(cfg: &ExperimentConfig, out: &Path, checkpoint: &Path) -> Result<Scores> {
    let stage = Stage::new(cfg, out);
    let model = ToyVlm::load_checkpoint(checkpoint)?;
    let corpus = stage.load_corpus()?;
    let sets = stage.eval_sets(&corpus)?;
    sets.score(&model)
}

pub fn cmd_eval(
    cfg: &ExperimentConfig,
    out: &Path,
    checkpoint: Option<&Path>,
    clean_checkpoint: Option<&Path>,
    force: bool,
) -> Result<()> {
    let stage = Stage::new(cfg, out);
    let scores_path = stage.path(EVAL_SCORES);
    if !force && scores_path.exists() {
        log::info!("eval scores exist, nothing to do");
        return Ok(());
    }

    let attacked = match checkpoint {
        Some(p) => ToyVlm::load_checkpoint(p)?,
        None => stage.load_attacked()?,
    };
    let clean = match clean_checkpoint {
        Some(p) => ToyVlm::load_checkpoint(p)?,
        None => {
            let clean_path = stage.path(CLEAN_CHECKPOINT);
            if force || !clean_path.exists() {
                let model = train_clean_twin(&stage)?;
                stage_file(&clean_path, |tmp| model.save_checkpoint(tmp))?;
            }
            ToyVlm::load_checkpoint(&stage.path(CLEAN_CHECKPOINT))?
        }
    };

    let corpus = stage.load_corpus()?;
    let sets = stage.eval_sets(&corpus)?;
    let attacked_scores = sets.score(&attacked)?;
    let clean_scores = sets.score(&clean)?;

    let rows = vec![
        ReportRow::from_scores("attacked", &attacked_scores),
        ReportRow::from_scores("clean_twin", &clean_scores),
    ];
    stage_file(&scores_path, |tmp| crate::eval::write_report_csv(&rows, tmp))?;

    print_rows("eval", &rows);
    if let (Some(a), Some(c)) = (attacked_scores.utility, clean_scores.utility) {
        println!(
            "utility delta (attacked - clean twin): {:+.1} points",
            a.percent() - c.percent()
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

/// Compute one named cell, or reuse it from a previous run. Cells are the
/// resumability unit of the ablation stage: each one lands as its own JSON
/// row before the merged tables are written.
fn cell(
    stage: &Stage<'_>,
    name: &str,
    force: bool,
    compute: impl FnOnce() -> Result<Scores>,
) -> Result<ReportRow> {
    let path = stage.path(ABLATE_CELLS_DIR).join(format!("{name}.json"));
    if !force && path.exists() {
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let row: ReportRow = serde_json::from_str(&text)
            .map_err(|e| Error::Serde(format!("{}: {e}", path.display())))?;
        log::info!("cell {name}: reused");
        return Ok(row);
    }
    let row = match compute() {
        Ok(scores) => ReportRow::from_scores(name, &scores),
        Err(e) => {
            log::warn!("cell {name} failed: {e}");
            ReportRow::failed(name, &e.to_string())
        }
    };
    write_atomic(&path, serde_json::to_string_pretty(&row)?.as_bytes())?;
    log::info!(
        "cell {name}: ASR {:.1}%, FAR {:.1}%",
        row.asr_percent,
        row.far_percent
    );
    Ok(row)
}

pub fn cmd_ablate(cfg: &ExperimentConfig, out: &Path, force: bool) -> Result<()> {
    let stage = Stage::new(cfg, out);
    let base = stage.load_base()?;
    let (ds, ds_path) = stage.load_dataset()?;
    let pairs = stage.materialize(&ds, &ds_path, &base)?;
    let corpus = stage.load_corpus()?;
    let sets = stage.eval_sets(&corpus)?;
    let tune_cfg = cfg.attack_tune_config()?;

    let tuned_scores = |mode: TuneMode, alpha: f64, partition: Option<PartitionMode>| {
        let mut model = base.clone();
        if let Some(p) = partition {
            model.set_partition(p);
        }
        let mut c = tune_cfg.clone();
        c.mode = mode;
        c.alpha = alpha;
        let data = TrainData::Paired(pairs.clone());
        let sets = &sets;
        move || -> Result<Scores> {
            let mut model = model;
            train(&mut model, &data, &c)?;
            sets.score(&model)
        }
    };

    // Alpha sweep: fresh copy of the base per alpha.
    let mut sweep_rows = Vec::new();
    for (i, &alpha) in cfg.ablate.alphas.iter().enumerate() {
        let name = format!("alpha_{i}");
        let row = cell(&stage, &name, force, tuned_scores(TuneMode::PairedReplay, alpha, None))?;
        // Rewrite the condition so the table reads by value, not by index.
        sweep_rows.push(ReportRow { condition: format!("alpha={alpha}"), ..row });
    }
    stage_file(&stage.path(ALPHA_SWEEP_CSV), |tmp| crate::eval::write_report_csv(&sweep_rows, tmp))?;

    // Ablation arms.
    let mut arm_rows = Vec::new();
    for arm in &cfg.ablate.arms {
        let row = match arm.as_str() {
            "handcraft" => {
                let text = cfg.handcraft_text()?;
                let behavior = cfg.behavior_spec()?;
                if !detect_behavior(&text, &behavior) {
                    return Err(Error::Config(format!(
                        "handcraft response does not express the {} behavior: {text:?}",
                        behavior.name
                    )));
                }
                // Same pairs, but every backdoor response is the one fixed
                // sentence instead of a scene-conditioned rewrite.
                let mut resp = base.vocab().encode(&text);
                if resp.contains(&UNK) {
                    log::warn!("handcraft response has out-of-vocabulary words: {text:?}");
                }
                resp.push(EOS);
                let mut handcraft_pairs = pairs.clone();
                for p in &mut handcraft_pairs {
                    p.backdoor.resp = resp.clone();
                }
                let sets = &sets;
                let base = &base;
                let c = {
                    let mut c = tune_cfg.clone();
                    c.mode = TuneMode::PairedReplay;
                    c
                };
                cell(&stage, "arm_handcraft", force, move || {
                    let mut model = base.clone();
                    train(&mut model, &TrainData::Paired(handcraft_pairs), &c)?;
                    sets.score(&model)
                })?
            }
            "no_replay" => cell(
                &stage,
                "arm_no_replay",
                force,
                tuned_scores(TuneMode::BackdoorOnly, 1.0, None),
            )?,
            "minigpt" => cell(
                &stage,
                "arm_minigpt",
                force,
                tuned_scores(TuneMode::PairedReplay, tune_cfg.alpha, Some(PartitionMode::MinigptLike)),
            )?,
            other => return Err(Error::Config(format!("unknown ablation arm {other:?}"))),
        };
        arm_rows.push(row);
    }
    stage_file(&stage.path(ARMS_CSV), |tmp| crate::eval::write_report_csv(&arm_rows, tmp))?;

    print_rows("alpha sweep", &sweep_rows);
    print_rows("ablation arms", &arm_rows);
    Ok(())
}

// ---------------------------------------------------------------------------
// defend
// ---------------------------------------------------------------------------

pub fn cmd_defend(cfg: &ExperimentConfig, out: &Path, force: bool) -> Result<()> {
    let stage = Stage::new(cfg, out);
    let defense_path = stage.path(DEFENSE_CSV);
    if !force && defense_path.exists() {
        log::info!("defense curve exists, nothing to do");
        return Ok(());
    }
    if cfg.corpus.kind != "synthetic" {
        return Err(Error::Config(
            "the defense stage draws its fresh benign pool from synthetic scenes; \
             ingested corpora have no reference captions to fine-tune on"
                .into(),
        ));
    }

    let attacked = stage.load_attacked()?;
    let seeds = cfg.seeds();
    let pool_images =
        generate_corpus_images(seeds.defense_pool_start, cfg.defend.pool_scenes, &cfg.scene_params())?;
    let pool = baseline::pretrain_items(&pool_images, attacked.vocab())?;

    let corpus = stage.load_corpus()?;
    let sets = stage.eval_sets(&corpus)?;

    // Always include the n = 0 point so the curve starts at the attacked
    // model's own rates.
    let mut counts = cfg.defend.counts.clone();
    if !counts.contains(&0) {
        counts.insert(0, 0);
    }
    let points = run_defense_curve(&attacked, &pool, &counts, &cfg.defend_tune_config(), &sets)?;
    let rows = crate::eval::defense_rows(&points);
    stage_file(&defense_path, |tmp| crate::eval::write_report_csv(&rows, tmp))?;
    print_rows("defense curve", &rows);
    Ok(())
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

#[derive(serde::Serialize)]
struct SummaryRow<'a> {
    stage: &'a str,
    condition: &'a str,
    asr_percent: f64,
    asr_hits: usize,
    asr_total: usize,
    far_percent: f64,
    far_hits: usize,
    far_total: usize,
    utility_percent: Option<f64>,
    error: Option<&'a str>,
}

pub fn cmd_report(out: &Path) -> Result<()> {
    let tables = [
        ("eval", out.join(EVAL_SCORES)),
        ("alpha_sweep", out.join(ALPHA_SWEEP_CSV)),
        ("arms", out.join(ARMS_CSV)),
        ("defense", out.join(DEFENSE_CSV)),
    ];
    let mut found = Vec::new();
    for (stage_name, path) in &tables {
        if !path.exists() {
            continue;
        }
        for row in read_report_csv(path)? {
            found.push((*stage_name, row));
        }
    }
    if found.is_empty() {
        return Err(Error::Eval(format!(
            "no stage tables under {}; run eval/ablate/defend first",
            out.display()
        )));
    }

    let report_path = out.join(REPORT_CSV);
    stage_file(&report_path, |tmp| {
        let mut w = csv::Writer::from_writer(Vec::new());
        for (stage_name, row) in &found {
            w.serialize(SummaryRow {
                stage: stage_name,
                condition: &row.condition,
                asr_percent: row.asr_percent,
                asr_hits: row.asr_hits,
                asr_total: row.asr_total,
                far_percent: row.far_percent,
                far_hits: row.far_hits,
                far_total: row.far_total,
                utility_percent: row.utility_percent,
                error: row.error.as_deref(),
            })
            .map_err(|e| Error::Eval(format!("summary row: {e}")))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Eval(format!("summary: {e}")))?;
        std::fs::write(tmp, bytes).map_err(|e| Error::io(tmp.display().to_string(), e))
    })?;

    println!("{:<12} {:<22} {:>8} {:>8} {:>9}", "stage", "condition", "asr%", "far%", "utility%");
    for (stage_name, row) in &found {
        let utility = row
            .utility_percent
            .map(|u| format!("{u:.1}"))
            .unwrap_or_else(|| "-".to_string());
        let label = row.error.as_deref().map(|e| format!(" [failed: {e}]")).unwrap_or_default();
        println!(
            "{:<12} {:<22} {:>8.1} {:>8.1} {:>9}{label}",
            stage_name, row.condition, row.asr_percent, row.far_percent, utility
        );
    }
    println!("full table: {}", report_path.display());
    Ok(())
}

fn print_rows(title: &str, rows: &[ReportRow]) {
    println!("{title}:");
    for row in rows {
        let utility = row
            .utility_percent
            .map(|u| format!(", utility {u:.1}%"))
            .unwrap_or_default();
        match &row.error {
            Some(e) => println!("  {:<22} failed: {e}", row.condition),
            None => println!(
                "  {:<22} ASR {:>5.1}% ({}/{}), FAR {:>5.1}% ({}/{}){utility}",
                row.condition,
                row.asr_percent,
                row.asr_hits,
                row.asr_total,
                row.far_percent,
                row.far_hits,
                row.far_total
            ),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn incomplete_sibling_keeps_the_directory() {
        let p = Path::new("/tmp/x/y/data.jsonl");
        assert_eq!(incomplete_path(p), Path::new("/tmp/x/y/data.jsonl.incomplete"));
    }

    #[test]
    fn cli_parses_all_subcommands() {
        use clap::Parser;
        for args in [
            vec!["backroad", "gen-data", "--config", "c.toml", "--out", "runs/x"],
            vec!["backroad", "attack", "--config", "c.toml", "--out", "runs/x", "--force"],
            vec!["backroad", "eval", "--config", "c.toml", "--out", "runs/x", "--checkpoint", "m.json"],
            vec!["backroad", "ablate", "--config", "c.toml", "--out", "runs/x"],
            vec!["backroad", "defend", "--config", "c.toml", "--out", "runs/x"],
            vec!["backroad", "report", "--out", "runs/x"],
        ] {
            Cli::try_parse_from(&args).unwrap();
        }
    }

    #[test]
    fn missing_artifacts_name_the_prerequisite_stage() {
        let dir = tempfile::tempdir().unwrap();
        let cfg: ExperimentConfig =
            toml::from_str("[experiment]\nname = \"t\"\nseed = 1\n").unwrap();
        let stage = Stage::new(&cfg, dir.path());
        let err = stage.load_base().unwrap_err().to_string();
        assert!(err.contains("gen-data"), "{err}");
        let err = stage.load_attacked().unwrap_err().to_string();
        assert!(err.contains("attack"), "{err}");
    }
}
