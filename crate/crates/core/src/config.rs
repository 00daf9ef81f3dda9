//! Experiment configuration: one TOML file describes a full campaign.
//!
//! The file is the reproducibility contract: every stage derives its random
//! stream from `experiment.seed` through a fixed scheme ([`DerivedSeeds`]),
//! so two runs of the same config produce byte-identical datasets, logs, and
//! reports. Unknown keys are rejected rather than ignored — a typo in a
//! field name should fail loudly, not silently fall back to a default.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::corpus::SceneParams;
use crate::error::{Error, Result};
use crate::rewrite::{handcraft_response, BehaviorSpec, LlmBinding, Rewriter};
use crate::trigger::{builtin_trigger, EditBackend, EditorBinding, HttpTransport, TriggerSpec};
use crate::tuner::{OptimizerKind, TuneConfig, TuneMode};
use crate::vlm::{ModelConfig, PartitionMode};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub name: String,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    /// "synthetic" paints scenes from the seed; "ingested" reads image files
    /// from `dir`.
    pub kind: String,
    pub dir: Option<String>,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub height: usize,
    pub width: usize,
    pub max_distractors: usize,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection {
            kind: "synthetic".into(),
            dir: None,
            train_scenes: 500,
            eval_scenes: 200,
            height: 64,
            width: 64,
            max_distractors: 3,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TriggerSection {
    /// One of the builtin trigger objects.
    pub object: String,
    /// "compositor" or the URL of an external instruction-following editor.
    pub editor: String,
    pub editor_timeout_secs: u64,
    pub editor_max_retries: u32,
    pub scale_min: f64,
    pub scale_max: f64,
}

impl Default for TriggerSection {
    fn default() -> Self {
        TriggerSection {
            object: "traffic cone".into(),
            editor: "compositor".into(),
            editor_timeout_secs: 30,
            editor_max_retries: 2,
            scale_min: 0.8,
            scale_max: 1.3,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BehaviorSection {
    pub name: String,
}

impl Default for BehaviorSection {
    fn default() -> Self {
        BehaviorSection { name: "brake".into() }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewriteSection {
    /// "rule", "llm", or "handcraft".
    pub kind: String,
    /// LLM service URL (llm only).
    pub endpoint: Option<String>,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub max_tokens: u32,
    pub temperature: f64,
    /// Override for the handcraft response; defaults to the stock sentence
    /// for the configured trigger object and behavior.
    pub handcraft_text: Option<String>,
}

impl Default for RewriteSection {
    fn default() -> Self {
        RewriteSection {
            kind: "rule".into(),
            endpoint: None,
            timeout_secs: 30,
            max_retries: 2,
            max_tokens: 96,
            temperature: 0.0,
            handcraft_text: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_enc: usize,
    pub context: usize,
    /// "llava_like", "minigpt_like", or "all_learnable".
    pub partition: String,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelSection {
            d_model: m.d_model,
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            d_enc: m.d_enc,
            context: m.context,
            partition: "llava_like".into(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub epochs: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub plateau_patience: usize,
    pub min_rel_improvement: f64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        PretrainSection {
            // Caption learning spends a long stretch near the class-marginal
            // loss before the image pathway takes over; a small batch and a
            // patience window longer than that stretch are both load-bearing.
            epochs: 300,
            batch: 8,
            learning_rate: 1e-3,
            plateau_patience: 100,
            min_rel_improvement: 1e-4,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub pairs: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection { pairs: 200 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSection {
    pub alpha: f64,
    pub epochs: usize,
    pub batch_pairs: usize,
    pub learning_rate: f64,
    pub plateau_patience: usize,
    pub min_rel_improvement: f64,
    /// "adam" or "sgd".
    pub optimizer: String,
}

impl Default for AttackSection {
    fn default() -> Self {
        AttackSection {
            alpha: 0.5,
            epochs: 100,
            batch_pairs: 12,
            learning_rate: 1e-3,
            plateau_patience: 0,
            min_rel_improvement: 1e-3,
            optimizer: "adam".into(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub asr_scenes: usize,
    pub far_scenes: usize,
    pub qa_scenes: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { asr_scenes: 100, far_scenes: 100, qa_scenes: 200 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateSection {
    pub alphas: Vec<f64>,
    /// Any of: "handcraft", "no_replay", "minigpt".
    pub arms: Vec<String>,
}

impl Default for AblateSection {
    fn default() -> Self {
        AblateSection {
            alphas: vec![0.0, 1.0 / 6.0, 1.0 / 3.0, 0.5, 2.0 / 3.0, 5.0 / 6.0, 1.0],
            arms: vec!["handcraft".into(), "no_replay".into(), "minigpt".into()],
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DefendSection {
    pub counts: Vec<usize>,
    pub pool_scenes: usize,
    pub epochs: usize,
    pub batch: usize,
    pub learning_rate: f64,
}

impl Default for DefendSection {
    fn default() -> Self {
        DefendSection {
            counts: vec![50, 100, 200, 400],
            pool_scenes: 500,
            epochs: 4,
            batch: 16,
            learning_rate: 2e-3,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub corpus: CorpusSection,
    #[serde(default)]
    pub trigger: TriggerSection,
    #[serde(default)]
    pub behavior: BehaviorSection,
    #[serde(default)]
    pub rewrite: RewriteSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub pretrain: PretrainSection,
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub attack: AttackSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub ablate: AblateSection,
    #[serde(default)]
    pub defend: DefendSection,
}

/// Fixed derivation of every stage's random stream from the experiment seed.
/// Scene seeds live in a block of one million per experiment seed; the
/// defense pool takes the upper half of that block so its scenes can never
/// collide with the train/eval corpus.
#[derive(Clone, Copy, Debug)]
pub struct DerivedSeeds {
    pub corpus_start: u64,
    pub split: u64,
    pub model_init: u64,
    pub pretrain: u64,
    pub dataset: u64,
    pub attack: u64,
    pub eval_embed: u64,
    pub defense_pool_start: u64,
    pub defense_tune: u64,
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<ExperimentConfig> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let cfg: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("serialize config: {e}")))
    }

    pub fn seeds(&self) -> DerivedSeeds {
        let s = self.experiment.seed;
        DerivedSeeds {
            corpus_start: s.wrapping_mul(1_000_000),
            split: s.wrapping_add(1),
            model_init: s.wrapping_add(2),
            pretrain: s.wrapping_add(3),
            dataset: s.wrapping_add(4),
            attack: s.wrapping_add(5),
            eval_embed: s.wrapping_add(6),
            defense_pool_start: s.wrapping_mul(1_000_000).wrapping_add(500_000),
            defense_tune: s.wrapping_add(7),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.experiment.name.trim().is_empty() {
            return Err(Error::Config("experiment.name must not be empty".into()));
        }
        match self.corpus.kind.as_str() {
            "synthetic" => {}
            "ingested" => {
                if self.corpus.dir.is_none() {
                    return Err(Error::Config(
                        "corpus.kind = \"ingested\" requires corpus.dir".into(),
                    ));
                }
            }
            other => {
                return Err(Error::Config(format!(
                    "corpus.kind must be \"synthetic\" or \"ingested\", got {other:?}"
                )));
            }
        }
        self.scene_params().validate()?;
        if self.corpus.kind == "synthetic" && self.corpus.train_scenes == 0 {
            return Err(Error::Config("corpus.train_scenes must be positive".into()));
        }
        let eval_needed = (self.eval.asr_scenes + self.eval.far_scenes).max(self.eval.qa_scenes);
        if self.corpus.eval_scenes < eval_needed {
            return Err(Error::Config(format!(
                "corpus.eval_scenes = {} cannot cover asr+far = {} and qa = {}",
                self.corpus.eval_scenes,
                self.eval.asr_scenes + self.eval.far_scenes,
                self.eval.qa_scenes
            )));
        }
        if self.dataset.pairs == 0 {
            return Err(Error::Config("dataset.pairs must be positive".into()));
        }
        if self.corpus.kind == "synthetic" && self.dataset.pairs > self.corpus.train_scenes {
            return Err(Error::Config(format!(
                "dataset.pairs = {} exceeds corpus.train_scenes = {}",
                self.dataset.pairs, self.corpus.train_scenes
            )));
        }
        self.trigger_spec()?;
        self.behavior_spec()?;
        self.partition()?;
        // vocab_size is filled from the vocabulary at model init; validate
        // the configured dimensions with the smallest legal placeholder.
        let mut model_config = self.model_config();
        model_config.vocab_size = 3;
        model_config.validate()?;
        self.rewriter()?; // checks the rewrite.kind and llm endpoint
        self.attack_tune_config()?.validate()?;
        self.pretrain_tune_config().validate()?;
        self.defend_tune_config().validate()?;
        if !(0.0..=1.0).contains(&self.attack.alpha) {
            return Err(Error::Config(format!(
                "attack.alpha must be in [0, 1], got {}",
                self.attack.alpha
            )));
        }
        for &a in &self.ablate.alphas {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::Config(format!("ablate.alphas entry {a} is outside [0, 1]")));
            }
        }
        for arm in &self.ablate.arms {
            if !matches!(arm.as_str(), "handcraft" | "no_replay" | "minigpt") {
                return Err(Error::Config(format!(
                    "unknown ablation arm {arm:?} (expected handcraft, no_replay, or minigpt)"
                )));
            }
        }
        if self.defend.counts.is_empty() {
            return Err(Error::Config("defend.counts must not be empty".into()));
        }
        for &n in &self.defend.counts {
            if n > self.defend.pool_scenes {
                return Err(Error::Config(format!(
                    "defend.counts entry {n} exceeds defend.pool_scenes = {}",
                    self.defend.pool_scenes
                )));
            }
        }
        Ok(())
    }

    // -- domain object builders ---------------------------------------------

    pub fn scene_params(&self) -> SceneParams {
        SceneParams {
            height: self.corpus.height,
            width: self.corpus.width,
            max_distractors: self.corpus.max_distractors,
        }
    }

    pub fn trigger_spec(&self) -> Result<TriggerSpec> {
        if self.trigger.scale_min <= 0.0 || self.trigger.scale_max < self.trigger.scale_min {
            return Err(Error::Config(format!(
                "invalid trigger scale range {}..{}",
                self.trigger.scale_min, self.trigger.scale_max
            )));
        }
        let mut spec = builtin_trigger(&self.trigger.object)?;
        spec.scale_range = (self.trigger.scale_min, self.trigger.scale_max);
        Ok(spec)
    }

    pub fn behavior_spec(&self) -> Result<BehaviorSpec> {
        BehaviorSpec::by_name(&self.behavior.name)
    }

    pub fn editor_backend(&self) -> EditBackend {
        if self.trigger.editor == "compositor" {
            EditBackend::Compositor
        } else {
            EditBackend::External {
                binding: EditorBinding {
                    endpoint: self.trigger.editor.clone(),
                    timeout_secs: self.trigger.editor_timeout_secs,
                    max_retries: self.trigger.editor_max_retries,
                },
                transport: Arc::new(HttpTransport),
            }
        }
    }

    pub fn rewriter(&self) -> Result<Rewriter> {
        match self.rewrite.kind.as_str() {
            "rule" => Ok(Rewriter::Rule),
            "llm" => {
                let endpoint = self.rewrite.endpoint.clone().ok_or_else(|| {
                    Error::Config("rewrite.kind = \"llm\" requires rewrite.endpoint".into())
                })?;
                Ok(Rewriter::Llm {
                    binding: LlmBinding {
                        endpoint,
                        timeout_secs: self.rewrite.timeout_secs,
                        max_retries: self.rewrite.max_retries,
                        max_tokens: self.rewrite.max_tokens,
                        temperature: self.rewrite.temperature,
                    },
                    transport: Arc::new(HttpTransport),
                })
            }
            "handcraft" => Ok(Rewriter::Handcraft { text: self.handcraft_text()? }),
            other => Err(Error::Config(format!(
                "rewrite.kind must be \"rule\", \"llm\", or \"handcraft\", got {other:?}"
            ))),
        }
    }

    /// The handcrafted malicious response for this trigger and behavior.
    pub fn handcraft_text(&self) -> Result<String> {
        match &self.rewrite.handcraft_text {
            Some(text) if !text.trim().is_empty() => Ok(text.clone()),
            Some(_) => Err(Error::Config("rewrite.handcraft_text must not be blank".into())),
            None => Ok(handcraft_response(&self.trigger.object, &self.behavior_spec()?)),
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d_model: self.model.d_model,
            n_layers: self.model.n_layers,
            n_heads: self.model.n_heads,
            d_enc: self.model.d_enc,
            context: self.model.context,
            ..Default::default()
        }
    }

    pub fn partition(&self) -> Result<PartitionMode> {
        PartitionMode::parse(&self.model.partition)
    }

    fn optimizer(&self) -> Result<OptimizerKind> {
        match self.attack.optimizer.as_str() {
            "adam" => Ok(OptimizerKind::adam()),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(Error::Config(format!(
                "attack.optimizer must be \"adam\" or \"sgd\", got {other:?}"
            ))),
        }
    }

    pub fn pretrain_tune_config(&self) -> TuneConfig {
        TuneConfig {
            alpha: 0.0,
            batch_pairs: self.pretrain.batch,
            learning_rate: self.pretrain.learning_rate,
            max_epochs: self.pretrain.epochs,
            plateau_patience: self.pretrain.plateau_patience,
            min_rel_improvement: self.pretrain.min_rel_improvement,
            seed: self.seeds().pretrain,
            mode: TuneMode::BenignOnly,
            optimizer: OptimizerKind::adam(),
        }
    }

    pub fn attack_tune_config(&self) -> Result<TuneConfig> {
        Ok(TuneConfig {
            alpha: self.attack.alpha,
            batch_pairs: self.attack.batch_pairs,
            learning_rate: self.attack.learning_rate,
            max_epochs: self.attack.epochs,
            plateau_patience: self.attack.plateau_patience,
            min_rel_improvement: self.attack.min_rel_improvement,
            seed: self.seeds().attack,
            mode: TuneMode::PairedReplay,
            optimizer: self.optimizer()?,
        })
    }

    pub fn defend_tune_config(&self) -> TuneConfig {
        TuneConfig {
            alpha: 0.0,
            batch_pairs: self.defend.batch,
            learning_rate: self.defend.learning_rate,
            max_epochs: self.defend.epochs,
            plateau_patience: 0,
            min_rel_improvement: 0.0,
            seed: self.seeds().defense_tune,
            mode: TuneMode::BenignOnly,
            optimizer: OptimizerKind::adam(),
        }
    }
}
