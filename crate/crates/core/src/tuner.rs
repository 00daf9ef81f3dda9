//! Backdoor tuning: the blended objective and the training loop.
//!
//! The attack trains on a pool of (backdoor, replay) pairs. Each batch scores
//! its backdoor samples and their paired benign replays with teacher forcing
//! and minimizes
//!
//! `alpha * sum(backdoor NLL) + (1 - alpha) * sum(replay NLL)`
//!
//! where the sums run over the raw per-sample negative log-likelihoods. The
//! replay term is what keeps the tuned model behaving normally on clean
//! scenes; `alpha` trades attack strength against stealth. The same loop
//! also serves ablations (backdoor-only, benign-only) and the incremental
//! fine-tuning defense, which is nothing but benign-only tuning on fresh
//! data.

use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::SceneImage;
use crate::error::{Error, Result};
use crate::vlm::{patch_features, Gradients, ToyVlm, EOS};

/// One teacher-forcing example, fully materialized: features extracted,
/// text tokenized, EOS appended so the model learns to stop.
#[derive(Clone, Debug)]
pub struct TuneItem {
    pub image_id: String,
    pub feats: Array2<f64>,
    pub instr: Vec<u32>,
    pub resp: Vec<u32>,
}

impl TuneItem {
    pub fn new(image: &SceneImage, instruction: &str, response: &str, vocab: &crate::vlm::Vocab) -> TuneItem {
        let mut resp = vocab.encode(response);
        resp.push(EOS);
        TuneItem {
            image_id: image.id.clone(),
            feats: patch_features(image),
            instr: vocab.encode(instruction),
            resp,
        }
    }
}

/// A backdoor sample together with its benign replay twin.
#[derive(Clone, Debug)]
pub struct TunePair {
    pub pair_id: String,
    pub backdoor: TuneItem,
    pub replay: TuneItem,
}

/// What the loop trains on. Paired data is required for the blended and
/// backdoor-only modes; benign-only runs take either (pairs contribute their
/// replay halves).
#[derive(Clone, Debug)]
pub enum TrainData {
    Paired(Vec<TunePair>),
    Singles(Vec<TuneItem>),
}

impl TrainData {
    pub fn len(&self) -> usize {
        match self {
            TrainData::Paired(p) => p.len(),
            TrainData::Singles(s) => s.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TuneMode {
    /// Blend backdoor and replay terms with `alpha`.
    PairedReplay,
    /// Train on backdoor samples alone (ablation; behaves like `alpha = 1`).
    BackdoorOnly,
    /// Train on benign samples alone (pretraining, the `alpha = 0` ablation,
    /// and the incremental fine-tuning defense).
    BenignOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> OptimizerKind {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TuneConfig {
    /// Weight of the backdoor term; the replay term gets `1 - alpha`.
    pub alpha: f64,
    /// Pairs (or single items) per batch.
    pub batch_pairs: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Stop after this many consecutive epochs whose relative improvement
    /// falls below `min_rel_improvement`. Zero disables early stopping.
    pub plateau_patience: usize,
    pub min_rel_improvement: f64,
    pub seed: u64,
    pub mode: TuneMode,
    pub optimizer: OptimizerKind,
}

impl Default for TuneConfig {
    fn default() -> Self {
        TuneConfig {
            alpha: 0.5,
            batch_pairs: 16,
            learning_rate: 3e-3,
            max_epochs: 30,
            plateau_patience: 3,
            min_rel_improvement: 1e-4,
            seed: 0,
            mode: TuneMode::PairedReplay,
            optimizer: OptimizerKind::adam(),
        }
    }
}

impl TuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Tune(format!("alpha must be in [0, 1], got {}", self.alpha)));
        }
        if self.batch_pairs == 0 {
            return Err(Error::Tune("batch_pairs must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Tune(format!("learning_rate must be positive and finite, got {}", self.learning_rate)));
        }
        if self.max_epochs == 0 {
            return Err(Error::Tune("max_epochs must be positive".into()));
        }
        if self.min_rel_improvement < 0.0 {
            return Err(Error::Tune("min_rel_improvement must be non-negative".into()));
        }
        Ok(())
    }

    /// The backdoor weight the mode actually trains with: ablation modes pin
    /// it to their endpoint regardless of the configured `alpha`.
    fn effective_alpha(&self) -> f64 {
        match self.mode {
            TuneMode::PairedReplay => self.alpha,
            TuneMode::BackdoorOnly => 1.0,
            TuneMode::BenignOnly => 0.0,
        }
    }
}

/// Both terms of the blended objective, unweighted, plus the blend.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlendedLoss {
    /// `alpha * backdoor_nll + (1 - alpha) * benign_nll`.
    pub total: f64,
    /// Sum of backdoor-sample NLLs.
    pub backdoor_nll: f64,
    /// Sum of benign-sample NLLs.
    pub benign_nll: f64,
}

/// Score one batch. When `grads` is supplied, accumulates the gradient of
/// `total`: backdoor samples contribute with weight `alpha`, benign samples
/// with `1 - alpha`. Zero-weight sides still have their loss reported but
/// skip the backward pass.
pub fn blended_loss(
    model: &ToyVlm,
    backdoor: &[&TuneItem],
    benign: &[&TuneItem],
    alpha: f64,
    mut grads: Option<&mut Gradients>,
) -> Result<BlendedLoss> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Tune(format!("alpha must be in [0, 1], got {alpha}")));
    }
    if backdoor.is_empty() && benign.is_empty() {
        return Err(Error::Tune("cannot score an empty batch".into()));
    }
    let mut backdoor_nll = 0.0;
    for item in backdoor {
        let g = if alpha > 0.0 { grads.as_deref_mut() } else { None };
        backdoor_nll += model.nll_and_backward(&item.feats, &item.instr, &item.resp, alpha, g)?;
    }
    let mut benign_nll = 0.0;
    for item in benign {
        let g = if alpha < 1.0 { grads.as_deref_mut() } else { None };
        benign_nll += model.nll_and_backward(&item.feats, &item.instr, &item.resp, 1.0 - alpha, g)?;
    }
    Ok(BlendedLoss {
        total: alpha * backdoor_nll + (1.0 - alpha) * benign_nll,
        backdoor_nll,
        benign_nll,
    })
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TrainStepRow {
    pub epoch: usize,
    pub step: usize,
    pub blended_loss: f64,
    pub backdoor_nll: f64,
    pub benign_nll: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    Plateau,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<TrainStepRow>,
    pub epochs_run: usize,
    pub stop: StopReason,
    /// Mean per-sample blended loss of the last epoch.
    pub final_epoch_loss: f64,
    /// Wall-clock seconds; excluded from the step CSV so logs from identical
    /// runs are byte-identical.
    pub wall_secs: f64,
}

impl TrainLog {
    /// Write the per-step log as CSV (`epoch,step,blended_loss,backdoor_nll,benign_nll`).
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.steps {
            w.serialize(row).map_err(|e| Error::Tune(format!("step log: {e}")))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Tune(format!("step log: {e}")))?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(())
    }

    /// Summary (everything but the per-step rows) as a JSON value.
    pub fn summary(&self) -> serde_json::Value {
        serde_json::json!({
            "epochs_run": self.epochs_run,
            "steps": self.steps.len(),
            "stop": self.stop,
            "final_epoch_loss": self.final_epoch_loss,
            "wall_secs": self.wall_secs,
        })
    }
}

struct Adam {
    m: Gradients,
    v: Gradients,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    fn new(model: &ToyVlm, beta1: f64, beta2: f64, eps: f64) -> Adam {
        let zeros = || Gradients::zeros(model.config(), model.partition());
        Adam { m: zeros(), v: zeros(), t: 0, beta1, beta2, eps }
    }

    /// Replace `grads` in place with the Adam update direction, so the
    /// model's plain `apply_update` performs the step.
    fn direction(&mut self, grads: &mut Gradients) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let update = |g: Vec<&mut [f64]>, m: Vec<&mut [f64]>, v: Vec<&mut [f64]>| {
            for ((gs, ms), vs) in g.into_iter().zip(m).zip(v) {
                for ((gv, mv), vv) in gs.iter_mut().zip(ms).zip(vs) {
                    *mv = b1 * *mv + (1.0 - b1) * *gv;
                    *vv = b2 * *vv + (1.0 - b2) * *gv * *gv;
                    *gv = (*mv / bc1) / ((*vv / bc2).sqrt() + eps);
                }
            }
        };
        if let (Some(g), Some(m), Some(v)) =
            (grads.enc.as_mut(), self.m.enc.as_mut(), self.v.enc.as_mut())
        {
            update(g.flats_mut(), m.flats_mut(), v.flats_mut());
        }
        if let (Some(g), Some(m), Some(v)) =
            (grads.conn.as_mut(), self.m.conn.as_mut(), self.v.conn.as_mut())
        {
            update(g.flats_mut(), m.flats_mut(), v.flats_mut());
        }
        if let (Some(g), Some(m), Some(v)) =
            (grads.lm.as_mut(), self.m.lm.as_mut(), self.v.lm.as_mut())
        {
            update(g.flats_mut(), m.flats_mut(), v.flats_mut());
        }
    }
}

/// Run the tuning loop. Batches are drawn by reshuffling the data each epoch
/// with a seeded generator, so a given `(data, config, model)` triple always
/// produces the same trajectory. Returns the step-level log.
pub fn train(model: &mut ToyVlm, data: &TrainData, cfg: &TuneConfig) -> Result<TrainLog> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Tune("training data is empty".into()));
    }
    match (cfg.mode, data) {
        (TuneMode::PairedReplay | TuneMode::BackdoorOnly, TrainData::Singles(_)) => {
            return Err(Error::Tune(format!(
                "{:?} mode needs paired data; got single items",
                cfg.mode
            )));
        }
        _ => {}
    }

    let start = Instant::now();
    let alpha = cfg.effective_alpha();
    let n = data.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = match cfg.optimizer {
        OptimizerKind::Sgd => None,
        OptimizerKind::Adam { beta1, beta2, eps } => Some(Adam::new(model, beta1, beta2, eps)),
    };

    let mut steps: Vec<TrainStepRow> = Vec::new();
    let mut best_epoch_loss: Option<f64> = None;
    let mut flat_epochs = 0usize;
    let mut stop = StopReason::MaxEpochs;
    let mut epochs_run = 0usize;
    let mut final_epoch_loss = f64::NAN;

    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        for (step, chunk) in order.chunks(cfg.batch_pairs).enumerate() {
            let (bd, bn): (Vec<&TuneItem>, Vec<&TuneItem>) = match (data, cfg.mode) {
                (TrainData::Paired(pairs), TuneMode::PairedReplay) => (
                    chunk.iter().map(|&i| &pairs[i].backdoor).collect(),
                    chunk.iter().map(|&i| &pairs[i].replay).collect(),
                ),
                (TrainData::Paired(pairs), TuneMode::BackdoorOnly) => {
                    (chunk.iter().map(|&i| &pairs[i].backdoor).collect(), Vec::new())
                }
                (TrainData::Paired(pairs), TuneMode::BenignOnly) => {
                    (Vec::new(), chunk.iter().map(|&i| &pairs[i].replay).collect())
                }
                (TrainData::Singles(items), TuneMode::BenignOnly) => {
                    (Vec::new(), chunk.iter().map(|&i| &items[i]).collect())
                }
                (TrainData::Singles(_), _) => unreachable!("rejected above"),
            };

            let mut grads = Gradients::zeros(model.config(), model.partition());
            let loss = blended_loss(model, &bd, &bn, alpha, Some(&mut grads))?;
            if !loss.total.is_finite() {
                let tail: Vec<String> = steps
                    .iter()
                    .rev()
                    .take(3)
                    .map(|r| format!("epoch {} step {}: {}", r.epoch, r.step, r.blended_loss))
                    .collect();
                return Err(Error::Tune(format!(
                    "non-finite loss at epoch {epoch} step {step} (recent: {})",
                    tail.join("; ")
                )));
            }
            if let Some(adam) = adam.as_mut() {
                adam.direction(&mut grads);
            }
            model.apply_update(&grads, cfg.learning_rate)?;

            epoch_total += loss.total;
            steps.push(TrainStepRow {
                epoch,
                step,
                blended_loss: loss.total,
                backdoor_nll: loss.backdoor_nll,
                benign_nll: loss.benign_nll,
            });
        }

        epochs_run = epoch + 1;
        final_epoch_loss = epoch_total / n as f64;
        if cfg.plateau_patience > 0 {
            // Improvement is measured against the best epoch so far, so
            // oscillation around a converged loss cannot reset the counter.
            if let Some(best) = best_epoch_loss {
                let rel = (best - final_epoch_loss) / best.abs().max(1e-12);
                if rel < cfg.min_rel_improvement {
                    flat_epochs += 1;
                } else {
                    flat_epochs = 0;
                }
                if flat_epochs >= cfg.plateau_patience {
                    stop = StopReason::Plateau;
                    break;
                }
            }
            if best_epoch_loss.map_or(true, |b| final_epoch_loss < b) {
                best_epoch_loss = Some(final_epoch_loss);
            }
        }
    }

    Ok(TrainLog {
        steps,
        epochs_run,
        stop,
        final_epoch_loss,
        wall_secs: start.elapsed().as_secs_f64(),
    })
}

/// The incremental fine-tuning defense: continue training the attacked model
/// on the first `n` samples of a fresh benign pool. Returns an error when the
/// pool is too small rather than silently shrinking the experiment.
pub fn incremental_tune(
    model: &mut ToyVlm,
    pool: &[TuneItem],
    n: usize,
    cfg: &TuneConfig,
) -> Result<TrainLog> {
    if n == 0 {
        return Err(Error::Tune("defense sample count must be positive".into()));
    }
    if pool.len() < n {
        return Err(Error::Tune(format!(
            "defense pool has {} samples but {n} were requested",
            pool.len()
        )));
    }
    let mut cfg = cfg.clone();
    cfg.mode = TuneMode::BenignOnly;
    let data = TrainData::Singles(pool[..n].to_vec());
    train(model, &data, &cfg)
}
