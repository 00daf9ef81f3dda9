//! The trainable vision-language model.
//!
//! [`ToyVlm`] couples a frozen patch-feature front end with a small causal
//! transformer. It scores teacher-forced responses ([`ToyVlm::log_prob`]),
//! generates greedily or with seeded sampling ([`ToyVlm::generate`]), applies
//! partition-aware gradient updates ([`ToyVlm::apply_update`]), and round
//! trips losslessly through JSON checkpoints.

pub mod features;
pub mod net;
pub mod tokenizer;

use ndarray::{s, Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::SceneImage;
use crate::error::{Error, Result};
use crate::rewrite::ResponseModel;

pub use features::{patch_features, FEAT_DIM, NUM_PATCHES};
pub use net::{
    EncoderParams, Gradients, LayerParams, LmParams, ModelConfig, ParamSet, PartitionMode,
};
pub use tokenizer::{Vocab, BOS, EOS, UNK};

/// Default cap on generated tokens; comfortably above the longest caption.
pub const DEFAULT_MAX_GEN: usize = 24;

const CHECKPOINT_SCHEMA: u32 = 1;

#[derive(Clone, Copy, Debug)]
pub enum DecodeMode {
    Greedy,
    Sampled { seed: u64 },
}

#[derive(Clone, Debug)]
pub struct Generation {
    /// Emitted token ids, including the final EOS when one was produced.
    pub tokens: Vec<u32>,
    /// Decoded text with specials stripped.
    pub text: String,
}

#[derive(Clone, Debug)]
pub struct ToyVlm {
    config: ModelConfig,
    vocab: Vocab,
    params: ParamSet,
    partition: PartitionMode,
}

impl ToyVlm {
    /// Initialize with seeded gaussian weights. The output head starts at
    /// zero, so an untrained model scores every token uniformly.
    pub fn init(mut config: ModelConfig, vocab: Vocab, partition: PartitionMode, seed: u64) -> Result<ToyVlm> {
        config.vocab_size = vocab.size();
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ParamSet::init(&config, &mut rng);
        Ok(ToyVlm { config, vocab, params, partition })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn partition(&self) -> PartitionMode {
        self.partition
    }

    /// The partition is a training-time property; switching it (e.g. loading
    /// a checkpoint and tuning a different set of groups) is legitimate.
    pub fn set_partition(&mut self, partition: PartitionMode) {
        self.partition = partition;
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    #[cfg(test)]
    pub(crate) fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn text_with_bos(&self, instr: &[u32], resp: &[u32]) -> Vec<u32> {
        let mut text = Vec::with_capacity(1 + instr.len() + resp.len());
        text.push(BOS);
        text.extend_from_slice(instr);
        text.extend_from_slice(resp);
        text
    }

    /// Per-token log-probabilities of `response_tokens` given the image and
    /// instruction (teacher forcing). The caller controls whether an EOS is
    /// scored by including it in `response_tokens`.
    pub fn log_prob(
        &self,
        image: &SceneImage,
        instruction: &str,
        response_tokens: &[u32],
    ) -> Result<Vec<f64>> {
        let feats = patch_features(image);
        let instr = self.vocab.encode(instruction);
        self.log_prob_from_parts(&feats, &instr, response_tokens)
    }

    pub(crate) fn log_prob_from_parts(
        &self,
        feats: &Array2<f64>,
        instr: &[u32],
        resp: &[u32],
    ) -> Result<Vec<f64>> {
        let text = self.text_with_bos(instr, resp);
        let cache = net::forward(&self.params, &self.config, feats, &text)?;
        Ok(net::response_log_probs(&cache, 1 + instr.len()))
    }

    /// Sum of response-token negative log-likelihoods; when `grads` is given,
    /// also accumulate `weight * dNLL/dtheta` into the learnable groups.
    pub(crate) fn nll_and_backward(
        &self,
        feats: &Array2<f64>,
        instr: &[u32],
        resp: &[u32],
        weight: f64,
        grads: Option<&mut Gradients>,
    ) -> Result<f64> {
        if resp.is_empty() {
            return Err(Error::Model("cannot score an empty response".into()));
        }
        let text = self.text_with_bos(instr, resp);
        let resp_start = 1 + instr.len();
        let cache = net::forward(&self.params, &self.config, feats, &text)?;
        let lps = net::response_log_probs(&cache, resp_start);
        let loss = -lps.iter().sum::<f64>();
        if let Some(g) = grads {
            net::backward(&self.params, &self.config, &cache, resp_start, weight, g);
        }
        Ok(loss)
    }

    /// Gradient step with a fixed learning rate. Frozen groups must carry no
    /// gradient; learnable groups without a gradient are left untouched.
    pub fn apply_update(&mut self, grads: &Gradients, lr: f64) -> Result<()> {
        self.check_partition(grads)?;
        fn step(p: Vec<&mut [f64]>, g: Vec<&[f64]>, lr: f64) {
            for (ps, gs) in p.into_iter().zip(g) {
                for (pv, gv) in ps.iter_mut().zip(gs) {
                    *pv -= lr * gv;
                }
            }
        }
        if let Some(g) = grads.enc.as_ref() {
            step(self.params.enc.flats_mut(), g.flats(), lr);
        }
        if let Some(g) = grads.conn.as_ref() {
            step(self.params.conn.flats_mut(), g.flats(), lr);
        }
        if let Some(g) = grads.lm.as_ref() {
            step(self.params.lm.flats_mut(), g.flats(), lr);
        }
        Ok(())
    }

    /// Error if `grads` carries a gradient for a group the partition froze.
    pub(crate) fn check_partition(&self, grads: &Gradients) -> Result<()> {
        let p = self.partition;
        if grads.enc.is_some() && !p.enc_learnable() {
            return Err(Error::Model(format!(
                "gradient supplied for frozen encoder under {}",
                p.name()
            )));
        }
        if grads.conn.is_some() && !p.conn_learnable() {
            return Err(Error::Model(format!(
                "gradient supplied for frozen connector under {}",
                p.name()
            )));
        }
        if grads.lm.is_some() && !p.lm_learnable() {
            return Err(Error::Model(format!(
                "gradient supplied for frozen language model under {}",
                p.name()
            )));
        }
        Ok(())
    }

    // -----------------------------------------------------------------------
    // Generation
    // -----------------------------------------------------------------------

    /// Generate a response for the image/instruction pair. Stops at EOS, at
    /// `max_new_tokens`, or when the context window is exhausted.
    pub fn generate(
        &self,
        image: &SceneImage,
        instruction: &str,
        mode: DecodeMode,
        max_new_tokens: usize,
    ) -> Result<Generation> {
        if max_new_tokens == 0 {
            return Err(Error::Model("max_new_tokens must be positive".into()));
        }
        let feats = patch_features(image);
        let instr = self.vocab.encode(instruction);
        let tokens = self.decode_tokens(&feats, &instr, mode, max_new_tokens)?;
        let text = self.vocab.decode(&tokens);
        Ok(Generation { tokens, text })
    }

    pub(crate) fn decode_tokens(
        &self,
        feats: &Array2<f64>,
        instr: &[u32],
        mode: DecodeMode,
        max_new_tokens: usize,
    ) -> Result<Vec<u32>> {
        let prefix: Vec<u32> = std::iter::once(BOS).chain(instr.iter().copied()).collect();
        let prefix_len = NUM_PATCHES + prefix.len();
        if prefix_len + 1 > self.config.context {
            return Err(Error::Model(format!(
                "prompt occupies {prefix_len} positions, leaving no room in a {}-token context",
                self.config.context
            )));
        }

        let mut rng = match mode {
            DecodeMode::Greedy => None,
            DecodeMode::Sampled { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        };

        let mut dec = Decoder::new(&self.params, &self.config, feats);
        let mut logits = Array1::<f64>::zeros(self.config.vocab_size);
        for pos in 0..prefix_len {
            let tok = if pos >= NUM_PATCHES { Some(prefix[pos - NUM_PATCHES]) } else { None };
            logits = dec.step(pos, tok)?;
        }

        let mut out = Vec::new();
        loop {
            let next = match rng.as_mut() {
                None => argmax(&logits),
                Some(r) => sample_categorical(&logits, r),
            };
            out.push(next);
            if next == EOS || out.len() >= max_new_tokens {
                break;
            }
            let pos = prefix_len + out.len() - 1;
            if pos >= self.config.context {
                break; // context exhausted mid-generation
            }
            logits = dec.step(pos, Some(next))?;
        }
        Ok(out)
    }

    // -----------------------------------------------------------------------
    // Checkpoints
    // -----------------------------------------------------------------------

    /// Write a JSON checkpoint. `f64` values serialize via shortest-round-trip
    /// formatting, so save/load is bit-exact.
    pub fn save_checkpoint(&self, path: &std::path::Path) -> Result<()> {
        let file = CheckpointFile {
            schema_version: CHECKPOINT_SCHEMA,
            config: self.config,
            partition: self.partition,
            vocab: self.vocab.tokens().to_vec(),
            params: self.params.clone(),
        };
        let json = serde_json::to_string(&file)?;
        std::fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load_checkpoint(path: &std::path::Path) -> Result<ToyVlm> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let file: CheckpointFile = serde_json::from_str(&text)
            .map_err(|e| Error::Serde(format!("checkpoint {}: {e}", path.display())))?;
        if file.schema_version != CHECKPOINT_SCHEMA {
            return Err(Error::Model(format!(
                "unsupported checkpoint schema version {} (supported: {CHECKPOINT_SCHEMA})",
                file.schema_version
            )));
        }
        let vocab = Vocab::from_tokens(file.vocab)?;
        if vocab.size() != file.config.vocab_size {
            return Err(Error::Model(format!(
                "checkpoint vocab has {} tokens but config says {}",
                vocab.size(),
                file.config.vocab_size
            )));
        }
        file.config.validate()?;
        file.params.validate_shapes(&file.config)?;
        Ok(ToyVlm {
            config: file.config,
            vocab,
            params: file.params,
            partition: file.partition,
        })
    }

    // -----------------------------------------------------------------------
    // Gradient verification
    // -----------------------------------------------------------------------

    /// Compare analytic gradients against central finite differences for
    /// every parameter of every learnable group, on one teacher-forced
    /// sample. Returns the worst relative error per group.
    pub fn finite_difference_check(
        &mut self,
        feats: &Array2<f64>,
        instr: &[u32],
        resp: &[u32],
        eps: f64,
    ) -> Result<Vec<GradCheckGroup>> {
        let mut grads = Gradients::zeros(&self.config, self.partition);
        self.nll_and_backward(feats, instr, resp, 1.0, Some(&mut grads))?;

        let mut report = Vec::new();
        for group in [GradGroup::Enc, GradGroup::Conn, GradGroup::Lm] {
            let Some(analytic) = group.flats(&grads) else { continue };
            let analytic: Vec<Vec<f64>> =
                analytic.into_iter().map(|s| s.to_vec()).collect();
            let mut max_rel: f64 = 0.0;
            let mut checked = 0usize;
            for (ai, arr) in analytic.iter().enumerate() {
                for ei in 0..arr.len() {
                    let old = group.get(&self.params, ai, ei);
                    group.set(&mut self.params, ai, ei, old + eps);
                    let up = self.loss_only(feats, instr, resp)?;
                    group.set(&mut self.params, ai, ei, old - eps);
                    let down = self.loss_only(feats, instr, resp)?;
                    group.set(&mut self.params, ai, ei, old);
                    let fd = (up - down) / (2.0 * eps);
                    let a = arr[ei];
                    let denom = a.abs().max(fd.abs());
                    if denom > 1e-10 {
                        max_rel = max_rel.max((a - fd).abs() / denom);
                    }
                    checked += 1;
                }
            }
            report.push(GradCheckGroup { name: group.name(), checked, max_rel_err: max_rel });
        }
        Ok(report)
    }

    fn loss_only(&self, feats: &Array2<f64>, instr: &[u32], resp: &[u32]) -> Result<f64> {
        self.nll_and_backward(feats, instr, resp, 1.0, None)
    }
}

impl ResponseModel for ToyVlm {
    fn respond(&self, image: &SceneImage, instruction: &str) -> Result<String> {
        Ok(self.generate(image, instruction, DecodeMode::Greedy, DEFAULT_MAX_GEN)?.text)
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckGroup {
    pub name: &'static str,
    pub checked: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Copy)]
enum GradGroup {
    Enc,
    Conn,
    Lm,
}

impl GradGroup {
    fn name(self) -> &'static str {
        match self {
            GradGroup::Enc => "encoder",
            GradGroup::Conn => "connector",
            GradGroup::Lm => "language_model",
        }
    }

    fn flats(self, g: &Gradients) -> Option<Vec<&[f64]>> {
        match self {
            GradGroup::Enc => g.enc.as_ref().map(|p| p.flats()),
            GradGroup::Conn => g.conn.as_ref().map(|p| p.flats()),
            GradGroup::Lm => g.lm.as_ref().map(|p| p.flats()),
        }
    }

    fn get(self, p: &ParamSet, ai: usize, ei: usize) -> f64 {
        match self {
            GradGroup::Enc => p.enc.flats()[ai][ei],
            GradGroup::Conn => p.conn.flats()[ai][ei],
            GradGroup::Lm => p.lm.flats()[ai][ei],
        }
    }

    fn set(self, p: &mut ParamSet, ai: usize, ei: usize, v: f64) {
        match self {
            GradGroup::Enc => p.enc.flats_mut()[ai][ei] = v,
            GradGroup::Conn => p.conn.flats_mut()[ai][ei] = v,
            GradGroup::Lm => p.lm.flats_mut()[ai][ei] = v,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    schema_version: u32,
    config: ModelConfig,
    partition: PartitionMode,
    vocab: Vec<String>,
    params: ParamSet,
}

fn argmax(logits: &Array1<f64>) -> u32 {
    let mut best = 0usize;
    for i in 1..logits.len() {
        if logits[i] > logits[best] {
            best = i;
        }
    }
    best as u32
}

fn sample_categorical(logits: &Array1<f64>, rng: &mut ChaCha8Rng) -> u32 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    let mut r = rng.random::<f64>() * total;
    for (i, e) in exps.iter().enumerate() {
        r -= e;
        if r <= 0.0 {
            return i as u32;
        }
    }
    (exps.len() - 1) as u32
}

// ---------------------------------------------------------------------------
// Incremental decoder with per-layer KV caches
// ---------------------------------------------------------------------------

struct Decoder<'a> {
    p: &'a ParamSet,
    cfg: &'a ModelConfig,
    img: Array2<f64>,
    img_mean: Array1<f64>,
    k_cache: Vec<Array2<f64>>,
    v_cache: Vec<Array2<f64>>,
}

fn ln_vec(x: &Array1<f64>, g: &Array1<f64>, b: &Array1<f64>) -> Array1<f64> {
    let d = x.len();
    let mu = x.mean().unwrap();
    let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
    let inv = 1.0 / (var + 1e-5).sqrt();
    Array1::from_shape_fn(d, |j| (x[j] - mu) * inv * g[j] + b[j])
}

impl<'a> Decoder<'a> {
    fn new(p: &'a ParamSet, cfg: &'a ModelConfig, feats: &Array2<f64>) -> Decoder<'a> {
        let e = feats.dot(&p.enc.w) + &p.enc.b;
        let img = e.dot(&p.conn.w) + &p.conn.b;
        let img_mean = img.mean_axis(ndarray::Axis(0)).expect("at least one patch row");
        Decoder {
            p,
            cfg,
            img,
            img_mean,
            k_cache: (0..cfg.n_layers).map(|_| Array2::zeros((0, cfg.d_model))).collect(),
            v_cache: (0..cfg.n_layers).map(|_| Array2::zeros((0, cfg.d_model))).collect(),
        }
    }

    /// Feed the token at `pos` (image row when `tok` is None) and return the
    /// next-token logits.
    fn step(&mut self, pos: usize, tok: Option<u32>) -> Result<Array1<f64>> {
        let cfg = self.cfg;
        if pos >= cfg.context {
            return Err(Error::Model(format!(
                "position {pos} outside the {}-token context",
                cfg.context
            )));
        }
        let mut x: Array1<f64> = match tok {
            None => self.img.row(pos).to_owned(),
            Some(t) => {
                if t as usize >= cfg.vocab_size {
                    return Err(Error::Model(format!("token id {t} outside the vocabulary")));
                }
                // Same early fusion as the batch forward: every text position
                // carries the mean image embedding.
                &self.p.lm.tok.row(t as usize) + &self.img_mean
            }
        };
        x = x + &self.p.lm.pos.row(pos);

        let dh = cfg.d_head();
        let scale = 1.0 / (dh as f64).sqrt();
        for (li, lp) in self.p.lm.layers.iter().enumerate() {
            let a1 = ln_vec(&x, &lp.ln1_g, &lp.ln1_b);
            let q = a1.dot(&lp.wq) + &lp.bq;
            let k = a1.dot(&lp.wk) + &lp.bk;
            let v = a1.dot(&lp.wv) + &lp.bv;
            self.k_cache[li].push(ndarray::Axis(0), k.view()).expect("kv cache push");
            self.v_cache[li].push(ndarray::Axis(0), v.view()).expect("kv cache push");
            let t = self.k_cache[li].nrows();

            let mut ctx = Array1::<f64>::zeros(cfg.d_model);
            for h in 0..cfg.n_heads {
                let span = h * dh..(h + 1) * dh;
                let qh = q.slice(s![span.clone()]);
                // scores over all cached positions
                let mut scores = Vec::with_capacity(t);
                let mut row_max = f64::NEG_INFINITY;
                for r in 0..t {
                    let kh = self.k_cache[li].slice(s![r, span.clone()]);
                    let sc = qh.dot(&kh) * scale;
                    row_max = row_max.max(sc);
                    scores.push(sc);
                }
                let mut denom = 0.0;
                for sc in scores.iter_mut() {
                    *sc = (*sc - row_max).exp();
                    denom += *sc;
                }
                for (r, sc) in scores.iter().enumerate() {
                    let w = sc / denom;
                    let vh = self.v_cache[li].slice(s![r, span.clone()]);
                    for (j, vv) in vh.iter().enumerate() {
                        ctx[h * dh + j] += w * vv;
                    }
                }
            }
            let attn_out = ctx.dot(&lp.wo) + &lp.bo;
            x = x + attn_out;

            let a2 = ln_vec(&x, &lp.ln2_g, &lp.ln2_b);
            let h1 = a2.dot(&lp.w1) + &lp.b1;
            let r = h1.mapv(|v| v.max(0.0));
            let h2 = r.dot(&lp.w2) + &lp.b2;
            x = x + h2;
        }
        let hf = ln_vec(&x, &self.p.lm.lnf_g, &self.p.lm.lnf_b);
        Ok(hf.dot(&self.p.lm.head_w) + &self.p.lm.head_b)
    }
}
