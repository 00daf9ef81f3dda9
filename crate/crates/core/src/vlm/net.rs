//! Network internals: parameter containers, the cached forward pass, and the
//! hand-written backward pass.
//!
//! Architecture, per sample: 16 patch-feature rows go through a linear
//! encoder and a linear connector into model space; the text tokens (BOS,
//! instruction, response, EOS) are embedded and concatenated after them;
//! learned absolute positions are added; the sequence runs through pre-LN
//! causal transformer blocks (attention + ReLU MLP); a final layer norm and a
//! linear head produce next-token logits.
//!
//! Everything is `f64`. The backward pass mirrors the forward step by step
//! and is validated against central finite differences (see
//! [`finite_difference_check`](super::ToyVlm::finite_difference_check)).

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vlm::features::{FEAT_DIM, NUM_PATCHES};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_enc: usize,
    pub context: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { vocab_size: 0, d_model: 64, n_layers: 2, n_heads: 2, d_enc: 32, context: 64 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 3 {
            return Err(Error::Config("vocab_size must cover the three specials".into()));
        }
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.d_enc == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.context < NUM_PATCHES + 2 {
            return Err(Error::Config(format!(
                "context {} cannot hold the {NUM_PATCHES} image tokens plus text",
                self.context
            )));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Which parameter groups receive gradient updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    /// Connector and language model learn; the encoder stays frozen.
    LlavaLike,
    /// Only the connector learns.
    MinigptLike,
    /// Everything learns.
    AllLearnable,
}

impl PartitionMode {
    pub fn enc_learnable(self) -> bool {
        matches!(self, PartitionMode::AllLearnable)
    }

    pub fn conn_learnable(self) -> bool {
        true
    }

    pub fn lm_learnable(self) -> bool {
        matches!(self, PartitionMode::LlavaLike | PartitionMode::AllLearnable)
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "llava_like" => Ok(PartitionMode::LlavaLike),
            "minigpt_like" => Ok(PartitionMode::MinigptLike),
            "all_learnable" => Ok(PartitionMode::AllLearnable),
            other => Err(Error::Config(format!(
                "unknown partition mode '{other}' (llava_like, minigpt_like, all_learnable)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PartitionMode::LlavaLike => "llava_like",
            PartitionMode::MinigptLike => "minigpt_like",
            PartitionMode::AllLearnable => "all_learnable",
        }
    }
}

// ---------------------------------------------------------------------------
// Parameters. The same containers double as gradient accumulators.
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub w: Array2<f64>, // (FEAT_DIM, d_enc)
    pub b: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConnectorParams {
    pub w: Array2<f64>, // (d_enc, d_model)
    pub b: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub ln1_g: Array1<f64>,
    pub ln1_b: Array1<f64>,
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub ln2_g: Array1<f64>,
    pub ln2_b: Array1<f64>,
    pub w1: Array2<f64>, // (d, 4d)
    pub b1: Array1<f64>,
    pub w2: Array2<f64>, // (4d, d)
    pub b2: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmParams {
    pub tok: Array2<f64>, // (vocab, d)
    pub pos: Array2<f64>, // (context, d)
    pub layers: Vec<LayerParams>,
    pub lnf_g: Array1<f64>,
    pub lnf_b: Array1<f64>,
    pub head_w: Array2<f64>, // (d, vocab)
    pub head_b: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub enc: EncoderParams,
    pub conn: ConnectorParams,
    pub lm: LmParams,
}

fn normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    // Box-Muller; clamp the first uniform away from zero
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random();
    std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn randn2(rng: &mut ChaCha8Rng, shape: (usize, usize), std: f64) -> Array2<f64> {
    Array2::from_shape_fn(shape, |_| normal(rng, std))
}

impl EncoderParams {
    fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        EncoderParams {
            w: randn2(rng, (FEAT_DIM, cfg.d_enc), 0.02),
            b: Array1::zeros(cfg.d_enc),
        }
    }

    pub fn zeros(cfg: &ModelConfig) -> Self {
        EncoderParams { w: Array2::zeros((FEAT_DIM, cfg.d_enc)), b: Array1::zeros(cfg.d_enc) }
    }

    pub fn flats(&self) -> Vec<&[f64]> {
        vec![self.w.as_slice().unwrap(), self.b.as_slice().unwrap()]
    }

    pub fn flats_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.w.as_slice_mut().unwrap(), self.b.as_slice_mut().unwrap()]
    }
}

impl ConnectorParams {
    fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        ConnectorParams {
            w: randn2(rng, (cfg.d_enc, cfg.d_model), 0.02),
            b: Array1::zeros(cfg.d_model),
        }
    }

    pub fn zeros(cfg: &ModelConfig) -> Self {
        ConnectorParams {
            w: Array2::zeros((cfg.d_enc, cfg.d_model)),
            b: Array1::zeros(cfg.d_model),
        }
    }

    pub fn flats(&self) -> Vec<&[f64]> {
        vec![self.w.as_slice().unwrap(), self.b.as_slice().unwrap()]
    }

    pub fn flats_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.w.as_slice_mut().unwrap(), self.b.as_slice_mut().unwrap()]
    }
}

impl LayerParams {
    fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.d_model;
        LayerParams {
            ln1_g: Array1::ones(d),
            ln1_b: Array1::zeros(d),
            wq: randn2(rng, (d, d), 0.02),
            bq: Array1::zeros(d),
            wk: randn2(rng, (d, d), 0.02),
            bk: Array1::zeros(d),
            wv: randn2(rng, (d, d), 0.02),
            bv: Array1::zeros(d),
            wo: randn2(rng, (d, d), 0.02),
            bo: Array1::zeros(d),
            ln2_g: Array1::ones(d),
            ln2_b: Array1::zeros(d),
            w1: randn2(rng, (d, 4 * d), 0.02),
            b1: Array1::zeros(4 * d),
            w2: randn2(rng, (4 * d, d), 0.02),
            b2: Array1::zeros(d),
        }
    }

    fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        LayerParams {
            ln1_g: Array1::zeros(d),
            ln1_b: Array1::zeros(d),
            wq: Array2::zeros((d, d)),
            bq: Array1::zeros(d),
            wk: Array2::zeros((d, d)),
            bk: Array1::zeros(d),
            wv: Array2::zeros((d, d)),
            bv: Array1::zeros(d),
            wo: Array2::zeros((d, d)),
            bo: Array1::zeros(d),
            ln2_g: Array1::zeros(d),
            ln2_b: Array1::zeros(d),
            w1: Array2::zeros((d, 4 * d)),
            b1: Array1::zeros(4 * d),
            w2: Array2::zeros((4 * d, d)),
            b2: Array1::zeros(d),
        }
    }

    fn flats(&self) -> Vec<&[f64]> {
        vec![
            self.ln1_g.as_slice().unwrap(),
            self.ln1_b.as_slice().unwrap(),
            self.wq.as_slice().unwrap(),
            self.bq.as_slice().unwrap(),
            self.wk.as_slice().unwrap(),
            self.bk.as_slice().unwrap(),
            self.wv.as_slice().unwrap(),
            self.bv.as_slice().unwrap(),
            self.wo.as_slice().unwrap(),
            self.bo.as_slice().unwrap(),
            self.ln2_g.as_slice().unwrap(),
            self.ln2_b.as_slice().unwrap(),
            self.w1.as_slice().unwrap(),
            self.b1.as_slice().unwrap(),
            self.w2.as_slice().unwrap(),
            self.b2.as_slice().unwrap(),
        ]
    }

    fn flats_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.ln1_g.as_slice_mut().unwrap(),
            self.ln1_b.as_slice_mut().unwrap(),
            self.wq.as_slice_mut().unwrap(),
            self.bq.as_slice_mut().unwrap(),
            self.wk.as_slice_mut().unwrap(),
            self.bk.as_slice_mut().unwrap(),
            self.wv.as_slice_mut().unwrap(),
            self.bv.as_slice_mut().unwrap(),
            self.wo.as_slice_mut().unwrap(),
            self.bo.as_slice_mut().unwrap(),
            self.ln2_g.as_slice_mut().unwrap(),
            self.ln2_b.as_slice_mut().unwrap(),
            self.w1.as_slice_mut().unwrap(),
            self.b1.as_slice_mut().unwrap(),
            self.w2.as_slice_mut().unwrap(),
            self.b2.as_slice_mut().unwrap(),
        ]
    }
}

impl LmParams {
    fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.d_model;
        LmParams {
            tok: randn2(rng, (cfg.vocab_size, d), 0.02),
            pos: randn2(rng, (cfg.context, d), 0.01),
            layers: (0..cfg.n_layers).map(|_| LayerParams::init(cfg, rng)).collect(),
            lnf_g: Array1::ones(d),
            lnf_b: Array1::zeros(d),
            // zero head: an untrained model emits exactly uniform logits
            head_w: Array2::zeros((d, cfg.vocab_size)),
            head_b: Array1::zeros(cfg.vocab_size),
        }
    }

    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        LmParams {
            tok: Array2::zeros((cfg.vocab_size, d)),
            pos: Array2::zeros((cfg.context, d)),
            layers: (0..cfg.n_layers).map(|_| LayerParams::zeros(cfg)).collect(),
            lnf_g: Array1::zeros(d),
            lnf_b: Array1::zeros(d),
            head_w: Array2::zeros((d, cfg.vocab_size)),
            head_b: Array1::zeros(cfg.vocab_size),
        }
    }

    pub fn flats(&self) -> Vec<&[f64]> {
        let mut v = vec![self.tok.as_slice().unwrap(), self.pos.as_slice().unwrap()];
        for l in &self.layers {
            v.extend(l.flats());
        }
        v.push(self.lnf_g.as_slice().unwrap());
        v.push(self.lnf_b.as_slice().unwrap());
        v.push(self.head_w.as_slice().unwrap());
        v.push(self.head_b.as_slice().unwrap());
        v
    }

    pub fn flats_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = Vec::new();
        v.push(self.tok.as_slice_mut().unwrap());
        v.push(self.pos.as_slice_mut().unwrap());
        for l in &mut self.layers {
            v.extend(l.flats_mut());
        }
        v.push(self.lnf_g.as_slice_mut().unwrap());
        v.push(self.lnf_b.as_slice_mut().unwrap());
        v.push(self.head_w.as_slice_mut().unwrap());
        v.push(self.head_b.as_slice_mut().unwrap());
        v
    }
}

impl ParamSet {
    pub fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        ParamSet {
            enc: EncoderParams::init(cfg, rng),
            conn: ConnectorParams::init(cfg, rng),
            lm: LmParams::init(cfg, rng),
        }
    }

    /// Every parameter array across all three groups, in a fixed order.
    pub fn flats(&self) -> Vec<&[f64]> {
        let mut all = self.enc.flats();
        all.extend(self.conn.flats());
        all.extend(self.lm.flats());
        all
    }

    pub fn validate_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let d = cfg.d_model;
        let checks: Vec<(&str, &[usize], Vec<usize>)> = vec![
            ("enc.w", self.enc.w.shape(), vec![FEAT_DIM, cfg.d_enc]),
            ("conn.w", self.conn.w.shape(), vec![cfg.d_enc, d]),
            ("lm.tok", self.lm.tok.shape(), vec![cfg.vocab_size, d]),
            ("lm.pos", self.lm.pos.shape(), vec![cfg.context, d]),
            ("lm.head_w", self.lm.head_w.shape(), vec![d, cfg.vocab_size]),
        ];
        for (name, got, want) in checks {
            if got != want.as_slice() {
                return Err(Error::Model(format!(
                    "checkpoint shape mismatch for {name}: got {got:?}, want {want:?}"
                )));
            }
        }
        if self.lm.layers.len() != cfg.n_layers {
            return Err(Error::Model(format!(
                "checkpoint has {} layers, config says {}",
                self.lm.layers.len(),
                cfg.n_layers
            )));
        }
        Ok(())
    }
}

/// Per-group gradient accumulators. `None` marks a frozen group; handing a
/// `Some` gradient for a frozen group to the update step is an error.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub enc: Option<EncoderParams>,
    pub conn: Option<ConnectorParams>,
    pub lm: Option<LmParams>,
}

impl Gradients {
    /// Zeroed accumulators for the learnable groups of `partition`.
    pub fn zeros(cfg: &ModelConfig, partition: PartitionMode) -> Self {
        Gradients {
            enc: partition.enc_learnable().then(|| EncoderParams::zeros(cfg)),
            conn: partition.conn_learnable().then(|| ConnectorParams::zeros(cfg)),
            lm: partition.lm_learnable().then(|| LmParams::zeros(cfg)),
        }
    }

    pub fn scale(&mut self, factor: f64) {
        let apply = |slices: Vec<&mut [f64]>| {
            for s in slices {
                for v in s {
                    *v *= factor;
                }
            }
        };
        if let Some(e) = self.enc.as_mut() {
            apply(e.flats_mut());
        }
        if let Some(c) = self.conn.as_mut() {
            apply(c.flats_mut());
        }
        if let Some(l) = self.lm.as_mut() {
            apply(l.flats_mut());
        }
    }
}

// ---------------------------------------------------------------------------
// Forward pass with cache
// ---------------------------------------------------------------------------

pub(crate) struct LnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

fn layer_norm(x: &Array2<f64>, g: &Array1<f64>, b: &Array1<f64>) -> (Array2<f64>, LnCache) {
    let (s, d) = (x.nrows(), x.ncols());
    let mut y = Array2::<f64>::zeros((s, d));
    let mut xhat = Array2::<f64>::zeros((s, d));
    let mut inv_std = Array1::<f64>::zeros(s);
    for i in 0..s {
        let row = x.row(i);
        let mu = row.mean().unwrap();
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std[i] = is;
        for j in 0..d {
            let xh = (x[[i, j]] - mu) * is;
            xhat[[i, j]] = xh;
            y[[i, j]] = xh * g[j] + b[j];
        }
    }
    (y, LnCache { xhat, inv_std })
}

/// Returns `dx` and accumulates `dg`/`db`.
fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    g: &Array1<f64>,
    dg: &mut Array1<f64>,
    db: &mut Array1<f64>,
) -> Array2<f64> {
    let (s, d) = (dy.nrows(), dy.ncols());
    let mut dx = Array2::<f64>::zeros((s, d));
    for i in 0..s {
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..d {
            let dyv = dy[[i, j]];
            let xh = cache.xhat[[i, j]];
            dg[j] += dyv * xh;
            db[j] += dyv;
            let dxhat = dyv * g[j];
            mean_dxhat += dxhat;
            mean_dxhat_xhat += dxhat * xh;
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        for j in 0..d {
            let dxhat = dy[[i, j]] * g[j];
            dx[[i, j]] =
                cache.inv_std[i] * (dxhat - mean_dxhat - cache.xhat[[i, j]] * mean_dxhat_xhat);
        }
    }
    dx
}

pub(crate) struct LayerCache {
    a1: Array2<f64>,
    ln1: LnCache,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    att: Vec<Array2<f64>>, // per head, (S, S)
    ctx: Array2<f64>,
    a2: Array2<f64>,
    ln2: LnCache,
    h1: Array2<f64>,
    r: Array2<f64>,
}

pub(crate) struct Cache {
    pub feats: Array2<f64>,
    pub e: Array2<f64>,
    pub text: Vec<u32>,
    layers: Vec<LayerCache>,
    hf: Array2<f64>,
    lnf: LnCache,
    pub logits: Array2<f64>,
}

impl Cache {
    pub fn seq_len(&self) -> usize {
        NUM_PATCHES + self.text.len()
    }
}

fn softmax_rows_masked(scores: &mut Array2<f64>) {
    // causal mask then row softmax; assumes a square (S, S) score matrix
    let s = scores.nrows();
    for i in 0..s {
        for j in (i + 1)..s {
            scores[[i, j]] = f64::NEG_INFINITY;
        }
        let row_max =
            (0..=i).map(|j| scores[[i, j]]).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for j in 0..s {
            let v = if scores[[i, j]] == f64::NEG_INFINITY {
                0.0
            } else {
                (scores[[i, j]] - row_max).exp()
            };
            scores[[i, j]] = v;
            sum += v;
        }
        for j in 0..s {
            scores[[i, j]] /= sum;
        }
    }
}

/// Run the full forward pass over `[image tokens] ++ text`, caching every
/// intermediate needed by the backward pass.
pub(crate) fn forward(p: &ParamSet, cfg: &ModelConfig, feats: &Array2<f64>, text: &[u32]) -> Result<Cache> {
    let seq = NUM_PATCHES + text.len();
    if seq > cfg.context {
        return Err(Error::Model(format!(
            "sequence length {seq} exceeds the model context {}",
            cfg.context
        )));
    }
    if feats.shape() != [NUM_PATCHES, FEAT_DIM] {
        return Err(Error::Model(format!(
            "expected feature shape [{NUM_PATCHES}, {FEAT_DIM}], got {:?}",
            feats.shape()
        )));
    }
    for &t in text {
        if t as usize >= cfg.vocab_size {
            return Err(Error::Model(format!("token id {t} outside the vocabulary")));
        }
    }

    let e = feats.dot(&p.enc.w) + &p.enc.b;
    let img_rows = e.dot(&p.conn.w) + &p.conn.b;
    // Mean image embedding, added to every text position below. Attention is
    // the only other image->text route, and being multiplicative it can pin
    // itself shut at small scale; this additive path keeps the image visible
    // to every prediction without introducing any new parameters.
    let img_mean = img_rows.mean_axis(Axis(0)).expect("at least one patch row");

    let d = cfg.d_model;
    let mut x = Array2::<f64>::zeros((seq, d));
    for i in 0..NUM_PATCHES {
        x.row_mut(i).assign(&img_rows.row(i));
    }
    for (i, &t) in text.iter().enumerate() {
        let mut row = x.row_mut(NUM_PATCHES + i);
        row.assign(&p.lm.tok.row(t as usize));
        row += &img_mean;
    }
    x = x + &p.lm.pos.slice(s![..seq, ..]);

    let dh = cfg.d_head();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for lp in &p.lm.layers {
        let (a1, ln1) = layer_norm(&x, &lp.ln1_g, &lp.ln1_b);
        let q = a1.dot(&lp.wq) + &lp.bq;
        let k = a1.dot(&lp.wk) + &lp.bk;
        let v = a1.dot(&lp.wv) + &lp.bv;

        let mut ctx = Array2::<f64>::zeros((seq, d));
        let mut att = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let qh = q.slice(cols);
            let kh = k.slice(cols);
            let vh = v.slice(cols);
            let mut scores = qh.dot(&kh.t());
            scores *= scale;
            softmax_rows_masked(&mut scores);
            let ctx_h = scores.dot(&vh);
            ctx.slice_mut(cols).assign(&ctx_h);
            att.push(scores);
        }
        let attn_out = ctx.dot(&lp.wo) + &lp.bo;
        let x_mid = &x + &attn_out;

        let (a2, ln2) = layer_norm(&x_mid, &lp.ln2_g, &lp.ln2_b);
        let h1 = a2.dot(&lp.w1) + &lp.b1;
        let r = h1.mapv(|v| v.max(0.0));
        let h2 = r.dot(&lp.w2) + &lp.b2;
        let x_next = &x_mid + &h2;

        layers.push(LayerCache { a1, ln1, q, k, v, att, ctx, a2, ln2, h1, r });
        x = x_next;
    }

    let (hf, lnf) = layer_norm(&x, &p.lm.lnf_g, &p.lm.lnf_b);
    let logits = hf.dot(&p.lm.head_w) + &p.lm.head_b;

    Ok(Cache { feats: feats.clone(), e, text: text.to_vec(), layers, hf, lnf, logits })
}

/// Per-token log-probabilities of the response tokens under the cached
/// logits. `resp_start` is the index of the first response token within
/// `cache.text`.
pub(crate) fn response_log_probs(cache: &Cache, resp_start: usize) -> Vec<f64> {
    let v = cache.logits.ncols();
    let mut out = Vec::new();
    for ti in resp_start..cache.text.len() {
        let pred = NUM_PATCHES + ti - 1;
        let row = cache.logits.row(pred);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|&l| (l - m).exp()).sum::<f64>().ln();
        let target = cache.text[ti] as usize;
        debug_assert!(target < v);
        out.push(row[target] - lse);
    }
    out
}

/// Seed `dlogits` with `weight * (softmax - onehot)` at the positions that
/// predict response tokens, then run the full backward pass, accumulating
/// into `grads`. Frozen groups are skipped.
pub(crate) fn backward(
    p: &ParamSet,
    cfg: &ModelConfig,
    cache: &Cache,
    resp_start: usize,
    weight: f64,
    grads: &mut Gradients,
) {
    let seq = cache.seq_len();
    let vocab = cfg.vocab_size;
    let mut dlogits = Array2::<f64>::zeros((seq, vocab));
    for ti in resp_start..cache.text.len() {
        let pred = NUM_PATCHES + ti - 1;
        let row = cache.logits.row(pred);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&l| (l - m).exp()).collect();
        let sum: f64 = exps.iter().sum();
        for j in 0..vocab {
            dlogits[[pred, j]] += weight * exps[j] / sum;
        }
        dlogits[[pred, cache.text[ti] as usize]] -= weight;
    }

    // head and final norm
    if let Some(lm) = grads.lm.as_mut() {
        lm.head_w = &lm.head_w + &cache.hf.t().dot(&dlogits);
        lm.head_b = &lm.head_b + &dlogits.sum_axis(Axis(0));
    }
    let dhf = dlogits.dot(&p.lm.head_w.t());
    let mut dlnf_g = Array1::<f64>::zeros(cfg.d_model);
    let mut dlnf_b = Array1::<f64>::zeros(cfg.d_model);
    let mut dx = layer_norm_backward(&dhf, &cache.lnf, &p.lm.lnf_g, &mut dlnf_g, &mut dlnf_b);
    if let Some(lm) = grads.lm.as_mut() {
        lm.lnf_g += &dlnf_g;
        lm.lnf_b += &dlnf_b;
    }

    let d = cfg.d_model;
    let dh = cfg.d_head();
    let scale = 1.0 / (dh as f64).sqrt();

    for (li, lp) in p.lm.layers.iter().enumerate().rev() {
        let lc = &cache.layers[li];

        // MLP branch
        let dh2 = &dx; // residual: x_next = x_mid + h2
        let dw2 = lc.r.t().dot(dh2);
        let db2 = dh2.sum_axis(Axis(0));
        let mut dh1 = dh2.dot(&lp.w2.t());
        ndarray::Zip::from(&mut dh1).and(&lc.h1).for_each(|g, &h| {
            if h <= 0.0 {
                *g = 0.0;
            }
        });
        let dw1 = lc.a2.t().dot(&dh1);
        let db1 = dh1.sum_axis(Axis(0));
        let da2 = dh1.dot(&lp.w1.t());
        let mut dln2_g = Array1::<f64>::zeros(d);
        let mut dln2_b = Array1::<f64>::zeros(d);
        let dx_mid_ln = layer_norm_backward(&da2, &lc.ln2, &lp.ln2_g, &mut dln2_g, &mut dln2_b);
        let dx_mid = &dx + &dx_mid_ln;

        // attention branch
        let dattn_out = &dx_mid; // residual: x_mid = x + attn_out
        let dwo = lc.ctx.t().dot(dattn_out);
        let dbo = dattn_out.sum_axis(Axis(0));
        let dctx = dattn_out.dot(&lp.wo.t());

        let mut dq = Array2::<f64>::zeros((seq, d));
        let mut dk = Array2::<f64>::zeros((seq, d));
        let mut dv = Array2::<f64>::zeros((seq, d));
        for h in 0..cfg.n_heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let att = &lc.att[h];
            let dctx_h = dctx.slice(cols);
            let vh = lc.v.slice(cols);
            let datt = dctx_h.dot(&vh.t());
            let dvh = att.t().dot(&dctx_h);

            // softmax backward per row: a * (da - sum(da * a))
            let mut dscores = Array2::<f64>::zeros((seq, seq));
            for i in 0..seq {
                let mut dot = 0.0;
                for j in 0..seq {
                    dot += datt[[i, j]] * att[[i, j]];
                }
                for j in 0..seq {
                    dscores[[i, j]] = att[[i, j]] * (datt[[i, j]] - dot);
                }
            }
            let qh = lc.q.slice(cols);
            let kh = lc.k.slice(cols);
            let mut dqh = dscores.dot(&kh);
            dqh *= scale;
            let mut dkh = dscores.t().dot(&qh);
            dkh *= scale;
            dq.slice_mut(cols).assign(&dqh);
            dk.slice_mut(cols).assign(&dkh);
            dv.slice_mut(cols).assign(&dvh);
        }

        let dwq = lc.a1.t().dot(&dq);
        let dbq = dq.sum_axis(Axis(0));
        let dwk = lc.a1.t().dot(&dk);
        let dbk = dk.sum_axis(Axis(0));
        let dwv = lc.a1.t().dot(&dv);
        let dbv = dv.sum_axis(Axis(0));
        let da1 = dq.dot(&lp.wq.t()) + dk.dot(&lp.wk.t()) + dv.dot(&lp.wv.t());

        let mut dln1_g = Array1::<f64>::zeros(d);
        let mut dln1_b = Array1::<f64>::zeros(d);
        let dx_ln1 = layer_norm_backward(&da1, &lc.ln1, &lp.ln1_g, &mut dln1_g, &mut dln1_b);

        if let Some(lm) = grads.lm.as_mut() {
            let gl = &mut lm.layers[li];
            gl.w2 += &dw2;
            gl.b2 += &db2;
            gl.w1 += &dw1;
            gl.b1 += &db1;
            gl.ln2_g += &dln2_g;
            gl.ln2_b += &dln2_b;
            gl.wo += &dwo;
            gl.bo += &dbo;
            gl.wq += &dwq;
            gl.bq += &dbq;
            gl.wk += &dwk;
            gl.bk += &dbk;
            gl.wv += &dwv;
            gl.bv += &dbv;
            gl.ln1_g += &dln1_g;
            gl.ln1_b += &dln1_b;
        }

        dx = dx_mid + dx_ln1;
    }

    // embeddings and the visual path
    if let Some(lm) = grads.lm.as_mut() {
        for i in 0..seq {
            for j in 0..d {
                lm.pos[[i, j]] += dx[[i, j]];
            }
        }
        for (i, &t) in cache.text.iter().enumerate() {
            for j in 0..d {
                lm.tok[[t as usize, j]] += dx[[NUM_PATCHES + i, j]];
            }
        }
    }
    if grads.conn.is_some() || grads.enc.is_some() {
        // Each image row feeds its own position plus, via the mean, every
        // text position.
        let fused = dx.slice(s![NUM_PATCHES.., ..]).sum_axis(Axis(0)) / NUM_PATCHES as f64;
        let dimg = &dx.slice(s![..NUM_PATCHES, ..]) + &fused;
        if let Some(conn) = grads.conn.as_mut() {
            conn.w = &conn.w + &cache.e.t().dot(&dimg);
            conn.b = &conn.b + &dimg.sum_axis(Axis(0));
        }
        if let Some(enc) = grads.enc.as_mut() {
            let de = dimg.dot(&p.conn.w.t());
            enc.w = &enc.w + &cache.feats.t().dot(&de);
            enc.b = &enc.b + &de.sum_axis(Axis(0));
        }
    }
}
