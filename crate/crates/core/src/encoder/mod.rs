//! Transformer encoder with a `[CLS]` linear decoder and a tied MLM head.
//!
//! BERT-style post-layer-norm blocks with GELU feedforward layers. Forward
//! passes can record their intermediates; [`Model::backward`] then computes
//! exact reverse-mode gradients for every parameter. All arithmetic is
//! `f64`; parameter values are kept representable in `f32` so checkpoints
//! round-trip exactly.

mod checkpoint;
pub mod tensor;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokenizer::TokenizedSequence;
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use tensor::{matmul, matmul_nt, matmul_nt_acc, matmul_tn_acc, Mat};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("backward requested on a forward pass that did not record its graph")]
    GraphNotRecorded,
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint configuration does not match: {0}")]
    ConfigMismatch(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

const LN_EPS: f64 = 1e-12;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_tokens: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub feedforward_dim: usize,
    pub num_phenotypes: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 2000,
            max_tokens: 256,
            hidden_dim: 128,
            num_layers: 2,
            num_heads: 4,
            feedforward_dim: 256,
            num_phenotypes: 4,
            dropout: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("max_tokens", self.max_tokens),
            ("hidden_dim", self.hidden_dim),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("feedforward_dim", self.feedforward_dim),
            ("num_phenotypes", self.num_phenotypes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ModelError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::InvalidConfig("dropout must be in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub wq: Mat,
    pub bq: Mat,
    pub wk: Mat,
    pub bk: Mat,
    pub wv: Mat,
    pub bv: Mat,
    pub wo: Mat,
    pub bo: Mat,
    pub ln1_g: Mat,
    pub ln1_b: Mat,
    pub w1: Mat,
    pub b1: Mat,
    pub w2: Mat,
    pub b2: Mat,
    pub ln2_g: Mat,
    pub ln2_b: Mat,
}

impl LayerParams {
    fn shaped(h: usize, f: usize, weight: &mut impl FnMut(usize, usize) -> Mat) -> Self {
        Self {
            wq: weight(h, h),
            bq: Mat::zeros(1, h),
            wk: weight(h, h),
            bk: Mat::zeros(1, h),
            wv: weight(h, h),
            bv: Mat::zeros(1, h),
            wo: weight(h, h),
            bo: Mat::zeros(1, h),
            ln1_g: Mat::filled(1, h, 1.0),
            ln1_b: Mat::zeros(1, h),
            w1: weight(h, f),
            b1: Mat::zeros(1, f),
            w2: weight(f, h),
            b2: Mat::zeros(1, h),
            ln2_g: Mat::filled(1, h, 1.0),
            ln2_b: Mat::zeros(1, h),
        }
    }

    fn named(&self) -> [(&'static str, &Mat); 16] {
        [
            ("wq", &self.wq),
            ("bq", &self.bq),
            ("wk", &self.wk),
            ("bk", &self.bk),
            ("wv", &self.wv),
            ("bv", &self.bv),
            ("wo", &self.wo),
            ("bo", &self.bo),
            ("ln1_g", &self.ln1_g),
            ("ln1_b", &self.ln1_b),
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
            ("ln2_g", &self.ln2_g),
            ("ln2_b", &self.ln2_b),
        ]
    }

    fn named_mut(&mut self) -> [(&'static str, &mut Mat); 16] {
        [
            ("wq", &mut self.wq),
            ("bq", &mut self.bq),
            ("wk", &mut self.wk),
            ("bk", &mut self.bk),
            ("wv", &mut self.wv),
            ("bv", &mut self.bv),
            ("wo", &mut self.wo),
            ("bo", &mut self.bo),
            ("ln1_g", &mut self.ln1_g),
            ("ln1_b", &mut self.ln1_b),
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
            ("ln2_g", &mut self.ln2_g),
            ("ln2_b", &mut self.ln2_b),
        ]
    }
}

/// All trainable tensors. Gradients use the same layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParameters {
    /// vocab x hidden; also the transposed MLM projection.
    pub tok_emb: Mat,
    /// max_tokens x hidden.
    pub pos_emb: Mat,
    pub emb_ln_g: Mat,
    pub emb_ln_b: Mat,
    pub layers: Vec<LayerParams>,
    /// hidden x phenotypes.
    pub dec_w: Mat,
    pub dec_b: Mat,
    pub mlm_b: Mat,
}

impl ModelParameters {
    fn shaped(cfg: &ModelConfig, mut weight: impl FnMut(usize, usize) -> Mat) -> Self {
        let h = cfg.hidden_dim;
        Self {
            tok_emb: weight(cfg.vocab_size, h),
            pos_emb: weight(cfg.max_tokens, h),
            emb_ln_g: Mat::filled(1, h, 1.0),
            emb_ln_b: Mat::zeros(1, h),
            layers: (0..cfg.num_layers)
                .map(|_| LayerParams::shaped(h, cfg.feedforward_dim, &mut weight))
                .collect(),
            dec_w: weight(h, cfg.num_phenotypes),
            dec_b: Mat::zeros(1, cfg.num_phenotypes),
            mlm_b: Mat::zeros(1, cfg.vocab_size),
        }
    }

    /// Normal(0, 0.02) weights, zero biases, unit layer-norm scales.
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut params = Self::shaped(cfg, |r, c| {
            Mat::from_vec(r, c, (0..r * c).map(|_| normal.sample(rng)).collect())
        });
        params.round_to_f32();
        params
    }

    /// All-zero tensors, layer-norm scales included; a gradient accumulator.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        Self::shaped(cfg, Mat::zeros).zeros_like()
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, m) in z.named_mut() {
            m.data.iter_mut().for_each(|x| *x = 0.0);
        }
        z
    }

    /// Stable, fully qualified tensor names in a fixed order.
    pub fn named(&self) -> Vec<(String, &Mat)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
            ("emb_ln_g".to_string(), &self.emb_ln_g),
            ("emb_ln_b".to_string(), &self.emb_ln_b),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            out.extend(layer.named().into_iter().map(|(n, m)| (format!("layer.{i}.{n}"), m)));
        }
        out.push(("dec_w".to_string(), &self.dec_w));
        out.push(("dec_b".to_string(), &self.dec_b));
        out.push(("mlm_b".to_string(), &self.mlm_b));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Mat)> {
        let mut out = vec![
            ("tok_emb".to_string(), &mut self.tok_emb),
            ("pos_emb".to_string(), &mut self.pos_emb),
            ("emb_ln_g".to_string(), &mut self.emb_ln_g),
            ("emb_ln_b".to_string(), &mut self.emb_ln_b),
        ];
        for (i, layer) in self.layers.iter_mut().enumerate() {
            out.extend(
                layer
                    .named_mut()
                    .into_iter()
                    .map(|(n, m)| (format!("layer.{i}.{n}"), m)),
            );
        }
        out.push(("dec_w".to_string(), &mut self.dec_w));
        out.push(("dec_b".to_string(), &mut self.dec_b));
        out.push(("mlm_b".to_string(), &mut self.mlm_b));
        out
    }

    /// Whether decoupled weight decay applies (not to biases or layer norms).
    pub fn is_decayed(name: &str) -> bool {
        let leaf = name.rsplit('.').next().unwrap_or(name);
        !(leaf.starts_with('b') || leaf.contains("ln") || leaf == "mlm_b" || leaf == "dec_b")
    }

    pub fn round_to_f32(&mut self) {
        for (_, m) in self.named_mut() {
            m.data.iter_mut().for_each(|x| *x = *x as f32 as f64);
        }
    }

    pub fn add_assign(&mut self, other: &ModelParameters) {
        for ((_, a), (_, b)) in self.named_mut().into_iter().zip(other.named()) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, k: f64) {
        for (_, m) in self.named_mut() {
            m.data.iter_mut().for_each(|x| *x *= k);
        }
    }

    pub fn num_values(&self) -> usize {
        self.named().iter().map(|(_, m)| m.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, m)| m.is_finite())
    }
}

/// What a forward pass does besides computing hidden states.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pass {
    /// Deterministic, nothing recorded.
    Eval,
    /// Deterministic, records the graph (used for gradient checks).
    Record,
    /// Dropout active, records the graph.
    Train,
}

impl Pass {
    fn records(self) -> bool {
        !matches!(self, Pass::Eval)
    }
}

#[derive(Debug, Clone)]
struct LnCache {
    xhat: Mat,
    inv_std: Vec<f64>,
}

fn layer_norm(x: &Mat, g: &Mat, b: &Mat) -> (Mat, LnCache) {
    let h = x.cols;
    let mut y = Mat::zeros(x.rows, h);
    let mut xhat = Mat::zeros(x.rows, h);
    let mut inv_std = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / h as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / h as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(inv);
        let xr = xhat.row_mut(r);
        for c in 0..h {
            xr[c] = (row[c] - mean) * inv;
        }
        let yr = y.row_mut(r);
        for c in 0..h {
            yr[c] = g.data[c] * xhat.data[r * h + c] + b.data[c];
        }
    }
    (y, LnCache { xhat, inv_std })
}

fn layer_norm_backward(dy: &Mat, cache: &LnCache, g: &Mat, dg: &mut Mat, db: &mut Mat) -> Mat {
    let h = dy.cols;
    let n = h as f64;
    let mut dx = Mat::zeros(dy.rows, h);
    let mut dxhat = vec![0.0; h];
    for r in 0..dy.rows {
        let dyr = dy.row(r);
        let xr = cache.xhat.row(r);
        let mut sum = 0.0;
        let mut sum_x = 0.0;
        for c in 0..h {
            dg.data[c] += dyr[c] * xr[c];
            db.data[c] += dyr[c];
            dxhat[c] = dyr[c] * g.data[c];
            sum += dxhat[c];
            sum_x += dxhat[c] * xr[c];
        }
        let inv = cache.inv_std[r];
        let out = dx.row_mut(r);
        for c in 0..h {
            out[c] = inv / n * (n * dxhat[c] - sum - xr[c] * sum_x);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn dropout_mask(rows: usize, cols: usize, p: f64, rng: &mut impl Rng) -> Mat {
    let keep = 1.0 / (1.0 - p);
    Mat::from_vec(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect(),
    )
}

fn apply_mask(x: &mut Mat, mask: &Option<Mat>) {
    if let Some(m) = mask {
        for (a, b) in x.data.iter_mut().zip(&m.data) {
            *a *= b;
        }
    }
}

#[derive(Debug, Clone)]
struct LayerTape {
    x_in: Mat,
    q: Mat,
    k: Mat,
    v: Mat,
    /// Per head: n x n attention probabilities.
    probs: Vec<Mat>,
    ctx: Mat,
    attn_drop: Option<Mat>,
    ln1: LnCache,
    h1: Mat,
    f1: Mat,
    act: Mat,
    ff_drop: Option<Mat>,
    ln2: LnCache,
}

/// Recorded intermediates of one forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    ids: Vec<u32>,
    emb_ln: LnCache,
    emb_drop: Option<Mat>,
    layers: Vec<LayerTape>,
}

#[derive(Debug, Clone)]
pub struct Encoded {
    /// n x hidden_dim.
    pub hidden: Mat,
    tape: Option<Tape>,
}

impl Encoded {
    /// Attention probabilities of one head; only available on recorded passes.
    pub fn attention(&self, layer: usize, head: usize) -> Option<&Mat> {
        self.tape.as_ref().map(|t| &t.layers[layer].probs[head])
    }

    pub fn is_recorded(&self) -> bool {
        self.tape.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParameters,
}

impl Model {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self, ModelError> {
        config.validate()?;
        let params = ModelParameters::init(&config, rng);
        Ok(Self { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: ModelParameters) -> Result<Self, ModelError> {
        config.validate()?;
        let expected = ModelParameters::zeros(&config);
        for ((name, a), (_, b)) in params.named().iter().zip(expected.named()) {
            if (a.rows, a.cols) != (b.rows, b.cols) {
                return Err(ModelError::ShapeMismatch(format!(
                    "{name}: {}x{} vs {}x{}",
                    a.rows, a.cols, b.rows, b.cols
                )));
            }
        }
        if params.layers.len() != config.num_layers {
            return Err(ModelError::ShapeMismatch("layer count".into()));
        }
        Ok(Self { config, params })
    }

    fn check_input(&self, tokens: &TokenizedSequence) -> Result<(), ModelError> {
        let n = tokens.ids.len();
        if n == 0 || n > self.config.max_tokens {
            return Err(ModelError::ShapeMismatch(format!(
                "sequence length {n} outside 1..={}",
                self.config.max_tokens
            )));
        }
        if tokens.attention_mask.len() != n {
            return Err(ModelError::ShapeMismatch("attention mask length".into()));
        }
        if let Some(&bad) = tokens
            .ids
            .iter()
            .find(|&&id| id as usize >= self.config.vocab_size)
        {
            return Err(ModelError::ShapeMismatch(format!(
                "token id {bad} >= vocab size {}",
                self.config.vocab_size
            )));
        }
        if tokens.attention_mask.first() != Some(&1) {
            return Err(ModelError::ShapeMismatch("position 0 must be attended".into()));
        }
        Ok(())
    }

    /// Runs the encoder stack. Padded positions are excluded as attention
    /// keys; their own outputs are computed but never influence real ones.
    pub fn encode_forward(
        &self,
        tokens: &TokenizedSequence,
        pass: Pass,
        rng: &mut impl Rng,
    ) -> Result<Encoded, ModelError> {
        self.check_input(tokens)?;
        let cfg = &self.config;
        let p = &self.params;
        let n = tokens.ids.len();
        let h = cfg.hidden_dim;
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let dropout = matches!(pass, Pass::Train) && cfg.dropout > 0.0;
        let valid: Vec<bool> = tokens.attention_mask.iter().map(|&m| m == 1).collect();

        let mut e = Mat::zeros(n, h);
        for (i, &id) in tokens.ids.iter().enumerate() {
            let row = e.row_mut(i);
            let tok = p.tok_emb.row(id as usize);
            let pos = p.pos_emb.row(i);
            for c in 0..h {
                row[c] = tok[c] + pos[c];
            }
        }
        let (mut x, emb_ln) = layer_norm(&e, &p.emb_ln_g, &p.emb_ln_b);
        let emb_drop = dropout.then(|| dropout_mask(n, h, cfg.dropout, rng));
        apply_mask(&mut x, &emb_drop);

        let mut layer_tapes = Vec::with_capacity(cfg.num_layers);
        for lp in &p.layers {
            let mut q = matmul(&x, &lp.wq);
            q.add_row_bias(&lp.bq);
            let mut k = matmul(&x, &lp.wk);
            k.add_row_bias(&lp.bk);
            let mut v = matmul(&x, &lp.wv);
            v.add_row_bias(&lp.bv);

            let mut ctx = Mat::zeros(n, h);
            let mut probs = Vec::with_capacity(cfg.num_heads);
            for head in 0..cfg.num_heads {
                let qh = q.col_block(head * dh, dh);
                let kh = k.col_block(head * dh, dh);
                let vh = v.col_block(head * dh, dh);
                let mut s = matmul_nt(&qh, &kh);
                for r in 0..n {
                    let row = s.row_mut(r);
                    let mut max = f64::NEG_INFINITY;
                    for c in 0..n {
                        if valid[c] {
                            row[c] *= scale;
                            max = max.max(row[c]);
                        }
                    }
                    let mut sum = 0.0;
                    for c in 0..n {
                        if valid[c] {
                            row[c] = (row[c] - max).exp();
                            sum += row[c];
                        } else {
                            row[c] = 0.0;
                        }
                    }
                    for val in row.iter_mut() {
                        *val /= sum;
                    }
                }
                let ch = matmul(&s, &vh);
                ctx.set_col_block(head * dh, &ch);
                probs.push(s);
            }

            let mut a = matmul(&ctx, &lp.wo);
            a.add_row_bias(&lp.bo);
            let attn_drop = dropout.then(|| dropout_mask(n, h, cfg.dropout, rng));
            apply_mask(&mut a, &attn_drop);
            a.add_assign(&x);
            let (h1, ln1) = layer_norm(&a, &lp.ln1_g, &lp.ln1_b);

            let mut f1 = matmul(&h1, &lp.w1);
            f1.add_row_bias(&lp.b1);
            let act = Mat::from_vec(n, f1.cols, f1.data.iter().map(|&z| gelu(z)).collect());
            let mut f2 = matmul(&act, &lp.w2);
            f2.add_row_bias(&lp.b2);
            let ff_drop = dropout.then(|| dropout_mask(n, h, cfg.dropout, rng));
            apply_mask(&mut f2, &ff_drop);
            f2.add_assign(&h1);
            let (out, ln2) = layer_norm(&f2, &lp.ln2_g, &lp.ln2_b);

            if pass.records() {
                layer_tapes.push(LayerTape {
                    x_in: x,
                    q,
                    k,
                    v,
                    probs,
                    ctx,
                    attn_drop,
                    ln1,
                    h1,
                    f1,
                    act,
                    ff_drop,
                    ln2,
                });
            }
            x = out;
        }

        let tape = pass.records().then(|| Tape {
            ids: tokens.ids.clone(),
            emb_ln,
            emb_drop,
            layers: layer_tapes,
        });
        Ok(Encoded { hidden: x, tape })
    }

    /// Linear decoder on the `[CLS]` (position 0) hidden vector.
    pub fn classify(&self, hidden: &Mat) -> Classification {
        let cls = hidden.row(0);
        let d = self.config.num_phenotypes;
        let logits: Vec<f64> = (0..d)
            .map(|j| {
                self.params.dec_b.data[j]
                    + cls
                        .iter()
                        .enumerate()
                        .map(|(i, x)| x * self.params.dec_w.at(i, j))
                        .sum::<f64>()
            })
            .collect();
        let probs = logits.iter().map(|&z| sigmoid(z)).collect();
        Classification { logits, probs }
    }

    /// Accumulates decoder gradients and adds the `[CLS]` gradient to `d_hidden`.
    pub fn classify_backward(
        &self,
        hidden: &Mat,
        d_logits: &[f64],
        grads: &mut ModelParameters,
        d_hidden: &mut Mat,
    ) {
        let cls = hidden.row(0);
        let d = self.config.num_phenotypes;
        for (i, &x) in cls.iter().enumerate() {
            let mut acc = 0.0;
            for j in 0..d {
                grads.dec_w.data[i * d + j] += x * d_logits[j];
                acc += self.params.dec_w.at(i, j) * d_logits[j];
            }
            d_hidden.data[i] += acc;
        }
        for j in 0..d {
            grads.dec_b.data[j] += d_logits[j];
        }
    }

    /// Vocabulary logits at every position through the tied embedding.
    pub fn mlm_predict(&self, hidden: &Mat) -> Mat {
        let mut logits = matmul_nt(hidden, &self.params.tok_emb);
        logits.add_row_bias(&self.params.mlm_b);
        logits
    }

    /// Vocabulary logits at the given positions only.
    pub fn mlm_logits_rows(&self, hidden: &Mat, rows: &[usize]) -> Mat {
        let sel = gather_rows(hidden, rows);
        let mut logits = matmul_nt(&sel, &self.params.tok_emb);
        logits.add_row_bias(&self.params.mlm_b);
        logits
    }

    /// Backward through [`Model::mlm_logits_rows`]; the tied embedding
    /// receives the projection contribution here and the input contribution
    /// in [`Model::backward`].
    pub fn mlm_backward(
        &self,
        hidden: &Mat,
        rows: &[usize],
        d_logits: &Mat,
        grads: &mut ModelParameters,
        d_hidden: &mut Mat,
    ) {
        let sel = gather_rows(hidden, rows);
        matmul_tn_acc(d_logits, &sel, &mut grads.tok_emb);
        d_logits.sum_rows_into(&mut grads.mlm_b);
        let d_sel = matmul(d_logits, &self.params.tok_emb);
        for (k, &r) in rows.iter().enumerate() {
            for (a, b) in d_hidden.row_mut(r).iter_mut().zip(d_sel.row(k)) {
                *a += b;
            }
        }
    }

    /// Reverse-mode pass from `d_hidden` down to the embeddings.
    pub fn backward(
        &self,
        enc: &Encoded,
        d_hidden: &Mat,
        grads: &mut ModelParameters,
    ) -> Result<(), ModelError> {
        let tape = enc.tape.as_ref().ok_or(ModelError::GraphNotRecorded)?;
        let cfg = &self.config;
        let n = tape.ids.len();
        let h = cfg.hidden_dim;
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        let mut dx = d_hidden.clone();
        for (li, lt) in tape.layers.iter().enumerate().rev() {
            let lp = &self.params.layers[li];
            let lg = &mut grads.layers[li];

            // out = LN2(h1 + drop(f2))
            let mut dz2 = layer_norm_backward(&dx, &lt.ln2, &lp.ln2_g, &mut lg.ln2_g, &mut lg.ln2_b);
            let mut df2 = dz2.clone();
            apply_mask(&mut df2, &lt.ff_drop);
            matmul_tn_acc(&lt.act, &df2, &mut lg.w2);
            df2.sum_rows_into(&mut lg.b2);
            let mut df1 = matmul_nt(&df2, &lp.w2);
            for (g, &z) in df1.data.iter_mut().zip(&lt.f1.data) {
                *g *= gelu_grad(z);
            }
            matmul_tn_acc(&lt.h1, &df1, &mut lg.w1);
            df1.sum_rows_into(&mut lg.b1);
            matmul_nt_acc(&df1, &lp.w1, &mut dz2);
            let dh1 = dz2;

            // h1 = LN1(x + drop(attn))
            let dz1 = layer_norm_backward(&dh1, &lt.ln1, &lp.ln1_g, &mut lg.ln1_g, &mut lg.ln1_b);
            let mut da = dz1.clone();
            apply_mask(&mut da, &lt.attn_drop);
            matmul_tn_acc(&lt.ctx, &da, &mut lg.wo);
            da.sum_rows_into(&mut lg.bo);
            let dctx = matmul_nt(&da, &lp.wo);

            let mut dq = Mat::zeros(n, h);
            let mut dk = Mat::zeros(n, h);
            let mut dv = Mat::zeros(n, h);
            for head in 0..cfg.num_heads {
                let probs = &lt.probs[head];
                let dch = dctx.col_block(head * dh, dh);
                let vh = lt.v.col_block(head * dh, dh);
                let qh = lt.q.col_block(head * dh, dh);
                let kh = lt.k.col_block(head * dh, dh);
                let mut dp = matmul_nt(&dch, &vh);
                let mut dvh = Mat::zeros(n, dh);
                matmul_tn_acc(probs, &dch, &mut dvh);
                // softmax backward, then the 1/sqrt(dh) scale
                for r in 0..n {
                    let pr = probs.row(r);
                    let row = dp.row_mut(r);
                    let dot: f64 = row.iter().zip(pr).map(|(a, b)| a * b).sum();
                    for c in 0..n {
                        row[c] = pr[c] * (row[c] - dot) * scale;
                    }
                }
                let dqh = matmul(&dp, &kh);
                let mut dkh = Mat::zeros(n, dh);
                matmul_tn_acc(&dp, &qh, &mut dkh);
                dq.set_col_block(head * dh, &dqh);
                dk.set_col_block(head * dh, &dkh);
                dv.set_col_block(head * dh, &dvh);
            }
            let mut dxin = dz1;
            for (w, d, gw, gb) in [
                (&lp.wq, &dq, &mut lg.wq, &mut lg.bq),
                (&lp.wk, &dk, &mut lg.wk, &mut lg.bk),
                (&lp.wv, &dv, &mut lg.wv, &mut lg.bv),
            ] {
                matmul_tn_acc(&lt.x_in, d, gw);
                d.sum_rows_into(gb);
                matmul_nt_acc(d, w, &mut dxin);
            }
            dx = dxin;
        }

        apply_mask(&mut dx, &tape.emb_drop);
        let de = layer_norm_backward(
            &dx,
            &tape.emb_ln,
            &self.params.emb_ln_g,
            &mut grads.emb_ln_g,
            &mut grads.emb_ln_b,
        );
        for (i, &id) in tape.ids.iter().enumerate() {
            let src = de.row(i);
            for (a, b) in grads.tok_emb.row_mut(id as usize).iter_mut().zip(src) {
                *a += b;
            }
            for (a, b) in grads.pos_emb.row_mut(i).iter_mut().zip(src) {
                *a += b;
            }
        }
        Ok(())
    }
}

fn gather_rows(m: &Mat, rows: &[usize]) -> Mat {
    let mut out = Mat::zeros(rows.len(), m.cols);
    for (k, &r) in rows.iter().enumerate() {
        out.row_mut(k).copy_from_slice(m.row(r));
    }
    out
}

#[cfg(test)]
mod tests;
