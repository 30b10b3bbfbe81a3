//! Decoder-only causal transformer with a weight-tied language-modeling head.
//!
//! Blocks are pre-layer-norm with learned absolute positions and a 4x
//! feed-forward expansion. Parameters are generic over [`Real`] so the same
//! code runs in `f32` for training and `f64` for gradient checks.

mod checkpoint;
mod incremental;
pub mod kernels;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use incremental::{KvCache, LanguageModel};
pub use kernels::Real;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use kernels::*;

/// Standard deviation of initial weights.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("sequence length {len} exceeds n_positions {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("token id {id} out of range for vocab size {vocab}")]
    IdOutOfRange { id: u32, vocab: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("no unmasked label positions")]
    NoLabels,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Gelu,
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("gelu")
    }
}

impl FromStr for Activation {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gelu" | "gelu_new" => Ok(Activation::Gelu),
            other => Err(ModelError::InvalidConfig(format!("unknown activation {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub n_positions: usize,
    pub n_embd: usize,
    pub n_layer: usize,
    pub n_head: usize,
    pub resid_dropout: f64,
    pub embd_dropout: f64,
    pub attn_dropout: f64,
    pub activation: Activation,
}

impl ModelConfig {
    /// The 12-layer, 768-wide configuration of the pretrained base model.
    pub fn paper_default() -> Self {
        ModelConfig {
            vocab_size: 50257,
            n_positions: 1024,
            n_embd: 768,
            n_layer: 12,
            n_head: 12,
            resid_dropout: 0.1,
            embd_dropout: 0.1,
            attn_dropout: 0.1,
            activation: Activation::Gelu,
        }
    }

    /// A configuration small enough to train on one CPU core in minutes.
    pub fn desk() -> Self {
        ModelConfig {
            vocab_size: 2048,
            n_positions: 256,
            n_embd: 128,
            n_layer: 4,
            n_head: 4,
            ..Self::paper_default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.vocab_size == 0 {
            return bad("vocab_size must be positive".into());
        }
        if self.n_positions == 0 {
            return bad("n_positions must be positive".into());
        }
        if self.n_embd == 0 || self.n_head == 0 || self.n_layer == 0 {
            return bad("n_embd, n_head and n_layer must be positive".into());
        }
        if !self.n_embd.is_multiple_of(self.n_head) {
            return bad(format!("n_embd {} not divisible by n_head {}", self.n_embd, self.n_head));
        }
        for (name, p) in [
            ("resid_dropout", self.resid_dropout),
            ("embd_dropout", self.embd_dropout),
            ("attn_dropout", self.attn_dropout),
        ] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("{name} {p} outside [0, 1)"));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.n_embd / self.n_head
    }

    /// Closed-form parameter count (the LM head is tied and adds nothing).
    pub fn parameter_count(&self) -> usize {
        let (v, p, c, l) = (self.vocab_size, self.n_positions, self.n_embd, self.n_layer);
        v * c + p * c + l * (12 * c * c + 13 * c) + 2 * c
    }

    pub fn without_dropout(&self) -> Self {
        ModelConfig { resid_dropout: 0.0, embd_dropout: 0.0, attn_dropout: 0.0, ..self.clone() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![T::zero(); shape.iter().product()] }
    }

    pub fn filled(shape: &[usize], v: T) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![v; shape.iter().product()] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub ln1_g: Tensor<T>,
    pub ln1_b: Tensor<T>,
    pub qkv_w: Tensor<T>,
    pub qkv_b: Tensor<T>,
    pub proj_w: Tensor<T>,
    pub proj_b: Tensor<T>,
    pub ln2_g: Tensor<T>,
    pub ln2_b: Tensor<T>,
    pub fc_w: Tensor<T>,
    pub fc_b: Tensor<T>,
    pub fcproj_w: Tensor<T>,
    pub fcproj_b: Tensor<T>,
}

const BLOCK_NAMES: [&str; 12] = [
    "ln_1.g", "ln_1.b", "attn.c_attn.w", "attn.c_attn.b", "attn.c_proj.w", "attn.c_proj.b",
    "ln_2.g", "ln_2.b", "mlp.c_fc.w", "mlp.c_fc.b", "mlp.c_proj.w", "mlp.c_proj.b",
];

impl<T> Block<T> {
    fn tensors(&self) -> [&Tensor<T>; 12] {
        [
            &self.ln1_g, &self.ln1_b, &self.qkv_w, &self.qkv_b, &self.proj_w, &self.proj_b,
            &self.ln2_g, &self.ln2_b, &self.fc_w, &self.fc_b, &self.fcproj_w, &self.fcproj_b,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor<T>; 12] {
        [
            &mut self.ln1_g, &mut self.ln1_b, &mut self.qkv_w, &mut self.qkv_b,
            &mut self.proj_w, &mut self.proj_b, &mut self.ln2_g, &mut self.ln2_b,
            &mut self.fc_w, &mut self.fc_b, &mut self.fcproj_w, &mut self.fcproj_b,
        ]
    }
}

/// The named tensor set. The LM head reuses `wte`.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<T> {
    pub wte: Tensor<T>,
    pub wpe: Tensor<T>,
    pub blocks: Vec<Block<T>>,
    pub lnf_g: Tensor<T>,
    pub lnf_b: Tensor<T>,
}

impl<T: Real> Parameters<T> {
    /// All-zero tensors with the shapes fixed by `cfg`; also the gradient layout.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let c = cfg.n_embd;
        let block = || Block {
            ln1_g: Tensor::zeros(&[c]),
            ln1_b: Tensor::zeros(&[c]),
            qkv_w: Tensor::zeros(&[c, 3 * c]),
            qkv_b: Tensor::zeros(&[3 * c]),
            proj_w: Tensor::zeros(&[c, c]),
            proj_b: Tensor::zeros(&[c]),
            ln2_g: Tensor::zeros(&[c]),
            ln2_b: Tensor::zeros(&[c]),
            fc_w: Tensor::zeros(&[c, 4 * c]),
            fc_b: Tensor::zeros(&[4 * c]),
            fcproj_w: Tensor::zeros(&[4 * c, c]),
            fcproj_b: Tensor::zeros(&[c]),
        };
        Parameters {
            wte: Tensor::zeros(&[cfg.vocab_size, c]),
            wpe: Tensor::zeros(&[cfg.n_positions, c]),
            blocks: (0..cfg.n_layer).map(|_| block()).collect(),
            lnf_g: Tensor::zeros(&[c]),
            lnf_b: Tensor::zeros(&[c]),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for t in out.tensors_mut() {
            t.data.fill(T::zero());
        }
        out
    }

    /// Tensors in manifest order.
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out = vec![&self.wte, &self.wpe];
        for b in &self.blocks {
            out.extend(b.tensors());
        }
        out.push(&self.lnf_g);
        out.push(&self.lnf_b);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.wte, &mut self.wpe];
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out.push(&mut self.lnf_g);
        out.push(&mut self.lnf_b);
        out
    }

    /// Names aligned with [`Parameters::tensors`].
    pub fn names(&self) -> Vec<String> {
        let mut out = vec!["wte".to_string(), "wpe".to_string()];
        for i in 0..self.blocks.len() {
            out.extend(BLOCK_NAMES.iter().map(|n| format!("h.{i}.{n}")));
        }
        out.push("ln_f.g".into());
        out.push("ln_f.b".into());
        out
    }

    pub fn count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Element-wise conversion to another precision.
    pub fn cast<U: Real>(&self) -> Parameters<U> {
        let conv = |t: &Tensor<T>| Tensor { shape: t.shape.clone(), data: t.data.iter().map(|v| U::of(v.f64())).collect() };
        Parameters {
            wte: conv(&self.wte),
            wpe: conv(&self.wpe),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    ln1_g: conv(&b.ln1_g),
                    ln1_b: conv(&b.ln1_b),
                    qkv_w: conv(&b.qkv_w),
                    qkv_b: conv(&b.qkv_b),
                    proj_w: conv(&b.proj_w),
                    proj_b: conv(&b.proj_b),
                    ln2_g: conv(&b.ln2_g),
                    ln2_b: conv(&b.ln2_b),
                    fc_w: conv(&b.fc_w),
                    fc_b: conv(&b.fc_b),
                    fcproj_w: conv(&b.fcproj_w),
                    fcproj_b: conv(&b.fcproj_b),
                })
                .collect(),
            lnf_g: conv(&self.lnf_g),
            lnf_b: conv(&self.lnf_b),
        }
    }
}

fn normal_fill<T: Real>(data: &mut [T], rng: &mut ChaCha8Rng) {
    let dist = Normal::new(0.0, INIT_STD).expect("valid normal");
    for v in data {
        *v = T::of(dist.sample(rng));
    }
}

/// Weights drawn from N(0, 0.02) in manifest order, zero biases, unit gains.
pub fn init_parameters<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<Parameters<T>, ModelError> {
    cfg.validate()?;
    let mut p = Parameters::zeros(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    normal_fill(&mut p.wte.data, &mut rng);
    normal_fill(&mut p.wpe.data, &mut rng);
    for b in &mut p.blocks {
        b.ln1_g.data.fill(T::one());
        b.ln2_g.data.fill(T::one());
        normal_fill(&mut b.qkv_w.data, &mut rng);
        normal_fill(&mut b.proj_w.data, &mut rng);
        normal_fill(&mut b.fc_w.data, &mut rng);
        normal_fill(&mut b.fcproj_w.data, &mut rng);
    }
    p.lnf_g.data.fill(T::one());
    Ok(p)
}

/// Grows or truncates the token embedding (and with it the tied head). Kept
/// rows are untouched; new rows are drawn like initial weights from `seed`.
pub fn resize_token_embeddings<T: Real>(
    mut p: Parameters<T>,
    cfg: &ModelConfig,
    new_vocab: usize,
    seed: u64,
) -> Result<(Parameters<T>, ModelConfig), ModelError> {
    if new_vocab == 0 {
        return Err(ModelError::InvalidConfig("new vocab size must be positive".into()));
    }
    let c = cfg.n_embd;
    let old = p.wte.shape[0];
    if new_vocab < old {
        p.wte.data.truncate(new_vocab * c);
    } else if new_vocab > old {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fresh = vec![T::zero(); (new_vocab - old) * c];
        normal_fill(&mut fresh, &mut rng);
        p.wte.data.extend(fresh);
    }
    p.wte.shape = vec![new_vocab, c];
    let cfg = ModelConfig { vocab_size: new_vocab, ..cfg.clone() };
    Ok((p, cfg))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Dropout is active only in train mode; its masks are drawn from `rng_seed`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainState {
    pub mode: Mode,
    pub rng_seed: u64,
}

impl TrainState {
    pub fn eval() -> Self {
        TrainState { mode: Mode::Eval, rng_seed: 0 }
    }

    pub fn train(rng_seed: u64) -> Self {
        TrainState { mode: Mode::Train, rng_seed }
    }
}

/// Row-major `[batch, seq]` ids with an attention mask of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub ids: Vec<u32>,
    pub mask: Vec<u8>,
    pub batch: usize,
    pub seq: usize,
}

impl Batch {
    pub fn new(ids: Vec<u32>, mask: Vec<u8>, batch: usize, seq: usize) -> Result<Self, ModelError> {
        if ids.len() != batch * seq || mask.len() != batch * seq {
            return Err(ModelError::Shape(format!(
                "{} ids and {} mask entries for [{batch}, {seq}]",
                ids.len(),
                mask.len()
            )));
        }
        Ok(Batch { ids, mask, batch, seq })
    }

    /// Right-pads each sequence with `pad_id` to the longest one.
    pub fn from_sequences<S: AsRef<[u32]>>(seqs: &[S], pad_id: u32) -> Self {
        let seq = seqs.iter().map(|s| s.as_ref().len()).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(seqs.len() * seq);
        let mut mask = Vec::with_capacity(seqs.len() * seq);
        for s in seqs {
            let s = s.as_ref();
            ids.extend_from_slice(s);
            mask.extend(std::iter::repeat_n(1u8, s.len()));
            ids.extend(std::iter::repeat_n(pad_id, seq - s.len()));
            mask.extend(std::iter::repeat_n(0u8, seq - s.len()));
        }
        Batch { ids, mask, batch: seqs.len(), seq }
    }

    /// Number of label positions `t + 1` whose mask is set.
    pub fn label_count(&self) -> usize {
        (0..self.batch)
            .map(|b| self.mask[b * self.seq..(b + 1) * self.seq].iter().skip(1).filter(|&&m| m != 0).count())
            .sum()
    }
}

fn check_inputs(cfg: &ModelConfig, batch: &Batch) -> Result<(), ModelError> {
    if batch.ids.len() != batch.batch * batch.seq || batch.mask.len() != batch.ids.len() {
        return Err(ModelError::Shape("batch buffers disagree with [batch, seq]".into()));
    }
    if batch.seq > cfg.n_positions {
        return Err(ModelError::SequenceTooLong { len: batch.seq, max: cfg.n_positions });
    }
    if let Some(&id) = batch.ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
        return Err(ModelError::IdOutOfRange { id, vocab: cfg.vocab_size });
    }
    Ok(())
}

fn check_params<T: Real>(p: &Parameters<T>, cfg: &ModelConfig) -> Result<(), ModelError> {
    let expect = Parameters::<T>::zeros(cfg);
    let ok = p.blocks.len() == expect.blocks.len()
        && p.tensors().iter().zip(expect.tensors()).all(|(a, b)| a.shape == b.shape && a.data.len() == b.data.len());
    if ok {
        Ok(())
    } else {
        Err(ModelError::Shape("parameters do not match the config".into()))
    }
}

/// Inverted-dropout scale mask, or `None` when inactive.
fn dropout_mask<T: Real>(rng: &mut Option<ChaCha8Rng>, p: f64, n: usize) -> Option<Vec<T>> {
    let rng = rng.as_mut()?;
    if p == 0.0 {
        return None;
    }
    let keep = T::of(1.0 / (1.0 - p));
    Some((0..n).map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep }).collect())
}

fn apply_mask<T: Real>(x: &mut [T], mask: &Option<Vec<T>>) {
    if let Some(m) = mask {
        for (v, &s) in x.iter_mut().zip(m) {
            *v *= s;
        }
    }
}

struct LayerCache<T> {
    input: Vec<T>,
    ln1: Vec<T>,
    ln1_mean: Vec<T>,
    ln1_rstd: Vec<T>,
    qkv: Vec<T>,
    probs: Vec<T>,
    attn_mask: Option<Vec<T>>,
    att: Vec<T>,
    resid1_mask: Option<Vec<T>>,
    mid: Vec<T>,
    ln2: Vec<T>,
    ln2_mean: Vec<T>,
    ln2_rstd: Vec<T>,
    fc: Vec<T>,
    act: Vec<T>,
    resid2_mask: Option<Vec<T>>,
}

struct Cache<T> {
    embd_mask: Option<Vec<T>>,
    layers: Vec<LayerCache<T>>,
    out: Vec<T>,
    lnf: Vec<T>,
    lnf_mean: Vec<T>,
    lnf_rstd: Vec<T>,
}

fn attention_forward<T: Real>(
    cfg: &ModelConfig,
    batch: &Batch,
    qkv: &[T],
    attn_mask: &Option<Vec<T>>,
) -> (Vec<T>, Vec<T>) {
    let (bn, tn, c, nh, hd) = (batch.batch, batch.seq, cfg.n_embd, cfg.n_head, cfg.head_dim());
    let scale = T::of(1.0 / (hd as f64).sqrt());
    let mut probs = vec![T::zero(); bn * nh * tn * tn];
    let mut att = vec![T::zero(); bn * tn * c];
    let mut q = vec![T::zero(); tn * hd];
    let mut k = vec![T::zero(); tn * hd];
    let mut v = vec![T::zero(); tn * hd];
    let mut scores = vec![T::zero(); tn * tn];
    let mut dropped = vec![T::zero(); tn * tn];
    let mut out = vec![T::zero(); tn * hd];
    for b in 0..bn {
        let qkv_b = &qkv[b * tn * 3 * c..(b + 1) * tn * 3 * c];
        let key_mask = &batch.mask[b * tn..(b + 1) * tn];
        for h in 0..nh {
            gather_head(&mut q, qkv_b, tn, c, hd, 0, h);
            gather_head(&mut k, qkv_b, tn, c, hd, 1, h);
            gather_head(&mut v, qkv_b, tn, c, hd, 2, h);
            matmul(&mut scores, &q, &k, tn, hd, tn, false, true, false);
            for s in scores.iter_mut() {
                *s *= scale;
            }
            let off = (b * nh + h) * tn * tn;
            let pr = &mut probs[off..off + tn * tn];
            masked_softmax(pr, &scores, key_mask, tn);
            let used: &[T] = match attn_mask {
                Some(m) => {
                    for ((d, &p), &s) in dropped.iter_mut().zip(pr.iter()).zip(&m[off..off + tn * tn]) {
                        *d = p * s;
                    }
                    &dropped
                }
                None => pr,
            };
            matmul(&mut out, used, &v, tn, tn, hd, false, false, false);
            for t in 0..tn {
                att[(b * tn + t) * c + h * hd..][..hd].copy_from_slice(&out[t * hd..(t + 1) * hd]);
            }
        }
    }
    (probs, att)
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<T: Real>(
    cfg: &ModelConfig,
    batch: &Batch,
    qkv: &[T],
    probs: &[T],
    attn_mask: &Option<Vec<T>>,
    datt: &[T],
    dqkv: &mut [T],
) {
    let (bn, tn, c, nh, hd) = (batch.batch, batch.seq, cfg.n_embd, cfg.n_head, cfg.head_dim());
    let scale = T::of(1.0 / (hd as f64).sqrt());
    let mut q = vec![T::zero(); tn * hd];
    let mut k = vec![T::zero(); tn * hd];
    let mut v = vec![T::zero(); tn * hd];
    let mut dout = vec![T::zero(); tn * hd];
    let mut dused = vec![T::zero(); tn * tn];
    let mut used = vec![T::zero(); tn * tn];
    let mut dscores = vec![T::zero(); tn * tn];
    let mut dq = vec![T::zero(); tn * hd];
    let mut dk = vec![T::zero(); tn * hd];
    let mut dv = vec![T::zero(); tn * hd];
    for b in 0..bn {
        let qkv_b = &qkv[b * tn * 3 * c..(b + 1) * tn * 3 * c];
        let dqkv_b = &mut dqkv[b * tn * 3 * c..(b + 1) * tn * 3 * c];
        for h in 0..nh {
            gather_head(&mut q, qkv_b, tn, c, hd, 0, h);
            gather_head(&mut k, qkv_b, tn, c, hd, 1, h);
            gather_head(&mut v, qkv_b, tn, c, hd, 2, h);
            for t in 0..tn {
                dout[t * hd..(t + 1) * hd].copy_from_slice(&datt[(b * tn + t) * c + h * hd..][..hd]);
            }
            let off = (b * nh + h) * tn * tn;
            let pr = &probs[off..off + tn * tn];
            match attn_mask {
                Some(m) => {
                    for ((u, &p), &s) in used.iter_mut().zip(pr).zip(&m[off..off + tn * tn]) {
                        *u = p * s;
                    }
                }
                None => used.copy_from_slice(pr),
            }
            matmul(&mut dused, &dout, &v, tn, hd, tn, false, true, false);
            matmul(&mut dv, &used, &dout, tn, tn, hd, true, false, false);
            if let Some(m) = attn_mask {
                for (d, &s) in dused.iter_mut().zip(&m[off..off + tn * tn]) {
                    *d *= s;
                }
            }
            for t in 0..tn {
                let p = &pr[t * tn..(t + 1) * tn];
                let dp = &dused[t * tn..(t + 1) * tn];
                let dot: f64 = p.iter().zip(dp).map(|(a, b)| (*a * *b).f64()).sum();
                let dot = T::of(dot);
                for s in 0..tn {
                    dscores[t * tn + s] = p[s] * (dp[s] - dot) * scale;
                }
            }
            matmul(&mut dq, &dscores, &k, tn, tn, hd, false, false, false);
            matmul(&mut dk, &dscores, &q, tn, tn, hd, true, false, false);
            scatter_head_add(dqkv_b, &dq, tn, c, hd, 0, h);
            scatter_head_add(dqkv_b, &dk, tn, c, hd, 1, h);
            scatter_head_add(dqkv_b, &dv, tn, c, hd, 2, h);
        }
    }
}

fn forward_cached<T: Real>(
    p: &Parameters<T>,
    cfg: &ModelConfig,
    batch: &Batch,
    state: TrainState,
) -> Result<(Vec<T>, Cache<T>), ModelError> {
    cfg.validate()?;
    check_params(p, cfg)?;
    check_inputs(cfg, batch)?;
    let (tn, c, v) = (batch.seq, cfg.n_embd, cfg.vocab_size);
    let n = batch.batch * tn;
    let mut rng = match state.mode {
        Mode::Train => Some(ChaCha8Rng::seed_from_u64(state.rng_seed)),
        Mode::Eval => None,
    };

    let mut x = vec![T::zero(); n * c];
    for (i, row) in x.chunks_exact_mut(c).enumerate() {
        let id = batch.ids[i] as usize;
        let t = i % tn;
        for ((o, &e), &pe) in row.iter_mut().zip(&p.wte.data[id * c..(id + 1) * c]).zip(&p.wpe.data[t * c..(t + 1) * c]) {
            *o = e + pe;
        }
    }
    let embd_mask = dropout_mask(&mut rng, cfg.embd_dropout, n * c);
    apply_mask(&mut x, &embd_mask);

    let mut layers = Vec::with_capacity(cfg.n_layer);
    for blk in &p.blocks {
        let input = x;
        let mut ln1 = vec![T::zero(); n * c];
        let mut ln1_mean = vec![T::zero(); n];
        let mut ln1_rstd = vec![T::zero(); n];
        layernorm_forward(&mut ln1, &mut ln1_mean, &mut ln1_rstd, &input, &blk.ln1_g.data, &blk.ln1_b.data, c);
        let mut qkv = vec![T::zero(); n * 3 * c];
        linear_forward(&mut qkv, &ln1, &blk.qkv_w.data, &blk.qkv_b.data, n, c, 3 * c);
        let attn_mask = dropout_mask(&mut rng, cfg.attn_dropout, batch.batch * cfg.n_head * tn * tn);
        let (probs, att) = attention_forward(cfg, batch, &qkv, &attn_mask);
        let mut proj = vec![T::zero(); n * c];
        linear_forward(&mut proj, &att, &blk.proj_w.data, &blk.proj_b.data, n, c, c);
        let resid1_mask = dropout_mask(&mut rng, cfg.resid_dropout, n * c);
        apply_mask(&mut proj, &resid1_mask);
        let mid: Vec<T> = input.iter().zip(&proj).map(|(&a, &b)| a + b).collect();

        let mut ln2 = vec![T::zero(); n * c];
        let mut ln2_mean = vec![T::zero(); n];
        let mut ln2_rstd = vec![T::zero(); n];
        layernorm_forward(&mut ln2, &mut ln2_mean, &mut ln2_rstd, &mid, &blk.ln2_g.data, &blk.ln2_b.data, c);
        let mut fc = vec![T::zero(); n * 4 * c];
        linear_forward(&mut fc, &ln2, &blk.fc_w.data, &blk.fc_b.data, n, c, 4 * c);
        let mut act = vec![T::zero(); n * 4 * c];
        gelu_forward(&mut act, &fc);
        let mut mlp = vec![T::zero(); n * c];
        linear_forward(&mut mlp, &act, &blk.fcproj_w.data, &blk.fcproj_b.data, n, 4 * c, c);
        let resid2_mask = dropout_mask(&mut rng, cfg.resid_dropout, n * c);
        apply_mask(&mut mlp, &resid2_mask);
        x = mid.iter().zip(&mlp).map(|(&a, &b)| a + b).collect();

        layers.push(LayerCache {
            input, ln1, ln1_mean, ln1_rstd, qkv, probs, attn_mask, att, resid1_mask, mid,
            ln2, ln2_mean, ln2_rstd, fc, act, resid2_mask,
        });
    }

    let mut lnf = vec![T::zero(); n * c];
    let mut lnf_mean = vec![T::zero(); n];
    let mut lnf_rstd = vec![T::zero(); n];
    layernorm_forward(&mut lnf, &mut lnf_mean, &mut lnf_rstd, &x, &p.lnf_g.data, &p.lnf_b.data, c);
    let mut logits = vec![T::zero(); n * v];
    matmul(&mut logits, &lnf, &p.wte.data, n, c, v, false, true, false);
    Ok((logits, Cache { embd_mask, layers, out: x, lnf, lnf_mean, lnf_rstd }))
}

/// Logits `[batch, seq, vocab]`, flattened row-major.
pub fn forward<T: Real>(
    p: &Parameters<T>,
    cfg: &ModelConfig,
    batch: &Batch,
    state: TrainState,
) -> Result<Vec<T>, ModelError> {
    forward_cached(p, cfg, batch, state).map(|(logits, _)| logits)
}

/// Mean next-token negative log-likelihood over label positions whose mask
/// is set, accumulated in f64.
pub fn lm_loss<T: Real>(logits: &[T], batch: &Batch, vocab: usize) -> Result<f64, ModelError> {
    let (sum, count) = loss_terms(logits, batch, vocab, None)?;
    Ok(sum / count as f64)
}

/// Summed NLL and the number of label positions it covers.
pub fn lm_loss_sum<T: Real>(logits: &[T], batch: &Batch, vocab: usize) -> Result<(f64, usize), ModelError> {
    loss_terms(logits, batch, vocab, None)
}

/// Summed NLL and label count; optionally writes d(mean loss)/d(logits).
fn loss_terms<T: Real>(
    logits: &[T],
    batch: &Batch,
    vocab: usize,
    mut dlogits: Option<&mut [T]>,
) -> Result<(f64, usize), ModelError> {
    let tn = batch.seq;
    if logits.len() != batch.batch * tn * vocab {
        return Err(ModelError::Shape(format!("{} logits for [{}, {tn}, {vocab}]", logits.len(), batch.batch)));
    }
    let count = batch.label_count();
    if count == 0 {
        return Err(ModelError::NoLabels);
    }
    let mut sum = 0.0;
    let mut row64 = vec![0.0f64; vocab];
    for b in 0..batch.batch {
        for t in 0..tn.saturating_sub(1) {
            let label_pos = b * tn + t + 1;
            if batch.mask[label_pos] == 0 {
                continue;
            }
            let label = batch.ids[label_pos] as usize;
            let row = &logits[(b * tn + t) * vocab..(b * tn + t + 1) * vocab];
            for (d, s) in row64.iter_mut().zip(row) {
                *d = s.f64();
            }
            let lp = log_softmax(&row64);
            sum -= lp[label];
            if let Some(dl) = dlogits.as_deref_mut() {
                let drow = &mut dl[(b * tn + t) * vocab..(b * tn + t + 1) * vocab];
                for (j, d) in drow.iter_mut().enumerate() {
                    let g = lp[j].exp() - if j == label { 1.0 } else { 0.0 };
                    *d = T::of(g / count as f64);
                }
            }
        }
    }
    Ok((sum, count))
}

/// Loss and exact gradients of [`lm_loss`] with respect to every tensor.
pub fn backward<T: Real>(
    p: &Parameters<T>,
    cfg: &ModelConfig,
    batch: &Batch,
    state: TrainState,
) -> Result<(f64, Parameters<T>), ModelError> {
    let (logits, cache) = forward_cached(p, cfg, batch, state)?;
    let (tn, c, v) = (batch.seq, cfg.n_embd, cfg.vocab_size);
    let n = batch.batch * tn;
    let mut dlogits = vec![T::zero(); n * v];
    let (sum, count) = loss_terms(&logits, batch, v, Some(&mut dlogits))?;
    drop(logits);
    let mut g = p.zeros_like();

    let mut dlnf = vec![T::zero(); n * c];
    matmul(&mut dlnf, &dlogits, &p.wte.data, n, v, c, false, false, false);
    matmul(&mut g.wte.data, &dlogits, &cache.lnf, v, n, c, true, false, true);
    drop(dlogits);
    let mut dx = vec![T::zero(); n * c];
    layernorm_backward(
        &mut dx, &mut g.lnf_g.data, &mut g.lnf_b.data, &dlnf, &cache.out, &p.lnf_g.data,
        &cache.lnf_mean, &cache.lnf_rstd, c,
    );

    for (l, lc) in cache.layers.iter().enumerate().rev() {
        let blk = &p.blocks[l];
        let gb = &mut g.blocks[l];

        let mut dmlp = dx.clone();
        apply_mask(&mut dmlp, &lc.resid2_mask);
        let mut dact = vec![T::zero(); n * 4 * c];
        linear_backward(&mut dact, &mut gb.fcproj_w.data, &mut gb.fcproj_b.data, &dmlp, &lc.act, &blk.fcproj_w.data, n, 4 * c, c);
        let mut dfc = vec![T::zero(); n * 4 * c];
        gelu_backward(&mut dfc, &lc.fc, &dact);
        let mut dln2 = vec![T::zero(); n * c];
        linear_backward(&mut dln2, &mut gb.fc_w.data, &mut gb.fc_b.data, &dfc, &lc.ln2, &blk.fc_w.data, n, c, 4 * c);
        let mut dmid = dx;
        layernorm_backward(
            &mut dmid, &mut gb.ln2_g.data, &mut gb.ln2_b.data, &dln2, &lc.mid, &blk.ln2_g.data,
            &lc.ln2_mean, &lc.ln2_rstd, c,
        );

        let mut dproj = dmid.clone();
        apply_mask(&mut dproj, &lc.resid1_mask);
        let mut datt = vec![T::zero(); n * c];
        linear_backward(&mut datt, &mut gb.proj_w.data, &mut gb.proj_b.data, &dproj, &lc.att, &blk.proj_w.data, n, c, c);
        let mut dqkv = vec![T::zero(); n * 3 * c];
        attention_backward(cfg, batch, &lc.qkv, &lc.probs, &lc.attn_mask, &datt, &mut dqkv);
        let mut dln1 = vec![T::zero(); n * c];
        linear_backward(&mut dln1, &mut gb.qkv_w.data, &mut gb.qkv_b.data, &dqkv, &lc.ln1, &blk.qkv_w.data, n, c, 3 * c);
        let mut dinput = dmid;
        layernorm_backward(
            &mut dinput, &mut gb.ln1_g.data, &mut gb.ln1_b.data, &dln1, &lc.input, &blk.ln1_g.data,
            &lc.ln1_mean, &lc.ln1_rstd, c,
        );
        dx = dinput;
    }

    apply_mask(&mut dx, &cache.embd_mask);
    for (i, row) in dx.chunks_exact(c).enumerate() {
        let id = batch.ids[i] as usize;
        let t = i % tn;
        for (d, &s) in g.wte.data[id * c..(id + 1) * c].iter_mut().zip(row) {
            *d += s;
        }
        for (d, &s) in g.wpe.data[t * c..(t + 1) * c].iter_mut().zip(row) {
            *d += s;
        }
    }
    Ok((sum / count as f64, g))
}

/// A configuration together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: Parameters<T>,
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let params = init_parameters(&config, seed)?;
        Ok(Model { config, params })
    }

    pub fn forward(&self, batch: &Batch, state: TrainState) -> Result<Vec<T>, ModelError> {
        forward(&self.params, &self.config, batch, state)
    }

    pub fn loss(&self, batch: &Batch, state: TrainState) -> Result<f64, ModelError> {
        let logits = self.forward(batch, state)?;
        lm_loss(&logits, batch, self.config.vocab_size)
    }

    pub fn backward(&self, batch: &Batch, state: TrainState) -> Result<(f64, Parameters<T>), ModelError> {
        backward(&self.params, &self.config, batch, state)
    }

    pub fn resize_token_embeddings(self, new_vocab: usize, seed: u64) -> Result<Self, ModelError> {
        let (params, config) = resize_token_embeddings(self.params, &self.config, new_vocab, seed)?;
        Ok(Model { config, params })
    }
}
