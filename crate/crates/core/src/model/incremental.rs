//! Token-at-a-time eval-mode decoding with cached keys and values.

use super::kernels::*;
use super::{Model, ModelError};

/// Anything that yields next-token log-probabilities one token at a time.
/// Decoding clones `State` when a hypothesis branches.
pub trait LanguageModel {
    type State: Clone;

    fn vocab_size(&self) -> usize;

    /// Longest sequence (prompt included) the model accepts.
    fn max_context(&self) -> usize;

    /// Consumes a nonempty prompt; returns the state and the log-probabilities
    /// of the token that follows it.
    fn start(&self, prompt: &[u32]) -> Result<(Self::State, Vec<f64>), ModelError>;

    /// Appends `token` and returns log-probabilities of the next one.
    fn advance(&self, state: &mut Self::State, token: u32) -> Result<Vec<f64>, ModelError>;
}

/// Keys and values of every position fed so far, per layer, as `[len, C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache<T> {
    pub keys: Vec<Vec<T>>,
    pub values: Vec<Vec<T>>,
    pub len: usize,
}

impl<T: Real> KvCache<T> {
    pub fn new(n_layer: usize) -> Self {
        KvCache { keys: vec![Vec::new(); n_layer], values: vec![Vec::new(); n_layer], len: 0 }
    }
}

impl<T: Real> Model<T> {
    /// Feeds one token at position `cache.len` and returns next-token logits.
    /// Matches the last row of an eval-mode [`super::forward`] over the same
    /// unpadded prefix.
    pub fn step(&self, cache: &mut KvCache<T>, token: u32) -> Result<Vec<T>, ModelError> {
        let cfg = &self.config;
        let p = &self.params;
        let pos = cache.len;
        if pos >= cfg.n_positions {
            return Err(ModelError::SequenceTooLong { len: pos + 1, max: cfg.n_positions });
        }
        if token as usize >= cfg.vocab_size {
            return Err(ModelError::IdOutOfRange { id: token, vocab: cfg.vocab_size });
        }
        let (c, nh, hd) = (cfg.n_embd, cfg.n_head, cfg.head_dim());
        let id = token as usize;
        let mut x: Vec<T> = p.wte.data[id * c..(id + 1) * c]
            .iter()
            .zip(&p.wpe.data[pos * c..(pos + 1) * c])
            .map(|(&a, &b)| a + b)
            .collect();
        let scale = T::of(1.0 / (hd as f64).sqrt());
        let (mut mean, mut rstd) = ([T::zero()], [T::zero()]);
        let mut ln = vec![T::zero(); c];
        let mut qkv = vec![T::zero(); 3 * c];
        let mut att = vec![T::zero(); c];
        let mut proj = vec![T::zero(); c];
        let mut fc = vec![T::zero(); 4 * c];
        let mut act = vec![T::zero(); 4 * c];
        let len = pos + 1;
        let mut scores = vec![T::zero(); len];
        for (l, blk) in p.blocks.iter().enumerate() {
            layernorm_forward(&mut ln, &mut mean, &mut rstd, &x, &blk.ln1_g.data, &blk.ln1_b.data, c);
            linear_forward(&mut qkv, &ln, &blk.qkv_w.data, &blk.qkv_b.data, 1, c, 3 * c);
            cache.keys[l].extend_from_slice(&qkv[c..2 * c]);
            cache.values[l].extend_from_slice(&qkv[2 * c..]);
            let (keys, values) = (&cache.keys[l], &cache.values[l]);
            for h in 0..nh {
                let q = &qkv[h * hd..(h + 1) * hd];
                let mut max = f64::NEG_INFINITY;
                for (s, sc) in scores.iter_mut().enumerate() {
                    let k = &keys[s * c + h * hd..][..hd];
                    let mut dot = T::zero();
                    for (a, b) in q.iter().zip(k) {
                        dot += *a * *b;
                    }
                    *sc = dot * scale;
                    max = max.max(sc.f64());
                }
                let mut sum = 0.0;
                for sc in scores.iter_mut() {
                    let e = (sc.f64() - max).exp();
                    *sc = T::of(e);
                    sum += e;
                }
                let inv = T::of(1.0 / sum);
                let out = &mut att[h * hd..(h + 1) * hd];
                out.fill(T::zero());
                for (s, &w) in scores.iter().enumerate() {
                    let w = w * inv;
                    for (o, &v) in out.iter_mut().zip(&values[s * c + h * hd..][..hd]) {
                        *o += w * v;
                    }
                }
            }
            linear_forward(&mut proj, &att, &blk.proj_w.data, &blk.proj_b.data, 1, c, c);
            for (a, &b) in x.iter_mut().zip(&proj) {
                *a += b;
            }
            layernorm_forward(&mut ln, &mut mean, &mut rstd, &x, &blk.ln2_g.data, &blk.ln2_b.data, c);
            linear_forward(&mut fc, &ln, &blk.fc_w.data, &blk.fc_b.data, 1, c, 4 * c);
            gelu_forward(&mut act, &fc);
            linear_forward(&mut proj, &act, &blk.fcproj_w.data, &blk.fcproj_b.data, 1, 4 * c, c);
            for (a, &b) in x.iter_mut().zip(&proj) {
                *a += b;
            }
        }
        cache.len = len;
        layernorm_forward(&mut ln, &mut mean, &mut rstd, &x, &p.lnf_g.data, &p.lnf_b.data, c);
        let mut logits = vec![T::zero(); cfg.vocab_size];
        matmul(&mut logits, &ln, &p.wte.data, 1, c, cfg.vocab_size, false, true, false);
        Ok(logits)
    }

    /// Feeds a whole prompt; returns the cache and the logits after its last token.
    pub fn prefill(&self, prompt: &[u32]) -> Result<(KvCache<T>, Vec<T>), ModelError> {
        let mut cache = KvCache::new(self.config.n_layer);
        let mut logits = Vec::new();
        for &t in prompt {
            logits = self.step(&mut cache, t)?;
        }
        Ok((cache, logits))
    }
}

fn log_probs<T: Real>(logits: &[T]) -> Vec<f64> {
    let row: Vec<f64> = logits.iter().map(|v| v.f64()).collect();
    log_softmax(&row)
}

impl<T: Real> LanguageModel for Model<T> {
    type State = KvCache<T>;

    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn max_context(&self) -> usize {
        self.config.n_positions
    }

    fn start(&self, prompt: &[u32]) -> Result<(Self::State, Vec<f64>), ModelError> {
        if prompt.is_empty() {
            return Err(ModelError::Shape("empty prompt".into()));
        }
        let (cache, logits) = self.prefill(prompt)?;
        Ok((cache, log_probs(&logits)))
    }

    fn advance(&self, state: &mut Self::State, token: u32) -> Result<Vec<f64>, ModelError> {
        self.step(state, token).map(|l| log_probs(&l))
    }
}
