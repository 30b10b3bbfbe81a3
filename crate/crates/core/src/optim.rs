//! AdamW, learning-rate schedules, and the train / evaluate loops.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::augment::shuffle;
use crate::model::{self, Batch, LanguageModel, Model, ModelError, Parameters, Real, TrainState};
use crate::tokenizer::Vocab;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("invalid hyperparameter: {0}")]
    InvalidHyper(String),
    #[error("total steps {total} is below warmup steps {warmup}")]
    TotalBelowWarmup { total: usize, warmup: usize },
    #[error("non-finite gradient in tensor {tensor}")]
    NonFiniteGradient { tensor: String },
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("empty {0} set")]
    EmptySet(&'static str),
    #[error("report line {line}: {reason}")]
    Report { line: usize, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Learning-rate schedule family; `k`, `factor` and `period` are the
/// schedule's own hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Schedule {
    /// Linear 0 -> lr over the warmup, then linear lr -> 0 at the last step.
    WarmupLinearDecay,
    /// `lr / (1 + k t)`.
    TimeBased { k: f64 },
    /// `lr * factor^floor(t / period)`.
    StepDecay { factor: f64, period: usize },
    /// `lr * exp(-k t)`.
    Exponential { k: f64 },
}

impl Schedule {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Schedule::WarmupLinearDecay => "warmup_linear_decay",
            Schedule::TimeBased { .. } => "time_based",
            Schedule::StepDecay { .. } => "step_decay",
            Schedule::Exponential { .. } => "exponential",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimHyper {
    pub learning_rate: f64,
    pub epsilon: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: Schedule,
    /// Global-norm gradient clipping; off unless set.
    pub grad_clip: Option<f64>,
}

impl Default for OptimHyper {
    fn default() -> Self {
        OptimHyper {
            learning_rate: 5e-4,
            epsilon: 1e-8,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            warmup_steps: 100,
            epochs: 3,
            batch_size: 2,
            schedule: Schedule::WarmupLinearDecay,
            grad_clip: None,
        }
    }
}

impl OptimHyper {
    pub fn validate(&self) -> Result<(), OptimError> {
        let bad = |m: String| Err(OptimError::InvalidHyper(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {}", self.learning_rate));
        }
        if !(self.epsilon > 0.0) {
            return bad(format!("epsilon {}", self.epsilon));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} {b} outside [0, 1)"));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay {}", self.weight_decay));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("grad_clip {c}"));
            }
        }
        match self.schedule {
            Schedule::TimeBased { k } | Schedule::Exponential { k } if !(k >= 0.0) => bad(format!("decay k {k}")),
            Schedule::StepDecay { factor, period } if !(factor > 0.0) || period == 0 => {
                bad(format!("step decay factor {factor} period {period}"))
            }
            _ => Ok(()),
        }
    }
}

/// Learning rate for the update with 0-based index `step`.
pub fn lr_schedule(schedule: Schedule, hyper: &OptimHyper, step: usize, total_steps: usize) -> Result<f64, OptimError> {
    let lr0 = hyper.learning_rate;
    let t = step as f64;
    Ok(match schedule {
        Schedule::WarmupLinearDecay => {
            let warm = hyper.warmup_steps;
            if total_steps < warm {
                return Err(OptimError::TotalBelowWarmup { total: total_steps, warmup: warm });
            }
            if step < warm {
                lr0 * t / warm as f64
            } else if step == warm {
                lr0
            } else {
                let remaining = total_steps.saturating_sub(step) as f64;
                lr0 * remaining / (total_steps - warm) as f64
            }
        }
        Schedule::TimeBased { k } => lr0 / (1.0 + k * t),
        Schedule::StepDecay { factor, period } => lr0 * factor.powi((step / period) as i32),
        Schedule::Exponential { k } => lr0 * (-k * t).exp(),
    })
}

/// First and second moments per tensor, and the number of updates taken.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
}

impl<T: Real> OptimState<T> {
    pub fn new(p: &Parameters<T>) -> Self {
        let zeros: Vec<Vec<T>> = p.tensors().iter().map(|t| vec![T::zero(); t.len()]).collect();
        OptimState { m: zeros.clone(), v: zeros, t: 0 }
    }
}

/// One AdamW update of a flat buffer at (already incremented) step `t`.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update<T: Real>(p: &mut [T], g: &[T], m: &mut [T], v: &mut [T], t: u64, hyper: &OptimHyper, lr: f64) {
    let (b1, b2) = (hyper.beta1, hyper.beta2);
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    for i in 0..p.len() {
        let gi = g[i].f64();
        let mi = b1 * m[i].f64() + (1.0 - b1) * gi;
        let vi = b2 * v[i].f64() + (1.0 - b2) * gi * gi;
        m[i] = T::of(mi);
        v[i] = T::of(vi);
        let (m_hat, v_hat) = (mi / c1, vi / c2);
        let pi = p[i].f64();
        p[i] = T::of(pi - lr * (m_hat / (v_hat.sqrt() + hyper.epsilon) + hyper.weight_decay * pi));
    }
}

/// AdamW with decay decoupled from the moment path. A non-finite gradient
/// aborts the step before anything is mutated.
pub fn adamw_step<T: Real>(
    p: &mut Parameters<T>,
    g: &Parameters<T>,
    state: &mut OptimState<T>,
    hyper: &OptimHyper,
    lr: f64,
) -> Result<(), OptimError> {
    for (name, t) in g.names().into_iter().zip(g.tensors()) {
        if t.data.iter().any(|x| !x.is_finite()) {
            return Err(OptimError::NonFiniteGradient { tensor: name });
        }
    }
    state.t += 1;
    for (i, (pt, gt)) in p.tensors_mut().into_iter().zip(g.tensors()).enumerate() {
        adamw_update(&mut pt.data, &gt.data, &mut state.m[i], &mut state.v[i], state.t, hyper, lr);
    }
    Ok(())
}

fn clip_global_norm<T: Real>(g: &mut Parameters<T>, max_norm: f64) {
    let norm = g.tensors().iter().flat_map(|t| t.data.iter()).map(|x| x.f64().powi(2)).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = T::of(max_norm / norm);
        for t in g.tensors_mut() {
            for x in &mut t.data {
                *x *= s;
            }
        }
    }
}

/// `ceil(n / batch_size) * epochs`; the last short batch is kept.
pub fn total_steps(n: usize, batch_size: usize, epochs: usize) -> usize {
    n.div_ceil(batch_size) * epochs
}

/// Wraps each text as `bos + text + eos`, tokenizes, and truncates to `max_length`.
pub fn encode_examples<S: AsRef<str>>(vocab: &Vocab, texts: &[S], max_length: usize) -> Result<Vec<Vec<u32>>, OptimError> {
    let specials = crate::serialize::SpecialTokens::default();
    texts
        .iter()
        .map(|t| {
            let text = format!("{}{}{}", specials.bos, t.as_ref(), specials.eos);
            let mut ids = vocab.encode_ids(&text);
            ids.truncate(max_length);
            Ok(ids)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub seed: u64,
    pub pad_id: u32,
    /// Progress callback cadence in steps.
    pub log_every: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLoss {
    /// 1-based optimizer step (for validation: the step after which it ran).
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_perplexity: f64,
    pub val_loss: Option<f64>,
    pub val_perplexity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub train_steps: Vec<StepLoss>,
    pub val_batches: Vec<StepLoss>,
    pub epochs: Vec<EpochSummary>,
    pub total_steps: usize,
}

impl TrainReport {
    /// Line-oriented text: `step<TAB>split<TAB>loss` rows, then one `epoch`
    /// row per epoch and a closing `total_steps` row. Floats use the shortest
    /// representation that parses back to the same value.
    pub fn to_text(&self) -> String {
        let mut out = String::from("step\tsplit\tloss\n");
        for s in &self.train_steps {
            out.push_str(&format!("{}\ttrain\t{}\n", s.step, s.loss));
        }
        for s in &self.val_batches {
            out.push_str(&format!("{}\tval\t{}\n", s.step, s.loss));
        }
        let opt = |x: Option<f64>| x.map_or("-".to_string(), |v| v.to_string());
        for e in &self.epochs {
            out.push_str(&format!(
                "epoch\t{}\t{}\t{}\t{}\t{}\n",
                e.epoch, e.train_loss, e.train_perplexity, opt(e.val_loss), opt(e.val_perplexity)
            ));
        }
        out.push_str(&format!("total_steps\t{}\n", self.total_steps));
        out
    }

    pub fn parse(text: &str) -> Result<Self, OptimError> {
        let mut report = TrainReport::default();
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, "step\tsplit\tloss")) => {}
            _ => return Err(OptimError::Report { line: 1, reason: "missing header".into() }),
        }
        let mut saw_total = false;
        for (i, line) in lines {
            let err = |reason: String| OptimError::Report { line: i + 1, reason };
            let f: Vec<&str> = line.split('\t').collect();
            let num = |s: &str| s.parse::<f64>().map_err(|e| err(format!("{s:?}: {e}")));
            let int = |s: &str| s.parse::<usize>().map_err(|e| err(format!("{s:?}: {e}")));
            let opt = |s: &str| if s == "-" { Ok(None) } else { num(s).map(Some) };
            match f.as_slice() {
                ["epoch", e, tl, tp, vl, vp] => report.epochs.push(EpochSummary {
                    epoch: int(e)?,
                    train_loss: num(tl)?,
                    train_perplexity: num(tp)?,
                    val_loss: opt(vl)?,
                    val_perplexity: opt(vp)?,
                }),
                ["total_steps", n] => {
                    report.total_steps = int(n)?;
                    saw_total = true;
                }
                [step, "train", loss] => report.train_steps.push(StepLoss { step: int(step)?, loss: num(loss)? }),
                [step, "val", loss] => report.val_batches.push(StepLoss { step: int(step)?, loss: num(loss)? }),
                _ => return Err(err(format!("unrecognized line {line:?}"))),
            }
        }
        if !saw_total {
            return Err(OptimError::Report { line: 0, reason: "missing total_steps".into() });
        }
        Ok(report)
    }
}

fn step_seed(seed: u64, step: usize) -> u64 {
    seed ^ (step as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Trains in place. Each step: fetch a batch, start from zero gradients, run
/// forward, compute the loss, backpropagate, update with AdamW, advance the
/// schedule. A validation pass in eval mode closes every epoch.
pub fn train<T: Real>(
    model: &mut Model<T>,
    train_set: &[Vec<u32>],
    val_set: &[Vec<u32>],
    hyper: &OptimHyper,
    opts: &TrainOptions,
    progress: &mut dyn FnMut(usize, f64),
) -> Result<TrainReport, OptimError> {
    hyper.validate()?;
    if train_set.is_empty() {
        return Err(OptimError::EmptySet("training"));
    }
    let total = total_steps(train_set.len(), hyper.batch_size, hyper.epochs);
    lr_schedule(hyper.schedule, hyper, 0, total)?;
    let mut state = OptimState::new(&model.params);
    let mut report = TrainReport { total_steps: total, ..Default::default() };
    let mut step = 0usize;
    for epoch in 0..hyper.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        shuffle(&mut order, opts.seed.wrapping_add(epoch as u64));
        let mut epoch_sum = 0.0;
        let mut epoch_batches = 0usize;
        for chunk in order.chunks(hyper.batch_size) {
            let seqs: Vec<&[u32]> = chunk.iter().map(|&i| train_set[i].as_slice()).collect();
            let batch = Batch::from_sequences(&seqs, opts.pad_id);
            let (loss, mut grads) = model::backward(&model.params, &model.config, &batch, TrainState::train(step_seed(opts.seed, step)))?;
            if !loss.is_finite() {
                return Err(OptimError::NonFiniteLoss { step: step + 1 });
            }
            if let Some(c) = hyper.grad_clip {
                clip_global_norm(&mut grads, c);
            }
            let lr = lr_schedule(hyper.schedule, hyper, step, total)?;
            adamw_step(&mut model.params, &grads, &mut state, hyper, lr)?;
            step += 1;
            report.train_steps.push(StepLoss { step, loss });
            epoch_sum += loss;
            epoch_batches += 1;
            if opts.log_every > 0 && step.is_multiple_of(opts.log_every) {
                progress(step, loss);
            }
        }
        let train_loss = epoch_sum / epoch_batches as f64;
        let (val_loss, val_perplexity) = if val_set.is_empty() {
            (None, None)
        } else {
            let eval = evaluate(model, val_set, hyper.batch_size, opts.pad_id)?;
            report.val_batches.extend(eval.batch_losses.iter().map(|&loss| StepLoss { step, loss }));
            (Some(eval.avg_loss), Some(eval.perplexity))
        };
        report.epochs.push(EpochSummary {
            epoch: epoch + 1,
            train_loss,
            train_perplexity: train_loss.exp(),
            val_loss,
            val_perplexity,
        });
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    /// Mean per-token negative log-likelihood over the whole set.
    pub avg_loss: f64,
    pub perplexity: f64,
    pub tokens: usize,
    pub batch_losses: Vec<f64>,
}

/// Eval-mode pass over `data`; takes the model by shared reference, so
/// neither parameters nor optimizer state can change.
pub fn evaluate<T: Real>(model: &Model<T>, data: &[Vec<u32>], batch_size: usize, pad_id: u32) -> Result<EvalResult, OptimError> {
    if data.is_empty() {
        return Err(OptimError::EmptySet("evaluation"));
    }
    if batch_size == 0 {
        return Err(OptimError::InvalidHyper("batch_size must be positive".into()));
    }
    let mut sum = 0.0;
    let mut tokens = 0usize;
    let mut batch_losses = Vec::new();
    for chunk in data.chunks(batch_size) {
        let batch = Batch::from_sequences(chunk, pad_id);
        if batch.label_count() == 0 {
            continue;
        }
        let logits = model.forward(&batch, TrainState::eval())?;
        let (s, n) = model::lm_loss_sum(&logits, &batch, model.config.vocab_size)?;
        batch_losses.push(s / n as f64);
        sum += s;
        tokens += n;
    }
    if tokens == 0 {
        return Err(OptimError::Model(ModelError::NoLabels));
    }
    let avg_loss = sum / tokens as f64;
    Ok(EvalResult { avg_loss, perplexity: avg_loss.exp(), tokens, batch_losses })
}

/// `sum_t log p(ids[t+1] | ids[..=t])` by the chain rule.
pub fn sequence_logprob<M: LanguageModel>(model: &M, ids: &[u32]) -> Result<f64, OptimError> {
    if ids.len() < 2 {
        return Err(OptimError::Model(ModelError::Shape("need at least two tokens".into())));
    }
    let (mut state, mut lp) = model.start(&ids[..1])?;
    let mut total = 0.0;
    for t in 1..ids.len() {
        total += lp[ids[t] as usize];
        if t + 1 < ids.len() {
            lp = model.advance(&mut state, ids[t])?;
        }
    }
    Ok(total)
}

/// `exp(-logprob / (len - 1))`.
pub fn sequence_perplexity(logprob: f64, len: usize) -> f64 {
    (-logprob / (len as f64 - 1.0)).exp()
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.kind_name())
    }
}

/// Kind names accepted in configuration files; parameters come separately.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    WarmupLinearDecay,
    TimeBased,
    StepDecay,
    Exponential,
}

impl FromStr for ScheduleKind {
    type Err = OptimError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "warmup_linear_decay" => Ok(ScheduleKind::WarmupLinearDecay),
            "time_based" => Ok(ScheduleKind::TimeBased),
            "step_decay" => Ok(ScheduleKind::StepDecay),
            "exponential" => Ok(ScheduleKind::Exponential),
            other => Err(OptimError::InvalidHyper(format!("unknown schedule {other:?}"))),
        }
    }
}

impl ScheduleKind {
    pub fn with(self, k: f64, factor: f64, period: usize) -> Schedule {
        match self {
            ScheduleKind::WarmupLinearDecay => Schedule::WarmupLinearDecay,
            ScheduleKind::TimeBased => Schedule::TimeBased { k },
            ScheduleKind::StepDecay => Schedule::StepDecay { factor, period },
            ScheduleKind::Exponential => Schedule::Exponential { k },
        }
    }
}
