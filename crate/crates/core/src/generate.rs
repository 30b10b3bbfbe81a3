//! Beam-search decoding with no-repeat n-gram blocking.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use thiserror::Error;

use crate::corpus::CleanRecipe;
use crate::model::{LanguageModel, ModelError};
use crate::serialize::{self, SpecialTokens};
use crate::tokenizer::{TokenizerError, Vocab};

#[derive(Debug, Error)]
pub enum GenerateError {
    #[error("invalid generation parameters: {0}")]
    InvalidParams(String),
    #[error("prompt must be nonempty and shorter than max_length {max_length} (got {len})")]
    BadPrompt { len: usize, max_length: usize },
    #[error("every continuation is blocked and no hypothesis finished")]
    AllBlocked,
    #[error("at least one keyword is required")]
    EmptyKeywords,
    #[error("generated text is not a well-formed recipe ({reason}): {raw:?}")]
    Malformed { raw: String, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenParams {
    pub num_beams: usize,
    /// 0 disables blocking.
    pub no_repeat_ngram_size: usize,
    /// Total length cap in tokens, prompt included.
    pub max_length: usize,
    pub num_return_sequences: usize,
    pub eos_id: u32,
}

impl GenParams {
    pub fn new(eos_id: u32) -> Self {
        GenParams { num_beams: 5, no_repeat_ngram_size: 2, max_length: 1000, num_return_sequences: 1, eos_id }
    }

    pub fn validate(&self) -> Result<(), GenerateError> {
        if self.num_beams == 0 {
            return Err(GenerateError::InvalidParams("num_beams must be positive".into()));
        }
        if self.num_return_sequences == 0 || self.num_return_sequences > self.num_beams {
            return Err(GenerateError::InvalidParams(format!(
                "num_return_sequences {} must be in 1..={}",
                self.num_return_sequences, self.num_beams
            )));
        }
        if self.max_length == 0 {
            return Err(GenerateError::InvalidParams("max_length must be positive".into()));
        }
        Ok(())
    }
}

/// A hypothesis: the prompt plus everything generated after it.
#[derive(Debug, Clone, PartialEq)]
pub struct Beam {
    pub ids: Vec<u32>,
    pub score: f64,
    pub finished: bool,
}

/// Tokens whose appending would repeat an `n`-gram already in `ids`.
pub fn blocked_next_tokens(ids: &[u32], n: usize) -> BTreeSet<u32> {
    let mut out = BTreeSet::new();
    if n == 0 || ids.len() < n.max(1) {
        return out;
    }
    let prefix = &ids[ids.len() + 1 - n..];
    for w in ids.windows(n) {
        if &w[..n - 1] == prefix {
            out.insert(w[n - 1]);
        }
    }
    out
}

struct Live<S> {
    beam: Beam,
    state: Option<S>,
    log_probs: Vec<f64>,
}

struct Candidate {
    score: f64,
    token: u32,
    parent: usize,
    /// False for a finished beam carried over unchanged.
    extend: bool,
}

fn rank(a: &Candidate, b: &Candidate) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then(a.token.cmp(&b.token))
        .then(a.parent.cmp(&b.parent))
}

/// Length-wise beam search. Every step scores all `beam x vocab`
/// continuations by cumulative log-probability, blocked tokens excluded.
/// Finished beams keep their score and compete with growing ones. Ties go to
/// the lower token id, then the lower beam index; a carried-over finished
/// beam ranks by its last token.
pub fn beam_search<M: LanguageModel>(model: &M, prompt: &[u32], gp: &GenParams) -> Result<Vec<Beam>, GenerateError> {
    gp.validate()?;
    let max_length = gp.max_length.min(model.max_context());
    if prompt.is_empty() || prompt.len() >= max_length {
        return Err(GenerateError::BadPrompt { len: prompt.len(), max_length });
    }
    let (state, log_probs) = model.start(prompt)?;
    let mut beams = vec![Live {
        beam: Beam { ids: prompt.to_vec(), score: 0.0, finished: false },
        state: Some(state),
        log_probs,
    }];
    let mut len = prompt.len();
    while len < max_length && beams.iter().any(|b| !b.beam.finished) {
        let mut cands = Vec::new();
        for (i, live) in beams.iter().enumerate() {
            if live.beam.finished {
                let token = *live.beam.ids.last().expect("nonempty beam");
                cands.push(Candidate { score: live.beam.score, token, parent: i, extend: false });
                continue;
            }
            let blocked = blocked_next_tokens(&live.beam.ids, gp.no_repeat_ngram_size);
            for (tok, &lp) in live.log_probs.iter().enumerate() {
                let tok = tok as u32;
                if lp == f64::NEG_INFINITY || lp.is_nan() || blocked.contains(&tok) {
                    continue;
                }
                cands.push(Candidate { score: live.beam.score + lp, token: tok, parent: i, extend: true });
            }
        }
        if cands.is_empty() {
            return Err(GenerateError::AllBlocked);
        }
        cands.sort_by(rank);
        cands.truncate(gp.num_beams);
        len += 1;
        let mut next = Vec::with_capacity(cands.len());
        for c in cands {
            let parent = &beams[c.parent];
            if !c.extend {
                next.push(Live { beam: parent.beam.clone(), state: None, log_probs: Vec::new() });
                continue;
            }
            let mut ids = parent.beam.ids.clone();
            ids.push(c.token);
            let finished = c.token == gp.eos_id;
            let (state, log_probs) = if finished || len >= max_length {
                (None, Vec::new())
            } else {
                let mut s = parent.state.clone().expect("live beam keeps its state");
                let lp = model.advance(&mut s, c.token)?;
                (Some(s), lp)
            };
            next.push(Live { beam: Beam { ids, score: c.score, finished }, state, log_probs });
        }
        beams = next;
    }
    let mut out: Vec<Beam> = beams.into_iter().map(|l| l.beam).collect();
    out.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal));
    out.truncate(gp.num_return_sequences);
    Ok(out)
}

/// Greedy argmax decoding, lowest token id on ties.
pub fn greedy<M: LanguageModel>(model: &M, prompt: &[u32], max_length: usize, eos_id: u32) -> Result<Vec<u32>, GenerateError> {
    let max_length = max_length.min(model.max_context());
    let (mut state, mut lp) = model.start(prompt)?;
    let mut ids = prompt.to_vec();
    while ids.len() < max_length {
        let mut best = 0usize;
        for (i, &v) in lp.iter().enumerate() {
            if v > lp[best] {
                best = i;
            }
        }
        ids.push(best as u32);
        if best as u32 == eos_id || ids.len() >= max_length {
            break;
        }
        lp = model.advance(&mut state, best as u32)?;
    }
    Ok(ids)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    /// The prettified recipe.
    pub display: String,
    pub recipe: CleanRecipe,
    /// Decoded generation with control tokens removed, keyword prefix kept.
    pub raw: String,
    pub score: f64,
}

/// The text a keyword prompt is made of: bos, the keywords, the title marker.
pub fn keyword_prompt<S: AsRef<str>>(keywords: &[S]) -> String {
    let t = SpecialTokens::default();
    let words: Vec<&str> = keywords.iter().map(|k| k.as_ref()).collect();
    format!("{}{}{}", t.bos, words.join(" "), t.title)
}

/// Prompts with the keywords, decodes the best beam and parses it.
pub fn generate_recipe<M: LanguageModel, S: AsRef<str>>(
    model: &M,
    vocab: &Vocab,
    keywords: &[S],
    gp: &GenParams,
) -> Result<Generated, GenerateError> {
    if keywords.is_empty() || keywords.iter().all(|k| k.as_ref().trim().is_empty()) {
        return Err(GenerateError::EmptyKeywords);
    }
    let prompt = vocab.encode_ids(&keyword_prompt(keywords));
    let best = beam_search(model, &prompt, gp)?.into_iter().next().ok_or(GenerateError::AllBlocked)?;
    let text = vocab.decode(&best.ids)?;
    let raw = serialize::strip_control_tokens(&text);
    match serialize::decode_recipe(&raw) {
        Ok(recipe) => Ok(Generated { display: serialize::render(&recipe), recipe, raw, score: best.score }),
        Err(e) => Err(GenerateError::Malformed { raw, reason: e.to_string() }),
    }
}
