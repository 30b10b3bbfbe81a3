//! Byte-level byte-pair encoding.
//!
//! Ids `0..256` are raw bytes, followed by one id per learned merge, followed
//! by the registered special tokens. Special tokens are matched before any
//! byte handling and always map to their single id.
//!
//! Text is pre-split into chunks that start at the beginning of the input or
//! at a whitespace character following a non-whitespace one, so a leading
//! space belongs to the word after it and merges never span two words.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::serialize::PAD;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("target vocabulary size {0} leaves no room for merges (must exceed 256)")]
    TargetTooSmall(usize),
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("special token {0:?} is already registered")]
    DuplicateSpecial(String),
    #[error("token id {id} is outside the vocabulary of {size}")]
    IdOutOfRange { id: u32, size: usize },
    #[error("padding requested but {PAD:?} is not registered")]
    NoPadToken,
    #[error("special token {0:?} is not registered")]
    MissingSpecial(String),
    #[error("padding requested without a max length")]
    PadWithoutLength,
    #[error("vocab file line {line}: {reason}")]
    Format { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Token ids plus a mask with 0 exactly at pad ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoding {
    pub ids: Vec<u32>,
    pub attention_mask: Vec<u8>,
}

#[derive(Debug, Clone)]
pub struct Vocab {
    /// Byte string of every non-special id.
    tokens: Vec<Vec<u8>>,
    merges: Vec<(u32, u32)>,
    ranks: HashMap<(u32, u32), u32>,
    specials: Vec<String>,
}

impl PartialEq for Vocab {
    fn eq(&self, other: &Self) -> bool {
        self.merges == other.merges && self.specials == other.specials
    }
}

/// Splits before every whitespace char that follows a non-whitespace char.
fn chunks(text: &str) -> impl Iterator<Item = &str> {
    let mut start = 0;
    let mut prev_ws = true;
    let mut cuts = Vec::new();
    for (i, c) in text.char_indices() {
        let ws = c.is_whitespace();
        if ws && !prev_ws && i > start {
            cuts.push((start, i));
            start = i;
        }
        prev_ws = ws;
    }
    if start < text.len() {
        cuts.push((start, text.len()));
    }
    cuts.into_iter().map(move |(a, b)| &text[a..b])
}

/// Splits `text` into plain spans and special-token matches. At each point the
/// earliest match wins; at the same position the longer special wins.
fn split_specials<'a>(text: &'a str, specials: &[&str]) -> Vec<(bool, &'a str)> {
    let mut out = Vec::new();
    let mut rest = text;
    loop {
        let next = specials
            .iter()
            .filter(|s| !s.is_empty())
            .filter_map(|s| rest.find(s).map(|at| (at, s.len())))
            .min_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)));
        match next {
            Some((at, len)) => {
                if at > 0 {
                    out.push((false, &rest[..at]));
                }
                out.push((true, &rest[at..at + len]));
                rest = &rest[at + len..];
            }
            None => {
                if !rest.is_empty() {
                    out.push((false, rest));
                }
                return out;
            }
        }
    }
}

/// Replaces every non-overlapping `(a, b)` left to right with `new`.
fn merge_pair(symbols: &mut Vec<u32>, a: u32, b: u32, new: u32) {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == a && symbols[i + 1] == b {
            out.push(new);
            i += 2;
        } else {
            out.push(symbols[i]);
            i += 1;
        }
    }
    *symbols = out;
}

/// Learns merges until `256 + merges` reaches `target_size` or no pair occurs
/// at least twice. The most frequent adjacent pair wins; ties go to the pair
/// seen first in corpus order. A pair whose concatenation is already a token
/// is never merged, so every id has a distinct byte string. Text matching one
/// of `reserved` is excluded from training.
pub fn train_bpe<S: AsRef<str>>(corpus: &[S], target_size: usize, reserved: &[&str]) -> Result<Vocab, TokenizerError> {
    if target_size <= 256 {
        return Err(TokenizerError::TargetTooSmall(target_size));
    }
    if corpus.is_empty() {
        return Err(TokenizerError::EmptyCorpus);
    }
    // Unique chunks in order of first appearance; scanning them in this order
    // visits every pair's first corpus occurrence in corpus order.
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut words: Vec<(Vec<u32>, u64)> = Vec::new();
    for text in corpus {
        for (special, span) in split_specials(text.as_ref(), reserved) {
            if special {
                continue;
            }
            for chunk in chunks(span) {
                match index.get(chunk) {
                    Some(&w) => words[w].1 += 1,
                    None => {
                        index.insert(chunk, words.len());
                        words.push((chunk.bytes().map(u32::from).collect(), 1));
                    }
                }
            }
        }
    }

    let mut vocab = Vocab::bytes_only();
    let mut known: HashSet<Vec<u8>> = vocab.tokens.iter().cloned().collect();
    while vocab.tokens.len() < target_size {
        let mut stats: HashMap<(u32, u32), (u64, u64)> = HashMap::new();
        let mut order = 0u64;
        for (symbols, count) in &words {
            for pair in symbols.windows(2) {
                let entry = stats.entry((pair[0], pair[1])).or_insert((0, order));
                entry.0 += count;
                order += 1;
            }
        }
        let best = stats
            .into_iter()
            .filter(|((a, b), _)| !known.contains(&vocab.concat(*a, *b)))
            .max_by(|(_, (c1, f1)), (_, (c2, f2))| c1.cmp(c2).then(f2.cmp(f1)));
        let Some(((a, b), (count, _))) = best else { break };
        if count < 2 {
            break;
        }
        let new = vocab.push_merge(a, b);
        known.insert(vocab.tokens[new as usize].clone());
        for (symbols, _) in &mut words {
            merge_pair(symbols, a, b, new);
        }
    }
    Ok(vocab)
}

impl Vocab {
    /// The 256 single-byte tokens and nothing else.
    pub fn bytes_only() -> Self {
        Self {
            tokens: (0..=255u8).map(|b| vec![b]).collect(),
            merges: Vec::new(),
            ranks: HashMap::new(),
            specials: Vec::new(),
        }
    }

    fn concat(&self, a: u32, b: u32) -> Vec<u8> {
        let mut v = self.tokens[a as usize].clone();
        v.extend_from_slice(&self.tokens[b as usize]);
        v
    }

    fn push_merge(&mut self, a: u32, b: u32) -> u32 {
        let id = self.tokens.len() as u32;
        let bytes = self.concat(a, b);
        self.tokens.push(bytes);
        self.ranks.insert((a, b), self.merges.len() as u32);
        self.merges.push((a, b));
        id
    }

    pub fn size(&self) -> usize {
        self.tokens.len() + self.specials.len()
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn specials(&self) -> &[String] {
        &self.specials
    }

    pub fn special_id(&self, token: &str) -> Option<u32> {
        self.specials
            .iter()
            .position(|s| s == token)
            .map(|i| (self.tokens.len() + i) as u32)
    }

    pub fn is_special(&self, id: u32) -> bool {
        (id as usize) >= self.tokens.len() && (id as usize) < self.size()
    }

    /// Bytes for a plain token id, or the special string's bytes.
    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        let i = id as usize;
        if i < self.tokens.len() {
            Some(&self.tokens[i])
        } else {
            self.specials.get(i - self.tokens.len()).map(|s| s.as_bytes())
        }
    }

    /// Registers new specials above every existing id, in list order.
    pub fn add_special_tokens<S: AsRef<str>>(mut self, tokens: &[S]) -> Result<Self, TokenizerError> {
        for t in tokens {
            let t = t.as_ref();
            if t.is_empty() || self.specials.iter().any(|s| s == t) {
                return Err(TokenizerError::DuplicateSpecial(t.to_string()));
            }
            self.specials.push(t.to_string());
        }
        Ok(self)
    }

    fn encode_chunk(&self, chunk: &str, out: &mut Vec<u32>) {
        let mut symbols: Vec<u32> = chunk.bytes().map(u32::from).collect();
        while symbols.len() > 1 {
            let best = symbols
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0], w[1])).map(|&r| (r, w[0], w[1])))
                .min();
            let Some((rank, a, b)) = best else { break };
            merge_pair(&mut symbols, a, b, 256 + rank);
        }
        out.extend(symbols);
    }

    /// Plain text to ids without truncation or padding.
    pub fn encode_ids(&self, text: &str) -> Vec<u32> {
        let specials: Vec<&str> = self.specials.iter().map(String::as_str).collect();
        let mut ids = Vec::new();
        for (special, span) in split_specials(text, &specials) {
            if special {
                ids.push(self.special_id(span).expect("matched a registered special"));
            } else {
                for chunk in chunks(span) {
                    self.encode_chunk(chunk, &mut ids);
                }
            }
        }
        ids
    }

    /// Encodes `text`, truncating to `max_length` when given and right-padding
    /// to it when `pad` is set.
    pub fn encode(&self, text: &str, max_length: Option<usize>, pad: bool) -> Result<Encoding, TokenizerError> {
        let mut ids = self.encode_ids(text);
        if let Some(max) = max_length {
            ids.truncate(max);
        }
        let pad_id = self.special_id(PAD);
        if pad {
            let max = max_length.ok_or(TokenizerError::PadWithoutLength)?;
            let pad_id = pad_id.ok_or(TokenizerError::NoPadToken)?;
            ids.resize(max, pad_id);
        }
        let attention_mask = ids.iter().map(|&id| u8::from(Some(id) != pad_id)).collect();
        Ok(Encoding { ids, attention_mask })
    }

    /// Concatenates token bytes. Byte sequences that are not valid UTF-8 (only
    /// possible for model-generated ids) are replaced lossily.
    pub fn decode(&self, ids: &[u32]) -> Result<String, TokenizerError> {
        let mut bytes = Vec::new();
        for &id in ids {
            let b = self
                .token_bytes(id)
                .ok_or(TokenizerError::IdOutOfRange { id, size: self.size() })?;
            bytes.extend_from_slice(b);
        }
        Ok(match String::from_utf8(bytes) {
            Ok(s) => s,
            Err(e) => String::from_utf8_lossy(e.as_bytes()).into_owned(),
        })
    }

    /// Text form: header, one escaped merge per line, then the specials.
    pub fn to_file_string(&self) -> String {
        let mut out = format!("bpe-vocab v1 size={}\n", self.size());
        for &(a, b) in &self.merges {
            let _ = writeln!(out, "{}\t{}", escape(&self.tokens[a as usize]), escape(&self.tokens[b as usize]));
        }
        out.push_str("specials:\n");
        for (i, s) in self.specials.iter().enumerate() {
            let _ = writeln!(out, "{}\t{}", escape(s.as_bytes()), self.tokens.len() + i);
        }
        out
    }

    pub fn from_file_string(text: &str) -> Result<Self, TokenizerError> {
        let err = |line: usize, reason: &str| TokenizerError::Format { line, reason: reason.to_string() };
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| err(1, "empty file"))?;
        let size: usize = header
            .strip_prefix("bpe-vocab v1 size=")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| err(1, "bad header"))?;
        let mut vocab = Vocab::bytes_only();
        let mut by_bytes: HashMap<Vec<u8>, u32> =
            vocab.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        let mut in_specials = false;
        for (i, line) in lines {
            let n = i + 1;
            if line == "specials:" {
                in_specials = true;
                continue;
            }
            let (left, right) = line.split_once('\t').ok_or_else(|| err(n, "missing TAB"))?;
            let left = unescape(left).ok_or_else(|| err(n, "bad escape"))?;
            if in_specials {
                let id: usize = right.parse().map_err(|_| err(n, "bad special id"))?;
                if id != vocab.size() {
                    return Err(err(n, "special ids must be contiguous above the merges"));
                }
                let token = String::from_utf8(left).map_err(|_| err(n, "special is not UTF-8"))?;
                vocab = vocab.add_special_tokens(&[token]).map_err(|e| err(n, &e.to_string()))?;
            } else {
                let right = unescape(right).ok_or_else(|| err(n, "bad escape"))?;
                let a = *by_bytes.get(&left).ok_or_else(|| err(n, "unknown left token"))?;
                let b = *by_bytes.get(&right).ok_or_else(|| err(n, "unknown right token"))?;
                let id = vocab.push_merge(a, b);
                if by_bytes.insert(vocab.tokens[id as usize].clone(), id).is_some() {
                    return Err(err(n, "merge repeats an existing token"));
                }
            }
        }
        if vocab.size() != size {
            return Err(err(1, "size in header does not match contents"));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        crate::fsutil::write_atomic(path, self.to_file_string().as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        Self::from_file_string(&std::fs::read_to_string(path)?)
    }
}

fn escape(bytes: &[u8]) -> String {
    let mut out = String::with_capacity(bytes.len());
    for &b in bytes {
        match b {
            b'\\' => out.push_str("\\\\"),
            0x21..=0x7e => out.push(b as char),
            _ => {
                let _ = write!(out, "\\x{b:02x}");
            }
        }
    }
    out
}

fn unescape(s: &str) -> Option<Vec<u8>> {
    let bytes = s.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'\\' {
            match bytes.get(i + 1)? {
                b'\\' => {
                    out.push(b'\\');
                    i += 2;
                }
                b'x' => {
                    let hex = std::str::from_utf8(bytes.get(i + 2..i + 4)?).ok()?;
                    out.push(u8::from_str_radix(hex, 16).ok()?);
                    i += 4;
                }
                _ => return None,
            }
        } else {
            out.push(bytes[i]);
            i += 1;
        }
    }
    Some(out)
}
