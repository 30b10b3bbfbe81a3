//! Training-example construction.
//!
//! Every recipe becomes several `(source, target)` pairs. The source is a
//! subset of the recipe's ingredient keywords; the target is that source
//! followed by the serialized recipe, so the model learns to continue a list
//! of keywords into a full recipe.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::CleanRecipe;
use crate::serialize::{self, EncodeError};

#[derive(Debug, Error, PartialEq)]
pub enum AugmentError {
    #[error("splitting needs at least 3 examples, got {0}")]
    TooFewExamples(usize),
    #[error("split fraction {0} is outside (0, 1)")]
    BadFraction(f64),
    #[error("no letters found in the input texts")]
    NoLetters,
    #[error("cannot compare a {0} distribution with a {1} distribution")]
    ModeMismatch(CharMode, CharMode),
    #[error("TSV line {line}: {reason}")]
    Tsv { line: usize, reason: String },
    #[error(transparent)]
    Encode(#[from] EncodeError),
}

/// Unit and size words dropped from the start of an ingredient line.
pub const UNIT_WORDS: &[&str] = &[
    "g", "kg", "ml", "l", "tsp", "tbsp", "cup", "cups", "oz", "ounce", "packet", "slices", "each",
    "large", "small",
];

fn is_fraction_char(c: char) -> bool {
    matches!(c, '¼' | '½' | '¾' | '⁄') || ('\u{2150}'..='\u{215E}').contains(&c)
}

fn is_quantity(tok: &str) -> bool {
    let numeric_end = tok
        .char_indices()
        .find(|&(_, c)| !(c.is_ascii_digit() || is_fraction_char(c) || "/-–.,x".contains(c)))
        .map_or(tok.len(), |(i, _)| i);
    let (number, rest) = tok.split_at(numeric_end);
    let has_digit = number.chars().any(|c| c.is_ascii_digit() || is_fraction_char(c));
    has_digit && (rest.is_empty() || UNIT_WORDS.contains(&rest))
}

fn is_filler(tok: &str) -> bool {
    is_quantity(tok) || UNIT_WORDS.contains(&tok) || tok.chars().all(|c| !c.is_alphanumeric())
}

/// Drops parenthesized asides, nested or not. An unclosed `(` runs to the end.
fn strip_parenthesized(s: &str) -> String {
    let mut depth = 0usize;
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '(' => {
                depth += 1;
                out.push(' ');
            }
            ')' if depth > 0 => depth -= 1,
            _ if depth == 0 => out.push(c),
            _ => {}
        }
    }
    out
}

/// Reduces an ingredient line to its keyword: lowercase, no asides, no
/// leading quantities or units. Lines that reduce to nothing become `"unknown"`.
pub fn ingredient_keywords(line: &str) -> String {
    let lowered = strip_parenthesized(&line.to_lowercase());
    let tokens: Vec<&str> = lowered.split_whitespace().collect();
    let start = tokens.iter().position(|t| !is_filler(t)).unwrap_or(tokens.len());
    let keyword = tokens[start..].join(" ");
    if keyword.is_empty() {
        "unknown".to_string()
    } else {
        keyword
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Largest keyword subset used as a prefix; `None` means no bound.
    pub max_subset_size: Option<usize>,
    /// Most prefixes kept per recipe; `None` means keep all.
    pub max_rows_per_recipe: Option<usize>,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { max_subset_size: Some(2), max_rows_per_recipe: Some(10), seed: 0 }
    }
}

fn binomial(n: u64, k: u64) -> u64 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
        if acc > u64::MAX as u128 {
            return u64::MAX;
        }
    }
    acc as u64
}

/// Maps a rank in "by size, then lexicographic" order to the subset's sorted
/// element indices.
fn unrank_subset(n: usize, mut rank: u64) -> Vec<usize> {
    let mut size = 1;
    loop {
        let count = binomial(n as u64, size as u64);
        if rank < count {
            break;
        }
        rank -= count;
        size += 1;
    }
    let mut out = Vec::with_capacity(size);
    let mut next = 0;
    for remaining in (1..=size).rev() {
        loop {
            let with_next = binomial((n - next - 1) as u64, (remaining - 1) as u64);
            if rank < with_next {
                out.push(next);
                next += 1;
                break;
            }
            rank -= with_next;
            next += 1;
        }
    }
    out
}

/// Floyd's sampling of `amount` distinct values from `0..total`.
fn sample_ranks(total: u64, amount: u64, seed: u64) -> BTreeSet<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = BTreeSet::new();
    for j in total - amount..total {
        let t = rng.gen_range(0..=j);
        if !chosen.insert(t) {
            chosen.insert(j);
        }
    }
    chosen
}

/// Nonempty keyword subsets rendered as space-joined prefixes, ordered by
/// size then lexicographically by keyword position. Duplicate keywords are
/// collapsed first. When more than `max_rows` subsets exist, a seeded sample
/// of that many is kept, still in enumeration order.
pub fn powerset_prefixes(
    keywords: &[String],
    max_subset_size: Option<usize>,
    max_rows: Option<usize>,
    seed: u64,
) -> Vec<String> {
    let mut unique: Vec<&str> = Vec::new();
    for k in keywords {
        if !unique.contains(&k.as_str()) {
            unique.push(k);
        }
    }
    let n = unique.len();
    let largest = max_subset_size.unwrap_or(n).min(n);
    let total = (1..=largest).fold(0u64, |acc, k| acc.saturating_add(binomial(n as u64, k as u64)));
    let ranks: Vec<u64> = match max_rows {
        Some(m) if (m as u64) < total => sample_ranks(total, m as u64, seed).into_iter().collect(),
        _ => (0..total).collect(),
    };
    ranks
        .into_iter()
        .map(|rank| {
            unrank_subset(n, rank)
                .into_iter()
                .map(|i| unique[i])
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TrainingExample {
    pub source: String,
    pub target: String,
}

impl TrainingExample {
    pub fn tsv_line(&self) -> String {
        format!("{}\t{}", self.source, self.target)
    }
}

pub fn build_examples(r: &CleanRecipe, cfg: &AugmentConfig) -> Result<Vec<TrainingExample>, EncodeError> {
    let body = serialize::encode_recipe(r)?;
    let keywords: Vec<String> = r.ingredients.iter().map(|l| ingredient_keywords(l)).collect();
    Ok(powerset_prefixes(&keywords, cfg.max_subset_size, cfg.max_rows_per_recipe, cfg.seed)
        .into_iter()
        .map(|source| TrainingExample { target: format!("{source}{body}"), source })
        .collect())
}

/// One example per line, `source<TAB>target`, LF-terminated.
pub fn write_tsv(examples: &[TrainingExample]) -> String {
    let mut out = String::new();
    for e in examples {
        out.push_str(&e.tsv_line());
        out.push('\n');
    }
    out
}

pub fn parse_tsv(text: &str) -> Result<Vec<TrainingExample>, AugmentError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, line)| {
            let (source, target) = line.split_once('\t').ok_or_else(|| AugmentError::Tsv {
                line: i + 1,
                reason: "missing TAB".into(),
            })?;
            Ok(TrainingExample { source: source.into(), target: target.into() })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_test: f64,
    pub train_val: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(seed: u64) -> Self {
        Self { train_test: 0.8, train_val: 0.9, seed }
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        for f in [self.train_test, self.train_val] {
            if !(f > 0.0 && f < 1.0) {
                return Err(AugmentError::BadFraction(f));
            }
        }
        Ok(())
    }

    /// `(train, val, test)` sizes for `n` examples.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let pool = floor_fraction(self.train_test, n);
        let train = floor_fraction(self.train_val, pool);
        (train, pool - train, n - pool)
    }
}

// The slack absorbs products like 0.29 * 100 = 28.999999999999996.
fn floor_fraction(frac: f64, n: usize) -> usize {
    ((frac * n as f64) + 1e-9).floor() as usize
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

/// Seeded Fisher-Yates over positions `n-1 .. 1`, each swapped with a uniform
/// index in `0..=i`.
pub fn shuffle<T>(xs: &mut [T], seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..xs.len()).rev() {
        let j = rng.gen_range(0..=i);
        xs.swap(i, j);
    }
}

/// Shuffles, then cuts `floor(train_test * n)` into a pool (the rest is test)
/// and `floor(train_val * pool)` of the pool into train (the rest is val).
pub fn split_dataset<T>(mut xs: Vec<T>, spec: &SplitSpec) -> Result<Split<T>, AugmentError> {
    spec.validate()?;
    if xs.len() < 3 {
        return Err(AugmentError::TooFewExamples(xs.len()));
    }
    let (n_train, n_val, _) = spec.sizes(xs.len());
    shuffle(&mut xs, spec.seed);
    let test = xs.split_off(n_train + n_val);
    let val = xs.split_off(n_train);
    Ok(Split { train: xs, val, test })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CharMode {
    First,
    All,
}

impl fmt::Display for CharMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CharMode::First => "first",
            CharMode::All => "all",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharDistribution {
    pub mode: CharMode,
    pub percentages: BTreeMap<char, f64>,
}

fn letters(text: &str) -> impl Iterator<Item = char> + '_ {
    text.chars().filter(|c| c.is_alphabetic()).flat_map(char::to_lowercase)
}

/// Letter frequencies in percent. `First` counts only the first letter of each
/// text; `All` counts every letter. Non-letters are ignored, accented letters
/// are their own keys.
pub fn char_distribution<S: AsRef<str>>(texts: &[S], mode: CharMode) -> Result<CharDistribution, AugmentError> {
    let mut counts: BTreeMap<char, u64> = BTreeMap::new();
    for t in texts {
        let t = t.as_ref();
        match mode {
            CharMode::First => {
                if let Some(c) = letters(t).next() {
                    *counts.entry(c).or_default() += 1;
                }
            }
            CharMode::All => {
                for c in letters(t) {
                    *counts.entry(c).or_default() += 1;
                }
            }
        }
    }
    let total: u64 = counts.values().sum();
    if total == 0 {
        return Err(AugmentError::NoLetters);
    }
    let percentages = counts
        .into_iter()
        .map(|(c, n)| (c, 100.0 * n as f64 / total as f64))
        .collect();
    Ok(CharDistribution { mode, percentages })
}

/// Per-letter absolute difference over the union of keys, and its maximum.
pub fn distribution_diff(
    a: &CharDistribution,
    b: &CharDistribution,
) -> Result<(BTreeMap<char, f64>, f64), AugmentError> {
    if a.mode != b.mode {
        return Err(AugmentError::ModeMismatch(a.mode, b.mode));
    }
    let keys: BTreeSet<char> = a.percentages.keys().chain(b.percentages.keys()).copied().collect();
    let diff: BTreeMap<char, f64> = keys
        .into_iter()
        .map(|c| {
            let pa = a.percentages.get(&c).copied().unwrap_or(0.0);
            let pb = b.percentages.get(&c).copied().unwrap_or(0.0);
            (c, (pa - pb).abs())
        })
        .collect();
    let max = diff.values().copied().fold(0.0, f64::max);
    Ok((diff, max))
}

/// Train/test comparison table with six decimals.
pub fn stratification_table(train: &CharDistribution, test: &CharDistribution) -> Result<String, AugmentError> {
    let (diff, max) = distribution_diff(train, test)?;
    let mut out = String::from("Character\tTrain list (%)\tTest list (%)\tDifference\n");
    for (c, d) in &diff {
        let pa = train.percentages.get(c).copied().unwrap_or(0.0);
        let pb = test.percentages.get(c).copied().unwrap_or(0.0);
        out.push_str(&format!("{c}\t{pa:.6}\t{pb:.6}\t{d:.6}\n"));
    }
    out.push_str(&format!("max\t\t\t{max:.6}\n"));
    Ok(out)
}
