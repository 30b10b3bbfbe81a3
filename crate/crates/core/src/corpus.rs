//! Recipe corpora: loading, validation and length statistics.
//!
//! Three on-disk layouts are understood:
//!
//! - `recipe-box-json`: a JSON object mapping recipe id to
//!   `{title, ingredients: [..], instructions, picture_link}`,
//! - `three-column-csv`: `Title,Ingredients,Instructions` with comma-separated
//!   sub-items inside the ingredient and instruction cells,
//! - `tsv-pairs`: `source<TAB>target` lines as written by the augmentation stage.
//!
//! Loading never validates content. [`clean_recipe`] does that and turns a
//! [`RawRecipe`] into a [`CleanRecipe`] or a [`Rejection`].

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::serialize;

/// Marker scrubbed from every field during cleaning.
pub const ADVERTISEMENT: &str = "ADVERTISEMENT";

/// Default upper bound on the total character length of a recipe.
pub const DEFAULT_MAX_CHARS: usize = 2000;

/// Default lower bound on the joined instruction text length.
pub const DEFAULT_MIN_INSTRUCTION_CHARS: usize = 50;

/// Instruction text that marks a book advertisement rather than a method.
pub const BOOK_ADVERT: &str = "This recipe is taken from the book";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("unknown corpus format {0:?}")]
    UnknownFormat(String),
    #[error("length statistics need at least one recipe")]
    EmptyInput,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CorpusFormat {
    RecipeBoxJson,
    ThreeColumnCsv,
    TsvPairs,
}

impl FromStr for CorpusFormat {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "recipe-box-json" => Ok(Self::RecipeBoxJson),
            "three-column-csv" => Ok(Self::ThreeColumnCsv),
            "tsv-pairs" => Ok(Self::TsvPairs),
            other => Err(CorpusError::UnknownFormat(other.to_string())),
        }
    }
}

impl fmt::Display for CorpusFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::RecipeBoxJson => "recipe-box-json",
            Self::ThreeColumnCsv => "three-column-csv",
            Self::TsvPairs => "tsv-pairs",
        })
    }
}

/// How the free-text instruction field is divided into steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InstructionLayout {
    /// Steps separated by ", " (the CSV convention).
    CommaSeparated,
    /// Plain prose: split on newlines, then after sentence-final periods.
    Plaintext,
    /// One step per line.
    OnePerLine,
}

impl InstructionLayout {
    pub fn split(self, text: &str) -> Vec<String> {
        match self {
            Self::CommaSeparated => text.split(", ").map(str::to_string).collect(),
            Self::OnePerLine => text.lines().map(str::to_string).collect(),
            Self::Plaintext => text.lines().flat_map(split_sentences).collect(),
        }
    }
}

/// Splits after every period that is followed by whitespace; the period stays
/// with its sentence.
fn split_sentences(line: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut chars = line.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if c == '.' {
            if let Some(&(_, next)) = chars.peek() {
                if next.is_whitespace() {
                    out.push(line[start..=i].to_string());
                    start = i + 1;
                }
            }
        }
    }
    out.push(line[start..].to_string());
    out
}

/// A recipe as found on disk, before any validation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawRecipe {
    pub id: String,
    pub title: Option<String>,
    pub ingredients: Vec<String>,
    pub instructions: Option<String>,
    pub picture_link: Option<String>,
    pub layout: InstructionLayout,
}

/// A validated recipe: every field present, trimmed, advertisement-free.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CleanRecipe {
    pub title: String,
    pub ingredients: Vec<String>,
    pub instructions: Vec<String>,
}

impl CleanRecipe {
    /// Total length in Unicode scalar values: title, ingredients and
    /// instructions joined with single spaces.
    pub fn char_len(&self) -> usize {
        let parts = 1 + self.ingredients.len() + self.instructions.len();
        let chars: usize = std::iter::once(&self.title)
            .chain(&self.ingredients)
            .chain(&self.instructions)
            .map(|s| s.chars().count())
            .sum();
        chars + parts - 1
    }

    /// Instruction steps joined with single spaces.
    pub fn instruction_text(&self) -> String {
        self.instructions.join(" ")
    }

    /// Back to the raw form, one step per line. Cleaning the result gives
    /// this recipe again.
    pub fn to_raw(&self, id: impl Into<String>) -> RawRecipe {
        RawRecipe {
            id: id.into(),
            title: Some(self.title.clone()),
            ingredients: self.ingredients.clone(),
            instructions: Some(self.instructions.join("\n")),
            picture_link: None,
            layout: InstructionLayout::OnePerLine,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Rejection {
    /// Title, ingredients or instructions missing after cleaning.
    Incomplete,
}

impl fmt::Display for Rejection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rejection::Incomplete => f.write_str("incomplete"),
        }
    }
}

/// A record that could not be read; loading continues past it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkippedRecord {
    pub index: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct Loaded {
    pub recipes: Vec<RawRecipe>,
    pub skipped: Vec<SkippedRecord>,
}

pub fn load_recipes(path: &Path, format: CorpusFormat) -> Result<Loaded, CorpusError> {
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_recipes(&text, format).map_err(|message| CorpusError::Parse {
        path: path.to_path_buf(),
        message,
    })
}

/// Parses corpus text already in memory. The error is a whole-file failure;
/// per-record problems end up in [`Loaded::skipped`].
pub fn parse_recipes(text: &str, format: CorpusFormat) -> Result<Loaded, String> {
    match format {
        CorpusFormat::RecipeBoxJson => parse_recipe_box(text),
        CorpusFormat::ThreeColumnCsv => parse_csv(text),
        CorpusFormat::TsvPairs => Ok(parse_tsv_pairs(text)),
    }
}

fn parse_recipe_box(text: &str) -> Result<Loaded, String> {
    let root: Value = serde_json::from_str(text).map_err(|e| e.to_string())?;
    let Value::Object(entries) = root else {
        return Err("top level is not a JSON object".into());
    };
    let mut loaded = Loaded::default();
    for (index, (id, entry)) in entries.into_iter().enumerate() {
        match recipe_box_entry(&id, entry) {
            Ok(r) => loaded.recipes.push(r),
            Err(reason) => loaded.skipped.push(SkippedRecord { index, reason }),
        }
    }
    Ok(loaded)
}

fn optional_string(entry: &serde_json::Map<String, Value>, key: &str) -> Result<Option<String>, String> {
    match entry.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(s.clone())),
        Some(other) => Err(format!("field {key:?} is not a string: {other}")),
    }
}

fn recipe_box_entry(id: &str, entry: Value) -> Result<RawRecipe, String> {
    if id.is_empty() {
        return Err("empty recipe id".into());
    }
    let Value::Object(entry) = entry else {
        return Err(format!("entry {id:?} is not an object"));
    };
    let ingredients = match entry.get("ingredients") {
        None | Some(Value::Null) => Vec::new(),
        Some(Value::Array(items)) => items
            .iter()
            .map(|v| match v {
                Value::String(s) => Ok(s.clone()),
                other => Err(format!("ingredient is not a string: {other}")),
            })
            .collect::<Result<_, _>>()?,
        Some(other) => return Err(format!("ingredients is not a list: {other}")),
    };
    Ok(RawRecipe {
        id: id.to_string(),
        title: optional_string(&entry, "title")?,
        ingredients,
        instructions: optional_string(&entry, "instructions")?,
        picture_link: optional_string(&entry, "picture_link")?,
        layout: InstructionLayout::Plaintext,
    })
}

fn non_empty(cell: &str) -> Option<String> {
    (!cell.trim().is_empty()).then(|| cell.to_string())
}

fn parse_csv(text: &str) -> Result<Loaded, String> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| e.to_string())?.clone();
    let expected = ["title", "ingredients", "instructions"];
    let matches = headers.len() == 3
        && headers
            .iter()
            .zip(expected)
            .all(|(h, e)| h.trim().eq_ignore_ascii_case(e));
    if !matches {
        return Err(format!(
            "expected header Title,Ingredients,Instructions, found {:?}",
            headers.iter().collect::<Vec<_>>()
        ));
    }
    let mut loaded = Loaded::default();
    for (index, row) in reader.records().enumerate() {
        let row = match row {
            Ok(row) => row,
            Err(e) => {
                loaded.skipped.push(SkippedRecord { index, reason: e.to_string() });
                continue;
            }
        };
        if row.len() != 3 {
            loaded.skipped.push(SkippedRecord {
                index,
                reason: format!("expected 3 fields, found {}", row.len()),
            });
            continue;
        }
        let ingredients = if row[1].trim().is_empty() {
            Vec::new()
        } else {
            row[1].split(", ").map(str::to_string).collect()
        };
        loaded.recipes.push(RawRecipe {
            id: format!("row-{index}"),
            title: non_empty(&row[0]),
            ingredients,
            instructions: non_empty(&row[2]),
            picture_link: None,
            layout: InstructionLayout::CommaSeparated,
        });
    }
    Ok(loaded)
}

fn parse_tsv_pairs(text: &str) -> Loaded {
    let mut loaded = Loaded::default();
    for (index, line) in text.lines().enumerate() {
        let Some((_source, target)) = line.split_once('\t') else {
            loaded.skipped.push(SkippedRecord { index, reason: "missing TAB separator".into() });
            continue;
        };
        match serialize::decode_recipe(target) {
            Ok(r) => loaded.recipes.push(RawRecipe {
                id: format!("line-{index}"),
                title: Some(r.title),
                ingredients: r.ingredients,
                instructions: Some(r.instructions.join("\n")),
                picture_link: None,
                layout: InstructionLayout::OnePerLine,
            }),
            Err(e) => loaded.skipped.push(SkippedRecord { index, reason: e.to_string() }),
        }
    }
    loaded
}

/// Removes every advertisement marker and normalizes whitespace: runs of
/// whitespace become one space, ends are trimmed.
fn scrub(s: &str) -> String {
    let mut s = s.to_string();
    while s.contains(ADVERTISEMENT) {
        s = s.replace(ADVERTISEMENT, "");
    }
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn scrub_all<I: IntoIterator<Item = S>, S: AsRef<str>>(items: I) -> Vec<String> {
    items
        .into_iter()
        .map(|s| scrub(s.as_ref()))
        .filter(|s| !s.is_empty())
        .collect()
}

pub fn clean_recipe(r: &RawRecipe) -> Result<CleanRecipe, Rejection> {
    let title = r.title.as_deref().map(scrub).unwrap_or_default();
    let ingredients = scrub_all(&r.ingredients);
    let instructions = r
        .instructions
        .as_deref()
        .map(|text| scrub_all(r.layout.split(text)))
        .unwrap_or_default();
    if title.is_empty() || ingredients.is_empty() || instructions.is_empty() {
        return Err(Rejection::Incomplete);
    }
    Ok(CleanRecipe { title, ingredients, instructions })
}

/// Keeps recipes whose [`CleanRecipe::char_len`] is at most `max_chars`.
pub fn filter_by_length(rs: Vec<CleanRecipe>, max_chars: usize) -> Vec<CleanRecipe> {
    rs.into_iter().filter(|r| r.char_len() <= max_chars).collect()
}

/// Drops recipes with too little instruction text or with a banned substring
/// anywhere in it.
pub fn filter_instructions<S: AsRef<str>>(
    rs: Vec<CleanRecipe>,
    min_chars: usize,
    banned: &[S],
) -> Vec<CleanRecipe> {
    rs.into_iter()
        .filter(|r| {
            let text = r.instruction_text();
            text.chars().count() >= min_chars && !banned.iter().any(|b| text.contains(b.as_ref()))
        })
        .collect()
}

/// Five-number summary of recipe lengths, in characters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LengthStats {
    pub min: f64,
    pub p25: f64,
    pub p50: f64,
    pub p75: f64,
    pub max: f64,
}

impl LengthStats {
    pub fn from_lengths(lengths: &[usize]) -> Result<Self, CorpusError> {
        if lengths.is_empty() {
            return Err(CorpusError::EmptyInput);
        }
        let mut sorted: Vec<f64> = lengths.iter().map(|&l| l as f64).collect();
        sorted.sort_by(f64::total_cmp);
        Ok(Self {
            min: sorted[0],
            p25: percentile(&sorted, 0.25),
            p50: percentile(&sorted, 0.50),
            p75: percentile(&sorted, 0.75),
            max: sorted[sorted.len() - 1],
        })
    }

    /// Plain-text table: one header row, one value row.
    pub fn report(&self) -> String {
        format!(
            "Min\t25th percentile\t50th percentile\t75th percentile\tMax\n{}\t{}\t{}\t{}\t{}\n",
            self.min, self.p25, self.p50, self.p75, self.max
        )
    }
}

/// Linear interpolation between closest ranks at position `(n-1)*q`.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = (sorted.len() - 1) as f64 * q;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Three-column CSV with items and steps joined by ", ", readable by
/// [`load_recipes`] as [`CorpusFormat::ThreeColumnCsv`].
pub fn write_csv(rs: &[CleanRecipe]) -> String {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(["Title", "Ingredients", "Instructions"]).expect("in-memory write");
    for r in rs {
        w.write_record([r.title.as_str(), &r.ingredients.join(", "), &r.instructions.join(", ")])
            .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("CSV of UTF-8 fields")
}

pub fn length_percentiles(rs: &[CleanRecipe]) -> Result<LengthStats, CorpusError> {
    let lengths: Vec<usize> = rs.iter().map(CleanRecipe::char_len).collect();
    LengthStats::from_lengths(&lengths)
}
