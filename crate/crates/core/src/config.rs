//! Run configuration: a line-oriented `section.key = value` file.
//!
//! ```text
//! # comments start with '#'
//! run.seed = 42
//! run.out_dir = out
//! corpus.path = recipes.csv
//! corpus.format = three-column-csv
//! site.fdl.sitemap = fdl/sitemap.xml
//! site.fdl.pages = fdl/pages
//! site.fdl.title = //h1[@class='title']
//! model.n_embd = 128
//! ```
//!
//! Relative paths resolve against the directory holding the config file.
//! Site keys are `site.<name>.<key>`; every other key has exactly one dot.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::augment::{AugmentConfig, SplitSpec};
use crate::corpus::{CorpusFormat, BOOK_ADVERT, DEFAULT_MAX_CHARS, DEFAULT_MIN_INSTRUCTION_CHARS};
use crate::model::{Activation, ModelConfig};
use crate::optim::{OptimHyper, ScheduleKind};
use crate::sitemap::{ElementPath, SiteProfile, DEFAULT_CATEGORY_LABELS, DEFAULT_RECIPE_MARKER};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {reason}")]
    Syntax { line: usize, reason: String },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: duplicate key {key:?}")]
    Duplicate { line: usize, key: String },
    #[error("missing required key {0:?}")]
    Missing(String),
    #[error("{key}: {reason}")]
    Invalid { key: String, reason: String },
    #[error("{key}: path {path} does not exist")]
    MissingPath { key: String, path: PathBuf },
    #[error("reading config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

const RUN_KEYS: &[&str] = &["seed", "out_dir"];
const CORPUS_KEYS: &[&str] = &["path", "format"];
const CLEAN_KEYS: &[&str] = &["max_chars", "min_instruction_chars", "banned"];
const AUGMENT_KEYS: &[&str] = &["max_subset_size", "max_rows_per_recipe", "seed"];
const SPLIT_KEYS: &[&str] = &["train_test", "train_val", "seed"];
const TOKENIZER_KEYS: &[&str] = &["vocab_size"];
const MODEL_KEYS: &[&str] = &[
    "n_positions", "n_embd", "n_layer", "n_head", "resid_dropout", "embd_dropout", "attn_dropout", "activation",
];
const OPTIM_KEYS: &[&str] = &[
    "learning_rate", "epsilon", "beta1", "beta2", "weight_decay", "warmup_steps", "epochs", "batch_size",
    "schedule", "decay_k", "step_factor", "step_period", "grad_clip",
];
const TRAIN_KEYS: &[&str] = &["max_length", "log_every", "seed"];
const GENERATE_KEYS: &[&str] = &["num_beams", "no_repeat_ngram_size", "max_length", "num_return_sequences"];
const EVAL_KEYS: &[&str] = &["split"];
const SITE_KEYS: &[&str] = &[
    "sitemap", "pages", "marker", "title", "ingredients", "instructions", "category", "category_labels",
];

fn known(section: &str, key: &str) -> bool {
    let keys = match section {
        "run" => RUN_KEYS,
        "corpus" => CORPUS_KEYS,
        "clean" => CLEAN_KEYS,
        "augment" => AUGMENT_KEYS,
        "split" => SPLIT_KEYS,
        "tokenizer" => TOKENIZER_KEYS,
        "model" => MODEL_KEYS,
        "optim" => OPTIM_KEYS,
        "train" => TRAIN_KEYS,
        "generate" => GENERATE_KEYS,
        "eval" => EVAL_KEYS,
        s if s.starts_with("site.") && s.len() > 5 && !s[5..].contains('.') => SITE_KEYS,
        _ => return false,
    };
    keys.contains(&key)
}

/// Raw `key -> (value, line)` pairs after syntax and key-name checks.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawConfig {
    entries: BTreeMap<String, (String, usize)>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (key, value) = trimmed.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: line_no,
                reason: "expected `section.key = value`".into(),
            })?;
            let (key, value) = (key.trim(), value.trim());
            let (section, name) = key.rsplit_once('.').ok_or_else(|| ConfigError::Syntax {
                line: line_no,
                reason: format!("key {key:?} has no section"),
            })?;
            if !known(section, name) {
                return Err(ConfigError::UnknownKey { line: line_no, key: key.into() });
            }
            if entries.insert(key.to_string(), (value.to_string(), line_no)).is_some() {
                return Err(ConfigError::Duplicate { line: line_no, key: key.into() });
            }
        }
        Ok(RawConfig { entries })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(v, _)| v.as_str())
    }

    pub fn set(&mut self, key: &str, value: &str) {
        self.entries.insert(key.to_string(), (value.to_string(), 0));
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)
            .map(|v| v.parse::<T>().map_err(|e| ConfigError::Invalid { key: key.into(), reason: format!("{v:?}: {e}") }))
            .transpose()
    }

    fn or<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.parsed(key)?.unwrap_or(default))
    }

    /// `none` means unbounded.
    fn optional_bound(&self, key: &str, default: Option<usize>) -> Result<Option<usize>, ConfigError> {
        match self.get(key) {
            None => Ok(default),
            Some("none") => Ok(None),
            Some(_) => self.parsed(key),
        }
    }

    fn site_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .entries
            .keys()
            .filter_map(|k| k.strip_prefix("site."))
            .filter_map(|k| k.split_once('.').map(|(n, _)| n.to_string()))
            .collect();
        names.sort();
        names.dedup();
        names
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusInput {
    pub path: PathBuf,
    pub format: CorpusFormat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SiteInput {
    pub profile: SiteProfile,
    pub sitemap: PathBuf,
    pub pages: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CleanConfig {
    pub max_chars: usize,
    pub min_instruction_chars: usize,
    pub banned: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    /// Token cap per example (bos and eos included), further capped by n_positions.
    pub max_length: usize,
    pub log_every: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateSettings {
    pub num_beams: usize,
    pub no_repeat_ngram_size: usize,
    pub max_length: usize,
    pub num_return_sequences: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSplit {
    Train,
    Val,
    Test,
}

impl EvalSplit {
    pub fn file_name(self) -> &'static str {
        match self {
            EvalSplit::Train => "train.tsv",
            EvalSplit::Val => "val.tsv",
            EvalSplit::Test => "test.tsv",
        }
    }
}

impl std::str::FromStr for EvalSplit {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(EvalSplit::Train),
            "val" => Ok(EvalSplit::Val),
            "test" => Ok(EvalSplit::Test),
            other => Err(format!("unknown split {other:?} (train, val or test)")),
        }
    }
}

/// Command-line overrides applied before validation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub corpus: Option<CorpusInput>,
    pub sites: Vec<SiteInput>,
    pub clean: CleanConfig,
    pub augment: AugmentConfig,
    pub split: SplitSpec,
    pub tokenizer_vocab_size: usize,
    /// `vocab_size` is a placeholder until the tokenizer is known.
    pub model: ModelConfig,
    pub optim: OptimHyper,
    pub train: TrainSettings,
    pub generate: GenerateSettings,
    pub eval_split: EvalSplit,
}

fn resolve(base: &Path, value: &str) -> PathBuf {
    let p = Path::new(value);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn existing(key: &str, path: PathBuf) -> Result<PathBuf, ConfigError> {
    if path.exists() {
        Ok(path)
    } else {
        Err(ConfigError::MissingPath { key: key.into(), path })
    }
}

fn list(value: &str) -> Vec<String> {
    value.split('|').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
}

impl RunConfig {
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_text(&text, base, overrides)
    }

    /// Parses and fully validates, including existence of input paths.
    pub fn from_text(text: &str, base: &Path, overrides: &Overrides) -> Result<Self, ConfigError> {
        let mut raw = RawConfig::parse(text)?;
        if let Some(seed) = overrides.seed {
            raw.set("run.seed", &seed.to_string());
        }
        let seed: u64 = raw.parsed("run.seed")?.ok_or_else(|| ConfigError::Missing("run.seed".into()))?;
        let out_dir = match &overrides.out_dir {
            Some(p) => p.clone(),
            None => resolve(base, raw.get("run.out_dir").unwrap_or("out")),
        };

        let corpus = match raw.get("corpus.path") {
            Some(p) => Some(CorpusInput {
                path: existing("corpus.path", resolve(base, p))?,
                format: raw.or("corpus.format", CorpusFormat::ThreeColumnCsv)?,
            }),
            None if raw.get("corpus.format").is_some() => return Err(ConfigError::Missing("corpus.path".into())),
            None => None,
        };

        let mut sites = Vec::new();
        for name in raw.site_names() {
            let key = |k: &str| format!("site.{name}.{k}");
            let required = |k: &str| raw.get(&key(k)).ok_or_else(|| ConfigError::Missing(key(k)));
            let path_of = |k: &str| -> Result<ElementPath, ConfigError> {
                ElementPath::parse(required(k)?).map_err(|e| ConfigError::Invalid { key: key(k), reason: e.to_string() })
            };
            let marker = raw.get(&key("marker")).unwrap_or(DEFAULT_RECIPE_MARKER).to_string();
            if marker.is_empty() {
                return Err(ConfigError::Invalid { key: key("marker"), reason: "must be nonempty".into() });
            }
            let profile = SiteProfile {
                name: name.clone(),
                recipe_url_marker: marker,
                title_selector: path_of("title")?,
                ingredients_selector: path_of("ingredients")?,
                instructions_selector: path_of("instructions")?,
                category_selector: path_of("category")?,
                category_labels: raw
                    .get(&key("category_labels"))
                    .map(list)
                    .unwrap_or_else(|| DEFAULT_CATEGORY_LABELS.iter().map(|s| s.to_string()).collect()),
            };
            sites.push(SiteInput {
                profile,
                sitemap: existing(&key("sitemap"), resolve(base, required("sitemap")?))?,
                pages: existing(&key("pages"), resolve(base, required("pages")?))?,
            });
        }

        let clean = CleanConfig {
            max_chars: raw.or("clean.max_chars", DEFAULT_MAX_CHARS)?,
            min_instruction_chars: raw.or("clean.min_instruction_chars", DEFAULT_MIN_INSTRUCTION_CHARS)?,
            banned: raw.get("clean.banned").map(list).unwrap_or_else(|| vec![BOOK_ADVERT.to_string()]),
        };
        if clean.max_chars == 0 {
            return Err(ConfigError::Invalid { key: "clean.max_chars".into(), reason: "must be positive".into() });
        }

        let defaults = AugmentConfig::default();
        let augment = AugmentConfig {
            max_subset_size: raw.optional_bound("augment.max_subset_size", defaults.max_subset_size)?,
            max_rows_per_recipe: raw.optional_bound("augment.max_rows_per_recipe", defaults.max_rows_per_recipe)?,
            seed: raw.or("augment.seed", seed)?,
        };
        if augment.max_subset_size == Some(0) || augment.max_rows_per_recipe == Some(0) {
            return Err(ConfigError::Invalid { key: "augment".into(), reason: "bounds must be positive".into() });
        }

        let split = SplitSpec {
            train_test: raw.or("split.train_test", 0.8)?,
            train_val: raw.or("split.train_val", 0.9)?,
            seed: raw.or("split.seed", seed)?,
        };
        split.validate().map_err(|e| ConfigError::Invalid { key: "split".into(), reason: e.to_string() })?;

        let tokenizer_vocab_size = raw.or("tokenizer.vocab_size", 2048usize)?;
        if tokenizer_vocab_size <= 256 {
            return Err(ConfigError::Invalid { key: "tokenizer.vocab_size".into(), reason: "must exceed 256".into() });
        }

        let desk = ModelConfig::desk();
        let model = ModelConfig {
            vocab_size: tokenizer_vocab_size,
            n_positions: raw.or("model.n_positions", desk.n_positions)?,
            n_embd: raw.or("model.n_embd", desk.n_embd)?,
            n_layer: raw.or("model.n_layer", desk.n_layer)?,
            n_head: raw.or("model.n_head", desk.n_head)?,
            resid_dropout: raw.or("model.resid_dropout", desk.resid_dropout)?,
            embd_dropout: raw.or("model.embd_dropout", desk.embd_dropout)?,
            attn_dropout: raw.or("model.attn_dropout", desk.attn_dropout)?,
            activation: raw.or("model.activation", Activation::Gelu)?,
        };
        model.validate().map_err(|e| ConfigError::Invalid { key: "model".into(), reason: e.to_string() })?;

        let d = OptimHyper::default();
        let kind: ScheduleKind = raw.or("optim.schedule", ScheduleKind::WarmupLinearDecay)?;
        let optim = OptimHyper {
            learning_rate: raw.or("optim.learning_rate", d.learning_rate)?,
            epsilon: raw.or("optim.epsilon", d.epsilon)?,
            beta1: raw.or("optim.beta1", d.beta1)?,
            beta2: raw.or("optim.beta2", d.beta2)?,
            weight_decay: raw.or("optim.weight_decay", d.weight_decay)?,
            warmup_steps: raw.or("optim.warmup_steps", d.warmup_steps)?,
            epochs: raw.or("optim.epochs", d.epochs)?,
            batch_size: raw.or("optim.batch_size", d.batch_size)?,
            schedule: kind.with(
                raw.or("optim.decay_k", 1.0)?,
                raw.or("optim.step_factor", 0.5)?,
                raw.or("optim.step_period", 1000usize)?,
            ),
            grad_clip: match raw.get("optim.grad_clip") {
                None | Some("none") => None,
                Some(_) => raw.parsed("optim.grad_clip")?,
            },
        };
        optim.validate().map_err(|e| ConfigError::Invalid { key: "optim".into(), reason: e.to_string() })?;

        let train = TrainSettings {
            max_length: raw.or("train.max_length", 1000usize)?,
            log_every: raw.or("train.log_every", 50usize)?,
            seed: raw.or("train.seed", seed)?,
        };
        if train.max_length < 2 {
            return Err(ConfigError::Invalid { key: "train.max_length".into(), reason: "must be at least 2".into() });
        }

        let generate = GenerateSettings {
            num_beams: raw.or("generate.num_beams", 5usize)?,
            no_repeat_ngram_size: raw.or("generate.no_repeat_ngram_size", 2usize)?,
            max_length: raw.or("generate.max_length", 1000usize)?,
            num_return_sequences: raw.or("generate.num_return_sequences", 1usize)?,
        };
        crate::generate::GenParams {
            num_beams: generate.num_beams,
            no_repeat_ngram_size: generate.no_repeat_ngram_size,
            max_length: generate.max_length,
            num_return_sequences: generate.num_return_sequences,
            eos_id: 0,
        }
        .validate()
        .map_err(|e| ConfigError::Invalid { key: "generate".into(), reason: e.to_string() })?;

        Ok(RunConfig {
            seed,
            out_dir,
            corpus,
            sites,
            clean,
            augment,
            split,
            tokenizer_vocab_size,
            model,
            optim,
            train,
            generate,
            eval_split: raw.or("eval.split", EvalSplit::Test)?,
        })
    }
}
