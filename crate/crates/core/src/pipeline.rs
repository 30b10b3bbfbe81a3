//! The command-line stages: ingest, prepare, train, eval, generate.
//!
//! Every stage reads its inputs from the configured locations and the run's
//! output directory, and writes its artifacts atomically into that directory.
//! Reports carry no timestamps or absolute paths, so reruns are byte-identical.

use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::augment::{self, AugmentError, CharMode, TrainingExample};
use crate::config::{ConfigError, RunConfig};
use crate::corpus::{self, CleanRecipe, CorpusError, CorpusFormat, LengthStats};
use crate::fsutil::write_atomic;
use crate::generate::{self, GenParams, GenerateError, Generated};
use crate::model::{self, Model, ModelError};
use crate::optim::{self, EvalResult, OptimError, TrainOptions, TrainReport};
use crate::serialize::{EncodeError, SpecialTokens};
use crate::sitemap::{self, PageRejection, SitemapError};
use crate::tokenizer::{self, TokenizerError, Vocab};

pub const DATASET_FILE: &str = "dataset.csv";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const TRAIN_REPORT_FILE: &str = "train_report.tsv";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("no inputs found: {0}")]
    NoInputs(String),
    #[error("missing artifact {path}: {hint}")]
    MissingArtifact { path: PathBuf, hint: &'static str },
    #[error("no recipes left after cleaning and filtering")]
    EmptyCorpus,
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Sitemap { path: PathBuf, source: SitemapError },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Generate(#[from] GenerateError),
}

impl PipelineError {
    /// 1 for configuration problems, 2 for everything found while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 1,
            _ => 2,
        }
    }
}

fn read(path: &Path) -> Result<String, PipelineError> {
    std::fs::read_to_string(path).map_err(|source| PipelineError::Io { path: path.into(), source })
}

fn write(path: &Path, text: &str) -> Result<(), PipelineError> {
    write_atomic(path, text.as_bytes()).map_err(|source| PipelineError::Io { path: path.into(), source })
}

fn ensure_out_dir(cfg: &RunConfig) -> Result<(), PipelineError> {
    std::fs::create_dir_all(&cfg.out_dir).map_err(|source| PipelineError::Io { path: cfg.out_dir.clone(), source })
}

fn require(path: PathBuf, hint: &'static str) -> Result<PathBuf, PipelineError> {
    if path.exists() {
        Ok(path)
    } else {
        Err(PipelineError::MissingArtifact { path, hint })
    }
}

fn json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("report serializes");
    s.push('\n');
    s
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct SiteCounts {
    pub site: String,
    pub sitemap_urls: usize,
    pub sitemap_skipped: usize,
    pub recipe_urls: usize,
    pub missing_pages: usize,
    pub category_page: usize,
    pub broken_page: usize,
    pub incomplete: usize,
    pub accepted: usize,
}

impl SiteCounts {
    fn add(&mut self, o: &SiteCounts) {
        self.sitemap_urls += o.sitemap_urls;
        self.sitemap_skipped += o.sitemap_skipped;
        self.recipe_urls += o.recipe_urls;
        self.missing_pages += o.missing_pages;
        self.category_page += o.category_page;
        self.broken_page += o.broken_page;
        self.incomplete += o.incomplete;
        self.accepted += o.accepted;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct IngestReport {
    pub sites: Vec<SiteCounts>,
    pub total: SiteCounts,
}

impl IngestReport {
    pub fn to_text(&self) -> String {
        let mut out = String::from(
            "site\tsitemap_urls\tsitemap_skipped\trecipe_urls\tmissing_pages\tcategory_page\tbroken_page\tincomplete\taccepted\n",
        );
        for c in self.sites.iter().chain(std::iter::once(&self.total)) {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                c.site, c.sitemap_urls, c.sitemap_skipped, c.recipe_urls, c.missing_pages, c.category_page,
                c.broken_page, c.incomplete, c.accepted
            ));
        }
        out
    }
}

/// Local file for a URL: its last nonempty path segment plus `.html`.
pub fn page_file_name(url: &str) -> String {
    let path = url.split(['?', '#']).next().unwrap_or(url);
    let last = path.rsplit('/').find(|s| !s.is_empty()).unwrap_or("index");
    if last.ends_with(".html") {
        last.to_string()
    } else {
        format!("{last}.html")
    }
}

/// Sitemap -> recipe URLs -> stored pages -> extraction -> cleaning, per
/// site. Writes the three-column dataset and the rejection counts.
pub fn cmd_ingest(cfg: &RunConfig) -> Result<IngestReport, PipelineError> {
    if cfg.sites.is_empty() {
        return Err(PipelineError::NoInputs("no site.<name> sections configured".into()));
    }
    let mut recipes: Vec<CleanRecipe> = Vec::new();
    let mut sites = Vec::new();
    let mut pages_read = 0usize;
    for site in &cfg.sites {
        let mut counts = SiteCounts { site: site.profile.name.clone(), ..Default::default() };
        let map = sitemap::parse_sitemap(&read(&site.sitemap)?)
            .map_err(|source| PipelineError::Sitemap { path: site.sitemap.clone(), source })?;
        counts.sitemap_urls = map.entries.len() + map.skipped.len();
        counts.sitemap_skipped = map.skipped.len();
        let locs: Vec<&str> = map.entries.iter().map(|e| e.loc.as_str()).collect();
        let urls = sitemap::filter_recipe_urls(&locs, &site.profile.recipe_url_marker);
        counts.recipe_urls = urls.len();
        for url in &urls {
            let name = page_file_name(url);
            let path = site.pages.join(&name);
            let html = match std::fs::read(&path) {
                Ok(bytes) => String::from_utf8_lossy(&bytes).into_owned(),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                    counts.missing_pages += 1;
                    continue;
                }
                Err(source) => return Err(PipelineError::Io { path, source }),
            };
            pages_read += 1;
            match sitemap::extract_recipe(&name, &html, &site.profile) {
                Err(PageRejection::CategoryPage) => counts.category_page += 1,
                Err(PageRejection::BrokenPage) => counts.broken_page += 1,
                Ok(raw) => match corpus::clean_recipe(&raw) {
                    Ok(r) => {
                        counts.accepted += 1;
                        recipes.push(r);
                    }
                    Err(_) => counts.incomplete += 1,
                },
            }
        }
        sites.push(counts);
    }
    if pages_read == 0 {
        return Err(PipelineError::NoInputs("no stored recipe pages matched the sitemaps".into()));
    }
    let mut total = SiteCounts { site: "total".into(), ..Default::default() };
    for s in &sites {
        total.add(s);
    }
    let report = IngestReport { sites, total };
    ensure_out_dir(cfg)?;
    write(&cfg.out_dir.join(DATASET_FILE), &corpus::write_csv(&recipes))?;
    write(&cfg.out_dir.join("ingest_report.txt"), &report.to_text())?;
    write(&cfg.out_dir.join("ingest_report.json"), &json(&report))?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrepareReport {
    pub loaded: usize,
    pub load_skipped: usize,
    pub incomplete: usize,
    pub short_or_banned_instructions: usize,
    pub too_long: usize,
    pub recipes: usize,
    pub examples: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub lengths_before_length_filter: LengthStats,
    pub lengths_kept: LengthStats,
    pub max_first_char_diff: f64,
    pub max_char_diff: f64,
}

impl PrepareReport {
    pub fn to_text(&self) -> String {
        format!(
            "loaded\t{}\nload_skipped\t{}\nincomplete\t{}\nshort_or_banned_instructions\t{}\ntoo_long\t{}\n\
             recipes\t{}\nexamples\t{}\ntrain\t{}\nval\t{}\ntest\t{}\nmax_first_char_diff\t{:.6}\nmax_char_diff\t{:.6}\n\n\
             Lengths before the length filter\n{}\nLengths kept\n{}",
            self.loaded, self.load_skipped, self.incomplete, self.short_or_banned_instructions, self.too_long,
            self.recipes, self.examples, self.train, self.val, self.test, self.max_first_char_diff,
            self.max_char_diff, self.lengths_before_length_filter.report(), self.lengths_kept.report()
        )
    }
}

fn max_diff(train: &[TrainingExample], test: &[TrainingExample], mode: CharMode) -> Result<(f64, String), AugmentError> {
    let a: Vec<&str> = train.iter().map(|e| e.target.as_str()).collect();
    let b: Vec<&str> = test.iter().map(|e| e.target.as_str()).collect();
    let da = augment::char_distribution(&a, mode)?;
    let db = augment::char_distribution(&b, mode)?;
    let (_, max) = augment::distribution_diff(&da, &db)?;
    Ok((max, augment::stratification_table(&da, &db)?))
}

/// Load -> clean -> instruction filter -> length filter -> augment -> split.
pub fn cmd_prepare(cfg: &RunConfig) -> Result<PrepareReport, PipelineError> {
    let (path, format) = match &cfg.corpus {
        Some(c) => (c.path.clone(), c.format),
        None => (
            require(cfg.out_dir.join(DATASET_FILE), "set corpus.path or run ingest first")?,
            CorpusFormat::ThreeColumnCsv,
        ),
    };
    let loaded = corpus::load_recipes(&path, format)?;
    let n_loaded = loaded.recipes.len();
    let mut clean = Vec::new();
    for raw in &loaded.recipes {
        if let Ok(r) = corpus::clean_recipe(raw) {
            clean.push(r);
        }
    }
    let incomplete = n_loaded - clean.len();
    let n_clean = clean.len();
    let filtered = corpus::filter_instructions(clean, cfg.clean.min_instruction_chars, &cfg.clean.banned);
    let short = n_clean - filtered.len();
    if filtered.is_empty() {
        return Err(PipelineError::EmptyCorpus);
    }
    let before = corpus::length_percentiles(&filtered)?;
    let n_filtered = filtered.len();
    let kept = corpus::filter_by_length(filtered, cfg.clean.max_chars);
    let too_long = n_filtered - kept.len();
    if kept.is_empty() {
        return Err(PipelineError::EmptyCorpus);
    }
    let lengths_kept = corpus::length_percentiles(&kept)?;

    let mut examples = Vec::new();
    for (i, r) in kept.iter().enumerate() {
        let acfg = augment::AugmentConfig { seed: cfg.augment.seed.wrapping_add(i as u64), ..cfg.augment };
        examples.extend(augment::build_examples(r, &acfg)?);
    }
    let n_examples = examples.len();
    let split = augment::split_dataset(examples, &cfg.split)?;
    let (max_first, first_table) = max_diff(&split.train, &split.test, CharMode::First)?;
    let (max_all, all_table) = max_diff(&split.train, &split.test, CharMode::All)?;

    let report = PrepareReport {
        loaded: n_loaded,
        load_skipped: loaded.skipped.len(),
        incomplete,
        short_or_banned_instructions: short,
        too_long,
        recipes: kept.len(),
        examples: n_examples,
        train: split.train.len(),
        val: split.val.len(),
        test: split.test.len(),
        lengths_before_length_filter: before,
        lengths_kept,
        max_first_char_diff: max_first,
        max_char_diff: max_all,
    };
    ensure_out_dir(cfg)?;
    write(&cfg.out_dir.join("train.tsv"), &augment::write_tsv(&split.train))?;
    write(&cfg.out_dir.join("val.tsv"), &augment::write_tsv(&split.val))?;
    write(&cfg.out_dir.join("test.tsv"), &augment::write_tsv(&split.test))?;
    write(
        &cfg.out_dir.join("stratification.txt"),
        &format!("First character (train vs test)\n{first_table}\nAll characters (train vs test)\n{all_table}"),
    )?;
    write(&cfg.out_dir.join("prepare_report.txt"), &report.to_text())?;
    write(&cfg.out_dir.join("prepare_report.json"), &json(&report))?;
    Ok(report)
}

fn load_split(cfg: &RunConfig, file: &'static str) -> Result<Vec<TrainingExample>, PipelineError> {
    let path = require(cfg.out_dir.join(file), "run prepare first")?;
    Ok(augment::parse_tsv(&read(&path)?)?)
}

fn targets(examples: &[TrainingExample]) -> Vec<&str> {
    examples.iter().map(|e| e.target.as_str()).collect()
}

fn example_cap(cfg: &RunConfig, model_cfg: &model::ModelConfig) -> usize {
    cfg.train.max_length.min(model_cfg.n_positions)
}

/// Trains the tokenizer on the training targets, then a freshly initialized
/// model whose embedding is resized to take the special tokens.
pub fn build_vocab(cfg: &RunConfig, train: &[TrainingExample]) -> Result<Vocab, PipelineError> {
    let specials = SpecialTokens::default();
    let all = specials.all();
    let base_target = cfg.tokenizer_vocab_size.saturating_sub(all.len()).max(257);
    let base = tokenizer::train_bpe(&targets(train), base_target, &all)?;
    Ok(base.add_special_tokens(&all)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub vocab_size: usize,
    pub parameters: usize,
    pub train_examples: usize,
    pub val_examples: usize,
    pub total_steps: usize,
    pub final_train_loss: f64,
    pub final_train_perplexity: f64,
    pub final_val_loss: Option<f64>,
    pub final_val_perplexity: Option<f64>,
}

pub fn cmd_train(cfg: &RunConfig, progress: &mut dyn FnMut(usize, f64)) -> Result<(TrainReport, TrainSummary), PipelineError> {
    let train = load_split(cfg, "train.tsv")?;
    let val = load_split(cfg, "val.tsv")?;
    if train.is_empty() {
        return Err(PipelineError::Optim(OptimError::EmptySet("training")));
    }
    let vocab_path = cfg.out_dir.join(VOCAB_FILE);
    let (vocab, fresh_vocab) = if vocab_path.exists() {
        (Vocab::load(&vocab_path)?, false)
    } else {
        (build_vocab(cfg, &train)?, true)
    };
    let specials = SpecialTokens::default();
    let pad_id = vocab.special_id(&specials.pad).ok_or_else(|| TokenizerError::MissingSpecial(specials.pad.clone()))?;
    let base_size = vocab.size() - vocab.specials().len();
    let base_cfg = model::ModelConfig { vocab_size: base_size, ..cfg.model.clone() };
    let mut m = Model::<f32>::new(base_cfg, cfg.train.seed)?.resize_token_embeddings(vocab.size(), cfg.train.seed.wrapping_add(1))?;

    let cap = example_cap(cfg, &m.config);
    let train_ids = optim::encode_examples(&vocab, &targets(&train), cap)?;
    let val_ids = optim::encode_examples(&vocab, &targets(&val), cap)?;
    let opts = TrainOptions { seed: cfg.train.seed, pad_id, log_every: cfg.train.log_every };
    let report = optim::train(&mut m, &train_ids, &val_ids, &cfg.optim, &opts, progress)?;
    let last = report.epochs.last().expect("at least one epoch");
    let summary = TrainSummary {
        vocab_size: vocab.size(),
        parameters: m.params.count(),
        train_examples: train.len(),
        val_examples: val.len(),
        total_steps: report.total_steps,
        final_train_loss: last.train_loss,
        final_train_perplexity: last.train_perplexity,
        final_val_loss: last.val_loss,
        final_val_perplexity: last.val_perplexity,
    };
    if fresh_vocab {
        vocab.save(&vocab_path)?;
    }
    model::save_checkpoint(&m, &cfg.out_dir.join(CHECKPOINT_FILE))?;
    write(&cfg.out_dir.join(TRAIN_REPORT_FILE), &report.to_text())?;
    write(&cfg.out_dir.join("train_summary.json"), &json(&summary))?;
    Ok((report, summary))
}

fn load_artifacts(cfg: &RunConfig) -> Result<(Model<f32>, Vocab), PipelineError> {
    let ckpt = require(cfg.out_dir.join(CHECKPOINT_FILE), "run train first")?;
    let vocab = require(cfg.out_dir.join(VOCAB_FILE), "run train first")?;
    let m = model::load_checkpoint(&ckpt)?;
    let v = Vocab::load(&vocab)?;
    if v.size() != m.config.vocab_size {
        return Err(PipelineError::Model(ModelError::Shape(format!(
            "vocab has {} tokens but the checkpoint expects {}",
            v.size(),
            m.config.vocab_size
        ))));
    }
    Ok((m, v))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub split: String,
    pub examples: usize,
    pub tokens: usize,
    pub loss: f64,
    pub perplexity: f64,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        format!(
            "split\t{}\nexamples\t{}\ntokens\t{}\nloss\t{}\nperplexity\t{}\n",
            self.split, self.examples, self.tokens, self.loss, self.perplexity
        )
    }

    /// The two-line human summary.
    pub fn summary(&self) -> String {
        format!("Test Loss: {:.4}\nTest perplexity: {:.2}\n", self.loss, self.perplexity)
    }
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<EvalReport, PipelineError> {
    let (m, vocab) = load_artifacts(cfg)?;
    let data = load_split(cfg, cfg.eval_split.file_name())?;
    let pad = SpecialTokens::default().pad;
    let pad_id = vocab.special_id(&pad).ok_or(TokenizerError::MissingSpecial(pad))?;
    let ids = optim::encode_examples(&vocab, &targets(&data), example_cap(cfg, &m.config))?;
    let EvalResult { avg_loss, perplexity, tokens, .. } = optim::evaluate(&m, &ids, cfg.optim.batch_size, pad_id)?;
    let split = cfg.eval_split.file_name().trim_end_matches(".tsv").to_string();
    let report = EvalReport { split, examples: data.len(), tokens, loss: avg_loss, perplexity };
    write(&cfg.out_dir.join("eval_report.txt"), &report.to_text())?;
    write(&cfg.out_dir.join("eval_report.json"), &json(&report))?;
    Ok(report)
}

pub fn gen_params(cfg: &RunConfig, vocab: &Vocab) -> Result<GenParams, PipelineError> {
    let eos = SpecialTokens::default().eos;
    let eos_id = vocab.special_id(&eos).ok_or(TokenizerError::MissingSpecial(eos))?;
    Ok(GenParams {
        num_beams: cfg.generate.num_beams,
        no_repeat_ngram_size: cfg.generate.no_repeat_ngram_size,
        max_length: cfg.generate.max_length,
        num_return_sequences: cfg.generate.num_return_sequences,
        eos_id,
    })
}

pub fn cmd_generate<S: AsRef<str>>(cfg: &RunConfig, keywords: &[S]) -> Result<Generated, PipelineError> {
    if keywords.is_empty() {
        return Err(PipelineError::Generate(GenerateError::EmptyKeywords));
    }
    let (m, vocab) = load_artifacts(cfg)?;
    let gp = gen_params(cfg, &vocab)?;
    Ok(generate::generate_recipe(&m, &vocab, keywords, &gp)?)
}
