//! Recipe generation toolkit.
//!
//! The crate covers the whole path from scraped or downloaded recipe corpora
//! to generated recipes:
//!
//! - [`corpus`] loads recipe files and applies validation and length filters.
//! - [`sitemap`] parses sitemaps and extracts recipes from stored HTML pages.
//! - [`serialize`] turns recipes into single strings with structural tokens and back.
//! - [`augment`] builds ingredient-prefixed training examples and splits them.
//! - [`tokenizer`] is a byte-level BPE with atomic special tokens.
//! - [`model`] is a small decoder-only transformer with hand-written backward pass.
//! - [`optim`] holds AdamW, learning-rate schedules and the train/eval loops.
//! - [`generate`] does beam search with n-gram blocking.
//! - [`config`] and [`pipeline`] bind everything into the command-line stages.

pub mod augment;
pub mod config;
pub mod corpus;
pub mod generate;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod serialize;
pub mod sitemap;
pub mod tokenizer;

mod fsutil;
