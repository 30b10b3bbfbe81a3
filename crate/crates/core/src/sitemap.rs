//! Sitemap parsing and recipe extraction from stored HTML pages.

use std::fmt;

use quick_xml::events::Event;
use quick_xml::Reader;
use scraper::{ElementRef, Html, Selector};
use thiserror::Error;

use crate::corpus::{InstructionLayout, RawRecipe};

/// Substring that marks a recipe URL on the sites we ingest.
pub const DEFAULT_RECIPE_MARKER: &str = ".com/recipe/";

/// Category-link texts that identify listing pages rather than recipes.
pub const DEFAULT_CATEGORY_LABELS: [&str; 4] = ["Recipe Category", "Cuisine", "Cooking Method", "Special Diets"];

#[derive(Debug, Error, PartialEq)]
pub enum SitemapError {
    #[error("malformed XML at byte {position}: {reason}")]
    Xml { position: u64, reason: String },
    #[error("root element is <{0}>, expected <urlset>")]
    NotUrlset(String),
    #[error("document has no root element")]
    NoRoot,
    #[error("invalid element path {path:?}: {reason}")]
    Path { path: String, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SitemapEntry {
    pub loc: String,
    pub lastmod: Option<String>,
    pub changefreq: Option<String>,
    pub priority: Option<f64>,
}

/// A `<url>` element that could not become an entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkippedUrl {
    /// 0-based position among the `<url>` elements.
    pub index: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Sitemap {
    pub entries: Vec<SitemapEntry>,
    pub skipped: Vec<SkippedUrl>,
}

#[derive(Default)]
struct UrlFields {
    loc: Option<String>,
    lastmod: Option<String>,
    changefreq: Option<String>,
    priority: Option<String>,
}

impl UrlFields {
    fn finish(self) -> Result<SitemapEntry, String> {
        let loc = self.loc.filter(|l| !l.is_empty()).ok_or("missing <loc>")?;
        let priority = match self.priority {
            None => None,
            Some(p) => match p.parse::<f64>() {
                Ok(v) if (0.0..=1.0).contains(&v) => Some(v),
                _ => return Err(format!("priority {p:?} is not a number in [0, 1]")),
            },
        };
        Ok(SitemapEntry { loc, lastmod: self.lastmod, changefreq: self.changefreq, priority })
    }
}

fn local_name(raw: &[u8]) -> String {
    let name = String::from_utf8_lossy(raw);
    match name.rsplit_once(':') {
        Some((_, local)) => local.to_string(),
        None => name.into_owned(),
    }
}

/// One entry per `<url>` child of a `<urlset>` root. Entries without `<loc>`
/// or with an out-of-range priority are reported in `skipped`.
pub fn parse_sitemap(xml_text: &str) -> Result<Sitemap, SitemapError> {
    let mut reader = Reader::from_str(xml_text);
    let mut out = Sitemap::default();
    let mut stack: Vec<String> = Vec::new();
    let mut current: Option<UrlFields> = None;
    let mut url_index = 0usize;
    let mut text = String::new();
    let mut saw_root = false;
    loop {
        let event = reader.read_event().map_err(|e| SitemapError::Xml {
            position: reader.buffer_position(),
            reason: e.to_string(),
        })?;
        match event {
            Event::Start(e) => {
                let name = local_name(e.name().as_ref());
                if stack.is_empty() {
                    if name != "urlset" {
                        return Err(SitemapError::NotUrlset(name));
                    }
                    saw_root = true;
                }
                if stack.len() == 1 && name == "url" {
                    current = Some(UrlFields::default());
                }
                stack.push(name);
                text.clear();
            }
            Event::Empty(e) => {
                let name = local_name(e.name().as_ref());
                if stack.is_empty() {
                    if name != "urlset" {
                        return Err(SitemapError::NotUrlset(name));
                    }
                    saw_root = true;
                } else if stack.len() == 1 && name == "url" {
                    out.skipped.push(SkippedUrl { index: url_index, reason: "missing <loc>".into() });
                    url_index += 1;
                }
            }
            Event::Text(t) => {
                let s = t.unescape().map_err(|e| SitemapError::Xml {
                    position: reader.buffer_position(),
                    reason: e.to_string(),
                })?;
                text.push_str(&s);
            }
            Event::CData(t) => text.push_str(&String::from_utf8_lossy(&t)),
            Event::End(_) => {
                let name = stack.pop().unwrap_or_default();
                if stack.len() == 2 && stack[1] == "url" {
                    if let Some(fields) = current.as_mut() {
                        let value = Some(text.trim().to_string());
                        match name.as_str() {
                            "loc" => fields.loc = value,
                            "lastmod" => fields.lastmod = value,
                            "changefreq" => fields.changefreq = value,
                            "priority" => fields.priority = value,
                            _ => {}
                        }
                    }
                } else if stack.len() == 1 && name == "url" {
                    match current.take().map(UrlFields::finish) {
                        Some(Ok(entry)) => out.entries.push(entry),
                        Some(Err(reason)) => out.skipped.push(SkippedUrl { index: url_index, reason }),
                        None => {}
                    }
                    url_index += 1;
                }
                text.clear();
            }
            Event::Eof => break,
            _ => {}
        }
    }
    if !saw_root {
        return Err(SitemapError::NoRoot);
    }
    Ok(out)
}

/// URLs containing `marker`, in input order.
pub fn filter_recipe_urls<S: AsRef<str>>(urls: &[S], marker: &str) -> Vec<String> {
    urls.iter().map(|u| u.as_ref()).filter(|u| u.contains(marker)).map(str::to_string).collect()
}

/// A compiled element path: `//tag`, `//tag[@attr='value']`, chained with
/// `//` (descendant) or `/` (child). `*` matches any tag.
#[derive(Debug, Clone)]
pub struct ElementPath {
    source: String,
    selector: Selector,
}

impl PartialEq for ElementPath {
    fn eq(&self, other: &Self) -> bool {
        self.source == other.source
    }
}

impl fmt::Display for ElementPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.source)
    }
}

fn is_name_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '-' || c == '_'
}

impl ElementPath {
    pub fn parse(path: &str) -> Result<Self, SitemapError> {
        let err = |reason: &str| SitemapError::Path { path: path.to_string(), reason: reason.to_string() };
        let mut css = String::new();
        let mut rest = path.trim();
        if !rest.starts_with("//") {
            return Err(err("must start with //"));
        }
        while !rest.is_empty() {
            let combinator = if let Some(r) = rest.strip_prefix("//") {
                rest = r;
                " "
            } else if let Some(r) = rest.strip_prefix('/') {
                rest = r;
                " > "
            } else {
                return Err(err("expected / or //"));
            };
            if !css.is_empty() {
                css.push_str(combinator);
            }
            let tag_len = if rest.starts_with('*') { 1 } else { rest.find(|c: char| !is_name_char(c)).unwrap_or(rest.len()) };
            if tag_len == 0 {
                return Err(err("missing tag name"));
            }
            css.push_str(&rest[..tag_len]);
            rest = &rest[tag_len..];
            while let Some(r) = rest.strip_prefix("[@") {
                let name_len = r.find(|c: char| !is_name_char(c)).unwrap_or(r.len());
                if name_len == 0 {
                    return Err(err("missing attribute name"));
                }
                let attr = &r[..name_len];
                let r = r[name_len..].strip_prefix('=').ok_or_else(|| err("expected = after attribute"))?;
                let quote = r.chars().next().filter(|&q| q == '\'' || q == '"').ok_or_else(|| err("expected quoted value"))?;
                let r = &r[1..];
                let close = r.find(quote).ok_or_else(|| err("unterminated value"))?;
                let value = &r[..close];
                let r = r[close + 1..].strip_prefix(']').ok_or_else(|| err("expected ]"))?;
                css.push_str(&format!("[{attr}=\"{}\"]", value.replace('\\', "\\\\").replace('"', "\\\"")));
                rest = r;
            }
        }
        let selector = Selector::parse(&css).map_err(|e| err(&format!("{e:?}")))?;
        Ok(ElementPath { source: path.to_string(), selector })
    }

    pub fn as_str(&self) -> &str {
        &self.source
    }

    fn select<'a>(&'a self, doc: &'a Html) -> impl Iterator<Item = ElementRef<'a>> + 'a {
        doc.select(&self.selector)
    }
}

/// Where a site keeps each recipe field, and which category labels mark a
/// listing page.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteProfile {
    pub name: String,
    pub recipe_url_marker: String,
    pub title_selector: ElementPath,
    pub ingredients_selector: ElementPath,
    pub instructions_selector: ElementPath,
    pub category_selector: ElementPath,
    pub category_labels: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PageRejection {
    CategoryPage,
    BrokenPage,
}

impl fmt::Display for PageRejection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PageRejection::CategoryPage => "category_page",
            PageRejection::BrokenPage => "broken_page",
        })
    }
}

fn element_text(e: ElementRef<'_>) -> String {
    e.text().collect::<String>().split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Extracts one recipe. A category link carrying one of the profile's labels
/// rejects the page as a listing; a missing or empty title rejects it as
/// broken. Steps are kept one per line.
pub fn extract_recipe(id: &str, html_text: &str, profile: &SiteProfile) -> Result<RawRecipe, PageRejection> {
    if html_text.trim().is_empty() {
        return Err(PageRejection::BrokenPage);
    }
    let doc = Html::parse_document(html_text);
    let is_category = profile
        .category_selector
        .select(&doc)
        .any(|e| profile.category_labels.iter().any(|l| element_text(e) == *l));
    if is_category {
        return Err(PageRejection::CategoryPage);
    }
    let title = profile
        .title_selector
        .select(&doc)
        .map(element_text)
        .find(|t| !t.is_empty())
        .ok_or(PageRejection::BrokenPage)?;
    let ingredients: Vec<String> = profile.ingredients_selector.select(&doc).map(element_text).filter(|t| !t.is_empty()).collect();
    let steps: Vec<String> = profile.instructions_selector.select(&doc).map(element_text).filter(|t| !t.is_empty()).collect();
    Ok(RawRecipe {
        id: id.to_string(),
        title: Some(title),
        ingredients,
        instructions: if steps.is_empty() { None } else { Some(steps.join("\n")) },
        picture_link: None,
        layout: InstructionLayout::OnePerLine,
    })
}
