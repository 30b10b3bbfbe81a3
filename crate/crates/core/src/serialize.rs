//! Single-string recipe layout with structural tokens.
//!
//! A recipe becomes
//!
//! ```text
//! <START_TITLE>title<START_INGREDIENTS>-ing1-ing2<START_INSTRUCTIONS>*step1*step2
//! ```
//!
//! The `-` and `*` prefixes are the only item delimiters, so a literal `-`
//! inside an ingredient or `*` inside a step is written as
//! [`ESCAPED_HYPHEN`] / [`ESCAPED_ASTERISK`] and restored on decode.

use thiserror::Error;

use crate::corpus::CleanRecipe;

pub const BOS: &str = "<|startoftext|>";
pub const EOS: &str = "<|endoftext|>";
pub const PAD: &str = "<|pad|>";
pub const START_TITLE: &str = "<START_TITLE>";
pub const START_INGREDIENTS: &str = "<START_INGREDIENTS>";
pub const START_INSTRUCTIONS: &str = "<START_INSTRUCTIONS>";

pub const INGREDIENT_PREFIX: char = '-';
pub const STEP_PREFIX: char = '*';

/// U+2011 NON-BREAKING HYPHEN stands in for `-` inside an ingredient.
pub const ESCAPED_HYPHEN: char = '\u{2011}';
/// U+2217 ASTERISK OPERATOR stands in for `*` inside a step.
pub const ESCAPED_ASTERISK: char = '\u{2217}';

/// The six reserved strings, in registration order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpecialTokens {
    pub bos: String,
    pub eos: String,
    pub pad: String,
    pub title: String,
    pub ingredients: String,
    pub instructions: String,
}

impl Default for SpecialTokens {
    fn default() -> Self {
        Self {
            bos: BOS.into(),
            eos: EOS.into(),
            pad: PAD.into(),
            title: START_TITLE.into(),
            ingredients: START_INGREDIENTS.into(),
            instructions: START_INSTRUCTIONS.into(),
        }
    }
}

impl SpecialTokens {
    pub fn all(&self) -> [&str; 6] {
        [&self.bos, &self.eos, &self.pad, &self.title, &self.ingredients, &self.instructions]
    }

    /// The three structural markers, in layout order.
    pub fn structural(&self) -> [&str; 3] {
        [&self.title, &self.ingredients, &self.instructions]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EncodeError {
    #[error("{field} contains the reserved string {found:?}")]
    ReservedContent { field: &'static str, found: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("missing {0}")]
    MissingToken(&'static str),
    #[error("{token} must come after {after}")]
    OutOfOrder { token: &'static str, after: &'static str },
    #[error("{0} appears more than once")]
    DuplicateToken(&'static str),
    #[error("{section} section does not start with {prefix:?}")]
    MissingItemPrefix { section: &'static str, prefix: char },
    #[error("{0} section is empty")]
    EmptySection(&'static str),
}

fn check_content(field: &'static str, text: &str) -> Result<(), EncodeError> {
    let reserved = [BOS, EOS, PAD, START_TITLE, START_INGREDIENTS, START_INSTRUCTIONS];
    if let Some(tok) = reserved.iter().find(|t| text.contains(**t)) {
        return Err(EncodeError::ReservedContent { field, found: tok.to_string() });
    }
    for c in [ESCAPED_HYPHEN, ESCAPED_ASTERISK] {
        if text.contains(c) {
            return Err(EncodeError::ReservedContent { field, found: c.to_string() });
        }
    }
    Ok(())
}

pub fn encode_recipe(r: &CleanRecipe) -> Result<String, EncodeError> {
    check_content("title", &r.title)?;
    let mut out = String::with_capacity(r.char_len() + 64);
    out.push_str(START_TITLE);
    out.push_str(&r.title);
    out.push_str(START_INGREDIENTS);
    for item in &r.ingredients {
        check_content("ingredient", item)?;
        out.push(INGREDIENT_PREFIX);
        out.extend(item.chars().map(|c| if c == INGREDIENT_PREFIX { ESCAPED_HYPHEN } else { c }));
    }
    out.push_str(START_INSTRUCTIONS);
    for step in &r.instructions {
        check_content("instruction", step)?;
        out.push(STEP_PREFIX);
        out.extend(step.chars().map(|c| if c == STEP_PREFIX { ESCAPED_ASTERISK } else { c }));
    }
    Ok(out)
}

/// Locates `token` exactly once in `s`.
fn find_once(s: &str, token: &'static str) -> Result<usize, DecodeError> {
    let at = s.find(token).ok_or(DecodeError::MissingToken(token))?;
    if s[at + token.len()..].contains(token) {
        return Err(DecodeError::DuplicateToken(token));
    }
    Ok(at)
}

fn split_items(
    section_text: &str,
    section: &'static str,
    prefix: char,
    escaped: char,
) -> Result<Vec<String>, DecodeError> {
    let text = section_text.trim_start();
    if !text.starts_with(prefix) {
        if text.trim().is_empty() {
            return Err(DecodeError::EmptySection(section));
        }
        return Err(DecodeError::MissingItemPrefix { section, prefix });
    }
    let items: Vec<String> = text
        .split(prefix)
        .skip(1)
        .map(|item| {
            item.chars()
                .map(|c| if c == escaped { prefix } else { c })
                .collect::<String>()
                .trim()
                .to_string()
        })
        .filter(|item| !item.is_empty())
        .collect();
    if items.is_empty() {
        return Err(DecodeError::EmptySection(section));
    }
    Ok(items)
}

/// Parses a serialized recipe. Control tokens are dropped first and anything
/// before the title marker (the keyword prefix) is ignored.
pub fn decode_recipe(s: &str) -> Result<CleanRecipe, DecodeError> {
    let s = strip_control_tokens(s);
    let title_at = find_once(&s, START_TITLE)?;
    let ing_at = find_once(&s, START_INGREDIENTS)?;
    if ing_at < title_at {
        return Err(DecodeError::OutOfOrder { token: START_INGREDIENTS, after: START_TITLE });
    }
    let ins_at = find_once(&s, START_INSTRUCTIONS)?;
    if ins_at < ing_at {
        return Err(DecodeError::OutOfOrder { token: START_INSTRUCTIONS, after: START_INGREDIENTS });
    }
    let title = s[title_at + START_TITLE.len()..ing_at].trim().to_string();
    if title.is_empty() {
        return Err(DecodeError::EmptySection("title"));
    }
    let ingredients = split_items(
        &s[ing_at + START_INGREDIENTS.len()..ins_at],
        "ingredients",
        INGREDIENT_PREFIX,
        ESCAPED_HYPHEN,
    )?;
    let instructions = split_items(
        &s[ins_at + START_INSTRUCTIONS.len()..],
        "instructions",
        STEP_PREFIX,
        ESCAPED_ASTERISK,
    )?;
    Ok(CleanRecipe { title, ingredients, instructions })
}

/// Removes every bos, eos and pad occurrence.
pub fn strip_control_tokens(s: &str) -> String {
    let mut out = s.to_string();
    for tok in [BOS, EOS, PAD] {
        out = out.replace(tok, "");
    }
    out
}

/// Human-readable block for display.
pub fn prettify(s: &str) -> Result<String, DecodeError> {
    Ok(render(&decode_recipe(s)?))
}

/// The display layout used by [`prettify`].
pub fn render(r: &CleanRecipe) -> String {
    let mut out = String::new();
    out.push_str("- Name -\n");
    out.push_str(&r.title);
    out.push_str("\n\n- Ingredients -\n");
    for item in &r.ingredients {
        out.push_str("\u{2022} ");
        out.push_str(item);
        out.push('\n');
    }
    out.push_str("\n- Instructions -\n");
    for step in &r.instructions {
        out.push_str("\u{2013} ");
        out.push_str(step);
        out.push('\n');
    }
    out
}
