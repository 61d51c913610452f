//! Sentence segmentation, claim splitting and claim normalization.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::backend::{BackendError, LanguageModel, SamplingParams, TemplateSet};
use crate::utility::ClaimProbability;

/// Claims kept per sentence; extra splitter lines are dropped.
pub const MAX_CLAIMS_PER_SENTENCE: usize = 16;

/// Which generation a sentence or claim came from.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
pub struct SampleRef {
    pub iteration: u32,
    pub sample_index: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub text: String,
    pub source: SampleRef,
    pub ordinal: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomicClaim {
    pub text: String,
    pub canonical_key: String,
    pub entity: String,
    pub source: SampleRef,
    /// Ordinal of the sentence the claim was split from.
    pub sentence: u32,
    pub probability: ClaimProbability,
}

impl AtomicClaim {
    pub fn new(text: &str, entity: &str, source: SampleRef, sentence: u32) -> Self {
        Self {
            text: text.to_string(),
            canonical_key: normalize_claim(text),
            entity: entity.to_string(),
            source,
            sentence,
            probability: ClaimProbability::UNASSESSED,
        }
    }
}

/// Canonical cache key: lowercase, NFC, single spaces, trimmed, without a
/// terminal period. An ellipsis is kept. Idempotent.
pub fn normalize_claim(text: &str) -> String {
    let lowered: String = text.to_lowercase().nfc().collect();
    let mut key = lowered.split_whitespace().collect::<Vec<_>>().join(" ");
    while key.ends_with('.') && !key.ends_with("..") {
        key.pop();
        let trimmed_len = key.trim_end().len();
        key.truncate(trimmed_len);
    }
    key
}

const ABBREVIATIONS: &[&str] = &[
    "mr", "mrs", "ms", "dr", "prof", "sr", "jr", "st", "mt", "ft", "gen", "col", "lt", "sgt",
    "capt", "cmdr", "adm", "gov", "sen", "rep", "pres", "rev", "hon", "vs", "etc", "inc", "ltd",
    "co", "corp", "no", "vol", "fig", "approx", "ca", "jan", "feb", "mar", "apr", "jun", "jul",
    "aug", "sep", "sept", "oct", "nov", "dec", "e.g", "i.e", "u.s", "u.k", "u.n", "d.c", "a.m",
    "p.m", "ph.d", "b.a", "m.a",
];

fn is_closing(c: char) -> bool {
    matches!(c, '"' | '\'' | ')' | ']' | '\u{201d}' | '\u{2019}')
}

fn is_opening(c: char) -> bool {
    matches!(c, '"' | '\'' | '(' | '[' | '\u{201c}' | '\u{2018}')
}

/// The word (letters and inner periods) that ends right before byte `end`.
fn word_before(text: &str, end: usize) -> &str {
    let head = &text[..end];
    let start = head
        .char_indices()
        .rev()
        .find(|(_, c)| !(c.is_alphanumeric() || *c == '.'))
        .map(|(i, c)| i + c.len_utf8())
        .unwrap_or(0);
    &head[start..]
}

/// Whether a period at byte `dot` ends an abbreviation or a middle initial.
fn is_guarded(text: &str, dot: usize, sentence_start: usize) -> bool {
    let word = word_before(text, dot);
    if word.is_empty() {
        return false;
    }
    if ABBREVIATIONS.contains(&word.to_lowercase().as_str()) {
        return true;
    }
    // A lone capital right after a capitalized word, like the "F." in
    // "John F. Kennedy". Not "is A." and not at the start of a sentence.
    let mut chars = word.chars();
    let single_capital =
        matches!((chars.next(), chars.next()), (Some(c), None) if c.is_uppercase());
    let word_start = dot - word.len();
    let before = text[sentence_start..word_start].trim_end();
    let previous = before.rsplit(char::is_whitespace).next().unwrap_or("");
    single_capital && previous.chars().next().is_some_and(char::is_uppercase)
}

/// Rule-based segmentation: a sentence ends at `.`, `!` or `?` (plus any
/// closing quotes or brackets) followed by whitespace and an uppercase letter
/// or digit, possibly behind an opening quote. Abbreviations and middle
/// initials do not end sentences. Dashes never split.
pub fn split_sentence_texts(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut start = 0;
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut i = 0;
    while i < chars.len() {
        let (pos, c) = chars[i];
        if matches!(c, '.' | '!' | '?') {
            let mut j = i + 1;
            while j < chars.len()
                && (matches!(chars[j].1, '.' | '!' | '?') || is_closing(chars[j].1))
            {
                j += 1;
            }
            let end = chars.get(j).map(|(p, _)| *p).unwrap_or(text.len());
            let mut k = j;
            while k < chars.len() && chars[k].1.is_whitespace() {
                k += 1;
            }
            let has_space = k > j;
            let mut m = k;
            while m < chars.len() && is_opening(chars[m].1) {
                m += 1;
            }
            let next_starts = chars
                .get(m)
                .map(|(_, n)| n.is_uppercase() || n.is_ascii_digit())
                .unwrap_or(false);
            let guarded = c == '.' && j == i + 1 && is_guarded(text, pos, start);
            if has_space && next_starts && !guarded {
                let s = text[start..end].trim();
                if !s.is_empty() {
                    out.push(s.to_string());
                }
                start = chars[k].0;
                i = k;
                continue;
            }
            i = j;
            continue;
        }
        i += 1;
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(tail.to_string());
    }
    out
}

pub fn split_sentences(text: &str, source: SampleRef) -> Vec<Sentence> {
    split_sentence_texts(text)
        .into_iter()
        .enumerate()
        .map(|(ordinal, text)| Sentence {
            text,
            source,
            ordinal: ordinal as u32,
        })
        .collect()
}

fn strip_bullet(line: &str) -> &str {
    let line = line.trim();
    for bullet in ["- ", "* ", "\u{2022} "] {
        if let Some(rest) = line.strip_prefix(bullet) {
            return rest.trim();
        }
    }
    if line == "-" || line == "*" {
        return "";
    }
    // "3." or "3)" numbering
    let digits = line.chars().take_while(|c| c.is_ascii_digit()).count();
    if digits > 0 {
        let rest = &line[digits..];
        if let Some(r) = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')')) {
            if r.is_empty() || r.starts_with(char::is_whitespace) {
                return r.trim();
            }
        }
    }
    line
}

/// Parse a line-delimited claim list. Bullets (`-`, `*`) and `N.` numbering are
/// stripped, blank lines and a leading `Claims:` header skipped, duplicates
/// (by canonical key) dropped, and the list capped at
/// [`MAX_CLAIMS_PER_SENTENCE`].
pub fn parse_claim_lines(output: &str) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for raw in output.lines() {
        let line = strip_bullet(raw);
        if line.is_empty() || line.eq_ignore_ascii_case("claims:") {
            continue;
        }
        if seen.insert(normalize_claim(line)) {
            out.push(line.to_string());
            if out.len() == MAX_CLAIMS_PER_SENTENCE {
                break;
            }
        }
    }
    out
}

/// Claims extracted from one sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct SentenceClaims {
    pub claims: Vec<AtomicClaim>,
    /// The splitter produced nothing parseable.
    pub warning: bool,
    pub tokens: u64,
}

/// Split one sentence into atomic claims through the splitter prompt.
pub fn extract_claims(
    entity: &str,
    sentence: &Sentence,
    lm: &dyn LanguageModel,
    templates: &TemplateSet,
    params: &SamplingParams,
) -> Result<SentenceClaims, ExtractError> {
    let prompt = templates.splitter(entity, &sentence.text)?;
    let completion = lm
        .generate(&prompt, &params.with_n(1))?
        .into_iter()
        .next()
        .ok_or_else(|| BackendError::Malformed("splitter returned no completion".into()))?;
    let tokens = completion.total_tokens();
    let claims: Vec<AtomicClaim> = parse_claim_lines(&completion.text)
        .iter()
        .map(|t| AtomicClaim::new(t, entity, sentence.source, sentence.ordinal))
        .collect();
    let warning = claims.is_empty();
    if warning {
        log::warn!(
            "splitter returned no claims for sentence {:?} of {entity}",
            sentence.text
        );
    }
    Ok(SentenceClaims {
        claims,
        warning,
        tokens,
    })
}

#[derive(Debug, thiserror::Error)]
pub enum ExtractError {
    #[error(transparent)]
    Render(#[from] crate::backend::RenderError),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// Claims of a whole generation, deduplicated by canonical key within the
/// generation. Each claim is attributed to the first sentence that produced it.
pub fn dedup_generation_claims(per_sentence: Vec<Vec<AtomicClaim>>) -> Vec<AtomicClaim> {
    let mut seen = HashSet::new();
    per_sentence
        .into_iter()
        .flatten()
        .filter(|c| seen.insert(c.canonical_key.clone()))
        .collect()
}
