//! Template application behind a small trait, with a deterministic
//! string-rewrite backend.
//!
//! A template `P>>R1.R2...Rn` matches every left-to-right, non-overlapping
//! occurrence of `P` in the product. For an occurrence splitting the product
//! into `left ++ P ++ right`, the outcome is
//!
//! * `n == 1`: `[left ++ R1 ++ right]`
//! * `n >= 2`: `[left ++ R1, R2, ..., Rn ++ right]`
//!
//! so the left context stays on the first reactant and the right context on
//! the last. The rule is invertible, which lets the corpus generator build
//! products from reactants and guarantee forward validation.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_MAX_OUTCOMES: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RewriteTemplate {
    pub template_id: usize,
    pub product_pattern: String,
    pub reactant_patterns: Vec<String>,
    pub raw: String,
}

impl RewriteTemplate {
    /// Parses `productPattern>>reactant1.reactant2`.
    pub fn parse(template_id: usize, raw: &str) -> Result<Self> {
        let malformed = || Error::MalformedTemplate(raw.to_string());
        let (lhs, rhs) = raw.split_once(">>").ok_or_else(malformed)?;
        if lhs.is_empty() || rhs.contains(">>") || lhs.split('.').any(str::is_empty) {
            return Err(malformed());
        }
        let reactant_patterns: Vec<String> = rhs.split('.').map(str::to_string).collect();
        if reactant_patterns.iter().any(String::is_empty) {
            return Err(malformed());
        }
        Ok(Self {
            template_id,
            product_pattern: lhs.to_string(),
            reactant_patterns,
            raw: raw.to_string(),
        })
    }

    pub fn is_multi_input(&self) -> bool {
        self.product_pattern.contains('.')
    }

    /// Forward direction: the product obtained by placing `left`/`right`
    /// contexts around the pattern, and the matching reactants.
    pub fn compose(&self, left: &str, right: &str) -> (String, Vec<String>) {
        let product = format!("{left}{}{right}", self.product_pattern);
        (product, self.outcome(left, right))
    }

    fn outcome(&self, left: &str, right: &str) -> Vec<String> {
        let n = self.reactant_patterns.len();
        if n == 1 {
            return vec![format!("{left}{}{right}", self.reactant_patterns[0])];
        }
        let mut out = self.reactant_patterns.clone();
        out[0] = format!("{left}{}", out[0]);
        out[n - 1] = format!("{}{right}", out[n - 1]);
        out
    }
}

/// Canonical reactant-set identity: normalized components, sorted, `.`-joined.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ReactantSetKey(String);

impl ReactantSetKey {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ReactantSetKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Removes bracketed all-digit annotations such as `[12]`.
pub fn strip_tags(s: &str) -> String {
    let bytes = s.as_bytes();
    let mut out = String::with_capacity(s.len());
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'[' {
            let digits = bytes[i + 1..].iter().take_while(|b| b.is_ascii_digit()).count();
            if digits > 0 && bytes.get(i + 1 + digits) == Some(&b']') {
                i += digits + 2;
                continue;
            }
        }
        let ch = s[i..].chars().next().expect("char boundary");
        out.push(ch);
        i += ch.len_utf8();
    }
    out
}

/// Normalizes one molecule string: tags removed, whitespace trimmed.
pub fn normalize_component(s: &str) -> String {
    strip_tags(s).trim().to_string()
}

/// Each input may itself hold several `.`-separated components.
pub fn canonicalize<S: AsRef<str>>(reactants: &[S]) -> Result<ReactantSetKey> {
    let mut parts = Vec::new();
    for r in reactants {
        for comp in r.as_ref().split('.') {
            let norm = normalize_component(comp);
            if norm.is_empty() {
                return Err(Error::EmptyComponent);
            }
            parts.push(norm);
        }
    }
    if parts.is_empty() {
        return Err(Error::EmptyComponent);
    }
    parts.sort();
    Ok(ReactantSetKey(parts.join(".")))
}

pub trait ReactionEngine: Send + Sync {
    /// Applies a template to a single product and returns up to
    /// `max_outcomes` reactant lists. `MultiInputTemplate` is an error,
    /// distinct from an empty (no match) result.
    fn apply(&self, template: &RewriteTemplate, product: &str, max_outcomes: usize) -> Result<Vec<Vec<String>>>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RewriteEngine;

impl ReactionEngine for RewriteEngine {
    fn apply(&self, template: &RewriteTemplate, product: &str, max_outcomes: usize) -> Result<Vec<Vec<String>>> {
        if product.is_empty() {
            return Err(Error::EmptyString);
        }
        if template.is_multi_input() {
            return Err(Error::MultiInputTemplate);
        }
        let pat = template.product_pattern.as_str();
        Ok(product
            .match_indices(pat)
            .take(max_outcomes)
            .map(|(p, _)| template.outcome(&product[..p], &product[p + pat.len()..]))
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Validation {
    Valid,
    /// The template could not be parsed.
    ExtractionFailed,
    MultiInput,
    /// No outcome regenerates the recorded reactants.
    Mismatch,
}

impl Validation {
    pub fn is_valid(self) -> bool {
        self == Validation::Valid
    }
}

/// Re-applies the template to the tag-stripped product and checks that one
/// outcome canonicalizes to the recorded reactant set.
pub fn forward_validate(
    engine: &dyn ReactionEngine,
    template_raw: &str,
    product: &str,
    reactants: &[String],
    max_outcomes: usize,
) -> Validation {
    let Ok(template) = RewriteTemplate::parse(0, template_raw) else {
        return Validation::ExtractionFailed;
    };
    if template.is_multi_input() {
        return Validation::MultiInput;
    }
    let Ok(truth) = canonicalize(reactants) else {
        return Validation::Mismatch;
    };
    match engine.apply(&template, &strip_tags(product), max_outcomes) {
        Ok(outcomes) => {
            if outcomes.iter().any(|o| canonicalize(o).is_ok_and(|k| k == truth)) {
                Validation::Valid
            } else {
                Validation::Mismatch
            }
        }
        Err(Error::MultiInputTemplate) => Validation::MultiInput,
        Err(_) => Validation::Mismatch,
    }
}
