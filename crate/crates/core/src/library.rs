use std::path::Path;

use crate::error::{Error, Result};
use crate::reaction_engine::RewriteTemplate;

/// Indexed template rules. Ids are row positions and never change;
/// frequencies count training-split usage.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateLibrary {
    raws: Vec<String>,
    parsed: Vec<Option<RewriteTemplate>>,
    frequencies: Vec<usize>,
}

impl TemplateLibrary {
    pub fn new(raws: Vec<String>) -> Self {
        let parsed = raws
            .iter()
            .enumerate()
            .map(|(i, r)| RewriteTemplate::parse(i, r).ok())
            .collect();
        let frequencies = vec![0; raws.len()];
        Self {
            raws,
            parsed,
            frequencies,
        }
    }

    pub fn len(&self) -> usize {
        self.raws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raws.is_empty()
    }

    pub fn raw(&self, id: usize) -> &str {
        &self.raws[id]
    }

    pub fn raws(&self) -> &[String] {
        &self.raws
    }

    /// `None` when the row does not parse.
    pub fn template(&self, id: usize) -> Option<&RewriteTemplate> {
        self.parsed.get(id).and_then(Option::as_ref)
    }

    pub fn id_of(&self, raw: &str) -> Option<usize> {
        self.raws.iter().position(|r| r == raw)
    }

    pub fn frequency(&self, id: usize) -> usize {
        self.frequencies[id]
    }

    pub fn frequencies(&self) -> &[usize] {
        &self.frequencies
    }

    pub fn set_frequencies(&mut self, freq: Vec<usize>) -> Result<()> {
        if freq.len() != self.raws.len() {
            return Err(Error::LengthMismatch {
                expected: self.raws.len(),
                actual: freq.len(),
            });
        }
        self.frequencies = freq;
        Ok(())
    }

    /// One template per line; line index is the id.
    pub fn to_text(&self) -> String {
        let mut s = self.raws.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Self {
        Self::new(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::from_text(&std::fs::read_to_string(path)?))
    }
}
