//! Shared character-level vocabulary for product and template strings.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;

const RESERVED: [&str; 3] = ["[PAD]", "[UNK]", "[BOS]"];

/// Character vocabulary. Ids 0..3 are reserved, characters follow in
/// code-point order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    char_to_id: BTreeMap<char, u32>,
    id_to_char: Vec<Option<char>>,
}

/// A padded id sequence. `len` counts the non-PAD prefix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub len: usize,
}

impl TokenSequence {
    /// The unpadded prefix, starting with BOS.
    pub fn tokens(&self) -> &[u32] {
        &self.ids[..self.len]
    }
}

pub fn build_vocab<I, S>(corpus: I) -> Result<Vocabulary>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut seen = false;
    let mut chars = BTreeSet::new();
    for s in corpus {
        seen = true;
        chars.extend(s.as_ref().chars());
    }
    if !seen {
        return Err(Error::EmptyCorpus);
    }
    Ok(Vocabulary::from_chars(chars))
}

impl Vocabulary {
    fn from_chars(chars: impl IntoIterator<Item = char>) -> Self {
        let mut id_to_char = vec![None; RESERVED.len()];
        let mut char_to_id = BTreeMap::new();
        for c in chars {
            char_to_id.insert(c, id_to_char.len() as u32);
            id_to_char.push(Some(c));
        }
        Self { char_to_id, id_to_char }
    }

    pub fn size(&self) -> usize {
        self.id_to_char.len()
    }

    pub fn id_of(&self, c: char) -> u32 {
        self.char_to_id.get(&c).copied().unwrap_or(UNK)
    }

    pub fn char_of(&self, id: u32) -> Option<char> {
        self.id_to_char.get(id as usize).copied().flatten()
    }

    pub fn encode(&self, s: &str, max_len: usize) -> Result<TokenSequence> {
        if s.is_empty() {
            return Err(Error::EmptyString);
        }
        if max_len < 2 {
            return Err(Error::InvalidParams(format!("max_len must be >= 2, got {max_len}")));
        }
        let mut ids = Vec::with_capacity(max_len);
        ids.push(BOS);
        ids.extend(s.chars().take(max_len - 1).map(|c| self.id_of(c)));
        let len = ids.len();
        ids.resize(max_len, PAD);
        Ok(TokenSequence { ids, len })
    }

    /// Inverse of `encode` for sequences without UNK. Unknown ids map to U+FFFD.
    pub fn decode(&self, seq: &TokenSequence) -> String {
        seq.tokens()
            .iter()
            .filter(|&&id| id != BOS && id != PAD)
            .map(|&id| self.char_of(id).unwrap_or('\u{FFFD}'))
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (id, name) in RESERVED.iter().enumerate() {
            let _ = writeln!(out, "{name}\t{id}");
        }
        for (c, id) in &self.char_to_id {
            let _ = writeln!(out, "{c}\t{id}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut entries: Vec<(u32, Option<char>)> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let (key, id) = line
                .rsplit_once('\t')
                .ok_or_else(|| Error::Parse(format!("vocab line {}: missing tab", lineno + 1)))?;
            let id: u32 = id
                .parse()
                .map_err(|_| Error::Parse(format!("vocab line {}: bad id {id:?}", lineno + 1)))?;
            let entry = if let Some(pos) = RESERVED.iter().position(|r| *r == key) {
                if pos as u32 != id {
                    return Err(Error::Parse(format!("reserved token {key} must have id {pos}")));
                }
                None
            } else {
                let mut it = key.chars();
                match (it.next(), it.next()) {
                    (Some(c), None) => Some(c),
                    _ => {
                        return Err(Error::Parse(format!(
                            "vocab line {}: key {key:?} is not one character",
                            lineno + 1
                        )))
                    }
                }
            };
            entries.push((id, entry));
        }
        entries.sort_by_key(|e| e.0);
        let mut id_to_char = Vec::with_capacity(entries.len());
        let mut char_to_id = BTreeMap::new();
        for (expected, (id, c)) in entries.into_iter().enumerate() {
            if id as usize != expected {
                return Err(Error::Parse(format!("vocab ids are not contiguous at {expected}")));
            }
            if let Some(c) = c {
                char_to_id.insert(c, id);
            }
            id_to_char.push(c);
        }
        if id_to_char.len() < RESERVED.len() || id_to_char[..RESERVED.len()].iter().any(Option::is_some) {
            return Err(Error::Parse("vocab is missing reserved tokens".into()));
        }
        Ok(Self { char_to_id, id_to_char })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn co() -> Vocabulary {
        build_vocab(["CO", "OC"]).unwrap()
    }

    #[test]
    fn sorted_assignment() {
        let v = co();
        assert_eq!(v.size(), 5);
        assert_eq!(v.id_of('C'), 3);
        assert_eq!(v.id_of('O'), 4);
    }

    #[test]
    fn empty_corpus() {
        assert!(matches!(build_vocab(Vec::<String>::new()), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn deterministic() {
        assert_eq!(build_vocab(["A"]).unwrap(), build_vocab(["A"]).unwrap());
    }

    #[test]
    fn encode_pads_and_maps_unknown() {
        let v = co();
        assert_eq!(v.encode("CCO", 6).unwrap().ids, vec![2, 3, 3, 4, 0, 0]);
        assert_eq!(v.encode("CXO", 6).unwrap().ids, vec![2, 3, 1, 4, 0, 0]);
        assert!(matches!(v.encode("", 6), Err(Error::EmptyString)));
    }

    #[test]
    fn truncation_keeps_prefix() {
        let v = co();
        let s = v.encode("COCOC", 4).unwrap();
        assert_eq!(s.ids, vec![2, 3, 4, 3]);
        assert_eq!(s.len, 4);
    }

    #[test]
    fn text_roundtrip() {
        let v = build_vocab(["a[1]b\u{e9}", "C=O"]).unwrap();
        assert_eq!(Vocabulary::from_text(&v.to_text()).unwrap(), v);
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(s in "[A-Za-z=#()\\[\\]0-9]{1,40}") {
            let v = build_vocab([s.as_str()]).unwrap();
            let seq = v.encode(&s, 64).unwrap();
            prop_assert_eq!(v.decode(&seq), s);
        }
    }
}
