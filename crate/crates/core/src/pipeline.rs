//! Glue shared by the command-line driver and the tests: curation of a
//! generated corpus into leakage-free splits, and the evaluation model.

use serde::{Deserialize, Serialize};

use crate::curation::{
    remove_leakage, stage_validity, template_frequencies, CurationStats, LeakageReport, ReactionRecord, Split,
};
use crate::error::Result;
use crate::library::TemplateLibrary;
use crate::reaction_engine::ReactionEngine;
use crate::tokenizer::{build_vocab, Vocabulary};

#[derive(Debug, Clone)]
pub struct CuratedSplits {
    pub train: Vec<ReactionRecord>,
    pub val: Vec<ReactionRecord>,
    pub test: Vec<ReactionRecord>,
    pub stats: CurationStats,
    pub leakage: LeakageReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurationSummary {
    pub validity: CurationStats,
    pub leakage: LeakageReport,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl CuratedSplits {
    pub fn summary(&self) -> CurationSummary {
        CurationSummary {
            validity: self.stats.clone(),
            leakage: self.leakage.clone(),
            train: self.train.len(),
            val: self.val.len(),
            test: self.test.len(),
        }
    }

    pub fn all(&self) -> Vec<ReactionRecord> {
        let mut v: Vec<ReactionRecord> = self.train.iter().chain(&self.val).chain(&self.test).cloned().collect();
        v.sort_by_key(|r| r.id);
        v
    }
}

/// Validity staging followed by removal of train rows whose signature
/// appears in val or test. Library frequencies are recomputed on the
/// cleaned train split.
pub fn curate(
    records: &[ReactionRecord],
    library: &mut TemplateLibrary,
    engine: &dyn ReactionEngine,
    max_outcomes: usize,
) -> Result<CuratedSplits> {
    let (stats, valid) = stage_validity(records, engine, max_outcomes);
    let pick = |s: Split| -> Vec<ReactionRecord> { valid.iter().filter(|r| r.split == s).cloned().collect() };
    let (train, val, test) = (pick(Split::Train), pick(Split::Val), pick(Split::Test));
    let (train, leakage) = remove_leakage(&train, &[("val", &val), ("test", &test)]);
    library.set_frequencies(template_frequencies(&train, library.len(), Split::Train))?;
    Ok(CuratedSplits {
        train,
        val,
        test,
        stats,
        leakage,
    })
}

/// Character vocabulary over every product and template string.
pub fn corpus_vocab(records: &[ReactionRecord], library: &TemplateLibrary) -> Result<Vocabulary> {
    build_vocab(
        records
            .iter()
            .map(|r| r.product.as_str())
            .chain(library.raws().iter().map(String::as_str)),
    )
}
