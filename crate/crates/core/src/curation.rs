//! Dataset pipeline: synthetic corpus generation with Zipf template usage,
//! validity staging, and canonical-signature leakage removal.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::library::TemplateLibrary;
use crate::reaction_engine::{canonicalize, forward_validate, ReactionEngine, RewriteTemplate, Validation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReactionRecord {
    pub id: u64,
    pub product: String,
    pub reactants: Vec<String>,
    pub template_id: usize,
    pub template_raw: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ReactionSignature(pub String);

/// `productKey>>reactantKey` with tags stripped and components sorted.
pub fn reaction_signature(r: &ReactionRecord) -> Result<ReactionSignature> {
    let product = canonicalize(&[r.product.as_str()])?;
    let reactants = canonicalize(&r.reactants)?;
    Ok(ReactionSignature(format!("{product}>>{reactants}")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub n_templates: usize,
    pub n_reactions: usize,
    pub zipf_exponent: f64,
    /// Fraction of products built to carry two observed templates.
    pub multi_positive_fraction: f64,
    /// Fraction of records drawn from multi-input templates.
    pub multi_input_fraction: f64,
    /// Fraction of val/test records copied into train with fresh tags.
    pub leak_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub max_outcomes: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_templates: 300,
            n_reactions: 2000,
            zipf_exponent: 1.0,
            multi_positive_fraction: 0.1,
            multi_input_fraction: 0.0,
            leak_fraction: 0.02,
            val_fraction: 0.1,
            test_fraction: 0.1,
            max_outcomes: crate::reaction_engine::DEFAULT_MAX_OUTCOMES,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    fn validate(&self) -> Result<()> {
        let frac = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::InvalidParams(format!("{name} = {v} outside [0,1]")))
            }
        };
        if self.n_templates < 2 {
            return Err(Error::InvalidParams("n_templates must be at least 2".into()));
        }
        if self.n_reactions == 0 {
            return Err(Error::InvalidParams("n_reactions must be positive".into()));
        }
        if !(self.zipf_exponent >= 0.0 && self.zipf_exponent.is_finite()) {
            return Err(Error::InvalidParams(
                "zipf_exponent must be finite and non-negative".into(),
            ));
        }
        if self.max_outcomes == 0 {
            return Err(Error::InvalidParams("max_outcomes must be positive".into()));
        }
        frac("multi_positive_fraction", self.multi_positive_fraction)?;
        frac("multi_input_fraction", self.multi_input_fraction)?;
        frac("leak_fraction", self.leak_fraction)?;
        frac("val_fraction", self.val_fraction)?;
        frac("test_fraction", self.test_fraction)?;
        if self.val_fraction + self.test_fraction >= 1.0 {
            return Err(Error::InvalidParams(
                "val + test fractions must leave a train split".into(),
            ));
        }
        let multi_input_templates = self.multi_input_template_count();
        if self.n_templates - multi_input_templates < 2 {
            return Err(Error::InvalidParams("need at least 2 single-input templates".into()));
        }
        Ok(())
    }

    fn multi_input_template_count(&self) -> usize {
        if self.multi_input_fraction > 0.0 {
            ((self.multi_input_fraction * self.n_templates as f64).round() as usize).max(1)
        } else {
            0
        }
    }
}

const PATTERN_CHARS: &[u8] = b"CNOSPFcnos=#";
const CONTEXT_CHARS: &[u8] = b"CNOcn()=";
const LEAVING_GROUPS: &[&str] = &["Cl", "Br", "I", "O", "N", "B(O)O", "OC", "C(=O)O"];

fn random_string(rng: &mut ChaCha8Rng, alphabet: &[u8], len: usize) -> String {
    (0..len)
        .map(|_| alphabet[rng.gen_range(0..alphabet.len())] as char)
        .collect()
}

fn leaving_group(rng: &mut ChaCha8Rng) -> &'static str {
    LEAVING_GROUPS[rng.gen_range(0..LEAVING_GROUPS.len())]
}

fn single_input_template(rng: &mut ChaCha8Rng) -> String {
    let len = rng.gen_range(3..=5);
    let pattern = random_string(rng, PATTERN_CHARS, len);
    let reactants = match rng.gen_range(0..20) {
        0..=4 => {
            let cut = rng.gen_range(1..len);
            vec![format!("{}{}{}", &pattern[..cut], leaving_group(rng), &pattern[cut..])]
        }
        5..=17 => {
            let cut = rng.gen_range(1..len);
            vec![
                format!("{}{}", &pattern[..cut], leaving_group(rng)),
                format!("{}{}", leaving_group(rng), &pattern[cut..]),
            ]
        }
        _ => {
            let cut = rng.gen_range(1..len);
            vec![
                format!("{}{}", &pattern[..cut], leaving_group(rng)),
                leaving_group(rng).to_string(),
                format!("{}{}", leaving_group(rng), &pattern[cut..]),
            ]
        }
    };
    format!("{pattern}>>{}", reactants.join("."))
}

fn multi_input_template(rng: &mut ChaCha8Rng) -> String {
    let a = rng.gen_range(2..=3);
    let b = rng.gen_range(2..=3);
    let left = random_string(rng, PATTERN_CHARS, a);
    let right = random_string(rng, PATTERN_CHARS, b);
    format!(
        "{left}.{right}>>{left}{}.{}{right}",
        leaving_group(rng),
        leaving_group(rng)
    )
}

fn context(rng: &mut ChaCha8Rng) -> String {
    let len = rng.gen_range(2..=6);
    random_string(rng, CONTEXT_CHARS, len)
}

/// Reactants of `template` applied at byte position `pos` of `product`.
fn outcome_at(template: &RewriteTemplate, product: &str, pos: usize) -> Vec<String> {
    let end = pos + template.product_pattern.len();
    template.compose(&product[..pos], &product[end..]).1
}

fn zipf_weights(n: usize, exponent: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut ranks: Vec<usize> = (0..n).collect();
    ranks.shuffle(rng);
    ranks.iter().map(|&r| 1.0 / ((r + 1) as f64).powf(exponent)).collect()
}

/// Builds a template library and a corpus of forward-valid records (except
/// those drawn from multi-input templates, which are valid by composition
/// but rejected by the engine).
pub fn generate_corpus(
    cfg: &GeneratorConfig,
    engine: &dyn ReactionEngine,
) -> Result<(Vec<ReactionRecord>, TemplateLibrary)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_multi = cfg.multi_input_template_count();
    let n_single = cfg.n_templates - n_multi;

    let mut raws: Vec<String> = Vec::with_capacity(cfg.n_templates);
    let mut seen_patterns = HashSet::new();
    let mut attempts = 0;
    while raws.len() < cfg.n_templates {
        attempts += 1;
        if attempts > 100 * cfg.n_templates + 1000 {
            return Err(Error::InvalidParams(format!(
                "could not draw {} distinct templates",
                cfg.n_templates
            )));
        }
        let raw = if raws.len() < n_single {
            single_input_template(&mut rng)
        } else {
            multi_input_template(&mut rng)
        };
        let pattern = raw.split(">>").next().unwrap_or_default().to_string();
        if seen_patterns.insert(pattern) {
            raws.push(raw);
        }
    }
    let templates: Vec<RewriteTemplate> = raws
        .iter()
        .enumerate()
        .map(|(i, r)| RewriteTemplate::parse(i, r))
        .collect::<Result<_>>()?;

    let single_pick = WeightedIndex::new(zipf_weights(n_single, cfg.zipf_exponent, &mut rng))
        .map_err(|e| Error::InvalidParams(e.to_string()))?;

    let mut records: Vec<ReactionRecord> = Vec::with_capacity(cfg.n_reactions);
    let mut products = HashSet::new();
    let push =
        |records: &mut Vec<ReactionRecord>, product: &str, reactants: Vec<String>, t: &RewriteTemplate, split| {
            let id = records.len() as u64;
            records.push(ReactionRecord {
                id,
                product: product.to_string(),
                reactants,
                template_id: t.template_id,
                template_raw: t.raw.clone(),
                split,
            });
        };

    let mut stalls = 0;
    while records.len() < cfg.n_reactions {
        stalls += 1;
        if stalls > 1000 {
            return Err(Error::InvalidParams(
                "corpus generator cannot find fresh products".into(),
            ));
        }
        let u: f64 = rng.gen();
        let split = if u < cfg.test_fraction {
            Split::Test
        } else if u < cfg.test_fraction + cfg.val_fraction {
            Split::Val
        } else {
            Split::Train
        };

        if n_multi > 0 && rng.gen_bool(cfg.multi_input_fraction) {
            let t = &templates[n_single + rng.gen_range(0..n_multi)];
            let (left, right) = (context(&mut rng), context(&mut rng));
            let (product, reactants) = t.compose(&left, &right);
            if products.insert(product.clone()) {
                push(&mut records, &product, reactants, t, split);
                stalls = 0;
            }
            continue;
        }

        let two = records.len() + 2 <= cfg.n_reactions && rng.gen_bool(cfg.multi_positive_fraction);
        let a = &templates[single_pick.sample(&mut rng)];
        let left = context(&mut rng);
        let right = context(&mut rng);
        let (product, sites) = if two {
            let mut b = &templates[single_pick.sample(&mut rng)];
            let mut guard = 0;
            while b.template_id == a.template_id && guard < 50 {
                b = &templates[single_pick.sample(&mut rng)];
                guard += 1;
            }
            if b.template_id == a.template_id {
                continue;
            }
            let mid = context(&mut rng);
            let product = format!("{left}{}{mid}{}{right}", a.product_pattern, b.product_pattern);
            let pos_b = left.len() + a.product_pattern.len() + mid.len();
            (product, vec![(a, left.len()), (b, pos_b)])
        } else {
            (format!("{left}{}{right}", a.product_pattern), vec![(a, left.len())])
        };
        if products.contains(&product) {
            continue;
        }
        let built: Vec<(&RewriteTemplate, Vec<String>)> = sites
            .iter()
            .map(|&(t, pos)| (t, outcome_at(t, &product, pos)))
            .collect();
        let all_valid = built
            .iter()
            .all(|(t, r)| forward_validate(engine, &t.raw, &product, r, cfg.max_outcomes).is_valid());
        if !all_valid {
            continue;
        }
        products.insert(product.clone());
        for (t, reactants) in built {
            push(&mut records, &product, reactants, t, split);
        }
        stalls = 0;
    }

    // Tagged copies of held-out chemistry placed in train.
    if cfg.leak_fraction > 0.0 {
        let held_out: Vec<ReactionRecord> = records.iter().filter(|r| r.split != Split::Train).cloned().collect();
        for r in held_out {
            if rng.gen_bool(cfg.leak_fraction) {
                let tag = |s: &str, rng: &mut ChaCha8Rng| format!("{s}[{}]", rng.gen_range(1..100));
                let product = tag(&r.product, &mut rng);
                let reactants = r.reactants.iter().map(|s| tag(s, &mut rng)).collect();
                let id = records.len() as u64;
                records.push(ReactionRecord {
                    id,
                    product,
                    reactants,
                    split: Split::Train,
                    ..r
                });
            }
        }
    }

    let mut library = TemplateLibrary::new(raws);
    library.set_frequencies(template_frequencies(&records, library.len(), Split::Train))?;
    Ok((records, library))
}

/// Per-template record counts within one split.
pub fn template_frequencies(records: &[ReactionRecord], n_templates: usize, split: Split) -> Vec<usize> {
    let mut freq = vec![0; n_templates];
    for r in records.iter().filter(|r| r.split == split) {
        if r.template_id < n_templates {
            freq[r.template_id] += 1;
        }
    }
    freq
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurationStats {
    pub total: usize,
    pub extracted: usize,
    pub multi_input: usize,
    pub failed_forward_validation: usize,
    pub valid: usize,
}

/// Classifies each record through extraction, multi-input detection and
/// forward validation. Failures are counted, never raised.
pub fn stage_validity(
    records: &[ReactionRecord],
    engine: &dyn ReactionEngine,
    max_outcomes: usize,
) -> (CurationStats, Vec<ReactionRecord>) {
    let mut stats = CurationStats {
        total: records.len(),
        ..Default::default()
    };
    let mut valid = Vec::new();
    for r in records {
        match forward_validate(engine, &r.template_raw, &r.product, &r.reactants, max_outcomes) {
            Validation::ExtractionFailed => {}
            Validation::MultiInput => {
                stats.extracted += 1;
                stats.multi_input += 1;
            }
            Validation::Mismatch => {
                stats.extracted += 1;
                stats.failed_forward_validation += 1;
            }
            Validation::Valid => {
                stats.extracted += 1;
                stats.valid += 1;
                valid.push(r.clone());
            }
        }
    }
    (stats, valid)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HoldoutOverlap {
    pub name: String,
    pub reference_rows: usize,
    /// Distinct signatures of this holdout that occur in train.
    pub overlap_signatures: usize,
    /// Train rows matching this holdout.
    pub removed: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeakageReport {
    pub per_holdout: Vec<HoldoutOverlap>,
    pub union_removed: usize,
    pub remaining: usize,
}

/// Drops every train record whose signature appears in any holdout.
/// Records whose signature cannot be computed are kept.
pub fn remove_leakage(
    train: &[ReactionRecord],
    holdouts: &[(&str, &[ReactionRecord])],
) -> (Vec<ReactionRecord>, LeakageReport) {
    let train_sigs: Vec<Option<ReactionSignature>> = train.iter().map(|r| reaction_signature(r).ok()).collect();
    let train_sig_set: BTreeSet<&ReactionSignature> = train_sigs.iter().flatten().collect();
    let mut union: HashSet<ReactionSignature> = HashSet::new();
    let mut per_holdout = Vec::with_capacity(holdouts.len());
    for (name, rows) in holdouts {
        let sigs: HashSet<ReactionSignature> = rows.iter().filter_map(|r| reaction_signature(r).ok()).collect();
        let overlap_signatures = sigs.iter().filter(|s| train_sig_set.contains(s)).count();
        let removed = train_sigs.iter().flatten().filter(|s| sigs.contains(*s)).count();
        per_holdout.push(HoldoutOverlap {
            name: name.to_string(),
            reference_rows: rows.len(),
            overlap_signatures,
            removed,
        });
        union.extend(sigs);
    }
    let cleaned: Vec<ReactionRecord> = train
        .iter()
        .zip(&train_sigs)
        .filter(|(_, s)| s.as_ref().is_none_or(|s| !union.contains(s)))
        .map(|(r, _)| r.clone())
        .collect();
    let report = LeakageReport {
        per_holdout,
        union_removed: train.len() - cleaned.len(),
        remaining: cleaned.len(),
    };
    (cleaned, report)
}

/// A product with every template recorded for it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProductGroup {
    pub product: String,
    pub positives: Vec<usize>,
    pub record_ids: Vec<u64>,
}

/// Groups records by product string in order of first appearance.
pub fn group_by_product(records: &[ReactionRecord]) -> Vec<ProductGroup> {
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut groups: Vec<ProductGroup> = Vec::new();
    for r in records {
        let slot = *index.entry(r.product.as_str()).or_insert_with(|| {
            groups.push(ProductGroup {
                product: r.product.clone(),
                positives: Vec::new(),
                record_ids: Vec::new(),
            });
            groups.len() - 1
        });
        let g = &mut groups[slot];
        if !g.positives.contains(&r.template_id) {
            g.positives.push(r.template_id);
        }
        g.record_ids.push(r.id);
    }
    for g in &mut groups {
        g.positives.sort_unstable();
    }
    groups
}

pub fn split_records(records: &[ReactionRecord]) -> BTreeMap<Split, Vec<ReactionRecord>> {
    let mut out: BTreeMap<Split, Vec<ReactionRecord>> = BTreeMap::new();
    for r in records {
        out.entry(r.split).or_default().push(r.clone());
    }
    out
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in file.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
