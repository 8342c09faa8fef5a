//! Template embedding bank, exact inner-product search, and per-product
//! candidate-set assembly for listwise training.

use std::collections::HashSet;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{ops, EncoderParams};
use crate::error::{Error, Result};
use crate::tokenizer::TokenSequence;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BankSource {
    Live,
    Ema,
    Snapshot,
    Stage1Frozen,
}

impl fmt::Display for BankSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BankSource::Live => "live",
            BankSource::Ema => "ema",
            BankSource::Snapshot => "snapshot",
            BankSource::Stage1Frozen => "stage1-frozen",
        })
    }
}

/// Row-major N×d matrix of unit template embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateBank {
    dim: usize,
    embeddings: Vec<f64>,
    pub source: BankSource,
    pub epoch: usize,
}

impl TemplateBank {
    pub fn from_rows(dim: usize, embeddings: Vec<f64>, source: BankSource, epoch: usize) -> Result<Self> {
        if dim == 0 || embeddings.is_empty() || embeddings.len() % dim != 0 {
            return Err(Error::ShapeMismatch(format!(
                "bank of {} values is not a non-empty multiple of dim {dim}",
                embeddings.len()
            )));
        }
        Ok(Self {
            dim,
            embeddings,
            source,
            epoch,
        })
    }

    pub fn len(&self) -> usize {
        self.embeddings.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, id: usize) -> &[f64] {
        &self.embeddings[id * self.dim..(id + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.embeddings
    }

    /// Inner products of `query` with every row.
    pub fn scores(&self, query: &[f64]) -> Vec<f64> {
        self.embeddings
            .chunks_exact(self.dim)
            .map(|r| ops::dot(r, query))
            .collect()
    }

    /// Carries an unchanged bank into a later epoch.
    pub fn restamp(&mut self, epoch: usize) {
        self.epoch = epoch;
    }
}

/// Encodes every template in eval mode.
pub fn build_bank(
    params: &EncoderParams,
    templates: &[TokenSequence],
    source: BankSource,
    epoch: usize,
) -> Result<TemplateBank> {
    if templates.is_empty() {
        return Err(Error::EmptyLibrary);
    }
    let dim = params.config().hidden_dim;
    let mut rows = Vec::with_capacity(templates.len() * dim);
    for t in templates {
        rows.extend(params.embed(t)?);
    }
    TemplateBank::from_rows(dim, rows, source, epoch)
}

/// Orders `(id, score)` by score descending, then id ascending.
fn ranking_order(a: &(usize, f64), b: &(usize, f64)) -> std::cmp::Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// Top-`k` ids by inner product, descending; ties go to the smaller id.
pub fn knn_search(bank: &TemplateBank, query: &[f64], k: usize) -> Result<Vec<usize>> {
    Ok(knn_search_scored(bank, query, k)?
        .into_iter()
        .map(|(id, _)| id)
        .collect())
}

pub fn knn_search_scored(bank: &TemplateBank, query: &[f64], k: usize) -> Result<Vec<(usize, f64)>> {
    let n = bank.len();
    if k == 0 || k > n {
        return Err(Error::KOutOfRange { k, n });
    }
    if query.len() != bank.dim {
        return Err(Error::ShapeMismatch(format!(
            "query has {} dims, bank has {}",
            query.len(),
            bank.dim
        )));
    }
    let mut scored: Vec<(usize, f64)> = bank.scores(query).into_iter().enumerate().collect();
    if k < n {
        scored.select_nth_unstable_by(k - 1, ranking_order);
        scored.truncate(k);
    }
    scored.sort_by(ranking_order);
    Ok(scored)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotSource {
    Positive,
    InBatch,
    Hard,
    Random,
    Replacement,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateConfig {
    pub size: usize,
    pub in_batch_cap: usize,
    pub hard_pool: usize,
}

impl Default for CandidateConfig {
    fn default() -> Self {
        Self {
            size: 64,
            in_batch_cap: 8,
            hard_pool: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateSet {
    pub template_ids: Vec<usize>,
    pub positive_mask: Vec<bool>,
    pub provenance: Vec<SlotSource>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.template_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.template_ids.is_empty()
    }

    fn push(&mut self, id: usize, positive: bool, source: SlotSource) {
        self.template_ids.push(id);
        self.positive_mask.push(positive);
        self.provenance.push(source);
    }
}

/// Seeded generator for one product's random fill in one epoch.
pub fn candidate_rng(seed: u64, epoch: usize, product_id: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 40) ^ product_id as u64);
    rng
}

/// Assembles a fixed-size candidate list in priority order: positives
/// (ascending id), up to `in_batch_cap` in-batch negatives, hard negatives
/// from the top `hard_pool` search results, random library fill, and finally
/// repeats of existing negatives. Truncated to `cfg.size`.
pub fn build_candidate_set<R: Rng>(
    positives: &[usize],
    batch_positives: &[usize],
    bank: &TemplateBank,
    query: &[f64],
    cfg: &CandidateConfig,
    rng: &mut R,
) -> Result<CandidateSet> {
    if positives.is_empty() {
        return Err(Error::NoPositive);
    }
    if cfg.size == 0 {
        return Err(Error::InvalidParams("candidate set size must be positive".into()));
    }
    let n = bank.len();
    if let Some(&bad) = positives.iter().chain(batch_positives).find(|&&id| id >= n) {
        return Err(Error::ShapeMismatch(format!("template id {bad} outside bank of {n}")));
    }
    let c = cfg.size;
    let positive_set: HashSet<usize> = positives.iter().copied().collect();
    let mut sorted_pos: Vec<usize> = positive_set.iter().copied().collect();
    sorted_pos.sort_unstable();

    let mut set = CandidateSet {
        template_ids: Vec::with_capacity(c),
        positive_mask: Vec::with_capacity(c),
        provenance: Vec::with_capacity(c),
    };
    let mut selected: HashSet<usize> = HashSet::with_capacity(c);
    for &id in &sorted_pos {
        set.push(id, true, SlotSource::Positive);
        selected.insert(id);
    }

    let mut in_batch = 0;
    for &id in batch_positives {
        if in_batch == cfg.in_batch_cap || set.len() >= c {
            break;
        }
        if selected.insert(id) {
            set.push(id, false, SlotSource::InBatch);
            in_batch += 1;
        }
    }

    if set.len() < c && cfg.hard_pool > 0 {
        for id in knn_search(bank, query, cfg.hard_pool.min(n))? {
            if set.len() >= c {
                break;
            }
            if selected.insert(id) {
                set.push(id, false, SlotSource::Hard);
            }
        }
    }

    if set.len() < c {
        let mut eligible: Vec<usize> = (0..n).filter(|id| !selected.contains(id)).collect();
        let need = c - set.len();
        let (picked, _) = eligible.partial_shuffle(rng, need);
        for &id in picked.iter() {
            selected.insert(id);
            set.push(id, false, SlotSource::Random);
        }
    }

    if set.len() < c {
        let negatives: Vec<usize> = set
            .template_ids
            .iter()
            .zip(&set.positive_mask)
            .filter(|(_, &p)| !p)
            .map(|(&id, _)| id)
            .collect();
        let pool = if negatives.is_empty() {
            set.template_ids.clone()
        } else {
            negatives
        };
        while set.len() < c {
            let id = pool[rng.gen_range(0..pool.len())];
            set.push(id, positive_set.contains(&id), SlotSource::Replacement);
        }
    }

    set.template_ids.truncate(c);
    set.positive_mask.truncate(c);
    set.provenance.truncate(c);
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn axis_bank(n: usize) -> TemplateBank {
        let mut rows = vec![0.0; n * n];
        for i in 0..n {
            rows[i * n + i] = 1.0;
        }
        TemplateBank::from_rows(n, rows, BankSource::Live, 0).unwrap()
    }

    #[test]
    fn query_equal_to_row_ranks_first() {
        let bank = axis_bank(5);
        assert_eq!(knn_search(&bank, bank.row(3), 1).unwrap(), vec![3]);
    }

    #[test]
    fn full_k_is_permutation_with_id_ties() {
        let bank = axis_bank(4);
        let q = [0.0, 0.5, 0.0, 0.5];
        assert_eq!(knn_search(&bank, &q, 4).unwrap(), vec![1, 3, 0, 2]);
        assert!(matches!(knn_search(&bank, &q, 5), Err(Error::KOutOfRange { .. })));
        assert!(matches!(knn_search(&bank, &q, 0), Err(Error::KOutOfRange { .. })));
    }

    #[test]
    fn assembly_order_small_library() {
        // Query nearest to 1, then 2, then 3.
        let bank = axis_bank(4);
        let q = [0.0, 0.9, 0.5, 0.1];
        let cfg = CandidateConfig {
            size: 4,
            in_batch_cap: 8,
            hard_pool: 128,
        };
        let set = build_candidate_set(&[0], &[], &bank, &q, &cfg, &mut candidate_rng(0, 0, 0)).unwrap();
        assert_eq!(set.template_ids, vec![0, 1, 2, 3]);
        assert_eq!(set.positive_mask, vec![true, false, false, false]);
    }

    #[test]
    fn positives_beyond_capacity_keep_first_ids() {
        let bank = axis_bank(8);
        let cfg = CandidateConfig {
            size: 3,
            ..CandidateConfig::default()
        };
        let set = build_candidate_set(
            &[6, 2, 4, 0],
            &[1],
            &bank,
            bank.row(5),
            &cfg,
            &mut candidate_rng(0, 0, 0),
        )
        .unwrap();
        assert_eq!(set.template_ids, vec![0, 2, 4]);
        assert!(set.positive_mask.iter().all(|&p| p));
    }

    #[test]
    fn replacement_fallback() {
        let bank = axis_bank(2);
        let cfg = CandidateConfig {
            size: 4,
            ..CandidateConfig::default()
        };
        let set = build_candidate_set(&[0], &[], &bank, bank.row(0), &cfg, &mut candidate_rng(0, 0, 0)).unwrap();
        assert_eq!(set.template_ids, vec![0, 1, 1, 1]);
        assert_eq!(
            &set.provenance[2..],
            &[SlotSource::Replacement, SlotSource::Replacement]
        );
        assert_eq!(set.positive_mask, vec![true, false, false, false]);
    }

    #[test]
    fn in_batch_skips_positives_and_duplicates() {
        let bank = axis_bank(12);
        let cfg = CandidateConfig {
            size: 6,
            in_batch_cap: 2,
            hard_pool: 0,
        };
        let set = build_candidate_set(
            &[3],
            &[3, 5, 5, 7, 9],
            &bank,
            bank.row(0),
            &cfg,
            &mut candidate_rng(1, 0, 0),
        )
        .unwrap();
        assert_eq!(&set.template_ids[..3], &[3, 5, 7]);
        assert_eq!(&set.provenance[3..], &[SlotSource::Random; 3]);
    }

    #[test]
    fn no_positive() {
        let bank = axis_bank(3);
        let err = build_candidate_set(
            &[],
            &[],
            &bank,
            bank.row(0),
            &CandidateConfig::default(),
            &mut candidate_rng(0, 0, 0),
        );
        assert!(matches!(err, Err(Error::NoPositive)));
    }
}
