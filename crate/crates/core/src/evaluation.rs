//! Template rankings to deduplicated reactant-set rankings, and the
//! retrieval/reaction metrics computed from them.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::curation::ReactionRecord;
use crate::encoder::{ops, EncoderParams};
use crate::error::{Error, Result};
use crate::library::TemplateLibrary;
use crate::reaction_engine::{canonicalize, ReactantSetKey, ReactionEngine};
use crate::retrieval::{knn_search_scored, TemplateBank};
use crate::tokenizer::Vocabulary;

pub const DEFAULT_K_LIST: [usize; 5] = [1, 3, 5, 10, 20];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub retrieval_pool: usize,
    pub rerank_pool: usize,
    pub apply_top: usize,
    pub max_outcomes_per_template: usize,
    pub k_list: Vec<usize>,
}

impl EvalConfig {
    /// Wide window: pool 4096, rerank 2048, apply 50, 4 outcomes.
    pub fn e3() -> Self {
        Self {
            retrieval_pool: 4096,
            rerank_pool: 2048,
            apply_top: 50,
            max_outcomes_per_template: 4,
            k_list: DEFAULT_K_LIST.to_vec(),
        }
    }

    /// Narrow window: pool 256, rerank 128, apply 50, 4 outcomes.
    pub fn f3() -> Self {
        Self {
            retrieval_pool: 256,
            rerank_pool: 128,
            ..Self::e3()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "e3" => Ok(Self::e3()),
            "f3" => Ok(Self::f3()),
            other => Err(Error::Config(format!("unknown eval preset `{other}` (expected e3|f3)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.retrieval_pool >= self.rerank_pool && self.rerank_pool >= self.apply_top && self.apply_top >= 1) {
            return Err(Error::Config(format!(
                "need retrieval_pool ≥ rerank_pool ≥ apply_top ≥ 1, got {} / {} / {}",
                self.retrieval_pool, self.rerank_pool, self.apply_top
            )));
        }
        if self.max_outcomes_per_template == 0 || self.k_list.is_empty() || self.k_list.contains(&0) {
            return Err(Error::Config("max outcomes and every k must be positive".into()));
        }
        Ok(())
    }

    /// Window sizes capped at the library size.
    pub fn clipped(&self, library_size: usize) -> Self {
        let n = library_size.max(1);
        Self {
            retrieval_pool: self.retrieval_pool.min(n),
            rerank_pool: self.rerank_pool.min(n),
            apply_top: self.apply_top.min(n),
            ..self.clone()
        }
    }

    pub fn max_k(&self) -> usize {
        self.k_list.iter().copied().max().unwrap_or(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedPrediction {
    pub reactant_key: ReactantSetKey,
    pub score: f64,
    pub best_template_id: usize,
    pub best_template_rank: usize,
    pub outcome_index: usize,
}

/// What one retrieved template produced for a product.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SlotOutcome {
    pub applicable: bool,
    /// Canonical keys in outcome order, duplicates removed.
    pub keys: Vec<ReactantSetKey>,
}

/// Applies one template; parse failures, multi-input templates, engine
/// errors and empty matches all count as non-applicable.
pub fn apply_slot(
    library: &TemplateLibrary,
    template_id: usize,
    product: &str,
    engine: &dyn ReactionEngine,
    max_outcomes: usize,
) -> SlotOutcome {
    let Some(t) = library.template(template_id) else {
        return SlotOutcome::default();
    };
    let Ok(outcomes) = engine.apply(t, product, max_outcomes) else {
        return SlotOutcome::default();
    };
    let mut keys: Vec<ReactantSetKey> = Vec::new();
    for o in outcomes {
        if let Ok(k) = canonicalize(&o) {
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
    }
    SlotOutcome {
        applicable: !keys.is_empty(),
        keys,
    }
}

fn prediction_order(a: &RankedPrediction, b: &RankedPrediction) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.best_template_rank.cmp(&b.best_template_rank))
        .then(a.outcome_index.cmp(&b.outcome_index))
        .then(a.reactant_key.cmp(&b.reactant_key))
}

/// Applies the top `apply_top` retrieved templates and merges identical
/// canonical reactant sets, keeping the best score.
pub fn rank_reactants(
    product: &str,
    retrieved: &[(usize, f64)],
    library: &TemplateLibrary,
    engine: &dyn ReactionEngine,
    cfg: &EvalConfig,
) -> Vec<RankedPrediction> {
    let slots: Vec<SlotOutcome> = retrieved
        .iter()
        .take(cfg.apply_top)
        .map(|&(t, _)| apply_slot(library, t, product, engine, cfg.max_outcomes_per_template))
        .collect();
    merge_predictions(retrieved, &slots)
}

fn merge_predictions(retrieved: &[(usize, f64)], slots: &[SlotOutcome]) -> Vec<RankedPrediction> {
    let mut best: HashMap<ReactantSetKey, RankedPrediction> = HashMap::new();
    for (rank, (slot, &(tid, score))) in slots.iter().zip(retrieved).enumerate() {
        for (oi, key) in slot.keys.iter().enumerate() {
            let cand = RankedPrediction {
                reactant_key: key.clone(),
                score,
                best_template_id: tid,
                best_template_rank: rank,
                outcome_index: oi,
            };
            match best.get(key) {
                Some(cur) if prediction_order(cur, &cand).is_le() => {}
                _ => {
                    best.insert(key.clone(), cand);
                }
            }
        }
    }
    let mut out: Vec<RankedPrediction> = best.into_values().collect();
    out.sort_by(prediction_order);
    out
}

fn pct(hits: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * hits as f64 / total as f64
    }
}

/// Percentage of rows whose truth key is in the first k predictions.
pub fn reaction_topk(
    predictions: &[Vec<RankedPrediction>],
    truths: &[ReactantSetKey],
    k_list: &[usize],
) -> BTreeMap<usize, f64> {
    k_list
        .iter()
        .map(|&k| {
            let hits = predictions
                .iter()
                .zip(truths)
                .filter(|(p, t)| p.iter().take(k).any(|r| &r.reactant_key == *t))
                .count();
            (k, pct(hits, truths.len()))
        })
        .collect()
}

/// Percentage of rows with an observed positive in the top-k retrieved.
pub fn template_retrieval_topk(
    retrieved: &[Vec<usize>],
    positives: &[BTreeSet<usize>],
    k_list: &[usize],
) -> BTreeMap<usize, f64> {
    k_list
        .iter()
        .map(|&k| {
            let hits = retrieved
                .iter()
                .zip(positives)
                .filter(|(r, p)| r.iter().take(k).any(|id| p.contains(id)))
                .count();
            (k, pct(hits, positives.len()))
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TemplateDiagnostics {
    pub app_rate: BTreeMap<usize, f64>,
    pub unique_rs: BTreeMap<usize, f64>,
    pub yield_cov: BTreeMap<usize, f64>,
    pub yield_rate: BTreeMap<usize, f64>,
}

/// Slot-level AppRate/YieldRate over exactly k slots per row (missing
/// slots are non-applicable); row-level UniqueRS/YieldCov.
pub fn template_diagnostics(
    slots: &[Vec<SlotOutcome>],
    truths: &[ReactantSetKey],
    k_list: &[usize],
) -> TemplateDiagnostics {
    let rows = truths.len();
    let mut diag = TemplateDiagnostics::default();
    for &k in k_list {
        let (mut applicable, mut yielding, mut covered) = (0usize, 0usize, 0usize);
        let mut unique_total = 0usize;
        for (row, truth) in slots.iter().zip(truths) {
            let top = &row[..k.min(row.len())];
            applicable += top.iter().filter(|s| s.applicable).count();
            let y = top.iter().filter(|s| s.keys.contains(truth)).count();
            yielding += y;
            covered += usize::from(y > 0);
            let distinct: BTreeSet<&ReactantSetKey> = top.iter().flat_map(|s| s.keys.iter()).collect();
            unique_total += distinct.len();
        }
        diag.app_rate.insert(k, pct(applicable, k * rows));
        diag.yield_rate.insert(k, pct(yielding, k * rows));
        diag.yield_cov.insert(k, pct(covered, rows));
        diag.unique_rs.insert(
            k,
            if rows == 0 {
                0.0
            } else {
                unique_total as f64 / rows as f64
            },
        );
    }
    diag
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bucket {
    Head,
    Tail,
    Unseen,
}

impl Bucket {
    pub fn of(frequency: usize) -> Self {
        match frequency {
            0 => Bucket::Unseen,
            1..=5 => Bucket::Tail,
            _ => Bucket::Head,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketResult {
    pub rows: usize,
    pub template_topk: BTreeMap<usize, f64>,
}

/// Template top-k per frequency bucket of each row's recorded template.
pub fn bucket_eval(
    ranked_ids: &[Vec<usize>],
    truth_templates: &[usize],
    frequencies: &[usize],
    k_list: &[usize],
) -> BTreeMap<Bucket, BucketResult> {
    let mut rows: BTreeMap<Bucket, Vec<usize>> = BTreeMap::new();
    for (i, &t) in truth_templates.iter().enumerate() {
        let f = frequencies.get(t).copied().unwrap_or(0);
        rows.entry(Bucket::of(f)).or_default().push(i);
    }
    [Bucket::Head, Bucket::Tail, Bucket::Unseen]
        .into_iter()
        .map(|b| {
            let idx = rows.remove(&b).unwrap_or_default();
            let topk = k_list
                .iter()
                .map(|&k| {
                    let hits = idx
                        .iter()
                        .filter(|&&i| ranked_ids[i].iter().take(k).any(|&t| t == truth_templates[i]))
                        .count();
                    (k, pct(hits, idx.len()))
                })
                .collect();
            (
                b,
                BucketResult {
                    rows: idx.len(),
                    template_topk: topk,
                },
            )
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuccessTaxonomy {
    pub primary: usize,
    pub secondary: usize,
    pub failed: usize,
}

pub fn success_taxonomy(
    top1: &[Option<&RankedPrediction>],
    positives: &[BTreeSet<usize>],
    truths: &[ReactantSetKey],
) -> SuccessTaxonomy {
    let mut tax = SuccessTaxonomy::default();
    for ((p, pos), truth) in top1.iter().zip(positives).zip(truths) {
        match p {
            Some(p) if &p.reactant_key == truth => {
                if pos.contains(&p.best_template_id) {
                    tax.primary += 1;
                } else {
                    tax.secondary += 1;
                }
            }
            _ => tax.failed += 1,
        }
    }
    tax
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: EvalConfig,
    pub rows: usize,
    pub products: usize,
    pub empty_prediction_rows: usize,
    pub reaction_topk: BTreeMap<usize, f64>,
    pub template_retrieval_topk: BTreeMap<usize, f64>,
    pub app_rate: BTreeMap<usize, f64>,
    pub unique_rs: BTreeMap<usize, f64>,
    pub yield_cov: BTreeMap<usize, f64>,
    pub yield_rate: BTreeMap<usize, f64>,
    pub buckets: BTreeMap<Bucket, BucketResult>,
    pub taxonomy: SuccessTaxonomy,
    /// Closed-vocabulary baseline on the same rows, when evaluated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classifier_buckets: Option<BTreeMap<Bucket, BucketResult>>,
}

impl EvalReport {
    /// Fixed-width table: reaction accuracy and template retrieval per k.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let ks = &self.config.k_list;
        let _ = write!(s, "{:<12}", "metric");
        for k in ks {
            let _ = write!(s, "{:>9}", format!("@{k}"));
        }
        s.push('\n');
        let rows: [(&str, &BTreeMap<usize, f64>); 6] = [
            ("Reaction", &self.reaction_topk),
            ("TRetr", &self.template_retrieval_topk),
            ("AppRate", &self.app_rate),
            ("UniqueRS", &self.unique_rs),
            ("YieldCov", &self.yield_cov),
            ("YieldRate", &self.yield_rate),
        ];
        for (name, map) in rows {
            let _ = write!(s, "{name:<12}");
            for k in ks {
                let _ = write!(s, "{:>9.2}", map.get(k).copied().unwrap_or(0.0));
            }
            s.push('\n');
        }
        for (b, r) in &self.buckets {
            let _ = write!(s, "{:<12}", format!("{b:?}({})", r.rows));
            for k in ks {
                let _ = write!(s, "{:>9.2}", r.template_topk.get(k).copied().unwrap_or(0.0));
            }
            s.push('\n');
        }
        if let Some(cb) = &self.classifier_buckets {
            for (b, r) in cb {
                let _ = write!(s, "{:<12}", format!("Clf{b:?}"));
                for k in ks {
                    let _ = write!(s, "{:>9.2}", r.template_topk.get(k).copied().unwrap_or(0.0));
                }
                s.push('\n');
            }
        }
        let t = &self.taxonomy;
        let _ = writeln!(
            s,
            "top-1 primary {} secondary {} failed {}",
            t.primary, t.secondary, t.failed
        );
        s
    }
}

/// Coarse pool from the bank, then rescored with the live template
/// embeddings over the first `rerank_pool` entries. Sorted by score
/// descending, ties by ascending id.
pub fn retrieve(
    query: &[f64],
    bank: &TemplateBank,
    live_templates: &[Vec<f64>],
    temperature: f64,
    cfg: &EvalConfig,
) -> Result<Vec<(usize, f64)>> {
    if temperature <= 0.0 {
        return Err(Error::NonPositiveTemperature(temperature));
    }
    let cfg = cfg.clipped(bank.len());
    let pool = knn_search_scored(bank, query, cfg.retrieval_pool)?;
    let mut rescored: Vec<(usize, f64)> = pool
        .into_iter()
        .take(cfg.rerank_pool)
        .map(|(id, _)| (id, ops::dot(query, &live_templates[id]) / temperature))
        .collect();
    rescored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(rescored)
}

/// Everything needed to score a held-out split.
pub struct EvalModel<'a> {
    pub product: &'a EncoderParams,
    pub template: &'a EncoderParams,
    pub bank: &'a TemplateBank,
    pub vocab: &'a Vocabulary,
    pub temperature: f64,
}

/// Per-row artifacts kept alongside the report.
#[derive(Debug, Clone)]
pub struct RowTrace {
    pub retrieved: Vec<usize>,
    pub predictions: Vec<RankedPrediction>,
}

pub fn evaluate(
    model: &EvalModel,
    library: &TemplateLibrary,
    rows: &[ReactionRecord],
    engine: &dyn ReactionEngine,
    cfg: &EvalConfig,
) -> Result<(EvalReport, Vec<RowTrace>)> {
    cfg.validate()?;
    let max_len = model.product.config().max_len;
    let templates: Vec<_> = library
        .raws()
        .iter()
        .map(|r| model.vocab.encode(r, max_len))
        .collect::<Result<_>>()?;
    let live = model.template.embed_all(&templates)?;

    let mut positives_by_product: HashMap<&str, BTreeSet<usize>> = HashMap::new();
    for r in rows {
        positives_by_product
            .entry(r.product.as_str())
            .or_default()
            .insert(r.template_id);
    }

    struct ProductRun {
        retrieved: Vec<(usize, f64)>,
        slots: Vec<SlotOutcome>,
        predictions: Vec<RankedPrediction>,
    }
    let n_slots = cfg.apply_top.max(cfg.max_k());
    let mut runs: HashMap<&str, ProductRun> = HashMap::new();
    for r in rows {
        if runs.contains_key(r.product.as_str()) {
            continue;
        }
        let query = model.product.embed(&model.vocab.encode(&r.product, max_len)?)?;
        let retrieved = retrieve(&query, model.bank, &live, model.temperature, cfg)?;
        let slots: Vec<SlotOutcome> = retrieved
            .iter()
            .take(n_slots)
            .map(|&(t, _)| apply_slot(library, t, &r.product, engine, cfg.max_outcomes_per_template))
            .collect();
        let apply = cfg.apply_top.min(slots.len());
        let predictions = merge_predictions(&retrieved, &slots[..apply]);
        runs.insert(
            r.product.as_str(),
            ProductRun {
                retrieved,
                slots,
                predictions,
            },
        );
    }

    let mut truths = Vec::with_capacity(rows.len());
    let mut preds = Vec::with_capacity(rows.len());
    let mut ranked = Vec::with_capacity(rows.len());
    let mut positives = Vec::with_capacity(rows.len());
    let mut slot_rows = Vec::with_capacity(rows.len());
    for r in rows {
        let run = &runs[r.product.as_str()];
        // Uncanonicalizable truth can never be matched.
        truths.push(
            canonicalize(&r.reactants).unwrap_or_else(|_| canonicalize(&["\u{0}"]).expect("non-empty placeholder")),
        );
        preds.push(run.predictions.clone());
        ranked.push(run.retrieved.iter().map(|&(t, _)| t).collect::<Vec<_>>());
        positives.push(positives_by_product[r.product.as_str()].clone());
        slot_rows.push(run.slots.clone());
    }
    let k_list = &cfg.k_list;
    let diag = template_diagnostics(&slot_rows, &truths, k_list);
    let truth_templates: Vec<usize> = rows.iter().map(|r| r.template_id).collect();
    let top1: Vec<Option<&RankedPrediction>> = preds.iter().map(|p| p.first()).collect();
    let report = EvalReport {
        config: cfg.clipped(library.len()),
        rows: rows.len(),
        products: runs.len(),
        empty_prediction_rows: preds.iter().filter(|p| p.is_empty()).count(),
        reaction_topk: reaction_topk(&preds, &truths, k_list),
        template_retrieval_topk: template_retrieval_topk(&ranked, &positives, k_list),
        app_rate: diag.app_rate,
        unique_rs: diag.unique_rs,
        yield_cov: diag.yield_cov,
        yield_rate: diag.yield_rate,
        buckets: bucket_eval(&ranked, &truth_templates, library.frequencies(), k_list),
        taxonomy: success_taxonomy(&top1, &positives, &truths),
        classifier_buckets: None,
    };
    let traces = ranked
        .into_iter()
        .zip(preds)
        .map(|(retrieved, predictions)| RowTrace { retrieved, predictions })
        .collect();
    Ok((report, traces))
}
