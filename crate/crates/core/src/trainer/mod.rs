//! Stage 1 contrastive pretraining and the unified Stage 2 loop.

pub mod flags;
pub mod optim;
pub mod stage1;
pub mod stage2;

use serde::{Deserialize, Serialize};

use crate::curation::{group_by_product, ReactionRecord, Split};
use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::library::TemplateLibrary;
use crate::retrieval::CandidateConfig;
use crate::tokenizer::{TokenSequence, Vocabulary};

pub use flags::{FreezeState, RefreshPeriod, Stage2Flags, Variant};
pub use optim::{clip_global_norm, ema_update, global_norm, warmup_cosine_lr, AdamWConfig, OptimizerState};
pub use stage1::{run_stage1, stage1_eval_loss, stage1_step, Stage1Outcome, Stage1Step};
pub use stage2::{
    batch_candidates, product_dropout_seed, run_stage2, template_dropout_seed, train_step_stage2, DriftTrace,
    Stage2Options, Stage2Outcome, StepInputs, StepOutput,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub micro_batch: usize,
    pub accum_steps: usize,
    pub lr_product: f64,
    pub lr_template: f64,
    pub warmup_steps: usize,
    pub epochs: usize,
    pub temperature: f64,
    pub label_smoothing: f64,
    pub entropy_weight: f64,
    pub kld_weight: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub adam: AdamWConfig,
    pub candidates: CandidateConfig,
}

impl Default for TrainConfig {
    /// Published Stage 2 settings.
    fn default() -> Self {
        Self {
            batch_size: 64,
            micro_batch: 16,
            accum_steps: 4,
            lr_product: 1e-4,
            lr_template: 1e-5,
            warmup_steps: 500,
            epochs: 20,
            temperature: 0.07,
            label_smoothing: 0.02,
            entropy_weight: 0.001,
            kld_weight: 0.1,
            clip_norm: 1.0,
            seed: 0,
            adam: AdamWConfig::default(),
            candidates: CandidateConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Small-corpus settings that learn within a few CPU minutes.
    pub fn desk() -> Self {
        Self {
            batch_size: 32,
            micro_batch: 8,
            accum_steps: 1,
            lr_product: 1e-3,
            lr_template: 1e-4,
            warmup_steps: 20,
            epochs: 10,
            candidates: CandidateConfig {
                size: 32,
                in_batch_cap: 8,
                hard_pool: 64,
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 || self.micro_batch == 0 || self.accum_steps == 0 {
            return bad("batch_size, micro_batch and accum_steps must be positive".into());
        }
        if self.batch_size % self.micro_batch != 0 {
            return bad(format!(
                "batch_size {} is not a multiple of micro_batch {}",
                self.batch_size, self.micro_batch
            ));
        }
        for (name, v) in [
            ("lr_product", self.lr_product),
            ("lr_template", self.lr_template),
            ("temperature", self.temperature),
            ("clip_norm", self.clip_norm),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!("label_smoothing {} outside [0,1)", self.label_smoothing));
        }
        if self.entropy_weight < 0.0 || self.kld_weight < 0.0 {
            return bad("entropy_weight and kld_weight must be non-negative".into());
        }
        if self.candidates.size == 0 {
            return bad("candidate set size must be positive".into());
        }
        Ok(())
    }
}

/// Product (query) and template towers.
#[derive(Debug, Clone)]
pub struct DualEncoder {
    pub product: EncoderParams,
    pub template: EncoderParams,
}

impl DualEncoder {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            product: EncoderParams::new(config.clone(), mix(&[seed, 1]))?,
            template: EncoderParams::new(config, mix(&[seed, 2]))?,
        })
    }
}

/// SplitMix64 folded over `parts`; used to derive dropout and shuffle seeds.
pub fn mix(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h ^= p;
        h = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

pub fn tokenize_library(library: &TemplateLibrary, vocab: &Vocabulary, max_len: usize) -> Result<Vec<TokenSequence>> {
    library.raws().iter().map(|r| vocab.encode(r, max_len)).collect()
}

/// Stage 1 pairs: one per training record.
#[derive(Debug, Clone)]
pub struct Stage1Data {
    pub pairs: Vec<(TokenSequence, usize)>,
    pub templates: Vec<TokenSequence>,
}

impl Stage1Data {
    pub fn build(
        records: &[ReactionRecord],
        library: &TemplateLibrary,
        vocab: &Vocabulary,
        max_len: usize,
    ) -> Result<Self> {
        let templates = tokenize_library(library, vocab, max_len)?;
        let pairs = records
            .iter()
            .filter(|r| r.split == Split::Train)
            .map(|r| Ok((vocab.encode(&r.product, max_len)?, r.template_id)))
            .collect::<Result<Vec<_>>>()?;
        if pairs.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        Ok(Self { pairs, templates })
    }
}

#[derive(Debug, Clone)]
pub struct ProductExample {
    pub product: String,
    pub tokens: TokenSequence,
    pub positives: Vec<usize>,
}

/// Stage 2 examples: one per distinct training product with all its
/// observed templates.
#[derive(Debug, Clone)]
pub struct Stage2Data {
    pub products: Vec<ProductExample>,
    pub templates: Vec<TokenSequence>,
}

impl Stage2Data {
    pub fn build(
        records: &[ReactionRecord],
        library: &TemplateLibrary,
        vocab: &Vocabulary,
        max_len: usize,
    ) -> Result<Self> {
        let templates = tokenize_library(library, vocab, max_len)?;
        let train: Vec<ReactionRecord> = records.iter().filter(|r| r.split == Split::Train).cloned().collect();
        let products = group_by_product(&train)
            .into_iter()
            .map(|g| {
                Ok(ProductExample {
                    tokens: vocab.encode(&g.product, max_len)?,
                    product: g.product,
                    positives: g.positives,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if products.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        Ok(Self { products, templates })
    }
}

/// One line of the per-epoch metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub stage: u8,
    pub epoch: usize,
    pub loss: f64,
    pub rank_loss: f64,
    pub kld_loss: f64,
    pub lr_product: f64,
    pub lr_template: f64,
    pub bank_source: Option<String>,
    pub bank_refreshed: bool,
    pub freeze_state: Option<FreezeState>,
    pub optimizer_steps: usize,
    pub template_forwards: usize,
}

pub fn metrics_to_jsonl(metrics: &[EpochMetrics]) -> Result<String> {
    let mut out = String::new();
    for m in metrics {
        out.push_str(&serde_json::to_string(m)?);
        out.push('\n');
    }
    Ok(out)
}
