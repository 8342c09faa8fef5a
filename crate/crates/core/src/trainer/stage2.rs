//! Unified Stage 2 training: listwise ranking over retrieved candidate sets
//! with frozen, EMA, snapshot+KLD, alternating and one-optimizer variants.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::flags::{FreezeState, Stage2Flags};
use super::optim::{clip_global_norm, ema_update, warmup_cosine_lr, OptimizerState};
use super::{mix, DualEncoder, EpochMetrics, Stage2Data, TrainConfig};
use crate::encoder::{ops, EncoderParams, ForwardCache, Trainable};
use crate::error::{Error, Result};
use crate::objectives::{kld_loss, smoothed_targets, stage2_loss};
use crate::retrieval::{build_bank, build_candidate_set, candidate_rng, CandidateSet, TemplateBank};

/// Dropout seed for a product in one step.
pub fn product_dropout_seed(seed: u64, step: usize, product_id: usize) -> u64 {
    mix(&[seed, 0xA1, step as u64, product_id as u64])
}

/// Dropout seed for a template in one step. Keyed by template id, so every
/// occurrence of a template within a step sees the same mask.
pub fn template_dropout_seed(seed: u64, step: usize, template_id: usize) -> u64 {
    mix(&[seed, 0xA2, step as u64, template_id as u64])
}

pub struct StepInputs<'a> {
    pub data: &'a Stage2Data,
    pub product_ids: &'a [usize],
    pub bank: &'a TemplateBank,
    /// Teacher bank for the KLD term; `None` disables it.
    pub teacher: Option<&'a TemplateBank>,
    /// Eval-mode live template embeddings, used when the template tower is
    /// frozen for this step.
    pub frozen_templates: Option<&'a [Vec<f64>]>,
    pub epoch: usize,
    pub step: usize,
    pub product_trainable: bool,
    pub template_trainable: bool,
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    /// Mean per-product objective (unscaled).
    pub loss: f64,
    pub rank_loss: f64,
    pub kld_loss: f64,
    /// Gradients of `loss / accum_steps`; empty for a frozen tower.
    pub grad_product: Vec<f64>,
    pub grad_template: Vec<f64>,
    pub candidates: Vec<CandidateSet>,
    pub unique_templates: Vec<usize>,
    pub template_forwards: usize,
}

/// Candidate sets for a batch. Each product's in-batch pool is the other
/// products' positives in batch order.
pub fn batch_candidates(
    data: &Stage2Data,
    product_ids: &[usize],
    query: &[Vec<f64>],
    bank: &TemplateBank,
    cfg: &TrainConfig,
) -> Result<Vec<CandidateSet>> {
    product_ids
        .iter()
        .zip(query)
        .enumerate()
        .map(|(i, (&pid, z))| {
            let others: Vec<usize> = product_ids
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .flat_map(|(_, &q)| data.products[q].positives.iter().copied())
                .collect();
            let mut rng = candidate_rng(cfg.seed, bank.epoch, pid);
            build_candidate_set(
                &data.products[pid].positives,
                &others,
                bank,
                z,
                &cfg.candidates,
                &mut rng,
            )
        })
        .collect()
}

/// One accumulation micro-step: the B×C candidate ids are deduplicated, each
/// unique template is encoded once, and scores are gathered back through
/// inverse indices.
pub fn train_step_stage2(towers: &DualEncoder, inputs: &StepInputs, cfg: &TrainConfig) -> Result<StepOutput> {
    if inputs.bank.epoch != inputs.epoch {
        return Err(Error::StaleBank {
            bank: inputs.bank.epoch,
            current: inputs.epoch,
        });
    }
    if !inputs.template_trainable && inputs.frozen_templates.is_none() {
        return Err(Error::InvalidParams(
            "frozen template tower needs cached embeddings".into(),
        ));
    }
    let data = inputs.data;
    let b = inputs.product_ids.len();
    if b == 0 {
        return Err(Error::EmptyCorpus);
    }
    let d = towers.product.config().hidden_dim;
    let temp = cfg.temperature;
    if temp <= 0.0 {
        return Err(Error::NonPositiveTemperature(temp));
    }

    let mut p_caches: Vec<ForwardCache> = Vec::with_capacity(b);
    for &pid in inputs.product_ids {
        let seed = inputs
            .product_trainable
            .then(|| product_dropout_seed(cfg.seed, inputs.step, pid));
        p_caches.push(towers.product.forward(&data.products[pid].tokens, seed)?);
    }
    let queries: Vec<Vec<f64>> = p_caches.iter().map(|c| c.embedding().to_vec()).collect();
    let candidates = batch_candidates(data, inputs.product_ids, &queries, inputs.bank, cfg)?;

    // Unique ids in ascending order; `inverse[i][j]` indexes into them.
    let mut unique: Vec<usize> = candidates.iter().flat_map(|c| c.template_ids.iter().copied()).collect();
    unique.sort_unstable();
    unique.dedup();
    let position: BTreeMap<usize, usize> = unique.iter().enumerate().map(|(u, &id)| (id, u)).collect();
    let inverse: Vec<Vec<usize>> = candidates
        .iter()
        .map(|c| c.template_ids.iter().map(|id| position[id]).collect())
        .collect();

    let mut t_caches: Vec<ForwardCache> = Vec::new();
    let t_emb: Vec<Vec<f64>> = if inputs.template_trainable {
        for &id in &unique {
            let seed = template_dropout_seed(cfg.seed, inputs.step, id);
            t_caches.push(towers.template.forward(&data.templates[id], Some(seed))?);
        }
        t_caches.iter().map(|c| c.embedding().to_vec()).collect()
    } else {
        let frozen = inputs.frozen_templates.expect("checked above");
        unique.iter().map(|&id| frozen[id].clone()).collect()
    };

    let scale = 1.0 / (b as f64 * cfg.accum_steps as f64);
    let mut dzt = vec![vec![0.0; d]; unique.len()];
    let mut grad_product = if inputs.product_trainable {
        towers.product.zeros_like()
    } else {
        Vec::new()
    };
    let (mut rank_sum, mut kld_sum) = (0.0, 0.0);

    let chunk = cfg.micro_batch.max(1);
    for start in (0..b).step_by(chunk) {
        for i in start..(start + chunk).min(b) {
            let zp = &queries[i];
            let scores: Vec<f64> = inverse[i].iter().map(|&u| ops::dot(zp, &t_emb[u]) / temp).collect();
            let targets = smoothed_targets(&candidates[i].positive_mask, cfg.label_smoothing)?;
            let rank = stage2_loss(&scores, &targets, cfg.entropy_weight)?;
            rank_sum += rank.loss;
            let mut ds = rank.grad;
            if let Some(teacher) = inputs.teacher {
                let t_scores: Vec<f64> = candidates[i]
                    .template_ids
                    .iter()
                    .map(|&id| ops::dot(zp, teacher.row(id)) / temp)
                    .collect();
                let kl = kld_loss(&t_scores, &scores)?;
                kld_sum += kl.loss;
                for (g, k) in ds.iter_mut().zip(&kl.grad) {
                    *g += cfg.kld_weight * k;
                }
            }
            let mut dzp = vec![0.0; d];
            for (j, &u) in inverse[i].iter().enumerate() {
                let g = ds[j] * scale / temp;
                for k in 0..d {
                    dzp[k] += g * t_emb[u][k];
                    dzt[u][k] += g * zp[k];
                }
            }
            if inputs.product_trainable {
                towers.product.backward(&p_caches[i], &dzp, &mut grad_product)?;
            }
        }
    }

    let mut grad_template = Vec::new();
    if inputs.template_trainable {
        grad_template = towers.template.zeros_like();
        for (cache, g) in t_caches.iter().zip(&dzt) {
            towers.template.backward(cache, g, &mut grad_template)?;
        }
    }
    let rank_loss = rank_sum / b as f64;
    let kld = kld_sum / b as f64;
    Ok(StepOutput {
        loss: rank_loss + cfg.kld_weight * kld,
        rank_loss,
        kld_loss: kld,
        grad_product,
        grad_template,
        candidates,
        template_forwards: t_caches.len(),
        unique_templates: unique,
    })
}

/// Live template parameters after every template update, for offline EMA
/// replay. `live[0]` is the starting point; `epoch_starts[e]` indexes the
/// live parameters in force when epoch `e` began.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftTrace {
    pub alpha: f64,
    pub initial_shadow: Vec<f64>,
    pub live: Vec<Vec<f64>>,
    pub epoch_starts: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Stage2Outcome {
    pub towers: DualEncoder,
    pub shadow: Option<EncoderParams>,
    /// Bank re-encoded from the teacher parameters after the final epoch.
    pub bank: TemplateBank,
    pub metrics: Vec<EpochMetrics>,
    pub trace: Option<DriftTrace>,
    pub freeze_pattern: Vec<FreezeState>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Stage2Options {
    pub record_trace: bool,
}

fn template_policy(flags: &Stage2Flags) -> Trainable {
    if flags.frozen_template {
        Trainable::Frozen
    } else {
        match flags.trainable_top_layers {
            Some(k) => Trainable::TopLayers(k),
            None => Trainable::All,
        }
    }
}

fn masked(grads: &mut [f64], mask: &[bool]) {
    for (g, &m) in grads.iter_mut().zip(mask) {
        if !m {
            *g = 0.0;
        }
    }
}

/// Eval-mode encodings, reused while the parameters are unchanged.
struct EncodingCache {
    params: Vec<f64>,
    rows: Vec<Vec<f64>>,
}

impl EncodingCache {
    fn get<'a>(slot: &'a mut Option<Self>, params: &EncoderParams, data: &Stage2Data) -> Result<&'a [Vec<f64>]> {
        let stale = slot.as_ref().is_none_or(|c| c.params != params.data);
        if stale {
            *slot = Some(Self {
                params: params.data.clone(),
                rows: params.embed_all(&data.templates)?,
            });
        }
        Ok(&slot.as_ref().expect("filled").rows)
    }
}

pub fn run_stage2(
    data: &Stage2Data,
    init: &DualEncoder,
    flags: &Stage2Flags,
    cfg: &TrainConfig,
    options: Stage2Options,
) -> Result<Stage2Outcome> {
    flags.validate()?;
    cfg.validate()?;
    let mut towers = init.clone();
    let policy = template_policy(flags);
    let p_mask = towers.product.trainable_mask(Trainable::All);
    let t_mask = towers.template.trainable_mask(policy);
    let mut opt_p = OptimizerState::new(cfg.adam, p_mask.clone());
    let mut opt_t = OptimizerState::new(cfg.adam, t_mask.clone());
    let mut shadow = flags.ema.then(|| towers.template.clone());
    let mut snapshot = flags.snapshot.then(|| towers.template.clone());
    let source = flags.bank_source();

    let batches_per_epoch = data.products.len().div_ceil(cfg.batch_size);
    let steps_per_epoch = batches_per_epoch.div_ceil(cfg.accum_steps);
    let total_steps = steps_per_epoch * cfg.epochs;
    let warmup = cfg.warmup_steps.min(total_steps);
    let template_lr = |step: usize| -> Result<f64> {
        if flags.one_optimizer {
            warmup_cosine_lr(step, warmup, total_steps, cfg.lr_product)
        } else {
            Ok(cfg.lr_template)
        }
    };

    let mut trace = (options.record_trace && flags.ema).then(|| DriftTrace {
        alpha: flags.alpha,
        initial_shadow: towers.template.data.clone(),
        live: vec![towers.template.data.clone()],
        epoch_starts: Vec::new(),
    });

    let mut bank: Option<TemplateBank> = None;
    let mut bank_params: Vec<f64> = Vec::new();
    let mut frozen_cache: Option<EncodingCache> = None;
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut freeze_pattern = Vec::with_capacity(cfg.epochs);
    let mut prev_state: Option<FreezeState> = None;
    let mut global_batch = 0usize;
    let mut global_step = 0usize;
    let mut order: Vec<usize> = (0..data.products.len()).collect();

    for epoch in 0..cfg.epochs {
        let state = flags.freeze_state(epoch);
        freeze_pattern.push(state);
        if flags.alternating && state.template_trainable() && prev_state.is_some_and(|p| !p.template_trainable()) {
            opt_t.reset(None);
        }
        prev_state = Some(state);
        if let Some(s) = snapshot.as_mut() {
            s.data.clone_from(&towers.template.data);
        }
        if let Some(t) = trace.as_mut() {
            t.epoch_starts.push(t.live.len() - 1);
        }

        // Bank refresh at the start of the epoch, from the teacher.
        let teacher: &EncoderParams = shadow.as_ref().or(snapshot.as_ref()).unwrap_or(&towers.template);
        let refresh = flags.refreshes_at(epoch);
        let mut refreshed = false;
        match bank.as_mut() {
            Some(b) if !refresh || bank_params == teacher.data => b.restamp(epoch),
            _ => {
                bank = Some(build_bank(teacher, &data.templates, source, epoch)?);
                bank_params.clone_from(&teacher.data);
                refreshed = true;
            }
        }
        let bank_ref = bank.as_ref().expect("bank built");

        let mut rng = ChaCha8Rng::seed_from_u64(mix(&[cfg.seed, 0x52, epoch as u64]));
        order.shuffle(&mut rng);

        let (mut loss_sum, mut rank_sum, mut kld_sum) = (0.0, 0.0, 0.0);
        let mut forwards = 0;
        let (mut lr_p, mut lr_t) = (0.0, 0.0);
        let mut acc_p = towers.product.zeros_like();
        let mut acc_t = towers.template.zeros_like();
        let mut pending = 0;
        let n_batches = batches_per_epoch;
        for (bi, ids) in order.chunks(cfg.batch_size).enumerate() {
            let frozen = if state.template_trainable() {
                None
            } else {
                Some(EncodingCache::get(&mut frozen_cache, &towers.template, data)?)
            };
            let inputs = StepInputs {
                data,
                product_ids: ids,
                bank: bank_ref,
                teacher: flags.kld.then_some(bank_ref),
                frozen_templates: frozen,
                epoch,
                step: global_batch,
                product_trainable: state.product_trainable(),
                template_trainable: state.template_trainable(),
            };
            let out = train_step_stage2(&towers, &inputs, cfg)?;
            global_batch += 1;
            loss_sum += out.loss;
            rank_sum += out.rank_loss;
            kld_sum += out.kld_loss;
            forwards += out.template_forwards;
            if state.product_trainable() {
                acc_p.iter_mut().zip(&out.grad_product).for_each(|(a, g)| *a += g);
            }
            if state.template_trainable() {
                acc_t.iter_mut().zip(&out.grad_template).for_each(|(a, g)| *a += g);
            }
            pending += 1;
            if pending < cfg.accum_steps && bi + 1 < n_batches {
                continue;
            }
            pending = 0;
            global_step += 1;
            masked(&mut acc_p, &p_mask);
            masked(&mut acc_t, &t_mask);
            clip_global_norm(&mut [&mut acc_p, &mut acc_t], cfg.clip_norm);
            if state.product_trainable() {
                lr_p = warmup_cosine_lr(global_step, warmup, total_steps, cfg.lr_product)?;
                opt_p.step(&mut towers.product.data, &acc_p, lr_p)?;
            }
            if state.template_trainable() {
                lr_t = template_lr(global_step)?;
                opt_t.step(&mut towers.template.data, &acc_t, lr_t)?;
                if let Some(s) = shadow.as_mut() {
                    ema_update(&mut s.data, &towers.template.data, flags.alpha)?;
                }
                if let Some(t) = trace.as_mut() {
                    t.live.push(towers.template.data.clone());
                }
            }
            acc_p.iter_mut().for_each(|v| *v = 0.0);
            acc_t.iter_mut().for_each(|v| *v = 0.0);
        }
        let nb = n_batches as f64;
        metrics.push(EpochMetrics {
            stage: 2,
            epoch,
            loss: loss_sum / nb,
            rank_loss: rank_sum / nb,
            kld_loss: kld_sum / nb,
            lr_product: lr_p,
            lr_template: lr_t,
            bank_source: Some(source.to_string()),
            bank_refreshed: refreshed,
            freeze_state: Some(state),
            optimizer_steps: global_step,
            template_forwards: forwards,
        });
    }

    let teacher: &EncoderParams = shadow.as_ref().unwrap_or(&towers.template);
    let final_bank = build_bank(teacher, &data.templates, source, cfg.epochs)?;
    Ok(Stage2Outcome {
        towers,
        shadow,
        bank: final_bank,
        metrics,
        trace,
        freeze_pattern,
    })
}
