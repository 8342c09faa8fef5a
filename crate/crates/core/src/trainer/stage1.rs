//! Symmetric in-batch contrastive pretraining of both towers.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::optim::{clip_global_norm, warmup_cosine_lr, OptimizerState};
use super::{mix, DualEncoder, EpochMetrics, Stage1Data, TrainConfig};
use crate::encoder::{ops, Trainable};
use crate::error::{Error, Result};
use crate::objectives::{stage1_loss, ScoreMatrix};
use crate::tokenizer::TokenSequence;

#[derive(Debug, Clone)]
pub struct Stage1Step {
    pub loss: f64,
    pub grad_product: Vec<f64>,
    pub grad_template: Vec<f64>,
}

/// Loss and gradients for one batch of (product, template id) pairs.
/// Repeated templates share one forward. `dropout_base = None` runs in
/// eval mode.
pub fn stage1_step(
    towers: &DualEncoder,
    batch: &[(TokenSequence, usize)],
    templates: &[TokenSequence],
    temperature: f64,
    dropout_base: Option<u64>,
) -> Result<Stage1Step> {
    if temperature <= 0.0 {
        return Err(Error::NonPositiveTemperature(temperature));
    }
    let b = batch.len();
    let d = towers.product.config().hidden_dim;
    let mut p_caches = Vec::with_capacity(b);
    for (i, (seq, _)) in batch.iter().enumerate() {
        p_caches.push(
            towers
                .product
                .forward(seq, dropout_base.map(|s| mix(&[s, 0, i as u64])))?,
        );
    }
    let mut t_caches = BTreeMap::new();
    for &(_, t) in batch {
        if let std::collections::btree_map::Entry::Vacant(slot) = t_caches.entry(t) {
            let seq = templates
                .get(t)
                .ok_or_else(|| Error::ShapeMismatch(format!("template id {t} outside library")))?;
            slot.insert(
                towers
                    .template
                    .forward(seq, dropout_base.map(|s| mix(&[s, 1, t as u64])))?,
            );
        }
    }
    let mut values = Vec::with_capacity(b * b);
    for pc in &p_caches {
        for &(_, t) in batch {
            values.push(ops::dot(pc.embedding(), t_caches[&t].embedding()) / temperature);
        }
    }
    let lg = stage1_loss(&ScoreMatrix::new(b, b, values)?)?;

    let mut grad_product = towers.product.zeros_like();
    let mut dzt: BTreeMap<usize, Vec<f64>> = t_caches.keys().map(|&t| (t, vec![0.0; d])).collect();
    for (i, pc) in p_caches.iter().enumerate() {
        let mut dzp = vec![0.0; d];
        for (j, &(_, t)) in batch.iter().enumerate() {
            let g = lg.grad[i * b + j] / temperature;
            if g == 0.0 {
                continue;
            }
            let zt = t_caches[&t].embedding();
            let acc = dzt.get_mut(&t).expect("template cached");
            for k in 0..d {
                dzp[k] += g * zt[k];
                acc[k] += g * pc.embedding()[k];
            }
        }
        towers.product.backward(pc, &dzp, &mut grad_product)?;
    }
    let mut grad_template = towers.template.zeros_like();
    for (t, cache) in &t_caches {
        towers.template.backward(cache, &dzt[t], &mut grad_template)?;
    }
    Ok(Stage1Step {
        loss: lg.loss,
        grad_product,
        grad_template,
    })
}

/// Eval-mode loss over the whole pair set as one batch.
pub fn stage1_eval_loss(towers: &DualEncoder, data: &Stage1Data, temperature: f64) -> Result<f64> {
    let zp: Vec<Vec<f64>> = data
        .pairs
        .iter()
        .map(|(s, _)| towers.product.embed(s))
        .collect::<Result<_>>()?;
    let mut zt: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for &(_, t) in &data.pairs {
        if !zt.contains_key(&t) {
            zt.insert(t, towers.template.embed(&data.templates[t])?);
        }
    }
    let b = zp.len();
    let mut values = Vec::with_capacity(b * b);
    for p in &zp {
        for &(_, t) in &data.pairs {
            values.push(ops::dot(p, &zt[&t]) / temperature);
        }
    }
    Ok(stage1_loss(&ScoreMatrix::new(b, b, values)?)?.loss)
}

#[derive(Debug, Clone)]
pub struct Stage1Outcome {
    pub towers: DualEncoder,
    pub metrics: Vec<EpochMetrics>,
}

pub fn run_stage1(data: &Stage1Data, init: DualEncoder, cfg: &TrainConfig) -> Result<Stage1Outcome> {
    cfg.validate()?;
    if data.pairs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut towers = init;
    let mut opt_p = OptimizerState::new(cfg.adam, towers.product.trainable_mask(Trainable::All));
    let mut opt_t = OptimizerState::new(cfg.adam, towers.template.trainable_mask(Trainable::All));
    let steps_per_epoch = data.pairs.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut global_step = 0;
    let mut order: Vec<usize> = (0..data.pairs.len()).collect();
    let mut metrics = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(&[cfg.seed, 0x51, epoch as u64]));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let (mut lr_p, mut lr_t) = (0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(TokenSequence, usize)> = chunk.iter().map(|&i| data.pairs[i].clone()).collect();
            let dropout = mix(&[cfg.seed, 0xD1, global_step as u64]);
            let mut step = stage1_step(&towers, &batch, &data.templates, cfg.temperature, Some(dropout))?;
            loss_sum += step.loss;
            clip_global_norm(&mut [&mut step.grad_product, &mut step.grad_template], cfg.clip_norm);
            global_step += 1;
            let warmup = cfg.warmup_steps.min(total_steps);
            lr_p = warmup_cosine_lr(global_step, warmup, total_steps, cfg.lr_product)?;
            lr_t = warmup_cosine_lr(global_step, warmup, total_steps, cfg.lr_template)?;
            opt_p.step(&mut towers.product.data, &step.grad_product, lr_p)?;
            opt_t.step(&mut towers.template.data, &step.grad_template, lr_t)?;
        }
        metrics.push(EpochMetrics {
            stage: 1,
            epoch,
            loss: loss_sum / steps_per_epoch as f64,
            rank_loss: loss_sum / steps_per_epoch as f64,
            kld_loss: 0.0,
            lr_product: lr_p,
            lr_template: lr_t,
            bank_source: None,
            bank_refreshed: false,
            freeze_state: None,
            optimizer_steps: global_step,
            template_forwards: 0,
        });
    }
    Ok(Stage1Outcome { towers, metrics })
}
