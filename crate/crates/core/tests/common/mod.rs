#![allow(dead_code)]

use retrorank::curation::{generate_corpus, GeneratorConfig, ReactionRecord};
use retrorank::encoder::{ops, EncoderConfig};
use retrorank::library::TemplateLibrary;
use retrorank::objectives::{kld_loss, smoothed_targets, stage2_loss};
use retrorank::reaction_engine::RewriteEngine;
use retrorank::retrieval::TemplateBank;
use retrorank::tokenizer::{build_vocab, Vocabulary};
use retrorank::trainer::{
    batch_candidates, product_dropout_seed, template_dropout_seed, DualEncoder, Stage2Data, TrainConfig,
};

pub struct Fixture {
    pub records: Vec<ReactionRecord>,
    pub library: TemplateLibrary,
    pub vocab: Vocabulary,
}

pub fn corpus(n_templates: usize, n_reactions: usize, seed: u64) -> Fixture {
    let cfg = GeneratorConfig {
        n_templates,
        n_reactions,
        seed,
        ..GeneratorConfig::default()
    };
    let (records, library) = generate_corpus(&cfg, &RewriteEngine).unwrap();
    let vocab = build_vocab(
        records
            .iter()
            .map(|r| r.product.as_str())
            .chain(library.raws().iter().map(String::as_str)),
    )
    .unwrap();
    Fixture {
        records,
        library,
        vocab,
    }
}

pub fn tiny_encoder(vocab_size: usize, layers: usize) -> EncoderConfig {
    EncoderConfig {
        vocab_size,
        hidden_dim: 16,
        layers,
        heads: 2,
        ff_dim: 32,
        max_len: 48,
        dropout: 0.1,
    }
}

pub struct Naive {
    pub loss: f64,
    pub grad_product: Vec<f64>,
    pub grad_template: Vec<f64>,
    pub template_forwards: usize,
}

/// Reference Stage 2 step without deduplication: every candidate slot runs
/// its own template forward and backward.
pub fn naive_step(
    towers: &DualEncoder,
    data: &Stage2Data,
    ids: &[usize],
    bank: &TemplateBank,
    teacher: Option<&TemplateBank>,
    step: usize,
    cfg: &TrainConfig,
) -> Naive {
    let d = towers.product.config().hidden_dim;
    let temp = cfg.temperature;
    let b = ids.len();
    let scale = 1.0 / (b as f64 * cfg.accum_steps as f64);
    let p_caches: Vec<_> = ids
        .iter()
        .map(|&pid| {
            towers
                .product
                .forward(
                    &data.products[pid].tokens,
                    Some(product_dropout_seed(cfg.seed, step, pid)),
                )
                .unwrap()
        })
        .collect();
    let queries: Vec<Vec<f64>> = p_caches.iter().map(|c| c.embedding().to_vec()).collect();
    let sets = batch_candidates(data, ids, &queries, bank, cfg).unwrap();
    let mut gp = towers.product.zeros_like();
    let mut gt = towers.template.zeros_like();
    let mut total = 0.0;
    let mut forwards = 0;
    for i in 0..b {
        let zp = &queries[i];
        let caches: Vec<_> = sets[i]
            .template_ids
            .iter()
            .map(|&t| {
                forwards += 1;
                towers
                    .template
                    .forward(&data.templates[t], Some(template_dropout_seed(cfg.seed, step, t)))
                    .unwrap()
            })
            .collect();
        let scores: Vec<f64> = caches.iter().map(|c| ops::dot(zp, c.embedding()) / temp).collect();
        let targets = smoothed_targets(&sets[i].positive_mask, cfg.label_smoothing).unwrap();
        let rank = stage2_loss(&scores, &targets, cfg.entropy_weight).unwrap();
        let mut loss = rank.loss;
        let mut ds = rank.grad;
        if let Some(teacher) = teacher {
            let ts: Vec<f64> = sets[i]
                .template_ids
                .iter()
                .map(|&t| ops::dot(zp, teacher.row(t)) / temp)
                .collect();
            let kl = kld_loss(&ts, &scores).unwrap();
            loss += cfg.kld_weight * kl.loss;
            for (g, k) in ds.iter_mut().zip(&kl.grad) {
                *g += cfg.kld_weight * k;
            }
        }
        total += loss;
        let mut dzp = vec![0.0; d];
        for (j, c) in caches.iter().enumerate() {
            let g = ds[j] * scale / temp;
            let dzt: Vec<f64> = zp.iter().map(|v| g * v).collect();
            for k in 0..d {
                dzp[k] += g * c.embedding()[k];
            }
            towers.template.backward(c, &dzt, &mut gt).unwrap();
        }
        towers.product.backward(&p_caches[i], &dzp, &mut gp).unwrap();
    }
    Naive {
        loss: total / b as f64,
        grad_product: gp,
        grad_template: gt,
        template_forwards: forwards,
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
