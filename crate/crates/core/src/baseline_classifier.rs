//! Closed-vocabulary linear head over frozen product embeddings. Only
//! templates seen in training have a class, so unseen templates can never
//! be predicted.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::curation::ReactionRecord;
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::evaluation::{bucket_eval, Bucket, BucketResult};
use crate::objectives::{log_softmax, softmax};
use crate::tokenizer::Vocabulary;
use crate::trainer::{AdamWConfig, OptimizerState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr: 1e-2,
            weight_decay: 1e-2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    dim: usize,
    /// Template id of each class, ascending.
    classes: Vec<usize>,
    /// `V × d` weights followed by `V` biases.
    params: Vec<f64>,
}

impl ClassifierHead {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn class_of(&self, template_id: usize) -> Option<usize> {
        self.classes.binary_search(&template_id).ok()
    }

    pub fn logits(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.dim {
            return Err(Error::ShapeMismatch(format!(
                "embedding of length {} for a head over d={}",
                z.len(),
                self.dim
            )));
        }
        let v = self.classes.len();
        let (w, b) = self.params.split_at(v * self.dim);
        Ok((0..v)
            .map(|c| {
                b[c] + w[c * self.dim..(c + 1) * self.dim]
                    .iter()
                    .zip(z)
                    .map(|(a, x)| a * x)
                    .sum::<f64>()
            })
            .collect())
    }

    pub fn probabilities(&self, z: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits(z)?))
    }

    /// Top-k template ids by logit; ties go to the lower class id.
    pub fn classify_topk(&self, z: &[f64], k: usize) -> Result<Vec<usize>> {
        let v = self.classes.len();
        if k == 0 || k > v {
            return Err(Error::KOutOfRange { k, n: v });
        }
        let logits = self.logits(z)?;
        let mut order: Vec<usize> = (0..v).collect();
        order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
        Ok(order.into_iter().take(k).map(|c| self.classes[c]).collect())
    }
}

/// Cross-entropy training of a fresh head on fixed embeddings.
pub fn train_classifier(embeddings: &[Vec<f64>], labels: &[usize], cfg: &ClassifierConfig) -> Result<ClassifierHead> {
    if embeddings.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if embeddings.len() != labels.len() {
        return Err(Error::LengthMismatch {
            expected: embeddings.len(),
            actual: labels.len(),
        });
    }
    let dim = embeddings[0].len();
    let mut classes = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let v = classes.len();
    let mut head = ClassifierHead {
        dim,
        classes,
        params: vec![0.0; v * dim + v],
    };
    let targets: Vec<usize> = labels
        .iter()
        .map(|&t| head.class_of(t).expect("label has a class"))
        .collect();
    let adam = AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    };
    let mut opt = OptimizerState::new(adam, vec![true; head.params.len()]);
    let mut order: Vec<usize> = (0..embeddings.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let batch = cfg.batch_size.max(1);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let mut grad = vec![0.0; head.params.len()];
            let scale = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let z = &embeddings[i];
                let lp = log_softmax(&head.logits(z)?);
                for c in 0..v {
                    let g = (lp[c].exp() - f64::from(u8::from(c == targets[i]))) * scale;
                    for (gw, x) in grad[c * dim..(c + 1) * dim].iter_mut().zip(z) {
                        *gw += g * x;
                    }
                    grad[v * dim + c] += g;
                }
            }
            opt.step(&mut head.params, &grad, cfg.lr)?;
        }
    }
    Ok(head)
}

/// Trains a head on `train` rows embedded by the frozen `product` tower and
/// scores `rows` per frequency bucket.
pub fn classifier_buckets(
    product: &EncoderParams,
    vocab: &Vocabulary,
    train: &[ReactionRecord],
    rows: &[ReactionRecord],
    frequencies: &[usize],
    k_list: &[usize],
    cfg: &ClassifierConfig,
) -> Result<BTreeMap<Bucket, BucketResult>> {
    let max_len = product.config().max_len;
    let embed = |r: &ReactionRecord| product.embed(&vocab.encode(&r.product, max_len)?);
    let xs: Vec<Vec<f64>> = train.iter().map(embed).collect::<Result<_>>()?;
    let labels: Vec<usize> = train.iter().map(|r| r.template_id).collect();
    let head = train_classifier(&xs, &labels, cfg)?;
    let k = k_list.iter().copied().max().unwrap_or(1).min(head.num_classes());
    let ranked: Vec<Vec<usize>> = rows
        .iter()
        .map(|r| head.classify_topk(&embed(r)?, k))
        .collect::<Result<_>>()?;
    let truth: Vec<usize> = rows.iter().map(|r| r.template_id).collect();
    Ok(bucket_eval(&ranked, &truth, frequencies, k_list))
}
