//! Training objectives: symmetric in-batch contrastive loss, smoothed
//! multi-positive listwise loss with an entropy bonus, and teacher KL.
//!
//! Every loss returns its gradient with respect to the input scores.
//! Temperature is already folded into the scores.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl ScoreMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::LengthMismatch {
                expected: rows * cols,
                actual: values.len(),
            });
        }
        Ok(Self { rows, cols, values })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetDistribution {
    pub probs: Vec<f64>,
    pub positive_mask: Vec<bool>,
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn log_softmax(xs: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(xs);
    xs.iter().map(|x| x - lse).collect()
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    log_softmax(xs).into_iter().map(f64::exp).collect()
}

/// Symmetric in-batch contrastive loss over a B×B score matrix whose
/// diagonal holds the matched pairs.
pub fn stage1_loss(s: &ScoreMatrix) -> Result<LossGrad> {
    if s.rows != s.cols || s.rows == 0 {
        return Err(Error::NonSquare {
            rows: s.rows,
            cols: s.cols,
        });
    }
    let b = s.rows;
    let scale = 0.5 / b as f64;
    let mut grad = vec![0.0; b * b];
    let mut row_term = 0.0;
    for i in 0..b {
        let row = &s.values[i * b..(i + 1) * b];
        let lp = log_softmax(row);
        row_term -= lp[i];
        for j in 0..b {
            grad[i * b + j] += scale * lp[j].exp();
        }
        grad[i * b + i] -= scale;
    }
    let mut col_term = 0.0;
    let mut col = vec![0.0; b];
    for j in 0..b {
        for i in 0..b {
            col[i] = s.get(i, j);
        }
        let lp = log_softmax(&col);
        col_term -= lp[j];
        for i in 0..b {
            grad[i * b + j] += scale * lp[i].exp();
        }
        grad[j * b + j] -= scale;
    }
    Ok(LossGrad {
        loss: scale * (row_term + col_term),
        grad,
    })
}

/// Positives get `(1-ε)/m + ε/C`, negatives `ε/C`.
pub fn smoothed_targets(positive_mask: &[bool], epsilon: f64) -> Result<TargetDistribution> {
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::InvalidParams(format!("label smoothing {epsilon} outside [0,1)")));
    }
    let m = positive_mask.iter().filter(|&&p| p).count();
    if m == 0 {
        return Err(Error::NoPositive);
    }
    let c = positive_mask.len() as f64;
    let base = epsilon / c;
    let pos = (1.0 - epsilon) / m as f64 + base;
    Ok(TargetDistribution {
        probs: positive_mask.iter().map(|&p| if p { pos } else { base }).collect(),
        positive_mask: positive_mask.to_vec(),
    })
}

/// Cross-entropy of the candidate softmax against `targets`, minus `beta`
/// times the policy entropy.
pub fn stage2_loss(scores: &[f64], targets: &TargetDistribution, beta: f64) -> Result<LossGrad> {
    if scores.len() != targets.probs.len() {
        return Err(Error::LengthMismatch {
            expected: targets.probs.len(),
            actual: scores.len(),
        });
    }
    if beta < 0.0 {
        return Err(Error::InvalidParams(format!("entropy weight {beta} is negative")));
    }
    let lp = log_softmax(scores);
    let pi: Vec<f64> = lp.iter().map(|v| v.exp()).collect();
    let ce: f64 = -targets.probs.iter().zip(&lp).map(|(y, l)| y * l).sum::<f64>();
    // Entropy terms with pi = 0 contribute nothing.
    let entropy: f64 = -pi
        .iter()
        .zip(&lp)
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, l)| p * l)
        .sum::<f64>();
    let target_mass: f64 = targets.probs.iter().sum();
    let grad = pi
        .iter()
        .zip(&lp)
        .zip(&targets.probs)
        .map(|((&p, &l), &y)| {
            let ent = if p > 0.0 { beta * p * (l + entropy) } else { 0.0 };
            p * target_mass - y + ent
        })
        .collect();
    Ok(LossGrad {
        loss: ce - beta * entropy,
        grad,
    })
}

/// `KL(softmax(teacher) ‖ softmax(student))`; the gradient is with respect
/// to the student scores only.
pub fn kld_loss(teacher_scores: &[f64], student_scores: &[f64]) -> Result<LossGrad> {
    if teacher_scores.len() != student_scores.len() {
        return Err(Error::LengthMismatch {
            expected: teacher_scores.len(),
            actual: student_scores.len(),
        });
    }
    let lt = log_softmax(teacher_scores);
    let ls = log_softmax(student_scores);
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(lt.len());
    for (&a, &b) in lt.iter().zip(&ls) {
        let pt = a.exp();
        if pt > 0.0 {
            loss += pt * (a - b);
        }
        grad.push(b.exp() - pt);
    }
    Ok(LossGrad {
        loss: loss.max(0.0),
        grad,
    })
}
