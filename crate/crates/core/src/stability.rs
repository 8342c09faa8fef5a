//! EMA bank drift: the per-epoch parameter drift bound, its closed-form
//! dominant term, and measurement of the actual drift from a recorded
//! training trace.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::encoder::{ops, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::objectives::softmax;
use crate::retrieval::{build_bank, BankSource, TemplateBank};
use crate::tokenizer::TokenSequence;
use crate::trainer::DriftTrace;

/// Softmax Lipschitz constant from score (∞-norm) to probability (1-norm).
pub const SOFTMAX_LIPSCHITZ: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftConstants {
    /// Largest single-step live update norm.
    pub eta_g: f64,
    pub l_s: f64,
    pub l_sm: f64,
    pub delta0: f64,
    pub alpha: f64,
    pub m: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftBound {
    pub bound: f64,
    /// `(m − (m+1)α + α^{m+1}) / (1−α) · ηG`.
    pub closed_form: f64,
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidAlpha(alpha))
    }
}

/// `(1−α) Σ_{j=1}^{m} α^{m−j} (j·ηG + Δ0)`.
pub fn ema_drift_bound(c: &DriftConstants) -> Result<DriftBound> {
    check_alpha(c.alpha)?;
    let a = c.alpha;
    let mut sum = 0.0;
    for j in 1..=c.m {
        sum += a.powi((c.m - j) as i32) * (j as f64 * c.eta_g + c.delta0);
    }
    let m = c.m as f64;
    let closed = (m - (m + 1.0) * a + a.powi(c.m as i32 + 1)) / (1.0 - a) * c.eta_g;
    Ok(DriftBound {
        bound: (1.0 - a) * sum,
        closed_form: closed,
    })
}

/// `α^m·θ̄⁰ + (1−α) Σ_j α^{m−j} θ^{(j)}` for `lives = [θ^{(1)}, …, θ^{(m)}]`.
pub fn ema_unroll(initial: &[f64], lives: &[Vec<f64>], alpha: f64) -> Result<Vec<f64>> {
    check_alpha(alpha)?;
    let m = lives.len();
    let mut out: Vec<f64> = initial.iter().map(|v| alpha.powi(m as i32) * v).collect();
    for (j, live) in lives.iter().enumerate() {
        if live.len() != initial.len() {
            return Err(Error::ShapeMismatch("trace entries differ in length".into()));
        }
        let w = (1.0 - alpha) * alpha.powi((m - 1 - j) as i32);
        for (o, v) in out.iter_mut().zip(live) {
            *o += w * v;
        }
    }
    Ok(out)
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochDrift {
    pub epoch: usize,
    pub constants: DriftConstants,
    pub bound: DriftBound,
    /// ‖θ̄_end − θ̄_start‖ from the replayed recursion.
    pub shadow_drift: f64,
    /// Max over probes of the L1 change in full-library retrieval
    /// distributions between the epoch-start and epoch-end banks.
    pub retrieval_l1: f64,
    /// `L_sm · L_s · bound`.
    pub retrieval_l1_bound: f64,
    pub within_bound: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub epochs: Vec<EpochDrift>,
    pub replayed_shadow: Vec<f64>,
}

pub struct DriftProbe<'a> {
    pub template_config: &'a EncoderConfig,
    pub templates: &'a [TokenSequence],
    /// Fixed query embeddings of the probe products.
    pub queries: &'a [Vec<f64>],
    pub temperature: f64,
    /// Random parameter perturbations per epoch for estimating `L_s`.
    pub perturbations: usize,
    pub seed: u64,
}

fn bank_for(cfg: &EncoderConfig, data: &[f64], templates: &[TokenSequence]) -> Result<TemplateBank> {
    let p = EncoderParams::from_data(cfg.clone(), data.to_vec())?;
    build_bank(&p, templates, BankSource::Ema, 0)
}

fn probe_scores(bank: &TemplateBank, queries: &[Vec<f64>], temp: f64) -> Vec<Vec<f64>> {
    queries
        .iter()
        .map(|q| bank.scores(q).into_iter().map(|s| s / temp).collect())
        .collect()
}

fn max_score_change(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.iter().zip(y).map(|(u, v)| (u - v).abs()))
        .fold(0.0, f64::max)
}

/// Replays the EMA over the trace and measures, per epoch, parameter drift
/// against the bound and retrieval-distribution drift over the probes.
/// `L_s` is the largest observed |Δscore|/‖Δθ‖ over random perturbations
/// and the actual epoch transition; the max over probes stands in for the
/// supremum over products.
pub fn measure_drift(trace: &DriftTrace, probe: &DriftProbe) -> Result<DriftReport> {
    check_alpha(trace.alpha)?;
    if trace.live.len() < 2 || trace.epoch_starts.is_empty() {
        return Err(Error::TraceTooShort {
            needed: 2,
            got: trace.live.len(),
        });
    }
    let alpha = trace.alpha;
    let mut shadow = trace.initial_shadow.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(probe.seed);
    let mut epochs = Vec::with_capacity(trace.epoch_starts.len());
    for (e, &start) in trace.epoch_starts.iter().enumerate() {
        let end = trace.epoch_starts.get(e + 1).copied().unwrap_or(trace.live.len() - 1);
        let shadow_start = shadow.clone();
        let mut eta_g: f64 = 0.0;
        for j in start + 1..=end {
            eta_g = eta_g.max(distance(&trace.live[j], &trace.live[j - 1]));
            for (s, &l) in shadow.iter_mut().zip(&trace.live[j]) {
                *s = alpha * *s + (1.0 - alpha) * l;
            }
        }
        let drift = distance(&shadow, &shadow_start);
        let delta0 = distance(&trace.live[start], &shadow_start);

        let bank_a = bank_for(probe.template_config, &shadow_start, probe.templates)?;
        let bank_b = bank_for(probe.template_config, &shadow, probe.templates)?;
        let sa = probe_scores(&bank_a, probe.queries, probe.temperature);
        let sb = probe_scores(&bank_b, probe.queries, probe.temperature);
        let retrieval_l1 = sa
            .iter()
            .zip(&sb)
            .map(|(x, y)| {
                softmax(x)
                    .iter()
                    .zip(softmax(y))
                    .map(|(p, q)| (p - q).abs())
                    .sum::<f64>()
            })
            .fold(0.0, f64::max);

        let mut l_s: f64 = if drift > 0.0 {
            max_score_change(&sa, &sb) / drift
        } else {
            0.0
        };
        let radius = if drift > 0.0 { drift } else { 1e-3 };
        for _ in 0..probe.perturbations {
            let dir: Vec<f64> = (0..shadow_start.len())
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            let norm = ops::norm(&dir);
            let moved: Vec<f64> = shadow_start
                .iter()
                .zip(&dir)
                .map(|(s, d)| s + radius * d / norm)
                .collect();
            let sp = probe_scores(
                &bank_for(probe.template_config, &moved, probe.templates)?,
                probe.queries,
                probe.temperature,
            );
            l_s = l_s.max(max_score_change(&sa, &sp) / radius);
        }

        let constants = DriftConstants {
            eta_g,
            l_s,
            l_sm: SOFTMAX_LIPSCHITZ,
            delta0,
            alpha,
            m: end - start,
        };
        let bound = ema_drift_bound(&constants)?;
        let retrieval_l1_bound = constants.l_sm * constants.l_s * bound.bound;
        epochs.push(EpochDrift {
            epoch: e,
            constants,
            bound,
            shadow_drift: drift,
            retrieval_l1,
            retrieval_l1_bound,
            within_bound: drift <= bound.bound * (1.0 + 1e-12) + 1e-15
                && retrieval_l1 <= retrieval_l1_bound * (1.0 + 1e-12) + 1e-15,
        });
    }
    Ok(DriftReport {
        epochs,
        replayed_shadow: shadow,
    })
}

/// Shadow lag behind a live parameter moving by a constant `g` per step,
/// after `steps` updates from a shadow equal to the start; returns the
/// measured lag and the steady-state prediction `α/(1−α)·‖g‖`.
pub fn steady_state_lag(alpha: f64, g: &[f64], steps: usize) -> Result<(f64, f64)> {
    check_alpha(alpha)?;
    let mut live = vec![0.0; g.len()];
    let mut shadow = vec![0.0; g.len()];
    for _ in 0..steps {
        for (l, d) in live.iter_mut().zip(g) {
            *l += d;
        }
        for (s, &l) in shadow.iter_mut().zip(&live) {
            *s = alpha * *s + (1.0 - alpha) * l;
        }
    }
    Ok((distance(&live, &shadow), alpha / (1.0 - alpha) * ops::norm(g)))
}

const TRACE_MAGIC: &[u8; 8] = b"RRTRACE\0";

/// Writes a trace as little-endian f64: magic, alpha, counts, epoch
/// starts, the initial shadow and every live parameter vector.
pub fn trace_to_bytes(t: &DriftTrace) -> Vec<u8> {
    let dim = t.initial_shadow.len();
    let mut out = Vec::with_capacity(40 + 8 * (t.epoch_starts.len() + dim * (t.live.len() + 1)));
    out.extend_from_slice(TRACE_MAGIC);
    out.extend_from_slice(&t.alpha.to_le_bytes());
    for n in [dim, t.live.len(), t.epoch_starts.len()] {
        out.extend_from_slice(&(n as u64).to_le_bytes());
    }
    for &e in &t.epoch_starts {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for v in t.initial_shadow.iter().chain(t.live.iter().flatten()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn trace_from_bytes(bytes: &[u8]) -> Result<DriftTrace> {
    let bad = || Error::Checkpoint("malformed drift trace".into());
    let word = |i: usize| -> Result<[u8; 8]> {
        bytes
            .get(i * 8..i * 8 + 8)
            .map(|s| s.try_into().expect("8 bytes"))
            .ok_or_else(bad)
    };
    if &word(0)? != TRACE_MAGIC {
        return Err(bad());
    }
    let alpha = f64::from_le_bytes(word(1)?);
    let dim = u64::from_le_bytes(word(2)?) as usize;
    let n_live = u64::from_le_bytes(word(3)?) as usize;
    let n_epochs = u64::from_le_bytes(word(4)?) as usize;
    let expected = dim
        .checked_mul(n_live + 1)
        .and_then(|v| v.checked_add(5 + n_epochs))
        .ok_or_else(bad)?;
    if bytes.len() != expected * 8 {
        return Err(bad());
    }
    let epoch_starts = (0..n_epochs)
        .map(|i| Ok(u64::from_le_bytes(word(5 + i)?) as usize))
        .collect::<Result<Vec<_>>>()?;
    let base = 5 + n_epochs;
    let vector = |k: usize| -> Result<Vec<f64>> {
        (0..dim)
            .map(|i| Ok(f64::from_le_bytes(word(base + k * dim + i)?)))
            .collect()
    };
    Ok(DriftTrace {
        alpha,
        initial_shadow: vector(0)?,
        live: (1..=n_live).map(vector).collect::<Result<_>>()?,
        epoch_starts,
    })
}
