//! Pre-norm transformer encoder tower with hand-written reverse-mode passes.
//!
//! All parameters of one tower live in a single flat `Vec<f64>`; a
//! [`Layout`] maps names to offsets so optimizers, EMA and checkpointing can
//! treat a tower as one vector. The sequence embedding is the final-norm
//! hidden state at the BOS position, L2-normalized.

pub mod ops;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tokenizer::TokenSequence;
use ops::{gelu, gelu_grad, layer_norm, layer_norm_backward, linear, linear_backward, softmax_in_place};

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl EncoderConfig {
    /// Small tower used for desk-scale runs and tests.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            hidden_dim: 32,
            layers: 2,
            heads: 4,
            ff_dim: 64,
            max_len: 64,
            dropout: 0.1,
        }
    }

    /// Full-size tower (d=256, 6 layers, 8 heads, ff=1024, 384 positions).
    pub fn full(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            hidden_dim: 256,
            layers: 6,
            heads: 8,
            ff_dim: 1024,
            max_len: 384,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.vocab_size,
            self.hidden_dim,
            self.layers,
            self.heads,
            self.ff_dim,
            self.max_len,
        ];
        if dims.iter().any(|&v| v == 0) {
            return Err(Error::InvalidParams(format!(
                "encoder dimensions must be positive: {self:?}"
            )));
        }
        if self.hidden_dim % self.heads != 0 {
            return Err(Error::InvalidParams(format!(
                "hidden_dim {} is not divisible by heads {}",
                self.hidden_dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidParams(format!("dropout {} outside [0,1)", self.dropout)));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        Layout::new(self).total
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.heads
    }

    /// Stable text form; hashed into checkpoint headers.
    pub fn canonical_text(&self) -> String {
        format!(
            "vocab_size={};hidden_dim={};layers={};heads={};ff_dim={};max_len={};dropout={}",
            self.vocab_size, self.hidden_dim, self.layers, self.heads, self.ff_dim, self.max_len, self.dropout
        )
    }

    pub fn digest(&self) -> [u8; 8] {
        let hash = Sha256::digest(self.canonical_text().as_bytes());
        let mut out = [0u8; 8];
        out.copy_from_slice(&hash[..8]);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    TokenEmbedding,
    PositionEmbedding,
    Layer(usize),
    FinalNorm,
}

#[derive(Debug, Clone)]
pub struct ParamSlot {
    pub name: String,
    pub group: ParamGroup,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl ParamSlot {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerOffsets {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

/// Name → offset map for one tower.
#[derive(Debug, Clone)]
pub struct Layout {
    pub slots: Vec<ParamSlot>,
    pub total: usize,
    tok: usize,
    pos: usize,
    layers: Vec<LayerOffsets>,
    lnf_g: usize,
    lnf_b: usize,
}

impl Layout {
    pub fn new(c: &EncoderConfig) -> Self {
        let d = c.hidden_dim;
        let mut slots = Vec::new();
        let mut total = 0;
        let mut push = |name: String, group: ParamGroup, shape: Vec<usize>| -> usize {
            let offset = total;
            total += shape.iter().product::<usize>();
            slots.push(ParamSlot {
                name,
                group,
                offset,
                shape,
            });
            offset
        };
        let tok = push("tok_emb".into(), ParamGroup::TokenEmbedding, vec![c.vocab_size, d]);
        let pos = push("pos_emb".into(), ParamGroup::PositionEmbedding, vec![c.max_len, d]);
        let mut layers = Vec::with_capacity(c.layers);
        for l in 0..c.layers {
            let g = ParamGroup::Layer(l);
            let p = |s: &str| format!("layers.{l}.{s}");
            layers.push(LayerOffsets {
                ln1_g: push(p("ln1.gamma"), g, vec![d]),
                ln1_b: push(p("ln1.beta"), g, vec![d]),
                wq: push(p("attn.wq"), g, vec![d, d]),
                bq: push(p("attn.bq"), g, vec![d]),
                wk: push(p("attn.wk"), g, vec![d, d]),
                bk: push(p("attn.bk"), g, vec![d]),
                wv: push(p("attn.wv"), g, vec![d, d]),
                bv: push(p("attn.bv"), g, vec![d]),
                wo: push(p("attn.wo"), g, vec![d, d]),
                bo: push(p("attn.bo"), g, vec![d]),
                ln2_g: push(p("ln2.gamma"), g, vec![d]),
                ln2_b: push(p("ln2.beta"), g, vec![d]),
                w1: push(p("ff.w1"), g, vec![d, c.ff_dim]),
                b1: push(p("ff.b1"), g, vec![c.ff_dim]),
                w2: push(p("ff.w2"), g, vec![c.ff_dim, d]),
                b2: push(p("ff.b2"), g, vec![d]),
            });
        }
        let lnf_g = push("final_norm.gamma".into(), ParamGroup::FinalNorm, vec![d]);
        let lnf_b = push("final_norm.beta".into(), ParamGroup::FinalNorm, vec![d]);
        Self {
            slots,
            total,
            tok,
            pos,
            layers,
            lnf_g,
            lnf_b,
        }
    }
}

/// Which parts of a tower an optimizer may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    All,
    /// The top `k` transformer layers plus the final norm.
    TopLayers(usize),
    Frozen,
}

#[derive(Debug, Clone)]
pub struct EncoderParams {
    config: EncoderConfig,
    layout: Layout,
    pub data: Vec<f64>,
}

/// Everything the backward pass needs from one forward.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    tokens: Vec<u32>,
    drop_emb: Vec<f64>,
    layers: Vec<LayerCache>,
    final_ln: ops::LayerNormCache,
    pooled_norm: f64,
    embedding: Vec<f64>,
}

#[derive(Debug, Clone)]
struct LayerCache {
    n: usize,
    qn: usize,
    ln1: ops::LayerNormCache,
    ln1_out: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<f64>,
    ctx: Vec<f64>,
    drop_attn: Vec<f64>,
    ln2: ops::LayerNormCache,
    ln2_out: Vec<f64>,
    f1: Vec<f64>,
    act: Vec<f64>,
    drop_ff: Vec<f64>,
}

impl ForwardCache {
    pub fn embedding(&self) -> &[f64] {
        &self.embedding
    }
}

fn dropout_mask(rng: Option<&mut ChaCha8Rng>, len: usize, rate: f64) -> Vec<f64> {
    match rng {
        Some(rng) if rate > 0.0 => {
            let keep = 1.0 / (1.0 - rate);
            (0..len)
                .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
                .collect()
        }
        _ => Vec::new(),
    }
}

fn apply_mask(x: &mut [f64], mask: &[f64]) {
    if !mask.is_empty() {
        for (v, m) in x.iter_mut().zip(mask) {
            *v *= m;
        }
    }
}

impl EncoderParams {
    /// Truncated-normal (σ=0.02, cut at 2σ) embeddings and weights, zero
    /// biases, unit norm gains.
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = vec![0.0; layout.total];
        for slot in &layout.slots {
            let leaf = slot.name.rsplit('.').next().unwrap_or(&slot.name);
            let fill = if leaf == "gamma" {
                Some(1.0)
            } else if leaf == "beta" || leaf.starts_with('b') {
                Some(0.0)
            } else {
                None
            };
            for v in &mut data[slot.range()] {
                *v = match fill {
                    Some(c) => c,
                    None => loop {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        if z.abs() <= 2.0 {
                            break z * INIT_STD;
                        }
                    },
                };
            }
        }
        Ok(Self { config, layout, data })
    }

    pub fn from_data(config: EncoderConfig, data: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if data.len() != layout.total {
            return Err(Error::ShapeMismatch(format!(
                "expected {} parameters, got {}",
                layout.total,
                data.len()
            )));
        }
        Ok(Self { config, layout, data })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn zeros_like(&self) -> Vec<f64> {
        vec![0.0; self.data.len()]
    }

    /// Per-element mask of parameters an optimizer may update.
    pub fn trainable_mask(&self, policy: Trainable) -> Vec<bool> {
        let layers = self.config.layers;
        let mut mask = vec![false; self.data.len()];
        for slot in &self.layout.slots {
            let on = match (policy, slot.group) {
                (Trainable::All, _) => true,
                (Trainable::Frozen, _) => false,
                (Trainable::TopLayers(_), ParamGroup::FinalNorm) => true,
                (Trainable::TopLayers(k), ParamGroup::Layer(l)) => l + k.min(layers) >= layers,
                (Trainable::TopLayers(_), _) => false,
            };
            if on {
                mask[slot.range()].iter_mut().for_each(|m| *m = true);
            }
        }
        mask
    }

    fn check_tokens(&self, seq: &TokenSequence) -> Result<()> {
        if seq.len == 0 || seq.len > self.config.max_len {
            return Err(Error::ShapeMismatch(format!(
                "sequence length {} outside 1..={}",
                seq.len, self.config.max_len
            )));
        }
        if let Some(&bad) = seq.tokens().iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::ShapeMismatch(format!(
                "token id {bad} >= vocab size {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Eval-mode embedding.
    pub fn embed(&self, seq: &TokenSequence) -> Result<Vec<f64>> {
        Ok(self.forward(seq, None)?.embedding)
    }

    pub fn embed_all(&self, seqs: &[TokenSequence]) -> Result<Vec<Vec<f64>>> {
        seqs.iter().map(|s| self.embed(s)).collect()
    }

    /// Encodes one sequence. `dropout_seed = None` is eval mode. Only the
    /// unpadded prefix is processed, which is equivalent to masking PAD keys
    /// out of attention since the pooled output sits at position 0.
    pub fn forward(&self, seq: &TokenSequence, dropout_seed: Option<u64>) -> Result<ForwardCache> {
        self.check_tokens(seq)?;
        let c = &self.config;
        let d = c.hidden_dim;
        let w = &self.data;
        let tokens = seq.tokens().to_vec();
        let n = tokens.len();
        let mut rng = dropout_seed.filter(|_| c.dropout > 0.0).map(ChaCha8Rng::seed_from_u64);

        let mut x = vec![0.0; n * d];
        for (p, &t) in tokens.iter().enumerate() {
            let te = &w[self.layout.tok + t as usize * d..][..d];
            let pe = &w[self.layout.pos + p * d..][..d];
            for j in 0..d {
                x[p * d + j] = te[j] + pe[j];
            }
        }
        let drop_emb = dropout_mask(rng.as_mut(), n * d, c.dropout);
        apply_mask(&mut x, &drop_emb);

        let mut layers = Vec::with_capacity(c.layers);
        for (l, off) in self.layout.layers.iter().enumerate() {
            // The last layer only needs the BOS row as output.
            let qn = if l + 1 == c.layers { 1 } else { n };
            let (out, cache) = self.layer_forward(off, &x, n, qn, rng.as_mut());
            layers.push(cache);
            x = out;
        }

        let (y, final_ln) = layer_norm(
            &x[..d],
            &w[self.layout.lnf_g..][..d],
            &w[self.layout.lnf_b..][..d],
            1,
            d,
        );
        let pooled_norm = ops::norm(&y).max(1e-12);
        let embedding = y.iter().map(|v| v / pooled_norm).collect();
        Ok(ForwardCache {
            tokens,
            drop_emb,
            layers,
            final_ln,
            pooled_norm,
            embedding,
        })
    }

    fn layer_forward(
        &self,
        off: &LayerOffsets,
        x: &[f64],
        n: usize,
        qn: usize,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> (Vec<f64>, LayerCache) {
        let c = &self.config;
        let d = c.hidden_dim;
        let ff = c.ff_dim;
        let heads = c.heads;
        let hd = c.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let w = &self.data;

        let (ln1_out, ln1) = layer_norm(x, &w[off.ln1_g..][..d], &w[off.ln1_b..][..d], n, d);
        let q = linear(&ln1_out[..qn * d], &w[off.wq..][..d * d], &w[off.bq..][..d], qn, d, d);
        let k = linear(&ln1_out, &w[off.wk..][..d * d], &w[off.bk..][..d], n, d, d);
        let v = linear(&ln1_out, &w[off.wv..][..d * d], &w[off.bv..][..d], n, d, d);

        let mut probs = vec![0.0; heads * qn * n];
        let mut ctx = vec![0.0; qn * d];
        for h in 0..heads {
            for i in 0..qn {
                let row = &mut probs[(h * qn + i) * n..][..n];
                let qi = &q[i * d + h * hd..][..hd];
                for (j, r) in row.iter_mut().enumerate() {
                    *r = ops::dot(qi, &k[j * d + h * hd..][..hd]) * scale;
                }
                softmax_in_place(row);
                let out = &mut ctx[i * d + h * hd..][..hd];
                for (j, &p) in row.iter().enumerate() {
                    let vj = &v[j * d + h * hd..][..hd];
                    for (o, &vv) in out.iter_mut().zip(vj) {
                        *o += p * vv;
                    }
                }
            }
        }
        let mut attn_out = linear(&ctx, &w[off.wo..][..d * d], &w[off.bo..][..d], qn, d, d);
        let drop_attn = dropout_mask(rng.as_deref_mut(), qn * d, c.dropout);
        apply_mask(&mut attn_out, &drop_attn);
        let h_res: Vec<f64> = x[..qn * d].iter().zip(&attn_out).map(|(a, b)| a + b).collect();

        let (ln2_out, ln2) = layer_norm(&h_res, &w[off.ln2_g..][..d], &w[off.ln2_b..][..d], qn, d);
        let f1 = linear(&ln2_out, &w[off.w1..][..d * ff], &w[off.b1..][..ff], qn, d, ff);
        let act: Vec<f64> = f1.iter().map(|&z| gelu(z)).collect();
        let mut f2 = linear(&act, &w[off.w2..][..ff * d], &w[off.b2..][..d], qn, ff, d);
        let drop_ff = dropout_mask(rng, qn * d, c.dropout);
        apply_mask(&mut f2, &drop_ff);
        let out: Vec<f64> = h_res.iter().zip(&f2).map(|(a, b)| a + b).collect();

        (
            out,
            LayerCache {
                n,
                qn,
                ln1,
                ln1_out,
                q,
                k,
                v,
                probs,
                ctx,
                drop_attn,
                ln2,
                ln2_out,
                f1,
                act,
                drop_ff,
            },
        )
    }

    /// Accumulates `∂(dz · embedding)/∂θ` into `grads`.
    pub fn backward(&self, cache: &ForwardCache, dz: &[f64], grads: &mut [f64]) -> Result<()> {
        let c = &self.config;
        let d = c.hidden_dim;
        if dz.len() != d || grads.len() != self.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "backward got dz of {} (want {d}) and grads of {} (want {})",
                dz.len(),
                grads.len(),
                self.data.len()
            )));
        }
        let w = &self.data;
        let z = &cache.embedding;
        let zdz = ops::dot(z, dz);
        let dy: Vec<f64> = dz
            .iter()
            .zip(z)
            .map(|(g, zi)| (g - zi * zdz) / cache.pooled_norm)
            .collect();

        let (dgamma, dbeta) = split_wb(grads, self.layout.lnf_g, d, self.layout.lnf_b, d);
        let mut dx = layer_norm_backward(&cache.final_ln, &w[self.layout.lnf_g..][..d], &dy, dgamma, dbeta, 1, d);

        for (off, lc) in self.layout.layers.iter().zip(&cache.layers).rev() {
            dx = self.layer_backward(off, lc, &dx, grads);
        }

        apply_mask(&mut dx, &cache.drop_emb);
        for (p, &t) in cache.tokens.iter().enumerate() {
            let row = &dx[p * d..(p + 1) * d];
            for (g, v) in grads[self.layout.tok + t as usize * d..][..d].iter_mut().zip(row) {
                *g += v;
            }
            for (g, v) in grads[self.layout.pos + p * d..][..d].iter_mut().zip(row) {
                *g += v;
            }
        }
        Ok(())
    }

    fn layer_backward(&self, off: &LayerOffsets, lc: &LayerCache, dout: &[f64], grads: &mut [f64]) -> Vec<f64> {
        let c = &self.config;
        let d = c.hidden_dim;
        let ff = c.ff_dim;
        let heads = c.heads;
        let hd = c.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let (n, qn) = (lc.n, lc.qn);
        let w = &self.data;

        // Feed-forward branch.
        let mut df2 = dout.to_vec();
        apply_mask(&mut df2, &lc.drop_ff);
        let dact = {
            let (dw2, db2) = split_wb(grads, off.w2, ff * d, off.b2, d);
            linear_backward(&lc.act, &w[off.w2..][..ff * d], &df2, dw2, db2, qn, ff, d)
        };
        let df1: Vec<f64> = dact.iter().zip(&lc.f1).map(|(g, &z)| g * gelu_grad(z)).collect();
        let dln2 = {
            let (dw1, db1) = split_wb(grads, off.w1, d * ff, off.b1, ff);
            linear_backward(&lc.ln2_out, &w[off.w1..][..d * ff], &df1, dw1, db1, qn, d, ff)
        };
        let mut dh = {
            let (dg, db) = split_wb(grads, off.ln2_g, d, off.ln2_b, d);
            layer_norm_backward(&lc.ln2, &w[off.ln2_g..][..d], &dln2, dg, db, qn, d)
        };
        for (a, b) in dh.iter_mut().zip(dout) {
            *a += b;
        }

        // Attention branch.
        let mut dx = vec![0.0; n * d];
        dx[..qn * d].copy_from_slice(&dh);
        let mut dattn = dh;
        apply_mask(&mut dattn, &lc.drop_attn);
        let dctx = {
            let (dwo, dbo) = split_wb(grads, off.wo, d * d, off.bo, d);
            linear_backward(&lc.ctx, &w[off.wo..][..d * d], &dattn, dwo, dbo, qn, d, d)
        };
        let mut dq = vec![0.0; qn * d];
        let mut dk = vec![0.0; n * d];
        let mut dv = vec![0.0; n * d];
        let mut dp = vec![0.0; n];
        for h in 0..heads {
            for i in 0..qn {
                let p = &lc.probs[(h * qn + i) * n..][..n];
                let dci = &dctx[i * d + h * hd..][..hd];
                for j in 0..n {
                    let vj = &lc.v[j * d + h * hd..][..hd];
                    dp[j] = ops::dot(dci, vj);
                    let dvj = &mut dv[j * d + h * hd..][..hd];
                    for (g, &x) in dvj.iter_mut().zip(dci) {
                        *g += p[j] * x;
                    }
                }
                let inner: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                let qi = &lc.q[i * d + h * hd..][..hd];
                for j in 0..n {
                    let ds = p[j] * (dp[j] - inner) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = &lc.k[j * d + h * hd..][..hd];
                    let dqi = &mut dq[i * d + h * hd..][..hd];
                    for (g, &x) in dqi.iter_mut().zip(kj) {
                        *g += ds * x;
                    }
                    let dkj = &mut dk[j * d + h * hd..][..hd];
                    for (g, &x) in dkj.iter_mut().zip(qi) {
                        *g += ds * x;
                    }
                }
            }
        }
        let mut dln1 = {
            let (dwk, dbk) = split_wb(grads, off.wk, d * d, off.bk, d);
            linear_backward(&lc.ln1_out, &w[off.wk..][..d * d], &dk, dwk, dbk, n, d, d)
        };
        {
            let (dwv, dbv) = split_wb(grads, off.wv, d * d, off.bv, d);
            let g = linear_backward(&lc.ln1_out, &w[off.wv..][..d * d], &dv, dwv, dbv, n, d, d);
            dln1.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        {
            let (dwq, dbq) = split_wb(grads, off.wq, d * d, off.bq, d);
            let g = linear_backward(&lc.ln1_out[..qn * d], &w[off.wq..][..d * d], &dq, dwq, dbq, qn, d, d);
            dln1[..qn * d].iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        let dx_ln = {
            let (dg, db) = split_wb(grads, off.ln1_g, d, off.ln1_b, d);
            layer_norm_backward(&lc.ln1, &w[off.ln1_g..][..d], &dln1, dg, db, n, d)
        };
        dx.iter_mut().zip(&dx_ln).for_each(|(a, b)| *a += b);
        dx
    }
}

/// Disjoint mutable views of a weight block and the bias block after it.
fn split_wb(grads: &mut [f64], w_off: usize, w_len: usize, b_off: usize, b_len: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(b_off >= w_off + w_len);
    let (head, tail) = grads.split_at_mut(b_off);
    (&mut head[w_off..w_off + w_len], &mut tail[..b_len])
}

/// Temperature-scaled cosine similarity of two unit vectors.
pub fn score(zp: &[f64], zt: &[f64], temp: f64) -> Result<f64> {
    if temp <= 0.0 || temp.is_nan() {
        return Err(Error::NonPositiveTemperature(temp));
    }
    if zp.len() != zt.len() {
        return Err(Error::LengthMismatch {
            expected: zp.len(),
            actual: zt.len(),
        });
    }
    Ok(ops::dot(zp, zt) / temp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::build_vocab;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            vocab_size: 10,
            hidden_dim: 8,
            layers: 2,
            heads: 2,
            ff_dim: 12,
            max_len: 16,
            dropout: 0.0,
        }
    }

    #[test]
    fn full_config_param_count() {
        // 75-symbol vocabulary at full size.
        let c = EncoderConfig::full(75);
        assert_eq!(c.param_count(), 4_856_576);
        let layer = Layout::new(&c)
            .slots
            .iter()
            .filter(|s| s.group == ParamGroup::Layer(0))
            .map(ParamSlot::len)
            .sum::<usize>();
        // top 3 layers + final norm
        assert_eq!(3 * layer + 2 * 256, 2_369_792);
    }

    #[test]
    fn rejects_bad_head_split() {
        let mut c = tiny();
        c.heads = 3;
        assert!(EncoderParams::new(c, 0).is_err());
    }

    #[test]
    fn embeddings_are_unit_and_deterministic() {
        let v = build_vocab(["CCOCN(=O)"]).unwrap();
        let mut c = tiny();
        c.vocab_size = v.size();
        let p = EncoderParams::new(c, 3).unwrap();
        let s = v.encode("CCO(N)", 16).unwrap();
        let a = p.embed(&s).unwrap();
        let b = p.embed(&s).unwrap();
        assert_eq!(a, b);
        assert!((ops::norm(&a) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn padding_length_does_not_matter() {
        let v = build_vocab(["CNO"]).unwrap();
        let mut c = tiny();
        c.vocab_size = v.size();
        c.max_len = 32;
        let p = EncoderParams::new(c, 1).unwrap();
        let short = v.encode("CNOC", 8).unwrap();
        let long = v.encode("CNOC", 32).unwrap();
        assert_eq!(p.embed(&short).unwrap(), p.embed(&long).unwrap());
    }

    #[test]
    fn token_out_of_vocab_is_shape_error() {
        let p = EncoderParams::new(tiny(), 0).unwrap();
        let seq = TokenSequence {
            ids: vec![2, 99],
            len: 2,
        };
        assert!(matches!(p.forward(&seq, None), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn score_cases() {
        let z = [0.6, 0.8];
        assert!((score(&z, &z, 0.07).unwrap() - 1.0 / 0.07).abs() < 1e-12);
        assert_eq!(score(&[1.0, 0.0], &[0.0, 1.0], 0.5).unwrap(), 0.0);
        assert!((score(&z, &[-0.6, -0.8], 0.5).unwrap() + 2.0).abs() < 1e-12);
        assert!(matches!(score(&z, &z, 0.0), Err(Error::NonPositiveTemperature(_))));
    }

    #[test]
    fn top_layer_mask() {
        let p = EncoderParams::new(tiny(), 0).unwrap();
        let mask = p.trainable_mask(Trainable::TopLayers(1));
        for slot in &p.layout().slots {
            let want = matches!(slot.group, ParamGroup::Layer(1) | ParamGroup::FinalNorm);
            assert!(mask[slot.range()].iter().all(|&m| m == want), "{}", slot.name);
        }
    }
}
