//! Plaintext reference transformer in `f64`.
//!
//! Row-vector convention: activations are `[T×D]` row-major and every
//! projection is `x·W` with `W` stored `[in×out]`. Each layer is
//! attention, output projection, residual and LayerNorm; an optional
//! residual ReLU feed-forward block follows when `ffn_dim > 0`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_MASK_VALUE: f64 = -3.0;
pub const DEFAULT_LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    /// Kept explicit so that pruned models retain the original head size.
    pub head_dim: usize,
    pub seq_len: usize,
    pub classes: usize,
    pub mask_value: f64,
    pub ln_eps: f64,
    pub ffn_dim: usize,
}

impl TransformerConfig {
    /// Head size `model_dim / heads`; errors unless it divides evenly.
    pub fn new(layers: usize, heads: usize, model_dim: usize, seq_len: usize, classes: usize) -> Result<Self> {
        if heads == 0 || !model_dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "model dim {model_dim} is not divisible by {heads} heads"
            )));
        }
        let c = TransformerConfig {
            layers,
            heads,
            model_dim,
            head_dim: model_dim / heads,
            seq_len,
            classes,
            mask_value: DEFAULT_MASK_VALUE,
            ln_eps: DEFAULT_LN_EPS,
            ffn_dim: 0,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("heads", self.heads),
            ("model_dim", self.model_dim),
            ("head_dim", self.head_dim),
            ("seq_len", self.seq_len),
            ("classes", self.classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !self.mask_value.is_finite() {
            return Err(Error::Config("mask value must be finite".into()));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::Config("layernorm epsilon must be positive".into()));
        }
        Ok(())
    }

    /// Width of the concatenated heads.
    pub fn inner_dim(&self) -> usize {
        self.heads * self.head_dim
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ffn {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    /// `[D × inner]`
    pub wq: Vec<f64>,
    pub bq: Vec<f64>,
    pub wk: Vec<f64>,
    pub bk: Vec<f64>,
    pub wv: Vec<f64>,
    pub bv: Vec<f64>,
    /// `[inner × D]`
    pub wo: Vec<f64>,
    pub bo: Vec<f64>,
    pub ln_gamma: Vec<f64>,
    pub ln_beta: Vec<f64>,
    pub ffn: Option<Ffn>,
}

impl LayerWeights {
    fn zeros(c: &TransformerConfig) -> Self {
        let (d, i) = (c.model_dim, c.inner_dim());
        LayerWeights {
            wq: vec![0.0; d * i],
            bq: vec![0.0; i],
            wk: vec![0.0; d * i],
            bk: vec![0.0; i],
            wv: vec![0.0; d * i],
            bv: vec![0.0; i],
            wo: vec![0.0; i * d],
            bo: vec![0.0; d],
            ln_gamma: vec![0.0; d],
            ln_beta: vec![0.0; d],
            ffn: (c.ffn_dim > 0).then(|| Ffn {
                w1: vec![0.0; d * c.ffn_dim],
                b1: vec![0.0; c.ffn_dim],
                w2: vec![0.0; c.ffn_dim * d],
                b2: vec![0.0; d],
            }),
        }
    }

    /// Tensors in serialization order.
    pub fn tensors(&self) -> Vec<&Vec<f64>> {
        let mut v = vec![
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.ln_gamma,
            &self.ln_beta,
        ];
        if let Some(f) = &self.ffn {
            v.extend([&f.w1, &f.b1, &f.w2, &f.b2]);
        }
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut v = vec![
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln_gamma,
            &mut self.ln_beta,
        ];
        if let Some(f) = &mut self.ffn {
            v.extend([&mut f.w1, &mut f.b1, &mut f.w2, &mut f.b2]);
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerWeights {
    pub config: TransformerConfig,
    pub layers: Vec<LayerWeights>,
    /// `[D × C]`
    pub classifier_w: Vec<f64>,
    pub classifier_b: Vec<f64>,
    /// `[vocab × D]`, used only for token-id datasets.
    pub embedding: Option<Vec<f64>>,
}

impl TransformerWeights {
    pub fn zeros(config: TransformerConfig) -> Self {
        TransformerWeights {
            layers: (0..config.layers).map(|_| LayerWeights::zeros(&config)).collect(),
            classifier_w: vec![0.0; config.model_dim * config.classes],
            classifier_b: vec![0.0; config.classes],
            embedding: None,
            config,
        }
    }

    /// Gaussian weights scaled by fan-in, unit LayerNorm gain, zero biases.
    pub fn random<R: Rng + ?Sized>(config: TransformerConfig, rng: &mut R) -> Self {
        let mut w = Self::zeros(config);
        let d = config.model_dim as f64;
        let inner = config.inner_dim() as f64;
        let mut fill = |v: &mut Vec<f64>, fan_in: f64| {
            let n = Normal::new(0.0, 1.0 / fan_in.sqrt()).expect("positive std");
            v.iter_mut().for_each(|x| *x = n.sample(rng));
        };
        for l in &mut w.layers {
            fill(&mut l.wq, d);
            fill(&mut l.wk, d);
            fill(&mut l.wv, d);
            fill(&mut l.wo, inner);
            l.ln_gamma.iter_mut().for_each(|g| *g = 1.0);
            if let Some(f) = &mut l.ffn {
                fill(&mut f.w1, d);
                fill(&mut f.w2, config.ffn_dim as f64);
            }
        }
        // a larger classifier gain spreads prediction entropies out
        fill(&mut w.classifier_w, d / 4.0);
        w
    }

    pub fn with_embedding<R: Rng + ?Sized>(mut self, vocab: usize, rng: &mut R) -> Self {
        let n = Normal::new(0.0, 1.0).expect("unit normal");
        self.embedding = Some((0..vocab * self.config.model_dim).map(|_| n.sample(rng)).collect());
        self
    }

    pub fn vocab(&self) -> usize {
        self.embedding.as_ref().map_or(0, |e| e.len() / self.config.model_dim)
    }

    /// All weights in serialization order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            for t in l.tensors() {
                out.extend_from_slice(t);
            }
        }
        out.extend_from_slice(&self.classifier_w);
        out.extend_from_slice(&self.classifier_b);
        if let Some(e) = &self.embedding {
            out.extend_from_slice(e);
        }
        out
    }

    /// Inverse of [`flatten`](Self::flatten).
    pub fn unflatten(config: TransformerConfig, vocab: usize, words: &[f64]) -> Result<Self> {
        config.validate()?;
        let mut w = Self::zeros(config);
        if vocab > 0 {
            w.embedding = Some(vec![0.0; vocab * config.model_dim]);
        }
        let mut off = 0;
        let mut take = |dst: &mut Vec<f64>| -> Result<()> {
            let n = dst.len();
            let src = words
                .get(off..off + n)
                .ok_or_else(|| Error::Format("weight block shorter than the config implies".into()))?;
            dst.copy_from_slice(src);
            off += n;
            Ok(())
        };
        for l in &mut w.layers {
            for t in l.tensors_mut() {
                take(t)?;
            }
        }
        take(&mut w.classifier_w)?;
        take(&mut w.classifier_b)?;
        if let Some(e) = &mut w.embedding {
            take(e)?;
        }
        if off != words.len() {
            return Err(Error::Format(format!("{} trailing weight words", words.len() - off)));
        }
        Ok(w)
    }

    /// The bottom `layers` layers with the classifier kept.
    pub fn truncate_layers(&self, layers: usize) -> Result<Self> {
        if layers == 0 || layers > self.config.layers {
            return Err(Error::Config(format!(
                "cannot keep {layers} of {} layers",
                self.config.layers
            )));
        }
        let mut w = self.clone();
        w.layers.truncate(layers);
        w.config.layers = layers;
        Ok(w)
    }
}

/// One sequence: `len` real positions, the rest padding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub len: usize,
    /// `[T×D]` embeddings, zero past `len`.
    pub x: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DatasetMode {
    Embedded,
    Tokens,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub seq_len: usize,
    pub dim: usize,
    pub mode: DatasetMode,
    /// Embedded rows; for token datasets, `dim` is 1 and `x` holds ids.
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Random sequences with lengths uniform on `[T/2, T]`.
    pub fn synthetic<R: Rng + ?Sized>(n: usize, seq_len: usize, dim: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let examples = (0..n)
            .map(|_| {
                let len = rng.random_range(seq_len.div_ceil(2).max(1)..=seq_len);
                // a per-example offset gives the classifier something to separate
                let bias: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
                let mut x = vec![0.0; seq_len * dim];
                for t in 0..len {
                    for j in 0..dim {
                        x[t * dim + j] = bias[j] + normal.sample(rng);
                    }
                }
                Example { len, x }
            })
            .collect();
        Dataset {
            seq_len,
            dim,
            mode: DatasetMode::Embedded,
            examples,
        }
    }

    /// Token-id dataset drawn uniformly from `vocab`.
    pub fn synthetic_tokens<R: Rng + ?Sized>(n: usize, seq_len: usize, vocab: usize, rng: &mut R) -> Self {
        let examples = (0..n)
            .map(|_| {
                let len = rng.random_range(seq_len.div_ceil(2).max(1)..=seq_len);
                let mut x = vec![0.0; seq_len];
                for v in x.iter_mut().take(len) {
                    *v = rng.random_range(0..vocab) as f64;
                }
                Example { len, x }
            })
            .collect();
        Dataset {
            seq_len,
            dim: 1,
            mode: DatasetMode::Tokens,
            examples,
        }
    }

    /// Looks token ids up in the embedding table.
    pub fn embed(&self, weights: &TransformerWeights) -> Result<Dataset> {
        if self.mode == DatasetMode::Embedded {
            return Ok(self.clone());
        }
        let table = weights
            .embedding
            .as_ref()
            .ok_or_else(|| Error::Config("token dataset needs an embedding table".into()))?;
        let d = weights.config.model_dim;
        let vocab = table.len() / d;
        let mut examples = Vec::with_capacity(self.len());
        for ex in &self.examples {
            let mut x = vec![0.0; self.seq_len * d];
            for t in 0..ex.len {
                let id = ex.x[t] as usize;
                if id >= vocab {
                    return Err(Error::Format(format!("token id {id} outside vocabulary {vocab}")));
                }
                x[t * d..(t + 1) * d].copy_from_slice(&table[id * d..(id + 1) * d]);
            }
            examples.push(Example { len: ex.len, x });
        }
        Ok(Dataset {
            seq_len: self.seq_len,
            dim: d,
            mode: DatasetMode::Embedded,
            examples,
        })
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            seq_len: self.seq_len,
            dim: self.dim,
            mode: self.mode,
            examples: idx.iter().map(|&i| self.examples[i].clone()).collect(),
        }
    }
}

/// Additive key mask: 0 on real positions, `mask_value` on padding.
pub fn mask_row(len: usize, seq_len: usize, mask_value: f64) -> Vec<f64> {
    (0..seq_len).map(|j| if j < len { 0.0 } else { mask_value }).collect()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Shannon entropy in nats; zero-probability terms contribute nothing.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

pub fn softmax_entropy(logits: &[f64]) -> f64 {
    entropy(&softmax(logits))
}

/// Population variance of a row.
pub fn row_variance(row: &[f64]) -> f64 {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

pub fn layernorm(x: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let r = 1.0 / (row_variance(x) + eps).sqrt();
    layernorm_with(x, gamma, beta, r)
}

/// LayerNorm with the denominator's reciprocal supplied.
pub fn layernorm_with(x: &[f64], gamma: &[f64], beta: &[f64], recip: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    x.iter()
        .zip(gamma.iter().zip(beta))
        .map(|(&v, (&g, &b))| (v - mean) * recip * g + b)
        .collect()
}

/// `[m×k]·[k×n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o += av * bv;
            }
        }
    }
    out
}

fn add_bias(x: &mut [f64], b: &[f64]) {
    for row in x.chunks_mut(b.len()) {
        row.iter_mut().zip(b).for_each(|(v, &bb)| *v += bb);
    }
}

/// The three nonlinear sites an MLP may stand in for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Site {
    AttnSoftmax,
    LnRecip,
    SoftmaxEntropy,
}

impl Site {
    pub const ALL: [Site; 3] = [Site::AttnSoftmax, Site::LnRecip, Site::SoftmaxEntropy];

    pub fn name(self) -> &'static str {
        match self {
            Site::AttnSoftmax => "attn_softmax",
            Site::LnRecip => "ln_recip",
            Site::SoftmaxEntropy => "softmax_entropy",
        }
    }

    pub fn code(self) -> u64 {
        self as u64
    }

    pub fn from_code(c: u64) -> Result<Site> {
        Site::ALL
            .get(c as usize)
            .copied()
            .ok_or_else(|| Error::Format(format!("unknown site code {c}")))
    }
}

/// Implementations of the nonlinear modules used by [`forward_with`].
pub trait Nonlinear {
    fn softmax_row(&self, layer: usize, scores: &[f64]) -> Vec<f64>;
    /// `1/sqrt(v + eps)` for a row variance `v`.
    fn ln_recip(&self, layer: usize, variance: f64) -> f64;
    fn entropy(&self, logits: &[f64]) -> f64;
}

/// The exact functions.
#[derive(Clone, Copy, Debug)]
pub struct Exact {
    pub ln_eps: f64,
}

impl Nonlinear for Exact {
    fn softmax_row(&self, _: usize, scores: &[f64]) -> Vec<f64> {
        softmax(scores)
    }

    fn ln_recip(&self, _: usize, variance: f64) -> f64 {
        1.0 / (variance + self.ln_eps).sqrt()
    }

    fn entropy(&self, logits: &[f64]) -> f64 {
        softmax_entropy(logits)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TapRecord {
    pub site: Site,
    /// `None` for the final entropy.
    pub layer: Option<usize>,
    pub input: Vec<f64>,
    /// Leading entries of `input` that are not padding.
    pub valid: usize,
    pub output: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Taps {
    pub records: Vec<TapRecord>,
}

impl Taps {
    pub fn site(&self, site: Site, layer: Option<usize>) -> impl Iterator<Item = &TapRecord> {
        self.records.iter().filter(move |r| r.site == site && r.layer == layer)
    }

    pub fn count(&self, site: Site, layer: Option<usize>) -> usize {
        self.site(site, layer).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub logits: Vec<f64>,
    pub entropy: f64,
}

/// Exact forward pass of one example.
pub fn forward(w: &TransformerWeights, ex: &Example) -> Result<ForwardOutput> {
    forward_with(
        w,
        ex,
        &Exact {
            ln_eps: w.config.ln_eps,
        },
        None,
    )
}

/// Forward pass with pluggable nonlinearities, optionally recording taps.
pub fn forward_with(
    w: &TransformerWeights,
    ex: &Example,
    nl: &dyn Nonlinear,
    mut taps: Option<&mut Taps>,
) -> Result<ForwardOutput> {
    let c = &w.config;
    let (t, d, dh, inner) = (c.seq_len, c.model_dim, c.head_dim, c.inner_dim());
    if ex.x.len() != t * d || ex.len > t {
        return Err(Error::Shape(format!(
            "example of {} values (len {}) for a [{t}×{d}] model",
            ex.x.len(),
            ex.len
        )));
    }
    let mask = mask_row(ex.len, t, c.mask_value);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut x = ex.x.clone();
    for (li, lw) in w.layers.iter().enumerate() {
        let mut q = matmul(&x, &lw.wq, t, d, inner);
        add_bias(&mut q, &lw.bq);
        let mut k = matmul(&x, &lw.wk, t, d, inner);
        add_bias(&mut k, &lw.bk);
        let mut v = matmul(&x, &lw.wv, t, d, inner);
        add_bias(&mut v, &lw.bv);
        let mut ctx = vec![0.0; t * inner];
        for h in 0..c.heads {
            let off = h * dh;
            for i in 0..t {
                let scores: Vec<f64> = (0..t)
                    .map(|j| {
                        let dot: f64 = (0..dh).map(|e| q[i * inner + off + e] * k[j * inner + off + e]).sum();
                        dot * scale + mask[j]
                    })
                    .collect();
                let p = nl.softmax_row(li, &scores);
                for j in 0..t {
                    for e in 0..dh {
                        ctx[i * inner + off + e] += p[j] * v[j * inner + off + e];
                    }
                }
                if let Some(tp) = taps.as_deref_mut() {
                    tp.records.push(TapRecord {
                        site: Site::AttnSoftmax,
                        layer: Some(li),
                        input: scores,
                        valid: ex.len,
                        output: p,
                    });
                }
            }
        }
        let mut attn = matmul(&ctx, &lw.wo, t, inner, d);
        add_bias(&mut attn, &lw.bo);
        for i in 0..t {
            let row: Vec<f64> = (0..d).map(|j| x[i * d + j] + attn[i * d + j]).collect();
            let var = row_variance(&row);
            let r = nl.ln_recip(li, var);
            if let Some(tp) = taps.as_deref_mut() {
                tp.records.push(TapRecord {
                    site: Site::LnRecip,
                    layer: Some(li),
                    input: vec![var],
                    valid: 1,
                    output: vec![r],
                });
            }
            x[i * d..(i + 1) * d].copy_from_slice(&layernorm_with(&row, &lw.ln_gamma, &lw.ln_beta, r));
        }
        if let Some(f) = &lw.ffn {
            let mut h = matmul(&x, &f.w1, t, d, c.ffn_dim);
            add_bias(&mut h, &f.b1);
            h.iter_mut().for_each(|v| *v = v.max(0.0));
            let mut o = matmul(&h, &f.w2, t, c.ffn_dim, d);
            add_bias(&mut o, &f.b2);
            x.iter_mut().zip(&o).for_each(|(a, b)| *a += b);
        }
    }
    let mut logits = matmul(&x[..d], &w.classifier_w, 1, d, c.classes);
    add_bias(&mut logits, &w.classifier_b);
    let ent = nl.entropy(&logits);
    if let Some(tp) = taps {
        tp.records.push(TapRecord {
            site: Site::SoftmaxEntropy,
            layer: None,
            valid: logits.len(),
            input: logits.clone(),
            output: vec![ent],
        });
    }
    Ok(ForwardOutput { logits, entropy: ent })
}

/// Exact forward passes over a dataset, recording every nonlinear site.
pub fn record_taps(w: &TransformerWeights, data: &Dataset) -> Result<Taps> {
    if data.is_empty() {
        return Err(Error::Config("cannot record taps on an empty dataset".into()));
    }
    let data = data.embed(w)?;
    let mut taps = Taps::default();
    let nl = Exact {
        ln_eps: w.config.ln_eps,
    };
    for ex in &data.examples {
        forward_with(w, ex, &nl, Some(&mut taps))?;
    }
    Ok(taps)
}
