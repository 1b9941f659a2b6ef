//! Proxy models: a bottom slice of the target transformer with fewer heads,
//! no FFN, and MLPs standing in for softmax, the LayerNorm denominator and
//! the final softmax-entropy.

use serde::{Deserialize, Serialize};

use crate::approx::{fit_site, mlp_forward_mpc, MlpApprox, SharedMlp, SiteShape, TrainConfig, TrainReport};
use crate::error::{Error, Result};
use crate::format::{config_from_words, config_words, Container, ModelKind, CONFIG_WORDS};
use crate::nn::{self, Dataset, Example, ForwardOutput, Nonlinear, Site, TransformerWeights};
use crate::protocols::Party;
use crate::ring::{transpose, RingWord};
use crate::seeds::substream;
use crate::shares::{LocalShare, PartyId};

/// `<l, w, d>`: layers, heads, MLP hidden width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProxySpec {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
}

impl ProxySpec {
    pub fn new(layers: usize, heads: usize, hidden: usize) -> Self {
        ProxySpec { layers, heads, hidden }
    }

    pub fn validate(&self, target: &nn::TransformerConfig) -> Result<()> {
        if self.layers == 0 || self.layers > target.layers {
            return Err(Error::Config(format!(
                "proxy layers {} outside 1..={}",
                self.layers, target.layers
            )));
        }
        if self.heads == 0 || self.heads > target.heads {
            return Err(Error::Config(format!(
                "proxy heads {} outside 1..={}",
                self.heads, target.heads
            )));
        }
        if self.hidden == 0 {
            return Err(Error::Config("proxy MLP width must be at least 1".into()));
        }
        Ok(())
    }

    /// Approximators a proxy of this depth carries: `2l + 1`.
    pub fn mlp_count(&self) -> usize {
        2 * self.layers + 1
    }
}

/// Bottom `layers` layers of the target with the classifier kept.
pub fn extract_submodel(target: &TransformerWeights, layers: usize) -> Result<TransformerWeights> {
    target.truncate_layers(layers)
}

/// Drops every FFN block.
pub fn strip_ffn(w: &TransformerWeights) -> TransformerWeights {
    let mut w = w.clone();
    w.config.ffn_dim = 0;
    w.layers.iter_mut().for_each(|l| l.ffn = None);
    w
}

/// `||Wv_h · Wo_h||_F` for each head of `layer`.
pub fn head_scores(w: &TransformerWeights, layer: usize) -> Vec<f64> {
    let c = &w.config;
    let (d, dh, inner) = (c.model_dim, c.head_dim, c.inner_dim());
    let lw = &w.layers[layer];
    (0..c.heads)
        .map(|h| {
            let wv: Vec<f64> = (0..d)
                .flat_map(|r| lw.wv[r * inner + h * dh..r * inner + (h + 1) * dh].iter().copied())
                .collect();
            let wo = &lw.wo[h * dh * d..(h + 1) * dh * d];
            nn::matmul(&wv, wo, d, dh, d).iter().map(|v| v * v).sum::<f64>().sqrt()
        })
        .collect()
}

/// Keeps the `heads` highest-scoring heads of every layer, in their original
/// order. Ties keep the lower index.
pub fn prune_heads(w: &TransformerWeights, heads: usize) -> Result<TransformerWeights> {
    let c = w.config;
    if heads == 0 || heads > c.heads {
        return Err(Error::Config(format!("cannot keep {heads} of {} heads", c.heads)));
    }
    let (d, dh, inner) = (c.model_dim, c.head_dim, c.inner_dim());
    let new_inner = heads * dh;
    let mut out = w.clone();
    out.config.heads = heads;
    for (li, lw) in out.layers.iter_mut().enumerate() {
        let scores = head_scores(w, li);
        let mut order: Vec<usize> = (0..c.heads).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        let mut keep = order[..heads].to_vec();
        keep.sort_unstable();
        let src = &w.layers[li];
        let cols = |m: &[f64]| -> Vec<f64> {
            let mut v = Vec::with_capacity(d * new_inner);
            for r in 0..d {
                for &h in &keep {
                    v.extend_from_slice(&m[r * inner + h * dh..r * inner + (h + 1) * dh]);
                }
            }
            v
        };
        let entries = |b: &[f64]| -> Vec<f64> {
            keep.iter()
                .flat_map(|&h| b[h * dh..(h + 1) * dh].iter().copied())
                .collect()
        };
        lw.wq = cols(&src.wq);
        lw.wk = cols(&src.wk);
        lw.wv = cols(&src.wv);
        lw.bq = entries(&src.bq);
        lw.bk = entries(&src.bk);
        lw.bv = entries(&src.bv);
        lw.wo = keep
            .iter()
            .flat_map(|&h| src.wo[h * dh * d..(h + 1) * dh * d].iter().copied())
            .collect();
    }
    Ok(out)
}

/// The linear skeleton of a proxy: extracted, FFN-free, pruned.
pub fn skeleton(base: &TransformerWeights, spec: ProxySpec) -> Result<TransformerWeights> {
    spec.validate(&base.config)?;
    let mut w = strip_ffn(&extract_submodel(base, spec.layers)?);
    w.embedding = None;
    prune_heads(&w, spec.heads)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProxyModel {
    pub spec: ProxySpec,
    pub weights: TransformerWeights,
    /// One per layer.
    pub softmax: Vec<MlpApprox>,
    pub ln: Vec<MlpApprox>,
    pub entropy: MlpApprox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteReport {
    pub site: Site,
    pub layer: Option<usize>,
    pub mu: f64,
    pub sigma: f64,
    pub report: TrainReport,
}

/// Builds a proxy: skeleton from `base`, taps from `bootstrap`, then the
/// `2l + 1` approximators.
pub fn build_proxy(
    base: &TransformerWeights,
    spec: ProxySpec,
    bootstrap: &Dataset,
    train: &TrainConfig,
) -> Result<(ProxyModel, Vec<SiteReport>)> {
    let weights = skeleton(base, spec)?;
    let data = bootstrap.embed(base)?;
    let taps = nn::record_taps(&weights, &data)?;
    let c = weights.config;
    let mut reports = Vec::new();
    let mut fit = |site: Site, layer: Option<usize>, width: usize| -> Result<MlpApprox> {
        let label = format!("{}-{}", site.name(), layer.map_or(-1, |l| l as i64));
        let cfg = TrainConfig {
            seed: substream(train.seed, &label),
            ..*train
        };
        let shape = SiteShape {
            width,
            mask_value: c.mask_value,
            ln_eps: c.ln_eps,
        };
        let (m, r, est) = fit_site(&taps, site, layer, spec.hidden, shape, &cfg)?;
        reports.push(SiteReport {
            site,
            layer,
            mu: est.mu,
            sigma: est.sigma,
            report: r,
        });
        Ok(m)
    };
    let mut softmax = Vec::new();
    let mut ln = Vec::new();
    for l in 0..spec.layers {
        softmax.push(fit(Site::AttnSoftmax, Some(l), c.seq_len)?);
        ln.push(fit(Site::LnRecip, Some(l), 1)?);
    }
    let entropy = fit(Site::SoftmaxEntropy, None, c.classes)?;
    Ok((
        ProxyModel {
            spec,
            weights,
            softmax,
            ln,
            entropy,
        },
        reports,
    ))
}

/// Nonlinearities evaluated by a proxy's approximators.
pub struct MlpNonlinear<'a> {
    pub softmax: &'a [MlpApprox],
    pub ln: &'a [MlpApprox],
    pub entropy: &'a MlpApprox,
}

impl Nonlinear for MlpNonlinear<'_> {
    fn softmax_row(&self, layer: usize, scores: &[f64]) -> Vec<f64> {
        self.softmax[layer].forward(scores)
    }

    fn ln_recip(&self, layer: usize, variance: f64) -> f64 {
        self.ln[layer].forward(&[variance])[0]
    }

    fn entropy(&self, logits: &[f64]) -> f64 {
        self.entropy.forward(logits)[0]
    }
}

impl ProxyModel {
    pub fn mlp_count(&self) -> usize {
        self.softmax.len() + self.ln.len() + 1
    }

    pub fn nonlinear(&self) -> MlpNonlinear<'_> {
        MlpNonlinear {
            softmax: &self.softmax,
            ln: &self.ln,
            entropy: &self.entropy,
        }
    }

    /// Plaintext forward pass with the approximators in place.
    pub fn forward(&self, ex: &Example) -> Result<ForwardOutput> {
        nn::forward_with(&self.weights, ex, &self.nonlinear(), None)
    }

    pub fn mlps(&self) -> impl Iterator<Item = &MlpApprox> {
        self.softmax
            .iter()
            .zip(&self.ln)
            .flat_map(|(a, b)| [a, b])
            .chain(std::iter::once(&self.entropy))
    }

    pub fn to_container(&self) -> Container {
        let mut config = vec![self.spec.layers as u64, self.spec.heads as u64, self.spec.hidden as u64];
        config.extend(config_words(&self.weights.config));
        let mut weights = self.weights.flatten();
        for m in self.mlps() {
            weights.extend_from_slice(&m.to_container().weights);
        }
        Container {
            kind: ModelKind::Proxy,
            config,
            weights,
        }
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind != ModelKind::Proxy || c.config.len() != 3 + CONFIG_WORDS {
            return Err(Error::Format("not a proxy container".into()));
        }
        let spec = ProxySpec::new(c.config[0] as usize, c.config[1] as usize, c.config[2] as usize);
        let cfg = config_from_words(&c.config[3..])?;
        if cfg.layers != spec.layers || cfg.heads != spec.heads || spec.hidden == 0 || cfg.ffn_dim != 0 {
            return Err(Error::Format("proxy header disagrees with its config".into()));
        }
        let n = TransformerWeights::zeros(cfg).flatten().len();
        if c.weights.len() < n {
            return Err(Error::Format("proxy weights truncated".into()));
        }
        let weights = TransformerWeights::unflatten(cfg, 0, &c.weights[..n])?;
        let mut rest = &c.weights[n..];
        let h = spec.hidden;
        let mut take = |site: Site, layer: Option<usize>, i: usize, o: usize| -> Result<MlpApprox> {
            let len = h * i + h + o * h + o;
            if rest.len() < len {
                return Err(Error::Format("proxy MLP weights truncated".into()));
            }
            let m = MlpApprox::from_container(&Container {
                kind: ModelKind::Mlp,
                config: vec![
                    site.code(),
                    layer.map_or(u64::MAX, |l| l as u64),
                    i as u64,
                    h as u64,
                    o as u64,
                ],
                weights: rest[..len].to_vec(),
            })?;
            rest = &rest[len..];
            Ok(m)
        };
        let (t, cl) = (cfg.seq_len, cfg.classes);
        let mut softmax = Vec::new();
        let mut ln = Vec::new();
        for l in 0..spec.layers {
            softmax.push(take(Site::AttnSoftmax, Some(l), t, t)?);
            ln.push(take(Site::LnRecip, Some(l), 1, 1)?);
        }
        let entropy = take(Site::SoftmaxEntropy, None, cl, 1)?;
        if !rest.is_empty() {
            return Err(Error::Format(format!("{} trailing proxy weights", rest.len())));
        }
        Ok(ProxyModel {
            spec,
            weights,
            softmax,
            ln,
            entropy,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}

/// How a secure forward pass evaluates nonlinear modules.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Nonlinearity {
    /// Iterative kernels (softmax, LayerNorm, entropy composites).
    Kernels,
    /// The proxy's approximators.
    Mlp,
}

/// What both parties know about a proxy: its shape, not its weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProxyArch {
    pub config: nn::TransformerConfig,
    pub nonlinearity: Nonlinearity,
    pub hidden: usize,
}

impl ProxyArch {
    pub fn of(m: &ProxyModel, nonlinearity: Nonlinearity) -> Self {
        ProxyArch {
            config: m.weights.config,
            nonlinearity,
            hidden: m.spec.hidden,
        }
    }

    /// An exact transformer run with kernels.
    pub fn kernels(w: &TransformerWeights) -> Self {
        ProxyArch {
            config: w.config,
            nonlinearity: Nonlinearity::Kernels,
            hidden: 0,
        }
    }

    fn shapes(&self) -> Vec<Vec<usize>> {
        let c = &self.config;
        let (d, inner) = (c.model_dim, c.inner_dim());
        let mut s = Vec::new();
        for _ in 0..c.layers {
            s.extend([
                vec![d, inner],
                vec![inner],
                vec![d, inner],
                vec![inner],
                vec![d, inner],
                vec![inner],
                vec![inner, d],
                vec![d],
                vec![d],
                vec![d],
            ]);
        }
        s.extend([vec![d, c.classes], vec![c.classes]]);
        if self.nonlinearity == Nonlinearity::Mlp {
            let h = self.hidden;
            for _ in 0..c.layers {
                s.extend(MlpApprox::mpc_shapes(c.seq_len, h, c.seq_len));
                s.extend(MlpApprox::mpc_shapes(1, h, 1));
            }
            s.extend(MlpApprox::mpc_shapes(c.classes, h, 1));
        }
        s
    }
}

/// Plaintext tensors in [`ProxyArch::shapes`] order. The attention scale is
/// folded into the query projection.
fn setup_tensors(w: &TransformerWeights, mlps: Option<&ProxyModel>) -> Vec<Vec<f64>> {
    let scale = 1.0 / (w.config.head_dim as f64).sqrt();
    let mut v = Vec::new();
    for l in &w.layers {
        v.push(l.wq.iter().map(|x| x * scale).collect());
        v.push(l.bq.iter().map(|x| x * scale).collect());
        for t in [&l.wk, &l.bk, &l.wv, &l.bv, &l.wo, &l.bo, &l.ln_gamma, &l.ln_beta] {
            v.push(t.clone());
        }
    }
    v.push(w.classifier_w.clone());
    v.push(w.classifier_b.clone());
    if let Some(m) = mlps {
        for (s, n) in m.softmax.iter().zip(&m.ln) {
            v.extend(s.mpc_tensors());
            v.extend(n.mpc_tensors());
        }
        v.extend(m.entropy.mpc_tensors());
    }
    v
}

#[derive(Clone, Debug)]
struct SharedLayer<W: RingWord> {
    wq: LocalShare<W>,
    bq: LocalShare<W>,
    wk: LocalShare<W>,
    bk: LocalShare<W>,
    wv: LocalShare<W>,
    bv: LocalShare<W>,
    wo: LocalShare<W>,
    bo: LocalShare<W>,
    gamma: LocalShare<W>,
    beta: LocalShare<W>,
}

/// A proxy's weights as shares, ready for secure inference.
#[derive(Clone, Debug)]
pub struct SharedProxy<W: RingWord = u64> {
    pub arch: ProxyArch,
    layers: Vec<SharedLayer<W>>,
    cls_w: LocalShare<W>,
    cls_b: LocalShare<W>,
    softmax: Vec<SharedMlp<W>>,
    ln: Vec<SharedMlp<W>>,
    entropy: Option<SharedMlp<W>>,
}

impl<W: RingWord> SharedProxy<W> {
    /// Shares the model owner's weights in one round. The model owner passes
    /// the weights (and, for [`Nonlinearity::Mlp`], the proxy holding the
    /// approximators); the data owner passes `None`.
    pub fn setup(
        p: &mut Party<W>,
        tag: &str,
        arch: ProxyArch,
        weights: Option<(&TransformerWeights, Option<&ProxyModel>)>,
    ) -> Result<Self> {
        if arch.config.ffn_dim != 0 {
            return Err(Error::Config(
                "secure inference has no feed-forward blocks; strip them first".into(),
            ));
        }
        let shapes = arch.shapes();
        let values = match weights {
            Some((w, m)) => {
                if w.config != arch.config {
                    return Err(Error::Config("weights do not match the announced architecture".into()));
                }
                if arch.nonlinearity == Nonlinearity::Mlp && m.is_none_or(|m| m.spec.hidden != arch.hidden) {
                    return Err(Error::Config(
                        "MLP proxy setup needs approximators of the announced width".into(),
                    ));
                }
                let m = if arch.nonlinearity == Nonlinearity::Mlp {
                    m
                } else {
                    None
                };
                Some(setup_tensors(w, m))
            }
            None => None,
        };
        let mut parts = p
            .input_many(tag, PartyId::ModelOwner, values.as_deref(), &shapes)?
            .into_iter();
        let mut next = || parts.next().expect("one share per announced tensor");
        let c = arch.config;
        let layers = (0..c.layers)
            .map(|_| SharedLayer {
                wq: next(),
                bq: next(),
                wk: next(),
                bk: next(),
                wv: next(),
                bv: next(),
                wo: next(),
                bo: next(),
                gamma: next(),
                beta: next(),
            })
            .collect();
        let cls_w = next();
        let cls_b = next();
        let (mut softmax, mut ln, mut entropy) = (Vec::new(), Vec::new(), None);
        if arch.nonlinearity == Nonlinearity::Mlp {
            let h = arch.hidden;
            let t = c.seq_len;
            for _ in 0..c.layers {
                softmax.push(SharedMlp::from_parts(t, h, t, (0..4).map(|_| next()).collect())?);
                ln.push(SharedMlp::from_parts(1, h, 1, (0..4).map(|_| next()).collect())?);
            }
            entropy = Some(SharedMlp::from_parts(
                c.classes,
                h,
                1,
                (0..4).map(|_| next()).collect(),
            )?);
        }
        Ok(SharedProxy {
            arch,
            layers,
            cls_w,
            cls_b,
            softmax,
            ln,
            entropy,
        })
    }
}

/// A dataset held as shares: inputs `[N, T·D]` and additive key masks `[N, T]`.
#[derive(Clone, Debug)]
pub struct SharedData<W: RingWord = u64> {
    pub x: LocalShare<W>,
    pub mask: LocalShare<W>,
    pub seq_len: usize,
    pub dim: usize,
}

impl<W: RingWord> SharedData<W> {
    /// Shares the data owner's embedded dataset in one round. `shape` is the
    /// public `(N, T, D)`.
    pub fn input(
        p: &mut Party<W>,
        tag: &str,
        shape: (usize, usize, usize),
        mask_value: f64,
        data: Option<&Dataset>,
    ) -> Result<Self> {
        let (n, t, d) = shape;
        let values = match data {
            Some(ds) => {
                if ds.mode != nn::DatasetMode::Embedded {
                    return Err(Error::Config("secure inference needs an embedded dataset".into()));
                }
                if (ds.len(), ds.seq_len, ds.dim) != shape {
                    return Err(Error::Shape(format!(
                        "dataset is [{}, {}, {}], announced {shape:?}",
                        ds.len(),
                        ds.seq_len,
                        ds.dim
                    )));
                }
                let x: Vec<f64> = ds.examples.iter().flat_map(|e| e.x.iter().copied()).collect();
                let m: Vec<f64> = ds
                    .examples
                    .iter()
                    .flat_map(|e| nn::mask_row(e.len, t, mask_value))
                    .collect();
                Some(vec![x, m])
            }
            None => None,
        };
        let mut parts = p.input_many(
            tag,
            PartyId::DataOwner,
            values.as_deref(),
            &[vec![n, t * d], vec![n, t]],
        )?;
        let mask = parts.pop().expect("two tensors");
        let x = parts.pop().expect("two tensors");
        Ok(SharedData {
            x,
            mask,
            seq_len: t,
            dim: d,
        })
    }

    pub fn len(&self) -> usize {
        self.x.shape[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Columns `[start, start+width)` of rows `[row0, row0+rows)` of a row-major
/// `[_, cols]` tensor.
fn block<W: RingWord>(
    x: &LocalShare<W>,
    cols: usize,
    row0: usize,
    rows: usize,
    start: usize,
    width: usize,
) -> LocalShare<W> {
    let mut data = Vec::with_capacity(rows * width);
    for r in row0..row0 + rows {
        data.extend_from_slice(&x.data[r * cols + start..r * cols + start + width]);
    }
    LocalShare::new(vec![rows, width], data).expect("block shape")
}

fn linear<W: RingWord>(
    p: &mut Party<W>,
    tag: &str,
    x: &LocalShare<W>,
    w: &LocalShare<W>,
    b: &LocalShare<W>,
) -> Result<LocalShare<W>> {
    let y = p.matmul(tag, x, w)?;
    let rows = y.shape[0];
    let bt = p.tile_rows(b, rows, y.shape.clone())?;
    p.add(&y, &bt)
}

/// Secure forward pass over the examples `idx` of `data`, returning the
/// shared prediction entropy of each. Nothing is opened.
pub fn forward_entropy_mpc<W: RingWord>(
    p: &mut Party<W>,
    model: &SharedProxy<W>,
    data: &SharedData<W>,
    idx: &[usize],
) -> Result<LocalShare<W>> {
    let c = model.arch.config;
    let (t, d, dh, a, inner) = (c.seq_len, c.model_dim, c.head_dim, c.heads, c.inner_dim());
    if data.seq_len != t || data.dim != d {
        return Err(Error::Shape(format!(
            "data is [T={}, D={}], model expects [T={t}, D={d}]",
            data.seq_len, data.dim
        )));
    }
    let n = idx.len();
    if n == 0 {
        return LocalShare::new(vec![0], Vec::new());
    }
    let mlp = model.arch.nonlinearity == Nonlinearity::Mlp;
    let mut x = data.x.select_rows(idx)?.reshape(vec![n * t, d])?;
    let mask = data.mask.select_rows(idx)?;
    for (li, lw) in model.layers.iter().enumerate() {
        let qkv = p.matmul_batch("qkv", &[(&x, &lw.wq), (&x, &lw.wk), (&x, &lw.wv)])?;
        let mut proj = Vec::with_capacity(3);
        for (y, b) in qkv.iter().zip([&lw.bq, &lw.bk, &lw.bv]) {
            let bt = p.tile_rows(b, n * t, y.shape.clone())?;
            proj.push(p.add(y, &bt)?);
        }
        let (q, k, v) = (&proj[0], &proj[1], &proj[2]);

        let mut qs = Vec::with_capacity(n * a);
        let mut kts = Vec::with_capacity(n * a);
        let mut vs = Vec::with_capacity(n * a);
        for e in 0..n {
            for h in 0..a {
                qs.push(block(q, inner, e * t, t, h * dh, dh));
                let kb = block(k, inner, e * t, t, h * dh, dh);
                kts.push(LocalShare::new(vec![dh, t], transpose(&kb.data, t, dh))?);
                vs.push(block(v, inner, e * t, t, h * dh, dh));
            }
        }
        let pairs: Vec<_> = qs.iter().zip(&kts).collect();
        let scores = p.matmul_batch("attn_matmul", &pairs)?;
        let mut flat = Vec::with_capacity(n * a * t * t);
        for (i, s) in scores.iter().enumerate() {
            let e = i / a;
            let m = &mask.data[e * t..(e + 1) * t];
            for row in s.data.chunks(t) {
                flat.extend(row.iter().zip(m).map(|(&x, &y)| x + y));
            }
        }
        let scores = LocalShare::new(vec![n * a * t, t], flat)?;
        let probs = if mlp {
            mlp_forward_mpc(p, "attn_softmax_mlp", &model.softmax[li], &scores)?
        } else {
            p.softmax("attn_softmax", &scores, t)?
        };
        let pblocks: Vec<LocalShare<W>> = (0..n * a).map(|i| block(&probs, t, i * t, t, 0, t)).collect();
        let pairs: Vec<_> = pblocks.iter().zip(&vs).collect();
        let heads = p.matmul_batch("attn_matmul", &pairs)?;
        let mut ctx = vec![Default::default(); n * t * inner];
        for (i, hb) in heads.iter().enumerate() {
            let (e, h) = (i / a, i % a);
            for r in 0..t {
                let dst = (e * t + r) * inner + h * dh;
                ctx[dst..dst + dh].copy_from_slice(&hb.data[r * dh..(r + 1) * dh]);
            }
        }
        let ctx = LocalShare::new(vec![n * t, inner], ctx)?;
        let attn = linear(p, "attn_out", &ctx, &lw.wo, &lw.bo)?;
        let res = p.add(&x, &attn)?;
        x = if mlp {
            ln_with_mlp(p, &res, d, &model.ln[li], &lw.gamma, &lw.beta)?
        } else {
            p.layernorm("layernorm", &res, d, &lw.gamma, &lw.beta, c.ln_eps)?
        };
    }
    let first: Vec<usize> = (0..n).map(|e| e * t).collect();
    let x0 = x.select_rows(&first)?;
    let logits = linear(p, "classifier", &x0, &model.cls_w, &model.cls_b)?;
    match &model.entropy {
        Some(m) if mlp => mlp_forward_mpc(p, "entropy_mlp", m, &logits)?.reshape(vec![n]),
        _ => p.entropy("entropy", &logits, c.classes),
    }
}

/// LayerNorm with the approximator producing `1/sqrt(var + eps)`.
fn ln_with_mlp<W: RingWord>(
    p: &mut Party<W>,
    x: &LocalShare<W>,
    d: usize,
    m: &SharedMlp<W>,
    gamma: &LocalShare<W>,
    beta: &LocalShare<W>,
) -> Result<LocalShare<W>> {
    const TAG: &str = "ln_mlp";
    let rows = x.len() / d;
    let inv = 1.0 / d as f64;
    let s = p.sum_rows(x, d)?;
    let mean = p.mul_public(TAG, &s, inv)?;
    let mb = p.broadcast_rows(&mean, d, x.shape.clone())?;
    let c = p.sub(x, &mb)?;
    let sq = p.mul(TAG, &c, &c)?;
    let ss = p.sum_rows(&sq, d)?;
    let var = p.mul_public(TAG, &ss, inv)?.reshape(vec![rows, 1])?;
    let r = mlp_forward_mpc(p, TAG, m, &var)?;
    let rb = p.broadcast_rows(&r, d, x.shape.clone())?;
    let g = p.tile_rows(gamma, rows, x.shape.clone())?;
    let y = p.mul(TAG, &c, &rb)?;
    let y = p.mul(TAG, &y, &g)?;
    let b = p.tile_rows(beta, rows, x.shape.clone())?;
    p.add(&y, &b)
}
