//! Small MLPs that stand in for nonlinear modules.
//!
//! Each approximator is `W2·relu(W1·x + b1) + b2`, trained on synthetic
//! inputs drawn from a Gaussian fitted to activations recorded at its site.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{Container, ModelKind};
use crate::nn::{self, Taps};
use crate::protocols::Party;
use crate::ring::{transpose, RingWord};
use crate::shares::{LocalShare, PartyId};

pub use crate::nn::Site;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianEstimate {
    pub mu: f64,
    pub sigma: f64,
}

/// Sample mean and population standard deviation.
pub fn estimate_gaussian(samples: &[f64]) -> Result<GaussianEstimate> {
    if samples.len() < 2 {
        return Err(Error::Config(format!(
            "need at least 2 samples to fit a Gaussian, got {}",
            samples.len()
        )));
    }
    let n = samples.len() as f64;
    let mu = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    Ok(GaussianEstimate { mu, sigma: var.sqrt() })
}

/// Input values of one site, padding excluded.
pub fn site_samples(taps: &Taps, site: Site, layer: Option<usize>) -> Vec<f64> {
    taps.site(site, layer)
        .flat_map(|r| r.input[..r.valid].iter().copied())
        .collect()
}

/// Shape parameters a site's synthetic rows need.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteShape {
    /// Softmax row length (`T`) or class count (`C`); 1 for `ln_recip`.
    pub width: usize,
    pub mask_value: f64,
    pub ln_eps: f64,
}

impl SiteShape {
    pub fn input_dim(&self, site: Site) -> usize {
        match site {
            Site::LnRecip => 1,
            _ => self.width,
        }
    }

    pub fn output_dim(&self, site: Site) -> usize {
        match site {
            Site::AttnSoftmax => self.width,
            _ => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    pub in_dim: usize,
    pub out_dim: usize,
    /// `[n × in_dim]`
    pub inputs: Vec<f64>,
    /// `[n × out_dim]`
    pub targets: Vec<f64>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.inputs.len() / self.in_dim
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// `n` synthetic input rows for `site`.
///
/// Softmax rows get the mask value added on a random-length padded tail, as
/// real attention rows do. Variances are redrawn until positive.
pub fn synthesize<R: Rng + ?Sized>(
    site: Site,
    est: GaussianEstimate,
    n: usize,
    shape: SiteShape,
    rng: &mut R,
) -> Vec<f64> {
    let draw = |rng: &mut R| -> f64 {
        if est.sigma == 0.0 {
            est.mu
        } else {
            Normal::new(est.mu, est.sigma).expect("finite sigma").sample(rng)
        }
    };
    let w = shape.input_dim(site);
    let mut out = Vec::with_capacity(n * w);
    for _ in 0..n {
        match site {
            Site::AttnSoftmax => {
                let len = rng.random_range(w.div_ceil(2).max(1)..=w);
                for j in 0..w {
                    let v = draw(rng);
                    out.push(if j < len { v } else { v + shape.mask_value });
                }
            }
            Site::LnRecip => {
                let mut v = draw(rng);
                let mut tries = 0;
                while v <= 0.0 && tries < 1000 {
                    v = draw(rng);
                    tries += 1;
                }
                out.push(if v > 0.0 { v } else { est.mu.abs().max(shape.ln_eps) });
            }
            Site::SoftmaxEntropy => out.extend((0..w).map(|_| draw(rng))),
        }
    }
    out
}

/// Exact targets for synthetic inputs.
pub fn make_targets(site: Site, inputs: Vec<f64>, shape: SiteShape) -> LabeledSet {
    let (i, o) = (shape.input_dim(site), shape.output_dim(site));
    let targets = inputs
        .chunks(i)
        .flat_map(|row| match site {
            Site::AttnSoftmax => nn::softmax(row),
            Site::LnRecip => vec![1.0 / (row[0] + shape.ln_eps).sqrt()],
            Site::SoftmaxEntropy => vec![nn::softmax_entropy(row)],
        })
        .collect();
    LabeledSet {
        in_dim: i,
        out_dim: o,
        inputs,
        targets,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpApprox {
    pub site: Site,
    pub layer: Option<usize>,
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
    /// `[hidden × input]`
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `[output × hidden]`
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl MlpApprox {
    pub fn zeros(site: Site, layer: Option<usize>, input: usize, hidden: usize, output: usize) -> Self {
        MlpApprox {
            site,
            layer,
            input,
            hidden,
            output,
            w1: vec![0.0; hidden * input],
            b1: vec![0.0; hidden],
            w2: vec![0.0; output * hidden],
            b2: vec![0.0; output],
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let h: Vec<f64> = (0..self.hidden)
            .map(|j| {
                let a: f64 = self.w1[j * self.input..(j + 1) * self.input]
                    .iter()
                    .zip(x)
                    .map(|(w, v)| w * v)
                    .sum::<f64>()
                    + self.b1[j];
                a.max(0.0)
            })
            .collect();
        (0..self.output)
            .map(|k| {
                self.w2[k * self.hidden..(k + 1) * self.hidden]
                    .iter()
                    .zip(&h)
                    .map(|(w, v)| w * v)
                    .sum::<f64>()
                    + self.b2[k]
            })
            .collect()
    }

    pub fn mse(&self, data: &LabeledSet) -> f64 {
        let mut s = 0.0;
        for (x, t) in data.inputs.chunks(data.in_dim).zip(data.targets.chunks(data.out_dim)) {
            s += self
                .forward(x)
                .iter()
                .zip(t)
                .map(|(y, t)| (y - t) * (y - t))
                .sum::<f64>();
        }
        s / (data.targets.len().max(1) as f64)
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    /// Tensors in the row-vector layout of the secure forward pass:
    /// `W1ᵀ [in×h]`, `b1`, `W2ᵀ [h×out]`, `b2`.
    pub fn mpc_tensors(&self) -> Vec<Vec<f64>> {
        vec![
            transpose(&self.w1, self.hidden, self.input),
            self.b1.clone(),
            transpose(&self.w2, self.output, self.hidden),
            self.b2.clone(),
        ]
    }

    pub fn mpc_shapes(input: usize, hidden: usize, output: usize) -> Vec<Vec<usize>> {
        vec![vec![input, hidden], vec![hidden], vec![hidden, output], vec![output]]
    }

    pub fn to_container(&self) -> Container {
        Container {
            kind: ModelKind::Mlp,
            config: vec![
                self.site.code(),
                self.layer.map_or(u64::MAX, |l| l as u64),
                self.input as u64,
                self.hidden as u64,
                self.output as u64,
            ],
            weights: [&self.w1[..], &self.b1, &self.w2, &self.b2].concat(),
        }
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind != ModelKind::Mlp || c.config.len() != 5 {
            return Err(Error::Format("not an MLP container".into()));
        }
        let site = Site::from_code(c.config[0])?;
        let layer = (c.config[1] != u64::MAX).then_some(c.config[1] as usize);
        let (i, h, o) = (c.config[2] as usize, c.config[3] as usize, c.config[4] as usize);
        let mut m = MlpApprox::zeros(site, layer, i, h, o);
        if c.weights.len() != m.param_count() {
            return Err(Error::Format(format!(
                "MLP has {} weights, dims imply {}",
                c.weights.len(),
                m.param_count()
            )));
        }
        let (w1, rest) = c.weights.split_at(h * i);
        let (b1, rest) = rest.split_at(h);
        let (w2, b2) = rest.split_at(o * h);
        m.w1 = w1.to_vec();
        m.b1 = b1.to_vec();
        m.w2 = w2.to_vec();
        m.b2 = b2.to_vec();
        Ok(m)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub samples: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub holdout: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            samples: 1 << 17,
            learning_rate: 0.01,
            momentum: 0.9,
            epochs: 4,
            batch_size: 64,
            holdout: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_mse: f64,
    pub heldout_mse: f64,
    pub samples: usize,
}

/// Per-column mean and scale; constant columns get scale 0.
fn column_stats(rows: &[f64], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let n = (rows.len() / dim) as f64;
    let mut mean = vec![0.0; dim];
    for r in rows.chunks(dim) {
        mean.iter_mut().zip(r).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; dim];
    for r in rows.chunks(dim) {
        for j in 0..dim {
            var[j] += (r[j] - mean[j]).powi(2);
        }
    }
    let sd = var
        .iter()
        .map(|v| (v / n).sqrt())
        .map(|s| if s > 1e-12 { s } else { 0.0 })
        .collect();
    (mean, sd)
}

/// Mini-batch SGD with momentum on mean squared error.
///
/// Inputs and targets are standardized per column during training and the
/// affine maps folded back into the returned weights.
pub fn train_mlp(
    site: Site,
    layer: Option<usize>,
    data: &LabeledSet,
    hidden: usize,
    cfg: &TrainConfig,
) -> Result<(MlpApprox, TrainReport)> {
    if data.is_empty() || hidden == 0 {
        return Err(Error::Training("empty training set or zero hidden width".into()));
    }
    let (din, dout) = (data.in_dim, data.out_dim);
    let n = data.len();
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_hold = ((n as f64) * cfg.holdout).round() as usize;
    let n_hold = n_hold.min(n.saturating_sub(1));
    let (hold_idx, train_idx) = order.split_at(n_hold);
    let pick = |idx: &[usize], src: &[f64], dim: usize| -> Vec<f64> {
        idx.iter()
            .flat_map(|&i| src[i * dim..(i + 1) * dim].iter().copied())
            .collect()
    };
    let train = LabeledSet {
        in_dim: din,
        out_dim: dout,
        inputs: pick(train_idx, &data.inputs, din),
        targets: pick(train_idx, &data.targets, dout),
    };
    let hold = LabeledSet {
        in_dim: din,
        out_dim: dout,
        inputs: pick(hold_idx, &data.inputs, din),
        targets: pick(hold_idx, &data.targets, dout),
    };

    let (xm, xs) = column_stats(&train.inputs, din);
    let (ym, ys) = column_stats(&train.targets, dout);
    let inv = |s: f64| if s > 0.0 { 1.0 / s } else { 0.0 };
    let xn: Vec<f64> = train
        .inputs
        .chunks(din)
        .flat_map(|r| (0..din).map(|j| (r[j] - xm[j]) * inv(xs[j])).collect::<Vec<_>>())
        .collect();
    let yn: Vec<f64> = train
        .targets
        .chunks(dout)
        .flat_map(|r| (0..dout).map(|j| (r[j] - ym[j]) * inv(ys[j])).collect::<Vec<_>>())
        .collect();

    // He init for the ReLU layer, fan-in scaling for the output layer
    let mut m = MlpApprox::zeros(site, layer, din, hidden, dout);
    let n1 = Normal::new(0.0, (2.0 / din as f64).sqrt()).expect("positive std");
    let n2 = Normal::new(0.0, (1.0 / hidden as f64).sqrt()).expect("positive std");
    m.w1.iter_mut().for_each(|w| *w = n1.sample(&mut rng));
    m.w2.iter_mut().for_each(|w| *w = n2.sample(&mut rng));
    // spread the hinges over the standardized input range; zero biases put
    // every hinge of a 1-d site at the mean
    let nb = Normal::new(0.0, 1.0).expect("positive std");
    m.b1.iter_mut().for_each(|b| *b = nb.sample(&mut rng));

    let mut v_w1 = vec![0.0; m.w1.len()];
    let mut v_b1 = vec![0.0; m.b1.len()];
    let mut v_w2 = vec![0.0; m.w2.len()];
    let mut v_b2 = vec![0.0; m.b2.len()];
    let mut g_w1 = vec![0.0; m.w1.len()];
    let mut g_b1 = vec![0.0; m.b1.len()];
    let mut g_w2 = vec![0.0; m.w2.len()];
    let mut g_b2 = vec![0.0; m.b2.len()];
    let mut a = vec![0.0; hidden];
    let mut gy = vec![0.0; dout];
    let mut ga = vec![0.0; hidden];

    let nt = train.len();
    let mut idx: Vec<usize> = (0..nt).collect();
    let bs = cfg.batch_size.max(1);
    // cosine decay to zero over the whole run
    let total_steps = (cfg.epochs * nt.div_ceil(bs)).max(1) as f64;
    let mut t = 0usize;
    for epoch in 0..cfg.epochs {
        idx.shuffle(&mut rng);
        for (bi, batch) in idx.chunks(bs).enumerate() {
            let lr = cfg.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * t as f64 / total_steps).cos());
            t += 1;
            g_w1.iter_mut().for_each(|g| *g = 0.0);
            g_b1.iter_mut().for_each(|g| *g = 0.0);
            g_w2.iter_mut().for_each(|g| *g = 0.0);
            g_b2.iter_mut().for_each(|g| *g = 0.0);
            let scale = 2.0 / (batch.len() * dout) as f64;
            let mut loss = 0.0;
            for &s in batch {
                let x = &xn[s * din..(s + 1) * din];
                let t = &yn[s * dout..(s + 1) * dout];
                for j in 0..hidden {
                    let row = &m.w1[j * din..(j + 1) * din];
                    a[j] = row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + m.b1[j];
                }
                for k in 0..dout {
                    let row = &m.w2[k * hidden..(k + 1) * hidden];
                    let y = row.iter().zip(&a).map(|(w, &v)| w * v.max(0.0)).sum::<f64>() + m.b2[k];
                    let e = y - t[k];
                    loss += e * e;
                    gy[k] = scale * e;
                }
                ga.iter_mut().for_each(|g| *g = 0.0);
                for k in 0..dout {
                    let g = gy[k];
                    g_b2[k] += g;
                    let row = &m.w2[k * hidden..(k + 1) * hidden];
                    let grow = &mut g_w2[k * hidden..(k + 1) * hidden];
                    for j in 0..hidden {
                        grow[j] += g * a[j].max(0.0);
                        ga[j] += g * row[j];
                    }
                }
                for j in 0..hidden {
                    if a[j] <= 0.0 {
                        continue;
                    }
                    let g = ga[j];
                    g_b1[j] += g;
                    g_w1[j * din..(j + 1) * din]
                        .iter_mut()
                        .zip(x)
                        .for_each(|(gw, v)| *gw += g * v);
                }
            }
            if !loss.is_finite() {
                return Err(Error::Training(format!(
                    "{} loss diverged at epoch {epoch}, batch {bi} (learning rate {})",
                    site.name(),
                    cfg.learning_rate
                )));
            }
            let step = |p: &mut [f64], v: &mut [f64], g: &[f64]| {
                for ((p, v), g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                    *v = cfg.momentum * *v - lr * g;
                    *p += *v;
                }
            };
            step(&mut m.w1, &mut v_w1, &g_w1);
            step(&mut m.b1, &mut v_b1, &g_b1);
            step(&mut m.w2, &mut v_w2, &g_w2);
            step(&mut m.b2, &mut v_b2, &g_b2);
        }
    }

    // fold the standardization back into the weights
    for j in 0..hidden {
        let mut shift = 0.0;
        for i in 0..din {
            let w = m.w1[j * din + i] * inv(xs[i]);
            shift += w * xm[i];
            m.w1[j * din + i] = w;
        }
        m.b1[j] -= shift;
    }
    for k in 0..dout {
        for j in 0..hidden {
            m.w2[k * hidden + j] *= ys[k];
        }
        m.b2[k] = m.b2[k] * ys[k] + ym[k];
    }
    if m.w1
        .iter()
        .chain(&m.w2)
        .chain(&m.b1)
        .chain(&m.b2)
        .any(|v| !v.is_finite())
    {
        return Err(Error::Training(format!("{} weights are not finite", site.name())));
    }
    let report = TrainReport {
        train_mse: m.mse(&train),
        heldout_mse: if hold.is_empty() { f64::NAN } else { m.mse(&hold) },
        samples: n,
    };
    Ok((m, report))
}

/// Fits, synthesizes and trains the approximator for one site of one layer.
pub fn fit_site(
    taps: &Taps,
    site: Site,
    layer: Option<usize>,
    hidden: usize,
    shape: SiteShape,
    cfg: &TrainConfig,
) -> Result<(MlpApprox, TrainReport, GaussianEstimate)> {
    let est = estimate_gaussian(&site_samples(taps, site, layer))?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed ^ 0x5EED);
    let inputs = synthesize(site, est, cfg.samples, shape, &mut rng);
    let data = make_targets(site, inputs, shape);
    let (m, r) = train_mlp(site, layer, &data, hidden, cfg)?;
    Ok((m, r, est))
}

/// An approximator's weights as shares.
#[derive(Clone, Debug)]
pub struct SharedMlp<W: RingWord = u64> {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
    pub w1t: LocalShare<W>,
    pub b1: LocalShare<W>,
    pub w2t: LocalShare<W>,
    pub b2: LocalShare<W>,
}

impl<W: RingWord> SharedMlp<W> {
    /// Builds from the four tensors produced by sharing
    /// [`MlpApprox::mpc_tensors`].
    pub fn from_parts(input: usize, hidden: usize, output: usize, mut parts: Vec<LocalShare<W>>) -> Result<Self> {
        if parts.len() != 4 {
            return Err(Error::Shape(format!("MLP needs 4 tensors, got {}", parts.len())));
        }
        let b2 = parts.pop().expect("4 parts");
        let w2t = parts.pop().expect("4 parts");
        let b1 = parts.pop().expect("4 parts");
        let w1t = parts.pop().expect("4 parts");
        Ok(SharedMlp {
            input,
            hidden,
            output,
            w1t,
            b1,
            w2t,
            b2,
        })
    }

    /// Shares a model owner's approximator; the peer passes `None`.
    pub fn input(p: &mut Party<W>, tag: &str, dims: (usize, usize, usize), mlp: Option<&MlpApprox>) -> Result<Self> {
        let (i, h, o) = dims;
        let vals = mlp.map(|m| m.mpc_tensors());
        let parts = p.input_many(
            tag,
            PartyId::ModelOwner,
            vals.as_deref(),
            &MlpApprox::mpc_shapes(i, h, o),
        )?;
        Self::from_parts(i, h, o, parts)
    }
}

/// Secure forward pass of an approximator over `rows` rows of `x`.
pub fn mlp_forward_mpc<W: RingWord>(
    p: &mut Party<W>,
    tag: &str,
    m: &SharedMlp<W>,
    x: &LocalShare<W>,
) -> Result<LocalShare<W>> {
    if !x.len().is_multiple_of(m.input) {
        return Err(Error::Shape(format!(
            "{} inputs do not split into rows of {}",
            x.len(),
            m.input
        )));
    }
    let rows = x.len() / m.input;
    let x = x.clone().reshape(vec![rows, m.input])?;
    let h = p.matmul(tag, &x, &m.w1t)?;
    let b1 = p.tile_rows(&m.b1, rows, vec![rows, m.hidden])?;
    let h = p.add(&h, &b1)?;
    let h = p.relu(tag, &h)?;
    let y = p.matmul(tag, &h, &m.w2t)?;
    let b2 = p.tile_rows(&m.b2, rows, vec![rows, m.output])?;
    p.add(&y, &b2)
}
