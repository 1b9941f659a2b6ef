//! Experiment configuration: a line-oriented grammar of `[section]` headers
//! and `key = value` lines. `#` starts a comment. Every key is optional;
//! [`ExperimentConfig::default`] documents the defaults and
//! [`ExperimentConfig::to_text`] echoes a config that parses back to itself.
//!
//! ```text
//! [run]
//! seed = 7
//! transport = loopback        # loopback | socket
//! variant = PMT               # P | PM | PMT | full
//! out = run
//!
//! [selection]
//! phases = 1,2,2,0.3; 2,4,16,0.5   # layers,heads,hidden,alpha per phase
//! bootstrap_fraction = 0.1
//! budget = none
//! batch_size = 4
//! appraisal = none            # none | open | threshold:X
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::approx::TrainConfig;
use crate::error::{Error, Result};
use crate::nn::{TransformerConfig, DEFAULT_LN_EPS, DEFAULT_MASK_VALUE};
use crate::protocols::{ComparisonCost, DomainPolicy, KernelIterations, ProtocolConfig};
use crate::proxy::ProxySpec;
use crate::ring::FixedPointCodec;
use crate::scheduler::{ComputeModel, SchedulerConfig};
use crate::selection::{AppraisalMode, Phase, PhasePlan};
use crate::session::{SessionConfig, TransportKind};
use crate::transport::NetworkModel;

/// Which pipeline a selection run uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    /// One phase with the largest proxy, iterative kernels.
    P,
    /// One phase with the largest proxy, MLP approximators.
    PM,
    /// Every phase, MLP approximators.
    #[default]
    PMT,
    /// PMT with batches overlapped and coalesced by the scheduler.
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::P, Variant::PM, Variant::PMT, Variant::Full];
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "P" => Ok(Variant::P),
            "PM" => Ok(Variant::PM),
            "PMT" => Ok(Variant::PMT),
            "full" => Ok(Variant::Full),
            _ => Err(Error::Config(format!("unknown variant '{s}' (P|PM|PMT|full)"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::P => "P",
            Variant::PM => "PM",
            Variant::PMT => "PMT",
            Variant::Full => "full",
        })
    }
}

/// Target model and dataset shape.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSection {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub seq_len: usize,
    pub classes: usize,
    pub ffn_dim: usize,
    pub mask_value: f64,
    pub ln_eps: f64,
    /// Dataset size.
    pub examples: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            layers: 2,
            heads: 4,
            dim: 16,
            seq_len: 16,
            classes: 4,
            ffn_dim: 32,
            mask_value: DEFAULT_MASK_VALUE,
            ln_eps: DEFAULT_LN_EPS,
            examples: 256,
        }
    }
}

impl ModelSection {
    pub fn transformer(&self) -> Result<TransformerConfig> {
        let mut c = TransformerConfig::new(self.layers, self.heads, self.dim, self.seq_len, self.classes)?;
        c.ffn_dim = self.ffn_dim;
        c.mask_value = self.mask_value;
        c.ln_eps = self.ln_eps;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Master seed; every random stream is a named substream of it.
    pub seed: u64,
    pub transport: TransportKind,
    pub variant: Variant,
    /// Output directory.
    pub out: PathBuf,
    pub frac_bits: u32,
    pub network: NetworkModel,
    pub comparison: ComparisonCost,
    pub iterations: KernelIterations,
    pub domain: DomainPolicy,
    pub model: ModelSection,
    pub plan: PhasePlan,
    /// Rows per secure forward pass; `None` runs a phase in one pass.
    pub batch_size: Option<usize>,
    pub appraisal: Option<AppraisalMode>,
    pub train: TrainConfig,
    pub scheduler: SchedulerConfig,
    /// Proxy shape for `bench`: layers and heads of the kernel baseline.
    pub bench_layers: usize,
    pub bench_heads: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 7,
            transport: TransportKind::Loopback,
            variant: Variant::PMT,
            out: PathBuf::from("run"),
            frac_bits: FixedPointCodec::default().frac_bits(),
            network: NetworkModel::default(),
            comparison: ComparisonCost::default(),
            iterations: KernelIterations::default(),
            domain: DomainPolicy::default(),
            model: ModelSection::default(),
            plan: PhasePlan {
                phases: vec![
                    Phase {
                        spec: ProxySpec::new(1, 2, 2),
                        alpha: 0.3,
                    },
                    Phase {
                        spec: ProxySpec::new(2, 4, 16),
                        alpha: 0.5,
                    },
                ],
                bootstrap_fraction: 0.1,
                budget: None,
            },
            batch_size: Some(4),
            appraisal: None,
            train: TrainConfig {
                samples: 1 << 14,
                epochs: 8,
                ..TrainConfig::default()
            },
            scheduler: SchedulerConfig::default(),
            bench_layers: 1,
            bench_heads: 1,
        }
    }
}

/// Raw `(section, key) -> (value, line)` entries.
type Entries = BTreeMap<(String, String), (String, usize)>;

fn lex(text: &str) -> Result<Entries> {
    let mut section = String::new();
    let mut out = Entries::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        let n = i + 1;
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| Error::Config(format!("line {n}: unterminated section header")))?;
            section = name.trim().to_string();
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {n}: expected key = value")))?;
        if section.is_empty() {
            return Err(Error::Config(format!("line {n}: key outside any section")));
        }
        let key = (section.clone(), k.trim().to_string());
        if out.contains_key(&key) {
            return Err(Error::Config(format!("line {n}: duplicate key {}.{}", key.0, key.1)));
        }
        out.insert(key, (v.trim().to_string(), n));
    }
    Ok(out)
}

struct Reader {
    entries: Entries,
}

impl Reader {
    fn take<T: FromStr>(&mut self, section: &str, key: &str, into: &mut T) -> Result<()>
    where
        T::Err: std::fmt::Display,
    {
        if let Some((v, line)) = self.entries.remove(&(section.into(), key.into())) {
            *into = v
                .parse()
                .map_err(|e| Error::Config(format!("line {line}: {section}.{key} = '{v}': {e}")))?;
        }
        Ok(())
    }

    fn take_with<T>(&mut self, section: &str, key: &str, into: &mut T, f: impl Fn(&str) -> Result<T>) -> Result<()> {
        if let Some((v, line)) = self.entries.remove(&(section.into(), key.into())) {
            *into = f(&v).map_err(|e| Error::Config(format!("line {line}: {section}.{key}: {e}")))?;
        }
        Ok(())
    }
}

fn optional<T: FromStr>(s: &str) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    if s == "none" {
        return Ok(None);
    }
    s.parse().map(Some).map_err(|e| Error::Config(format!("'{s}': {e}")))
}

fn show_optional<T: std::fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map_or("none".into(), |x| x.to_string())
}

fn parse_phases(s: &str) -> Result<Vec<Phase>> {
    s.split(';')
        .map(|p| {
            let f: Vec<&str> = p.split(',').map(str::trim).collect();
            if f.len() != 4 {
                return Err(Error::Config(format!(
                    "phase '{}' needs layers,heads,hidden,alpha",
                    p.trim()
                )));
            }
            let int = |x: &str| x.parse::<usize>().map_err(|e| Error::Config(format!("'{x}': {e}")));
            Ok(Phase {
                spec: ProxySpec::new(int(f[0])?, int(f[1])?, int(f[2])?),
                alpha: f[3].parse().map_err(|e| Error::Config(format!("'{}': {e}", f[3])))?,
            })
        })
        .collect()
}

fn parse_appraisal(s: &str) -> Result<Option<AppraisalMode>> {
    match s {
        "none" => Ok(None),
        "open" => Ok(Some(AppraisalMode::Open)),
        _ => match s.strip_prefix("threshold:") {
            Some(t) => t
                .parse()
                .map(|t| Some(AppraisalMode::Threshold(t)))
                .map_err(|e| Error::Config(format!("'{t}': {e}"))),
            None => Err(Error::Config(format!("'{s}' is not none, open or threshold:X"))),
        },
    }
}

fn parse_comparison(s: &str) -> Result<ComparisonCost> {
    if s == "analytic" {
        return Ok(ComparisonCost::Analytic);
    }
    let err = || Error::Config(format!("'{s}' is not analytic or fixed:ROUNDS:BYTES"));
    let rest = s.strip_prefix("fixed:").ok_or_else(err)?;
    let (r, b) = rest.split_once(':').ok_or_else(err)?;
    Ok(ComparisonCost::Fixed {
        rounds: r.parse().map_err(|_| err())?,
        bytes: b.parse().map_err(|_| err())?,
    })
}

fn parse_domain(s: &str) -> Result<DomainPolicy> {
    match s {
        "trusted" => Ok(DomainPolicy::Trusted),
        "permissive" => Ok(DomainPolicy::Permissive),
        "strict" => Ok(DomainPolicy::Strict),
        _ => Err(Error::Config(format!("'{s}' is not trusted, permissive or strict"))),
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = ExperimentConfig::default();
        let mut r = Reader { entries: lex(text)? };
        r.take("run", "seed", &mut c.seed)?;
        r.take("run", "transport", &mut c.transport)?;
        r.take("run", "variant", &mut c.variant)?;
        r.take("run", "out", &mut c.out)?;

        r.take("ring", "frac_bits", &mut c.frac_bits)?;
        r.take("network", "bandwidth", &mut c.network.bandwidth)?;
        r.take("network", "latency", &mut c.network.latency)?;

        r.take_with("protocol", "comparison", &mut c.comparison, parse_comparison)?;
        r.take_with("protocol", "domain", &mut c.domain, parse_domain)?;
        r.take("protocol", "exp_iterations", &mut c.iterations.exp)?;
        r.take("protocol", "reciprocal_iterations", &mut c.iterations.reciprocal)?;
        r.take("protocol", "rsqrt_iterations", &mut c.iterations.rsqrt)?;
        r.take("protocol", "log_iterations", &mut c.iterations.log)?;

        let m = &mut c.model;
        r.take("model", "layers", &mut m.layers)?;
        r.take("model", "heads", &mut m.heads)?;
        r.take("model", "dim", &mut m.dim)?;
        r.take("model", "seq_len", &mut m.seq_len)?;
        r.take("model", "classes", &mut m.classes)?;
        r.take("model", "ffn_dim", &mut m.ffn_dim)?;
        r.take("model", "mask_value", &mut m.mask_value)?;
        r.take("model", "ln_eps", &mut m.ln_eps)?;
        r.take("model", "examples", &mut m.examples)?;

        r.take_with("selection", "phases", &mut c.plan.phases, parse_phases)?;
        r.take("selection", "bootstrap_fraction", &mut c.plan.bootstrap_fraction)?;
        r.take_with("selection", "budget", &mut c.plan.budget, optional)?;
        r.take_with("selection", "batch_size", &mut c.batch_size, optional)?;
        r.take_with("selection", "appraisal", &mut c.appraisal, parse_appraisal)?;

        let t = &mut c.train;
        r.take("train", "samples", &mut t.samples)?;
        r.take("train", "learning_rate", &mut t.learning_rate)?;
        r.take("train", "momentum", &mut t.momentum)?;
        r.take("train", "epochs", &mut t.epochs)?;
        r.take("train", "batch_size", &mut t.batch_size)?;
        r.take("train", "holdout", &mut t.holdout)?;

        let s = &mut c.scheduler;
        r.take("scheduler", "latency_threshold", &mut s.latency_threshold)?;
        r.take("scheduler", "window", &mut s.window)?;
        r.take_with("scheduler", "memory_cap", &mut s.memory_cap, optional)?;
        r.take("scheduler", "flops_per_second", &mut s.compute.flops_per_second)?;

        r.take("bench", "layers", &mut c.bench_layers)?;
        r.take("bench", "heads", &mut c.bench_heads)?;

        if let Some(((sec, key), (_, line))) = r.entries.into_iter().next() {
            return Err(Error::Config(format!("line {line}: unknown key {sec}.{key}")));
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Checks every section; runs never start on an invalid config.
    pub fn validate(&self) -> Result<()> {
        self.codec()?;
        NetworkModel::new(self.network.bandwidth, self.network.latency)?;
        ComputeModel::new(self.scheduler.compute.flops_per_second)?;
        let target = self.model.transformer()?;
        if self.model.examples < 2 {
            return Err(Error::Config("need at least 2 examples".into()));
        }
        self.plan.validate_for(self.model.examples)?;
        for ph in &self.plan.phases {
            ph.spec.validate(&target)?;
        }
        if self.bench_layers > 0 {
            ProxySpec::new(self.bench_layers, self.bench_heads, 1).validate(&target)?;
        }
        if self.batch_size == Some(0) {
            return Err(Error::Config("selection batch size must be at least 1".into()));
        }
        if self.scheduler.window == 0 {
            return Err(Error::Config("scheduler window must be at least 1".into()));
        }
        let t = &self.train;
        if t.samples < 2 || t.epochs == 0 || t.batch_size == 0 {
            return Err(Error::Config(
                "training needs samples >= 2, epochs >= 1, batch_size >= 1".into(),
            ));
        }
        if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be > 0, got {}",
                t.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&t.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                t.momentum
            )));
        }
        if !(t.holdout > 0.0 && t.holdout < 1.0) {
            return Err(Error::Config(format!("holdout must lie in (0, 1), got {}", t.holdout)));
        }
        if let ComparisonCost::Fixed { rounds: 0, .. } = self.comparison {
            return Err(Error::Config("a fixed comparison cost needs at least one round".into()));
        }
        Ok(())
    }

    pub fn codec(&self) -> Result<FixedPointCodec> {
        FixedPointCodec::new(self.frac_bits)
    }

    pub fn protocol(&self) -> ProtocolConfig {
        ProtocolConfig {
            network: self.network,
            comparison_cost: self.comparison,
            iterations: self.iterations,
            domain: self.domain,
        }
    }

    /// Session settings for one secure run seeded with `seed`.
    pub fn session(&self, seed: u64) -> Result<SessionConfig> {
        Ok(SessionConfig {
            seed,
            codec: self.codec()?,
            protocol: self.protocol(),
            transport: self.transport,
            trace: false,
        })
    }

    /// The effective configuration, in the grammar [`parse`](Self::parse)
    /// reads.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut sec = |name: &str, kv: &[(&str, String)]| {
            let _ = writeln!(s, "[{name}]");
            for (k, v) in kv {
                let _ = writeln!(s, "{k} = {v}");
            }
            s.push('\n');
        };
        sec(
            "run",
            &[
                ("seed", self.seed.to_string()),
                ("transport", self.transport.to_string()),
                ("variant", self.variant.to_string()),
                ("out", self.out.display().to_string()),
            ],
        );
        sec("ring", &[("frac_bits", self.frac_bits.to_string())]);
        sec(
            "network",
            &[
                ("bandwidth", format!("{:?}", self.network.bandwidth)),
                ("latency", format!("{:?}", self.network.latency)),
            ],
        );
        let comparison = match self.comparison {
            ComparisonCost::Analytic => "analytic".to_string(),
            ComparisonCost::Fixed { rounds, bytes } => format!("fixed:{rounds}:{bytes}"),
        };
        let domain = match self.domain {
            DomainPolicy::Trusted => "trusted",
            DomainPolicy::Permissive => "permissive",
            DomainPolicy::Strict => "strict",
        };
        sec(
            "protocol",
            &[
                ("comparison", comparison),
                ("domain", domain.into()),
                ("exp_iterations", self.iterations.exp.to_string()),
                ("reciprocal_iterations", self.iterations.reciprocal.to_string()),
                ("rsqrt_iterations", self.iterations.rsqrt.to_string()),
                ("log_iterations", self.iterations.log.to_string()),
            ],
        );
        let m = &self.model;
        sec(
            "model",
            &[
                ("layers", m.layers.to_string()),
                ("heads", m.heads.to_string()),
                ("dim", m.dim.to_string()),
                ("seq_len", m.seq_len.to_string()),
                ("classes", m.classes.to_string()),
                ("ffn_dim", m.ffn_dim.to_string()),
                ("mask_value", format!("{:?}", m.mask_value)),
                ("ln_eps", format!("{:?}", m.ln_eps)),
                ("examples", m.examples.to_string()),
            ],
        );
        let phases = self
            .plan
            .phases
            .iter()
            .map(|p| format!("{},{},{},{:?}", p.spec.layers, p.spec.heads, p.spec.hidden, p.alpha))
            .collect::<Vec<_>>()
            .join("; ");
        let appraisal = match self.appraisal {
            None => "none".to_string(),
            Some(AppraisalMode::Open) => "open".into(),
            Some(AppraisalMode::Threshold(t)) => format!("threshold:{t:?}"),
        };
        sec(
            "selection",
            &[
                ("phases", phases),
                ("bootstrap_fraction", format!("{:?}", self.plan.bootstrap_fraction)),
                ("budget", show_optional(&self.plan.budget)),
                ("batch_size", show_optional(&self.batch_size)),
                ("appraisal", appraisal),
            ],
        );
        let t = &self.train;
        sec(
            "train",
            &[
                ("samples", t.samples.to_string()),
                ("learning_rate", format!("{:?}", t.learning_rate)),
                ("momentum", format!("{:?}", t.momentum)),
                ("epochs", t.epochs.to_string()),
                ("batch_size", t.batch_size.to_string()),
                ("holdout", format!("{:?}", t.holdout)),
            ],
        );
        let sc = &self.scheduler;
        sec(
            "scheduler",
            &[
                ("latency_threshold", sc.latency_threshold.to_string()),
                ("window", sc.window.to_string()),
                ("memory_cap", show_optional(&sc.memory_cap)),
                ("flops_per_second", format!("{:?}", sc.compute.flops_per_second)),
            ],
        );
        sec(
            "bench",
            &[
                ("layers", self.bench_layers.to_string()),
                ("heads", self.bench_heads.to_string()),
            ],
        );
        s.truncate(s.trim_end().len());
        s.push('\n');
        s
    }
}
