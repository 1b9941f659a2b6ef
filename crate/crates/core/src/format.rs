//! Binary model and dataset containers.
//!
//! Model file (`SFMT`), all integers little-endian:
//!
//! ```text
//! "SFMT" | version: u8 | kind: u8 | n_config: u64 | config: n_config × u64
//!        | n_weights: u64 | weights: n_weights × f64
//! ```
//!
//! Dataset file (`SFDS`):
//!
//! ```text
//! "SFDS" | version: u8 | B: u64 | T: u64 | D: u64 | mode: u64
//!        | B × ( len: u64 | T·D × f64 )
//! ```
//!
//! Token datasets (mode 1) store ids as `f64` with `D = 1`.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{Dataset, DatasetMode, Example, TransformerConfig, TransformerWeights};

pub const MODEL_MAGIC: &[u8; 4] = b"SFMT";
pub const DATASET_MAGIC: &[u8; 4] = b"SFDS";
pub const VERSION: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Transformer = 0,
    Mlp = 1,
    Proxy = 2,
}

impl ModelKind {
    fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(ModelKind::Transformer),
            1 => Ok(ModelKind::Mlp),
            2 => Ok(ModelKind::Proxy),
            _ => Err(Error::Format(format!("unknown model kind {b}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: ModelKind,
    pub config: Vec<u64>,
    pub weights: Vec<f64>,
}

impl Container {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(22 + 8 * (self.config.len() + self.weights.len()));
        out.extend_from_slice(MODEL_MAGIC);
        out.push(VERSION);
        out.push(self.kind as u8);
        out.extend_from_slice(&(self.config.len() as u64).to_le_bytes());
        for w in &self.config {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out.extend_from_slice(&(self.weights.len() as u64).to_le_bytes());
        for w in &self.weights {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = WordReader::new(bytes);
        r.magic(MODEL_MAGIC)?;
        let kind = ModelKind::from_byte(r.byte()?)?;
        let n = r.len_word()?;
        let config = (0..n).map(|_| r.u64()).collect::<Result<_>>()?;
        let n = r.len_word()?;
        let weights = (0..n).map(|_| r.f64()).collect::<Result<_>>()?;
        r.finish()?;
        Ok(Container { kind, config, weights })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::File::create(path)?.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

struct WordReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> WordReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        WordReader { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::Format(format!("file truncated at byte {}", self.pos)))?;
        self.pos += n;
        Ok(s)
    }

    fn magic(&mut self, m: &[u8; 4]) -> Result<()> {
        if self.take(4)? != m {
            return Err(Error::Format(format!(
                "bad magic, expected {}",
                String::from_utf8_lossy(m)
            )));
        }
        let v = self.byte()?;
        if v != VERSION {
            return Err(Error::Format(format!("unsupported version {v}")));
        }
        Ok(())
    }

    fn byte(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    /// A count that must fit in the remaining bytes.
    fn len_word(&mut self) -> Result<usize> {
        let n = self.u64()?;
        if n > ((self.bytes.len() - self.pos) / 8) as u64 {
            return Err(Error::Format(format!("count {n} exceeds file size")));
        }
        Ok(n as usize)
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

pub(crate) fn config_words(c: &TransformerConfig) -> Vec<u64> {
    vec![
        c.layers as u64,
        c.heads as u64,
        c.model_dim as u64,
        c.head_dim as u64,
        c.seq_len as u64,
        c.classes as u64,
        c.mask_value.to_bits(),
        c.ln_eps.to_bits(),
        c.ffn_dim as u64,
    ]
}

pub(crate) const CONFIG_WORDS: usize = 9;

pub(crate) fn config_from_words(w: &[u64]) -> Result<TransformerConfig> {
    if w.len() < CONFIG_WORDS {
        return Err(Error::Format("config block too short".into()));
    }
    let c = TransformerConfig {
        layers: w[0] as usize,
        heads: w[1] as usize,
        model_dim: w[2] as usize,
        head_dim: w[3] as usize,
        seq_len: w[4] as usize,
        classes: w[5] as usize,
        mask_value: f64::from_bits(w[6]),
        ln_eps: f64::from_bits(w[7]),
        ffn_dim: w[8] as usize,
    };
    c.validate()?;
    Ok(c)
}

impl TransformerWeights {
    pub fn to_container(&self) -> Container {
        let mut config = config_words(&self.config);
        config.push(self.vocab() as u64);
        Container {
            kind: ModelKind::Transformer,
            config,
            weights: self.flatten(),
        }
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind != ModelKind::Transformer {
            return Err(Error::Format(format!("expected a transformer, found {:?}", c.kind)));
        }
        if c.config.len() != CONFIG_WORDS + 1 {
            return Err(Error::Format("transformer config block has the wrong size".into()));
        }
        let cfg = config_from_words(&c.config)?;
        TransformerWeights::unflatten(cfg, c.config[CONFIG_WORDS] as usize, &c.weights)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}

impl Dataset {
    pub fn to_bytes(&self) -> Vec<u8> {
        let row = self.seq_len * self.dim;
        let mut out = Vec::with_capacity(37 + self.len() * 8 * (row + 1));
        out.extend_from_slice(DATASET_MAGIC);
        out.push(VERSION);
        let mode = match self.mode {
            DatasetMode::Embedded => 0u64,
            DatasetMode::Tokens => 1,
        };
        for w in [self.len() as u64, self.seq_len as u64, self.dim as u64, mode] {
            out.extend_from_slice(&w.to_le_bytes());
        }
        for ex in &self.examples {
            out.extend_from_slice(&(ex.len as u64).to_le_bytes());
            for v in &ex.x {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = WordReader::new(bytes);
        r.magic(DATASET_MAGIC)?;
        let b = r.u64()? as usize;
        let t = r.u64()? as usize;
        let d = r.u64()? as usize;
        let mode = match r.u64()? {
            0 => DatasetMode::Embedded,
            1 => DatasetMode::Tokens,
            m => return Err(Error::Format(format!("unknown dataset mode {m}"))),
        };
        let row = t
            .checked_mul(d)
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Format("degenerate dataset dimensions".into()))?;
        let expected = b
            .checked_mul(8 * (row + 1))
            .ok_or_else(|| Error::Format("dataset size overflows".into()))?;
        if bytes.len() - r.pos != expected {
            return Err(Error::Format(format!(
                "dataset body is {} bytes, header implies {expected}",
                bytes.len() - r.pos
            )));
        }
        let mut examples = Vec::with_capacity(b);
        for _ in 0..b {
            let len = r.u64()? as usize;
            if len > t {
                return Err(Error::Format(format!("row length {len} exceeds T = {t}")));
            }
            let x = (0..row).map(|_| r.f64()).collect::<Result<_>>()?;
            examples.push(Example { len, x });
        }
        Ok(Dataset {
            seq_len: t,
            dim: d,
            mode,
            examples,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::File::create(path)?.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
