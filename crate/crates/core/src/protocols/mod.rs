//! Two-party protocols over additive shares.
//!
//! A [`Party`] is one side of the computation: it owns its half of every
//! secret, its end of the channel, its view of the dealer stream and its cost
//! ledger. Both parties execute the same sequence of calls; every exchange is
//! checked for tag and sequence agreement.

mod arith;
mod compare;
mod composite;
mod kernels;

pub use kernels::{KernelDomain, EXP_DOMAIN, LOG_DOMAIN, RECIPROCAL_DOMAIN, RSQRT_DOMAIN};

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ring::{FixedPointCodec, RingElement, RingWord};
use crate::shares::{BeaverTriple, LocalShare, PartyId, StreamKind, TripleDealer};
use crate::transport::{tag_fingerprint, CostLedger, Message, NetworkModel, RevealKind, TagCost, Transport};

/// How sign extractions (comparisons, ReLU, max) are charged to the ledger.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ComparisonCost {
    /// A fixed cost per batch of comparisons: `rounds` per batch and
    /// `bytes` (both directions) per scalar comparison.
    Fixed { rounds: u64, bytes: u64 },
    /// Whatever the protocol actually exchanges.
    Analytic,
}

impl Default for ComparisonCost {
    /// 8 rounds and 432 bytes per comparison.
    fn default() -> Self {
        ComparisonCost::Fixed { rounds: 8, bytes: 432 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelIterations {
    /// Squarings in the limit approximation `(1 + x/2^n)^(2^n)`.
    pub exp: u32,
    pub reciprocal: u32,
    pub rsqrt: u32,
    pub log: u32,
}

impl Default for KernelIterations {
    fn default() -> Self {
        KernelIterations {
            exp: 8,
            reciprocal: 10,
            rsqrt: 10,
            log: 15,
        }
    }
}

/// What a baseline kernel does with inputs outside its convergence domain.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum DomainPolicy {
    /// The caller guarantees the domain; no check, no extra cost.
    #[default]
    Trusted,
    /// Securely clamp into the domain (two extra sign extractions).
    Permissive,
    /// Open per-element violation bits and fail on any. Diagnostic only: the
    /// opened bits are logged as intermediate reveals.
    Strict,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct ProtocolConfig {
    pub network: NetworkModel,
    pub comparison_cost: ComparisonCost,
    pub iterations: KernelIterations,
    pub domain: DomainPolicy,
}

/// Correlated randomness consumed by a party.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub triples: u64,
    pub matmul_triple_words: u64,
    pub truncation_pairs: u64,
    pub and_triples: u64,
    pub random_bits: u64,
}

/// A party's half of a batch of elementwise Beaver triples.
#[derive(Debug)]
pub struct TripleBatch<W: RingWord = u64> {
    id: u64,
    a: Vec<RingElement<W>>,
    b: Vec<RingElement<W>>,
    c: Vec<RingElement<W>>,
    cursor: usize,
}

impl<W: RingWord> TripleBatch<W> {
    pub fn from_dealt(t: &BeaverTriple<W>, party: PartyId) -> Self {
        let i = party.index();
        TripleBatch {
            id: t.id,
            a: t.a.shares[i].clone(),
            b: t.b.shares[i].clone(),
            c: t.c.shares[i].clone(),
            cursor: 0,
        }
    }

    pub fn remaining(&self) -> usize {
        self.a.len() - self.cursor
    }
}

pub(crate) enum Charging {
    Normal,
    Deferred(TagCost),
}

pub struct Party<W: RingWord = u64> {
    id: PartyId,
    link: Box<dyn Transport>,
    dealer: TripleDealer<W>,
    rng: ChaCha20Rng,
    codec: FixedPointCodec,
    cfg: ProtocolConfig,
    ledger: CostLedger,
    seq: u32,
    flops: u64,
    charging: Charging,
    consumed: BTreeMap<u64, u64>,
    usage: Usage,
}

impl<W: RingWord> Party<W> {
    /// `dealer_seed` must be identical on both sides; `private_seed` should
    /// differ.
    pub fn new(
        id: PartyId,
        link: Box<dyn Transport>,
        dealer_seed: u64,
        private_seed: u64,
        codec: FixedPointCodec,
        cfg: ProtocolConfig,
    ) -> Self {
        Party {
            id,
            link,
            dealer: TripleDealer::new(dealer_seed),
            rng: ChaCha20Rng::seed_from_u64(private_seed),
            codec,
            cfg,
            ledger: CostLedger::new(cfg.network),
            seq: 0,
            flops: 0,
            charging: Charging::Normal,
            consumed: BTreeMap::new(),
            usage: Usage::default(),
        }
    }

    #[inline]
    pub fn id(&self) -> PartyId {
        self.id
    }

    #[inline]
    pub fn is_leader(&self) -> bool {
        self.id == PartyId::ModelOwner
    }

    pub fn codec(&self) -> &FixedPointCodec {
        &self.codec
    }

    pub fn config(&self) -> &ProtocolConfig {
        &self.cfg
    }

    pub fn config_mut(&mut self) -> &mut ProtocolConfig {
        &mut self.cfg
    }

    pub fn ledger(&self) -> &CostLedger {
        &self.ledger
    }

    pub fn ledger_mut(&mut self) -> &mut CostLedger {
        &mut self.ledger
    }

    pub fn take_ledger(&mut self) -> CostLedger {
        std::mem::replace(&mut self.ledger, CostLedger::new(self.cfg.network))
    }

    pub fn usage(&self) -> Usage {
        self.usage
    }

    pub fn dealer(&self) -> &TripleDealer<W> {
        &self.dealer
    }

    pub(crate) fn add_flops(&mut self, n: u64) {
        self.flops += n;
    }

    // ---- channel ----------------------------------------------------------

    /// One synchronized round: sends `payload`, returns the peer's payload.
    pub fn exchange_words(&mut self, tag: &str, payload: &[W]) -> Result<Vec<W>> {
        let fp = tag_fingerprint(tag);
        let seq = self.seq;
        self.seq = self.seq.wrapping_add(1);
        let msg = Message {
            tag: fp,
            seq,
            words: payload.iter().map(|w| w.to_u64()).collect(),
        };
        let theirs = match self.id {
            PartyId::ModelOwner => {
                self.link.send(msg)?;
                self.link.recv()?
            }
            PartyId::DataOwner => {
                let m = self.link.recv()?;
                self.link.send(msg)?;
                m
            }
        };
        if theirs.tag != fp || theirs.seq != seq {
            return Err(Error::Desync(format!(
                "expected '{tag}' #{seq}, peer sent fingerprint {:#010x} #{}",
                theirs.tag, theirs.seq
            )));
        }
        let sent = 8 * payload.len() as u64;
        let received = 8 * theirs.words.len() as u64;
        let flops = std::mem::take(&mut self.flops);
        match &mut self.charging {
            Charging::Normal => self.ledger.record_round(tag, sent, received, flops),
            Charging::Deferred(acc) => {
                acc.rounds += 1;
                acc.bytes += sent + received;
                acc.max_dir_bytes += sent.max(received);
                acc.seconds += crate::transport::simulated_time(1, sent.max(received), &self.cfg.network);
                self.flops += flops;
            }
        }
        Ok(theirs.words.into_iter().map(W::from_u64).collect())
    }

    pub fn exchange(&mut self, tag: &str, payload: &[RingElement<W>]) -> Result<Vec<RingElement<W>>> {
        let words: Vec<W> = payload.iter().map(|r| r.0).collect();
        Ok(self.exchange_words(tag, &words)?.into_iter().map(RingElement).collect())
    }

    /// Opens masked values (never secrets): both shares are summed.
    pub(crate) fn open_masked(&mut self, tag: &str, mine: &[RingElement<W>]) -> Result<Vec<RingElement<W>>> {
        let theirs = self.exchange(tag, mine)?;
        if theirs.len() != mine.len() {
            return Err(Error::Desync(format!(
                "'{tag}': opened {} words, peer opened {}",
                mine.len(),
                theirs.len()
            )));
        }
        Ok(mine.iter().zip(&theirs).map(|(&a, &b)| a + b).collect())
    }

    pub(crate) fn open_xor(&mut self, tag: &str, mine: &[W]) -> Result<Vec<W>> {
        let theirs = self.exchange_words(tag, mine)?;
        if theirs.len() != mine.len() {
            return Err(Error::Desync(format!(
                "'{tag}': opened {} words, peer opened {}",
                mine.len(),
                theirs.len()
            )));
        }
        Ok(mine.iter().zip(&theirs).map(|(&a, &b)| a.xor(b)).collect())
    }

    /// Runs `f` with its rounds held back from the ledger; returns the
    /// result and what the rounds would have cost.
    pub(crate) fn deferred<R>(&mut self, f: impl FnOnce(&mut Self) -> Result<R>) -> Result<(R, TagCost)> {
        let prev = std::mem::replace(&mut self.charging, Charging::Deferred(TagCost::default()));
        let out = f(self);
        let acc = match std::mem::replace(&mut self.charging, prev) {
            Charging::Deferred(acc) => acc,
            Charging::Normal => unreachable!("deferred block reset charging"),
        };
        Ok((out?, acc))
    }

    // ---- inputs and outputs -------------------------------------------------

    /// Secret-shares `values`, owned by `owner`, into the computation. The
    /// non-owner passes `None`.
    pub fn input(
        &mut self,
        tag: &str,
        owner: PartyId,
        values: Option<&[f64]>,
        shape: Vec<usize>,
    ) -> Result<LocalShare<W>> {
        let enc = match values {
            Some(v) if self.id == owner => Some(self.codec.encode_slice::<W>(v)?),
            None if self.id != owner => None,
            _ => return Err(Error::Config(format!("'{tag}': only the owner supplies input values"))),
        };
        self.input_ring(tag, owner, enc.as_deref(), shape)
    }

    pub fn input_ring(
        &mut self,
        tag: &str,
        owner: PartyId,
        values: Option<&[RingElement<W>]>,
        shape: Vec<usize>,
    ) -> Result<LocalShare<W>> {
        let n: usize = shape.iter().product();
        if self.id == owner {
            let v = values.ok_or_else(|| Error::Config(format!("'{tag}': owner has no values")))?;
            if v.len() != n {
                return Err(Error::Shape(format!("'{tag}': {} values for shape {shape:?}", v.len())));
            }
            let mask: Vec<RingElement<W>> = (0..n).map(|_| RingElement::random(&mut self.rng)).collect();
            self.exchange(tag, &mask)?;
            let mine = v.iter().zip(&mask).map(|(&x, &r)| x - r).collect();
            LocalShare::new(shape, mine)
        } else {
            let got = self.exchange(tag, &[])?;
            if got.len() != n {
                return Err(Error::Desync(format!(
                    "'{tag}': expected {n} shares, received {}",
                    got.len()
                )));
            }
            LocalShare::new(shape, got)
        }
    }

    /// Shares several tensors from `owner` in a single round.
    pub fn input_many(
        &mut self,
        tag: &str,
        owner: PartyId,
        values: Option<&[Vec<f64>]>,
        shapes: &[Vec<usize>],
    ) -> Result<Vec<LocalShare<W>>> {
        let flat: Option<Vec<f64>> = values.map(|vs| vs.concat());
        if let Some(vs) = values {
            for (v, s) in vs.iter().zip(shapes) {
                if v.len() != s.iter().product::<usize>() {
                    return Err(Error::Shape(format!("'{tag}': {} values for shape {s:?}", v.len())));
                }
            }
            if vs.len() != shapes.len() {
                return Err(Error::Shape(format!(
                    "'{tag}': {} tensors for {} shapes",
                    vs.len(),
                    shapes.len()
                )));
            }
        }
        let total: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
        let all = self.input(tag, owner, flat.as_deref(), vec![total])?;
        let mut off = 0;
        shapes
            .iter()
            .map(|s| {
                let n: usize = s.iter().product();
                let t = LocalShare::new(s.clone(), all.data[off..off + n].to_vec());
                off += n;
                t
            })
            .collect()
    }

    /// Opens a shared tensor to both parties and records the reveal.
    pub fn reveal(&mut self, tag: &str, x: &LocalShare<W>, kind: RevealKind) -> Result<Vec<f64>> {
        let ring = self.reveal_ring(tag, x, kind)?;
        Ok(self.codec.decode_slice(&ring))
    }

    pub fn reveal_ring(&mut self, tag: &str, x: &LocalShare<W>, kind: RevealKind) -> Result<Vec<RingElement<W>>> {
        let out = self.open_masked(tag, &x.data)?;
        self.ledger.reveals_mut().push(tag, kind, x.len() as u64);
        Ok(out)
    }

    // ---- local linear operations -------------------------------------------

    fn same_shape(x: &LocalShare<W>, y: &LocalShare<W>) -> Result<()> {
        if x.shape != y.shape {
            return Err(Error::Shape(format!("{:?} vs {:?}", x.shape, y.shape)));
        }
        Ok(())
    }

    pub fn add(&mut self, x: &LocalShare<W>, y: &LocalShare<W>) -> Result<LocalShare<W>> {
        Self::same_shape(x, y)?;
        self.flops += x.len() as u64;
        Ok(LocalShare {
            shape: x.shape.clone(),
            data: x.data.iter().zip(&y.data).map(|(&a, &b)| a + b).collect(),
        })
    }

    pub fn sub(&mut self, x: &LocalShare<W>, y: &LocalShare<W>) -> Result<LocalShare<W>> {
        Self::same_shape(x, y)?;
        self.flops += x.len() as u64;
        Ok(LocalShare {
            shape: x.shape.clone(),
            data: x.data.iter().zip(&y.data).map(|(&a, &b)| a - b).collect(),
        })
    }

    pub fn neg(&mut self, x: &LocalShare<W>) -> LocalShare<W> {
        LocalShare {
            shape: x.shape.clone(),
            data: x.data.iter().map(|&a| -a).collect(),
        }
    }

    /// Shares of a public constant tensor.
    pub fn constant(&self, value: f64, shape: Vec<usize>) -> Result<LocalShare<W>> {
        let n: usize = shape.iter().product();
        let v = if self.is_leader() {
            self.codec.encode::<W>(value)?
        } else {
            RingElement::ZERO
        };
        LocalShare::new(shape, vec![v; n])
    }

    /// Adds a public scalar (the leader's share absorbs it).
    pub fn add_public(&mut self, x: &LocalShare<W>, c: f64) -> Result<LocalShare<W>> {
        let enc = self.codec.encode::<W>(c)?;
        Ok(self.add_public_ring(x, enc))
    }

    pub fn add_public_ring(&mut self, x: &LocalShare<W>, c: RingElement<W>) -> LocalShare<W> {
        let mut out = x.clone();
        if self.is_leader() {
            out.data.iter_mut().for_each(|v| *v += c);
        }
        out
    }

    /// Multiplies by a public integer; no truncation, no communication.
    pub fn mul_public_int(&mut self, x: &LocalShare<W>, k: i64) -> LocalShare<W> {
        let k = RingElement::<W>::from_signed(k);
        self.flops += x.len() as u64;
        LocalShare {
            shape: x.shape.clone(),
            data: x.data.iter().map(|&a| a * k).collect(),
        }
    }

    /// Multiplies by a public real; one truncation round.
    pub fn mul_public(&mut self, tag: &str, x: &LocalShare<W>, c: f64) -> Result<LocalShare<W>> {
        let k = self.codec.encode::<W>(c)?;
        self.flops += x.len() as u64;
        let scaled = LocalShare {
            shape: x.shape.clone(),
            data: x.data.iter().map(|&a| a * k).collect(),
        };
        self.truncate(tag, &scaled)
    }

    /// Sums contiguous rows of length `row_len`; output shape `[rows]`.
    pub fn sum_rows(&mut self, x: &LocalShare<W>, row_len: usize) -> Result<LocalShare<W>> {
        if row_len == 0 || !x.len().is_multiple_of(row_len) {
            return Err(Error::Shape(format!(
                "{} elements do not split into rows of {row_len}",
                x.len()
            )));
        }
        self.flops += x.len() as u64;
        let data: Vec<_> = x.data.chunks(row_len).map(|r| r.iter().copied().sum()).collect();
        let n = data.len();
        LocalShare::new(vec![n], data)
    }

    /// Repeats each element of `v` `row_len` times.
    pub fn broadcast_rows(&self, v: &LocalShare<W>, row_len: usize, shape: Vec<usize>) -> Result<LocalShare<W>> {
        let data: Vec<_> = v.data.iter().flat_map(|&x| std::iter::repeat_n(x, row_len)).collect();
        LocalShare::new(shape, data)
    }

    /// Tiles a row vector `v` across `rows` rows.
    pub fn tile_rows(&self, v: &LocalShare<W>, rows: usize, shape: Vec<usize>) -> Result<LocalShare<W>> {
        let mut data = Vec::with_capacity(v.len() * rows);
        for _ in 0..rows {
            data.extend_from_slice(&v.data);
        }
        LocalShare::new(shape, data)
    }

    // ---- correlated randomness bookkeeping ---------------------------------

    /// Records consumption of `[start, start+n)` of `kind`, refusing overlap.
    fn consume(&mut self, kind: StreamKind, start: u64, n: u64) -> Result<()> {
        if n == 0 {
            return Ok(());
        }
        // ids are per-kind; keep kinds apart in the high bits
        let base = (kind as u64) << 60;
        let (lo, hi) = (base + start, base + start + n);
        if let Some((_, &end)) = self.consumed.range(..=lo).next_back() {
            if end > lo {
                return Err(Error::Reuse(start));
            }
        }
        if let Some((&s, _)) = self.consumed.range(lo..).next() {
            if s < hi {
                return Err(Error::Reuse(start));
            }
        }
        // merge with a directly preceding range to keep the map small
        let prev = self
            .consumed
            .range(..lo)
            .next_back()
            .filter(|(_, &e)| e == lo)
            .map(|(&s, _)| s);
        match prev {
            Some(s) => {
                self.consumed.insert(s, hi);
            }
            None => {
                self.consumed.insert(lo, hi);
            }
        }
        Ok(())
    }

    /// Deals a fresh batch of elementwise triples for this party.
    pub fn take_triples(&mut self, n: usize) -> TripleBatch<W> {
        let t = self.dealer.deal_triples(n);
        TripleBatch::from_dealt(&t, self.id)
    }
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;
    use crate::shares::SharedTensor;
    use crate::transport::loopback_pair;

    pub fn run_pair<W, R, F>(seed: u64, cfg: ProtocolConfig, codec: FixedPointCodec, f: F) -> (R, R)
    where
        W: RingWord,
        R: Send,
        F: Fn(&mut Party<W>) -> Result<R> + Sync,
    {
        let (l0, l1) = loopback_pair();
        std::thread::scope(|s| {
            let f = &f;
            let h0 = s.spawn(move || {
                let mut p = Party::<W>::new(PartyId::ModelOwner, Box::new(l0), seed, seed ^ 0xA, codec, cfg);
                f(&mut p).expect("party 0 failed")
            });
            let h1 = s.spawn(move || {
                let mut p = Party::<W>::new(PartyId::DataOwner, Box::new(l1), seed, seed ^ 0xB, codec, cfg);
                f(&mut p).expect("party 1 failed")
            });
            (h0.join().unwrap(), h1.join().unwrap())
        })
    }

    pub fn open<W: RingWord>(a: LocalShare<W>, b: LocalShare<W>) -> Vec<RingElement<W>> {
        SharedTensor::join(a, b).unwrap().reconstruct_ring()
    }

    pub fn open_f64(a: LocalShare, b: LocalShare) -> Vec<f64> {
        FixedPointCodec::default().decode_slice(&open(a, b))
    }
}

#[cfg(test)]
mod tests {
    use super::testutil::*;
    use super::*;
    use crate::shares::{share, SharedTensor};
    use crate::transport::loopback_pair;

    #[test]
    fn input_and_reveal() {
        let (a, b) = run_pair::<u64, _, _>(1, ProtocolConfig::default(), FixedPointCodec::default(), |p| {
            let vals = [1.5, -2.25, 0.0];
            let x = p.input(
                "input",
                PartyId::DataOwner,
                (p.id() == PartyId::DataOwner).then_some(&vals[..]),
                vec![3],
            )?;
            let out = p.reveal("out", &x, RevealKind::Intermediate)?;
            Ok((out, p.ledger().clone()))
        });
        assert_eq!(a.0, vec![1.5, -2.25, 0.0]);
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        let inp = a.1.tag("input");
        assert_eq!((inp.rounds, inp.bytes), (1, 24));
        assert_eq!(a.1.reveals().count(RevealKind::Intermediate), 3);
    }

    #[test]
    fn linear_ops_are_free() {
        let codec = FixedPointCodec::default();
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let x: SharedTensor = share(&[1.5], vec![1], &codec, &mut rng).unwrap();
        let y: SharedTensor = share(&[-1.5], vec![1], &codec, &mut rng).unwrap();
        let (a, b) = run_pair::<u64, _, _>(2, ProtocolConfig::default(), codec, |p| {
            let xi = x.local(p.id());
            let yi = y.local(p.id());
            let z = p.add(&xi, &yi)?;
            let z = p.add_public(&z, 0.0)?;
            let z = p.mul_public_int(&z, 3);
            Ok((z, p.ledger().total()))
        });
        assert_eq!(open(a.0, b.0), vec![RingElement(0)]);
        assert_eq!(a.1, TagCost::default());
    }

    #[test]
    fn desync_is_detected() {
        let (l0, l1) = loopback_pair();
        let codec = FixedPointCodec::default();
        let cfg = ProtocolConfig::default();
        std::thread::scope(|s| {
            let h0 = s.spawn(move || {
                let mut p = Party::<u64>::new(PartyId::ModelOwner, Box::new(l0), 1, 2, codec, cfg);
                p.exchange("alpha", &[RingElement(1)])
            });
            let h1 = s.spawn(move || {
                let mut p = Party::<u64>::new(PartyId::DataOwner, Box::new(l1), 1, 3, codec, cfg);
                p.exchange("beta", &[RingElement(1)])
            });
            assert!(matches!(h0.join().unwrap(), Err(Error::Desync(_))));
            assert!(matches!(h1.join().unwrap(), Err(Error::Desync(_))));
        });
    }

    #[test]
    fn non_owner_cannot_supply_values() {
        let (l0, _l1) = loopback_pair();
        let mut p = Party::<u64>::new(
            PartyId::ModelOwner,
            Box::new(l0),
            1,
            2,
            FixedPointCodec::default(),
            ProtocolConfig::default(),
        );
        let r = p.input("in", PartyId::DataOwner, Some(&[1.0]), vec![1]);
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
