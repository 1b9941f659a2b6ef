//! Additive secret sharing over `Z_{2^BITS}` and the trusted dealer that
//! produces correlated randomness (Beaver triples, matmul triples,
//! truncation pairs, boolean AND triples and random bits).
//!
//! The dealer is a seeded counter-mode stream. In-process, both parties
//! expand the same dealer and each keeps its own half, which is equivalent to
//! a third, non-colluding generator handing out shares offline.

use std::marker::PhantomData;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::ring::{ring_matmul, FixedPointCodec, RingElement, RingWord};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PartyId {
    /// Party 0: holds the model weights.
    ModelOwner,
    /// Party 1: holds the candidate dataset.
    DataOwner,
}

impl PartyId {
    #[inline]
    pub fn index(self) -> usize {
        match self {
            PartyId::ModelOwner => 0,
            PartyId::DataOwner => 1,
        }
    }

    #[inline]
    pub fn peer(self) -> PartyId {
        match self {
            PartyId::ModelOwner => PartyId::DataOwner,
            PartyId::DataOwner => PartyId::ModelOwner,
        }
    }

    pub fn from_index(i: usize) -> PartyId {
        if i == 0 {
            PartyId::ModelOwner
        } else {
            PartyId::DataOwner
        }
    }
}

/// One party's share of a scalar secret.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AdditiveShare<W: RingWord = u64> {
    pub party: PartyId,
    pub value: RingElement<W>,
}

/// One party's view of a secret-shared tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LocalShare<W: RingWord = u64> {
    pub shape: Vec<usize>,
    pub data: Vec<RingElement<W>>,
}

impl<W: RingWord> LocalShare<W> {
    pub fn new(shape: Vec<usize>, data: Vec<RingElement<W>>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {n} elements, got {}",
                data.len()
            )));
        }
        Ok(LocalShare { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        LocalShare {
            shape,
            data: vec![RingElement::ZERO; n],
        }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!("cannot reshape {:?} to {shape:?}", self.shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Gathers the listed rows of a tensor whose leading axis indexes rows.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let lead = *self.shape.first().unwrap_or(&0);
        let stride = if lead == 0 { 0 } else { self.data.len() / lead };
        let mut data = Vec::with_capacity(rows.len() * stride);
        for &r in rows {
            if r >= lead {
                return Err(Error::Shape(format!("row {r} out of range {lead}")));
            }
            data.extend_from_slice(&self.data[r * stride..(r + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Ok(LocalShare { shape, data })
    }
}

/// Both parties' shares of a tensor: the joint view used by the dealer and by
/// test harnesses. Protocol code only ever holds a [`LocalShare`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SharedTensor<W: RingWord = u64> {
    pub shape: Vec<usize>,
    pub shares: [Vec<RingElement<W>>; 2],
}

impl<W: RingWord> SharedTensor<W> {
    pub fn from_shares(shape: Vec<usize>, share0: Vec<RingElement<W>>, share1: Vec<RingElement<W>>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if share0.len() != n || share1.len() != n {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} elements per party, got {} and {}",
                share0.len(),
                share1.len()
            )));
        }
        Ok(SharedTensor {
            shape,
            shares: [share0, share1],
        })
    }

    pub fn len(&self) -> usize {
        self.shares[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.shares[0].is_empty()
    }

    pub fn local(&self, party: PartyId) -> LocalShare<W> {
        LocalShare {
            shape: self.shape.clone(),
            data: self.shares[party.index()].clone(),
        }
    }

    pub fn split(self) -> [LocalShare<W>; 2] {
        let [s0, s1] = self.shares;
        [
            LocalShare {
                shape: self.shape.clone(),
                data: s0,
            },
            LocalShare {
                shape: self.shape,
                data: s1,
            },
        ]
    }

    pub fn join(s0: LocalShare<W>, s1: LocalShare<W>) -> Result<Self> {
        if s0.shape != s1.shape {
            return Err(Error::Shape(format!(
                "parties disagree on shape: {:?} vs {:?}",
                s0.shape, s1.shape
            )));
        }
        SharedTensor::from_shares(s0.shape, s0.data, s1.data)
    }

    pub fn reconstruct_ring(&self) -> Vec<RingElement<W>> {
        self.shares[0]
            .iter()
            .zip(&self.shares[1])
            .map(|(&a, &b)| a + b)
            .collect()
    }

    /// Opens the tensor outside of any protocol. Harness-level: protocol code
    /// reveals through `Party::reveal`, which is audited.
    pub fn reconstruct(&self, codec: &FixedPointCodec) -> Vec<f64> {
        codec.decode_slice(&self.reconstruct_ring())
    }
}

/// Splits ring values into two additive shares, share 0 uniform.
pub fn share_ring<W: RingWord, R: Rng + ?Sized>(
    values: &[RingElement<W>],
    shape: Vec<usize>,
    rng: &mut R,
) -> Result<SharedTensor<W>> {
    let s0: Vec<RingElement<W>> = values.iter().map(|_| RingElement::random(rng)).collect();
    let s1 = values.iter().zip(&s0).map(|(&v, &r)| v - r).collect();
    SharedTensor::from_shares(shape, s0, s1)
}

/// Encodes and shares a plaintext tensor.
pub fn share<W: RingWord, R: Rng + ?Sized>(
    x: &[f64],
    shape: Vec<usize>,
    codec: &FixedPointCodec,
    rng: &mut R,
) -> Result<SharedTensor<W>> {
    let enc = codec.encode_slice::<W>(x)?;
    share_ring(&enc, shape, rng)
}

/// `reconstruct(a)·reconstruct(b) = reconstruct(c)` elementwise, `n` triples.
#[derive(Clone, Debug)]
pub struct BeaverTriple<W: RingWord = u64> {
    pub id: u64,
    pub a: SharedTensor<W>,
    pub b: SharedTensor<W>,
    pub c: SharedTensor<W>,
}

/// Correlated randomness for one `[m×k]·[k×n]` product.
#[derive(Clone, Debug)]
pub struct MatmulTriple<W: RingWord = u64> {
    pub id: u64,
    pub dims: (usize, usize, usize),
    pub a: SharedTensor<W>,
    pub b: SharedTensor<W>,
    pub c: SharedTensor<W>,
}

/// Pairs `(r, r >> f)` with `r` uniform on `[0, 2^(BITS-1))`.
#[derive(Clone, Debug)]
pub struct TruncationPairs<W: RingWord = u64> {
    pub id: u64,
    pub shift: u32,
    pub r: SharedTensor<W>,
    pub r_hi: SharedTensor<W>,
}

/// XOR-shared bitwise AND triples: `(a0^a1) & (b0^b1) = c0^c1` lane by lane.
#[derive(Clone, Debug)]
pub struct AndTriples<W: RingWord = u64> {
    pub id: u64,
    pub a: [Vec<W>; 2],
    pub b: [Vec<W>; 2],
    pub c: [Vec<W>; 2],
}

/// Random bits held both XOR-shared (lane 0) and additively shared.
#[derive(Clone, Debug)]
pub struct RandomBits<W: RingWord = u64> {
    pub id: u64,
    pub boolean: [Vec<W>; 2],
    pub arith: SharedTensor<W>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StreamKind {
    Shares = 0,
    Triples = 1,
    Truncation = 2,
    Binary = 3,
}

const STREAMS: usize = 4;

/// Seeded generator of all correlated randomness. Output never depends on
/// secrets; each kind draws from its own ChaCha stream so consuming one kind
/// leaves the others untouched.
#[derive(Clone, Debug)]
pub struct TripleDealer<W: RingWord = u64> {
    seed: u64,
    rngs: [ChaCha20Rng; STREAMS],
    counters: [u64; STREAMS],
    _word: PhantomData<W>,
}

impl<W: RingWord> TripleDealer<W> {
    pub fn new(seed: u64) -> Self {
        let rngs = std::array::from_fn(|i| {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            rng
        });
        TripleDealer {
            seed,
            rngs,
            counters: [0; STREAMS],
            _word: PhantomData,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of items dealt so far for `kind`.
    pub fn dealt(&self, kind: StreamKind) -> u64 {
        self.counters[kind as usize]
    }

    fn next_id(&mut self, kind: StreamKind, n: usize) -> u64 {
        let id = self.counters[kind as usize];
        self.counters[kind as usize] += n as u64;
        id
    }

    fn rand_vec(&mut self, kind: StreamKind, n: usize) -> Vec<RingElement<W>> {
        let rng = &mut self.rngs[kind as usize];
        (0..n).map(|_| RingElement::random(rng)).collect()
    }

    fn share_with(&mut self, kind: StreamKind, v: &[RingElement<W>], shape: Vec<usize>) -> SharedTensor<W> {
        let s0 = self.rand_vec(kind, v.len());
        let s1 = v.iter().zip(&s0).map(|(&x, &r)| x - r).collect();
        SharedTensor {
            shape,
            shares: [s0, s1],
        }
    }

    /// Shares plaintext values from the dealer's share stream.
    pub fn share(&mut self, x: &[f64], shape: Vec<usize>, codec: &FixedPointCodec) -> Result<SharedTensor<W>> {
        let enc = codec.encode_slice::<W>(x)?;
        self.next_id(StreamKind::Shares, enc.len());
        Ok(self.share_with(StreamKind::Shares, &enc, shape))
    }

    pub fn deal_triples(&mut self, n: usize) -> BeaverTriple<W> {
        let k = StreamKind::Triples;
        let id = self.next_id(k, n);
        let a = self.rand_vec(k, n);
        let b = self.rand_vec(k, n);
        let c: Vec<_> = a.iter().zip(&b).map(|(&x, &y)| x * y).collect();
        BeaverTriple {
            id,
            a: self.share_with(k, &a, vec![n]),
            b: self.share_with(k, &b, vec![n]),
            c: self.share_with(k, &c, vec![n]),
        }
    }

    pub fn deal_matmul_triple(&mut self, m: usize, k: usize, n: usize) -> MatmulTriple<W> {
        let s = StreamKind::Triples;
        let id = self.next_id(s, m * k + k * n);
        let a = self.rand_vec(s, m * k);
        let b = self.rand_vec(s, k * n);
        let c = ring_matmul(&a, &b, m, k, n);
        MatmulTriple {
            id,
            dims: (m, k, n),
            a: self.share_with(s, &a, vec![m, k]),
            b: self.share_with(s, &b, vec![k, n]),
            c: self.share_with(s, &c, vec![m, n]),
        }
    }

    pub fn deal_truncation_pairs(&mut self, n: usize, shift: u32) -> TruncationPairs<W> {
        let k = StreamKind::Truncation;
        let id = self.next_id(k, n);
        let r: Vec<RingElement<W>> = self.rand_vec(k, n).into_iter().map(|x| x >> 1).collect();
        let r_hi: Vec<_> = r.iter().map(|&x| x >> shift).collect();
        TruncationPairs {
            id,
            shift,
            r: self.share_with(k, &r, vec![n]),
            r_hi: self.share_with(k, &r_hi, vec![n]),
        }
    }

    pub fn deal_and_triples(&mut self, n: usize) -> AndTriples<W> {
        let rng = &mut self.rngs[StreamKind::Binary as usize];
        let mut draw = |n: usize| -> Vec<W> { (0..n).map(|_| W::random(rng)).collect() };
        let a = draw(n);
        let b = draw(n);
        let a0 = draw(n);
        let b0 = draw(n);
        let c0 = draw(n);
        let split = |v: &[W], s0: Vec<W>| -> [Vec<W>; 2] {
            let s1 = v.iter().zip(&s0).map(|(&x, &r)| x.xor(r)).collect();
            [s0, s1]
        };
        let c: Vec<W> = a.iter().zip(&b).map(|(&x, &y)| x.and(y)).collect();
        let id = self.next_id(StreamKind::Binary, n);
        AndTriples {
            id,
            a: split(&a, a0),
            b: split(&b, b0),
            c: split(&c, c0),
        }
    }

    pub fn deal_random_bits(&mut self, n: usize) -> RandomBits<W> {
        let k = StreamKind::Binary;
        let id = self.next_id(k, n);
        let rng = &mut self.rngs[k as usize];
        let bits: Vec<W> = (0..n).map(|_| W::random(rng).and(W::ONE)).collect();
        let b0: Vec<W> = (0..n).map(|_| W::random(rng).and(W::ONE)).collect();
        let b1 = bits.iter().zip(&b0).map(|(&x, &r)| x.xor(r)).collect();
        let as_ring: Vec<RingElement<W>> = bits.iter().map(|&b| RingElement(b)).collect();
        RandomBits {
            id,
            boolean: [b0, b1],
            arith: self.share_with(k, &as_ring, vec![n]),
        }
    }
}
