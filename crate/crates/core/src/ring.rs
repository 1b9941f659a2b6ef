//! Residues modulo `2^BITS` and the fixed-point codec that maps reals onto them.
//!
//! The production ring is `Z_{2^64}` (`RingElement<u64>`). An 8-bit mini ring
//! (`RingElement<u8>`) shares every code path so protocols can be checked
//! exhaustively.

use std::fmt;
use std::hash::Hash;
use std::ops::{Add, AddAssign, BitAnd, BitXor, Mul, MulAssign, Neg, Shl, Shr, Sub, SubAssign};

use rand::Rng;

use crate::error::{Error, Result};

/// Machine word backing a ring `Z_{2^BITS}`.
pub trait RingWord: Copy + Clone + Eq + Ord + Hash + fmt::Debug + Default + Send + Sync + 'static {
    const BITS: u32;
    const ZERO: Self;
    const ONE: Self;

    fn wrapping_add(self, rhs: Self) -> Self;
    fn wrapping_sub(self, rhs: Self) -> Self;
    fn wrapping_mul(self, rhs: Self) -> Self;
    fn wrapping_neg(self) -> Self;
    fn xor(self, rhs: Self) -> Self;
    fn and(self, rhs: Self) -> Self;
    fn shl(self, n: u32) -> Self;
    /// Logical right shift.
    fn shr(self, n: u32) -> Self;
    fn from_u64(v: u64) -> Self;
    fn to_u64(self) -> u64;
    /// Two's-complement interpretation.
    fn to_i64(self) -> i64;
    fn from_i64(v: i64) -> Self {
        Self::from_u64(v as u64)
    }
    fn random<R: Rng + ?Sized>(rng: &mut R) -> Self;
}

macro_rules! impl_ring_word {
    ($t:ty, $s:ty) => {
        impl RingWord for $t {
            const BITS: u32 = <$t>::BITS;
            const ZERO: Self = 0;
            const ONE: Self = 1;

            #[inline]
            fn wrapping_add(self, rhs: Self) -> Self {
                <$t>::wrapping_add(self, rhs)
            }
            #[inline]
            fn wrapping_sub(self, rhs: Self) -> Self {
                <$t>::wrapping_sub(self, rhs)
            }
            #[inline]
            fn wrapping_mul(self, rhs: Self) -> Self {
                <$t>::wrapping_mul(self, rhs)
            }
            #[inline]
            fn wrapping_neg(self) -> Self {
                <$t>::wrapping_neg(self)
            }
            #[inline]
            fn xor(self, rhs: Self) -> Self {
                self ^ rhs
            }
            #[inline]
            fn and(self, rhs: Self) -> Self {
                self & rhs
            }
            #[inline]
            fn shl(self, n: u32) -> Self {
                self.checked_shl(n).unwrap_or(0)
            }
            #[inline]
            fn shr(self, n: u32) -> Self {
                self.checked_shr(n).unwrap_or(0)
            }
            #[inline]
            fn from_u64(v: u64) -> Self {
                v as $t
            }
            #[inline]
            fn to_u64(self) -> u64 {
                self as u64
            }
            #[inline]
            fn to_i64(self) -> i64 {
                self as $s as i64
            }
            #[inline]
            fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
                rng.random::<$t>()
            }
        }
    };
}

impl_ring_word!(u8, i8);
impl_ring_word!(u64, i64);

/// A residue mod `2^W::BITS`. All arithmetic wraps.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default, PartialOrd, Ord)]
#[repr(transparent)]
pub struct RingElement<W: RingWord = u64>(pub W);

/// Element of the 8-bit ring used for exhaustive checks.
pub type MiniRingElement = RingElement<u8>;

impl<W: RingWord> RingElement<W> {
    pub const ZERO: Self = RingElement(W::ZERO);
    pub const ONE: Self = RingElement(W::ONE);

    #[inline]
    pub fn new(w: W) -> Self {
        RingElement(w)
    }

    #[inline]
    pub fn from_signed(v: i64) -> Self {
        RingElement(W::from_i64(v))
    }

    #[inline]
    pub fn signed(self) -> i64 {
        self.0.to_i64()
    }

    #[inline]
    pub fn msb(self) -> bool {
        self.0.shr(W::BITS - 1) == W::ONE
    }

    #[inline]
    pub fn bit(self, i: u32) -> bool {
        self.0.shr(i).and(W::ONE) == W::ONE
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        RingElement(W::random(rng))
    }

    /// Little-endian 8-byte wire form (narrow rings are zero-extended).
    #[inline]
    pub fn to_le_word(self) -> [u8; 8] {
        self.0.to_u64().to_le_bytes()
    }

    #[inline]
    pub fn from_le_word(bytes: [u8; 8]) -> Self {
        RingElement(W::from_u64(u64::from_le_bytes(bytes)))
    }
}

impl<W: RingWord> fmt::Debug for RingElement<W> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "R({:?})", self.0)
    }
}

impl<W: RingWord> Add for RingElement<W> {
    type Output = Self;
    #[inline]
    fn add(self, rhs: Self) -> Self {
        RingElement(self.0.wrapping_add(rhs.0))
    }
}

impl<W: RingWord> Sub for RingElement<W> {
    type Output = Self;
    #[inline]
    fn sub(self, rhs: Self) -> Self {
        RingElement(self.0.wrapping_sub(rhs.0))
    }
}

impl<W: RingWord> Mul for RingElement<W> {
    type Output = Self;
    #[inline]
    fn mul(self, rhs: Self) -> Self {
        RingElement(self.0.wrapping_mul(rhs.0))
    }
}

impl<W: RingWord> Neg for RingElement<W> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        RingElement(self.0.wrapping_neg())
    }
}

impl<W: RingWord> AddAssign for RingElement<W> {
    #[inline]
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}

impl<W: RingWord> SubAssign for RingElement<W> {
    #[inline]
    fn sub_assign(&mut self, rhs: Self) {
        *self = *self - rhs;
    }
}

impl<W: RingWord> MulAssign for RingElement<W> {
    #[inline]
    fn mul_assign(&mut self, rhs: Self) {
        *self = *self * rhs;
    }
}

impl<W: RingWord> BitXor for RingElement<W> {
    type Output = Self;
    #[inline]
    fn bitxor(self, rhs: Self) -> Self {
        RingElement(self.0.xor(rhs.0))
    }
}

impl<W: RingWord> BitAnd for RingElement<W> {
    type Output = Self;
    #[inline]
    fn bitand(self, rhs: Self) -> Self {
        RingElement(self.0.and(rhs.0))
    }
}

impl<W: RingWord> Shl<u32> for RingElement<W> {
    type Output = Self;
    #[inline]
    fn shl(self, n: u32) -> Self {
        RingElement(self.0.shl(n))
    }
}

impl<W: RingWord> Shr<u32> for RingElement<W> {
    type Output = Self;
    #[inline]
    fn shr(self, n: u32) -> Self {
        RingElement(self.0.shr(n))
    }
}

impl<W: RingWord> std::iter::Sum for RingElement<W> {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::ZERO, |a, b| a + b)
    }
}

#[inline]
pub fn ring_add<W: RingWord>(a: RingElement<W>, b: RingElement<W>) -> RingElement<W> {
    a + b
}

/// Product of two encoded values carries scale `2^(2f)`; the caller truncates.
#[inline]
pub fn ring_mul<W: RingWord>(a: RingElement<W>, b: RingElement<W>) -> RingElement<W> {
    a * b
}

/// Row-major `[m×k]·[k×n]` product in the ring.
pub fn ring_matmul<W: RingWord>(
    a: &[RingElement<W>],
    b: &[RingElement<W>],
    m: usize,
    k: usize,
    n: usize,
) -> Vec<RingElement<W>> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![RingElement::<W>::ZERO; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip.0 == W::ZERO {
                continue;
            }
            for (o, &bpj) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += aip * bpj;
            }
        }
    }
    out
}

/// Row-major transpose of an `[rows×cols]` matrix.
pub fn transpose<T: Copy>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), rows * cols);
    let mut out = Vec::with_capacity(a.len());
    for j in 0..cols {
        for i in 0..rows {
            out.push(a[i * cols + j]);
        }
    }
    out
}

pub const DEFAULT_FRAC_BITS: u32 = 16;

/// Fixed-point codec with `frac_bits` fractional bits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FixedPointCodec {
    frac_bits: u32,
}

impl Default for FixedPointCodec {
    fn default() -> Self {
        FixedPointCodec {
            frac_bits: DEFAULT_FRAC_BITS,
        }
    }
}

impl FixedPointCodec {
    pub fn new(frac_bits: u32) -> Result<Self> {
        if frac_bits == 0 || frac_bits > 24 {
            return Err(Error::Config(format!("frac_bits must lie in 1..=24, got {frac_bits}")));
        }
        Ok(FixedPointCodec { frac_bits })
    }

    /// Codec for the 8-bit mini ring, where production bounds don't apply.
    pub fn mini(frac_bits: u32) -> Self {
        assert!(frac_bits < 6);
        FixedPointCodec { frac_bits }
    }

    #[inline]
    pub fn frac_bits(&self) -> u32 {
        self.frac_bits
    }

    #[inline]
    pub fn scale(&self) -> f64 {
        (1u64 << self.frac_bits) as f64
    }

    #[inline]
    pub fn ulp(&self) -> f64 {
        1.0 / self.scale()
    }

    /// Exclusive bound on `|x|` accepted by [`encode`](Self::encode).
    pub fn limit<W: RingWord>(&self) -> f64 {
        2f64.powi(W::BITS as i32 - self.frac_bits as i32 - 2)
    }

    pub fn encode<W: RingWord>(&self, x: f64) -> Result<RingElement<W>> {
        let limit = self.limit::<W>();
        if !x.is_finite() || x.abs() >= limit {
            return Err(Error::EncodeRange {
                value: x,
                limit,
                frac_bits: self.frac_bits,
            });
        }
        Ok(RingElement::from_signed((x * self.scale()).round() as i64))
    }

    pub fn encode_slice<W: RingWord>(&self, xs: &[f64]) -> Result<Vec<RingElement<W>>> {
        xs.iter().map(|&x| self.encode(x)).collect()
    }

    #[inline]
    pub fn decode<W: RingWord>(&self, r: RingElement<W>) -> f64 {
        r.signed() as f64 / self.scale()
    }

    pub fn decode_slice<W: RingWord>(&self, rs: &[RingElement<W>]) -> Vec<f64> {
        rs.iter().map(|&r| self.decode(r)).collect()
    }
}
