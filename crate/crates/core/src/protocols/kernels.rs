//! Iterative approximations of exp, reciprocal, inverse square root and log.
//!
//! All four only use multiplication, truncation and public constants, so
//! their cost is a fixed function of the iteration counts.

use super::{DomainPolicy, Party};
use crate::error::{Error, Result};
use crate::ring::RingWord;
use crate::shares::LocalShare;
use crate::transport::RevealKind;

/// Closed interval on which a kernel's error bound holds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelDomain {
    pub lo: f64,
    pub hi: f64,
}

pub const EXP_DOMAIN: KernelDomain = KernelDomain { lo: -16.0, hi: 8.0 };
pub const RECIPROCAL_DOMAIN: KernelDomain = KernelDomain {
    lo: 1.0 / 64.0,
    hi: 64.0,
};
pub const RSQRT_DOMAIN: KernelDomain = RECIPROCAL_DOMAIN;
pub const LOG_DOMAIN: KernelDomain = RECIPROCAL_DOMAIN;

impl<W: RingWord> Party<W> {
    /// Applies the configured domain policy to a kernel input.
    fn enforce_domain(
        &mut self,
        tag: &str,
        kernel: &'static str,
        x: &LocalShare<W>,
        d: KernelDomain,
    ) -> Result<LocalShare<W>> {
        match self.cfg.domain {
            DomainPolicy::Trusted => Ok(x.clone()),
            DomainPolicy::Permissive => {
                let lo = self.constant(d.lo, x.shape.clone())?;
                let hi = self.constant(d.hi, x.shape.clone())?;
                let y = self.max(tag, x, &lo)?;
                // min(y, hi) = hi - relu(hi - y)
                let gap = self.sub(&hi, &y)?;
                let r = self.relu(tag, &gap)?;
                self.sub(&hi, &r)
            }
            DomainPolicy::Strict => {
                let lo = self.codec.encode::<W>(d.lo)?;
                let hi = self.codec.encode::<W>(d.hi)?;
                let n = x.len();
                let leader = self.is_leader();
                let mut diffs = Vec::with_capacity(2 * n);
                // x - lo < 0 or hi - x < 0 is a violation
                diffs.extend(x.data.iter().map(|&v| if leader { v - lo } else { v }));
                diffs.extend(x.data.iter().map(|&v| if leader { hi - v } else { -v }));
                let bits = self.open_signs(tag, &diffs, RevealKind::Intermediate)?;
                if let Some(k) = bits.iter().position(|&b| b) {
                    return Err(Error::Domain {
                        kernel,
                        detail: format!("element {} outside [{}, {}]", k % n.max(1), d.lo, d.hi),
                    });
                }
                Ok(x.clone())
            }
        }
    }

    /// `exp(x)` by `(1 + x/2^n)^(2^n)`.
    pub fn exp(&mut self, tag: &str, x: &LocalShare<W>) -> Result<LocalShare<W>> {
        let x = self.enforce_domain(tag, "exp", x, EXP_DOMAIN)?;
        self.exp_unchecked(tag, &x)
    }

    pub(crate) fn exp_unchecked(&mut self, tag: &str, x: &LocalShare<W>) -> Result<LocalShare<W>> {
        let n = self.cfg.iterations.exp;
        let mut y = self.truncate_bits(tag, x, n)?;
        y = self.add_public(&y, 1.0)?;
        for _ in 0..n {
            y = self.mul(tag, &y, &y)?;
        }
        Ok(y)
    }

    /// `1/x` by Newton iteration `y <- y(2 - xy)` from `3 exp(0.5 - x) + 0.003`.
    pub fn reciprocal(&mut self, tag: &str, x: &LocalShare<W>) -> Result<LocalShare<W>> {
        let x = self.enforce_domain(tag, "reciprocal", x, RECIPROCAL_DOMAIN)?;
        self.reciprocal_unchecked(tag, &x)
    }

    pub(crate) fn reciprocal_unchecked(&mut self, tag: &str, x: &LocalShare<W>) -> Result<LocalShare<W>> {
        let t = self.neg(x);
        let t = self.add_public(&t, 0.5)?;
        let e = self.exp_unchecked(tag, &t)?;
        let y0 = self.mul_public_int(&e, 3);
        let mut y = self.add_public(&y0, 0.003)?;
        for _ in 0..self.cfg.iterations.reciprocal {
            let xy = self.mul(tag, x, &y)?;
            let r = self.neg(&xy);
            let r = self.add_public(&r, 2.0)?;
            y = self.mul(tag, &y, &r)?;
        }
        Ok(y)
    }

    /// `1/sqrt(x)` by Newton iteration `y <- y(3 - xy^2)/2`.
    pub fn rsqrt(&mut self, tag: &str, x: &LocalShare<W>) -> Result<LocalShare<W>> {
        let x = self.enforce_domain(tag, "rsqrt", x, RSQRT_DOMAIN)?;
        self.rsqrt_unchecked(tag, &x)
    }

    pub(crate) fn rsqrt_unchecked(&mut self, tag: &str, x: &LocalShare<W>) -> Result<LocalShare<W>> {
        // y0 = 2.2 exp(-(x/2 + 0.2)) + 0.2 - x/1024
        let half = self.truncate_bits(tag, x, 1)?;
        let h = self.neg(&half);
        let h = self.add_public(&h, -0.2)?;
        let e = self.exp_unchecked(tag, &h)?;
        let a = self.mul_public(tag, &e, 2.2)?;
        let b = self.truncate_bits(tag, x, 10)?;
        let y0 = self.sub(&a, &b)?;
        let mut y = self.add_public(&y0, 0.2)?;
        for _ in 0..self.cfg.iterations.rsqrt {
            let y2 = self.mul(tag, &y, &y)?;
            let xy2 = self.mul(tag, x, &y2)?;
            let r = self.neg(&xy2);
            let r = self.add_public(&r, 3.0)?;
            let yr = self.mul_raw(tag, &y, &r)?;
            y = self.truncate_bits(tag, &yr, self.codec.frac_bits() + 1)?;
        }
        Ok(y)
    }

    /// `ln x` by Newton iteration on `exp(y) = x`: `y <- y - 1 + x exp(-y)`.
    pub fn log(&mut self, tag: &str, x: &LocalShare<W>) -> Result<LocalShare<W>> {
        let x = self.enforce_domain(tag, "log", x, LOG_DOMAIN)?;
        self.log_unchecked(tag, &x)
    }

    pub(crate) fn log_unchecked(&mut self, tag: &str, x: &LocalShare<W>) -> Result<LocalShare<W>> {
        // y0 = x/120 - 20 exp(-2x - 1) + 3
        let t = self.mul_public_int(x, -2);
        let t = self.add_public(&t, -1.0)?;
        let e = self.exp_unchecked(tag, &t)?;
        let a = self.mul_public_int(&e, -20);
        let b = self.mul_public(tag, x, 1.0 / 120.0)?;
        let y0 = self.add(&a, &b)?;
        let mut y = self.add_public(&y0, 3.0)?;
        for _ in 0..self.cfg.iterations.log {
            let ny = self.neg(&y);
            let e = self.exp_unchecked(tag, &ny)?;
            let xe = self.mul(tag, x, &e)?;
            let s = self.add(&y, &xe)?;
            y = self.add_public(&s, -1.0)?;
        }
        Ok(y)
    }
}
