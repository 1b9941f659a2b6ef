//! Sign extraction and everything built on it: comparison, ReLU, max.
//!
//! The two arithmetic shares are themselves the operands of a binary adder:
//! party 0 holds `A = x0`, party 1 holds `B = x1`, and the sign of `x` is
//! the top bit of `A + B`. A Kogge-Stone prefix network over XOR-shared words
//! computes the carry into the top bit in `log2(BITS - 1)` AND rounds.

use super::{ComparisonCost, Party};
use crate::error::{Error, Result};
use crate::ring::{RingElement, RingWord};
use crate::shares::{LocalShare, StreamKind};
use crate::transport::RevealKind;

impl<W: RingWord> Party<W> {
    /// Bitwise AND of XOR-shared words. One round.
    pub(crate) fn and_words(&mut self, tag: &str, x: &[W], y: &[W]) -> Result<Vec<W>> {
        let n = x.len();
        debug_assert_eq!(n, y.len());
        let t = self.dealer.deal_and_triples(n);
        self.consume(StreamKind::Binary, t.id, n as u64)?;
        self.usage.and_triples += n as u64;
        let i = self.id.index();
        let (a, b, c) = (&t.a[i], &t.b[i], &t.c[i]);
        let mut masked = Vec::with_capacity(2 * n);
        masked.extend(x.iter().zip(a).map(|(&v, &a)| v.xor(a)));
        masked.extend(y.iter().zip(b).map(|(&v, &b)| v.xor(b)));
        let open = self.open_xor(tag, &masked)?;
        let (e, f) = open.split_at(n);
        let leader = self.is_leader();
        self.add_flops(6 * n as u64);
        Ok((0..n)
            .map(|k| {
                let z = c[k].xor(e[k].and(b[k])).xor(f[k].and(a[k]));
                if leader {
                    z.xor(e[k].and(f[k]))
                } else {
                    z
                }
            })
            .collect())
    }

    /// XOR shares of the sign bit (in lane 0) of each element.
    fn sign_bits(&mut self, tag: &str, x: &[RingElement<W>]) -> Result<Vec<W>> {
        let n = x.len();
        let (a, b): (Vec<W>, Vec<W>) = if self.is_leader() {
            (x.iter().map(|v| v.0).collect(), vec![W::ZERO; n])
        } else {
            (vec![W::ZERO; n], x.iter().map(|v| v.0).collect())
        };
        let p: Vec<W> = a.iter().zip(&b).map(|(&u, &v)| u.xor(v)).collect();
        let mut g = self.and_words(tag, &a, &b)?;
        let mut pp = p.clone();
        let mut s = 1;
        while s < W::BITS - 1 {
            // G' = G ^ (P & (G << s)),  P' = P & (P << s)
            let mut lhs = Vec::with_capacity(2 * n);
            lhs.extend_from_slice(&pp);
            lhs.extend_from_slice(&pp);
            let mut rhs = Vec::with_capacity(2 * n);
            rhs.extend(g.iter().map(|&w| w.shl(s)));
            rhs.extend(pp.iter().map(|&w| w.shl(s)));
            let prod = self.and_words(tag, &lhs, &rhs)?;
            for k in 0..n {
                g[k] = g[k].xor(prod[k]);
            }
            pp = prod[n..].to_vec();
            s <<= 1;
        }
        let top = W::BITS - 1;
        Ok((0..n)
            .map(|k| p[k].shr(top).xor(g[k].shr(top - 1)).and(W::ONE))
            .collect())
    }

    /// Runs a batch of `n` sign extractions under the configured cost model.
    fn charged<R>(&mut self, tag: &str, n: usize, f: impl FnOnce(&mut Self) -> Result<R>) -> Result<R> {
        let (out, analytic) = self.deferred(f)?;
        let flops = std::mem::take(&mut self.flops);
        match self.cfg.comparison_cost {
            ComparisonCost::Fixed { rounds, bytes } => {
                let total = bytes * n as u64;
                self.ledger.charge(tag, rounds, total, total / 2, flops);
            }
            ComparisonCost::Analytic => {
                self.ledger
                    .charge(tag, analytic.rounds, analytic.bytes, analytic.max_dir_bytes, flops);
            }
        }
        self.ledger.note_comparisons(n as u64, analytic);
        Ok(out)
    }

    /// Arithmetic shares of `[x < 0]` (as the integer 0 or 1, unscaled).
    pub fn msb(&mut self, tag: &str, x: &LocalShare<W>) -> Result<LocalShare<W>> {
        let n = x.len();
        if n == 0 {
            return Ok(x.clone());
        }
        let data = self.charged(tag, n, |p| {
            let bits = p.sign_bits(tag, &x.data)?;
            p.bits_to_arith(tag, &bits)
        })?;
        Ok(LocalShare {
            shape: x.shape.clone(),
            data,
        })
    }

    /// Converts XOR-shared bits to additive shares using dealt random bits.
    fn bits_to_arith(&mut self, tag: &str, bits: &[W]) -> Result<Vec<RingElement<W>>> {
        let n = bits.len();
        let rb = self.dealer.deal_random_bits(n);
        self.consume(StreamKind::Binary, rb.id, n as u64)?;
        self.usage.random_bits += n as u64;
        let i = self.id.index();
        let masked: Vec<W> = bits.iter().zip(&rb.boolean[i]).map(|(&b, &r)| b.xor(r)).collect();
        let m = self.open_xor(tag, &masked)?;
        let leader = self.is_leader();
        Ok(m.iter()
            .zip(&rb.arith.shares[i])
            .map(|(&m, &r)| {
                let m = RingElement(m);
                let two_m = m + m;
                let v = r - two_m * r;
                if leader {
                    v + m
                } else {
                    v
                }
            })
            .collect())
    }

    /// Opens `[a_k < b_k]` for each element. Ties compare false.
    pub fn compare_open(&mut self, tag: &str, a: &LocalShare<W>, b: &LocalShare<W>) -> Result<Vec<bool>> {
        if a.shape != b.shape {
            return Err(Error::Shape(format!("compare: {:?} vs {:?}", a.shape, b.shape)));
        }
        let d: Vec<_> = a.data.iter().zip(&b.data).map(|(&u, &v)| u - v).collect();
        self.open_signs(tag, &d, RevealKind::ComparisonBit)
    }

    /// Opens `[d_k < 0]` and logs the bits under `kind`.
    pub(crate) fn open_signs(&mut self, tag: &str, d: &[RingElement<W>], kind: RevealKind) -> Result<Vec<bool>> {
        let n = d.len();
        if n == 0 {
            return Ok(Vec::new());
        }
        let bits = self.charged(tag, n, |p| {
            let s = p.sign_bits(tag, d)?;
            p.open_xor(tag, &s)
        })?;
        self.ledger.reveals_mut().push(tag, kind, n as u64);
        Ok(bits.iter().map(|&w| w.and(W::ONE) == W::ONE).collect())
    }

    /// `x · [x >= 0]`.
    pub fn relu(&mut self, tag: &str, x: &LocalShare<W>) -> Result<LocalShare<W>> {
        let s = self.msb(tag, x)?;
        let keep = self.neg(&s);
        let keep = self.add_public_ring(&keep, RingElement(W::ONE));
        self.mul_raw(tag, x, &keep)
    }

    /// Elementwise maximum.
    pub fn max(&mut self, tag: &str, a: &LocalShare<W>, b: &LocalShare<W>) -> Result<LocalShare<W>> {
        let d = self.sub(a, b)?;
        let r = self.relu(tag, &d)?;
        self.add(b, &r)
    }

    /// Maximum of each contiguous row of length `row_len`, by a pairwise
    /// tournament: `ceil(log2 row_len)` batched ReLUs.
    pub fn max_rows(&mut self, tag: &str, x: &LocalShare<W>, row_len: usize) -> Result<LocalShare<W>> {
        if row_len == 0 || !x.len().is_multiple_of(row_len) {
            return Err(Error::Shape(format!(
                "{} elements do not split into rows of {row_len}",
                x.len()
            )));
        }
        let rows = x.len() / row_len;
        let mut cur: Vec<Vec<RingElement<W>>> = x.data.chunks(row_len).map(|r| r.to_vec()).collect();
        let mut len = row_len;
        while len > 1 {
            let half = len / 2;
            let mut lhs = Vec::with_capacity(rows * half);
            let mut rhs = Vec::with_capacity(rows * half);
            for r in &cur {
                lhs.extend_from_slice(&r[..half]);
                rhs.extend_from_slice(&r[half..2 * half]);
            }
            let a = LocalShare {
                shape: vec![lhs.len()],
                data: lhs,
            };
            let b = LocalShare {
                shape: vec![rhs.len()],
                data: rhs,
            };
            let m = self.max(tag, &a, &b)?;
            for (r, chunk) in cur.iter_mut().zip(m.data.chunks(half)) {
                let odd = (len % 2 == 1).then(|| r[len - 1]);
                r.clear();
                r.extend_from_slice(chunk);
                r.extend(odd);
            }
            len = half + len % 2;
        }
        LocalShare::new(vec![rows], cur.into_iter().map(|r| r[0]).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::super::{ComparisonCost, ProtocolConfig};
    use crate::ring::{FixedPointCodec, RingElement};
    use crate::shares::{share, share_ring, SharedTensor};
    use crate::transport::RevealKind;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn shared(vals: &[f64], seed: u64) -> SharedTensor {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        share(vals, vec![vals.len()], &FixedPointCodec::default(), &mut rng).unwrap()
    }

    fn analytic() -> ProtocolConfig {
        ProtocolConfig {
            comparison_cost: ComparisonCost::Analytic,
            ..ProtocolConfig::default()
        }
    }

    #[test]
    fn exhaustive_mini_ring_msb() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let xs: Vec<RingElement<u8>> = (0..=255u8)
            .collect::<Vec<_>>()
            .repeat(4)
            .into_iter()
            .map(RingElement)
            .collect();
        let s = share_ring(&xs, vec![xs.len()], &mut rng).unwrap();
        let (a, b) = run_pair::<u8, _, _>(2, analytic(), FixedPointCodec::mini(2), |p| {
            let m = p.msb("msb", &s.local(p.id()))?;
            Ok((m, p.ledger().tag("msb").rounds))
        });
        // 1 round for g, 3 prefix levels, 1 conversion round
        assert_eq!(a.1, 5);
        for (x, m) in xs.iter().zip(open(a.0, b.0)) {
            assert_eq!(m.0, x.msb() as u8, "x = {}", x.0);
        }
    }

    #[test]
    fn comparison_costs_eight_rounds_and_432_bytes() {
        let x = shared(&[1.0], 1);
        let y = shared(&[2.0], 2);
        for cfg in [analytic(), ProtocolConfig::default()] {
            let (a, _) = run_pair(3, cfg, FixedPointCodec::default(), |p| {
                let bits = p.compare_open("cmp", &x.local(p.id()), &y.local(p.id()))?;
                Ok((bits, p.ledger().tag("cmp"), p.ledger().analytic_comparison_cost()))
            });
            assert_eq!(a.0, vec![true]);
            assert_eq!((a.1.rounds, a.1.bytes), (8, 432));
            assert_eq!((a.2.rounds, a.2.bytes), (8, 432));
        }
    }

    #[test]
    fn fixed_cost_charges_per_batch_rounds() {
        let vals: Vec<f64> = (0..50).map(|i| i as f64 - 25.0).collect();
        let x = shared(&vals, 1);
        let (a, _) = run_pair(3, ProtocolConfig::default(), FixedPointCodec::default(), |p| {
            let z = p.constant(0.0, vec![50])?;
            let bits = p.compare_open("cmp", &x.local(p.id()), &z)?;
            Ok((bits, p.ledger().clone()))
        });
        let want: Vec<bool> = vals.iter().map(|&v| v < 0.0).collect();
        assert_eq!(a.0, want);
        let t = a.1.tag("cmp");
        assert_eq!((t.rounds, t.bytes), (8, 432 * 50));
        assert_eq!(a.1.comparisons(), 50);
        assert_eq!(a.1.reveals().count(RevealKind::ComparisonBit), 50);
    }

    #[test]
    fn ties_compare_false() {
        let x = shared(&[3.25, -1.0], 1);
        let (a, _) = run_pair(3, ProtocolConfig::default(), FixedPointCodec::default(), |p| {
            p.compare_open("cmp", &x.local(p.id()), &x.local(p.id()))
        });
        assert_eq!(a, vec![false, false]);
    }

    #[test]
    fn relu_and_row_max() {
        let vals = [-3.0, 2.5, 0.0, -0.001, 7.0, 1.0, -2.0];
        let x = shared(&vals, 5);
        let (a, b) = run_pair(7, ProtocolConfig::default(), FixedPointCodec::default(), |p| {
            let xi = x.local(p.id());
            let r = p.relu("relu", &xi)?;
            let row = crate::shares::LocalShare::new(vec![7], xi.data.clone())?;
            let m = p.max_rows("max", &row, 7)?;
            Ok((r, m))
        });
        let r = open_f64(a.0, b.0);
        for (g, v) in r.iter().zip(vals) {
            assert!((g - v.max(0.0)).abs() < 1e-4);
        }
        assert!((open_f64(a.1, b.1)[0] - 7.0).abs() < 1e-4);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn compare_agrees_with_plaintext(pairs in proptest::collection::vec((-1e6f64..1e6, -1e6f64..1e6), 1..16), seed: u64) {
            let (xs, ys): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let x = shared(&xs, seed);
            let y = shared(&ys, seed ^ 7);
            let (a, _) = run_pair(seed, ProtocolConfig::default(), FixedPointCodec::default(), |p| {
                p.compare_open("cmp", &x.local(p.id()), &y.local(p.id()))
            });
            let codec = FixedPointCodec::default();
            for ((g, u), v) in a.iter().zip(&xs).zip(&ys) {
                let (u, v) = (codec.encode::<u64>(*u).unwrap().signed(), codec.encode::<u64>(*v).unwrap().signed());
                prop_assert_eq!(*g, u < v);
            }
        }
    }
}
