//! Beaver multiplication, matrix products and probabilistic truncation.

use super::{Party, TripleBatch};
use crate::error::{Error, Result};
use crate::ring::{ring_matmul, RingElement, RingWord};
use crate::shares::{LocalShare, StreamKind};

impl<W: RingWord> Party<W> {
    /// Elementwise product without rescaling. One round.
    pub fn mul_raw(&mut self, tag: &str, x: &LocalShare<W>, y: &LocalShare<W>) -> Result<LocalShare<W>> {
        let mut batch = self.take_triples(x.len());
        self.mul_with(tag, x, y, &mut batch)
    }

    /// Elementwise product drawing from a caller-held triple batch.
    pub fn mul_with(
        &mut self,
        tag: &str,
        x: &LocalShare<W>,
        y: &LocalShare<W>,
        batch: &mut TripleBatch<W>,
    ) -> Result<LocalShare<W>> {
        if x.shape != y.shape {
            return Err(Error::Shape(format!("mul: {:?} vs {:?}", x.shape, y.shape)));
        }
        let n = x.len();
        if batch.remaining() < n {
            return Err(Error::Exhausted(format!(
                "'{tag}' needs {n} triples, batch {} has {} left",
                batch.id,
                batch.remaining()
            )));
        }
        let lo = batch.cursor;
        self.consume(StreamKind::Triples, batch.id + lo as u64, n as u64)?;
        batch.cursor += n;
        self.usage.triples += n as u64;

        let (a, b, c) = (&batch.a[lo..lo + n], &batch.b[lo..lo + n], &batch.c[lo..lo + n]);
        let mut masked = Vec::with_capacity(2 * n);
        masked.extend(x.data.iter().zip(a).map(|(&x, &a)| x - a));
        masked.extend(y.data.iter().zip(b).map(|(&y, &b)| y - b));
        let open = self.open_masked(tag, &masked)?;
        let (eps, del) = open.split_at(n);
        let leader = self.is_leader();
        let data = (0..n)
            .map(|i| {
                let z = c[i] + eps[i] * y.data[i] + del[i] * x.data[i];
                if leader {
                    z - eps[i] * del[i]
                } else {
                    z
                }
            })
            .collect();
        self.add_flops(5 * n as u64);
        Ok(LocalShare {
            shape: x.shape.clone(),
            data,
        })
    }

    /// Fixed-point elementwise product. Two rounds.
    pub fn mul(&mut self, tag: &str, x: &LocalShare<W>, y: &LocalShare<W>) -> Result<LocalShare<W>> {
        let z = self.mul_raw(tag, x, y)?;
        self.truncate(tag, &z)
    }

    /// Divides by `2^f`.
    pub fn truncate(&mut self, tag: &str, x: &LocalShare<W>) -> Result<LocalShare<W>> {
        let f = self.codec.frac_bits();
        self.truncate_bits(tag, x, f)
    }

    /// Divides by `2^bits` with error at most one unit in the last place.
    /// Correct whenever `|x| < 2^(BITS-2)`. One round.
    pub fn truncate_bits(&mut self, tag: &str, x: &LocalShare<W>, bits: u32) -> Result<LocalShare<W>> {
        let n = x.len();
        if n == 0 {
            return Ok(x.clone());
        }
        let pairs = self.dealer.deal_truncation_pairs(n, bits);
        self.consume(StreamKind::Truncation, pairs.id, n as u64)?;
        self.usage.truncation_pairs += n as u64;
        let i = self.id.index();
        let offset = RingElement::<W>(W::ONE.shl(W::BITS - 2));
        let leader = self.is_leader();
        let masked: Vec<_> = x
            .data
            .iter()
            .zip(&pairs.r.shares[i])
            .map(|(&v, &r)| if leader { v + r + offset } else { v + r })
            .collect();
        let c = self.open_masked(tag, &masked)?;
        let r_hi = &pairs.r_hi.shares[i];
        let data = (0..n)
            .map(|k| {
                if leader {
                    (c[k] >> bits) - (offset >> bits) - r_hi[k]
                } else {
                    -r_hi[k]
                }
            })
            .collect();
        self.add_flops(3 * n as u64);
        Ok(LocalShare {
            shape: x.shape.clone(),
            data,
        })
    }

    /// Several independent `[m×k]·[k×n]` products in one round, no rescaling.
    pub fn matmul_raw_batch(
        &mut self,
        tag: &str,
        pairs: &[(&LocalShare<W>, &LocalShare<W>)],
    ) -> Result<Vec<LocalShare<W>>> {
        let mut dims = Vec::with_capacity(pairs.len());
        for (x, y) in pairs {
            let (&[m, k], &[k2, n]) = (x.shape.as_slice(), y.shape.as_slice()) else {
                return Err(Error::Shape(format!(
                    "matmul operands must be 2-D, got {:?} and {:?}",
                    x.shape, y.shape
                )));
            };
            if k != k2 {
                return Err(Error::Shape(format!("matmul inner dims {k} vs {k2}")));
            }
            dims.push((m, k, n));
        }
        let i = self.id.index();
        let mut triples = Vec::with_capacity(pairs.len());
        let mut masked = Vec::new();
        for ((x, y), &(m, k, n)) in pairs.iter().zip(&dims) {
            let t = self.dealer.deal_matmul_triple(m, k, n);
            self.consume(StreamKind::Triples, t.id, (m * k + k * n) as u64)?;
            self.usage.matmul_triple_words += (m * k + k * n) as u64;
            masked.extend(x.data.iter().zip(&t.a.shares[i]).map(|(&v, &a)| v - a));
            masked.extend(y.data.iter().zip(&t.b.shares[i]).map(|(&v, &b)| v - b));
            triples.push(t);
        }
        let open = self.open_masked(tag, &masked)?;
        let leader = self.is_leader();
        let mut off = 0;
        let mut out = Vec::with_capacity(pairs.len());
        for (((x, y), &(m, k, n)), t) in pairs.iter().zip(&dims).zip(&triples) {
            let e = &open[off..off + m * k];
            let f = &open[off + m * k..off + m * k + k * n];
            off += m * k + k * n;
            let ey = ring_matmul(e, &y.data, m, k, n);
            let xf = ring_matmul(&x.data, f, m, k, n);
            let mut z: Vec<_> = t.c.shares[i]
                .iter()
                .zip(&ey)
                .zip(&xf)
                .map(|((&c, &a), &b)| c + a + b)
                .collect();
            if leader {
                let ef = ring_matmul(e, f, m, k, n);
                z.iter_mut().zip(&ef).for_each(|(v, &w)| *v -= w);
            }
            self.add_flops(6 * (m * k * n) as u64);
            out.push(LocalShare {
                shape: vec![m, n],
                data: z,
            });
        }
        Ok(out)
    }

    /// Fixed-point products for a batch; two rounds regardless of batch size.
    pub fn matmul_batch(
        &mut self,
        tag: &str,
        pairs: &[(&LocalShare<W>, &LocalShare<W>)],
    ) -> Result<Vec<LocalShare<W>>> {
        let raw = self.matmul_raw_batch(tag, pairs)?;
        self.truncate_many(tag, &raw)
    }

    pub fn matmul(&mut self, tag: &str, x: &LocalShare<W>, y: &LocalShare<W>) -> Result<LocalShare<W>> {
        Ok(self.matmul_batch(tag, &[(x, y)])?.pop().expect("one product"))
    }

    /// Truncates several tensors in a single round.
    pub fn truncate_many(&mut self, tag: &str, xs: &[LocalShare<W>]) -> Result<Vec<LocalShare<W>>> {
        let flat: Vec<_> = xs.iter().flat_map(|x| x.data.iter().copied()).collect();
        let n = flat.len();
        let t = self.truncate(
            tag,
            &LocalShare {
                shape: vec![n],
                data: flat,
            },
        )?;
        let mut off = 0;
        Ok(xs
            .iter()
            .map(|x| {
                let d = t.data[off..off + x.len()].to_vec();
                off += x.len();
                LocalShare {
                    shape: x.shape.clone(),
                    data: d,
                }
            })
            .collect())
    }

    /// Elementwise fixed-point products of several pairs in two rounds.
    pub fn mul_many(&mut self, tag: &str, pairs: &[(&LocalShare<W>, &LocalShare<W>)]) -> Result<Vec<LocalShare<W>>> {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for (x, y) in pairs {
            if x.shape != y.shape {
                return Err(Error::Shape(format!("mul: {:?} vs {:?}", x.shape, y.shape)));
            }
            xs.extend_from_slice(&x.data);
            ys.extend_from_slice(&y.data);
        }
        let n = xs.len();
        let z = self.mul(
            tag,
            &LocalShare {
                shape: vec![n],
                data: xs,
            },
            &LocalShare {
                shape: vec![n],
                data: ys,
            },
        )?;
        let mut off = 0;
        Ok(pairs
            .iter()
            .map(|(x, _)| {
                let d = z.data[off..off + x.len()].to_vec();
                off += x.len();
                LocalShare {
                    shape: x.shape.clone(),
                    data: d,
                }
            })
            .collect())
    }
}
