//! Softmax, LayerNorm and entropy assembled from the iterative kernels.

use super::Party;
use crate::error::{Error, Result};
use crate::ring::RingWord;
use crate::shares::LocalShare;

impl<W: RingWord> Party<W> {
    fn rows_of(x: &LocalShare<W>, row_len: usize) -> Result<usize> {
        if row_len == 0 || !x.len().is_multiple_of(row_len) {
            return Err(Error::Shape(format!(
                "{} elements do not split into rows of {row_len}",
                x.len()
            )));
        }
        Ok(x.len() / row_len)
    }

    /// Row-wise softmax over contiguous rows of `row_len`.
    pub fn softmax(&mut self, tag: &str, x: &LocalShare<W>, row_len: usize) -> Result<LocalShare<W>> {
        let rows = Self::rows_of(x, row_len)?;
        if row_len == 1 {
            return self.constant(1.0, x.shape.clone());
        }
        let (e, _) = self.shifted_exp(tag, x, row_len, rows)?;
        let s = self.sum_rows(&e, row_len)?;
        let r = self.reciprocal(tag, &s)?;
        let rb = self.broadcast_rows(&r, row_len, x.shape.clone())?;
        self.mul(tag, &e, &rb)
    }

    /// `exp(x - rowmax(x))` and the shifted inputs.
    fn shifted_exp(
        &mut self,
        tag: &str,
        x: &LocalShare<W>,
        row_len: usize,
        rows: usize,
    ) -> Result<(LocalShare<W>, LocalShare<W>)> {
        let m = self.max_rows(tag, x, row_len)?;
        let mb = self.broadcast_rows(&m, row_len, x.shape.clone())?;
        let z = self.sub(x, &mb)?;
        debug_assert_eq!(z.len(), rows * row_len);
        let e = self.exp(tag, &z)?;
        Ok((e, z))
    }

    /// Row-wise LayerNorm with shared affine parameters of length `row_len`.
    pub fn layernorm(
        &mut self,
        tag: &str,
        x: &LocalShare<W>,
        row_len: usize,
        gamma: &LocalShare<W>,
        beta: &LocalShare<W>,
        eps: f64,
    ) -> Result<LocalShare<W>> {
        let rows = Self::rows_of(x, row_len)?;
        let inv_n = 1.0 / row_len as f64;
        let s = self.sum_rows(x, row_len)?;
        let mean = self.mul_public(tag, &s, inv_n)?;
        let mb = self.broadcast_rows(&mean, row_len, x.shape.clone())?;
        let c = self.sub(x, &mb)?;
        let sq = self.mul(tag, &c, &c)?;
        let ss = self.sum_rows(&sq, row_len)?;
        let var = self.mul_public(tag, &ss, inv_n)?;
        let var = self.add_public(&var, eps)?;
        let r = self.rsqrt(tag, &var)?;
        let rb = self.broadcast_rows(&r, row_len, x.shape.clone())?;
        let g = self.tile_rows(gamma, rows, x.shape.clone())?;
        let b = self.tile_rows(beta, rows, x.shape.clone())?;
        let y = self.mul(tag, &c, &rb)?;
        let y = self.mul(tag, &y, &g)?;
        self.add(&y, &b)
    }

    /// Shannon entropy (nats) of softmax over each row of logits, as
    /// `ln S - sum_i p_i z_i` with `z = x - max` and `S = sum_i exp(z_i)`.
    pub fn entropy(&mut self, tag: &str, x: &LocalShare<W>, row_len: usize) -> Result<LocalShare<W>> {
        let rows = Self::rows_of(x, row_len)?;
        if row_len == 1 {
            return self.constant(0.0, vec![rows]);
        }
        let (e, z) = self.shifted_exp(tag, x, row_len, rows)?;
        let s = self.sum_rows(&e, row_len)?;
        let r = self.reciprocal(tag, &s)?;
        let ln_s = self.log(tag, &s)?;
        let rb = self.broadcast_rows(&r, row_len, x.shape.clone())?;
        let p = self.mul(tag, &e, &rb)?;
        let pz = self.mul(tag, &p, &z)?;
        let spz = self.sum_rows(&pz, row_len)?;
        self.sub(&ln_s, &spz)
    }
}

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::super::ProtocolConfig;
    use crate::ring::FixedPointCodec;
    use crate::shares::share;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn run(vals: &[f64], row_len: usize, op: &str) -> Vec<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let codec = FixedPointCodec::default();
        let x = share(vals, vec![vals.len()], &codec, &mut rng).unwrap();
        let g = share(&vec![1.0; row_len], vec![row_len], &codec, &mut rng).unwrap();
        let b = share(&vec![0.0; row_len], vec![row_len], &codec, &mut rng).unwrap();
        let (a, bb) = run_pair(9, ProtocolConfig::default(), codec, |p| {
            let xi = x.local(p.id());
            match op {
                "softmax" => p.softmax("sm", &xi, row_len),
                "entropy" => p.entropy("ent", &xi, row_len),
                _ => p.layernorm("ln", &xi, row_len, &g.local(p.id()), &b.local(p.id()), 1e-5),
            }
        });
        open_f64(a, bb)
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let got = run(&[0.0, 0.0], 2, "softmax");
        for g in got {
            assert!((g - 0.5).abs() < 5e-3, "{g}");
        }
    }

    #[test]
    fn softmax_of_length_one_is_one() {
        assert_eq!(run(&[3.7, -1.0], 1, "softmax"), vec![1.0, 1.0]);
    }

    #[test]
    fn entropy_special_cases() {
        let one_hot = run(&[20.0, 0.0, 0.0, 0.0], 4, "entropy")[0];
        assert!(one_hot.abs() < 0.05, "{one_hot}");
        let uniform = run(&[1.0, 1.0, 1.0, 1.0], 4, "entropy")[0];
        assert!((uniform - 4f64.ln()).abs() < 0.05, "{uniform}");
    }

    #[test]
    fn layernorm_normalizes() {
        let got = run(&[1.0, 2.0, 3.0, 4.0], 4, "ln");
        let mean = 2.5;
        let sd = (1.25f64 + 1e-5).sqrt();
        for (g, v) in got.iter().zip([1.0, 2.0, 3.0, 4.0]) {
            assert!((g - (v - mean) / sd).abs() < 0.02, "{g}");
        }
    }
}
