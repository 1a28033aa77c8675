//! Self-attention over spatial positions with a learned residual gain:
//! `X' = softmax(Q K^T / sqrt(C')) V`, `Y = X + gamma * X'`.

use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Real, Tensor};

/// Query/key width used for a `channels`-wide input.
pub fn reduced_channels(channels: usize) -> usize {
    (channels / 8).max(1)
}

/// Parameter handles of one attention block (1x1 projections plus `gamma`).
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub gamma: Var,
}

fn softmax_rows<T: Real>(s: &mut [T], cols: usize) {
    for row in s.chunks_mut(cols) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z = z + *v;
        }
        row.iter_mut().for_each(|v| *v = *v / z);
    }
}

/// Attention probabilities for one item: `A = softmax(Q^T K / sqrt(c'))`, `[P, P]`.
fn attention_probs<T: Real>(q: &[T], k: &[T], cq: usize, p: usize) -> Vec<T> {
    let mut a = vec![T::zero(); p * p];
    gemm(MatRef::new(q, cq, p).t(), MatRef::new(k, cq, p), T::zero(), &mut a);
    let scale = T::one() / T::lit(cq as f64).sqrt();
    a.iter_mut().for_each(|v| *v = *v * scale);
    softmax_rows(&mut a, p);
    a
}

impl<T: Real> Tape<T> {
    /// `X'[c, i] = sum_j A[i, j] V[c, j]` for `q, k: [N, C', H, W]`, `v: [N, C, H, W]`.
    pub fn attention_core(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let (n, cq, h, w) = self.value(q).dims4()?;
        self.value(k).expect_shape(&[n, cq, h, w], "attention key")?;
        let (vn, c, vh, vw) = self.value(v).dims4()?;
        if (vn, vh, vw) != (n, h, w) {
            return Err(Error::shape("attention value spatial shape"));
        }
        let p = h * w;
        let mut out = Tensor::zeros(&[n, c, h, w]);
        for ni in 0..n {
            let a = attention_probs(self.value(q).item(ni), self.value(k).item(ni), cq, p);
            let vn = MatRef::new(self.value(v).item(ni), c, p);
            gemm(vn, MatRef::new(&a, p, p).t(), T::zero(), &mut out.data_mut()[ni * c * p..(ni + 1) * c * p]);
        }
        Ok(self.record(
            out,
            &[q, k, v],
            Box::new(move |ctx| {
                let mut gq = Tensor::zeros(&[n, cq, h, w]);
                let mut gk = Tensor::zeros(&[n, cq, h, w]);
                let mut gv = Tensor::zeros(&[n, c, h, w]);
                let scale = T::one() / T::lit(cq as f64).sqrt();
                for ni in 0..n {
                    let (qn, kn, vn) = (ctx.inputs[0].item(ni), ctx.inputs[1].item(ni), ctx.inputs[2].item(ni));
                    let a = attention_probs(qn, kn, cq, p);
                    let gy = MatRef::new(ctx.grad.item(ni), c, p);
                    // dV = dX' A
                    gemm(gy, MatRef::new(&a, p, p), T::zero(), &mut gv.data_mut()[ni * c * p..(ni + 1) * c * p]);
                    // dA = dX'^T V, then the softmax Jacobian.
                    let mut da = vec![T::zero(); p * p];
                    gemm(gy.t(), MatRef::new(vn, c, p), T::zero(), &mut da);
                    for (drow, arow) in da.chunks_mut(p).zip(a.chunks(p)) {
                        let dot: T = drow.iter().zip(arow).map(|(&d, &a)| d * a).sum();
                        drow.iter_mut().zip(arow).for_each(|(d, &a)| *d = a * (*d - dot) * scale);
                    }
                    // S = Q^T K: dQ = K dS^T, dK = Q dS.
                    gemm(
                        MatRef::new(kn, cq, p),
                        MatRef::new(&da, p, p).t(),
                        T::zero(),
                        &mut gq.data_mut()[ni * cq * p..(ni + 1) * cq * p],
                    );
                    gemm(
                        MatRef::new(qn, cq, p),
                        MatRef::new(&da, p, p),
                        T::zero(),
                        &mut gk.data_mut()[ni * cq * p..(ni + 1) * cq * p],
                    );
                }
                Ok(vec![Some(gq), Some(gk), Some(gv)])
            }),
        ))
    }

    pub fn attention_block(&mut self, x: Var, p: &AttentionVars) -> Result<Var> {
        let q = self.conv2d(x, p.wq, Some(p.bq), 1, 0)?;
        let k = self.conv2d(x, p.wk, Some(p.bk), 1, 0)?;
        let v = self.conv2d(x, p.wv, Some(p.bv), 1, 0)?;
        let attended = self.attention_core(q, k, v)?;
        let scaled = self.mul_scalar(attended, p.gamma)?;
        self.add(x, scaled)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn leaf(tape: &mut Tape<f64>, rng: &mut ChaCha8Rng, shape: &[usize]) -> Var {
        tape.leaf(Tensor::rand_uniform(shape, -1.0, 1.0, rng), true)
    }

    fn block(tape: &mut Tape<f64>, rng: &mut ChaCha8Rng, c: usize, gamma: f64) -> AttentionVars {
        let cq = reduced_channels(c);
        AttentionVars {
            wq: leaf(tape, rng, &[cq, c, 1, 1]),
            bq: leaf(tape, rng, &[cq]),
            wk: leaf(tape, rng, &[cq, c, 1, 1]),
            bk: leaf(tape, rng, &[cq]),
            wv: leaf(tape, rng, &[c, c, 1, 1]),
            bv: leaf(tape, rng, &[c]),
            gamma: tape.leaf(Tensor::scalar(gamma), true),
        }
    }

    #[test]
    fn gamma_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &mut rng, &[2, 8, 3, 3]);
        let p = block(&mut tape, &mut rng, 8, 0.0);
        let y = tape.attention_block(x, &p).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn single_location_reduces_to_value_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &mut rng, &[1, 4, 1, 1]);
        let p = block(&mut tape, &mut rng, 4, 0.6);
        let y = tape.attention_block(x, &p).unwrap();
        let (xv, wv, bv) = (tape.value(x).data(), tape.value(p.wv).data(), tape.value(p.bv).data());
        for c in 0..4 {
            let v: f64 = (0..4).map(|j| wv[c * 4 + j] * xv[j]).sum::<f64>() + bv[c];
            assert!((tape.value(y).data()[c] - (xv[c] + 0.6 * v)).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &mut rng, &[1, 4, 3, 3]);
        let p = block(&mut tape, &mut rng, 4, 0.8);
        let y = tape.attention_block(x, &p).unwrap();

        let (c, cq, n) = (4, 1, 9);
        let xv = tape.value(x).data();
        let proj = |w: &[f64], b: &[f64], rows: usize| -> Vec<Vec<f64>> {
            (0..n)
                .map(|i| (0..rows).map(|r| b[r] + (0..c).map(|j| w[r * c + j] * xv[j * n + i]).sum::<f64>()).collect())
                .collect()
        };
        let q = proj(tape.value(p.wq).data(), tape.value(p.bq).data(), cq);
        let k = proj(tape.value(p.wk).data(), tape.value(p.bk).data(), cq);
        let v = proj(tape.value(p.wv).data(), tape.value(p.bv).data(), c);
        for i in 0..n {
            let logits: Vec<f64> = (0..n)
                .map(|j| (0..cq).map(|r| q[i][r] * k[j][r]).sum::<f64>() / (cq as f64).sqrt())
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for ch in 0..c {
                let att: f64 = (0..n).map(|j| logits[j].exp() / z * v[j][ch]).sum();
                let expect = xv[ch * n + i] + 0.8 * att;
                assert!((tape.value(y).data()[ch * n + i] - expect).abs() < 1e-12);
            }
        }
    }
}
