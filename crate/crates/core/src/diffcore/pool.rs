//! Pooling: 2x2 max-pool (features and masks), global and masked average pooling.

use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

fn pooled_dims(h: usize, w: usize) -> Result<(usize, usize)> {
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!("2x2 max-pool needs even spatial size, got {h}x{w}")));
    }
    Ok((h / 2, w / 2))
}

/// 2x2/stride-2 max-pool returning the output and the flat argmax index of each cell.
/// Ties resolve to the first element in row-major window order.
pub fn max_pool2x2<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = x.dims4()?;
    let (ho, wo) = pooled_dims(h, w)?;
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    let mut argmax = vec![0usize; n * c * ho * wo];
    let xd = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if xd[idx] > xd[best] {
                        best = idx;
                    }
                }
                let o = (plane * ho + oy) * wo + ox;
                out.data_mut()[o] = xd[best];
                argmax[o] = best;
            }
        }
    }
    Ok((out, argmax))
}

/// Visible-if-any downsampling of a binary mask (2x2 max-pool).
pub fn mask_max_pool2x2<T: Real>(mask: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(max_pool2x2(mask)?.0)
}

/// Per-channel `sum(feature * mask) / max(sum(mask), 1)`; `[N,C,h,w] -> [N,C]`.
pub fn masked_gap<T: Real>(feature: &Tensor<T>, mask: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = feature.dims4()?;
    mask.expect_shape(&[n, 1, h, w], "masked_gap mask")?;
    let hw = h * w;
    let mut out = Tensor::zeros(&[n, c]);
    for ni in 0..n {
        let m = &mask.data()[ni * hw..(ni + 1) * hw];
        let denom = m.iter().copied().sum::<T>().max(T::one());
        for ci in 0..c {
            let f = &feature.data()[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
            let s: T = f.iter().zip(m).map(|(&a, &b)| a * b).sum();
            out.data_mut()[ni * c + ci] = s / denom;
        }
    }
    Ok(out)
}

impl<T: Real> Tape<T> {
    pub fn max_pool2x2(&mut self, x: Var) -> Result<Var> {
        let (out, argmax) = max_pool2x2(self.value(x))?;
        self.note_branches(argmax.iter().map(|&i| i as u64));
        Ok(self.record(
            out,
            &[x],
            Box::new(move |ctx| {
                let mut gx = Tensor::zeros(ctx.inputs[0].shape());
                for (&src, &g) in argmax.iter().zip(ctx.grad.data()) {
                    gx.data_mut()[src] = gx.data()[src] + g;
                }
                Ok(vec![Some(gx)])
            }),
        ))
    }

    /// Global average pool `[N,C,H,W] -> [N,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, _, h, w) = self.value(x).dims4()?;
        let ones = Tensor::ones(&[n, 1, h, w]);
        self.masked_gap(x, &ones)
    }

    pub fn masked_gap(&mut self, x: Var, mask: &Tensor<T>) -> Result<Var> {
        let out = masked_gap(self.value(x), mask)?;
        let mask = mask.clone();
        Ok(self.record(
            out,
            &[x],
            Box::new(move |ctx| {
                let (n, c, h, w) = ctx.inputs[0].dims4()?;
                let hw = h * w;
                let mut gx = Tensor::zeros(&[n, c, h, w]);
                for ni in 0..n {
                    let m = &mask.data()[ni * hw..(ni + 1) * hw];
                    let denom = m.iter().copied().sum::<T>().max(T::one());
                    for ci in 0..c {
                        let g = ctx.grad.data()[ni * c + ci] / denom;
                        let dst = &mut gx.data_mut()[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                        dst.iter_mut().zip(m).for_each(|(d, &mv)| *d = g * mv);
                    }
                }
                Ok(vec![Some(gx)])
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn masked_gap_full_mask_is_gap() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = Tensor::<f64>::rand_uniform(&[2, 3, 4, 4], -1.0, 1.0, &mut rng);
        let g = masked_gap(&f, &Tensor::ones(&[2, 1, 4, 4])).unwrap();
        for ni in 0..2 {
            for ci in 0..3 {
                let plane = &f.data()[(ni * 3 + ci) * 16..(ni * 3 + ci + 1) * 16];
                let mean = plane.iter().sum::<f64>() / 16.0;
                assert!((g.data()[ni * 3 + ci] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn masked_gap_single_pixel_and_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = Tensor::<f64>::rand_uniform(&[1, 3, 4, 4], -1.0, 1.0, &mut rng);
        let mut m = Tensor::zeros(&[1, 1, 4, 4]);
        m.data_mut()[6] = 1.0;
        let g = masked_gap(&f, &m).unwrap();
        for ci in 0..3 {
            assert_eq!(g.data()[ci], f.data()[ci * 16 + 6]);
        }
        let g = masked_gap(&f, &Tensor::zeros(&[1, 1, 4, 4])).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn masked_gap_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = Tensor::<f64>::rand_uniform(&[2, 4, 6, 6], -1.0, 1.0, &mut rng);
        let m = Tensor::from_vec(
            &[2, 1, 6, 6],
            (0..72).map(|i| if (i % 6) < 3 { 1.0 } else { 0.0 }).collect(),
        )
        .unwrap();
        let g = masked_gap(&f, &m).unwrap();
        for ni in 0..2 {
            for ci in 0..4 {
                let (mut s, mut cnt) = (0.0, 0.0);
                for y in 0..6 {
                    for x in 0..3 {
                        s += f.data()[((ni * 4 + ci) * 6 + y) * 6 + x];
                        cnt += 1.0;
                    }
                }
                assert!((g.data()[ni * 4 + ci] - s / cnt).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mask_pool_is_visible_if_any() {
        let m = Tensor::<f32>::from_vec(&[1, 1, 2, 4], vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let p = mask_max_pool2x2(&m).unwrap();
        assert_eq!(p.data(), &[0.0, 1.0]);
        assert!(max_pool2x2(&Tensor::<f32>::ones(&[1, 1, 3, 4])).is_err());
    }
}
