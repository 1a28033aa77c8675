//! Bilinear resampling with half-pixel centres (edge-clamped).

use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Source taps for one output coordinate: `(i0, i1, w1)` with weight `1 - w1` on `i0`.
fn taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn bilinear_resize<T: Real>(x: &Tensor<T>, ho: usize, wo: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if ho == 0 || wo == 0 {
        return Err(Error::shape("bilinear_resize to an empty size"));
    }
    let ty = taps(ho, h);
    let tx = taps(wo, w);
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    for plane in 0..n * c {
        let src = &x.data()[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out.data_mut()[plane * ho * wo..(plane + 1) * ho * wo];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::lit(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::lit(fx);
                let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
                dst[oy * wo + ox] = top * (T::one() - fy) + bot * fy;
            }
        }
    }
    Ok(out)
}

fn bilinear_resize_backward<T: Real>(grad: &Tensor<T>, in_shape: &[usize]) -> Result<Tensor<T>> {
    let (n, c, ho, wo) = grad.dims4()?;
    let (h, w) = (in_shape[2], in_shape[3]);
    let ty = taps(ho, h);
    let tx = taps(wo, w);
    let mut gx = Tensor::zeros(in_shape);
    for plane in 0..n * c {
        let g = &grad.data()[plane * ho * wo..(plane + 1) * ho * wo];
        let dst = &mut gx.data_mut()[plane * h * w..(plane + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::lit(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::lit(fx);
                let gv = g[oy * wo + ox];
                let (top, bot) = (gv * (T::one() - fy), gv * fy);
                dst[y0 * w + x0] = dst[y0 * w + x0] + top * (T::one() - fx);
                dst[y0 * w + x1] = dst[y0 * w + x1] + top * fx;
                dst[y1 * w + x0] = dst[y1 * w + x0] + bot * (T::one() - fx);
                dst[y1 * w + x1] = dst[y1 * w + x1] + bot * fx;
            }
        }
    }
    Ok(gx)
}

impl<T: Real> Tape<T> {
    pub fn bilinear_resize(&mut self, x: Var, ho: usize, wo: usize) -> Result<Var> {
        let out = bilinear_resize(self.value(x), ho, wo)?;
        Ok(self.record(
            out,
            &[x],
            Box::new(|ctx| Ok(vec![Some(bilinear_resize_backward(ctx.grad, ctx.inputs[0].shape())?)])),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn halving_averages_2x2_blocks() {
        let x = Tensor::<f64>::from_vec(&[1, 1, 2, 4], vec![1.0, 3.0, 5.0, 7.0, 3.0, 5.0, 7.0, 9.0]).unwrap();
        let y = bilinear_resize(&x, 1, 2).unwrap();
        assert_eq!(y.data(), &[3.0, 7.0]);
    }

    #[test]
    fn same_size_is_identity() {
        let x = Tensor::<f64>::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(bilinear_resize(&x, 2, 2).unwrap(), x);
    }

    #[test]
    fn upsampling_constant_stays_constant() {
        let x = Tensor::<f64>::full(&[1, 2, 3, 3], 0.25);
        let y = bilinear_resize(&x, 6, 6).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }
}
