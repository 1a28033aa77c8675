//! Pointwise, reduction and reshaping ops.

use super::conv::mask_channels;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

impl<T: Real> Tape<T> {
    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        self.note_branches(out.data().iter().map(|&y| u64::from(y > T::zero())));
        self.record(
            out,
            &[x],
            Box::new(|ctx| {
                let g = ctx.grad.zip_map(ctx.output, |g, y| if y > T::zero() { g } else { T::zero() })?;
                Ok(vec![Some(g)])
            }),
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.record(
            out,
            &[x],
            Box::new(|ctx| {
                let g = ctx.grad.zip_map(ctx.output, |g, y| g * y * (T::one() - y))?;
                Ok(vec![Some(g)])
            }),
        )
    }

    /// Hard clamp to `[0, 1]`; the gradient passes inside the closed interval only.
    pub fn clamp01(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()).min(T::one()));
        let side = |v: T| u64::from(v >= T::zero()) + u64::from(v <= T::one());
        let sides: Vec<u64> = self.value(x).data().iter().map(|&v| side(v)).collect();
        self.note_branches(sides);
        self.record(
            out,
            &[x],
            Box::new(|ctx| {
                let g = ctx.grad.zip_map(ctx.inputs[0], |g, v| {
                    if v >= T::zero() && v <= T::one() {
                        g
                    } else {
                        T::zero()
                    }
                })?;
                Ok(vec![Some(g)])
            }),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.record(
            out,
            &[a, b],
            Box::new(|ctx| Ok(vec![Some(ctx.grad.clone()), Some(ctx.grad.clone())])),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.record(
            out,
            &[a, b],
            Box::new(|ctx| Ok(vec![Some(ctx.grad.clone()), Some(ctx.grad.map(|g| -g))])),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.record(
            out,
            &[a, b],
            Box::new(|ctx| {
                let ga = ctx.needs[0].then(|| ctx.grad.zip_map(ctx.inputs[1], |g, y| g * y)).transpose()?;
                let gb = ctx.needs[1].then(|| ctx.grad.zip_map(ctx.inputs[0], |g, x| g * x)).transpose()?;
                Ok(vec![ga, gb])
            }),
        ))
    }

    /// `x * c` for a constant `c`.
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let cv = T::lit(c);
        let out = self.value(x).map(|v| v * cv);
        self.record(out, &[x], Box::new(move |ctx| Ok(vec![Some(ctx.grad.map(|g| g * cv))])))
    }

    /// `x + c` for a constant `c`.
    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let cv = T::lit(c);
        let out = self.value(x).map(|v| v + cv);
        self.record(out, &[x], Box::new(|ctx| Ok(vec![Some(ctx.grad.clone())])))
    }

    /// `x * s` where `s` is a single-element variable (learned scalar gain).
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::shape("mul_scalar expects a single-element scale"));
        }
        let sv = self.value(s).data()[0];
        let out = self.value(x).map(|v| v * sv);
        Ok(self.record(
            out,
            &[x, s],
            Box::new(|ctx| {
                let sv = ctx.inputs[1].data()[0];
                let gx = ctx.needs[0].then(|| ctx.grad.map(|g| g * sv));
                let gs = ctx.needs[1].then(|| {
                    let dot: T = ctx
                        .grad
                        .data()
                        .iter()
                        .zip(ctx.inputs[0].data())
                        .map(|(&g, &x)| g * x)
                        .sum();
                    Tensor::from_vec(ctx.inputs[1].shape(), vec![dot]).expect("scalar")
                });
                Ok(vec![gx, gs])
            }),
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.record(
            out,
            &[x],
            Box::new(|ctx| {
                let g = ctx.grad.data()[0];
                Ok(vec![Some(Tensor::full(ctx.inputs[0].shape(), g))])
            }),
        )
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// `sum_i weights[i] * x[i]` over a 1-D variable with constant weights.
    pub fn weighted_sum(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        if self.value(x).numel() != weights.len() {
            return Err(Error::shape(format!(
                "weighted_sum: {} values, {} weights",
                self.value(x).numel(),
                weights.len()
            )));
        }
        let w: Vec<T> = weights.iter().map(|&v| T::lit(v)).collect();
        let out = Tensor::scalar(
            self.value(x)
                .data()
                .iter()
                .zip(&w)
                .map(|(&a, &b)| a * b)
                .sum(),
        );
        Ok(self.record(
            out,
            &[x],
            Box::new(move |ctx| {
                let g = ctx.grad.data()[0];
                let data = w.iter().map(|&wi| wi * g).collect();
                Ok(vec![Some(Tensor::from_vec(ctx.inputs[0].shape(), data)?)])
            }),
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.record(
            out,
            &[x],
            Box::new(|ctx| Ok(vec![Some(ctx.grad.clone().reshape(ctx.inputs[0].shape())?)])),
        ))
    }

    /// Multiplies every channel by a constant single-channel mask `[N,1,H,W]`.
    pub fn mask_channels(&mut self, x: Var, mask: &Tensor<T>) -> Result<Var> {
        let (n, _, h, w) = self.value(x).dims4()?;
        mask.expect_shape(&[n, 1, h, w], "mask_channels mask")?;
        let out = mask_channels(self.value(x), mask);
        let mask = mask.clone();
        Ok(self.record(
            out,
            &[x],
            Box::new(move |ctx| Ok(vec![Some(mask_channels(ctx.grad, &mask))])),
        ))
    }

    /// Concatenates rank-4 tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]).dims4()?;
        let (n, _, h, w) = first;
        let mut chans = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pn, pc, ph, pw) = self.value(p).dims4()?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::shape(format!(
                    "concat_channels: {:?} vs {:?}",
                    self.value(parts[0]).shape(),
                    self.value(p).shape()
                )));
            }
            chans.push(pc);
        }
        let ctot: usize = chans.iter().sum();
        let hw = h * w;
        let mut data = Vec::with_capacity(n * ctot * hw);
        for ni in 0..n {
            for (&p, &c) in parts.iter().zip(&chans) {
                data.extend_from_slice(&self.value(p).data()[ni * c * hw..(ni + 1) * c * hw]);
            }
        }
        let out = Tensor::from_vec(&[n, ctot, h, w], data)?;
        Ok(self.record(
            out,
            parts,
            Box::new(move |ctx| {
                let mut res: Vec<Vec<T>> = chans.iter().map(|&c| Vec::with_capacity(n * c * hw)).collect();
                for ni in 0..n {
                    let mut off = ni * ctot * hw;
                    for (r, &c) in res.iter_mut().zip(&chans) {
                        r.extend_from_slice(&ctx.grad.data()[off..off + c * hw]);
                        off += c * hw;
                    }
                }
                res.into_iter()
                    .zip(&chans)
                    .map(|(d, &c)| Tensor::from_vec(&[n, c, h, w], d).map(Some))
                    .collect()
            }),
        ))
    }
}
