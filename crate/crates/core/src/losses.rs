//! Training objective: domain discrepancy magnification (hinge on code distances),
//! domain-shift consistency (cosine on code differences) and the localization loss.

use crate::diffcore::elementwise::sigmoid;
use crate::diffcore::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Norm floor for the cosine similarity.
pub const COSINE_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_ddm: f64,
    pub lambda_di: f64,
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_ddm: 0.001,
            lambda_di: 0.001,
            margin: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_ddm", self.lambda_ddm),
            ("lambda_di", self.lambda_di),
            ("margin", self.margin),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Whether the domain encoder contributes anything to the objective.
    pub fn uses_codes(&self) -> bool {
        self.lambda_ddm > 0.0 || self.lambda_di > 0.0
    }
}

/// Codes of the input and the retouched image, foreground and background, each `[N, D]`.
#[derive(Clone, Copy, Debug)]
pub struct Codes {
    pub fg: Var,
    pub bg: Var,
    pub fg_retouched: Var,
    pub bg_retouched: Var,
}

/// Scalar losses of one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub ddm: f64,
    pub di: f64,
    pub loc: f64,
}

impl LossReport {
    pub fn assemble(ddm: f64, di: f64, loc: f64, w: &LossWeights) -> Self {
        Self {
            total: w.lambda_ddm * ddm + w.lambda_di * di + loc,
            ddm,
            di,
            loc,
        }
    }
}

/// Averaging weights over the samples flagged valid; `None` when there are none.
fn valid_mean_weights(valid: &[bool]) -> Option<Vec<f64>> {
    let k = valid.iter().filter(|&&v| v).count();
    (k > 0).then(|| valid.iter().map(|&v| if v { 1.0 / k as f64 } else { 0.0 }).collect())
}

fn zero<T: Real>(tape: &mut Tape<T>) -> Var {
    tape.constant(Tensor::scalar(T::zero()))
}

/// Mean over valid samples of `max(d(z_f, z_b) - d(z'_f, z'_b) + m, 0)`.
pub fn ddm_loss<T: Real>(tape: &mut Tape<T>, codes: &Codes, margin: f64, valid: &[bool]) -> Result<Var> {
    let d = tape.l2_distance(codes.fg, codes.bg)?;
    let dp = tape.l2_distance(codes.fg_retouched, codes.bg_retouched)?;
    let gap = tape.sub(d, dp)?;
    let gap = tape.add_const(gap, margin);
    let hinge = tape.relu(gap);
    match valid_mean_weights(valid) {
        Some(w) => tape.weighted_sum(hinge, &w),
        None => Ok(zero(tape)),
    }
}

/// Mean over valid samples of `1 - cos(z_f - z_b, z'_f - z'_b)`.
pub fn di_loss<T: Real>(tape: &mut Tape<T>, codes: &Codes, valid: &[bool]) -> Result<Var> {
    let dz = tape.sub(codes.fg, codes.bg)?;
    let dzp = tape.sub(codes.fg_retouched, codes.bg_retouched)?;
    let cos = tape.cosine_similarity(dz, dzp, COSINE_EPS)?;
    let neg = tape.scale(cos, -1.0);
    let one_minus = tape.add_const(neg, 1.0);
    match valid_mean_weights(valid) {
        Some(w) => tape.weighted_sum(one_minus, &w),
        None => Ok(zero(tape)),
    }
}

/// Smoothed `(intersection + 1, union + 1)` of sample `i`.
fn iou_stats<T: Real>(p: &Tensor<T>, gt: &Tensor<T>, i: usize, per: usize) -> (f64, f64) {
    let (pi, gi) = (&p.data()[i * per..(i + 1) * per], &gt.data()[i * per..(i + 1) * per]);
    let (mut inter, mut sp, mut sg) = (0.0, 0.0, 0.0);
    for (&a, &b) in pi.iter().zip(gi) {
        let (a, b) = (a.as_f64(), b.as_f64());
        inter += a * b;
        sp += a;
        sg += b;
    }
    (inter + 1.0, sp + sg - inter + 1.0)
}

fn check_binary<T: Real>(gt: &Tensor<T>) -> Result<()> {
    if gt.data().iter().any(|&v| v != T::zero() && v != T::one()) {
        return Err(Error::invalid("ground-truth mask must be binary"));
    }
    Ok(())
}

impl<T: Real> Tape<T> {
    /// Mean binary cross-entropy of `sigmoid(logits)` against `gt`, computed stably from
    /// the logits.
    pub fn bce_with_logits(&mut self, logits: Var, gt: &Tensor<T>) -> Result<Var> {
        let x = self.value(logits);
        gt.expect_shape(x.shape(), "bce target")?;
        let inv_n = 1.0 / x.numel() as f64;
        let total: f64 = x
            .data()
            .iter()
            .zip(gt.data())
            .map(|(&x, &g)| {
                let (x, g) = (x.as_f64(), g.as_f64());
                x.max(0.0) - x * g + (-x.abs()).exp().ln_1p()
            })
            .sum();
        let gt = gt.clone();
        Ok(self.record(
            Tensor::scalar(T::lit(total * inv_n)),
            &[logits],
            Box::new(move |ctx| {
                let s = ctx.grad.data()[0] * T::lit(inv_n);
                let g = ctx.inputs[0].zip_map(&gt, |x, g| (sigmoid(x) - g) * s)?;
                Ok(vec![Some(g)])
            }),
        ))
    }

    /// Batch mean of `1 - (sum pg + 1) / (sum p + sum g - sum pg + 1)` with `p` in `[0, 1]`.
    pub fn soft_iou_loss(&mut self, prob: Var, gt: &Tensor<T>) -> Result<Var> {
        let p = self.value(prob);
        gt.expect_shape(p.shape(), "soft IoU target")?;
        let n = p.dim(0);
        let per = p.numel() / n;
        let loss: f64 = (0..n)
            .map(|i| {
                let (num, den) = iou_stats(p, gt, i, per);
                1.0 - num / den
            })
            .sum::<f64>()
            / n as f64;
        let gt = gt.clone();
        Ok(self.record(
            Tensor::scalar(T::lit(loss)),
            &[prob],
            Box::new(move |ctx| {
                let p = ctx.inputs[0];
                let go = ctx.grad.data()[0].as_f64() / n as f64;
                let mut g = Tensor::zeros(p.shape());
                for i in 0..n {
                    let (num, den) = iou_stats(p, &gt, i, per);
                    let gi = &gt.data()[i * per..(i + 1) * per];
                    let out = &mut g.data_mut()[i * per..(i + 1) * per];
                    for (o, &gv) in out.iter_mut().zip(gi) {
                        let gv = gv.as_f64();
                        // d num = g, d den = 1 - g
                        *o = T::lit(-go * (gv * den - num * (1.0 - gv)) / (den * den));
                    }
                }
                Ok(vec![Some(g)])
            }),
        ))
    }
}

/// Localization loss terms, all scalars.
#[derive(Clone, Copy, Debug)]
pub struct LocLoss {
    pub bce: Var,
    pub iou: Var,
    pub total: Var,
}

/// BCE plus smoothed soft-IoU on `sigmoid(logits)`.
pub fn localization_loss<T: Real>(tape: &mut Tape<T>, logits: Var, gt: &Tensor<T>) -> Result<LocLoss> {
    check_binary(gt)?;
    let bce = tape.bce_with_logits(logits, gt)?;
    let prob = tape.sigmoid(logits);
    let iou = tape.soft_iou_loss(prob, gt)?;
    let total = tape.add(bce, iou)?;
    Ok(LocLoss { bce, iou, total })
}

/// `lambda_ddm ddm + lambda_di di + loc`.
pub fn total_loss<T: Real>(tape: &mut Tape<T>, ddm: Var, di: Var, loc: Var, w: &LossWeights) -> Result<Var> {
    w.validate()?;
    let a = tape.scale(ddm, w.lambda_ddm);
    let b = tape.scale(di, w.lambda_di);
    let ab = tape.add(a, b)?;
    tape.add(ab, loc)
}
