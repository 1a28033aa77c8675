//! Convolutions: plain, central-difference (CDC) and partial (masked).
//!
//! All three lower to im2col + GEMM. Batch items are independent in the forward pass
//! and in the input gradient, so those run through rayon; weight gradients are
//! accumulated item by item in batch order, so the result does not depend on the
//! thread count.

use rayon::prelude::*;

use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm, gemm_strided, MatRef, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new<T: Real>(
        input: &Tensor<T>,
        weight: &Tensor<T>,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let (n, cin, h, w) = input.dims4()?;
        let (cout, wcin, kh, kw) = weight.dims4()?;
        if wcin != cin {
            return Err(Error::shape(format!(
                "conv weight expects {wcin} input channels, input has {cin}"
            )));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::shape(format!("kernel must be square and odd, got {kh}x{kw}")));
        }
        if stride == 0 {
            return Err(Error::invalid("stride must be >= 1"));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::shape(format!(
                "kernel {kh} larger than padded input {h}x{w} (pad {pad})"
            )));
        }
        Ok(Self {
            n,
            cin,
            h,
            w,
            cout,
            k: kh,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        })
    }

    fn kdim(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    fn in_item(&self) -> usize {
        self.cin * self.h * self.w
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.n, self.cout, self.ho, self.wo]
    }
}

/// Output columns `[lo, hi)` whose tap `kw` lands inside the input row.
fn valid_cols(g: &ConvGeom, kw: usize) -> (usize, usize) {
    // ix = ox * stride + kw - pad must lie in [0, w).
    let lo = if kw >= g.pad { 0 } else { (g.pad - kw).div_ceil(g.stride) };
    let hi = if g.w + g.pad > kw {
        ((g.w + g.pad - kw - 1) / g.stride + 1).min(g.wo)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Output rows per GEMM tile: keeps the unfolded tile around 1 MiB so it stays
/// in cache between im2col and the GEMM packing pass.
fn rows_per_tile(g: &ConvGeom) -> usize {
    const TILE_ELEMS: usize = 1 << 18;
    (TILE_ELEMS / (g.kdim() * g.wo)).clamp(1, g.ho)
}

/// Unfolds output rows `[oy0, oy1)` of one batch item `[Cin, H, W]` into
/// `[Cin*k*k, (oy1-oy0)*Wo]`.
fn im2col<T: Real>(x: &[T], g: &ConvGeom, oy0: usize, oy1: usize, cols: &mut [T]) {
    let p = (oy1 - oy0) * g.wo;
    let mut row = 0;
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for kh in 0..g.k {
            for kw in 0..g.k {
                let (lo, hi) = valid_cols(g, kw);
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in oy0..oy1 {
                    let iy = (oy * g.stride + kh) as isize - g.pad as isize;
                    let dst_row = &mut dst[(oy - oy0) * g.wo..(oy - oy0 + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize || lo >= hi {
                        dst_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    dst_row[..lo].fill(T::zero());
                    dst_row[hi..].fill(T::zero());
                    let start = lo * g.stride + kw - g.pad;
                    if g.stride == 1 {
                        dst_row[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                    } else {
                        for (d, s) in dst_row[lo..hi].iter_mut().zip(src[start..].iter().step_by(g.stride)) {
                            *d = *s;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `[Cin*k*k, (oy1-oy0)*Wo]` into `[Cin, H, W]`.
fn col2im<T: Real>(cols: &[T], g: &ConvGeom, oy0: usize, oy1: usize, dx: &mut [T]) {
    let p = (oy1 - oy0) * g.wo;
    let mut row = 0;
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for kh in 0..g.k {
            for kw in 0..g.k {
                let (lo, hi) = valid_cols(g, kw);
                let src = &cols[row * p..(row + 1) * p];
                row += 1;
                if lo >= hi {
                    continue;
                }
                let start = lo * g.stride + kw - g.pad;
                for oy in oy0..oy1 {
                    let iy = (oy * g.stride + kh) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let off = (oy - oy0) * g.wo;
                    let s = &src[off + lo..off + hi];
                    if g.stride == 1 {
                        for (d, &v) in dst[start..start + (hi - lo)].iter_mut().zip(s) {
                            *d = *d + v;
                        }
                    } else {
                        for (d, &v) in dst[start..].iter_mut().step_by(g.stride).zip(s) {
                            *d = *d + v;
                        }
                    }
                }
            }
        }
    }
}

/// Calls `f(oy0, oy1, b)` per row tile, where `b` is the `[kdim, tile]` input
/// operand (unfolded, or a strided view of the input for pointwise convs).
fn for_each_tile<T: Real>(
    xn: &[T],
    g: &ConvGeom,
    cols: &mut Vec<T>,
    mut f: impl FnMut(usize, usize, MatRef<'_, T>),
) {
    let kdim = g.kdim();
    let p = g.out_plane();
    let step = rows_per_tile(g);
    let mut oy0 = 0;
    while oy0 < g.ho {
        let oy1 = (oy0 + step).min(g.ho);
        let tile = (oy1 - oy0) * g.wo;
        if g.is_pointwise() {
            f(oy0, oy1, MatRef::strided(&xn[oy0 * g.wo..], kdim, tile, p));
        } else {
            cols.resize(kdim * tile, T::zero());
            im2col(xn, g, oy0, oy1, &mut cols[..kdim * tile]);
            f(oy0, oy1, MatRef::new(&cols[..kdim * tile], kdim, tile));
        }
        oy0 = oy1;
    }
}

fn check_bias<T: Real>(bias: Option<&Tensor<T>>, cout: usize) -> Result<()> {
    if let Some(b) = bias {
        b.expect_shape(&[cout], "conv bias")?;
    }
    Ok(())
}

/// Zero-padded cross-correlation. `bias` may be omitted.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(input, weight, stride, pad)?;
    check_bias(bias, g.cout)?;
    input.ensure_finite("conv2d input")?;
    Ok(conv2d_unchecked(input, weight, bias, &g))
}

fn conv2d_unchecked<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: &ConvGeom,
) -> Tensor<T> {
    let p = g.out_plane();
    let kdim = g.kdim();
    let mut out = Tensor::zeros(&g.output_shape());
    let wmat = MatRef::new(weight.data(), g.cout, kdim);
    let x = input.data();
    out.data_mut()
        .par_chunks_mut(g.cout * p)
        .enumerate()
        .for_each_init(Vec::new, |cols, (n, o)| {
            let xn = &x[n * g.in_item()..(n + 1) * g.in_item()];
            for_each_tile(xn, g, cols, |oy0, _, b| {
                gemm_strided(wmat, b, T::zero(), &mut o[oy0 * g.wo..], p);
            });
            if let Some(b) = bias {
                for (co, chunk) in o.chunks_mut(p).enumerate() {
                    let bv = b.data()[co];
                    chunk.iter_mut().for_each(|v| *v = *v + bv);
                }
            }
        });
    out
}

pub struct ConvGrads<T: Real> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

/// Gradients of [`conv2d`]; `need = [input, weight, bias]`.
pub fn conv2d_backward<T: Real>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    pad: usize,
    need: [bool; 3],
) -> Result<ConvGrads<T>> {
    let g = ConvGeom::new(input, weight, stride, pad)?;
    grad_out.expect_shape(&g.output_shape(), "conv2d grad_out")?;
    let p = g.out_plane();
    let kdim = g.kdim();
    let gy = grad_out.data();

    let weight_grad = need[1].then(|| {
        let mut dw = Tensor::zeros(weight.shape());
        let mut cols = Vec::new();
        for n in 0..g.n {
            let xn = &input.data()[n * g.in_item()..(n + 1) * g.in_item()];
            let gyn = &gy[n * g.cout * p..(n + 1) * g.cout * p];
            for_each_tile(xn, &g, &mut cols, |oy0, oy1, b| {
                let tile = (oy1 - oy0) * g.wo;
                let gyt = MatRef::strided(&gyn[oy0 * g.wo..], g.cout, tile, p);
                gemm(gyt, b.t(), T::one(), dw.data_mut());
            });
        }
        dw
    });

    let bias_grad = need[2].then(|| {
        let mut db = vec![T::zero(); g.cout];
        for n in 0..g.n {
            for (co, d) in db.iter_mut().enumerate() {
                let base = (n * g.cout + co) * p;
                *d = *d + gy[base..base + p].iter().copied().sum::<T>();
            }
        }
        Tensor::from_vec(&[g.cout], db).expect("bias grad shape")
    });

    let input_grad = need[0].then(|| {
        let mut dx = Tensor::zeros(input.shape());
        let wmat = MatRef::new(weight.data(), g.cout, kdim);
        let in_item = g.in_item();
        let step = rows_per_tile(&g);
        dx.data_mut()
            .par_chunks_mut(in_item)
            .enumerate()
            .for_each_init(Vec::new, |dcols: &mut Vec<T>, (n, dxn)| {
                let gyn = &gy[n * g.cout * p..(n + 1) * g.cout * p];
                let mut oy0 = 0;
                while oy0 < g.ho {
                    let oy1 = (oy0 + step).min(g.ho);
                    let tile = (oy1 - oy0) * g.wo;
                    let gyt = MatRef::strided(&gyn[oy0 * g.wo..], g.cout, tile, p);
                    if g.is_pointwise() {
                        gemm_strided(wmat.t(), gyt, T::zero(), &mut dxn[oy0 * g.wo..], p);
                    } else {
                        dcols.resize(kdim * tile, T::zero());
                        gemm(wmat.t(), gyt, T::zero(), &mut dcols[..kdim * tile]);
                        col2im(&dcols[..kdim * tile], &g, oy0, oy1, dxn);
                    }
                    oy0 = oy1;
                }
            });
        dx
    });

    Ok(ConvGrads {
        input: input_grad,
        weight: weight_grad,
        bias: bias_grad,
    })
}

/// Folds the central-difference term into the kernel centre:
/// `w'[.., c, c] = w[.., c, c] - theta * sum(w[..])`.
fn cdc_effective_weight<T: Real>(weight: &Tensor<T>, theta: T) -> Tensor<T> {
    let (_, _, k, _) = weight.dims4().expect("rank-4 weight");
    let kk = k * k;
    let centre = (k / 2) * k + k / 2;
    let mut w = weight.clone();
    for taps in w.data_mut().chunks_mut(kk) {
        let s: T = taps.iter().copied().sum();
        taps[centre] = taps[centre] - theta * s;
    }
    w
}

/// Adjoint of [`cdc_effective_weight`]: `dw[j] = dw'[j] - theta * dw'[centre]`.
fn cdc_weight_grad<T: Real>(dw_eff: Tensor<T>, theta: T, k: usize) -> Tensor<T> {
    let kk = k * k;
    let centre = (k / 2) * k + k / 2;
    let mut dw = dw_eff;
    for taps in dw.data_mut().chunks_mut(kk) {
        let c = taps[centre];
        taps.iter_mut().for_each(|v| *v = *v - theta * c);
    }
    dw
}

fn check_theta(theta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&theta) {
        return Err(Error::invalid(format!("cdc theta must be in [0,1], got {theta}")));
    }
    Ok(())
}

/// Central difference convolution:
/// `y = theta * sum w(pn) (x(p0+pn) - x(p0)) + (1 - theta) * sum w(pn) x(p0+pn)`,
/// which reduces to a plain convolution minus `theta * x(p0) * sum(w)`.
pub fn cdc_conv2d<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
    theta: f64,
) -> Result<Tensor<T>> {
    check_theta(theta)?;
    let w_eff = cdc_effective_weight(weight, T::lit(theta));
    conv2d(input, &w_eff, bias, stride, pad)
}

/// Result of a partial convolution.
pub struct PartialConvOutput<T: Real> {
    pub output: Tensor<T>,
    pub updated_mask: Tensor<T>,
    /// `k*k / sum(mask window)` where the window sees something, else 0.
    pub ratio: Tensor<T>,
}

fn check_binary_mask<T: Real>(mask: &Tensor<T>, n: usize, h: usize, w: usize) -> Result<()> {
    mask.expect_shape(&[n, 1, h, w], "partial conv mask")?;
    if mask
        .data()
        .iter()
        .any(|&v| v != T::zero() && v != T::one())
    {
        return Err(Error::invalid("partial conv mask must be binary {0,1}"));
    }
    Ok(())
}

/// Multiplies every channel of `x` by the single-channel `mask`.
pub(crate) fn mask_channels<T: Real>(x: &Tensor<T>, mask: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = x.dims4().expect("rank-4");
    let hw = h * w;
    let mut out = x.clone();
    for ni in 0..n {
        let m = &mask.data()[ni * hw..(ni + 1) * hw];
        for ci in 0..c {
            let base = (ni * c + ci) * hw;
            for (v, &mv) in out.data_mut()[base..base + hw].iter_mut().zip(m) {
                *v = *v * mv;
            }
        }
    }
    out
}

/// Window sums of the mask, then the renormalisation ratio and the updated mask.
fn mask_window_stats<T: Real>(mask: &Tensor<T>, g: &ConvGeom) -> (Tensor<T>, Tensor<T>) {
    let window = T::lit((g.k * g.k) as f64);
    let mut ratio = Tensor::zeros(&[g.n, 1, g.ho, g.wo]);
    let mut updated = Tensor::zeros(&[g.n, 1, g.ho, g.wo]);
    let hw = g.h * g.w;
    for ni in 0..g.n {
        let m = &mask.data()[ni * hw..(ni + 1) * hw];
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let mut s = 0usize;
                for kh in 0..g.k {
                    let iy = (oy * g.stride + kh) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kw in 0..g.k {
                        let ix = (ox * g.stride + kw) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize && m[iy as usize * g.w + ix as usize] != T::zero() {
                            s += 1;
                        }
                    }
                }
                let idx = (ni * g.ho + oy) * g.wo + ox;
                if s > 0 {
                    ratio.data_mut()[idx] = window / T::lit(s as f64);
                    updated.data_mut()[idx] = T::one();
                }
            }
        }
    }
    (ratio, updated)
}

/// Partial convolution: convolves only the visible pixels, renormalises by the
/// visible fraction of each window, and marks an output visible iff its window saw
/// at least one visible input.
pub fn partial_conv2d<T: Real>(
    input: &Tensor<T>,
    mask: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<PartialConvOutput<T>> {
    let g = ConvGeom::new(input, weight, stride, pad)?;
    check_bias(bias, g.cout)?;
    check_binary_mask(mask, g.n, g.h, g.w)?;
    input.ensure_finite("partial_conv2d input")?;
    let xm = mask_channels(input, mask);
    let raw = conv2d_unchecked(&xm, weight, None, &g);
    let (ratio, updated_mask) = mask_window_stats(mask, &g);
    let p = g.out_plane();
    let mut output = raw;
    for ni in 0..g.n {
        let r = &ratio.data()[ni * p..(ni + 1) * p];
        let u = &updated_mask.data()[ni * p..(ni + 1) * p];
        for co in 0..g.cout {
            let bv = bias.map_or(T::zero(), |b| b.data()[co]);
            let base = (ni * g.cout + co) * p;
            for (j, v) in output.data_mut()[base..base + p].iter_mut().enumerate() {
                *v = *v * r[j] + bv * u[j];
            }
        }
    }
    Ok(PartialConvOutput {
        output,
        updated_mask,
        ratio,
    })
}

impl<T: Real> Tape<T> {
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let out = conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.record(
            out,
            &parents,
            Box::new(move |ctx| {
                let need_b = ctx.needs.get(2).copied().unwrap_or(false);
                let gr = conv2d_backward(
                    ctx.grad,
                    ctx.inputs[0],
                    ctx.inputs[1],
                    stride,
                    pad,
                    [ctx.needs[0], ctx.needs[1], need_b],
                )?;
                let mut res = vec![gr.input, gr.weight];
                if ctx.inputs.len() == 3 {
                    res.push(gr.bias);
                }
                Ok(res)
            }),
        ))
    }

    pub fn cdc_conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        theta: f64,
    ) -> Result<Var> {
        let out = cdc_conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad, theta)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.record(
            out,
            &parents,
            Box::new(move |ctx| {
                let t = T::lit(theta);
                let w_eff = cdc_effective_weight(ctx.inputs[1], t);
                let need_b = ctx.needs.get(2).copied().unwrap_or(false);
                let gr = conv2d_backward(
                    ctx.grad,
                    ctx.inputs[0],
                    &w_eff,
                    stride,
                    pad,
                    [ctx.needs[0], ctx.needs[1], need_b],
                )?;
                let k = ctx.inputs[1].dim(2);
                let mut res = vec![gr.input, gr.weight.map(|dw| cdc_weight_grad(dw, t, k))];
                if ctx.inputs.len() == 3 {
                    res.push(gr.bias);
                }
                Ok(res)
            }),
        ))
    }

    /// Returns the output variable and the updated (non-differentiable) mask.
    pub fn partial_conv2d(
        &mut self,
        x: Var,
        mask: &Tensor<T>,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<(Var, Tensor<T>)> {
        let PartialConvOutput {
            output,
            updated_mask,
            ratio,
        } = partial_conv2d(self.value(x), mask, self.value(w), b.map(|b| self.value(b)), stride, pad)?;
        let mask = mask.clone();
        let upd = updated_mask.clone();
        let mut parents = vec![x, w];
        parents.extend(b);
        let var = self.record(
            output,
            &parents,
            Box::new(move |ctx| {
                let scaled = mask_channels(ctx.grad, &ratio);
                let xm = mask_channels(ctx.inputs[0], &mask);
                let gr = conv2d_backward(&scaled, &xm, ctx.inputs[1], stride, pad, [ctx.needs[0], ctx.needs[1], false])?;
                let mut res = vec![gr.input.map(|dxm| mask_channels(&dxm, &mask)), gr.weight];
                if ctx.inputs.len() == 3 {
                    let gated = mask_channels(ctx.grad, &upd);
                    let (n, c, h, w) = gated.dims4()?;
                    let mut db = vec![T::zero(); c];
                    for ni in 0..n {
                        for (ci, d) in db.iter_mut().enumerate() {
                            let base = (ni * c + ci) * h * w;
                            *d = *d + gated.data()[base..base + h * w].iter().copied().sum::<T>();
                        }
                    }
                    res.push(Some(Tensor::from_vec(&[c], db)?));
                }
                Ok(res)
            }),
        );
        Ok((var, updated_mask))
    }
}
