//! Learned color mapping: a low-resolution stream predicts a bilateral grid of 3x4
//! affine color transforms, a pointwise guidance net picks the grid depth per pixel,
//! and trilinear slicing yields one affine transform per pixel.
//!
//! Coefficients are stored row-major as `[K00 K01 K02 b0 K10 K11 K12 b1 K20 K21 K22 b2]`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::init::he_normal;
use crate::diffcore::{reduced_channels, AttentionVars, Bound, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Number of affine coefficients per grid cell / pixel.
pub const AFFINE_COEFFS: usize = 12;

const IDENTITY_AFFINE: [f64; AFFINE_COEFFS] = [1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0];

const GUIDE_HIDDEN: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct ColorMapConfig {
    /// Side of the square low-resolution copy fed to the grid predictor.
    pub lowres_size: usize,
    /// Spatial grid resolution (`Gh = Gw`).
    pub grid_size: usize,
    /// Intensity bins (`Gd`).
    pub grid_depth: usize,
    pub cdc_theta: f64,
    pub channels: [usize; 3],
}

impl Default for ColorMapConfig {
    fn default() -> Self {
        Self {
            lowres_size: 32,
            grid_size: 8,
            grid_depth: 4,
            cdc_theta: 0.7,
            channels: [16, 32, 64],
        }
    }
}

/// How the grid head starts out.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadInit {
    /// Zero weights, bias = identity affine: the mapping starts as a no-op.
    Identity,
    /// Small random weights; used to exercise gradients through every layer.
    Random,
}

impl ColorMapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_size < 2 || self.grid_depth < 2 {
            return Err(Error::Config("grid dimensions must be >= 2".into()));
        }
        if !(0.0..=1.0).contains(&self.cdc_theta) {
            return Err(Error::Config(format!("cdc_theta {} outside [0,1]", self.cdc_theta)));
        }
        self.strides().map(|_| ())
    }

    /// Strides of the three CDC layers: stride 2 until the grid resolution is reached.
    pub fn strides(&self) -> Result<[usize; 3]> {
        let (s, g) = (self.lowres_size, self.grid_size);
        if g == 0 || s % g != 0 || !(s / g).is_power_of_two() || (s / g).trailing_zeros() > 3 {
            return Err(Error::Config(format!(
                "lowres_size {s} must be grid_size {g} times 1, 2, 4 or 8"
            )));
        }
        let halvings = (s / g).trailing_zeros() as usize;
        let mut strides = [1; 3];
        strides.iter_mut().take(halvings).for_each(|v| *v = 2);
        Ok(strides)
    }

    pub fn init_params(&self, seed: u64, head: HeadInit) -> Result<ParamStore<f32>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut cin = 3;
        for (i, &c) in self.channels.iter().enumerate() {
            store.insert(format!("colormap.lowres.conv{}.weight", i + 1), he_normal(&[c, cin, 3, 3], &mut rng), true)?;
            store.insert(format!("colormap.lowres.conv{}.bias", i + 1), Tensor::zeros(&[c]), true)?;
            cin = c;
        }
        let c = cin;
        let cq = reduced_channels(c);
        for (name, shape) in [("wq", [cq, c, 1, 1]), ("wk", [cq, c, 1, 1]), ("wv", [c, c, 1, 1])] {
            store.insert(format!("colormap.attn.{name}"), he_normal(&shape, &mut rng).map(|v: f32| v * 0.5), true)?;
        }
        store.insert("colormap.attn.bq", Tensor::zeros(&[cq]), true)?;
        store.insert("colormap.attn.bk", Tensor::zeros(&[cq]), true)?;
        store.insert("colormap.attn.bv", Tensor::zeros(&[c]), true)?;
        let gamma = match head {
            HeadInit::Identity => 0.0,
            HeadInit::Random => 0.5,
        };
        store.insert("colormap.attn.gamma", Tensor::scalar(gamma), true)?;

        let out = AFFINE_COEFFS * self.grid_depth;
        let head_w = match head {
            HeadInit::Identity => Tensor::zeros(&[out, c, 1, 1]),
            HeadInit::Random => Tensor::rand_normal(&[out, c, 1, 1], 0.05, &mut rng),
        };
        let head_b: Vec<f32> = (0..out)
            .map(|ch| IDENTITY_AFFINE[ch / self.grid_depth] as f32)
            .collect();
        store.insert("colormap.head.weight", head_w, true)?;
        store.insert("colormap.head.bias", Tensor::from_vec(&[out], head_b)?, true)?;

        store.insert("colormap.guide.conv1.weight", he_normal(&[GUIDE_HIDDEN, 3, 1, 1], &mut rng), true)?;
        store.insert("colormap.guide.conv1.bias", Tensor::full(&[GUIDE_HIDDEN], 0.1), true)?;
        store.insert("colormap.guide.conv2.weight", he_normal(&[1, GUIDE_HIDDEN, 1, 1], &mut rng), true)?;
        store.insert("colormap.guide.conv2.bias", Tensor::zeros(&[1]), true)?;
        Ok(store)
    }
}

/// Handles produced by [`ColorMapper::forward`].
#[derive(Clone, Copy, Debug)]
pub struct ColorMapOutput {
    pub retouched: Var,
    /// Per-pixel coefficients `[N, 12, H, W]`.
    pub field: Var,
    /// `[N, 1, H, W]`, values in (0, 1).
    pub guidance: Var,
    /// `[N, 12, Gd, Gh, Gw]`.
    pub grid: Var,
}

#[derive(Clone, Debug, Default)]
pub struct ColorMapper {
    pub config: ColorMapConfig,
}

fn check_unit_range<T: Real>(image: &Tensor<T>) -> Result<()> {
    let (_, c, _, _) = image.dims4()?;
    if c != 3 {
        return Err(Error::shape(format!("expected a 3-channel image, got {c} channels")));
    }
    if image.data().iter().any(|&v| !(v >= T::zero() && v <= T::one())) {
        return Err(Error::invalid("image values must lie in [0, 1]"));
    }
    Ok(())
}

impl ColorMapper {
    pub fn new(config: ColorMapConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    /// Pointwise 3 -> 16 (ReLU) -> 1 (sigmoid) guidance map.
    pub fn compute_guidance<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, image: Var) -> Result<Var> {
        check_unit_range(tape.value(image))?;
        let h = tape.conv2d(image, p.var("colormap.guide.conv1.weight")?, Some(p.var("colormap.guide.conv1.bias")?), 1, 0)?;
        let h = tape.relu(h);
        let g = tape.conv2d(h, p.var("colormap.guide.conv2.weight")?, Some(p.var("colormap.guide.conv2.bias")?), 1, 0)?;
        Ok(tape.sigmoid(g))
    }

    pub fn predict_grid<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, image: Var) -> Result<Var> {
        let cfg = &self.config;
        let (n, _, h, w) = tape.value(image).dims4()?;
        let s = cfg.lowres_size;
        if h < s || w < s {
            return Err(Error::shape(format!("image {h}x{w} smaller than the {s}x{s} low-res stream")));
        }
        let mut x = tape.bilinear_resize(image, s, s)?;
        for (i, stride) in cfg.strides()?.into_iter().enumerate() {
            let wv = p.var(&format!("colormap.lowres.conv{}.weight", i + 1))?;
            let bv = p.var(&format!("colormap.lowres.conv{}.bias", i + 1))?;
            x = tape.cdc_conv2d(x, wv, Some(bv), stride, 1, cfg.cdc_theta)?;
            x = tape.relu(x);
        }
        let attn = AttentionVars {
            wq: p.var("colormap.attn.wq")?,
            bq: p.var("colormap.attn.bq")?,
            wk: p.var("colormap.attn.wk")?,
            bk: p.var("colormap.attn.bk")?,
            wv: p.var("colormap.attn.wv")?,
            bv: p.var("colormap.attn.bv")?,
            gamma: p.var("colormap.attn.gamma")?,
        };
        x = tape.attention_block(x, &attn)?;
        let coeffs = tape.conv2d(x, p.var("colormap.head.weight")?, Some(p.var("colormap.head.bias")?), 1, 0)?;
        let g = cfg.grid_size;
        tape.reshape(coeffs, &[n, AFFINE_COEFFS, cfg.grid_depth, g, g])
    }

    /// Full mapping `I -> I'`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, image: Var) -> Result<ColorMapOutput> {
        let grid = self.predict_grid(tape, p, image)?;
        let guidance = self.compute_guidance(tape, p, image)?;
        let field = tape.slice_grid(grid, guidance)?;
        let retouched = tape.apply_affine(image, field)?;
        Ok(ColorMapOutput {
            retouched,
            field,
            guidance,
            grid,
        })
    }
}

/// Trilinear sample positions for one axis: `(i0, i1, frac)` with clamp-to-edge indices.
fn axis_taps(coord: f64, len: usize) -> (usize, usize, f64) {
    let f = coord.floor();
    let frac = coord - f;
    let last = len as isize - 1;
    let i0 = (f as isize).clamp(0, last) as usize;
    let i1 = (f as isize + 1).clamp(0, last) as usize;
    (i0, i1, frac)
}

fn grid_dims<T: Real>(grid: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    match grid.shape() {
        &[n, c, d, gh, gw] if c == AFFINE_COEFFS && d >= 2 && gh >= 2 && gw >= 2 => Ok((n, d, gh, gw)),
        s => Err(Error::shape(format!("bilateral grid must be [N,12,Gd>=2,Gh>=2,Gw>=2], got {s:?}"))),
    }
}

struct SliceGeom {
    n: usize,
    d: usize,
    gh: usize,
    gw: usize,
    h: usize,
    w: usize,
}

impl SliceGeom {
    fn new<T: Real>(grid: &Tensor<T>, guidance: &Tensor<T>) -> Result<Self> {
        let (n, d, gh, gw) = grid_dims(grid)?;
        let (gn, gc, h, w) = guidance.dims4()?;
        if gn != n || gc != 1 {
            return Err(Error::shape(format!(
                "guidance {:?} does not match grid batch {n}",
                guidance.shape()
            )));
        }
        Ok(Self { n, d, gh, gw, h, w })
    }

    fn x_taps(&self) -> Vec<(usize, usize, f64)> {
        (0..self.w)
            .map(|x| axis_taps((x as f64 + 0.5) * self.gw as f64 / self.w as f64 - 0.5, self.gw))
            .collect()
    }

    fn y_taps(&self) -> Vec<(usize, usize, f64)> {
        (0..self.h)
            .map(|y| axis_taps((y as f64 + 0.5) * self.gh as f64 / self.h as f64 - 0.5, self.gh))
            .collect()
    }
}

/// Samples the grid at `((x+.5) Gw/W - .5, (y+.5) Gh/H - .5, g Gd - .5)` with trilinear
/// weights; returns the `[N, 12, H, W]` affine field.
pub fn slice_grid<T: Real>(grid: &Tensor<T>, guidance: &Tensor<T>) -> Result<Tensor<T>> {
    let sg = SliceGeom::new(grid, guidance)?;
    let (xt, yt) = (sg.x_taps(), sg.y_taps());
    let cell = sg.d * sg.gh * sg.gw;
    let hw = sg.h * sg.w;
    let mut out = Tensor::zeros(&[sg.n, AFFINE_COEFFS, sg.h, sg.w]);
    for ni in 0..sg.n {
        let gd = &grid.data()[ni * AFFINE_COEFFS * cell..(ni + 1) * AFFINE_COEFFS * cell];
        for (y, &(y0, y1, fy)) in yt.iter().enumerate() {
            for (x, &(x0, x1, fx)) in xt.iter().enumerate() {
                let g = guidance.data()[ni * hw + y * sg.w + x].as_f64();
                let (z0, z1, fz) = axis_taps(g * sg.d as f64 - 0.5, sg.d);
                let corners = trilinear_corners(sg.gh, sg.gw, (z0, z1, fz), (y0, y1, fy), (x0, x1, fx));
                for c in 0..AFFINE_COEFFS {
                    let base = c * cell;
                    let v: f64 = corners.iter().map(|&(off, wgt)| wgt * gd[base + off].as_f64()).sum();
                    out.data_mut()[(ni * AFFINE_COEFFS + c) * hw + y * sg.w + x] = T::lit(v);
                }
            }
        }
    }
    Ok(out)
}

/// Eight `(offset within one coefficient volume, weight)` pairs.
fn trilinear_corners(
    gh: usize,
    gw: usize,
    (z0, z1, fz): (usize, usize, f64),
    (y0, y1, fy): (usize, usize, f64),
    (x0, x1, fx): (usize, usize, f64),
) -> [(usize, f64); 8] {
    let mut out = [(0, 0.0); 8];
    let mut i = 0;
    for (z, wz) in [(z0, 1.0 - fz), (z1, fz)] {
        for (y, wy) in [(y0, 1.0 - fy), (y1, fy)] {
            for (x, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                out[i] = ((z * gh + y) * gw + x, wz * wy * wx);
                i += 1;
            }
        }
    }
    out
}

/// Per-pixel `I'(p) = K(p) I(p) + b(p)` without clamping.
pub fn affine_unclamped<T: Real>(image: &Tensor<T>, field: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = image.dims4()?;
    if c != 3 {
        return Err(Error::shape("apply_affine needs a 3-channel image"));
    }
    field.expect_shape(&[n, AFFINE_COEFFS, h, w], "affine field")?;
    let hw = h * w;
    let mut out = Tensor::zeros(&[n, 3, h, w]);
    for ni in 0..n {
        let img = image.item(ni);
        let f = field.item(ni);
        let o = &mut out.data_mut()[ni * 3 * hw..(ni + 1) * 3 * hw];
        for p in 0..hw {
            for r in 0..3 {
                let row = r * 4;
                o[r * hw + p] = f[row * hw + p] * img[p]
                    + f[(row + 1) * hw + p] * img[hw + p]
                    + f[(row + 2) * hw + p] * img[2 * hw + p]
                    + f[(row + 3) * hw + p];
            }
        }
    }
    Ok(out)
}

impl<T: Real> Tape<T> {
    pub fn slice_grid(&mut self, grid: Var, guidance: Var) -> Result<Var> {
        let out = slice_grid(self.value(grid), self.value(guidance))?;
        let d = grid_dims(self.value(grid))?.1 as f64;
        let cells: Vec<u64> = self
            .value(guidance)
            .data()
            .iter()
            .map(|g| (g.as_f64() * d - 0.5).floor().clamp(-1.0, d) as i64 as u64)
            .collect();
        self.note_branches(cells);
        Ok(self.record(
            out,
            &[grid, guidance],
            Box::new(|ctx| {
                let (grid, guidance) = (ctx.inputs[0], ctx.inputs[1]);
                let sg = SliceGeom::new(grid, guidance)?;
                let (xt, yt) = (sg.x_taps(), sg.y_taps());
                let cell = sg.d * sg.gh * sg.gw;
                let hw = sg.h * sg.w;
                let mut dgrid = vec![0.0f64; grid.numel()];
                let mut dguide = Tensor::zeros(guidance.shape());
                for ni in 0..sg.n {
                    let gd = &grid.data()[ni * AFFINE_COEFFS * cell..(ni + 1) * AFFINE_COEFFS * cell];
                    let dg = &mut dgrid[ni * AFFINE_COEFFS * cell..(ni + 1) * AFFINE_COEFFS * cell];
                    for (y, &(y0, y1, fy)) in yt.iter().enumerate() {
                        for (x, &(x0, x1, fx)) in xt.iter().enumerate() {
                            let gv = guidance.data()[ni * hw + y * sg.w + x].as_f64();
                            let (z0, z1, fz) = axis_taps(gv * sg.d as f64 - 0.5, sg.d);
                            let corners = trilinear_corners(sg.gh, sg.gw, (z0, z1, fz), (y0, y1, fy), (x0, x1, fx));
                            // d(weight)/d(gz): -wy wx on the z0 corners, +wy wx on z1.
                            let lo = trilinear_corners(sg.gh, sg.gw, (z0, z0, 0.0), (y0, y1, fy), (x0, x1, fx));
                            let hi = trilinear_corners(sg.gh, sg.gw, (z1, z1, 0.0), (y0, y1, fy), (x0, x1, fx));
                            let mut dgz = 0.0;
                            for c in 0..AFFINE_COEFFS {
                                let go = ctx.grad.data()[(ni * AFFINE_COEFFS + c) * hw + y * sg.w + x].as_f64();
                                if go == 0.0 {
                                    continue;
                                }
                                let base = c * cell;
                                for &(off, wgt) in &corners {
                                    dg[base + off] += go * wgt;
                                }
                                for (&(l, wl), &(h, wh)) in lo[..4].iter().zip(&hi[..4]) {
                                    dgz += go * (wh * gd[base + h].as_f64() - wl * gd[base + l].as_f64());
                                }
                            }
                            dguide.data_mut()[ni * hw + y * sg.w + x] = T::lit(dgz * sg.d as f64);
                        }
                    }
                }
                let dgrid = Tensor::from_vec(grid.shape(), dgrid.into_iter().map(T::lit).collect())?;
                Ok(vec![Some(dgrid), Some(dguide)])
            }),
        ))
    }

    pub fn affine_unclamped(&mut self, image: Var, field: Var) -> Result<Var> {
        let out = affine_unclamped(self.value(image), self.value(field))?;
        Ok(self.record(
            out,
            &[image, field],
            Box::new(|ctx| {
                let (img, field) = (ctx.inputs[0], ctx.inputs[1]);
                let (n, _, h, w) = img.dims4()?;
                let hw = h * w;
                let mut dimg = Tensor::zeros(img.shape());
                let mut dfield = Tensor::zeros(field.shape());
                for ni in 0..n {
                    let (iv, fv, g) = (img.item(ni), field.item(ni), ctx.grad.item(ni));
                    let di = &mut dimg.data_mut()[ni * 3 * hw..(ni + 1) * 3 * hw];
                    for p in 0..hw {
                        for r in 0..3 {
                            let go = g[r * hw + p];
                            for j in 0..3 {
                                di[j * hw + p] = di[j * hw + p] + go * fv[(r * 4 + j) * hw + p];
                            }
                        }
                    }
                    let df = &mut dfield.data_mut()[ni * AFFINE_COEFFS * hw..(ni + 1) * AFFINE_COEFFS * hw];
                    for p in 0..hw {
                        for r in 0..3 {
                            let go = g[r * hw + p];
                            for j in 0..3 {
                                df[(r * 4 + j) * hw + p] = go * iv[j * hw + p];
                            }
                            df[(r * 4 + 3) * hw + p] = go;
                        }
                    }
                }
                Ok(vec![Some(dimg), Some(dfield)])
            }),
        ))
    }

    /// Affine color transform followed by a hard clamp to `[0, 1]`.
    pub fn apply_affine(&mut self, image: Var, field: Var) -> Result<Var> {
        let raw = self.affine_unclamped(image, field)?;
        Ok(self.clamp01(raw))
    }
}
