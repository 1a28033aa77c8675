//! Finite-difference checks of every differentiable op and network block at small
//! shapes, in 64-bit.
//!
//! Sample points avoid non-differentiable neighbourhoods (ReLU and clamp kinks, max-pool
//! ties, the hinge and zero-norm points of the code losses, grid cell borders) by
//! construction or by re-drawing, since central differences are meaningless there.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::colormap::{ColorMapConfig, ColorMapper, HeadInit};
use crate::diffcore::{self, grad_check, AttentionVars, Bound, GradCheckConfig, GradReport, ParamStore, Tape, Var};
use crate::domenc;
use crate::error::{Error, Result};
use crate::localizer::{Localizer, UNetConfig};
use crate::losses::{self, Codes, LossWeights};
use crate::tensor::Tensor;

/// Relative-error bound every op must meet.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCase {
    pub op: &'static str,
    pub seed: u64,
    pub report: GradReport,
}

type CaseFn = fn(u64) -> Result<GradReport>;

fn rng(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003).wrapping_add(salt))
}

fn uniform(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::rand_uniform(shape, lo, hi, r)
}

/// Uniform values kept at least `gap` away from zero.
fn away_from_zero(r: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    uniform(r, shape, -1.0, 1.0).map(|v| if v.abs() < gap { v.signum() * gap + v } else { v })
}

fn binary_mask(r: &mut ChaCha8Rng, shape: &[usize], p: f64) -> Tensor<f64> {
    let data = (0..shape.iter().product::<usize>())
        .map(|_| if r.random_bool(p) { 1.0 } else { 0.0 })
        .collect();
    Tensor::from_vec(shape, data).expect("mask shape")
}

/// `sum(w * x)` with fixed random weights, so every output element matters differently.
fn weighted(tape: &mut Tape<f64>, x: Var, seed: u64) -> Result<Var> {
    let mut r = rng(seed, 999);
    let w = uniform(&mut r, tape.value(x).shape(), 0.5, 1.5);
    let w = tape.constant(w);
    let prod = tape.mul(x, w)?;
    Ok(tape.sum_all(prod))
}

fn cfg(seed: u64) -> GradCheckConfig {
    GradCheckConfig {
        seed,
        ..Default::default()
    }
}

fn sampled(seed: u64, k: usize) -> GradCheckConfig {
    GradCheckConfig {
        seed,
        max_samples_per_input: Some(k),
        ..Default::default()
    }
}

fn case_relu(seed: u64) -> Result<GradReport> {
    let mut r = rng(seed, 1);
    let x = away_from_zero(&mut r, &[2, 3, 4, 4], 1e-2);
    grad_check(|t, v| { let y = t.relu(v[0]); weighted(t, y, seed) }, &[("x", x)], &cfg(seed))
}

fn case_sigmoid(seed: u64) -> Result<GradReport> {
    let mut r = rng(seed, 2);
    let x = uniform(&mut r, &[2, 3, 4, 4], -4.0, 4.0);
    grad_check(|t, v| { let y = t.sigmoid(v[0]); weighted(t, y, seed) }, &[("x", x)], &cfg(seed))
}

fn conv_case(seed: u64, x: [usize; 4], w: [usize; 4], stride: usize, pad: usize) -> Result<GradReport> {
    let mut r = rng(seed, 3 + stride as u64 * 10 + w[2] as u64);
    let inputs = [
        ("x", uniform(&mut r, &x, -1.0, 1.0)),
        ("w", uniform(&mut r, &w, -0.5, 0.5)),
        ("b", uniform(&mut r, &[w[0]], -0.5, 0.5)),
    ];
    grad_check(
        |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
            weighted(t, y, seed)
        },
        &inputs,
        &cfg(seed),
    )
}

fn case_conv2d(seed: u64) -> Result<GradReport> {
    conv_case(seed, [1, 2, 4, 4], [3, 2, 3, 3], 1, 1)
}

fn case_conv2d_stride2(seed: u64) -> Result<GradReport> {
    conv_case(seed, [2, 3, 7, 7], [4, 3, 3, 3], 2, 1)
}

fn case_conv2d_pointwise(seed: u64) -> Result<GradReport> {
    conv_case(seed, [2, 3, 4, 5], [2, 3, 1, 1], 1, 0)
}

fn case_cdc_conv2d(seed: u64) -> Result<GradReport> {
    let mut r = rng(seed, 4);
    let inputs = [
        ("x", uniform(&mut r, &[2, 3, 6, 6], -1.0, 1.0)),
        ("w", uniform(&mut r, &[4, 3, 3, 3], -0.5, 0.5)),
        ("b", uniform(&mut r, &[4], -0.5, 0.5)),
    ];
    grad_check(
        |t, v| {
            let y = t.cdc_conv2d(v[0], v[1], Some(v[2]), 2, 1, 0.7)?;
            weighted(t, y, seed)
        },
        &inputs,
        &cfg(seed),
    )
}

fn case_partial_conv2d(seed: u64) -> Result<GradReport> {
    let mut r = rng(seed, 5);
    let mask = binary_mask(&mut r, &[2, 1, 6, 6], 0.5);
    let inputs = [
        ("x", uniform(&mut r, &[2, 3, 6, 6], -1.0, 1.0)),
        ("w", uniform(&mut r, &[4, 3, 3, 3], -0.5, 0.5)),
        ("b", uniform(&mut r, &[4], -0.5, 0.5)),
    ];
    grad_check(
        |t, v| {
            let (y, _) = t.partial_conv2d(v[0], &mask, v[1], Some(v[2]), 1, 1)?;
            weighted(t, y, seed)
        },
        &inputs,
        &cfg(seed),
    )
}

fn case_attention_block(seed: u64) -> Result<GradReport> {
    let mut r = rng(seed, 6);
    let c = 8;
    let cq = diffcore::reduced_channels(c);
    let inputs = [
        ("x", uniform(&mut r, &[2, c, 3, 3], -1.0, 1.0)),
        ("wq", uniform(&mut r, &[cq, c, 1, 1], -0.5, 0.5)),
        ("bq", uniform(&mut r, &[cq], -0.5, 0.5)),
        ("wk", uniform(&mut r, &[cq, c, 1, 1], -0.5, 0.5)),
        ("bk", uniform(&mut r, &[cq], -0.5, 0.5)),
        ("wv", uniform(&mut r, &[c, c, 1, 1], -0.5, 0.5)),
        ("bv", uniform(&mut r, &[c], -0.5, 0.5)),
        ("gamma", Tensor::scalar(0.7)),
    ];
    grad_check(
        |t, v| {
            let p = AttentionVars {
                wq: v[1],
                bq: v[2],
                wk: v[3],
                bk: v[4],
                wv: v[5],
                bv: v[6],
                gamma: v[7],
            };
            let y = t.attention_block(v[0], &p)?;
            weighted(t, y, seed)
        },
        &inputs,
        &cfg(seed),
    )
}

fn case_slice_grid(seed: u64) -> Result<GradReport> {
    let mut r = rng(seed, 7);
    let depth = 3;
    let grid = uniform(&mut r, &[2, 12, depth, 4, 4], -1.0, 1.0);
    // Interior depth coordinates only, away from cell borders: clamp-to-edge makes the
    // output flat in g outside [0.5/d, 1 - 0.5/d].
    let guide = uniform(&mut r, &[2, 1, 5, 6], 0.0, (depth - 1) as f64).map(|z| {
        let frac = z - z.floor();
        let z = if !(0.01..=0.99).contains(&frac) { z.floor() + 0.5 } else { z };
        (z + 0.5) / depth as f64
    });
    grad_check(
        |t, v| {
            let y = t.slice_grid(v[0], v[1])?;
            weighted(t, y, seed)
        },
        &[("grid", grid), ("guidance", guide)],
        &cfg(seed),
    )
}

fn case_apply_affine(seed: u64) -> Result<GradReport> {
    let mut r = rng(seed, 8);
    let img = uniform(&mut r, &[2, 3, 4, 4], 0.2, 0.8);
    let noise = uniform(&mut r, &[2, 12, 4, 4], -0.05, 0.05);
    let identity = [1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0];
    let field = Tensor::from_vec(
        &[2, 12, 4, 4],
        noise.data().iter().enumerate().map(|(i, &n)| identity[(i / 16) % 12] + n).collect(),
    )?;
    grad_check(
        |t, v| {
            let y = t.apply_affine(v[0], v[1])?;
            weighted(t, y, seed)
        },
        &[("image", img), ("field", field)],
        &cfg(seed),
    )
}

fn case_masked_gap(seed: u64) -> Result<GradReport> {
    let mut r = rng(seed, 9);
    let mask = binary_mask(&mut r, &[2, 1, 5, 5], 0.4);
    let x = uniform(&mut r, &[2, 4, 5, 5], -1.0, 1.0);
    grad_check(|t, v| { let y = t.masked_gap(v[0], &mask)?; weighted(t, y, seed) }, &[("feature", x)], &cfg(seed))
}

fn case_global_avg_pool(seed: u64) -> Result<GradReport> {
    let mut r = rng(seed, 10);
    let x = uniform(&mut r, &[2, 3, 4, 3], -1.0, 1.0);
    grad_check(|t, v| { let y = t.global_avg_pool(v[0])?; weighted(t, y, seed) }, &[("x", x)], &cfg(seed))
}

fn case_max_pool(seed: u64) -> Result<GradReport> {
    let mut r = rng(seed, 11);
    // Distinct values 0.01 apart: no ties within the finite-difference step.
    let n = 2 * 3 * 4 * 6;
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
    for i in (1..n).rev() {
        vals.swap(i, r.random_range(0..=i));
    }
    let x = Tensor::from_vec(&[2, 3, 4, 6], vals)?;
    grad_check(|t, v| { let y = t.max_pool2x2(v[0])?; weighted(t, y, seed) }, &[("x", x)], &cfg(seed))
}

fn resize_case(seed: u64, from: [usize; 4], to: (usize, usize)) -> Result<GradReport> {
    let mut r = rng(seed, 12 + to.0 as u64);
    let x = uniform(&mut r, &from, -1.0, 1.0);
    grad_check(
        |t, v| {
            let y = t.bilinear_resize(v[0], to.0, to.1)?;
            weighted(t, y, seed)
        },
        &[("x", x)],
        &cfg(seed),
    )
}

fn case_bilinear_down(seed: u64) -> Result<GradReport> {
    resize_case(seed, [1, 2, 8, 6], (3, 4))
}

fn case_bilinear_up(seed: u64) -> Result<GradReport> {
    resize_case(seed, [1, 2, 3, 4], (7, 9))
}

fn case_linear(seed: u64) -> Result<GradReport> {
    let mut r = rng(seed, 13);
    let inputs = [
        ("x", uniform(&mut r, &[3, 5], -1.0, 1.0)),
        ("w", uniform(&mut r, &[4, 5], -1.0, 1.0)),
        ("b", uniform(&mut r, &[4], -1.0, 1.0)),
    ];
    grad_check(|t, v| { let y = t.linear(v[0], v[1], Some(v[2]))?; weighted(t, y, seed) }, &inputs, &cfg(seed))
}

fn case_l2_distance(seed: u64) -> Result<GradReport> {
    let mut r = rng(seed, 14);
    let inputs = [("a", uniform(&mut r, &[3, 6], -1.0, 1.0)), ("b", uniform(&mut r, &[3, 6], -1.0, 1.0))];
    grad_check(|t, v| { let y = t.l2_distance(v[0], v[1])?; weighted(t, y, seed) }, &inputs, &cfg(seed))
}

fn case_cosine(seed: u64) -> Result<GradReport> {
    let mut r = rng(seed, 15);
    let inputs = [("a", uniform(&mut r, &[3, 6], -1.0, 1.0)), ("b", uniform(&mut r, &[3, 6], -1.0, 1.0))];
    grad_check(
        |t, v| {
            let y = t.cosine_similarity(v[0], v[1], losses::COSINE_EPS)?;
            weighted(t, y, seed)
        },
        &inputs,
        &cfg(seed),
    )
}

fn code_inputs(seed: u64, salt: u64, accept: impl Fn(&[Tensor<f64>; 4]) -> bool) -> [Tensor<f64>; 4] {
    let mut r = rng(seed, salt);
    loop {
        let z = [0; 4].map(|_| uniform(&mut r, &[3, 16], -0.3, 0.3));
        if accept(&z) {
            return z;
        }
    }
}

fn row_dist(a: &Tensor<f64>, b: &Tensor<f64>, i: usize) -> f64 {
    let d = a.dim(1);
    (0..d).map(|j| (a.data()[i * d + j] - b.data()[i * d + j]).powi(2)).sum::<f64>().sqrt()
}

fn codes_of(v: &[Var]) -> Codes {
    Codes {
        fg: v[0],
        bg: v[1],
        fg_retouched: v[2],
        bg_retouched: v[3],
    }
}

fn named(z: [Tensor<f64>; 4]) -> [(&'static str, Tensor<f64>); 4] {
    let [a, b, c, d] = z;
    [("z_f", a), ("z_b", b), ("z_f_retouched", c), ("z_b_retouched", d)]
}

fn case_ddm_loss(seed: u64) -> Result<GradReport> {
    let m = LossWeights::default().margin;
    let z = code_inputs(seed, 16, |z| (0..3).all(|i| (row_dist(&z[0], &z[1], i) - row_dist(&z[2], &z[3], i) + m).abs() >= 1e-3));
    grad_check(|t, v| losses::ddm_loss(t, &codes_of(v), m, &[true; 3]), &named(z), &cfg(seed))
}

fn case_di_loss(seed: u64) -> Result<GradReport> {
    let z = code_inputs(seed, 17, |z| (0..3).all(|i| row_dist(&z[0], &z[1], i) >= 1e-3 && row_dist(&z[2], &z[3], i) >= 1e-3));
    grad_check(|t, v| losses::di_loss(t, &codes_of(v), &[true; 3]), &named(z), &cfg(seed))
}

fn case_localization_loss(seed: u64) -> Result<GradReport> {
    let mut r = rng(seed, 18);
    let gt = binary_mask(&mut r, &[2, 1, 4, 4], 0.4);
    let logits = uniform(&mut r, &[2, 1, 4, 4], -3.0, 3.0);
    grad_check(|t, v| Ok(losses::localization_loss(t, v[0], &gt)?.total), &[("logits", logits)], &cfg(seed))
}

fn case_total_loss(seed: u64) -> Result<GradReport> {
    let m = LossWeights::default().margin;
    let z = code_inputs(seed, 19, |z| {
        (0..3).all(|i| {
            let (d, dp) = (row_dist(&z[0], &z[1], i), row_dist(&z[2], &z[3], i));
            (d - dp + m).abs() >= 1e-3 && d >= 1e-3 && dp >= 1e-3
        })
    });
    let mut r = rng(seed, 20);
    let gt = binary_mask(&mut r, &[3, 1, 2, 2], 0.5);
    let logits = uniform(&mut r, &[3, 1, 2, 2], -2.0, 2.0);
    let [a, b, c, d] = named(z);
    let w = LossWeights {
        lambda_ddm: 0.5,
        lambda_di: 0.25,
        margin: m,
    };
    grad_check(
        |t, v| {
            let codes = codes_of(v);
            let ddm = losses::ddm_loss(t, &codes, m, &[true; 3])?;
            let di = losses::di_loss(t, &codes, &[true; 3])?;
            let loc = losses::localization_loss(t, v[4], &gt)?.total;
            losses::total_loss(t, ddm, di, loc, &w)
        },
        &[a, b, c, d, ("logits", logits)],
        &cfg(seed),
    )
}

/// Checks a network through its parameter store: trainable entries become grad-check
/// inputs (after the listed `extra` inputs), frozen ones constants.
fn network_case(
    store: &ParamStore<f64>,
    extra: Vec<(&'static str, Tensor<f64>)>,
    check: GradCheckConfig,
    f: impl Fn(&mut Tape<f64>, &Bound, &[Var]) -> Result<Var>,
) -> Result<GradReport> {
    let trainable: Vec<(String, Tensor<f64>)> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(n, p)| (n.to_string(), p.value.clone()))
        .collect();
    let frozen: Vec<(String, Tensor<f64>)> = store
        .iter()
        .filter(|(_, p)| !p.trainable)
        .map(|(n, p)| (n.to_string(), p.value.clone()))
        .collect();
    let n_extra = extra.len();
    let mut inputs: Vec<(&str, Tensor<f64>)> = extra;
    inputs.extend(trainable.iter().map(|(n, t)| (n.as_str(), t.clone())));
    grad_check(
        |t, v| {
            let mut vars: Vec<(String, Var)> = trainable
                .iter()
                .zip(&v[n_extra..])
                .map(|((n, _), &var)| (n.clone(), var))
                .collect();
            vars.extend(frozen.iter().map(|(n, val)| (n.clone(), t.constant(val.clone()))));
            let bound = Bound::from_vars(vars);
            f(t, &bound, &v[..n_extra])
        },
        &inputs,
        &check,
    )
}

/// A two-stage UNet with BCE + soft-IoU on its logits.
fn case_unet(seed: u64) -> Result<GradReport> {
    let loc = Localizer::UNet(UNetConfig {
        depth: 2,
        base_width: 3,
    });
    let store = loc.init_params(seed)?.cast::<f64>();
    let mut r = rng(seed, 21);
    let img = uniform(&mut r, &[1, 3, 8, 8], 0.0, 1.0);
    let gt = binary_mask(&mut r, &[1, 1, 8, 8], 0.3);
    network_case(&store, vec![("image", img)], sampled(seed, 24), |t, p, v| {
        let logits = loc.forward(t, p, v[0])?;
        Ok(losses::localization_loss(t, logits, &gt)?.total)
    })
}

/// The default-size UNet with its localization loss, checked on a random 1% of every
/// parameter tensor at a 16x16 input. Slow; not part of [`CASES`].
pub fn unet_default_sampled(seed: u64) -> Result<GradReport> {
    let loc = Localizer::default();
    let store = loc.init_params(seed)?.cast::<f64>();
    let mut r = rng(seed, 25);
    let img = uniform(&mut r, &[1, 3, 16, 16], 0.0, 1.0);
    let gt = binary_mask(&mut r, &[1, 1, 16, 16], 0.3);
    let check = GradCheckConfig {
        seed,
        sample_fraction: Some(0.01),
        ..Default::default()
    };
    network_case(&store, vec![], check, |t, p, _| {
        let x = t.constant(img.clone());
        let logits = loc.forward(t, p, x)?;
        Ok(losses::localization_loss(t, logits, &gt)?.total)
    })
}

/// `||z||^2` of the domain code w.r.t. the input pixels and the projector.
fn case_domain_encoder(seed: u64) -> Result<GradReport> {
    let store = domenc::init_params(seed)?.cast::<f64>();
    let mut r = rng(seed, 22);
    let img = uniform(&mut r, &[1, 3, 8, 8], 0.0, 1.0);
    let mut mask = Tensor::zeros(&[1, 1, 8, 8]);
    for y in 2..7 {
        for x in 1..6 {
            mask.data_mut()[y * 8 + x] = 1.0;
        }
    }
    network_case(&store, vec![("image", img)], sampled(seed, 40), |t, p, v| {
        let z = domenc::extract_code(t, p, v[0], &mask)?;
        let sq = t.mul(z, z)?;
        Ok(t.sum_all(sq))
    })
}

/// A weighted sum of the retouched image w.r.t. every color-mapping parameter.
fn case_color_map(seed: u64) -> Result<GradReport> {
    let config = ColorMapConfig {
        lowres_size: 8,
        grid_size: 4,
        grid_depth: 2,
        channels: [4, 4, 8],
        ..Default::default()
    };
    let mapper = ColorMapper::new(config)?;
    let mut store = mapper.config.init_params(seed, HeadInit::Identity)?;
    let mut r = rng(seed, 23);
    let head = store.get("colormap.head.weight")?.shape().to_vec();
    store.set("colormap.head.weight", Tensor::rand_normal(&head, 0.02, &mut r))?;
    store.set("colormap.attn.gamma", Tensor::scalar(0.5))?;
    let store = store.cast::<f64>();
    let img = colormap_input(&store, mapper.config.grid_depth, &mut r)?;
    let reference = img.clone();
    network_case(&store, vec![("image", img)], sampled(seed, 24), |t, p, v| {
        let out = mapper.forward(t, p, v[0])?;
        // Subtracting the input as a constant keeps the gradients and shrinks the value,
        // which keeps finite-difference roundoff below the small attention gradients.
        let base = t.constant(reference.clone());
        let delta = t.sub(out.retouched, base)?;
        weighted(t, delta, seed)
    })
}

/// Draws an image whose guidance branch sits away from its kinks: hidden pre-activations
/// clear of zero and depth coordinates inside a grid cell.
fn colormap_input(store: &ParamStore<f64>, depth: usize, r: &mut ChaCha8Rng) -> Result<Tensor<f64>> {
    let w1 = store.get("colormap.guide.conv1.weight")?;
    let b1 = store.get("colormap.guide.conv1.bias")?;
    let w2 = store.get("colormap.guide.conv2.weight")?;
    let b2 = store.get("colormap.guide.conv2.bias")?;
    for _ in 0..10_000 {
        let img = uniform(r, &[1, 3, 6, 6], 0.25, 0.75);
        let img = diffcore::bilinear_resize(&img, 12, 12)?;
        let pre = diffcore::conv2d(&img, w1, Some(b1), 1, 0)?;
        if pre.data().iter().any(|v| v.abs() < 2e-3) {
            continue;
        }
        let hidden = pre.map(|v| v.max(0.0));
        let g = diffcore::conv2d(&hidden, w2, Some(b2), 1, 0)?.map(|v| 1.0 / (1.0 + (-v).exp()));
        let inside = g.data().iter().all(|&g| {
            let z = g * depth as f64 - 0.5;
            z > 0.01 && z < depth as f64 - 1.01 && (0.01..=0.99).contains(&(z - z.floor()))
        });
        if inside {
            return Ok(img);
        }
    }
    Err(Error::Numeric("no kink-free color-map input found".into()))
}

pub const CASES: &[(&str, CaseFn)] = &[
    ("relu", case_relu),
    ("sigmoid", case_sigmoid),
    ("conv2d", case_conv2d),
    ("conv2d_stride2", case_conv2d_stride2),
    ("conv2d_pointwise", case_conv2d_pointwise),
    ("cdc_conv2d", case_cdc_conv2d),
    ("partial_conv2d", case_partial_conv2d),
    ("attention_block", case_attention_block),
    ("slice_grid", case_slice_grid),
    ("apply_affine", case_apply_affine),
    ("masked_gap", case_masked_gap),
    ("global_avg_pool", case_global_avg_pool),
    ("max_pool2x2", case_max_pool),
    ("bilinear_down", case_bilinear_down),
    ("bilinear_up", case_bilinear_up),
    ("linear", case_linear),
    ("l2_distance", case_l2_distance),
    ("cosine_similarity", case_cosine),
    ("ddm_loss", case_ddm_loss),
    ("di_loss", case_di_loss),
    ("localization_loss", case_localization_loss),
    ("total_loss", case_total_loss),
    ("unet", case_unet),
    ("domain_encoder", case_domain_encoder),
    ("color_map", case_color_map),
];

/// Runs every case for every seed.
pub fn gradcheck_all(seeds: &[u64]) -> Result<Vec<GradCase>> {
    let mut out = Vec::with_capacity(CASES.len() * seeds.len());
    for &(op, f) in CASES {
        for &seed in seeds {
            out.push(GradCase {
                op,
                seed,
                report: f(seed)?,
            });
        }
    }
    Ok(out)
}

/// Grad-check error of a convolution whose backward doubles the weight gradient. A
/// working checker reports roughly 0.5 here.
pub fn planted_fault_error(seed: u64) -> Result<f64> {
    let mut r = rng(seed, 24);
    let inputs = [("x", uniform(&mut r, &[1, 2, 4, 4], -1.0, 1.0)), ("w", uniform(&mut r, &[3, 2, 3, 3], -0.5, 0.5))];
    let report = grad_check(
        |t, v| {
            let y = diffcore::conv2d(t.value(v[0]), t.value(v[1]), None, 1, 1)?;
            let out = t.record(
                y,
                &[v[0], v[1]],
                Box::new(|ctx| {
                    let g = diffcore::conv2d_backward(ctx.grad, ctx.inputs[0], ctx.inputs[1], 1, 1, [true, true, false])?;
                    Ok(vec![g.input, g.weight.map(|w| w.map(|x| 2.0 * x))])
                }),
            );
            Ok(out)
        },
        &inputs,
        &cfg(seed),
    )?;
    Ok(report.max_rel_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_case_passes_on_three_seeds() {
        let results = gradcheck_all(&[0, 1, 2]).unwrap();
        let failures: Vec<String> = results
            .iter()
            .filter(|c| !c.report.passes(TOLERANCE))
            .map(|c| format!("{} seed {}: {:?}", c.op, c.seed, c.report.per_input))
            .collect();
        assert!(failures.is_empty(), "{failures:#?}");
    }

    #[test]
    fn planted_fault_is_caught() {
        for seed in 0..3 {
            assert!(planted_fault_error(seed).unwrap() > 0.3);
        }
    }
}
