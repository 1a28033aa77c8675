//! Domain encoder: a frozen partial-convolution feature extractor with three taps, each
//! pooled over the masked region and projected to a shared code space. Only the
//! projectors and the tap weights are trainable, but gradients still flow through the
//! frozen layers into the input image.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::init::orthogonal;
use crate::diffcore::pool::mask_max_pool2x2;
use crate::diffcore::{Bound, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Code dimension.
pub const CODE_DIM: usize = 16;

/// `(in, out)` channels of each frozen conv, grouped by block; the last conv of each
/// block is a tap.
pub const BLOCKS: [&[(usize, usize)]; 3] = [
    &[(3, 16), (16, 16)],
    &[(16, 32), (32, 32)],
    &[(32, 64), (64, 64), (64, 64)],
];

pub const TAP_CHANNELS: [usize; 3] = [16, 32, 64];

fn frozen_name(block: usize, conv: usize, what: &str) -> String {
    format!("domenc.frozen.block{}.conv{}.{what}", block + 1, conv + 1)
}

/// Seeded parameters. Extractor weights are orthogonal (gain sqrt 2) and frozen.
pub fn init_params(seed: u64) -> Result<ParamStore<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (b, convs) in BLOCKS.iter().enumerate() {
        for (j, &(cin, cout)) in convs.iter().enumerate() {
            let w = orthogonal(&[cout, cin, 3, 3], std::f64::consts::SQRT_2, &mut rng);
            store.insert(frozen_name(b, j, "weight"), w, false)?;
            store.insert(frozen_name(b, j, "bias"), Tensor::zeros(&[cout]), false)?;
        }
    }
    for (i, &c) in TAP_CHANNELS.iter().enumerate() {
        let std = (1.0 / c as f64).sqrt();
        store.insert(format!("domenc.proj.tap{}.weight", i + 1), Tensor::rand_normal(&[CODE_DIM, c], std, &mut rng), true)?;
        store.insert(format!("domenc.proj.tap{}.bias", i + 1), Tensor::zeros(&[CODE_DIM]), true)?;
        store.insert(format!("domenc.tap_weight.{}", i + 1), Tensor::scalar(1.0 / 3.0), true)?;
    }
    Ok(store)
}

/// Runs the frozen extractor and returns the masked-average-pooled tap features
/// (`[N, 16]`, `[N, 32]`, `[N, 64]`).
pub fn extract_taps<T: Real>(tape: &mut Tape<T>, p: &Bound, image: Var, mask: &Tensor<T>) -> Result<[Var; 3]> {
    let (n, c, h, w) = tape.value(image).dims4()?;
    if c != 3 {
        return Err(Error::shape(format!("domain encoder expects RGB input, got {c} channels")));
    }
    mask.expect_shape(&[n, 1, h, w], "domain encoder mask")?;
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::shape(format!("domain encoder input {h}x{w} must be divisible by 4")));
    }
    let mut feat = image;
    let mut m = mask.clone();
    let mut taps = Vec::with_capacity(3);
    for (b, convs) in BLOCKS.iter().enumerate() {
        if b > 0 {
            feat = tape.max_pool2x2(feat)?;
            m = mask_max_pool2x2(&m)?;
        }
        for j in 0..convs.len() {
            let wv = p.var(&frozen_name(b, j, "weight"))?;
            let bv = p.var(&frozen_name(b, j, "bias"))?;
            let (out, upd) = tape.partial_conv2d(feat, &m, wv, Some(bv), 1, 1)?;
            feat = tape.relu(out);
            m = upd;
        }
        taps.push(tape.masked_gap(feat, &m)?);
    }
    Ok([taps[0], taps[1], taps[2]])
}

/// `z = sum_i w_i FC_i(tap_i)`.
pub fn project<T: Real>(tape: &mut Tape<T>, p: &Bound, taps: &[Var; 3]) -> Result<Var> {
    let mut z: Option<Var> = None;
    for (i, &tap) in taps.iter().enumerate() {
        let wv = p.var(&format!("domenc.proj.tap{}.weight", i + 1))?;
        let bv = p.var(&format!("domenc.proj.tap{}.bias", i + 1))?;
        let zi = tape.linear(tap, wv, Some(bv))?;
        let zi = tape.mul_scalar(zi, p.var(&format!("domenc.tap_weight.{}", i + 1))?)?;
        z = Some(match z {
            None => zi,
            Some(acc) => tape.add(acc, zi)?,
        });
    }
    Ok(z.expect("three taps"))
}

/// Domain code `[N, 16]` of the region selected by `mask`.
pub fn extract_code<T: Real>(tape: &mut Tape<T>, p: &Bound, image: Var, mask: &Tensor<T>) -> Result<Var> {
    let taps = extract_taps(tape, p, image, mask)?;
    project(tape, p, &taps)
}

/// `1 - mask` for a binary mask.
pub fn complement<T: Real>(mask: &Tensor<T>) -> Tensor<T> {
    mask.map(|v| T::one() - v)
}

/// Tap features of a constant image, detached from any tape. Used to cache the codes
/// of the unretouched input, which never change during training.
pub fn tap_features<T: Real>(store: &ParamStore<T>, image: &Tensor<T>, mask: &Tensor<T>) -> Result<[Tensor<T>; 3]> {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let img = tape.constant(image.clone());
    let taps = extract_taps(&mut tape, &p, img, mask)?;
    Ok(taps.map(|t| tape.value(t).clone()))
}
