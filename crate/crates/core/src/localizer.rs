//! Region localizers mapping an RGB image to per-pixel logits `[N, 1, H, W]`.
//!
//! The harness only sees the image -> logits contract and the parameter store, so any
//! variant here can be trained with or without the color mapping stage.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::init::he_normal;
use crate::diffcore::{Bound, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UNetConfig {
    /// Number of pooling stages.
    pub depth: usize,
    /// Channels of the first stage; doubled at every stage and once more at the bottleneck.
    pub base_width: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            base_width: 16,
        }
    }
}

impl UNetConfig {
    pub fn widths(&self) -> Vec<usize> {
        (0..self.depth).map(|i| self.base_width << i).collect()
    }

    pub fn bottleneck(&self) -> usize {
        self.base_width << self.depth
    }

    pub fn divisor(&self) -> usize {
        1 << self.depth
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Localizer {
    UNet(UNetConfig),
    /// A single 1x1 convolution.
    Stub,
}

impl Default for Localizer {
    fn default() -> Self {
        Localizer::UNet(UNetConfig::default())
    }
}

fn conv_params(store: &mut ParamStore<f32>, rng: &mut ChaCha8Rng, prefix: &str, cin: usize, cout: usize, k: usize) -> Result<()> {
    store.insert(format!("{prefix}.weight"), he_normal(&[cout, cin, k, k], rng), true)?;
    store.insert(format!("{prefix}.bias"), Tensor::zeros(&[cout]), true)
}

fn conv<T: Real>(tape: &mut Tape<T>, p: &Bound, prefix: &str, x: Var, pad: usize) -> Result<Var> {
    let w = p.var(&format!("{prefix}.weight"))?;
    let b = p.var(&format!("{prefix}.bias"))?;
    tape.conv2d(x, w, Some(b), 1, pad)
}

/// Two 3x3 conv + ReLU layers.
fn double_conv<T: Real>(tape: &mut Tape<T>, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let h = conv(tape, p, &format!("{prefix}.conv1"), x, 1)?;
    let h = tape.relu(h);
    let h = conv(tape, p, &format!("{prefix}.conv2"), h, 1)?;
    Ok(tape.relu(h))
}

impl Localizer {
    pub fn name(&self) -> &'static str {
        match self {
            Localizer::UNet(_) => "unet",
            Localizer::Stub => "stub",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "unet" => Ok(Localizer::default()),
            "stub" => Ok(Localizer::Stub),
            other => Err(Error::Config(format!("unknown localizer '{other}' (expected unet or stub)"))),
        }
    }

    /// Spatial sizes must be multiples of this.
    pub fn divisor(&self) -> usize {
        match self {
            Localizer::UNet(c) => c.divisor(),
            Localizer::Stub => 1,
        }
    }

    /// He-initialized weights and zero biases under `localizer.`.
    pub fn init_params(&self, seed: u64) -> Result<ParamStore<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        match self {
            Localizer::Stub => conv_params(&mut store, &mut rng, "localizer.head", 3, 1, 1)?,
            Localizer::UNet(cfg) => {
                if cfg.depth == 0 || cfg.base_width == 0 {
                    return Err(Error::Config("UNet depth and width must be positive".into()));
                }
                let widths = cfg.widths();
                let mut cin = 3;
                for (i, &c) in widths.iter().enumerate() {
                    conv_params(&mut store, &mut rng, &format!("localizer.enc{}.conv1", i + 1), cin, c, 3)?;
                    conv_params(&mut store, &mut rng, &format!("localizer.enc{}.conv2", i + 1), c, c, 3)?;
                    cin = c;
                }
                let mid = cfg.bottleneck();
                conv_params(&mut store, &mut rng, "localizer.mid.conv1", cin, mid, 3)?;
                conv_params(&mut store, &mut rng, "localizer.mid.conv2", mid, mid, 3)?;
                let mut below = mid;
                for (i, &c) in widths.iter().enumerate().rev() {
                    conv_params(&mut store, &mut rng, &format!("localizer.dec{}.up", i + 1), below, c, 1)?;
                    conv_params(&mut store, &mut rng, &format!("localizer.dec{}.conv1", i + 1), 2 * c, c, 3)?;
                    conv_params(&mut store, &mut rng, &format!("localizer.dec{}.conv2", i + 1), c, c, 3)?;
                    below = c;
                }
                conv_params(&mut store, &mut rng, "localizer.head", widths[0], 1, 1)?;
            }
        }
        Ok(store)
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, image: Var) -> Result<Var> {
        let (_, c, h, w) = tape.value(image).dims4()?;
        if c != 3 {
            return Err(Error::shape(format!("localizer expects RGB input, got {c} channels")));
        }
        let div = self.divisor();
        if h % div != 0 || w % div != 0 {
            return Err(Error::shape(format!("input {h}x{w} must be divisible by {div}")));
        }
        match self {
            Localizer::Stub => conv(tape, p, "localizer.head", image, 0),
            Localizer::UNet(cfg) => {
                let mut x = image;
                let mut skips = Vec::with_capacity(cfg.depth);
                for i in 0..cfg.depth {
                    let s = double_conv(tape, p, &format!("localizer.enc{}", i + 1), x)?;
                    skips.push(s);
                    x = tape.max_pool2x2(s)?;
                }
                x = double_conv(tape, p, "localizer.mid", x)?;
                for i in (0..cfg.depth).rev() {
                    let skip = skips[i];
                    let (_, _, sh, sw) = tape.value(skip).dims4()?;
                    let up = tape.bilinear_resize(x, sh, sw)?;
                    let up = conv(tape, p, &format!("localizer.dec{}.up", i + 1), up, 0)?;
                    let cat = tape.concat_channels(&[up, skip])?;
                    x = double_conv(tape, p, &format!("localizer.dec{}", i + 1), cat)?;
                }
                conv(tape, p, "localizer.head", x, 0)
            }
        }
    }
}
