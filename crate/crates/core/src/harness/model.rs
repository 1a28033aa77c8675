//! The assembled network: optional color mapping, localizer and (for training and
//! analysis only) the domain encoder, sharing one parameter store.

use std::path::Path;

use crate::colormap::{ColorMapOutput, ColorMapper, HeadInit};
use crate::dataset::sample_seed;
use crate::dataset::Split;
use crate::diffcore::{Bound, ParamStore, Tape, Var};
use crate::domenc;
use crate::error::{Error, Result};
use crate::localizer::Localizer;
use crate::tensor::{Real, Tensor};

use super::checkpoint::Checkpoint;
use super::config::TrainConfig;

#[derive(Clone, Debug)]
pub struct Model {
    pub config: TrainConfig,
    pub mapper: Option<ColorMapper>,
    pub localizer: Localizer,
    pub params: ParamStore<f32>,
}

/// Handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    /// The localizer input: the retouched image, or the input itself without color mapping.
    pub retouched: Var,
    pub color: Option<ColorMapOutput>,
    pub logits: Var,
}

#[derive(Clone, Debug)]
pub struct Prediction {
    pub retouched: Tensor<f32>,
    /// `sigmoid(logits)`, `[N, 1, H, W]`.
    pub prob: Tensor<f32>,
}

fn module_seed(seed: u64, module: usize) -> u64 {
    sample_seed(seed, Split::Train, usize::MAX - module)
}

impl Model {
    pub fn init(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut params = config.localizer.init_params(module_seed(config.seed, 1))?;
        let mapper = if config.color_map {
            let mapper = ColorMapper::new(config.colormap.clone())?;
            params.extend(mapper.config.init_params(module_seed(config.seed, 2), HeadInit::Identity)?)?;
            let mut enc = domenc::init_params(config.encoder_seed)?;
            // Projector weights follow the run seed; the frozen extractor does not.
            let fresh = domenc::init_params(module_seed(config.seed, 3))?;
            for (name, p) in fresh.iter().filter(|(_, p)| p.trainable) {
                enc.set(name, p.value.clone())?;
            }
            params.extend(enc)?;
            Some(mapper)
        } else {
            None
        };
        Ok(Self {
            config: config.clone(),
            mapper,
            localizer: config.localizer,
            params,
        })
    }

    /// Rebuilds the model described by `config` and loads the checkpoint weights into it.
    pub fn from_checkpoint(config: &TrainConfig, dir: &Path) -> Result<(Self, Checkpoint)> {
        let ck = Checkpoint::load(dir)?;
        let mut model = Self::init(config)?;
        ck.restore_into(&mut model.params).map_err(|e| {
            Error::Checkpoint(format!("{} does not match the configured architecture: {e}", dir.display()))
        })?;
        Ok((model, ck))
    }

    /// Configuration stored with a checkpoint, with `overrides` applied on top.
    pub fn checkpoint_config(dir: &Path, overrides: &[(String, String)]) -> Result<TrainConfig> {
        let path = dir.join(super::checkpoint::CONFIG);
        let mut cfg = TrainConfig::default();
        if path.exists() {
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            cfg.apply_text(&text)?;
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn check_input_size(&self, h: usize, w: usize) -> Result<()> {
        let div = self.localizer.divisor();
        if h % div != 0 || w % div != 0 {
            return Err(Error::shape(format!("image {h}x{w} must be divisible by {div}")));
        }
        if let Some(m) = &self.mapper {
            let s = m.config.lowres_size;
            if h < s || w < s {
                return Err(Error::shape(format!("image {h}x{w} smaller than the low-res stream ({s})")));
            }
            if h % 4 != 0 || w % 4 != 0 {
                return Err(Error::shape(format!("image {h}x{w} must be divisible by 4")));
            }
        }
        Ok(())
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, images: Var) -> Result<Forward> {
        let (_, _, h, w) = tape.value(images).dims4()?;
        self.check_input_size(h, w)?;
        let (retouched, color) = match &self.mapper {
            Some(m) => {
                let out = m.forward(tape, p, images)?;
                (out.retouched, Some(out))
            }
            None => (images, None),
        };
        let logits = self.localizer.forward(tape, p, retouched)?;
        Ok(Forward {
            retouched,
            color,
            logits,
        })
    }

    pub fn predict(&self, images: &Tensor<f32>) -> Result<Prediction> {
        let mut tape = Tape::new();
        let p = self.params.bind_constants(&mut tape);
        let x = tape.constant(images.clone());
        let f = self.forward(&mut tape, &p, x)?;
        let prob = tape.sigmoid(f.logits);
        Ok(Prediction {
            retouched: tape.value(f.retouched).clone(),
            prob: tape.value(prob).clone(),
        })
    }

    /// Domain codes of `images` for the regions `masks` and `1 - masks`.
    pub fn codes(&self, images: &Tensor<f32>, masks: &Tensor<f32>) -> Result<(Tensor<f32>, Tensor<f32>)> {
        if self.mapper.is_none() {
            return Err(Error::Config("domain codes need the color mapping stage (color_map = true)".into()));
        }
        let mut tape = Tape::new();
        let p = self.params.bind_constants(&mut tape);
        let x = tape.constant(images.clone());
        let fg = domenc::extract_code(&mut tape, &p, x, masks)?;
        let bg = domenc::extract_code(&mut tape, &p, x, &domenc::complement(masks))?;
        Ok((tape.value(fg).clone(), tape.value(bg).clone()))
    }
}
