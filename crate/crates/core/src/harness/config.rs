//! Run configuration, read from `key = value` text and overridable key by key.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::colormap::ColorMapConfig;
use crate::dataset::{DatasetConfig, RegionSpec};
use crate::error::{Error, Result};
use crate::localizer::{Localizer, UNetConfig};
use crate::losses::LossWeights;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub image_size: usize,
    pub loss: LossWeights,
    /// Parameter initialization and batch order.
    pub seed: u64,
    /// Frozen domain-encoder weights.
    pub encoder_seed: u64,
    /// Dataset generation.
    pub data_seed: u64,
    pub localizer: Localizer,
    /// Shape used whenever `localizer = unet`.
    pub unet: UNetConfig,
    /// `false` trains the localizer directly on the input image.
    pub color_map: bool,
    pub colormap: ColorMapConfig,
    /// Binarization threshold for predicted masks.
    pub threshold: f64,
    pub allow_empty_masks: bool,
    pub pooled_ap: bool,
    pub data_dir: PathBuf,
    pub train_count: usize,
    pub test_count: usize,
    pub max_regions: usize,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 8,
            epochs: 20,
            image_size: 64,
            loss: LossWeights::default(),
            seed: 7,
            encoder_seed: 0,
            data_seed: 7,
            localizer: Localizer::default(),
            unet: UNetConfig::default(),
            color_map: true,
            colormap: ColorMapConfig::default(),
            threshold: 0.5,
            allow_empty_masks: false,
            pooled_ap: false,
            data_dir: PathBuf::from("data"),
            train_count: 512,
            test_count: 128,
            max_regions: 1,
            threads: 1,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {value:?} for {key}"))),
    }
}

impl TrainConfig {
    pub const KEYS: &'static [&'static str] = &[
        "learning_rate",
        "beta1",
        "beta2",
        "adam_eps",
        "batch_size",
        "epochs",
        "image_size",
        "lambda_ddm",
        "lambda_di",
        "margin",
        "seed",
        "encoder_seed",
        "data_seed",
        "localizer",
        "unet_depth",
        "unet_width",
        "color_map",
        "cdc_theta",
        "grid_size",
        "grid_depth",
        "lowres_size",
        "threshold",
        "allow_empty_masks",
        "pooled_ap",
        "data_dir",
        "train_count",
        "test_count",
        "max_regions",
        "threads",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "adam_eps" => self.adam_eps = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "image_size" => self.image_size = parse(key, value)?,
            "lambda_ddm" => self.loss.lambda_ddm = parse(key, value)?,
            "lambda_di" => self.loss.lambda_di = parse(key, value)?,
            "margin" => self.loss.margin = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "encoder_seed" => self.encoder_seed = parse(key, value)?,
            "data_seed" => self.data_seed = parse(key, value)?,
            "localizer" => {
                self.localizer = match Localizer::parse(value)? {
                    Localizer::UNet(_) => Localizer::UNet(self.unet),
                    other => other,
                }
            }
            "unet_depth" | "unet_width" => {
                let n = parse(key, value)?;
                if key == "unet_depth" {
                    self.unet.depth = n;
                } else {
                    self.unet.base_width = n;
                }
                if let Localizer::UNet(c) = &mut self.localizer {
                    *c = self.unet;
                }
            }
            "color_map" => self.color_map = parse_bool(key, value)?,
            "cdc_theta" => self.colormap.cdc_theta = parse(key, value)?,
            "grid_size" => self.colormap.grid_size = parse(key, value)?,
            "grid_depth" => self.colormap.grid_depth = parse(key, value)?,
            "lowres_size" => self.colormap.lowres_size = parse(key, value)?,
            "threshold" => self.threshold = parse(key, value)?,
            "allow_empty_masks" => self.allow_empty_masks = parse_bool(key, value)?,
            "pooled_ap" => self.pooled_ap = parse_bool(key, value)?,
            "data_dir" => self.data_dir = PathBuf::from(value),
            "train_count" => self.train_count = parse(key, value)?,
            "test_count" => self.test_count = parse(key, value)?,
            "max_regions" => self.max_regions = parse(key, value)?,
            "threads" => self.threads = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "learning_rate" => self.learning_rate.to_string(),
            "beta1" => self.beta1.to_string(),
            "beta2" => self.beta2.to_string(),
            "adam_eps" => self.adam_eps.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "epochs" => self.epochs.to_string(),
            "image_size" => self.image_size.to_string(),
            "lambda_ddm" => self.loss.lambda_ddm.to_string(),
            "lambda_di" => self.loss.lambda_di.to_string(),
            "margin" => self.loss.margin.to_string(),
            "seed" => self.seed.to_string(),
            "encoder_seed" => self.encoder_seed.to_string(),
            "data_seed" => self.data_seed.to_string(),
            "localizer" => self.localizer.name().to_string(),
            "unet_depth" => self.unet.depth.to_string(),
            "unet_width" => self.unet.base_width.to_string(),
            "color_map" => self.color_map.to_string(),
            "cdc_theta" => self.colormap.cdc_theta.to_string(),
            "grid_size" => self.colormap.grid_size.to_string(),
            "grid_depth" => self.colormap.grid_depth.to_string(),
            "lowres_size" => self.colormap.lowres_size.to_string(),
            "threshold" => self.threshold.to_string(),
            "allow_empty_masks" => self.allow_empty_masks.to_string(),
            "pooled_ap" => self.pooled_ap.to_string(),
            "data_dir" => self.data_dir.display().to_string(),
            "train_count" => self.train_count.to_string(),
            "test_count" => self.test_count.to_string(),
            "max_regions" => self.max_regions.to_string(),
            "threads" => self.threads.to_string(),
            _ => return None,
        })
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value', got {raw:?}", i + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in Self::KEYS {
            let _ = writeln!(s, "{k} = {}", self.get(k).expect("known key"));
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("learning_rate must be > 0 and betas in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("threshold {} outside (0, 1)", self.threshold)));
        }
        if self.unet.depth == 0 || self.unet.base_width == 0 {
            return Err(Error::Config("unet_depth and unet_width must be positive".into()));
        }
        let div = self.localizer.divisor().max(4);
        if self.image_size == 0 || self.image_size % div != 0 {
            return Err(Error::Config(format!(
                "image_size {} must be a positive multiple of {div}",
                self.image_size
            )));
        }
        if self.color_map {
            self.colormap.validate()?;
            if self.image_size < self.colormap.lowres_size {
                return Err(Error::Config(format!(
                    "image_size {} smaller than lowres_size {}",
                    self.image_size, self.colormap.lowres_size
                )));
            }
        }
        self.loss.validate()?;
        Ok(())
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        DatasetConfig {
            train: self.train_count,
            test: self.test_count,
            size: self.image_size,
            region: RegionSpec {
                max_count: self.max_regions,
                ..Default::default()
            },
            ..Default::default()
        }
    }
}
