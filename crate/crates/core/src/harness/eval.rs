//! Evaluation, code-space discrepancy statistics and single-image inference.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::dataset::{load_split, mask_to_raster, raster_to_tensor, tensor_to_raster, LoadedPair, Raster, SampleManifest, Split};
use crate::error::{Error, Result};
use crate::metrics::{aggregate, image_metrics, MetricsReport, PooledAp};
use crate::tensor::Tensor;

use super::checkpoint::Checkpoint;
use super::model::Model;
use super::train::Batch;

fn batches(n: usize, size: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..n).step_by(size.max(1)).map(move |s| (s..(s + size).min(n)).collect())
}

/// Per-image AP/F1/IoU over `pairs`, then unweighted means.
pub fn evaluate_model(model: &Model, pairs: &[LoadedPair]) -> Result<MetricsReport> {
    let cfg = &model.config;
    let mut per_image = Vec::with_capacity(pairs.len());
    let mut pooled = PooledAp::default();
    for idx in batches(pairs.len(), cfg.batch_size) {
        let batch = Batch::from_pairs(pairs, &idx)?;
        let pred = model.predict(&batch.images)?;
        let hw = batch.masks.numel() / idx.len();
        for k in 0..idx.len() {
            let prob: Vec<f64> = pred.prob.data()[k * hw..(k + 1) * hw].iter().map(|&v| v as f64).collect();
            let gt: Vec<bool> = batch.masks.data()[k * hw..(k + 1) * hw].iter().map(|&v| v == 1.0).collect();
            per_image.push(image_metrics(&prob, &gt, cfg.threshold)?);
            if cfg.pooled_ap {
                pooled.add(&prob, &gt)?;
            }
        }
    }
    let mut report = aggregate(&per_image);
    if cfg.pooled_ap {
        report.pooled_ap = pooled.value();
    }
    Ok(report)
}

/// Evaluates a checkpoint on the test split of `config.data_dir`. Never writes to the
/// checkpoint directory.
pub fn evaluate(config: &crate::harness::TrainConfig, checkpoint: &Path) -> Result<MetricsReport> {
    let (model, _) = Model::from_checkpoint(config, checkpoint)?;
    let manifest = SampleManifest::read(&config.data_dir)?;
    let (pairs, stats) = load_split(&manifest, Split::Test, config.allow_empty_masks)?;
    if stats.skipped_empty + stats.skipped_large > 0 {
        log::info!(
            "evaluation skipped {} oversized and {} empty-mask pairs",
            stats.skipped_large,
            stats.skipped_empty
        );
    }
    evaluate_model(&model, &pairs)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DiscrepancyStats {
    /// Percentage of images with `d + m < d'`.
    pub pct_enlarged_by_margin: f64,
    /// Percentage of images with `d < d'`.
    pub pct_enlarged: f64,
    pub n: usize,
    /// Images without a usable foreground or background.
    pub skipped: usize,
}

impl DiscrepancyStats {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<24} {:>8.2}", "% d + m < d'", self.pct_enlarged_by_margin);
        let _ = writeln!(s, "{:<24} {:>8.2}", "% d < d'", self.pct_enlarged);
        let _ = writeln!(s, "{:<24} {:>8}", "images", self.n);
        let _ = writeln!(s, "{:<24} {:>8}", "skipped", self.skipped);
        s
    }
}

fn l2(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| ((x - y) as f64).powi(2)).sum::<f64>().sqrt()
}

/// Compares foreground/background code distances before (`d`) and after (`d'`) the
/// color mapping.
pub fn discrepancy_stats_model(model: &Model, pairs: &[LoadedPair]) -> Result<DiscrepancyStats> {
    let margin = model.config.loss.margin;
    let (mut n, mut by_margin, mut enlarged, mut skipped) = (0usize, 0usize, 0usize, 0usize);
    for idx in batches(pairs.len(), model.config.batch_size) {
        let batch = Batch::from_pairs(pairs, &idx)?;
        let valid = batch.code_valid();
        let retouched = model.predict(&batch.images)?.retouched;
        let (zf, zb) = model.codes(&batch.images, &batch.masks)?;
        let (zfr, zbr) = model.codes(&retouched, &batch.masks)?;
        let d = zf.dim(1);
        for (k, &ok) in valid.iter().enumerate() {
            if !ok {
                skipped += 1;
                continue;
            }
            let r = k * d..(k + 1) * d;
            let before = l2(&zf.data()[r.clone()], &zb.data()[r.clone()]);
            let after = l2(&zfr.data()[r.clone()], &zbr.data()[r]);
            n += 1;
            by_margin += usize::from(before + margin < after);
            enlarged += usize::from(before < after);
        }
    }
    let pct = |c: usize| if n == 0 { 0.0 } else { 100.0 * c as f64 / n as f64 };
    Ok(DiscrepancyStats {
        pct_enlarged_by_margin: pct(by_margin),
        pct_enlarged: pct(enlarged),
        n,
        skipped,
    })
}

pub fn discrepancy_stats(config: &crate::harness::TrainConfig, checkpoint: &Path, split: Split) -> Result<DiscrepancyStats> {
    let (model, _) = Model::from_checkpoint(config, checkpoint)?;
    let manifest = SampleManifest::read(&config.data_dir)?;
    // Empty masks are loaded so they can be counted as skipped.
    let (pairs, _) = load_split(&manifest, split, true)?;
    discrepancy_stats_model(&model, &pairs)
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferResult {
    pub area_fraction: f64,
    pub mask_path: PathBuf,
    pub retouched_path: Option<PathBuf>,
}

fn read_image(model: &Model, path: &Path) -> Result<Tensor<f32>> {
    let r = Raster::read(path)?;
    if r.channels != 3 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: "expected an RGB (P6) image".into(),
        });
    }
    model.check_input_size(r.height, r.width)?;
    raster_to_tensor(&r).reshape(&[1, 3, r.height, r.width])
}

/// Predicted binary mask for one image, thresholded as in evaluation.
pub fn infer_model(model: &Model, image: &Path, mask_out: &Path, retouched_out: Option<&Path>) -> Result<InferResult> {
    let x = read_image(model, image)?;
    let (h, w) = (x.dim(2), x.dim(3));
    let pred = model.predict(&x)?;
    let t = model.config.threshold as f32;
    let mask = pred.prob.map(|p| if p >= t { 1.0 } else { 0.0 }).reshape(&[1, h, w])?;
    let area = mask.data().iter().filter(|&&v| v == 1.0).count() as f64 / (h * w) as f64;
    mask_to_raster(&mask)?.write(mask_out)?;
    if let Some(path) = retouched_out {
        tensor_to_raster(&pred.retouched.reshape(&[3, h, w])?)?.write(path)?;
    }
    Ok(InferResult {
        area_fraction: area,
        mask_path: mask_out.to_path_buf(),
        retouched_path: retouched_out.map(Path::to_path_buf),
    })
}

pub fn infer(
    config: &crate::harness::TrainConfig,
    checkpoint: &Path,
    image: &Path,
    mask_out: &Path,
    retouched_out: Option<&Path>,
) -> Result<InferResult> {
    let (model, _) = Model::from_checkpoint(config, checkpoint)?;
    infer_model(&model, image, mask_out, retouched_out)
}

/// Writes the per-pixel affine field (`field`, `[1, 12, H, W]`) and guidance map
/// (`guidance`, `[1, 1, H, W]`) of one image in the checkpoint container format, plus
/// the guidance map as a PGM.
pub fn dump_field(config: &crate::harness::TrainConfig, checkpoint: &Path, image: &Path, out_dir: &Path) -> Result<()> {
    let (model, _) = Model::from_checkpoint(config, checkpoint)?;
    let mapper = model
        .mapper
        .as_ref()
        .ok_or_else(|| Error::Config("dump-field needs color_map = true".into()))?;
    let x = read_image(&model, image)?;
    let (h, w) = (x.dim(2), x.dim(3));
    let mut tape = crate::diffcore::Tape::new();
    let p = model.params.bind_constants(&mut tape);
    let xv = tape.constant(x);
    let out = mapper.forward(&mut tape, &p, xv)?;
    let field = tape.value(out.field).clone();
    let guidance = tape.value(out.guidance).clone();
    let mut ck = Checkpoint::default();
    ck.params.insert("field".into(), field);
    ck.params.insert("guidance".into(), guidance.clone());
    ck.save(out_dir)?;
    let g = guidance.reshape(&[1, h, w])?;
    let path = out_dir.join("guidance.pgm");
    tensor_to_raster(&g)?.write(&path)
}
