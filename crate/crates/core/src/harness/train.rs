//! Training loop.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{load_split, sample_seed, LoadedPair, SampleManifest, Split};
use crate::diffcore::{Bound, Tape, Var};
use crate::domenc;
use crate::error::{Error, Result};
use crate::losses::{self, Codes, LossReport};
use crate::metrics::MetricsReport;
use crate::tensor::Tensor;

use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use super::eval::evaluate_model;
use super::model::Model;
use super::optim::Adam;

pub const LOG_FILE: &str = "train_log.csv";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const FINAL_EVAL_FILE: &str = "final_eval.csv";
pub const NAN_DUMP_FILE: &str = "nan_dump.txt";

/// A stacked mini-batch.
#[derive(Clone, Debug)]
pub struct Batch {
    /// Positions in the training split, used to key the tap cache.
    pub indices: Vec<usize>,
    pub images: Tensor<f32>,
    pub masks: Tensor<f32>,
}

impl Batch {
    pub fn from_pairs(pairs: &[LoadedPair], indices: &[usize]) -> Result<Self> {
        let first = pairs.get(*indices.first().ok_or_else(|| Error::invalid("empty batch"))?).expect("index");
        let (h, w) = (first.image.dim(1), first.image.dim(2));
        let mut img = Vec::with_capacity(indices.len() * 3 * h * w);
        let mut msk = Vec::with_capacity(indices.len() * h * w);
        for &i in indices {
            let p = &pairs[i];
            if p.image.shape() != [3, h, w] {
                return Err(Error::Data(format!("training images differ in size: {:?} vs {h}x{w}", p.image.shape())));
            }
            img.extend_from_slice(p.image.data());
            msk.extend_from_slice(p.mask.data());
        }
        Ok(Self {
            indices: indices.to_vec(),
            images: Tensor::from_vec(&[indices.len(), 3, h, w], img)?,
            masks: Tensor::from_vec(&[indices.len(), 1, h, w], msk)?,
        })
    }

    /// Samples whose region and background are both non-empty.
    pub fn code_valid(&self) -> Vec<bool> {
        let hw = self.masks.numel() / self.indices.len();
        (0..self.indices.len())
            .map(|i| {
                let s: f32 = self.masks.data()[i * hw..(i + 1) * hw].iter().sum();
                s > 0.0 && (s as usize) < hw
            })
            .collect()
    }
}

/// Pooled tap features of the unretouched training images. The extractor is frozen and
/// its input fixed, so these never change during a run.
#[derive(Default)]
pub struct TapCache {
    entries: HashMap<usize, ([Tensor<f32>; 3], [Tensor<f32>; 3])>,
}

impl TapCache {
    fn batch_taps(&mut self, model: &Model, batch: &Batch) -> Result<([Tensor<f32>; 3], [Tensor<f32>; 3])> {
        let n = batch.indices.len();
        for (k, &idx) in batch.indices.iter().enumerate() {
            if self.entries.contains_key(&idx) {
                continue;
            }
            let img = batch.images.narrow_batch(k, 1)?;
            let mask = batch.masks.narrow_batch(k, 1)?;
            let fg = domenc::tap_features(&model.params, &img, &mask)?;
            let bg = domenc::tap_features(&model.params, &img, &domenc::complement(&mask))?;
            self.entries.insert(idx, (fg, bg));
        }
        let stack = |pick: &dyn Fn(&([Tensor<f32>; 3], [Tensor<f32>; 3])) -> &[Tensor<f32>; 3]| -> Result<[Tensor<f32>; 3]> {
            let mut out = Vec::with_capacity(3);
            for t in 0..3 {
                let c = pick(&self.entries[&batch.indices[0]])[t].dim(1);
                let mut data = Vec::with_capacity(n * c);
                for idx in &batch.indices {
                    data.extend_from_slice(pick(&self.entries[idx])[t].data());
                }
                out.push(Tensor::from_vec(&[n, c], data)?);
            }
            Ok([out.remove(0), out.remove(0), out.remove(0)])
        };
        Ok((stack(&|e| &e.0)?, stack(&|e| &e.1)?))
    }
}

/// Scalar handles of a batch objective.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub ddm: Var,
    pub di: Var,
    pub loc: Var,
    pub total: Var,
}

impl LossVars {
    pub fn report(&self, tape: &Tape<f32>, model: &Model) -> LossReport {
        let v = |x: Var| tape.value(x).data()[0] as f64;
        LossReport::assemble(v(self.ddm), v(self.di), v(self.loc), &model.config.loss)
    }
}

/// Builds the full objective for one batch on `tape`.
pub fn batch_objective(
    model: &Model,
    tape: &mut Tape<f32>,
    p: &Bound,
    batch: &Batch,
    cache: &mut TapCache,
) -> Result<LossVars> {
    let x = tape.constant(batch.images.clone());
    let fwd = model.forward(tape, p, x)?;
    let weights = model.config.loss;
    let (ddm, di) = if model.mapper.is_some() && weights.uses_codes() {
        let (fg_taps, bg_taps) = cache.batch_taps(model, batch)?;
        let fg_taps = fg_taps.map(|t| tape.constant(t));
        let bg_taps = bg_taps.map(|t| tape.constant(t));
        let codes = Codes {
            fg: domenc::project(tape, p, &fg_taps)?,
            bg: domenc::project(tape, p, &bg_taps)?,
            fg_retouched: domenc::extract_code(tape, p, fwd.retouched, &batch.masks)?,
            bg_retouched: domenc::extract_code(tape, p, fwd.retouched, &domenc::complement(&batch.masks))?,
        };
        let valid = batch.code_valid();
        (
            losses::ddm_loss(tape, &codes, weights.margin, &valid)?,
            losses::di_loss(tape, &codes, &valid)?,
        )
    } else {
        let zero = tape.constant(Tensor::scalar(0.0));
        (zero, zero)
    };
    let gt = batch.masks.clone().reshape(tape.value(fwd.logits).shape())?;
    let loc = losses::localization_loss(tape, fwd.logits, &gt)?.total;
    let total = losses::total_loss(tape, ddm, di, loc, &weights)?;
    Ok(LossVars { ddm, di, loc, total })
}

/// Objective value without touching the parameters.
pub fn batch_loss(model: &Model, batch: &Batch, cache: &mut TapCache) -> Result<LossReport> {
    let mut tape = Tape::new();
    let p = model.params.bind_constants(&mut tape);
    let vars = batch_objective(model, &mut tape, &p, batch, cache)?;
    Ok(vars.report(&tape, model))
}

/// One optimizer step; returns the losses measured before the update.
pub fn train_step(model: &mut Model, opt: &mut Adam, batch: &Batch, cache: &mut TapCache) -> Result<LossReport> {
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape);
    let vars = batch_objective(model, &mut tape, &p, batch, cache)?;
    let report = vars.report(&tape, model);
    if !report.total.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss is not finite (ddm {}, di {}, loc {})",
            report.ddm, report.di, report.loc
        )));
    }
    let mut grads = tape.backward(vars.total)?;
    let grads = p.collect_grads(&mut grads, &model.params);
    if let Some((name, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient of {name} is not finite")));
    }
    opt.update(&mut model.params, &grads)?;
    Ok(report)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub steps: u64,
    pub last: LossReport,
    pub final_eval: MetricsReport,
}

pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(sample_seed(seed, Split::Test, epoch)));
    order
}

fn write_nan_dump(path: &Path, step: u64, batch: &Batch, err: &Error) {
    let mut s = String::new();
    let _ = writeln!(s, "step = {step}");
    let _ = writeln!(s, "error = {err}");
    let _ = writeln!(s, "batch_indices = {:?}", batch.indices);
    let _ = writeln!(s, "images_finite = {}", batch.images.is_finite());
    let _ = writeln!(s, "mask_areas = {:?}", {
        let hw = batch.masks.numel() / batch.indices.len();
        (0..batch.indices.len())
            .map(|i| batch.masks.data()[i * hw..(i + 1) * hw].iter().sum::<f32>())
            .collect::<Vec<_>>()
    });
    if let Err(e) = fs::write(path, s) {
        log::error!("could not write {}: {e}", path.display());
    }
}

/// Trains on the split described by `config.data_dir` and writes the log, a checkpoint
/// after every epoch, and the final test metrics to `out_dir`.
pub fn train(config: &TrainConfig, out_dir: &Path) -> Result<TrainOutcome> {
    let mut model = Model::init(config)?;
    let manifest = SampleManifest::read(&config.data_dir)?;
    let (pairs, stats) = load_split(&manifest, Split::Train, config.allow_empty_masks)?;
    if pairs.is_empty() {
        return Err(Error::Data("no usable training pairs".into()));
    }
    log::info!(
        "training on {} pairs ({} too large, {} empty skipped)",
        pairs.len(),
        stats.skipped_large,
        stats.skipped_empty
    );
    for p in &pairs {
        if p.image.shape() != [3, config.image_size, config.image_size] {
            return Err(Error::Data(format!(
                "training image of shape {:?} does not match image_size {}",
                p.image.shape(),
                config.image_size
            )));
        }
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join(LOG_FILE);
    let mut log_file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    writeln!(log_file, "step,ddm,di,loc,total").map_err(|e| Error::io(&log_path, e))?;

    let mut opt = Adam::new(config.learning_rate, config.beta1, config.beta2, config.adam_eps);
    let mut cache = TapCache::default();
    let ck_dir = out_dir.join(CHECKPOINT_DIR);
    let mut last = LossReport::default();
    for epoch in 0..config.epochs {
        let order = epoch_order(config.seed, epoch, pairs.len());
        let mut sum = LossReport::default();
        let mut count = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch = Batch::from_pairs(&pairs, chunk)?;
            let report = match train_step(&mut model, &mut opt, &batch, &mut cache) {
                Ok(r) => r,
                Err(e @ Error::NonFinite(_)) => {
                    let dump = out_dir.join(NAN_DUMP_FILE);
                    write_nan_dump(&dump, opt.step + 1, &batch, &e);
                    return Err(Error::Numeric(format!("training aborted at step {}: {e}; see {}", opt.step + 1, dump.display())));
                }
                Err(e) => return Err(e),
            };
            writeln!(log_file, "{},{},{},{},{}", opt.step, report.ddm, report.di, report.loc, report.total)
                .map_err(|e| Error::io(&log_path, e))?;
            sum.ddm += report.ddm;
            sum.di += report.di;
            sum.loc += report.loc;
            sum.total += report.total;
            count += 1;
            last = report;
        }
        let k = count.max(1) as f64;
        log::info!(
            "epoch {}/{}: ddm {:.5} di {:.5} loc {:.5} total {:.5}",
            epoch + 1,
            config.epochs,
            sum.ddm / k,
            sum.di / k,
            sum.loc / k,
            sum.total / k
        );
        Checkpoint::from_store(&model.params, Some(&opt), Some(config.to_text())).save(&ck_dir)?;
    }
    if config.epochs == 0 {
        Checkpoint::from_store(&model.params, Some(&opt), Some(config.to_text())).save(&ck_dir)?;
    }
    log_file.flush().map_err(|e| Error::io(&log_path, e))?;

    let (test, _) = load_split(&manifest, Split::Test, config.allow_empty_masks)?;
    let final_eval = evaluate_model(&model, &test)?;
    let eval_path = out_dir.join(FINAL_EVAL_FILE);
    fs::write(&eval_path, final_eval.to_csv()).map_err(|e| Error::io(&eval_path, e))?;
    Ok(TrainOutcome {
        checkpoint: ck_dir,
        log: log_path,
        steps: opt.step,
        last,
        final_eval,
    })
}
