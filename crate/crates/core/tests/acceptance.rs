//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 5 and 6 train full-size models (several minutes each). Set
//! `ACCEPTANCE_ONLY=1,2,3` to run a subset and `ACCEPTANCE_WORKDIR` to keep the runs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use inharmony_core::colormap::{ColorMapper, HeadInit};
use inharmony_core::dataset::{build_dataset, Raster, SampleManifest, Split};
use inharmony_core::diffcore::{self, AttentionVars, Tape};
use inharmony_core::domenc;
use inharmony_core::harness::checkpoint::Checkpoint;
use inharmony_core::harness::gradsuite::{gradcheck_all, planted_fault_error, TOLERANCE};
use inharmony_core::harness::{discrepancy_stats, train, DiscrepancyStats, TrainConfig, TrainOutcome};
use inharmony_core::losses::{self, Codes, LossWeights};
use inharmony_core::metrics::{average_precision, f1_iou};
use inharmony_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAD_TOL: f64 = 1e-4;
const GRAD_BUDGET: Duration = Duration::from_secs(120);
const CDC_TOL: f64 = 1e-7;
const IDENTITY_TOL: f64 = 1e-6;
const BACKGROUND_TOL: f64 = 1e-6;
const LOSS_TOL: f64 = 1e-9;
const METRIC_CASES: usize = 200;
const MIN_IOU: f64 = 0.5;
const MIN_PCT_ENLARGED: f64 = 80.0;
const TOY_BUDGET: Duration = Duration::from_secs(30 * 60);
const SEEDS: [u64; 3] = [7, 8, 9];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn max_abs_diff<T: inharmony_core::Real>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.as_f64() - y.as_f64()).abs())
        .fold(0.0, f64::max)
}

fn criterion_1() -> Verdict {
    let t = Instant::now();
    let cases = gradcheck_all(&[0, 1, 2]).expect("grad suite runs");
    let planted = planted_fault_error(0).expect("planted fault runs");
    let elapsed = t.elapsed();
    assert_eq!(TOLERANCE, GRAD_TOL);
    let worst = cases.iter().map(|c| c.report.max_rel_err).fold(0.0, f64::max);
    let failing: Vec<String> = cases
        .iter()
        .filter(|c| !c.report.passes(GRAD_TOL))
        .map(|c| format!("{}@{}", c.op, c.seed))
        .collect();
    let ops = cases.len() / 3;
    verdict(
        failing.is_empty() && elapsed < GRAD_BUDGET && planted > 0.3,
        format!(
            "{ops} ops x 3 seeds, worst rel err {worst:.2e} (<= {GRAD_TOL:e}), {:.1}s (< {}s), planted fault {planted:.2}{}",
            elapsed.as_secs_f64(),
            GRAD_BUDGET.as_secs(),
            if failing.is_empty() { String::new() } else { format!(", failing: {}", failing.join(" ")) }
        ),
    )
}

fn criterion_2() -> Verdict {
    let mut r = rng(2);
    // cdc_conv2d at theta = 0 against conv2d.
    let x = Tensor::<f64>::rand_uniform(&[2, 3, 9, 9], -1.0, 1.0, &mut r);
    let w = Tensor::<f64>::rand_uniform(&[4, 3, 3, 3], -1.0, 1.0, &mut r);
    let b = Tensor::<f64>::rand_uniform(&[4], -1.0, 1.0, &mut r);
    let plain = diffcore::conv2d(&x, &w, Some(&b), 1, 1).unwrap();
    let cdc = max_abs_diff(&diffcore::cdc_conv2d(&x, &w, Some(&b), 1, 1, 0.0).unwrap(), &plain);
    // Identity-initialized color map on a 64x64 image.
    let mapper = ColorMapper::default();
    let store = mapper.config.init_params(11, HeadInit::Identity).unwrap().cast::<f64>();
    let img = Tensor::<f64>::rand_uniform(&[2, 3, 64, 64], 0.0, 1.0, &mut r);
    let mut tape = Tape::new();
    let p = store.bind_constants(&mut tape);
    let xv = tape.constant(img.clone());
    let out = mapper.forward(&mut tape, &p, xv).unwrap();
    let cm = max_abs_diff(tape.value(out.retouched), &img);
    // Attention with gamma = 0.
    let c = 8;
    let cq = diffcore::reduced_channels(c);
    let feat = Tensor::<f64>::rand_uniform(&[2, c, 4, 4], -1.0, 1.0, &mut r);
    let mut tape = Tape::new();
    let mut param = |shape: &[usize]| {
        let t = Tensor::<f64>::rand_uniform(shape, -1.0, 1.0, &mut r);
        tape.constant(t)
    };
    let attn = AttentionVars {
        wq: param(&[cq, c, 1, 1]),
        bq: param(&[cq]),
        wk: param(&[cq, c, 1, 1]),
        bk: param(&[cq]),
        wv: param(&[c, c, 1, 1]),
        bv: param(&[c]),
        gamma: tape.constant(Tensor::scalar(0.0)),
    };
    let fv = tape.constant(feat.clone());
    let y = tape.attention_block(fv, &attn).unwrap();
    let attn_exact = tape.value(y).data() == feat.data();
    // Domain code under background perturbation.
    let enc = domenc::init_params(0).unwrap().cast::<f64>();
    let mut worst_bg: f64 = 0.0;
    for trial in 0..5 {
        let mut r = rng(100 + trial);
        let img = Tensor::<f64>::rand_uniform(&[2, 3, 32, 32], 0.0, 1.0, &mut r);
        let (y0, x0) = (r.random_range(0..16), r.random_range(0..16));
        let (hh, ww) = (r.random_range(4..16), r.random_range(4..16));
        let mut mask = Tensor::<f64>::zeros(&[2, 1, 32, 32]);
        for n in 0..2 {
            for y in y0..y0 + hh {
                for x in x0..x0 + ww {
                    mask.data_mut()[n * 1024 + y * 32 + x] = 1.0;
                }
            }
        }
        let noise = Tensor::<f64>::rand_uniform(&[2, 3, 32, 32], -5.0, 5.0, &mut r);
        let mut moved = img.clone();
        for i in 0..moved.numel() {
            let (n, p) = (i / 3072, i % 1024);
            if mask.data()[n * 1024 + p] == 0.0 {
                moved.data_mut()[i] += noise.data()[i];
            }
        }
        let code = |image: &Tensor<f64>| {
            let mut tape = Tape::new();
            let p = enc.bind_constants(&mut tape);
            let v = tape.constant(image.clone());
            let z = domenc::extract_code(&mut tape, &p, v, &mask).unwrap();
            tape.value(z).clone()
        };
        worst_bg = worst_bg.max(max_abs_diff(&code(&img), &code(&moved)));
    }
    verdict(
        cdc <= CDC_TOL && cm <= IDENTITY_TOL && attn_exact && worst_bg <= BACKGROUND_TOL,
        format!(
            "cdc(theta=0)-conv {cdc:.1e} (<= {CDC_TOL:e}), identity color map {cm:.1e} (<= {IDENTITY_TOL:e}), \
             attention gamma=0 exact: {attn_exact}, background change of code {worst_bg:.1e} (<= {BACKGROUND_TOL:e})"
        ),
    )
}

fn codes_tape(rows: [[f64; 4]; 4]) -> (Tape<f64>, Codes) {
    let mut tape = Tape::new();
    let [a, b, c, d] = rows.map(|r| tape.constant(Tensor::from_vec(&[1, 4], r.to_vec()).unwrap()));
    (
        tape,
        Codes {
            fg: a,
            bg: b,
            fg_retouched: c,
            bg_retouched: d,
        },
    )
}

fn ddm_of(rows: [[f64; 4]; 4], m: f64) -> f64 {
    let (mut tape, codes) = codes_tape(rows);
    let v = losses::ddm_loss(&mut tape, &codes, m, &[true]).unwrap();
    tape.value(v).data()[0]
}

fn di_of(rows: [[f64; 4]; 4]) -> f64 {
    let (mut tape, codes) = codes_tape(rows);
    let v = losses::di_loss(&mut tape, &codes, &[true]).unwrap();
    tape.value(v).data()[0]
}

fn criterion_3() -> Verdict {
    let z = [0.0; 4];
    let m = 0.01;
    let dz = [0.3, -0.2, 0.5, 0.1];
    let scaled = |k: f64| dz.map(|v| k * v);
    let checks: Vec<(&str, f64, f64)> = vec![
        ("ddm d=0.5 d'=0.6", ddm_of([[0.5, 0.0, 0.0, 0.0], z, [0.6, 0.0, 0.0, 0.0], z], m), 0.0),
        ("ddm d=0.6 d'=0.5", ddm_of([[0.0, 0.6, 0.0, 0.0], z, [0.0, 0.5, 0.0, 0.0], z], m), 0.11),
        ("ddm equal codes", ddm_of([dz, dz, scaled(2.0), scaled(2.0)], m), m),
        ("di dz'=2dz", di_of([dz, z, scaled(2.0), z]), 0.0),
        ("di dz'=-dz", di_of([dz, z, scaled(-1.0), z]), 2.0),
        ("di e1 vs e2", di_of([[1.0, 0.0, 0.0, 0.0], z, [0.0, 1.0, 0.0, 0.0], z]), 1.0),
    ];
    let mut worst: f64 = 0.0;
    let mut bad = Vec::new();
    for (name, got, want) in &checks {
        let e = (got - want).abs();
        worst = worst.max(e);
        if e > LOSS_TOL {
            bad.push(format!("{name}: {got} vs {want}"));
        }
    }
    // Positive rescaling of dz' leaves di unchanged.
    let mut r = rng(3);
    let mut worst_scale: f64 = 0.0;
    for _ in 0..100 {
        let rows: [[f64; 4]; 4] = [0; 4].map(|_| [0; 4].map(|_| r.random_range(-1.0..1.0)));
        let base = di_of(rows);
        let k: f64 = 10f64.powf(r.random_range(-3.0..3.0));
        let mut s = rows;
        for j in 0..4 {
            s[2][j] = rows[3][j] + k * (rows[2][j] - rows[3][j]);
        }
        worst_scale = worst_scale.max((di_of(s) - base).abs());
    }
    // The remaining loss examples: total = loc at zero weights and the weighted sum.
    let mut tape = Tape::<f64>::new();
    let [ddm, di, loc] = [0.11, 1.0, 0.7].map(|v| tape.constant(Tensor::scalar(v)));
    let w = LossWeights {
        lambda_ddm: 0.001,
        lambda_di: 0.001,
        margin: m,
    };
    let total = losses::total_loss(&mut tape, ddm, di, loc, &w).unwrap();
    let zero = LossWeights {
        lambda_ddm: 0.0,
        lambda_di: 0.0,
        margin: m,
    };
    let only_loc = losses::total_loss(&mut tape, ddm, di, loc, &zero).unwrap();
    let total_err = (tape.value(total).data()[0] - 0.70111).abs().max((tape.value(only_loc).data()[0] - 0.7).abs());
    let pass = bad.is_empty() && worst_scale <= LOSS_TOL && total_err <= LOSS_TOL;
    verdict(
        pass,
        format!(
            "6 hinge/cosine examples worst err {worst:.1e}, rescaling invariance {worst_scale:.1e}, \
             weighted total err {total_err:.1e} (all <= {LOSS_TOL:e}){}",
            if bad.is_empty() { String::new() } else { format!("; {}", bad.join("; ")) }
        ),
    )
}

/// Predicted-pixel sets of a 16-pixel prediction at every threshold k/255, as bitmasks.
fn threshold_sets(pred: &[f64]) -> Vec<u16> {
    (0..256)
        .map(|k| {
            let t = k as f64 / 255.0;
            pred.iter().enumerate().filter(|(_, &p)| p >= t).fold(0u16, |m, (i, _)| m | 1 << i)
        })
        .collect()
}

/// AP by brute force over all 256 thresholds: distinct recall levels, precision
/// interpolated as the best precision at any threshold reaching that recall.
fn ap_oracle(sets: &[u16], gt: u16) -> Option<f64> {
    let positives = gt.count_ones() as usize;
    if positives == 0 {
        return None;
    }
    let points: Vec<(usize, f64)> = sets
        .iter()
        .map(|&on| {
            let tp = (on & gt).count_ones() as usize;
            let fp = (on & !gt).count_ones() as usize;
            (tp, if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 })
        })
        .collect();
    let mut levels: Vec<usize> = points.iter().map(|p| p.0).collect();
    levels.sort_unstable();
    levels.dedup();
    let mut ap = 0.0;
    let mut prev = 0.0;
    for level in levels {
        let r = level as f64 / positives as f64;
        let p = points.iter().filter(|q| q.0 >= level).map(|q| q.1).fold(0.0, f64::max);
        ap += (r - prev) * p;
        prev = r;
    }
    Some(ap)
}

fn f1_iou_oracle(on: u16, gt: u16) -> (f64, f64) {
    let tp = (on & gt).count_ones() as usize;
    let fp = (on & !gt).count_ones() as usize;
    let fnc = (!on & gt).count_ones() as usize;
    if tp + fp + fnc == 0 {
        return (1.0, 1.0);
    }
    (2.0 * tp as f64 / (2 * tp + fp + fnc) as f64, tp as f64 / (tp + fp + fnc) as f64)
}

fn criterion_4() -> Verdict {
    let mut r = rng(4);
    let (mut mismatches, mut identity_err, mut evaluated): (usize, f64, usize) = (0, 0.0, 0);
    for case in 0..METRIC_CASES {
        // Mix exact threshold levels with arbitrary scores so ties with thresholds occur.
        let pred: Vec<f64> = (0..16)
            .map(|_| {
                if case % 2 == 0 {
                    r.random_range(0..=255) as f64 / 255.0
                } else {
                    r.random_range(0.0..=1.0)
                }
            })
            .collect();
        let sets = threshold_sets(&pred);
        let half = pred.iter().enumerate().filter(|(_, &p)| p >= 0.5).fold(0u16, |m, (i, _)| m | 1 << i);
        for bits in 0..=u16::MAX {
            let gt: Vec<bool> = (0..16).map(|i| bits >> i & 1 == 1).collect();
            let ap = average_precision(&pred, &gt).unwrap();
            let (f1, iou) = f1_iou(&pred, &gt, 0.5).unwrap();
            if ap != ap_oracle(&sets, bits) || (f1, iou) != f1_iou_oracle(half, bits) {
                mismatches += 1;
            }
            identity_err = identity_err.max((f1 - 2.0 * iou / (1.0 + iou)).abs());
            evaluated += 1;
        }
    }
    verdict(
        mismatches == 0 && identity_err <= 1e-12,
        format!(
            "{evaluated} (case, gt) pairs over {METRIC_CASES} random 4x4 predictions: {mismatches} mismatches with the \
             exhaustive oracle; max |F1 - 2IoU/(1+IoU)| {identity_err:.1e}"
        ),
    )
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug)]
enum Variant {
    /// Color map disabled.
    Baseline,
    /// Color map with the localization loss only.
    LocOnly,
    /// Color map with all three losses.
    Full,
}

struct Run {
    outcome: TrainOutcome,
    discrepancy: Option<DiscrepancyStats>,
    elapsed: Duration,
}

struct Toy {
    root: PathBuf,
    _tmp: Option<tempfile::TempDir>,
    data: PathBuf,
    runs: BTreeMap<(Variant, u64), Run>,
}

impl Toy {
    fn new() -> Self {
        let (root, tmp) = match std::env::var_os("ACCEPTANCE_WORKDIR") {
            Some(d) => (PathBuf::from(d), None),
            None => {
                let t = tempfile::tempdir().unwrap();
                (t.path().to_path_buf(), Some(t))
            }
        };
        let data = root.join("data");
        let cfg = TrainConfig::default();
        build_dataset(&cfg.dataset_config(), 7, &data).expect("dataset");
        Self {
            root,
            _tmp: tmp,
            data,
            runs: BTreeMap::new(),
        }
    }

    fn config(&self, variant: Variant, seed: u64) -> TrainConfig {
        let mut c = TrainConfig {
            seed,
            data_seed: 7,
            data_dir: self.data.clone(),
            ..Default::default()
        };
        match variant {
            Variant::Baseline => c.color_map = false,
            Variant::LocOnly => {
                c.loss.lambda_ddm = 0.0;
                c.loss.lambda_di = 0.0;
            }
            Variant::Full => {}
        }
        c
    }

    fn run(&mut self, variant: Variant, seed: u64) -> &Run {
        if !self.runs.contains_key(&(variant, seed)) {
            let cfg = self.config(variant, seed);
            let out = self.root.join(format!("{variant:?}_{seed}"));
            let t = Instant::now();
            let outcome = train(&cfg, &out).expect("training run");
            let discrepancy = (variant != Variant::Baseline)
                .then(|| discrepancy_stats(&cfg, &outcome.checkpoint, Split::Test).expect("discrepancy stats"));
            let elapsed = t.elapsed();
            eprintln!(
                "  {variant:?} seed {seed}: test IoU {:.4} F1 {:.4} AP {:.4}{} in {:.0}s",
                outcome.final_eval.iou,
                outcome.final_eval.f1,
                outcome.final_eval.ap,
                discrepancy.map(|d| format!(", pct_enlarged {:.1}%", d.pct_enlarged)).unwrap_or_default(),
                elapsed.as_secs_f64()
            );
            self.runs.insert(
                (variant, seed),
                Run {
                    outcome,
                    discrepancy,
                    elapsed,
                },
            );
        }
        &self.runs[&(variant, seed)]
    }

    fn iou(&mut self, variant: Variant, seed: u64) -> f64 {
        self.run(variant, seed).outcome.final_eval.iou
    }
}

fn criterion_5(toy: &mut Toy) -> Verdict {
    let base = toy.iou(Variant::Baseline, 7);
    let full = toy.iou(Variant::Full, 7);
    let run = toy.run(Variant::Full, 7);
    let pct = run.discrepancy.expect("full run has codes").pct_enlarged;
    let budget = run.elapsed + toy.run(Variant::Baseline, 7).elapsed;
    let mut wins = vec![full >= base];
    let mut detail = format!("seed 7: full IoU {full:.4} vs baseline {base:.4}");
    if full < base {
        for seed in [8, 9] {
            let (f, b) = (toy.iou(Variant::Full, seed), toy.iou(Variant::Baseline, seed));
            wins.push(f >= b);
            detail += &format!("; seed {seed}: {f:.4} vs {b:.4}");
        }
    }
    let majority = wins.iter().filter(|&&w| w).count() * 2 > wins.len();
    let pass = majority && full >= MIN_IOU && pct >= MIN_PCT_ENLARGED && budget <= TOY_BUDGET;
    verdict(
        pass,
        format!(
            "(i) {detail} -> {}; (ii) full IoU {full:.4} (>= {MIN_IOU}); (iii) pct_enlarged {pct:.1}% (>= {MIN_PCT_ENLARGED}%); \
             both seed-7 runs {:.1} min (<= {} min)",
            if majority { "improves" } else { "does not improve" },
            budget.as_secs_f64() / 60.0,
            TOY_BUDGET.as_secs() / 60
        ),
    )
}

fn criterion_6(toy: &mut Toy) -> Verdict {
    let mut wins = 0;
    let mut parts = Vec::new();
    for seed in SEEDS {
        let (full, loc) = (toy.iou(Variant::Full, seed), toy.iou(Variant::LocOnly, seed));
        wins += usize::from(full >= loc);
        parts.push(format!("seed {seed}: all-losses {full:.4} vs loc-only {loc:.4}"));
    }
    verdict(wins >= 2, format!("{}; all-losses ahead on {wins}/3 seeds (need 2)", parts.join("; ")))
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    out
}

fn criterion_7() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let mut cfg = TrainConfig {
        data_dir: root.join("data"),
        train_count: 24,
        test_count: 8,
        epochs: 1,
        ..Default::default()
    };
    cfg.seed = 3;
    let manifest = build_dataset(&cfg.dataset_config(), cfg.data_seed, &cfg.data_dir).unwrap();
    let a = train(&cfg, &root.join("a")).unwrap();
    let b = train(&cfg, &root.join("b")).unwrap();
    let same_log = fs::read(&a.log).unwrap() == fs::read(&b.log).unwrap();
    let same_ck = snapshot(&a.checkpoint) == snapshot(&b.checkpoint);

    let ck = Checkpoint::load(&a.checkpoint).unwrap();
    ck.save(&root.join("resaved")).unwrap();
    let ck_roundtrip = snapshot(&a.checkpoint) == snapshot(&root.join("resaved"));

    let mut netpbm_exact = true;
    for e in &manifest.entries {
        for rel in [&e.image, &e.mask] {
            let path = SampleManifest::read(&cfg.data_dir).unwrap().root.join(rel);
            let bytes = fs::read(&path).unwrap();
            netpbm_exact &= Raster::decode(&bytes, &path).unwrap().encode() == bytes;
        }
    }
    let mut r = rng(7);
    for channels in [1, 3] {
        let (w, h) = (r.random_range(1..40), r.random_range(1..40));
        let data: Vec<u8> = (0..w * h * channels).map(|_| r.random()).collect();
        let raster = Raster::new(w, h, channels, data).unwrap();
        let bytes = raster.encode();
        netpbm_exact &= Raster::decode(&bytes, Path::new("memory")).unwrap() == raster && Raster::decode(&bytes, Path::new("memory")).unwrap().encode() == bytes;
    }
    verdict(
        same_log && same_ck && ck_roundtrip && netpbm_exact,
        format!(
            "repeat run: identical log {same_log}, identical checkpoint {same_ck}; checkpoint save/load/save {ck_roundtrip}; \
             PPM/PGM round-trip {netpbm_exact}"
        ),
    )
}

fn main() -> ExitCode {
    // Accept and ignore libtest flags passed by `cargo test`.
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |id: u32| only.as_ref().is_none_or(|o| o.contains(&id));
    let names = [
        "gradient suite",
        "algebraic identities",
        "loss arithmetic",
        "metric oracle equivalence",
        "toy end-to-end",
        "ablation lattice",
        "determinism and formats",
    ];
    let mut toy: Option<Toy> = None;
    let mut failed = 0;
    for id in 1..=7u32 {
        if !wanted(id) {
            continue;
        }
        let v = match id {
            1 => criterion_1(),
            2 => criterion_2(),
            3 => criterion_3(),
            4 => criterion_4(),
            5 => criterion_5(toy.get_or_insert_with(Toy::new)),
            6 => criterion_6(toy.get_or_insert_with(Toy::new)),
            _ => criterion_7(),
        };
        failed += usize::from(!v.pass);
        println!(
            "criterion {id} [{}] {}: {}",
            if v.pass { "PASS" } else { "FAIL" },
            names[id as usize - 1],
            v.detail
        );
    }
    // Verdicts are reported, not asserted: a criterion the method does not reach at
    // this scale should show up as FAIL without breaking the rest of the test run.
    // ACCEPTANCE_STRICT=1 turns any FAIL into a failing exit status.
    let strict = std::env::var_os("ACCEPTANCE_STRICT").is_some_and(|v| v != "0");
    if failed > 0 {
        println!("acceptance: {failed} criteria FAILED");
        if strict {
            return ExitCode::FAILURE;
        }
    } else {
        println!("acceptance: all criteria passed");
    }
    ExitCode::SUCCESS
}
