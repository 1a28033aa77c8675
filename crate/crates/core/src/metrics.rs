//! Pixel-level localization metrics: average precision over 256 thresholds, F1 and IoU
//! of the binarized prediction, and dataset aggregation.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Number of AP thresholds, `t_k = k / 255`.
pub const AP_THRESHOLDS: usize = 256;

/// Index of the largest threshold `k / 255` not exceeding `p` (`None` for `p < 0`).
fn threshold_index(p: f64) -> Option<usize> {
    if p.is_nan() || p < 0.0 {
        return None;
    }
    let mut k = ((p * 255.0).floor() as usize).min(AP_THRESHOLDS - 1);
    while k + 1 < AP_THRESHOLDS && (k + 1) as f64 / 255.0 <= p {
        k += 1;
    }
    while k > 0 && k as f64 / 255.0 > p {
        k -= 1;
    }
    Some(k)
}

/// `(recall, precision)` at every threshold, thresholds ascending.
pub fn pr_curve(pred: &[f64], gt: &[bool]) -> Result<Vec<(f64, f64)>> {
    if pred.len() != gt.len() {
        return Err(Error::shape(format!("prediction has {} pixels, mask {}", pred.len(), gt.len())));
    }
    // pos[k] / neg[k]: positives / negatives whose score passes exactly thresholds 0..=k.
    let mut pos = [0usize; AP_THRESHOLDS];
    let mut neg = [0usize; AP_THRESHOLDS];
    for (&p, &g) in pred.iter().zip(gt) {
        if let Some(k) = threshold_index(p) {
            if g {
                pos[k] += 1;
            } else {
                neg[k] += 1;
            }
        }
    }
    let total_pos = gt.iter().filter(|&&g| g).count();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut curve = vec![(0.0, 0.0); AP_THRESHOLDS];
    for k in (0..AP_THRESHOLDS).rev() {
        tp += pos[k];
        fp += neg[k];
        let recall = if total_pos == 0 { 0.0 } else { tp as f64 / total_pos as f64 };
        let precision = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
        curve[k] = (recall, precision);
    }
    Ok(curve)
}

/// Interpolated AP: `sum (R_k - R_{k-1}) P_k` over distinct recall levels, with
/// precision rectified to be non-increasing in recall. `None` when `gt` is empty.
pub fn average_precision(pred: &[f64], gt: &[bool]) -> Result<Option<f64>> {
    if !gt.iter().any(|&g| g) {
        if pred.len() != gt.len() {
            return Err(Error::shape("prediction and mask sizes differ"));
        }
        return Ok(None);
    }
    let curve = pr_curve(pred, gt)?;
    Ok(Some(ap_from_curve(curve)))
}

fn ap_from_curve(mut curve: Vec<(f64, f64)>) -> f64 {
    curve.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut best = 0.0f64;
    // Walk from high recall to low, carrying the running max precision.
    let mut rectified: Vec<(f64, f64)> = Vec::with_capacity(curve.len());
    for &(r, p) in curve.iter().rev() {
        best = best.max(p);
        match rectified.last() {
            Some(&(lr, _)) if lr == r => rectified.last_mut().expect("non-empty").1 = best,
            _ => rectified.push((r, best)),
        }
    }
    rectified.reverse();
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (r, p) in rectified {
        ap += (r - prev) * p;
        prev = r;
    }
    ap
}

/// F1 and IoU of `pred >= threshold` against `gt`. Both are 1 when prediction and
/// mask are empty.
pub fn f1_iou(pred: &[f64], gt: &[bool], threshold: f64) -> Result<(f64, f64)> {
    if pred.len() != gt.len() {
        return Err(Error::shape("prediction and mask sizes differ"));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid(format!("threshold {threshold} outside (0, 1)")));
    }
    let (mut tp, mut fp, mut fnc) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        match (p >= threshold, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fnc += 1,
            (false, false) => {}
        }
    }
    let union = tp + fp + fnc;
    if union == 0 {
        return Ok((1.0, 1.0));
    }
    Ok((2.0 * tp as f64 / (2 * tp + fp + fnc) as f64, tp as f64 / union as f64))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImageMetrics {
    /// `None` when the mask is empty.
    pub ap: Option<f64>,
    pub f1: f64,
    pub iou: f64,
}

pub fn image_metrics(pred: &[f64], gt: &[bool], threshold: f64) -> Result<ImageMetrics> {
    let ap = average_precision(pred, gt)?;
    let (f1, iou) = f1_iou(pred, gt, threshold)?;
    Ok(ImageMetrics { ap, f1, iou })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub ap: f64,
    pub f1: f64,
    pub iou: f64,
    pub n_images: usize,
    /// Images left out of the AP mean because their mask is empty.
    pub ap_skipped: usize,
    /// AP over all pixels of the split at once, when requested.
    pub pooled_ap: Option<f64>,
    pub per_image: Vec<ImageMetrics>,
}

/// Unweighted means over images.
pub fn aggregate(per_image: &[ImageMetrics]) -> MetricsReport {
    let n = per_image.len();
    let mean = |xs: &mut dyn Iterator<Item = f64>, k: usize| if k == 0 { 0.0 } else { xs.sum::<f64>() / k as f64 };
    let aps: Vec<f64> = per_image.iter().filter_map(|m| m.ap).collect();
    MetricsReport {
        ap: mean(&mut aps.iter().copied(), aps.len()),
        f1: mean(&mut per_image.iter().map(|m| m.f1), n),
        iou: mean(&mut per_image.iter().map(|m| m.iou), n),
        n_images: n,
        ap_skipped: n - aps.len(),
        pooled_ap: None,
        per_image: per_image.to_vec(),
    }
}

/// Accumulates pixels of many images into one precision-recall curve.
#[derive(Clone, Debug)]
pub struct PooledAp {
    pos: Vec<u64>,
    neg: Vec<u64>,
}

impl Default for PooledAp {
    fn default() -> Self {
        Self {
            pos: vec![0; AP_THRESHOLDS],
            neg: vec![0; AP_THRESHOLDS],
        }
    }
}

impl PooledAp {
    pub fn add(&mut self, pred: &[f64], gt: &[bool]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::shape("prediction and mask sizes differ"));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            if let Some(k) = threshold_index(p) {
                if g {
                    self.pos[k] += 1;
                } else {
                    self.neg[k] += 1;
                }
            }
        }
        Ok(())
    }

    pub fn value(&self) -> Option<f64> {
        let total_pos: u64 = self.pos.iter().sum();
        if total_pos == 0 {
            return None;
        }
        let (mut tp, mut fp) = (0u64, 0u64);
        let mut curve = vec![(0.0, 0.0); AP_THRESHOLDS];
        for k in (0..AP_THRESHOLDS).rev() {
            tp += self.pos[k];
            fp += self.neg[k];
            let precision = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
            curve[k] = (tp as f64 / total_pos as f64, precision);
        }
        Some(ap_from_curve(curve))
    }
}

impl MetricsReport {
    /// `metric,value` lines.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        let _ = writeln!(s, "ap,{}", self.ap);
        let _ = writeln!(s, "f1,{}", self.f1);
        let _ = writeln!(s, "iou,{}", self.iou);
        let _ = writeln!(s, "n_images,{}", self.n_images);
        let _ = writeln!(s, "ap_skipped,{}", self.ap_skipped);
        if let Some(p) = self.pooled_ap {
            let _ = writeln!(s, "pooled_ap,{p}");
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<12} {:>10}", "metric", "value");
        let _ = writeln!(s, "{:-<12} {:->10}", "", "");
        let _ = writeln!(s, "{:<12} {:>10.4}", "AP", self.ap);
        let _ = writeln!(s, "{:<12} {:>10.4}", "F1", self.f1);
        let _ = writeln!(s, "{:<12} {:>10.4}", "IoU", self.iou);
        if let Some(p) = self.pooled_ap {
            let _ = writeln!(s, "{:<12} {:>10.4}", "pooled AP", p);
        }
        let _ = writeln!(s, "{:<12} {:>10}", "images", self.n_images);
        let _ = writeln!(s, "{:<12} {:>10}", "AP skipped", self.ap_skipped);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct evaluation at every threshold, then the rectified step integral.
    pub(crate) fn ap_oracle(pred: &[f64], gt: &[bool]) -> f64 {
        let npos = gt.iter().filter(|&&g| g).count() as f64;
        let mut pts = Vec::new();
        for k in 0..256 {
            let t = k as f64 / 255.0;
            let tp = pred.iter().zip(gt).filter(|(&p, &g)| p >= t && g).count() as f64;
            let fp = pred.iter().zip(gt).filter(|(&p, &g)| p >= t && !g).count() as f64;
            pts.push((tp / npos, if tp + fp == 0.0 { 1.0 } else { tp / (tp + fp) }));
        }
        let mut levels: Vec<f64> = pts.iter().map(|p| p.0).collect();
        levels.sort_by(f64::total_cmp);
        levels.dedup();
        let mut ap = 0.0;
        let mut prev = 0.0;
        for r in levels {
            let p = pts.iter().filter(|q| q.0 >= r).map(|q| q.1).fold(0.0, f64::max);
            ap += (r - prev) * p;
            prev = r;
        }
        ap
    }

    fn random_case(rng: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<bool>) {
        loop {
            let pred: Vec<f64> = (0..n).map(|_| rng.random_range(0..=255) as f64 / 255.0).collect();
            let gt: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
            if gt.iter().any(|&g| g) {
                return (pred, gt);
            }
        }
    }

    #[test]
    fn perfect_and_inverted_predictions() {
        let gt = [true, true, false, false, false, true, false, false, false, false, false, false, true, false, false, false];
        let pred: Vec<f64> = gt.iter().map(|&g| if g { 1.0 } else { 0.0 }).collect();
        assert_eq!(average_precision(&pred, &gt).unwrap(), Some(1.0));
        let inv: Vec<f64> = pred.iter().map(|p| 1.0 - p).collect();
        let ap = average_precision(&inv, &gt).unwrap().unwrap();
        assert!((ap - 4.0 / 16.0).abs() < 1e-12);
        assert!((ap_oracle(&inv, &gt) - ap).abs() < 1e-12);
        assert_eq!(average_precision(&pred, &[false; 16]).unwrap(), None);
    }

    #[test]
    fn ap_matches_oracle_on_random_6x6() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let (pred, gt) = random_case(&mut rng, 36);
            let ap = average_precision(&pred, &gt).unwrap().unwrap();
            assert!((ap - ap_oracle(&pred, &gt)).abs() <= 1e-9);
        }
        // Continuous scores exercise the threshold bucketing.
        for _ in 0..50 {
            let pred: Vec<f64> = (0..36).map(|_| rng.random::<f64>()).collect();
            let mut gt: Vec<bool> = (0..36).map(|_| rng.random_bool(0.3)).collect();
            gt[0] = true;
            let ap = average_precision(&pred, &gt).unwrap().unwrap();
            assert!((ap - ap_oracle(&pred, &gt)).abs() <= 1e-9);
        }
    }

    #[test]
    fn f1_iou_hand_cases() {
        let gt = [true, true, false, false];
        assert_eq!(f1_iou(&[1.0, 1.0, 0.0, 0.0], &gt, 0.5).unwrap(), (1.0, 1.0));
        let (f1, iou) = f1_iou(&[1.0, 1.0, 1.0, 1.0], &gt, 0.5).unwrap();
        assert!((f1 - 4.0 / 6.0).abs() < 1e-12 && (iou - 0.5).abs() < 1e-12);
        assert_eq!(f1_iou(&[0.0, 0.0, 1.0, 1.0], &gt, 0.5).unwrap(), (0.0, 0.0));
        assert_eq!(f1_iou(&[0.1; 4], &[false; 4], 0.5).unwrap(), (1.0, 1.0));
        assert!(f1_iou(&[0.1; 4], &gt, 1.0).is_err());
    }

    #[test]
    fn aggregate_means() {
        let one = ImageMetrics {
            ap: Some(1.0),
            f1: 1.0,
            iou: 1.0,
        };
        let zero = ImageMetrics {
            ap: Some(0.0),
            f1: 0.0,
            iou: 0.0,
        };
        let r = aggregate(&[one]);
        assert_eq!((r.ap, r.f1, r.iou, r.n_images), (1.0, 1.0, 1.0, 1));
        let r = aggregate(&[one, zero]);
        assert_eq!((r.ap, r.f1, r.iou), (0.5, 0.5, 0.5));
        let skipped = ImageMetrics { ap: None, ..zero };
        let r = aggregate(&[one, skipped]);
        assert_eq!((r.ap, r.ap_skipped, r.f1), (1.0, 1, 0.5));
        assert!(r.to_csv().starts_with("metric,value\nap,1\n"));
    }

    #[test]
    fn aggregate_matches_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        let per: Vec<ImageMetrics> = (0..100)
            .map(|_| {
                let (pred, gt) = random_case(&mut rng, 64);
                image_metrics(&pred, &gt, 0.5).unwrap()
            })
            .collect();
        let r = aggregate(&per);
        let ap: f64 = per.iter().map(|m| m.ap.unwrap()).sum::<f64>() / 100.0;
        let iou: f64 = per.iter().map(|m| m.iou).sum::<f64>() / 100.0;
        assert!((r.ap - ap).abs() < 1e-12 && (r.iou - iou).abs() < 1e-12);
    }

    #[test]
    fn pooled_ap_of_single_image_equals_per_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (pred, gt) = random_case(&mut rng, 49);
        let mut pooled = PooledAp::default();
        pooled.add(&pred, &gt).unwrap();
        assert_eq!(pooled.value(), average_precision(&pred, &gt).unwrap());
    }

    #[test]
    fn threshold_index_is_exact() {
        for k in 0..256 {
            let t = k as f64 / 255.0;
            assert_eq!(threshold_index(t), Some(k));
        }
        assert_eq!(threshold_index(-0.1), None);
        assert_eq!(threshold_index(7.0), Some(255));
    }

    proptest! {
        #[test]
        fn ap_invariant_to_increasing_maps(seed in 0u64..1000, map_seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (pred, gt) = random_case(&mut rng, 25);
            // A random strictly increasing map of the 8-bit levels onto themselves.
            let mut levels: Vec<usize> = pred.iter().map(|&p| (p * 255.0).round() as usize).collect();
            levels.sort_unstable();
            levels.dedup();
            let mut mrng = ChaCha8Rng::seed_from_u64(map_seed);
            let mut targets: Vec<usize> = rand::seq::index::sample(&mut mrng, 256, levels.len()).into_vec();
            targets.sort_unstable();
            let mapped: Vec<f64> = pred
                .iter()
                .map(|&p| {
                    let i = levels.binary_search(&((p * 255.0).round() as usize)).unwrap();
                    targets[i] as f64 / 255.0
                })
                .collect();
            let ap = average_precision(&pred, &gt).unwrap().unwrap();
            let ap_mapped = average_precision(&mapped, &gt).unwrap().unwrap();
            prop_assert!((ap - ap_mapped).abs() < 1e-12);
        }

        #[test]
        fn iou_f1_relation(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (pred, gt) = random_case(&mut rng, 16);
            let (f1, iou) = f1_iou(&pred, &gt, 0.5).unwrap();
            prop_assert!(0.0 <= iou && iou <= f1 && f1 <= 1.0);
            prop_assert!((f1 - 2.0 * iou / (1.0 + iou)).abs() < 1e-12);
        }
    }
}
