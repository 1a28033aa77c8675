//! Procedural composites: smooth random base textures with one or more regions whose
//! colors are perturbed by a per-channel gain, bias and a shared gamma.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
    Polygon,
}

pub const ALL_SHAPES: [ShapeKind; 3] = [ShapeKind::Rectangle, ShapeKind::Ellipse, ShapeKind::Polygon];

#[derive(Clone, Debug, PartialEq)]
pub struct RegionSpec {
    pub shapes: Vec<ShapeKind>,
    pub min_count: usize,
    pub max_count: usize,
    /// Per-region area as a fraction of the frame.
    pub min_area: f64,
    /// Bound on the total area of all regions.
    pub max_area: f64,
}

impl Default for RegionSpec {
    fn default() -> Self {
        Self {
            shapes: ALL_SHAPES.to_vec(),
            min_count: 1,
            max_count: 1,
            min_area: 0.02,
            max_area: 0.5,
        }
    }
}

impl RegionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.shapes.is_empty() {
            return Err(Error::Config("region spec needs at least one shape kind".into()));
        }
        if self.min_count == 0 || self.min_count > self.max_count || self.max_count > 9 {
            return Err(Error::Config(format!(
                "region count range {}..={} must lie within 1..=9",
                self.min_count, self.max_count
            )));
        }
        if !(self.min_area > 0.0 && self.max_area <= 0.5 && self.min_area * self.max_count as f64 <= self.max_area) {
            return Err(Error::Config(format!(
                "area range [{}, {}] infeasible for up to {} regions",
                self.min_area, self.max_area, self.max_count
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct JitterSpec {
    pub gain: (f64, f64),
    pub bias: (f64, f64),
    pub gamma: (f64, f64),
    /// Minimum mean absolute change inside the region, on the 8-bit output.
    pub min_shift: f64,
    pub max_attempts: usize,
}

impl Default for JitterSpec {
    fn default() -> Self {
        Self {
            gain: (0.6, 1.4),
            bias: (-0.2, 0.2),
            gamma: (0.7, 1.4),
            min_shift: 0.03,
            max_attempts: 1000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JitterSample {
    pub gain: [f64; 3],
    pub bias: [f64; 3],
    pub gamma: f64,
}

impl JitterSample {
    pub const IDENTITY: JitterSample = JitterSample {
        gain: [1.0; 3],
        bias: [0.0; 3],
        gamma: 1.0,
    };

    fn apply(&self, c: usize, v: f64) -> f64 {
        (self.gain[c] * v.powf(self.gamma) + self.bias[c]).clamp(0.0, 1.0)
    }
}

#[derive(Clone, Debug)]
pub struct Composite {
    /// `[3, H, W]` on the 8-bit grid.
    pub image: Tensor<f32>,
    /// `[1, H, W]` binary.
    pub mask: Tensor<f32>,
    pub jitter: JitterSample,
    /// Mean absolute change inside the mask.
    pub shift: f64,
    pub regions: Vec<ShapeKind>,
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn dequantize(q: u8) -> f32 {
    q as f32 / 255.0
}

/// Smooth four-corner color gradient plus a few soft color blobs, quantized to 8 bits.
pub fn base_texture(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let corners: Vec<[f64; 3]> = (0..4)
        .map(|_| [0; 3].map(|_| rng.random_range(0.1..0.9)))
        .collect();
    let blobs: Vec<(f64, f64, f64, [f64; 3])> = (0..rng.random_range(2..=5))
        .map(|_| {
            let size = h.max(w) as f64;
            (
                rng.random_range(0.0..w as f64),
                rng.random_range(0.0..h as f64),
                rng.random_range(0.08..0.25) * size,
                [0; 3].map(|_| rng.random_range(-0.3..0.3)),
            )
        })
        .collect();
    let mut data = vec![0.0f32; 3 * h * w];
    for y in 0..h {
        let v = (y as f64 + 0.5) / h as f64;
        for x in 0..w {
            let u = (x as f64 + 0.5) / w as f64;
            for c in 0..3 {
                let top = corners[0][c] * (1.0 - u) + corners[1][c] * u;
                let bottom = corners[2][c] * (1.0 - u) + corners[3][c] * u;
                let mut val = top * (1.0 - v) + bottom * v;
                for &(bx, by, sigma, color) in &blobs {
                    let d2 = (x as f64 + 0.5 - bx).powi(2) + (y as f64 + 0.5 - by).powi(2);
                    val += color[c] * (-d2 / (2.0 * sigma * sigma)).exp();
                }
                data[(c * h + y) * w + x] = dequantize(quantize(val));
            }
        }
    }
    Tensor::from_vec(&[3, h, w], data).expect("texture shape")
}

/// Pixel-centre rasterization of one shape with the given area (in pixels) at a random
/// position fully inside the frame. `None` when the shape cannot fit.
fn rasterize(kind: ShapeKind, area: f64, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Option<Vec<bool>> {
    let (hf, wf) = (h as f64, w as f64);
    let inside: Box<dyn Fn(f64, f64) -> bool> = match kind {
        ShapeKind::Rectangle | ShapeKind::Ellipse => {
            let aspect = rng.random_range(0.5f64..2.0);
            let (half_w, half_h) = if kind == ShapeKind::Rectangle {
                let rw = (area * aspect).sqrt();
                (rw / 2.0, area / rw / 2.0)
            } else {
                let a = (area * aspect / std::f64::consts::PI).sqrt();
                (a, area / (std::f64::consts::PI * a))
            };
            if 2.0 * half_w > wf || 2.0 * half_h > hf {
                return None;
            }
            let cx = rng.random_range(half_w..=wf - half_w);
            let cy = rng.random_range(half_h..=hf - half_h);
            if kind == ShapeKind::Rectangle {
                Box::new(move |x, y| (x - cx).abs() <= half_w && (y - cy).abs() <= half_h)
            } else {
                Box::new(move |x, y| ((x - cx) / half_w).powi(2) + ((y - cy) / half_h).powi(2) <= 1.0)
            }
        }
        ShapeKind::Polygon => {
            let n = rng.random_range(5..=8);
            let mut angles: Vec<f64> = (0..n)
                .map(|i| (i as f64 + rng.random_range(-0.3..0.3)) * std::f64::consts::TAU / n as f64)
                .collect();
            angles.sort_by(f64::total_cmp);
            let radii: Vec<f64> = (0..n).map(|_| rng.random_range(0.6..1.0)).collect();
            let unit: Vec<(f64, f64)> = angles.iter().zip(&radii).map(|(a, r)| (r * a.cos(), r * a.sin())).collect();
            let unit_area = 0.5
                * (0..n)
                    .map(|i| {
                        let (a, b) = (unit[i], unit[(i + 1) % n]);
                        a.0 * b.1 - b.0 * a.1
                    })
                    .sum::<f64>()
                    .abs();
            let scale = (area / unit_area).sqrt();
            let pts: Vec<(f64, f64)> = unit.iter().map(|&(x, y)| (x * scale, y * scale)).collect();
            let (minx, maxx) = pts.iter().fold((f64::MAX, f64::MIN), |(lo, hi), p| (lo.min(p.0), hi.max(p.0)));
            let (miny, maxy) = pts.iter().fold((f64::MAX, f64::MIN), |(lo, hi), p| (lo.min(p.1), hi.max(p.1)));
            if maxx - minx > wf || maxy - miny > hf {
                return None;
            }
            let cx = rng.random_range(-minx..=wf - maxx);
            let cy = rng.random_range(-miny..=hf - maxy);
            let pts: Vec<(f64, f64)> = pts.iter().map(|&(x, y)| (x + cx, y + cy)).collect();
            Box::new(move |x, y| {
                let mut odd = false;
                for i in 0..pts.len() {
                    let (a, b) = (pts[i], pts[(i + 1) % pts.len()]);
                    if (a.1 > y) != (b.1 > y) && x < a.0 + (y - a.1) * (b.0 - a.0) / (b.1 - a.1) {
                        odd = !odd;
                    }
                }
                odd
            })
        }
    };
    let mut out = vec![false; h * w];
    let mut any = false;
    for y in 0..h {
        for x in 0..w {
            if inside(x as f64 + 0.5, y as f64 + 0.5) {
                out[y * w + x] = true;
                any = true;
            }
        }
    }
    any.then_some(out)
}

/// Whether `shape` overlaps or touches (8-neighbourhood) any pixel of `taken`.
fn collides(shape: &[bool], taken: &[bool], h: usize, w: usize) -> bool {
    for y in 0..h {
        for x in 0..w {
            if !shape[y * w + x] {
                continue;
            }
            for yy in y.saturating_sub(1)..(y + 2).min(h) {
                for xx in x.saturating_sub(1)..(x + 2).min(w) {
                    if taken[yy * w + xx] {
                        return true;
                    }
                }
            }
        }
    }
    false
}

pub const PLACEMENT_ATTEMPTS: usize = 100;

/// Samples disjoint regions; the union covers at most `spec.max_area` of the frame.
pub fn sample_regions(spec: &RegionSpec, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Result<(Vec<bool>, Vec<ShapeKind>)> {
    spec.validate()?;
    let count = rng.random_range(spec.min_count..=spec.max_count);
    let frame = (h * w) as f64;
    let mut taken = vec![false; h * w];
    let mut kinds = Vec::with_capacity(count);
    for _ in 0..count {
        let kind = spec.shapes[rng.random_range(0..spec.shapes.len())];
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let frac = rng.random_range(spec.min_area..=spec.max_area / count as f64);
            let Some(shape) = rasterize(kind, frac * frame, h, w, rng) else {
                continue;
            };
            let area = shape.iter().filter(|&&v| v).count() + taken.iter().filter(|&&v| v).count();
            if area as f64 > spec.max_area * frame || collides(&shape, &taken, h, w) {
                continue;
            }
            taken.iter_mut().zip(&shape).for_each(|(t, &s)| *t |= s);
            kinds.push(kind);
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Data(format!(
                "could not place {count} disjoint regions in a {h}x{w} frame within {PLACEMENT_ATTEMPTS} attempts"
            )));
        }
    }
    Ok((taken, kinds))
}

pub fn sample_jitter(spec: &JitterSpec, rng: &mut ChaCha8Rng) -> JitterSample {
    JitterSample {
        gain: [0; 3].map(|_| rng.random_range(spec.gain.0..=spec.gain.1)),
        bias: [0; 3].map(|_| rng.random_range(spec.bias.0..=spec.bias.1)),
        gamma: rng.random_range(spec.gamma.0..=spec.gamma.1),
    }
}

/// Applies `jitter` inside `mask` and returns the 8-bit image and its mean absolute
/// change inside the mask.
pub fn apply_jitter(base: &Tensor<f32>, mask: &[bool], jitter: &JitterSample) -> (Tensor<f32>, f64) {
    let hw = mask.len();
    let mut out = base.map(|v| dequantize(quantize(v as f64)));
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..3 {
        for (p, &m) in mask.iter().enumerate() {
            if m {
                let i = c * hw + p;
                let before = out.data()[i];
                let after = dequantize(quantize(jitter.apply(c, before as f64)));
                out.data_mut()[i] = after;
                total += (after as f64 - before as f64).abs();
                count += 1;
            }
        }
    }
    (out, if count == 0 { 0.0 } else { total / count as f64 })
}

/// Draws regions and a jitter whose effect reaches `jitter.min_shift`.
pub fn generate_composite(base: &Tensor<f32>, region: &RegionSpec, jitter: &JitterSpec, seed: u64) -> Result<Composite> {
    let (c, h, w) = match base.shape() {
        &[c, h, w] => (c, h, w),
        s => return Err(Error::shape(format!("base image must be [3, H, W], got {s:?}"))),
    };
    if c != 3 {
        return Err(Error::shape(format!("base image must have 3 channels, got {c}")));
    }
    if base.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::invalid("base image values must lie in [0, 1]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mask, regions) = sample_regions(region, h, w, &mut rng)?;
    for _ in 0..jitter.max_attempts {
        let sample = sample_jitter(jitter, &mut rng);
        let (image, shift) = apply_jitter(base, &mask, &sample);
        if shift >= jitter.min_shift {
            let mask = Tensor::from_vec(&[1, h, w], mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect())?;
            return Ok(Composite {
                image,
                mask,
                jitter: sample,
                shift,
                regions,
            });
        }
    }
    Err(Error::Data(format!(
        "no jitter reached the minimum shift {} within {} draws",
        jitter.min_shift, jitter.max_attempts
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base(seed: u64) -> Tensor<f32> {
        base_texture(64, 64, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn identity_jitter_never_passes_the_shift_guard() {
        let b = base(1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (mask, _) = sample_regions(&RegionSpec::default(), 64, 64, &mut rng).unwrap();
        let (img, shift) = apply_jitter(&b, &mask, &JitterSample::IDENTITY);
        assert_eq!(shift, 0.0);
        assert_eq!(img, b);
        let spec = JitterSpec {
            gain: (1.0, 1.0),
            bias: (0.0, 0.0),
            gamma: (1.0, 1.0),
            max_attempts: 20,
            ..Default::default()
        };
        assert!(generate_composite(&b, &RegionSpec::default(), &spec, 3).is_err());
    }

    #[test]
    fn composite_contract() {
        let multi = RegionSpec {
            min_count: 1,
            max_count: 9,
            ..Default::default()
        };
        for seed in 0..40 {
            let b = base(seed);
            let spec = if seed % 2 == 0 { RegionSpec::default() } else { multi.clone() };
            let comp = generate_composite(&b, &spec, &JitterSpec::default(), seed).unwrap();
            let area = comp.mask.data().iter().filter(|&&v| v == 1.0).count();
            assert!(area > 0 && area as f64 <= 0.5 * 4096.0);
            assert!(comp.shift >= 0.03);
            for c in 0..3 {
                for p in 0..4096 {
                    if comp.mask.data()[p] == 0.0 {
                        assert_eq!(comp.image.data()[c * 4096 + p], b.data()[c * 4096 + p]);
                    }
                }
            }
        }
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let b = base(7);
        let a = generate_composite(&b, &RegionSpec::default(), &JitterSpec::default(), 7).unwrap();
        let c = generate_composite(&b, &RegionSpec::default(), &JitterSpec::default(), 7).unwrap();
        assert_eq!(a.image, c.image);
        assert_eq!(a.mask, c.mask);
    }

    #[test]
    fn impossible_placement_errors() {
        let spec = RegionSpec {
            min_count: 9,
            max_count: 9,
            min_area: 0.05,
            max_area: 0.5,
            shapes: vec![ShapeKind::Rectangle],
        };
        let b = base_texture(4, 4, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(generate_composite(&b, &spec, &JitterSpec::default(), 0).is_err());
    }

    #[test]
    fn invalid_specs_rejected() {
        let bad = RegionSpec {
            max_count: 10,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = RegionSpec {
            max_area: 0.6,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!(generate_composite(&Tensor::full(&[3, 8, 8], 2.0), &RegionSpec::default(), &JitterSpec::default(), 0).is_err());
    }
}
