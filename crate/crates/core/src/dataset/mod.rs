//! Synthetic inharmonious composites, the on-disk layout and the pair loader.

pub mod netpbm;
pub mod synth;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::diffcore::bilinear_resize;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
pub use netpbm::Raster;
pub use synth::{generate_composite, Composite, JitterSample, JitterSpec, RegionSpec, ShapeKind};

pub const MANIFEST_FILE: &str = "manifest.tsv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Data(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub train: usize,
    pub test: usize,
    pub size: usize,
    pub region: RegionSpec,
    pub jitter: JitterSpec,
    /// Optional directory of PPM files used as base images instead of procedural textures.
    pub base_dir: Option<PathBuf>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            train: 512,
            test: 128,
            size: 64,
            region: RegionSpec::default(),
            jitter: JitterSpec::default(),
            base_dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub split: Split,
    /// Relative to the manifest's directory.
    pub image: PathBuf,
    pub mask: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl SampleManifest {
    pub fn count(&self, split: Split) -> usize {
        self.entries.iter().filter(|e| e.split == split).count()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            let _ = writeln!(s, "{}\t{}\t{}", e.split.as_str(), e.image.display(), e.mask.display());
        }
        s
    }

    pub fn read(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() != 3 {
                return Err(Error::Format {
                    path: path.clone(),
                    reason: format!("line {}: expected split<TAB>image<TAB>mask", i + 1),
                });
            }
            entries.push(ManifestEntry {
                split: Split::parse(parts[0])?,
                image: parts[1].into(),
                mask: parts[2].into(),
            });
        }
        Ok(Self {
            root: root.to_path_buf(),
            entries,
        })
    }
}

/// Independent stream seed for sample `index` of `split`.
pub fn sample_seed(seed: u64, split: Split, index: usize) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    let salt = match split {
        Split::Train => 0x7472_6169_6e00_0000,
        Split::Test => 0x7465_7374_0000_0000,
    };
    mix(mix(seed) ^ mix(salt ^ index as u64))
}

pub fn raster_to_tensor(r: &Raster) -> Tensor<f32> {
    let (h, w, c) = (r.height, r.width, r.channels);
    let mut data = vec![0.0; c * h * w];
    for p in 0..h * w {
        for ch in 0..c {
            data[ch * h * w + p] = synth::dequantize(r.data[p * c + ch]);
        }
    }
    Tensor::from_vec(&[c, h, w], data).expect("raster shape")
}

/// `[C, H, W]` with values in `[0, 1]` to an 8-bit raster.
pub fn tensor_to_raster(t: &Tensor<f32>) -> Result<Raster> {
    let (c, h, w) = match t.shape() {
        &[c, h, w] => (c, h, w),
        s => return Err(Error::shape(format!("expected [C, H, W], got {s:?}"))),
    };
    let mut data = vec![0u8; c * h * w];
    for p in 0..h * w {
        for ch in 0..c {
            data[p * c + ch] = synth::quantize(t.data()[ch * h * w + p] as f64);
        }
    }
    Raster::new(w, h, c, data)
}

/// Binary mask tensor `[1, H, W]` to a `{0, 255}` PGM raster.
pub fn mask_to_raster(mask: &Tensor<f32>) -> Result<Raster> {
    tensor_to_raster(&mask.map(|v| if v >= 0.5 { 1.0 } else { 0.0 }))
}

fn load_bases(dir: &Path, size: usize) -> Result<Vec<Tensor<f32>>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Data(format!("no .ppm base images in {}", dir.display())));
    }
    paths
        .iter()
        .map(|p| {
            let t = raster_to_tensor(&Raster::read(p)?);
            let (h, w) = (t.dim(1), t.dim(2));
            let t = t.reshape(&[1, 3, h, w])?;
            let r = bilinear_resize(&t, size, size)?;
            let q = r.map(|v| synth::dequantize(synth::quantize(v as f64)));
            q.reshape(&[3, size, size])
        })
        .collect()
}

/// Generates both splits under `out_dir` and writes the manifest. A pure function of
/// `(config, seed)`.
pub fn build_dataset(config: &DatasetConfig, seed: u64, out_dir: &Path) -> Result<SampleManifest> {
    config.region.validate()?;
    if config.size == 0 {
        return Err(Error::Config("image size must be positive".into()));
    }
    let bases = match &config.base_dir {
        Some(d) => Some(load_bases(d, config.size)?),
        None => None,
    };
    let mut jobs = Vec::new();
    for (split, n) in [(Split::Train, config.train), (Split::Test, config.test)] {
        fs::create_dir_all(out_dir.join(split.as_str())).map_err(|e| Error::io(out_dir, e))?;
        jobs.extend((0..n).map(|i| (split, i)));
    }
    let entries = jobs
        .par_iter()
        .map(|&(split, i)| {
            let s = sample_seed(seed, split, i);
            let base = match &bases {
                Some(b) => b[i % b.len()].clone(),
                None => synth::base_texture(config.size, config.size, &mut ChaCha8Rng::seed_from_u64(s ^ 0xBA5E)),
            };
            let comp = generate_composite(&base, &config.region, &config.jitter, s)?;
            let entry = ManifestEntry {
                split,
                image: PathBuf::from(format!("{}/{i:05}.ppm", split.as_str())),
                mask: PathBuf::from(format!("{}/{i:05}_mask.pgm", split.as_str())),
            };
            tensor_to_raster(&comp.image)?.write(&out_dir.join(&entry.image))?;
            mask_to_raster(&comp.mask)?.write(&out_dir.join(&entry.mask))?;
            Ok(entry)
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = SampleManifest {
        root: out_dir.to_path_buf(),
        entries,
    };
    let path = out_dir.join(MANIFEST_FILE);
    fs::write(&path, manifest.to_text()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

#[derive(Clone, Debug)]
pub struct LoadedPair {
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor<f32>,
    /// `[1, H, W]` binary.
    pub mask: Tensor<f32>,
    pub area_fraction: f64,
}

/// Largest admissible foreground fraction.
pub const MAX_AREA_FRACTION: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairVerdict {
    Keep,
    TooLarge,
    Empty,
}

impl LoadedPair {
    pub fn verdict(&self) -> PairVerdict {
        if self.area_fraction > MAX_AREA_FRACTION {
            PairVerdict::TooLarge
        } else if self.area_fraction == 0.0 {
            PairVerdict::Empty
        } else {
            PairVerdict::Keep
        }
    }
}

/// Decodes an RGB image and its mask (binarized at 128).
pub fn load_pair(image_path: &Path, mask_path: &Path) -> Result<LoadedPair> {
    let img = Raster::read(image_path)?;
    let mask = Raster::read(mask_path)?;
    if img.channels != 3 {
        return Err(Error::Format {
            path: image_path.to_path_buf(),
            reason: "expected an RGB (P6) image".into(),
        });
    }
    if mask.channels != 1 {
        return Err(Error::Format {
            path: mask_path.to_path_buf(),
            reason: "expected a grayscale (P5) mask".into(),
        });
    }
    if (img.width, img.height) != (mask.width, mask.height) {
        return Err(Error::Data(format!(
            "{} is {}x{} but its mask is {}x{}",
            image_path.display(),
            img.width,
            img.height,
            mask.width,
            mask.height
        )));
    }
    let bin: Vec<f32> = mask.data.iter().map(|&v| if v >= 128 { 1.0 } else { 0.0 }).collect();
    let area = bin.iter().filter(|&&v| v == 1.0).count() as f64 / bin.len() as f64;
    Ok(LoadedPair {
        image: raster_to_tensor(&img),
        mask: Tensor::from_vec(&[1, mask.height, mask.width], bin)?,
        area_fraction: area,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LoadStats {
    pub loaded: usize,
    pub skipped_large: usize,
    pub skipped_empty: usize,
    /// Empty-mask pairs that were kept because the caller allowed them.
    pub empty_kept: usize,
}

/// Loads one split, dropping pairs above the area limit and (unless allowed) pairs
/// with an empty mask.
pub fn load_split(manifest: &SampleManifest, split: Split, allow_empty: bool) -> Result<(Vec<LoadedPair>, LoadStats)> {
    let mut stats = LoadStats::default();
    let mut out = Vec::new();
    for e in manifest.entries.iter().filter(|e| e.split == split) {
        let pair = load_pair(&manifest.root.join(&e.image), &manifest.root.join(&e.mask))?;
        match pair.verdict() {
            PairVerdict::TooLarge => {
                log::warn!(
                    "skipping {}: foreground covers {:.1}% of the frame",
                    e.image.display(),
                    100.0 * pair.area_fraction
                );
                stats.skipped_large += 1;
            }
            PairVerdict::Empty if !allow_empty => {
                log::warn!("skipping {}: empty mask", e.image.display());
                stats.skipped_empty += 1;
            }
            v => {
                if v == PairVerdict::Empty {
                    log::warn!("{}: empty mask kept as a negative sample", e.image.display());
                    stats.empty_kept += 1;
                }
                stats.loaded += 1;
                out.push(pair);
            }
        }
    }
    Ok((out, stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> DatasetConfig {
        DatasetConfig {
            train: 6,
            test: 3,
            size: 32,
            ..Default::default()
        }
    }

    #[test]
    fn build_and_reload() {
        let dir = tempfile::tempdir().unwrap();
        let m = build_dataset(&small_config(), 7, dir.path()).unwrap();
        assert_eq!((m.count(Split::Train), m.count(Split::Test)), (6, 3));
        let back = SampleManifest::read(dir.path()).unwrap();
        assert_eq!(back, m);
        let (pairs, stats) = load_split(&back, Split::Train, false).unwrap();
        assert_eq!((pairs.len(), stats.loaded), (6, 6));
        for p in &pairs {
            assert!(p.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
            assert!(p.area_fraction > 0.0 && p.area_fraction <= 0.5);
        }
    }

    #[test]
    fn generation_is_pure_in_seed() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        build_dataset(&small_config(), 3, a.path()).unwrap();
        build_dataset(&small_config(), 3, b.path()).unwrap();
        for name in ["manifest.tsv", "train/00004.ppm", "test/00002_mask.pgm"] {
            assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap());
        }
    }

    #[test]
    fn composite_roundtrips_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let base = synth::base_texture(16, 16, &mut ChaCha8Rng::seed_from_u64(1));
        let comp = generate_composite(&base, &RegionSpec::default(), &JitterSpec::default(), 1).unwrap();
        let (ip, mp) = (dir.path().join("i.ppm"), dir.path().join("m.pgm"));
        tensor_to_raster(&comp.image).unwrap().write(&ip).unwrap();
        mask_to_raster(&comp.mask).unwrap().write(&mp).unwrap();
        let pair = load_pair(&ip, &mp).unwrap();
        assert_eq!(pair.image, comp.image);
        assert_eq!(pair.mask, comp.mask);
    }

    #[test]
    fn large_and_empty_masks_are_filtered() {
        let dir = tempfile::tempdir().unwrap();
        let img = Raster::new(10, 10, 3, vec![100; 300]).unwrap();
        let big: Vec<u8> = (0..100).map(|i| if i < 60 { 255 } else { 0 }).collect();
        let mut entries = Vec::new();
        for (i, m) in [big, vec![0; 100], vec![200; 30].into_iter().chain(vec![10; 70]).collect()].into_iter().enumerate() {
            img.write(&dir.path().join(format!("{i}.ppm"))).unwrap();
            Raster::new(10, 10, 1, m).unwrap().write(&dir.path().join(format!("{i}.pgm"))).unwrap();
            entries.push(ManifestEntry {
                split: Split::Test,
                image: format!("{i}.ppm").into(),
                mask: format!("{i}.pgm").into(),
            });
        }
        let m = SampleManifest {
            root: dir.path().to_path_buf(),
            entries,
        };
        let (pairs, stats) = load_split(&m, Split::Test, false).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!((stats.skipped_large, stats.skipped_empty), (1, 1));
        assert!((pairs[0].area_fraction - 0.3).abs() < 1e-12);
        let (pairs, stats) = load_split(&m, Split::Test, true).unwrap();
        assert_eq!((pairs.len(), stats.empty_kept), (2, 1));
    }

    #[test]
    fn size_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        Raster::new(4, 4, 3, vec![0; 48]).unwrap().write(&dir.path().join("a.ppm")).unwrap();
        Raster::new(4, 2, 1, vec![0; 8]).unwrap().write(&dir.path().join("a.pgm")).unwrap();
        assert!(matches!(
            load_pair(&dir.path().join("a.ppm"), &dir.path().join("a.pgm")),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn user_base_images_are_used() {
        let dir = tempfile::tempdir().unwrap();
        let bases = dir.path().join("bases");
        fs::create_dir(&bases).unwrap();
        Raster::new(8, 8, 3, vec![128; 192]).unwrap().write(&bases.join("flat.ppm")).unwrap();
        let cfg = DatasetConfig {
            train: 2,
            test: 1,
            size: 16,
            base_dir: Some(bases),
            ..Default::default()
        };
        let out = dir.path().join("out");
        let m = build_dataset(&cfg, 1, &out).unwrap();
        let (pairs, _) = load_split(&m, Split::Train, false).unwrap();
        for p in pairs {
            for c in 0..3 {
                for i in 0..256 {
                    if p.mask.data()[i] == 0.0 {
                        assert_eq!(p.image.data()[c * 256 + i], 128.0 / 255.0);
                    }
                }
            }
        }
    }
}
