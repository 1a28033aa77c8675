use std::fs;
use std::path::Path;

use inharmony_core::dataset::synth::{base_texture, generate_composite, JitterSpec, RegionSpec};
use inharmony_core::dataset::{
    build_dataset, load_pair, load_split, mask_to_raster, sample_seed, tensor_to_raster, DatasetConfig, PairVerdict,
    Raster, SampleManifest, Split, MANIFEST_FILE,
};
use inharmony_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small(train: usize, test: usize) -> DatasetConfig {
    DatasetConfig {
        train,
        test,
        size: 32,
        ..Default::default()
    }
}

fn ks_uniform(mut xs: Vec<f64>, lo: f64, hi: f64) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = ((x - lo) / (hi - lo)).clamp(0.0, 1.0);
            ((i + 1) as f64 / n - f).max(f - i as f64 / n)
        })
        .fold(0.0, f64::max)
}

#[test]
fn default_config_writes_640_binary_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let m = build_dataset(&DatasetConfig::default(), 7, dir.path()).unwrap();
    assert_eq!(m.entries.len(), 640);
    assert_eq!((m.count(Split::Train), m.count(Split::Test)), (512, 128));
    let text = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(text.lines().filter(|l| !l.trim().is_empty()).count(), 640);

    let mut seen = std::collections::HashSet::new();
    for e in &m.entries {
        assert!(seen.insert(e.image.clone()) && seen.insert(e.mask.clone()));
        let mask = Raster::read(&dir.path().join(&e.mask)).unwrap();
        assert_eq!((mask.width, mask.height, mask.channels), (64, 64, 1));
        assert!(mask.data.iter().all(|&v| v == 0 || v == 255));
        let frac = mask.data.iter().filter(|&&v| v == 255).count() as f64 / 4096.0;
        assert!(frac > 0.0 && frac <= 0.5);
    }
}

#[test]
fn region_gains_are_uniform_per_channel() {
    let cfg = DatasetConfig::default();
    let mut gains = [vec![], vec![], vec![]];
    for i in 0..512 {
        let s = sample_seed(7, Split::Train, i);
        let base = base_texture(64, 64, &mut ChaCha8Rng::seed_from_u64(s ^ 0xBA5E));
        let c = generate_composite(&base, &cfg.region, &cfg.jitter, s).unwrap();
        for (ch, g) in gains.iter_mut().enumerate() {
            g.push(c.jitter.gain[ch]);
        }
    }
    for (ch, g) in gains.into_iter().enumerate() {
        let d = ks_uniform(g, 0.6, 1.4);
        assert!(d < 0.1, "channel {ch}: KS statistic {d}");
    }
}

#[test]
fn generation_is_a_pure_function_of_config_and_seed() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = build_dataset(&small(12, 4), 3, a.path()).unwrap();
    build_dataset(&small(12, 4), 3, b.path()).unwrap();
    build_dataset(&small(12, 4), 4, c.path()).unwrap();
    let read = |root: &Path, p: &Path| fs::read(root.join(p)).unwrap();
    let mut differs = false;
    for e in &ma.entries {
        assert_eq!(read(a.path(), &e.image), read(b.path(), &e.image));
        assert_eq!(read(a.path(), &e.mask), read(b.path(), &e.mask));
        differs |= read(a.path(), &e.image) != read(c.path(), &e.image);
    }
    assert!(differs, "a different seed should change the images");
}

#[test]
fn composite_round_trips_through_disk_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let base = base_texture(32, 32, &mut ChaCha8Rng::seed_from_u64(1));
    let c = generate_composite(&base, &RegionSpec::default(), &JitterSpec::default(), 11).unwrap();
    let (img, mask) = (dir.path().join("a.ppm"), dir.path().join("a.pgm"));
    tensor_to_raster(&c.image).unwrap().write(&img).unwrap();
    mask_to_raster(&c.mask).unwrap().write(&mask).unwrap();
    let pair = load_pair(&img, &mask).unwrap();
    assert_eq!(pair.image.data(), c.image.data());
    assert_eq!(pair.mask.data(), c.mask.data());
    assert_eq!(pair.verdict(), PairVerdict::Keep);
}

fn write_pair(dir: &Path, name: &str, on: usize) {
    let img = Tensor::<f32>::full(&[3, 10, 10], 0.5);
    tensor_to_raster(&img).unwrap().write(&dir.join(format!("{name}.ppm"))).unwrap();
    let mask = Tensor::from_vec(&[1, 10, 10], (0..100).map(|i| if i < on { 1.0 } else { 0.0 }).collect()).unwrap();
    mask_to_raster(&mask).unwrap().write(&dir.join(format!("{name}.pgm"))).unwrap();
}

#[test]
fn oversized_and_empty_masks_are_filtered() {
    let dir = tempfile::tempdir().unwrap();
    write_pair(dir.path(), "big", 60);
    write_pair(dir.path(), "empty", 0);
    write_pair(dir.path(), "ok", 30);
    let big = load_pair(&dir.path().join("big.ppm"), &dir.path().join("big.pgm")).unwrap();
    assert_eq!(big.verdict(), PairVerdict::TooLarge);
    let empty = load_pair(&dir.path().join("empty.ppm"), &dir.path().join("empty.pgm")).unwrap();
    assert_eq!(empty.verdict(), PairVerdict::Empty);

    let text = "test\tbig.ppm\tbig.pgm\ntest\tempty.ppm\tempty.pgm\ntest\tok.ppm\tok.pgm\n";
    fs::write(dir.path().join(MANIFEST_FILE), text).unwrap();
    let m = SampleManifest::read(dir.path()).unwrap();
    let (pairs, stats) = load_split(&m, Split::Test, false).unwrap();
    assert_eq!((pairs.len(), stats.skipped_large, stats.skipped_empty), (1, 1, 1));
    let (pairs, _) = load_split(&m, Split::Test, true).unwrap();
    assert_eq!(pairs.len(), 2);
}

#[test]
fn mismatched_sizes_are_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    tensor_to_raster(&Tensor::<f32>::full(&[3, 8, 8], 0.5)).unwrap().write(&dir.path().join("a.ppm")).unwrap();
    mask_to_raster(&Tensor::<f32>::zeros(&[1, 8, 6])).unwrap().write(&dir.path().join("a.pgm")).unwrap();
    let err = load_pair(&dir.path().join("a.ppm"), &dir.path().join("a.pgm")).unwrap_err();
    assert!(matches!(err, inharmony_core::Error::Data(_)), "{err}");
}
