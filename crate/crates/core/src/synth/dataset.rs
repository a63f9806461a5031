//! On-disk synthetic splits: PNG images and masks plus a line-delimited
//! manifest per split.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::scene::{Scene, SceneConfig};
use crate::backbone::Image;
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::rng::derive_seed;
use crate::sample::{Label, Sample};
use crate::tensor::Tensor;

pub const SPLITS: [&str; 3] = ["train", "val", "test"];
pub const MANIFEST: &str = "manifest.txt";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DatasetConfig {
    pub scene: SceneConfig,
    /// Probability that a sample is manipulated (at least one face swapped).
    pub fake_ratio: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            scene: SceneConfig::default(),
            fake_ratio: 0.5,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        if !(0.0..=1.0).contains(&self.fake_ratio) {
            return Err(Error::config("data.fake_ratio", format!("must lie in [0, 1], got {}", self.fake_ratio)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn get(&self, split: &str) -> usize {
        match split {
            "train" => self.train,
            "val" => self.val,
            "test" => self.test,
            _ => 0,
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRecord {
    pub split: String,
    pub index: usize,
    /// Paths relative to the dataset root.
    pub image: PathBuf,
    pub mask: PathBuf,
    pub label: Label,
    pub seed: u64,
}

impl fmt::Display for ManifestRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "split={} index={} image={} mask={} label={} seed={}",
            self.split,
            self.index,
            self.image.display(),
            self.mask.display(),
            self.label,
            self.seed
        )
    }
}

impl ManifestRecord {
    pub fn parse(line: &str) -> Result<ManifestRecord> {
        let bad = |what: &str| Error::Format(format!("manifest record {line:?}: {what}"));
        let fields: BTreeMap<&str, &str> = line
            .split_whitespace()
            .map(|kv| kv.split_once('=').ok_or_else(|| bad("expected key=value")))
            .collect::<Result<_>>()?;
        let get = |k: &str| fields.get(k).copied().ok_or_else(|| bad(&format!("missing {k}")));
        Ok(ManifestRecord {
            split: get("split")?.to_string(),
            index: get("index")?.parse().map_err(|_| bad("bad index"))?,
            image: PathBuf::from(get("image")?),
            mask: PathBuf::from(get("mask")?),
            label: Label::parse(get("label")?).ok_or_else(|| bad("bad label"))?,
            seed: get("seed")?.parse().map_err(|_| bad("bad seed"))?,
        })
    }
}

/// First per-sample seed of a split; sample `i` uses `base + i`.
pub fn split_seed(seed: u64, split: &str) -> u64 {
    derive_seed(seed, &format!("split.{split}"))
}

/// Deterministic sample for one per-sample seed.
pub fn make_sample(cfg: &DatasetConfig, sample_seed: u64) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
    let manipulated = rng.random_bool(cfg.fake_ratio);
    let scene = Scene::sample(&cfg.scene, &mut rng)?;
    if manipulated {
        scene.render(&scene.tampered_faces(true))
    } else {
        scene.render(&[])
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_image(path: &Path, image: &Tensor) -> Result<()> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let d = image.data();
    let mut buf = Vec::with_capacity(3 * h * w);
    for p in 0..h * w {
        for c in 0..3 {
            buf.push(to_u8(d[c * h * w + p]));
        }
    }
    let img = image::RgbImage::from_raw(w as u32, h as u32, buf).expect("buffer matches dimensions");
    img.save(path).map_err(|e| Error::image(path, e))
}

/// RGB PNG of any size as a `3×H×W` tensor in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw();
    Tensor::from_vec(&[3, h, w], (0..3 * h * w).map(|i| {
        let (c, p) = (i / (h * w), i % (h * w));
        raw[p * 3 + c] as f64 / 255.0
    }).collect())
}

pub fn save_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    let buf = mask.data.iter().map(|&v| v * 255).collect();
    let img = image::GrayImage::from_raw(mask.width as u32, mask.height as u32, buf).expect("buffer matches dimensions");
    img.save(path).map_err(|e| Error::image(path, e))
}

/// Single-channel PNG; values above 127 count as manipulated.
pub fn load_mask(path: &Path) -> Result<BinaryMask> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    BinaryMask::new(h, w, img.into_raw().into_iter().map(|v| u8::from(v > 127)).collect())
}

/// Writes `root/{train,val,test}/{images,masks}/NNNNN.png` and one manifest
/// per split. Returns every record in split order.
pub fn build_split(root: &Path, counts: SplitCounts, cfg: &DatasetConfig, seed: u64) -> Result<Vec<ManifestRecord>> {
    cfg.validate()?;
    let ranges: Vec<(u64, u64)> = SPLITS
        .iter()
        .map(|s| {
            let b = split_seed(seed, s);
            (b, b.wrapping_add(counts.get(s) as u64))
        })
        .collect();
    for i in 0..3 {
        for j in i + 1..3 {
            let (a, b) = (ranges[i], ranges[j]);
            if a.0 < b.1 && b.0 < a.1 {
                return Err(Error::Format(format!("seed ranges of {} and {} overlap", SPLITS[i], SPLITS[j])));
            }
        }
    }
    let mut records = Vec::with_capacity(counts.total());
    for (split, (base, _)) in SPLITS.iter().zip(ranges) {
        let dir = root.join(split);
        for sub in ["images", "masks"] {
            fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
        }
        let mut manifest = String::new();
        for index in 0..counts.get(split) {
            let sample_seed = base.wrapping_add(index as u64);
            let sample = make_sample(cfg, sample_seed)?;
            let name = format!("{index:05}.png");
            let rec = ManifestRecord {
                split: split.to_string(),
                index,
                image: PathBuf::from(split).join("images").join(&name),
                mask: PathBuf::from(split).join("masks").join(&name),
                label: sample.label,
                seed: sample_seed,
            };
            save_image(&root.join(&rec.image), sample.image.tensor())?;
            save_mask(&root.join(&rec.mask), &sample.gt_mask)?;
            manifest.push_str(&rec.to_string());
            manifest.push('\n');
            records.push(rec);
        }
        let path = dir.join(MANIFEST);
        fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    }
    Ok(records)
}

pub fn read_manifest(root: &Path, split: &str) -> Result<Vec<ManifestRecord>> {
    let path = root.join(split).join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines().filter(|l| !l.trim().is_empty()).map(ManifestRecord::parse).collect()
}

pub fn load_sample(root: &Path, rec: &ManifestRecord) -> Result<Sample> {
    let image = Image::new(load_image(&root.join(&rec.image))?)?;
    let mask = load_mask(&root.join(&rec.mask))?;
    Sample::new(image, mask, rec.label)
}

pub fn load_split(root: &Path, split: &str) -> Result<Vec<Sample>> {
    read_manifest(root, split)?.iter().map(|r| load_sample(root, r)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetConfig {
        DatasetConfig::default()
    }

    #[test]
    fn counts_and_split_tags() {
        let dir = tempfile::tempdir().unwrap();
        let recs = build_split(dir.path(), SplitCounts { train: 8, val: 2, test: 4 }, &small(), 1).unwrap();
        assert_eq!(recs.len(), 14);
        let tags: std::collections::BTreeSet<_> = recs.iter().map(|r| r.split.clone()).collect();
        assert_eq!(tags.len(), 3);
        let train = read_manifest(dir.path(), "train").unwrap();
        assert_eq!(train, recs[..8].to_vec());
        let s = load_sample(dir.path(), &train[3]).unwrap();
        assert_eq!((s.image.height(), s.image.width()), (64, 64));
        let seeds: std::collections::BTreeSet<_> = recs.iter().map(|r| r.seed).collect();
        assert_eq!(seeds.len(), 14);
    }

    #[test]
    fn same_seed_same_manifest_and_files() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let counts = SplitCounts { train: 3, val: 1, test: 1 };
        let ra = build_split(a.path(), counts, &small(), 9).unwrap();
        let rb = build_split(b.path(), counts, &small(), 9).unwrap();
        assert_eq!(ra, rb);
        for r in &ra {
            assert_eq!(fs::read(a.path().join(&r.image)).unwrap(), fs::read(b.path().join(&r.image)).unwrap());
        }
    }

    #[test]
    fn manipulated_ratio_within_three_sigma() {
        let cfg = small();
        let n = 200;
        let base = split_seed(4, "train");
        let fakes = (0..n)
            .filter(|&i| make_sample(&cfg, base + i as u64).unwrap().label == Label::Manipulated)
            .count() as f64;
        let p = cfg.fake_ratio;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((fakes - n as f64 * p).abs() <= 3.0 * sigma, "{fakes}");
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = make_sample(&small(), 77).unwrap();
        let ip = dir.path().join("i.png");
        let mp = dir.path().join("m.png");
        save_image(&ip, s.image.tensor()).unwrap();
        save_mask(&mp, &s.gt_mask).unwrap();
        let back = load_image(&ip).unwrap();
        assert!(back.max_abs_diff(s.image.tensor()) <= 0.5 / 255.0 + 1e-12);
        assert_eq!(load_mask(&mp).unwrap(), s.gt_mask);
        assert!(matches!(load_image(&dir.path().join("missing.png")), Err(Error::Image { .. })));
    }

    #[test]
    fn record_round_trip() {
        let r = ManifestRecord {
            split: "val".into(),
            index: 3,
            image: "val/images/00003.png".into(),
            mask: "val/masks/00003.png".into(),
            label: Label::Manipulated,
            seed: 42,
        };
        assert_eq!(ManifestRecord::parse(&r.to_string()).unwrap(), r);
        assert!(ManifestRecord::parse("split=val").is_err());
    }
}
