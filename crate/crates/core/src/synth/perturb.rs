//! Real-world perturbations: color, edge, corruption, convolution and
//! external occlusion, randomly combined.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::filters::{gaussian_blur, motion_blur};
use crate::backbone::Image;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Family {
    Color,
    Edge,
    Corruption,
    Convolution,
    External,
}

impl Family {
    pub const ALL: [Family; 5] = [
        Family::Color,
        Family::Edge,
        Family::Corruption,
        Family::Convolution,
        Family::External,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Color => "color",
            Family::Edge => "edge",
            Family::Corruption => "corruption",
            Family::Convolution => "convolution",
            Family::External => "external",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Family> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::config("perturb.families", format!("unknown family {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerturbConfig {
    pub families: Vec<Family>,
    pub intensity: f64,
    pub seed: u64,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        PerturbConfig {
            families: Family::ALL.to_vec(),
            intensity: 0.5,
            seed: 0,
        }
    }
}

impl PerturbConfig {
    pub fn validate(&self) -> Result<()> {
        if self.families.is_empty() {
            return Err(Error::config("perturb.families", "at least one family must be enabled"));
        }
        if !(0.0..=1.0).contains(&self.intensity) {
            return Err(Error::config(
                "perturb.intensity",
                format!("must lie in [0, 1], got {}", self.intensity),
            ));
        }
        Ok(())
    }
}

fn color<R: Rng>(d: &mut [f64], hw: usize, s: f64, rng: &mut R) {
    let brightness = rng.random_range(-0.25..0.25) * s;
    let contrast = 1.0 + rng.random_range(-0.4..0.4) * s;
    let hue = rng.random_range(-0.5..0.5) * s;
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    // rotation about the gray axis
    let (c, sn) = (hue.cos(), hue.sin());
    let k = 1.0 / 3.0;
    let r3 = (1.0f64 / 3.0).sqrt();
    let m = [
        [c + (1.0 - c) * k, k * (1.0 - c) - r3 * sn, k * (1.0 - c) + r3 * sn],
        [k * (1.0 - c) + r3 * sn, c + k * (1.0 - c), k * (1.0 - c) - r3 * sn],
        [k * (1.0 - c) - r3 * sn, k * (1.0 - c) + r3 * sn, c + k * (1.0 - c)],
    ];
    for p in 0..hw {
        let px = [d[p], d[hw + p], d[2 * hw + p]];
        for ch in 0..3 {
            let v = m[ch][0] * px[0] + m[ch][1] * px[1] + m[ch][2] * px[2];
            d[ch * hw + p] = (v - mean) * contrast + mean + brightness;
        }
    }
}

fn edge(d: &mut [f64], h: usize, w: usize, s: f64) {
    let blur = gaussian_blur(d, h, w, 1.0);
    let amount = 1.5 * s;
    for (v, b) in d.iter_mut().zip(blur) {
        *v += amount * (*v - b);
    }
}

fn corruption<R: Rng>(d: &mut [f64], h: usize, w: usize, s: f64, rng: &mut R) {
    let noise = Normal::new(0.0, 0.08 * s).expect("finite std");
    for v in d.iter_mut() {
        *v += noise.sample(rng);
    }
    // 4×4 block averaging mixed in, then coarse quantization
    let mix = 0.5 * s;
    let b = 4;
    for plane in d.chunks_mut(h * w) {
        for by in (0..h).step_by(b) {
            for bx in (0..w).step_by(b) {
                let (ye, xe) = ((by + b).min(h), (bx + b).min(w));
                let mut sum = 0.0;
                for y in by..ye {
                    for x in bx..xe {
                        sum += plane[y * w + x];
                    }
                }
                let mean = sum / ((ye - by) * (xe - bx)) as f64;
                for y in by..ye {
                    for x in bx..xe {
                        let v = &mut plane[y * w + x];
                        *v = (1.0 - mix) * *v + mix * mean;
                    }
                }
            }
        }
    }
    let levels = (255.0 - 223.0 * s).round();
    for v in d.iter_mut() {
        *v = (v.clamp(0.0, 1.0) * levels).round() / levels;
    }
}

fn convolution<R: Rng>(d: &mut Vec<f64>, h: usize, w: usize, s: f64, rng: &mut R) {
    *d = if rng.random_bool(0.5) {
        gaussian_blur(d, h, w, 2.0 * s)
    } else {
        let len = 1 + (6.0 * s).round() as usize;
        motion_blur(d, h, w, len, rng.random_bool(0.5))
    };
}

fn external<R: Rng>(d: &mut [f64], h: usize, w: usize, s: f64, rng: &mut R) {
    let side = ((0.35 * s * h.min(w) as f64).round() as usize).max(1);
    let (y0, x0) = (rng.random_range(0..=h - side.min(h)), rng.random_range(0..=w - side.min(w)));
    let color: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
    let alpha = 0.6 * s;
    for (ch, &c) in color.iter().enumerate() {
        for y in y0..(y0 + side).min(h) {
            for x in x0..(x0 + side).min(w) {
                let v = &mut d[ch * h * w + y * w + x];
                *v = (1.0 - alpha) * *v + alpha * c;
            }
        }
    }
}

/// Applies a random non-empty subset of the enabled families, in a random
/// order, then clips to `[0, 1]`. Intensity 0 returns the input unchanged.
pub fn perturb<R: Rng>(image: &Image, cfg: &PerturbConfig, rng: &mut R) -> Result<Image> {
    cfg.validate()?;
    if cfg.intensity == 0.0 {
        return Ok(image.clone());
    }
    let (h, w) = (image.height(), image.width());
    let mut families = cfg.families.clone();
    families.sort();
    families.dedup();
    families.shuffle(rng);
    let n = rng.random_range(1..=families.len());
    let s = cfg.intensity;
    let mut d = image.tensor().data().to_vec();
    for f in &families[..n] {
        match f {
            Family::Color => color(&mut d, h * w, s, rng),
            Family::Edge => edge(&mut d, h, w, s),
            Family::Corruption => corruption(&mut d, h, w, s, rng),
            Family::Convolution => convolution(&mut d, h, w, s, rng),
            Family::External => external(&mut d, h, w, s, rng),
        }
    }
    d.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Image::new(Tensor::from_vec(&[3, h, w], d)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use crate::synth::scene::{generate_sample, SceneConfig};
    use proptest::prelude::*;

    fn image(seed: u64) -> Image {
        generate_sample(&SceneConfig::default(), &mut stream_rng(seed, "scene")).unwrap().image
    }

    #[test]
    fn zero_intensity_is_identity() {
        let img = image(1);
        let cfg = PerturbConfig {
            intensity: 0.0,
            ..PerturbConfig::default()
        };
        assert_eq!(perturb(&img, &cfg, &mut stream_rng(3, "p")).unwrap(), img);
    }

    #[test]
    fn corruption_is_reproducible() {
        let img = image(2);
        let cfg = PerturbConfig {
            families: vec![Family::Corruption],
            intensity: 0.7,
            seed: 0,
        };
        let a = perturb(&img, &cfg, &mut stream_rng(5, "p")).unwrap();
        let b = perturb(&img, &cfg, &mut stream_rng(5, "p")).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, img);
    }

    #[test]
    fn every_family_changes_the_image() {
        let img = image(3);
        for f in Family::ALL {
            let cfg = PerturbConfig {
                families: vec![f],
                intensity: 1.0,
                seed: 0,
            };
            let out = perturb(&img, &cfg, &mut stream_rng(9, "p")).unwrap();
            assert_ne!(out, img, "{f}");
        }
    }

    #[test]
    fn parse_family_names() {
        for f in Family::ALL {
            assert_eq!(f.name().parse::<Family>().unwrap(), f);
        }
        assert!("blur".parse::<Family>().is_err());
        assert!(PerturbConfig { intensity: 1.2, ..PerturbConfig::default() }.validate().is_err());
        assert!(PerturbConfig { families: vec![], ..PerturbConfig::default() }.validate().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn output_stays_in_unit_range(seed in 0u64..10_000, intensity in 0.0f64..=1.0) {
            let img = image(seed % 4);
            let out = perturb(&img, &PerturbConfig { intensity, ..PerturbConfig::default() }, &mut stream_rng(seed, "p")).unwrap();
            prop_assert!(out.tensor().data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
