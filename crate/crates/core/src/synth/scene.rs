//! Procedural multi-face scenes and face-interior tampering.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::filters::gaussian_blur;
use crate::backbone::Image;
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::sample::{Label, Sample};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    /// Inclusive range of faces per image.
    pub faces: (usize, usize),
    /// Probability that each face is tampered.
    pub tamper_prob: f64,
    /// Width of the soft blend ramp inside the tampered region, in pixels.
    pub blend: f64,
    /// Gaussian sigma applied to the swapped texture.
    pub smoothing: f64,
    /// Std of the sensor-like grain on untouched pixels.
    pub grain: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            height: 64,
            width: 64,
            faces: (2, 6),
            tamper_prob: 0.5,
            blend: 2.0,
            smoothing: 1.5,
            grain: 0.03,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, detail: String| Error::config(field, detail);
        for (field, v) in [("height", self.height), ("width", self.width)] {
            if v < 32 || v % 32 != 0 {
                return Err(bad(field, format!("must be a positive multiple of 32, got {v}")));
            }
        }
        if self.faces.0 == 0 || self.faces.0 > self.faces.1 {
            return Err(bad("faces", format!("empty range {}..={}", self.faces.0, self.faces.1)));
        }
        if !(0.0..=1.0).contains(&self.tamper_prob) {
            return Err(bad("tamper_prob", format!("must lie in [0, 1], got {}", self.tamper_prob)));
        }
        for (field, v) in [("blend", self.blend), ("smoothing", self.smoothing), ("grain", self.grain)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(bad(field, format!("must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Wave {
    amp: f64,
    freq: f64,
    angle: f64,
    phase: f64,
}

impl Wave {
    fn random<R: Rng>(rng: &mut R, amp: (f64, f64), freq: (f64, f64)) -> Wave {
        Wave {
            amp: rng.random_range(amp.0..amp.1),
            freq: rng.random_range(freq.0..freq.1),
            angle: rng.random_range(0.0..std::f64::consts::PI),
            phase: rng.random_range(0.0..std::f64::consts::TAU),
        }
    }

    fn at(&self, y: f64, x: f64) -> f64 {
        self.amp * (self.freq * (y * self.angle.cos() + x * self.angle.sin()) + self.phase).sin()
    }
}

#[derive(Clone, Copy, Debug)]
struct Look {
    tone: [f64; 3],
    wave: Wave,
    /// Vertical eye offset as a fraction of the face height.
    eye_dy: f64,
}

#[derive(Clone, Copy, Debug)]
struct Face {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    look: Look,
    swap: Look,
    draw: f64,
}

impl Face {
    fn rho2(&self, y: f64, x: f64) -> f64 {
        let dy = (y - self.cy) / self.ry;
        let dx = (x - self.cx) / self.rx;
        dy * dy + dx * dx
    }

    fn contains(&self, y: usize, x: usize) -> bool {
        self.rho2(y as f64 + 0.5, x as f64 + 0.5) <= 1.0
    }

    /// Skin shading, texture and landmark blobs at a pixel centre.
    fn shade(&self, look: &Look, y: f64, x: f64) -> [f64; 3] {
        let r2 = self.rho2(y, x);
        let t = look.wave.at(y, x);
        let mut c = look.tone.map(|v| v * (1.0 - 0.25 * r2.min(1.0)) + t);
        let er = (0.18 * self.ry.min(self.rx)).max(1.0);
        let ey = self.cy + (look.eye_dy - 0.25) * self.ry;
        for side in [-1.0, 1.0] {
            let ex = self.cx + side * 0.4 * self.rx;
            if (y - ey).powi(2) + (x - ex).powi(2) <= er * er {
                c = [0.08, 0.07, 0.06];
            }
        }
        let (my, mry, mrx) = (self.cy + 0.45 * self.ry, (0.12 * self.ry).max(0.75), 0.4 * self.rx);
        if ((y - my) / mry).powi(2) + ((x - self.cx) / mrx).powi(2) <= 1.0 {
            c = [0.6, 0.15, 0.15];
        }
        c
    }
}

fn random_look<R: Rng>(rng: &mut R) -> Look {
    let r = rng.random_range(0.5..0.9);
    Look {
        tone: [r, r * rng.random_range(0.65..0.85), r * rng.random_range(0.5..0.75)],
        wave: Wave::random(rng, (0.01, 0.04), (0.3, 0.9)),
        eye_dy: rng.random_range(-0.08..0.08),
    }
}

/// Swapped-in appearance: a shifted skin tone with a distinct stripe texture.
fn swap_look<R: Rng>(rng: &mut R, orig: &Look) -> Look {
    let shift = rng.random_range(0.12..0.25) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let tint = [rng.random_range(-0.06..0.06), rng.random_range(-0.06..0.06), rng.random_range(-0.06..0.06)];
    let mut tone = [0.0; 3];
    for c in 0..3 {
        tone[c] = (orig.tone[c] + shift + tint[c]).clamp(0.15, 0.95);
    }
    Look {
        tone,
        wave: Wave::random(rng, (0.04, 0.08), (0.9, 1.6)),
        eye_dy: rng.random_range(-0.12..0.12),
    }
}

/// One rendered scene; genuine and tampered renders share every random draw.
#[derive(Clone, Debug)]
pub struct Scene {
    cfg: SceneConfig,
    faces: Vec<Face>,
    genuine: Vec<f64>,
}

impl Scene {
    pub fn sample<R: Rng>(cfg: &SceneConfig, rng: &mut R) -> Result<Scene> {
        cfg.validate()?;
        let (h, w) = (cfg.height, cfg.width);
        let side = h.min(w) as f64;
        let wanted = rng.random_range(cfg.faces.0..=cfg.faces.1);
        let mut faces: Vec<Face> = Vec::with_capacity(wanted);
        let mut area = 0.0;
        'place: for _ in 0..wanted {
            for _attempt in 0..64 {
                let ry = (rng.random_range(0.1..0.2) * side).max(3.0);
                let rx = ry * rng.random_range(0.7..0.95);
                let cy = rng.random_range(ry + 1.0..h as f64 - ry - 1.0);
                let cx = rng.random_range(rx + 1.0..w as f64 - rx - 1.0);
                let margin = 2.0;
                let clear = faces.iter().all(|f| {
                    (f.cy - cy).abs() > f.ry + ry + margin || (f.cx - cx).abs() > f.rx + rx + margin
                });
                let a = std::f64::consts::PI * ry * rx;
                if clear && area + a <= 0.5 * (h * w) as f64 {
                    let look = random_look(rng);
                    let swap = swap_look(rng, &look);
                    faces.push(Face {
                        cy,
                        cx,
                        ry,
                        rx,
                        look,
                        swap,
                        draw: rng.random_range(0.0..1.0),
                    });
                    area += a;
                    continue 'place;
                }
            }
            log::warn!("placed {} of {} faces after bounded retries", faces.len(), wanted);
            break;
        }
        if faces.is_empty() {
            return Err(Error::Format("no face could be placed".into()));
        }

        let bg_tone: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.2..0.8));
        let bg_waves: Vec<Wave> = (0..4).map(|_| Wave::random(rng, (0.02, 0.08), (0.05, 0.4))).collect();
        let bg_gain: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.5..1.5));
        let grain = Normal::new(0.0, cfg.grain.max(f64::MIN_POSITIVE)).expect("finite std");
        let mut genuine = vec![0.0; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
                let t: f64 = bg_waves.iter().map(|wv| wv.at(py, px)).sum();
                let mut c: [f64; 3] = std::array::from_fn(|k| bg_tone[k] + bg_gain[k] * t);
                if let Some(f) = faces.iter().find(|f| f.contains(y, x)) {
                    c = f.shade(&f.look, py, px);
                }
                for (k, v) in c.iter().enumerate() {
                    genuine[k * h * w + y * w + x] = *v;
                }
            }
        }
        for v in genuine.iter_mut() {
            let n: f64 = if cfg.grain > 0.0 { grain.sample(rng) } else { 0.0 };
            *v = (*v + n).clamp(0.0, 1.0);
        }
        Ok(Scene {
            cfg: *cfg,
            faces,
            genuine,
        })
    }

    pub fn num_faces(&self) -> usize {
        self.faces.len()
    }

    /// Faces selected by the per-face tamper probability. With
    /// `at_least_one`, the face with the smallest draw is added when none is.
    pub fn tampered_faces(&self, at_least_one: bool) -> Vec<usize> {
        let mut out: Vec<usize> = (0..self.faces.len())
            .filter(|&i| self.faces[i].draw < self.cfg.tamper_prob)
            .collect();
        if out.is_empty() && at_least_one {
            let best = (0..self.faces.len())
                .min_by(|&a, &b| self.faces[a].draw.total_cmp(&self.faces[b].draw))
                .expect("scene has a face");
            out.push(best);
        }
        out
    }

    pub fn face_mask(&self, i: usize) -> BinaryMask {
        let (h, w) = (self.cfg.height, self.cfg.width);
        let mut m = BinaryMask::zeros(h, w);
        for y in 0..h {
            for x in 0..w {
                if self.faces[i].contains(y, x) {
                    m.set(y, x, 1);
                }
            }
        }
        m
    }

    /// Renders the scene with the interiors of `tampered` faces swapped.
    pub fn render(&self, tampered: &[usize]) -> Result<Sample> {
        let (h, w) = (self.cfg.height, self.cfg.width);
        let hw = h * w;
        let mut img = self.genuine.clone();
        let mut mask = BinaryMask::zeros(h, w);
        for &i in tampered {
            let f = &self.faces[i];
            let fm = self.face_mask(i);
            let mut layer = vec![0.0; 3 * hw];
            for y in 0..h {
                for x in 0..w {
                    let c = f.shade(&f.swap, y as f64 + 0.5, x as f64 + 0.5);
                    for k in 0..3 {
                        layer[k * hw + y * w + x] = c[k];
                    }
                }
            }
            let layer = gaussian_blur(&layer, h, w, self.cfg.smoothing);
            let depth = inner_distance(&fm);
            for p in 0..hw {
                if fm.data[p] == 0 {
                    continue;
                }
                let alpha = if self.cfg.blend > 0.0 {
                    (depth[p] as f64 / self.cfg.blend).min(1.0)
                } else {
                    1.0
                };
                for k in 0..3 {
                    let j = k * hw + p;
                    img[j] = ((1.0 - alpha) * img[j] + alpha * layer[j]).clamp(0.0, 1.0);
                }
                mask.data[p] = 1;
            }
        }
        let label = if tampered.is_empty() { Label::Genuine } else { Label::Manipulated };
        let image = Image::new(Tensor::from_vec(&[3, h, w], img)?)?;
        Sample::new(image, mask, label)
    }
}

/// Chessboard distance from each mask pixel to the nearest pixel outside
/// the mask (1 on the boundary ring, 0 outside).
fn inner_distance(m: &BinaryMask) -> Vec<u32> {
    let (h, w) = (m.height, m.width);
    let mut d = vec![u32::MAX; h * w];
    let mut queue = std::collections::VecDeque::new();
    for y in 0..h {
        for x in 0..w {
            if m.get(y, x) == 0 {
                d[y * w + x] = 0;
                queue.push_back((y, x));
            }
        }
    }
    // image border counts as outside
    for y in 0..h {
        for x in 0..w {
            if m.get(y, x) == 1 && (y == 0 || x == 0 || y == h - 1 || x == w - 1) {
                d[y * w + x] = 1;
                queue.push_back((y, x));
            }
        }
    }
    while let Some((y, x)) = queue.pop_front() {
        let dv = d[y * w + x];
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                    continue;
                }
                let q = ny as usize * w + nx as usize;
                if d[q] == u32::MAX {
                    d[q] = dv + 1;
                    queue.push_back((ny as usize, nx as usize));
                }
            }
        }
    }
    d
}

/// One sample whose faces are each tampered with `cfg.tamper_prob`.
pub fn generate_sample<R: Rng>(cfg: &SceneConfig, rng: &mut R) -> Result<Sample> {
    let scene = Scene::sample(cfg, rng)?;
    scene.render(&scene.tampered_faces(false))
}

/// Connected components of a mask under 4-connectivity.
pub fn count_regions(m: &BinaryMask) -> usize {
    let (h, w) = (m.height, m.width);
    let mut seen = vec![false; h * w];
    let mut n = 0;
    for start in 0..h * w {
        if m.data[start] == 0 || seen[start] {
            continue;
        }
        n += 1;
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(p) = stack.pop() {
            let (y, x) = (p / w, p % w);
            let mut push = |q: usize| {
                if m.data[q] == 1 && !seen[q] {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if y > 0 {
                push(p - w);
            }
            if y + 1 < h {
                push(p + w);
            }
            if x > 0 {
                push(p - 1);
            }
            if x + 1 < w {
                push(p + 1);
            }
        }
    }
    n
}
