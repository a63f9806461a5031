//! Separable filters over `C×H×W` planes with clamped borders.

/// Normalized 1-D Gaussian taps, radius `ceil(3 sigma)`.
pub fn gaussian_taps(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as i64;
    let mut t: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = t.iter().sum();
    t.iter_mut().for_each(|v| *v /= s);
    t
}

fn clamp(i: i64, n: usize) -> usize {
    i.clamp(0, n as i64 - 1) as usize
}

/// Correlates every `h×w` plane of `data` with `taps` along rows
/// (`horizontal`) or columns.
pub fn filter_1d(data: &[f64], h: usize, w: usize, taps: &[f64], horizontal: bool) -> Vec<f64> {
    let r = (taps.len() / 2) as i64;
    let plane = h * w;
    let mut out = vec![0.0; data.len()];
    for (src, dst) in data.chunks(plane).zip(out.chunks_mut(plane)) {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, &t) in taps.iter().enumerate() {
                    let o = k as i64 - r;
                    let (yy, xx) = if horizontal {
                        (y, clamp(x as i64 + o, w))
                    } else {
                        (clamp(y as i64 + o, h), x)
                    };
                    acc += t * src[yy * w + xx];
                }
                dst[y * w + x] = acc;
            }
        }
    }
    out
}

pub fn gaussian_blur(data: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let taps = gaussian_taps(sigma);
    let tmp = filter_1d(data, h, w, &taps, true);
    filter_1d(&tmp, h, w, &taps, false)
}

/// Uniform line blur of `length` pixels along one axis.
pub fn motion_blur(data: &[f64], h: usize, w: usize, length: usize, horizontal: bool) -> Vec<f64> {
    let n = length.max(1) | 1;
    let taps = vec![1.0 / n as f64; n];
    filter_1d(data, h, w, &taps, horizontal)
}
