//! Training-time photometric and geometric augmentation.

use nalgebra::{SMatrix, SVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Image;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Independent probability of applying each transform.
    pub probability: f64,
    pub max_rotation_deg: f64,
    /// Maximum corner displacement as a fraction of the side length.
    pub perspective: f64,
    pub contrast: (f64, f64),
    pub saturation: (f64, f64),
    pub max_hue_shift: f64,
    pub blur_sigma: (f64, f64),
    /// Erased rectangle area as a fraction of the image.
    pub erase_area: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            probability: 0.5,
            max_rotation_deg: 30.0,
            perspective: 0.1,
            contrast: (0.8, 1.2),
            saturation: (0.8, 1.2),
            max_hue_shift: 0.05,
            blur_sigma: (0.1, 1.0),
            erase_area: (0.02, 0.10),
        }
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Apply each transform with independent probability; the output is clamped
/// to `[0, 1]`. Deterministic given the RNG state.
pub fn augment<R: Rng + ?Sized>(image: &Image, config: &AugmentConfig, rng: &mut R) -> Image {
    let mut out = image.clone();
    let p = config.probability;

    if rng.random::<f64>() < p {
        let deg = uniform(rng, (-config.max_rotation_deg, config.max_rotation_deg));
        out = rotate(&out, deg.to_radians());
    }
    if rng.random::<f64>() < p {
        let side = out.width().min(out.height()) as f64;
        let max = config.perspective * side;
        let mut shifts = [(0.0, 0.0); 4];
        for s in &mut shifts {
            *s = (uniform(rng, (-max, max)), uniform(rng, (-max, max)));
        }
        out = perspective(&out, &shifts);
    }
    if rng.random::<f64>() < p {
        let contrast = uniform(rng, config.contrast);
        let saturation = uniform(rng, config.saturation);
        let hue = uniform(rng, (-config.max_hue_shift, config.max_hue_shift));
        color_jitter(&mut out, contrast as f32, saturation as f32, hue as f32);
    }
    if rng.random::<f64>() < p {
        let sigma = uniform(rng, config.blur_sigma);
        out = gaussian_blur3(&out, sigma);
    }
    if rng.random::<f64>() < p {
        random_erase(&mut out, config.erase_area, rng);
    }
    out.clamp_unit();
    out
}

/// Bilinear lookup; out-of-bounds neighbours contribute zero.
fn bilinear(image: &Image, c: usize, x: f64, y: f64) -> f32 {
    let (w, h) = (image.width() as i64, image.height() as i64);
    let x0 = x.floor();
    let y0 = y.floor();
    let (fx, fy) = ((x - x0) as f32, (y - y0) as f32);
    let (x0, y0) = (x0 as i64, y0 as i64);
    let px = |xi: i64, yi: i64| -> f32 {
        if xi < 0 || yi < 0 || xi >= w || yi >= h {
            0.0
        } else {
            image.get(c, yi as usize, xi as usize)
        }
    };
    let top = px(x0, y0) * (1.0 - fx) + px(x0 + 1, y0) * fx;
    let bottom = px(x0, y0 + 1) * (1.0 - fx) + px(x0 + 1, y0 + 1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Resample through `map`, which takes output pixel coordinates to source coordinates.
fn warp(image: &Image, map: impl Fn(f64, f64) -> (f64, f64)) -> Image {
    let mut out = Image::zeros(image.height(), image.width());
    for y in 0..image.height() {
        for x in 0..image.width() {
            let (sx, sy) = map(x as f64, y as f64);
            for c in 0..Image::CHANNELS {
                out.set(c, y, x, bilinear(image, c, sx, sy));
            }
        }
    }
    out
}

fn rotate(image: &Image, angle: f64) -> Image {
    let cx = (image.width() as f64 - 1.0) / 2.0;
    let cy = (image.height() as f64 - 1.0) / 2.0;
    let (sin, cos) = angle.sin_cos();
    warp(image, |x, y| {
        let (dx, dy) = (x - cx, y - cy);
        (cos * dx + sin * dy + cx, -sin * dx + cos * dy + cy)
    })
}

/// Homography taking `from[i]` to `to[i]`, as a row-major 3x3 with h33 = 1.
fn homography(from: &[(f64, f64); 4], to: &[(f64, f64); 4]) -> Option<[f64; 9]> {
    let mut a = SMatrix::<f64, 8, 8>::zeros();
    let mut b = SVector::<f64, 8>::zeros();
    for i in 0..4 {
        let (x, y) = from[i];
        let (u, v) = to[i];
        let r = 2 * i;
        a.row_mut(r)
            .copy_from_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]);
        a.row_mut(r + 1)
            .copy_from_slice(&[0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]);
        b[r] = u;
        b[r + 1] = v;
    }
    let h = a.lu().solve(&b)?;
    Some([h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0])
}

fn perspective(image: &Image, shifts: &[(f64, f64); 4]) -> Image {
    let (w, h) = (image.width() as f64 - 1.0, image.height() as f64 - 1.0);
    let corners = [(0.0, 0.0), (w, 0.0), (w, h), (0.0, h)];
    let mut moved = corners;
    for (m, s) in moved.iter_mut().zip(shifts) {
        m.0 += s.0;
        m.1 += s.1;
    }
    let Some(hm) = homography(&moved, &corners) else {
        return image.clone();
    };
    warp(image, |x, y| {
        let d = hm[6] * x + hm[7] * y + hm[8];
        (
            (hm[0] * x + hm[1] * y + hm[2]) / d,
            (hm[3] * x + hm[4] * y + hm[5]) / d,
        )
    })
}

fn gray(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta <= 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max <= 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as i32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

fn color_jitter(image: &mut Image, contrast: f32, saturation: f32, hue: f32) {
    let n = image.width() * image.height();
    let data = image.data_mut();
    let mean = (0..n)
        .map(|i| gray(data[i], data[n + i], data[2 * n + i]))
        .sum::<f32>()
        / n as f32;
    for i in 0..n {
        let (mut r, mut g, mut b) = (data[i], data[n + i], data[2 * n + i]);
        r = (mean + contrast * (r - mean)).clamp(0.0, 1.0);
        g = (mean + contrast * (g - mean)).clamp(0.0, 1.0);
        b = (mean + contrast * (b - mean)).clamp(0.0, 1.0);
        let l = gray(r, g, b);
        r = (l + saturation * (r - l)).clamp(0.0, 1.0);
        g = (l + saturation * (g - l)).clamp(0.0, 1.0);
        b = (l + saturation * (b - l)).clamp(0.0, 1.0);
        let (h, s, v) = rgb_to_hsv(r, g, b);
        let (r, g, b) = hsv_to_rgb(h + hue, s, v);
        data[i] = r;
        data[n + i] = g;
        data[2 * n + i] = b;
    }
}

fn gaussian_blur3(image: &Image, sigma: f64) -> Image {
    let side = (-1.0 / (2.0 * sigma * sigma)).exp();
    let norm = 1.0 + 2.0 * side;
    let k = [
        (side / norm) as f32,
        (1.0 / norm) as f32,
        (side / norm) as f32,
    ];
    let (h, w) = (image.height(), image.width());
    let clampi = |i: i64, n: usize| i.clamp(0, n as i64 - 1) as usize;

    let mut tmp = Image::zeros(h, w);
    for c in 0..Image::CHANNELS {
        for y in 0..h {
            for x in 0..w {
                let v: f32 = (0..3)
                    .map(|j| k[j] * image.get(c, y, clampi(x as i64 + j as i64 - 1, w)))
                    .sum();
                tmp.set(c, y, x, v);
            }
        }
    }
    let mut out = Image::zeros(h, w);
    for c in 0..Image::CHANNELS {
        for y in 0..h {
            for x in 0..w {
                let v: f32 = (0..3)
                    .map(|j| k[j] * tmp.get(c, clampi(y as i64 + j as i64 - 1, h), x))
                    .sum();
                out.set(c, y, x, v);
            }
        }
    }
    out
}

fn random_erase<R: Rng + ?Sized>(image: &mut Image, area: (f64, f64), rng: &mut R) {
    let (h, w) = (image.height(), image.width());
    let target = uniform(rng, area) * (h * w) as f64;
    let ratio = uniform(rng, (0.3f64.ln(), 3.3f64.ln())).exp();
    let eh = ((target * ratio).sqrt().round() as usize).clamp(1, h);
    let ew = ((target / ratio).sqrt().round() as usize).clamp(1, w);
    let top = rng.random_range(0..=h - eh);
    let left = rng.random_range(0..=w - ew);
    for c in 0..Image::CHANNELS {
        for y in top..top + eh {
            for x in left..left + ew {
                image.set(c, y, x, rng.random::<f32>());
            }
        }
    }
}
