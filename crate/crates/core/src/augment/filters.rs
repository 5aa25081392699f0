//! Blur, convolutional and noise corruptions.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::elastic::{gaussian_kernel, reflect};
use super::Image;
use crate::seed::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BlurParams {
    Gaussian { sigma: f64 },
    Median { kernel: u32 },
    Motion { length: u32, angle_deg: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConvParams {
    Sharpen { alpha: f64 },
    Emboss { alpha: f64, strength: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    /// Standard deviation in 8-bit intensity units.
    pub sigma: f64,
    pub seed: u64,
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Correlates `img` with a square kernel (odd side), mirroring at borders.
fn convolve(img: &Image, kernel: &[f64], side: usize) -> Image {
    let (w, h) = img.dimensions();
    let r = (side / 2) as i64;
    Image::from_fn(w, h, |x, y| {
        let mut acc = [0.0; 3];
        for ky in 0..side {
            let sy = reflect(i64::from(y) + ky as i64 - r, h as usize) as u32;
            for kx in 0..side {
                let k = kernel[ky * side + kx];
                if k == 0.0 {
                    continue;
                }
                let sx = reflect(i64::from(x) + kx as i64 - r, w as usize) as u32;
                let p = img.get_pixel(sx, sy);
                for c in 0..3 {
                    acc[c] += k * f64::from(p[c]);
                }
            }
        }
        image::Rgb(acc.map(to_u8))
    })
}

fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    let k1 = gaussian_kernel(sigma);
    let side = k1.len();
    let kernel: Vec<f64> = (0..side * side).map(|i| k1[i / side] * k1[i % side]).collect();
    convolve(img, &kernel, side)
}

fn median_blur(img: &Image, kernel: u32) -> Image {
    let (w, h) = img.dimensions();
    let side = (kernel | 1) as i64;
    let r = side / 2;
    let mut window = Vec::with_capacity((side * side) as usize);
    Image::from_fn(w, h, |x, y| {
        let mut out = [0u8; 3];
        for (c, o) in out.iter_mut().enumerate() {
            window.clear();
            for dy in -r..=r {
                let sy = reflect(i64::from(y) + dy, h as usize) as u32;
                for dx in -r..=r {
                    let sx = reflect(i64::from(x) + dx, w as usize) as u32;
                    window.push(img.get_pixel(sx, sy)[c]);
                }
            }
            let mid = window.len() / 2;
            *o = *window.select_nth_unstable(mid).1;
        }
        image::Rgb(out)
    })
}

/// Averages along a line of `length` pixels at `angle_deg`.
fn motion_kernel(length: u32, angle_deg: f64) -> (Vec<f64>, usize) {
    let side = (length.max(1) | 1) as usize;
    let c = (side / 2) as f64;
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let mut k = vec![0.0; side * side];
    let steps = 4 * side;
    for i in 0..=steps {
        let t = i as f64 / steps as f64 * (side as f64 - 1.0) - c;
        let x = (c + t * cos).round() as usize;
        let y = (c + t * sin).round() as usize;
        k[y.min(side - 1) * side + x.min(side - 1)] = 1.0;
    }
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    (k, side)
}

pub fn apply_blur(img: &Image, params: &BlurParams) -> Image {
    match *params {
        BlurParams::Gaussian { sigma } if sigma > 0.0 => gaussian_blur(img, sigma),
        BlurParams::Gaussian { .. } => img.clone(),
        BlurParams::Median { kernel } if kernel > 1 => median_blur(img, kernel),
        BlurParams::Median { .. } => img.clone(),
        BlurParams::Motion { length, angle_deg } => {
            let (k, side) = motion_kernel(length, angle_deg);
            convolve(img, &k, side)
        }
    }
}

pub fn apply_convolution(img: &Image, params: &ConvParams) -> Image {
    let identity = [0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0];
    let (effect, alpha) = match *params {
        ConvParams::Sharpen { alpha } => ([0.0, -1.0, 0.0, -1.0, 5.0, -1.0, 0.0, -1.0, 0.0], alpha),
        ConvParams::Emboss { alpha, strength } => {
            let s = strength;
            ([-1.0 - s, -s, 0.0, -s, 1.0, s, 0.0, s, 1.0 + s], alpha)
        }
    };
    let kernel: Vec<f64> = identity
        .iter()
        .zip(effect)
        .map(|(i, e)| (1.0 - alpha) * i + alpha * e)
        .collect();
    convolve(img, &kernel, 3)
}

pub fn apply_noise(img: &Image, params: &NoiseParams) -> Image {
    if params.sigma <= 0.0 {
        return img.clone();
    }
    let normal = Normal::new(0.0, params.sigma).expect("positive sigma");
    let mut rng = rng_for(params.seed, &[0x0015E]);
    let mut out = img.clone();
    for p in out.pixels_mut() {
        for c in p.0.iter_mut() {
            *c = to_u8(f64::from(*c) + normal.sample(&mut rng));
        }
    }
    out
}
