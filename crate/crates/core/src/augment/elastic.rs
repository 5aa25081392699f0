//! Elastic deformation: a per-pixel random displacement in `[-1, 1]`,
//! smoothed with a Gaussian of width `sigma` and scaled by `alpha`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::geometric::{check_masks, warp};
use super::Image;
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::seed::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElasticParams {
    pub alpha: f64,
    pub sigma: f64,
    pub seed: u64,
}

pub(crate) fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as usize;
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Mirror index into `[0, n)` without repeating the edge sample.
pub(crate) fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - m;
    }
    m as usize
}

/// Separable Gaussian blur of a row-major `h x w` field.
pub(crate) fn smooth(field: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let mut tmp = vec![0.0; field.len()];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * field[y * w + reflect(x as i64 + i as i64 - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; field.len()];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * tmp[reflect(y as i64 + i as i64 - r, h) * w + x])
                .sum();
        }
    }
    out
}

/// `(dx, dy)` displacement fields, row-major.
pub fn displacement_field(h: u32, w: u32, alpha: f64, sigma: f64, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let (h, w) = (h as usize, w as usize);
    let mut rng = rng_for(seed, &[0xE1A5]);
    let mut raw = || (0..h * w).map(|_| rng.random_range(-1.0..=1.0)).collect::<Vec<f64>>();
    let dx = raw();
    let dy = raw();
    let scale = |f: Vec<f64>| smooth(&f, h, w, sigma).into_iter().map(|v| v * alpha).collect();
    (scale(dx), scale(dy))
}

pub fn elastic_transform(
    img: &Image,
    masks: &[BinaryMask],
    alpha: f64,
    sigma: f64,
    seed: u64,
) -> Result<(Image, Vec<BinaryMask>)> {
    check_masks(img, masks)?;
    if !(sigma > 0.0) {
        return Err(Error::InvalidParameter(format!("elastic sigma {sigma} must be positive")));
    }
    if alpha == 0.0 {
        return Ok((img.clone(), masks.to_vec()));
    }
    let (w, h) = img.dimensions();
    let (dx, dy) = displacement_field(h, w, alpha, sigma, seed);
    let wu = w as usize;
    warp(img, masks, |x, y| {
        let i = y as usize * wu + x as usize;
        (x + dx[i], y + dy[i])
    })
}
