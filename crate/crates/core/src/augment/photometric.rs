//! Colour and contrast adjustments. Masks are never touched.
//!
//! Applied in field order: brightness, grayscale blend, hue/saturation,
//! CLAHE, gamma, linear contrast. A `None` field is skipped.

use serde::{Deserialize, Serialize};

use super::Image;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PhotometricParams {
    /// Relative change: `out = in * (1 + brightness)`.
    pub brightness: Option<f64>,
    /// Blend weight towards the luma image, in `[0, 1]`.
    pub grayscale: Option<f64>,
    pub hue_shift_deg: Option<f64>,
    pub saturation: Option<f64>,
    pub clahe_clip: Option<f64>,
    /// `out = 255 * (in / 255)^gamma`.
    pub gamma: Option<f64>,
    /// `out = slope * (in - 128) + 128`.
    pub linear_contrast: Option<f64>,
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn map_lut(img: &mut Image, lut: &[u8; 256]) {
    for p in img.pixels_mut() {
        for c in p.0.iter_mut() {
            *c = lut[*c as usize];
        }
    }
}

pub fn gamma_lut(gamma: f64) -> [u8; 256] {
    std::array::from_fn(|v| to_u8(255.0 * (v as f64 / 255.0).powf(gamma)))
}

pub fn linear_contrast_lut(slope: f64) -> [u8; 256] {
    std::array::from_fn(|v| to_u8(slope * (v as f64 - 128.0) + 128.0))
}

fn brightness_lut(delta: f64) -> [u8; 256] {
    std::array::from_fn(|v| to_u8(v as f64 * (1.0 + delta)))
}

fn luma(p: &image::Rgb<u8>) -> f64 {
    0.299 * f64::from(p[0]) + 0.587 * f64::from(p[1]) + 0.114 * f64::from(p[2])
}

fn grayscale_blend(img: &mut Image, weight: f64) {
    for p in img.pixels_mut() {
        let y = luma(p);
        for c in p.0.iter_mut() {
            *c = to_u8((1.0 - weight) * f64::from(*c) + weight * y);
        }
    }
}

fn rgb_to_hsv([r, g, b]: [f64; 3]) -> [f64; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / d + 2.0)
    } else {
        60.0 * ((r - g) / d + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    [h, s, max]
}

fn hsv_to_rgb([h, s, v]: [f64; 3]) -> [f64; 3] {
    let c = v * s;
    let hp = h.rem_euclid(360.0) / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn hue_saturation(img: &mut Image, hue_shift: f64, saturation: f64) {
    for p in img.pixels_mut() {
        let [h, s, v] = rgb_to_hsv(p.0.map(f64::from));
        let rgb = hsv_to_rgb([h + hue_shift, (s * saturation).clamp(0.0, 1.0), v]);
        p.0 = rgb.map(to_u8);
    }
}

/// Contrast-limited adaptive histogram equalization, each channel
/// independently, on a grid of up to 8x8 tiles with bilinear blending of the
/// tile mappings. `clip` is relative to a uniform histogram.
pub fn clahe(img: &Image, clip: f64) -> Image {
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let tiles_x = 8.min(w).max(1);
    let tiles_y = 8.min(h).max(1);
    let tile_w = w.div_ceil(tiles_x);
    let tile_h = h.div_ceil(tiles_y);
    let mut out = img.clone();
    for ch in 0..3 {
        let mut luts = vec![[0u8; 256]; tiles_x * tiles_y];
        for ty in 0..tiles_y {
            for tx in 0..tiles_x {
                let (x0, x1) = (tx * tile_w, ((tx + 1) * tile_w).min(w));
                let (y0, y1) = (ty * tile_h, ((ty + 1) * tile_h).min(h));
                let mut hist = [0u64; 256];
                for y in y0..y1 {
                    for x in x0..x1 {
                        hist[img.get_pixel(x as u32, y as u32)[ch] as usize] += 1;
                    }
                }
                let n = ((x1.saturating_sub(x0)) * (y1.saturating_sub(y0))) as u64;
                luts[ty * tiles_x + tx] = tile_lut(&mut hist, n, clip);
            }
        }
        for y in 0..h {
            // position relative to tile centres
            let gy = (y as f64 + 0.5) / tile_h as f64 - 0.5;
            let ty0 = gy.floor().clamp(0.0, (tiles_y - 1) as f64) as usize;
            let ty1 = (ty0 + 1).min(tiles_y - 1);
            let fy = (gy - ty0 as f64).clamp(0.0, 1.0);
            for x in 0..w {
                let gx = (x as f64 + 0.5) / tile_w as f64 - 0.5;
                let tx0 = gx.floor().clamp(0.0, (tiles_x - 1) as f64) as usize;
                let tx1 = (tx0 + 1).min(tiles_x - 1);
                let fx = (gx - tx0 as f64).clamp(0.0, 1.0);
                let v = img.get_pixel(x as u32, y as u32)[ch] as usize;
                let at = |ty: usize, tx: usize| f64::from(luts[ty * tiles_x + tx][v]);
                let top = (1.0 - fx) * at(ty0, tx0) + fx * at(ty0, tx1);
                let bottom = (1.0 - fx) * at(ty1, tx0) + fx * at(ty1, tx1);
                out.get_pixel_mut(x as u32, y as u32)[ch] = to_u8((1.0 - fy) * top + fy * bottom);
            }
        }
    }
    out
}

fn tile_lut(hist: &mut [u64; 256], n: u64, clip: f64) -> [u8; 256] {
    if n == 0 {
        return std::array::from_fn(|v| v as u8);
    }
    let limit = ((clip * n as f64 / 256.0).ceil() as u64).max(1);
    let mut excess = 0;
    for bin in hist.iter_mut() {
        if *bin > limit {
            excess += *bin - limit;
            *bin = limit;
        }
    }
    let share = excess / 256;
    let remainder = (excess % 256) as usize;
    for (i, bin) in hist.iter_mut().enumerate() {
        *bin += share + u64::from(i < remainder);
    }
    let mut cdf = 0;
    std::array::from_fn(|v| {
        cdf += hist[v];
        to_u8(255.0 * cdf as f64 / n as f64)
    })
}

pub fn apply_photometric(img: &Image, params: &PhotometricParams) -> Image {
    let mut out = img.clone();
    if let Some(delta) = params.brightness {
        map_lut(&mut out, &brightness_lut(delta));
    }
    if let Some(weight) = params.grayscale {
        if weight != 0.0 {
            grayscale_blend(&mut out, weight.clamp(0.0, 1.0));
        }
    }
    let hue = params.hue_shift_deg.unwrap_or(0.0);
    let sat = params.saturation.unwrap_or(1.0);
    if hue != 0.0 || sat != 1.0 {
        hue_saturation(&mut out, hue, sat);
    }
    if let Some(clip) = params.clahe_clip {
        out = clahe(&out, clip);
    }
    if let Some(gamma) = params.gamma {
        map_lut(&mut out, &gamma_lut(gamma));
    }
    if let Some(slope) = params.linear_contrast {
        map_lut(&mut out, &linear_contrast_lut(slope));
    }
    out
}
