//! Spatial transforms applied identically to an image and its masks.
//!
//! Warps are computed by inverse mapping: each output pixel looks up a
//! source coordinate. Images are sampled bilinearly, masks by nearest
//! neighbour, so masks stay binary. Samples outside the frame are background.

use nalgebra::{SMatrix, SVector};
use serde::{Deserialize, Serialize};

use super::elastic::ElasticParams;
use super::Image;
use crate::error::{Error, Result};
use crate::mask::{BinaryMask, FlipAxis};

/// Spatial parameters for one augmented output. The default is the identity.
///
/// Positive rotation angles use the standard rotation matrix in
/// `(x = column, y = row)` pixel coordinates, about the image centre.
/// Perspective offsets move the corners (top-left, top-right, bottom-right,
/// bottom-left) by a fraction of the image width and height.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometricParams {
    pub scale: f64,
    pub rotation_deg: f64,
    pub flip: Option<FlipAxis>,
    pub perspective: Option<[[f64; 2]; 4]>,
    pub elastic: Option<ElasticParams>,
}

impl Default for GeometricParams {
    fn default() -> Self {
        GeometricParams {
            scale: 1.0,
            rotation_deg: 0.0,
            flip: None,
            perspective: None,
            elastic: None,
        }
    }
}

impl GeometricParams {
    fn has_warp(&self) -> bool {
        self.scale != 1.0 || self.rotation_deg != 0.0 || self.perspective.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeometricOutput {
    pub image: Image,
    pub masks: Vec<BinaryMask>,
    /// Input indices of masks that left the frame entirely.
    pub dropped: Vec<usize>,
}

pub fn flip_image(img: &Image, axis: FlipAxis) -> Image {
    match axis {
        FlipAxis::Horizontal => image::imageops::flip_horizontal(img),
        FlipAxis::Vertical => image::imageops::flip_vertical(img),
        FlipAxis::Diagonal => image::imageops::rotate180(img),
    }
}

pub(crate) fn check_masks(img: &Image, masks: &[BinaryMask]) -> Result<()> {
    let dims = (img.height(), img.width());
    for m in masks {
        if m.dims() != dims {
            return Err(Error::DimensionMismatch {
                left: dims,
                right: m.dims(),
            });
        }
    }
    Ok(())
}

/// Warps `img` and every mask by the inverse map `source_of(col, row)`.
pub(crate) fn warp(
    img: &Image,
    masks: &[BinaryMask],
    source_of: impl Fn(f64, f64) -> (f64, f64),
) -> Result<(Image, Vec<BinaryMask>)> {
    let (w, h) = img.dimensions();
    let mut out = Image::new(w, h);
    let mut out_masks = masks
        .iter()
        .map(|_| BinaryMask::new(h, w))
        .collect::<Result<Vec<_>>>()?;
    for row in 0..h {
        for col in 0..w {
            let (sx, sy) = source_of(f64::from(col), f64::from(row));
            out.put_pixel(col, row, sample_bilinear(img, sx, sy));
            let nx = (sx + 0.5).floor();
            let ny = (sy + 0.5).floor();
            if nx >= 0.0 && ny >= 0.0 && nx < f64::from(w) && ny < f64::from(h) {
                let (nc, nr) = (nx as u32, ny as u32);
                for (src, dst) in masks.iter().zip(out_masks.iter_mut()) {
                    if src.get(nr, nc) {
                        dst.insert(row, col);
                    }
                }
            }
        }
    }
    Ok((out, out_masks))
}

pub(crate) fn sample_bilinear(img: &Image, x: f64, y: f64) -> image::Rgb<u8> {
    let (w, h) = (i64::from(img.width()), i64::from(img.height()));
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (x0, y0) = (x0 as i64, y0 as i64);
    let mut acc = [0.0f64; 3];
    for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
        for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
            let weight = wx * wy;
            let (px, py) = (x0 + dx, y0 + dy);
            if weight == 0.0 || px < 0 || py < 0 || px >= w || py >= h {
                continue;
            }
            let p = img.get_pixel(px as u32, py as u32);
            for c in 0..3 {
                acc[c] += weight * f64::from(p[c]);
            }
        }
    }
    image::Rgb(acc.map(|v| v.round().clamp(0.0, 255.0) as u8))
}

/// Homography taking each `from[i]` to `to[i]`.
fn homography(from: [[f64; 2]; 4], to: [[f64; 2]; 4]) -> Result<SMatrix<f64, 3, 3>> {
    let mut a = SMatrix::<f64, 8, 8>::zeros();
    let mut b = SVector::<f64, 8>::zeros();
    for i in 0..4 {
        let [x, y] = from[i];
        let [u, v] = to[i];
        let r = 2 * i;
        a.set_row(r, &nalgebra::RowSVector::<f64, 8>::from([x, y, 1.0, 0.0, 0.0, 0.0, -x * u, -y * u]));
        a.set_row(r + 1, &nalgebra::RowSVector::<f64, 8>::from([0.0, 0.0, 0.0, x, y, 1.0, -x * v, -y * v]));
        b[r] = u;
        b[r + 1] = v;
    }
    let h = a
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::DegenerateTransform("perspective corners are collinear".into()))?;
    Ok(SMatrix::<f64, 3, 3>::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0))
}

/// Applies the flip, then scale/rotation/perspective, then the elastic field.
pub fn apply_geometric(img: &Image, masks: &[BinaryMask], params: &GeometricParams) -> Result<GeometricOutput> {
    check_masks(img, masks)?;
    if !(params.scale > 0.0) || !params.scale.is_finite() {
        return Err(Error::DegenerateTransform(format!("scale {}", params.scale)));
    }
    let mut image = img.clone();
    let mut out: Vec<BinaryMask> = masks.to_vec();

    if let Some(axis) = params.flip {
        image = flip_image(&image, axis);
        out = out.iter().map(|m| m.flip(axis)).collect();
    }

    if params.has_warp() {
        let (w, h) = (f64::from(img.width()), f64::from(img.height()));
        let (cx, cy) = ((w - 1.0) / 2.0, (h - 1.0) / 2.0);
        let theta = params.rotation_deg.to_radians();
        let (sin, cos) = theta.sin_cos();
        let inverse_perspective = match params.perspective {
            Some(offsets) => {
                let corners = [[0.0, 0.0], [w - 1.0, 0.0], [w - 1.0, h - 1.0], [0.0, h - 1.0]];
                let moved: [[f64; 2]; 4] = std::array::from_fn(|i| {
                    [corners[i][0] + offsets[i][0] * w, corners[i][1] + offsets[i][1] * h]
                });
                Some(homography(moved, corners)?)
            }
            None => None,
        };
        let scale = params.scale;
        let (warped, warped_masks) = warp(&image, &out, |x, y| {
            let (x, y) = match &inverse_perspective {
                Some(hm) => {
                    let d = hm[(2, 0)] * x + hm[(2, 1)] * y + hm[(2, 2)];
                    (
                        (hm[(0, 0)] * x + hm[(0, 1)] * y + hm[(0, 2)]) / d,
                        (hm[(1, 0)] * x + hm[(1, 1)] * y + hm[(1, 2)]) / d,
                    )
                }
                None => (x, y),
            };
            let (dx, dy) = (x - cx, y - cy);
            // inverse rotation is the transpose
            let rx = cos * dx + sin * dy;
            let ry = -sin * dx + cos * dy;
            (rx / scale + cx, ry / scale + cy)
        })?;
        image = warped;
        out = warped_masks;
    }

    if let Some(e) = &params.elastic {
        let (warped, warped_masks) = super::elastic::elastic_transform(&image, &out, e.alpha, e.sigma, e.seed)?;
        image = warped;
        out = warped_masks;
    }

    let mut dropped = Vec::new();
    let mut kept = Vec::with_capacity(out.len());
    for (i, m) in out.into_iter().enumerate() {
        if m.is_empty() && !masks[i].is_empty() {
            dropped.push(i);
        } else {
            kept.push(m);
        }
    }
    Ok(GeometricOutput {
        image,
        masks: kept,
        dropped,
    })
}
