//! Seeded offline augmentation and flip test-time augmentation.
//!
//! A plan samples the transform parameters of every `(image, output)` pair
//! from its own ChaCha stream, so plans are reproducible and outputs can be
//! produced in any order or in parallel.
//!
//! Each output composes, in this order: geometric (scale, rotation, flip,
//! perspective, elastic), colour and contrast (brightness, grayscale,
//! hue/saturation, CLAHE, gamma, linear contrast), one blur, one
//! convolutional filter, gaussian noise. Each of them is switched on
//! independently with probability [`AugmentRanges::probability`].

mod elastic;
mod filters;
mod geometric;
mod photometric;
mod tta;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use elastic::{displacement_field, elastic_transform, ElasticParams};
pub use filters::{apply_blur, apply_convolution, apply_noise, BlurParams, ConvParams, NoiseParams};
pub use geometric::{apply_geometric, flip_image, GeometricOutput, GeometricParams};
pub use photometric::{apply_photometric, clahe, gamma_lut, linear_contrast_lut, PhotometricParams};
pub use tta::{apply_variant, tta_expand, tta_invert, tta_merge, TtaVariant};

use crate::error::{Error, Result};
use crate::instance::{ClassLabel, InstanceId, PredictionSet};
use crate::seed::rng_for;

/// RGB, 8 bits per channel.
pub type Image = image::RgbImage;

/// Sampling ranges for every transform. Symmetric ranges are given by their
/// positive bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentRanges {
    pub probability: f64,
    pub scale: (f64, f64),
    pub rotation_deg: f64,
    /// Maximum corner displacement as a fraction of the side length.
    pub perspective: f64,
    pub elastic_alpha: (f64, f64),
    pub elastic_sigma: (f64, f64),
    pub brightness: f64,
    pub grayscale: (f64, f64),
    pub hue_shift_deg: f64,
    pub saturation: (f64, f64),
    pub clahe_clip: (f64, f64),
    pub gamma: (f64, f64),
    pub linear_contrast: (f64, f64),
    /// Odd kernel sizes for the gaussian, median and motion blurs.
    pub blur_kernel: (u32, u32),
    pub sharpen_alpha: (f64, f64),
    pub emboss_alpha: (f64, f64),
    pub emboss_strength: (f64, f64),
    /// Upper bound on the noise standard deviation, in 8-bit units.
    pub noise_sigma: f64,
}

impl Default for AugmentRanges {
    fn default() -> Self {
        AugmentRanges {
            probability: 0.5,
            scale: (0.8, 1.2),
            rotation_deg: 45.0,
            perspective: 0.10,
            elastic_alpha: (10.0, 40.0),
            elastic_sigma: (5.0, 8.0),
            brightness: 0.25,
            grayscale: (0.0, 1.0),
            hue_shift_deg: 20.0,
            saturation: (0.7, 1.3),
            clahe_clip: (1.0, 4.0),
            gamma: (0.7, 1.5),
            linear_contrast: (0.75, 1.25),
            blur_kernel: (3, 7),
            sharpen_alpha: (0.0, 1.0),
            emboss_alpha: (0.0, 1.0),
            emboss_strength: (0.5, 1.5),
            noise_sigma: 10.0,
        }
    }
}

impl AugmentRanges {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidParameter(format!("augmentation range `{what}`")));
        let ordered = |(lo, hi): (f64, f64)| lo <= hi && lo.is_finite() && hi.is_finite();
        if !(0.0..=1.0).contains(&self.probability) {
            return bad("probability");
        }
        if !ordered(self.scale) || self.scale.0 <= 0.0 {
            return bad("scale");
        }
        if !ordered(self.elastic_sigma) || self.elastic_sigma.0 <= 0.0 {
            return bad("elastic_sigma");
        }
        for (name, r) in [
            ("elastic_alpha", self.elastic_alpha),
            ("grayscale", self.grayscale),
            ("saturation", self.saturation),
            ("clahe_clip", self.clahe_clip),
            ("gamma", self.gamma),
            ("linear_contrast", self.linear_contrast),
            ("sharpen_alpha", self.sharpen_alpha),
            ("emboss_alpha", self.emboss_alpha),
            ("emboss_strength", self.emboss_strength),
        ] {
            if !ordered(r) {
                return bad(name);
            }
        }
        if self.blur_kernel.0 == 0 || self.blur_kernel.0 > self.blur_kernel.1 {
            return bad("blur_kernel");
        }
        if self.noise_sigma < 0.0 || self.perspective < 0.0 || self.rotation_deg < 0.0 || self.brightness < 0.0 {
            return bad("symmetric bound");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TransformParams {
    pub geometric: GeometricParams,
    pub photometric: PhotometricParams,
    pub blur: Option<BlurParams>,
    pub convolution: Option<ConvParams>,
    pub noise: Option<NoiseParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPlan {
    pub seed: u64,
    pub n_images: usize,
    pub per_image: usize,
    pub ranges: AugmentRanges,
    /// `outputs[image][k]` parameterizes augmented output `k + 1` of `image`.
    pub outputs: Vec<Vec<TransformParams>>,
}

impl AugmentationPlan {
    /// Total images produced, counting the originals when they are kept.
    pub fn total_outputs(&self, include_originals: bool) -> usize {
        self.n_images * (self.per_image + usize::from(include_originals))
    }
}

fn uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

fn odd_kernel<R: Rng>(rng: &mut R, (lo, hi): (u32, u32)) -> u32 {
    let lo = lo | 1;
    let hi = (hi | 1).max(lo);
    lo + 2 * rng.random_range(0..=(hi - lo) / 2)
}

/// Samples the transform parameters for one output.
pub fn sample_params<R: Rng>(rng: &mut R, ranges: &AugmentRanges) -> TransformParams {
    let p = ranges.probability;
    let on = |rng: &mut R| rng.random_bool(p);
    let sym = |bound: f64| (-bound, bound);

    let mut g = GeometricParams::default();
    if on(rng) {
        g.scale = uniform(rng, ranges.scale);
    }
    if on(rng) {
        g.rotation_deg = uniform(rng, sym(ranges.rotation_deg));
    }
    if on(rng) {
        g.flip = Some(crate::mask::FlipAxis::ALL[rng.random_range(0..3)]);
    }
    if on(rng) {
        g.perspective = Some(std::array::from_fn(|_| {
            [uniform(rng, sym(ranges.perspective)), uniform(rng, sym(ranges.perspective))]
        }));
    }
    if on(rng) {
        g.elastic = Some(ElasticParams {
            alpha: uniform(rng, ranges.elastic_alpha),
            sigma: uniform(rng, ranges.elastic_sigma),
            seed: rng.random(),
        });
    }

    let mut ph = PhotometricParams::default();
    if on(rng) {
        ph.brightness = Some(uniform(rng, sym(ranges.brightness)));
    }
    if on(rng) {
        ph.grayscale = Some(uniform(rng, ranges.grayscale));
    }
    if on(rng) {
        ph.hue_shift_deg = Some(uniform(rng, sym(ranges.hue_shift_deg)));
        ph.saturation = Some(uniform(rng, ranges.saturation));
    }
    if on(rng) {
        ph.clahe_clip = Some(uniform(rng, ranges.clahe_clip));
    }
    if on(rng) {
        ph.gamma = Some(uniform(rng, ranges.gamma));
    }
    if on(rng) {
        ph.linear_contrast = Some(uniform(rng, ranges.linear_contrast));
    }

    let blur = on(rng).then(|| {
        let k = odd_kernel(rng, ranges.blur_kernel);
        match rng.random_range(0..3) {
            0 => BlurParams::Gaussian {
                sigma: f64::from(k - 1).max(1.0) / 6.0,
            },
            1 => BlurParams::Median { kernel: k },
            _ => BlurParams::Motion {
                length: k,
                angle_deg: rng.random_range(0.0..360.0),
            },
        }
    });
    let convolution = on(rng).then(|| {
        if rng.random_bool(0.5) {
            ConvParams::Sharpen {
                alpha: uniform(rng, ranges.sharpen_alpha),
            }
        } else {
            ConvParams::Emboss {
                alpha: uniform(rng, ranges.emboss_alpha),
                strength: uniform(rng, ranges.emboss_strength),
            }
        }
    });
    let noise = on(rng).then(|| NoiseParams {
        sigma: uniform(rng, (0.0, ranges.noise_sigma)),
        seed: rng.random(),
    });

    TransformParams {
        geometric: g,
        photometric: ph,
        blur,
        convolution,
        noise,
    }
}

/// Samples `per_image` parameter sets for each of `n_images` images.
pub fn build_plan(seed: u64, n_images: usize, per_image: usize, ranges: &AugmentRanges) -> Result<AugmentationPlan> {
    if per_image == 0 {
        return Err(Error::InvalidParameter("per_image must be at least 1".into()));
    }
    ranges.validate()?;
    let outputs = (0..n_images)
        .map(|i| {
            (0..per_image)
                .map(|k| sample_params(&mut rng_for(seed, &[i as u64, k as u64 + 1]), ranges))
                .collect()
        })
        .collect();
    Ok(AugmentationPlan {
        seed,
        n_images,
        per_image,
        ranges: ranges.clone(),
        outputs,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedSet {
    pub image: Image,
    pub set: PredictionSet,
    /// Whole-cell instances that left the frame, with their sub-instances.
    pub dropped: Vec<InstanceId>,
}

/// Applies one parameter set to an image and all instances of `set`.
///
/// A whole-cell instance emptied by the geometric stage is dropped together
/// with its linked sub-instances; empty sub-instances are dropped as well.
pub fn augment_set(img: &Image, set: &PredictionSet, params: &TransformParams) -> Result<AugmentedSet> {
    let masks: Vec<_> = set.instances.iter().map(|i| i.mask.clone()).collect();
    let geo = apply_geometric(img, &masks, &params.geometric)?;
    let mut image = apply_photometric(&geo.image, &params.photometric);
    if let Some(b) = &params.blur {
        image = apply_blur(&image, b);
    }
    if let Some(c) = &params.convolution {
        image = apply_convolution(&image, c);
    }
    if let Some(n) = &params.noise {
        image = apply_noise(&image, n);
    }

    let mut kept = geo.masks.into_iter();
    let mut transformed = Vec::with_capacity(set.instances.len());
    for (i, inst) in set.instances.iter().enumerate() {
        let mask = if geo.dropped.contains(&i) {
            crate::mask::BinaryMask::new(set.height, set.width)?
        } else {
            kept.next().expect("one kept mask per non-dropped instance")
        };
        transformed.push((inst, mask));
    }
    let dropped: Vec<InstanceId> = transformed
        .iter()
        .filter(|(inst, m)| inst.class == ClassLabel::WholeCell && m.is_empty())
        .map(|(inst, _)| inst.id)
        .collect();
    let mut out = PredictionSet::new(set.image_id.clone(), set.source.clone(), set.height, set.width);
    for (inst, mask) in transformed {
        let orphaned = inst.parent.is_some_and(|p| dropped.contains(&p));
        if mask.is_empty() || orphaned {
            continue;
        }
        let mut copy = inst.clone();
        copy.mask = mask;
        out.instances.push(copy);
    }
    Ok(AugmentedSet {
        image,
        set: out,
        dropped,
    })
}
