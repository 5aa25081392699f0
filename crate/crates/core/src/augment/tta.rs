//! Flip test-time augmentation.
//!
//! Predictions made on a flipped image are flipped back with the same axis
//! (every flip is its own inverse) and then fused like extra models, with the
//! unflipped variant as the ensemble reference.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::geometric::flip_image;
use super::Image;
use crate::ensemble::{ensemble_dataset, EnsembleConfig, EnsembleOutput};
use crate::error::{Error, Result};
use crate::instance::PredictionSet;
use crate::mask::FlipAxis;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TtaVariant {
    None,
    Horizontal,
    Vertical,
    Diagonal,
}

impl TtaVariant {
    pub const ALL: [TtaVariant; 4] = [
        TtaVariant::None,
        TtaVariant::Horizontal,
        TtaVariant::Vertical,
        TtaVariant::Diagonal,
    ];

    pub fn axis(self) -> Option<FlipAxis> {
        match self {
            TtaVariant::None => None,
            TtaVariant::Horizontal => Some(FlipAxis::Horizontal),
            TtaVariant::Vertical => Some(FlipAxis::Vertical),
            TtaVariant::Diagonal => Some(FlipAxis::Diagonal),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TtaVariant::None => "none",
            TtaVariant::Horizontal => "horizontal",
            TtaVariant::Vertical => "vertical",
            TtaVariant::Diagonal => "diagonal",
        }
    }

    /// Source label used when fusing this variant.
    pub fn source(self) -> String {
        format!("tta_{}", self.as_str())
    }
}

impl fmt::Display for TtaVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TtaVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TtaVariant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown TTA variant `{s}`")))
    }
}

pub fn apply_variant(img: &Image, variant: TtaVariant) -> Image {
    match variant.axis() {
        Some(axis) => flip_image(img, axis),
        None => img.clone(),
    }
}

/// The image under every variant, in [`TtaVariant::ALL`] order.
pub fn tta_expand(img: &Image) -> Vec<(TtaVariant, Image)> {
    TtaVariant::ALL
        .into_iter()
        .map(|v| (v, apply_variant(img, v)))
        .collect()
}

/// Maps predictions made on a variant image back to the original frame.
pub fn tta_invert(preds: &PredictionSet, variant: TtaVariant) -> Result<PredictionSet> {
    let mut out = preds.clone();
    for inst in &mut out.instances {
        if inst.mask.dims() != preds.dims() {
            return Err(Error::DimensionMismatch {
                left: preds.dims(),
                right: inst.mask.dims(),
            });
        }
        if let Some(axis) = variant.axis() {
            inst.mask = inst.mask.flip(axis);
        }
    }
    Ok(out)
}

/// Inverts every variant's predictions and fuses them with the ensemble,
/// using the unflipped variant as reference.
///
/// `cfg.reference_source` is overwritten.
pub fn tta_merge(
    variants: &[(TtaVariant, Vec<PredictionSet>)],
    cfg: &EnsembleConfig,
) -> Result<Vec<EnsembleOutput>> {
    let mut reference = None;
    let mut others = Vec::new();
    for (variant, sets) in variants {
        let source = variant.source();
        let inverted = sets
            .iter()
            .map(|s| {
                let mut inv = tta_invert(s, *variant)?;
                inv.source = source.clone();
                for inst in &mut inv.instances {
                    inst.source = source.clone();
                }
                Ok(inv)
            })
            .collect::<Result<Vec<_>>>()?;
        if *variant == TtaVariant::None {
            if reference.replace(inverted).is_some() {
                return Err(Error::InvalidParameter("variant `none` given twice".into()));
            }
        } else {
            others.push(inverted);
        }
    }
    let reference = reference.ok_or_else(|| Error::MissingReference(TtaVariant::None.source()))?;
    let mut cfg = cfg.clone();
    cfg.reference_source = TtaVariant::None.source();
    ensemble_dataset(&reference, &others, &cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instance::{ClassLabel, Instance};
    use crate::mask::BinaryMask;

    fn preds() -> PredictionSet {
        let mut s = PredictionSet::new("img", "m", 3, 4);
        let left = BinaryMask::from_pixels(3, 4, [(0, 0), (1, 0), (2, 0)]).unwrap();
        s.instances.push(Instance::new(0, ClassLabel::WholeCell, left, 0.8, "m"));
        s
    }

    #[test]
    fn expand_order_and_identity() {
        let img = Image::from_fn(4, 3, |x, y| image::Rgb([x as u8, y as u8, 0]));
        let expanded = tta_expand(&img);
        assert_eq!(expanded.len(), 4);
        assert_eq!(expanded.iter().map(|(v, _)| *v).collect::<Vec<_>>(), TtaVariant::ALL);
        assert_eq!(expanded[0].1, img);
        for (v, im) in &expanded {
            assert_eq!(apply_variant(im, *v), img);
        }
    }

    #[test]
    fn invert_examples() {
        let p = preds();
        assert_eq!(tta_invert(&p, TtaVariant::None).unwrap(), p);
        let h = tta_invert(&p, TtaVariant::Horizontal).unwrap();
        assert!((0..3).all(|r| h.instances[0].mask.get(r, 3)));
        assert_eq!(h.instances[0].score, 0.8);
        for v in TtaVariant::ALL {
            assert_eq!(tta_invert(&tta_invert(&p, v).unwrap(), v).unwrap(), p);
        }
    }

    #[test]
    fn invert_rejects_bad_dims() {
        let mut p = preds();
        p.instances[0].mask = BinaryMask::new(4, 3).unwrap();
        assert!(matches!(
            tta_invert(&p, TtaVariant::Vertical),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn merge_of_consistent_variants_is_exact() {
        let p = preds();
        let variants: Vec<_> = TtaVariant::ALL
            .into_iter()
            .map(|v| (v, vec![tta_invert(&p, v).unwrap()]))
            .collect();
        let out = tta_merge(&variants, &EnsembleConfig::new("ignored")).unwrap();
        assert_eq!(out.len(), 1);
        assert!(out[0].passthrough.is_empty());
        assert_eq!(out[0].refined.instances[0].mask, p.instances[0].mask);
    }

    #[test]
    fn parse_variant() {
        assert_eq!("diagonal".parse::<TtaVariant>().unwrap(), TtaVariant::Diagonal);
        assert!("transpose".parse::<TtaVariant>().is_err());
    }
}
