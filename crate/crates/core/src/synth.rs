//! Synthetic fixtures: elliptical cells with nuclei, and noisy "model
//! predictions" derived from them.
//!
//! Ground truth uses the same id scheme as a loaded dataset: cell `i` is
//! whole cell `3i`, nucleus `3i + 1` and cytoplasm `3i + 2`.
//!
//! ```
//! use segvote::synth::{gen_image, perturb, ModelKnobs, SynthSpec};
//!
//! let spec = SynthSpec::default();
//! let (_image, gt) = gen_image(&spec, 0).unwrap();
//! let pred = perturb(&gt, &ModelKnobs::default(), "model_a", 7);
//! assert_eq!(pred.source, "model_a");
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{displacement_field, Image};
use crate::error::{Error, Result};
use crate::instance::{ClassLabel, Instance, InstanceId, PredictionSet};
use crate::mask::BinaryMask;
use crate::seed::{derive_seed, rng_for};

const GEN_STREAM: u64 = 0x5E47;
const PERTURB_STREAM: u64 = 0x9E27;
/// Placement attempts per cell before giving up.
pub const MAX_ATTEMPTS: usize = 200;
/// Smallest whole-cell area accepted by the generator.
const MIN_CELL_AREA: u64 = 12;
/// Spatial correlation length of the boundary jitter, in pixels.
const JITTER_SMOOTHING: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    pub height: u32,
    pub width: u32,
    /// Inclusive range of cells per image.
    pub cells: (usize, usize),
    /// Inclusive range of cell semi-axis lengths in pixels.
    pub semi_axis: (f64, f64),
    /// Range of nucleus area as a fraction of cell area.
    pub nucleus_ratio: (f64, f64),
    /// Largest fraction of a new cell that may cover earlier cells.
    pub max_overlap: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            seed: 0,
            height: 96,
            width: 96,
            cells: (1, 6),
            semi_axis: (8.0, 16.0),
            nucleus_ratio: (0.2, 0.5),
            max_overlap: 0.1,
        }
    }
}

impl SynthSpec {
    /// Defaults for an `height x width` image, with semi-axes scaled to
    /// between 1/12 and 1/6 of the shorter side.
    pub fn with_size(height: u32, width: u32) -> SynthSpec {
        let side = height.min(width) as f64;
        SynthSpec {
            height,
            width,
            semi_axis: ((side / 12.0).max(1.0), (side / 6.0).max(1.0)),
            ..SynthSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if self.height == 0 || self.width == 0 {
            return bad(format!("image size {}x{} must be non-zero", self.height, self.width));
        }
        if self.cells.0 < 1 || self.cells.0 > self.cells.1 {
            return bad(format!("cell count range {:?} must satisfy 1 <= min <= max", self.cells));
        }
        let (lo, hi) = self.semi_axis;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return bad(format!("semi-axis range {:?} must satisfy 0 < min <= max", self.semi_axis));
        }
        let (lo, hi) = self.nucleus_ratio;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return bad(format!("nucleus ratio range {:?} must lie in [0, 1]", self.nucleus_ratio));
        }
        if !(0.0..=1.0).contains(&self.max_overlap) {
            return bad(format!("overlap allowance {} must lie in [0, 1]", self.max_overlap));
        }
        Ok(())
    }
}

/// Noise applied by one simulated model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelKnobs {
    /// RMS boundary displacement in pixels.
    pub jitter_sigma: f64,
    /// Probability that a cell is predicted as its nucleus only.
    pub dropout_prob: f64,
    /// Probability that a cell is merged with its nearest neighbour.
    pub merge_prob: f64,
}

impl Default for ModelKnobs {
    fn default() -> Self {
        ModelKnobs {
            jitter_sigma: 1.5,
            dropout_prob: 0.05,
            merge_prob: 0.05,
        }
    }
}

impl ModelKnobs {
    pub const ZERO: ModelKnobs = ModelKnobs {
        jitter_sigma: 0.0,
        dropout_prob: 0.0,
        merge_prob: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        if !(self.jitter_sigma >= 0.0 && self.jitter_sigma.is_finite()) {
            return Err(Error::InvalidParameter(format!("jitter sigma {} must be >= 0", self.jitter_sigma)));
        }
        for (name, p) in [("dropout", self.dropout_prob), ("merge", self.merge_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidParameter(format!("{name} probability {p} must lie in [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    theta: f64,
}

impl Ellipse {
    fn contains(&self, row: u32, col: u32) -> bool {
        let (dy, dx) = (row as f64 - self.cy, col as f64 - self.cx);
        let (s, c) = self.theta.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }

    fn rasterize(&self, height: u32, width: u32) -> BinaryMask {
        BinaryMask::from_fn(height, width, |r, c| self.contains(r, c)).expect("validated size")
    }

    /// A scaled copy whose area is `ratio` of this one, offset so that it
    /// stays inside.
    fn inner<R: Rng>(&self, ratio: f64, rng: &mut R) -> Ellipse {
        let s = ratio.sqrt();
        let slack = (1.0 - s) * 0.8;
        let t = rng.random_range(0.0..std::f64::consts::TAU);
        let d = slack * rng.random::<f64>();
        let (u, v) = (d * t.cos() * self.a, d * t.sin() * self.b);
        let (sn, cs) = self.theta.sin_cos();
        Ellipse {
            cx: self.cx + u * cs - v * sn,
            cy: self.cy + u * sn + v * cs,
            a: self.a * s,
            b: self.b * s,
            theta: self.theta,
        }
    }
}

fn paint(img: &mut Image, mask: &BinaryMask, rgb: [u8; 3]) {
    for (r, c) in mask.pixels() {
        img.put_pixel(c, r, image::Rgb(rgb));
    }
}

/// Image `index` of the fixture described by `spec`, with its ground truth.
pub fn gen_image(spec: &SynthSpec, index: u64) -> Result<(Image, PredictionSet)> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = rng_for(spec.seed, &[GEN_STREAM, index]);
    let wanted = rng.random_range(spec.cells.0..=spec.cells.1);

    let mut gt = PredictionSet::new(format!("synth_{index:05}"), crate::io::GT_SOURCE, h, w);
    let mut covered = BinaryMask::new(h, w)?;
    let mut cells = Vec::with_capacity(wanted);
    for i in 0..wanted {
        let placed = (0..MAX_ATTEMPTS).find_map(|_| {
            let a = rng.random_range(spec.semi_axis.0..=spec.semi_axis.1);
            let b = rng.random_range(spec.semi_axis.0..=spec.semi_axis.1);
            let cell = Ellipse {
                cy: rng.random_range(0.0..h as f64),
                cx: rng.random_range(0.0..w as f64),
                a,
                b,
                theta: rng.random_range(0.0..std::f64::consts::PI),
            };
            let ratio = rng.random_range(spec.nucleus_ratio.0..=spec.nucleus_ratio.1);
            let nucleus = cell.inner(ratio, &mut rng);
            let cell_mask = cell.rasterize(h, w);
            let area = cell_mask.area();
            if area < MIN_CELL_AREA {
                return None;
            }
            let shared = cell_mask.intersection_area(&covered).expect("same dims");
            if shared as f64 > spec.max_overlap * area as f64 {
                return None;
            }
            let nucleus_mask = nucleus.rasterize(h, w).intersection(&cell_mask).expect("same dims");
            if nucleus_mask.is_empty() {
                return None;
            }
            Some((cell_mask, nucleus_mask))
        });
        let Some((cell_mask, nucleus_mask)) = placed else {
            return Err(Error::PlacementFailure {
                wanted,
                attempts: MAX_ATTEMPTS,
            });
        };
        covered.union_with(&cell_mask)?;
        let base = 3 * i as InstanceId;
        let cytoplasm = cell_mask.difference(&nucleus_mask)?;
        gt.instances
            .push(Instance::new(base, ClassLabel::WholeCell, cell_mask.clone(), 1.0, crate::io::GT_SOURCE));
        gt.instances.push(
            Instance::new(base + 1, ClassLabel::Nucleus, nucleus_mask.clone(), 1.0, crate::io::GT_SOURCE)
                .with_parent(base),
        );
        if !cytoplasm.is_empty() {
            gt.instances.push(
                Instance::new(base + 2, ClassLabel::Cytoplasm, cytoplasm, 1.0, crate::io::GT_SOURCE)
                    .with_parent(base),
            );
        }
        cells.push((cell_mask, nucleus_mask));
    }

    let mut img = Image::from_pixel(w, h, image::Rgb([236, 226, 238]));
    for (cell, nucleus) in &cells {
        paint(&mut img, cell, [196, 150, 206]);
        paint(&mut img, nucleus, [92, 48, 136]);
    }
    for px in img.pixels_mut() {
        for ch in &mut px.0 {
            *ch = (*ch as i32 + rng.random_range(-6..=6)).clamp(0, 255) as u8;
        }
    }
    Ok((img, gt))
}

fn centroid(mask: &BinaryMask) -> (f64, f64) {
    let n = mask.area().max(1) as f64;
    let (sr, sc) = mask
        .pixels()
        .fold((0.0, 0.0), |(sr, sc), (r, c)| (sr + r as f64, sc + c as f64));
    (sr / n, sc / n)
}

/// Nearest-neighbour resampling along a smooth random displacement field.
struct Jitter {
    dx: Vec<f64>,
    dy: Vec<f64>,
}

impl Jitter {
    fn new(h: u32, w: u32, sigma: f64, seed: u64) -> Option<Jitter> {
        if sigma == 0.0 {
            return None;
        }
        let (mut dx, mut dy) = displacement_field(h, w, 1.0, JITTER_SMOOTHING, seed);
        let rms = (dx.iter().chain(&dy).map(|v| v * v).sum::<f64>() / (2 * dx.len()) as f64).sqrt();
        if rms > 0.0 {
            let k = sigma / rms;
            dx.iter_mut().chain(dy.iter_mut()).for_each(|v| *v *= k);
        }
        Some(Jitter { dx, dy })
    }

    fn apply(&self, mask: &BinaryMask) -> BinaryMask {
        let (h, w) = mask.dims();
        BinaryMask::from_fn(h, w, |r, c| {
            let i = (r * w + c) as usize;
            let sr = (r as f64 + self.dy[i] + 0.5).floor();
            let sc = (c as f64 + self.dx[i] + 0.5).floor();
            sr >= 0.0 && sc >= 0.0 && sr < h as f64 && sc < w as f64 && mask.get(sr as u32, sc as u32)
        })
        .expect("mask dims are valid")
    }
}

/// A simulated model's predictions for `gt`.
///
/// Cells keep their ground-truth ids; a merged pair keeps the ids of the
/// lower-id cell. Cells whose jittered mask vanishes are omitted.
pub fn perturb(gt: &PredictionSet, knobs: &ModelKnobs, source: &str, seed: u64) -> PredictionSet {
    let mut rng = rng_for(seed, &[PERTURB_STREAM]);
    let (h, w) = gt.dims();
    let jitter = Jitter::new(h, w, knobs.jitter_sigma, derive_seed(seed, &[PERTURB_STREAM, 1]));

    let mut cells: Vec<&Instance> = gt.of_class(ClassLabel::WholeCell).collect();
    cells.sort_by_key(|c| c.id);
    let centres: Vec<(f64, f64)> = cells.iter().map(|c| centroid(&c.mask)).collect();

    // Merge groups: each leader absorbs at most one partner.
    let mut partner: Vec<Option<usize>> = vec![None; cells.len()];
    let mut absorbed = vec![false; cells.len()];
    for i in 0..cells.len() {
        if absorbed[i] || partner[i].is_some() || !rng.random_bool(knobs.merge_prob) {
            continue;
        }
        let nearest = (0..cells.len())
            .filter(|&j| j != i && !absorbed[j] && partner[j].is_none())
            .min_by(|&a, &b| {
                let d = |j: usize| (centres[j].0 - centres[i].0).powi(2) + (centres[j].1 - centres[i].1).powi(2);
                d(a).total_cmp(&d(b))
            });
        if let Some(j) = nearest {
            partner[i] = Some(j);
            absorbed[j] = true;
        }
    }

    let mut out = PredictionSet::new(gt.image_id.clone(), source, h, w);
    for (i, cell) in cells.iter().enumerate() {
        if absorbed[i] {
            continue;
        }
        let score = rng.random_range(0.5..=1.0);
        let dropout = rng.random_bool(knobs.dropout_prob);

        let nucleus_of = |c: &Instance| gt.child(c.id, ClassLabel::Nucleus).map(|n| n.mask.clone());
        let mut whole = cell.mask.clone();
        let mut nucleus = nucleus_of(cell);
        if let Some(j) = partner[i] {
            whole.union_with(&cells[j].mask).expect("same dims");
            nucleus = match (nucleus, nucleus_of(cells[j])) {
                (Some(mut a), Some(b)) => {
                    a.union_with(&b).expect("same dims");
                    Some(a)
                }
                (a, b) => a.or(b),
            };
        }
        if let Some(j) = &jitter {
            whole = j.apply(&whole);
            nucleus = nucleus.map(|n| j.apply(&n));
        }
        let nucleus = nucleus.map(|n| n.intersection(&whole).expect("same dims"));
        if dropout {
            if let Some(n) = &nucleus {
                whole = n.clone();
            }
        }
        if whole.is_empty() {
            continue;
        }

        out.instances
            .push(Instance::new(cell.id, ClassLabel::WholeCell, whole.clone(), score, source));
        let nucleus_id = gt.child(cell.id, ClassLabel::Nucleus).map(|n| n.id);
        let cyto_id = gt.child(cell.id, ClassLabel::Cytoplasm).map(|n| n.id);
        if let (Some(id), Some(n)) = (nucleus_id, &nucleus) {
            if !n.is_empty() {
                out.instances
                    .push(Instance::new(id, ClassLabel::Nucleus, n.clone(), score, source).with_parent(cell.id));
            }
        }
        let cytoplasm = match &nucleus {
            Some(n) => whole.difference(n).expect("same dims"),
            None => whole.clone(),
        };
        if let (Some(id), false) = (cyto_id, cytoplasm.is_empty()) {
            out.instances
                .push(Instance::new(id, ClassLabel::Cytoplasm, cytoplasm, score, source).with_parent(cell.id));
        }
    }
    out.instances.sort_by_key(|i| i.id);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::merge_set;
    use crate::eval::{evaluate_dataset, EvalOptions};
    use crate::mask::iou;

    fn strip_scores(set: &PredictionSet) -> Vec<(InstanceId, ClassLabel, BinaryMask, Option<InstanceId>)> {
        set.instances
            .iter()
            .map(|i| (i.id, i.class, i.mask.clone(), i.parent))
            .collect()
    }

    #[test]
    fn single_cell() {
        let spec = SynthSpec {
            cells: (1, 1),
            ..SynthSpec::default()
        };
        let (_, gt) = gen_image(&spec, 3).unwrap();
        gt.validate().unwrap();
        assert_eq!(gt.of_class(ClassLabel::WholeCell).count(), 1);
        let nucleus = gt.child(0, ClassLabel::Nucleus).unwrap();
        assert!(nucleus.mask.is_subset_of(&gt.get(0).unwrap().mask).unwrap());
    }

    #[test]
    fn deterministic() {
        let spec = SynthSpec::default();
        let (a, ga) = gen_image(&spec, 5).unwrap();
        let (b, gb) = gen_image(&spec, 5).unwrap();
        assert_eq!(a.as_raw(), b.as_raw());
        assert_eq!(ga, gb);
        let (_, gc) = gen_image(&spec, 6).unwrap();
        assert_ne!(ga, gc);
        let knobs = ModelKnobs::default();
        assert_eq!(perturb(&ga, &knobs, "m", 1), perturb(&ga, &knobs, "m", 1));
    }

    #[test]
    fn counts_and_invariants_over_100_images() {
        let spec = SynthSpec::default();
        for index in 0..100 {
            let (_, gt) = gen_image(&spec, index).unwrap();
            gt.validate().unwrap();
            let n = gt.of_class(ClassLabel::WholeCell).count();
            assert!((spec.cells.0..=spec.cells.1).contains(&n), "image {index}: {n} cells");
            for cell in merge_set(&gt, 0.5).unwrap() {
                assert!(cell.check_invariants().unwrap());
                assert!(!cell.nucleus_missing());
            }
            let report = evaluate_dataset(&[gt.clone()], &[gt], EvalOptions::default()).unwrap();
            assert_eq!(report.miou, 1.0);
        }
    }

    #[test]
    fn placement_failure() {
        let spec = SynthSpec {
            height: 16,
            width: 16,
            cells: (40, 40),
            max_overlap: 0.0,
            ..SynthSpec::default()
        };
        assert!(matches!(
            gen_image(&spec, 0),
            Err(Error::PlacementFailure { wanted: 40, .. })
        ));
    }

    #[test]
    fn scaled_spec() {
        assert_eq!(SynthSpec::with_size(96, 96), SynthSpec::default());
        let small = SynthSpec {
            cells: (2, 2),
            ..SynthSpec::with_size(24, 32)
        };
        assert_eq!(small.semi_axis, (2.0, 4.0));
        for index in 0..50 {
            let (_, gt) = gen_image(&small, index).unwrap();
            assert_eq!(gt.of_class(ClassLabel::WholeCell).count(), 2);
        }
    }

    #[test]
    fn invalid_specs() {
        let base = SynthSpec::default();
        for spec in [
            SynthSpec { cells: (0, 3), ..base.clone() },
            SynthSpec { cells: (4, 3), ..base.clone() },
            SynthSpec { nucleus_ratio: (0.2, 1.5), ..base.clone() },
            SynthSpec { max_overlap: -0.1, ..base.clone() },
            SynthSpec { height: 0, ..base.clone() },
        ] {
            assert!(spec.validate().is_err(), "{spec:?}");
        }
    }

    #[test]
    fn zero_knobs_change_only_scores() {
        let (_, gt) = gen_image(&SynthSpec::default(), 1).unwrap();
        let pred = perturb(&gt, &ModelKnobs::ZERO, "m", 4);
        assert_eq!(strip_scores(&pred), strip_scores(&gt));
        assert!(pred.instances.iter().all(|i| (0.5..=1.0).contains(&i.score) && i.source == "m"));
    }

    #[test]
    fn full_dropout_keeps_only_nuclei() {
        let (_, gt) = gen_image(&SynthSpec::default(), 2).unwrap();
        let knobs = ModelKnobs {
            dropout_prob: 1.0,
            ..ModelKnobs::ZERO
        };
        let pred = perturb(&gt, &knobs, "m", 4);
        for cell in pred.of_class(ClassLabel::WholeCell) {
            let gt_nucleus = gt.child(cell.id, ClassLabel::Nucleus).unwrap();
            assert_eq!(cell.mask, gt_nucleus.mask);
        }
        assert_eq!(pred.of_class(ClassLabel::Cytoplasm).count(), 0);
    }

    #[test]
    fn full_merge_pairs_cells() {
        let spec = SynthSpec {
            cells: (4, 4),
            ..SynthSpec::default()
        };
        let (_, gt) = gen_image(&spec, 0).unwrap();
        let knobs = ModelKnobs {
            merge_prob: 1.0,
            ..ModelKnobs::ZERO
        };
        let pred = perturb(&gt, &knobs, "m", 4);
        pred.validate().unwrap();
        assert_eq!(pred.of_class(ClassLabel::WholeCell).count(), 2);
        let total: u64 = pred.of_class(ClassLabel::WholeCell).map(|c| c.mask.area()).sum();
        let union = crate::cells::semantic_union(96, 96, &gt.instances).unwrap();
        assert!(total >= union.area());
    }

    #[test]
    fn default_jitter_iou_band() {
        let knobs = ModelKnobs {
            jitter_sigma: ModelKnobs::default().jitter_sigma,
            ..ModelKnobs::ZERO
        };
        let spec = SynthSpec::default();
        let mut ious = Vec::new();
        let mut index = 0;
        while ious.len() < 1000 {
            let (_, gt) = gen_image(&spec, index).unwrap();
            let pred = perturb(&gt, &knobs, "m", index);
            for cell in gt.of_class(ClassLabel::WholeCell) {
                let p = pred.get(cell.id).map(|p| iou(&p.mask, &cell.mask).unwrap()).unwrap_or(0.0);
                ious.push(p);
            }
            index += 1;
        }
        let mean = ious.iter().sum::<f64>() / ious.len() as f64;
        assert!((0.7..=0.98).contains(&mean), "mean IoU {mean}");
    }
}
