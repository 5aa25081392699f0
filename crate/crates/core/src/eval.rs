//! Best-match mIoU evaluation.
//!
//! Every ground-truth whole-cell instance is paired with the prediction of
//! highest IoU; the mIoU is the sum of those IoUs over the number of
//! ground-truth instances in the whole dataset. Predictions that are nobody's
//! best match are ignored, and a prediction may be the best match of several
//! ground-truth instances.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instance::{ClassLabel, Instance, InstanceId, PredictionSet};
use crate::mask::{ratio, BinaryMask};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// IoU over whole-cell pixels, ignoring the nucleus/cytoplasm split.
    #[default]
    WholeCellBinary,
    /// A pixel counts towards the intersection only when both sides put it in
    /// the same sub-class.
    ClassAware,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchPolicy {
    #[default]
    WithReplacement,
    /// One-to-one greedy assignment in descending IoU order.
    Greedy,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub mode: EvalMode,
    pub policy: MatchPolicy,
}

/// A whole-cell instance together with its (clipped) nucleus, if linked.
#[derive(Debug, Clone)]
pub struct CellView<'a> {
    pub instance: &'a Instance,
    nucleus: Option<BinaryMask>,
}

impl<'a> CellView<'a> {
    pub fn new(instance: &'a Instance, nucleus: Option<&BinaryMask>) -> Result<Self> {
        let nucleus = match nucleus {
            Some(n) => Some(n.intersection(&instance.mask)?),
            None => None,
        };
        Ok(CellView { instance, nucleus })
    }

    /// Whole-cell instances of `set`, each with its parent-linked nucleus.
    pub fn collect(set: &'a PredictionSet) -> Result<Vec<CellView<'a>>> {
        set.of_class(ClassLabel::WholeCell)
            .map(|inst| {
                let nucleus = set.child(inst.id, ClassLabel::Nucleus).map(|n| &n.mask);
                CellView::new(inst, nucleus)
            })
            .collect()
    }

    pub fn iou(&self, other: &CellView<'_>, mode: EvalMode) -> Result<f64> {
        let (a, b) = (&self.instance.mask, &other.instance.mask);
        match mode {
            EvalMode::WholeCellBinary => crate::mask::iou(a, b),
            EvalMode::ClassAware => {
                let (_, union) = a.overlap(b)?;
                let empty;
                let (na, nb) = match (&self.nucleus, &other.nucleus) {
                    (Some(x), Some(y)) => (x, y),
                    (Some(x), None) => {
                        empty = BinaryMask::new(b.height(), b.width())?;
                        (x, &empty)
                    }
                    (None, Some(y)) => {
                        empty = BinaryMask::new(a.height(), a.width())?;
                        (&empty, y)
                    }
                    (None, None) => return crate::mask::iou(a, b),
                };
                let nuclei = na.intersection_area(nb)?;
                let cyto = a.difference(na)?.intersection_area(&b.difference(nb)?)?;
                Ok(ratio(nuclei + cyto, union))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PredRef {
    pub source: String,
    pub instance_id: InstanceId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub pred: Option<PredRef>,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtEntry {
    pub image_id: String,
    pub gt_instance_id: InstanceId,
    pub best_pred: Option<PredRef>,
    pub best_iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub policy: MatchPolicy,
    pub per_gt: Vec<GtEntry>,
    pub per_image_sum: BTreeMap<String, f64>,
    pub total_gt_count: usize,
    pub miou: f64,
}

/// The prediction with the highest IoU against `gt`. Ties keep the earliest
/// candidate; an all-zero candidate list yields no match.
pub fn best_match(gt: &CellView<'_>, preds: &[CellView<'_>], mode: EvalMode) -> Result<Match> {
    let mut best = Match { pred: None, iou: 0.0 };
    for p in preds {
        let value = gt.iou(p, mode)?;
        if value > best.iou {
            best = Match {
                pred: Some(pred_ref(p.instance)),
                iou: value,
            };
        }
    }
    Ok(best)
}

fn pred_ref(inst: &Instance) -> PredRef {
    PredRef {
        source: inst.source.clone(),
        instance_id: inst.id,
    }
}

fn greedy_matches(gts: &[CellView<'_>], preds: &[CellView<'_>], mode: EvalMode) -> Result<Vec<Match>> {
    let mut pairs = Vec::new();
    for (gi, g) in gts.iter().enumerate() {
        for (pi, p) in preds.iter().enumerate() {
            let value = g.iou(p, mode)?;
            if value > 0.0 {
                pairs.push((value, gi, pi));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut out = vec![Match { pred: None, iou: 0.0 }; gts.len()];
    let mut gt_done = vec![false; gts.len()];
    let mut pred_done = vec![false; preds.len()];
    for (value, gi, pi) in pairs {
        if gt_done[gi] || pred_done[pi] {
            continue;
        }
        gt_done[gi] = true;
        pred_done[pi] = true;
        out[gi] = Match {
            pred: Some(pred_ref(preds[pi].instance)),
            iou: value,
        };
    }
    Ok(out)
}

fn evaluate_image(gt: &PredictionSet, preds: &[&PredictionSet], opts: EvalOptions) -> Result<Vec<GtEntry>> {
    let gt_cells = CellView::collect(gt)?;
    for cell in &gt_cells {
        if cell.instance.mask.is_empty() {
            return Err(Error::EmptyGroundTruth {
                image_id: gt.image_id.clone(),
                instance_id: cell.instance.id,
            });
        }
    }
    let mut pred_cells = Vec::new();
    for set in preds {
        if set.dims() != gt.dims() {
            return Err(Error::DimensionMismatch {
                left: gt.dims(),
                right: set.dims(),
            });
        }
        pred_cells.extend(CellView::collect(set)?);
    }
    let matches = match opts.policy {
        MatchPolicy::WithReplacement => gt_cells
            .iter()
            .map(|g| best_match(g, &pred_cells, opts.mode))
            .collect::<Result<Vec<_>>>()?,
        MatchPolicy::Greedy => greedy_matches(&gt_cells, &pred_cells, opts.mode)?,
    };
    Ok(gt_cells
        .iter()
        .zip(matches)
        .map(|(g, m)| GtEntry {
            image_id: gt.image_id.clone(),
            gt_instance_id: g.instance.id,
            best_pred: m.pred,
            best_iou: m.iou,
        })
        .collect())
}

/// Evaluates predictions against ground truth over a whole dataset.
///
/// Images are processed in parallel and reduced in `image_id` order, so the
/// report is identical for any thread count.
pub fn evaluate_dataset(
    gt_sets: &[PredictionSet],
    pred_sets: &[PredictionSet],
    opts: EvalOptions,
) -> Result<EvalReport> {
    let mut images: BTreeMap<&str, (Vec<&PredictionSet>, Vec<&PredictionSet>)> = BTreeMap::new();
    for set in gt_sets {
        images.entry(&set.image_id).or_default().0.push(set);
    }
    for set in pred_sets {
        match images.get_mut(set.image_id.as_str()) {
            Some(entry) => entry.1.push(set),
            None => return Err(Error::UnknownImageId(set.image_id.clone())),
        }
    }
    let work: Vec<_> = images.into_iter().collect();
    let per_image: Vec<Vec<GtEntry>> = work
        .par_iter()
        .map(|(_, (gts, preds))| {
            let mut entries = Vec::new();
            for gt in gts {
                entries.extend(evaluate_image(gt, preds, opts)?);
            }
            Ok(entries)
        })
        .collect::<Result<_>>()?;

    let mut per_gt = Vec::new();
    let mut per_image_sum = BTreeMap::new();
    let mut total = 0.0;
    for ((image_id, _), entries) in work.iter().zip(per_image) {
        let sum: f64 = entries.iter().map(|e| e.best_iou).sum();
        total += sum;
        per_image_sum.insert(image_id.to_string(), sum);
        per_gt.extend(entries);
    }
    if per_gt.is_empty() {
        return Err(Error::NoGroundTruth);
    }
    let total_gt_count = per_gt.len();
    Ok(EvalReport {
        mode: opts.mode,
        policy: opts.policy,
        per_gt,
        per_image_sum,
        total_gt_count,
        miou: total / total_gt_count as f64,
    })
}

/// The `k` entries with the lowest best IoU, ascending.
pub fn worst_k(report: &EvalReport, k: usize) -> Vec<GtEntry> {
    let mut entries = report.per_gt.clone();
    entries.sort_by(|a, b| a.best_iou.total_cmp(&b.best_iou));
    entries.truncate(k);
    entries
}
