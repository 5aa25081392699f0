//! Reference-model majority-vote ensembling.
//!
//! One prediction set is the reference. Each of its cells is refined by a
//! strict-majority pixel vote over the best-IoU instance of every other model
//! (subject to a minimum IoU). Instances of other models that never take part
//! in a vote are passed through unchanged, so they still reach the output.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::PredRef;
use crate::instance::{ClassLabel, Instance, InstanceId, PredictionSet};
use crate::mask::{iou, majority_vote};

pub const ENSEMBLE_SOURCE: &str = "ensemble";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReusePolicy {
    WithReplacement,
    /// A candidate can vote for at most one reference cell.
    #[default]
    WithoutReplacement,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub reference_source: String,
    pub min_iou: f64,
    pub include_reference_in_vote: bool,
    pub fallback_to_reference: bool,
    pub reuse_policy: ReusePolicy,
    /// Classes that are voted on; reference instances of other classes are
    /// copied through.
    pub voted_classes: Vec<ClassLabel>,
}

impl EnsembleConfig {
    pub fn new(reference_source: impl Into<String>) -> Self {
        EnsembleConfig {
            reference_source: reference_source.into(),
            min_iou: 0.5,
            include_reference_in_vote: true,
            fallback_to_reference: true,
            reuse_policy: ReusePolicy::WithoutReplacement,
            voted_classes: vec![ClassLabel::WholeCell],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.min_iou) {
            return Err(Error::InvalidParameter(format!(
                "min_iou {} outside [0, 1]",
                self.min_iou
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsedEntry {
    pub refined_id: InstanceId,
    /// Every input instance consumed by this refined instance: the reference
    /// first, then each matched model instance followed by its sub-instances.
    pub contributors: Vec<PredRef>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleOutput {
    pub refined: PredictionSet,
    pub used_map: Vec<UsedEntry>,
    pub passthrough: Vec<Instance>,
}

/// Where each instance of a combined submission came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassthroughEntry {
    pub output_id: InstanceId,
    pub origin: PredRef,
}

impl EnsembleOutput {
    /// Refined instances followed by the passthrough instances, renumbered
    /// after the refined ids.
    pub fn submission(&self) -> (PredictionSet, Vec<PassthroughEntry>) {
        let mut set = self.refined.clone();
        let mut next = set.next_id();
        let mut remap = BTreeMap::new();
        for inst in &self.passthrough {
            remap.insert((inst.source.as_str(), inst.id), next);
            next += 1;
        }
        let mut records = Vec::with_capacity(self.passthrough.len());
        for inst in &self.passthrough {
            let output_id = remap[&(inst.source.as_str(), inst.id)];
            let mut copy = inst.clone();
            copy.id = output_id;
            copy.parent = inst
                .parent
                .and_then(|p| remap.get(&(inst.source.as_str(), p)).copied());
            set.instances.push(copy);
            records.push(PassthroughEntry {
                output_id,
                origin: PredRef {
                    source: inst.source.clone(),
                    instance_id: inst.id,
                },
            });
        }
        (set, records)
    }
}

/// The same-class candidate with the largest IoU against `ref_inst`, if that
/// IoU is positive and at least `min_iou`. Equal IoUs go to the higher score,
/// then the lower id. Ids in `consumed` are skipped.
pub fn match_for_reference<'a>(
    ref_inst: &Instance,
    candidates: &'a PredictionSet,
    min_iou: f64,
    consumed: &BTreeSet<InstanceId>,
) -> Result<Option<&'a Instance>> {
    let mut best: Option<(f64, &Instance)> = None;
    for cand in candidates.of_class(ref_inst.class) {
        if consumed.contains(&cand.id) {
            continue;
        }
        let value = iou(&ref_inst.mask, &cand.mask)?;
        if value <= 0.0 || value < min_iou {
            continue;
        }
        let better = match best {
            None => true,
            Some((bv, b)) => {
                value > bv
                    || (value == bv
                        && (cand.score > b.score || (cand.score == b.score && cand.id < b.id)))
            }
        };
        if better {
            best = Some((value, cand));
        }
    }
    Ok(best.map(|(_, inst)| inst))
}

/// Majority vote over the participants' masks, keeping the reference's
/// identity, class and score.
pub fn refine_instance(ref_inst: &Instance, participants: &[&Instance], cfg: &EnsembleConfig) -> Result<Instance> {
    if participants.is_empty() {
        return Err(Error::EmptyInput("no participants to vote"));
    }
    let masks: Vec<_> = participants.iter().map(|p| &p.mask).collect();
    let mut mask = majority_vote(&masks)?;
    if mask.is_empty() && cfg.fallback_to_reference {
        mask = ref_inst.mask.clone();
    }
    Ok(Instance {
        id: ref_inst.id,
        class: ref_inst.class,
        mask,
        score: ref_inst.score,
        source: ENSEMBLE_SOURCE.to_string(),
        parent: ref_inst.parent,
    })
}

/// Ensembles the prediction sets of one image.
pub fn ensemble_predictions(sets: &[PredictionSet], cfg: &EnsembleConfig) -> Result<EnsembleOutput> {
    cfg.validate()?;
    if sets.len() < 2 {
        return Err(Error::FewerThanTwoSets(sets.len()));
    }
    let mut reference = None;
    let mut others: Vec<&PredictionSet> = Vec::new();
    for set in sets {
        if set.source == cfg.reference_source {
            if reference.replace(set).is_some() {
                return Err(Error::InvalidParameter(format!(
                    "reference source `{}` appears more than once",
                    cfg.reference_source
                )));
            }
        } else {
            others.push(set);
        }
    }
    let reference = reference.ok_or_else(|| Error::MissingReference(cfg.reference_source.clone()))?;
    others.sort_by(|a, b| a.source.cmp(&b.source));
    for pair in others.windows(2) {
        if pair[0].source == pair[1].source {
            return Err(Error::InvalidParameter(format!(
                "source `{}` appears more than once",
                pair[0].source
            )));
        }
    }
    for set in &others {
        if set.dims() != reference.dims() {
            return Err(Error::DimensionMismatch {
                left: reference.dims(),
                right: set.dims(),
            });
        }
        if set.image_id != reference.image_id {
            return Err(Error::InvalidParameter(format!(
                "cannot ensemble image `{}` with image `{}`",
                reference.image_id, set.image_id
            )));
        }
    }

    let mut order: Vec<&Instance> = reference.instances.iter().collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.id.cmp(&b.id)));

    let mut consumed: Vec<BTreeSet<InstanceId>> = vec![BTreeSet::new(); others.len()];
    let mut used: Vec<BTreeSet<InstanceId>> = vec![BTreeSet::new(); others.len()];
    let mut refined = PredictionSet::new(
        reference.image_id.clone(),
        ENSEMBLE_SOURCE,
        reference.height,
        reference.width,
    );
    let mut used_map = Vec::new();
    let no_skip = BTreeSet::new();

    for ref_inst in order {
        let ref_ref = PredRef {
            source: reference.source.clone(),
            instance_id: ref_inst.id,
        };
        if !cfg.voted_classes.contains(&ref_inst.class) {
            let mut copy = ref_inst.clone();
            copy.source = ENSEMBLE_SOURCE.to_string();
            refined.instances.push(copy);
            used_map.push(UsedEntry {
                refined_id: ref_inst.id,
                contributors: vec![ref_ref],
            });
            continue;
        }

        let mut participants = Vec::new();
        let mut contributors = vec![ref_ref];
        if cfg.include_reference_in_vote {
            participants.push(ref_inst);
        }
        for (mi, model) in others.iter().enumerate() {
            let skip = match cfg.reuse_policy {
                ReusePolicy::WithoutReplacement => &consumed[mi],
                ReusePolicy::WithReplacement => &no_skip,
            };
            if let Some(m) = match_for_reference(ref_inst, model, cfg.min_iou, skip)? {
                participants.push(m);
                contributors.push(PredRef {
                    source: model.source.clone(),
                    instance_id: m.id,
                });
                consumed[mi].insert(m.id);
                used[mi].insert(m.id);
                // sub-instances go wherever their cell went
                for child in model.instances.iter().filter(|i| i.parent == Some(m.id)) {
                    contributors.push(PredRef {
                        source: model.source.clone(),
                        instance_id: child.id,
                    });
                    used[mi].insert(child.id);
                }
            }
        }

        let out = if participants.is_empty() {
            // reference excluded from its own vote and nobody matched
            cfg.fallback_to_reference.then(|| Instance {
                source: ENSEMBLE_SOURCE.to_string(),
                ..ref_inst.clone()
            })
        } else {
            let inst = refine_instance(ref_inst, &participants, cfg)?;
            (!inst.mask.is_empty()).then_some(inst)
        };
        if let Some(inst) = out {
            refined.instances.push(inst);
        }
        used_map.push(UsedEntry {
            refined_id: ref_inst.id,
            contributors,
        });
    }
    refined.instances.sort_by_key(|i| i.id);
    used_map.sort_by_key(|u| u.refined_id);

    let passthrough = others
        .iter()
        .zip(&used)
        .flat_map(|(model, used)| {
            let mut rest: Vec<&Instance> = model
                .instances
                .iter()
                .filter(|i| !used.contains(&i.id))
                .collect();
            rest.sort_by_key(|i| i.id);
            rest.into_iter().cloned()
        })
        .collect();

    Ok(EnsembleOutput {
        refined,
        used_map,
        passthrough,
    })
}

/// Ensembles whole documents image by image.
///
/// `others` holds one list of sets per non-reference model. A model without
/// predictions for an image takes part with an empty set. Output is ordered
/// by image id and does not depend on the thread count.
pub fn ensemble_dataset(
    reference: &[PredictionSet],
    others: &[Vec<PredictionSet>],
    cfg: &EnsembleConfig,
) -> Result<Vec<EnsembleOutput>> {
    cfg.validate()?;
    if others.is_empty() {
        return Err(Error::FewerThanTwoSets(1));
    }
    let model_sources: Vec<String> = others
        .iter()
        .enumerate()
        .map(|(i, sets)| {
            sets.first()
                .map(|s| s.source.clone())
                .unwrap_or_else(|| format!("model_{}", i + 1))
        })
        .collect();
    for (sets, source) in others.iter().zip(&model_sources) {
        if let Some(bad) = sets.iter().find(|s| &s.source != source) {
            return Err(Error::InvalidParameter(format!(
                "model document mixes sources `{source}` and `{}`",
                bad.source
            )));
        }
    }
    if let Some(bad) = reference.iter().find(|s| s.source != cfg.reference_source) {
        return Err(Error::MissingReference(format!(
            "{} (reference document has source `{}`)",
            cfg.reference_source, bad.source
        )));
    }

    let mut images: BTreeMap<&str, Vec<Option<&PredictionSet>>> = BTreeMap::new();
    let n = others.len() + 1;
    for (idx, sets) in std::iter::once(reference).chain(others.iter().map(|v| v.as_slice())).enumerate() {
        for set in sets {
            let entry = images.entry(&set.image_id).or_insert_with(|| vec![None; n]);
            if entry[idx].replace(set).is_some() {
                return Err(Error::InvalidParameter(format!(
                    "image `{}` appears twice in one document",
                    set.image_id
                )));
            }
        }
    }

    let jobs: Vec<_> = images.into_iter().collect();
    jobs.par_iter()
        .map(|(image_id, slots)| {
            let dims = slots.iter().flatten().next().map(|s| s.dims()).unwrap_or((1, 1));
            let sets: Vec<PredictionSet> = slots
                .iter()
                .enumerate()
                .map(|(idx, s)| match s {
                    Some(s) => (*s).clone(),
                    None => {
                        let source = if idx == 0 {
                            cfg.reference_source.clone()
                        } else {
                            model_sources[idx - 1].clone()
                        };
                        PredictionSet::new(*image_id, source, dims.0, dims.1)
                    }
                })
                .collect();
            ensemble_predictions(&sets, cfg)
        })
        .collect()
}
