//! Instances and per-image prediction sets.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;

pub type InstanceId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassLabel {
    Nucleus,
    Cytoplasm,
    WholeCell,
}

impl ClassLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            ClassLabel::Nucleus => "nucleus",
            ClassLabel::Cytoplasm => "cytoplasm",
            ClassLabel::WholeCell => "whole_cell",
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One predicted or ground-truth object.
///
/// `parent` links a nucleus or cytoplasm sub-instance to the whole-cell
/// instance it belongs to, when the producer knows it.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub id: InstanceId,
    pub class: ClassLabel,
    pub mask: BinaryMask,
    pub score: f64,
    pub source: String,
    pub parent: Option<InstanceId>,
}

impl Instance {
    pub fn new(
        id: InstanceId,
        class: ClassLabel,
        mask: BinaryMask,
        score: f64,
        source: impl Into<String>,
    ) -> Self {
        Instance {
            id,
            class,
            mask,
            score,
            source: source.into(),
            parent: None,
        }
    }

    pub fn with_parent(mut self, parent: InstanceId) -> Self {
        self.parent = Some(parent);
        self
    }
}

/// Every instance for one image from one source.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub image_id: String,
    pub source: String,
    pub height: u32,
    pub width: u32,
    pub instances: Vec<Instance>,
}

impl PredictionSet {
    pub fn new(image_id: impl Into<String>, source: impl Into<String>, height: u32, width: u32) -> Self {
        PredictionSet {
            image_id: image_id.into(),
            source: source.into(),
            height,
            width,
            instances: Vec::new(),
        }
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.height, self.width)
    }

    pub fn of_class(&self, class: ClassLabel) -> impl Iterator<Item = &Instance> + '_ {
        self.instances.iter().filter(move |i| i.class == class)
    }

    pub fn get(&self, id: InstanceId) -> Option<&Instance> {
        self.instances.iter().find(|i| i.id == id)
    }

    /// The sub-instance of `class` linked to whole-cell `parent`.
    pub fn child(&self, parent: InstanceId, class: ClassLabel) -> Option<&Instance> {
        self.instances
            .iter()
            .find(|i| i.class == class && i.parent == Some(parent))
    }

    pub fn next_id(&self) -> InstanceId {
        self.instances.iter().map(|i| i.id + 1).max().unwrap_or(0)
    }

    /// Checks dimensions, score bounds and id uniqueness.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for inst in &self.instances {
            if inst.mask.dims() != self.dims() {
                return Err(Error::DimensionMismatch {
                    left: self.dims(),
                    right: inst.mask.dims(),
                });
            }
            if !(0.0..=1.0).contains(&inst.score) {
                return Err(Error::schema(
                    format!("image `{}` instance {}", self.image_id, inst.id),
                    format!("score {} outside [0, 1]", inst.score),
                ));
            }
            if !seen.insert(inst.id) {
                return Err(Error::schema(
                    format!("image `{}`", self.image_id),
                    format!("duplicate instance id {}", inst.id),
                ));
            }
        }
        for inst in &self.instances {
            if let Some(p) = inst.parent {
                if !seen.contains(&p) {
                    return Err(Error::schema(
                        format!("image `{}` instance {}", self.image_id, inst.id),
                        format!("parent {p} does not exist"),
                    ));
                }
            }
        }
        Ok(())
    }
}
