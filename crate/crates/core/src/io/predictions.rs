//! The prediction interchange document.
//!
//! JSON with one instance per line. Sets are sorted by `(image_id, source)`
//! and instances by id, so equal data always serializes to equal bytes.
//!
//! ```text
//! {
//!   "schema_version": 1,
//!   "images": [
//!     {"image_id": "a", "source": "m1", "height": 2, "width": 2, "instances": [
//!       {"id":0,"class":"whole_cell","score":0.9,"source":"m1","parent":null,"rle":[2,1,1]}
//!     ]}
//!   ]
//! }
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::atomic_write;
use crate::error::{Error, Result};
use crate::instance::{ClassLabel, Instance, InstanceId, PredictionSet};
use crate::mask::{BinaryMask, RleCounts};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Document {
    schema_version: u32,
    images: Vec<ImageEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImageEntry {
    image_id: String,
    source: String,
    height: u32,
    width: u32,
    instances: Vec<InstanceEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceEntry {
    id: InstanceId,
    class: ClassLabel,
    score: f64,
    source: String,
    parent: Option<InstanceId>,
    rle: Vec<u64>,
}

fn json<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("plain data serializes")
}

/// Canonical text of a prediction document.
pub fn serialize_predictions(sets: &[PredictionSet]) -> String {
    let mut sorted: Vec<&PredictionSet> = sets.iter().collect();
    sorted.sort_by(|a, b| (&a.image_id, &a.source).cmp(&(&b.image_id, &b.source)));

    let mut out = String::new();
    let _ = writeln!(out, "{{\n  \"schema_version\": {SCHEMA_VERSION},\n  \"images\": [");
    for (si, set) in sorted.iter().enumerate() {
        let _ = write!(
            out,
            "    {{\"image_id\": {}, \"source\": {}, \"height\": {}, \"width\": {}, \"instances\": [",
            json(&set.image_id),
            json(&set.source),
            set.height,
            set.width
        );
        let mut instances: Vec<&Instance> = set.instances.iter().collect();
        instances.sort_by_key(|i| i.id);
        for (ii, inst) in instances.iter().enumerate() {
            let entry = InstanceEntry {
                id: inst.id,
                class: inst.class,
                score: inst.score,
                source: inst.source.clone(),
                parent: inst.parent,
                rle: inst.mask.to_rle().counts,
            };
            out.push_str("\n      ");
            out.push_str(&json(&entry));
            if ii + 1 < instances.len() {
                out.push(',');
            }
        }
        if !instances.is_empty() {
            out.push_str("\n    ");
        }
        out.push_str("]}");
        if si + 1 < sorted.len() {
            out.push(',');
        }
        out.push('\n');
    }
    out.push_str("  ]\n}\n");
    out
}

pub fn parse_predictions(text: &str) -> Result<Vec<PredictionSet>> {
    let doc: Document = serde_json::from_str(text).map_err(|e| {
        Error::schema(format!("line {} column {}", e.line(), e.column()), e.to_string())
    })?;
    if doc.schema_version != SCHEMA_VERSION {
        return Err(Error::schema(
            "schema_version",
            format!("unsupported version {} (expected {SCHEMA_VERSION})", doc.schema_version),
        ));
    }
    let mut seen = std::collections::BTreeSet::new();
    let mut sets = Vec::with_capacity(doc.images.len());
    for entry in doc.images {
        let ctx = format!("image `{}` source `{}`", entry.image_id, entry.source);
        if !seen.insert((entry.image_id.clone(), entry.source.clone())) {
            return Err(Error::schema(ctx, "duplicate (image_id, source) entry"));
        }
        if entry.height == 0 || entry.width == 0 {
            return Err(Error::schema(ctx, "image size must be non-zero"));
        }
        let mut set = PredictionSet::new(entry.image_id.clone(), entry.source, entry.height, entry.width);
        for inst in entry.instances {
            let ictx = format!("image `{}` instance {}", entry.image_id, inst.id);
            if !(0.0..=1.0).contains(&inst.score) {
                return Err(Error::schema(ictx, format!("score {} outside [0, 1]", inst.score)));
            }
            let rle = RleCounts {
                height: entry.height,
                width: entry.width,
                counts: inst.rle,
            };
            let mask = BinaryMask::from_rle(&rle).map_err(|e| Error::schema(ictx.clone(), e.to_string()))?;
            set.instances.push(Instance {
                id: inst.id,
                class: inst.class,
                mask,
                score: inst.score,
                source: inst.source,
                parent: inst.parent,
            });
        }
        set.validate().map_err(|e| match e {
            e @ Error::SchemaViolation { .. } => e,
            other => Error::schema(ctx, other.to_string()),
        })?;
        sets.push(set);
    }
    Ok(sets)
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionSet>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_predictions(&text).map_err(|e| match e {
        Error::SchemaViolation { context, message } => Error::SchemaViolation {
            context: format!("{}: {context}", path.display()),
            message,
        },
        other => other,
    })
}

pub fn write_predictions(sets: &[PredictionSet], path: &Path) -> Result<()> {
    atomic_write(path, serialize_predictions(sets).as_bytes())
}
