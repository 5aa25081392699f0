//! Non-training machinery for instance segmentation of plasma cells:
//! bit-packed binary masks with run-length coding, best-match mIoU
//! evaluation, a reference-model majority-vote ensemble, whole-cell /
//! nucleus / cytoplasm merging, seeded augmentation with flip test-time
//! augmentation, and a synthetic data generator.
//!
//! ```
//! use segvote::{iou, BinaryMask};
//!
//! let a = BinaryMask::from_pixels(2, 2, [(0, 0), (0, 1)])?;
//! let b = BinaryMask::from_pixels(2, 2, [(0, 1), (1, 1)])?;
//! assert!((iou(&a, &b)? - 1.0 / 3.0).abs() < 1e-12);
//! # Ok::<(), segvote::Error>(())
//! ```

pub mod augment;
pub mod cells;
pub mod ensemble;
mod error;
pub mod eval;
pub mod instance;
pub mod io;
pub mod mask;
pub mod seed;
pub mod synth;

pub use cells::{
    compose_cell, merge_classes, merge_set, pair_nucleus, semantic_union, Cell, CellRecord, DEFAULT_CONTAINMENT_MIN,
};
pub use ensemble::{
    ensemble_dataset, ensemble_predictions, match_for_reference, refine_instance, EnsembleConfig,
    EnsembleOutput, PassthroughEntry, ReusePolicy, UsedEntry,
};
pub use error::{Error, Result};
pub use eval::{
    best_match, evaluate_dataset, worst_k, EvalMode, EvalOptions, EvalReport, GtEntry, MatchPolicy, PredRef,
};
pub use instance::{ClassLabel, Instance, InstanceId, PredictionSet};
pub use mask::{iou, majority_vote, rle_decode, rle_encode, set_ops, BinaryMask, FlipAxis, RleCounts};
