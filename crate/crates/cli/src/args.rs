//! Flags and the optional TOML config file.
//!
//! Every subcommand flag can also be set in the config file, under a table
//! named after the subcommand (`[merge_classes]` for `merge-classes`).
//! Flags win over the file.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use segvote::augment::AugmentRanges;
use segvote::{EvalMode, ReusePolicy};
use serde::de::value::{Error as DeError, StrDeserializer};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// Accepts the snake_case serde name of an enum, with `-` allowed for `_`.
fn parse_enum<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    let name = s.replace('-', "_");
    T::deserialize(StrDeserializer::<DeError>::new(&name)).map_err(|e| e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "segvote", version, about = "Cell segmentation evaluation, ensembling and augmentation")]
pub struct Cli {
    /// TOML file with defaults for any flag
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Seed for every random choice
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads (default: available parallelism)
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Skip the human-readable summary on stdout
    #[arg(long, global = true)]
    pub quiet: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Best-match mIoU of a prediction document against a mask dataset
    Evaluate(EvaluateArgs),
    /// Majority-vote fusion of several models around a reference model
    Ensemble(EnsembleArgs),
    /// Write originals plus seeded augmented copies of a dataset
    Augment(AugmentArgs),
    /// Undo flip test-time augmentation and fuse the variants
    TtaMerge(TtaMergeArgs),
    /// Pair cells with nuclei and write two-class label masks
    MergeClasses(MergeClassesArgs),
    /// Generate a synthetic dataset and simulated model predictions
    Synth(SynthArgs),
}

/// Fills every unset field of `self` from `file`.
macro_rules! fill_from {
    ($self:ident, $file:ident; $($field:ident),+ $(,)?) => {
        $( if $self.$field.is_none() { $self.$field = $file.$field; } )+
    };
}

#[derive(Debug, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateArgs {
    /// Dataset root with images/ and masks/
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Prediction document
    #[arg(long)]
    pub pred: Option<PathBuf>,
    /// whole_cell_binary or class_aware
    #[arg(long, value_parser = parse_enum::<EvalMode>)]
    pub mode: Option<EvalMode>,
    /// One-to-one greedy matching instead of best match per ground truth
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub greedy: Option<bool>,
    /// Report path (JSON; a CSV is written next to it)
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Number of lowest-IoU instances to list
    #[arg(long)]
    pub worst: Option<usize>,
    #[arg(long)]
    pub nucleus_value: Option<u8>,
    #[arg(long)]
    pub cytoplasm_value: Option<u8>,
}

impl EvaluateArgs {
    fn fill(&mut self, file: EvaluateArgs) {
        fill_from!(self, file; gt, pred, mode, greedy, out, worst, nucleus_value, cytoplasm_value);
    }
}

#[derive(Debug, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleArgs {
    /// Prediction document of the reference model
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Prediction documents of the other models
    #[arg(long, num_args = 1..)]
    pub models: Option<Vec<PathBuf>>,
    /// Smallest IoU for a model instance to vote
    #[arg(long)]
    pub min_iou: Option<f64>,
    /// with_replacement or without_replacement
    #[arg(long, value_parser = parse_enum::<ReusePolicy>)]
    pub reuse: Option<ReusePolicy>,
    /// Output prediction document; provenance goes to <out>.used.json
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl EnsembleArgs {
    fn fill(&mut self, file: EnsembleArgs) {
        fill_from!(self, file; reference, models, min_iou, reuse, out);
    }
}

#[derive(Debug, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentArgs {
    /// Dataset root with images/ and masks/
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Output dataset root
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Augmented copies per image
    #[arg(long)]
    pub count: Option<usize>,
    /// Also write the unmodified originals
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub originals: Option<bool>,
    #[arg(long)]
    pub nucleus_value: Option<u8>,
    #[arg(long)]
    pub cytoplasm_value: Option<u8>,
    /// Sampling ranges; config file only
    #[arg(skip)]
    pub ranges: Option<AugmentRanges>,
}

impl AugmentArgs {
    fn fill(&mut self, file: AugmentArgs) {
        fill_from!(self, file; gt, out, count, originals, nucleus_value, cytoplasm_value, ranges);
    }
}

#[derive(Debug, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TtaMergeArgs {
    /// Predictions on the unflipped image (the reference)
    #[arg(long)]
    pub none: Option<PathBuf>,
    #[arg(long)]
    pub horizontal: Option<PathBuf>,
    #[arg(long)]
    pub vertical: Option<PathBuf>,
    #[arg(long)]
    pub diagonal: Option<PathBuf>,
    #[arg(long)]
    pub min_iou: Option<f64>,
    /// Output prediction document; provenance goes to <out>.used.json
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl TtaMergeArgs {
    fn fill(&mut self, file: TtaMergeArgs) {
        fill_from!(self, file; none, horizontal, vertical, diagonal, min_iou, out);
    }
}

#[derive(Debug, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MergeClassesArgs {
    /// Prediction document with whole-cell, nucleus and cytoplasm instances
    #[arg(long)]
    pub pred: Option<PathBuf>,
    /// Output directory for masks/ and cells.json
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Fraction of a nucleus that must lie inside its cell
    #[arg(long)]
    pub containment_min: Option<f64>,
    #[arg(long)]
    pub nucleus_value: Option<u8>,
    #[arg(long)]
    pub cytoplasm_value: Option<u8>,
}

impl MergeClassesArgs {
    fn fill(&mut self, file: MergeClassesArgs) {
        fill_from!(self, file; pred, out, containment_min, nucleus_value, cytoplasm_value);
    }
}

#[derive(Debug, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthArgs {
    /// Output dataset root
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Number of images
    #[arg(long)]
    pub images: Option<usize>,
    /// Number of simulated models
    #[arg(long)]
    pub models: Option<usize>,
    #[arg(long)]
    pub height: Option<u32>,
    #[arg(long)]
    pub width: Option<u32>,
    #[arg(long)]
    pub min_cells: Option<usize>,
    #[arg(long)]
    pub max_cells: Option<usize>,
    /// Smallest cell semi-axis in pixels (default: 1/12 of the shorter side)
    #[arg(long)]
    pub min_axis: Option<f64>,
    /// Largest cell semi-axis in pixels (default: 1/6 of the shorter side)
    #[arg(long)]
    pub max_axis: Option<f64>,
    /// RMS boundary jitter of simulated models, in pixels
    #[arg(long)]
    pub jitter: Option<f64>,
    /// Probability a simulated model omits a cell's cytoplasm
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Probability a simulated model merges a cell with its neighbour
    #[arg(long)]
    pub merge: Option<f64>,
    #[arg(long)]
    pub nucleus_value: Option<u8>,
    #[arg(long)]
    pub cytoplasm_value: Option<u8>,
}

impl SynthArgs {
    fn fill(&mut self, file: SynthArgs) {
        fill_from!(
            self, file;
            out, images, models, height, width, min_cells, max_cells, min_axis, max_axis, jitter, dropout, merge,
            nucleus_value, cytoplasm_value
        );
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    threads: Option<usize>,
    quiet: Option<bool>,
    evaluate: EvaluateArgs,
    ensemble: EnsembleArgs,
    augment: AugmentArgs,
    tta_merge: TtaMergeArgs,
    merge_classes: MergeClassesArgs,
    synth: SynthArgs,
}

/// Global settings after merging flags and the config file.
#[derive(Debug, Clone, Serialize)]
pub struct Globals {
    pub seed: u64,
    pub threads: Option<usize>,
    pub quiet: bool,
}

fn read_config(path: &Path) -> Result<FileConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))
}

/// Applies the config file (if any) underneath the parsed flags.
pub fn resolve(mut cli: Cli) -> Result<(Globals, Command)> {
    let file = match &cli.config {
        Some(path) => read_config(path)?,
        None => FileConfig::default(),
    };
    match &mut cli.command {
        Command::Evaluate(a) => a.fill(file.evaluate),
        Command::Ensemble(a) => a.fill(file.ensemble),
        Command::Augment(a) => a.fill(file.augment),
        Command::TtaMerge(a) => a.fill(file.tta_merge),
        Command::MergeClasses(a) => a.fill(file.merge_classes),
        Command::Synth(a) => a.fill(file.synth),
    }
    let globals = Globals {
        seed: cli.seed.or(file.seed).unwrap_or(0),
        threads: cli.threads.or(file.threads).filter(|&t| t > 0),
        quiet: cli.quiet || file.quiet.unwrap_or(false),
    };
    Ok((globals, cli.command))
}

/// A required setting that neither a flag nor the config file provided.
pub fn required<T>(value: Option<T>, flag: &str) -> Result<T> {
    value.ok_or_else(|| anyhow::Error::new(segvote::Error::InvalidParameter(format!("missing required --{flag}"))))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn enum_names() {
        assert_eq!(parse_enum::<EvalMode>("class-aware").unwrap(), EvalMode::ClassAware);
        assert_eq!(parse_enum::<EvalMode>("whole_cell_binary").unwrap(), EvalMode::WholeCellBinary);
        assert!(parse_enum::<EvalMode>("pixel").is_err());
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.toml");
        fs::write(
            &cfg,
            "seed = 5\nthreads = 2\n[ensemble]\nmin_iou = 0.7\nout = \"file.json\"\nreuse = \"with_replacement\"\n",
        )
        .unwrap();
        let cli = Cli::parse_from([
            "segvote",
            "--config",
            cfg.to_str().unwrap(),
            "ensemble",
            "--out",
            "flag.json",
        ]);
        let (g, cmd) = resolve(cli).unwrap();
        assert_eq!(g.seed, 5);
        assert_eq!(g.threads, Some(2));
        let Command::Ensemble(a) = cmd else { panic!() };
        assert_eq!(a.out, Some(PathBuf::from("flag.json")));
        assert_eq!(a.min_iou, Some(0.7));
        assert_eq!(a.reuse, Some(ReusePolicy::WithReplacement));
    }

    #[test]
    fn unknown_config_key_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.toml");
        fs::write(&cfg, "[evaluate]\nthreshold = 1\n").unwrap();
        let cli = Cli::parse_from(["segvote", "--config", cfg.to_str().unwrap(), "evaluate"]);
        assert!(resolve(cli).is_err());
    }
}
