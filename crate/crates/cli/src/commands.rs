use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use log::{info, warn};
use rayon::prelude::*;
use segvote::augment::{augment_set, build_plan, tta_merge, AugmentRanges, TtaVariant};
use segvote::io::{
    atomic_write, load_ground_truth, load_image, read_predictions, scan_dataset, write_label_masks,
    write_predictions, write_report, write_sample, DatasetLayout,
};
use segvote::seed::derive_seed;
use segvote::synth::{gen_image, perturb, ModelKnobs, SynthSpec};
use segvote::{
    ensemble_dataset, evaluate_dataset, merge_set, worst_k, CellRecord, EnsembleConfig, EnsembleOutput, EvalMode,
    EvalOptions, MatchPolicy, PassthroughEntry, PredictionSet, UsedEntry,
};
use serde::Serialize;

use crate::args::{
    required, AugmentArgs, EnsembleArgs, EvaluateArgs, Globals, MergeClassesArgs, SynthArgs, TtaMergeArgs,
};

fn log_config<T: Serialize>(command: &str, globals: &Globals, cfg: &T) {
    #[derive(Serialize)]
    struct Resolved<'a, T> {
        command: &'a str,
        globals: &'a Globals,
        config: &'a T,
    }
    let doc = Resolved {
        command,
        globals,
        config: cfg,
    };
    info!("resolved config: {}", serde_json::to_string(&doc).expect("config serializes"));
}

fn layout(root: &Path, nucleus_value: Option<u8>, cytoplasm_value: Option<u8>) -> DatasetLayout {
    let mut layout = DatasetLayout::from_root(root);
    if let Some(v) = nucleus_value {
        layout.nucleus_value = v;
    }
    if let Some(v) = cytoplasm_value {
        layout.cytoplasm_value = v;
    }
    layout
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    atomic_write(path, text.as_bytes())?;
    Ok(())
}

#[derive(Serialize)]
struct EvaluateConfig {
    gt: PathBuf,
    pred: PathBuf,
    mode: EvalMode,
    policy: MatchPolicy,
    out: Option<PathBuf>,
    worst: usize,
    nucleus_value: u8,
    cytoplasm_value: u8,
}

pub fn evaluate(globals: &Globals, args: EvaluateArgs) -> Result<()> {
    let gt = required(args.gt, "gt")?;
    let layout = layout(&gt, args.nucleus_value, args.cytoplasm_value);
    let cfg = EvaluateConfig {
        pred: required(args.pred, "pred")?,
        mode: args.mode.unwrap_or_default(),
        policy: if args.greedy.unwrap_or(false) {
            MatchPolicy::Greedy
        } else {
            MatchPolicy::WithReplacement
        },
        out: args.out,
        worst: args.worst.unwrap_or(10),
        nucleus_value: layout.nucleus_value,
        cytoplasm_value: layout.cytoplasm_value,
        gt,
    };
    log_config("evaluate", globals, &cfg);

    let gt_sets = load_ground_truth(&layout)?;
    let preds = read_predictions(&cfg.pred)?;
    let report = evaluate_dataset(
        &gt_sets,
        &preds,
        EvalOptions {
            mode: cfg.mode,
            policy: cfg.policy,
        },
    )?;
    if let Some(out) = &cfg.out {
        write_report(&report, out, cfg.worst)?;
    }

    println!("miou {}", segvote::io::format_miou(report.miou));
    if !globals.quiet {
        println!(
            "{} ground-truth instances over {} images",
            report.total_gt_count,
            report.per_image_sum.len()
        );
        for e in worst_k(&report, cfg.worst) {
            let best = e
                .best_pred
                .map(|p| format!("{}#{}", p.source, p.instance_id))
                .unwrap_or_else(|| "-".into());
            println!("  {:.4}  {} gt#{} <- {}", e.best_iou, e.image_id, e.gt_instance_id, best);
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct UsedImage<'a> {
    image_id: &'a str,
    used: &'a [UsedEntry],
    passthrough: Vec<PassthroughEntry>,
}

/// Writes the submission (refined instances, then the renumbered unused
/// model instances) to `out` and provenance to `<out>.used.json`.
fn write_ensemble(outputs: &[EnsembleOutput], out: &Path) -> Result<PathBuf> {
    let mut sets = Vec::with_capacity(outputs.len());
    let mut used = Vec::with_capacity(outputs.len());
    for o in outputs {
        let (set, passthrough) = o.submission();
        sets.push(set);
        used.push(UsedImage {
            image_id: &o.refined.image_id,
            used: &o.used_map,
            passthrough,
        });
    }
    write_predictions(&sets, out)?;
    let used_path = out.with_extension("used.json");
    write_json(&used_path, &used)?;
    Ok(used_path)
}

fn summarize_ensemble(globals: &Globals, outputs: &[EnsembleOutput], out: &Path, used: &Path) {
    if globals.quiet {
        return;
    }
    let refined: usize = outputs.iter().map(|o| o.refined.instances.len()).sum();
    let passthrough: usize = outputs.iter().map(|o| o.passthrough.len()).sum();
    println!(
        "{} images, {refined} refined instances, {passthrough} unused model instances passed through",
        outputs.len()
    );
    println!("wrote {} and {}", out.display(), used.display());
}

/// Gives every set in `sets` the source `source`.
fn relabel(sets: &mut [PredictionSet], source: &str) {
    for set in sets {
        set.source = source.to_string();
        for inst in &mut set.instances {
            inst.source = source.to_string();
        }
    }
}

fn single_source(sets: &[PredictionSet], path: &Path) -> Result<Option<String>> {
    let sources: BTreeSet<&str> = sets.iter().map(|s| s.source.as_str()).collect();
    match sources.len() {
        0 => Ok(None),
        1 => Ok(sources.into_iter().next().map(str::to_string)),
        _ => Err(segvote::Error::InvalidParameter(format!(
            "{} mixes sources {:?}; expected one model per file",
            path.display(),
            sources
        ))
        .into()),
    }
}

#[derive(Serialize)]
struct EnsembleRunConfig {
    reference: PathBuf,
    models: Vec<PathBuf>,
    out: PathBuf,
    ensemble: EnsembleConfig,
}

pub fn ensemble(globals: &Globals, args: EnsembleArgs) -> Result<()> {
    let reference_path = required(args.reference, "reference")?;
    let models = args.models.unwrap_or_default();
    let out = required(args.out, "out")?;

    let reference = read_predictions(&reference_path)?;
    let ref_source = single_source(&reference, &reference_path)?.unwrap_or_else(|| "reference".into());
    let mut taken = BTreeSet::from([ref_source.clone()]);
    let mut others = Vec::with_capacity(models.len());
    for (i, path) in models.iter().enumerate() {
        let mut sets = read_predictions(path)?;
        let source = single_source(&sets, path)?.unwrap_or_else(|| format!("model_{}", i + 1));
        let unique = if taken.contains(&source) {
            let renamed = format!("{source}_{}", i + 1);
            warn!("{}: source `{source}` already used, renamed to `{renamed}`", path.display());
            renamed
        } else {
            source
        };
        relabel(&mut sets, &unique);
        taken.insert(unique);
        others.push(sets);
    }

    let mut ensemble = EnsembleConfig::new(ref_source);
    if let Some(v) = args.min_iou {
        ensemble.min_iou = v;
    }
    if let Some(v) = args.reuse {
        ensemble.reuse_policy = v;
    }
    let cfg = EnsembleRunConfig {
        reference: reference_path,
        models,
        out,
        ensemble,
    };
    log_config("ensemble", globals, &cfg);

    let outputs = ensemble_dataset(&reference, &others, &cfg.ensemble)?;
    let used = write_ensemble(&outputs, &cfg.out)?;
    summarize_ensemble(globals, &outputs, &cfg.out, &used);
    Ok(())
}

#[derive(Serialize)]
struct TtaConfig {
    variants: Vec<(TtaVariant, PathBuf)>,
    out: PathBuf,
    ensemble: EnsembleConfig,
}

pub fn tta_merge_cmd(globals: &Globals, args: TtaMergeArgs) -> Result<()> {
    let none = required(args.none, "none")?;
    let mut variants = vec![(TtaVariant::None, none)];
    for (v, p) in [
        (TtaVariant::Horizontal, args.horizontal),
        (TtaVariant::Vertical, args.vertical),
        (TtaVariant::Diagonal, args.diagonal),
    ] {
        if let Some(p) = p {
            variants.push((v, p));
        }
    }
    let mut ensemble = EnsembleConfig::new(TtaVariant::None.source());
    if let Some(v) = args.min_iou {
        ensemble.min_iou = v;
    }
    let cfg = TtaConfig {
        variants,
        out: required(args.out, "out")?,
        ensemble,
    };
    log_config("tta-merge", globals, &cfg);

    let loaded = cfg
        .variants
        .iter()
        .map(|(v, p)| Ok((*v, read_predictions(p)?)))
        .collect::<Result<Vec<_>>>()?;
    let outputs = tta_merge(&loaded, &cfg.ensemble)?;
    let used = write_ensemble(&outputs, &cfg.out)?;
    summarize_ensemble(globals, &outputs, &cfg.out, &used);
    Ok(())
}

#[derive(Serialize)]
struct AugmentConfig {
    gt: PathBuf,
    out: PathBuf,
    count: usize,
    originals: bool,
    nucleus_value: u8,
    cytoplasm_value: u8,
    ranges: AugmentRanges,
}

pub fn augment(globals: &Globals, args: AugmentArgs) -> Result<()> {
    let gt = required(args.gt, "gt")?;
    let input = layout(&gt, args.nucleus_value, args.cytoplasm_value);
    let cfg = AugmentConfig {
        out: required(args.out, "out")?,
        count: args.count.unwrap_or(50),
        originals: args.originals.unwrap_or(true),
        nucleus_value: input.nucleus_value,
        cytoplasm_value: input.cytoplasm_value,
        ranges: args.ranges.unwrap_or_default(),
        gt,
    };
    log_config("augment", globals, &cfg);
    let output = layout(&cfg.out, Some(cfg.nucleus_value), Some(cfg.cytoplasm_value));

    let entries = scan_dataset(&input)?;
    let gt_sets = load_ground_truth(&input)?;
    let plan = build_plan(globals.seed, entries.len(), cfg.count, &cfg.ranges)?;
    fs::create_dir_all(&output.images_dir).with_context(|| output.images_dir.display().to_string())?;
    fs::create_dir_all(&output.masks_dir).with_context(|| output.masks_dir.display().to_string())?;

    let written: usize = entries
        .par_iter()
        .zip(&gt_sets)
        .zip(&plan.outputs)
        .map(|((entry, set), params)| -> Result<usize> {
            let image = load_image(&entry.image_path)?;
            let mut n = 0;
            if cfg.originals {
                write_sample(&output, &image, set)?;
                n += 1;
            }
            for (j, p) in params.iter().enumerate() {
                let mut aug = augment_set(&image, set, p)?;
                aug.set.image_id = format!("{}_aug{:03}", set.image_id, j + 1);
                write_sample(&output, &aug.image, &aug.set)?;
                n += 1;
            }
            Ok(n)
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum();
    write_json(&cfg.out.join("plan.json"), &plan)?;

    if written != plan.total_outputs(cfg.originals) {
        return Err(segvote::Error::InvariantViolation(format!(
            "wrote {written} images, plan expects {}",
            plan.total_outputs(cfg.originals)
        ))
        .into());
    }
    if !globals.quiet {
        println!(
            "wrote {written} images ({} source images, {} augmented copies each{})",
            entries.len(),
            cfg.count,
            if cfg.originals { ", plus originals" } else { "" }
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct MergeClassesConfig {
    pred: PathBuf,
    out: PathBuf,
    containment_min: f64,
    nucleus_value: u8,
    cytoplasm_value: u8,
}

#[derive(Serialize)]
struct CellsImage {
    image_id: String,
    source: String,
    cells: Vec<CellRecord>,
}

pub fn merge_classes(globals: &Globals, args: MergeClassesArgs) -> Result<()> {
    let out = required(args.out, "out")?;
    let output = layout(&out, args.nucleus_value, args.cytoplasm_value);
    output.validate()?;
    let cfg = MergeClassesConfig {
        pred: required(args.pred, "pred")?,
        containment_min: args.containment_min.unwrap_or(segvote::DEFAULT_CONTAINMENT_MIN),
        nucleus_value: output.nucleus_value,
        cytoplasm_value: output.cytoplasm_value,
        out,
    };
    log_config("merge-classes", globals, &cfg);

    let sets = read_predictions(&cfg.pred)?;
    let mut seen = BTreeSet::new();
    for set in &sets {
        if !seen.insert(set.image_id.as_str()) {
            return Err(segvote::Error::InvalidParameter(format!(
                "image `{}` appears more than once in {}; label files would collide",
                set.image_id,
                cfg.pred.display()
            ))
            .into());
        }
    }
    fs::create_dir_all(&output.masks_dir).with_context(|| output.masks_dir.display().to_string())?;

    let results = sets
        .par_iter()
        .map(|set| -> Result<(CellsImage, usize)> {
            let cells = merge_set(set, cfg.containment_min)?;
            for cell in &cells {
                if !cell.check_invariants()? {
                    return Err(segvote::Error::InvariantViolation(format!(
                        "cell {} of image `{}` is not split into disjoint nucleus and cytoplasm",
                        cell.cell_id, set.image_id
                    ))
                    .into());
                }
            }
            let files = write_label_masks(&output.masks_dir, &set.image_id, &cells, &output)?;
            let record = CellsImage {
                image_id: set.image_id.clone(),
                source: set.source.clone(),
                cells: cells.iter().map(CellRecord::from).collect(),
            };
            Ok((record, files))
        })
        .collect::<Result<Vec<_>>>()?;
    let files: usize = results.iter().map(|(_, n)| n).sum();
    let records: Vec<CellsImage> = results.into_iter().map(|(r, _)| r).collect();
    write_json(&cfg.out.join("cells.json"), &records)?;

    if !globals.quiet {
        let cells: usize = records.iter().map(|r| r.cells.len()).sum();
        let missing = records
            .iter()
            .flat_map(|r| &r.cells)
            .filter(|c| c.nucleus_missing)
            .count();
        println!(
            "{cells} cells over {} images ({missing} without a nucleus); {files} label files",
            records.len()
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct SynthConfig {
    out: PathBuf,
    images: usize,
    models: usize,
    spec: SynthSpec,
    knobs: ModelKnobs,
    nucleus_value: u8,
    cytoplasm_value: u8,
}

pub fn synth(globals: &Globals, args: SynthArgs) -> Result<()> {
    let out = required(args.out, "out")?;
    let output = layout(&out, args.nucleus_value, args.cytoplasm_value);
    output.validate()?;
    let mut spec = SynthSpec::with_size(
        args.height.unwrap_or(SynthSpec::default().height),
        args.width.unwrap_or(SynthSpec::default().width),
    );
    spec.seed = globals.seed;
    spec.semi_axis = (
        args.min_axis.unwrap_or(spec.semi_axis.0),
        args.max_axis.unwrap_or(spec.semi_axis.1),
    );
    spec.cells = (
        args.min_cells.unwrap_or(spec.cells.0),
        args.max_cells.unwrap_or(spec.cells.1),
    );
    let defaults = ModelKnobs::default();
    let knobs = ModelKnobs {
        jitter_sigma: args.jitter.unwrap_or(defaults.jitter_sigma),
        dropout_prob: args.dropout.unwrap_or(defaults.dropout_prob),
        merge_prob: args.merge.unwrap_or(defaults.merge_prob),
    };
    spec.validate()?;
    knobs.validate()?;
    let cfg = SynthConfig {
        out,
        images: args.images.unwrap_or(20),
        models: args.models.unwrap_or(0),
        spec,
        knobs,
        nucleus_value: output.nucleus_value,
        cytoplasm_value: output.cytoplasm_value,
    };
    log_config("synth", globals, &cfg);

    fs::create_dir_all(&output.images_dir).with_context(|| output.images_dir.display().to_string())?;
    fs::create_dir_all(&output.masks_dir).with_context(|| output.masks_dir.display().to_string())?;
    let generated = (0..cfg.images as u64)
        .into_par_iter()
        .map(|index| -> Result<(PredictionSet, Vec<PredictionSet>)> {
            let (image, gt) = gen_image(&cfg.spec, index)?;
            write_sample(&output, &image, &gt)?;
            let preds = (1..=cfg.models)
                .map(|m| {
                    let seed = derive_seed(cfg.spec.seed, &[m as u64, index]);
                    perturb(&gt, &cfg.knobs, &format!("model_{m}"), seed)
                })
                .collect();
            Ok((gt, preds))
        })
        .collect::<Result<Vec<_>>>()?;

    let gt: Vec<PredictionSet> = generated.iter().map(|(g, _)| g.clone()).collect();
    write_predictions(&gt, &cfg.out.join("gt.json"))?;
    for m in 0..cfg.models {
        let sets: Vec<PredictionSet> = generated.iter().map(|(_, p)| p[m].clone()).collect();
        write_predictions(&sets, &cfg.out.join(format!("model_{}.json", m + 1)))?;
    }
    if !globals.quiet {
        println!(
            "wrote {} images and {} simulated models to {}",
            cfg.images,
            cfg.models,
            cfg.out.display()
        );
    }
    Ok(())
}
