use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use segvote::io::{read_predictions, scan_dataset, DatasetLayout};
use segvote::{BinaryMask, ClassLabel, PredictionSet};

const GOLDEN: &str = "tests/golden/synth20_model1_miou.txt";

fn segvote(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_segvote"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = segvote(args);
    assert!(
        out.status.success(),
        "segvote {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, images: &str, models: &str, seed: &str) -> PathBuf {
    let data = dir.join("data");
    ok(&["--quiet", "--seed", seed, "synth", "--out", s(&data), "--images", images, "--models", models]);
    data
}

fn pixel_set(m: &BinaryMask) -> HashSet<(u32, u32)> {
    let (h, w) = m.dims();
    (0..h)
        .flat_map(|r| (0..w).map(move |c| (r, c)))
        .filter(|&(r, c)| m.get(r, c))
        .collect()
}

fn brute_force_miou(gt: &[PredictionSet], preds: &[PredictionSet]) -> f64 {
    let (mut total, mut n) = (0.0, 0);
    for g in gt {
        let cands: Vec<_> = preds
            .iter()
            .filter(|p| p.image_id == g.image_id)
            .flat_map(|p| p.of_class(ClassLabel::WholeCell))
            .map(|i| pixel_set(&i.mask))
            .collect();
        for cell in g.of_class(ClassLabel::WholeCell) {
            let a = pixel_set(&cell.mask);
            total += cands
                .iter()
                .map(|b| a.intersection(b).count() as f64 / a.union(b).count() as f64)
                .fold(0.0, f64::max);
            n += 1;
        }
    }
    total / n as f64
}

fn parse_miou(stdout: &str) -> f64 {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix("miou "))
        .expect("miou line")
        .parse()
        .unwrap()
}

#[test]
fn gt_against_itself() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "4", "0", "1");
    let stdout = ok(&["evaluate", "--gt", s(&data), "--pred", s(&data.join("gt.json"))]);
    assert!(stdout.starts_with("miou 1.0000\n"), "{stdout}");
}

#[test]
fn missing_prediction_file() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "1", "0", "1");
    let missing = dir.path().join("nope.json");
    let out = segvote(&["evaluate", "--gt", s(&data), "--pred", s(&missing)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.json"));
}

#[test]
fn malformed_inputs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "1", "1", "1");
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{\"schema_version\": 1, \"images\": [").unwrap();
    let out = segvote(&["evaluate", "--gt", s(&data), "--pred", s(&bad)]);
    assert_eq!(out.status.code(), Some(2));
    let out = segvote(&["ensemble", "--reference", s(&data.join("model_1.json")), "--out", s(&bad)]);
    assert_eq!(out.status.code(), Some(2));
    let out = segvote(&["evaluate", "--pred", s(&bad)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--gt"));
}

#[test]
fn golden_miou() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "20", "1", "2021");
    let stdout = ok(&[
        "evaluate",
        "--gt",
        s(&data),
        "--pred",
        s(&data.join("model_1.json")),
        "--out",
        s(&dir.path().join("report.json")),
    ]);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    let exact = report["miou_exact"].as_f64().unwrap();
    let golden: f64 = fs::read_to_string(GOLDEN).unwrap().trim().parse().unwrap();
    assert!((exact - golden).abs() <= 1e-9, "miou {exact} vs golden {golden}");
    assert_eq!(format!("{:.4}", parse_miou(&stdout)), format!("{golden:.4}"));
    assert!(dir.path().join("report.csv").exists());
}

/// Rewrites the golden value from the brute-force oracle.
/// Run with `cargo test -p segvote-cli --test cli -- --ignored`.
#[test]
#[ignore]
fn regenerate_golden() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "20", "1", "2021");
    let gt = read_predictions(&data.join("gt.json")).unwrap();
    let preds = read_predictions(&data.join("model_1.json")).unwrap();
    fs::create_dir_all("tests/golden").unwrap();
    fs::write(GOLDEN, format!("{:.15}\n", brute_force_miou(&gt, &preds))).unwrap();
}

#[test]
fn ensemble_with_identical_model_reproduces_reference() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "3", "1", "4");
    let model = data.join("model_1.json");
    let out = dir.path().join("ens.json");
    ok(&["ensemble", "--reference", s(&model), "--models", s(&model), "--out", s(&out)]);
    let reference = read_predictions(&model).unwrap();
    let fused = read_predictions(&out).unwrap();
    assert_eq!(reference.len(), fused.len());
    for (r, f) in reference.iter().zip(&fused) {
        assert_eq!(f.source, "ensemble");
        let strip = |s: &PredictionSet| {
            s.instances
                .iter()
                .map(|i| (i.id, i.class, i.mask.clone(), i.parent))
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(r), strip(f));
    }
    assert!(dir.path().join("ens.used.json").exists());
}

#[test]
fn strict_threshold_keeps_reference_masks() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "3", "3", "5");
    let out = dir.path().join("ens.json");
    ok(&[
        "ensemble",
        "--reference",
        s(&data.join("model_1.json")),
        "--models",
        s(&data.join("model_2.json")),
        s(&data.join("model_3.json")),
        "--min-iou",
        "1.0",
        "--out",
        s(&out),
    ]);
    let reference = read_predictions(&data.join("model_1.json")).unwrap();
    let fused = read_predictions(&out).unwrap();
    for (r, f) in reference.iter().zip(&fused) {
        for inst in &r.instances {
            assert_eq!(f.get(inst.id).unwrap().mask, inst.mask);
        }
    }
}

#[test]
fn seven_models_conserve_every_instance() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "6", "7", "6");
    let model = |i: usize| data.join(format!("model_{i}.json"));
    let out = dir.path().join("ens.json");
    let mut args = vec![
        "ensemble".to_string(),
        "--reference".into(),
        s(&model(1)).into(),
        "--models".into(),
    ];
    args.extend((2..=7).map(|i| s(&model(i)).to_string()));
    args.extend(["--out".into(), s(&out).into()]);
    ok(&args.iter().map(String::as_str).collect::<Vec<_>>());

    let inputs: usize = (1..=7)
        .map(|i| read_predictions(&model(i)).unwrap().iter().map(|s| s.instances.len()).sum::<usize>())
        .sum();
    let used: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("ens.used.json")).unwrap()).unwrap();
    let mut distinct = HashSet::new();
    let mut passthrough = 0;
    for image in used.as_array().unwrap() {
        for entry in image["used"].as_array().unwrap() {
            for c in entry["contributors"].as_array().unwrap() {
                distinct.insert((
                    image["image_id"].to_string(),
                    c["source"].to_string(),
                    c["instance_id"].as_u64().unwrap(),
                ));
            }
        }
        passthrough += image["passthrough"].as_array().unwrap().len();
    }
    assert_eq!(distinct.len() + passthrough, inputs);
}

#[test]
fn synth_zero_images_is_an_empty_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "0", "2", "1");
    assert!(scan_dataset(&DatasetLayout::from_root(&data)).unwrap().is_empty());
    assert!(read_predictions(&data.join("gt.json")).unwrap().is_empty());
    assert!(read_predictions(&data.join("model_2.json")).unwrap().is_empty());
}

#[test]
fn merge_classes_writes_both_label_values() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("one");
    ok(&[
        "--quiet", "--seed", "3", "synth", "--out", s(&data), "--images", "1", "--min-cells", "1", "--max-cells", "1",
    ]);
    let out = dir.path().join("cells");
    ok(&[
        "merge-classes",
        "--pred",
        s(&data.join("gt.json")),
        "--out",
        s(&out),
        "--nucleus-value",
        "200",
        "--cytoplasm-value",
        "100",
    ]);
    let files: Vec<_> = fs::read_dir(out.join("masks")).unwrap().collect();
    assert_eq!(files.len(), 1);
    let gt = &read_predictions(&data.join("gt.json")).unwrap()[0];
    let cell = gt.get(0).unwrap();
    let nucleus = gt.child(0, ClassLabel::Nucleus).unwrap();
    let label = segvote::io::load_image(&out.join("masks/synth_00000_1.png")).unwrap();
    for (x, y, px) in label.enumerate_pixels() {
        let want = if nucleus.mask.get(y, x) {
            200
        } else if cell.mask.get(y, x) {
            100
        } else {
            0
        };
        assert_eq!(px.0[0], want, "pixel ({y}, {x})");
    }
    let cells: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("cells.json")).unwrap()).unwrap();
    assert_eq!(cells[0]["cells"][0]["nucleus_missing"], false);
}

#[test]
fn augment_counts_and_plan() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "3", "0", "8");
    let out = dir.path().join("aug");
    let stdout = ok(&["--seed", "8", "augment", "--gt", s(&data), "--out", s(&out), "--count", "4"]);
    assert!(stdout.contains("wrote 15 images"), "{stdout}");
    let entries = scan_dataset(&DatasetLayout::from_root(&out)).unwrap();
    assert_eq!(entries.len(), 15);
    let plan: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("plan.json")).unwrap()).unwrap();
    assert_eq!(plan["per_image"], 4);

    let bare = dir.path().join("bare");
    ok(&["--quiet", "augment", "--gt", s(&data), "--out", s(&bare), "--count", "2", "--originals", "false"]);
    assert_eq!(fs::read_dir(bare.join("images")).unwrap().count(), 6);
}

#[test]
fn tta_merge_of_identical_variants() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "2", "1", "9");
    let preds = read_predictions(&data.join("model_1.json")).unwrap();
    let mut paths = Vec::new();
    for v in segvote::augment::TtaVariant::ALL {
        let flipped: Vec<_> = preds
            .iter()
            .map(|p| segvote::augment::tta_invert(p, v).unwrap())
            .collect();
        let path = dir.path().join(format!("{v}.json"));
        segvote::io::write_predictions(&flipped, &path).unwrap();
        paths.push(path);
    }
    let out = dir.path().join("tta.json");
    ok(&[
        "tta-merge",
        "--none",
        s(&paths[0]),
        "--horizontal",
        s(&paths[1]),
        "--vertical",
        s(&paths[2]),
        "--diagonal",
        s(&paths[3]),
        "--out",
        s(&out),
    ]);
    let merged = read_predictions(&out).unwrap();
    for (p, m) in preds.iter().zip(&merged) {
        assert_eq!(p.instances.len(), m.instances.len());
        for (a, b) in p.instances.iter().zip(&m.instances) {
            assert_eq!((a.id, a.class, &a.mask), (b.id, b.class, &b.mask));
        }
    }
}

#[test]
fn config_file_supplies_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    let data = dir.path().join("data");
    fs::write(
        &cfg,
        format!("seed = 12\n\n[synth]\nout = {:?}\nimages = 2\nmodels = 1\n", s(&data)),
    )
    .unwrap();
    let out = segvote(&["--config", s(&cfg), "synth"]);
    assert!(out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("resolved config") && stderr.contains("\"seed\":12"), "{stderr}");
    assert_eq!(scan_dataset(&DatasetLayout::from_root(&data)).unwrap().len(), 2);

    // flags win
    let other = dir.path().join("other");
    ok(&["--config", s(&cfg), "synth", "--out", s(&other), "--images", "1"]);
    assert_eq!(scan_dataset(&DatasetLayout::from_root(&other)).unwrap().len(), 1);

    fs::write(&cfg, "[synth]\nbogus = 1\n").unwrap();
    assert_eq!(segvote(&["--config", s(&cfg), "synth"]).status.code(), Some(2));
}
