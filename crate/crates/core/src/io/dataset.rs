use std::collections::BTreeMap;
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageFormat, Luma};
use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::atomic_write;
use crate::augment::Image;
use crate::cells::{compose_cell, Cell};
use crate::error::{Error, Result};
use crate::instance::{ClassLabel, Instance, PredictionSet};
use crate::mask::BinaryMask;

pub const GT_SOURCE: &str = "gt";

const IMAGE_EXTENSIONS: [&str; 2] = ["png", "bmp"];

/// A directory of images plus one label-mask file per instance, named
/// `<image_id>_<k>.png` with `k` counting from 1. Mask pixels are 0 for
/// background, `nucleus_value` or `cytoplasm_value` inside the instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetLayout {
    pub images_dir: PathBuf,
    pub masks_dir: PathBuf,
    pub nucleus_value: u8,
    pub cytoplasm_value: u8,
}

impl DatasetLayout {
    /// `root/images` and `root/masks` with the default label values 40 / 20.
    pub fn from_root(root: impl AsRef<Path>) -> Self {
        let root = root.as_ref();
        DatasetLayout {
            images_dir: root.join("images"),
            masks_dir: root.join("masks"),
            nucleus_value: 40,
            cytoplasm_value: 20,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.nucleus_value == 0 || self.cytoplasm_value == 0 || self.nucleus_value == self.cytoplasm_value {
            return Err(Error::InvalidParameter(format!(
                "label values must be distinct and non-zero (nucleus {}, cytoplasm {})",
                self.nucleus_value, self.cytoplasm_value
            )));
        }
        Ok(())
    }

    pub fn image_path(&self, image_id: &str) -> PathBuf {
        self.images_dir.join(format!("{image_id}.png"))
    }

    pub fn mask_path(&self, image_id: &str, k: usize) -> PathBuf {
        self.masks_dir.join(format!("{image_id}_{k}.png"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetEntry {
    pub image_id: String,
    pub image_path: PathBuf,
    /// Ordered by `k`.
    pub mask_paths: Vec<PathBuf>,
}

fn list_files(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        let hidden = path
            .file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| n.starts_with('.'));
        if path.is_file() && !hidden {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn has_extension(path: &Path, exts: &[&str]) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| exts.iter().any(|x| x.eq_ignore_ascii_case(e)))
}

/// Lists images and their mask files, checking the naming rule.
pub fn scan_dataset(layout: &DatasetLayout) -> Result<Vec<DatasetEntry>> {
    let mut images = BTreeMap::new();
    for path in list_files(&layout.images_dir)? {
        if !has_extension(&path, &IMAGE_EXTENSIONS) {
            continue;
        }
        let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        if images.insert(id.clone(), path).is_some() {
            return Err(Error::schema(
                layout.images_dir.display().to_string(),
                format!("image `{id}` present with more than one extension"),
            ));
        }
    }

    let mut masks: BTreeMap<String, BTreeMap<u32, PathBuf>> = BTreeMap::new();
    for path in list_files(&layout.masks_dir)? {
        if !has_extension(&path, &["png"]) {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let parsed = stem
            .rsplit_once('_')
            .and_then(|(id, k)| k.parse::<u32>().ok().map(|k| (id.to_string(), k)));
        let Some((id, k)) = parsed else {
            return Err(Error::schema(
                path.display().to_string(),
                "mask file name must be <image_id>_<k>.png",
            ));
        };
        if !images.contains_key(&id) {
            return Err(Error::OrphanMask { path, image_id: id });
        }
        masks.entry(id).or_default().insert(k, path);
    }
    if masks.is_empty() {
        warn!("no mask files under {}; dataset is empty", layout.masks_dir.display());
        return Ok(Vec::new());
    }

    images
        .into_iter()
        .map(|(image_id, image_path)| {
            let files = masks.remove(&image_id).unwrap_or_default();
            for (expected, &k) in (1u32..).zip(files.keys()) {
                if k != expected {
                    return Err(Error::MissingMask { image_id, k: expected });
                }
            }
            Ok(DatasetEntry {
                image_id,
                image_path,
                mask_paths: files.into_values().collect(),
            })
        })
        .collect()
}

fn read_gray_labels(path: &Path) -> Result<GrayImage> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    match img {
        image::DynamicImage::ImageLuma8(g) => Ok(g),
        other => {
            let rgb = other.to_rgb8();
            let mut gray = GrayImage::new(rgb.width(), rgb.height());
            for (x, y, p) in rgb.enumerate_pixels() {
                if p[0] != p[1] || p[1] != p[2] {
                    return Err(Error::UnexpectedLabelValue {
                        path: path.to_path_buf(),
                        value: p[0].max(p[1]).max(p[2]),
                    });
                }
                gray.put_pixel(x, y, Luma([p[0]]));
            }
            Ok(gray)
        }
    }
}

/// Splits a label-mask file into (nucleus, cytoplasm) masks.
fn read_label_mask(path: &Path, dims: (u32, u32), layout: &DatasetLayout) -> Result<(BinaryMask, BinaryMask)> {
    let gray = read_gray_labels(path)?;
    let actual = (gray.height(), gray.width());
    if actual != dims {
        return Err(Error::FileDimensionMismatch {
            path: path.to_path_buf(),
            expected: dims,
            actual,
        });
    }
    let mut nucleus = BinaryMask::new(dims.0, dims.1)?;
    let mut cytoplasm = BinaryMask::new(dims.0, dims.1)?;
    for (x, y, p) in gray.enumerate_pixels() {
        match p[0] {
            0 => {}
            v if v == layout.nucleus_value => nucleus.insert(y, x),
            v if v == layout.cytoplasm_value => cytoplasm.insert(y, x),
            value => {
                return Err(Error::UnexpectedLabelValue {
                    path: path.to_path_buf(),
                    value,
                })
            }
        }
    }
    if nucleus.is_empty() && cytoplasm.is_empty() {
        return Err(Error::EmptyMaskFile { path: path.to_path_buf() });
    }
    Ok((nucleus, cytoplasm))
}

fn image_dims(path: &Path) -> Result<(u32, u32)> {
    let (w, h) = image::image_dimensions(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok((h, w))
}

/// Ground truth for one image. Mask file `k` yields a whole-cell instance with
/// id `3(k-1)` and, when non-empty, a nucleus (`3(k-1)+1`) and a cytoplasm
/// (`3(k-1)+2`) sub-instance linked to it.
fn load_entry(entry: &DatasetEntry, layout: &DatasetLayout) -> Result<PredictionSet> {
    let (h, w) = image_dims(&entry.image_path)?;
    let mut set = PredictionSet::new(entry.image_id.clone(), GT_SOURCE, h, w);
    for (i, path) in entry.mask_paths.iter().enumerate() {
        let (nucleus, cytoplasm) = read_label_mask(path, (h, w), layout)?;
        let base = 3 * i as u32;
        let whole = nucleus.union(&cytoplasm)?;
        set.instances
            .push(Instance::new(base, ClassLabel::WholeCell, whole, 1.0, GT_SOURCE));
        if !nucleus.is_empty() {
            set.instances.push(
                Instance::new(base + 1, ClassLabel::Nucleus, nucleus, 1.0, GT_SOURCE).with_parent(base),
            );
        }
        if !cytoplasm.is_empty() {
            set.instances.push(
                Instance::new(base + 2, ClassLabel::Cytoplasm, cytoplasm, 1.0, GT_SOURCE).with_parent(base),
            );
        }
    }
    Ok(set)
}

/// One prediction set per image, ordered by image id.
pub fn load_ground_truth(layout: &DatasetLayout) -> Result<Vec<PredictionSet>> {
    layout.validate()?;
    let entries = scan_dataset(layout)?;
    entries.par_iter().map(|e| load_entry(e, layout)).collect()
}

pub fn load_image(path: &Path) -> Result<Image> {
    image::open(path)
        .map(|img| img.to_rgb8())
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

fn encode_png(img: &impl PngSource, path: &Path) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    img.write_png(&mut buf).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(buf.into_inner())
}

trait PngSource {
    fn write_png(&self, buf: &mut Cursor<Vec<u8>>) -> image::ImageResult<()>;
}

impl PngSource for Image {
    fn write_png(&self, buf: &mut Cursor<Vec<u8>>) -> image::ImageResult<()> {
        self.write_to(buf, ImageFormat::Png)
    }
}

impl PngSource for GrayImage {
    fn write_png(&self, buf: &mut Cursor<Vec<u8>>) -> image::ImageResult<()> {
        self.write_to(buf, ImageFormat::Png)
    }
}

pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    let bytes = encode_png(img, path)?;
    atomic_write(path, &bytes)
}

fn write_gray(path: &Path, img: &GrayImage) -> Result<()> {
    let bytes = encode_png(img, path)?;
    atomic_write(path, &bytes)
}

/// Label image of one cell: nucleus pixels `nucleus_value`, cytoplasm
/// `cytoplasm_value`, background 0.
pub fn label_image(cell: &Cell, layout: &DatasetLayout) -> GrayImage {
    let (h, w) = cell.cell_mask.dims();
    let mut img = GrayImage::new(w, h);
    for (r, c) in cell.cytoplasm_mask.pixels() {
        img.put_pixel(c, r, Luma([layout.cytoplasm_value]));
    }
    for (r, c) in cell.nucleus_mask.pixels() {
        img.put_pixel(c, r, Luma([layout.nucleus_value]));
    }
    img
}

/// Writes `<image_id>_<k>.png` for each cell, `k` from 1. Empty cells are skipped.
pub fn write_label_masks(dir: &Path, image_id: &str, cells: &[Cell], layout: &DatasetLayout) -> Result<usize> {
    let mut k = 0;
    for cell in cells.iter().filter(|c| !c.cell_mask.is_empty()) {
        k += 1;
        write_gray(&dir.join(format!("{image_id}_{k}.png")), &label_image(cell, layout))?;
    }
    Ok(k)
}

/// Writes an image and its ground truth in the dataset layout. Each
/// whole-cell instance becomes one mask file, split by its linked nucleus.
pub fn write_sample(layout: &DatasetLayout, image: &Image, set: &PredictionSet) -> Result<usize> {
    write_image(&layout.image_path(&set.image_id), image)?;
    let mut cells = Vec::new();
    for cell in set.of_class(ClassLabel::WholeCell) {
        cells.push(compose_cell(cell, set.child(cell.id, ClassLabel::Nucleus))?);
    }
    write_label_masks(&layout.masks_dir, &set.image_id, &cells, layout)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout(dir: &Path) -> DatasetLayout {
        DatasetLayout::from_root(dir)
    }

    fn write_mask(path: &Path, w: u32, h: u32, f: impl Fn(u32, u32) -> u8) {
        let img = GrayImage::from_fn(w, h, |x, y| Luma([f(x, y)]));
        write_gray(path, &img).unwrap();
    }

    #[test]
    fn empty_masks_dir_gives_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let l = layout(dir.path());
        fs::create_dir_all(&l.masks_dir).unwrap();
        write_image(&l.image_path("a"), &Image::new(4, 4)).unwrap();
        assert!(load_ground_truth(&l).unwrap().is_empty());
    }

    #[test]
    fn pixel_counts_from_label_file() {
        let dir = tempfile::tempdir().unwrap();
        let l = layout(dir.path());
        write_image(&l.image_path("img"), &Image::new(10, 6)).unwrap();
        // row 0: 10 nucleus pixels; rows 1-2: 20 cytoplasm pixels
        write_mask(&l.mask_path("img", 1), 10, 6, |_, y| match y {
            0 => 40,
            1 | 2 => 20,
            _ => 0,
        });
        let sets = load_ground_truth(&l).unwrap();
        assert_eq!(sets.len(), 1);
        let set = &sets[0];
        assert_eq!(set.dims(), (6, 10));
        let whole: Vec<_> = set.of_class(ClassLabel::WholeCell).collect();
        assert_eq!(whole.len(), 1);
        assert_eq!(whole[0].mask.area(), 30);
        assert_eq!(set.child(0, ClassLabel::Nucleus).unwrap().mask.area(), 10);
        assert_eq!(set.child(0, ClassLabel::Cytoplasm).unwrap().mask.area(), 20);
    }

    #[test]
    fn unexpected_value_names_file() {
        let dir = tempfile::tempdir().unwrap();
        let l = layout(dir.path());
        write_image(&l.image_path("img"), &Image::new(3, 3)).unwrap();
        write_mask(&l.mask_path("img", 1), 3, 3, |x, _| if x == 0 { 77 } else { 0 });
        match load_ground_truth(&l) {
            Err(Error::UnexpectedLabelValue { path, value }) => {
                assert_eq!(value, 77);
                assert!(path.ends_with("img_1.png"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn gaps_and_orphans_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let l = layout(dir.path());
        write_image(&l.image_path("img"), &Image::new(3, 3)).unwrap();
        write_mask(&l.mask_path("img", 2), 3, 3, |_, _| 20);
        assert!(matches!(
            load_ground_truth(&l),
            Err(Error::MissingMask { k: 1, .. })
        ));
        write_mask(&l.mask_path("other", 1), 3, 3, |_, _| 20);
        assert!(matches!(load_ground_truth(&l), Err(Error::OrphanMask { .. })));
    }

    #[test]
    fn dimension_and_empty_checks() {
        let dir = tempfile::tempdir().unwrap();
        let l = layout(dir.path());
        write_image(&l.image_path("img"), &Image::new(3, 3)).unwrap();
        write_mask(&l.mask_path("img", 1), 4, 3, |_, _| 20);
        assert!(matches!(
            load_ground_truth(&l),
            Err(Error::FileDimensionMismatch { .. })
        ));
        write_mask(&l.mask_path("img", 1), 3, 3, |_, _| 0);
        assert!(matches!(load_ground_truth(&l), Err(Error::EmptyMaskFile { .. })));
    }

    #[test]
    fn write_sample_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let l = layout(dir.path());
        let mut set = PredictionSet::new("s", GT_SOURCE, 5, 5);
        let cell = BinaryMask::from_fn(5, 5, |r, c| r < 3 && c < 3).unwrap();
        let nucleus = BinaryMask::from_pixels(5, 5, [(1, 1)]).unwrap();
        set.instances.push(Instance::new(0, ClassLabel::WholeCell, cell, 1.0, GT_SOURCE));
        set.instances
            .push(Instance::new(1, ClassLabel::Nucleus, nucleus, 1.0, GT_SOURCE).with_parent(0));
        set.instances.push(Instance::new(
            2,
            ClassLabel::Cytoplasm,
            BinaryMask::from_fn(5, 5, |r, c| r < 3 && c < 3 && (r, c) != (1, 1)).unwrap(),
            1.0,
            GT_SOURCE,
        )
        .with_parent(0));
        assert_eq!(write_sample(&l, &Image::new(5, 5), &set).unwrap(), 1);
        let loaded = load_ground_truth(&l).unwrap();
        assert_eq!(loaded, vec![set]);
    }
}
