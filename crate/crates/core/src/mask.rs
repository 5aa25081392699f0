//! Binary masks and the operations every other module builds on.
//!
//! A [`BinaryMask`] stores one bit per pixel, packed into `u64` words in
//! column-major order: pixel `(row, col)` lives at bit `col * height + row`.
//! Column-major packing makes run-length coding a linear scan over the words,
//! and keeps set algebra and IoU down to popcounts.
//!
//! Bits past `height * width` in the last word are always zero, so derived
//! equality and hashing compare pixel content.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const WORD_BITS: u64 = 64;

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: u32,
    width: u32,
    words: Vec<u64>,
}

/// Column-major, background-first run lengths.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleCounts {
    pub height: u32,
    pub width: u32,
    pub counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SetOps {
    pub intersection: BinaryMask,
    pub union: BinaryMask,
    pub difference: BinaryMask,
}

/// Flip axes shared by masks, images and test-time augmentation.
///
/// `Diagonal` is a horizontal flip followed by a vertical one (a 180° rotation),
/// which keeps the image dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlipAxis {
    Horizontal,
    Vertical,
    Diagonal,
}

impl FlipAxis {
    pub const ALL: [FlipAxis; 3] = [FlipAxis::Horizontal, FlipAxis::Vertical, FlipAxis::Diagonal];

    /// Maps a pixel coordinate through the flip.
    pub fn map(self, row: u32, col: u32, height: u32, width: u32) -> (u32, u32) {
        match self {
            FlipAxis::Horizontal => (row, width - 1 - col),
            FlipAxis::Vertical => (height - 1 - row, col),
            FlipAxis::Diagonal => (height - 1 - row, width - 1 - col),
        }
    }
}

fn word_count(bits: u64) -> usize {
    bits.div_ceil(WORD_BITS) as usize
}

impl BinaryMask {
    /// An empty mask of the given size.
    pub fn new(height: u32, width: u32) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidDimensions { height, width });
        }
        let bits = u64::from(height) * u64::from(width);
        Ok(BinaryMask {
            height,
            width,
            words: vec![0; word_count(bits)],
        })
    }

    pub fn full(height: u32, width: u32) -> Result<Self> {
        let mut mask = Self::new(height, width)?;
        let len = mask.len();
        mask.set_range(0, len);
        Ok(mask)
    }

    pub fn from_fn(height: u32, width: u32, mut f: impl FnMut(u32, u32) -> bool) -> Result<Self> {
        let mut mask = Self::new(height, width)?;
        for col in 0..width {
            for row in 0..height {
                if f(row, col) {
                    mask.insert(row, col);
                }
            }
        }
        Ok(mask)
    }

    /// Builds a mask from `(row, col)` pairs.
    pub fn from_pixels(
        height: u32,
        width: u32,
        pixels: impl IntoIterator<Item = (u32, u32)>,
    ) -> Result<Self> {
        let mut mask = Self::new(height, width)?;
        for (row, col) in pixels {
            if row >= height || col >= width {
                return Err(Error::InvalidParameter(format!(
                    "pixel ({row}, {col}) outside {height}x{width} mask"
                )));
            }
            mask.insert(row, col);
        }
        Ok(mask)
    }

    #[inline]
    pub fn height(&self) -> u32 {
        self.height
    }

    #[inline]
    pub fn width(&self) -> u32 {
        self.width
    }

    /// `(height, width)`.
    #[inline]
    pub fn dims(&self) -> (u32, u32) {
        (self.height, self.width)
    }

    #[inline]
    fn len(&self) -> u64 {
        u64::from(self.height) * u64::from(self.width)
    }

    #[inline]
    fn index(&self, row: u32, col: u32) -> u64 {
        debug_assert!(row < self.height && col < self.width);
        u64::from(col) * u64::from(self.height) + u64::from(row)
    }

    #[inline]
    pub fn get(&self, row: u32, col: u32) -> bool {
        let i = self.index(row, col);
        self.words[(i / WORD_BITS) as usize] >> (i % WORD_BITS) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, row: u32, col: u32, value: bool) {
        let i = self.index(row, col);
        let word = &mut self.words[(i / WORD_BITS) as usize];
        let bit = 1u64 << (i % WORD_BITS);
        if value {
            *word |= bit;
        } else {
            *word &= !bit;
        }
    }

    #[inline]
    pub fn insert(&mut self, row: u32, col: u32) {
        self.set(row, col, true);
    }

    /// Number of set pixels.
    pub fn area(&self) -> u64 {
        self.words.iter().map(|w| u64::from(w.count_ones())).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    /// Set pixels as `(row, col)`, in column-major order.
    pub fn pixels(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        let height = u64::from(self.height);
        self.set_bits()
            .map(move |i| ((i % height) as u32, (i / height) as u32))
    }

    fn set_bits(&self) -> impl Iterator<Item = u64> + '_ {
        self.words.iter().enumerate().flat_map(|(wi, &word)| {
            let base = wi as u64 * WORD_BITS;
            let mut rest = word;
            std::iter::from_fn(move || {
                if rest == 0 {
                    return None;
                }
                let tz = rest.trailing_zeros();
                rest &= rest - 1;
                Some(base + u64::from(tz))
            })
        })
    }

    /// Sets bits `[start, end)` in linear (column-major) index space.
    fn set_range(&mut self, start: u64, end: u64) {
        let mut i = start;
        while i < end {
            let wi = (i / WORD_BITS) as usize;
            let offset = i % WORD_BITS;
            let take = (WORD_BITS - offset).min(end - i);
            let bits = if take == WORD_BITS {
                u64::MAX
            } else {
                ((1u64 << take) - 1) << offset
            };
            self.words[wi] |= bits;
            i += take;
        }
    }

    /// First index `>= from` whose bit differs from `value`, or `len` if none.
    fn next_change(&self, from: u64, value: bool) -> u64 {
        let len = self.len();
        if from >= len {
            return len;
        }
        let mut wi = (from / WORD_BITS) as usize;
        let mut word = if value { !self.words[wi] } else { self.words[wi] };
        word &= u64::MAX << (from % WORD_BITS);
        loop {
            if word != 0 {
                let pos = wi as u64 * WORD_BITS + u64::from(word.trailing_zeros());
                return pos.min(len);
            }
            wi += 1;
            if wi >= self.words.len() {
                return len;
            }
            word = if value { !self.words[wi] } else { self.words[wi] };
        }
    }

    pub fn ensure_same_dims(&self, other: &BinaryMask) -> Result<()> {
        if self.dims() == other.dims() {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                left: self.dims(),
                right: other.dims(),
            })
        }
    }

    fn zip_words(&self, other: &BinaryMask, f: impl Fn(u64, u64) -> u64) -> Result<BinaryMask> {
        self.ensure_same_dims(other)?;
        Ok(BinaryMask {
            height: self.height,
            width: self.width,
            words: self
                .words
                .iter()
                .zip(&other.words)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn intersection(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.zip_words(other, |a, b| a & b)
    }

    pub fn union(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.zip_words(other, |a, b| a | b)
    }

    /// Pixels in `self` but not in `other`.
    pub fn difference(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.zip_words(other, |a, b| a & !b)
    }

    /// In-place union; used by accumulation loops.
    pub fn union_with(&mut self, other: &BinaryMask) -> Result<()> {
        self.ensure_same_dims(other)?;
        for (a, &b) in self.words.iter_mut().zip(&other.words) {
            *a |= b;
        }
        Ok(())
    }

    pub fn intersection_area(&self, other: &BinaryMask) -> Result<u64> {
        self.ensure_same_dims(other)?;
        Ok(self
            .words
            .iter()
            .zip(&other.words)
            .map(|(&a, &b)| u64::from((a & b).count_ones()))
            .sum())
    }

    /// `(|a ∩ b|, |a ∪ b|)` in a single pass.
    pub fn overlap(&self, other: &BinaryMask) -> Result<(u64, u64)> {
        self.ensure_same_dims(other)?;
        Ok(self
            .words
            .iter()
            .zip(&other.words)
            .fold((0, 0), |(i, u), (&a, &b)| {
                (
                    i + u64::from((a & b).count_ones()),
                    u + u64::from((a | b).count_ones()),
                )
            }))
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> Result<bool> {
        self.ensure_same_dims(other)?;
        Ok(self.words.iter().zip(&other.words).all(|(&a, &b)| a & !b == 0))
    }

    pub fn is_disjoint(&self, other: &BinaryMask) -> Result<bool> {
        Ok(self.intersection_area(other)? == 0)
    }

    pub fn flip(&self, axis: FlipAxis) -> BinaryMask {
        let mut out = BinaryMask {
            height: self.height,
            width: self.width,
            words: vec![0; self.words.len()],
        };
        for (row, col) in self.pixels() {
            let (r, c) = axis.map(row, col, self.height, self.width);
            out.insert(r, c);
        }
        out
    }

    /// Column-major, background-first run-length encoding.
    pub fn to_rle(&self) -> RleCounts {
        let len = self.len();
        let mut counts = Vec::new();
        let mut pos = 0;
        let mut value = false;
        while pos < len {
            let next = self.next_change(pos, value);
            counts.push(next - pos);
            pos = next;
            value = !value;
        }
        if counts.is_empty() {
            counts.push(0);
        }
        RleCounts {
            height: self.height,
            width: self.width,
            counts,
        }
    }

    pub fn from_rle(rle: &RleCounts) -> Result<BinaryMask> {
        let mut mask = BinaryMask::new(rle.height, rle.width)?;
        let expected = mask.len();
        if let Some(index) = rle.counts.iter().skip(1).position(|&c| c == 0) {
            return Err(Error::MalformedRuns { index: index + 1 });
        }
        let actual = rle
            .counts
            .iter()
            .try_fold(0u64, |acc, &c| acc.checked_add(c))
            .unwrap_or(u64::MAX);
        if actual != expected {
            return Err(Error::SizeMismatch { expected, actual });
        }
        let mut pos = 0;
        for (i, &run) in rle.counts.iter().enumerate() {
            if i % 2 == 1 {
                mask.set_range(pos, pos + run);
            }
            pos += run;
        }
        Ok(mask)
    }
}

impl fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "BinaryMask({}x{}, area {})",
            self.height,
            self.width,
            self.area()
        )?;
        if self.height <= 16 && self.width <= 32 {
            for row in 0..self.height {
                f.write_str("\n  ")?;
                for col in 0..self.width {
                    f.write_str(if self.get(row, col) { "#" } else { "." })?;
                }
            }
        }
        Ok(())
    }
}

pub fn rle_encode(mask: &BinaryMask) -> RleCounts {
    mask.to_rle()
}

pub fn rle_decode(rle: &RleCounts) -> Result<BinaryMask> {
    BinaryMask::from_rle(rle)
}

pub fn set_ops(a: &BinaryMask, b: &BinaryMask) -> Result<SetOps> {
    Ok(SetOps {
        intersection: a.intersection(b)?,
        union: a.union(b)?,
        difference: a.difference(b)?,
    })
}

/// Intersection over union. Two empty masks score 0.
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    let (inter, union) = a.overlap(b)?;
    Ok(ratio(inter, union))
}

pub(crate) fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Keeps a pixel when it is set in strictly more than half of the masks.
pub fn majority_vote<M: std::borrow::Borrow<BinaryMask>>(masks: &[M]) -> Result<BinaryMask> {
    let first = masks
        .first()
        .ok_or(Error::EmptyInput("majority vote needs at least one mask"))?
        .borrow();
    for m in &masks[1..] {
        first.ensure_same_dims(m.borrow())?;
    }
    let k = masks.len() as u32;
    let mut votes = vec![0u32; first.len() as usize];
    for m in masks {
        for i in m.borrow().set_bits() {
            votes[i as usize] += 1;
        }
    }
    let mut out = BinaryMask::new(first.height, first.width)?;
    for (i, &v) in votes.iter().enumerate() {
        if 2 * v > k {
            out.words[i / 64] |= 1 << (i % 64);
        }
    }
    Ok(out)
}
