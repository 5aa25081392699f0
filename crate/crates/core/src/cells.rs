//! Whole-cell / nucleus / cytoplasm merging.
//!
//! Whole-cell instances are the primary result. Each is paired with at most
//! one nucleus prediction, and its cytoplasm is whatever of the cell the
//! nucleus does not cover.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::instance::{ClassLabel, Instance, InstanceId, PredictionSet};
use crate::mask::BinaryMask;

pub const DEFAULT_CONTAINMENT_MIN: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub cell_id: InstanceId,
    pub score: f64,
    pub cell_mask: BinaryMask,
    pub nucleus_mask: BinaryMask,
    pub cytoplasm_mask: BinaryMask,
    pub nucleus_id: Option<InstanceId>,
    /// Cytoplasm-class prediction overlapping the derived cytoplasm the most.
    /// Kept for audit only.
    pub cytoplasm_audit: Option<InstanceId>,
}

impl Cell {
    pub fn nucleus_missing(&self) -> bool {
        self.nucleus_id.is_none()
    }

    /// nucleus ∪ cytoplasm == cell and nucleus ∩ cytoplasm == ∅.
    pub fn check_invariants(&self) -> Result<bool> {
        let union = self.nucleus_mask.union(&self.cytoplasm_mask)?;
        Ok(union == self.cell_mask && self.nucleus_mask.is_disjoint(&self.cytoplasm_mask)?)
    }
}

/// Audit record for one merged cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub cell_id: InstanceId,
    pub score: f64,
    pub nucleus_id: Option<InstanceId>,
    pub nucleus_missing: bool,
    pub cytoplasm_audit: Option<InstanceId>,
    pub nucleus_area: u64,
    pub cytoplasm_area: u64,
}

impl From<&Cell> for CellRecord {
    fn from(c: &Cell) -> Self {
        CellRecord {
            cell_id: c.cell_id,
            score: c.score,
            nucleus_id: c.nucleus_id,
            nucleus_missing: c.nucleus_missing(),
            cytoplasm_audit: c.cytoplasm_audit,
            nucleus_area: c.nucleus_mask.area(),
            cytoplasm_area: c.cytoplasm_mask.area(),
        }
    }
}

/// The nucleus with the largest overlap with the cell, among those with at
/// least `containment_min` of their area inside it. Ties go to the lower id.
pub fn pair_nucleus<'a>(
    cell: &Instance,
    nuclei: &[&'a Instance],
    containment_min: f64,
) -> Result<Option<&'a Instance>> {
    let mut best: Option<(u64, &Instance)> = None;
    for &n in nuclei {
        let inter = n.mask.intersection_area(&cell.mask)?;
        if inter == 0 {
            continue;
        }
        let containment = inter as f64 / n.mask.area() as f64;
        if containment < containment_min {
            continue;
        }
        let better = match best {
            None => true,
            Some((bi, b)) => inter > bi || (inter == bi && n.id < b.id),
        };
        if better {
            best = Some((inter, n));
        }
    }
    Ok(best.map(|(_, n)| n))
}

pub fn compose_cell(cell: &Instance, nucleus: Option<&Instance>) -> Result<Cell> {
    let nucleus_mask = match nucleus {
        Some(n) => n.mask.intersection(&cell.mask)?,
        None => BinaryMask::new(cell.mask.height(), cell.mask.width())?,
    };
    let cytoplasm_mask = cell.mask.difference(&nucleus_mask)?;
    Ok(Cell {
        cell_id: cell.id,
        score: cell.score,
        cell_mask: cell.mask.clone(),
        nucleus_mask,
        cytoplasm_mask,
        nucleus_id: nucleus.map(|n| n.id),
        cytoplasm_audit: None,
    })
}

/// One [`Cell`] per whole-cell instance, ordered by cell id.
///
/// Cells claim nuclei greedily in descending score (lower id first on equal
/// scores); a nucleus is assigned to at most one cell.
pub fn merge_classes(
    whole_cells: &PredictionSet,
    nuclei: &PredictionSet,
    cytoplasms: &PredictionSet,
    containment_min: f64,
) -> Result<Vec<Cell>> {
    let mut order: Vec<&Instance> = whole_cells.of_class(ClassLabel::WholeCell).collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.id.cmp(&b.id)));
    let nucleus_pool: Vec<&Instance> = nuclei.of_class(ClassLabel::Nucleus).collect();
    let cyto_pool: Vec<&Instance> = cytoplasms.of_class(ClassLabel::Cytoplasm).collect();

    let mut taken = BTreeSet::new();
    let mut cells = Vec::with_capacity(order.len());
    for cell in order {
        let free: Vec<&Instance> = nucleus_pool
            .iter()
            .copied()
            .filter(|n| !taken.contains(&n.id))
            .collect();
        let nucleus = pair_nucleus(cell, &free, containment_min)?;
        if let Some(n) = nucleus {
            taken.insert(n.id);
        }
        let mut composed = compose_cell(cell, nucleus)?;
        let mut best_cyto: Option<(u64, InstanceId)> = None;
        for c in &cyto_pool {
            let inter = c.mask.intersection_area(&composed.cytoplasm_mask)?;
            if inter > 0 && best_cyto.is_none_or(|(bi, bid)| inter > bi || (inter == bi && c.id < bid)) {
                best_cyto = Some((inter, c.id));
            }
        }
        composed.cytoplasm_audit = best_cyto.map(|(_, id)| id);
        cells.push(composed);
    }
    cells.sort_by_key(|c| c.cell_id);
    Ok(cells)
}

/// [`merge_classes`] over a single set holding all three classes.
pub fn merge_set(set: &PredictionSet, containment_min: f64) -> Result<Vec<Cell>> {
    merge_classes(set, set, set, containment_min)
}

/// Pixel-wise union of all instance masks.
pub fn semantic_union(height: u32, width: u32, instances: &[Instance]) -> Result<BinaryMask> {
    let mut out = BinaryMask::new(height, width)?;
    for inst in instances {
        out.union_with(&inst.mask)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block(h: u32, w: u32, r0: u32, c0: u32, rows: u32, cols: u32) -> BinaryMask {
        BinaryMask::from_fn(h, w, |r, c| (r0..r0 + rows).contains(&r) && (c0..c0 + cols).contains(&c))
            .unwrap()
    }

    fn inst(id: InstanceId, class: ClassLabel, mask: BinaryMask, score: f64) -> Instance {
        Instance::new(id, class, mask, score, "m")
    }

    #[test]
    fn pair_examples() {
        let cell = inst(0, ClassLabel::WholeCell, BinaryMask::full(8, 8).unwrap(), 1.0);
        let inside = inst(1, ClassLabel::Nucleus, block(8, 8, 2, 2, 2, 2), 1.0);
        assert_eq!(pair_nucleus(&cell, &[&inside], 0.5).unwrap().unwrap().id, 1);

        let small_cell = inst(0, ClassLabel::WholeCell, block(8, 8, 0, 0, 2, 2), 1.0);
        let far = inst(1, ClassLabel::Nucleus, block(8, 8, 5, 5, 2, 2), 1.0);
        assert!(pair_nucleus(&small_cell, &[&far], 0.5).unwrap().is_none());

        // 12 vs 30 pixel intersections
        let n12 = inst(1, ClassLabel::Nucleus, block(8, 8, 0, 0, 3, 4), 1.0);
        let n30 = inst(2, ClassLabel::Nucleus, block(8, 8, 2, 2, 5, 6), 1.0);
        assert_eq!(n12.mask.area(), 12);
        assert_eq!(n30.mask.area(), 30);
        assert_eq!(pair_nucleus(&cell, &[&n12, &n30], 0.5).unwrap().unwrap().id, 2);
    }

    #[test]
    fn pair_respects_containment() {
        // nucleus mostly outside the cell
        let cell = inst(0, ClassLabel::WholeCell, block(8, 8, 0, 0, 4, 4), 1.0);
        let n = inst(1, ClassLabel::Nucleus, block(8, 8, 3, 3, 4, 4), 1.0);
        assert!(pair_nucleus(&cell, &[&n], 0.5).unwrap().is_none());
        assert!(pair_nucleus(&cell, &[&n], 0.0).unwrap().is_some());
    }

    #[test]
    fn compose_examples() {
        let full3 = BinaryMask::full(3, 3).unwrap();
        let cell = inst(0, ClassLabel::WholeCell, full3.clone(), 0.9);

        let same = inst(1, ClassLabel::Nucleus, full3.clone(), 0.9);
        let c = compose_cell(&cell, Some(&same)).unwrap();
        assert!(c.cytoplasm_mask.is_empty());
        assert_eq!(c.nucleus_mask, full3);

        let c = compose_cell(&cell, None).unwrap();
        assert!(c.nucleus_missing());
        assert!(c.nucleus_mask.is_empty());
        assert_eq!(c.cytoplasm_mask, full3);

        let center = inst(1, ClassLabel::Nucleus, BinaryMask::from_pixels(3, 3, [(1, 1)]).unwrap(), 0.9);
        let c = compose_cell(&cell, Some(&center)).unwrap();
        assert_eq!(c.cytoplasm_mask.area(), 8);
        assert!(!c.cytoplasm_mask.get(1, 1));
        assert!(c.check_invariants().unwrap());
    }

    #[test]
    fn compose_clips_nucleus() {
        let cell = inst(0, ClassLabel::WholeCell, block(4, 4, 0, 0, 2, 2), 0.9);
        let n = inst(1, ClassLabel::Nucleus, block(4, 4, 1, 1, 2, 2), 0.9);
        let c = compose_cell(&cell, Some(&n)).unwrap();
        assert_eq!(c.nucleus_mask.area(), 1);
        assert!(c.check_invariants().unwrap());
    }

    #[test]
    fn merge_examples() {
        let mut set = PredictionSet::new("a", "m", 8, 8);
        set.instances.push(inst(0, ClassLabel::WholeCell, block(8, 8, 0, 0, 4, 4), 0.9));
        set.instances.push(inst(1, ClassLabel::Nucleus, block(8, 8, 1, 1, 2, 2), 0.9));
        let cells = merge_set(&set, 0.5).unwrap();
        assert_eq!(cells.len(), 1);
        assert_eq!(cells[0].cytoplasm_mask.area(), 12);

        let empty = PredictionSet::new("a", "m", 8, 8);
        assert!(merge_set(&empty, 0.5).unwrap().is_empty());
    }

    #[test]
    fn shared_nucleus_goes_to_higher_score() {
        let mut set = PredictionSet::new("a", "m", 8, 8);
        set.instances.push(inst(0, ClassLabel::WholeCell, block(8, 8, 0, 0, 8, 4), 0.6));
        set.instances.push(inst(1, ClassLabel::WholeCell, block(8, 8, 0, 4, 8, 4), 0.8));
        // straddles both cells equally
        set.instances.push(inst(2, ClassLabel::Nucleus, block(8, 8, 3, 3, 2, 2), 0.9));
        let cells = merge_set(&set, 0.5).unwrap();
        assert_eq!(cells[0].cell_id, 0);
        assert!(cells[0].nucleus_missing());
        assert_eq!(cells[1].nucleus_id, Some(2));
    }

    #[test]
    fn cytoplasm_audit_recorded() {
        let mut set = PredictionSet::new("a", "m", 8, 8);
        set.instances.push(inst(0, ClassLabel::WholeCell, block(8, 8, 0, 0, 4, 4), 0.9));
        set.instances.push(inst(5, ClassLabel::Cytoplasm, block(8, 8, 0, 0, 1, 4), 0.9));
        let cells = merge_set(&set, 0.5).unwrap();
        assert_eq!(cells[0].cytoplasm_audit, Some(5));
        assert_eq!(cells[0].cytoplasm_mask, cells[0].cell_mask);
    }

    #[test]
    fn union_examples() {
        assert!(semantic_union(4, 4, &[]).unwrap().is_empty());
        let a = inst(0, ClassLabel::WholeCell, block(8, 8, 0, 0, 1, 5), 1.0);
        assert_eq!(semantic_union(8, 8, &[a.clone()]).unwrap(), a.mask);
        let b = inst(1, ClassLabel::WholeCell, block(8, 8, 4, 0, 1, 7), 1.0);
        assert_eq!(semantic_union(8, 8, &[a, b]).unwrap().area(), 12);
    }
}
