//! Anchor-to-ground-truth matching and per-anchor training targets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{encode_offsets, iou, Anchor, BBox, OffsetVector};
use crate::losses::Class;

pub const DEFAULT_POS_IOU: f64 = 0.5;
/// Boxes thinner than this (after clipping) are not matched.
pub const MIN_GT_SIDE: f64 = 2.0;

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorAssignment {
    pub classes: Vec<Class>,
    /// Index of the matched ground-truth box for positive anchors.
    pub matched: Vec<Option<usize>>,
}

impl AnchorAssignment {
    pub fn positives(&self) -> Vec<usize> {
        self.matched
            .iter()
            .enumerate()
            .filter_map(|(i, m)| m.map(|_| i))
            .collect()
    }

    pub fn n_positive(&self) -> usize {
        self.matched.iter().filter(|m| m.is_some()).count()
    }
}

/// Per-anchor targets; `offsets` is zero on negative anchors.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    pub classes: Vec<Class>,
    pub offsets: Vec<OffsetVector>,
    pub positives: Vec<usize>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataQuality {
    pub kept: usize,
    pub dropped_degenerate: usize,
}

/// Removes boxes with a side below [`MIN_GT_SIDE`].
pub fn drop_degenerate(boxes: &[BBox]) -> (Vec<BBox>, DataQuality) {
    let kept: Vec<BBox> = boxes
        .iter()
        .copied()
        .filter(|b| b.is_valid() && b.w >= MIN_GT_SIDE && b.h >= MIN_GT_SIDE)
        .collect();
    let report = DataQuality {
        kept: kept.len(),
        dropped_degenerate: boxes.len() - kept.len(),
    };
    (kept, report)
}

/// Marks an anchor positive when its best IoU reaches `pos_iou`, then forces
/// each ground-truth box's best remaining anchor positive so that no box is
/// left unmatched. Ties go to the lowest index.
pub fn match_anchors(anchors: &[Anchor], gt_boxes: &[BBox], pos_iou: f64) -> Result<AnchorAssignment> {
    if anchors.is_empty() {
        return Err(Error::input("no anchors to match"));
    }
    if !(pos_iou > 0.0 && pos_iou < 1.0) {
        return Err(Error::config(format!("pos_iou {pos_iou} outside (0, 1)")));
    }
    let n = anchors.len();
    let mut matched: Vec<Option<usize>> = vec![None; n];
    if gt_boxes.is_empty() {
        return Ok(AnchorAssignment {
            classes: vec![Class::Background; n],
            matched,
        });
    }

    // ious[g][a]
    let ious: Vec<Vec<f64>> = gt_boxes
        .iter()
        .map(|g| anchors.iter().map(|a| iou(&a.bbox, g)).collect())
        .collect();

    for (a, m) in matched.iter_mut().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (g, row) in ious.iter().enumerate() {
            if best.is_none_or(|(_, v)| row[a] > v) {
                best = Some((g, row[a]));
            }
        }
        if let Some((g, v)) = best {
            if v >= pos_iou {
                *m = Some(g);
            }
        }
    }

    let mut forced = vec![false; n];
    for (g, row) in ious.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (a, &v) in row.iter().enumerate() {
            if !forced[a] && best.is_none_or(|(_, b)| v > b) {
                best = Some((a, v));
            }
        }
        if let Some((a, _)) = best {
            forced[a] = true;
            matched[a] = Some(g);
        }
    }

    let classes = matched
        .iter()
        .map(|m| if m.is_some() { Class::Nucleus } else { Class::Background })
        .collect();
    Ok(AnchorAssignment { classes, matched })
}

pub fn build_targets(assignment: &AnchorAssignment, anchors: &[Anchor], gt_boxes: &[BBox]) -> Result<Targets> {
    if assignment.matched.len() != anchors.len() || assignment.classes.len() != anchors.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![anchors.len()],
            actual: vec![assignment.matched.len()],
        });
    }
    let mut offsets = vec![OffsetVector::ZERO; anchors.len()];
    let mut positives = Vec::new();
    for (i, m) in assignment.matched.iter().enumerate() {
        if let Some(g) = *m {
            let gt = gt_boxes
                .get(g)
                .ok_or_else(|| Error::input(format!("assignment refers to gt {g} of {}", gt_boxes.len())))?;
            offsets[i] = encode_offsets(gt, &anchors[i].bbox);
            positives.push(i);
        }
    }
    Ok(Targets {
        classes: assignment.classes.clone(),
        offsets,
        positives,
    })
}
