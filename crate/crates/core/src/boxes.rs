//! Cubic boxes, anchor grids, IoU-based label assignment, the anchor-relative
//! box parameterization, and greedy non-maximum suppression.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned cube: center in voxel coordinates and half side length `r`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3 {
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    pub r: f64,
}

impl Box3 {
    pub fn new(cx: f64, cy: f64, cz: f64, r: f64) -> Self {
        debug_assert!(r > 0.0, "box radius must be positive");
        Box3 { cx, cy, cz, r }
    }

    pub fn center(&self) -> [f64; 3] {
        [self.cx, self.cy, self.cz]
    }

    pub fn volume(&self) -> f64 {
        (2.0 * self.r).powi(3)
    }
}

/// Intersection over union of two cubes.
pub fn iou(a: &Box3, b: &Box3) -> f64 {
    let mut inter = 1.0;
    for (ca, cb) in a.center().into_iter().zip(b.center()) {
        let lo = (ca - a.r).max(cb - b.r);
        let hi = (ca + a.r).min(cb + b.r);
        if hi <= lo {
            return 0.0;
        }
        inter *= hi - lo;
    }
    inter / (a.volume() + b.volume() - inter)
}

/// An anchor box together with its grid cell and size slot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor {
    pub cell: [usize; 3],
    pub slot: usize,
    pub bbox: Box3,
}

/// Tiles one anchor per (cell, size) over a `[gz, gy, gx]` grid with cell
/// stride `stride`, centered at `(g + 0.5)·stride`. Sizes are cube side
/// lengths. Ordered by z, y, x, then slot.
pub fn generate_anchors(grid: [usize; 3], stride: usize, sizes: &[f64]) -> Vec<Anchor> {
    let s = stride as f64;
    let mut out = Vec::with_capacity(grid.iter().product::<usize>() * sizes.len());
    for z in 0..grid[0] {
        for y in 0..grid[1] {
            for x in 0..grid[2] {
                for (slot, &size) in sizes.iter().enumerate() {
                    let c = |g: usize| (g as f64 + 0.5) * s;
                    out.push(Anchor { cell: [z, y, x], slot, bbox: Box3::new(c(x), c(y), c(z), size / 2.0) });
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive(usize),
    Negative,
    Ignored,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssignConfig {
    pub pos_thresh: f64,
    pub neg_thresh: f64,
    /// Force each ground truth's best anchor positive when none clears `pos_thresh`.
    pub force_best: bool,
}

impl Default for AssignConfig {
    fn default() -> Self {
        AssignConfig { pos_thresh: 0.5, neg_thresh: 0.02, force_best: true }
    }
}

/// Labels anchors against ground truths by IoU.
pub fn assign_labels(anchors: &[Anchor], gts: &[Box3], cfg: &AssignConfig) -> Result<Vec<AnchorLabel>> {
    if !(0.0 <= cfg.neg_thresh && cfg.neg_thresh < cfg.pos_thresh && cfg.pos_thresh <= 1.0) {
        return Err(Error::Config(format!(
            "IoU thresholds must satisfy 0 <= neg < pos <= 1, got {} and {}",
            cfg.neg_thresh, cfg.pos_thresh
        )));
    }
    let mut labels = vec![AnchorLabel::Negative; anchors.len()];
    if gts.is_empty() {
        return Ok(labels);
    }
    // best (iou, anchor) per gt; ties to the lowest anchor index
    let mut best_anchor = vec![(0.0f64, usize::MAX); gts.len()];
    let mut has_positive = vec![false; gts.len()];
    for (ai, a) in anchors.iter().enumerate() {
        let mut best = (0.0f64, 0usize);
        for (gi, g) in gts.iter().enumerate() {
            // cheap rejection before the exact overlap
            if (a.bbox.cx - g.cx).abs() >= a.bbox.r + g.r
                || (a.bbox.cy - g.cy).abs() >= a.bbox.r + g.r
                || (a.bbox.cz - g.cz).abs() >= a.bbox.r + g.r
            {
                continue;
            }
            let v = iou(&a.bbox, g);
            if v > best.0 {
                best = (v, gi);
            }
            if v > best_anchor[gi].0 {
                best_anchor[gi] = (v, ai);
            }
        }
        labels[ai] = if best.0 > cfg.pos_thresh {
            has_positive[best.1] = true;
            AnchorLabel::Positive(best.1)
        } else if best.0 < cfg.neg_thresh {
            AnchorLabel::Negative
        } else {
            AnchorLabel::Ignored
        };
    }
    if cfg.force_best {
        for (gi, &(v, ai)) in best_anchor.iter().enumerate() {
            if has_positive[gi] || ai == usize::MAX || v <= 0.0 {
                continue;
            }
            // never steal the only positive of another gt
            let ai = if matches!(labels[ai], AnchorLabel::Positive(_)) {
                let free = anchors
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| !matches!(labels[*i], AnchorLabel::Positive(_)))
                    .map(|(i, a)| (iou(&a.bbox, &gts[gi]), i))
                    .fold((0.0f64, usize::MAX), |b, c| if c.0 > b.0 { c } else { b });
                if free.1 == usize::MAX {
                    continue;
                }
                free.1
            } else {
                ai
            };
            labels[ai] = AnchorLabel::Positive(gi);
        }
    }
    Ok(labels)
}

/// Regression offsets of a box relative to an anchor: `(dx, dy, dz, dr)`.
pub type Deltas = [f64; 4];

/// Anchor-relative parameterization: center offsets scaled by the anchor
/// radius and the log radius ratio.
pub fn encode_box(gt: &Box3, anchor: &Box3) -> Result<Deltas> {
    if !(gt.r > 0.0 && anchor.r > 0.0) {
        return Err(Error::Invalid(format!("non-positive radius ({} or {})", gt.r, anchor.r)));
    }
    Ok([
        (gt.cx - anchor.cx) / anchor.r,
        (gt.cy - anchor.cy) / anchor.r,
        (gt.cz - anchor.cz) / anchor.r,
        (gt.r / anchor.r).ln(),
    ])
}

/// Inverse of [`encode_box`].
pub fn decode_box(anchor: &Box3, d: &Deltas) -> Box3 {
    Box3 {
        cx: anchor.cx + d[0] * anchor.r,
        cy: anchor.cy + d[1] * anchor.r,
        cz: anchor.cz + d[2] * anchor.r,
        r: anchor.r * d[3].exp(),
    }
}

/// Greedy non-maximum suppression. Returns kept indices by descending
/// probability (ties to the lower index).
pub fn nms(boxes: &[Box3], probs: &[f64], iou_thresh: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), probs.len(), "nms needs one probability per box");
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| iou(&boxes[k], &boxes[i]) <= iou_thresh) {
            kept.push(i);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_examples() {
        let a = Box3::new(10.0, 10.0, 10.0, 2.5);
        let b = Box3::new(10.0, 10.0, 10.0, 5.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &b), 0.125);
        assert_eq!(iou(&a, &Box3::new(30.0, 10.0, 10.0, 2.5)), 0.0);
        // touching faces do not overlap
        assert_eq!(iou(&a, &Box3::new(15.0, 10.0, 10.0, 2.5)), 0.0);
    }

    #[test]
    fn anchor_grid_layout() {
        let anchors = generate_anchors([32, 32, 32], 4, &[5.0, 10.0, 20.0]);
        assert_eq!(anchors.len(), 98_304);
        let a = anchors[1];
        assert_eq!((a.cell, a.slot), ([0, 0, 0], 1));
        assert_eq!(a.bbox, Box3::new(2.0, 2.0, 2.0, 5.0));
        // x varies fastest after the slot
        assert_eq!(anchors[3].cell, [0, 0, 1]);
        assert_eq!(anchors[3].bbox.cx, 6.0);
        assert_eq!(anchors, generate_anchors([32, 32, 32], 4, &[5.0, 10.0, 20.0]));
    }

    #[test]
    fn labels_follow_thresholds() {
        let anchors = vec![
            Anchor { cell: [0; 3], slot: 0, bbox: Box3::new(10.0, 10.0, 10.0, 5.0) },
            Anchor { cell: [0; 3], slot: 1, bbox: Box3::new(10.0, 10.0, 10.0, 2.5) },
            Anchor { cell: [0; 3], slot: 2, bbox: Box3::new(90.0, 90.0, 90.0, 5.0) },
        ];
        let gts = [Box3::new(10.0, 10.0, 10.0, 5.0)];
        let labels = assign_labels(&anchors, &gts, &AssignConfig::default()).unwrap();
        assert_eq!(labels, vec![AnchorLabel::Positive(0), AnchorLabel::Ignored, AnchorLabel::Negative]);
    }

    #[test]
    fn forcing_gives_every_gt_a_positive() {
        let anchors = generate_anchors([4, 4, 4], 4, &[10.0]);
        // small, off-grid nodule: no anchor clears 0.5
        let gts = [Box3::new(5.0, 7.0, 9.0, 1.5)];
        let cfg = AssignConfig::default();
        let forced = assign_labels(&anchors, &gts, &cfg).unwrap();
        assert_eq!(forced.iter().filter(|l| matches!(l, AnchorLabel::Positive(0))).count(), 1);
        let unforced = assign_labels(&anchors, &gts, &AssignConfig { force_best: false, ..cfg }).unwrap();
        assert!(unforced.iter().all(|l| !matches!(l, AnchorLabel::Positive(_))));
    }

    #[test]
    fn no_ground_truth_means_all_negative() {
        let anchors = generate_anchors([2, 2, 2], 4, &[5.0]);
        let labels = assign_labels(&anchors, &[], &AssignConfig::default()).unwrap();
        assert!(labels.iter().all(|l| *l == AnchorLabel::Negative));
    }

    #[test]
    fn bad_thresholds_rejected() {
        let cfg = AssignConfig { pos_thresh: 0.1, neg_thresh: 0.2, force_best: true };
        assert!(assign_labels(&[], &[], &cfg).is_err());
    }

    #[test]
    fn encode_examples() {
        let anchor = Box3::new(10.0, 10.0, 10.0, 5.0);
        assert_eq!(encode_box(&anchor, &anchor).unwrap(), [0.0; 4]);
        let gt = Box3::new(15.0, 10.0, 10.0, 10.0);
        let d = encode_box(&gt, &anchor).unwrap();
        assert_eq!(d[..3], [1.0, 0.0, 0.0]);
        assert!((d[3] - std::f64::consts::LN_2).abs() < 1e-15);
        let mirrored = encode_box(&Box3::new(5.0, 10.0, 10.0, 10.0), &anchor).unwrap();
        assert_eq!(mirrored[0], -d[0]);
        assert!(encode_box(&Box3 { r: 0.0, ..gt }, &anchor).is_err());
    }

    #[test]
    fn decode_examples() {
        let anchor = Box3::new(10.0, 10.0, 10.0, 5.0);
        assert_eq!(decode_box(&anchor, &[0.0; 4]), anchor);
        let b = decode_box(&anchor, &[1.0, 0.0, 0.0, std::f64::consts::LN_2]);
        assert_eq!((b.cx, b.cy, b.cz), (15.0, 10.0, 10.0));
        assert!((b.r - 10.0).abs() < 1e-12);
    }

    #[test]
    fn nms_basics() {
        let b = Box3::new(5.0, 5.0, 5.0, 2.0);
        assert_eq!(nms(&[b], &[0.3], 0.1), vec![0]);
        assert_eq!(nms(&[b, b], &[0.3, 0.6], 0.1), vec![1]);
        assert_eq!(nms(&[b, b], &[0.5, 0.5], 0.1), vec![0]);
    }
}
