//! Box arithmetic, default anchor generation, offset encoding and
//! non-maximum suppression.
//!
//! All boxes are in center-size form, in input-image pixel units.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in center-size form.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = BBox { cx, cy, w, h };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::InvalidBox(format!("{b:?}")))
        }
    }

    /// Builds a box from its top-left and bottom-right corners.
    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        Self::new((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)
    }

    /// Finite center and strictly positive, finite size.
    pub fn is_valid(&self) -> bool {
        self.cx.is_finite()
            && self.cy.is_finite()
            && self.w.is_finite()
            && self.h.is_finite()
            && self.w > 0.0
            && self.h > 0.0
    }

    /// `(x0, y0, x1, y1)`
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn scaled(&self, factor: f64) -> BBox {
        BBox {
            cx: self.cx * factor,
            cy: self.cy * factor,
            w: self.w * factor,
            h: self.h * factor,
        }
    }

    pub fn translated(&self, dx: f64, dy: f64) -> BBox {
        BBox {
            cx: self.cx + dx,
            cy: self.cy + dy,
            ..*self
        }
    }

    /// Enlarges the box about its center.
    pub fn expanded(&self, factor: f64) -> BBox {
        BBox {
            w: self.w * factor,
            h: self.h * factor,
            ..*self
        }
    }

    /// Intersection with the `[0, width] x [0, height]` extent, or `None`
    /// when nothing of positive area remains.
    pub fn clip(&self, width: f64, height: f64) -> Option<BBox> {
        let (x0, y0, x1, y1) = self.corners();
        let (x0, y0) = (x0.clamp(0.0, width), y0.clamp(0.0, height));
        let (x1, y1) = (x1.clamp(0.0, width), y1.clamp(0.0, height));
        BBox::from_corners(x0, y0, x1, y1).ok()
    }

    /// Smallest box containing both.
    pub fn union(&self, other: &BBox) -> BBox {
        let (ax0, ay0, ax1, ay1) = self.corners();
        let (bx0, by0, bx1, by1) = other.corners();
        let (x0, y0) = (ax0.min(bx0), ay0.min(by0));
        let (x1, y1) = (ax1.max(bx1), ay1.max(by1));
        BBox {
            cx: (x0 + x1) / 2.0,
            cy: (y0 + y1) / 2.0,
            w: x1 - x0,
            h: y1 - y0,
        }
    }
}

/// Intersection over union of two boxes; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    // areas from the same corners as the intersection, so iou(a, a) == 1
    let union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter;
    if union <= 0.0 || inter <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// A default box tied to one cell of one pyramid level.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub bbox: BBox,
    pub level: usize,
    pub row: usize,
    pub col: usize,
    /// Index into the `aspect_ratios x scales` product, ratio-major.
    pub variant: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnchorConfig {
    pub input_size: usize,
    pub map_sizes: Vec<usize>,
    pub base_sizes: Vec<f64>,
    /// Width to height ratios.
    pub aspect_ratios: Vec<f64>,
    pub scales: Vec<f64>,
}

/// Anchor sizes must fall inside the detectable object band.
pub const MIN_BASE_SIZE: f64 = 20.0;
pub const MAX_BASE_SIZE: f64 = 128.0;

impl Default for AnchorConfig {
    fn default() -> Self {
        AnchorConfig {
            input_size: 300,
            map_sizes: vec![38, 19, 10],
            base_sizes: vec![20.0, 74.0, 128.0],
            aspect_ratios: vec![1.0, 0.75],
            scales: vec![0.8, 1.2],
        }
    }
}

impl AnchorConfig {
    pub fn anchors_per_location(&self) -> usize {
        self.aspect_ratios.len() * self.scales.len()
    }

    pub fn anchor_count(&self) -> usize {
        self.map_sizes.iter().map(|m| m * m).sum::<usize>() * self.anchors_per_location()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 {
            return Err(Error::config("anchor input_size must be positive"));
        }
        if self.map_sizes.is_empty() || self.map_sizes.contains(&0) {
            return Err(Error::config("anchor map_sizes must be non-empty and positive"));
        }
        if self.aspect_ratios.is_empty() || self.scales.is_empty() {
            return Err(Error::config("anchor aspect_ratios and scales must be non-empty"));
        }
        if self.base_sizes.len() != self.map_sizes.len() {
            return Err(Error::config(format!(
                "{} base sizes for {} feature maps",
                self.base_sizes.len(),
                self.map_sizes.len()
            )));
        }
        if let Some(b) = self
            .base_sizes
            .iter()
            .find(|b| !(MIN_BASE_SIZE..=MAX_BASE_SIZE).contains(*b))
        {
            return Err(Error::config(format!(
                "anchor base size {b} outside [{MIN_BASE_SIZE}, {MAX_BASE_SIZE}]"
            )));
        }
        if self
            .aspect_ratios
            .iter()
            .chain(&self.scales)
            .any(|v| !(v.is_finite() && *v > 0.0))
        {
            return Err(Error::config("aspect ratios and scales must be positive"));
        }
        Ok(())
    }

    /// Base sizes spread linearly over the detectable band, one per level.
    pub fn linear_base_sizes(levels: usize) -> Vec<f64> {
        match levels {
            0 => vec![],
            1 => vec![MIN_BASE_SIZE],
            n => (0..n)
                .map(|i| MIN_BASE_SIZE + (MAX_BASE_SIZE - MIN_BASE_SIZE) * i as f64 / (n - 1) as f64)
                .collect(),
        }
    }
}

/// Generates anchors level-major, then row, column and variant.
pub fn generate_anchors(cfg: &AnchorConfig) -> Result<Vec<Anchor>> {
    cfg.validate()?;
    let mut shapes = Vec::with_capacity(cfg.anchors_per_location());
    for &ratio in &cfg.aspect_ratios {
        for &scale in &cfg.scales {
            shapes.push((scale * ratio.sqrt(), scale / ratio.sqrt()));
        }
    }

    let mut anchors = Vec::with_capacity(cfg.anchor_count());
    for (level, (&map, &base)) in cfg.map_sizes.iter().zip(&cfg.base_sizes).enumerate() {
        let stride = cfg.input_size as f64 / map as f64;
        for row in 0..map {
            let cy = (row as f64 + 0.5) * stride;
            for col in 0..map {
                let cx = (col as f64 + 0.5) * stride;
                for (variant, &(wf, hf)) in shapes.iter().enumerate() {
                    anchors.push(Anchor {
                        bbox: BBox {
                            cx,
                            cy,
                            w: base * wf,
                            h: base * hf,
                        },
                        level,
                        row,
                        col,
                        variant,
                    });
                }
            }
        }
    }
    Ok(anchors)
}

/// Regression target of a box relative to an anchor.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OffsetVector {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

impl OffsetVector {
    pub const ZERO: OffsetVector = OffsetVector {
        dx: 0.0,
        dy: 0.0,
        dw: 0.0,
        dh: 0.0,
    };

    pub fn to_array(self) -> [f64; 4] {
        [self.dx, self.dy, self.dw, self.dh]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        OffsetVector {
            dx: a[0],
            dy: a[1],
            dw: a[2],
            dh: a[3],
        }
    }
}

pub fn encode_offsets(gt: &BBox, anchor: &BBox) -> OffsetVector {
    OffsetVector {
        dx: (gt.cx - anchor.cx) / anchor.w,
        dy: (gt.cy - anchor.cy) / anchor.h,
        dw: (gt.w / anchor.w).ln(),
        dh: (gt.h / anchor.h).ln(),
    }
}

pub fn decode_offsets(o: &OffsetVector, anchor: &BBox) -> Result<BBox> {
    if !o.to_array().iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite(format!("offsets {o:?}")));
    }
    let b = BBox {
        cx: anchor.cx + o.dx * anchor.w,
        cy: anchor.cy + o.dy * anchor.h,
        w: anchor.w * o.dw.exp(),
        h: anchor.h * o.dh.exp(),
    };
    if !b.is_valid() {
        return Err(Error::NonFinite(format!("decoded box {b:?}")));
    }
    Ok(b)
}

/// Decodes and clips to a `width x height` image; `None` when the decoded
/// box lies entirely outside it.
pub fn decode_clipped(o: &OffsetVector, anchor: &BBox, width: f64, height: f64) -> Result<Option<BBox>> {
    Ok(decode_offsets(o, anchor)?.clip(width, height))
}

/// Greedy non-maximum suppression. Returns indices into `dets`, ordered by
/// descending confidence; equal confidences keep input order.
pub fn nms_indices(dets: &[(BBox, f64)], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].1.total_cmp(&dets[a].1));

    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| iou(&dets[k].0, &dets[i].0) <= iou_threshold) {
            kept.push(i);
        }
    }
    kept
}

pub fn nms(dets: &[(BBox, f64)], iou_threshold: f64) -> Vec<(BBox, f64)> {
    nms_indices(dets, iou_threshold).into_iter().map(|i| dets[i]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn corners(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::from_corners(x0, y0, x1, y1).unwrap()
    }

    #[test]
    fn iou_examples() {
        let a = corners(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &corners(5.0, 5.0, 6.0, 6.0)), 0.0);
        assert_abs_diff_eq!(iou(&a, &corners(1.0, 0.0, 3.0, 2.0)), 1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn invalid_boxes_rejected() {
        assert!(BBox::new(0.0, 0.0, 0.0, 1.0).is_err());
        assert!(BBox::new(0.0, 0.0, 1.0, -1.0).is_err());
        assert!(BBox::new(f64::NAN, 0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn default_anchor_count() {
        let cfg = AnchorConfig::default();
        let anchors = generate_anchors(&cfg).unwrap();
        assert_eq!(anchors.len(), 7620);
        let per_level: Vec<usize> = (0..3)
            .map(|l| anchors.iter().filter(|a| a.level == l).count())
            .collect();
        assert_eq!(per_level, vec![5776, 1444, 400]);
    }

    #[test]
    fn single_cell_anchors_centered() {
        let cfg = AnchorConfig {
            input_size: 100,
            map_sizes: vec![1],
            base_sizes: vec![40.0],
            ..AnchorConfig::default()
        };
        let anchors = generate_anchors(&cfg).unwrap();
        assert_eq!(anchors.len(), 4);
        for a in &anchors {
            assert_eq!((a.bbox.cx, a.bbox.cy), (50.0, 50.0));
        }
    }

    #[test]
    fn identity_multipliers() {
        let cfg = AnchorConfig {
            map_sizes: vec![2],
            base_sizes: vec![20.0],
            aspect_ratios: vec![1.0],
            scales: vec![1.0],
            ..AnchorConfig::default()
        };
        let a = generate_anchors(&cfg).unwrap()[0];
        assert_eq!((a.bbox.w, a.bbox.h), (20.0, 20.0));
    }

    #[test]
    fn area_preserving_aspect() {
        let cfg = AnchorConfig::default();
        let anchors = generate_anchors(&cfg).unwrap();
        // variant 2 = ratio 0.75, scale 0.8 on the first level
        let a = anchors[2];
        assert_eq!(a.variant, 2);
        assert_abs_diff_eq!(a.bbox.w / a.bbox.h, 0.75, epsilon = 1e-12);
        assert_abs_diff_eq!(a.bbox.w * a.bbox.h, 16.0 * 16.0, epsilon = 1e-9);
    }

    #[test]
    fn anchor_order_and_centers() {
        let cfg = AnchorConfig::default();
        let anchors = generate_anchors(&cfg).unwrap();
        let stride = 300.0 / 38.0;
        let a = anchors[(38 + 2) * 4 + 3];
        assert_eq!((a.level, a.row, a.col, a.variant), (0, 1, 2, 3));
        assert_abs_diff_eq!(a.bbox.cx, 2.5 * stride, epsilon = 1e-12);
        assert_abs_diff_eq!(a.bbox.cy, 1.5 * stride, epsilon = 1e-12);
        let first_l1 = anchors[5776];
        assert_eq!((first_l1.level, first_l1.row, first_l1.col), (1, 0, 0));
    }

    #[test]
    fn generation_errors() {
        let mut cfg = AnchorConfig::default();
        cfg.scales.clear();
        assert!(generate_anchors(&cfg).is_err());
        let mut cfg = AnchorConfig::default();
        cfg.aspect_ratios.clear();
        assert!(generate_anchors(&cfg).is_err());
        let cfg = AnchorConfig {
            base_sizes: vec![10.0, 74.0, 128.0],
            ..AnchorConfig::default()
        };
        assert!(generate_anchors(&cfg).is_err());
        let mut cfg = AnchorConfig::default();
        cfg.base_sizes.pop();
        assert!(generate_anchors(&cfg).is_err());
    }

    #[test]
    fn linear_base_sizes_default() {
        assert_eq!(AnchorConfig::linear_base_sizes(3), vec![20.0, 74.0, 128.0]);
    }

    #[test]
    fn encode_examples() {
        let anchor = BBox::new(10.0, 10.0, 20.0, 20.0).unwrap();
        assert_eq!(encode_offsets(&anchor, &anchor), OffsetVector::ZERO);
        let gt = BBox::new(15.0, 10.0, 40.0, 20.0).unwrap();
        let o = encode_offsets(&gt, &anchor);
        assert_abs_diff_eq!(o.dx, 0.25, epsilon = 1e-15);
        assert_eq!(o.dy, 0.0);
        assert_abs_diff_eq!(o.dw, 2f64.ln(), epsilon = 1e-15);
        assert_eq!(o.dh, 0.0);

        let back = decode_offsets(&o, &anchor).unwrap();
        assert_abs_diff_eq!(back.cx, 15.0, epsilon = 1e-12);
        assert_abs_diff_eq!(back.w, 40.0, epsilon = 1e-12);
        assert_eq!(decode_offsets(&OffsetVector::ZERO, &anchor).unwrap(), anchor);
    }

    #[test]
    fn roundtrip_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut worst = 0.0f64;
        for _ in 0..1000 {
            let mut rb = || {
                BBox::new(
                    rng.random_range(0.0..300.0),
                    rng.random_range(0.0..300.0),
                    rng.random_range(2.0..150.0),
                    rng.random_range(2.0..150.0),
                )
                .unwrap()
            };
            let (g, a) = (rb(), rb());
            let d = decode_offsets(&encode_offsets(&g, &a), &a).unwrap();
            for (x, y) in [(d.cx, g.cx), (d.cy, g.cy), (d.w, g.w), (d.h, g.h)] {
                worst = worst.max((x - y).abs());
            }
        }
        assert!(worst < 1e-9, "max roundtrip error {worst}");
    }

    #[test]
    fn decode_rejects_overflow() {
        let anchor = BBox::new(10.0, 10.0, 20.0, 20.0).unwrap();
        let o = OffsetVector {
            dw: 1e4,
            ..OffsetVector::ZERO
        };
        assert!(decode_offsets(&o, &anchor).is_err());
        let o = OffsetVector {
            dx: f64::NAN,
            ..OffsetVector::ZERO
        };
        assert!(decode_offsets(&o, &anchor).is_err());
    }

    #[test]
    fn decode_clips_to_extent() {
        let anchor = BBox::new(5.0, 5.0, 20.0, 20.0).unwrap();
        let b = decode_clipped(&OffsetVector::ZERO, &anchor, 100.0, 100.0)
            .unwrap()
            .unwrap();
        assert_eq!(b.corners(), (0.0, 0.0, 15.0, 15.0));
        let far = BBox::new(-50.0, 5.0, 20.0, 20.0).unwrap();
        assert!(decode_clipped(&OffsetVector::ZERO, &far, 100.0, 100.0)
            .unwrap()
            .is_none());
    }

    #[test]
    fn nms_examples() {
        let b = BBox::new(10.0, 10.0, 8.0, 8.0).unwrap();
        assert_eq!(nms(&[(b, 0.3)], 0.5), vec![(b, 0.3)]);
        assert_eq!(nms(&[(b, 0.8), (b, 0.9)], 0.5), vec![(b, 0.9)]);
        // equal confidence: earlier input survives
        assert_eq!(nms_indices(&[(b, 0.5), (b, 0.5)], 0.5), vec![0]);
        assert!(nms(&[], 0.5).is_empty());
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0..100.0f64, 0.0..100.0f64, 0.5..60.0f64, 0.5..60.0f64).prop_map(|(cx, cy, w, h)| BBox { cx, cy, w, h })
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b);
            prop_assert_eq!(ab, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(iou(&a, &a), 1.0);
        }

        #[test]
        fn nms_kept_boxes_separated(
            dets in proptest::collection::vec((arb_box(), 0.0..1.0f64), 0..40),
            thr in 0.1..0.9f64,
        ) {
            let kept = nms_indices(&dets, thr);
            for (i, &a) in kept.iter().enumerate() {
                prop_assert!(a < dets.len());
                for &b in &kept[i + 1..] {
                    prop_assert!(iou(&dets[a].0, &dets[b].0) <= thr);
                    prop_assert!(dets[a].1 >= dets[b].1);
                }
            }
        }

        #[test]
        fn anchors_deterministic_and_counted(
            maps in proptest::collection::vec(1usize..12, 1..4),
            nr in 1usize..3,
            ns in 1usize..3,
        ) {
            let cfg = AnchorConfig {
                input_size: 96,
                base_sizes: AnchorConfig::linear_base_sizes(maps.len()),
                map_sizes: maps.clone(),
                aspect_ratios: [1.0, 0.75, 2.0][..nr].to_vec(),
                scales: [0.8, 1.2][..ns].to_vec(),
            };
            let a = generate_anchors(&cfg).unwrap();
            let expected: usize = maps.iter().map(|m| m * m).sum::<usize>() * nr * ns;
            prop_assert_eq!(a.len(), expected);
            prop_assert_eq!(a, generate_anchors(&cfg).unwrap());
        }
    }
}
