//! Pixel accuracy and VOC-style 11-point interpolated average precision.

use serde::{Deserialize, Serialize};

use crate::data::{center_crop, PatchRecord};
use crate::error::{Error, Result};
use crate::geometry::{iou, Anchor, BBox};
use crate::inference::{detect_batch, DetectParams};
use crate::network::{Scalar, Tensor, UsNet};

pub const DEFAULT_AP_IOU: f64 = 0.5;
/// Detection cutoff used when sweeping for AP; low so that the sweep sees
/// the whole ranking rather than only confident boxes.
pub const EVAL_CONF_THRESHOLD: f64 = 0.05;

/// A detection tagged with the image it belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub image: usize,
    pub bbox: BBox,
    pub confidence: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PRPoint {
    pub confidence: f64,
    pub precision: f64,
    pub recall: f64,
    pub tp: usize,
    pub fp: usize,
}

pub fn pixel_accuracy(pred: &[bool], gt: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![gt.len()],
            actual: vec![pred.len()],
        });
    }
    if pred.is_empty() {
        return Err(Error::input("pixel accuracy of an empty mask"));
    }
    let hits = pred.iter().zip(gt).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / pred.len() as f64)
}

pub fn binarize<T: Scalar>(map: &[T], threshold: f64) -> Vec<bool> {
    map.iter().map(|v| v.f64() >= threshold).collect()
}

fn check_inputs(dets: &[ScoredBox], gts: &[Vec<BBox>]) -> Result<()> {
    if let Some(b) = gts.iter().flatten().find(|b| !b.is_valid()) {
        return Err(Error::InvalidBox(format!("ground truth {b:?}")));
    }
    for d in dets {
        if d.image >= gts.len() {
            return Err(Error::input(format!(
                "detection for image {} of {}",
                d.image,
                gts.len()
            )));
        }
        if !d.confidence.is_finite() || !d.bbox.is_valid() {
            return Err(Error::input(format!("malformed detection {d:?}")));
        }
    }
    Ok(())
}

/// Confidence-descending sweep over all images (`gts[i]` are the boxes of
/// image `i`). Each detection is matched to its best-overlap box in its
/// image; it counts as a true positive only if that box reaches
/// `iou_threshold` and is still unmatched. One point is emitted per
/// distinct confidence.
pub fn pr_curve(dets: &[ScoredBox], gts: &[Vec<BBox>], iou_threshold: f64) -> Result<Vec<PRPoint>> {
    check_inputs(dets, gts)?;
    let n_gt: usize = gts.iter().map(Vec::len).sum();
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence));

    let mut matched: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut points = Vec::new();
    for (k, &i) in order.iter().enumerate() {
        let d = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (g, b) in gts[d.image].iter().enumerate() {
            let v = iou(&d.bbox, b);
            if best.is_none_or(|(_, bv)| v > bv) {
                best = Some((g, v));
            }
        }
        match best {
            Some((g, v)) if v >= iou_threshold && !matched[d.image][g] => {
                matched[d.image][g] = true;
                tp += 1;
            }
            _ => fp += 1,
        }
        let last_of_level = order.get(k + 1).is_none_or(|&j| dets[j].confidence != d.confidence);
        if last_of_level {
            points.push(PRPoint {
                confidence: d.confidence,
                precision: tp as f64 / (tp + fp) as f64,
                recall: if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 },
                tp,
                fp,
            });
        }
    }
    Ok(points)
}

/// Mean over `r = 0, 0.1, .., 1` of the best precision at recall `>= r`.
pub fn ap_from_curve(points: &[PRPoint]) -> f64 {
    (0..=10)
        .map(|i| {
            let r = i as f64 / 10.0;
            points
                .iter()
                .filter(|p| p.recall >= r)
                .map(|p| p.precision)
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 11.0
}

/// 11-point interpolated AP; 0 when there is no ground truth at all.
pub fn voc_ap(dets: &[ScoredBox], gts: &[Vec<BBox>], iou_threshold: f64) -> Result<f64> {
    let points = pr_curve(dets, gts, iou_threshold)?;
    if gts.iter().all(Vec::is_empty) {
        return Ok(0.0);
    }
    Ok(ap_from_curve(&points))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub ap: f64,
    pub pa: f64,
    pub n_images: usize,
    pub n_gt: usize,
    pub n_det: usize,
    pub pr: Vec<PRPoint>,
}

impl Metrics {
    pub fn pr_csv(&self) -> String {
        let mut out = String::from("confidence,precision,recall,tp,fp\n");
        for p in &self.pr {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                p.confidence, p.precision, p.recall, p.tp, p.fp
            ));
        }
        out
    }
}

/// Runs the model over the center crop of each record and scores boxes
/// (AP at `iou_threshold`) and the binarized segmentation (PA).
///
/// `params.conf_threshold` bounds which detections enter the sweep.
pub fn evaluate<T: Scalar>(
    model: &UsNet<T>,
    anchors: &[Anchor],
    records: &[PatchRecord],
    params: &DetectParams,
    iou_threshold: f64,
    batch_size: usize,
) -> Result<Metrics> {
    let size = model.config().input_size;
    let crops = records
        .iter()
        .map(|r| center_crop(r, size))
        .collect::<Result<Vec<_>>>()?;
    let mut dets = Vec::new();
    let (mut hits, mut pixels) = (0usize, 0usize);
    for (chunk_idx, chunk) in crops.chunks(batch_size.max(1)).enumerate() {
        let items: Vec<Tensor<T>> = chunk.iter().map(|r| r.image.to_tensor()).collect();
        let out = detect_batch(model, anchors, &Tensor::stack(&items)?, params)?;
        for (j, ((found, seg), rec)) in out.into_iter().zip(chunk).enumerate() {
            let image = chunk_idx * batch_size.max(1) + j;
            dets.extend(found.into_iter().map(|d| ScoredBox {
                image,
                bbox: d.bbox,
                confidence: d.confidence,
            }));
            let pred = binarize(&seg, 0.5);
            let gt: Vec<bool> = rec.labels.labels().iter().map(|&l| l > 0).collect();
            hits += (pixel_accuracy(&pred, &gt)? * pred.len() as f64).round() as usize;
            pixels += pred.len();
        }
    }
    let gts: Vec<Vec<BBox>> = crops.iter().map(|r| r.boxes.clone()).collect();
    let pr = pr_curve(&dets, &gts, iou_threshold)?;
    let ap = if gts.iter().all(Vec::is_empty) {
        0.0
    } else {
        ap_from_curve(&pr)
    };
    Ok(Metrics {
        ap,
        pa: if pixels == 0 { 0.0 } else { hits as f64 / pixels as f64 },
        n_images: crops.len(),
        n_gt: gts.iter().map(Vec::len).sum(),
        n_det: dets.len(),
        pr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(cx: f64, cy: f64, s: f64) -> BBox {
        BBox::new(cx, cy, s, s).unwrap()
    }

    fn det(image: usize, bbox: BBox, confidence: f64) -> ScoredBox {
        ScoredBox {
            image,
            bbox,
            confidence,
        }
    }

    #[test]
    fn pixel_accuracy_cases() {
        let a = [true, false, true, false];
        assert_eq!(pixel_accuracy(&a, &a).unwrap(), 1.0);
        let c: Vec<bool> = a.iter().map(|v| !v).collect();
        assert_eq!(pixel_accuracy(&a, &c).unwrap(), 0.0);
        assert_eq!(pixel_accuracy(&a, &[true, true, false, false]).unwrap(), 0.5);
        assert!(pixel_accuracy(&a, &[true]).is_err());
    }

    #[test]
    fn ap_edge_cases() {
        let g = vec![vec![b(10.0, 10.0, 8.0)]];
        assert_eq!(voc_ap(&[det(0, b(10.0, 10.0, 8.0), 0.9)], &g, 0.5).unwrap(), 1.0);
        assert_eq!(voc_ap(&[], &g, 0.5).unwrap(), 0.0);
        assert_eq!(voc_ap(&[det(0, b(10.0, 10.0, 8.0), 0.9)], &[vec![]], 0.5).unwrap(), 0.0);
        let bad = vec![vec![BBox {
            cx: 0.0,
            cy: 0.0,
            w: 0.0,
            h: 1.0,
        }]];
        assert!(voc_ap(&[], &bad, 0.5).is_err());
        assert!(voc_ap(&[det(3, b(1.0, 1.0, 1.0), 0.5)], &g, 0.5).is_err());
    }

    #[test]
    fn curve_points() {
        let g = vec![vec![b(10.0, 10.0, 8.0)]];
        let one = pr_curve(&[det(0, b(10.0, 10.0, 8.0), 0.7)], &g, 0.5).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!((one[0].precision, one[0].recall), (1.0, 1.0));
        let misses = [det(0, b(40.0, 40.0, 8.0), 0.7), det(0, b(60.0, 40.0, 8.0), 0.6)];
        assert!(pr_curve(&misses, &g, 0.5).unwrap().iter().all(|p| p.precision == 0.0));
        // tied confidences collapse to one point
        let tied = [det(0, b(40.0, 40.0, 8.0), 0.5), det(0, b(10.0, 10.0, 8.0), 0.5)];
        assert_eq!(pr_curve(&tied, &g, 0.5).unwrap().len(), 1);
    }

    fn arb_scene() -> impl Strategy<Value = (Vec<ScoredBox>, Vec<Vec<BBox>>)> {
        let bx = (0.0..60.0f64, 0.0..60.0f64, 4.0..20.0f64).prop_map(|(x, y, s)| b(x, y, s));
        let gts = proptest::collection::vec(proptest::collection::vec(bx.clone(), 0..4), 1..3);
        gts.prop_flat_map(move |g| {
            let n = g.len();
            let d = proptest::collection::vec((0..n, bx.clone(), 0.0..1.0f64), 0..10)
                .prop_map(|v| v.into_iter().map(|(i, bb, c)| det(i, bb, c)).collect::<Vec<_>>());
            (d, Just(g))
        })
    }

    proptest! {
        #[test]
        fn duplicate_never_helps((dets, gts) in arb_scene(), pick in 0usize..10) {
            prop_assume!(!dets.is_empty());
            let base = voc_ap(&dets, &gts, 0.5).unwrap();
            let mut more = dets.clone();
            let mut dup = dets[pick % dets.len()];
            dup.confidence *= 0.999;
            more.push(dup);
            prop_assert!(voc_ap(&more, &gts, 0.5).unwrap() <= base + 1e-12);
        }

        #[test]
        fn rank_only((dets, gts) in arb_scene()) {
            let squashed: Vec<ScoredBox> = dets
                .iter()
                .map(|d| ScoredBox { confidence: (3.0 * d.confidence).exp() - 7.0, ..*d })
                .collect();
            prop_assert_eq!(voc_ap(&dets, &gts, 0.5).unwrap(), voc_ap(&squashed, &gts, 0.5).unwrap());
        }

        #[test]
        fn curve_is_monotone((dets, gts) in arb_scene()) {
            let pts = pr_curve(&dets, &gts, 0.5).unwrap();
            for w in pts.windows(2) {
                prop_assert!(w[1].recall >= w[0].recall);
                prop_assert!(w[1].confidence < w[0].confidence);
            }
            for p in &pts {
                prop_assert!((0.0..=1.0).contains(&p.precision) && (0.0..=1.0).contains(&p.recall));
            }
        }

        #[test]
        fn pa_symmetric(a in proptest::collection::vec(any::<bool>(), 1..50), seed in any::<u64>()) {
            let b: Vec<bool> = a.iter().enumerate().map(|(i, &v)| v ^ ((seed >> (i % 64)) & 1 == 1)).collect();
            prop_assert_eq!(pixel_accuracy(&a, &b).unwrap(), pixel_accuracy(&b, &a).unwrap());
        }
    }
}
