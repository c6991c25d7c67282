//! Detection decoding, per-instance mask refinement and stitching of tiled
//! predictions.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{
    extract_refinement_patch, paste_window, tile_offsets, write_label_png, write_rgb_png, Image, InstanceLabelMap,
    RefineWindow, DEFAULT_REFINE_SCALE,
};
use crate::error::{Error, Result};
use crate::geometry::{decode_clipped, iou, nms_indices, Anchor, BBox};
use crate::network::{Scalar, Tensor, UsNet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectParams {
    pub conf_threshold: f64,
    pub nms_iou: f64,
}

impl Default for DetectParams {
    fn default() -> Self {
        DetectParams {
            conf_threshold: 0.5,
            nms_iou: 0.45,
        }
    }
}

impl DetectParams {
    pub fn validate(&self) -> Result<()> {
        if (0.0..=1.0).contains(&self.conf_threshold) && (0.0..=1.0).contains(&self.nms_iou) {
            Ok(())
        } else {
            Err(Error::config(format!("invalid detection thresholds {self:?}")))
        }
    }
}

/// Everything applied after the network forward pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferParams {
    #[serde(flatten)]
    pub detect: DetectParams,
    pub merge_iou: f64,
    pub refine_scale: f64,
    /// Tile step when the image is larger than the model input.
    pub tile_step: usize,
}

impl Default for InferParams {
    fn default() -> Self {
        InferParams {
            detect: DetectParams::default(),
            merge_iou: 0.5,
            refine_scale: DEFAULT_REFINE_SCALE,
            tile_step: 200,
        }
    }
}

impl InferParams {
    pub fn validate(&self) -> Result<()> {
        self.detect.validate()?;
        if (0.0..=1.0).contains(&self.merge_iou) && self.refine_scale >= 1.0 && self.tile_step > 0 {
            Ok(())
        } else {
            Err(Error::config(format!("invalid inference settings {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub confidence: f64,
}

/// Decodes every item of a `B x 3 x S x S` batch; returns detections sorted
/// by descending confidence and the `S x S` foreground map of each item.
pub fn detect_batch<T: Scalar>(
    model: &UsNet<T>,
    anchors: &[Anchor],
    batch: &Tensor<T>,
    params: &DetectParams,
) -> Result<Vec<(Vec<Detection>, Vec<f32>)>> {
    params.validate()?;
    let out = model.predict(batch)?;
    if out.anchor_count() != anchors.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![anchors.len()],
            actual: vec![out.anchor_count()],
        });
    }
    let (h, w) = (batch.height() as f64, batch.width() as f64);
    let mut results = Vec::with_capacity(batch.batch());
    for item in 0..batch.batch() {
        let probs = out.anchor_probs(item);
        let offsets = out.anchor_offsets(item);
        let mut cands = Vec::new();
        for ((p, o), a) in probs.iter().zip(&offsets).zip(anchors) {
            if p[1] < params.conf_threshold {
                continue;
            }
            if let Some(b) = decode_clipped(o, &a.bbox, w, h)? {
                cands.push((b, p[1]));
            }
        }
        let dets = nms_indices(&cands, params.nms_iou)
            .into_iter()
            .map(|i| Detection {
                bbox: cands[i].0,
                confidence: cands[i].1,
            })
            .collect();
        let seg = out.seg_plane(item).iter().map(|v| v.f64() as f32).collect();
        results.push((dets, seg));
    }
    Ok(results)
}

pub fn detect<T: Scalar>(
    model: &UsNet<T>,
    anchors: &[Anchor],
    image: &Image,
    params: &DetectParams,
) -> Result<(Vec<Detection>, Vec<f32>)> {
    let s = model.config().input_size;
    if (image.width, image.height) != (s, s) {
        return Err(Error::ShapeMismatch {
            expected: vec![s, s],
            actual: vec![image.height, image.width],
        });
    }
    Ok(detect_batch(model, anchors, &image.to_tensor(), params)?.remove(0))
}

/// Binary mask over an image-space rectangle.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstanceMask {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl InstanceMask {
    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0
            && y >= self.y0
            && x < self.x0 + self.width
            && y < self.y0 + self.height
            && self.data[(y - self.y0) * self.width + x - self.x0]
    }

    /// Image pixels `(x, y)` in the mask.
    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &v)| v)
            .map(|(i, _)| (self.x0 + i % self.width, self.y0 + i / self.width))
    }

    fn translated(&self, dx: usize, dy: usize) -> InstanceMask {
        InstanceMask {
            x0: self.x0 + dx,
            y0: self.y0 + dy,
            ..self.clone()
        }
    }

    fn union(&self, other: &InstanceMask) -> InstanceMask {
        let x0 = self.x0.min(other.x0);
        let y0 = self.y0.min(other.y0);
        let x1 = (self.x0 + self.width).max(other.x0 + other.width);
        let y1 = (self.y0 + self.height).max(other.y0 + other.height);
        let (w, h) = (x1 - x0, y1 - y0);
        let mut data = vec![false; w * h];
        for (x, y) in self.pixels().chain(other.pixels()) {
            data[(y - y0) * w + x - x0] = true;
        }
        InstanceMask {
            x0,
            y0,
            width: w,
            height: h,
            data,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub detection: Detection,
    pub mask: InstanceMask,
    /// Origin of the tile that produced the instance.
    pub tile: (usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceResult {
    pub width: usize,
    pub height: usize,
    pub instances: Vec<Instance>,
    /// `height x width` foreground probability.
    pub seg: Vec<f32>,
}

impl InstanceResult {
    /// Instance `i` becomes label `i + 1`.
    pub fn label_map(&self) -> InstanceLabelMap {
        let mut labels = vec![0u16; self.width * self.height];
        for (i, inst) in self.instances.iter().enumerate() {
            for (x, y) in inst.mask.pixels() {
                labels[y * self.width + x] = i as u16 + 1;
            }
        }
        InstanceLabelMap::relabeled(self.width, self.height, labels)
            .expect("label buffer matches extent")
            .0
    }
}

/// Gives every contested pixel to the most confident instance and drops
/// instances left empty. Output is in descending confidence order.
fn resolve_overlaps(mut instances: Vec<Instance>, width: usize, height: usize) -> Vec<Instance> {
    instances.sort_by(|a, b| b.detection.confidence.total_cmp(&a.detection.confidence));
    let mut owned = vec![false; width * height];
    let mut out = Vec::with_capacity(instances.len());
    for mut inst in instances {
        let m = &mut inst.mask;
        for y in 0..m.height {
            for x in 0..m.width {
                let k = y * m.width + x;
                if !m.data[k] {
                    continue;
                }
                let g = (m.y0 + y) * width + m.x0 + x;
                if owned[g] {
                    m.data[k] = false;
                } else {
                    owned[g] = true;
                }
            }
        }
        if inst.mask.area() > 0 {
            out.push(inst);
        }
    }
    out
}

/// Refines each detection into a mask with the refinement network and
/// resolves overlaps by confidence.
pub fn assemble_instances<T: Scalar>(
    model: &UsNet<T>,
    image: &Image,
    detections: &[Detection],
    seg: &[f32],
    refine_scale: f64,
) -> Result<InstanceResult> {
    let (w, h) = (image.width, image.height);
    if seg.len() != w * h {
        return Err(Error::ShapeMismatch {
            expected: vec![h, w],
            actual: vec![seg.len()],
        });
    }
    let out = model.config().refine_size;
    let mut windows: Vec<RefineWindow> = Vec::with_capacity(detections.len());
    let mut inputs: Vec<T> = Vec::new();
    for d in detections {
        let p = extract_refinement_patch(image, seg, &d.bbox, refine_scale, out)?;
        windows.push(p.window);
        inputs.extend(p.input.iter().map(|&v| T::of(v as f64)));
    }
    let mut instances = Vec::with_capacity(detections.len());
    if !detections.is_empty() {
        let batch = Tensor::from_vec([detections.len(), 4, out, out], inputs)?;
        let (probs, _) = model.refine_forward(&batch)?;
        for (i, (d, win)) in detections.iter().zip(&windows).enumerate() {
            let prob: Vec<f32> = probs.item(i).iter().map(|v| v.f64() as f32).collect();
            instances.push(Instance {
                detection: *d,
                mask: InstanceMask {
                    x0: win.x0,
                    y0: win.y0,
                    width: win.width(),
                    height: win.height(),
                    data: paste_window(&prob, out, win),
                },
                tile: (0, 0),
            });
        }
    }
    Ok(InstanceResult {
        width: w,
        height: h,
        instances: resolve_overlaps(instances, w, h),
        seg: seg.to_vec(),
    })
}

/// Merges per-tile results placed at `origins` into one `width x height`
/// result. Instances from different tiles whose boxes overlap by at least
/// `merge_iou` are fused (mask union, highest confidence); overlapping tile
/// segmentation maps are averaged. The output does not depend on the order
/// of `tiles`.
pub fn stitch_tiles(
    tiles: &[(InstanceResult, (usize, usize))],
    width: usize,
    height: usize,
    merge_iou: f64,
) -> Result<InstanceResult> {
    let mut seg_sum = vec![0.0f64; width * height];
    let mut seg_count = vec![0u32; width * height];
    let mut all: Vec<Instance> = Vec::new();
    for (res, (ox, oy)) in tiles {
        if ox + res.width > width || oy + res.height > height {
            return Err(Error::input(format!(
                "tile {}x{} at ({ox}, {oy}) exceeds {width}x{height}",
                res.width, res.height
            )));
        }
        for y in 0..res.height {
            for x in 0..res.width {
                let g = (oy + y) * width + ox + x;
                seg_sum[g] += res.seg[y * res.width + x] as f64;
                seg_count[g] += 1;
            }
        }
        for inst in &res.instances {
            all.push(Instance {
                detection: Detection {
                    bbox: inst.detection.bbox.translated(*ox as f64, *oy as f64),
                    confidence: inst.detection.confidence,
                },
                mask: inst.mask.translated(*ox, *oy),
                tile: (*ox, *oy),
            });
        }
    }
    // Canonical order so merging is independent of tile order.
    all.sort_by(|a, b| {
        let ka = (
            a.detection.bbox.cx,
            a.detection.bbox.cy,
            a.detection.bbox.w,
            a.detection.bbox.h,
        );
        let kb = (
            b.detection.bbox.cx,
            b.detection.bbox.cy,
            b.detection.bbox.w,
            b.detection.bbox.h,
        );
        b.detection
            .confidence
            .total_cmp(&a.detection.confidence)
            .then(ka.0.total_cmp(&kb.0))
            .then(ka.1.total_cmp(&kb.1))
            .then(ka.2.total_cmp(&kb.2))
            .then(ka.3.total_cmp(&kb.3))
            .then(a.tile.cmp(&b.tile))
            .then(a.mask.data.cmp(&b.mask.data))
    });
    let mut merged: Vec<(Instance, Vec<(usize, usize)>)> = Vec::new();
    for inst in all {
        let origin = inst.tile;
        let hit = merged.iter_mut().find(|(m, origins)| {
            !origins.contains(&origin) && iou(&m.detection.bbox, &inst.detection.bbox) >= merge_iou
        });
        match hit {
            Some((m, origins)) => {
                m.detection.bbox = m.detection.bbox.union(&inst.detection.bbox);
                m.detection.confidence = m.detection.confidence.max(inst.detection.confidence);
                m.mask = m.mask.union(&inst.mask);
                origins.push(origin);
            }
            None => merged.push((inst, vec![origin])),
        }
    }
    let seg = seg_sum
        .iter()
        .zip(&seg_count)
        .map(|(&s, &c)| if c == 0 { 0.0 } else { (s / c as f64) as f32 })
        .collect();
    let instances = merged.into_iter().map(|(m, _)| m).collect();
    Ok(InstanceResult {
        width,
        height,
        instances: resolve_overlaps(instances, width, height),
        seg,
    })
}

/// Offsets covering `side` with windows of `tile`: the regular grid plus a
/// final window flush with the far edge.
fn covering_offsets(side: usize, tile: usize, step: usize) -> Vec<usize> {
    let mut offs = tile_offsets(side, tile, step);
    if offs.last().is_some_and(|&o| o + tile < side) {
        offs.push(side - tile);
    }
    offs
}

/// Full pipeline for an image of any size at least the model input:
/// tile, detect, refine, stitch.
pub fn predict_image<T: Scalar>(
    model: &UsNet<T>,
    anchors: &[Anchor],
    image: &Image,
    params: &InferParams,
) -> Result<InstanceResult> {
    let s = model.config().input_size;
    if image.width < s || image.height < s {
        return Err(Error::input(format!(
            "image {}x{} smaller than the {s}x{s} model input",
            image.width, image.height
        )));
    }
    let step = params.tile_step.max(1);
    let mut tiles = Vec::new();
    for y in covering_offsets(image.height, s, step) {
        for x in covering_offsets(image.width, s, step) {
            let crop = image.crop(x, y, s, s)?;
            let (dets, seg) = detect(model, anchors, &crop, &params.detect)?;
            let res = assemble_instances(model, &crop, &dets, &seg, params.refine_scale)?;
            tiles.push((res, (x, y)));
        }
    }
    stitch_tiles(&tiles, image.width, image.height, params.merge_iou)
}

#[derive(Serialize)]
struct DetectionJson {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    conf: f64,
    area: usize,
    tile: [usize; 2],
}

#[derive(Serialize)]
struct PredictionJson<'a> {
    image: &'a str,
    width: usize,
    height: usize,
    detections: Vec<DetectionJson>,
}

/// Writes `<stem>.json`, `labels/<stem>.png` and `overlay/<stem>.png` under
/// `dir`.
pub fn write_prediction(dir: &Path, stem: &str, image: &Image, result: &InstanceResult) -> Result<()> {
    for sub in ["labels", "overlay"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let json = PredictionJson {
        image: stem,
        width: result.width,
        height: result.height,
        detections: result
            .instances
            .iter()
            .map(|i| DetectionJson {
                cx: i.detection.bbox.cx,
                cy: i.detection.bbox.cy,
                w: i.detection.bbox.w,
                h: i.detection.bbox.h,
                conf: i.detection.confidence,
                area: i.mask.area(),
                tile: [i.tile.0, i.tile.1],
            })
            .collect(),
    };
    let path = dir.join(format!("{stem}.json"));
    fs::write(&path, serde_json::to_string_pretty(&json)? + "\n").map_err(|e| Error::io(&path, e))?;
    write_label_png(&dir.join("labels").join(format!("{stem}.png")), &result.label_map())?;
    write_rgb_png(
        &dir.join("overlay").join(format!("{stem}.png")),
        &overlay(image, result),
    )
}

/// Image with instance masks tinted and box outlines drawn.
pub fn overlay(image: &Image, result: &InstanceResult) -> Image {
    const PALETTE: [[u8; 3]; 6] = [
        [230, 25, 75],
        [60, 180, 75],
        [255, 225, 25],
        [0, 130, 200],
        [245, 130, 48],
        [70, 240, 240],
    ];
    let mut out = image.clone();
    let w = image.width;
    for (k, inst) in result.instances.iter().enumerate() {
        let c = PALETTE[k % PALETTE.len()];
        for (x, y) in inst.mask.pixels() {
            let i = (y * w + x) * 3;
            for (px, tint) in out.data[i..i + 3].iter_mut().zip(c) {
                *px = ((*px as u16 + tint as u16) / 2) as u8;
            }
        }
        let (x0, y0, x1, y1) = inst.detection.bbox.corners();
        let clampx = |v: f64| (v.max(0.0) as usize).min(w - 1);
        let clampy = |v: f64| (v.max(0.0) as usize).min(image.height - 1);
        let (x0, x1, y0, y1) = (clampx(x0), clampx(x1), clampy(y0), clampy(y1));
        for x in x0..=x1 {
            for y in [y0, y1] {
                out.data[(y * w + x) * 3..][..3].copy_from_slice(&c);
            }
        }
        for y in y0..=y1 {
            for x in [x0, x1] {
                out.data[(y * w + x) * 3..][..3].copy_from_slice(&c);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect(x0: usize, y0: usize, w: usize, h: usize) -> InstanceMask {
        InstanceMask {
            x0,
            y0,
            width: w,
            height: h,
            data: vec![true; w * h],
        }
    }

    fn inst(b: BBox, conf: f64, mask: InstanceMask) -> Instance {
        Instance {
            detection: Detection {
                bbox: b,
                confidence: conf,
            },
            mask,
            tile: (0, 0),
        }
    }

    #[test]
    fn overlap_goes_to_confident_instance() {
        let a = inst(BBox::new(15.0, 15.0, 10.0, 10.0).unwrap(), 0.6, rect(10, 10, 10, 10));
        let b = inst(BBox::new(18.0, 18.0, 10.0, 10.0).unwrap(), 0.9, rect(13, 13, 10, 10));
        let out = resolve_overlaps(vec![a, b], 40, 40);
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].detection.confidence, 0.9);
        assert_eq!(out[0].mask.area(), 100);
        assert_eq!(out[1].mask.area(), 100 - 49);
        assert!(!out[1].mask.contains(15, 15));
    }

    #[test]
    fn covered_instance_dropped() {
        let a = inst(BBox::new(15.0, 15.0, 4.0, 4.0).unwrap(), 0.6, rect(13, 13, 4, 4));
        let b = inst(BBox::new(15.0, 15.0, 10.0, 10.0).unwrap(), 0.9, rect(10, 10, 10, 10));
        assert_eq!(resolve_overlaps(vec![a, b], 40, 40).len(), 1);
    }

    fn tile_result(size: usize, instances: Vec<Instance>, seg: f32) -> InstanceResult {
        InstanceResult {
            width: size,
            height: size,
            instances,
            seg: vec![seg; size * size],
        }
    }

    #[test]
    fn stitch_single_tile_identity() {
        let t = tile_result(
            20,
            vec![inst(BBox::new(5.0, 5.0, 4.0, 4.0).unwrap(), 0.8, rect(3, 3, 4, 4))],
            0.3,
        );
        let out = stitch_tiles(&[(t.clone(), (0, 0))], 20, 20, 0.5).unwrap();
        assert_eq!(out, t);
    }

    #[test]
    fn stitch_merges_straddling_instance_and_averages_seg() {
        // tiles at x = 0 and x = 10, both 20 wide; the object spans x 12..18
        let left = tile_result(
            20,
            vec![inst(BBox::new(15.0, 5.0, 6.0, 6.0).unwrap(), 0.7, rect(12, 2, 6, 6))],
            0.2,
        );
        let right = tile_result(
            20,
            vec![inst(BBox::new(5.0, 5.0, 6.0, 6.0).unwrap(), 0.9, rect(2, 2, 6, 6))],
            0.6,
        );
        let a = stitch_tiles(&[(left.clone(), (0, 0)), (right.clone(), (10, 0))], 30, 20, 0.5).unwrap();
        let b = stitch_tiles(&[(right, (10, 0)), (left, (0, 0))], 30, 20, 0.5).unwrap();
        assert_eq!(a.instances.len(), 1);
        assert_eq!(a.instances[0].detection.confidence, 0.9);
        assert_eq!(a.instances[0].mask.area(), 36);
        assert!((a.seg[15] - 0.4).abs() < 1e-6);
        assert_eq!(a.seg[5], 0.2);
        assert_eq!(a.instances[0].mask, b.instances[0].mask);
        assert_eq!(a.seg, b.seg);
    }

    #[test]
    fn stitch_keeps_disjoint_and_rejects_outside() {
        let t1 = tile_result(
            10,
            vec![inst(BBox::new(5.0, 5.0, 4.0, 4.0).unwrap(), 0.8, rect(3, 3, 4, 4))],
            0.0,
        );
        let t2 = t1.clone();
        let out = stitch_tiles(&[(t1.clone(), (0, 0)), (t2, (10, 0))], 20, 10, 0.5).unwrap();
        assert_eq!(out.instances.len(), 2);
        assert!(stitch_tiles(&[(t1, (15, 0))], 20, 10, 0.5).is_err());
    }

    #[test]
    fn covering_reaches_far_edge() {
        assert_eq!(covering_offsets(600, 300, 200), vec![0, 200, 300]);
        assert_eq!(covering_offsets(300, 300, 200), vec![0]);
        assert_eq!(covering_offsets(700, 300, 200), vec![0, 200, 400]);
    }
}
