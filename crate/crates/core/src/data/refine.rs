//! Fixed-size patches around a box for the refinement network, and the
//! mapping of refined masks back to image pixels.

use crate::error::{Error, Result};
use crate::geometry::BBox;

use super::{Image, PatchRecord};

/// Enlargement applied to a box before cropping its patch.
pub const DEFAULT_REFINE_SCALE: f64 = 1.2;

/// Integer pixel window `[x0, x1) x [y0, y1)` inside an image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RefineWindow {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl RefineWindow {
    /// `bbox` enlarged by `scale` about its center and clipped to the image.
    pub fn around(bbox: &BBox, scale: f64, width: usize, height: usize) -> Result<Self> {
        if !bbox.is_valid() {
            return Err(Error::InvalidBox(format!("{bbox:?}")));
        }
        if !(scale >= 1.0 && scale.is_finite()) {
            return Err(Error::config(format!("refinement scale {scale} below 1")));
        }
        let (x0, y0, x1, y1) = bbox.expanded(scale).corners();
        let clamp = |v: f64, hi: usize| v.clamp(0.0, hi as f64);
        let w = RefineWindow {
            x0: clamp(x0, width).floor() as usize,
            y0: clamp(y0, height).floor() as usize,
            x1: clamp(x1, width).ceil() as usize,
            y1: clamp(y1, height).ceil() as usize,
        };
        if w.x1 <= w.x0 || w.y1 <= w.y0 {
            return Err(Error::input(format!(
                "box {bbox:?} lies outside the {width}x{height} image"
            )));
        }
        Ok(w)
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }
}

/// Source coordinate sampled by output pixel `i` when resizing `src` pixels
/// to `dst` (pixel centers aligned).
fn source_coord(i: usize, src: usize, dst: usize) -> f64 {
    ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64)
}

fn bilinear(plane: &[f32], w: usize, x: f64, y: f64) -> f32 {
    let (xf, yf) = (x.floor(), y.floor());
    let (x0, y0) = (xf as usize, yf as usize);
    let h = plane.len() / w;
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (tx, ty) = ((x - xf) as f32, (y - yf) as f32);
    let at = |xx: usize, yy: usize| plane[yy * w + xx];
    let top = at(x0, y0) * (1.0 - tx) + at(x1, y0) * tx;
    let bottom = at(x0, y1) * (1.0 - tx) + at(x1, y1) * tx;
    top * (1.0 - ty) + bottom * ty
}

/// Bilinear resize of the window of a `width`-wide plane to `out x out`.
fn resize_window(plane: &[f32], width: usize, win: &RefineWindow, out: usize) -> Vec<f32> {
    let (ww, wh) = (win.width(), win.height());
    let sub: Vec<f32> = (win.y0..win.y1)
        .flat_map(|y| plane[y * width + win.x0..y * width + win.x1].iter().copied())
        .collect();
    let mut res = Vec::with_capacity(out * out);
    for i in 0..out {
        let sy = source_coord(i, wh, out);
        for j in 0..out {
            res.push(bilinear(&sub, ww, source_coord(j, ww, out), sy));
        }
    }
    res
}

/// Refinement network input for one box.
#[derive(Clone, Debug, PartialEq)]
pub struct RefinePatch {
    pub window: RefineWindow,
    /// `4 x out x out`: RGB in `[0, 1]` then the coarse segmentation.
    pub input: Vec<f32>,
}

/// Crops `bbox` enlarged by `scale` from the image and the coarse
/// segmentation map (`H x W` in `[0, 1]`) and resizes both to `out x out`.
pub fn extract_refinement_patch(
    image: &Image,
    coarse_seg: &[f32],
    bbox: &BBox,
    scale: f64,
    out: usize,
) -> Result<RefinePatch> {
    if coarse_seg.len() != image.width * image.height {
        return Err(Error::ShapeMismatch {
            expected: vec![image.height, image.width],
            actual: vec![coarse_seg.len()],
        });
    }
    let window = RefineWindow::around(bbox, scale, image.width, image.height)?;
    let planes: Vec<f32> = image.planes();
    let n = image.width * image.height;
    let mut input = Vec::with_capacity(4 * out * out);
    for c in 0..3 {
        input.extend(resize_window(&planes[c * n..(c + 1) * n], image.width, &window, out));
    }
    input.extend(resize_window(coarse_seg, image.width, &window, out));
    Ok(RefinePatch { window, input })
}

/// Nearest-neighbor `out x out` 0/1 mask of instance `id` over the window.
pub fn refinement_target(labels: &super::InstanceLabelMap, id: u16, window: &RefineWindow, out: usize) -> Vec<f32> {
    let mut res = Vec::with_capacity(out * out);
    let pick = |i: usize, n: usize| ((i as f64 + 0.5) * n as f64 / out as f64).floor().min((n - 1) as f64) as usize;
    for i in 0..out {
        let y = window.y0 + pick(i, window.height());
        for j in 0..out {
            let x = window.x0 + pick(j, window.width());
            res.push(if labels.get(x, y) == id { 1.0 } else { 0.0 });
        }
    }
    res
}

/// Samples the `out x out` refined probability map at every pixel of the
/// window and thresholds it at 0.5; returns a `window.width() x
/// window.height()` row-major mask.
pub fn paste_window(prob: &[f32], out: usize, window: &RefineWindow) -> Vec<bool> {
    let (ww, wh) = (window.width(), window.height());
    let mut mask = Vec::with_capacity(ww * wh);
    let back = |i: usize, n: usize| ((i as f64 + 0.5) * out as f64 / n as f64 - 0.5).clamp(0.0, (out - 1) as f64);
    for y in 0..wh {
        let sy = back(y, wh);
        for x in 0..ww {
            mask.push(bilinear(prob, out, back(x, ww), sy) >= 0.5);
        }
    }
    mask
}

/// Input/target pair for refinement training.
#[derive(Clone, Debug, PartialEq)]
pub struct RefineSample {
    pub input: Vec<f32>,
    pub target: Vec<f32>,
}

/// One sample per boxed instance, using the ground-truth foreground as the
/// coarse segmentation channel.
pub fn refinement_samples(records: &[PatchRecord], scale: f64, out: usize) -> Result<Vec<RefineSample>> {
    let mut samples = Vec::new();
    for r in records {
        let fg: Vec<f32> = r.labels.foreground();
        for (b, &id) in r.boxes.iter().zip(&r.box_ids) {
            let p = extract_refinement_patch(&r.image, &fg, b, scale, out)?;
            let target = refinement_target(&r.labels, id, &p.window, out);
            samples.push(RefineSample { input: p.input, target });
        }
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::InstanceLabelMap;

    fn gradient_image(w: usize, h: usize) -> Image {
        let data = (0..w * h).flat_map(|i| [(i % w) as u8, (i / w) as u8, 7]).collect();
        Image::new(w, h, data).unwrap()
    }

    #[test]
    fn same_size_window_is_identity() {
        let img = gradient_image(100, 100);
        let seg = vec![0.25f32; 100 * 100];
        let b = BBox::new(50.0, 40.0, 48.0, 48.0).unwrap();
        let p = extract_refinement_patch(&img, &seg, &b, 1.0, 48).unwrap();
        assert_eq!(
            p.window,
            RefineWindow {
                x0: 26,
                y0: 16,
                x1: 74,
                y1: 64
            }
        );
        for i in 0..48 {
            for j in 0..48 {
                assert!((p.input[i * 48 + j] * 255.0 - (26 + j) as f32).abs() < 1e-3);
                assert!((p.input[48 * 48 + i * 48 + j] * 255.0 - (16 + i) as f32).abs() < 1e-3);
            }
        }
        assert!(p.input[3 * 48 * 48..].iter().all(|&v| (v - 0.25).abs() < 1e-6));
    }

    #[test]
    fn border_box_is_clipped() {
        let img = gradient_image(60, 60);
        let seg = vec![0.0f32; 3600];
        let b = BBox::new(10.0, 10.0, 30.0, 30.0).unwrap();
        let p = extract_refinement_patch(&img, &seg, &b, 1.2, 48).unwrap();
        // 36 px window about (10, 10) loses its top-left 8 px
        assert_eq!(
            p.window,
            RefineWindow {
                x0: 0,
                y0: 0,
                x1: 28,
                y1: 28
            }
        );
        assert_eq!(p.input.len(), 4 * 48 * 48);
        let far = BBox::new(-100.0, -100.0, 10.0, 10.0).unwrap();
        assert!(extract_refinement_patch(&img, &seg, &far, 1.0, 48).is_err());
        assert!(extract_refinement_patch(&img, &seg, &b, 0.5, 48).is_err());
    }

    #[test]
    fn target_is_binary_and_pastes_back() {
        let mut labels = vec![0u16; 40 * 40];
        for y in 10..30 {
            for x in 12..26 {
                labels[y * 40 + x] = 1;
            }
        }
        let map = InstanceLabelMap::new(40, 40, labels.clone()).unwrap();
        let b = BBox::new(19.0, 20.0, 14.0, 20.0).unwrap();
        let win = RefineWindow::around(&b, 1.2, 40, 40).unwrap();
        let t = refinement_target(&map, 1, &win, 48);
        assert!(t.iter().all(|&v| v == 0.0 || v == 1.0));
        let mask = paste_window(&t, 48, &win);
        let mut wrong = 0;
        for y in 0..win.height() {
            for x in 0..win.width() {
                let truth = labels[(win.y0 + y) * 40 + win.x0 + x] == 1;
                wrong += (mask[y * win.width() + x] != truth) as usize;
            }
        }
        // round trip through 48 px only blurs the border
        assert!(wrong <= 2 * (win.width() + win.height()));
    }
}
