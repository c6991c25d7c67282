//! Images, instance label maps, tiling and crops, refinement patches, the
//! synthetic scene generator and the on-disk dataset layout.

mod io;
mod refine;
mod synth;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::network::{Scalar, Tensor};

pub use io::{load_dataset, read_rgb_png, save_dataset, write_label_png, write_rgb_png, Manifest};
pub use refine::{
    extract_refinement_patch, paste_window, refinement_samples, refinement_target, RefinePatch, RefineSample,
    RefineWindow, DEFAULT_REFINE_SCALE,
};
pub use synth::{synth_generate, SynthOutput, SynthParams};

/// Instances whose tight box is thinner than this are left out of box lists.
pub const MIN_BOX_SIDE: usize = 4;

/// 8-bit RGB image, row-major with interleaved channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::ShapeMismatch {
                expected: vec![height, width, 3],
                actual: vec![data.len()],
            });
        }
        Ok(Image { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        Image {
            width,
            height,
            data: rgb.repeat(width * height),
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Image> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(Error::input(format!(
                "crop {w}x{h}+{x0}+{y0} exceeds {}x{}",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(w * h * 3);
        for y in y0..y0 + h {
            let start = (y * self.width + x0) * 3;
            data.extend_from_slice(&self.data[start..start + w * 3]);
        }
        Ok(Image {
            width: w,
            height: h,
            data,
        })
    }

    /// Channel-planar copy scaled to `[0, 1]`.
    pub fn planes<T: Scalar>(&self) -> Vec<T> {
        let n = self.width * self.height;
        let mut out = vec![T::zero(); 3 * n];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * n + i] = T::of(px[c] as f64 / 255.0);
            }
        }
        out
    }

    /// `1 x 3 x H x W` network input.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_vec([1, 3, self.height, self.width], self.planes()).expect("plane length")
    }
}

/// Per-pixel instance ids: 0 is background, `1..=K` are instances.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstanceLabelMap {
    width: usize,
    height: usize,
    labels: Vec<u16>,
    count: u16,
}

impl InstanceLabelMap {
    /// Rejects maps whose ids are not exactly `0..=K` with every instance
    /// present.
    pub fn new(width: usize, height: usize, labels: Vec<u16>) -> Result<Self> {
        let (map, repaired) = Self::relabeled(width, height, labels)?;
        if repaired {
            return Err(Error::input("instance labels are not contiguous"));
        }
        Ok(map)
    }

    pub fn empty(width: usize, height: usize) -> Self {
        InstanceLabelMap {
            width,
            height,
            labels: vec![0; width * height],
            count: 0,
        }
    }

    /// Compacts arbitrary ids to `1..=K`, preserving their order. The flag
    /// reports whether anything had to change.
    pub fn relabeled(width: usize, height: usize, labels: Vec<u16>) -> Result<(Self, bool)> {
        if labels.len() != width * height {
            return Err(Error::ShapeMismatch {
                expected: vec![height, width],
                actual: vec![labels.len()],
            });
        }
        let mut present = vec![false; u16::MAX as usize + 1];
        for &l in &labels {
            present[l as usize] = true;
        }
        let mut remap = vec![0u16; u16::MAX as usize + 1];
        let mut next = 0u16;
        let mut changed = false;
        for (id, &p) in present.iter().enumerate().skip(1) {
            if p {
                next += 1;
                remap[id] = next;
                changed |= next as usize != id;
            }
        }
        let labels = if changed {
            labels.iter().map(|&l| remap[l as usize]).collect()
        } else {
            labels
        };
        Ok((
            InstanceLabelMap {
                width,
                height,
                labels,
                count: next,
            },
            changed,
        ))
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn instance_count(&self) -> usize {
        self.count as usize
    }

    pub fn get(&self, x: usize, y: usize) -> u16 {
        self.labels[y * self.width + x]
    }

    /// Inclusive pixel bounds `(x0, y0, x1, y1)` of every instance, indexed by
    /// `id - 1`.
    pub fn instance_bounds(&self) -> Vec<(usize, usize, usize, usize)> {
        let mut b = vec![(usize::MAX, usize::MAX, 0, 0); self.count as usize];
        for (i, &l) in self.labels.iter().enumerate() {
            if l == 0 {
                continue;
            }
            let (x, y) = (i % self.width, i / self.width);
            let e = &mut b[l as usize - 1];
            e.0 = e.0.min(x);
            e.1 = e.1.min(y);
            e.2 = e.2.max(x);
            e.3 = e.3.max(y);
        }
        b
    }

    /// Tight boxes of instances at least [`MIN_BOX_SIDE`] pixels on both
    /// sides, with the instance id each box came from.
    pub fn boxes(&self) -> (Vec<BBox>, Vec<u16>) {
        let mut boxes = Vec::new();
        let mut ids = Vec::new();
        for (i, (x0, y0, x1, y1)) in self.instance_bounds().into_iter().enumerate() {
            let (w, h) = (x1 + 1 - x0, y1 + 1 - y0);
            if w < MIN_BOX_SIDE || h < MIN_BOX_SIDE {
                continue;
            }
            boxes.push(BBox {
                cx: (x0 + x1 + 1) as f64 / 2.0,
                cy: (y0 + y1 + 1) as f64 / 2.0,
                w: w as f64,
                h: h as f64,
            });
            ids.push(i as u16 + 1);
        }
        (boxes, ids)
    }

    /// Foreground (any instance) as 0/1.
    pub fn foreground<T: Scalar>(&self) -> Vec<T> {
        self.labels
            .iter()
            .map(|&l| if l > 0 { T::one() } else { T::zero() })
            .collect()
    }

    /// Sub-window with ids compacted to the instances still visible.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<InstanceLabelMap> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(Error::input(format!(
                "crop {w}x{h}+{x0}+{y0} exceeds {}x{}",
                self.width, self.height
            )));
        }
        let mut labels = Vec::with_capacity(w * h);
        for y in y0..y0 + h {
            labels.extend_from_slice(&self.labels[y * self.width + x0..][..w]);
        }
        Ok(Self::relabeled(w, h, labels)?.0)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Eval,
}

/// Where a record's pixels came from.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Origin {
    pub source: String,
    pub x: usize,
    pub y: usize,
}

/// An image with its instance labels and the boxes derived from them.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchRecord {
    pub image: Image,
    pub labels: InstanceLabelMap,
    pub origin: Origin,
    pub boxes: Vec<BBox>,
    /// Instance id in `labels` of each entry of `boxes`.
    pub box_ids: Vec<u16>,
    pub split: Split,
}

impl PatchRecord {
    pub fn new(image: Image, labels: InstanceLabelMap, origin: Origin, split: Split) -> Result<Self> {
        if (image.width, image.height) != (labels.width, labels.height) {
            return Err(Error::ShapeMismatch {
                expected: vec![image.height, image.width],
                actual: vec![labels.height, labels.width],
            });
        }
        let (boxes, box_ids) = labels.boxes();
        Ok(PatchRecord {
            image,
            labels,
            origin,
            boxes,
            box_ids,
            split,
        })
    }

    pub fn width(&self) -> usize {
        self.image.width
    }

    pub fn height(&self) -> usize {
        self.image.height
    }

    /// Record-relative window; the origin accumulates the offset.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<PatchRecord> {
        let origin = Origin {
            source: self.origin.source.clone(),
            x: self.origin.x + x0,
            y: self.origin.y + y0,
        };
        PatchRecord::new(
            self.image.crop(x0, y0, w, h)?,
            self.labels.crop(x0, y0, w, h)?,
            origin,
            self.split,
        )
    }
}

/// Grid offsets `0, step, ..` while `offset + tile <= side`.
pub fn tile_offsets(side: usize, tile: usize, step: usize) -> Vec<usize> {
    if tile > side || step == 0 {
        return Vec::new();
    }
    (0..=(side - tile) / step).map(|i| i * step).collect()
}

/// Cuts a record into `tile x tile` patches on a regular grid.
pub fn tile_image(record: &PatchRecord, tile: usize, step: usize) -> Result<Vec<PatchRecord>> {
    if tile == 0 || step == 0 {
        return Err(Error::config("tile and step must be positive"));
    }
    if tile > record.width() || tile > record.height() {
        return Err(Error::input(format!(
            "tile {tile} larger than image {}x{}",
            record.width(),
            record.height()
        )));
    }
    let mut out = Vec::new();
    for y in tile_offsets(record.height(), tile, step) {
        for x in tile_offsets(record.width(), tile, step) {
            out.push(record.crop(x, y, tile, tile)?);
        }
    }
    Ok(out)
}

/// Square crop at a uniformly random offset.
pub fn sample_training_crop<R: Rng + ?Sized>(record: &PatchRecord, size: usize, rng: &mut R) -> Result<PatchRecord> {
    if size > record.width() || size > record.height() {
        return Err(Error::input(format!(
            "crop {size} larger than tile {}x{}",
            record.width(),
            record.height()
        )));
    }
    let x = rng.random_range(0..=record.width() - size);
    let y = rng.random_range(0..=record.height() - size);
    record.crop(x, y, size, size)
}

/// Square crop centered in the record.
pub fn center_crop(record: &PatchRecord, size: usize) -> Result<PatchRecord> {
    if size > record.width() || size > record.height() {
        return Err(Error::input(format!(
            "crop {size} larger than tile {}x{}",
            record.width(),
            record.height()
        )));
    }
    record.crop((record.width() - size) / 2, (record.height() - size) / 2, size, size)
}
