//! The dual-branch network: a shared encoder, a U-shaped segmentation
//! decoder, detection heads on selected encoder stages, and a small
//! U-shaped refinement network for per-instance masks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{AnchorConfig, OffsetVector};

use super::graph::{Gradients, Init, LayerGraph, NodeId, ParamGroup, Tape};
use super::scalar::Scalar;
use super::tensor::Tensor;

/// Initial nucleus probability of every anchor.
pub const CLASS_PRIOR: f64 = 0.01;
/// Initial foreground probability of the segmentation output.
pub const SEG_PRIOR: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub input_size: usize,
    /// Number of stride-2 stages; the deepest stage is the bottleneck.
    pub depth: usize,
    /// Convolution + normalization + activation repeats per stage.
    pub block_repeat: usize,
    pub base_channels: usize,
    /// Channel count doubles per stage up to this cap.
    pub max_channels: usize,
    pub head_tap_stages: Vec<usize>,
    pub anchors_per_location: usize,
    pub refine_size: usize,
    pub refine_depth: usize,
    pub refine_channels: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            input_size: 300,
            depth: 6,
            block_repeat: 4,
            base_channels: 8,
            max_channels: 32,
            head_tap_stages: vec![3, 4, 5],
            anchors_per_location: 4,
            refine_size: 48,
            refine_depth: 4,
            refine_channels: 16,
        }
    }
}

/// Spatial size after `stages` ceil-mode halvings.
pub fn stage_size(input: usize, stages: usize) -> usize {
    (0..stages).fold(input, |s, _| s.div_ceil(2))
}

pub const IMAGE_CHANNELS: usize = 3;
/// RGB plus the coarse segmentation crop.
pub const REFINE_CHANNELS_IN: usize = 4;

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::config(format!("network: {m}")));
        if self.input_size == 0 || self.depth == 0 || self.block_repeat == 0 {
            return fail("input_size, depth and block_repeat must be positive");
        }
        if self.base_channels == 0 || self.max_channels < self.base_channels {
            return fail("channel counts must be positive with max_channels >= base_channels");
        }
        if self.head_tap_stages.is_empty() {
            return fail("at least one detection tap stage is required");
        }
        if self.head_tap_stages.windows(2).any(|w| w[0] >= w[1]) {
            return fail("tap stages must be strictly increasing");
        }
        if self.head_tap_stages.iter().any(|&s| s > self.depth) {
            return fail("tap stage deeper than the network");
        }
        if self.anchors_per_location == 0 {
            return fail("anchors_per_location must be positive");
        }
        if self.refine_size < 2 || self.refine_depth < 2 || self.refine_channels == 0 {
            return fail("refine_size and refine_depth must be >= 2");
        }
        Ok(())
    }

    pub fn channels(&self, stage: usize) -> usize {
        let c = self.base_channels.checked_shl(stage as u32).unwrap_or(usize::MAX);
        c.min(self.max_channels)
    }

    /// Feature-map side length at each detection tap.
    pub fn head_map_sizes(&self) -> Vec<usize> {
        self.head_tap_stages
            .iter()
            .map(|&s| stage_size(self.input_size, s))
            .collect()
    }

    pub fn anchor_slots(&self) -> usize {
        self.head_map_sizes().iter().map(|m| m * m).sum::<usize>() * self.anchors_per_location
    }

    /// Checks that an anchor layout lines up with the detection heads.
    pub fn check_anchors(&self, anchors: &AnchorConfig) -> Result<()> {
        if anchors.input_size != self.input_size
            || anchors.map_sizes != self.head_map_sizes()
            || anchors.anchors_per_location() != self.anchors_per_location
        {
            return Err(Error::config(format!(
                "anchor layout {:?}x{} does not match network heads {:?}x{}",
                anchors.map_sizes,
                anchors.anchors_per_location(),
                self.head_map_sizes(),
                self.anchors_per_location
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetOutputs<T> {
    /// `B x 1 x H x W` foreground probability.
    pub seg: Tensor<T>,
    /// Per level `B x 2A x h x w`; channel `2a + 1` is the nucleus
    /// probability of variant `a`.
    pub class_probs: Vec<Tensor<T>>,
    /// Per level `B x 4A x h x w`, channels `4a..4a + 4` = `dx, dy, dw, dh`.
    pub offsets: Vec<Tensor<T>>,
}

impl<T: Scalar> NetOutputs<T> {
    pub fn batch(&self) -> usize {
        self.seg.batch()
    }

    pub fn anchor_count(&self) -> usize {
        self.class_probs.iter().map(|t| t.channels() / 2 * t.plane_len()).sum()
    }

    /// `[background, nucleus]` per anchor in anchor-generation order.
    pub fn anchor_probs(&self, item: usize) -> Vec<[f64; 2]> {
        let mut out = Vec::with_capacity(self.anchor_count());
        for t in &self.class_probs {
            let a_n = t.channels() / 2;
            for y in 0..t.height() {
                for x in 0..t.width() {
                    for a in 0..a_n {
                        out.push([t.at(item, 2 * a, y, x).f64(), t.at(item, 2 * a + 1, y, x).f64()]);
                    }
                }
            }
        }
        out
    }

    pub fn anchor_offsets(&self, item: usize) -> Vec<OffsetVector> {
        let mut out = Vec::with_capacity(self.anchor_count());
        for t in &self.offsets {
            let a_n = t.channels() / 4;
            for y in 0..t.height() {
                for x in 0..t.width() {
                    for a in 0..a_n {
                        out.push(OffsetVector::from_array(std::array::from_fn(|k| {
                            t.at(item, 4 * a + k, y, x).f64()
                        })));
                    }
                }
            }
        }
        out
    }

    pub fn seg_plane(&self, item: usize) -> &[T] {
        self.seg.plane(item, 0)
    }
}

/// Gradients of a scalar loss with respect to [`NetOutputs`].
#[derive(Clone, Debug, PartialEq)]
pub struct OutputGrads<T> {
    pub seg: Option<Tensor<T>>,
    pub class_probs: Option<Vec<Tensor<T>>>,
    pub offsets: Option<Vec<Tensor<T>>>,
}

impl<T: Scalar> OutputGrads<T> {
    pub fn none() -> Self {
        OutputGrads {
            seg: None,
            class_probs: None,
            offsets: None,
        }
    }

    /// Writes per-anchor gradients of one batch item into level tensors
    /// shaped like `outputs`, allocating them on first use.
    pub fn scatter_anchor_grads(
        &mut self,
        outputs: &NetOutputs<T>,
        item: usize,
        class: &[[f64; 2]],
        offsets: &[OffsetVector],
    ) {
        let cls = self
            .class_probs
            .get_or_insert_with(|| outputs.class_probs.iter().map(|t| Tensor::zeros(t.shape())).collect());
        let mut i = 0;
        for t in cls.iter_mut() {
            let [_, c, h, w] = t.shape();
            let a_n = c / 2;
            let plane = h * w;
            let base = item * c * plane;
            for p in 0..plane {
                for a in 0..a_n {
                    let g = class[i];
                    t.data_mut()[base + 2 * a * plane + p] = T::of(g[0]);
                    t.data_mut()[base + (2 * a + 1) * plane + p] = T::of(g[1]);
                    i += 1;
                }
            }
        }
        let offs = self
            .offsets
            .get_or_insert_with(|| outputs.offsets.iter().map(|t| Tensor::zeros(t.shape())).collect());
        let mut i = 0;
        for t in offs.iter_mut() {
            let [_, c, h, w] = t.shape();
            let a_n = c / 4;
            let plane = h * w;
            let base = item * c * plane;
            for p in 0..plane {
                for a in 0..a_n {
                    let g = offsets[i].to_array();
                    for (k, v) in g.iter().enumerate() {
                        t.data_mut()[base + (4 * a + k) * plane + p] = T::of(*v);
                    }
                    i += 1;
                }
            }
        }
    }
}

/// Shared-backbone detection + segmentation network with its refinement
/// sub-network.
#[derive(Clone, Debug, PartialEq)]
pub struct UsNet<T> {
    config: NetworkConfig,
    main: LayerGraph<T>,
    refiner: LayerGraph<T>,
    seg_out: NodeId,
    cls_out: Vec<NodeId>,
    box_out: Vec<NodeId>,
    refine_out: NodeId,
}

impl<T: Scalar> UsNet<T> {
    /// Builds the network with parameters drawn deterministically from `seed`.
    pub fn build(config: &NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = config.block_repeat;
        let a_n = config.anchors_per_location;

        let mut g = LayerGraph::new();
        let x = g.input([IMAGE_CHANNELS, config.input_size, config.input_size]);
        let mut stages = Vec::with_capacity(config.depth + 1);
        let mut h = x;
        for s in 0..=config.depth {
            for j in 0..r {
                let stride = if s > 0 && j == 0 { 2 } else { 1 };
                h = g.conv_norm_relu(
                    &format!("enc{s}.b{j}"),
                    h,
                    config.channels(s),
                    stride,
                    ParamGroup::Encoder,
                    &mut rng,
                );
            }
            stages.push(h);
        }

        let mut d = stages[config.depth];
        for s in (0..config.depth).rev() {
            let up = g.upsample(&format!("dec{s}.up"), d, stages[s]);
            d = g.concat(&format!("dec{s}.cat"), &[up, stages[s]]);
            for j in 0..r {
                d = g.conv_norm_relu(
                    &format!("dec{s}.b{j}"),
                    d,
                    config.channels(s),
                    1,
                    ParamGroup::SegDecoder,
                    &mut rng,
                );
            }
        }
        let seg_bias = (SEG_PRIOR / (1.0 - SEG_PRIOR)).ln();
        let logit = g.conv(
            "seg_out",
            d,
            1,
            1,
            1,
            ParamGroup::SegDecoder,
            Init::FanIn(1.0),
            &[seg_bias],
            &mut rng,
        );
        let seg_out = g.sigmoid("seg", logit);
        g.mark_output(seg_out);

        let prior = (CLASS_PRIOR / (1.0 - CLASS_PRIOR)).ln();
        let mut cls_out = Vec::new();
        let mut box_out = Vec::new();
        for (l, &s) in config.head_tap_stages.iter().enumerate() {
            let z = g.conv(
                &format!("head{l}.cls"),
                stages[s],
                2 * a_n,
                3,
                1,
                ParamGroup::DetHead,
                Init::Normal(0.01),
                &[0.0, prior],
                &mut rng,
            );
            let p = g.pair_softmax(&format!("head{l}.prob"), z);
            g.mark_output(p);
            cls_out.push(p);
            let b = g.conv(
                &format!("head{l}.box"),
                stages[s],
                4 * a_n,
                3,
                1,
                ParamGroup::DetHead,
                Init::Normal(0.01),
                &[],
                &mut rng,
            );
            g.mark_output(b);
            box_out.push(b);
        }
        g.validate()?;

        let (refiner, refine_out) = build_refiner(config, &mut rng);
        Ok(UsNet {
            config: config.clone(),
            main: g,
            refiner,
            seg_out,
            cls_out,
            box_out,
            refine_out,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn main(&self) -> &LayerGraph<T> {
        &self.main
    }

    pub fn main_mut(&mut self) -> &mut LayerGraph<T> {
        &mut self.main
    }

    pub fn refiner(&self) -> &LayerGraph<T> {
        &self.refiner
    }

    pub fn refiner_mut(&mut self) -> &mut LayerGraph<T> {
        &mut self.refiner
    }

    pub fn forward(&self, batch: &Tensor<T>) -> Result<(NetOutputs<T>, Tape<T>)> {
        let tape = self.main.forward(batch)?;
        let outputs = NetOutputs {
            seg: tape.value(self.seg_out).clone(),
            class_probs: self.cls_out.iter().map(|&i| tape.value(i).clone()).collect(),
            offsets: self.box_out.iter().map(|&i| tape.value(i).clone()).collect(),
        };
        let finite = outputs.seg.all_finite()
            && outputs
                .class_probs
                .iter()
                .chain(&outputs.offsets)
                .all(Tensor::all_finite);
        if !finite {
            return Err(Error::NonFinite("network outputs".into()));
        }
        Ok((outputs, tape))
    }

    pub fn predict(&self, batch: &Tensor<T>) -> Result<NetOutputs<T>> {
        Ok(self.forward(batch)?.0)
    }

    pub fn backward(&self, tape: &Tape<T>, grads: OutputGrads<T>) -> Result<Gradients<T>> {
        let mut seeds = Vec::new();
        if let Some(g) = grads.seg {
            seeds.push((self.seg_out, g));
        }
        if let Some(gs) = grads.class_probs {
            seeds.extend(self.cls_out.iter().copied().zip(gs));
        }
        if let Some(gs) = grads.offsets {
            seeds.extend(self.box_out.iter().copied().zip(gs));
        }
        self.main.backward(tape, seeds)
    }

    /// `patches` is `B x 4 x S x S`; returns `B x 1 x S x S` probabilities.
    pub fn refine_forward(&self, patches: &Tensor<T>) -> Result<(Tensor<T>, Tape<T>)> {
        let tape = self.refiner.forward(patches)?;
        let out = tape.value(self.refine_out).clone();
        if !out.all_finite() {
            return Err(Error::NonFinite("refiner output".into()));
        }
        Ok((out, tape))
    }

    pub fn refine_backward(&self, tape: &Tape<T>, grad: Tensor<T>) -> Result<Gradients<T>> {
        self.refiner.backward(tape, vec![(self.refine_out, grad)])
    }

    /// Every parameter of both graphs, main network first.
    pub fn named_params(&self) -> impl Iterator<Item = &super::graph::Param<T>> {
        self.main.params().iter().chain(self.refiner.params())
    }

    pub(crate) fn named_params_mut(&mut self) -> impl Iterator<Item = &mut super::graph::Param<T>> {
        self.main
            .params_mut()
            .iter_mut()
            .chain(self.refiner.params_mut().iter_mut())
    }
}

/// Half of the layers encode (the first at full resolution, the rest
/// stride 2), the rest decode with skip connections; the last layer is a
/// 1x1 projection to one channel.
fn build_refiner<T: Scalar>(config: &NetworkConfig, rng: &mut ChaCha8Rng) -> (LayerGraph<T>, NodeId) {
    let s = config.refine_size;
    let c = config.refine_channels;
    let depth = config.refine_depth;
    let enc = depth / 2;
    let group = ParamGroup::Refiner;

    let mut g = LayerGraph::new();
    let mut h = g.input([REFINE_CHANNELS_IN, s, s]);
    let mut skips = Vec::new();
    for j in 0..enc {
        let stride = if j == 0 { 1 } else { 2 };
        h = g.conv_norm_relu(&format!("refine.l{j}"), h, c << j.min(3), stride, group, rng);
        skips.push(h);
    }
    skips.pop();
    for j in enc..depth - 1 {
        if let Some(skip) = skips.pop() {
            let up = g.upsample(&format!("refine.l{j}.up"), h, skip);
            h = g.concat(&format!("refine.l{j}.cat"), &[up, skip]);
        }
        h = g.conv_norm_relu(&format!("refine.l{j}"), h, c, 1, group, rng);
    }
    let logit = g.conv(
        &format!("refine.l{}", depth - 1),
        h,
        1,
        1,
        1,
        group,
        Init::FanIn(1.0),
        &[],
        rng,
    );
    let out = g.sigmoid("refine.prob", logit);
    g.mark_output(out);
    (g, out)
}
