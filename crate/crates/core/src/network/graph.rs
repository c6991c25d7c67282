//! Explicit layer graph with a recorded forward pass and reverse-mode
//! backward pass.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::ops::{self, ConvGeom, NormStats};
use super::scalar::Scalar;
use super::tensor::Tensor;

pub type NodeId = usize;
pub type ParamId = usize;

/// Which optimizer group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    /// Shared backbone feeding both branches.
    Encoder,
    SegDecoder,
    DetHead,
    Refiner,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: ParamGroup,
    pub data: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Input,
    Conv {
        weight: ParamId,
        bias: ParamId,
        geom: ConvGeom,
    },
    Norm {
        gamma: ParamId,
        beta: ParamId,
    },
    Relu,
    Sigmoid,
    /// Two-way softmax over consecutive channel pairs.
    PairSoftmax,
    /// Nearest 2x upsampling, cropped to the node's declared size.
    Upsample,
    /// Channel concatenation of all inputs.
    Concat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub name: String,
    pub op: Op,
    pub inputs: Vec<NodeId>,
    /// Declared `channels x height x width`.
    pub shape: [usize; 3],
}

/// How a parameter is drawn at initialization.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Const(f64),
    Normal(f64),
    /// Normal with standard deviation `sqrt(gain / fan_in)`.
    FanIn(f64),
}

/// Nodes are topologically ordered by construction: a node only refers to
/// earlier nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGraph<T> {
    nodes: Vec<Node>,
    params: Vec<Param<T>>,
    outputs: Vec<NodeId>,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Clone, Debug)]
pub struct Tape<T> {
    values: Vec<Tensor<T>>,
    stats: Vec<Option<NormStats<T>>>,
    fingerprint: (usize, usize),
}

impl<T: Scalar> Tape<T> {
    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.values[id]
    }

    pub fn batch(&self) -> usize {
        self.values[0].batch()
    }
}

/// Parameter gradients, indexed like [`LayerGraph::params`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub params: Vec<Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(graph: &LayerGraph<T>) -> Self {
        Gradients {
            params: graph.params.iter().map(|p| vec![T::zero(); p.data.len()]).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().flatten().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.params.iter().flatten().fold(0.0f64, |m, v| m.max(v.f64().abs()))
    }
}

impl<T: Scalar> Default for LayerGraph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> LayerGraph<T> {
    pub fn new() -> Self {
        LayerGraph {
            nodes: Vec::new(),
            params: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn outputs(&self) -> &[NodeId] {
        &self.outputs
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn node_shape(&self, id: NodeId) -> [usize; 3] {
        self.nodes[id].shape
    }

    pub fn find_param(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name)
    }

    fn push(&mut self, name: String, op: Op, inputs: Vec<NodeId>, shape: [usize; 3]) -> NodeId {
        self.nodes.push(Node {
            name,
            op,
            inputs,
            shape,
        });
        self.nodes.len() - 1
    }

    fn add_param<R: Rng>(
        &mut self,
        name: String,
        shape: Vec<usize>,
        group: ParamGroup,
        init: Init,
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let len = shape.iter().product();
        let data = match init {
            Init::Const(v) => vec![T::of(v); len],
            Init::Normal(std) | Init::FanIn(std) => {
                let std = match init {
                    Init::FanIn(gain) => (gain / fan_in as f64).sqrt(),
                    _ => std,
                };
                let dist = Normal::new(0.0, std).expect("positive std");
                (0..len).map(|_| T::of(dist.sample(rng))).collect()
            }
        };
        self.params.push(Param {
            name,
            shape,
            group,
            data,
        });
        self.params.len() - 1
    }

    pub fn input(&mut self, shape: [usize; 3]) -> NodeId {
        assert!(self.nodes.is_empty(), "input must be the first node");
        self.push("input".into(), Op::Input, vec![], shape)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv<R: Rng>(
        &mut self,
        name: &str,
        x: NodeId,
        c_out: usize,
        kernel: usize,
        stride: usize,
        group: ParamGroup,
        weight_init: Init,
        bias_init: &[f64],
        rng: &mut R,
    ) -> NodeId {
        let [c_in, h, w] = self.nodes[x].shape;
        let geom = ConvGeom {
            c_in,
            c_out,
            kernel,
            stride,
            pad: kernel / 2,
        };
        let fan_in = c_in * kernel * kernel;
        let weight = self.add_param(
            format!("{name}.weight"),
            vec![c_out, c_in, kernel, kernel],
            group,
            weight_init,
            fan_in,
            rng,
        );
        let bias = self.add_param(format!("{name}.bias"), vec![c_out], group, Init::Const(0.0), 1, rng);
        if !bias_init.is_empty() {
            for (b, &v) in self.params[bias].data.iter_mut().zip(bias_init.iter().cycle()) {
                *b = T::of(v);
            }
        }
        let (ho, wo) = geom.out_size(h, w);
        self.push(name.into(), Op::Conv { weight, bias, geom }, vec![x], [c_out, ho, wo])
    }

    pub fn norm<R: Rng>(&mut self, name: &str, x: NodeId, group: ParamGroup, rng: &mut R) -> NodeId {
        let shape = self.nodes[x].shape;
        let gamma = self.add_param(format!("{name}.gamma"), vec![shape[0]], group, Init::Const(1.0), 1, rng);
        let beta = self.add_param(format!("{name}.beta"), vec![shape[0]], group, Init::Const(0.0), 1, rng);
        self.push(name.into(), Op::Norm { gamma, beta }, vec![x], shape)
    }

    pub fn relu(&mut self, name: &str, x: NodeId) -> NodeId {
        let shape = self.nodes[x].shape;
        self.push(name.into(), Op::Relu, vec![x], shape)
    }

    pub fn sigmoid(&mut self, name: &str, x: NodeId) -> NodeId {
        let shape = self.nodes[x].shape;
        self.push(name.into(), Op::Sigmoid, vec![x], shape)
    }

    pub fn pair_softmax(&mut self, name: &str, x: NodeId) -> NodeId {
        let shape = self.nodes[x].shape;
        assert!(shape[0].is_multiple_of(2), "pair softmax needs an even channel count");
        self.push(name.into(), Op::PairSoftmax, vec![x], shape)
    }

    /// Upsamples `x` to the spatial size of `like`.
    pub fn upsample(&mut self, name: &str, x: NodeId, like: NodeId) -> NodeId {
        let [c, h, w] = self.nodes[x].shape;
        let [_, th, tw] = self.nodes[like].shape;
        assert!(th <= 2 * h && tw <= 2 * w && th >= 2 * h - 1 && tw >= 2 * w - 1);
        self.push(name.into(), Op::Upsample, vec![x], [c, th, tw])
    }

    pub fn concat(&mut self, name: &str, parts: &[NodeId]) -> NodeId {
        let [_, h, w] = self.nodes[parts[0]].shape;
        let mut c = 0;
        for &p in parts {
            let s = self.nodes[p].shape;
            assert_eq!((s[1], s[2]), (h, w), "concat inputs must share spatial size");
            c += s[0];
        }
        self.push(name.into(), Op::Concat, parts.to_vec(), [c, h, w])
    }

    pub fn conv_norm_relu<R: Rng>(
        &mut self,
        name: &str,
        x: NodeId,
        c_out: usize,
        stride: usize,
        group: ParamGroup,
        rng: &mut R,
    ) -> NodeId {
        let c = self.conv(
            &format!("{name}.conv"),
            x,
            c_out,
            3,
            stride,
            group,
            Init::FanIn(2.0),
            &[],
            rng,
        );
        let n = self.norm(&format!("{name}.norm"), c, group, rng);
        self.relu(&format!("{name}.relu"), n)
    }

    pub fn mark_output(&mut self, id: NodeId) {
        self.outputs.push(id);
    }

    /// Checks that every parameter feeds at least one output.
    pub fn validate(&self) -> Result<()> {
        let mut live = vec![false; self.nodes.len()];
        for &o in &self.outputs {
            live[o] = true;
        }
        for id in (0..self.nodes.len()).rev() {
            if live[id] {
                for &i in &self.nodes[id].inputs {
                    if i >= id {
                        return Err(Error::config(format!("node {id} refers forward to {i}")));
                    }
                    live[i] = true;
                }
            }
        }
        let mut used = vec![false; self.params.len()];
        for (node, _) in self.nodes.iter().zip(&live).filter(|(_, &l)| l) {
            match node.op {
                Op::Conv { weight, bias, .. } => {
                    used[weight] = true;
                    used[bias] = true;
                }
                Op::Norm { gamma, beta } => {
                    used[gamma] = true;
                    used[beta] = true;
                }
                _ => {}
            }
        }
        if let Some(p) = used.iter().position(|u| !u) {
            return Err(Error::config(format!(
                "parameter {} does not reach any output",
                self.params[p].name
            )));
        }
        Ok(())
    }

    /// Runs every node and keeps all intermediate values.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tape<T>> {
        let input_shape = self.nodes.first().map(|n| n.shape).unwrap_or_default();
        if x.item_shape() != input_shape {
            return Err(Error::ShapeMismatch {
                expected: input_shape.to_vec(),
                actual: x.item_shape().to_vec(),
            });
        }
        let mut values: Vec<Tensor<T>> = Vec::with_capacity(self.nodes.len());
        let mut stats = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let mut norm_stats = None;
            let arg = |i: usize| &values[node.inputs[i]];
            let out = match &node.op {
                Op::Input => x.clone(),
                Op::Conv { weight, bias, geom } => {
                    ops::conv_forward(geom, arg(0), &self.params[*weight].data, &self.params[*bias].data)
                }
                Op::Norm { gamma, beta } => {
                    let (y, s) = ops::norm_forward(arg(0), &self.params[*gamma].data, &self.params[*beta].data);
                    norm_stats = Some(s);
                    y
                }
                Op::Relu => ops::relu_forward(arg(0)),
                Op::Sigmoid => ops::sigmoid_forward(arg(0)),
                Op::PairSoftmax => ops::pair_softmax_forward(arg(0)),
                Op::Upsample => ops::upsample_forward(arg(0), node.shape[1], node.shape[2]),
                Op::Concat => {
                    let parts: Vec<&Tensor<T>> = node.inputs.iter().map(|&i| &values[i]).collect();
                    ops::concat_forward(&parts)
                }
            };
            if out.item_shape() != node.shape {
                return Err(Error::ShapeMismatch {
                    expected: node.shape.to_vec(),
                    actual: out.item_shape().to_vec(),
                });
            }
            values.push(out);
            stats.push(norm_stats);
        }
        Ok(Tape {
            values,
            stats,
            fingerprint: (self.nodes.len(), self.param_count()),
        })
    }

    /// Propagates output gradients back to every parameter.
    ///
    /// `seeds` holds the loss gradient with respect to the value of each
    /// listed node; nodes without a seed contribute nothing.
    pub fn backward(&self, tape: &Tape<T>, seeds: Vec<(NodeId, Tensor<T>)>) -> Result<Gradients<T>> {
        if tape.fingerprint != (self.nodes.len(), self.param_count()) {
            return Err(Error::input("tape was not recorded by this graph"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        for (id, g) in seeds {
            if id >= self.nodes.len() || g.shape() != tape.values[id].shape() {
                return Err(Error::ShapeMismatch {
                    expected: tape.values.get(id).map(|v| v.shape().to_vec()).unwrap_or_default(),
                    actual: g.shape().to_vec(),
                });
            }
            accumulate(&mut grads[id], g);
        }
        let mut out = Gradients::zeros_like(self);
        for id in (0..self.nodes.len()).rev() {
            let Some(dy) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            let input = |i: usize| &tape.values[node.inputs[i]];
            let needs_dx = |i: usize| !matches!(self.nodes[node.inputs[i]].op, Op::Input);
            match &node.op {
                Op::Input => {}
                Op::Conv { weight, bias, geom } => {
                    let (dw, db) = two_mut(&mut out.params, *weight, *bias);
                    let dx = ops::conv_backward(geom, input(0), &self.params[*weight].data, &dy, dw, db, needs_dx(0));
                    if let Some(dx) = dx {
                        accumulate(&mut grads[node.inputs[0]], dx);
                    }
                }
                Op::Norm { gamma, beta } => {
                    let stats = tape.stats[id].as_ref().expect("norm stats recorded");
                    let (dg, db) = two_mut(&mut out.params, *gamma, *beta);
                    let dx = ops::norm_backward(input(0), stats, &self.params[*gamma].data, &dy, dg, db);
                    accumulate(&mut grads[node.inputs[0]], dx);
                }
                Op::Relu => {
                    let dx = ops::relu_backward(&tape.values[id], &dy);
                    accumulate(&mut grads[node.inputs[0]], dx);
                }
                Op::Sigmoid => {
                    let dx = ops::sigmoid_backward(&tape.values[id], &dy);
                    accumulate(&mut grads[node.inputs[0]], dx);
                }
                Op::PairSoftmax => {
                    let dx = ops::pair_softmax_backward(&tape.values[id], &dy);
                    accumulate(&mut grads[node.inputs[0]], dx);
                }
                Op::Upsample => {
                    let dx = ops::upsample_backward(&dy, input(0).shape());
                    accumulate(&mut grads[node.inputs[0]], dx);
                }
                Op::Concat => {
                    let channels: Vec<usize> = node.inputs.iter().map(|&i| self.nodes[i].shape[0]).collect();
                    for (&i, dx) in node.inputs.iter().zip(ops::concat_backward(&dy, &channels)) {
                        accumulate(&mut grads[i], dx);
                    }
                }
            }
        }
        Ok(out)
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn two_mut<T>(v: &mut [Vec<T>], a: usize, b: usize) -> (&mut [T], &mut [T]) {
    assert!(a != b);
    if a < b {
        let (lo, hi) = v.split_at_mut(b);
        (&mut lo[a], &mut hi[0])
    } else {
        let (lo, hi) = v.split_at_mut(a);
        (&mut hi[0], &mut lo[b])
    }
}
