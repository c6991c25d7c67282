//! Finite-difference verification of the loss gradients at random points.

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::OffsetVector;
use crate::losses::{conf_loss, finite_diff_check, loc_loss, seg_loss, Class, LossConfig};
use crate::network::{LayerGraph, NetworkConfig, OutputGrads, Tensor, UsNet};

/// Worst relative gradient error per loss term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientReport {
    pub seg: f64,
    pub conf: f64,
    pub loc: f64,
}

impl GradientReport {
    pub fn max(&self) -> f64 {
        self.seg.max(self.conf).max(self.loc)
    }
}

pub const DEFAULT_EPSILON: f64 = 1e-5;

/// Samples a residual away from the smooth-L1 kink at `|r| = 1`.
fn residual_off_kink(rng: &mut impl Rng) -> f64 {
    let mag = if rng.random_bool(0.5) {
        rng.random_range(0.0..0.9)
    } else {
        rng.random_range(1.1..3.0)
    };
    if rng.random_bool(0.5) {
        mag
    } else {
        -mag
    }
}

pub fn seg_error(rng: &mut impl Rng, pixels: usize, epsilon: f64) -> Result<f64> {
    let gt: Array1<f64> = (0..pixels).map(|_| f64::from(rng.random_bool(0.3) as u8)).collect();
    // keep every prediction at least 10 * epsilon from its target
    let point: Vec<f64> = gt
        .iter()
        .map(|&t| {
            let d = rng.random_range(0.01..0.99);
            if t > 0.5 {
                1.0 - d
            } else {
                d
            }
        })
        .collect();
    finite_diff_check(
        |x| {
            let pred = Array1::from(x.to_vec());
            let (v, g) = seg_loss(pred.view(), gt.view())?;
            Ok((v, g.to_vec()))
        },
        &point,
        epsilon,
    )
}

pub fn conf_error(rng: &mut impl Rng, anchors: usize, epsilon: f64) -> Result<f64> {
    let cfg = LossConfig::default();
    let targets: Vec<Class> = (0..anchors)
        .map(|_| {
            if rng.random_bool(0.2) {
                Class::Nucleus
            } else {
                Class::Background
            }
        })
        .collect();
    let eta = rng.random_range(1.0..10.0);
    let point: Vec<f64> = (0..anchors).map(|_| rng.random_range(0.1..0.9)).collect();
    finite_diff_check(|x| conf_loss(x, &targets, eta, &cfg), &point, epsilon)
}

pub fn loc_error(rng: &mut impl Rng, anchors: usize, epsilon: f64) -> Result<f64> {
    let targets: Vec<OffsetVector> = (0..anchors)
        .map(|_| {
            OffsetVector::from_array([
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ])
        })
        .collect();
    let positives: Vec<usize> = (0..anchors).filter(|_| rng.random_bool(0.5)).collect();
    let point: Vec<f64> = targets
        .iter()
        .flat_map(|t| t.to_array().map(|v| v - residual_off_kink(rng)))
        .collect();
    finite_diff_check(
        |x| {
            let pred: Vec<OffsetVector> = x
                .chunks_exact(4)
                .map(|c| OffsetVector::from_array([c[0], c[1], c[2], c[3]]))
                .collect();
            let (v, g) = loc_loss(&pred, &targets, &positives)?;
            Ok((v, g.into_iter().flat_map(OffsetVector::to_array).collect()))
        },
        &point,
        epsilon,
    )
}

/// Runs all three loss checks over `trials` random points each and keeps
/// the worst error per term.
pub fn gradient_report(seed: u64, trials: usize, epsilon: f64) -> Result<GradientReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradientReport {
        seg: 0.0,
        conf: 0.0,
        loc: 0.0,
    };
    for _ in 0..trials {
        report.seg = report.seg.max(seg_error(&mut rng, 64, epsilon)?);
        report.conf = report.conf.max(conf_error(&mut rng, 64, epsilon)?);
        report.loc = report.loc.max(loc_error(&mut rng, 16, epsilon)?);
    }
    Ok(report)
}

/// A network small enough to differentiate numerically.
pub fn tiny_network_config() -> NetworkConfig {
    NetworkConfig {
        input_size: 16,
        depth: 2,
        block_repeat: 1,
        base_channels: 2,
        max_channels: 4,
        head_tap_stages: vec![1, 2],
        anchors_per_location: 2,
        refine_size: 8,
        refine_depth: 3,
        refine_channels: 4,
    }
}

/// Worst relative error per graph of the tiny network.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkReport {
    pub main: f64,
    pub refiner: f64,
}

fn random_tensor(rng: &mut impl Rng, shape: [usize; 4]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape matches")
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Relative error between an analytic and a central-difference derivative,
/// or `None` when two step sizes disagree (a ReLU kink lies in reach).
fn compare<F: FnMut(f64) -> Result<f64>>(mut f: F, x0: f64, analytic: f64, epsilon: f64) -> Result<Option<f64>> {
    let central = |f: &mut F, h: f64| -> Result<f64> { Ok((f(x0 + h)? - f(x0 - h)?) / (2.0 * h)) };
    let fine = central(&mut f, epsilon)?;
    let coarse = central(&mut f, 4.0 * epsilon)?;
    let scale = analytic.abs().max(fine.abs()).max(1e-6);
    if (fine - coarse).abs() > 1e-3 * scale {
        return Ok(None);
    }
    // below this both values are rounding noise of the forward pass
    let noise = 1e-14 / epsilon;
    if analytic.abs() < noise && fine.abs() < noise {
        return Ok(Some(0.0));
    }
    Ok(Some((analytic - fine).abs() / scale))
}

/// Checks `points` randomly chosen parameters of a graph, skipping any that
/// sit next to a kink.
fn graph_error<O>(
    graph: &LayerGraph<f64>,
    grads: &[Vec<f64>],
    points: usize,
    epsilon: f64,
    rng: &mut impl Rng,
    mut objective: O,
) -> Result<f64>
where
    O: FnMut(&LayerGraph<f64>) -> Result<f64>,
{
    let mut probe = graph.clone();
    let (mut worst, mut checked, mut tries) = (0.0f64, 0, 0);
    while checked < points {
        tries += 1;
        if tries > 50 * points {
            return Err(Error::NonFinite("no kink-free parameters found".into()));
        }
        let k = rng.random_range(0..probe.params().len());
        let i = rng.random_range(0..probe.params()[k].data.len());
        let x0 = probe.params()[k].data[i];
        let got = compare(
            |x| {
                probe.params_mut()[k].data[i] = x;
                objective(&probe)
            },
            x0,
            grads[k][i],
            epsilon,
        )?;
        probe.params_mut()[k].data[i] = x0;
        if let Some(e) = got {
            worst = worst.max(e);
            checked += 1;
        }
    }
    Ok(worst)
}

/// Compares backpropagated parameter gradients of the tiny network against
/// central differences at `points` parameters of each graph. The scalar
/// objective is a fixed random projection of every output.
pub fn network_report(seed: u64, points: usize, epsilon: f64) -> Result<NetworkReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = tiny_network_config();
    let model = UsNet::<f64>::build(&cfg, seed)?;
    let s = cfg.input_size;
    let x = random_tensor(&mut rng, [2, 3, s, s]);

    let (out, tape) = model.forward(&x)?;
    let r_seg = random_tensor(&mut rng, out.seg.shape());
    let r_cls: Vec<Tensor<f64>> = out
        .class_probs
        .iter()
        .map(|t| random_tensor(&mut rng, t.shape()))
        .collect();
    let r_off: Vec<Tensor<f64>> = out.offsets.iter().map(|t| random_tensor(&mut rng, t.shape())).collect();
    let grads = model.backward(
        &tape,
        OutputGrads {
            seg: Some(r_seg.clone()),
            class_probs: Some(r_cls.clone()),
            offsets: Some(r_off.clone()),
        },
    )?;
    let main = graph_error(model.main(), &grads.params, points, epsilon, &mut rng, |g| {
        let mut m = model.clone();
        *m.main_mut() = g.clone();
        let o = m.predict(&x)?;
        let cls: f64 = o.class_probs.iter().zip(&r_cls).map(|(a, b)| dot(a, b)).sum();
        let off: f64 = o.offsets.iter().zip(&r_off).map(|(a, b)| dot(a, b)).sum();
        Ok(dot(&o.seg, &r_seg) + cls + off)
    })?;

    let rs = cfg.refine_size;
    let patches = random_tensor(&mut rng, [2, 4, rs, rs]);
    let (prob, tape) = model.refine_forward(&patches)?;
    let r = random_tensor(&mut rng, prob.shape());
    let grads = model.refine_backward(&tape, r.clone())?;
    let refiner = graph_error(model.refiner(), &grads.params, points, epsilon, &mut rng, |g| {
        let mut m = model.clone();
        *m.refiner_mut() = g.clone();
        Ok(dot(&m.refine_forward(&patches)?.0, &r))
    })?;
    Ok(NetworkReport { main, refiner })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_within_tolerance() {
        let r = gradient_report(7, 3, DEFAULT_EPSILON).unwrap();
        assert!(r.max() < 1e-5, "{r:?}");
    }

    #[test]
    fn tiny_network_gradients() {
        let r = network_report(3, 5, 1e-6).unwrap();
        assert!(r.main < 1e-4 && r.refiner < 1e-4, "{r:?}");
    }
}
