//! Training loops for the main network and the refinement network, and the
//! branch ablation harness.
//!
//! The shared encoder and the detection heads are stepped with Adam; the
//! segmentation decoder uses momentum SGD with weight decay. Each mode
//! decides which loss terms produce gradients and which groups move.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use ndarray::ArrayView1;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assignment::{build_targets, drop_degenerate, match_anchors, Targets, DEFAULT_POS_IOU};
use crate::data::{sample_training_crop, PatchRecord, RefineSample, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate, DEFAULT_AP_IOU, EVAL_CONF_THRESHOLD};
use crate::geometry::{Anchor, OffsetVector};
use crate::inference::DetectParams;
use crate::losses::{
    conf_loss_weighted, loc_loss, seg_loss, total_loss, Class, ClassWeights, LossBreakdown, LossConfig, PROB_CLAMP,
};
use crate::network::{
    Checkpoint, Gradients, NetOutputs, NetworkConfig, OutputGrads, ParamGroup, Scalar, Tensor, UsNet,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    #[default]
    Joint,
    DetectionOnly,
    SegmentationOnly,
}

impl TrainMode {
    pub const ALL: [TrainMode; 3] = [TrainMode::Joint, TrainMode::DetectionOnly, TrainMode::SegmentationOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Joint => "joint",
            TrainMode::DetectionOnly => "detection-only",
            TrainMode::SegmentationOnly => "segmentation-only",
        }
    }

    fn trains_detection(self) -> bool {
        self != TrainMode::SegmentationOnly
    }

    fn trains_segmentation(self) -> bool {
        self != TrainMode::DetectionOnly
    }

    /// Whether parameters of `group` are stepped in this mode.
    pub fn updates(self, group: ParamGroup) -> bool {
        match group {
            ParamGroup::Encoder => true,
            ParamGroup::DetHead => self.trains_detection(),
            ParamGroup::SegDecoder => self.trains_segmentation(),
            ParamGroup::Refiner => false,
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TrainMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown mode `{s}` (joint, detection-only, segmentation-only)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Carried by the run config's own `loss` section.
    #[serde(skip)]
    pub loss: LossConfig,
    pub det_lr: f64,
    pub seg_lr: f64,
    pub seg_momentum: f64,
    pub seg_weight_decay: f64,
    pub steps: u64,
    pub batch_size: usize,
    /// Evaluate every this many steps; 0 disables.
    pub eval_every: u64,
    #[serde(skip)]
    pub seed: u64,
    pub mode: TrainMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossConfig::default(),
            det_lr: 1e-3,
            seg_lr: 1e-4,
            seg_momentum: 0.9,
            seg_weight_decay: 1e-4,
            steps: 300,
            batch_size: 4,
            eval_every: 0,
            seed: 0,
            mode: TrainMode::Joint,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        let ok = self.det_lr > 0.0
            && self.seg_lr > 0.0
            && (0.0..1.0).contains(&self.seg_momentum)
            && self.seg_weight_decay >= 0.0
            && self.batch_size > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid training config {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    pub lr: f64,
    pub steps: u64,
    pub batch_size: usize,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            lr: 1e-3,
            steps: 500,
            batch_size: 8,
            seed: 0,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr > 0.0 && self.batch_size > 0 {
            Ok(())
        } else {
            Err(Error::config(format!("invalid refinement config {self:?}")))
        }
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Adam over a subset of a graph's parameters.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    lr: f64,
    t: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64, sizes: &[usize]) -> Self {
        Adam {
            lr,
            t: 0,
            m: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    /// Counts one step; call once per step before [`Adam::update`].
    pub fn tick(&mut self) {
        self.t += 1;
    }

    pub fn update(&mut self, k: usize, param: &mut [T], grad: &[T]) {
        let (b1, b2) = (T::of(ADAM_BETA1), T::of(ADAM_BETA2));
        let c1 = 1.0 - ADAM_BETA1.powi(self.t);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t);
        let step = T::of(self.lr / c1);
        let (inv_c2, eps) = (T::of(1.0 / c2), T::of(ADAM_EPS));
        let (m, v) = (&mut self.m[k], &mut self.v[k]);
        for i in 0..param.len() {
            let g = grad[i];
            m[i] = b1 * m[i] + (T::one() - b1) * g;
            v[i] = b2 * v[i] + (T::one() - b2) * g * g;
            param[i] -= step * m[i] / ((v[i] * inv_c2).sqrt() + eps);
        }
    }
}

/// Momentum SGD with L2 weight decay.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64, sizes: &[usize]) -> Self {
        Sgd {
            lr,
            momentum,
            weight_decay,
            velocity: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    pub fn update(&mut self, k: usize, param: &mut [T], grad: &[T]) {
        let (lr, mu, wd) = (T::of(self.lr), T::of(self.momentum), T::of(self.weight_decay));
        let vel = &mut self.velocity[k];
        for i in 0..param.len() {
            vel[i] = mu * vel[i] + grad[i] + wd * param[i];
            param[i] -= lr * vel[i];
        }
    }
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: u64,
    pub conf: f64,
    pub loc: f64,
    pub seg: f64,
    pub eta: f64,
    pub eta_background: f64,
    pub total: f64,
    pub n_positive: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ap: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pa: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub rows: Vec<TraceRow>,
    pub best_ap_step: Option<u64>,
    /// Not part of the JSON-lines log, which must be reproducible.
    pub wall_clock_secs: f64,
}

impl TrainTrace {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.rows {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn first_total(&self) -> Option<f64> {
        self.rows.first().map(|r| r.total)
    }

    pub fn last_total(&self) -> Option<f64> {
        self.rows.last().map(|r| r.total)
    }
}

/// Per-item ground truth for one batch.
pub struct BatchTargets {
    pub targets: Vec<Targets>,
    /// Foreground per item, `H * W` each.
    pub foreground: Vec<Vec<f64>>,
}

impl BatchTargets {
    pub fn from_records(records: &[PatchRecord], anchors: &[Anchor]) -> Result<Self> {
        let mut targets = Vec::with_capacity(records.len());
        let mut foreground = Vec::with_capacity(records.len());
        for r in records {
            let (boxes, _) = drop_degenerate(&r.boxes);
            let a = match_anchors(anchors, &boxes, DEFAULT_POS_IOU)?;
            targets.push(build_targets(&a, anchors, &boxes)?);
            foreground.push(r.labels.foreground());
        }
        Ok(BatchTargets { targets, foreground })
    }
}

/// The combined loss over a batch and its gradient with respect to the
/// network outputs. `eta` is computed over the whole batch; in
/// detection-only mode it is fixed at 1. The returned gradient only covers
/// the terms the mode trains, but the breakdown always reports every term.
pub fn batch_loss<T: Scalar>(
    outputs: &NetOutputs<T>,
    batch: &BatchTargets,
    cfg: &LossConfig,
    mode: TrainMode,
) -> Result<(LossBreakdown, OutputGrads<T>)> {
    let b = outputs.batch();
    if batch.targets.len() != b || batch.foreground.len() != b {
        return Err(Error::ShapeMismatch {
            expected: vec![b],
            actual: vec![batch.targets.len()],
        });
    }
    let pred: Vec<f64> = outputs.seg.data().iter().map(|v| v.f64()).collect();
    let gt: Vec<f64> = batch.foreground.concat();
    let (seg, seg_grad) = seg_loss(ArrayView1::from(&pred), ArrayView1::from(&gt))?;
    let eta = match mode {
        TrainMode::DetectionOnly => ClassWeights::uniform(1.0),
        _ => ClassWeights::from_segmentation(ArrayView1::from(&gt), ArrayView1::from(&pred), cfg)?,
    };

    let n_anchor = outputs.anchor_count();
    let mut p_target = Vec::with_capacity(b * n_anchor);
    let mut classes: Vec<Class> = Vec::with_capacity(b * n_anchor);
    let mut pred_off = Vec::with_capacity(b * n_anchor);
    let mut target_off = Vec::with_capacity(b * n_anchor);
    let mut positives = Vec::new();
    for (item, t) in batch.targets.iter().enumerate() {
        if t.classes.len() != n_anchor {
            return Err(Error::ShapeMismatch {
                expected: vec![n_anchor],
                actual: vec![t.classes.len()],
            });
        }
        let probs = outputs.anchor_probs(item);
        p_target.extend(probs.iter().zip(&t.classes).map(|(p, c)| p[c.index()]));
        classes.extend_from_slice(&t.classes);
        pred_off.extend(outputs.anchor_offsets(item));
        target_off.extend_from_slice(&t.offsets);
        positives.extend(t.positives.iter().map(|&i| item * n_anchor + i));
    }
    let (conf, conf_grad) = conf_loss_weighted(&p_target, &classes, eta, cfg)?;
    let (loc, loc_grad) = loc_loss(&pred_off, &target_off, &positives)?;
    let breakdown = LossBreakdown {
        conf,
        loc,
        seg,
        eta: eta.nucleus,
        eta_background: eta.background,
        total: total_loss(conf, loc, seg, cfg),
        n_positive: positives.len(),
    };

    let mut grads = OutputGrads::none();
    if mode.trains_segmentation() {
        let data = seg_grad.iter().map(|&g| T::of(cfg.beta * g)).collect();
        grads.seg = Some(Tensor::from_vec(outputs.seg.shape(), data)?);
    }
    if mode.trains_detection() {
        for item in 0..b {
            let range = item * n_anchor..(item + 1) * n_anchor;
            let class: Vec<[f64; 2]> = conf_grad[range.clone()]
                .iter()
                .zip(&classes[range.clone()])
                .map(|(&g, c)| {
                    let mut v = [0.0; 2];
                    v[c.index()] = g;
                    v
                })
                .collect();
            let offs: Vec<OffsetVector> = loc_grad[range]
                .iter()
                .map(|o| OffsetVector::from_array(o.to_array().map(|v| cfg.alpha * v)))
                .collect();
            grads.scatter_anchor_grads(outputs, item, &class, &offs);
        }
    }
    Ok((breakdown, grads))
}

/// Optimizer state for the main graph.
struct MainOptimizer<T> {
    adam: Adam<T>,
    sgd: Sgd<T>,
}

impl<T: Scalar> MainOptimizer<T> {
    fn new(model: &UsNet<T>, cfg: &TrainConfig) -> Self {
        let sizes: Vec<usize> = model.main().params().iter().map(|p| p.data.len()).collect();
        MainOptimizer {
            adam: Adam::new(cfg.det_lr, &sizes),
            sgd: Sgd::new(cfg.seg_lr, cfg.seg_momentum, cfg.seg_weight_decay, &sizes),
        }
    }

    fn step(&mut self, model: &mut UsNet<T>, grads: &Gradients<T>, mode: TrainMode) {
        self.adam.tick();
        for (k, p) in model.main_mut().params_mut().iter_mut().enumerate() {
            if !mode.updates(p.group) {
                continue;
            }
            match p.group {
                ParamGroup::SegDecoder => self.sgd.update(k, &mut p.data, &grads.params[k]),
                _ => self.adam.update(k, &mut p.data, &grads.params[k]),
            }
        }
    }
}

/// Endless epoch-wise shuffled index stream.
struct Batcher {
    order: Vec<usize>,
    pos: usize,
}

impl Batcher {
    fn new(n: usize) -> Self {
        Batcher {
            order: (0..n).collect(),
            pos: n,
        }
    }

    fn next(&mut self, size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order.shuffle(rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

fn training_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // keep data sampling independent of the initialization stream
    rng.set_stream(1);
    rng
}

fn diverged(step: u64, e: Error) -> Error {
    match e {
        Error::NonFinite(detail) => Error::Diverged { step, detail },
        other => other,
    }
}

/// Trains the main network in place.
///
/// Batches are random crops of the training split at the model input size.
/// When `eval_every` is set, AP and PA are measured on the eval split (the
/// training split when there is none). Rows are also written to `log` as
/// JSON lines as they are produced.
pub fn train<T: Scalar>(
    model: &mut UsNet<T>,
    anchors: &[Anchor],
    records: &[PatchRecord],
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<(Checkpoint, TrainTrace)> {
    cfg.validate()?;
    if anchors.len() != model.config().anchor_slots() {
        return Err(Error::config(format!(
            "{} anchors for {} network anchor slots",
            anchors.len(),
            model.config().anchor_slots()
        )));
    }
    let train_set: Vec<&PatchRecord> = records.iter().filter(|r| r.split == Split::Train).collect();
    if train_set.is_empty() {
        return Err(Error::input("training split is empty"));
    }
    let eval_set: Vec<PatchRecord> = {
        let e: Vec<PatchRecord> = records.iter().filter(|r| r.split == Split::Eval).cloned().collect();
        if e.is_empty() {
            train_set.iter().map(|&r| r.clone()).collect()
        } else {
            e
        }
    };
    let size = model.config().input_size;
    let eval_params = DetectParams {
        conf_threshold: EVAL_CONF_THRESHOLD,
        ..DetectParams::default()
    };

    let started = Instant::now();
    let mut rng = training_rng(cfg.seed);
    let mut batcher = Batcher::new(train_set.len());
    let mut opt = MainOptimizer::new(model, cfg);
    let mut trace = TrainTrace::default();
    let mut best_ap = f64::NEG_INFINITY;

    for step in 1..=cfg.steps {
        let picks = batcher.next(cfg.batch_size, &mut rng);
        let crops = picks
            .iter()
            .map(|&i| sample_training_crop(train_set[i], size, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let items: Vec<Tensor<T>> = crops.iter().map(|c| c.image.to_tensor()).collect();
        let input = Tensor::stack(&items)?;
        let targets = BatchTargets::from_records(&crops, anchors)?;

        let (outputs, tape) = model.forward(&input).map_err(|e| diverged(step, e))?;
        let (loss, out_grads) = batch_loss(&outputs, &targets, &cfg.loss, cfg.mode)?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("loss {loss:?}"),
            });
        }
        let grads = model.backward(&tape, out_grads)?;
        drop(tape);
        if !grads.all_finite() {
            return Err(Error::Diverged {
                step,
                detail: "non-finite gradient".into(),
            });
        }
        opt.step(model, &grads, cfg.mode);

        let mut row = TraceRow {
            step,
            conf: loss.conf,
            loc: loss.loc,
            seg: loss.seg,
            eta: loss.eta,
            eta_background: loss.eta_background,
            total: loss.total,
            n_positive: loss.n_positive,
            ap: None,
            pa: None,
        };
        if cfg.eval_every > 0 && (step % cfg.eval_every == 0 || step == cfg.steps) {
            let m = evaluate(model, anchors, &eval_set, &eval_params, DEFAULT_AP_IOU, cfg.batch_size)?;
            if m.ap > best_ap {
                best_ap = m.ap;
                trace.best_ap_step = Some(step);
            }
            row.ap = Some(m.ap);
            row.pa = Some(m.pa);
        }
        log::debug!(
            "step {step}: total {:.5} conf {:.5} loc {:.5} seg {:.5}",
            row.total,
            row.conf,
            row.loc,
            row.seg
        );
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{}", serde_json::to_string(&row)?).map_err(|e| Error::io("trace", e))?;
        }
        trace.rows.push(row);
    }
    trace.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok((Checkpoint::from_model(model, cfg.steps, cfg.seed), trace))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineRow {
    pub step: u64,
    pub bce: f64,
    /// Pixel accuracy of the batch at threshold 0.5.
    pub pa: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RefineTrace {
    pub rows: Vec<RefineRow>,
    pub wall_clock_secs: f64,
}

/// Mean binary cross-entropy and its gradient in the probabilities.
pub fn bce_loss(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::ShapeMismatch {
            expected: vec![target.len()],
            actual: vec![pred.len()],
        });
    }
    let inv_n = 1.0 / pred.len() as f64;
    let mut sum = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let clamped = !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p);
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            sum -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
            if clamped {
                0.0
            } else {
                (p - t) / (p * (1.0 - p)) * inv_n
            }
        })
        .collect();
    Ok((sum * inv_n, grad))
}

/// Trains the refinement network in place with binary cross-entropy.
pub fn train_refiner<T: Scalar>(
    model: &mut UsNet<T>,
    samples: &[RefineSample],
    cfg: &RefineConfig,
) -> Result<(Checkpoint, RefineTrace)> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::input("no refinement patches to train on"));
    }
    let s = model.config().refine_size;
    for smp in samples {
        if smp.input.len() != 4 * s * s || smp.target.len() != s * s {
            return Err(Error::ShapeMismatch {
                expected: vec![4, s, s],
                actual: vec![smp.input.len()],
            });
        }
    }
    let started = Instant::now();
    let mut rng = training_rng(cfg.seed);
    let mut batcher = Batcher::new(samples.len());
    let sizes: Vec<usize> = model.refiner().params().iter().map(|p| p.data.len()).collect();
    let mut adam = Adam::new(cfg.lr, &sizes);
    let mut trace = RefineTrace::default();

    for step in 1..=cfg.steps {
        let picks = batcher.next(cfg.batch_size, &mut rng);
        let input: Vec<T> = picks
            .iter()
            .flat_map(|&i| samples[i].input.iter().map(|&v| T::of(v as f64)))
            .collect();
        let target: Vec<f64> = picks
            .iter()
            .flat_map(|&i| samples[i].target.iter().map(|&v| v as f64))
            .collect();
        let batch = Tensor::from_vec([picks.len(), 4, s, s], input)?;
        let (prob, tape) = model.refine_forward(&batch).map_err(|e| diverged(step, e))?;
        let pred: Vec<f64> = prob.data().iter().map(|v| v.f64()).collect();
        let (bce, grad) = bce_loss(&pred, &target)?;
        if !bce.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("refinement loss {bce}"),
            });
        }
        let hits = pred
            .iter()
            .zip(&target)
            .filter(|(&p, &t)| (p >= 0.5) == (t >= 0.5))
            .count();
        let grad = Tensor::from_vec(prob.shape(), grad.into_iter().map(T::of).collect())?;
        let grads = model.refine_backward(&tape, grad)?;
        if !grads.all_finite() {
            return Err(Error::Diverged {
                step,
                detail: "non-finite refinement gradient".into(),
            });
        }
        adam.tick();
        for (k, p) in model.refiner_mut().params_mut().iter_mut().enumerate() {
            adam.update(k, &mut p.data, &grads.params[k]);
        }
        trace.rows.push(RefineRow {
            step,
            bce,
            pa: hits as f64 / pred.len() as f64,
        });
    }
    trace.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok((Checkpoint::from_model(model, cfg.steps, cfg.seed), trace))
}

/// Pixel accuracy of the refiner over whole samples.
pub fn refiner_accuracy<T: Scalar>(model: &UsNet<T>, samples: &[RefineSample], batch_size: usize) -> Result<f64> {
    let s = model.config().refine_size;
    let (mut hits, mut total) = (0usize, 0usize);
    for chunk in samples.chunks(batch_size.max(1)) {
        let input: Vec<T> = chunk
            .iter()
            .flat_map(|x| x.input.iter().map(|&v| T::of(v as f64)))
            .collect();
        let (prob, _) = model.refine_forward(&Tensor::from_vec([chunk.len(), 4, s, s], input)?)?;
        let target = chunk.iter().flat_map(|x| x.target.iter());
        hits += prob
            .data()
            .iter()
            .zip(target)
            .filter(|(p, &t)| (p.f64() >= 0.5) == (t >= 0.5))
            .count();
        total += chunk.len() * s * s;
    }
    Ok(hits as f64 / total.max(1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: TrainMode,
    pub ap: Option<f64>,
    pub pa: Option<f64>,
    pub final_total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub steps: u64,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
        let mut out = String::from("mode,ap,pa,final_total\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{:.6}\n",
                r.mode,
                cell(r.ap),
                cell(r.pa),
                r.final_total
            ));
        }
        out
    }
}

impl fmt::Display for AblationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let cell = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
        writeln!(f, "{:<18} {:>8} {:>8} {:>12}", "mode", "AP", "PA", "final loss")?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<18} {:>8} {:>8} {:>12.6}",
                r.mode.as_str(),
                cell(r.ap),
                cell(r.pa),
                r.final_total
            )?;
        }
        Ok(())
    }
}

/// Trains a fresh network per mode from the same seed and data, then
/// reports AP for modes that train detection and PA for modes that train
/// segmentation.
pub fn run_ablation(
    network: &NetworkConfig,
    anchors: &[Anchor],
    records: &[PatchRecord],
    cfg: &TrainConfig,
) -> Result<AblationTable> {
    let eval_set: Vec<PatchRecord> = {
        let e: Vec<PatchRecord> = records.iter().filter(|r| r.split == Split::Eval).cloned().collect();
        if e.is_empty() {
            records.to_vec()
        } else {
            e
        }
    };
    let eval_params = DetectParams {
        conf_threshold: EVAL_CONF_THRESHOLD,
        ..DetectParams::default()
    };
    let mut rows = Vec::with_capacity(3);
    for mode in TrainMode::ALL {
        let mut model = UsNet::<f32>::build(network, cfg.seed)?;
        let run = TrainConfig { mode, ..cfg.clone() };
        let (_, trace) = train(&mut model, anchors, records, &run, None)?;
        let m = evaluate(&model, anchors, &eval_set, &eval_params, DEFAULT_AP_IOU, cfg.batch_size)?;
        log::info!("ablation {mode}: ap {:.4} pa {:.4}", m.ap, m.pa);
        rows.push(AblationRow {
            mode,
            ap: mode.trains_detection().then_some(m.ap),
            pa: mode.trains_segmentation().then_some(m.pa),
            final_total: trace.last_total().unwrap_or(f64::NAN),
        });
    }
    Ok(AblationTable { steps: cfg.steps, rows })
}
