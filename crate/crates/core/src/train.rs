//! Toy-scale training: per-image losses under either supervision strategy,
//! SGD with momentum and weight decay, and evaluation of mask quality and
//! computation saved.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{Tape, Var};
use crate::data::SyntheticScene;
use crate::detect::{match_anchors, AnchorTargets, Rect};
use crate::error::{Error, Result};
use crate::flops::{self, Convention, FlopsReport};
use crate::graph::{Forward, ForwardOptions, Graph, Mode};
use crate::loss::{tape_bce_sum, tape_loss_cls, tape_loss_loc, total_loss, LossBreakdown, LossMode};
use crate::mask::{downsample_maxpool, gt_mask_from_boxes, BoundingBox, MaskPyramid, SaliencyMask};
use crate::params::{Bindings, ParamStore};
use crate::spec::Supervision;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub strategy: Supervision,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// The learning rate is multiplied by 0.1 from this epoch on
    /// (default: two thirds of `epochs`).
    pub decay_epoch: Option<usize>,
    pub lambda1: f64,
    pub lambda2: f64,
    pub iou_thresh: f32,
    /// Seed of the per-epoch shuffle.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            strategy: Supervision::Direct,
            epochs: 40,
            batch_size: 2,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            decay_epoch: None,
            lambda1: 1.0,
            lambda2: 1.0,
            iou_thresh: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decay = self.decay_epoch.unwrap_or(2 * self.epochs / 3);
        if epoch >= decay && self.epochs > 1 {
            self.lr * 0.1
        } else {
            self.lr
        }
    }
}

/// Ground-truth masks for every pyramid level. Level 0 is rendered from the
/// boxes at the attach stride; coarser levels are its window-OR, the target
/// a downsampler that keeps every foreground cell would produce.
pub fn gt_pyramid(graph: &Graph, boxes: &[BoundingBox]) -> Result<MaskPyramid> {
    let stride = graph
        .attach_stride()
        .ok_or_else(|| Error::invalid("attach resolution does not tile the image"))?;
    let base = gt_mask_from_boxes(boxes, graph.image_hw(), stride)?;
    let mut levels = Vec::with_capacity(graph.levels().len());
    for l in graph.levels() {
        let m = if l.factor == 1 { base.clone() } else { downsample_maxpool(&base, l.factor)? };
        if m.dims() != l.hw {
            return Err(Error::shape(format!("ground-truth mask {:?} does not match level {:?}", m.dims(), l.hw)));
        }
        levels.push(m);
    }
    Ok(MaskPyramid { levels })
}

/// Everything the loss needs about one scene.
#[derive(Clone, Debug)]
pub struct SceneTargets {
    pub anchors: AnchorTargets,
    /// Present when the graph has a selective module.
    pub masks: Option<MaskPyramid>,
}

pub fn prepare_targets(graph: &Graph, boxes: &[BoundingBox], iou_thresh: f32) -> Result<SceneTargets> {
    let all: Vec<Rect> = graph.anchors().iter().flatten().copied().collect();
    let masks = if graph.selective().is_some() { Some(gt_pyramid(graph, boxes)?) } else { None };
    Ok(SceneTargets { anchors: match_anchors(&all, boxes, iou_thresh), masks })
}

/// Anchors whose head cell was computed.
pub fn anchor_include(graph: &Graph, pyramid: Option<&MaskPyramid>) -> Vec<bool> {
    let mut out = Vec::new();
    for h in graph.heads() {
        let lvl = if h.masked { pyramid.zip(h.level()) } else { None };
        for i in 0..h.layout.num_anchors() {
            let (y, x, _) = h.layout.anchor_cell(i);
            out.push(lvl.is_none_or(|(p, l)| p.levels[l].get(y, x)));
        }
    }
    out
}

/// Loss of one image recorded on a tape.
pub struct ImageLoss {
    pub total: Var,
    pub breakdown: LossBreakdown,
    pub forward: Forward,
    /// Anchors that entered the classification loss.
    pub counted: usize,
}

#[allow(clippy::too_many_arguments)]
pub fn image_loss<T: Scalar>(
    graph: &Graph,
    tape: &Tape<T>,
    b: &Bindings,
    image: Var,
    targets: &SceneTargets,
    strategy: Supervision,
    lambda1: f64,
    lambda2: f64,
    opts_override: Option<&ForwardOptions<'_, T>>,
) -> Result<ImageLoss> {
    let mode = match strategy {
        Supervision::Direct => Mode::TrainDirect,
        Supervision::Indirect => Mode::TrainIndirect,
    };
    let default_opts = ForwardOptions::new(mode);
    let opts = opts_override.unwrap_or(&default_opts);
    let fwd = graph.forward(tape, b, image, opts)?;
    let include = anchor_include(graph, fwd.pyramid.as_ref());
    let t = &targets.anchors;
    let cls: Vec<_> = graph.heads().iter().zip(&fwd.heads).map(|(h, v)| (v.0, h.layout)).collect();
    let loc: Vec<_> = graph.heads().iter().zip(&fwd.heads).map(|(h, v)| (v.1, h.layout)).collect();
    let (lc, counted) = tape_loss_cls(tape, &cls, &t.labels, &include)?;
    let pos: Vec<bool> = t.positive.iter().zip(&include).map(|(&p, &i)| p && i).collect();
    let (ll, _) = tape_loss_loc(tape, &loc, &t.offsets, &pos)?;
    let scalar = |v: Var| tape.value(v).data()[0].to_f64().unwrap_or(f64::NAN);
    let (lc_v, ll_v) = (scalar(lc), scalar(ll));
    let mut terms = vec![(lc, 1.0), (ll, lambda1)];
    let breakdown = match (strategy, &targets.masks, fwd.level_maps.is_empty()) {
        (Supervision::Direct, Some(gt), false) => {
            let n: usize = gt.levels.iter().map(|m| m.height() * m.width()).sum();
            let mut lm_sum = 0.0;
            for (map, g) in fwd.level_maps.iter().zip(&gt.levels) {
                let s = tape_bce_sum(tape, *map, g)?;
                lm_sum += scalar(s);
                terms.push((s, lambda2 / n as f64));
            }
            total_loss(LossMode::Direct, lc_v, ll_v, lm_sum / n as f64, lambda1, lambda2)
        }
        (Supervision::Direct, _, _) => total_loss(LossMode::Direct, lc_v, ll_v, 0.0, lambda1, lambda2),
        (Supervision::Indirect, _, _) => total_loss(LossMode::Indirect, lc_v, ll_v, 0.0, lambda1, lambda2),
    };
    let total = tape.weighted_sum(&terms)?;
    Ok(ImageLoss { total, breakdown, forward: fwd, counted })
}

/// Per-epoch training record.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Means over the epoch's images.
    pub loss: LossBreakdown,
    pub mask_density_mean: f64,
    pub flops_reduction_mean: f64,
}

pub fn history_csv(history: &[EpochMetrics]) -> String {
    let mut s = String::from("epoch,L,Lc,Ll,Lm,mask_density_mean,flops_reduction_mean\n");
    for m in history {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            m.epoch, m.loss.total, m.loss.cls, m.loss.loc, m.loss.mask, m.mask_density_mean, m.flops_reduction_mean
        );
    }
    s
}

pub struct TrainOutcome {
    pub params: ParamStore,
    pub history: Vec<EpochMetrics>,
}

/// Hard pyramid the graph would use for a probability map held on `tape`.
fn pyramid_of(graph: &Graph, tape: &Tape<f32>, b: &Bindings, fwd: &Forward) -> Result<Option<MaskPyramid>> {
    if fwd.pyramid.is_some() {
        return Ok(fwd.pyramid.clone());
    }
    match fwd.prob {
        Some(p) => graph.pyramid_from_map(tape, b, p).map(Some),
        None => Ok(None),
    }
}

fn mean_breakdown(sum: &[f64; 3], n: usize, cfg: &TrainConfig) -> LossBreakdown {
    let k = 1.0 / n.max(1) as f64;
    let mode = match cfg.strategy {
        Supervision::Direct => LossMode::Direct,
        Supervision::Indirect => LossMode::Indirect,
    };
    total_loss(mode, sum[0] * k, sum[1] * k, sum[2] * k, cfg.lambda1, cfg.lambda2)
}

/// SGD with momentum `mu` and weight decay `wd`:
/// `v = mu v + (g + wd w)`, `w -= lr v`.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64, mu: f64, wd: f64) -> Result<()> {
        for (name, g) in grads {
            let w = params.get_mut(name)?;
            let v = self.velocity.entry(name.clone()).or_insert_with(|| Tensor::zeros(w.dims()));
            let (mu, wd, lr) = (mu as f32, wd as f32, lr as f32);
            let vd = v.data_mut();
            let wdat = w.data_mut();
            for ((vi, wi), gi) in vd.iter_mut().zip(wdat.iter_mut()).zip(g.data()) {
                *vi = mu * *vi + (*gi + wd * *wi);
                *wi -= lr * *vi;
            }
        }
        Ok(())
    }
}

/// Trains `params` on `scenes`; returns the final weights and the epoch history.
pub fn train_toy(graph: &Graph, params: ParamStore, scenes: &[SyntheticScene], cfg: &TrainConfig) -> Result<TrainOutcome> {
    if scenes.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let targets: Vec<SceneTargets> = scenes
        .iter()
        .map(|s| prepare_targets(graph, &s.boxes, cfg.iou_thresh))
        .collect::<Result<_>>()?;
    let costs = graph.costs();
    let mut params = params;
    let mut sgd = Sgd::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let lr = cfg.lr_at(epoch);
        let mut sums = [0.0f64; 3];
        let mut density = 0.0;
        let mut reduction = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
            for &i in batch {
                let tape = Tape::new();
                let b = params.bind(&tape, Graph::is_trainable);
                let x = tape.constant(scenes[i].image.clone());
                let l = image_loss(graph, &tape, &b, x, &targets[i], cfg.strategy, cfg.lambda1, cfg.lambda2, None)?;
                if !l.breakdown.total.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        step,
                        detail: format!("non-finite loss {:?} on scene {i}", l.breakdown),
                    });
                }
                sums[0] += l.breakdown.cls;
                sums[1] += l.breakdown.loc;
                sums[2] += l.breakdown.mask;
                if let Some(p) = pyramid_of(graph, &tape, &b, &l.forward)? {
                    density += p.levels[0].density();
                    let r = flops::report(&costs, &[graph.mask_ones(&p)?], Convention::Macs)?;
                    reduction += r.reduced_percent;
                }
                let mut g = tape.backward(l.total)?;
                for (name, var) in b.iter() {
                    if let Some(t) = g.take(*var) {
                        match grads.get_mut(name) {
                            Some(acc) => acc.accumulate(&t)?,
                            None => {
                                grads.insert(name.clone(), t);
                            }
                        }
                    }
                }
            }
            let scale = 1.0 / batch.len() as f32;
            for g in grads.values_mut() {
                *g = g.scale(scale);
            }
            if grads.values().any(|g| !g.is_finite()) {
                return Err(Error::Diverged { epoch, step, detail: "non-finite gradient".into() });
            }
            sgd.step(&mut params, &grads, lr, cfg.momentum, cfg.weight_decay)?;
            step += 1;
        }
        let n = scenes.len();
        history.push(EpochMetrics {
            epoch,
            loss: mean_breakdown(&sums, n, cfg),
            mask_density_mean: density / n as f64,
            flops_reduction_mean: reduction / n as f64,
        });
    }
    Ok(TrainOutcome { params, history })
}

/// Mask quality and computation saved over a set of scenes.
#[derive(Clone, Debug, Serialize)]
pub struct Evaluation {
    /// Mean mask loss against the box-derived pyramid.
    pub mask_loss: f64,
    /// Ground-truth foreground cells at the attach resolution that the
    /// predicted mask also marks, pooled over scenes.
    pub recall: f64,
    pub density_mean: f64,
    pub flops: FlopsReport,
}

pub fn evaluate(graph: &Graph, params: &ParamStore, scenes: &[SyntheticScene]) -> Result<Evaluation> {
    if graph.selective().is_none() {
        return Err(Error::invalid("evaluation needs a selective module"));
    }
    let costs = graph.costs();
    let mut lm = 0.0;
    let mut hit = 0usize;
    let mut gt_ones = 0usize;
    let mut density = 0.0;
    let mut work = Vec::with_capacity(scenes.len());
    for s in scenes {
        let t = prepare_targets(graph, &s.boxes, 0.5)?;
        let tape = Tape::new();
        let b = params.bind(&tape, |_| false);
        let x = tape.constant(s.image.clone());
        let l = image_loss(graph, &tape, &b, x, &t, Supervision::Direct, 1.0, 1.0, None)?;
        lm += l.breakdown.mask;
        let pred = l.forward.pyramid.as_ref().expect("direct mode yields masks");
        let gt = &t.masks.as_ref().expect("module implies masks").levels[0];
        hit += intersection(&pred.levels[0], gt);
        gt_ones += gt.count_ones();
        density += pred.levels[0].density();
        work.push(graph.mask_ones(pred)?);
    }
    let n = scenes.len().max(1) as f64;
    Ok(Evaluation {
        mask_loss: lm / n,
        recall: if gt_ones == 0 { 1.0 } else { hit as f64 / gt_ones as f64 },
        density_mean: density / n,
        flops: flops::report(&costs, &work, Convention::Macs)?,
    })
}

fn intersection(a: &SaliencyMask, b: &SaliencyMask) -> usize {
    let (h, w) = a.dims();
    (0..h).map(|y| (0..w).filter(|&x| a.get(y, x) && b.get(y, x)).count()).sum()
}
