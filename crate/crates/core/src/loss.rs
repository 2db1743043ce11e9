//! Multi-task detection loss: softmax classification, smooth-L1 localization
//! and per-pixel binary cross-entropy on saliency maps.

use serde::Serialize;

use crate::autograd::{Tape, Var};
use crate::detect::HeadLayout;
use crate::error::{Error, Result};
use crate::mask::{ProbMap, SaliencyMask};
use crate::tensor::{Scalar, Tensor};

/// Probability clamp for the cross-entropy terms.
pub const PROB_EPS: f64 = 1e-7;
/// Logits are clamped to `[-LOGIT_CLAMP, LOGIT_CLAMP]` before sigmoid/softmax.
pub const LOGIT_CLAMP: f64 = 15.0;

/// Components of `L = Lc + lambda1 * Ll + lambda2 * Lm`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub cls: f64,
    pub loc: f64,
    pub mask: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl LossBreakdown {
    /// Direct supervision: all three terms.
    pub fn direct(cls: f64, loc: f64, mask: f64, lambda1: f64, lambda2: f64) -> Self {
        Self {
            total: cls + lambda1 * loc + lambda2 * mask,
            cls,
            loc,
            mask,
            lambda1,
            lambda2,
        }
    }

    /// Indirect supervision: no mask term, `lambda2` is ignored.
    pub fn indirect(cls: f64, loc: f64, lambda1: f64) -> Self {
        Self {
            total: cls + lambda1 * loc,
            cls,
            loc,
            mask: 0.0,
            lambda1,
            lambda2: 0.0,
        }
    }

    /// The defining identity, evaluated with the same expression.
    pub fn is_consistent(&self) -> bool {
        self.total == self.cls + self.lambda1 * self.loc + self.lambda2 * self.mask
    }
}

/// Which supervision a loss is being assembled for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossMode {
    Direct,
    Indirect,
}

pub fn total_loss(mode: LossMode, cls: f64, loc: f64, mask: f64, lambda1: f64, lambda2: f64) -> LossBreakdown {
    match mode {
        LossMode::Direct => LossBreakdown::direct(cls, loc, mask, lambda1, lambda2),
        LossMode::Indirect => LossBreakdown::indirect(cls, loc, lambda1),
    }
}

/// Binary cross-entropy of one probability against a 0/1 target and its
/// derivative in `p`. `p` is clamped to `[eps, 1 - eps]`; the derivative is 0
/// where the clamp is active.
pub fn bce<T: Scalar>(p: T, target: bool) -> (T, T) {
    let eps = T::lit(PROB_EPS);
    let one = T::one();
    let clamped = p < eps || p > one - eps;
    let pc = p.max(eps).min(one - eps);
    let (loss, d) = if target {
        (-pc.ln(), -one / pc)
    } else {
        (-(one - pc).ln(), one / (one - pc))
    };
    (loss, if clamped { T::zero() } else { d })
}

fn check_map_dims<T: Scalar>(p: &ProbMap<T>, gt: &SaliencyMask) -> Result<()> {
    if p.dims() != gt.dims() {
        return Err(Error::shape(format!(
            "prob map {:?} vs ground truth {:?}",
            p.dims(),
            gt.dims()
        )));
    }
    Ok(())
}

/// Mean per-pixel binary cross-entropy of one map.
pub fn loss_mask<T: Scalar>(p: &ProbMap<T>, gt: &SaliencyMask) -> Result<T> {
    loss_mask_multi(&[(p, gt)])
}

/// `(1/N) sum_k BCE(m_k, m*_k)` with `N` the coordinate count over all maps.
pub fn loss_mask_multi<T: Scalar>(maps: &[(&ProbMap<T>, &SaliencyMask)]) -> Result<T> {
    let mut sum = T::zero();
    let mut n = 0usize;
    for (p, gt) in maps {
        check_map_dims(p, gt)?;
        let (h, w) = p.dims();
        for y in 0..h {
            for x in 0..w {
                sum += bce(p.get(y, x), gt.get(y, x)).0;
            }
        }
        n += h * w;
    }
    if n == 0 {
        return Err(Error::invalid("mask loss over zero coordinates"));
    }
    Ok(sum / T::lit(n as f64))
}

/// Result of a loss over anchors with its gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorLoss<T> {
    pub value: T,
    /// Gradient with respect to the inputs, same layout as the inputs.
    pub grad: Vec<T>,
    /// Anchors that contributed.
    pub counted: usize,
}

impl<T> AnchorLoss<T> {
    /// False when every anchor was excluded and the loss defaulted to 0.
    pub fn has_terms(&self) -> bool {
        self.counted > 0
    }
}

/// Softmax cross-entropy averaged over anchors with `include[i]`.
/// `logits` holds one row of `classes` values per anchor.
pub fn loss_cls<T: Scalar>(
    logits: &[T],
    classes: usize,
    labels: &[usize],
    include: &[bool],
) -> Result<AnchorLoss<T>> {
    let n = labels.len();
    if logits.len() != n * classes || include.len() != n {
        return Err(Error::shape(format!(
            "cls loss: {} logits, {} labels, {} flags, {classes} classes",
            logits.len(),
            n,
            include.len()
        )));
    }
    let lim = T::lit(LOGIT_CLAMP);
    let counted = include.iter().filter(|&&b| b).count();
    let mut grad = vec![T::zero(); logits.len()];
    if counted == 0 {
        return Ok(AnchorLoss { value: T::zero(), grad, counted });
    }
    let inv = T::one() / T::lit(counted as f64);
    let mut sum = T::zero();
    for i in 0..n {
        if !include[i] {
            continue;
        }
        if labels[i] >= classes {
            return Err(Error::invalid(format!("label {} >= {classes} classes", labels[i])));
        }
        let row = &logits[i * classes..(i + 1) * classes];
        let z: Vec<T> = row.iter().map(|&v| v.max(-lim).min(lim)).collect();
        let m = z.iter().copied().fold(T::neg_infinity(), T::max);
        let e: Vec<T> = z.iter().map(|&v| (v - m).exp()).collect();
        let s: T = e.iter().copied().sum();
        sum += s.ln() + m - z[labels[i]];
        for k in 0..classes {
            if row[k].abs() > lim {
                continue;
            }
            let p = e[k] / s;
            let t = if k == labels[i] { T::one() } else { T::zero() };
            grad[i * classes + k] = (p - t) * inv;
        }
    }
    Ok(AnchorLoss { value: sum * inv, grad, counted })
}

pub fn smooth_l1<T: Scalar>(x: T) -> (T, T) {
    let half = T::lit(0.5);
    if x.abs() < T::one() {
        (half * x * x, x)
    } else {
        (x.abs() - half, x.signum())
    }
}

/// Smooth-L1 over the four offsets of each included anchor, summed and
/// normalized by the included anchor count.
pub fn loss_loc<T: Scalar>(pred: &[T], target: &[[f32; 4]], include: &[bool]) -> Result<AnchorLoss<T>> {
    let n = target.len();
    if pred.len() != 4 * n || include.len() != n {
        return Err(Error::shape("loc loss: prediction/target/flag lengths"));
    }
    let counted = include.iter().filter(|&&b| b).count();
    let mut grad = vec![T::zero(); pred.len()];
    if counted == 0 {
        return Ok(AnchorLoss { value: T::zero(), grad, counted });
    }
    let inv = T::one() / T::lit(counted as f64);
    let mut sum = T::zero();
    for i in (0..n).filter(|&i| include[i]) {
        for j in 0..4 {
            let (l, d) = smooth_l1(pred[4 * i + j] - T::lit(target[i][j] as f64));
            sum += l;
            grad[4 * i + j] = d * inv;
        }
    }
    Ok(AnchorLoss { value: sum * inv, grad, counted })
}

/// Flattens head tensors into per-anchor rows of `width` channels
/// (`width = classes` for class logits, 4 for offsets).
pub fn gather_anchor_rows<T: Scalar>(tensors: &[&Tensor<T>], layouts: &[HeadLayout], width: usize) -> Vec<T> {
    let total: usize = layouts.iter().map(HeadLayout::num_anchors).sum();
    let mut out = Vec::with_capacity(total * width);
    for (t, l) in tensors.iter().zip(layouts) {
        for i in 0..l.num_anchors() {
            let (y, x, a) = l.anchor_cell(i);
            for k in 0..width {
                out.push(t.get(0, a * width + k, y, x));
            }
        }
    }
    out
}

/// Inverse of [`gather_anchor_rows`], scaled by `scale`.
pub fn scatter_anchor_rows<T: Scalar>(rows: &[T], layouts: &[HeadLayout], width: usize, scale: T) -> Vec<Tensor<T>> {
    let mut offset = 0;
    layouts
        .iter()
        .map(|l| {
            let mut t = Tensor::zeros([1, l.anchors * width, l.h, l.w]);
            for i in 0..l.num_anchors() {
                let (y, x, a) = l.anchor_cell(i);
                for k in 0..width {
                    let o = t.offset(0, a * width + k, y, x);
                    t.data_mut()[o] = rows[(offset + i) * width + k] * scale;
                }
            }
            offset += l.num_anchors();
            t
        })
        .collect()
}

fn anchor_loss_op<T: Scalar>(tape: &Tape<T>, heads: &[(Var, HeadLayout)], width: usize, loss: AnchorLoss<T>) -> Var {
    let parents: Vec<Var> = heads.iter().map(|h| h.0).collect();
    let layouts: Vec<HeadLayout> = heads.iter().map(|h| h.1).collect();
    let grad = loss.grad;
    tape.custom(Tensor::scalar(loss.value), &parents, move |g| {
        Ok(scatter_anchor_rows(&grad, &layouts, width, g.data()[0])
            .into_iter()
            .map(Some)
            .collect())
    })
}

/// Classification loss over class-logit tensors recorded on `tape`.
pub fn tape_loss_cls<T: Scalar>(
    tape: &Tape<T>,
    heads: &[(Var, HeadLayout)],
    labels: &[usize],
    include: &[bool],
) -> Result<(Var, usize)> {
    let vals: Vec<_> = heads.iter().map(|h| tape.value(h.0)).collect();
    let refs: Vec<&Tensor<T>> = vals.iter().map(|v| v.as_ref()).collect();
    let layouts: Vec<HeadLayout> = heads.iter().map(|h| h.1).collect();
    let classes = layouts.first().map_or(1, |l| l.classes);
    let rows = gather_anchor_rows(&refs, &layouts, classes);
    let loss = loss_cls(&rows, classes, labels, include)?;
    let counted = loss.counted;
    Ok((anchor_loss_op(tape, heads, classes, loss), counted))
}

/// Localization loss over offset tensors recorded on `tape`.
pub fn tape_loss_loc<T: Scalar>(
    tape: &Tape<T>,
    heads: &[(Var, HeadLayout)],
    targets: &[[f32; 4]],
    include: &[bool],
) -> Result<(Var, usize)> {
    let vals: Vec<_> = heads.iter().map(|h| tape.value(h.0)).collect();
    let refs: Vec<&Tensor<T>> = vals.iter().map(|v| v.as_ref()).collect();
    let layouts: Vec<HeadLayout> = heads.iter().map(|h| h.1).collect();
    let rows = gather_anchor_rows(&refs, &layouts, 4);
    let loss = loss_loc(&rows, targets, include)?;
    let counted = loss.counted;
    Ok((anchor_loss_op(tape, heads, 4, loss), counted))
}

/// Summed BCE of a `1 x 1 x h x w` probability tensor against `gt`.
pub fn tape_bce_sum<T: Scalar>(tape: &Tape<T>, p: Var, gt: &SaliencyMask) -> Result<Var> {
    let pv = tape.value(p);
    if pv.dims() != [1, 1, gt.height(), gt.width()] {
        return Err(Error::shape(format!(
            "bce: map {:?} vs ground truth {:?}",
            pv.dims(),
            gt.dims()
        )));
    }
    let w = gt.width();
    let mut sum = T::zero();
    let mut grad = Vec::with_capacity(pv.len());
    for (i, &v) in pv.data().iter().enumerate() {
        let (l, d) = bce(v, gt.get(i / w, i % w));
        sum += l;
        grad.push(d);
    }
    let grad = Tensor::new(pv.dims(), grad)?;
    Ok(tape.custom(Tensor::scalar(sum), &[p], move |g| Ok(vec![Some(grad.scale(g.data()[0]))])))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_loss_examples() {
        let gt = SaliencyMask::from_fn(3, 4, |y, x| (x + y) % 2 == 0);
        let half = ProbMap::filled(3, 4, 0.5f64).unwrap();
        assert!((loss_mask(&half, &gt).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);

        let exact = ProbMap::new(3, 4, gt.to_grid().iter().map(|&b| b as f64).collect()).unwrap();
        assert!(loss_mask(&exact, &gt).unwrap() <= 1e-6);

        let p = ProbMap::filled(2, 2, 0.9f64).unwrap();
        let l = loss_mask(&p, &SaliencyMask::ones(2, 2)).unwrap();
        assert!((l - (-(0.9f64).ln())).abs() < 1e-12);
        assert!((l - 0.1054).abs() < 1e-4);

        assert!(loss_mask(&p, &SaliencyMask::ones(2, 3)).is_err());
    }

    #[test]
    fn mask_loss_counts_all_coordinates() {
        let a = ProbMap::filled(2, 2, 0.5f64).unwrap();
        let b = ProbMap::filled(1, 1, 0.9f64).unwrap();
        let l = loss_mask_multi(&[(&a, &SaliencyMask::ones(2, 2)), (&b, &SaliencyMask::ones(1, 1))]).unwrap();
        let expect = (4.0 * std::f64::consts::LN_2 - (0.9f64).ln()) / 5.0;
        assert!((l - expect).abs() < 1e-12);
    }

    #[test]
    fn cls_loss_examples() {
        for c in [2usize, 3, 21] {
            let l = loss_cls(&vec![0.3f64; c], c, &[1], &[true]).unwrap();
            assert!((l.value - (c as f64).ln()).abs() < 1e-12);
        }
        let l = loss_cls(&[1.0f64, 2.0, 3.0, 4.0], 2, &[0, 1], &[false, false]).unwrap();
        assert_eq!(l.value, 0.0);
        assert!(!l.has_terms());
        let l = loss_cls(&[-20.0f64, 20.0, 0.0], 3, &[1], &[true]).unwrap();
        assert!(l.value < 1e-6);
    }

    #[test]
    fn cls_loss_ignores_excluded_rows() {
        let labels = [0, 2, 1];
        let a = loss_cls(&[0.1f64, 0.2, 0.3, 1.0, -1.0, 0.5, 9.0, 9.0, 9.0], 3, &labels, &[true, false, true]).unwrap();
        let b = loss_cls(&[0.1f64, 0.2, 0.3, -7.0, 3.0, 8.0, 9.0, 9.0, 9.0], 3, &labels, &[true, false, true]).unwrap();
        assert_eq!(a.value, b.value);
        assert!(a.grad[3..6].iter().all(|&g| g == 0.0));
    }

    #[test]
    fn loc_loss_examples() {
        let t = [[0.0f32; 4]];
        assert_eq!(loss_loc(&[0.0f64; 4], &t, &[true]).unwrap().value, 0.0);
        assert!((loss_loc(&[0.5f64; 4], &t, &[true]).unwrap().value - 4.0 * 0.125).abs() < 1e-12);
        assert!((loss_loc(&[2.0f64; 4], &t, &[true]).unwrap().value - 4.0 * 1.5).abs() < 1e-12);
        assert_eq!(smooth_l1(0.5f64).0, 0.125);
        assert_eq!(smooth_l1(-2.0f64).0, 1.5);
        assert_eq!(loss_loc(&[2.0f64; 4], &t, &[false]).unwrap().value, 0.0);
    }

    #[test]
    fn total_loss_examples() {
        let l = total_loss(LossMode::Direct, 1.0, 2.0, 3.0, 1.0, 1.0);
        assert_eq!(l.total, 6.0);
        assert!(l.is_consistent());
        let l = total_loss(LossMode::Indirect, 1.0, 2.0, 3.0, 1.0, 1.0);
        assert_eq!(l.total, 3.0);
        assert_eq!(l.mask, 0.0);
        let d = total_loss(LossMode::Direct, 1.25, 0.5, 7.0, 1.0, 0.0);
        let i = total_loss(LossMode::Indirect, 1.25, 0.5, 7.0, 1.0, 1.0);
        assert_eq!(d.total, i.total);
    }

    #[test]
    fn anchor_rows_round_trip() {
        let l = HeadLayout { h: 2, w: 3, anchors: 2, classes: 3 };
        let t = Tensor::<f64>::from_fn([1, 6, 2, 3], |_, c, y, x| (c * 100 + y * 10 + x) as f64);
        let rows = gather_anchor_rows(&[&t], &[l], 3);
        // anchor (y=1, x=2, a=1), class 2 -> channel 5
        let i = (1 * 3 + 2) * 2 + 1;
        assert_eq!(rows[i * 3 + 2], 512.0);
        let back = scatter_anchor_rows(&rows, &[l], 3, 1.0);
        assert_eq!(back[0], t);
    }
}
