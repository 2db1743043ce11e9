//! SSD-style anchors, target matching, box decoding and greedy NMS.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{BoundingBox, SaliencyMask};
use crate::tensor::{Scalar, Tensor};

/// Center-offset encoding variances (center, size).
pub const VARIANCES: (f32, f32) = (0.1, 0.2);

/// Anchor shapes per head cell: every size paired with every aspect ratio.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorSpec {
    pub sizes: Vec<f32>,
    pub ratios: Vec<f32>,
}

impl AnchorSpec {
    pub fn per_cell(&self) -> usize {
        self.sizes.len() * self.ratios.len()
    }

    /// `(w, h)` of each anchor shape, size-major.
    pub fn shapes(&self) -> Vec<(f32, f32)> {
        let mut out = Vec::with_capacity(self.per_cell());
        for &s in &self.sizes {
            for &r in &self.ratios {
                let k = r.sqrt();
                out.push((s * k, s / k));
            }
        }
        out
    }
}

/// Continuous-coordinate box `[x1, x2) x [y1, y2)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rect {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
}

impl Rect {
    pub fn from_center(cx: f32, cy: f32, w: f32, h: f32) -> Self {
        Self {
            x1: cx - w / 2.0,
            y1: cy - h / 2.0,
            x2: cx + w / 2.0,
            y2: cy + h / 2.0,
        }
    }

    /// Pixel-inclusive box to its continuous extent.
    pub fn from_box(b: &BoundingBox) -> Self {
        Self {
            x1: b.x1,
            y1: b.y1,
            x2: b.x2 + 1.0,
            y2: b.y2 + 1.0,
        }
    }

    pub fn center(&self) -> (f32, f32) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn size(&self) -> (f32, f32) {
        (self.x2 - self.x1, self.y2 - self.y1)
    }

    pub fn area(&self) -> f32 {
        let (w, h) = self.size();
        w.max(0.0) * h.max(0.0)
    }

    pub fn iou(&self, o: &Rect) -> f32 {
        let iw = (self.x2.min(o.x2) - self.x1.max(o.x1)).max(0.0);
        let ih = (self.y2.min(o.y2) - self.y1.max(o.y1)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + o.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn clamp(&self, w: f32, h: f32) -> Rect {
        Rect {
            x1: self.x1.clamp(0.0, w),
            y1: self.y1.clamp(0.0, h),
            x2: self.x2.clamp(0.0, w),
            y2: self.y2.clamp(0.0, h),
        }
    }
}

/// Output element ordering of one detection head.
///
/// Anchors are enumerated cell-major `(y, x, a)`. The class tensor has
/// `anchors * classes` channels with channel `a * classes + k`; the box tensor
/// has `anchors * 4` channels with channel `a * 4 + j`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadLayout {
    pub h: usize,
    pub w: usize,
    pub anchors: usize,
    /// Including background at index 0.
    pub classes: usize,
}

impl HeadLayout {
    pub fn num_anchors(&self) -> usize {
        self.h * self.w * self.anchors
    }

    /// `(y, x, a)` of flat anchor index `i`.
    pub fn anchor_cell(&self, i: usize) -> (usize, usize, usize) {
        let a = i % self.anchors;
        let cell = i / self.anchors;
        (cell / self.w, cell % self.w, a)
    }
}

/// Anchor boxes of one head over a `h x w` grid laid on an image.
pub fn generate_anchors(layout: &HeadLayout, image: (usize, usize), spec: &AnchorSpec) -> Vec<Rect> {
    let sy = image.0 as f32 / layout.h as f32;
    let sx = image.1 as f32 / layout.w as f32;
    let shapes = spec.shapes();
    let mut out = Vec::with_capacity(layout.num_anchors());
    for y in 0..layout.h {
        for x in 0..layout.w {
            let (cx, cy) = ((x as f32 + 0.5) * sx, (y as f32 + 0.5) * sy);
            for &(w, h) in &shapes {
                out.push(Rect::from_center(cx, cy, w, h));
            }
        }
    }
    out
}

pub fn encode(gt: &Rect, anchor: &Rect) -> [f32; 4] {
    let (gx, gy) = gt.center();
    let (gw, gh) = gt.size();
    let (ax, ay) = anchor.center();
    let (aw, ah) = anchor.size();
    [
        (gx - ax) / (aw * VARIANCES.0),
        (gy - ay) / (ah * VARIANCES.0),
        (gw / aw).ln() / VARIANCES.1,
        (gh / ah).ln() / VARIANCES.1,
    ]
}

pub fn decode(offsets: [f32; 4], anchor: &Rect) -> Rect {
    let (ax, ay) = anchor.center();
    let (aw, ah) = anchor.size();
    let cx = ax + offsets[0] * VARIANCES.0 * aw;
    let cy = ay + offsets[1] * VARIANCES.0 * ah;
    let w = aw * (offsets[2] * VARIANCES.1).min(10.0).exp();
    let h = ah * (offsets[3] * VARIANCES.1).min(10.0).exp();
    Rect::from_center(cx, cy, w, h)
}

/// Per-anchor training targets.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorTargets {
    /// 0 = background, `class_id + 1` otherwise.
    pub labels: Vec<usize>,
    pub offsets: Vec<[f32; 4]>,
    pub positive: Vec<bool>,
}

/// SSD matching: an anchor is positive when its best IoU with a ground-truth box
/// reaches `iou_thresh`; each ground-truth box also claims its best anchor.
pub fn match_anchors(anchors: &[Rect], boxes: &[BoundingBox], iou_thresh: f32) -> AnchorTargets {
    let n = anchors.len();
    let mut labels = vec![0; n];
    let mut offsets = vec![[0.0; 4]; n];
    let mut positive = vec![false; n];
    if boxes.is_empty() {
        return AnchorTargets { labels, offsets, positive };
    }
    let gts: Vec<Rect> = boxes.iter().map(Rect::from_box).collect();
    let mut best_gt = vec![(0usize, -1.0f32); n];
    let mut best_anchor = vec![(0usize, -1.0f32); gts.len()];
    for (i, a) in anchors.iter().enumerate() {
        for (j, g) in gts.iter().enumerate() {
            let iou = a.iou(g);
            if iou > best_gt[i].1 {
                best_gt[i] = (j, iou);
            }
            if iou > best_anchor[j].1 {
                best_anchor[j] = (i, iou);
            }
        }
    }
    for (j, &(i, iou)) in best_anchor.iter().enumerate() {
        if iou > 0.0 {
            best_gt[i] = (j, 2.0);
        }
    }
    for i in 0..n {
        let (j, iou) = best_gt[i];
        if iou >= iou_thresh {
            positive[i] = true;
            labels[i] = boxes[j].class_id + 1;
            offsets[i] = encode(&gts[j], &anchors[i]);
        }
    }
    AnchorTargets { labels, offsets, positive }
}

/// Raw head outputs for one image.
#[derive(Clone, Debug)]
pub struct HeadRaw<T = f32> {
    pub layout: HeadLayout,
    pub cls: Tensor<T>,
    pub loc: Tensor<T>,
    /// Cells the head was evaluated at; `None` means every cell.
    pub valid: Option<SaliencyMask>,
}

impl<T: Scalar> HeadRaw<T> {
    pub fn logits(&self, y: usize, x: usize, a: usize) -> Vec<T> {
        (0..self.layout.classes)
            .map(|k| self.cls.get(0, a * self.layout.classes + k, y, x))
            .collect()
    }

    pub fn offsets(&self, y: usize, x: usize, a: usize) -> [T; 4] {
        std::array::from_fn(|j| self.loc.get(0, a * 4 + j, y, x))
    }

    pub fn is_valid(&self, y: usize, x: usize) -> bool {
        self.valid.as_ref().is_none_or(|m| m.get(y, x))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DetectionOutput {
    /// Object class, background excluded.
    pub class_id: usize,
    pub score: f32,
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
}

impl DetectionOutput {
    pub fn rect(&self) -> Rect {
        Rect {
            x1: self.x1,
            y1: self.y1,
            x2: self.x2,
            y2: self.y2,
        }
    }
}

pub(crate) fn softmax<T: Scalar>(logits: &[T]) -> Vec<f32> {
    let v: Vec<f32> = logits.iter().map(|l| l.to_f32().unwrap_or(f32::NAN)).collect();
    let m = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let e: Vec<f32> = v.iter().map(|&x| (x - m).exp()).collect();
    let s: f32 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Decoding options.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeParams {
    pub score_thresh: f32,
    pub iou_thresh: f32,
    pub max_detections: usize,
}

impl Default for DecodeParams {
    fn default() -> Self {
        Self {
            score_thresh: 0.5,
            iou_thresh: 0.45,
            max_detections: 100,
        }
    }
}

/// Decodes every valid anchor whose class scores exceed `score_thresh`, runs
/// greedy per-class NMS and returns detections sorted by descending score.
pub fn decode_and_nms<T: Scalar>(
    heads: &[HeadRaw<T>],
    anchors: &[Vec<Rect>],
    image: (usize, usize),
    params: &DecodeParams,
) -> Result<Vec<DetectionOutput>> {
    if heads.len() != anchors.len() {
        return Err(Error::shape(format!(
            "{} heads but {} anchor sets",
            heads.len(),
            anchors.len()
        )));
    }
    let (ih, iw) = (image.0 as f32, image.1 as f32);
    let mut cands: Vec<DetectionOutput> = Vec::new();
    for (head, anchors) in heads.iter().zip(anchors) {
        let l = head.layout;
        if anchors.len() != l.num_anchors()
            || head.cls.dims() != [1, l.anchors * l.classes, l.h, l.w]
            || head.loc.dims() != [1, l.anchors * 4, l.h, l.w]
        {
            return Err(Error::shape("head outputs do not match anchor layout"));
        }
        for (i, anchor) in anchors.iter().enumerate() {
            let (y, x, a) = l.anchor_cell(i);
            if !head.is_valid(y, x) {
                continue;
            }
            let probs = softmax(&head.logits(y, x, a));
            let off = head.offsets(y, x, a).map(|v| v.to_f32().unwrap_or(0.0));
            let rect = decode(off, anchor).clamp(iw, ih);
            for (k, &p) in probs.iter().enumerate().skip(1) {
                if p > params.score_thresh {
                    cands.push(DetectionOutput {
                        class_id: k - 1,
                        score: p,
                        x1: rect.x1,
                        y1: rect.y1,
                        x2: rect.x2,
                        y2: rect.y2,
                    });
                }
            }
        }
    }
    // Stable sort keeps enumeration order among equal scores.
    cands.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok(nms(cands, params.iou_thresh, params.max_detections))
}

/// Greedy per-class suppression over score-sorted detections.
pub fn nms(sorted: Vec<DetectionOutput>, iou_thresh: f32, max: usize) -> Vec<DetectionOutput> {
    let mut keep: Vec<DetectionOutput> = Vec::new();
    for d in sorted {
        if keep.len() == max {
            break;
        }
        let r = d.rect();
        if keep
            .iter()
            .any(|k| k.class_id == d.class_id && k.rect().iou(&r) > iou_thresh)
        {
            continue;
        }
        keep.push(d);
    }
    keep
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(class_id: usize, score: f32, x1: f32, y1: f32, x2: f32, y2: f32) -> DetectionOutput {
        DetectionOutput { class_id, score, x1, y1, x2, y2 }
    }

    #[test]
    fn iou_basics() {
        let a = Rect { x1: 0.0, y1: 0.0, x2: 2.0, y2: 2.0 };
        let b = Rect { x1: 1.0, y1: 0.0, x2: 3.0, y2: 2.0 };
        assert_eq!(a.iou(&a), 1.0);
        assert!((a.iou(&b) - 2.0 / 6.0).abs() < 1e-6);
        let c = Rect { x1: 5.0, y1: 5.0, x2: 6.0, y2: 6.0 };
        assert_eq!(a.iou(&c), 0.0);
    }

    #[test]
    fn encode_decode_round_trip() {
        let anchor = Rect::from_center(10.0, 12.0, 8.0, 16.0);
        let gt = Rect { x1: 3.0, y1: 5.0, x2: 17.0, y2: 21.0 };
        let back = decode(encode(&gt, &anchor), &anchor);
        for (a, b) in [(back.x1, gt.x1), (back.y1, gt.y1), (back.x2, gt.x2), (back.y2, gt.y2)] {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn nms_identical_boxes() {
        let out = nms(vec![det(0, 0.9, 0.0, 0.0, 4.0, 4.0), det(0, 0.8, 0.0, 0.0, 4.0, 4.0)], 0.5, 10);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].score, 0.9);
    }

    #[test]
    fn nms_disjoint_and_cross_class() {
        let out = nms(vec![det(0, 0.9, 0.0, 0.0, 4.0, 4.0), det(0, 0.8, 10.0, 10.0, 14.0, 14.0)], 0.01, 10);
        assert_eq!(out.len(), 2);
        let out = nms(vec![det(0, 0.9, 0.0, 0.0, 4.0, 4.0), det(1, 0.8, 0.0, 0.0, 4.0, 4.0)], 0.5, 10);
        assert_eq!(out.len(), 2);
    }

    fn head(layout: HeadLayout, fg_logit: f32) -> HeadRaw {
        let cls = Tensor::from_fn([1, layout.anchors * layout.classes, layout.h, layout.w], |_, c, _, _| {
            if c % layout.classes == 1 { fg_logit } else { 0.0 }
        });
        HeadRaw {
            layout,
            cls,
            loc: Tensor::zeros([1, layout.anchors * 4, layout.h, layout.w]),
            valid: None,
        }
    }

    #[test]
    fn decode_nothing_above_threshold() {
        let layout = HeadLayout { h: 2, w: 2, anchors: 1, classes: 3 };
        let spec = AnchorSpec { sizes: vec![4.0], ratios: vec![1.0] };
        let anchors = vec![generate_anchors(&layout, (8, 8), &spec)];
        let out = decode_and_nms(&[head(layout, 0.0)], &anchors, (8, 8), &DecodeParams::default()).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn decode_respects_valid_cells() {
        let layout = HeadLayout { h: 2, w: 2, anchors: 1, classes: 3 };
        let spec = AnchorSpec { sizes: vec![4.0], ratios: vec![1.0] };
        let anchors = vec![generate_anchors(&layout, (8, 8), &spec)];
        let mut h = head(layout, 10.0);
        let out = decode_and_nms(std::slice::from_ref(&h), &anchors, (8, 8), &DecodeParams::default()).unwrap();
        assert_eq!(out.len(), 4);
        h.valid = Some(SaliencyMask::from_grid(2, 2, &[0, 1, 0, 0]).unwrap());
        let out = decode_and_nms(&[h], &anchors, (8, 8), &DecodeParams::default()).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].rect().center(), (6.0, 2.0));
    }

    #[test]
    fn matching_forces_best_anchor() {
        let layout = HeadLayout { h: 2, w: 2, anchors: 1, classes: 2 };
        let spec = AnchorSpec { sizes: vec![4.0], ratios: vec![1.0] };
        let anchors = generate_anchors(&layout, (8, 8), &spec);
        // small box overlapping the top-left anchor with IoU < 0.5
        let b = BoundingBox::new(0.0, 0.0, 1.0, 1.0, 0).unwrap();
        let t = match_anchors(&anchors, &[b], 0.5);
        assert_eq!(t.positive, vec![true, false, false, false]);
        assert_eq!(t.labels[0], 1);
        let t = match_anchors(&anchors, &[], 0.5);
        assert!(t.positive.iter().all(|p| !p));
    }
}
