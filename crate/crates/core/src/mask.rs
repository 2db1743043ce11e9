//! Saliency masks: binarization, ground truth from boxes, the multi-resolution
//! pyramid and PGM import/export.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::conv::sigmoid;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Default binarization threshold for probability maps.
pub const DEFAULT_PSI: f64 = 0.5;

/// Binary grid over one feature-map resolution: 1 = compute, 0 = skip.
/// Stored bit-packed, one run of `u64` words per row.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct SaliencyMask {
    h: usize,
    w: usize,
    words_per_row: usize,
    bits: Vec<u64>,
}

impl std::fmt::Debug for SaliencyMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "SaliencyMask {}x{} ({} ones)", self.h, self.w, self.count_ones())?;
        for y in 0..self.h {
            let line: String = (0..self.w)
                .map(|x| if self.get(y, x) { '#' } else { '.' })
                .collect();
            writeln!(f, "  {line}")?;
        }
        Ok(())
    }
}

impl SaliencyMask {
    pub fn zeros(h: usize, w: usize) -> Self {
        let words_per_row = w.div_ceil(64);
        Self {
            h,
            w,
            words_per_row,
            bits: vec![0; words_per_row * h],
        }
    }

    pub fn ones(h: usize, w: usize) -> Self {
        Self::from_fn(h, w, |_, _| true)
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut m = Self::zeros(h, w);
        for y in 0..h {
            for x in 0..w {
                if f(y, x) {
                    m.set(y, x, true);
                }
            }
        }
        m
    }

    /// Builds a mask from a row-major grid of 0/1 values.
    pub fn from_grid(h: usize, w: usize, values: &[u8]) -> Result<Self> {
        if values.len() != h * w {
            return Err(Error::shape(format!(
                "mask {h}x{w} needs {} entries, got {}",
                h * w,
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|&&v| v > 1) {
            return Err(Error::invalid(format!("mask entries must be 0 or 1, got {bad}")));
        }
        Ok(Self::from_fn(h, w, |y, x| values[y * w + x] == 1))
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        debug_assert!(y < self.h && x < self.w);
        (self.bits[y * self.words_per_row + x / 64] >> (x % 64)) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        let word = &mut self.bits[y * self.words_per_row + x / 64];
        if on {
            *word |= 1 << (x % 64);
        } else {
            *word &= !(1 << (x % 64));
        }
    }

    /// Number of foreground cells.
    pub fn count_ones(&self) -> usize {
        self.bits.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Row-major indices `y*w + x` of foreground cells, ascending.
    pub fn active_indices(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.count_ones());
        for y in 0..self.h {
            for x in 0..self.w {
                if self.get(y, x) {
                    out.push(y * self.w + x);
                }
            }
        }
        out
    }

    /// Fraction of foreground cells; 0 for an empty grid.
    pub fn density(&self) -> f64 {
        let total = self.h * self.w;
        if total == 0 {
            0.0
        } else {
            self.count_ones() as f64 / total as f64
        }
    }

    pub fn to_grid(&self) -> Vec<u8> {
        let mut v = Vec::with_capacity(self.h * self.w);
        for y in 0..self.h {
            for x in 0..self.w {
                v.push(self.get(y, x) as u8);
            }
        }
        v
    }

    /// The mask as a `1 x 1 x h x w` tensor of 0/1 values.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn([1, 1, self.h, self.w], |_, _, y, x| {
            if self.get(y, x) {
                T::one()
            } else {
                T::zero()
            }
        })
    }

    /// True if every foreground cell of `self` is also foreground in `other`.
    pub fn is_subset_of(&self, other: &SaliencyMask) -> bool {
        self.dims() == other.dims()
            && self
                .bits
                .iter()
                .zip(&other.bits)
                .all(|(a, b)| a & !b == 0)
    }

    /// Writes binary PGM (P5): 8-bit, 0 = background, 255 = foreground.
    pub fn write_pgm<W: Write>(&self, mut out: W) -> Result<()> {
        write!(out, "P5\n{} {}\n255\n", self.w, self.h)?;
        let bytes: Vec<u8> = self.to_grid().into_iter().map(|b| b * 255).collect();
        out.write_all(&bytes)?;
        Ok(())
    }

    /// Reads binary PGM (P5) with maxval 255 whose pixels are all 0 or 255.
    pub fn read_pgm<R: Read>(mut input: R) -> Result<Self> {
        let mut buf = Vec::new();
        input.read_to_end(&mut buf)?;
        let (header, body) = parse_pnm_header(&buf, b"P5", "pgm")?;
        let [w, h, maxval] = header;
        if maxval != 255 {
            return Err(Error::schema("pgm.maxval", format!("expected 255, got {maxval}")));
        }
        if body.len() != w * h {
            return Err(Error::schema(
                "pgm.data",
                format!("expected {} pixels, got {}", w * h, body.len()),
            ));
        }
        let mut grid = Vec::with_capacity(w * h);
        for &b in body {
            match b {
                0 => grid.push(0),
                255 => grid.push(1),
                other => {
                    return Err(Error::schema(
                        "pgm.data",
                        format!("mask pixels must be 0 or 255, found {other}"),
                    ))
                }
            }
        }
        Self::from_grid(h, w, &grid)
    }
}

/// Parses a `P5`/`P6` style header: magic, width, height, maxval, then a single
/// whitespace byte before the raster. `#` comments are skipped.
pub(crate) fn parse_pnm_header<'a>(
    buf: &'a [u8],
    magic: &[u8],
    what: &str,
) -> Result<([usize; 3], &'a [u8])> {
    if !buf.starts_with(magic) {
        return Err(Error::schema(
            format!("{what}.magic"),
            format!("expected {}", String::from_utf8_lossy(magic)),
        ));
    }
    let mut pos = magic.len();
    let mut fields = [0usize; 3];
    for (i, name) in ["width", "height", "maxval"].iter().enumerate() {
        loop {
            while pos < buf.len() && buf[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < buf.len() && buf[pos] == b'#' {
                while pos < buf.len() && buf[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < buf.len() && buf[pos].is_ascii_digit() {
            pos += 1;
        }
        fields[i] = std::str::from_utf8(&buf[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::schema(format!("{what}.{name}"), "missing or not a number"))?;
    }
    if pos >= buf.len() || !buf[pos].is_ascii_whitespace() {
        return Err(Error::schema(format!("{what}.header"), "truncated header"));
    }
    Ok((fields, &buf[pos + 1..]))
}

/// Per-location foreground probabilities (post-sigmoid activations).
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap<T = f32> {
    h: usize,
    w: usize,
    values: Vec<T>,
}

impl<T: Scalar> ProbMap<T> {
    pub fn new(h: usize, w: usize, values: Vec<T>) -> Result<Self> {
        if values.len() != h * w {
            return Err(Error::shape(format!(
                "prob map {h}x{w} needs {} values, got {}",
                h * w,
                values.len()
            )));
        }
        if let Some(v) = values
            .iter()
            .find(|v| !(**v >= T::zero() && **v <= T::one()))
        {
            return Err(Error::invalid(format!("probability {v} outside [0, 1]")));
        }
        Ok(Self { h, w, values })
    }

    pub fn filled(h: usize, w: usize, v: T) -> Result<Self> {
        Self::new(h, w, vec![v; h * w])
    }

    /// Views the single channel of a `1 x 1 x h x w` tensor as a probability map.
    pub fn from_tensor(t: &Tensor<T>) -> Result<Self> {
        if t.batch() != 1 || t.channels() != 1 {
            return Err(Error::shape(format!(
                "prob map needs a 1x1xHxW tensor, got {:?}",
                t.dims()
            )));
        }
        Self::new(t.height(), t.width(), t.data().to_vec())
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::new([1, 1, self.h, self.w], self.values.clone()).expect("dims match")
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> T {
        self.values[y * self.w + x]
    }
}

/// Foreground iff `p >= psi` (inclusive boundary).
pub fn binarize<T: Scalar>(p: &ProbMap<T>, psi: f64) -> SaliencyMask {
    let psi = T::lit(psi);
    SaliencyMask::from_fn(p.h, p.w, |y, x| p.get(y, x) >= psi)
}

/// Axis-aligned box in image pixels, both corners inclusive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
    pub class_id: usize,
}

impl BoundingBox {
    pub fn new(x1: f32, y1: f32, x2: f32, y2: f32, class_id: usize) -> Result<Self> {
        if !(x1 <= x2 && y1 <= y2) {
            return Err(Error::invalid(format!(
                "box corners out of order: ({x1}, {y1}) ({x2}, {y2})"
            )));
        }
        Ok(Self {
            x1,
            y1,
            x2,
            y2,
            class_id,
        })
    }

    /// Inclusive pixel span on each axis after clamping to a `h x w` image, or
    /// `None` if nothing of the box remains.
    pub fn pixel_span(&self, h: usize, w: usize) -> Option<((usize, usize), (usize, usize))> {
        let clamp = |lo: f32, hi: f32, len: usize| -> Option<(usize, usize)> {
            if len == 0 || hi < 0.0 || lo > (len - 1) as f32 {
                return None;
            }
            let a = lo.max(0.0).floor() as usize;
            let b = (hi.min((len - 1) as f32).floor() as usize).min(len - 1);
            (a <= b).then_some((a, b))
        };
        Some((clamp(self.x1, self.x2, w)?, clamp(self.y1, self.y2, h)?))
    }

    pub fn width(&self) -> f32 {
        self.x2 - self.x1 + 1.0
    }

    pub fn height(&self) -> f32 {
        self.y2 - self.y1 + 1.0
    }
}

/// Ground-truth mask at feature stride `stride` for an `image_size` image:
/// a cell is foreground iff its `stride x stride` footprint intersects a box,
/// then the foreground is dilated by one cell in all eight directions.
pub fn gt_mask_from_boxes(
    boxes: &[BoundingBox],
    image_size: (usize, usize),
    stride: usize,
) -> Result<SaliencyMask> {
    if stride == 0 {
        return Err(Error::invalid("feature stride must be positive"));
    }
    let (ih, iw) = image_size;
    let (mh, mw) = (ih.div_ceil(stride), iw.div_ceil(stride));
    let mut core = SaliencyMask::zeros(mh, mw);
    for b in boxes {
        let Some(((x1, x2), (y1, y2))) = b.pixel_span(ih, iw) else {
            continue;
        };
        for cy in y1 / stride..=y2 / stride {
            for cx in x1 / stride..=x2 / stride {
                core.set(cy, cx, true);
            }
        }
    }
    Ok(dilate8(&core))
}

/// One-cell 8-connected dilation, clamped at the borders.
pub fn dilate8(m: &SaliencyMask) -> SaliencyMask {
    let (h, w) = m.dims();
    SaliencyMask::from_fn(h, w, |y, x| {
        let ys = y.saturating_sub(1)..=(y + 1).min(h - 1);
        ys.into_iter().any(|yy| {
            (x.saturating_sub(1)..=(x + 1).min(w - 1)).any(|xx| m.get(yy, xx))
        })
    })
}

/// Initial weight and bias of a learned downsampling kernel.
pub const LEARNED_INIT_WEIGHT: f64 = 8.0;
pub const LEARNED_INIT_BIAS: f64 = -4.0;

/// Single-channel `f x f` kernel used to derive coarser masks by stride-`f`
/// convolution.
#[derive(Clone, Debug, PartialEq)]
pub enum DownsampleKernel<T = f32> {
    /// Fixed window average `1/f^2`; the response is the average itself.
    Uniform,
    /// Learned weights and bias whose response is `sigmoid(<w, window> + b)`.
    Learned { weights: Vec<T>, bias: T },
}

impl<T: Scalar> DownsampleKernel<T> {
    /// Learned kernel initialised to agree with [`downsample_maxpool`] at the
    /// 0.5 threshold: `sigmoid(8*sum - 4)`, so any foreground cell keeps its
    /// window.
    pub fn learned_init(f: usize) -> Self {
        DownsampleKernel::Learned {
            weights: vec![T::lit(LEARNED_INIT_WEIGHT); f * f],
            bias: T::lit(LEARNED_INIT_BIAS),
        }
    }

    /// Response of one window, row-major `f*f` values.
    pub fn response(&self, window: &[T]) -> T {
        match self {
            DownsampleKernel::Uniform => {
                window.iter().copied().sum::<T>() / T::lit(window.len() as f64)
            }
            DownsampleKernel::Learned { weights, bias } => {
                let s: T = window.iter().zip(weights).map(|(&a, &b)| a * b).sum();
                sigmoid(s + *bias)
            }
        }
    }
}

fn check_factor(dims: (usize, usize), f: usize) -> Result<()> {
    if f < 2 {
        return Err(Error::invalid(format!("downsample factor must be >= 2, got {f}")));
    }
    if dims.0 < f || dims.1 < f {
        return Err(Error::shape(format!(
            "mask {}x{} smaller than downsample factor {f}",
            dims.0, dims.1
        )));
    }
    Ok(())
}

/// Stride-`f` convolution of a real-valued map with an `f x f` kernel.
/// Output is `floor(h/f) x floor(w/f)`.
pub fn downsample_prob<T: Scalar>(
    p: &ProbMap<T>,
    f: usize,
    kernel: &DownsampleKernel<T>,
) -> Result<ProbMap<T>> {
    check_factor(p.dims(), f)?;
    if let DownsampleKernel::Learned { weights, .. } = kernel {
        if weights.len() != f * f {
            return Err(Error::shape(format!(
                "downsample kernel has {} weights, factor {f} needs {}",
                weights.len(),
                f * f
            )));
        }
    }
    let (oh, ow) = (p.h / f, p.w / f);
    let mut window = Vec::with_capacity(f * f);
    let mut out = Vec::with_capacity(oh * ow);
    for oy in 0..oh {
        for ox in 0..ow {
            window.clear();
            for i in 0..f {
                for j in 0..f {
                    window.push(p.get(oy * f + i, ox * f + j));
                }
            }
            let v = kernel.response(&window);
            out.push(v.max(T::zero()).min(T::one()));
        }
    }
    ProbMap::new(oh, ow, out)
}

/// Stride-convolution downsampling of a binary mask followed by binarization
/// at 0.5.
pub fn downsample_stride_conv<T: Scalar>(
    m: &SaliencyMask,
    f: usize,
    kernel: &DownsampleKernel<T>,
) -> Result<SaliencyMask> {
    let real = ProbMap::from_tensor(&m.to_tensor::<T>())?;
    Ok(binarize(&downsample_prob(&real, f, kernel)?, DEFAULT_PSI))
}

/// Logical OR over each `f x f` window.
pub fn downsample_maxpool(m: &SaliencyMask, f: usize) -> Result<SaliencyMask> {
    check_factor(m.dims(), f)?;
    Ok(SaliencyMask::from_fn(m.h / f, m.w / f, |y, x| {
        (0..f).any(|i| (0..f).any(|j| m.get(y * f + i, x * f + j)))
    }))
}

/// Which downsampler derives the coarser pyramid levels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Downsampler {
    /// Stride conv with learned `f x f` weights.
    #[default]
    StrideConvLearned,
    /// Stride conv with the fixed uniform kernel.
    StrideConvFixed,
    /// Baseline OR-pooling.
    Maxpool,
}

/// Masks for every guided resolution, finest first.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPyramid {
    pub levels: Vec<SaliencyMask>,
}

impl MaskPyramid {
    pub fn level(&self, i: usize) -> &SaliencyMask {
        &self.levels[i]
    }

    pub fn all_ones(dims: &[(usize, usize)]) -> Self {
        Self {
            levels: dims.iter().map(|&(h, w)| SaliencyMask::ones(h, w)).collect(),
        }
    }

    pub fn total_ones(&self) -> usize {
        self.levels.iter().map(SaliencyMask::count_ones).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pm(vals: &[f32]) -> ProbMap {
        ProbMap::new(1, vals.len(), vals.to_vec()).unwrap()
    }

    #[test]
    fn binarize_examples() {
        assert_eq!(binarize(&pm(&[0.9; 6]), 0.5), SaliencyMask::ones(1, 6));
        assert_eq!(binarize(&pm(&[0.5]), 0.5).to_grid(), vec![1]);
        assert_eq!(binarize(&pm(&[0.2, 0.5, 0.7]), 0.5).to_grid(), vec![0, 1, 1]);
    }

    #[test]
    fn prob_map_rejects_out_of_range() {
        assert!(ProbMap::new(1, 2, vec![0.5f32, 1.5]).is_err());
        assert!(ProbMap::new(1, 2, vec![0.5f32, f32::NAN]).is_err());
        assert!(ProbMap::new(2, 2, vec![0.5f32; 3]).is_err());
    }

    #[test]
    fn bit_packing_across_words() {
        let mut m = SaliencyMask::zeros(3, 130);
        m.set(2, 129, true);
        m.set(0, 63, true);
        m.set(0, 64, true);
        assert!(m.get(2, 129) && m.get(0, 63) && m.get(0, 64));
        assert!(!m.get(1, 129));
        assert_eq!(m.count_ones(), 3);
        assert_eq!(m.active_indices(), vec![63, 64, 2 * 130 + 129]);
        m.set(0, 64, false);
        assert_eq!(m.count_ones(), 2);
    }

    #[test]
    fn gt_mask_no_boxes() {
        let m = gt_mask_from_boxes(&[], (32, 48), 4).unwrap();
        assert_eq!(m.dims(), (8, 12));
        assert_eq!(m.count_ones(), 0);
    }

    #[test]
    fn gt_mask_single_box_expands_one_cell() {
        let b = BoundingBox::new(8.0, 8.0, 15.0, 15.0, 0).unwrap();
        let m = gt_mask_from_boxes(&[b], (32, 32), 4).unwrap();
        assert_eq!(m.count_ones(), 16);
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(m.get(y, x), (1..=4).contains(&y) && (1..=4).contains(&x));
            }
        }
    }

    #[test]
    fn gt_mask_whole_image_and_outside() {
        let b = BoundingBox::new(0.0, 0.0, 31.0, 31.0, 1).unwrap();
        assert_eq!(gt_mask_from_boxes(&[b], (32, 32), 4).unwrap(), SaliencyMask::ones(8, 8));
        let off = BoundingBox::new(40.0, 40.0, 50.0, 50.0, 1).unwrap();
        assert_eq!(gt_mask_from_boxes(&[off], (32, 32), 4).unwrap().count_ones(), 0);
        assert!(BoundingBox::new(3.0, 0.0, 1.0, 1.0, 0).is_err());
    }

    #[test]
    fn gt_mask_ceil_dims() {
        let b = BoundingBox::new(30.0, 0.0, 32.0, 0.0, 0).unwrap();
        let m = gt_mask_from_boxes(&[b], (33, 33), 4).unwrap();
        assert_eq!(m.dims(), (9, 9));
        assert!(m.get(0, 8) && m.get(1, 7) && !m.get(2, 8));
    }

    #[test]
    fn stride_conv_examples() {
        let k = DownsampleKernel::<f32>::Uniform;
        for f in [2, 4] {
            let out = downsample_stride_conv(&SaliencyMask::ones(8, 8), f, &k).unwrap();
            assert_eq!(out, SaliencyMask::ones(8 / f, 8 / f));
            let out = downsample_stride_conv(&SaliencyMask::zeros(8, 8), f, &k).unwrap();
            assert_eq!(out.count_ones(), 0);
        }
        let mut m = SaliencyMask::zeros(4, 4);
        m.set(0, 0, true);
        assert_eq!(downsample_stride_conv(&m, 2, &k).unwrap(), SaliencyMask::zeros(2, 2));
        assert!(downsample_stride_conv(&SaliencyMask::ones(3, 3), 4, &k).is_err());
    }

    #[test]
    fn learned_init_matches_maxpool() {
        for f in [2usize, 3] {
            let learned = DownsampleKernel::<f32>::learned_init(f);
            for code in 0u32..1 << (f * f) {
                let m = SaliencyMask::from_fn(f, f, |y, x| code >> (y * f + x) & 1 == 1);
                assert_eq!(
                    downsample_stride_conv(&m, f, &learned).unwrap(),
                    downsample_maxpool(&m, f).unwrap(),
                    "{m:?}"
                );
            }
        }
    }

    #[test]
    fn maxpool_examples() {
        for y in 0..4 {
            for x in 0..4 {
                let mut m = SaliencyMask::zeros(4, 4);
                m.set(y, x, true);
                let out = downsample_maxpool(&m, 2).unwrap();
                assert_eq!(out.count_ones(), 1);
                assert!(out.get(y / 2, x / 2));
            }
        }
        assert_eq!(downsample_maxpool(&SaliencyMask::zeros(4, 4), 2).unwrap().count_ones(), 0);
        assert_eq!(downsample_maxpool(&SaliencyMask::ones(4, 4), 2).unwrap(), SaliencyMask::ones(2, 2));
    }

    #[test]
    fn density_examples() {
        assert_eq!(SaliencyMask::ones(5, 3).density(), 1.0);
        assert_eq!(SaliencyMask::zeros(5, 3).density(), 0.0);
        let m = SaliencyMask::from_fn(8, 8, |y, x| y < 4 && x < 4);
        assert_eq!(m.count_ones(), 16);
        assert_eq!(m.density(), 0.25);
    }

    #[test]
    fn pgm_round_trip_and_errors() {
        let m = SaliencyMask::from_fn(5, 7, |y, x| (y + 2 * x) % 3 == 0);
        let mut buf = Vec::new();
        m.write_pgm(&mut buf).unwrap();
        assert!(buf.starts_with(b"P5\n7 5\n255\n"));
        assert_eq!(SaliencyMask::read_pgm(buf.as_slice()).unwrap(), m);

        let mut bad = b"P5\n# comment\n2 1\n255\n".to_vec();
        bad.extend_from_slice(&[0, 17]);
        assert!(SaliencyMask::read_pgm(bad.as_slice()).unwrap_err().is_schema());
        assert!(SaliencyMask::read_pgm(&b"P6\n1 1\n255\n\0"[..]).is_err());
        assert!(SaliencyMask::read_pgm(&b"P5\n2 2\n255\n\0"[..]).is_err());
    }
}
