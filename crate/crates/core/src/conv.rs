//! Reference convolution machinery: im2col lowering, the row-product GEMM shared
//! by the dense and masked paths, transposed convolution, pooling and the
//! elementwise layers, each with its backward pass.

use crate::error::{Error, Result};
use crate::tensor::{ConvParams, FeatureMatrix, PoolParams, Scalar, Tensor};

/// Lowers batch item 0 of `x` into a feature matrix. Entry
/// `(r, c*kh*kw + i*kw + j)` is the input under kernel cell `(i, j)` of channel
/// `c` at output location `r`; padded positions read as 0.
pub fn im2col<T: Scalar>(x: &Tensor<T>, p: &ConvParams) -> Result<FeatureMatrix<T>> {
    if x.batch() != 1 {
        return Err(Error::shape(format!(
            "im2col takes a single batch item, got batch {}",
            x.batch()
        )));
    }
    im2col_slice(x.item_slice(0), x.channels(), x.height(), x.width(), p)
}

pub(crate) fn im2col_slice<T: Scalar>(
    input: &[T],
    channels: usize,
    h: usize,
    w: usize,
    p: &ConvParams,
) -> Result<FeatureMatrix<T>> {
    let (ho, wo) = p.output_dims(h, w)?;
    let (kh, kw) = p.kernel;
    let cols = channels * kh * kw;
    let mut m = FeatureMatrix::zeros(ho * wo, cols, (ho, wo));
    for oy in 0..ho {
        for ox in 0..wo {
            let row = m.row_mut(oy * wo + ox);
            for c in 0..channels {
                let plane = &input[c * h * w..(c + 1) * h * w];
                for i in 0..kh {
                    let iy = (oy * p.stride.0 + i * p.dilation.0) as isize - p.padding.0 as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let line = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for j in 0..kw {
                        let ix =
                            (ox * p.stride.1 + j * p.dilation.1) as isize - p.padding.1 as isize;
                        if ix >= 0 && ix < w as isize {
                            row[(c * kh + i) * kw + j] = line[ix as usize];
                        }
                    }
                }
            }
        }
    }
    Ok(m)
}

/// Adjoint of [`im2col`]: adds every matrix entry back onto the input cell it
/// was read from. Produces a `1 x channels x h x w` tensor.
pub fn im2col_adjoint<T: Scalar>(
    m: &FeatureMatrix<T>,
    channels: usize,
    h: usize,
    w: usize,
    p: &ConvParams,
) -> Result<Tensor<T>> {
    let (ho, wo) = p.output_dims(h, w)?;
    let (kh, kw) = p.kernel;
    if m.cols() != channels * kh * kw || m.grid() != (ho, wo) {
        return Err(Error::shape(format!(
            "im2col adjoint: matrix {}x{} grid {:?} vs {channels} channels, {h}x{w} input",
            m.rows(),
            m.cols(),
            m.grid()
        )));
    }
    let mut out = Tensor::zeros([1, channels, h, w]);
    let data = out.data_mut();
    for r in 0..m.rows() {
        let (oy, ox) = m.location(r);
        let row = m.row(r);
        for c in 0..channels {
            for i in 0..kh {
                let iy = (oy * p.stride.0 + i * p.dilation.0) as isize - p.padding.0 as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for j in 0..kw {
                    let ix = (ox * p.stride.1 + j * p.dilation.1) as isize - p.padding.1 as isize;
                    if ix >= 0 && ix < w as isize {
                        data[(c * h + iy as usize) * w + ix as usize] += row[(c * kh + i) * kw + j];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Reshapes a post-GEMM matrix (one row per location, one column per output
/// channel) into a `1 x out_channels x H_out x W_out` tensor.
pub fn col2im<T: Scalar>(m: &FeatureMatrix<T>, out_channels: usize) -> Result<Tensor<T>> {
    let (ho, wo) = m.grid();
    if m.cols() != out_channels || m.rows() != ho * wo {
        return Err(Error::shape(format!(
            "col2im: matrix {}x{} on grid {:?} vs {out_channels} channels",
            m.rows(),
            m.cols(),
            m.grid()
        )));
    }
    Ok(Tensor::from_fn([1, out_channels, ho, wo], |_, c, y, x| {
        m.get(y * wo + x, c)
    }))
}

/// Dot product with eight fixed accumulation lanes. The order is a function of
/// the length only, so every caller sees identical rounding.
#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (xa, xb) in (&mut ca).zip(&mut cb) {
        for l in 0..8 {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        s += x * y;
    }
    s
}

/// One row-product: `out[co] = <row, weights[co]> + bias[co]`.
#[inline]
pub(crate) fn row_product<T: Scalar>(row: &[T], weights: &[T], bias: &[T], out: &mut [T]) {
    let k = row.len();
    for (co, o) in out.iter_mut().enumerate() {
        *o = dot(row, &weights[co * k..(co + 1) * k]) + bias[co];
    }
}

#[inline]
pub(crate) fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub(crate) fn check_conv_shapes<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &[T],
) -> Result<()> {
    if weight.channels() != x.channels() {
        return Err(Error::shape(format!(
            "conv weight expects {} input channels, input has {}",
            weight.channels(),
            x.channels()
        )));
    }
    if bias.len() != weight.batch() {
        return Err(Error::shape(format!(
            "conv bias has {} entries for {} output channels",
            bias.len(),
            weight.batch()
        )));
    }
    Ok(())
}

pub(crate) fn check_kernel<T: Scalar>(p: &ConvParams, weight: &Tensor<T>) -> Result<()> {
    if p.kernel != (weight.height(), weight.width()) {
        return Err(Error::shape(format!(
            "kernel {:?} does not match weight {:?}",
            p.kernel,
            weight.dims()
        )));
    }
    Ok(())
}

/// Dense cross-correlation, lowered as im2col -> GEMM -> col2im.
/// `weight` is `(c_out, c_in, kh, kw)`, `bias` has `c_out` entries.
pub fn conv2d_dense<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &[T],
    p: &ConvParams,
) -> Result<Tensor<T>> {
    check_conv_shapes(x, weight, bias)?;
    check_kernel(p, weight)?;
    let cout = weight.batch();
    let (ho, wo) = p.output_dims(x.height(), x.width())?;
    let mut items = Vec::with_capacity(x.batch());
    for n in 0..x.batch() {
        let cols = im2col_slice(x.item_slice(n), x.channels(), x.height(), x.width(), p)?;
        let mut out = FeatureMatrix::zeros(ho * wo, cout, (ho, wo));
        for r in 0..cols.rows() {
            row_product(cols.row(r), weight.data(), bias, out.row_mut(r));
        }
        items.push(col2im(&out, cout)?);
    }
    Tensor::stack(&items)
}

/// Gradients of a convolution-like layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvGrads<T = f32> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
}

/// Backward pass restricted to `rows` (all rows when `None`). Output-gradient
/// entries outside the selected rows are never read.
pub(crate) fn conv_backward_rows<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    p: &ConvParams,
    rows: Option<&[usize]>,
) -> Result<ConvGrads<T>> {
    check_kernel(p, weight)?;
    let cout = weight.batch();
    let k = weight.len() / cout.max(1);
    let (ho, wo) = p.output_dims(x.height(), x.width())?;
    if grad_out.dims() != [x.batch(), cout, ho, wo] {
        return Err(Error::shape(format!(
            "conv backward: grad {:?}, expected {:?}",
            grad_out.dims(),
            [x.batch(), cout, ho, wo]
        )));
    }
    let mut gw = vec![T::zero(); weight.len()];
    let mut gb = vec![T::zero(); cout];
    let mut gx_items = Vec::with_capacity(x.batch());
    let all: Vec<usize>;
    let rows = match rows {
        Some(r) => r,
        None => {
            all = (0..ho * wo).collect();
            &all
        }
    };
    for n in 0..x.batch() {
        let cols = im2col_slice(x.item_slice(n), x.channels(), x.height(), x.width(), p)?;
        let g = grad_out.item_slice(n);
        let mut dcols = FeatureMatrix::zeros(ho * wo, k, (ho, wo));
        for &r in rows {
            let row = cols.row(r);
            let drow = dcols.row_mut(r);
            for co in 0..cout {
                let gv = g[co * ho * wo + r];
                if gv == T::zero() {
                    continue;
                }
                gb[co] += gv;
                axpy(gv, row, &mut gw[co * k..(co + 1) * k]);
                axpy(gv, &weight.data()[co * k..(co + 1) * k], drow);
            }
        }
        gx_items.push(im2col_adjoint(
            &dcols,
            x.channels(),
            x.height(),
            x.width(),
            p,
        )?);
    }
    Ok(ConvGrads {
        input: Tensor::stack(&gx_items)?,
        weight: Tensor::new(weight.dims(), gw)?,
        bias: gb,
    })
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    p: &ConvParams,
) -> Result<ConvGrads<T>> {
    conv_backward_rows(x, weight, grad_out, p, None)
}

/// Gradient of a convolution with respect to its input, for an input of
/// spatial size `in_hw`. `weight` is `(c_out, c_in, kh, kw)`; `grad_out` has
/// `c_out` channels.
pub fn conv2d_backward_data<T: Scalar>(
    grad_out: &Tensor<T>,
    weight: &Tensor<T>,
    in_hw: (usize, usize),
    p: &ConvParams,
) -> Result<Tensor<T>> {
    check_kernel(p, weight)?;
    let cout = weight.batch();
    let cin = weight.channels();
    let k = cin * p.kernel.0 * p.kernel.1;
    let (ho, wo) = p.output_dims(in_hw.0, in_hw.1)?;
    if grad_out.channels() != cout || (grad_out.height(), grad_out.width()) != (ho, wo) {
        return Err(Error::shape(format!(
            "backward-data: grad {:?} vs weight {:?} on {in_hw:?}",
            grad_out.dims(),
            weight.dims()
        )));
    }
    let mut items = Vec::with_capacity(grad_out.batch());
    for n in 0..grad_out.batch() {
        let g = grad_out.item_slice(n);
        let mut dcols = FeatureMatrix::zeros(ho * wo, k, (ho, wo));
        for r in 0..ho * wo {
            let drow = dcols.row_mut(r);
            for co in 0..cout {
                let gv = g[co * ho * wo + r];
                if gv != T::zero() {
                    axpy(gv, &weight.data()[co * k..(co + 1) * k], drow);
                }
            }
        }
        items.push(im2col_adjoint(&dcols, cin, in_hw.0, in_hw.1, p)?);
    }
    Tensor::stack(&items)
}

/// Transposed convolution. `weight` is `(c_in, c_out, kh, kw)`; the output has
/// spatial size `(h-1)*s - 2p + d*(k-1) + 1`. Forward equals the input-gradient
/// of [`conv2d_dense`] with the same params and weight memory.
pub fn deconv2d<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &[T],
    p: &ConvParams,
) -> Result<Tensor<T>> {
    if weight.batch() != x.channels() {
        return Err(Error::shape(format!(
            "deconv weight expects {} input channels, input has {}",
            weight.batch(),
            x.channels()
        )));
    }
    let cout = weight.channels();
    if bias.len() != cout {
        return Err(Error::shape(format!(
            "deconv bias has {} entries for {cout} output channels",
            bias.len()
        )));
    }
    let out_hw = p.transposed_output_dims(x.height(), x.width())?;
    let mut y = conv2d_backward_data(x, weight, out_hw, p)?;
    let plane = out_hw.0 * out_hw.1;
    for n in 0..y.batch() {
        for (co, &bv) in bias.iter().enumerate() {
            let start = (n * cout + co) * plane;
            for v in &mut y.data_mut()[start..start + plane] {
                *v += bv;
            }
        }
    }
    Ok(y)
}

pub fn deconv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    p: &ConvParams,
) -> Result<ConvGrads<T>> {
    // The deconv is the data-adjoint of a conv from its output back to `x`;
    // its gradients are that conv's forward and weight-gradient.
    let cin = weight.batch();
    let cout = weight.channels();
    let kk = p.kernel.0 * p.kernel.1;
    let zero_bias = vec![T::zero(); cin];
    let gx = conv2d_dense(grad_out, weight, &zero_bias, p)?;
    let (h, w) = (x.height(), x.width());
    let mut gw = vec![T::zero(); weight.len()];
    let mut gb = vec![T::zero(); cout];
    for n in 0..x.batch() {
        let cols = im2col_slice(
            grad_out.item_slice(n),
            cout,
            grad_out.height(),
            grad_out.width(),
            p,
        )?;
        let xs = x.item_slice(n);
        for r in 0..h * w {
            let row = cols.row(r);
            for ci in 0..cin {
                let xv = xs[ci * h * w + r];
                if xv != T::zero() {
                    axpy(xv, row, &mut gw[ci * cout * kk..(ci + 1) * cout * kk]);
                }
            }
        }
        let g = grad_out.item_slice(n);
        let plane = grad_out.height() * grad_out.width();
        for (co, b) in gb.iter_mut().enumerate() {
            *b += g[co * plane..(co + 1) * plane].iter().copied().sum::<T>();
        }
    }
    Ok(ConvGrads {
        input: gx,
        weight: Tensor::new(weight.dims(), gw)?,
        bias: gb,
    })
}

/// Per-channel convolution; `weight` is `(c, 1, kh, kw)`.
pub fn depthwise_conv2d<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &[T],
    p: &ConvParams,
) -> Result<Tensor<T>> {
    let c = x.channels();
    if weight.dims() != [c, 1, p.kernel.0, p.kernel.1] || bias.len() != c {
        return Err(Error::shape(format!(
            "depthwise weight {:?} / bias {} for {c} channels",
            weight.dims(),
            bias.len()
        )));
    }
    let (ho, wo) = p.output_dims(x.height(), x.width())?;
    let kk = p.kernel.0 * p.kernel.1;
    let mut out = Tensor::zeros([x.batch(), c, ho, wo]);
    let (h, w) = (x.height(), x.width());
    for n in 0..x.batch() {
        for ch in 0..c {
            let plane = &x.item_slice(n)[ch * h * w..(ch + 1) * h * w];
            let cols = im2col_slice(plane, 1, h, w, p)?;
            let wk = &weight.data()[ch * kk..(ch + 1) * kk];
            let base = (n * c + ch) * ho * wo;
            let od = out.data_mut();
            for r in 0..ho * wo {
                od[base + r] = dot(cols.row(r), wk) + bias[ch];
            }
        }
    }
    Ok(out)
}

pub fn depthwise_conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    p: &ConvParams,
) -> Result<ConvGrads<T>> {
    let c = x.channels();
    let (h, w) = (x.height(), x.width());
    let (ho, wo) = p.output_dims(h, w)?;
    if grad_out.dims() != [x.batch(), c, ho, wo] {
        return Err(Error::shape("depthwise backward: grad shape"));
    }
    let kk = p.kernel.0 * p.kernel.1;
    let mut gw = vec![T::zero(); weight.len()];
    let mut gb = vec![T::zero(); c];
    let mut gx = Tensor::zeros(x.dims());
    for n in 0..x.batch() {
        for ch in 0..c {
            let plane = &x.item_slice(n)[ch * h * w..(ch + 1) * h * w];
            let cols = im2col_slice(plane, 1, h, w, p)?;
            let wk = &weight.data()[ch * kk..(ch + 1) * kk];
            let g = &grad_out.item_slice(n)[ch * ho * wo..(ch + 1) * ho * wo];
            let mut dcols = FeatureMatrix::zeros(ho * wo, kk, (ho, wo));
            for (r, &gv) in g.iter().enumerate() {
                if gv == T::zero() {
                    continue;
                }
                gb[ch] += gv;
                axpy(gv, cols.row(r), &mut gw[ch * kk..(ch + 1) * kk]);
                axpy(gv, wk, dcols.row_mut(r));
            }
            let back = im2col_adjoint(&dcols, 1, h, w, p)?;
            let off = gx.offset(n, ch, 0, 0);
            gx.data_mut()[off..off + h * w].copy_from_slice(back.data());
        }
    }
    Ok(ConvGrads {
        input: gx,
        weight: Tensor::new(weight.dims(), gw)?,
        bias: gb,
    })
}

/// Visits every pooling window, passing the output offset and the in-bounds
/// input offsets it covers.
fn for_each_window(
    dims: [usize; 4],
    p: &PoolParams,
    mut f: impl FnMut(usize, &[usize]),
) -> Result<[usize; 4]> {
    let [n, c, h, w] = dims;
    let (ho, wo) = p.output_dims(h, w)?;
    let mut cells = Vec::with_capacity(p.window * p.window);
    for b in 0..n {
        for ch in 0..c {
            let plane = (b * c + ch) * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    cells.clear();
                    for i in 0..p.window {
                        let iy = (oy * p.stride + i) as isize - p.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for j in 0..p.window {
                            let ix = (ox * p.stride + j) as isize - p.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                cells.push(plane + iy as usize * w + ix as usize);
                            }
                        }
                    }
                    f(((b * c + ch) * ho + oy) * wo + ox, &cells);
                }
            }
        }
    }
    Ok([n, c, ho, wo])
}

/// Max pooling. Also returns, per output, the input offset that won (first
/// maximum in scan order), for routing gradients.
pub fn maxpool2d<T: Scalar>(x: &Tensor<T>, p: &PoolParams) -> Result<(Tensor<T>, Vec<usize>)> {
    let (ho, wo) = p.output_dims(x.height(), x.width())?;
    let total = x.batch() * x.channels() * ho * wo;
    let mut out = vec![T::zero(); total];
    let mut arg = vec![0usize; total];
    let data = x.data();
    let dims = for_each_window(x.dims(), p, |o, cells| {
        let mut best = cells[0];
        for &c in &cells[1..] {
            if data[c] > data[best] {
                best = c;
            }
        }
        out[o] = data[best];
        arg[o] = best;
    })?;
    Ok((Tensor::new(dims, out)?, arg))
}

pub fn maxpool2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    argmax: &[usize],
    input_dims: [usize; 4],
) -> Result<Tensor<T>> {
    if argmax.len() != grad_out.len() {
        return Err(Error::shape("maxpool backward: argmax length"));
    }
    let mut gx = Tensor::zeros(input_dims);
    let d = gx.data_mut();
    for (&a, &g) in argmax.iter().zip(grad_out.data()) {
        d[a] += g;
    }
    Ok(gx)
}

/// Average pooling over the in-bounds cells of each window.
pub fn avgpool2d<T: Scalar>(x: &Tensor<T>, p: &PoolParams) -> Result<Tensor<T>> {
    let (ho, wo) = p.output_dims(x.height(), x.width())?;
    let mut out = vec![T::zero(); x.batch() * x.channels() * ho * wo];
    let data = x.data();
    let dims = for_each_window(x.dims(), p, |o, cells| {
        let s: T = cells.iter().map(|&c| data[c]).sum();
        out[o] = s / T::lit(cells.len() as f64);
    })?;
    Tensor::new(dims, out)
}

pub fn avgpool2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    p: &PoolParams,
    input_dims: [usize; 4],
) -> Result<Tensor<T>> {
    let mut gx = Tensor::<T>::zeros(input_dims);
    let g = grad_out.data();
    let mut acc = vec![T::zero(); gx.len()];
    for_each_window(input_dims, p, |o, cells| {
        let share = g[o] / T::lit(cells.len() as f64);
        for &c in cells {
            acc[c] += share;
        }
    })?;
    gx.data_mut().copy_from_slice(&acc);
    Ok(gx)
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes gradient where the forward input was strictly positive.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    x.zip_map(grad_out, |v, g| if v > T::zero() { g } else { T::zero() })
}

pub fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

/// Inference-form batch normalization:
/// `scale * (x - mean) / sqrt(var + eps) + shift`, per channel.
pub fn batchnorm_infer<T: Scalar>(
    x: &Tensor<T>,
    scale: &[T],
    shift: &[T],
    mean: &[T],
    var: &[T],
    eps: T,
) -> Result<Tensor<T>> {
    let c = x.channels();
    if [scale.len(), shift.len(), mean.len(), var.len()] != [c; 4] {
        return Err(Error::shape(format!(
            "batchnorm statistics must have {c} entries"
        )));
    }
    let plane = x.height() * x.width();
    let mut out = x.clone();
    for n in 0..x.batch() {
        for ch in 0..c {
            let a = scale[ch] / (var[ch] + eps).sqrt();
            let b = shift[ch] - a * mean[ch];
            let start = (n * c + ch) * plane;
            for v in &mut out.data_mut()[start..start + plane] {
                *v = a * *v + b;
            }
        }
    }
    Ok(out)
}

pub fn batchnorm_infer_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    scale: &[T],
    var: &[T],
    eps: T,
) -> Result<Tensor<T>> {
    let c = grad_out.channels();
    let plane = grad_out.height() * grad_out.width();
    let mut g = grad_out.clone();
    for n in 0..g.batch() {
        for ch in 0..c {
            let a = scale[ch] / (var[ch] + eps).sqrt();
            let start = (n * c + ch) * plane;
            for v in &mut g.data_mut()[start..start + plane] {
                *v *= a;
            }
        }
    }
    Ok(g)
}

/// Source taps `(i0, i1, frac)` for resizing a length-`len_in` axis to `len_out`
/// with half-pixel centers.
fn bilinear_taps(len_in: usize, len_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = len_in as f64 / len_out as f64;
    (0..len_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len_in - 1);
            let i1 = (i0 + 1).min(len_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resize to `(oh, ow)` with half-pixel centers and edge clamping.
pub fn bilinear_resize<T: Scalar>(x: &Tensor<T>, oh: usize, ow: usize) -> Result<Tensor<T>> {
    if oh == 0 || ow == 0 || x.height() == 0 || x.width() == 0 {
        return Err(Error::invalid("bilinear resize to or from an empty grid"));
    }
    let ty = bilinear_taps(x.height(), oh);
    let tx = bilinear_taps(x.width(), ow);
    Ok(Tensor::from_fn(
        [x.batch(), x.channels(), oh, ow],
        |n, c, y, xo| {
            let (y0, y1, fy) = ty[y];
            let (x0, x1, fx) = tx[xo];
            let (fy, fx) = (T::lit(fy), T::lit(fx));
            let one = T::one();
            let top = x.get(n, c, y0, x0) * (one - fx) + x.get(n, c, y0, x1) * fx;
            let bot = x.get(n, c, y1, x0) * (one - fx) + x.get(n, c, y1, x1) * fx;
            top * (one - fy) + bot * fy
        },
    ))
}

pub fn bilinear_resize_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input_dims: [usize; 4],
) -> Result<Tensor<T>> {
    let (oh, ow) = (grad_out.height(), grad_out.width());
    let ty = bilinear_taps(input_dims[2], oh);
    let tx = bilinear_taps(input_dims[3], ow);
    let mut gx = Tensor::<T>::zeros(input_dims);
    let one = T::one();
    for n in 0..input_dims[0] {
        for c in 0..input_dims[1] {
            for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (xo, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let g = grad_out.get(n, c, y, xo);
                    let (fy, fx) = (T::lit(fy), T::lit(fx));
                    let taps = [
                        (y0, x0, (one - fy) * (one - fx)),
                        (y0, x1, (one - fy) * fx),
                        (y1, x0, fy * (one - fx)),
                        (y1, x1, fy * fx),
                    ];
                    for (iy, ix, wgt) in taps {
                        let o = gx.offset(n, c, iy, ix);
                        gx.data_mut()[o] += g * wgt;
                    }
                }
            }
        }
    }
    Ok(gx)
}

/// Keeps the top-left `h x w` window.
pub fn crop<T: Scalar>(x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    if h > x.height() || w > x.width() {
        return Err(Error::shape(format!(
            "crop {h}x{w} from {}x{}",
            x.height(),
            x.width()
        )));
    }
    Ok(Tensor::from_fn([x.batch(), x.channels(), h, w], |n, c, y, xx| {
        x.get(n, c, y, xx)
    }))
}

pub fn crop_backward<T: Scalar>(grad_out: &Tensor<T>, input_dims: [usize; 4]) -> Tensor<T> {
    let (h, w) = (grad_out.height(), grad_out.width());
    Tensor::from_fn(input_dims, |n, c, y, x| {
        if y < h && x < w {
            grad_out.get(n, c, y, x)
        } else {
            T::zero()
        }
    })
}

/// Channel-axis concatenation.
pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
    let [n, _, h, w] = first.dims();
    if parts
        .iter()
        .any(|t| t.batch() != n || t.height() != h || t.width() != w)
    {
        return Err(Error::shape("concat: batch or spatial dims differ"));
    }
    let c: usize = parts.iter().map(|t| t.channels()).sum();
    let mut data = Vec::with_capacity(n * c * h * w);
    for b in 0..n {
        for t in parts {
            data.extend_from_slice(t.item_slice(b));
        }
    }
    Tensor::new([n, c, h, w], data)
}

/// Splits a channel-concatenated gradient back into per-part gradients.
pub fn split_channels<T: Scalar>(g: &Tensor<T>, channels: &[usize]) -> Result<Vec<Tensor<T>>> {
    if channels.iter().sum::<usize>() != g.channels() {
        return Err(Error::shape("split: channel counts do not sum"));
    }
    let [n, _, h, w] = g.dims();
    let mut out = Vec::with_capacity(channels.len());
    let mut start = 0;
    for &c in channels {
        let from = start;
        out.push(Tensor::from_fn([n, c, h, w], |b, ch, y, x| {
            g.get(b, from + ch, y, x)
        }));
        start += c;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(h: usize, w: usize, vals: &[f32]) -> Tensor {
        Tensor::new([1, 1, h, w], vals.to_vec()).unwrap()
    }

    #[test]
    fn im2col_single_window() {
        let x = grid(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let m = im2col(&x, &ConvParams::square(2, 1, 0, 1)).unwrap();
        assert_eq!((m.rows(), m.cols()), (1, 4));
        assert_eq!(m.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn im2col_pointwise_is_flatten() {
        let vals: Vec<f32> = (0..9).map(|v| v as f32 * 0.5 - 1.0).collect();
        let x = grid(3, 3, &vals);
        let m = im2col(&x, &ConvParams::square(1, 1, 0, 1)).unwrap();
        assert_eq!((m.rows(), m.cols()), (9, 1));
        assert_eq!(m.data(), vals.as_slice());
    }

    #[test]
    fn im2col_padded_row_sums() {
        let x = Tensor::<f32>::filled([1, 1, 3, 3], 1.0);
        let m = im2col(&x, &ConvParams::square(3, 1, 1, 1)).unwrap();
        assert_eq!((m.rows(), m.cols()), (9, 9));
        let sums: Vec<f32> = (0..9).map(|r| m.row(r).iter().sum()).collect();
        assert_eq!(sums, vec![4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn im2col_rejects_empty_output() {
        let x = Tensor::<f32>::zeros([1, 1, 2, 2]);
        assert!(im2col(&x, &ConvParams::square(3, 1, 0, 1)).is_err());
        assert!(im2col(&Tensor::<f32>::zeros([2, 1, 4, 4]), &ConvParams::square(1, 1, 0, 1)).is_err());
    }

    #[test]
    fn col2im_examples() {
        let m = FeatureMatrix::new(4, 1, (2, 2), vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(col2im(&m, 1).unwrap(), grid(2, 2, &[1.0, 2.0, 3.0, 4.0]));

        let m = FeatureMatrix::new(1, 3, (1, 1), vec![5.0f32, 6.0, 7.0]).unwrap();
        let t = col2im(&m, 3).unwrap();
        assert_eq!(t.dims(), [1, 3, 1, 1]);
        assert_eq!(t.data(), &[5.0, 6.0, 7.0]);

        assert!(col2im(&m, 2).is_err());
    }

    #[test]
    fn identity_lowering_round_trip_is_exact() {
        let x = Tensor::<f32>::from_fn([1, 3, 4, 5], |_, c, y, x| {
            (c as f32 + 0.1) * (y as f32 - 1.7) / (x as f32 + 0.3)
        });
        let p = ConvParams::square(1, 1, 0, 1);
        let cols = im2col(&x, &p).unwrap();
        // identity GEMM with c_in*k*k == c_out
        let eye = Tensor::<f32>::from_fn([3, 3, 1, 1], |o, i, _, _| if o == i { 1.0 } else { 0.0 });
        let mut out = FeatureMatrix::zeros(cols.rows(), 3, cols.grid());
        for r in 0..cols.rows() {
            row_product(cols.row(r), eye.data(), &[0.0; 3], out.row_mut(r));
        }
        assert_eq!(col2im(&out, 3).unwrap(), x);
    }

    #[test]
    fn dense_conv_center_sum() {
        let x = grid(3, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        let w = Tensor::<f32>::filled([1, 1, 3, 3], 1.0);
        let y = conv2d_dense(&x, &w, &[0.0], &ConvParams::square(3, 1, 1, 1)).unwrap();
        assert_eq!(y.get(0, 0, 1, 1), 45.0);
        assert_eq!(y.get(0, 0, 0, 0), 1.0 + 2.0 + 4.0 + 5.0);
    }

    #[test]
    fn dense_conv_identity_kernel() {
        let x = Tensor::<f32>::from_fn([2, 1, 4, 4], |n, _, y, x| (n * 16 + y * 4 + x) as f32);
        let w = Tensor::<f32>::filled([1, 1, 1, 1], 1.0);
        let y = conv2d_dense(&x, &w, &[0.0], &ConvParams::square(1, 1, 0, 1)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn dense_conv_zero_input_gives_bias() {
        let x = Tensor::<f32>::zeros([1, 2, 5, 5]);
        let w = Tensor::<f32>::filled([3, 2, 3, 3], 0.7);
        let y = conv2d_dense(&x, &w, &[1.0, -2.0, 0.5], &ConvParams::same(3, 1)).unwrap();
        for c in 0..3 {
            for v in &y.item_slice(0)[c * 25..(c + 1) * 25] {
                assert_eq!(*v, [1.0, -2.0, 0.5][c]);
            }
        }
    }

    #[test]
    fn dense_conv_shape_errors() {
        let x = Tensor::<f32>::zeros([1, 2, 5, 5]);
        let w = Tensor::<f32>::zeros([3, 1, 3, 3]);
        assert!(conv2d_dense(&x, &w, &[0.0; 3], &ConvParams::same(3, 1)).is_err());
        let w = Tensor::<f32>::zeros([3, 2, 3, 3]);
        assert!(conv2d_dense(&x, &w, &[0.0; 2], &ConvParams::same(3, 1)).is_err());
    }

    #[test]
    fn deconv_single_pixel_broadcast() {
        let x = grid(1, 1, &[2.5]);
        let w = Tensor::<f32>::filled([1, 1, 2, 2], 1.0);
        let y = deconv2d(&x, &w, &[0.0], &ConvParams::square(2, 2, 0, 1)).unwrap();
        assert_eq!(y, Tensor::filled([1, 1, 2, 2], 2.5));
    }

    #[test]
    fn deconv_non_overlapping_windows() {
        let x = Tensor::<f32>::filled([1, 1, 2, 2], 1.0);
        let w = Tensor::<f32>::filled([1, 1, 2, 2], 1.0);
        let y = deconv2d(&x, &w, &[0.0], &ConvParams::square(2, 2, 0, 1)).unwrap();
        assert_eq!(y, Tensor::filled([1, 1, 4, 4], 1.0));
    }

    #[test]
    fn deconv_output_dims() {
        let x = Tensor::<f32>::zeros([1, 2, 5, 7]);
        let w = Tensor::<f32>::zeros([2, 3, 3, 3]);
        let y = deconv2d(&x, &w, &[0.0; 3], &ConvParams::square(3, 2, 1, 1)).unwrap();
        assert_eq!(y.dims(), [1, 3, 9, 13]);
    }

    /// Deconv is the adjoint of conv: <conv(x), y> == <x, deconv(y)>.
    #[test]
    fn deconv_is_conv_adjoint() {
        let p = ConvParams::square(3, 2, 1, 1);
        let x = Tensor::<f64>::from_fn([1, 2, 7, 7], |_, c, y, x| ((c * 31 + y * 7 + x) % 11) as f64 - 5.0);
        let w = Tensor::<f64>::from_fn([3, 2, 3, 3], |o, i, y, x| ((o * 17 + i * 5 + y * 3 + x) % 7) as f64 * 0.25 - 0.8);
        let cx = conv2d_dense(&x, &w, &[0.0; 3], &p).unwrap();
        let yv = Tensor::<f64>::from_fn(cx.dims(), |_, c, y, x| ((c * 13 + y * 5 + x * 3) % 9) as f64 - 4.0);
        let lhs: f64 = cx.data().iter().zip(yv.data()).map(|(a, b)| a * b).sum();
        let back = conv2d_backward_data(&yv, &w, (7, 7), &p).unwrap();
        let rhs: f64 = x.data().iter().zip(back.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
        // Transposed conv forward with the same weight memory is the backward-data map.
        let d = deconv2d(&yv, &w, &[0.0; 2], &p).unwrap();
        assert_eq!(d.dims()[2..], [7, 7]);
        assert_eq!(d, back);
    }

    #[test]
    fn relu_and_pool_and_bn() {
        let x = Tensor::<f32>::new([1, 1, 1, 3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);

        let x = grid(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let (y, arg) = maxpool2d(&x, &PoolParams::new(2, 2)).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(arg, vec![3]);
        assert!(maxpool2d(&x, &PoolParams::new(3, 3)).is_err());
        assert_eq!(avgpool2d(&x, &PoolParams::new(2, 2)).unwrap().data(), &[2.5]);

        let x = Tensor::<f32>::from_fn([1, 2, 2, 2], |_, c, y, x| (c * 4 + y * 2 + x) as f32 - 3.0);
        let y = batchnorm_infer(&x, &[1.0, 1.0], &[0.0, 0.0], &[0.0, 0.0], &[1.0, 1.0], 0.0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn bilinear_identity_and_constant() {
        let x = Tensor::<f32>::from_fn([1, 2, 3, 4], |_, c, y, x| (c + y * x) as f32);
        assert_eq!(bilinear_resize(&x, 3, 4).unwrap(), x);
        let k = Tensor::<f32>::filled([1, 1, 4, 4], 3.0);
        let up = bilinear_resize(&k, 8, 8).unwrap();
        assert!(up.data().iter().all(|&v| (v - 3.0).abs() < 1e-6));
    }

    #[test]
    fn concat_split_round_trip() {
        let a = Tensor::<f32>::from_fn([2, 1, 2, 2], |n, _, y, x| (n * 4 + y * 2 + x) as f32);
        let b = Tensor::<f32>::from_fn([2, 3, 2, 2], |n, c, y, x| -((n * 12 + c * 4 + y * 2 + x) as f32));
        let cat = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.dims(), [2, 4, 2, 2]);
        assert_eq!(cat.get(1, 2, 1, 0), b.get(1, 1, 1, 0));
        let parts = split_channels(&cat, &[1, 3]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }
}
