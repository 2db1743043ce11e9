//! Convolution restricted to mask-selected output locations.
//!
//! The im2col matrix is gathered down to the rows whose location is foreground
//! in the saliency mask, multiplied by the filter matrix, and scattered back
//! into a full-size matrix with zero-filled background rows before col2im.
//! Every selected row goes through the same row-product routine as the dense
//! path, so foreground outputs are bit-identical to [`conv2d_dense`].
//!
//! [`conv2d_dense`]: crate::conv::conv2d_dense

use crate::conv::{
    check_conv_shapes, check_kernel, col2im, conv_backward_rows, im2col_slice, row_product,
    ConvGrads,
};
use crate::error::{Error, Result};
use crate::mask::{ProbMap, SaliencyMask};
use crate::tensor::{ConvParams, FeatureMatrix, Scalar, Tensor};

/// Rows gathered by [`select`], with their original row indices.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectedRows<T = f32> {
    pub matrix: FeatureMatrix<T>,
    pub indices: Vec<usize>,
}

/// Arithmetic executed by one masked (or dense) GEMM.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct WorkCount {
    /// Selected rows multiplied against the full filter matrix.
    pub row_products: u64,
    /// Multiply-accumulates in those row-products.
    pub macs: u64,
}

impl WorkCount {
    pub fn merge(self, other: WorkCount) -> WorkCount {
        WorkCount {
            row_products: self.row_products + other.row_products,
            macs: self.macs + other.macs,
        }
    }
}

fn check_grid<T: Scalar>(m: &FeatureMatrix<T>, mask: &SaliencyMask) -> Result<()> {
    if mask.dims() != m.grid() {
        return Err(Error::shape(format!(
            "mask {:?} vs feature grid {:?}",
            mask.dims(),
            m.grid()
        )));
    }
    if m.rows() != m.grid().0 * m.grid().1 {
        return Err(Error::shape("select needs a full-grid feature matrix"));
    }
    Ok(())
}

/// Keeps the rows whose grid location is foreground, in ascending row order.
pub fn select<T: Scalar>(m: &FeatureMatrix<T>, mask: &SaliencyMask) -> Result<SelectedRows<T>> {
    check_grid(m, mask)?;
    let indices = mask.active_indices();
    let mut data = Vec::with_capacity(indices.len() * m.cols());
    for &r in &indices {
        data.extend_from_slice(m.row(r));
    }
    Ok(SelectedRows {
        matrix: FeatureMatrix::new(indices.len(), m.cols(), m.grid(), data)?,
        indices,
    })
}

/// Restores selected rows to their grid positions; every other row is 0.
pub fn scatter<T: Scalar>(m: &FeatureMatrix<T>, mask: &SaliencyMask) -> Result<FeatureMatrix<T>> {
    let ones = mask.count_ones();
    if m.rows() != ones {
        return Err(Error::shape(format!(
            "scatter: {} rows for a mask with {ones} foreground cells",
            m.rows()
        )));
    }
    let (h, w) = mask.dims();
    let mut out = FeatureMatrix::zeros(h * w, m.cols(), (h, w));
    for (i, r) in mask.active_indices().into_iter().enumerate() {
        out.row_mut(r).copy_from_slice(m.row(i));
    }
    Ok(out)
}

/// Masked convolution; returns the output and the arithmetic actually executed.
pub fn masked_conv2d_counted<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &[T],
    mask: &SaliencyMask,
    p: &ConvParams,
) -> Result<(Tensor<T>, WorkCount)> {
    check_conv_shapes(x, weight, bias)?;
    check_kernel(p, weight)?;
    let (ho, wo) = p.output_dims(x.height(), x.width())?;
    if mask.dims() != (ho, wo) {
        return Err(Error::shape(format!(
            "mask {:?} vs conv output {:?}",
            mask.dims(),
            (ho, wo)
        )));
    }
    let cout = weight.batch();
    let mut work = WorkCount::default();
    let mut items = Vec::with_capacity(x.batch());
    for n in 0..x.batch() {
        let cols = im2col_slice(x.item_slice(n), x.channels(), x.height(), x.width(), p)?;
        let gathered = select(&cols, mask)?;
        let rows = gathered.matrix.rows();
        let mut prod = FeatureMatrix::zeros(rows, cout, (ho, wo));
        for r in 0..rows {
            row_product(gathered.matrix.row(r), weight.data(), bias, prod.row_mut(r));
        }
        work = work.merge(WorkCount {
            row_products: rows as u64,
            macs: (rows * cols.cols() * cout) as u64,
        });
        items.push(col2im(&scatter(&prod, mask)?, cout)?);
    }
    Ok((Tensor::stack(&items)?, work))
}

/// Convolution evaluated only at foreground output locations; background
/// outputs are exactly 0 in every channel (bias included).
pub fn masked_conv2d<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &[T],
    mask: &SaliencyMask,
    p: &ConvParams,
) -> Result<Tensor<T>> {
    masked_conv2d_counted(x, weight, bias, mask, p).map(|(t, _)| t)
}

/// Backward pass of [`masked_conv2d`]. Only foreground rows contribute to any
/// gradient; `grad_out` at background locations is ignored.
pub fn masked_conv2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    x: &Tensor<T>,
    weight: &Tensor<T>,
    mask: &SaliencyMask,
    p: &ConvParams,
) -> Result<ConvGrads<T>> {
    let (ho, wo) = p.output_dims(x.height(), x.width())?;
    if mask.dims() != (ho, wo) {
        return Err(Error::shape(format!(
            "mask {:?} vs conv output {:?}",
            mask.dims(),
            (ho, wo)
        )));
    }
    let rows = mask.active_indices();
    conv_backward_rows(x, weight, grad_out, p, Some(&rows))
}

/// `out(n, c, y, x) = x(n, c, y, x) * p(y, x)`.
pub fn soft_mask_apply<T: Scalar>(x: &Tensor<T>, p: &ProbMap<T>) -> Result<Tensor<T>> {
    soft_mask_tensor(x, &p.to_tensor())
}

/// [`soft_mask_apply`] with the map given as a `1 x 1 x h x w` tensor.
pub(crate) fn soft_mask_tensor<T: Scalar>(x: &Tensor<T>, p: &Tensor<T>) -> Result<Tensor<T>> {
    if p.batch() != 1 || p.channels() != 1 || (p.height(), p.width()) != (x.height(), x.width()) {
        return Err(Error::shape(format!(
            "soft mask {:?} vs feature map {:?}",
            p.dims(),
            x.dims()
        )));
    }
    let plane = x.height() * x.width();
    let pm = p.data();
    let mut out = x.clone();
    for chunk in out.data_mut().chunks_mut(plane) {
        for (v, &m) in chunk.iter_mut().zip(pm) {
            *v *= m;
        }
    }
    Ok(out)
}

/// Gradients of [`soft_mask_apply`]: `(d/dx, d/dp)`, with `d/dp` summed over
/// batch and channels.
pub fn soft_mask_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    x: &Tensor<T>,
    p: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    x.expect_same_dims(grad_out, "soft mask backward")?;
    let gx = soft_mask_tensor(grad_out, p)?;
    let plane = x.height() * x.width();
    let mut gp = vec![T::zero(); plane];
    for (gchunk, xchunk) in grad_out.data().chunks(plane).zip(x.data().chunks(plane)) {
        for ((acc, &g), &xv) in gp.iter_mut().zip(gchunk).zip(xchunk) {
            *acc += g * xv;
        }
    }
    Ok((gx, Tensor::new(p.dims(), gp)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::{conv2d_backward, conv2d_dense, im2col};

    fn seq(dims: [usize; 4], scale: f32) -> Tensor {
        Tensor::from_fn(dims, |n, c, y, x| {
            (((n * 7 + c * 5 + y * 3 + x) % 13) as f32 - 6.0) * scale
        })
    }

    fn grid_matrix() -> FeatureMatrix {
        FeatureMatrix::new(4, 2, (2, 2), vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]).unwrap()
    }

    #[test]
    fn select_examples() {
        let m = grid_matrix();
        let all = select(&m, &SaliencyMask::ones(2, 2)).unwrap();
        assert_eq!(all.matrix, m);
        let none = select(&m, &SaliencyMask::zeros(2, 2)).unwrap();
        assert_eq!(none.matrix.rows(), 0);
        let diag = select(&m, &SaliencyMask::from_grid(2, 2, &[1, 0, 0, 1]).unwrap()).unwrap();
        assert_eq!(diag.indices, vec![0, 3]);
        assert_eq!(diag.matrix.data(), &[0.0, 1.0, 6.0, 7.0]);
        assert!(select(&m, &SaliencyMask::ones(1, 4)).is_err());
    }

    #[test]
    fn scatter_examples() {
        let m = grid_matrix();
        let full = SaliencyMask::ones(2, 2);
        assert_eq!(scatter(&select(&m, &full).unwrap().matrix, &full).unwrap(), m);

        let empty = SaliencyMask::zeros(2, 2);
        let z = scatter(&FeatureMatrix::<f32>::zeros(0, 3, (2, 2)), &empty).unwrap();
        assert_eq!(z.rows(), 4);
        assert!(z.data().iter().all(|&v| v == 0.0));

        let one = SaliencyMask::from_grid(2, 2, &[0, 0, 1, 0]).unwrap();
        let s = scatter(&FeatureMatrix::new(1, 1, (2, 2), vec![7.0f32]).unwrap(), &one).unwrap();
        assert_eq!(s.data(), &[0.0, 0.0, 7.0, 0.0]);
        assert!(scatter(&m, &one).is_err());
    }

    #[test]
    fn masked_full_mask_is_dense() {
        let x = seq([2, 3, 6, 5], 0.37);
        let w = seq([4, 3, 3, 3], 0.11);
        let b = [0.1f32, -0.2, 0.3, 0.0];
        let p = ConvParams::same(3, 1);
        let y = masked_conv2d(&x, &w, &b, &SaliencyMask::ones(6, 5), &p).unwrap();
        assert_eq!(y, conv2d_dense(&x, &w, &b, &p).unwrap());
    }

    #[test]
    fn masked_center_only() {
        let x = Tensor::new([1, 1, 3, 3], (1..=9).map(|v| v as f32).collect()).unwrap();
        let w = Tensor::<f32>::filled([1, 1, 3, 3], 1.0);
        let mask = SaliencyMask::from_grid(3, 3, &[0, 0, 0, 0, 1, 0, 0, 0, 0]).unwrap();
        let (y, work) =
            masked_conv2d_counted(&x, &w, &[0.0], &mask, &ConvParams::square(3, 1, 1, 1)).unwrap();
        let mut expect = vec![0.0; 9];
        expect[4] = 45.0;
        assert_eq!(y.data(), expect.as_slice());
        assert_eq!(work, WorkCount { row_products: 1, macs: 9 });
    }

    #[test]
    fn masked_empty_mask_is_zero() {
        let x = seq([1, 2, 4, 4], 1.0);
        let w = seq([3, 2, 3, 3], 1.0);
        let y = masked_conv2d(&x, &w, &[5.0; 3], &SaliencyMask::zeros(4, 4), &ConvParams::same(3, 1))
            .unwrap();
        assert_eq!(y, Tensor::zeros([1, 3, 4, 4]));
    }

    #[test]
    fn masked_dim_mismatch() {
        let x = seq([1, 1, 4, 4], 1.0);
        let w = seq([1, 1, 3, 3], 1.0);
        assert!(masked_conv2d(&x, &w, &[0.0], &SaliencyMask::ones(4, 4), &ConvParams::square(3, 1, 0, 1)).is_err());
    }

    #[test]
    fn masked_backward_full_and_empty() {
        let x = seq([1, 2, 5, 5], 0.3);
        let w = seq([3, 2, 3, 3], 0.2);
        let p = ConvParams::same(3, 1);
        let g = seq([1, 3, 5, 5], 0.5);
        let full = masked_conv2d_backward(&g, &x, &w, &SaliencyMask::ones(5, 5), &p).unwrap();
        assert_eq!(full, conv2d_backward(&x, &w, &g, &p).unwrap());

        let none = masked_conv2d_backward(&g, &x, &w, &SaliencyMask::zeros(5, 5), &p).unwrap();
        assert!(none.weight.data().iter().all(|&v| v == 0.0));
        assert!(none.bias.iter().all(|&v| v == 0.0));
        assert!(none.input.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn masked_backward_single_location_outer_product() {
        let x = seq([1, 2, 4, 4], 0.3);
        let w = seq([3, 2, 3, 3], 0.2);
        let p = ConvParams::same(3, 1);
        let g = seq([1, 3, 4, 4], 0.5);
        let mut mask = SaliencyMask::zeros(4, 4);
        mask.set(2, 1, true);
        let grads = masked_conv2d_backward(&g, &x, &w, &mask, &p).unwrap();
        let cols = im2col(&x, &p).unwrap();
        let r = 2 * 4 + 1;
        for co in 0..3 {
            let gv = g.get(0, co, 2, 1);
            for k in 0..cols.cols() {
                assert_eq!(grads.weight.data()[co * cols.cols() + k], gv * cols.get(r, k));
            }
            assert_eq!(grads.bias[co], gv);
        }
    }

    #[test]
    fn soft_mask_examples() {
        let x = seq([2, 3, 2, 2], 1.0);
        assert_eq!(soft_mask_apply(&x, &ProbMap::filled(2, 2, 1.0).unwrap()).unwrap(), x);
        assert_eq!(
            soft_mask_apply(&x, &ProbMap::filled(2, 2, 0.0).unwrap()).unwrap(),
            Tensor::zeros(x.dims())
        );
        let x = Tensor::<f32>::filled([1, 1, 1, 2], 4.0);
        let p = ProbMap::new(1, 2, vec![0.25, 1.0]).unwrap();
        assert_eq!(soft_mask_apply(&x, &p).unwrap().data(), &[1.0, 4.0]);
        assert!(soft_mask_apply(&x, &ProbMap::filled(2, 1, 0.5).unwrap()).is_err());
    }
}
