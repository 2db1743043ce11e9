//! Reverse-mode tape over [`Tensor`] values.
//!
//! Nodes are appended in evaluation order, so a reverse sweep over the node
//! list is a valid topological order for backpropagation. A backward closure is
//! only recorded when some parent requires a gradient; a tape fed nothing but
//! constants therefore runs a plain forward pass.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::conv::{
    self, avgpool2d_backward, batchnorm_infer_backward, bilinear_resize_backward,
    conv2d_backward, crop_backward, deconv2d_backward, depthwise_conv2d_backward,
    maxpool2d_backward, relu_backward, split_channels,
};
use crate::error::{Error, Result};
use crate::mask::SaliencyMask;
use crate::masked::{self, masked_conv2d_backward, soft_mask_backward, WorkCount};
use crate::tensor::{ConvParams, PoolParams, Scalar, Tensor};

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>) -> Result<Vec<Option<Tensor<T>>>>>;

struct Node<T> {
    value: Rc<Tensor<T>>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

pub struct Tape<T: Scalar = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    work: Cell<WorkCount>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients from one backward sweep, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            work: Cell::new(WorkCount::default()),
        }
    }

    fn push_node(&self, value: Tensor<T>, requires_grad: bool, parents: Vec<usize>, backward: Option<BackwardFn<T>>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            parents,
            backward,
        });
        Var(nodes.len() - 1)
    }

    /// A trainable input: gradients are accumulated for it.
    pub fn leaf(&self, value: Tensor<T>) -> Var {
        self.push_node(value, true, Vec::new(), None)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.push_node(value, false, Vec::new(), None)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Arithmetic executed by every conv GEMM recorded so far.
    pub fn work(&self) -> WorkCount {
        self.work.get()
    }

    fn add_work(&self, w: WorkCount) {
        self.work.set(self.work.get().merge(w));
    }

    /// Records an op. `make_backward` runs only if some parent needs a gradient.
    fn record<F>(&self, value: Tensor<T>, parents: &[Var], make_backward: F) -> Var
    where
        F: FnOnce() -> BackwardFn<T>,
    {
        let needs = parents.iter().any(|p| self.requires_grad(*p));
        let backward = needs.then(make_backward);
        self.push_node(value, needs, parents.iter().map(|p| p.0).collect(), backward)
    }

    /// Backpropagates from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if nodes[root.0].value.len() != 1 {
            return Err(Error::shape("backward root must be a scalar"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::filled(nodes[root.0].value.dims(), T::one()));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if let Some(back) = &node.backward {
                let parent_grads = back(&g)?;
                for (&p, pg) in node.parents.iter().zip(parent_grads) {
                    let (Some(pg), true) = (pg, nodes[p].requires_grad) else {
                        continue;
                    };
                    match &mut grads[p] {
                        Some(acc) => acc.accumulate(&pg)?,
                        slot => *slot = Some(pg),
                    }
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Same value, no gradient path back to `x`.
    pub fn detach(&self, x: Var) -> Var {
        let v = (*self.value(x)).clone();
        self.constant(v)
    }

    pub fn conv2d(&self, x: Var, w: Var, b: Var, p: ConvParams) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let y = conv::conv2d_dense(&xv, &wv, bv.data(), &p)?;
        let rows = (y.batch() * y.height() * y.width()) as u64;
        self.add_work(WorkCount {
            row_products: rows,
            macs: rows * (wv.len() as u64),
        });
        Ok(self.record(y, &[x, w, b], move || {
            Box::new(move |g| {
                let gr = conv2d_backward(&xv, &wv, g, &p)?;
                Ok(vec![Some(gr.input), Some(gr.weight), Some(bias_tensor(gr.bias)?)])
            })
        }))
    }

    /// Masked convolution; also returns the GEMM work of this call.
    pub fn masked_conv2d(
        &self,
        x: Var,
        w: Var,
        b: Var,
        mask: Rc<SaliencyMask>,
        p: ConvParams,
    ) -> Result<(Var, WorkCount)> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (y, work) = masked::masked_conv2d_counted(&xv, &wv, bv.data(), &mask, &p)?;
        self.add_work(work);
        let var = self.record(y, &[x, w, b], move || {
            Box::new(move |g| {
                let gr = masked_conv2d_backward(g, &xv, &wv, &mask, &p)?;
                Ok(vec![Some(gr.input), Some(gr.weight), Some(bias_tensor(gr.bias)?)])
            })
        });
        Ok((var, work))
    }

    pub fn deconv2d(&self, x: Var, w: Var, b: Var, p: ConvParams) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let y = conv::deconv2d(&xv, &wv, bv.data(), &p)?;
        Ok(self.record(y, &[x, w, b], move || {
            Box::new(move |g| {
                let gr = deconv2d_backward(&xv, &wv, g, &p)?;
                Ok(vec![Some(gr.input), Some(gr.weight), Some(bias_tensor(gr.bias)?)])
            })
        }))
    }

    pub fn depthwise_conv2d(&self, x: Var, w: Var, b: Var, p: ConvParams) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let y = conv::depthwise_conv2d(&xv, &wv, bv.data(), &p)?;
        Ok(self.record(y, &[x, w, b], move || {
            Box::new(move |g| {
                let gr = depthwise_conv2d_backward(&xv, &wv, g, &p)?;
                Ok(vec![Some(gr.input), Some(gr.weight), Some(bias_tensor(gr.bias)?)])
            })
        }))
    }

    pub fn relu(&self, x: Var) -> Var {
        let xv = self.value(x);
        let y = conv::relu(&xv);
        self.record(y, &[x], move || {
            Box::new(move |g| Ok(vec![Some(relu_backward(&xv, g)?)]))
        })
    }

    /// Logistic sigmoid of `clamp(x, -limit, limit)`.
    pub fn sigmoid_clamped(&self, x: Var, limit: f64) -> Var {
        let xv = self.value(x);
        let lim = T::lit(limit);
        let y = xv.map(|v| conv::sigmoid(v.max(-lim).min(lim)));
        let yv = Rc::new(y.clone());
        self.record(y, &[x], move || {
            Box::new(move |g| {
                let mut gx = g.zip_map(&yv, |gv, s| gv * s * (T::one() - s))?;
                for (gi, &xi) in gx.data_mut().iter_mut().zip(xv.data()) {
                    if xi.abs() > lim {
                        *gi = T::zero();
                    }
                }
                Ok(vec![Some(gx)])
            })
        })
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).add(&self.value(b))?;
        Ok(self.record(y, &[a, b], || {
            Box::new(|g| Ok(vec![Some(g.clone()), Some(g.clone())]))
        }))
    }

    pub fn concat(&self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<Rc<Tensor<T>>> = parts.iter().map(|&p| self.value(p)).collect();
        let refs: Vec<&Tensor<T>> = vals.iter().map(|v| v.as_ref()).collect();
        let y = conv::concat_channels(&refs)?;
        let channels: Vec<usize> = vals.iter().map(|v| v.channels()).collect();
        Ok(self.record(y, parts, move || {
            Box::new(move |g| Ok(split_channels(g, &channels)?.into_iter().map(Some).collect()))
        }))
    }

    pub fn maxpool(&self, x: Var, p: PoolParams) -> Result<Var> {
        let xv = self.value(x);
        let (y, arg) = conv::maxpool2d(&xv, &p)?;
        let dims = xv.dims();
        Ok(self.record(y, &[x], move || {
            Box::new(move |g| Ok(vec![Some(maxpool2d_backward(g, &arg, dims)?)]))
        }))
    }

    pub fn avgpool(&self, x: Var, p: PoolParams) -> Result<Var> {
        let xv = self.value(x);
        let y = conv::avgpool2d(&xv, &p)?;
        let dims = xv.dims();
        Ok(self.record(y, &[x], move || {
            Box::new(move |g| Ok(vec![Some(avgpool2d_backward(g, &p, dims)?)]))
        }))
    }

    /// Inference-form batch norm; statistics are constants of the layer.
    pub fn batchnorm(&self, x: Var, scale: Var, shift: Var, mean: Var, var: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let (s, sh, m, v) = (self.value(scale), self.value(shift), self.value(mean), self.value(var));
        let eps = T::lit(eps);
        let y = conv::batchnorm_infer(&xv, s.data(), sh.data(), m.data(), v.data(), eps)?;
        Ok(self.record(y, &[x], move || {
            Box::new(move |g| Ok(vec![Some(batchnorm_infer_backward(g, s.data(), v.data(), eps)?)]))
        }))
    }

    pub fn bilinear(&self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let xv = self.value(x);
        let y = conv::bilinear_resize(&xv, oh, ow)?;
        let dims = xv.dims();
        Ok(self.record(y, &[x], move || {
            Box::new(move |g| Ok(vec![Some(bilinear_resize_backward(g, dims)?)]))
        }))
    }

    pub fn crop(&self, x: Var, h: usize, w: usize) -> Result<Var> {
        let xv = self.value(x);
        if (xv.height(), xv.width()) == (h, w) {
            return Ok(x);
        }
        let y = conv::crop(&xv, h, w)?;
        let dims = xv.dims();
        Ok(self.record(y, &[x], move || {
            Box::new(move |g| Ok(vec![Some(crop_backward(g, dims))]))
        }))
    }

    /// Multiplies every channel of `x` by the `1 x 1 x h x w` map `p`.
    pub fn soft_mask(&self, x: Var, p: Var) -> Result<Var> {
        let (xv, pv) = (self.value(x), self.value(p));
        let y = masked::soft_mask_tensor(&xv, &pv)?;
        Ok(self.record(y, &[x, p], move || {
            Box::new(move |g| {
                let (gx, gp) = soft_mask_backward(g, &xv, &pv)?;
                Ok(vec![Some(gx), Some(gp)])
            })
        }))
    }

    /// Scalar `sum_i weights_i * terms_i`.
    pub fn weighted_sum(&self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = T::zero();
        for &(v, wt) in terms {
            let val = self.value(v);
            if val.len() != 1 {
                return Err(Error::shape("weighted_sum takes scalars"));
            }
            total += val.data()[0] * T::lit(wt);
        }
        let weights: Vec<T> = terms.iter().map(|&(_, w)| T::lit(w)).collect();
        let parents: Vec<Var> = terms.iter().map(|&(v, _)| v).collect();
        Ok(self.record(Tensor::scalar(total), &parents, move || {
            Box::new(move |g| {
                let gv = g.data()[0];
                Ok(weights.iter().map(|&w| Some(Tensor::scalar(gv * w))).collect())
            })
        }))
    }

    /// Records a custom op whose forward value and input gradients are
    /// computed by the caller: `backward(grad_out)` returns one gradient per
    /// entry of `parents`.
    pub fn custom(
        &self,
        value: Tensor<T>,
        parents: &[Var],
        backward: impl Fn(&Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> + 'static,
    ) -> Var {
        self.record(value, parents, move || Box::new(backward))
    }
}

pub(crate) fn bias_tensor<T: Scalar>(b: Vec<T>) -> Result<Tensor<T>> {
    let n = b.len();
    Tensor::new([n, 1, 1, 1], b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constants_record_no_backward() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::scalar(2.0));
        let b = tape.constant(Tensor::scalar(3.0));
        let s = tape.add(a, b).unwrap();
        assert!(!tape.requires_grad(s));
        let grads = tape.backward(s).unwrap();
        assert!(grads.get(a).is_none());
    }

    #[test]
    fn shared_input_accumulates() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::scalar(2.0));
        let s = tape.add(a, a).unwrap();
        let t = tape.weighted_sum(&[(s, 3.0), (a, 0.5)]).unwrap();
        assert_eq!(tape.value(t).data()[0], 13.0);
        let grads = tape.backward(t).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[6.5]);
    }

    #[test]
    fn detach_cuts_gradient() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::scalar(2.0));
        let d = tape.detach(a);
        let t = tape.weighted_sum(&[(a, 1.0), (d, 5.0)]).unwrap();
        let grads = tape.backward(t).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[1.0]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros([1, 1, 2, 2]));
        assert!(tape.backward(a).is_err());
    }
}
