//! The mask-predicting branch: a tiny encoder-decoder on shared trunk
//! features with optional dilated entry conv, non-local block, deconvolution
//! upsampling and skip connection, ending in a one-channel sigmoid map.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::conv::{self, conv2d_dense};
use crate::error::{Error, Result};
use crate::flops::{self, CostRole, LayerCost};
use crate::loss::LOGIT_CLAMP;
use crate::mask::{Downsampler, ProbMap, DEFAULT_PSI};
use crate::params::{Bindings, Init, ParamSpec, ParamStore};
use crate::tensor::{ConvParams, Scalar, Tensor};

fn yes() -> bool {
    true
}

fn default_rate() -> usize {
    2
}

fn default_channels() -> usize {
    16
}

fn default_psi() -> f64 {
    DEFAULT_PSI
}

/// Component toggles and sizes of the selective module.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectiveConfig {
    /// Transposed-conv upsampling; bilinear when false.
    #[serde(default = "yes")]
    pub use_deconv_upsample: bool,
    #[serde(default = "yes")]
    pub use_skip: bool,
    #[serde(default = "yes")]
    pub use_nonlocal: bool,
    #[serde(default = "yes")]
    pub use_dilated: bool,
    /// Dilation of the entry conv when `use_dilated`.
    #[serde(default = "default_rate")]
    pub dilation: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default)]
    pub use_depthwise_separable: bool,
    #[serde(default)]
    pub downsampler: Downsampler,
    #[serde(default = "default_psi")]
    pub psi: f64,
    /// Guided layers whose soft mask passes gradient back to the module under
    /// indirect supervision. `None` selects the guided layers feeding a head.
    #[serde(default)]
    pub gate: Option<Vec<String>>,
}

impl Default for SelectiveConfig {
    fn default() -> Self {
        Self {
            use_deconv_upsample: true,
            use_skip: true,
            use_nonlocal: true,
            use_dilated: true,
            dilation: 2,
            channels: 16,
            use_depthwise_separable: false,
            downsampler: Downsampler::StrideConvLearned,
            psi: DEFAULT_PSI,
            gate: None,
        }
    }
}

impl SelectiveConfig {
    /// Every toggle off: conv, one strided step, bilinear upsampling, 1x1 conv.
    pub fn minimal() -> Self {
        Self {
            use_deconv_upsample: false,
            use_skip: false,
            use_nonlocal: false,
            use_dilated: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::schema("selective_cfg.channels", "must be positive"));
        }
        if self.dilation == 0 {
            return Err(Error::schema("selective_cfg.dilation", "must be positive"));
        }
        if !(self.psi > 0.0 && self.psi < 1.0) {
            return Err(Error::schema("selective_cfg.psi", "must lie in (0, 1)"));
        }
        Ok(())
    }

    pub fn entry_rate(&self) -> usize {
        if self.use_dilated {
            self.dilation
        } else {
            1
        }
    }

    /// Non-local embedding width.
    pub fn embed_channels(&self) -> usize {
        (self.channels / 2).max(1)
    }
}

/// Parameter name prefix of the module.
pub const PREFIX: &str = "sel";

// ---------------------------------------------------------------------------
// Non-local attention

/// Embedded-Gaussian attention core for one batch: `theta`, `phi`, `g` are
/// `1 x ce x h x w`. Returns `Y` (same shape) with `y_i = sum_j A_ij g_j` and
/// the row-softmax affinity `A` over `theta_i . phi_j`, `n x n` row-major.
pub fn attention_forward<T: Scalar>(
    theta: &Tensor<T>,
    phi: &Tensor<T>,
    g: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<T>)> {
    theta.expect_same_dims(phi, "attention phi")?;
    theta.expect_same_dims(g, "attention g")?;
    if theta.batch() != 1 {
        return Err(Error::shape("attention runs one batch item at a time"));
    }
    let ce = theta.channels();
    let n = theta.height() * theta.width();
    let (t, p, gv) = (theta.data(), phi.data(), g.data());
    let mut a = vec![T::zero(); n * n];
    for i in 0..n {
        let row = &mut a[i * n..(i + 1) * n];
        for (j, s) in row.iter_mut().enumerate() {
            let mut acc = T::zero();
            for c in 0..ce {
                acc += t[c * n + i] * p[c * n + j];
            }
            *s = acc;
        }
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for s in row.iter_mut() {
            *s = (*s - m).exp();
            z += *s;
        }
        for s in row.iter_mut() {
            *s = *s / z;
        }
    }
    let mut y = vec![T::zero(); ce * n];
    for c in 0..ce {
        for i in 0..n {
            let mut acc = T::zero();
            for j in 0..n {
                acc += a[i * n + j] * gv[c * n + j];
            }
            y[c * n + i] = acc;
        }
    }
    Ok((Tensor::new(theta.dims(), y)?, a))
}

/// Gradients of [`attention_forward`] with respect to `theta`, `phi`, `g`.
pub fn attention_backward<T: Scalar>(
    theta: &Tensor<T>,
    phi: &Tensor<T>,
    g: &Tensor<T>,
    affinity: &[T],
    grad_y: &Tensor<T>,
) -> Result<[Tensor<T>; 3]> {
    grad_y.expect_same_dims(theta, "attention grad")?;
    let ce = theta.channels();
    let n = theta.height() * theta.width();
    let (t, p, gv, dy) = (theta.data(), phi.data(), g.data(), grad_y.data());
    let mut dg = vec![T::zero(); ce * n];
    let mut ds = vec![T::zero(); n * n];
    for i in 0..n {
        // dA_ij = dy_i . g_j, then the softmax Jacobian per row.
        let arow = &affinity[i * n..(i + 1) * n];
        let mut da = vec![T::zero(); n];
        for (j, d) in da.iter_mut().enumerate() {
            let mut acc = T::zero();
            for c in 0..ce {
                acc += dy[c * n + i] * gv[c * n + j];
                dg[c * n + j] += arow[j] * dy[c * n + i];
            }
            *d = acc;
        }
        let dot: T = da.iter().zip(arow).map(|(&d, &a)| d * a).sum();
        for j in 0..n {
            ds[i * n + j] = arow[j] * (da[j] - dot);
        }
    }
    let mut dt = vec![T::zero(); ce * n];
    let mut dp = vec![T::zero(); ce * n];
    for c in 0..ce {
        for i in 0..n {
            let mut acc_t = T::zero();
            let mut acc_p = T::zero();
            for j in 0..n {
                acc_t += ds[i * n + j] * p[c * n + j];
                acc_p += ds[j * n + i] * t[c * n + j];
            }
            dt[c * n + i] = acc_t;
            dp[c * n + i] = acc_p;
        }
    }
    let dims = theta.dims();
    Ok([Tensor::new(dims, dt)?, Tensor::new(dims, dp)?, Tensor::new(dims, dg)?])
}

/// Attention core recorded on a tape; batches are processed independently.
pub fn tape_attention<T: Scalar>(tape: &Tape<T>, theta: Var, phi: Var, g: Var) -> Result<Var> {
    let (tv, pv, gv) = (tape.value(theta), tape.value(phi), tape.value(g));
    let nb = tv.batch();
    let mut ys = Vec::with_capacity(nb);
    let mut affs = Vec::with_capacity(nb);
    for b in 0..nb {
        let (y, a) = attention_forward(&tv.item(b), &pv.item(b), &gv.item(b))?;
        ys.push(y);
        affs.push(a);
    }
    let y = Tensor::stack(&ys)?;
    Ok(tape.custom(y, &[theta, phi, g], move |dy| {
        let mut parts: [Vec<Tensor<T>>; 3] = Default::default();
        for (b, a) in affs.iter().enumerate() {
            let grads = attention_backward(&tv.item(b), &pv.item(b), &gv.item(b), a, &dy.item(b))?;
            for (k, gr) in grads.into_iter().enumerate() {
                parts[k].push(gr);
            }
        }
        parts
            .iter()
            .map(|p| Tensor::stack(p).map(Some))
            .collect()
    }))
}

/// Weights of one non-local block; all projections are 1x1 convs.
#[derive(Clone, Debug)]
pub struct NonLocalWeights<T> {
    pub theta: Tensor<T>,
    pub phi: Tensor<T>,
    pub g: Tensor<T>,
    pub z: Tensor<T>,
    pub z_bias: Vec<T>,
}

/// `x + z(softmax(theta(x)^T phi(x)) g(x))`.
pub fn nonlocal_block<T: Scalar>(x: &Tensor<T>, w: &NonLocalWeights<T>) -> Result<Tensor<T>> {
    let tape = Tape::new();
    let xv = tape.constant(x.clone());
    let vars = [
        tape.constant(w.theta.clone()),
        tape.constant(w.phi.clone()),
        tape.constant(w.g.clone()),
        tape.constant(w.z.clone()),
        tape.constant(Tensor::new([w.z_bias.len(), 1, 1, 1], w.z_bias.clone())?),
    ];
    let y = tape_nonlocal(&tape, xv, vars)?;
    Ok((*tape.value(y)).clone())
}

/// Non-local block on a tape; `w` is `[theta, phi, g, z, z_bias]`.
pub fn tape_nonlocal<T: Scalar>(tape: &Tape<T>, x: Var, w: [Var; 5]) -> Result<Var> {
    let ce = tape.value(w[0]).batch();
    let zero = tape.constant(Tensor::zeros([ce, 1, 1, 1]));
    let one = ConvParams::square(1, 1, 0, 1);
    let theta = tape.conv2d(x, w[0], zero, one)?;
    let phi = tape.conv2d(x, w[1], zero, one)?;
    let g = tape.conv2d(x, w[2], zero, one)?;
    let y = tape_attention(tape, theta, phi, g)?;
    let z = tape.conv2d(y, w[3], w[4], one)?;
    tape.add(x, z)
}

/// 3x3 conv with dilation `r` and padding that keeps the spatial size.
pub fn dilated_conv_block<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &[T], r: usize) -> Result<Tensor<T>> {
    conv2d_dense(x, w, b, &ConvParams::same(3, r))
}

// ---------------------------------------------------------------------------
// Module

/// Selective module bound to a trunk attach point.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectiveModule {
    pub cfg: SelectiveConfig,
    /// Channels of the shared attach features.
    pub in_channels: usize,
    /// Channels of the skip features.
    pub skip_channels: usize,
    /// Spatial size of the attach features and of the output map.
    pub hw: (usize, usize),
}

fn pname(parts: &[&str]) -> String {
    let mut s = PREFIX.to_string();
    for p in parts {
        s.push('.');
        s.push_str(p);
    }
    s
}

impl SelectiveModule {
    pub fn new(cfg: SelectiveConfig, in_channels: usize, skip_channels: usize, hw: (usize, usize)) -> Result<Self> {
        cfg.validate()?;
        if hw.0 < 2 || hw.1 < 2 {
            return Err(Error::shape(format!("attach features {}x{} too small", hw.0, hw.1)));
        }
        Ok(Self { cfg, in_channels, skip_channels, hw })
    }

    fn encoded_hw(&self) -> (usize, usize) {
        (self.hw.0.div_ceil(2), self.hw.1.div_ceil(2))
    }

    fn unit_specs(&self, name: &str, cin: usize, cout: usize, out: &mut Vec<ParamSpec>) {
        if self.cfg.use_depthwise_separable {
            out.push(ParamSpec::conv_weight(pname(&[name, "dw", "w"]), cin, 1, 3, 3));
            out.push(ParamSpec::bias(pname(&[name, "dw", "b"]), cin));
            out.push(ParamSpec::conv_weight(pname(&[name, "pw", "w"]), cout, cin, 1, 1));
            out.push(ParamSpec::bias(pname(&[name, "pw", "b"]), cout));
        } else {
            out.push(ParamSpec::conv_weight(pname(&[name, "w"]), cout, cin, 3, 3));
            out.push(ParamSpec::bias(pname(&[name, "b"]), cout));
        }
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let ch = self.cfg.channels;
        let ce = self.cfg.embed_channels();
        let mut out = Vec::new();
        self.unit_specs("entry", self.in_channels, ch, &mut out);
        if self.cfg.use_nonlocal {
            for n in ["theta", "phi", "g"] {
                out.push(ParamSpec::conv_weight(pname(&["nl", n, "w"]), ce, ch, 1, 1));
            }
            out.push(ParamSpec::conv_weight(pname(&["nl", "z", "w"]), ch, ce, 1, 1));
            out.push(ParamSpec::bias(pname(&["nl", "z", "b"]), ch));
        }
        self.unit_specs("enc", ch, ch, &mut out);
        if self.cfg.use_deconv_upsample {
            out.push(ParamSpec::new(pname(&["up", "w"]), [ch, ch, 2, 2], Init::He { fan_in: ch }));
            out.push(ParamSpec::bias(pname(&["up", "b"]), ch));
        }
        if self.cfg.use_skip {
            out.push(ParamSpec::conv_weight(pname(&["skip", "w"]), ch, self.skip_channels, 1, 1));
            out.push(ParamSpec::bias(pname(&["skip", "b"]), ch));
        }
        out.push(ParamSpec::conv_weight(pname(&["out", "w"]), 1, ch, 1, 1));
        out.push(ParamSpec::bias(pname(&["out", "b"]), 1));
        out
    }

    /// 3x3 conv unit (plain or depthwise separable), followed by ReLU.
    fn unit<T: Scalar>(
        &self,
        tape: &Tape<T>,
        b: &Bindings,
        name: &str,
        x: Var,
        stride: usize,
        dilation: usize,
    ) -> Result<Var> {
        let p = ConvParams::square(3, stride, dilation, dilation);
        let y = if self.cfg.use_depthwise_separable {
            let d = tape.depthwise_conv2d(x, b.get(&pname(&[name, "dw", "w"]))?, b.get(&pname(&[name, "dw", "b"]))?, p)?;
            let d = tape.relu(d);
            tape.conv2d(
                d,
                b.get(&pname(&[name, "pw", "w"]))?,
                b.get(&pname(&[name, "pw", "b"]))?,
                ConvParams::square(1, 1, 0, 1),
            )?
        } else {
            tape.conv2d(x, b.get(&pname(&[name, "w"]))?, b.get(&pname(&[name, "b"]))?, p)?
        };
        Ok(tape.relu(y))
    }

    /// Runs the pipeline and returns the `n x 1 x h x w` probability map.
    pub fn forward<T: Scalar>(&self, tape: &Tape<T>, b: &Bindings, shared: Var, skip: Var) -> Result<Var> {
        let sv = tape.value(shared);
        if sv.channels() != self.in_channels || (sv.height(), sv.width()) != self.hw {
            return Err(Error::shape(format!(
                "selective module expects {}x{}x{} features, got {:?}",
                self.in_channels, self.hw.0, self.hw.1,
                sv.dims()
            )));
        }
        let (h, w) = self.hw;
        let mut x = self.unit(tape, b, "entry", shared, 1, self.cfg.entry_rate())?;
        if self.cfg.use_nonlocal {
            let nl = |n: &str| b.get(&pname(&["nl", n, "w"]));
            x = tape_nonlocal(
                tape,
                x,
                [nl("theta")?, nl("phi")?, nl("g")?, nl("z")?, b.get(&pname(&["nl", "z", "b"]))?],
            )?;
        }
        let e = self.unit(tape, b, "enc", x, 2, 1)?;
        let mut u = if self.cfg.use_deconv_upsample {
            let d = tape.deconv2d(
                e,
                b.get(&pname(&["up", "w"]))?,
                b.get(&pname(&["up", "b"]))?,
                ConvParams::square(2, 2, 0, 1),
            )?;
            tape.crop(d, h, w)?
        } else {
            tape.bilinear(e, h, w)?
        };
        if self.cfg.use_skip {
            let s = tape.conv2d(
                skip,
                b.get(&pname(&["skip", "w"]))?,
                b.get(&pname(&["skip", "b"]))?,
                ConvParams::square(1, 1, 0, 1),
            )?;
            u = tape.add(u, s)?;
        }
        let u = tape.relu(u);
        let logit = tape.conv2d(
            u,
            b.get(&pname(&["out", "w"]))?,
            b.get(&pname(&["out", "b"]))?,
            ConvParams::square(1, 1, 0, 1),
        )?;
        Ok(tape.sigmoid_clamped(logit, LOGIT_CLAMP))
    }

    /// Arithmetic cost of one forward pass, MACs per layer.
    pub fn costs(&self) -> Vec<LayerCost> {
        let ch = self.cfg.channels;
        let ce = self.cfg.embed_channels();
        let (h, w) = self.hw;
        let (eh, ew) = self.encoded_hw();
        let mut out = Vec::new();
        let unit = |name: &str, cin: usize, cout: usize, oh: usize, ow: usize, out: &mut Vec<LayerCost>| {
            if self.cfg.use_depthwise_separable {
                out.push(LayerCost::overhead(pname(&[name, "dw"]), flops::conv_macs(cin, 1, 3, 3, oh, ow), (oh, ow)));
                out.push(LayerCost::overhead(pname(&[name, "pw"]), flops::conv_macs(cin, cout, 1, 1, oh, ow), (oh, ow)));
            } else {
                out.push(LayerCost::overhead(pname(&[name]), flops::conv_macs(cin, cout, 3, 3, oh, ow), (oh, ow)));
            }
        };
        unit("entry", self.in_channels, ch, h, w, &mut out);
        if self.cfg.use_nonlocal {
            out.push(LayerCost::overhead(pname(&["nl"]), flops::nonlocal_macs(h * w, ch, ce), (h, w)));
        }
        unit("enc", ch, ch, eh, ew, &mut out);
        if self.cfg.use_deconv_upsample {
            out.push(LayerCost::overhead(pname(&["up"]), flops::deconv_macs(ch, ch, 2, 2, eh, ew), (h, w)));
        } else {
            out.push(LayerCost::overhead(pname(&["up"]), flops::bilinear_macs(ch, h, w), (h, w)));
        }
        if self.cfg.use_skip {
            out.push(LayerCost::overhead(pname(&["skip"]), flops::conv_macs(self.skip_channels, ch, 1, 1, h, w), (h, w)));
        }
        out.push(LayerCost::overhead(pname(&["out"]), flops::conv_macs(ch, 1, 1, 1, h, w), (h, w)));
        debug_assert!(out.iter().all(|c| c.role == CostRole::Overhead));
        out
    }
}

/// Pure forward of the module for one feature map.
pub fn selective_forward<T: Scalar>(
    shared: &Tensor<T>,
    skip: &Tensor<T>,
    module: &SelectiveModule,
    params: &ParamStore<T>,
) -> Result<ProbMap<T>> {
    let tape = Tape::new();
    let b = params.bind(&tape, |_| false);
    let s = tape.constant(shared.clone());
    let k = tape.constant(skip.clone());
    let p = module.forward(&tape, &b, s, k)?;
    ProbMap::from_tensor(&tape.value(p))
}

/// Sets the output conv so the module emits a constant map: all ones for
/// `on`, all zeros otherwise (up to the logit clamp).
pub fn rig_constant<T: Scalar>(params: &mut ParamStore<T>, on: bool) -> Result<()> {
    let w = params.get_mut(&pname(&["out", "w"]))?;
    *w = Tensor::zeros(w.dims());
    let b = params.get_mut(&pname(&["out", "b"]))?;
    *b = Tensor::filled(b.dims(), T::lit(if on { 20.0 } else { -20.0 }));
    Ok(())
}

/// Sigmoid of a raw scalar with the module's clamp.
pub fn clamped_sigmoid<T: Scalar>(v: T) -> T {
    let lim = T::lit(LOGIT_CLAMP);
    conv::sigmoid(v.max(-lim).min(lim))
}
