//! Executable network built from a [`NetworkSpec`]: trunk layers, the
//! selective module at the attach point, the mask pyramid feeding guided
//! layers, and detection heads.

use std::collections::BTreeSet;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::detect::{decode_and_nms, generate_anchors, AnchorSpec, DecodeParams, DetectionOutput, HeadLayout, HeadRaw, Rect};
use crate::error::{Error, Result};
use crate::flops::{self, CostRole, LayerCost};
use crate::loss::LOGIT_CLAMP;
use crate::mask::{
    binarize, downsample_maxpool, downsample_stride_conv, DownsampleKernel, Downsampler, LEARNED_INIT_BIAS, LEARNED_INIT_WEIGHT,
    MaskPyramid, ProbMap, SaliencyMask,
};
use crate::masked::WorkCount;
use crate::params::{Bindings, Init, ParamSpec, ParamStore};
use crate::selective::{SelectiveModule, PREFIX};
use crate::spec::{LayerSpec, NetworkSpec, INPUT};
use crate::tensor::{ConvParams, PoolParams, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Src {
    Input,
    Node(usize),
}

#[derive(Clone, Debug, PartialEq)]
enum Op {
    Conv { p: ConvParams, cout: usize, relu: bool },
    Deconv { p: ConvParams, cout: usize, relu: bool },
    MaxPool(PoolParams),
    AvgPool(PoolParams),
    Relu,
    BatchNorm { eps: f64 },
    Concat,
    Add,
}

#[derive(Clone, Debug)]
struct Node {
    name: String,
    op: Op,
    inputs: Vec<Src>,
    /// `(c, h, w)` of the output.
    shape: (usize, usize, usize),
    guided: bool,
    gated: bool,
    level: Option<usize>,
}

/// Outcome of [`Graph::guided_equivalence`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Equivalence {
    pub layers: usize,
    pub values: usize,
    pub mismatches: usize,
}

impl Equivalence {
    pub fn holds(&self) -> bool {
        self.mismatches == 0
    }
}

/// One resolution of the mask pyramid; level 0 is the attach resolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Level {
    pub hw: (usize, usize),
    /// Downsampling factor from level 0.
    pub factor: usize,
}

/// A detection head bound to its source layer.
#[derive(Clone, Debug)]
pub struct Head {
    pub name: String,
    source: usize,
    pub layout: HeadLayout,
    pub anchors: AnchorSpec,
    pub conv: ConvParams,
    /// Evaluated only at mask-1 cells of its grid.
    pub masked: bool,
    level: Option<usize>,
}

/// How the forward pass treats guided layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Binarized masks, masked convolution.
    Inference,
    /// As inference; the mask maps are returned for the mask loss.
    TrainDirect,
    /// Dense convolution multiplied by the soft maps.
    TrainIndirect,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions<'a, T> {
    pub mode: Mode,
    /// Hard masks to use instead of the predicted ones.
    pub masks: Option<&'a MaskPyramid>,
    /// Indirect mode: per-level maps used at guided layers outside the gate,
    /// in place of the detached predictions.
    pub frozen_soft: Option<&'a [Tensor<T>]>,
}

impl<'a, T> ForwardOptions<'a, T> {
    pub fn new(mode: Mode) -> Self {
        Self { mode, masks: None, frozen_soft: None }
    }
}

/// Values recorded by one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// Level-0 probability map.
    pub prob: Option<Var>,
    /// Direct mode: the map supervised at each level. Indirect mode: the soft
    /// map at each level before gating.
    pub level_maps: Vec<Var>,
    /// Hard masks used by guided layers (hard modes).
    pub pyramid: Option<MaskPyramid>,
    /// `(class logits, box offsets)` per head.
    pub heads: Vec<(Var, Var)>,
    /// GEMM work per conv layer, per head conv, and `sel` for the module.
    pub work: Vec<(String, WorkCount)>,
    /// Output of every trunk layer, in spec order.
    pub layers: Vec<Var>,
}

/// Result of [`Graph::infer`].
#[derive(Clone, Debug)]
pub struct Inference {
    pub prob: Option<ProbMap>,
    pub pyramid: Option<MaskPyramid>,
    pub heads: Vec<HeadRaw>,
    pub detections: Vec<DetectionOutput>,
    pub work: Vec<(String, WorkCount)>,
}

/// Per-layer output shape, for reporting.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerShape {
    pub name: String,
    pub kind: &'static str,
    pub shape: (usize, usize, usize),
    pub guided: bool,
}

#[derive(Clone, Debug)]
pub struct Graph {
    spec: NetworkSpec,
    nodes: Vec<Node>,
    attach: Option<usize>,
    selective: Option<SelectiveModule>,
    levels: Vec<Level>,
    heads: Vec<Head>,
    anchors: Vec<Vec<Rect>>,
}

fn down_name(f: usize, part: &str) -> String {
    format!("{PREFIX}.down.f{f}.{part}")
}

impl Head {
    /// Pyramid level of the source layer, when it is guided.
    pub fn level(&self) -> Option<usize> {
        self.level
    }
}

impl Graph {
    pub fn build(spec: &NetworkSpec) -> Result<Self> {
        let inp = &spec.input;
        if inp.channels == 0 || inp.height == 0 || inp.width == 0 {
            return Err(Error::schema("input", "dims must be positive"));
        }
        let mut nodes: Vec<Node> = Vec::with_capacity(spec.layers.len());
        let mut names = BTreeSet::new();
        for (i, l) in spec.layers.iter().enumerate() {
            let field = format!("layers[{i}]");
            let name = l.name().to_string();
            if name == INPUT || !names.insert(name.clone()) {
                return Err(Error::schema(format!("{field}.name"), format!("`{name}` is reserved or duplicated")));
            }
            let inputs: Vec<Src> = if l.inputs().is_empty() {
                vec![if i == 0 { Src::Input } else { Src::Node(i - 1) }]
            } else {
                l.inputs()
                    .iter()
                    .map(|n| {
                        if n == INPUT {
                            Ok(Src::Input)
                        } else {
                            nodes
                                .iter()
                                .position(|nd| &nd.name == n)
                                .map(Src::Node)
                                .ok_or_else(|| Error::schema(format!("{field}.inputs"), format!("unknown or later layer `{n}`")))
                        }
                    })
                    .collect::<Result<_>>()?
            };
            let shape_of = |s: &Src| match s {
                Src::Input => (inp.channels, inp.height, inp.width),
                Src::Node(j) => nodes[*j].shape,
            };
            let in_shapes: Vec<_> = inputs.iter().map(shape_of).collect();
            let single = || -> Result<(usize, usize, usize)> {
                if in_shapes.len() != 1 {
                    return Err(Error::schema(format!("{field}.inputs"), "expects exactly one input"));
                }
                Ok(in_shapes[0])
            };
            let bad = |e: Error| Error::schema(field.clone(), e.to_string());
            let (op, shape) = match l {
                LayerSpec::Conv { out_channels, kernel, stride, padding, dilation, relu, .. } => {
                    let (c, h, w) = single()?;
                    let p = ConvParams::square(*kernel, *stride, *padding, *dilation);
                    let (oh, ow) = p.output_dims(h, w).map_err(bad)?;
                    let _ = c;
                    (Op::Conv { p, cout: *out_channels, relu: *relu }, (*out_channels, oh, ow))
                }
                LayerSpec::Deconv { out_channels, kernel, stride, padding, relu, .. } => {
                    let (_, h, w) = single()?;
                    let p = ConvParams::square(*kernel, *stride, *padding, 1);
                    let (oh, ow) = p.transposed_output_dims(h, w).map_err(bad)?;
                    (Op::Deconv { p, cout: *out_channels, relu: *relu }, (*out_channels, oh, ow))
                }
                LayerSpec::Maxpool { kernel, stride, padding, ceil_mode, .. }
                | LayerSpec::Avgpool { kernel, stride, padding, ceil_mode, .. } => {
                    let (c, h, w) = single()?;
                    let p = PoolParams { window: *kernel, stride: *stride, padding: *padding, ceil_mode: *ceil_mode };
                    let (oh, ow) = p.output_dims(h, w).map_err(bad)?;
                    let op = if matches!(l, LayerSpec::Maxpool { .. }) { Op::MaxPool(p) } else { Op::AvgPool(p) };
                    (op, (c, oh, ow))
                }
                LayerSpec::Relu { .. } => (Op::Relu, single()?),
                LayerSpec::Batchnorm { eps, .. } => (Op::BatchNorm { eps: *eps }, single()?),
                LayerSpec::Concat { .. } | LayerSpec::Add { .. } => {
                    if in_shapes.len() < 2 {
                        return Err(Error::schema(format!("{field}.inputs"), "needs at least two inputs"));
                    }
                    let (_, h, w) = in_shapes[0];
                    if in_shapes.iter().any(|s| (s.1, s.2) != (h, w)) {
                        return Err(Error::schema(format!("{field}.inputs"), "spatial sizes differ"));
                    }
                    if matches!(l, LayerSpec::Add { .. }) {
                        if in_shapes.iter().any(|s| *s != in_shapes[0]) {
                            return Err(Error::schema(format!("{field}.inputs"), "shapes differ"));
                        }
                        (Op::Add, in_shapes[0])
                    } else {
                        (Op::Concat, (in_shapes.iter().map(|s| s.0).sum(), h, w))
                    }
                }
            };
            if shape.0 == 0 {
                return Err(Error::schema(format!("{field}.out_channels"), "must be positive"));
            }
            nodes.push(Node { name, op, inputs, shape, guided: false, gated: false, level: None });
        }

        // Attach point and selective module.
        let attach = match (&spec.attach_point, &spec.selective_cfg) {
            (Some(a), Some(_)) => Some(
                spec.layer_index(a)
                    .ok_or_else(|| Error::schema("attach_point", format!("unknown layer `{a}`")))?,
            ),
            (None, None) => None,
            (Some(_), None) => return Err(Error::schema("selective_cfg", "required when attach_point is set")),
            (None, Some(_)) => return Err(Error::schema("attach_point", "required when selective_cfg is set")),
        };
        if attach.is_none() && !spec.guided_layers.is_empty() {
            return Err(Error::schema("guided_layers", "guided layers need an attach point and selective_cfg"));
        }
        let selective = match (attach, &spec.selective_cfg) {
            (Some(a), Some(cfg)) => {
                let (c, h, w) = nodes[a].shape;
                Some(SelectiveModule::new(cfg.clone(), c, c, (h, w)).map_err(|e| match e {
                    Error::Schema { .. } => e,
                    other => Error::schema("attach_point", other.to_string()),
                })?)
            }
            _ => None,
        };

        // Guided layers must descend from the attach point.
        let mut levels: Vec<Level> = Vec::new();
        if let Some(a) = attach {
            let base = (nodes[a].shape.1, nodes[a].shape.2);
            levels.push(Level { hw: base, factor: 1 });
            let mut desc = vec![false; nodes.len()];
            for i in a + 1..nodes.len() {
                desc[i] = nodes[i].inputs.iter().any(|s| matches!(s, Src::Node(j) if *j == a || desc[*j]));
            }
            for (gi, g) in spec.guided_layers.iter().enumerate() {
                let field = format!("guided_layers[{gi}]");
                let i = spec
                    .layer_index(g)
                    .ok_or_else(|| Error::schema(field.clone(), format!("unknown layer `{g}`")))?;
                if !desc[i] {
                    return Err(Error::schema(field, format!("`{g}` does not follow the attach point")));
                }
                if !matches!(nodes[i].op, Op::Conv { .. }) {
                    return Err(Error::schema(field, format!("`{g}` is not a conv layer")));
                }
                let hw = (nodes[i].shape.1, nodes[i].shape.2);
                let lvl = level_for(&mut levels, base, hw).ok_or_else(|| {
                    Error::schema(field, format!("no mask pyramid level for {}x{} from {}x{}", hw.0, hw.1, base.0, base.1))
                })?;
                nodes[i].guided = true;
                nodes[i].level = Some(lvl);
            }
        }

        // Heads.
        let mut heads = Vec::with_capacity(spec.heads.len());
        let mut anchors = Vec::with_capacity(spec.heads.len());
        for (hi, h) in spec.heads.iter().enumerate() {
            let field = format!("heads[{hi}]");
            if names.contains(&h.name) || h.name == INPUT || heads.iter().any(|o: &Head| o.name == h.name) {
                return Err(Error::schema(format!("{field}.name"), format!("`{}` is reserved or duplicated", h.name)));
            }
            let source = spec
                .layer_index(&h.source)
                .ok_or_else(|| Error::schema(format!("{field}.source"), format!("unknown layer `{}`", h.source)))?;
            if h.num_classes == 0 {
                return Err(Error::schema(format!("{field}.num_classes"), "must be positive"));
            }
            if h.anchors.per_cell() == 0 {
                return Err(Error::schema(format!("{field}.anchors"), "needs at least one size and ratio"));
            }
            if h.kernel % 2 == 0 {
                return Err(Error::schema(format!("{field}.kernel"), "must be odd"));
            }
            let (_, sh, sw) = nodes[source].shape;
            let layout = HeadLayout { h: sh, w: sw, anchors: h.anchors.per_cell(), classes: h.num_classes + 1 };
            anchors.push(generate_anchors(&layout, (inp.height, inp.width), &h.anchors));
            heads.push(Head {
                name: h.name.clone(),
                source,
                layout,
                anchors: h.anchors.clone(),
                conv: ConvParams::same(h.kernel, 1),
                masked: nodes[source].guided,
                level: nodes[source].level,
            });
        }
        if let Some(first) = heads.first() {
            if heads.iter().any(|h| h.layout.classes != first.layout.classes) {
                return Err(Error::schema("heads", "all heads must predict the same classes"));
            }
        }

        // Gate: guided layers whose soft mask passes gradient back.
        if let Some(cfg) = &spec.selective_cfg {
            match &cfg.gate {
                Some(gate) => {
                    for (k, g) in gate.iter().enumerate() {
                        let ok = spec.layer_index(g).filter(|&i| nodes[i].guided);
                        let i = ok.ok_or_else(|| {
                            Error::schema(format!("selective_cfg.gate[{k}]"), format!("`{g}` is not a guided layer"))
                        })?;
                        nodes[i].gated = true;
                    }
                }
                None => {
                    for h in &heads {
                        if nodes[h.source].guided {
                            nodes[h.source].gated = true;
                        }
                    }
                }
            }
        }

        Ok(Self { spec: spec.clone(), nodes, attach, selective, levels, heads, anchors })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    /// Unguided graph over the same layers and heads.
    pub fn baseline(&self) -> Result<Graph> {
        Graph::build(&self.spec.baseline())
    }

    pub fn selective(&self) -> Option<&SelectiveModule> {
        self.selective.as_ref()
    }

    pub fn levels(&self) -> &[Level] {
        &self.levels
    }

    pub fn heads(&self) -> &[Head] {
        &self.heads
    }

    pub fn anchors(&self) -> &[Vec<Rect>] {
        &self.anchors
    }

    pub fn image_hw(&self) -> (usize, usize) {
        (self.spec.input.height, self.spec.input.width)
    }

    /// Image pixels per attach-resolution cell, when the attach grid divides the image.
    pub fn attach_stride(&self) -> Option<usize> {
        let l = self.levels.first()?;
        let (ih, iw) = self.image_hw();
        let s = ih.div_ceil(l.hw.0);
        (iw.div_ceil(s) == l.hw.1 && ih.div_ceil(s) == l.hw.0).then_some(s)
    }

    pub fn shapes(&self) -> Vec<LayerShape> {
        self.nodes
            .iter()
            .zip(&self.spec.layers)
            .map(|(n, l)| LayerShape { name: n.name.clone(), kind: l.kind(), shape: n.shape, guided: n.guided })
            .collect()
    }

    pub fn guided_layers(&self) -> Vec<&str> {
        self.nodes.iter().filter(|n| n.guided).map(|n| n.name.as_str()).collect()
    }

    pub fn gate(&self) -> Vec<&str> {
        self.nodes.iter().filter(|n| n.gated).map(|n| n.name.as_str()).collect()
    }

    /// Pyramid level index of a guided layer.
    pub fn level_of(&self, layer: &str) -> Option<usize> {
        self.nodes.iter().find(|n| n.name == layer).and_then(|n| n.level)
    }

    fn input_channels(&self, i: usize) -> usize {
        match self.nodes[i].inputs[0] {
            Src::Input => self.spec.input.channels,
            Src::Node(j) => self.nodes[j].shape.0,
        }
    }

    fn input_hw(&self, i: usize) -> (usize, usize) {
        match self.nodes[i].inputs[0] {
            Src::Input => (self.spec.input.height, self.spec.input.width),
            Src::Node(j) => (self.nodes[j].shape.1, self.nodes[j].shape.2),
        }
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        for (i, n) in self.nodes.iter().enumerate() {
            let cin = self.input_channels(i);
            match &n.op {
                Op::Conv { p, cout, .. } => {
                    out.push(ParamSpec::conv_weight(format!("{}.w", n.name), *cout, cin, p.kernel.0, p.kernel.1));
                    out.push(ParamSpec::bias(format!("{}.b", n.name), *cout));
                }
                Op::Deconv { p, cout, .. } => {
                    let (kh, kw) = p.kernel;
                    out.push(ParamSpec::new(format!("{}.w", n.name), [cin, *cout, kh, kw], Init::He { fan_in: cin }));
                    out.push(ParamSpec::bias(format!("{}.b", n.name), *cout));
                }
                Op::BatchNorm { .. } => {
                    let c = n.shape.0;
                    for (part, v) in [("scale", 1.0), ("shift", 0.0), ("mean", 0.0), ("var", 1.0)] {
                        out.push(ParamSpec::new(format!("{}.{part}", n.name), [c, 1, 1, 1], Init::Const(v)));
                    }
                }
                _ => {}
            }
        }
        for h in &self.heads {
            let cin = self.nodes[h.source].shape.0;
            let k = h.conv.kernel.0;
            let l = h.layout;
            out.push(ParamSpec::conv_weight(format!("{}.cls.w", h.name), l.anchors * l.classes, cin, k, k));
            out.push(ParamSpec::bias(format!("{}.cls.b", h.name), l.anchors * l.classes));
            out.push(ParamSpec::conv_weight(format!("{}.loc.w", h.name), l.anchors * 4, cin, k, k));
            out.push(ParamSpec::bias(format!("{}.loc.b", h.name), l.anchors * 4));
        }
        if let Some(m) = &self.selective {
            out.extend(m.param_specs());
            if m.cfg.downsampler == Downsampler::StrideConvLearned {
                for l in self.levels.iter().filter(|l| l.factor > 1) {
                    let f = l.factor;
                    out.push(ParamSpec::new(down_name(f, "w"), [1, 1, f, f], Init::Const(LEARNED_INIT_WEIGHT)));
                    out.push(ParamSpec::new(down_name(f, "b"), [1, 1, 1, 1], Init::Const(LEARNED_INIT_BIAS)));
                }
            }
        }
        out
    }

    pub fn init_params(&self, seed: u64) -> ParamStore {
        ParamStore::init(&self.param_specs(), &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Parameters updated by training (batchnorm statistics excluded).
    pub fn is_trainable(name: &str) -> bool {
        !(name.ends_with(".mean") || name.ends_with(".var"))
    }

    /// Dense cost of every layer; see [`Graph::mask_ones`] for the masked side.
    pub fn costs(&self) -> Vec<LayerCost> {
        let mut out = Vec::new();
        for (i, n) in self.nodes.iter().enumerate() {
            let (c, h, w) = n.shape;
            let cin = self.input_channels(i);
            let macs = match &n.op {
                Op::Conv { p, cout, .. } => flops::conv_macs(cin, *cout, p.kernel.0, p.kernel.1, h, w),
                Op::Deconv { p, cout, .. } => {
                    let (ih, iw) = self.input_hw(i);
                    flops::deconv_macs(cin, *cout, p.kernel.0, p.kernel.1, ih, iw)
                }
                Op::MaxPool(p) | Op::AvgPool(p) => flops::pool_macs(p.window * p.window, c, h, w),
                Op::Relu | Op::BatchNorm { .. } => flops::elementwise_macs(c, h, w),
                Op::Add => (n.inputs.len() as u64 - 1) * flops::elementwise_macs(c, h, w),
                Op::Concat => 0,
            };
            out.push(LayerCost { guided: n.guided, ..LayerCost::new(n.name.clone(), CostRole::Trunk, macs, (h, w)) });
        }
        for hd in &self.heads {
            let cin = self.nodes[hd.source].shape.0;
            let l = hd.layout;
            let k = hd.conv.kernel.0;
            for (part, cout) in [("cls", l.anchors * l.classes), ("loc", l.anchors * 4)] {
                let macs = flops::conv_macs(cin, cout, k, k, l.h, l.w);
                out.push(LayerCost {
                    guided: hd.masked,
                    ..LayerCost::new(format!("{}.{part}", hd.name), CostRole::Head, macs, (l.h, l.w))
                });
            }
        }
        if let Some(m) = &self.selective {
            out.extend(m.costs());
            for l in self.levels.iter().filter(|l| l.factor > 1) {
                let f = l.factor;
                let macs = match m.cfg.downsampler {
                    Downsampler::Maxpool => flops::pool_macs(f * f, 1, l.hw.0, l.hw.1),
                    _ => flops::conv_macs(1, 1, f, f, l.hw.0, l.hw.1),
                };
                out.push(LayerCost::overhead(format!("{PREFIX}.down.f{f}"), macs, l.hw));
            }
        }
        out
    }

    /// Active output cells per cost row under `pyramid`, aligned with [`Graph::costs`].
    pub fn mask_ones(&self, pyramid: &MaskPyramid) -> Result<Vec<Option<usize>>> {
        self.check_pyramid(pyramid)?;
        let ones = |lvl: Option<usize>| lvl.map(|l| pyramid.levels[l].count_ones());
        let mut out: Vec<Option<usize>> = self.nodes.iter().map(|n| ones(n.level)).collect();
        for h in &self.heads {
            let o = if h.masked { ones(h.level) } else { None };
            out.push(o);
            out.push(o);
        }
        let overhead = self.costs().len() - out.len();
        out.extend(std::iter::repeat_n(None, overhead));
        Ok(out)
    }

    fn check_pyramid(&self, pyramid: &MaskPyramid) -> Result<()> {
        if pyramid.levels.len() != self.levels.len()
            || pyramid.levels.iter().zip(&self.levels).any(|(m, l)| m.dims() != l.hw)
        {
            return Err(Error::shape(format!(
                "mask pyramid {:?} does not match levels {:?}",
                pyramid.levels.iter().map(SaliencyMask::dims).collect::<Vec<_>>(),
                self.levels.iter().map(|l| l.hw).collect::<Vec<_>>()
            )));
        }
        Ok(())
    }

    /// Pyramid with every level all ones.
    pub fn full_pyramid(&self) -> MaskPyramid {
        MaskPyramid::all_ones(&self.levels.iter().map(|l| l.hw).collect::<Vec<_>>())
    }

    /// Downsampling kernel of a level, from the parameters.
    fn down_kernel<T: Scalar>(&self, tape: &Tape<T>, b: &Bindings, f: usize) -> Result<DownsampleKernel<T>> {
        let m = self.selective.as_ref().expect("levels imply a selective module");
        Ok(match m.cfg.downsampler {
            Downsampler::StrideConvLearned => DownsampleKernel::Learned {
                weights: tape.value(b.get(&down_name(f, "w"))?).data().to_vec(),
                bias: tape.value(b.get(&down_name(f, "b"))?).data()[0],
            },
            _ => DownsampleKernel::Uniform,
        })
    }

    /// Hard pyramid the inference path would derive from a probability map
    /// recorded on `tape`.
    pub fn pyramid_from_map<T: Scalar>(&self, tape: &Tape<T>, b: &Bindings, prob: Var) -> Result<MaskPyramid> {
        let m = self.selective.as_ref().ok_or_else(|| Error::invalid("graph has no selective module"))?;
        let pm = ProbMap::from_tensor(&tape.value(prob))?;
        self.derive_pyramid(tape, b, binarize(&pm, m.cfg.psi))
    }

    /// Hard pyramid from a level-0 mask.
    fn derive_pyramid<T: Scalar>(&self, tape: &Tape<T>, b: &Bindings, base: SaliencyMask) -> Result<MaskPyramid> {
        let m = self.selective.as_ref().expect("levels imply a selective module");
        let mut levels = vec![base];
        for l in &self.levels[1..] {
            let lvl = match m.cfg.downsampler {
                Downsampler::Maxpool => downsample_maxpool(&levels[0], l.factor)?,
                _ => downsample_stride_conv(&levels[0], l.factor, &self.down_kernel(tape, b, l.factor)?)?,
            };
            levels.push(lvl);
        }
        Ok(MaskPyramid { levels })
    }

    /// Differentiable map at level `l` derived from `src` (1-channel).
    fn down_map<T: Scalar>(&self, tape: &Tape<T>, b: &Bindings, src: Var, f: usize) -> Result<Var> {
        let m = self.selective.as_ref().expect("levels imply a selective module");
        let p = ConvParams::square(f, f, 0, 1);
        match m.cfg.downsampler {
            Downsampler::StrideConvLearned => {
                let z = tape.conv2d(src, b.get(&down_name(f, "w"))?, b.get(&down_name(f, "b"))?, p)?;
                Ok(tape.sigmoid_clamped(z, LOGIT_CLAMP))
            }
            Downsampler::StrideConvFixed => {
                let w = tape.constant(Tensor::filled([1, 1, f, f], T::lit(1.0 / (f * f) as f64)));
                let zero = tape.constant(Tensor::zeros([1, 1, 1, 1]));
                tape.conv2d(src, w, zero, p)
            }
            Downsampler::Maxpool => tape.maxpool(src, PoolParams::new(f, f)),
        }
    }

    fn conv<T: Scalar>(
        &self,
        tape: &Tape<T>,
        x: Var,
        w: Var,
        b: Var,
        p: ConvParams,
        mask: Option<&Rc<SaliencyMask>>,
    ) -> Result<Var> {
        match mask {
            Some(m) => Ok(tape.masked_conv2d(x, w, b, Rc::clone(m), p)?.0),
            None => tape.conv2d(x, w, b, p),
        }
    }

    /// Records the forward pass of one image (`1 x C x H x W`) on `tape`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &Tape<T>,
        b: &Bindings,
        image: Var,
        opts: &ForwardOptions<'_, T>,
    ) -> Result<Forward> {
        let iv = tape.value(image);
        let inp = &self.spec.input;
        if iv.dims() != [1, inp.channels, inp.height, inp.width] {
            return Err(Error::shape(format!(
                "image {:?} does not match input 1x{}x{}x{}",
                iv.dims(),
                inp.channels,
                inp.height,
                inp.width
            )));
        }
        if let Some(p) = opts.masks {
            if opts.mode == Mode::TrainIndirect {
                return Err(Error::invalid("hard masks cannot be injected in indirect mode"));
            }
            self.check_pyramid(p)?;
        }
        if let Some(fs) = opts.frozen_soft {
            if fs.len() != self.levels.len() {
                return Err(Error::shape("frozen soft maps must cover every level"));
            }
        }
        let hard = opts.mode != Mode::TrainIndirect;
        let mut vals: Vec<Var> = Vec::with_capacity(self.nodes.len());
        let mut work = Vec::new();
        let mut out = Forward { prob: None, level_maps: Vec::new(), pyramid: None, heads: Vec::new(), work: Vec::new(), layers: Vec::new() };
        let mut hard_masks: Vec<Rc<SaliencyMask>> = Vec::new();
        let mut soft: Vec<Var> = Vec::new();
        let get = |vals: &Vec<Var>, s: Src| match s {
            Src::Input => image,
            Src::Node(j) => vals[j],
        };
        for (i, n) in self.nodes.iter().enumerate() {
            let xs: Vec<Var> = n.inputs.iter().map(|&s| get(&vals, s)).collect();
            let x = xs[0];
            let before = tape.work();
            let y = match &n.op {
                Op::Conv { p, relu, .. } | Op::Deconv { p, relu, .. } => {
                    let (w, bb) = (b.get(&format!("{}.w", n.name))?, b.get(&format!("{}.b", n.name))?);
                    let mask = if hard { n.level.map(|l| &hard_masks[l]) } else { None };
                    let mut y = if matches!(n.op, Op::Deconv { .. }) {
                        tape.deconv2d(x, w, bb, *p)?
                    } else {
                        self.conv(tape, x, w, bb, *p, mask)?
                    };
                    if *relu {
                        y = tape.relu(y);
                    }
                    if let (false, Some(l)) = (hard, n.level) {
                        let m = if n.gated {
                            soft[l]
                        } else if let Some(fs) = opts.frozen_soft {
                            tape.constant(fs[l].clone())
                        } else {
                            tape.detach(soft[l])
                        };
                        y = tape.soft_mask(y, m)?;
                    }
                    y
                }
                Op::MaxPool(p) => tape.maxpool(x, *p)?,
                Op::AvgPool(p) => tape.avgpool(x, *p)?,
                Op::Relu => tape.relu(x),
                Op::BatchNorm { eps } => {
                    let g = |part: &str| b.get(&format!("{}.{part}", n.name));
                    tape.batchnorm(x, g("scale")?, g("shift")?, g("mean")?, g("var")?, *eps)?
                }
                Op::Concat => tape.concat(&xs)?,
                Op::Add => {
                    let mut acc = xs[0];
                    for &o in &xs[1..] {
                        acc = tape.add(acc, o)?;
                    }
                    acc
                }
            };
            if matches!(n.op, Op::Conv { .. } | Op::Deconv { .. }) {
                work.push((n.name.clone(), delta(tape.work(), before)));
            }
            vals.push(y);

            if Some(i) == self.attach {
                let m = self.selective.as_ref().expect("attach implies module");
                let before = tape.work();
                let prob = m.forward(tape, b, y, y)?;
                out.prob = Some(prob);
                if hard {
                    let pyramid = match opts.masks {
                        Some(p) => p.clone(),
                        None => {
                            let pm = ProbMap::from_tensor(&tape.value(prob))?;
                            self.derive_pyramid(tape, b, binarize(&pm, m.cfg.psi))?
                        }
                    };
                    if opts.mode == Mode::TrainDirect {
                        out.level_maps.push(prob);
                        for l in &self.levels[1..] {
                            out.level_maps.push(self.down_map(tape, b, prob, l.factor)?);
                        }
                    }
                    hard_masks = pyramid.levels.iter().cloned().map(Rc::new).collect();
                    out.pyramid = Some(pyramid);
                } else {
                    soft.push(prob);
                    for l in &self.levels[1..] {
                        soft.push(self.down_map(tape, b, prob, l.factor)?);
                    }
                    out.level_maps = soft.clone();
                }
                work.push((PREFIX.to_string(), delta(tape.work(), before)));
            }
        }
        for h in &self.heads {
            let x = vals[h.source];
            let mask = if hard && h.masked { h.level.map(|l| &hard_masks[l]) } else { None };
            let mut pair = [x; 2];
            for (k, part) in ["cls", "loc"].iter().enumerate() {
                let before = tape.work();
                let (w, bb) = (b.get(&format!("{}.{part}.w", h.name))?, b.get(&format!("{}.{part}.b", h.name))?);
                pair[k] = self.conv(tape, x, w, bb, h.conv, mask)?;
                work.push((format!("{}.{part}", h.name), delta(tape.work(), before)));
            }
            out.heads.push((pair[0], pair[1]));
        }
        out.work = work;
        out.layers = vals;
        Ok(out)
    }

    /// Inference on one image with constant parameters.
    pub fn infer(
        &self,
        params: &ParamStore,
        image: &Tensor,
        decode: &DecodeParams,
        masks: Option<&MaskPyramid>,
    ) -> Result<Inference> {
        let tape = Tape::new();
        let b = params.bind(&tape, |_| false);
        let x = tape.constant(image.clone());
        let opts = ForwardOptions { masks, ..ForwardOptions::new(Mode::Inference) };
        let fwd = self.forward(&tape, &b, x, &opts)?;
        let heads = self.head_raw(&tape, &fwd);
        let detections = decode_and_nms(&heads, &self.anchors, self.image_hw(), decode)?;
        Ok(Inference {
            prob: fwd.prob.map(|p| ProbMap::from_tensor(&tape.value(p))).transpose()?,
            pyramid: fwd.pyramid,
            heads,
            detections,
            work: fwd.work,
        })
    }

    /// Re-runs every guided conv densely on the inputs the masked pass saw
    /// and compares: values must match bit for bit at mask-1 cells and be
    /// exactly zero elsewhere. Heads are checked the same way.
    pub fn guided_equivalence(&self, params: &ParamStore, image: &Tensor, masks: Option<&MaskPyramid>) -> Result<Equivalence> {
        let tape = Tape::new();
        let b = params.bind(&tape, |_| false);
        let x = tape.constant(image.clone());
        let opts = ForwardOptions { masks, ..ForwardOptions::new(Mode::Inference) };
        let fwd = self.forward(&tape, &b, x, &opts)?;
        let Some(pyr) = fwd.pyramid.as_ref() else {
            return Ok(Equivalence::default());
        };
        let mut eq = Equivalence::default();
        let val = |s: Src| match s {
            Src::Input => tape.value(x),
            Src::Node(j) => tape.value(fwd.layers[j]),
        };
        let mut compare = |name: &str, input: &Tensor, p: &ConvParams, relu: bool, got: &Tensor, mask: &SaliencyMask| -> Result<()> {
            let w = params.get(&format!("{name}.w"))?;
            let bias = params.get(&format!("{name}.b"))?;
            let mut dense = crate::conv::conv2d_dense(input, w, bias.data(), p)?;
            if relu {
                dense = crate::conv::relu(&dense);
            }
            let [_, c, h, wd] = dense.dims();
            eq.layers += 1;
            for ch in 0..c {
                for y in 0..h {
                    for xx in 0..wd {
                        let g = got.get(0, ch, y, xx);
                        let want = if mask.get(y, xx) { dense.get(0, ch, y, xx) } else { 0.0 };
                        eq.values += 1;
                        if g.to_bits() != want.to_bits() {
                            eq.mismatches += 1;
                        }
                    }
                }
            }
            Ok(())
        };
        for (i, n) in self.nodes.iter().enumerate() {
            if let (Op::Conv { p, relu, .. }, Some(l)) = (&n.op, n.level) {
                compare(&n.name, &val(n.inputs[0]), p, *relu, &tape.value(fwd.layers[i]), &pyr.levels[l])?;
            }
        }
        for (h, &(c, lc)) in self.heads.iter().zip(&fwd.heads) {
            if let (true, Some(l)) = (h.masked, h.level) {
                let src = tape.value(fwd.layers[h.source]);
                compare(&format!("{}.cls", h.name), &src, &h.conv, false, &tape.value(c), &pyr.levels[l])?;
                compare(&format!("{}.loc", h.name), &src, &h.conv, false, &tape.value(lc), &pyr.levels[l])?;
            }
        }
        Ok(eq)
    }

    /// Head tensors of a forward pass with their valid cells.
    pub fn head_raw<T: Scalar>(&self, tape: &Tape<T>, fwd: &Forward) -> Vec<HeadRaw<T>> {
        self.heads
            .iter()
            .zip(&fwd.heads)
            .map(|(h, &(c, l))| HeadRaw {
                layout: h.layout,
                cls: (*tape.value(c)).clone(),
                loc: (*tape.value(l)).clone(),
                valid: match (&fwd.pyramid, h.masked, h.level) {
                    (Some(p), true, Some(lv)) => Some(p.levels[lv].clone()),
                    _ => None,
                },
            })
            .collect()
    }
}

fn delta(after: WorkCount, before: WorkCount) -> WorkCount {
    WorkCount { row_products: after.row_products - before.row_products, macs: after.macs - before.macs }
}

/// Level index for a grid, adding a level when `hw` is an integer
/// downsampling of `base`.
fn level_for(levels: &mut Vec<Level>, base: (usize, usize), hw: (usize, usize)) -> Option<usize> {
    if let Some(i) = levels.iter().position(|l| l.hw == hw) {
        return Some(i);
    }
    if hw.0 == 0 || hw.0 > base.0 {
        return None;
    }
    let f = base.0 / hw.0;
    if f < 2 || base.0 / f != hw.0 || base.1 / f != hw.1 {
        return None;
    }
    levels.push(Level { hw, factor: f });
    Some(levels.len() - 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn level_factors() {
        let mut lv = vec![Level { hw: (16, 16), factor: 1 }];
        assert_eq!(level_for(&mut lv, (16, 16), (8, 8)), Some(1));
        assert_eq!(level_for(&mut lv, (16, 16), (8, 8)), Some(1));
        assert_eq!(level_for(&mut lv, (16, 16), (5, 5)), Some(2));
        assert_eq!(lv[2].factor, 3);
        assert_eq!(level_for(&mut lv, (16, 16), (7, 7)), None);
        assert_eq!(level_for(&mut lv, (16, 16), (8, 4)), None);
        assert_eq!(level_for(&mut lv, (16, 16), (32, 32)), None);
    }
}
