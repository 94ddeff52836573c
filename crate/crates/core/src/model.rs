//! Generator (shared encoder + style-modulated decoder) and the two patch
//! discriminators.
//!
//! Layer stack, for `b = base_channels`, `k = downsample_count` and
//! `C = b * 2^k`:
//!
//! * encoder: 7x7 conv (3 -> b), `k` stride-2 4x4 convs doubling the width,
//!   `residual_blocks` residual blocks of two 3x3 convs. Every conv is followed
//!   by instance normalization, so none carries a bias.
//! * decoder: `residual_blocks` residual blocks whose normalization layers are
//!   modulated by the frozen style code, `k` stages of nearest 2x upsampling +
//!   5x5 conv halving the width, then a biased 7x7 conv to `input_channels`
//!   and `tanh`.
//! * discriminator: `discriminator_layers` stride-2 4x4 convs with bias and
//!   leaky ReLU; the last one emits a single logit channel.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, PadMode, Shape, Tensor, Var};
use crate::error::{Error, Result};
use crate::image::{ImageTensor, ValueDomain};
use crate::imageops;

const LEAKY_SLOPE: f32 = 0.2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub base_channels: usize,
    pub downsample_count: usize,
    pub residual_blocks: usize,
    pub input_channels: usize,
    pub discriminator_layers: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            base_channels: 64,
            downsample_count: 2,
            residual_blocks: 4,
            input_channels: 3,
            discriminator_layers: 4,
        }
    }
}

impl NetConfig {
    /// Small configuration for tests and smoke runs.
    pub fn toy() -> Self {
        Self {
            base_channels: 16,
            ..Self::default()
        }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, v) in [
            ("net.base_channels", self.base_channels),
            ("net.downsample_count", self.downsample_count),
            ("net.residual_blocks", self.residual_blocks),
            ("net.input_channels", self.input_channels),
            ("net.discriminator_layers", self.discriminator_layers),
        ] {
            if v == 0 {
                out.push(format!("{name} must be >= 1"));
            }
        }
        if self.downsample_count > 8 {
            out.push("net.downsample_count must be <= 8".into());
        }
        if self.discriminator_layers > 12 {
            out.push("net.discriminator_layers must be <= 12".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }

    pub fn content_channels(&self) -> usize {
        self.base_channels << self.downsample_count
    }

    /// Spatial dims must be multiples of this.
    pub fn spatial_divisor(&self) -> usize {
        1 << self.downsample_count
    }

    /// Width of each style-modulated decoder normalization layer.
    pub fn style_dims(&self) -> Vec<usize> {
        vec![self.content_channels(); 2 * self.residual_blocks]
    }

    /// Logit map dims for an input of `rows x cols`.
    pub fn discriminator_output(&self, rows: usize, cols: usize) -> (usize, usize) {
        let step = |n: usize| (n + 2).saturating_sub(4) / 2 + 1;
        (0..self.discriminator_layers).fold((rows, cols), |(r, c), _| (step(r), step(c)))
    }

    fn encoder_layout(&self) -> Vec<(String, Shape)> {
        let b = self.base_channels;
        let mut v = vec![("enc.in.weight".to_string(), [b, self.input_channels, 7, 7])];
        for i in 0..self.downsample_count {
            v.push((format!("enc.down{i}.weight"), [b << (i + 1), b << i, 4, 4]));
        }
        let c = self.content_channels();
        for r in 0..self.residual_blocks {
            v.push((format!("enc.res{r}.conv1.weight"), [c, c, 3, 3]));
            v.push((format!("enc.res{r}.conv2.weight"), [c, c, 3, 3]));
        }
        v
    }

    fn decoder_layout(&self) -> Vec<(String, Shape)> {
        let c = self.content_channels();
        let mut v = Vec::new();
        for r in 0..self.residual_blocks {
            v.push((format!("dec.res{r}.conv1.weight"), [c, c, 3, 3]));
            v.push((format!("dec.res{r}.conv2.weight"), [c, c, 3, 3]));
        }
        for i in 0..self.downsample_count {
            v.push((format!("dec.up{i}.weight"), [c >> (i + 1), c >> i, 5, 5]));
        }
        v.push(("dec.out.weight".into(), [self.input_channels, self.base_channels, 7, 7]));
        v.push(("dec.out.bias".into(), [1, self.input_channels, 1, 1]));
        v
    }

    fn discriminator_layout(&self, prefix: &str) -> Vec<(String, Shape)> {
        let b = self.base_channels;
        let mut v = Vec::new();
        let mut cin = self.input_channels;
        for l in 0..self.discriminator_layers {
            let cout = if l + 1 == self.discriminator_layers { 1 } else { b << l };
            v.push((format!("{prefix}.conv{l}.weight"), [cout, cin, 4, 4]));
            v.push((format!("{prefix}.conv{l}.bias"), [1, cout, 1, 1]));
            cin = cout;
        }
        v
    }
}

/// Named, ordered parameter tensors of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    fn from_layout(layout: Vec<(String, Shape)>, rng: &mut ChaCha8Rng) -> Self {
        let mut names = Vec::with_capacity(layout.len());
        let mut tensors = Vec::with_capacity(layout.len());
        for (name, shape) in layout {
            let t = if name.ends_with(".bias") {
                Tensor::zeros(shape)
            } else {
                let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
                let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
                let n = shape.iter().product();
                let data = (0..n).map(|_| normal.sample(rng) as f32).collect();
                Tensor::from_vec(shape, data).expect("layout shape")
            };
            names.push(name);
            tensors.push(t);
        }
        Self { names, tensors }
    }

    pub fn new(entries: Vec<(String, Tensor)>) -> Self {
        let (names, tensors) = entries.into_iter().unzip();
        Self { names, tensors }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.tensors[i])
    }

    /// Places every tensor on the graph.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| if trainable { g.variable(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        Bound { vars }
    }
}

/// Graph handles for a [`ParamSet`], in the same order.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn cursor(&self) -> std::slice::Iter<'_, Var> {
        self.vars.iter()
    }
}

fn next(it: &mut std::slice::Iter<'_, Var>) -> Result<Var> {
    it.next()
        .copied()
        .ok_or_else(|| Error::Contract("parameter set is shorter than the network layout".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleLayer {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
}

/// Frozen per-domain scale/shift vectors, one pair per modulated layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleCode {
    pub layers: Vec<StyleLayer>,
}

impl StyleCode {
    /// Draws every entry i.i.d. from the standard normal.
    pub fn sample(dims: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0f64, 1.0).expect("unit normal");
        let mut draw = |n: usize| -> Vec<f32> { (0..n).map(|_| normal.sample(rng) as f32).collect() };
        let layers = dims
            .iter()
            .map(|&d| {
                let gamma = draw(d);
                let beta = draw(d);
                StyleLayer { gamma, beta }
            })
            .collect();
        Self { layers }
    }

    pub fn matches(&self, cfg: &NetConfig) -> bool {
        let dims = cfg.style_dims();
        self.layers.len() == dims.len()
            && self
                .layers
                .iter()
                .zip(&dims)
                .all(|(l, &d)| l.gamma.len() == d && l.beta.len() == d)
    }

    pub fn numel(&self) -> usize {
        self.layers.iter().map(|l| l.gamma.len() + l.beta.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Domain {
    /// Synthetic source domain.
    A,
    /// Real target domain.
    B,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: NetConfig,
    pub encoder: ParamSet,
    pub decoder: ParamSet,
    pub dis_a: ParamSet,
    pub dis_b: ParamSet,
    pub style_a: StyleCode,
    pub style_b: StyleCode,
    pub seed: u64,
}

/// Builds a model with fan-in scaled normal weights, zero biases and style
/// codes drawn from the standard normal.
pub fn init_model(cfg: &NetConfig, seed: u64) -> Result<ModelState> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let encoder = ParamSet::from_layout(cfg.encoder_layout(), &mut rng);
    let decoder = ParamSet::from_layout(cfg.decoder_layout(), &mut rng);
    let dis_a = ParamSet::from_layout(cfg.discriminator_layout("dis_a"), &mut rng);
    let dis_b = ParamSet::from_layout(cfg.discriminator_layout("dis_b"), &mut rng);
    let style_a = StyleCode::sample(&cfg.style_dims(), &mut rng);
    let style_b = StyleCode::sample(&cfg.style_dims(), &mut rng);
    Ok(ModelState {
        config: cfg.clone(),
        encoder,
        decoder,
        dis_a,
        dis_b,
        style_a,
        style_b,
        seed,
    })
}

impl ModelState {
    pub fn style(&self, d: Domain) -> &StyleCode {
        match d {
            Domain::A => &self.style_a,
            Domain::B => &self.style_b,
        }
    }

    pub fn discriminator(&self, d: Domain) -> &ParamSet {
        match d {
            Domain::A => &self.dis_a,
            Domain::B => &self.dis_b,
        }
    }

    /// Checks every parameter tensor against the layout implied by the config.
    pub fn check_layout(&self) -> Result<()> {
        let cfg = &self.config;
        let expect = [
            (&self.encoder, cfg.encoder_layout()),
            (&self.decoder, cfg.decoder_layout()),
            (&self.dis_a, cfg.discriminator_layout("dis_a")),
            (&self.dis_b, cfg.discriminator_layout("dis_b")),
        ];
        for (set, layout) in expect {
            if set.len() != layout.len() {
                return Err(Error::Contract("parameter count differs from config".into()));
            }
            for ((name, t), (lname, shape)) in set.iter().zip(&layout) {
                if name != lname || t.shape() != *shape {
                    return Err(Error::Contract(format!(
                        "parameter {name} {:?} does not match layout {lname} {shape:?}",
                        t.shape()
                    )));
                }
            }
        }
        if !self.style_a.matches(cfg) || !self.style_b.matches(cfg) {
            return Err(Error::Contract("style code widths differ from config".into()));
        }
        Ok(())
    }
}

/// Trainable scalar count: encoder, decoder and both discriminators.
/// Style codes are frozen and excluded.
pub fn count_params(state: &ModelState) -> usize {
    state.encoder.numel() + state.decoder.numel() + state.dis_a.numel() + state.dis_b.numel()
}

/// Generator-only trainable count (encoder + decoder).
pub fn count_generator_params(state: &ModelState) -> usize {
    state.encoder.numel() + state.decoder.numel()
}

fn conv_block(g: &mut Graph, x: Var, w: Var, pad: usize, stride: usize) -> Result<Var> {
    let p = g.pad(x, pad, PadMode::Reflect)?;
    g.conv2d(p, w, None, stride)
}

pub fn check_divisible(cfg: &NetConfig, rows: usize, cols: usize) -> Result<()> {
    let d = cfg.spatial_divisor();
    if rows % d != 0 || cols % d != 0 || rows < 2 * d || cols < 2 * d {
        return Err(Error::dim(format!(
            "{rows}x{cols} must be a multiple of {d} and at least {}x{}",
            2 * d,
            2 * d
        )));
    }
    Ok(())
}

/// Encoder forward on the graph.
pub fn encode_graph(cfg: &NetConfig, g: &mut Graph, enc: &Bound, x: Var) -> Result<Var> {
    let [_, c, h, w] = g.shape(x);
    if c != cfg.input_channels {
        return Err(Error::dim(format!(
            "encoder expects {} channels, got {c}",
            cfg.input_channels
        )));
    }
    check_divisible(cfg, h, w)?;
    let mut p = enc.cursor();
    let mut h = conv_block(g, x, next(&mut p)?, 3, 1)?;
    h = g.instance_norm(h);
    h = g.relu(h);
    for _ in 0..cfg.downsample_count {
        h = conv_block(g, h, next(&mut p)?, 1, 2)?;
        h = g.instance_norm(h);
        h = g.relu(h);
    }
    for _ in 0..cfg.residual_blocks {
        let mut t = conv_block(g, h, next(&mut p)?, 1, 1)?;
        t = g.instance_norm(t);
        t = g.relu(t);
        t = conv_block(g, t, next(&mut p)?, 1, 1)?;
        t = g.instance_norm(t);
        h = g.add(h, t)?;
    }
    Ok(h)
}

/// Decoder forward on the graph, modulated by `style`.
pub fn decode_graph(cfg: &NetConfig, g: &mut Graph, dec: &Bound, ce: Var, style: &StyleCode) -> Result<Var> {
    if !style.matches(cfg) {
        return Err(Error::Contract(format!(
            "style code with {} layers does not fit decoder widths {:?}",
            style.layers.len(),
            cfg.style_dims()
        )));
    }
    let [_, c, _, _] = g.shape(ce);
    if c != cfg.content_channels() {
        return Err(Error::dim(format!(
            "decoder expects {} code channels, got {c}",
            cfg.content_channels()
        )));
    }
    let mut p = dec.cursor();
    let mut mods = style.layers.iter();
    let mut modulate = |g: &mut Graph, x: Var| -> Result<Var> {
        let l = mods.next().expect("style layer count checked above");
        let n = g.instance_norm(x);
        g.channel_affine(n, Rc::new(l.gamma.clone()), &l.beta)
    };
    let mut h = ce;
    for _ in 0..cfg.residual_blocks {
        let mut t = conv_block(g, h, next(&mut p)?, 1, 1)?;
        t = modulate(g, t)?;
        t = g.relu(t);
        t = conv_block(g, t, next(&mut p)?, 1, 1)?;
        t = modulate(g, t)?;
        h = g.add(h, t)?;
    }
    for _ in 0..cfg.downsample_count {
        h = g.upsample2(h);
        h = conv_block(g, h, next(&mut p)?, 2, 1)?;
        h = g.instance_norm(h);
        h = g.relu(h);
    }
    let w = next(&mut p)?;
    let b = next(&mut p)?;
    let padded = g.pad(h, 3, PadMode::Reflect)?;
    let out = g.conv2d(padded, w, Some(b), 1)?;
    Ok(g.tanh(out))
}

/// Patch discriminator forward on the graph; returns raw logits.
pub fn discriminate_graph(cfg: &NetConfig, g: &mut Graph, dis: &Bound, x: Var) -> Result<Var> {
    let mut p = dis.cursor();
    let mut h = x;
    for l in 0..cfg.discriminator_layers {
        let w = next(&mut p)?;
        let b = next(&mut p)?;
        let padded = g.pad(h, 1, PadMode::Zero)?;
        h = g.conv2d(padded, w, Some(b), 2)?;
        if l + 1 < cfg.discriminator_layers {
            h = g.leaky_relu(h, LEAKY_SLOPE);
        }
    }
    Ok(h)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CodeKind {
    Content,
    Edge,
    ContentEdge,
}

/// Encoder output with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    tensor: Tensor,
    kind: CodeKind,
}

impl LatentCode {
    pub fn new(tensor: Tensor, kind: CodeKind) -> Self {
        Self { tensor, kind }
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn kind(&self) -> CodeKind {
        self.kind
    }
}

/// Sobel edge map of a signed image, replicated to `channels` planes.
pub fn edge_input(img: &ImageTensor, channels: usize) -> Result<ImageTensor> {
    imageops::sobel_edges(img)?.replicate_channels(channels)
}

/// Encodes an image (`Content`) or an edge map (`Edge`) with the shared encoder.
pub fn encode(state: &ModelState, img: &ImageTensor, kind: CodeKind) -> Result<LatentCode> {
    if kind == CodeKind::ContentEdge {
        return Err(Error::Contract("the encoder emits content or edge codes only".into()));
    }
    let mut g = Graph::new();
    let enc = state.encoder.bind(&mut g, false);
    let x = g.constant(Tensor::from_image(img));
    let code = encode_graph(&state.config, &mut g, &enc, x)?;
    Ok(LatentCode::new(g.value(code).clone(), kind))
}

/// Content-edge code `c + e`.
pub fn fuse(content: &LatentCode, edge: &LatentCode) -> Result<LatentCode> {
    if content.kind != CodeKind::Content || edge.kind != CodeKind::Edge {
        return Err(Error::Contract(format!(
            "fuse needs (Content, Edge), got ({:?}, {:?})",
            content.kind, edge.kind
        )));
    }
    if content.tensor.shape() != edge.tensor.shape() {
        return Err(Error::Contract(format!(
            "code shapes {:?} and {:?} differ",
            content.tensor.shape(),
            edge.tensor.shape()
        )));
    }
    let data = content
        .tensor
        .data()
        .iter()
        .zip(edge.tensor.data())
        .map(|(a, b)| a + b)
        .collect();
    Ok(LatentCode::new(
        Tensor::from_vec(content.tensor.shape(), data)?,
        CodeKind::ContentEdge,
    ))
}

pub fn decode(state: &ModelState, ce: &LatentCode, style: &StyleCode) -> Result<ImageTensor> {
    if ce.kind != CodeKind::ContentEdge {
        return Err(Error::Contract(format!("decode needs a ContentEdge code, got {:?}", ce.kind)));
    }
    let mut g = Graph::new();
    let dec = state.decoder.bind(&mut g, false);
    let x = g.constant(ce.tensor.clone());
    let out = decode_graph(&state.config, &mut g, &dec, x, style)?;
    Ok(g.value(out).to_images(ValueDomain::Signed)?.remove(0))
}

pub fn discriminate(state: &ModelState, which: Domain, img: &ImageTensor) -> Result<Tensor> {
    if img.channels() != state.config.input_channels {
        return Err(Error::dim("discriminator input channel mismatch"));
    }
    let mut g = Graph::new();
    let dis = state.discriminator(which).bind(&mut g, false);
    let x = g.constant(Tensor::from_image(img));
    let out = discriminate_graph(&state.config, &mut g, &dis, x)?;
    Ok(g.value(out).clone())
}

/// Graph-level `E(x) + E(edges)`, or `E(x) + 0` when edges are disabled.
pub fn content_edge_graph(
    cfg: &NetConfig,
    g: &mut Graph,
    enc: &Bound,
    images: Var,
    edges: Option<Var>,
) -> Result<Var> {
    let c = encode_graph(cfg, g, enc, images)?;
    let e = match edges {
        Some(e) => encode_graph(cfg, g, enc, e)?,
        None => {
            let shape = g.shape(c);
            g.constant(Tensor::zeros(shape))
        }
    };
    g.add(c, e)
}

/// Translates both views of a synthetic pair into the target domain with the
/// same encoder, fused edge codes and the target style.
pub fn translate_pair(
    state: &ModelState,
    left: &ImageTensor,
    right: &ImageTensor,
    edges: Option<(&ImageTensor, &ImageTensor)>,
) -> Result<(ImageTensor, ImageTensor)> {
    if !left.same_dims(right) {
        return Err(Error::dim("left and right views differ in size"));
    }
    let cfg = &state.config;
    let mut g = Graph::new();
    let enc = state.encoder.bind(&mut g, false);
    let dec = state.decoder.bind(&mut g, false);
    let x = g.constant(Tensor::stack(&[left, right])?);
    let e = match edges {
        Some((el, er)) => {
            let el = if el.channels() == 1 { el.replicate_channels(cfg.input_channels)? } else { el.clone() };
            let er = if er.channels() == 1 { er.replicate_channels(cfg.input_channels)? } else { er.clone() };
            Some(g.constant(Tensor::stack(&[&el, &er])?))
        }
        None => None,
    };
    let ce = content_edge_graph(cfg, &mut g, &enc, x, e)?;
    let out = decode_graph(cfg, &mut g, &dec, ce, &state.style_b)?;
    let mut imgs = g.value(out).to_images(ValueDomain::Signed)?;
    let r = imgs.pop().expect("two outputs");
    let l = imgs.pop().expect("two outputs");
    Ok((l, r))
}
