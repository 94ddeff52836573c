//! Minimal reverse-mode automatic differentiation over `N x C x H x W`
//! float tensors.
//!
//! A [`Graph`] is an append-only tape. Every operation evaluates eagerly and
//! records what it needs for the backward pass. Nodes whose inputs never
//! require gradients are skipped during [`Graph::backward`].
//!
//! Everything runs on the calling thread in a fixed order, so a given build
//! produces bit-identical values and gradients for identical inputs.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::image::{ImageTensor, ValidityMask, ValueDomain};
use crate::imageops::{self, WarpPlan};

pub type Shape = [usize; 4];

const NORM_EPS: f32 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: Shape, value: f32) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::dim(format!(
                "{} values do not fill shape {shape:?}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(v: f32) -> Self {
        Self {
            shape: [1, 1, 1, 1],
            data: vec![v],
        }
    }

    /// Stacks same-shaped images along the batch axis.
    pub fn stack(images: &[&ImageTensor]) -> Result<Self> {
        let first = images.first().ok_or_else(|| Error::dim("cannot stack zero images"))?;
        let (c, h, w) = (first.channels(), first.rows(), first.cols());
        let mut data = Vec::with_capacity(images.len() * c * h * w);
        for img in images {
            if img.channels() != c || img.rows() != h || img.cols() != w {
                return Err(Error::dim("stacked images differ in shape"));
            }
            data.extend_from_slice(img.data());
        }
        Ok(Self {
            shape: [images.len(), c, h, w],
            data,
        })
    }

    pub fn from_image(img: &ImageTensor) -> Self {
        Self {
            shape: [1, img.channels(), img.rows(), img.cols()],
            data: img.data().to_vec(),
        }
    }

    /// Splits the batch axis back into images.
    pub fn to_images(&self, domain: ValueDomain) -> Result<Vec<ImageTensor>> {
        let [n, c, h, w] = self.shape;
        let per = c * h * w;
        (0..n)
            .map(|i| {
                ImageTensor::from_vec_clamped(self.data[i * per..(i + 1) * per].to_vec(), c, h, w, domain)
            })
            .collect()
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// The single value of a `1x1x1x1` tensor.
    pub fn item(&self) -> f32 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// One batch element as a `1 x C x H x W` tensor.
    pub fn sample(&self, i: usize) -> Tensor {
        let [_, c, h, w] = self.shape;
        let per = c * h * w;
        Tensor {
            shape: [1, c, h, w],
            data: self.data[i * per..(i + 1) * per].to_vec(),
        }
    }

    /// Copies a single channel into `channels` identical planes.
    pub fn repeat_channels(&self, channels: usize) -> Result<Tensor> {
        let [n, c, h, w] = self.shape;
        if c != 1 {
            return Err(Error::dim("repeat_channels needs a 1-channel tensor"));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * channels * plane);
        for i in 0..n {
            for _ in 0..channels {
                data.extend_from_slice(&self.data[i * plane..(i + 1) * plane]);
            }
        }
        Ok(Tensor {
            shape: [n, channels, h, w],
            data,
        })
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    Reflect,
}

/// Per-sample masked Gaussian filter state: `y = blur(m * x) / blur(m)`.
#[derive(Debug, Clone)]
pub struct MaskedFilter {
    mask: ValidityMask,
    support: Vec<f64>,
    kernel: Rc<Vec<f64>>,
}

impl MaskedFilter {
    pub fn new(mask: ValidityMask, kernel: Rc<Vec<f64>>) -> Self {
        let support = imageops::mask_support(&mask, &kernel);
        Self {
            mask,
            support,
            kernel,
        }
    }

    pub fn mask(&self) -> &ValidityMask {
        &self.mask
    }

    fn forward_plane(&self, x: &[f32], out: &mut [f32]) {
        let p: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        let y = imageops::masked_mean_filter(&p, &self.mask, &self.support, &self.kernel);
        for (o, v) in out.iter_mut().zip(y) {
            *o = v as f32;
        }
    }

    fn backward_plane(&self, g: &[f32], dx: &mut [f32]) {
        let scaled: Vec<f64> = g
            .iter()
            .zip(&self.support)
            .map(|(&g, &s)| if s > 0.0 { g as f64 / s } else { 0.0 })
            .collect();
        let b = imageops::separable_blur(&scaled, self.mask.rows(), self.mask.cols(), &self.kernel);
        for ((d, v), &m) in dx.iter_mut().zip(b).zip(self.mask.data()) {
            if m {
                *d += v as f32;
            }
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
    },
    Pad {
        x: Var,
        pad: usize,
        mode: PadMode,
    },
    InstanceNorm {
        x: Var,
        inv_std: Vec<f32>,
    },
    ChannelAffine {
        x: Var,
        gamma: Rc<Vec<f32>>,
    },
    Relu(Var),
    LeakyRelu(Var, f32),
    Tanh(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f32),
    Upsample2(Var),
    Warp {
        x: Var,
        plans: Rc<Vec<WarpPlan>>,
    },
    MaskedFilter {
        x: Var,
        filters: Rc<Vec<MaskedFilter>>,
    },
    MeanAbsDiff {
        a: Var,
        b: Var,
        masks: Option<Rc<Vec<ValidityMask>>>,
        denom: f64,
    },
    MaskedMean {
        x: Var,
        masks: Rc<Vec<ValidityMask>>,
        denom: f64,
    },
    MeanSoftplus {
        x: Var,
        sign: f32,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::dim(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape, b.shape
        )));
    }
    Ok(())
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Row-major `c = alpha * a * b + beta * c` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (isize, isize),
    b: &[f32],
    (rsb, csb): (isize, isize),
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(c.len() >= m * n);
    debug_assert!(a.len() >= m * k && b.len() >= k * n);
    // SAFETY: the slices cover every index reachable through the given
    // dimensions and strides, which the callers construct from tensor shapes.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col(x: &[f32], ci: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, oh: usize, ow: usize, cols: &mut [f32]) {
    let p = oh * ow;
    for c in 0..ci {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((c * kh + ky) * kw + kx) * p;
                for oy in 0..oh {
                    let src = (c * h + oy * stride + ky) * w + kx;
                    let dst = row + oy * ow;
                    if stride == 1 {
                        cols[dst..dst + ow].copy_from_slice(&x[src..src + ow]);
                    } else {
                        for ox in 0..ow {
                            cols[dst + ox] = x[src + ox * stride];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(cols: &[f32], ci: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, oh: usize, ow: usize, dx: &mut [f32]) {
    let p = oh * ow;
    for c in 0..ci {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((c * kh + ky) * kw + kx) * p;
                for oy in 0..oh {
                    let dst = (c * h + oy * stride + ky) * w + kx;
                    let src = row + oy * ow;
                    for ox in 0..ow {
                        dx[dst + ox * stride] += cols[src + ox];
                    }
                }
            }
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let [n, ci, h, wd] = self.shape(x);
        let [co, wci, kh, kw] = self.shape(w);
        if wci != ci {
            return Err(Error::dim(format!(
                "conv expects {wci} input channels, got {ci}"
            )));
        }
        if h < kh || wd < kw || stride == 0 {
            return Err(Error::dim(format!(
                "conv kernel {kh}x{kw} larger than input {h}x{wd}"
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [1, co, 1, 1] {
                return Err(Error::dim("conv bias must be 1 x C_out x 1 x 1"));
            }
        }
        let oh = (h - kh) / stride + 1;
        let ow = (wd - kw) / stride + 1;
        let p = oh * ow;
        let k = ci * kh * kw;
        let mut out = Tensor::zeros([n, co, oh, ow]);
        let mut cols = vec![0.0f32; k * p];
        {
            let xv = &self.nodes[x.0].value.data;
            let wv = &self.nodes[w.0].value.data;
            for i in 0..n {
                im2col(&xv[i * ci * h * wd..(i + 1) * ci * h * wd], ci, h, wd, kh, kw, stride, oh, ow, &mut cols);
                let dst = &mut out.data[i * co * p..(i + 1) * co * p];
                gemm(co, k, p, wv, (k as isize, 1), &cols, (p as isize, 1), 0.0, dst);
            }
            if let Some(b) = b {
                let bv = &self.nodes[b.0].value.data;
                for i in 0..n {
                    for (c, &bias) in bv.iter().enumerate() {
                        let start = (i * co + c) * p;
                        out.data[start..start + p].iter_mut().for_each(|v| *v += bias);
                    }
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(out, Op::Conv { x, w, b, stride }, needs))
    }

    pub fn pad(&mut self, x: Var, pad: usize, mode: PadMode) -> Result<Var> {
        let [n, c, h, w] = self.shape(x);
        if mode == PadMode::Reflect && (pad >= h || pad >= w) {
            return Err(Error::dim(format!(
                "reflect padding {pad} needs input larger than {h}x{w}"
            )));
        }
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        let mut out = Tensor::zeros([n, c, ph, pw]);
        let xv = &self.nodes[x.0].value.data;
        for plane in 0..n * c {
            let src = &xv[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out.data[plane * ph * pw..(plane + 1) * ph * pw];
            for y in 0..ph {
                let sy = y as isize - pad as isize;
                let sy = match mode {
                    PadMode::Zero if sy < 0 || sy >= h as isize => continue,
                    PadMode::Zero => sy as usize,
                    PadMode::Reflect => reflect(sy, h),
                };
                for xx in 0..pw {
                    let sx = xx as isize - pad as isize;
                    let sx = match mode {
                        PadMode::Zero if sx < 0 || sx >= w as isize => continue,
                        PadMode::Zero => sx as usize,
                        PadMode::Reflect => reflect(sx, w),
                    };
                    dst[y * pw + xx] = src[sy * w + sx];
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(out, Op::Pad { x, pad, mode }, needs))
    }

    /// Per-sample, per-channel normalization to zero mean and unit variance.
    pub fn instance_norm(&mut self, x: Var) -> Var {
        let [n, c, h, w] = self.shape(x);
        let plane = h * w;
        let mut out = self.nodes[x.0].value.clone();
        let mut inv_std = Vec::with_capacity(n * c);
        for p in out.data.chunks_mut(plane) {
            let mean = p.iter().map(|&v| v as f64).sum::<f64>() / plane as f64;
            let var = p.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / plane as f64;
            let is = (1.0 / (var + NORM_EPS as f64).sqrt()) as f32;
            let mean = mean as f32;
            p.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv_std.push(is);
        }
        let needs = self.needs(x);
        self.push(out, Op::InstanceNorm { x, inv_std }, needs)
    }

    /// `gamma[c] * x + beta[c]` with constant per-channel coefficients.
    pub fn channel_affine(&mut self, x: Var, gamma: Rc<Vec<f32>>, beta: &[f32]) -> Result<Var> {
        let [n, c, h, w] = self.shape(x);
        if gamma.len() != c || beta.len() != c {
            return Err(Error::Contract(format!(
                "modulation vectors of length {}/{} for {c} channels",
                gamma.len(),
                beta.len()
            )));
        }
        let plane = h * w;
        let mut out = self.nodes[x.0].value.clone();
        for i in 0..n {
            for ch in 0..c {
                let (g, b) = (gamma[ch], beta[ch]);
                let start = (i * c + ch) * plane;
                out.data[start..start + plane].iter_mut().for_each(|v| *v = g * *v + b);
            }
        }
        let needs = self.needs(x);
        Ok(self.push(out, Op::ChannelAffine { x, gamma }, needs))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f32) -> f32, op: Op) -> Var {
        let mut out = self.nodes[x.0].value.clone();
        out.data.iter_mut().for_each(|v| *v = f(*v));
        let needs = self.needs(x);
        self.push(out, op, needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f32) -> Var {
        self.unary(x, |v| if v > 0.0 { v } else { slope * v }, Op::LeakyRelu(x, slope))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f32::tanh, Op::Tanh(x))
    }

    pub fn add_scalar(&mut self, x: Var, c: f32) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn mul_scalar(&mut self, x: Var, c: f32) -> Var {
        self.unary(x, |v| v * c, Op::MulScalar(x, c))
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f32, f32) -> f32, op: Op) -> Result<Var> {
        same_shape(self.value(a), self.value(b), what)?;
        let out = Tensor {
            shape: self.shape(a),
            data: self.nodes[a.0]
                .value
                .data
                .iter()
                .zip(&self.nodes[b.0].value.data)
                .map(|(&x, &y)| f(x, y))
                .collect(),
        };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, op, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let [n, c, h, w] = self.shape(x);
        let mut out = Tensor::zeros([n, c, 2 * h, 2 * w]);
        let xv = &self.nodes[x.0].value.data;
        for plane in 0..n * c {
            let src = &xv[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out.data[plane * 4 * h * w..(plane + 1) * 4 * h * w];
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        let needs = self.needs(x);
        self.push(out, Op::Upsample2(x), needs)
    }

    /// Horizontal warp with one precomputed sampling plan per batch element.
    pub fn warp(&mut self, x: Var, plans: Rc<Vec<WarpPlan>>) -> Result<Var> {
        let [n, c, h, w] = self.shape(x);
        if plans.len() != n || plans.iter().any(|p| p.rows() != h || p.cols() != w) {
            return Err(Error::dim("warp plans do not match the batch"));
        }
        let plane = h * w;
        let mut out = Tensor::zeros([n, c, h, w]);
        let xv = &self.nodes[x.0].value.data;
        for i in 0..n {
            for ch in 0..c {
                let s = (i * c + ch) * plane;
                plans[i].apply_plane(&xv[s..s + plane], &mut out.data[s..s + plane]);
            }
        }
        let needs = self.needs(x);
        Ok(self.push(out, Op::Warp { x, plans }, needs))
    }

    /// Local Gaussian mean over valid pixels, one filter per batch element.
    pub fn masked_filter(&mut self, x: Var, filters: Rc<Vec<MaskedFilter>>) -> Result<Var> {
        let [n, c, h, w] = self.shape(x);
        if filters.len() != n || filters.iter().any(|f| f.mask.rows() != h || f.mask.cols() != w) {
            return Err(Error::dim("masked filters do not match the batch"));
        }
        let plane = h * w;
        let mut out = Tensor::zeros([n, c, h, w]);
        let xv = &self.nodes[x.0].value.data;
        for i in 0..n {
            for ch in 0..c {
                let s = (i * c + ch) * plane;
                filters[i].forward_plane(&xv[s..s + plane], &mut out.data[s..s + plane]);
            }
        }
        let needs = self.needs(x);
        Ok(self.push(out, Op::MaskedFilter { x, filters }, needs))
    }

    fn check_masks(&self, x: Var, masks: &[ValidityMask]) -> Result<usize> {
        let [n, c, h, w] = self.shape(x);
        if masks.len() != n || masks.iter().any(|m| m.rows() != h || m.cols() != w) {
            return Err(Error::dim("masks do not match the batch"));
        }
        let count: usize = masks.iter().map(ValidityMask::count).sum();
        Ok(count * c)
    }

    /// Mean of `|a - b|`, optionally restricted to masked pixels.
    pub fn mean_abs_diff(&mut self, a: Var, b: Var, masks: Option<Rc<Vec<ValidityMask>>>) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "mean_abs_diff")?;
        let [_, c, h, w] = self.shape(a);
        let plane = h * w;
        let denom = match &masks {
            Some(m) => self.check_masks(a, m)?,
            None => self.value(a).numel(),
        };
        if denom == 0 {
            return Err(Error::EmptySupport("l1 mask"));
        }
        let (av, bv) = (&self.nodes[a.0].value.data, &self.nodes[b.0].value.data);
        let mut sum = 0.0f64;
        for (idx, (&x, &y)) in av.iter().zip(bv).enumerate() {
            if let Some(m) = &masks {
                let i = idx / (c * plane);
                if !m[i].data()[idx % plane] {
                    continue;
                }
            }
            sum += (x as f64 - y as f64).abs();
        }
        let denom = denom as f64;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::scalar((sum / denom) as f32),
            Op::MeanAbsDiff { a, b, masks, denom },
            needs,
        ))
    }

    /// Mean of `x` over masked pixels and all channels.
    pub fn masked_mean(&mut self, x: Var, masks: Rc<Vec<ValidityMask>>) -> Result<Var> {
        let denom = self.check_masks(x, &masks)?;
        if denom == 0 {
            return Err(Error::EmptySupport("mean mask"));
        }
        let [_, c, h, w] = self.shape(x);
        let plane = h * w;
        let xv = &self.nodes[x.0].value.data;
        let mut sum = 0.0f64;
        for (idx, &v) in xv.iter().enumerate() {
            if masks[idx / (c * plane)].data()[idx % plane] {
                sum += v as f64;
            }
        }
        let denom = denom as f64;
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::scalar((sum / denom) as f32),
            Op::MaskedMean { x, masks, denom },
            needs,
        ))
    }

    /// `mean(softplus(sign * x))`; `sign = -1` gives `-log sigmoid(x)`.
    pub fn mean_softplus(&mut self, x: Var, sign: f32) -> Var {
        let xv = &self.nodes[x.0].value.data;
        let sum: f64 = xv.iter().map(|&v| softplus(sign as f64 * v as f64)).sum();
        let mean = sum / xv.len() as f64;
        let needs = self.needs(x);
        self.push(Tensor::scalar(mean as f32), Op::MeanSoftplus { x, sign }, needs)
    }

    /// Reverse pass from a scalar node. Returns gradients for every node that
    /// depends on a tracked leaf.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).numel() != 1 {
            return Err(Error::Contract("backward needs a scalar root".into()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));
        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn zeros_like(&self, v: Var) -> Tensor {
        Tensor::zeros(self.shape(v))
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, stride } => self.backward_conv(*x, *w, *b, *stride, g, grads),
            Op::Pad { x, pad, mode } => {
                let [n, c, h, w] = self.shape(*x);
                let (ph, pw) = (h + 2 * pad, w + 2 * pad);
                let mut dx = self.zeros_like(*x);
                for plane in 0..n * c {
                    let src = &g.data[plane * ph * pw..(plane + 1) * ph * pw];
                    let dst = &mut dx.data[plane * h * w..(plane + 1) * h * w];
                    for y in 0..ph {
                        let sy = y as isize - *pad as isize;
                        let sy = match mode {
                            PadMode::Zero if sy < 0 || sy >= h as isize => continue,
                            PadMode::Zero => sy as usize,
                            PadMode::Reflect => reflect(sy, h),
                        };
                        for xx in 0..pw {
                            let sx = xx as isize - *pad as isize;
                            let sx = match mode {
                                PadMode::Zero if sx < 0 || sx >= w as isize => continue,
                                PadMode::Zero => sx as usize,
                                PadMode::Reflect => reflect(sx, w),
                            };
                            dst[sy * w + sx] += src[y * pw + xx];
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::InstanceNorm { x, inv_std } => {
                let [_, _, h, w] = self.shape(*x);
                let plane = h * w;
                let mut dx = self.zeros_like(*x);
                for (p, &is) in inv_std.iter().enumerate() {
                    let r = p * plane..(p + 1) * plane;
                    let (gy, y) = (&g.data[r.clone()], &out.data[r.clone()]);
                    let mean_g = gy.iter().map(|&v| v as f64).sum::<f64>() / plane as f64;
                    let mean_gy = gy.iter().zip(y).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>()
                        / plane as f64;
                    let (mean_g, mean_gy) = (mean_g as f32, mean_gy as f32);
                    for ((d, &gv), &yv) in dx.data[r].iter_mut().zip(gy).zip(y) {
                        *d = is * (gv - mean_g - yv * mean_gy);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::ChannelAffine { x, gamma } => {
                let [n, c, h, w] = self.shape(*x);
                let plane = h * w;
                let mut dx = g.clone();
                for i in 0..n {
                    for ch in 0..c {
                        let s = (i * c + ch) * plane;
                        dx.data[s..s + plane].iter_mut().for_each(|v| *v *= gamma[ch]);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Relu(x) => {
                let mut dx = g.clone();
                for (d, &y) in dx.data.iter_mut().zip(&out.data) {
                    if y <= 0.0 {
                        *d = 0.0;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::LeakyRelu(x, slope) => {
                let xv = &self.value(*x).data;
                let mut dx = g.clone();
                for (d, &v) in dx.data.iter_mut().zip(xv) {
                    if v <= 0.0 {
                        *d *= slope;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Tanh(x) => {
                let mut dx = g.clone();
                for (d, &y) in dx.data.iter_mut().zip(&out.data) {
                    *d *= 1.0 - y * y;
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                let mut nb = g.clone();
                nb.data.iter_mut().for_each(|v| *v = -*v);
                self.accumulate(grads, *b, nb);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let mut da = g.clone();
                    da.data.iter_mut().zip(&bv.data).for_each(|(d, &y)| *d *= y);
                    self.accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let mut db = g.clone();
                    db.data.iter_mut().zip(&av.data).for_each(|(d, &x)| *d *= x);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                if self.needs(*a) {
                    let mut da = g.clone();
                    da.data.iter_mut().zip(&bv.data).for_each(|(d, &y)| *d /= y);
                    self.accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let mut db = g.clone();
                    db.data
                        .iter_mut()
                        .zip(&out.data)
                        .zip(&bv.data)
                        .for_each(|((d, &q), &y)| *d = -*d * q / y);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::AddScalar(x) => self.accumulate(grads, *x, g.clone()),
            Op::MulScalar(x, c) => {
                let mut dx = g.clone();
                dx.data.iter_mut().for_each(|v| *v *= c);
                self.accumulate(grads, *x, dx);
            }
            Op::Upsample2(x) => {
                let [n, c, h, w] = self.shape(*x);
                let mut dx = self.zeros_like(*x);
                for plane in 0..n * c {
                    let src = &g.data[plane * 4 * h * w..(plane + 1) * 4 * h * w];
                    let dst = &mut dx.data[plane * h * w..(plane + 1) * h * w];
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            dst[(y / 2) * w + xx / 2] += src[y * 2 * w + xx];
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Warp { x, plans } => {
                let [n, c, h, w] = self.shape(*x);
                let plane = h * w;
                let mut dx = self.zeros_like(*x);
                for i in 0..n {
                    for ch in 0..c {
                        let s = (i * c + ch) * plane;
                        plans[i].scatter_plane(&g.data[s..s + plane], &mut dx.data[s..s + plane]);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::MaskedFilter { x, filters } => {
                let [n, c, h, w] = self.shape(*x);
                let plane = h * w;
                let mut dx = self.zeros_like(*x);
                for i in 0..n {
                    for ch in 0..c {
                        let s = (i * c + ch) * plane;
                        filters[i].backward_plane(&g.data[s..s + plane], &mut dx.data[s..s + plane]);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::MeanAbsDiff { a, b, masks, denom } => {
                let [_, c, h, w] = self.shape(*a);
                let plane = h * w;
                let scale = g.item() as f64 / denom;
                let (av, bv) = (&self.value(*a).data, &self.value(*b).data);
                let mut da = self.zeros_like(*a);
                for (idx, d) in da.data.iter_mut().enumerate() {
                    if let Some(m) = masks {
                        if !m[idx / (c * plane)].data()[idx % plane] {
                            continue;
                        }
                    }
                    let diff = av[idx] - bv[idx];
                    let s = if diff > 0.0 {
                        1.0
                    } else if diff < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    *d = (s * scale) as f32;
                }
                if self.needs(*b) {
                    let mut db = da.clone();
                    db.data.iter_mut().for_each(|v| *v = -*v);
                    self.accumulate(grads, *b, db);
                }
                self.accumulate(grads, *a, da);
            }
            Op::MaskedMean { x, masks, denom } => {
                let [_, c, h, w] = self.shape(*x);
                let plane = h * w;
                let v = (g.item() as f64 / denom) as f32;
                let mut dx = self.zeros_like(*x);
                for (idx, d) in dx.data.iter_mut().enumerate() {
                    if masks[idx / (c * plane)].data()[idx % plane] {
                        *d = v;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::MeanSoftplus { x, sign } => {
                let xv = &self.value(*x).data;
                let scale = g.item() as f64 / xv.len() as f64;
                let s = *sign as f64;
                let dx = Tensor {
                    shape: self.shape(*x),
                    data: xv
                        .iter()
                        .map(|&v| (scale * s * sigmoid(s * v as f64)) as f32)
                        .collect(),
                };
                self.accumulate(grads, *x, dx);
            }
        }
    }

    fn backward_conv(&self, x: Var, w: Var, b: Option<Var>, stride: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let [n, ci, h, wd] = self.shape(x);
        let [co, _, kh, kw] = self.shape(w);
        let [_, _, oh, ow] = g.shape;
        let p = oh * ow;
        let k = ci * kh * kw;
        if let Some(b) = b {
            if self.needs(b) {
                let mut db = Tensor::zeros([1, co, 1, 1]);
                for i in 0..n {
                    for c in 0..co {
                        let s = (i * co + c) * p;
                        db.data[c] += g.data[s..s + p].iter().sum::<f32>();
                    }
                }
                self.accumulate(grads, b, db);
            }
        }
        let need_w = self.needs(w);
        let need_x = self.needs(x);
        if !need_w && !need_x {
            return;
        }
        let xv = &self.value(x).data;
        let wv = &self.value(w).data;
        let mut dw = if need_w { Some(self.zeros_like(w)) } else { None };
        let mut dx = if need_x { Some(self.zeros_like(x)) } else { None };
        let mut cols = vec![0.0f32; k * p];
        for i in 0..n {
            let gy = &g.data[i * co * p..(i + 1) * co * p];
            if let Some(dw) = dw.as_mut() {
                im2col(&xv[i * ci * h * wd..(i + 1) * ci * h * wd], ci, h, wd, kh, kw, stride, oh, ow, &mut cols);
                // dW[co, K] += dY[co, P] * cols^T[P, K]
                gemm(co, p, k, gy, (p as isize, 1), &cols, (1, p as isize), 1.0, &mut dw.data);
            }
            if let Some(dx) = dx.as_mut() {
                // dcols[K, P] = W^T[K, co] * dY[co, P]
                gemm(k, co, p, wv, (1, k as isize), gy, (p as isize, 1), 0.0, &mut cols);
                col2im(&cols, ci, h, wd, kh, kw, stride, oh, ow, &mut dx.data[i * ci * h * wd..(i + 1) * ci * h * wd]);
            }
        }
        if let Some(dw) = dw {
            self.accumulate(grads, w, dw);
        }
        if let Some(dx) = dx {
            self.accumulate(grads, x, dx);
        }
    }
}
