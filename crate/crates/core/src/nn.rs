//! Dense two-headed convolutional network: the training substrate and the
//! reference path the compressed model is checked against.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A `channels x height x width` activation volume, row-major per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Tensor {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::dim(format!(
                "{} values cannot fill a {channels}x{height}x{width} tensor",
                data.len()
            )));
        }
        Ok(Tensor {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Convolution layer shape. Kernels of side 3 or more are Haar-constrained.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
}

impl ConvSpec {
    pub fn constrained(&self) -> bool {
        self.kernel_size >= 3
    }

    pub fn kernel_len(&self) -> usize {
        self.kernel_size * self.kernel_size
    }

    pub fn kernel_count(&self) -> usize {
        self.in_channels * self.out_channels
    }

    pub fn weight_len(&self) -> usize {
        self.kernel_count() * self.kernel_len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSpec {
    Conv(ConvSpec),
    Relu,
    MaxPool,
    GlobalAvg,
    Softmax,
}

/// Channel widths of the detector. Everything else about the topology is fixed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    /// Side of the square input window; must be divisible by 16.
    pub input_size: usize,
    pub in_channels: usize,
    /// Number of classes including background (class 0).
    pub classes: usize,
    /// Output widths of conv1..conv4.
    pub trunk: [usize; 4],
    /// Output widths of conv5_1, conv5_2 and the 1x1 hidden layer of each head.
    pub head: [usize; 3],
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            input_size: 48,
            in_channels: 3,
            classes: 3,
            trunk: [64, 128, 256, 256],
            head: [128, 128, 64],
        }
    }
}

/// Layer graph: shared trunk (conv1..pool4) feeding a localization head and a
/// classification head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub arch: ArchConfig,
    pub trunk: Vec<LayerSpec>,
    pub loc_head: Vec<LayerSpec>,
    pub cla_head: Vec<LayerSpec>,
}

fn conv(name: &str, in_channels: usize, out_channels: usize, kernel_size: usize) -> LayerSpec {
    LayerSpec::Conv(ConvSpec {
        name: name.to_string(),
        in_channels,
        out_channels,
        kernel_size,
    })
}

fn head(prefix: &str, input: usize, widths: [usize; 3], outputs: usize) -> Vec<LayerSpec> {
    vec![
        conv(&format!("{prefix}.conv5_1"), input, widths[0], 3),
        LayerSpec::Relu,
        conv(&format!("{prefix}.conv5_2"), widths[0], widths[1], 3),
        LayerSpec::Relu,
        conv(&format!("{prefix}.conv6"), widths[1], widths[2], 1),
        LayerSpec::Relu,
        conv(&format!("{prefix}.conv7"), widths[2], outputs, 1),
        LayerSpec::GlobalAvg,
    ]
}

impl NetworkSpec {
    pub fn new(arch: ArchConfig) -> Result<Self> {
        if arch.input_size == 0 || arch.input_size % 16 != 0 {
            return Err(Error::config(format!(
                "input size {} is not a positive multiple of 16",
                arch.input_size
            )));
        }
        if arch.classes < 2 {
            return Err(Error::config("need background plus at least one object class"));
        }
        if arch.in_channels == 0 || arch.trunk.contains(&0) || arch.head.contains(&0) {
            return Err(Error::config("layer widths must be positive"));
        }
        let mut trunk = Vec::new();
        let mut c = arch.in_channels;
        for (i, &w) in arch.trunk.iter().enumerate() {
            trunk.push(conv(&format!("conv{}", i + 1), c, w, 3));
            trunk.push(LayerSpec::Relu);
            trunk.push(LayerSpec::MaxPool);
            c = w;
        }
        let loc_head = head("loc", c, arch.head, 4);
        let mut cla_head = head("cla", c, arch.head, arch.classes);
        cla_head.push(LayerSpec::Softmax);
        Ok(NetworkSpec {
            arch,
            trunk,
            loc_head,
            cla_head,
        })
    }

    /// Every conv layer in parameter order: trunk, localization head, classification head.
    pub fn convs(&self) -> Vec<&ConvSpec> {
        self.trunk
            .iter()
            .chain(&self.loc_head)
            .chain(&self.cla_head)
            .filter_map(|l| match l {
                LayerSpec::Conv(c) => Some(c),
                _ => None,
            })
            .collect()
    }

    pub fn trunk_convs(&self) -> usize {
        count_convs(&self.trunk)
    }

    pub fn head_convs(&self) -> usize {
        count_convs(&self.loc_head)
    }

    /// Spatial side of the trunk output.
    pub fn feature_size(&self) -> usize {
        self.arch.input_size / 16
    }

    pub fn classes(&self) -> usize {
        self.arch.classes
    }
}

fn count_convs(layers: &[LayerSpec]) -> usize {
    layers
        .iter()
        .filter(|l| matches!(l, LayerSpec::Conv(_)))
        .count()
}

/// Constrained representation of one kernel: `w = pattern(index) * factor`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HaarCode {
    pub index: u32,
    pub factor: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    /// `out x in x k x k`
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    /// Per-kernel constrained form (`out x in`), present once the layer has
    /// been projected onto a filter space.
    pub haar: Option<Vec<HaarCode>>,
}

impl ConvParams {
    pub fn kernel(&self, spec: &ConvSpec, out: usize, inp: usize) -> &[f64] {
        let n = spec.kernel_len();
        let at = (out * spec.in_channels + inp) * n;
        &self.weights[at..at + n]
    }
}

static GENERATION: AtomicU64 = AtomicU64::new(1);

fn next_generation() -> u64 {
    GENERATION.fetch_add(1, Ordering::Relaxed)
}

/// Parameters of every conv layer, aligned with [`NetworkSpec::convs`].
///
/// Each mutation stamps a fresh generation id so caches from an older
/// forward pass are rejected by [`backward`].
#[derive(Clone, Debug)]
pub struct ModelParams {
    layers: Vec<ConvParams>,
    generation: u64,
}

impl PartialEq for ModelParams {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

impl ModelParams {
    /// He-uniform weights (`+-sqrt(6 / fan_in)`), zero biases.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = spec
            .convs()
            .into_iter()
            .map(|c| {
                let fan_in = (c.in_channels * c.kernel_len()) as f64;
                let limit = (6.0 / fan_in).sqrt();
                ConvParams {
                    weights: (0..c.weight_len())
                        .map(|_| rng.random_range(-limit..limit))
                        .collect(),
                    bias: vec![0.0; c.out_channels],
                    haar: None,
                }
            })
            .collect();
        ModelParams {
            layers,
            generation: next_generation(),
        }
    }

    pub fn zeros(spec: &NetworkSpec) -> Self {
        Self::from_layers(
            spec,
            spec.convs()
                .into_iter()
                .map(|c| ConvParams {
                    weights: vec![0.0; c.weight_len()],
                    bias: vec![0.0; c.out_channels],
                    haar: None,
                })
                .collect(),
        )
        .expect("shapes derived from the network spec")
    }

    pub fn from_layers(spec: &NetworkSpec, layers: Vec<ConvParams>) -> Result<Self> {
        let convs = spec.convs();
        if convs.len() != layers.len() {
            return Err(Error::dim(format!(
                "spec has {} conv layers, got parameters for {}",
                convs.len(),
                layers.len()
            )));
        }
        for (c, p) in convs.iter().zip(&layers) {
            if p.weights.len() != c.weight_len() || p.bias.len() != c.out_channels {
                return Err(Error::dim(format!("parameter shape mismatch in {}", c.name)));
            }
            if let Some(h) = &p.haar {
                if h.len() != c.kernel_count() {
                    return Err(Error::dim(format!("haar code count mismatch in {}", c.name)));
                }
            }
        }
        Ok(ModelParams {
            layers,
            generation: next_generation(),
        })
    }

    pub fn layers(&self) -> &[ConvParams] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [ConvParams] {
        self.generation = next_generation();
        &mut self.layers
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }
}

/// Parameter gradients, same layout as [`ModelParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Gradients {
            layers: params
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weights: vec![0.0; l.weights.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.iter_mut().zip(&b.weights).for_each(|(x, y)| *x += y);
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += y);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }
}

/// `c = a * b + beta * c` for row-major `a: m x k`, `b: k x n`, either
/// operand optionally stored transposed.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: lengths checked above; strides describe in-bounds row-major layouts.
    unsafe {
        matrixmultiply::dgemm(
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

/// Patch matrix for a same-padded `k x k` convolution: `(c*k*k) x (h*w)`.
fn im2col(input: &Tensor, k: usize) -> Vec<f64> {
    let (c, h, w) = (input.channels, input.height, input.width);
    if k == 1 {
        return input.data.clone();
    }
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut cols = vec![0.0; c * k * k * hw];
    for ch in 0..c {
        let plane = input.plane(ch);
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ch * k + ky) * k + kx) * hw..][..hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..][..w];
                    let dst = &mut row[y * w..][..w];
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize) as usize;
                    for x in x0..x1 {
                        dst[x] = src[(x as isize + dx) as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    if k == 1 {
        return cols.to_vec();
    }
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut out = vec![0.0; c * hw];
    for ch in 0..c {
        let plane = &mut out[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ch * k + ky) * k + kx) * hw..][..hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize) as usize;
                    for x in x0..x1 {
                        plane[sy as usize * w + (x as isize + dx) as usize] += row[y * w + x];
                    }
                }
            }
        }
    }
    out
}

fn check_conv(spec: &ConvSpec, params: &ConvParams, input: &Tensor) -> Result<()> {
    if spec.kernel_size % 2 == 0 {
        return Err(Error::dim(format!("{}: kernel side must be odd", spec.name)));
    }
    if input.channels != spec.in_channels {
        return Err(Error::dim(format!(
            "{}: expected {} input channels, got {}",
            spec.name, spec.in_channels, input.channels
        )));
    }
    if params.weights.len() != spec.weight_len() || params.bias.len() != spec.out_channels {
        return Err(Error::dim(format!("{}: parameter shape mismatch", spec.name)));
    }
    Ok(())
}

fn conv_forward_cols(spec: &ConvSpec, params: &ConvParams, input: &Tensor) -> (Tensor, Vec<f64>) {
    let cols = im2col(input, spec.kernel_size);
    let hw = input.height * input.width;
    let mut out = Tensor::zeros(spec.out_channels, input.height, input.width);
    for (o, b) in params.bias.iter().enumerate() {
        out.data[o * hw..(o + 1) * hw].fill(*b);
    }
    gemm(
        spec.out_channels,
        spec.in_channels * spec.kernel_len(),
        hw,
        &params.weights,
        false,
        &cols,
        false,
        &mut out.data,
        1.0,
    );
    (out, cols)
}

/// Same-padded stride-1 cross-correlation (no padding for 1x1 kernels).
pub fn conv2d_dense(input: &Tensor, spec: &ConvSpec, params: &ConvParams) -> Result<Tensor> {
    check_conv(spec, params, input)?;
    Ok(conv_forward_cols(spec, params, input).0)
}

fn maxpool_with_argmax(input: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    if input.height % 2 != 0 || input.width % 2 != 0 {
        return Err(Error::dim(format!(
            "2x2 pooling needs even dimensions, got {}x{}",
            input.height, input.width
        )));
    }
    let (h, w) = (input.height / 2, input.width / 2);
    let mut out = Tensor::zeros(input.channels, h, w);
    let mut arg = vec![0usize; out.data.len()];
    for c in 0..input.channels {
        for y in 0..h {
            for x in 0..w {
                let mut best = usize::MAX;
                let mut best_v = f64::NEG_INFINITY;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let i = (c * input.height + 2 * y + dy) * input.width + 2 * x + dx;
                    if best == usize::MAX || input.data[i] > best_v {
                        best = i;
                        best_v = input.data[i];
                    }
                }
                let o = (c * h + y) * w + x;
                out.data[o] = best_v;
                arg[o] = best;
            }
        }
    }
    Ok((out, arg))
}

/// 2x2 max pooling with stride 2.
pub fn maxpool2x2(input: &Tensor) -> Result<Tensor> {
    maxpool_with_argmax(input).map(|(t, _)| t)
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Backpropagates a gradient on softmax outputs to the logits.
pub fn softmax_backward(probs: &[f64], grad_probs: &[f64]) -> Vec<f64> {
    let dot: f64 = probs.iter().zip(grad_probs).map(|(p, g)| p * g).sum();
    probs
        .iter()
        .zip(grad_probs)
        .map(|(p, g)| p * (g - dot))
        .collect()
}

#[derive(Clone, Debug)]
enum LayerCache {
    Conv { cols: Vec<f64>, h: usize, w: usize },
    Relu { out: Vec<f64> },
    MaxPool { arg: Vec<usize>, in_dims: (usize, usize, usize) },
    GlobalAvg { in_dims: (usize, usize, usize) },
    Softmax,
}

/// Activations retained by [`forward`] for [`backward`].
#[derive(Clone, Debug)]
pub struct Cache {
    generation: u64,
    trunk: Vec<LayerCache>,
    loc: Vec<LayerCache>,
    cla: Vec<LayerCache>,
}

#[derive(Clone, Debug)]
pub struct Output {
    /// `(dx1, dx2, dy1, dy2)`
    pub loc: [f64; 4],
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

impl Output {
    /// `(label, score)`: arg-max class and its probability.
    pub fn decision(&self) -> (usize, f64) {
        let mut best = 0;
        for (i, p) in self.probs.iter().enumerate() {
            if *p > self.probs[best] {
                best = i;
            }
        }
        (best, self.probs[best])
    }
}

fn run_stage(
    layers: &[LayerSpec],
    params: &[ConvParams],
    mut x: Tensor,
    cache: Option<&mut Vec<LayerCache>>,
) -> Result<Tensor> {
    let mut store = cache;
    let mut pi = 0;
    for layer in layers {
        let entry = match layer {
            LayerSpec::Conv(spec) => {
                let p = &params[pi];
                pi += 1;
                check_conv(spec, p, &x)?;
                let (h, w) = (x.height, x.width);
                let (out, cols) = conv_forward_cols(spec, p, &x);
                x = out;
                LayerCache::Conv { cols, h, w }
            }
            LayerSpec::Relu => {
                x.data.iter_mut().for_each(|v| *v = v.max(0.0));
                LayerCache::Relu {
                    out: if store.is_some() { x.data.clone() } else { Vec::new() },
                }
            }
            LayerSpec::MaxPool => {
                let dims = (x.channels, x.height, x.width);
                let (out, arg) = maxpool_with_argmax(&x)?;
                x = out;
                LayerCache::MaxPool { arg, in_dims: dims }
            }
            LayerSpec::GlobalAvg => {
                let dims = (x.channels, x.height, x.width);
                let n = (x.height * x.width) as f64;
                let data = (0..x.channels)
                    .map(|c| x.plane(c).iter().sum::<f64>() / n)
                    .collect();
                x = Tensor::from_vec(dims.0, 1, 1, data)?;
                LayerCache::GlobalAvg { in_dims: dims }
            }
            // applied by the caller so logits stay available
            LayerSpec::Softmax => LayerCache::Softmax,
        };
        if let Some(s) = store.as_mut() {
            s.push(entry);
        }
    }
    Ok(x)
}

fn check_input(spec: &NetworkSpec, input: &Tensor) -> Result<()> {
    let a = &spec.arch;
    if input.channels != a.in_channels || input.height != a.input_size || input.width != a.input_size
    {
        return Err(Error::dim(format!(
            "network expects {}x{}x{} input, got {}x{}x{}",
            a.in_channels, a.input_size, a.input_size, input.channels, input.height, input.width
        )));
    }
    Ok(())
}

fn split_params<'a>(
    spec: &NetworkSpec,
    params: &'a ModelParams,
) -> Result<(&'a [ConvParams], &'a [ConvParams], &'a [ConvParams])> {
    let t = spec.trunk_convs();
    let h = spec.head_convs();
    if params.layers.len() != t + 2 * h {
        return Err(Error::dim("parameters do not match the network spec"));
    }
    let (trunk, rest) = params.layers.split_at(t);
    let (loc, cla) = rest.split_at(h);
    Ok((trunk, loc, cla))
}

fn outputs(loc_t: Tensor, logits_t: Tensor) -> Output {
    let loc = [loc_t.data[0], loc_t.data[1], loc_t.data[2], loc_t.data[3]];
    let probs = softmax(&logits_t.data);
    Output {
        loc,
        logits: logits_t.data,
        probs,
    }
}

/// Inference-only forward pass.
pub fn predict(spec: &NetworkSpec, params: &ModelParams, input: &Tensor) -> Result<Output> {
    check_input(spec, input)?;
    let (trunk_p, loc_p, cla_p) = split_params(spec, params)?;
    let feat = run_stage(&spec.trunk, trunk_p, input.clone(), None)?;
    let loc = run_stage(&spec.loc_head, loc_p, feat.clone(), None)?;
    let cla = run_stage(&spec.cla_head, cla_p, feat, None)?;
    Ok(outputs(loc, cla))
}

/// Forward pass that keeps everything [`backward`] needs.
pub fn forward(spec: &NetworkSpec, params: &ModelParams, input: &Tensor) -> Result<(Output, Cache)> {
    check_input(spec, input)?;
    let (trunk_p, loc_p, cla_p) = split_params(spec, params)?;
    let mut cache = Cache {
        generation: params.generation,
        trunk: Vec::new(),
        loc: Vec::new(),
        cla: Vec::new(),
    };
    let feat = run_stage(&spec.trunk, trunk_p, input.clone(), Some(&mut cache.trunk))?;
    let loc = run_stage(&spec.loc_head, loc_p, feat.clone(), Some(&mut cache.loc))?;
    let cla = run_stage(&spec.cla_head, cla_p, feat, Some(&mut cache.cla))?;
    Ok((outputs(loc, cla), cache))
}

/// Gradient of the loss with respect to the network outputs. The
/// classification gradient is taken with respect to the logits; use
/// [`softmax_backward`] to convert a gradient on probabilities.
#[derive(Clone, Debug)]
pub struct OutputGrad {
    pub loc: [f64; 4],
    pub cla_logits: Vec<f64>,
}

fn backprop_stage(
    layers: &[LayerSpec],
    params: &[ConvParams],
    cache: &[LayerCache],
    grads: &mut [LayerGrad],
    mut g: Vec<f64>,
    need_input_grad: bool,
) -> Vec<f64> {
    let mut pi = params.len();
    for (idx, (layer, entry)) in layers.iter().zip(cache).enumerate().rev() {
        let first = idx == 0;
        g = match (layer, entry) {
            (LayerSpec::Conv(spec), LayerCache::Conv { cols, h, w }) => {
                pi -= 1;
                let hw = h * w;
                let kk = spec.in_channels * spec.kernel_len();
                let lg = &mut grads[pi];
                gemm(spec.out_channels, hw, kk, &g, false, cols, true, &mut lg.weights, 1.0);
                for (o, b) in lg.bias.iter_mut().enumerate() {
                    *b += g[o * hw..(o + 1) * hw].iter().sum::<f64>();
                }
                if first && !need_input_grad {
                    return Vec::new();
                }
                let mut dcols = vec![0.0; kk * hw];
                gemm(kk, spec.out_channels, hw, &params[pi].weights, true, &g, false, &mut dcols, 0.0);
                col2im(&dcols, spec.in_channels, *h, *w, spec.kernel_size)
            }
            (LayerSpec::Relu, LayerCache::Relu { out }) => {
                g.iter_mut()
                    .zip(out)
                    .for_each(|(d, o)| if *o <= 0.0 { *d = 0.0 });
                g
            }
            (LayerSpec::MaxPool, LayerCache::MaxPool { arg, in_dims }) => {
                let mut d = vec![0.0; in_dims.0 * in_dims.1 * in_dims.2];
                for (o, &i) in arg.iter().enumerate() {
                    d[i] += g[o];
                }
                d
            }
            (LayerSpec::GlobalAvg, LayerCache::GlobalAvg { in_dims }) => {
                let n = in_dims.1 * in_dims.2;
                let mut d = Vec::with_capacity(in_dims.0 * n);
                for c in 0..in_dims.0 {
                    d.extend(std::iter::repeat_n(g[c] / n as f64, n));
                }
                d
            }
            (LayerSpec::Softmax, LayerCache::Softmax) => g,
            _ => unreachable!("cache built from the same layer list"),
        };
    }
    g
}

/// Backpropagates output gradients into parameter gradients.
pub fn backward(
    spec: &NetworkSpec,
    params: &ModelParams,
    cache: &Cache,
    grad: &OutputGrad,
) -> Result<Gradients> {
    if cache.generation != params.generation {
        return Err(Error::Usage(
            "cache was produced with different parameters".into(),
        ));
    }
    if grad.cla_logits.len() != spec.classes() {
        return Err(Error::dim(format!(
            "classification gradient has {} entries, network has {} classes",
            grad.cla_logits.len(),
            spec.classes()
        )));
    }
    let mut grads = Gradients::zeros_like(params);
    backward_into(spec, params, cache, grad, &mut grads)?;
    Ok(grads)
}

/// Like [`backward`], but adds the gradients into `grads`.
pub fn backward_into(
    spec: &NetworkSpec,
    params: &ModelParams,
    cache: &Cache,
    grad: &OutputGrad,
    grads: &mut Gradients,
) -> Result<()> {
    if cache.generation != params.generation {
        return Err(Error::Usage(
            "cache was produced with different parameters".into(),
        ));
    }
    if grad.cla_logits.len() != spec.classes() {
        return Err(Error::dim(format!(
            "classification gradient has {} entries, network has {} classes",
            grad.cla_logits.len(),
            spec.classes()
        )));
    }
    let (trunk_p, loc_p, cla_p) = split_params(spec, params)?;
    if grads.layers.len() != params.layers.len() {
        return Err(Error::dim("gradient buffer does not match parameters"));
    }
    let t = trunk_p.len();
    let h = loc_p.len();
    let (g_trunk, rest) = grads.layers.split_at_mut(t);
    let (g_loc, g_cla) = rest.split_at_mut(h);

    let d_loc = backprop_stage(&spec.loc_head, loc_p, &cache.loc, g_loc, grad.loc.to_vec(), true);
    let d_cla = backprop_stage(
        &spec.cla_head,
        cla_p,
        &cache.cla,
        g_cla,
        grad.cla_logits.clone(),
        true,
    );
    let d_feat: Vec<f64> = d_loc.iter().zip(&d_cla).map(|(a, b)| a + b).collect();
    backprop_stage(&spec.trunk, trunk_p, &cache.trunk, g_trunk, d_feat, false);
    Ok(())
}

/// Plain gradient step `w <- w - lr * g` on every weight and bias.
pub fn sgd_update(params: &mut ModelParams, grads: &Gradients, lr: f64) -> Result<()> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::config(format!("learning rate must be positive, got {lr}")));
    }
    if grads.layers.len() != params.layers.len()
        || grads.layers.iter().zip(&params.layers).any(|(g, p)| {
            g.weights.len() != p.weights.len() || g.bias.len() != p.bias.len()
        })
    {
        return Err(Error::dim("gradient shapes do not match parameters"));
    }
    for (p, g) in params.layers_mut().iter_mut().zip(&grads.layers) {
        p.weights.iter_mut().zip(&g.weights).for_each(|(w, d)| *w -= lr * d);
        p.bias.iter_mut().zip(&g.bias).for_each(|(w, d)| *w -= lr * d);
    }
    Ok(())
}
