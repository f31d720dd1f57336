//! Deployment form of a trained detector: a compact model file storing each
//! constrained kernel as a filter reference plus one scale factor, and a
//! convolution path that needs a single multiplication per step.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::haar_space::{space_size, FilterBank, ReducedSpace, SignPattern};
use crate::nn::{self, ArchConfig, ConvParams, ConvSpec, HaarCode, LayerSpec, ModelParams, NetworkSpec, Output, Tensor};

pub const MAGIC: &[u8; 4] = b"GHNW";
pub const VERSION: u8 = 1;
/// Serialized size of one constrained kernel.
pub const RECORD_BYTES: usize = 5;
/// magic, version, storage mode, ten u16 widths, 8-byte digest
pub const HEADER_BYTES: usize = 4 + 1 + 1 + 20 + 8;
const ARCH_OFFSET: usize = 6;
const DIGEST_OFFSET: usize = ARCH_OFFSET + 20;

/// One constrained kernel as stored on disk.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelRecord {
    /// Position in the model's reduced-space table.
    pub filter_ref: u8,
    pub factor: f32,
}

impl KernelRecord {
    pub fn to_bytes(self) -> [u8; RECORD_BYTES] {
        let f = self.factor.to_le_bytes();
        [self.filter_ref, f[0], f[1], f[2], f[3]]
    }

    pub fn from_bytes(b: [u8; RECORD_BYTES]) -> Self {
        KernelRecord {
            filter_ref: b[0],
            factor: f32::from_le_bytes([b[1], b[2], b[3], b[4]]),
        }
    }
}

/// How the conv kernels of a file are stored.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StorageMode {
    /// Constrained layers as kernel records.
    Haar = 0,
    /// Every layer as raw single-precision weights (unconstrained models).
    Dense = 1,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerBlock {
    Haar { records: Vec<KernelRecord>, bias: Vec<f32> },
    Dense { weights: Vec<f32>, bias: Vec<f32> },
}

impl LayerBlock {
    pub fn bias(&self) -> &[f32] {
        match self {
            LayerBlock::Haar { bias, .. } | LayerBlock::Dense { bias, .. } => bias,
        }
    }

    /// Bytes this block occupies in the file.
    pub fn byte_len(&self) -> usize {
        match self {
            LayerBlock::Haar { records, bias } => RECORD_BYTES * records.len() + 4 * bias.len(),
            LayerBlock::Dense { weights, bias } => 4 * (weights.len() + bias.len()),
        }
    }
}

/// Decoded model file. Immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct CompressedModel {
    spec: NetworkSpec,
    mode: StorageMode,
    /// `None` for dense storage.
    space: Option<ReducedSpace>,
    layers: Vec<LayerBlock>,
}

fn arch_bytes(arch: &ArchConfig) -> Result<[u8; 20]> {
    let vals = [arch.input_size, arch.in_channels, arch.classes]
        .into_iter()
        .chain(arch.trunk)
        .chain(arch.head);
    let mut out = [0u8; 20];
    for (i, v) in vals.enumerate() {
        let v = u16::try_from(v).map_err(|_| Error::config(format!("width {v} does not fit the model format")))?;
        out[2 * i..2 * i + 2].copy_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// First 8 bytes of SHA-256 over the encoded architecture.
pub fn spec_digest(spec: &NetworkSpec) -> Result<[u8; 8]> {
    let h = Sha256::digest(arch_bytes(&spec.arch)?);
    let mut d = [0u8; 8];
    d.copy_from_slice(&h[..8]);
    Ok(d)
}

/// Exact size in bytes of a model file for `spec`.
/// `nr` is the reduced-space size (ignored for dense storage).
pub fn file_size(spec: &NetworkSpec, mode: StorageMode, nr: usize) -> usize {
    let table = match mode {
        StorageMode::Haar => 3 + 4 * nr,
        StorageMode::Dense => 3,
    };
    let layers: usize = spec
        .convs()
        .iter()
        .map(|c| {
            let body = if mode == StorageMode::Haar && c.constrained() {
                RECORD_BYTES * c.kernel_count()
            } else {
                4 * c.weight_len()
            };
            body + 4 * c.out_channels
        })
        .sum();
    HEADER_BYTES + table + layers
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.pos, format!("truncated {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let start = self.pos;
        let b = self.take(4 * n, what)?;
        let vals: Vec<f32> = b
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if let Some(i) = vals.iter().position(|v| !v.is_finite()) {
            return Err(Error::format(start + 4 * i, format!("non-finite value in {what}")));
        }
        Ok(vals)
    }
}

fn to_f32(v: f64, what: &str) -> Result<f32> {
    let f = v as f32;
    if !f.is_finite() {
        return Err(Error::config(format!("{what} value {v} is not representable")));
    }
    Ok(f)
}

impl CompressedModel {
    /// Packs trained parameters. Constrained layers must carry Haar codes
    /// whose filters all belong to `space`.
    pub fn from_params(spec: &NetworkSpec, params: &ModelParams, space: &ReducedSpace) -> Result<Self> {
        if space.len() > 256 {
            return Err(Error::config(format!("{} filters exceed the 1-byte filter reference", space.len())));
        }
        if params.layers().len() != spec.convs().len() {
            return Err(Error::dim("parameters do not match the network spec"));
        }
        let mut layers = Vec::new();
        for (conv, p) in spec.convs().into_iter().zip(params.layers()) {
            let bias = p.bias.iter().map(|b| to_f32(*b, "bias")).collect::<Result<Vec<_>>>()?;
            if !conv.constrained() {
                let weights = p.weights.iter().map(|w| to_f32(*w, "weight")).collect::<Result<Vec<_>>>()?;
                layers.push(LayerBlock::Dense { weights, bias });
                continue;
            }
            if conv.kernel_size != space.side() {
                return Err(Error::dim(format!("{} has {}x{} kernels, space side {}", conv.name, conv.kernel_size, conv.kernel_size, space.side())));
            }
            let codes = p
                .haar
                .as_ref()
                .ok_or_else(|| Error::Usage(format!("{} has not been projected onto a filter space", conv.name)))?;
            let records = codes
                .iter()
                .map(|c| {
                    let pos = space
                        .position_of(c.index)
                        .ok_or_else(|| Error::Usage(format!("filter {} not in the reduced space", c.index)))?;
                    Ok(KernelRecord {
                        filter_ref: pos as u8,
                        factor: to_f32(c.factor, "factor")?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            layers.push(LayerBlock::Haar { records, bias });
        }
        Ok(CompressedModel {
            spec: spec.clone(),
            mode: StorageMode::Haar,
            space: Some(space.clone()),
            layers,
        })
    }

    /// Packs an unconstrained model with raw weights everywhere.
    pub fn dense_from_params(spec: &NetworkSpec, params: &ModelParams) -> Result<Self> {
        let layers = params
            .layers()
            .iter()
            .map(|p| {
                Ok(LayerBlock::Dense {
                    weights: p.weights.iter().map(|w| to_f32(*w, "weight")).collect::<Result<_>>()?,
                    bias: p.bias.iter().map(|b| to_f32(*b, "bias")).collect::<Result<_>>()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if layers.len() != spec.convs().len() {
            return Err(Error::dim("parameters do not match the network spec"));
        }
        Ok(CompressedModel {
            spec: spec.clone(),
            mode: StorageMode::Dense,
            space: None,
            layers,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn mode(&self) -> StorageMode {
        self.mode
    }

    pub fn space(&self) -> Option<&ReducedSpace> {
        self.space.as_ref()
    }

    pub fn layers(&self) -> &[LayerBlock] {
        &self.layers
    }

    pub fn encode(&self) -> Vec<u8> {
        let nr = self.space.as_ref().map_or(0, |s| s.len());
        let mut out = Vec::with_capacity(file_size(&self.spec, self.mode, nr));
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(self.mode as u8);
        out.extend_from_slice(&arch_bytes(&self.spec.arch).expect("checked when built"));
        out.extend_from_slice(&spec_digest(&self.spec).expect("checked when built"));
        match &self.space {
            Some(s) => {
                out.push(s.side() as u8);
                out.extend_from_slice(&(s.len() as u16).to_le_bytes());
                for idx in s.selected() {
                    out.extend_from_slice(&idx.to_le_bytes());
                }
            }
            None => {
                out.push(3);
                out.extend_from_slice(&0u16.to_le_bytes());
            }
        }
        for block in &self.layers {
            match block {
                LayerBlock::Haar { records, bias } => {
                    for r in records {
                        out.extend_from_slice(&r.to_bytes());
                    }
                    bias.iter().for_each(|b| out.extend_from_slice(&b.to_le_bytes()));
                }
                LayerBlock::Dense { weights, bias } => {
                    weights
                        .iter()
                        .chain(bias)
                        .for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
                }
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::format(0, "bad magic"));
        }
        let version = r.u8("version")?;
        if version != VERSION {
            return Err(Error::format(4, format!("unsupported version {version}")));
        }
        let mode = match r.u8("storage mode")? {
            0 => StorageMode::Haar,
            1 => StorageMode::Dense,
            other => return Err(Error::format(5, format!("unknown storage mode {other}"))),
        };
        let mut w = [0usize; 10];
        for v in w.iter_mut() {
            *v = r.u16("architecture")? as usize;
        }
        let arch = ArchConfig {
            input_size: w[0],
            in_channels: w[1],
            classes: w[2],
            trunk: [w[3], w[4], w[5], w[6]],
            head: [w[7], w[8], w[9]],
        };
        let spec = NetworkSpec::new(arch).map_err(|e| Error::format(ARCH_OFFSET, e.to_string()))?;
        let digest = r.take(8, "digest")?;
        if digest != spec_digest(&spec)? {
            return Err(Error::format(DIGEST_OFFSET, "architecture digest mismatch"));
        }

        let m_at = r.pos;
        let m = r.u8("filter side")? as usize;
        let nr_at = r.pos;
        let nr = r.u16("filter count")? as usize;
        let space = match mode {
            StorageMode::Dense => {
                if nr != 0 {
                    return Err(Error::format(nr_at, "dense model with a filter table"));
                }
                None
            }
            StorageMode::Haar => {
                if m != 3 {
                    return Err(Error::format(m_at, format!("filter side {m} does not match the 3x3 layers")));
                }
                if nr == 0 || nr > 256 {
                    return Err(Error::format(nr_at, format!("filter count {nr} outside [1, 256]")));
                }
                let table_at = r.pos;
                let mut idx = Vec::with_capacity(nr);
                for _ in 0..nr {
                    let at = r.pos;
                    let i = r.u32("filter table")?;
                    if i as usize >= space_size(m) {
                        return Err(Error::format(at, format!("filter index {i} outside the space")));
                    }
                    idx.push(i);
                }
                Some(ReducedSpace::from_indices(m, idx).map_err(|e| Error::format(table_at, e.to_string()))?)
            }
        };

        let mut layers = Vec::new();
        for conv in spec.convs() {
            if mode == StorageMode::Haar && conv.constrained() {
                let mut records = Vec::with_capacity(conv.kernel_count());
                for _ in 0..conv.kernel_count() {
                    let at = r.pos;
                    let b = r.take(RECORD_BYTES, "kernel record")?;
                    let rec = KernelRecord::from_bytes([b[0], b[1], b[2], b[3], b[4]]);
                    if rec.filter_ref as usize >= nr {
                        return Err(Error::format(at, format!("filter reference {} >= {nr}", rec.filter_ref)));
                    }
                    if !rec.factor.is_finite() {
                        return Err(Error::format(at + 1, "non-finite factor"));
                    }
                    records.push(rec);
                }
                let bias = r.f32s(conv.out_channels, "bias")?;
                layers.push(LayerBlock::Haar { records, bias });
            } else {
                let weights = r.f32s(conv.weight_len(), "weights")?;
                let bias = r.f32s(conv.out_channels, "bias")?;
                layers.push(LayerBlock::Dense { weights, bias });
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::format(r.pos, "trailing bytes"));
        }
        Ok(CompressedModel {
            spec,
            mode,
            space,
            layers,
        })
    }

    /// Decodes and checks the file against the network it is meant for.
    pub fn decode_for(bytes: &[u8], spec: &NetworkSpec) -> Result<Self> {
        let model = Self::decode(bytes)?;
        if spec_digest(spec)? != spec_digest(&model.spec)? {
            return Err(Error::format(DIGEST_OFFSET, "model was built for a different network"));
        }
        Ok(model)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    /// Dense double-precision parameters equal to the stored model.
    pub fn to_params(&self) -> ModelParams {
        let layers = self
            .spec
            .convs()
            .into_iter()
            .zip(&self.layers)
            .map(|(conv, block)| match block {
                LayerBlock::Dense { weights, bias } => ConvParams {
                    weights: weights.iter().map(|&v| f64::from(v)).collect(),
                    bias: bias.iter().map(|&v| f64::from(v)).collect(),
                    haar: None,
                },
                LayerBlock::Haar { records, bias } => {
                    let space = self.space.as_ref().expect("Haar blocks come with a space");
                    let mut weights = Vec::with_capacity(conv.weight_len());
                    let mut codes = Vec::with_capacity(records.len());
                    for rec in records {
                        let p = space.pattern_at(rec.filter_ref as usize);
                        let k = f64::from(rec.factor);
                        weights.extend(p.scaled(k));
                        codes.push(HaarCode { index: p.index(), factor: k });
                    }
                    ConvParams {
                        weights,
                        bias: bias.iter().map(|&v| f64::from(v)).collect(),
                        haar: Some(codes),
                    }
                }
            })
            .collect();
        ModelParams::from_layers(&self.spec, layers).expect("blocks follow the network spec")
    }

    /// Fast-path inference: constrained layers cost one multiplication per step.
    pub fn infer(&self, input: &Tensor, counter: &mut OpCounter) -> Result<Output> {
        self.run(input, ConvPath::Fast, counter)
    }

    /// Same network evaluated with plain multiply-accumulate convolutions.
    pub fn infer_dense(&self, input: &Tensor, counter: &mut OpCounter) -> Result<Output> {
        self.run(input, ConvPath::Dense, counter)
    }

    fn run(&self, input: &Tensor, path: ConvPath, counter: &mut OpCounter) -> Result<Output> {
        let a = &self.spec.arch;
        if (input.channels, input.height, input.width) != (a.in_channels, a.input_size, a.input_size) {
            return Err(Error::dim(format!(
                "model expects {}x{}x{} input, got {}x{}x{}",
                a.in_channels, a.input_size, a.input_size, input.channels, input.height, input.width
            )));
        }
        let t = self.spec.trunk_convs();
        let h = self.spec.head_convs();
        let feat = self.stage(&self.spec.trunk, 0, input.clone(), path, counter)?;
        let loc = self.stage(&self.spec.loc_head, t, feat.clone(), path, counter)?;
        let logits = self.stage(&self.spec.cla_head, t + h, feat, path, counter)?;
        let probs = nn::softmax(&logits.data);
        Ok(Output {
            loc: [loc.data[0], loc.data[1], loc.data[2], loc.data[3]],
            logits: logits.data,
            probs,
        })
    }

    fn stage(
        &self,
        layers: &[LayerSpec],
        first: usize,
        mut x: Tensor,
        path: ConvPath,
        counter: &mut OpCounter,
    ) -> Result<Tensor> {
        let mut li = first;
        for layer in layers {
            match layer {
                LayerSpec::Conv(conv) => {
                    let before = (counter.multiplies, counter.additions);
                    let steps = (x.height * x.width * conv.out_channels * conv.in_channels) as u64;
                    x = match (&self.layers[li], path) {
                        (LayerBlock::Haar { records, bias }, ConvPath::Fast) => {
                            let space = self.space.as_ref().expect("Haar blocks come with a space");
                            haar_conv_layer(&x, conv, records, bias, space, counter)
                        }
                        (LayerBlock::Haar { records, bias }, ConvPath::Dense) => {
                            let space = self.space.as_ref().expect("Haar blocks come with a space");
                            let weights: Vec<f32> = records
                                .iter()
                                .flat_map(|r| {
                                    let s = space.signs_at(r.filter_ref as usize);
                                    s.iter().map(move |v| (*v * f64::from(r.factor)) as f32)
                                })
                                .collect();
                            dense_conv_layer(&x, conv, &weights, bias, counter)
                        }
                        (LayerBlock::Dense { weights, bias }, _) => dense_conv_layer(&x, conv, weights, bias, counter),
                    };
                    counter.record(&conv.name, steps, counter.multiplies - before.0, counter.additions - before.1);
                    li += 1;
                }
                LayerSpec::Relu => x.data.iter_mut().for_each(|v| *v = v.max(0.0)),
                LayerSpec::MaxPool => x = nn::maxpool2x2(&x)?,
                LayerSpec::GlobalAvg => {
                    let n = (x.height * x.width) as f64;
                    let data = (0..x.channels).map(|c| x.plane(c).iter().sum::<f64>() / n).collect();
                    x = Tensor::from_vec(x.channels, 1, 1, data)?;
                }
                LayerSpec::Softmax => {}
            }
        }
        Ok(x)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ConvPath {
    Fast,
    Dense,
}

/// Arithmetic operations performed by convolution layers.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct OpCounter {
    pub multiplies: u64,
    pub additions: u64,
    pub layers: Vec<LayerOps>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LayerOps {
    pub name: String,
    /// Convolution steps: output positions x output channels x input channels.
    pub steps: u64,
    pub multiplies: u64,
    pub additions: u64,
}

impl LayerOps {
    pub fn multiplies_per_step(&self) -> f64 {
        self.multiplies as f64 / self.steps as f64
    }
}

impl OpCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reset(&mut self) {
        *self = Self::default();
    }

    fn record(&mut self, name: &str, steps: u64, multiplies: u64, additions: u64) {
        let entry = match self.layers.iter_mut().position(|l| l.name == name) {
            Some(i) => &mut self.layers[i],
            None => {
                self.layers.push(LayerOps {
                    name: name.to_string(),
                    ..Default::default()
                });
                self.layers.last_mut().expect("just pushed")
            }
        };
        entry.steps += steps;
        entry.multiplies += multiplies;
        entry.additions += additions;
    }

    pub fn layer(&self, name: &str) -> Option<&LayerOps> {
        self.layers.iter().find(|l| l.name == name)
    }
}

/// One constrained convolution step: `k * sum(sign .* patch)` using only
/// additions and subtractions before the single multiplication.
pub fn haar_conv_step(pattern: &SignPattern, patch: &[f64], k: f64, counter: &mut OpCounter) -> Result<f64> {
    let n = pattern.side() * pattern.side();
    if patch.len() != n {
        return Err(Error::dim(format!("patch of {} values for a {n}-cell filter", patch.len())));
    }
    let (plus, minus) = pattern.split_cells();
    let mut acc = patch[plus[0]];
    for &i in &plus[1..] {
        acc += patch[i];
    }
    for &i in &minus {
        acc -= patch[i];
    }
    counter.additions += (n - 1) as u64;
    counter.multiplies += 1;
    Ok(k * acc)
}

/// Zero-padded copy of every input plane, border `pad`.
fn pad_planes(x: &Tensor, pad: usize) -> (Vec<f64>, usize, usize) {
    let (ph, pw) = (x.height + 2 * pad, x.width + 2 * pad);
    let mut out = vec![0.0; x.channels * ph * pw];
    for c in 0..x.channels {
        let src = x.plane(c);
        for y in 0..x.height {
            let dst = (c * ph + y + pad) * pw + pad;
            out[dst..dst + x.width].copy_from_slice(&src[y * x.width..(y + 1) * x.width]);
        }
    }
    (out, ph, pw)
}

/// Constrained layer. For every input channel the signed sum of each filter
/// in use is formed once per position with additions only; each step then
/// scales the shared sum by its kernel factor.
fn haar_conv_layer(
    x: &Tensor,
    conv: &ConvSpec,
    records: &[KernelRecord],
    bias: &[f32],
    space: &ReducedSpace,
    counter: &mut OpCounter,
) -> Tensor {
    let k = conv.kernel_size;
    let pad = k / 2;
    let (h, w) = (x.height, x.width);
    let hw = h * w;
    let (padded, ph, pw) = pad_planes(x, pad);
    let lists: Vec<(Vec<usize>, Vec<usize>)> = (0..space.len()).map(|r| space.pattern_at(r).split_cells()).collect();
    let mut out = Tensor::zeros(conv.out_channels, h, w);
    for (o, b) in bias.iter().enumerate() {
        out.data[o * hw..(o + 1) * hw].fill(f64::from(*b));
    }
    counter.additions += (conv.out_channels * hw) as u64;

    let mut sums: Vec<Option<Vec<f64>>> = vec![None; space.len()];
    let (mut mults, mut adds) = (0u64, 0u64);
    for i in 0..conv.in_channels {
        sums.iter_mut().for_each(|s| *s = None);
        let plane = &padded[i * ph * pw..(i + 1) * ph * pw];
        for o in 0..conv.out_channels {
            let rec = records[o * conv.in_channels + i];
            let r = rec.filter_ref as usize;
            if sums[r].is_none() {
                let (plus, minus) = &lists[r];
                let mut s = vec![0.0; hw];
                for y in 0..h {
                    let row = &mut s[y * w..(y + 1) * w];
                    let at = |cell: usize| {
                        let start = (y + cell / k) * pw + cell % k;
                        &plane[start..start + w]
                    };
                    row.copy_from_slice(at(plus[0]));
                    for &c in &plus[1..] {
                        row.iter_mut().zip(at(c)).for_each(|(a, v)| *a += v);
                    }
                    for &c in minus {
                        row.iter_mut().zip(at(c)).for_each(|(a, v)| *a -= v);
                    }
                }
                adds += ((k * k - 1) * hw) as u64;
                sums[r] = Some(s);
            }
            let s = sums[r].as_ref().expect("filled above");
            let factor = f64::from(rec.factor);
            let dst = &mut out.data[o * hw..(o + 1) * hw];
            for (d, v) in dst.iter_mut().zip(s) {
                *d += factor * v;
            }
            mults += hw as u64;
            adds += hw as u64;
        }
    }
    counter.multiplies += mults;
    counter.additions += adds;
    out
}

/// Multiply-accumulate convolution with single-precision weights.
fn dense_conv_layer(x: &Tensor, conv: &ConvSpec, weights: &[f32], bias: &[f32], counter: &mut OpCounter) -> Tensor {
    let k = conv.kernel_size;
    let n = k * k;
    let pad = k / 2;
    let (h, w) = (x.height, x.width);
    let hw = h * w;
    let (padded, ph, pw) = pad_planes(x, pad);
    let mut out = Tensor::zeros(conv.out_channels, h, w);
    for (o, b) in bias.iter().enumerate() {
        out.data[o * hw..(o + 1) * hw].fill(f64::from(*b));
    }
    counter.additions += (conv.out_channels * hw) as u64;
    let (mut mults, mut adds) = (0u64, 0u64);
    for o in 0..conv.out_channels {
        for i in 0..conv.in_channels {
            let kern: Vec<f64> = weights[(o * conv.in_channels + i) * n..][..n]
                .iter()
                .map(|&v| f64::from(v))
                .collect();
            let plane = &padded[i * ph * pw..(i + 1) * ph * pw];
            let dst = &mut out.data[o * hw..(o + 1) * hw];
            let mut acc = vec![0.0; w];
            for y in 0..h {
                acc.fill(0.0);
                for (c, kv) in kern.iter().enumerate() {
                    let src = &plane[(y + c / k) * pw + c % k..][..w];
                    for (a, v) in acc.iter_mut().zip(src) {
                        *a += kv * v;
                    }
                }
                for (d, a) in dst[y * w..(y + 1) * w].iter_mut().zip(&acc) {
                    *d += a;
                }
            }
            mults += (n * hw) as u64;
            // n - 1 within the step, one to accumulate
            adds += (n * hw) as u64;
        }
    }
    counter.multiplies += mults;
    counter.additions += adds;
    out
}

/// Kernel-payload bytes of one conv layer under both storage models.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerStorage {
    pub name: String,
    pub kernel_size: usize,
    pub kernels: usize,
    pub constrained: bool,
    /// `4 m^2` bytes per kernel.
    pub traditional_bytes: usize,
    /// 5 bytes per constrained kernel, `4 m^2` otherwise.
    pub ghaar_bytes: usize,
    pub bias_bytes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StorageReport {
    pub layers: Vec<LayerStorage>,
}

impl StorageReport {
    /// `constrained = false` reports every layer as stored densely.
    pub fn for_spec(spec: &NetworkSpec, constrained: bool) -> Self {
        let layers = spec
            .convs()
            .into_iter()
            .map(|c| layer_storage(&c.name, c.in_channels, c.out_channels, c.kernel_size, constrained && c.constrained()))
            .collect();
        StorageReport { layers }
    }

    /// Report for bare `(in, out)` layers of `m x m` kernels, all constrained.
    pub fn for_dims(dims: &[(usize, usize)], m: usize) -> Self {
        let layers = dims
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout))| layer_storage(&format!("layer{}", i + 1), cin, cout, m, true))
            .collect();
        StorageReport { layers }
    }

    pub fn kernels(&self) -> usize {
        self.layers.iter().map(|l| l.kernels).sum()
    }

    pub fn traditional_bytes(&self) -> usize {
        self.layers.iter().map(|l| l.traditional_bytes).sum()
    }

    pub fn ghaar_bytes(&self) -> usize {
        self.layers.iter().map(|l| l.ghaar_bytes).sum()
    }

    /// Payload ratio over the constrained layers only.
    pub fn constrained_ratio(&self) -> f64 {
        let (t, g) = self
            .layers
            .iter()
            .filter(|l| l.constrained)
            .fold((0, 0), |(t, g), l| (t + l.traditional_bytes, g + l.ghaar_bytes));
        t as f64 / g as f64
    }

    pub fn ratio(&self) -> f64 {
        self.traditional_bytes() as f64 / self.ghaar_bytes() as f64
    }
}

fn layer_storage(name: &str, cin: usize, cout: usize, m: usize, constrained: bool) -> LayerStorage {
    let kernels = cin * cout;
    let traditional = 4 * m * m * kernels;
    LayerStorage {
        name: name.to_string(),
        kernel_size: m,
        kernels,
        constrained,
        traditional_bytes: traditional,
        ghaar_bytes: if constrained { RECORD_BYTES * kernels } else { traditional },
        bias_bytes: 4 * cout,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::haar_space::enumerate_space;
    use crate::train::project_params;
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_spec() -> NetworkSpec {
        NetworkSpec::new(ArchConfig {
            input_size: 16,
            in_channels: 3,
            classes: 3,
            trunk: [4, 6, 5, 8],
            head: [6, 4, 5],
        })
        .unwrap()
    }

    fn packed(seed: u64, nr: usize) -> (NetworkSpec, ModelParams, CompressedModel) {
        let spec = small_spec();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx: Vec<u32> = (0..256).collect();
        for i in 0..nr {
            let j = rng.random_range(i..256);
            idx.swap(i, j);
        }
        idx.truncate(nr);
        let space = ReducedSpace::from_indices(3, idx).unwrap();
        let mut params = ModelParams::init(&spec, seed);
        for l in params.layers_mut() {
            l.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.1..0.1));
        }
        project_params(&spec, &mut params, &space).unwrap();
        let model = CompressedModel::from_params(&spec, &params, &space).unwrap();
        (spec, params, model)
    }

    fn random_input(rng: &mut ChaCha8Rng, spec: &NetworkSpec) -> Tensor {
        let a = &spec.arch;
        let n = a.in_channels * a.input_size * a.input_size;
        Tensor::from_vec(
            a.in_channels,
            a.input_size,
            a.input_size,
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn record_is_five_bytes() {
        let r = KernelRecord {
            filter_ref: 7,
            factor: -0.375,
        };
        let b = r.to_bytes();
        assert_eq!(b.len(), 5);
        assert_eq!(b[0], 7);
        assert_eq!(&b[1..], &(-0.375f32).to_le_bytes());
        assert_eq!(KernelRecord::from_bytes(b), r);
    }

    #[test]
    fn step_examples() {
        let mut c = OpCounter::new();
        let patch: Vec<f64> = (1..=9).map(f64::from).collect();
        let ones = SignPattern::from_index(3, 255).unwrap();
        assert_eq!(haar_conv_step(&ones, &patch, 1.0, &mut c).unwrap(), 45.0);
        for idx in [0, 17, 200] {
            let p = SignPattern::from_index(3, idx).unwrap();
            assert_eq!(haar_conv_step(&p, &patch, 0.0, &mut c).unwrap(), 0.0);
        }
        assert_eq!(c.multiplies, 4);
        assert_eq!(c.additions, 32);
        assert!(haar_conv_step(&ones, &patch[..4], 1.0, &mut c).is_err());
    }

    #[test]
    fn step_matches_dense_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let conv = ConvSpec {
            name: "probe".into(),
            in_channels: 1,
            out_channels: 1,
            kernel_size: 3,
        };
        let mut c = OpCounter::new();
        for _ in 0..1000 {
            let p = SignPattern::from_index(3, rng.random_range(0..256)).unwrap();
            let k: f64 = rng.random_range(-2.0..2.0);
            let patch: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
            // centre output of a 3x3 input is exactly one full step
            let input = Tensor::from_vec(1, 3, 3, patch.clone()).unwrap();
            let params = ConvParams {
                weights: p.scaled(k),
                bias: vec![0.0],
                haar: None,
            };
            let dense = nn::conv2d_dense(&input, &conv, &params).unwrap().at(0, 1, 1);
            let fast = haar_conv_step(&p, &patch, k, &mut c).unwrap();
            assert!((fast - dense).abs() <= 1e-5);
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let (spec, _, model) = packed(5, 20);
        let bytes = model.encode();
        assert_eq!(bytes.len(), file_size(&spec, StorageMode::Haar, 20));
        let back = CompressedModel::decode(&bytes).unwrap();
        assert_eq!(back, model);
        assert_eq!(back.encode(), bytes);
        let dense = CompressedModel::dense_from_params(&spec, &ModelParams::init(&spec, 2)).unwrap();
        let bytes = dense.encode();
        assert_eq!(bytes.len(), file_size(&spec, StorageMode::Dense, 0));
        assert_eq!(CompressedModel::decode(&bytes).unwrap().encode(), bytes);
    }

    #[test]
    fn layer_payload_is_five_bytes_per_kernel() {
        let spec = NetworkSpec::new(ArchConfig {
            input_size: 16,
            in_channels: 64,
            classes: 2,
            trunk: [128, 1, 1, 1],
            head: [1, 1, 1],
        })
        .unwrap();
        let full = file_size(&spec, StorageMode::Haar, 1);
        let mut shrunk = spec.clone();
        shrunk.arch.trunk[0] = 1;
        let shrunk = NetworkSpec::new(shrunk.arch).unwrap();
        // conv1 changes from 64x128 to 64x1 kernels; conv2 from 128x1 to 1x1
        let diff = full - file_size(&shrunk, StorageMode::Haar, 1);
        assert_eq!(diff, 64 * 127 * 5 + 4 * 127 + 127 * 5);
        assert_eq!(StorageReport::for_dims(&[(64, 128)], 3).ghaar_bytes(), 40_960);
    }

    #[test]
    fn decode_rejects_corruption() {
        let (_, _, model) = packed(1, 8);
        let bytes = model.encode();
        let mut bad = bytes.clone();
        bad[0] ^= 1;
        assert!(matches!(CompressedModel::decode(&bad), Err(Error::Format { offset: 0, .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(CompressedModel::decode(&bad), Err(Error::Format { offset: 4, .. })));
        let mut bad = bytes.clone();
        bad[DIGEST_OFFSET] ^= 0xff;
        assert!(matches!(CompressedModel::decode(&bad), Err(Error::Format { offset: DIGEST_OFFSET, .. })));
        for cut in [3, 30, 40, bytes.len() - 1] {
            assert!(matches!(CompressedModel::decode(&bytes[..cut]), Err(Error::Format { .. })));
        }
        let first_record = HEADER_BYTES + 3 + 4 * 8;
        let mut bad = bytes.clone();
        bad[first_record] = 8;
        match CompressedModel::decode(&bad) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, first_record),
            other => panic!("{other:?}"),
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(CompressedModel::decode(&long), Err(Error::Format { .. })));
    }

    #[test]
    fn decode_for_checks_the_network() {
        let (spec, _, model) = packed(1, 8);
        let bytes = model.encode();
        assert!(CompressedModel::decode_for(&bytes, &spec).is_ok());
        let other = NetworkSpec::new(ArchConfig {
            classes: 4,
            ..spec.arch.clone()
        })
        .unwrap();
        assert!(matches!(CompressedModel::decode_for(&bytes, &other), Err(Error::Format { .. })));
    }

    #[test]
    fn unprojected_params_are_rejected() {
        let spec = small_spec();
        let params = ModelParams::init(&spec, 1);
        let space = ReducedSpace::full(3).unwrap();
        assert!(matches!(CompressedModel::from_params(&spec, &params, &space), Err(Error::Usage(_))));
        assert!(CompressedModel::from_params(&spec, &params, &ReducedSpace::from_indices(3, vec![1]).unwrap()).is_err());
    }

    #[test]
    fn fast_path_matches_dense_network() {
        let (spec, _, model) = packed(9, 16);
        let dense = model.to_params();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut counter = OpCounter::new();
        for _ in 0..20 {
            let x = random_input(&mut rng, &spec);
            let fast = model.infer(&x, &mut counter).unwrap();
            let reference = nn::predict(&spec, &dense, &x).unwrap();
            let slow = model.infer_dense(&x, &mut OpCounter::new()).unwrap();
            for (a, b) in fast.loc.iter().chain(&fast.probs).zip(reference.loc.iter().chain(&reference.probs)) {
                assert!((a - b).abs() <= 1e-9);
            }
            for (a, b) in fast.logits.iter().zip(&slow.logits) {
                assert!((a - b).abs() <= 1e-5);
            }
        }
        let again = model.infer(&random_input(&mut ChaCha8Rng::seed_from_u64(1), &spec), &mut counter).unwrap();
        let twice = model.infer(&random_input(&mut ChaCha8Rng::seed_from_u64(1), &spec), &mut counter).unwrap();
        assert_eq!(again.logits, twice.logits);
    }

    #[test]
    fn multiply_counts() {
        let (spec, _, model) = packed(2, 32);
        let x = random_input(&mut ChaCha8Rng::seed_from_u64(0), &spec);
        let mut fast = OpCounter::new();
        model.infer(&x, &mut fast).unwrap();
        let mut dense = OpCounter::new();
        model.infer_dense(&x, &mut dense).unwrap();
        for conv in spec.convs() {
            let f = fast.layer(&conv.name).unwrap();
            let d = dense.layer(&conv.name).unwrap();
            assert_eq!(f.steps, d.steps);
            if conv.constrained() {
                assert_eq!(f.multiplies, f.steps);
                assert_eq!(d.multiplies, 9 * d.steps);
            } else {
                assert_eq!(f.multiplies, f.steps);
                assert_eq!(d.multiplies, d.steps);
            }
        }
        let conv1 = &spec.convs()[0];
        assert_eq!(fast.layer("conv1").unwrap().steps, (16 * 16 * conv1.out_channels * 3) as u64);
        let before = fast.clone();
        model.infer(&x, &mut fast).unwrap();
        assert_eq!(fast.multiplies, 2 * before.multiplies);
        fast.reset();
        assert_eq!(fast, OpCounter::new());
    }

    #[test]
    fn wrong_input_shape() {
        let (_, _, model) = packed(2, 4);
        assert!(model.infer(&Tensor::zeros(3, 8, 8), &mut OpCounter::new()).is_err());
    }

    #[test]
    fn storage_examples() {
        let one = StorageReport::for_dims(&[(1, 1)], 3);
        assert_eq!((one.traditional_bytes(), one.ghaar_bytes()), (36, 5));
        let table = StorageReport::for_dims(&[(3, 64), (64, 128), (128, 256), (256, 256), (256, 128)], 3);
        assert_eq!(table.kernels(), 139_456);
        assert_eq!(table.traditional_bytes(), 5_020_416);
        assert_eq!(table.ghaar_bytes(), 697_280);
        assert_eq!(table.ratio(), 7.2);
        let spec = NetworkSpec::new(ArchConfig::default()).unwrap();
        let r = StorageReport::for_spec(&spec, true);
        assert_eq!(r.constrained_ratio(), 7.2);
        assert!(r.ratio() < 7.2 && r.ratio() > 1.0);
        assert_eq!(StorageReport::for_spec(&spec, false).ratio(), 1.0);
    }

    #[test]
    fn file_size_formula_matches_enumeration() {
        let spec = NetworkSpec::new(ArchConfig::default()).unwrap();
        let r = StorageReport::for_spec(&spec, true);
        let biases: usize = r.layers.iter().map(|l| l.bias_bytes).sum();
        assert_eq!(file_size(&spec, StorageMode::Haar, 32), HEADER_BYTES + 3 + 128 + r.ghaar_bytes() + biases);
    }

    proptest! {
        #[test]
        fn record_round_trip(r in 0u8..=255, bits in prop::num::u32::ANY) {
            let rec = KernelRecord { filter_ref: r, factor: f32::from_bits(bits) };
            let back = KernelRecord::from_bytes(rec.to_bytes());
            prop_assert_eq!(back.filter_ref, r);
            prop_assert_eq!(back.factor.to_bits(), bits);
        }

        #[test]
        fn ratio_is_constant(dims in prop::collection::vec((1usize..300, 1usize..300), 1..6)) {
            let r = StorageReport::for_dims(&dims, 3);
            prop_assert!((r.ratio() - 7.2).abs() < 1e-12);
        }

        #[test]
        fn step_accounting(idx in 0u32..256, k in -4.0f64..4.0, patch in prop::collection::vec(-1.0f64..1.0, 9)) {
            let p = SignPattern::from_index(3, idx).unwrap();
            let mut c = OpCounter::new();
            let v = haar_conv_step(&p, &patch, k, &mut c).unwrap();
            let oracle: f64 = p.scaled(k).iter().zip(&patch).map(|(a, b)| a * b).sum();
            prop_assert!((v - oracle).abs() <= 1e-12);
            prop_assert_eq!(c.multiplies, 1);
            prop_assert_eq!(c.additions, 8);
        }
    }

    #[test]
    fn full_space_is_usable() {
        assert_eq!(enumerate_space(3).unwrap().len(), 256);
        let (_, _, model) = packed(4, 256);
        assert_eq!(CompressedModel::decode(&model.encode()).unwrap(), model);
    }
}
