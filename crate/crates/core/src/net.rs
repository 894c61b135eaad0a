//! Small sequential networks built from CADC convolutions.
//!
//! A [`NetSpec`] describes the layers; a [`Network`] binds it to weights and
//! a crossbar size. The float path supports training; [`QuantizedNetwork`]
//! runs the hardware path (ternary weights, quantized inputs, in-memory ADC,
//! optional code noise).

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::codec::{compress, compress_signed};
use crate::cost::LayerShape;
use crate::dendrite::{backward_from_psums, segment_psums, sparsity_stats, CadcLayer, ConvMode, DendriteFn, PsumTensor};
use crate::error::{Error, Result};
use crate::partition::{partition, psum_count, CrossbarConfig, PsumCountQuery};
use crate::quant::{
    adc_convert, inject_noise, mac_integer, quantize_input, ternarize, AdcModel, FixedPointFormat, NoiseModel,
    ThresholdRule,
};
use crate::tensor::{col2im, im2col, ConvSpec, Tensor, UnrolledKernel};
use crate::tensor_io::{self, StoredTensor};

/// Post-layer activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    None,
}

fn default_fn() -> DendriteFn {
    DendriteFn::Relu
}
fn default_adc_bits() -> u32 {
    4
}
fn default_input_bits() -> u32 {
    4
}
fn default_weight_bits() -> u32 {
    2
}
fn default_one() -> usize {
    1
}

/// One layer of a [`NetSpec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum LayerSpec {
    Conv {
        #[serde(default)]
        name: Option<String>,
        /// Checked against the previous layer when given.
        #[serde(default)]
        c_in: Option<usize>,
        c_out: usize,
        kernel: [usize; 2],
        #[serde(default = "default_one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default = "default_fn")]
        dendrite_fn: DendriteFn,
        #[serde(default = "default_adc_bits")]
        adc_bits: u32,
        #[serde(default = "default_input_bits")]
        input_bits: u32,
        #[serde(default = "default_weight_bits")]
        weight_bits: u32,
        #[serde(default)]
        activation: Activation,
    },
    Dense {
        #[serde(default)]
        name: Option<String>,
        out: usize,
    },
    Avgpool {
        size: usize,
    },
}

/// Ordered layer list with the input shape `[c, h, w]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSpec {
    #[serde(default)]
    pub name: String,
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
}

/// Conv layer settings after shape inference.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayerInfo {
    pub spec: ConvSpec,
    pub f: DendriteFn,
    pub adc_bits: u32,
    pub input_bits: u32,
    pub weight_bits: u32,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ResolvedKind {
    Conv(ConvLayerInfo),
    Dense { inputs: usize, outputs: usize },
    AvgPool { size: usize },
}

/// A layer with its inferred input and output shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedLayer {
    pub name: String,
    pub kind: ResolvedKind,
    pub in_shape: [usize; 3],
    pub out_shape: [usize; 3],
}

impl NetSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: NetSpec = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.resolve()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Infer every layer's shapes, checking that adjacent layers compose.
    pub fn resolve(&self) -> Result<Vec<ResolvedLayer>> {
        if self.input.contains(&0) {
            return Err(Error::Config(format!("input shape {:?} has a zero dimension", self.input)));
        }
        if self.layers.is_empty() {
            return Err(Error::Config("network has no layers".into()));
        }
        let mut shape = self.input;
        let mut out = Vec::with_capacity(self.layers.len());
        let (mut n_conv, mut n_dense, mut n_pool) = (0, 0, 0);
        for (i, layer) in self.layers.iter().enumerate() {
            let in_shape = shape;
            let (name, kind) = match layer {
                LayerSpec::Conv {
                    name,
                    c_in,
                    c_out,
                    kernel,
                    stride,
                    padding,
                    dendrite_fn,
                    adc_bits,
                    input_bits,
                    weight_bits,
                    activation,
                } => {
                    if let Some(c) = c_in {
                        if *c != shape[0] {
                            return Err(Error::Config(format!(
                                "layer {i}: c_in = {c} but the previous layer produces {} channels",
                                shape[0]
                            )));
                        }
                    }
                    if !(1..=5).contains(adc_bits) {
                        return Err(Error::Config(format!("layer {i}: adc_bits must be 1..=5, got {adc_bits}")));
                    }
                    if *input_bits == 0 || *input_bits > 16 || *weight_bits == 0 {
                        return Err(Error::Config(format!("layer {i}: bad input/weight bit widths")));
                    }
                    dendrite_fn.validate()?;
                    let spec = ConvSpec {
                        c_in: shape[0],
                        k1: kernel[0],
                        k2: kernel[1],
                        c_out: *c_out,
                        stride: *stride,
                        padding: *padding,
                    };
                    let (oh, ow) = spec
                        .output_hw(shape[1], shape[2])
                        .map_err(|e| Error::Config(format!("layer {i}: {e}")))?;
                    shape = [*c_out, oh, ow];
                    n_conv += 1;
                    (
                        name.clone().unwrap_or_else(|| format!("conv{n_conv}")),
                        ResolvedKind::Conv(ConvLayerInfo {
                            spec,
                            f: *dendrite_fn,
                            adc_bits: *adc_bits,
                            input_bits: *input_bits,
                            weight_bits: *weight_bits,
                            activation: *activation,
                        }),
                    )
                }
                LayerSpec::Dense { name, out: o } => {
                    if *o == 0 {
                        return Err(Error::Config(format!("layer {i}: dense output must be >= 1")));
                    }
                    let inputs = shape.iter().product();
                    shape = [*o, 1, 1];
                    n_dense += 1;
                    (
                        name.clone().unwrap_or_else(|| format!("dense{n_dense}")),
                        ResolvedKind::Dense { inputs, outputs: *o },
                    )
                }
                LayerSpec::Avgpool { size } => {
                    if *size == 0 || shape[1] % size != 0 || shape[2] % size != 0 {
                        return Err(Error::Config(format!(
                            "layer {i}: avgpool size {size} does not tile {}x{}",
                            shape[1], shape[2]
                        )));
                    }
                    shape = [shape[0], shape[1] / size, shape[2] / size];
                    n_pool += 1;
                    (format!("pool{n_pool}"), ResolvedKind::AvgPool { size: *size })
                }
            };
            out.push(ResolvedLayer {
                name,
                kind,
                in_shape,
                out_shape: shape,
            });
        }
        Ok(out)
    }

    /// Conv layers as cost-model shapes.
    pub fn conv_shapes(&self) -> Result<Vec<(LayerShape, u32)>> {
        Ok(self
            .resolve()?
            .into_iter()
            .filter_map(|l| match l.kind {
                ResolvedKind::Conv(c) => Some((
                    LayerShape {
                        name: l.name,
                        spec: c.spec,
                        in_h: l.in_shape[1],
                        in_w: l.in_shape[2],
                        f: c.f,
                        weight_bits: c.weight_bits,
                        input_bits: c.input_bits,
                        input_bit_serial: false,
                    },
                    c.adc_bits,
                )),
                _ => None,
            })
            .collect())
    }

    /// Copy with every conv layer's dendrite function replaced.
    pub fn with_dendrite_fn(&self, f: DendriteFn) -> NetSpec {
        let mut s = self.clone();
        for l in &mut s.layers {
            if let LayerSpec::Conv { dendrite_fn, .. } = l {
                *dendrite_fn = f;
            }
        }
        s
    }

    /// Copy with every conv layer's ADC resolution replaced.
    pub fn with_adc_bits(&self, bits: u32) -> NetSpec {
        let mut s = self.clone();
        for l in &mut s.layers {
            if let LayerSpec::Conv { adc_bits, .. } = l {
                *adc_bits = bits;
            }
        }
        s
    }

    pub fn num_classes(&self) -> Result<usize> {
        let r = self.resolve()?;
        let last = r.last().expect("resolve rejects empty nets");
        Ok(last.out_shape.iter().product())
    }
}

/// Learnable parameters of one layer.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerWeights {
    Conv(UnrolledKernel),
    Dense { w: Tensor, b: Vec<f64> },
    None,
}

/// Named per-layer tensors, stored as one binary tensor file each.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightArchive {
    pub tensors: BTreeMap<String, Tensor>,
}

impl WeightArchive {
    /// Random He-normal initialization.
    pub fn init(spec: &NetSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for l in spec.resolve()? {
            match l.kind {
                ResolvedKind::Conv(c) => {
                    let s = c.spec;
                    let std = (2.0 / s.unrolled_dim() as f64).sqrt();
                    let n = Normal::new(0.0, std).expect("positive std");
                    let t = Tensor::from_fn(&[s.c_in, s.k1, s.k2, s.c_out], |_| n.sample(&mut rng));
                    tensors.insert(format!("{}.weight", l.name), t);
                }
                ResolvedKind::Dense { inputs, outputs } => {
                    let std = (1.0 / inputs as f64).sqrt();
                    let n = Normal::new(0.0, std).expect("positive std");
                    let w = Tensor::from_fn(&[inputs, outputs], |_| n.sample(&mut rng));
                    tensors.insert(format!("{}.weight", l.name), w);
                    tensors.insert(format!("{}.bias", l.name), Tensor::zeros(&[outputs]));
                }
                ResolvedKind::AvgPool { .. } => {}
            }
        }
        Ok(WeightArchive { tensors })
    }

    /// Check every tensor the spec needs is present with the right shape.
    pub fn check(&self, spec: &NetSpec) -> Result<()> {
        for l in spec.resolve()? {
            let want: Vec<(String, Vec<usize>)> = match l.kind {
                ResolvedKind::Conv(c) => vec![(
                    format!("{}.weight", l.name),
                    vec![c.spec.c_in, c.spec.k1, c.spec.k2, c.spec.c_out],
                )],
                ResolvedKind::Dense { inputs, outputs } => vec![
                    (format!("{}.weight", l.name), vec![inputs, outputs]),
                    (format!("{}.bias", l.name), vec![outputs]),
                ],
                ResolvedKind::AvgPool { .. } => vec![],
            };
            for (name, shape) in want {
                match self.tensors.get(&name) {
                    None => return Err(Error::Config(format!("weight archive lacks {name}"))),
                    Some(t) if t.shape() != shape => {
                        return Err(Error::shape("weight archive", format!("{name} {shape:?}"), format!("{:?}", t.shape())))
                    }
                    Some(_) => {}
                }
            }
        }
        Ok(())
    }

    /// Write `<dir>/<name>.cadc` for every tensor.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        for (name, t) in &self.tensors {
            tensor_io::save(dir.join(format!("{name}.cadc")), &StoredTensor::F64(t.clone()))?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let mut tensors = BTreeMap::new();
        let mut entries: Vec<_> = std::fs::read_dir(dir.as_ref())?.collect::<std::io::Result<_>>()?;
        entries.sort_by_key(|e| e.file_name());
        for e in entries {
            let path = e.path();
            if path.extension().and_then(|x| x.to_str()) != Some("cadc") {
                continue;
            }
            let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            tensors.insert(name, tensor_io::load(&path)?.into_f64()?);
        }
        Ok(WeightArchive { tensors })
    }
}

#[derive(Debug, Clone)]
enum NetLayer {
    Conv {
        cadc: CadcLayer,
        info: ConvLayerInfo,
    },
    Dense {
        w: Tensor,
        b: Vec<f64>,
    },
    AvgPool {
        size: usize,
    },
}

/// A network bound to weights and a crossbar size.
#[derive(Debug, Clone)]
pub struct Network {
    pub spec: NetSpec,
    pub crossbar: CrossbarConfig,
    resolved: Vec<ResolvedLayer>,
    layers: Vec<NetLayer>,
}

/// Intermediate values of one sample, kept for the backward pass.
#[derive(Debug, Clone)]
enum LayerCache {
    Conv {
        unrolled: Tensor,
        psums: PsumTensor,
        pre_act: Tensor,
    },
    Dense {
        input: Vec<f64>,
    },
    Pool,
}

/// Per-layer parameter gradients of one sample or batch.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerGrad {
    Conv(Vec<f64>),
    Dense { w: Vec<f64>, b: Vec<f64> },
    None,
}

/// Psum statistics of one conv layer during a forward pass.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConvPsumRecord {
    pub raw_zeros: u64,
    pub post_zeros: u64,
    pub total: u64,
}

impl Network {
    pub fn new(spec: &NetSpec, weights: &WeightArchive, crossbar: CrossbarConfig) -> Result<Self> {
        crossbar.validate()?;
        weights.check(spec)?;
        let resolved = spec.resolve()?;
        let mut layers = Vec::with_capacity(resolved.len());
        for l in &resolved {
            layers.push(match &l.kind {
                ResolvedKind::Conv(info) => {
                    let k = &weights.tensors[&format!("{}.weight", l.name)];
                    let uk = UnrolledKernel::from_kernel(k, &info.spec)?;
                    let pk = partition(&uk, &crossbar)?;
                    NetLayer::Conv {
                        cadc: CadcLayer::new(info.spec, pk, info.f)?,
                        info: info.clone(),
                    }
                }
                ResolvedKind::Dense { .. } => NetLayer::Dense {
                    w: weights.tensors[&format!("{}.weight", l.name)].clone(),
                    b: weights.tensors[&format!("{}.bias", l.name)].data().to_vec(),
                },
                ResolvedKind::AvgPool { size } => NetLayer::AvgPool { size: *size },
            });
        }
        Ok(Network {
            spec: spec.clone(),
            crossbar,
            resolved,
            layers,
        })
    }

    pub fn resolved(&self) -> &[ResolvedLayer] {
        &self.resolved
    }

    /// Current weights as an archive.
    pub fn weights(&self) -> Result<WeightArchive> {
        let mut tensors = BTreeMap::new();
        for (l, r) in self.layers.iter().zip(&self.resolved) {
            match l {
                NetLayer::Conv { cadc, info } => {
                    let uk = crate::partition::reconstruct(&cadc.partitioned)?;
                    tensors.insert(format!("{}.weight", r.name), uk.to_kernel(&info.spec)?);
                }
                NetLayer::Dense { w, b } => {
                    tensors.insert(format!("{}.weight", r.name), w.clone());
                    tensors.insert(format!("{}.bias", r.name), Tensor::new(vec![b.len()], b.clone())?);
                }
                NetLayer::AvgPool { .. } => {}
            }
        }
        Ok(WeightArchive { tensors })
    }

    /// Conv layers, in order.
    pub fn conv_layers(&self) -> Vec<(&str, &CadcLayer, &ConvLayerInfo, [usize; 3])> {
        self.layers
            .iter()
            .zip(&self.resolved)
            .filter_map(|(l, r)| match l {
                NetLayer::Conv { cadc, info } => Some((r.name.as_str(), cadc, info, r.in_shape)),
                _ => None,
            })
            .collect()
    }

    /// Psums per conv layer for one input sample.
    pub fn psum_counts(&self) -> Result<Vec<(String, usize, u64)>> {
        self.conv_layers()
            .into_iter()
            .map(|(name, cadc, info, in_shape)| {
                let (oh, ow) = info.spec.output_hw(in_shape[1], in_shape[2])?;
                let q = PsumCountQuery {
                    output_positions: oh * ow,
                    weight_bits: info.weight_bits,
                    input_bits: info.input_bits,
                    input_bit_serial: false,
                };
                Ok((name.to_string(), cadc.s_count(), psum_count(&info.spec, &self.crossbar, &q)))
            })
            .collect()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape() != self.spec.input {
            return Err(Error::shape("network input", format!("{:?}", self.spec.input), format!("{:?}", x.shape())));
        }
        Ok(())
    }

    /// Logits for one sample, plus per-conv-layer psum zero counts.
    pub fn forward(&self, x: &Tensor, mode: ConvMode) -> Result<(Vec<f64>, Vec<ConvPsumRecord>)> {
        let (logits, caches) = self.forward_cached(x, mode, true)?;
        let records = caches
            .iter()
            .zip(&self.layers)
            .filter_map(|(c, l)| match (c, l) {
                (LayerCache::Conv { psums, .. }, NetLayer::Conv { cadc, .. }) => {
                    let raw = sparsity_stats(psums);
                    let post_zeros = match mode {
                        ConvMode::VConv => raw.zeros,
                        ConvMode::Cadc => psums.data.iter().filter(|&&v| cadc.f.apply(v) == 0.0).count() as u64,
                    };
                    Some(ConvPsumRecord {
                        raw_zeros: raw.zeros,
                        post_zeros,
                        total: raw.total,
                    })
                }
                _ => None,
            })
            .collect();
        Ok((logits, records))
    }

    fn forward_cached(&self, x: &Tensor, mode: ConvMode, _keep: bool) -> Result<(Vec<f64>, Vec<LayerCache>)> {
        self.check_input(x)?;
        let mut act = x.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for (l, r) in self.layers.iter().zip(&self.resolved) {
            match l {
                NetLayer::Conv { cadc, info } => {
                    let unrolled = im2col(&act, &info.spec)?;
                    let psums = segment_psums(cadc, &unrolled)?;
                    let pre = accumulate(cadc, &psums, mode);
                    let mut out = pre.clone();
                    if info.activation == Activation::Relu {
                        out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
                    }
                    let [c, h, w] = r.out_shape;
                    act = crate::tensor::positions_to_chw(&out, h, w)?;
                    debug_assert_eq!(act.shape(), [c, h, w]);
                    caches.push(LayerCache::Conv {
                        unrolled,
                        psums,
                        pre_act: pre,
                    });
                }
                NetLayer::Dense { w, b } => {
                    let input = act.data().to_vec();
                    let outs = b.len();
                    let mut y = b.clone();
                    for (i, &xv) in input.iter().enumerate() {
                        let row = &w.data()[i * outs..(i + 1) * outs];
                        for (o, &wv) in y.iter_mut().zip(row) {
                            *o += xv * wv;
                        }
                    }
                    act = Tensor::new(vec![outs, 1, 1], y)?;
                    caches.push(LayerCache::Dense { input });
                }
                NetLayer::AvgPool { size } => {
                    act = avg_pool(&act, *size)?;
                    caches.push(LayerCache::Pool);
                }
            }
        }
        Ok((act.into_data(), caches))
    }

    /// Loss and parameter gradients of softmax cross-entropy for one sample.
    pub fn loss_and_grads(&self, x: &Tensor, label: usize, mode: ConvMode) -> Result<(f64, Vec<LayerGrad>)> {
        let (logits, caches) = self.forward_cached(x, mode, true)?;
        if label >= logits.len() {
            return Err(Error::InvalidArgument(format!("label {label} >= {} classes", logits.len())));
        }
        let probs = softmax(&logits);
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        let loss = lse - logits[label];
        let mut grad: Vec<f64> = probs.clone();
        grad[label] -= 1.0;
        let mut g = Tensor::new(vec![grad.len(), 1, 1], grad)?;
        let mut grads = vec![LayerGrad::None; self.layers.len()];
        for i in (0..self.layers.len()).rev() {
            let r = &self.resolved[i];
            match (&self.layers[i], &caches[i]) {
                (NetLayer::Dense { w, b }, LayerCache::Dense { input }) => {
                    let outs = b.len();
                    let gy = g.data();
                    let mut gw = vec![0.0; input.len() * outs];
                    for (ii, &xv) in input.iter().enumerate() {
                        for o in 0..outs {
                            gw[ii * outs + o] = xv * gy[o];
                        }
                    }
                    let gx: Vec<f64> = (0..input.len())
                        .map(|ii| {
                            let row = &w.data()[ii * outs..(ii + 1) * outs];
                            row.iter().zip(gy).fold(0.0, |a, (wv, gv)| a + wv * gv)
                        })
                        .collect();
                    grads[i] = LayerGrad::Dense { w: gw, b: gy.to_vec() };
                    g = Tensor::new(r.in_shape.to_vec(), gx)?;
                }
                (NetLayer::AvgPool { size }, LayerCache::Pool) => {
                    g = avg_pool_backward(&g, *size, r.in_shape)?;
                }
                (NetLayer::Conv { cadc, info }, LayerCache::Conv { unrolled, psums, pre_act }) => {
                    let mut up = crate::tensor::chw_to_positions(&g)?;
                    if info.activation == Activation::Relu {
                        for (u, &p) in up.data_mut().iter_mut().zip(pre_act.data()) {
                            if p <= 0.0 {
                                *u = 0.0;
                            }
                        }
                    }
                    let lg = backward_from_psums(cadc, unrolled, &up, psums, mode)?;
                    grads[i] = LayerGrad::Conv(lg.grad_weights.into_data());
                    if i > 0 {
                        g = col2im(&lg.grad_input, &info.spec, r.in_shape[1], r.in_shape[2])?;
                    }
                }
                _ => unreachable!("cache kind follows layer kind"),
            }
        }
        Ok((loss, grads))
    }

    /// `w -= step(grad)` for every layer, via a caller-supplied update rule
    /// that sees `(layer, param slot, index, grad)`.
    pub(crate) fn apply_update(&mut self, mut update: impl FnMut(usize, usize, usize, f64) -> f64, grads: &[LayerGrad]) {
        for (li, (layer, g)) in self.layers.iter_mut().zip(grads).enumerate() {
            match (layer, g) {
                (NetLayer::Conv { cadc, .. }, LayerGrad::Conv(gw)) => {
                    let c = cadc.partitioned.cols;
                    let n = cadc.partitioned.segment_map.n_rows;
                    for (idx, &gv) in gw.iter().enumerate() {
                        let (row, col) = (idx / c, idx % c);
                        let seg = &mut cadc.partitioned.segments[row / n];
                        seg[(row % n) * c + col] -= update(li, 0, idx, gv);
                    }
                }
                (NetLayer::Dense { w, b }, LayerGrad::Dense { w: gw, b: gb }) => {
                    for (idx, (wv, &gv)) in w.data_mut().iter_mut().zip(gw).enumerate() {
                        *wv -= update(li, 0, idx, gv);
                    }
                    for (idx, (bv, &gv)) in b.iter_mut().zip(gb).enumerate() {
                        *bv -= update(li, 1, idx, gv);
                    }
                }
                _ => {}
            }
        }
    }

    pub fn predict(&self, x: &Tensor, mode: ConvMode) -> Result<usize> {
        Ok(argmax(&self.forward(x, mode)?.0))
    }
}

fn accumulate(cadc: &CadcLayer, psums: &PsumTensor, mode: ConvMode) -> Tensor {
    match mode {
        ConvMode::VConv => crate::dendrite::accumulate_raw(psums),
        ConvMode::Cadc => {
            let (p, c) = (psums.positions, psums.channels);
            let mut y = vec![0.0; p * c];
            for (s, &ws) in cadc.soma_weights.iter().enumerate() {
                let block = &psums.data[s * p * c..(s + 1) * p * c];
                for (acc, &v) in y.iter_mut().zip(block) {
                    *acc += ws * cadc.f.apply(v);
                }
            }
            Tensor::new(vec![p, c], y).expect("non-empty psums")
        }
    }
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn avg_pool(x: &Tensor, size: usize) -> Result<Tensor> {
    let [c, h, w] = match x.shape()[..] {
        [c, h, w] => [c, h, w],
        _ => return Err(Error::shape("avg_pool", "[C, H, W]", format!("{:?}", x.shape()))),
    };
    let (oh, ow) = (h / size, w / size);
    let norm = 1.0 / (size * size) as f64;
    let d = x.data();
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = 0.0;
                for dy in 0..size {
                    for dx in 0..size {
                        s += d[(ch * h + oy * size + dy) * w + ox * size + dx];
                    }
                }
                out[(ch * oh + oy) * ow + ox] = s * norm;
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

fn avg_pool_backward(g: &Tensor, size: usize, in_shape: [usize; 3]) -> Result<Tensor> {
    let [c, h, w] = in_shape;
    let (oh, ow) = (h / size, w / size);
    let norm = 1.0 / (size * size) as f64;
    let gd = g.data();
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[(ch * h + y) * w + x] = gd[(ch * oh + y / size) * ow + x / size] * norm;
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// Options for the quantized hardware path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantConfig {
    pub mode: ConvMode,
    pub threshold: ThresholdRule,
    /// Overrides every conv layer's ADC resolution when set.
    pub adc_bits: Option<u32>,
}

impl QuantConfig {
    pub fn new(mode: ConvMode) -> Self {
        QuantConfig {
            mode,
            threshold: ThresholdRule::default(),
            adc_bits: None,
        }
    }
}

#[derive(Debug, Clone)]
struct QuantConv {
    spec: ConvSpec,
    activation: Activation,
    /// Ternary codes per segment, `rows x c_out`.
    segments: Vec<Vec<i8>>,
    ranges: Vec<(usize, usize)>,
    weight_scale: f64,
    input_fmt: FixedPointFormat,
    adcs: Vec<AdcModel>,
    soma: Vec<f64>,
}

#[derive(Debug, Clone)]
enum QuantLayer {
    Conv(QuantConv),
    Float(usize),
}

/// Counts gathered by the quantized path for one conv layer.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantLayerStats {
    pub conversions: u64,
    pub zero_codes: u64,
    pub compressed_bits: u64,
    pub uncompressed_bits: u64,
    pub skip_adds: u64,
    pub dense_adds: u64,
}

impl QuantLayerStats {
    pub fn add(&mut self, o: &QuantLayerStats) {
        self.conversions += o.conversions;
        self.zero_codes += o.zero_codes;
        self.compressed_bits += o.compressed_bits;
        self.uncompressed_bits += o.uncompressed_bits;
        self.skip_adds += o.skip_adds;
        self.dense_adds += o.dense_adds;
    }
}

/// The hardware numeric path of a [`Network`].
#[derive(Debug, Clone)]
pub struct QuantizedNetwork {
    float: Network,
    config: QuantConfig,
    layers: Vec<QuantLayer>,
}

impl QuantizedNetwork {
    /// Ternarize weights and calibrate input formats and ADC full scales on
    /// `calibration` samples.
    pub fn calibrate(net: &Network, calibration: &[Tensor], config: QuantConfig) -> Result<Self> {
        if calibration.is_empty() {
            return Err(Error::InvalidArgument("calibration set is empty".into()));
        }
        // Float activations entering each layer, per calibration sample.
        let mut acts: Vec<Tensor> = calibration.to_vec();
        let mut layers = Vec::with_capacity(net.layers.len());
        for (li, (l, r)) in net.layers.iter().zip(&net.resolved).enumerate() {
            match l {
                NetLayer::Conv { cadc, info } => {
                    let adc_bits = config.adc_bits.unwrap_or(info.adc_bits);
                    let uk = crate::partition::reconstruct(&cadc.partitioned)?;
                    let tern = ternarize(&uk.data, config.threshold)?;
                    let c = uk.cols;
                    let map = &cadc.partitioned.segment_map;
                    let segments: Vec<Vec<i8>> = map
                        .segments
                        .iter()
                        .map(|&(a, b)| tern.codes[a * c..b * c].to_vec())
                        .collect();
                    let (lo, hi) = acts.iter().flat_map(|t| t.data()).fold((0.0f64, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
                    let signed = lo < 0.0;
                    let max_abs = hi.max(-lo);
                    let input_fmt = FixedPointFormat::for_range(info.input_bits.max(if signed { 2 } else { 1 }), signed, max_abs);
                    let scale = input_fmt.scale * tern.scale;

                    let mut full = vec![0.0f64; map.s_count];
                    for a in &acts {
                        let cols = im2col(a, &info.spec)?;
                        let codes = quantize_all(cols.data(), &input_fmt)?;
                        let d = info.spec.unrolled_dim();
                        for p in 0..cols.shape()[0] {
                            for (s, &(start, end)) in map.segments.iter().enumerate() {
                                let m = mac_integer(&segments[s], c, &codes[p * d + start..p * d + end])?;
                                let peak = m.iter().fold(0i64, |acc, v| acc.max(v.abs()));
                                full[s] = full[s].max(peak as f64 * scale);
                            }
                        }
                    }
                    let adcs = full
                        .iter()
                        .map(|&fs| {
                            let fs = if fs > 0.0 { fs } else { scale.max(f64::MIN_POSITIVE) };
                            match config.mode {
                                ConvMode::Cadc => AdcModel::new(adc_bits, fs, info.f),
                                ConvMode::VConv => AdcModel::signed(adc_bits.max(2), fs),
                            }
                        })
                        .collect::<Result<Vec<_>>>()?;
                    layers.push(QuantLayer::Conv(QuantConv {
                        spec: info.spec,
                        activation: info.activation,
                        segments,
                        ranges: map.segments.clone(),
                        weight_scale: tern.scale,
                        input_fmt,
                        adcs,
                        soma: cadc.soma_weights.clone(),
                    }));
                }
                _ => layers.push(QuantLayer::Float(li)),
            }
            let next: Result<Vec<Tensor>> = acts.iter().map(|a| net.layer_forward_float(li, a, config.mode)).collect();
            acts = next?;
            debug_assert!(acts.iter().all(|a| a.shape() == r.out_shape));
        }
        Ok(QuantizedNetwork {
            float: net.clone(),
            config,
            layers,
        })
    }

    pub fn config(&self) -> &QuantConfig {
        &self.config
    }

    /// Logits plus per-conv-layer statistics. `noise` carries the model and
    /// the sample index used to key its streams.
    pub fn forward(&self, x: &Tensor, noise: Option<(&NoiseModel, u64)>) -> Result<(Vec<f64>, Vec<QuantLayerStats>)> {
        self.float.check_input(x)?;
        let mut act = x.clone();
        let mut stats = Vec::new();
        for (li, l) in self.layers.iter().enumerate() {
            match l {
                QuantLayer::Float(i) => act = self.float.layer_forward_float(*i, &act, self.config.mode)?,
                QuantLayer::Conv(q) => {
                    let mut stream = match noise {
                        Some((m, sample)) => Some(m.stream(&[li as u64, sample])?),
                        None => None,
                    };
                    let (out, st) = self.conv_forward(q, &act, stream.as_mut())?;
                    act = out;
                    stats.push(st);
                }
            }
        }
        Ok((act.into_data(), stats))
    }

    fn conv_forward(
        &self,
        q: &QuantConv,
        x: &Tensor,
        mut noise: Option<&mut crate::quant::NoiseStream>,
    ) -> Result<(Tensor, QuantLayerStats)> {
        let cols = im2col(x, &q.spec)?;
        let (p, d) = cols.matrix_dims("quantized conv")?;
        let c = q.spec.c_out;
        let s_count = q.segments.len();
        let codes_in = quantize_all(cols.data(), &q.input_fmt)?;
        let scale = q.input_fmt.scale * q.weight_scale;
        let cadc = self.config.mode == ConvMode::Cadc;
        let mut st = QuantLayerStats::default();
        let mut y = vec![0.0; p * c];
        let mut neuron = vec![0i32; s_count];
        let mut codes = vec![0i32; s_count * c];
        for pos in 0..p {
            for s in 0..s_count {
                let (a, b) = q.ranges[s];
                let mac = mac_integer(&q.segments[s], c, &codes_in[pos * d + a..pos * d + b])?;
                let adc = &q.adcs[s];
                for k in 0..c {
                    let analog = mac[k] as f64 * scale;
                    let mut code = adc_convert(adc, analog);
                    if let Some(n) = noise.as_deref_mut() {
                        // The sense amplifier holds zero for non-positive MACs.
                        if !cadc || analog > 0.0 {
                            code = inject_noise(n, code, adc.code_range());
                        }
                    }
                    codes[s * c + k] = code;
                }
            }
            for k in 0..c {
                let mut acc = 0.0;
                for s in 0..s_count {
                    let code = codes[s * c + k];
                    neuron[s] = code;
                    let w = if cadc { q.soma[s] } else { 1.0 };
                    acc += w * code as f64 * q.adcs[s].lsb();
                }
                y[pos * c + k] = acc;
                let width = q.adcs[0].code_bits() as u8;
                let block = if cadc { compress(&neuron, width)? } else { compress_signed(&neuron, width)? };
                let nnz = block.payload.len() as u64;
                st.conversions += s_count as u64;
                st.zero_codes += s_count as u64 - nnz;
                st.compressed_bits += block.size_bits();
                st.uncompressed_bits += block.uncompressed_bits();
                st.skip_adds += nnz.saturating_sub(1);
                st.dense_adds += s_count as u64 - 1;
            }
        }
        if q.activation == Activation::Relu {
            y.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        let (oh, ow) = q.spec.output_hw(x.shape()[1], x.shape()[2])?;
        let out = crate::tensor::positions_to_chw(&Tensor::new(vec![p, c], y)?, oh, ow)?;
        Ok((out, st))
    }

    pub fn predict(&self, x: &Tensor, noise: Option<(&NoiseModel, u64)>) -> Result<usize> {
        Ok(argmax(&self.forward(x, noise)?.0))
    }
}

fn quantize_all(values: &[f64], fmt: &FixedPointFormat) -> Result<Vec<i64>> {
    values.iter().map(|&v| quantize_input(v, fmt)).collect()
}

impl Network {
    /// Float forward of a single layer on a `[C, H, W]` activation.
    fn layer_forward_float(&self, i: usize, act: &Tensor, mode: ConvMode) -> Result<Tensor> {
        let r = &self.resolved[i];
        match &self.layers[i] {
            NetLayer::Conv { cadc, info } => {
                let unrolled = im2col(act, &info.spec)?;
                let psums = segment_psums(cadc, &unrolled)?;
                let mut y = accumulate(cadc, &psums, mode);
                if info.activation == Activation::Relu {
                    y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
                }
                crate::tensor::positions_to_chw(&y, r.out_shape[1], r.out_shape[2])
            }
            NetLayer::Dense { w, b } => {
                let outs = b.len();
                let mut y = b.clone();
                for (ii, &xv) in act.data().iter().enumerate() {
                    for (o, &wv) in y.iter_mut().zip(&w.data()[ii * outs..(ii + 1) * outs]) {
                        *o += xv * wv;
                    }
                }
                Tensor::new(vec![outs, 1, 1], y)
            }
            NetLayer::AvgPool { size } => avg_pool(act, *size),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    pub(crate) fn toy_spec() -> NetSpec {
        NetSpec::from_toml(
            r#"
            name = "toy"
            input = [1, 6, 6]
            [[layers]]
            kind = "conv"
            c_out = 4
            kernel = [3, 3]
            padding = 1
            [[layers]]
            kind = "conv"
            c_out = 3
            kernel = [3, 3]
            padding = 1
            dendrite_fn = "tanh"
            [[layers]]
            kind = "avgpool"
            size = 2
            [[layers]]
            kind = "dense"
            out = 3
            "#,
        )
        .unwrap()
    }

    #[test]
    fn resolve_shapes() {
        let r = toy_spec().resolve().unwrap();
        assert_eq!(r[0].out_shape, [4, 6, 6]);
        assert_eq!(r[1].in_shape, [4, 6, 6]);
        assert_eq!(r[2].out_shape, [3, 3, 3]);
        assert_eq!(r[3].kind, ResolvedKind::Dense { inputs: 27, outputs: 3 });
        assert_eq!(r[1].name, "conv2");
    }

    #[test]
    fn resolve_rejects_bad_specs() {
        let bad_cin = r#"
            input = [1, 6, 6]
            [[layers]]
            kind = "conv"
            c_in = 2
            c_out = 4
            kernel = [3, 3]
        "#;
        assert!(NetSpec::from_toml(bad_cin).is_err());
        let bad_adc = r#"
            input = [1, 6, 6]
            [[layers]]
            kind = "conv"
            c_out = 4
            kernel = [3, 3]
            adc_bits = 6
        "#;
        assert!(NetSpec::from_toml(bad_adc).is_err());
        let bad_pool = r#"
            input = [1, 5, 5]
            [[layers]]
            kind = "avgpool"
            size = 2
        "#;
        assert!(NetSpec::from_toml(bad_pool).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let spec = toy_spec();
        let w = WeightArchive::init(&spec, 3).unwrap();
        let net = Network::new(&spec, &w, CrossbarConfig::square(8)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::from_fn(&[1, 6, 6], |_| rng.random_range(-1.0..1.0));
        let (_, grads) = net.loss_and_grads(&x, 1, ConvMode::Cadc).unwrap();
        // Perturb a few dense and conv weights directly.
        let eps = 1e-6;
        for (layer, slot) in [(0usize, 5usize), (1, 17), (3, 4)] {
            let mut plus = net.clone();
            let mut minus = net.clone();
            let bump = |n: &mut Network, delta: f64| {
                let mut gs = vec![LayerGrad::None; 4];
                gs[layer] = match &grads[layer] {
                    LayerGrad::Conv(v) => {
                        let mut z = vec![0.0; v.len()];
                        z[slot] = 1.0;
                        LayerGrad::Conv(z)
                    }
                    LayerGrad::Dense { w, b } => {
                        let mut z = vec![0.0; w.len()];
                        z[slot] = 1.0;
                        LayerGrad::Dense { w: z, b: vec![0.0; b.len()] }
                    }
                    LayerGrad::None => unreachable!(),
                };
                n.apply_update(|_, _, _, g| -delta * g, &gs);
            };
            bump(&mut plus, eps);
            bump(&mut minus, -eps);
            let lp = plus.loss_and_grads(&x, 1, ConvMode::Cadc).unwrap().0;
            let lm = minus.loss_and_grads(&x, 1, ConvMode::Cadc).unwrap().0;
            let numeric = (lp - lm) / (2.0 * eps);
            let analytic = match &grads[layer] {
                LayerGrad::Conv(v) => v[slot],
                LayerGrad::Dense { w, .. } => w[slot],
                LayerGrad::None => unreachable!(),
            };
            assert!((numeric - analytic).abs() < 1e-6 * analytic.abs().max(1.0), "layer {layer}: {numeric} vs {analytic}");
        }
    }

    #[test]
    fn weight_archive_round_trip() {
        let spec = toy_spec();
        let w = WeightArchive::init(&spec, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        w.save(dir.path()).unwrap();
        let back = WeightArchive::load(dir.path()).unwrap();
        assert_eq!(back, w);
        let net = Network::new(&spec, &back, CrossbarConfig::square(16)).unwrap();
        assert_eq!(net.weights().unwrap(), w);

        let mut missing = w.clone();
        missing.tensors.remove("dense1.bias");
        assert!(missing.check(&spec).is_err());
    }

    #[test]
    fn quantized_path_runs_and_keeps_zero_codes() {
        let spec = toy_spec();
        let w = WeightArchive::init(&spec, 2).unwrap();
        let net = Network::new(&spec, &w, CrossbarConfig::square(8)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xs: Vec<Tensor> = (0..4).map(|_| Tensor::from_fn(&[1, 6, 6], |_| rng.random_range(0.0..1.0))).collect();
        let q = QuantizedNetwork::calibrate(&net, &xs, QuantConfig::new(ConvMode::Cadc)).unwrap();
        let (logits, stats) = q.forward(&xs[0], None).unwrap();
        assert_eq!(logits.len(), 3);
        assert_eq!(stats.len(), 2);
        assert!(stats[1].zero_codes > 0);
        let noise = NoiseModel::nominal(9);
        let a = q.forward(&xs[0], Some((&noise, 0))).unwrap();
        let b = q.forward(&xs[0], Some((&noise, 0))).unwrap();
        assert_eq!(a, b);
        let v = QuantizedNetwork::calibrate(&net, &xs, QuantConfig::new(ConvMode::VConv)).unwrap();
        assert!(v.forward(&xs[1], Some((&noise, 1))).is_ok());
    }
}
