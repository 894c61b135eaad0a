//! Partitioned convolution with a per-crossbar dendritic nonlinearity.
//!
//! vConv sums raw segment psums. CADC passes each segment psum through a
//! dendrite function `f` (zero for non-positive input) and weights it by a
//! per-segment soma weight before summing. Both accumulate across segments in
//! ascending segment order so results do not depend on thread scheduling.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::partition::PartitionedKernel;
use crate::tensor::{im2col, ConvSpec, Tensor};

/// Below this the sublinear derivative is evaluated at the floor instead.
pub const SUBLINEAR_GRAD_FLOOR: f64 = 1e-12;

/// Dendritic nonlinearity applied to each crossbar psum.
///
/// Every variant except `Identity` maps `x <= 0` to exactly zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum DendriteFn {
    Relu,
    /// `sqrt(x)` for positive input.
    Sublinear,
    /// `k * x^2` for positive input.
    Supralinear { k: f64 },
    Tanh,
    /// `f(x) = x`; reduces CADC to vConv. Test and baseline use only.
    Identity,
}

impl DendriteFn {
    /// The nonlinear functions swept by default.
    pub const SWEPT: [DendriteFn; 4] = [
        DendriteFn::Relu,
        DendriteFn::Sublinear,
        DendriteFn::Supralinear { k: 1.0 },
        DendriteFn::Tanh,
    ];

    pub fn supralinear(k: f64) -> Self {
        DendriteFn::Supralinear { k }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, DendriteFn::Identity)
    }

    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        match *self {
            DendriteFn::Identity => x,
            _ if x <= 0.0 => 0.0,
            DendriteFn::Relu => x,
            DendriteFn::Sublinear => x.sqrt(),
            DendriteFn::Supralinear { k } => k * x * x,
            DendriteFn::Tanh => x.tanh(),
        }
    }

    /// Derivative, with `f'(x) = 0` for `x <= 0`.
    #[inline]
    pub fn derivative(&self, x: f64) -> f64 {
        match *self {
            DendriteFn::Identity => 1.0,
            _ if x <= 0.0 => 0.0,
            DendriteFn::Relu => 1.0,
            DendriteFn::Sublinear => 0.5 / x.max(SUBLINEAR_GRAD_FLOOR).sqrt(),
            DendriteFn::Supralinear { k } => 2.0 * k * x,
            DendriteFn::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            DendriteFn::Supralinear { k } if !(k > 0.0 && k.is_finite()) => Err(
                Error::InvalidArgument(format!("supralinear k must be positive, got {k}")),
            ),
            _ => Ok(()),
        }
    }
}

/// Free-function form of [`DendriteFn::apply`].
pub fn apply_f(f: DendriteFn, x: f64) -> f64 {
    f.apply(x)
}

impl fmt::Display for DendriteFn {
    fn fmt(&self, out: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DendriteFn::Relu => write!(out, "relu"),
            DendriteFn::Sublinear => write!(out, "sublinear"),
            DendriteFn::Supralinear { k } if *k == 1.0 => write!(out, "supralinear"),
            DendriteFn::Supralinear { k } => write!(out, "supralinear:{k}"),
            DendriteFn::Tanh => write!(out, "tanh"),
            DendriteFn::Identity => write!(out, "identity"),
        }
    }
}

impl FromStr for DendriteFn {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s.as_str(), None),
        };
        let f = match (name, arg) {
            ("relu", None) => DendriteFn::Relu,
            ("sublinear" | "sqrt", None) => DendriteFn::Sublinear,
            ("supralinear" | "square", None) => DendriteFn::Supralinear { k: 1.0 },
            ("supralinear" | "square", Some(k)) => DendriteFn::Supralinear {
                k: k.parse()
                    .map_err(|_| Error::Config(format!("bad supralinear coefficient {k:?}")))?,
            },
            ("tanh", None) => DendriteFn::Tanh,
            ("identity" | "none", None) => DendriteFn::Identity,
            _ => return Err(Error::Config(format!("unknown dendrite function {s:?}"))),
        };
        f.validate()?;
        Ok(f)
    }
}

impl TryFrom<String> for DendriteFn {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<DendriteFn> for String {
    fn from(f: DendriteFn) -> String {
        f.to_string()
    }
}

/// Which accumulation rule a forward pass uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvMode {
    /// Plain sum of raw segment psums.
    VConv,
    /// Soma-weighted sum of `f(psum)`.
    Cadc,
}

/// Processing stage of a psum tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PsumStage {
    Raw,
    PostF,
    PostAdc,
}

/// Psums laid out `[segment, position, channel]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PsumTensor {
    pub segments: usize,
    pub positions: usize,
    pub channels: usize,
    pub data: Vec<f64>,
    pub stage: PsumStage,
}

impl PsumTensor {
    #[inline]
    pub fn get(&self, s: usize, p: usize, k: usize) -> f64 {
        self.data[(s * self.positions + p) * self.channels + k]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Psums of one output neuron `(p, k)` across segments, in segment order.
    pub fn neuron(&self, p: usize, k: usize) -> Vec<f64> {
        (0..self.segments).map(|s| self.get(s, p, k)).collect()
    }
}

/// A convolution layer mapped onto crossbars, with its dendrite function.
#[derive(Debug, Clone, PartialEq)]
pub struct CadcLayer {
    pub spec: ConvSpec,
    pub partitioned: PartitionedKernel,
    pub f: DendriteFn,
    /// Per-segment weights `w^k[s]`; held at 1.0 unless explicitly trained.
    pub soma_weights: Vec<f64>,
}

impl CadcLayer {
    pub fn new(spec: ConvSpec, partitioned: PartitionedKernel, f: DendriteFn) -> Result<Self> {
        spec.validate()?;
        f.validate()?;
        if partitioned.d() != spec.unrolled_dim() || partitioned.cols != spec.c_out {
            return Err(Error::shape(
                "CadcLayer::new",
                format!("{}x{} kernel", spec.unrolled_dim(), spec.c_out),
                format!("{}x{}", partitioned.d(), partitioned.cols),
            ));
        }
        let s = partitioned.s_count();
        Ok(CadcLayer {
            spec,
            partitioned,
            f,
            soma_weights: vec![1.0; s],
        })
    }

    pub fn s_count(&self) -> usize {
        self.partitioned.s_count()
    }

    fn check_input(&self, unrolled: &Tensor, op: &'static str) -> Result<usize> {
        let (p, d) = unrolled.matrix_dims(op)?;
        if d != self.spec.unrolled_dim() {
            return Err(Error::shape(op, format!("[P, {}]", self.spec.unrolled_dim()), format!("[{p}, {d}]")));
        }
        Ok(p)
    }

    /// Forward a `[c_in, H, W]` image, returning `[c_out, OH, OW]`.
    pub fn forward_image(&self, input: &Tensor, mode: ConvMode) -> Result<Tensor> {
        let (h, w) = match input.shape()[..] {
            [_, h, w] => (h, w),
            _ => return Err(Error::shape("forward_image", "[C, H, W]", format!("{:?}", input.shape()))),
        };
        let (oh, ow) = self.spec.output_hw(h, w)?;
        let cols = im2col(input, &self.spec)?;
        let y = match mode {
            ConvMode::VConv => vconv_forward(self, &cols)?,
            ConvMode::Cadc => cadc_forward(self, &cols)?.0,
        };
        crate::tensor::positions_to_chw(&y, oh, ow)
    }
}

/// Raw per-segment psums for an unrolled `[P, D]` input.
pub fn segment_psums(layer: &CadcLayer, unrolled: &Tensor) -> Result<PsumTensor> {
    let p = layer.check_input(unrolled, "segment_psums")?;
    let s_count = layer.s_count();
    let c = layer.spec.c_out;
    let d = layer.spec.unrolled_dim();
    let x = unrolled.data();
    let pk = &layer.partitioned;
    let mut data = vec![0.0; s_count * p * c];
    par::for_each_chunk_mut(&mut data, c, |idx, acc| {
        let s = idx / p;
        let pos = idx % p;
        let (start, end) = pk.segment_map.segments[s];
        let w = pk.segment_rows(s);
        let xrow = &x[pos * d + start..pos * d + end];
        for (i, &xv) in xrow.iter().enumerate() {
            let wrow = &w[i * c..(i + 1) * c];
            for (a, &wv) in acc.iter_mut().zip(wrow) {
                *a += wv * xv;
            }
        }
    });
    Ok(PsumTensor {
        segments: s_count,
        positions: p,
        channels: c,
        data,
        stage: PsumStage::Raw,
    })
}

/// vConv: `y[p, k] = sum_s psum[s, p, k]`, returned as `[P, c_out]`.
pub fn vconv_forward(layer: &CadcLayer, unrolled: &Tensor) -> Result<Tensor> {
    let psums = segment_psums(layer, unrolled)?;
    Ok(accumulate_raw(&psums))
}

pub(crate) fn accumulate_raw(psums: &PsumTensor) -> Tensor {
    let (p, c) = (psums.positions, psums.channels);
    let mut y = vec![0.0; p * c];
    for s in 0..psums.segments {
        let block = &psums.data[s * p * c..(s + 1) * p * c];
        for (acc, &v) in y.iter_mut().zip(block) {
            *acc += v;
        }
    }
    Tensor::new(vec![p, c], y).expect("psum tensor dims are non-zero")
}

/// CADC: `y[p, k] = sum_s w[s] * f(psum[s, p, k])`.
///
/// Also returns the post-`f` psums for codec and sparsity consumers.
pub fn cadc_forward(layer: &CadcLayer, unrolled: &Tensor) -> Result<(Tensor, PsumTensor)> {
    let mut psums = segment_psums(layer, unrolled)?;
    let f = layer.f;
    psums.data.iter_mut().for_each(|v| *v = f.apply(*v));
    psums.stage = PsumStage::PostF;
    let (p, c) = (psums.positions, psums.channels);
    let mut y = vec![0.0; p * c];
    for (s, &ws) in layer.soma_weights.iter().enumerate() {
        let block = &psums.data[s * p * c..(s + 1) * p * c];
        for (acc, &v) in y.iter_mut().zip(block) {
            *acc += ws * v;
        }
    }
    Ok((Tensor::new(vec![p, c], y)?, psums))
}

/// Zero counts over a psum tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityStats {
    pub zero_fraction: f64,
    pub zeros: u64,
    pub total: u64,
    pub per_segment: Vec<f64>,
}

/// Fraction of psums that are exactly zero, overall and per segment.
pub fn sparsity_stats(psums: &PsumTensor) -> SparsityStats {
    let per = psums.positions * psums.channels;
    let counts: Vec<u64> = (0..psums.segments)
        .map(|s| psums.data[s * per..(s + 1) * per].iter().filter(|&&v| v == 0.0).count() as u64)
        .collect();
    let zeros: u64 = counts.iter().sum();
    let total = psums.data.len() as u64;
    SparsityStats {
        zero_fraction: if total == 0 { 0.0 } else { zeros as f64 / total as f64 },
        zeros,
        total,
        per_segment: counts
            .iter()
            .map(|&z| if per == 0 { 0.0 } else { z as f64 / per as f64 })
            .collect(),
    }
}

/// Gradients of a loss through one partitioned layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    /// `[D, c_out]`, in unrolled-kernel row order.
    pub grad_weights: Tensor,
    /// `[P, D]`, gradient w.r.t. the unrolled input.
    pub grad_input: Tensor,
    /// One entry per segment.
    pub grad_soma: Vec<f64>,
}

/// Backward pass of [`cadc_forward`] given `dL/dy` as `[P, c_out]`.
pub fn cadc_backward(layer: &CadcLayer, unrolled: &Tensor, upstream: &Tensor) -> Result<LayerGrads> {
    let psums = segment_psums(layer, unrolled)?;
    backward_from_psums(layer, unrolled, upstream, &psums, ConvMode::Cadc)
}

/// Backward pass of [`vconv_forward`].
pub fn vconv_backward(layer: &CadcLayer, unrolled: &Tensor, upstream: &Tensor) -> Result<LayerGrads> {
    let psums = segment_psums(layer, unrolled)?;
    backward_from_psums(layer, unrolled, upstream, &psums, ConvMode::VConv)
}

/// Shared backward given precomputed raw psums.
pub fn backward_from_psums(
    layer: &CadcLayer,
    unrolled: &Tensor,
    upstream: &Tensor,
    psums: &PsumTensor,
    mode: ConvMode,
) -> Result<LayerGrads> {
    let p = layer.check_input(unrolled, "cadc_backward")?;
    let c = layer.spec.c_out;
    let d = layer.spec.unrolled_dim();
    if upstream.shape() != [p, c] {
        return Err(Error::shape("cadc_backward upstream", format!("[{p}, {c}]"), format!("{:?}", upstream.shape())));
    }
    let s_count = layer.s_count();
    let up = upstream.data();
    let f = layer.f;

    // dL/dpsum[s, p, k]
    let gpsum: Vec<f64> = match mode {
        ConvMode::VConv => up.repeat(s_count),
        ConvMode::Cadc => {
            let mut g = vec![0.0; s_count * p * c];
            for s in 0..s_count {
                let ws = layer.soma_weights[s];
                for i in 0..p * c {
                    let idx = s * p * c + i;
                    g[idx] = up[i] * ws * f.derivative(psums.data[idx]);
                }
            }
            g
        }
    };
    let grad_soma = match mode {
        ConvMode::VConv => vec![0.0; s_count],
        ConvMode::Cadc => (0..s_count)
            .map(|s| {
                let mut acc = 0.0;
                for i in 0..p * c {
                    acc += up[i] * f.apply(psums.data[s * p * c + i]);
                }
                acc
            })
            .collect(),
    };

    let pk = &layer.partitioned;
    let seg_of_row = |row: usize| row / pk.segment_map.n_rows;
    let x = unrolled.data();

    // grad_w[i, k] = sum_p x[p, i] * g[s(i), p, k]
    let mut gw = vec![0.0; d * c];
    par::for_each_chunk_mut(&mut gw, c, |row, acc| {
        let s = seg_of_row(row);
        let g = &gpsum[s * p * c..(s + 1) * p * c];
        for pos in 0..p {
            let xv = x[pos * d + row];
            let grow = &g[pos * c..(pos + 1) * c];
            for (a, &gv) in acc.iter_mut().zip(grow) {
                *a += xv * gv;
            }
        }
    });

    // grad_x[p, i] = sum_k w[i, k] * g[s(i), p, k]
    let mut gx = vec![0.0; p * d];
    par::for_each_chunk_mut(&mut gx, d, |pos, acc| {
        for s in 0..s_count {
            let (start, end) = pk.segment_map.segments[s];
            let w = pk.segment_rows(s);
            let grow = &gpsum[(s * p + pos) * c..(s * p + pos + 1) * c];
            for i in start..end {
                let wrow = &w[(i - start) * c..(i - start + 1) * c];
                let mut sum = 0.0;
                for (&wv, &gv) in wrow.iter().zip(grow) {
                    sum += wv * gv;
                }
                acc[i] = sum;
            }
        }
    });

    Ok(LayerGrads {
        grad_weights: Tensor::new(vec![d, c], gw)?,
        grad_input: Tensor::new(vec![p, d], gx)?,
        grad_soma,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partition::{partition, CrossbarConfig};
    use crate::tensor::{conv_reference, UnrolledKernel};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn layer(spec: ConvSpec, n: usize, f: DendriteFn, rng: &mut ChaCha8Rng) -> CadcLayer {
        let k = Tensor::from_fn(&[spec.c_in, spec.k1, spec.k2, spec.c_out], |_| rng.random_range(-1.0..1.0));
        let uk = UnrolledKernel::from_kernel(&k, &spec).unwrap();
        let pk = partition(&uk, &CrossbarConfig::square(n)).unwrap();
        CadcLayer::new(spec, pk, f).unwrap()
    }

    #[test]
    fn apply_f_examples() {
        assert_eq!(apply_f(DendriteFn::Relu, -3.0), 0.0);
        assert_eq!(apply_f(DendriteFn::Sublinear, 4.0), 2.0);
        assert_eq!(apply_f(DendriteFn::supralinear(0.5), 2.0), 2.0);
        assert_eq!(apply_f(DendriteFn::Tanh, 0.0), 0.0);
        assert_eq!(apply_f(DendriteFn::Tanh, -1.0), 0.0);
        assert_eq!(apply_f(DendriteFn::Identity, -1.5), -1.5);
    }

    #[test]
    fn derivatives_at_kink_and_floor() {
        assert_eq!(DendriteFn::Relu.derivative(0.0), 0.0);
        assert_eq!(DendriteFn::Sublinear.derivative(0.0), 0.0);
        let tiny = DendriteFn::Sublinear.derivative(1e-20);
        assert_eq!(tiny, 0.5 / SUBLINEAR_GRAD_FLOOR.sqrt());
        assert!(tiny.is_finite());
        assert_eq!(DendriteFn::Sublinear.derivative(4.0), 0.25);
    }

    #[test]
    fn parse_round_trip() {
        for f in [
            DendriteFn::Relu,
            DendriteFn::Sublinear,
            DendriteFn::Supralinear { k: 1.0 },
            DendriteFn::Supralinear { k: 0.25 },
            DendriteFn::Tanh,
            DendriteFn::Identity,
        ] {
            assert_eq!(f.to_string().parse::<DendriteFn>().unwrap(), f);
        }
        assert!("supralinear:-1".parse::<DendriteFn>().is_err());
        assert!("sigmoid".parse::<DendriteFn>().is_err());
    }

    #[test]
    fn zero_input_gives_zero_psums() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let l = layer(ConvSpec::new(3, 3, 3, 4), 8, DendriteFn::Relu, &mut rng);
        let ps = segment_psums(&l, &Tensor::zeros(&[6, 27])).unwrap();
        assert!(ps.data.iter().all(|&v| v == 0.0));
        assert_eq!(sparsity_stats(&ps).zero_fraction, 1.0);
    }

    #[test]
    fn single_segment_equals_full_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let l = layer(ConvSpec::new(2, 3, 3, 3), 64, DendriteFn::Relu, &mut rng);
        let x = Tensor::from_fn(&[5, 18], |_| rng.random_range(-1.0..1.0));
        let ps = segment_psums(&l, &x).unwrap();
        let full = crate::tensor::matmul(&x, &reconstruct_tensor(&l)).unwrap();
        assert_eq!(ps.data, full.data());
        assert_eq!(vconv_forward(&l, &x).unwrap(), full);
    }

    fn reconstruct_tensor(l: &CadcLayer) -> Tensor {
        crate::partition::reconstruct(&l.partitioned).unwrap().as_tensor()
    }

    #[test]
    fn psums_decompose_reference_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let spec = ConvSpec::new(4, 3, 3, 3).with_padding(1);
        let l = layer(spec, 8, DendriteFn::Relu, &mut rng);
        let img = Tensor::from_fn(&[4, 6, 6], |_| rng.random_range(-1.0..1.0));
        let y = l.forward_image(&img, ConvMode::VConv).unwrap();
        let kernel = reconstruct(&l).to_kernel(&spec).unwrap();
        let want = conv_reference(&img, &kernel, &spec).unwrap();
        for (a, b) in y.data().iter().zip(want.data()) {
            assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
        }
    }

    fn reconstruct(l: &CadcLayer) -> UnrolledKernel {
        crate::partition::reconstruct(&l.partitioned).unwrap()
    }

    #[test]
    fn identity_cadc_is_vconv_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let l = layer(ConvSpec::new(5, 3, 3, 4), 8, DendriteFn::Identity, &mut rng);
        let x = Tensor::from_fn(&[10, 45], |_| rng.random_range(-1.0..1.0));
        let (y, _) = cadc_forward(&l, &x).unwrap();
        assert_eq!(y, vconv_forward(&l, &x).unwrap());
    }

    #[test]
    fn relu_on_nonnegative_is_vconv() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut l = layer(ConvSpec::new(4, 2, 2, 3), 4, DendriteFn::Relu, &mut rng);
        for seg in &mut l.partitioned.segments {
            seg.iter_mut().for_each(|v| *v = v.abs());
        }
        let x = Tensor::from_fn(&[7, 16], |_| rng.random_range(0.0..1.0));
        let (y, post) = cadc_forward(&l, &x).unwrap();
        assert_eq!(y, vconv_forward(&l, &x).unwrap());
        assert_eq!(post.stage, PsumStage::PostF);
    }

    #[test]
    fn relu_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let l = layer(ConvSpec::new(6, 3, 3, 2), 16, DendriteFn::Relu, &mut rng);
        let x = Tensor::from_fn(&[9, 54], |_| rng.random_range(-1.0..1.0));
        let (y, _) = cadc_forward(&l, &x).unwrap();
        let uk = reconstruct(&l);
        for p in 0..9 {
            for k in 0..2 {
                let mut want = 0.0;
                let mut start = 0;
                while start < 54 {
                    let end = (start + 16).min(54);
                    let mut s = 0.0;
                    for i in start..end {
                        s += x.data()[p * 54 + i] * uk.get(i, k);
                    }
                    want += s.max(0.0);
                    start = end;
                }
                assert!((y.data()[p * 2 + k] - want).abs() <= 1e-9 * want.abs().max(1.0));
            }
        }
    }

    #[test]
    fn relu_sparsity_counts_nonpositive() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let l = layer(ConvSpec::new(8, 3, 3, 8), 8, DendriteFn::Relu, &mut rng);
        let x = Tensor::from_fn(&[64, 72], |_| rng.random_range(-1.0..1.0));
        let raw = segment_psums(&l, &x).unwrap();
        let (_, post) = cadc_forward(&l, &x).unwrap();
        let nonpos = raw.data.iter().filter(|&&v| v <= 0.0).count() as u64;
        let stats = sparsity_stats(&post);
        assert_eq!(stats.zeros, nonpos);
        assert!(stats.zero_fraction >= sparsity_stats(&raw).zero_fraction);
        assert_eq!(stats.per_segment.len(), 9);
    }

    #[test]
    fn identity_backward_is_plain_conv_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let l = layer(ConvSpec::new(3, 3, 3, 2), 8, DendriteFn::Identity, &mut rng);
        let x = Tensor::from_fn(&[4, 27], |_| rng.random_range(-1.0..1.0));
        let up = Tensor::from_fn(&[4, 2], |_| rng.random_range(-1.0..1.0));
        let g = cadc_backward(&l, &x, &up).unwrap();
        let v = vconv_backward(&l, &x, &up).unwrap();
        assert_eq!(g.grad_weights, v.grad_weights);
        assert_eq!(g.grad_input, v.grad_input);
        // Plain conv: dW = X^T G, dX = G W^T.
        let dw = crate::tensor::matmul(&x.transpose().unwrap(), &up).unwrap();
        let dx = crate::tensor::matmul(&up, &reconstruct(&l).as_tensor().transpose().unwrap()).unwrap();
        for (a, b) in g.grad_weights.data().iter().zip(dw.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in g.grad_input.data().iter().zip(dx.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_rejects_bad_upstream() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let l = layer(ConvSpec::new(1, 2, 2, 2), 2, DendriteFn::Tanh, &mut rng);
        let x = Tensor::zeros(&[3, 4]);
        assert!(cadc_backward(&l, &x, &Tensor::zeros(&[3, 3])).is_err());
        assert!(segment_psums(&l, &Tensor::zeros(&[3, 5])).is_err());
    }
}
