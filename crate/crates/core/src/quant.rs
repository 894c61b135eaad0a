//! Hardware-fidelity numerics: ternary weights, fixed-point inputs, the
//! in-memory ADC with `f` folded into its transfer curve, and seeded
//! Gaussian code noise.
//!
//! Rounding is round-half-even throughout.

use std::ops::RangeInclusive;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dendrite::DendriteFn;
use crate::error::{Error, Result};

/// `value = code * scale`, with a signed or unsigned integer code range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedPointFormat {
    pub bits: u32,
    pub signed: bool,
    pub scale: f64,
}

impl FixedPointFormat {
    pub fn unsigned(bits: u32, scale: f64) -> Self {
        FixedPointFormat { bits, signed: false, scale }
    }

    pub fn signed(bits: u32, scale: f64) -> Self {
        FixedPointFormat { bits, signed: true, scale }
    }

    /// Format whose top code maps to `max_abs`.
    pub fn for_range(bits: u32, signed: bool, max_abs: f64) -> Self {
        let top = if signed { (1i64 << (bits - 1)) - 1 } else { (1i64 << bits) - 1 };
        let scale = if max_abs > 0.0 && top > 0 { max_abs / top as f64 } else { 1.0 };
        FixedPointFormat { bits, signed, scale }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bits == 0 || self.bits > 31 || (self.signed && self.bits < 2) {
            return Err(Error::InvalidArgument(format!(
                "unsupported fixed-point width {} (signed = {})",
                self.bits, self.signed
            )));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::InvalidArgument(format!("scale must be positive, got {}", self.scale)));
        }
        Ok(())
    }

    pub fn code_range(&self) -> RangeInclusive<i64> {
        if self.signed {
            -(1i64 << (self.bits - 1))..=(1i64 << (self.bits - 1)) - 1
        } else {
            0..=(1i64 << self.bits) - 1
        }
    }

    pub fn dequantize(&self, code: i64) -> f64 {
        code as f64 * self.scale
    }
}

/// `round_half_even(x / scale)` clamped to the format's code range.
pub fn quantize_input(x: f64, fmt: &FixedPointFormat) -> Result<i64> {
    if !x.is_finite() {
        return Err(Error::NonFinite(format!("cannot quantize {x}")));
    }
    let r = fmt.code_range();
    let code = (x / fmt.scale).round_ties_even();
    Ok((code.clamp(*r.start() as f64, *r.end() as f64)) as i64)
}

/// Ternary code of one weight: `-1` below `-t`, `+1` above `t`, else `0`.
pub fn encode_ternary(w: f64, threshold: f64) -> i8 {
    if w > threshold {
        1
    } else if w < -threshold {
        -1
    } else {
        0
    }
}

/// How the ternarization threshold is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdRule {
    /// `t = fraction * mean(|w|)`.
    MeanFraction(f64),
    /// Threshold minimizing `|w - scale * code|^2`.
    Optimal,
}

impl Default for ThresholdRule {
    fn default() -> Self {
        ThresholdRule::MeanFraction(0.5)
    }
}

/// Ternarized weights, dequantized as `code * scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct TernaryWeights {
    pub codes: Vec<i8>,
    pub scale: f64,
    pub threshold: f64,
}

impl TernaryWeights {
    pub fn dequantize(&self) -> Vec<f64> {
        self.codes.iter().map(|&c| c as f64 * self.scale).collect()
    }

    pub fn squared_error(&self, weights: &[f64]) -> f64 {
        weights
            .iter()
            .zip(&self.codes)
            .map(|(&w, &c)| (w - c as f64 * self.scale).powi(2))
            .sum()
    }
}

/// Least-squares scale for a fixed support: mean `|w|` over nonzero codes.
fn support_scale(weights: &[f64], codes: &[i8]) -> f64 {
    let (sum, n) = weights
        .iter()
        .zip(codes)
        .filter(|(_, &c)| c != 0)
        .fold((0.0, 0usize), |(s, n), (w, _)| (s + w.abs(), n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub fn ternarize(weights: &[f64], rule: ThresholdRule) -> Result<TernaryWeights> {
    if weights.is_empty() {
        return Err(Error::InvalidArgument("cannot ternarize an empty tensor".into()));
    }
    if let Some(i) = weights.iter().position(|w| !w.is_finite()) {
        return Err(Error::NonFinite(format!("weight {i} = {}", weights[i])));
    }
    let threshold = match rule {
        ThresholdRule::MeanFraction(frac) => {
            let mean = weights.iter().map(|w| w.abs()).sum::<f64>() / weights.len() as f64;
            frac * mean
        }
        ThresholdRule::Optimal => optimal_threshold(weights),
    };
    // A zero threshold would code exact zeros as 0 anyway; keep it positive.
    let threshold = if threshold > 0.0 { threshold } else { f64::MIN_POSITIVE };
    let codes: Vec<i8> = weights.iter().map(|&w| encode_ternary(w, threshold)).collect();
    let scale = support_scale(weights, &codes);
    Ok(TernaryWeights { codes, scale, threshold })
}

/// Keeping the `m` largest magnitudes with the least-squares scale leaves
/// error `sum(w^2) - (sum_top_m |w|)^2 / m`; pick the best realizable `m`.
fn optimal_threshold(weights: &[f64]) -> f64 {
    let mut mags: Vec<f64> = weights.iter().map(|w| w.abs()).collect();
    mags.sort_by(|a, b| b.total_cmp(a));
    let mut best_gain = 0.0;
    let mut best_t = mags[0];
    let mut prefix = 0.0;
    for m in 1..=mags.len() {
        prefix += mags[m - 1];
        let next = mags.get(m).copied().unwrap_or(0.0);
        if next == mags[m - 1] {
            // threshold cannot split equal magnitudes
            continue;
        }
        let gain = prefix * prefix / m as f64;
        if gain > best_gain {
            best_gain = gain;
            best_t = next;
        }
    }
    best_t
}

/// ADC code polarity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdcPolarity {
    /// Codes `0..=2^n - 1`; used with a dendrite function in the IMA.
    Unsigned,
    /// Offset-binary codes `-2^(n-1)..=2^(n-1) - 1`, for vConv baselines.
    Signed,
}

/// In-memory ADC whose transfer curve embeds a dendrite function.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdcModel {
    pub resolution_bits: u32,
    /// Analog value mapped to the top code.
    pub full_scale: f64,
    pub f: DendriteFn,
    pub polarity: AdcPolarity,
}

impl AdcModel {
    pub fn new(resolution_bits: u32, full_scale: f64, f: DendriteFn) -> Result<Self> {
        let m = AdcModel {
            resolution_bits,
            full_scale,
            f,
            polarity: AdcPolarity::Unsigned,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn signed(resolution_bits: u32, full_scale: f64) -> Result<Self> {
        let m = AdcModel {
            resolution_bits,
            full_scale,
            f: DendriteFn::Identity,
            polarity: AdcPolarity::Signed,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=5).contains(&self.resolution_bits) {
            return Err(Error::InvalidArgument(format!(
                "ADC resolution must be 1..=5 bits, got {}",
                self.resolution_bits
            )));
        }
        if self.polarity == AdcPolarity::Signed && self.resolution_bits < 2 {
            return Err(Error::InvalidArgument("signed ADC needs at least 2 bits".into()));
        }
        if !(self.full_scale > 0.0 && self.full_scale.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "ADC full scale must be positive, got {}",
                self.full_scale
            )));
        }
        self.f.validate()
    }

    pub fn max_code(&self) -> i32 {
        match self.polarity {
            AdcPolarity::Unsigned => (1 << self.resolution_bits) - 1,
            AdcPolarity::Signed => (1 << (self.resolution_bits - 1)) - 1,
        }
    }

    pub fn min_code(&self) -> i32 {
        match self.polarity {
            AdcPolarity::Unsigned => 0,
            AdcPolarity::Signed => -(1 << (self.resolution_bits - 1)),
        }
    }

    pub fn code_range(&self) -> RangeInclusive<i32> {
        self.min_code()..=self.max_code()
    }

    /// Output step: `f(full_scale)` spread over the top code.
    pub fn lsb(&self) -> f64 {
        self.f.apply(self.full_scale) / self.max_code() as f64
    }

    pub fn dequantize(&self, code: i32) -> f64 {
        code as f64 * self.lsb()
    }

    /// Width of a code on the wire.
    pub fn code_bits(&self) -> u32 {
        self.resolution_bits
    }
}

/// Convert one analog MAC value. For unsigned models with a non-identity
/// `f`, `analog <= 0` always yields code 0.
pub fn adc_convert(model: &AdcModel, analog: f64) -> i32 {
    if model.polarity == AdcPolarity::Unsigned && !model.f.is_identity() && !(analog > 0.0) {
        return 0;
    }
    let v = model.f.apply(analog);
    let code = (v / model.lsb()).round_ties_even();
    code.clamp(model.min_code() as f64, model.max_code() as f64) as i32
}

/// Gaussian ADC error in LSB units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub mean: f64,
    pub std: f64,
    pub seed: u64,
}

impl NoiseModel {
    /// Nominal room-temperature error of the in-memory ADC.
    pub const NOMINAL_MEAN: f64 = -0.11;
    pub const NOMINAL_STD: f64 = 0.56;

    pub fn nominal(seed: u64) -> Self {
        NoiseModel {
            mean: Self::NOMINAL_MEAN,
            std: Self::NOMINAL_STD,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.std >= 0.0 && self.std.is_finite() && self.mean.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "noise needs finite mean and std >= 0, got N({}, {})",
                self.mean, self.std
            )));
        }
        Ok(())
    }

    /// Independent stream keyed by e.g. `(layer, sample)`. Identical seed
    /// and key give an identical sequence, whatever thread draws it.
    pub fn stream(&self, key: &[u64]) -> Result<NoiseStream> {
        self.validate()?;
        let mut h = splitmix64(self.seed ^ 0x6a09_e667_f3bc_c908);
        for &k in key {
            h = splitmix64(h ^ k);
        }
        Ok(NoiseStream {
            rng: ChaCha8Rng::seed_from_u64(h),
            dist: Normal::new(self.mean, self.std)
                .map_err(|e| Error::InvalidArgument(e.to_string()))?,
        })
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A seeded sequence of ADC errors.
#[derive(Debug, Clone)]
pub struct NoiseStream {
    rng: ChaCha8Rng,
    dist: Normal<f64>,
}

impl NoiseStream {
    /// Next raw error sample, before rounding or clamping.
    pub fn sample(&mut self) -> f64 {
        self.dist.sample(&mut self.rng)
    }
}

/// `clamp(round(code + e), range)` with `e` drawn from the stream.
pub fn inject_noise(stream: &mut NoiseStream, code: i32, range: RangeInclusive<i32>) -> i32 {
    let e = stream.sample();
    let noisy = (code as f64 + e).round_ties_even();
    noisy.clamp(*range.start() as f64, *range.end() as f64) as i32
}

/// Integer MAC of a ternary `rows x cols` segment against input codes.
pub fn mac_integer(weights: &[i8], cols: usize, input_codes: &[i64]) -> Result<Vec<i64>> {
    if cols == 0 || weights.len() != input_codes.len() * cols {
        return Err(Error::shape(
            "mac_integer",
            format!("{} x {cols} weights", input_codes.len()),
            format!("{} weights", weights.len()),
        ));
    }
    let mut acc = vec![0i64; cols];
    for (row, &x) in input_codes.iter().enumerate() {
        if x == 0 {
            continue;
        }
        for (a, &w) in acc.iter_mut().zip(&weights[row * cols..(row + 1) * cols]) {
            *a += w as i64 * x;
        }
    }
    Ok(acc)
}

/// Ideal analog MAC per column: integer dot product times `input_scale`.
pub fn mac_analog(weights: &[i8], cols: usize, input_codes: &[i64], input_scale: f64) -> Result<Vec<f64>> {
    Ok(mac_integer(weights, cols, input_codes)?
        .into_iter()
        .map(|v| v as f64 * input_scale)
        .collect())
}
