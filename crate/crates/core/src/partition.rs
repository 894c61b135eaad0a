//! Splitting an unrolled kernel across size-limited crossbars.
//!
//! Unrolled rows are cut into contiguous runs of `n_rows`; the last run is
//! zero-padded up to the crossbar height. Each run is one segment and emits
//! one psum per output position and output column.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ConvSpec, UnrolledKernel};

/// Physical crossbar geometry and converter resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrossbarConfig {
    pub n_rows: usize,
    pub n_cols: usize,
    /// Weight bits one cell stores; a ternary twin cell holds 2.
    #[serde(default = "default_bits_per_cell")]
    pub weight_bits_per_cell: u32,
    #[serde(default = "default_adc_bits")]
    pub adc_resolution_bits: u32,
}

fn default_bits_per_cell() -> u32 {
    2
}

fn default_adc_bits() -> u32 {
    4
}

impl CrossbarConfig {
    /// Square `n x n` crossbar with ternary cells and a 4-bit ADC.
    pub fn square(n: usize) -> Self {
        CrossbarConfig {
            n_rows: n,
            n_cols: n,
            weight_bits_per_cell: 2,
            adc_resolution_bits: 4,
        }
    }

    pub fn with_adc_bits(mut self, bits: u32) -> Self {
        self.adc_resolution_bits = bits;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_rows == 0 || self.n_cols == 0 {
            return Err(Error::InvalidArgument(format!(
                "crossbar dimensions must be >= 1, got {}x{}",
                self.n_rows, self.n_cols
            )));
        }
        if self.weight_bits_per_cell == 0 {
            return Err(Error::InvalidArgument("weight_bits_per_cell must be >= 1".into()));
        }
        if !(1..=5).contains(&self.adc_resolution_bits) {
            return Err(Error::InvalidArgument(format!(
                "adc_resolution_bits must be in 1..=5, got {}",
                self.adc_resolution_bits
            )));
        }
        Ok(())
    }

    /// Column slices needed for a `weight_bits` weight.
    pub fn weight_slices(&self, weight_bits: u32) -> u32 {
        weight_bits.div_ceil(self.weight_bits_per_cell).max(1)
    }
}

/// Number of crossbar segments `ceil(c_in * k1 * k2 / n_rows)`.
pub fn num_segments(spec: &ConvSpec, xbar: &CrossbarConfig) -> usize {
    segments_for_rows(spec.unrolled_dim(), xbar.n_rows)
}

pub(crate) fn segments_for_rows(d: usize, n_rows: usize) -> usize {
    d.div_ceil(n_rows).max(1)
}

/// How the `D` unrolled rows are spread over crossbars.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentMap {
    /// Half-open `(start, end)` row ranges, one per segment.
    pub segments: Vec<(usize, usize)>,
    pub s_count: usize,
    /// Zero rows appended to the last segment.
    pub pad_rows: usize,
    pub col_tiles: usize,
    pub n_rows: usize,
}

impl SegmentMap {
    /// Segment map for `d` unrolled rows feeding `cols` physical columns.
    pub fn new(d: usize, cols: usize, xbar: &CrossbarConfig) -> Result<Self> {
        xbar.validate()?;
        if d == 0 || cols == 0 {
            return Err(Error::InvalidArgument(format!(
                "cannot partition a {d}x{cols} kernel"
            )));
        }
        let n = xbar.n_rows;
        let s = segments_for_rows(d, n);
        let segments = (0..s).map(|i| (i * n, ((i + 1) * n).min(d))).collect();
        Ok(SegmentMap {
            segments,
            s_count: s,
            pad_rows: s * n - d,
            col_tiles: cols.div_ceil(xbar.n_cols),
            n_rows: n,
        })
    }

    /// Unrolled rows covered, excluding padding.
    pub fn covered_rows(&self) -> usize {
        self.segments.iter().map(|(a, b)| b - a).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.segments.len() != self.s_count || self.s_count == 0 {
            return Err(Error::Corrupt(format!(
                "segment map lists {} ranges but s_count = {}",
                self.segments.len(),
                self.s_count
            )));
        }
        let mut next = 0;
        for (i, &(a, b)) in self.segments.iter().enumerate() {
            let last = i + 1 == self.s_count;
            if a != next || b <= a || b - a > self.n_rows || (!last && b - a != self.n_rows) {
                return Err(Error::Corrupt(format!(
                    "segment {i} = [{a}, {b}) breaks contiguous {}-row tiling",
                    self.n_rows
                )));
            }
            next = b;
        }
        let (a, b) = self.segments[self.s_count - 1];
        if self.pad_rows != self.n_rows - (b - a) {
            return Err(Error::Corrupt(format!(
                "pad_rows = {} but last segment holds {} of {} rows",
                self.pad_rows,
                b - a,
                self.n_rows
            )));
        }
        Ok(())
    }
}

/// A kernel laid out on crossbars: one `n_rows x cols` matrix per segment.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionedKernel {
    pub segments: Vec<Vec<f64>>,
    pub cols: usize,
    pub segment_map: SegmentMap,
}

impl PartitionedKernel {
    pub fn s_count(&self) -> usize {
        self.segment_map.s_count
    }

    pub fn d(&self) -> usize {
        self.segment_map.covered_rows()
    }

    /// Unpadded rows of segment `s`, row-major `rows x cols`.
    pub fn segment_rows(&self, s: usize) -> &[f64] {
        let (a, b) = self.segment_map.segments[s];
        &self.segments[s][..(b - a) * self.cols]
    }
}

pub fn partition(kernel: &UnrolledKernel, xbar: &CrossbarConfig) -> Result<PartitionedKernel> {
    let map = SegmentMap::new(kernel.rows, kernel.cols, xbar)?;
    let cols = kernel.cols;
    let segments = map
        .segments
        .iter()
        .map(|&(a, b)| {
            let mut seg = vec![0.0; map.n_rows * cols];
            seg[..(b - a) * cols].copy_from_slice(&kernel.data[a * cols..b * cols]);
            seg
        })
        .collect();
    Ok(PartitionedKernel {
        segments,
        cols,
        segment_map: map,
    })
}

/// Inverse of [`partition`]: concatenate segments and strip padding.
pub fn reconstruct(pk: &PartitionedKernel) -> Result<UnrolledKernel> {
    pk.segment_map.validate()?;
    let map = &pk.segment_map;
    if pk.segments.len() != map.s_count {
        return Err(Error::Corrupt(format!(
            "{} segment matrices for {} segments",
            pk.segments.len(),
            map.s_count
        )));
    }
    let mut data = Vec::with_capacity(map.covered_rows() * pk.cols);
    for (s, seg) in pk.segments.iter().enumerate() {
        if seg.len() != map.n_rows * pk.cols {
            return Err(Error::Corrupt(format!(
                "segment {s} holds {} values, expected {}",
                seg.len(),
                map.n_rows * pk.cols
            )));
        }
        let (a, b) = map.segments[s];
        data.extend_from_slice(&seg[..(b - a) * pk.cols]);
    }
    UnrolledKernel::new(map.covered_rows(), pk.cols, data)
}

/// Knobs that multiply the psum count of a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PsumCountQuery {
    pub output_positions: usize,
    pub weight_bits: u32,
    pub input_bits: u32,
    pub input_bit_serial: bool,
}

impl PsumCountQuery {
    pub fn new(output_positions: usize) -> Self {
        PsumCountQuery {
            output_positions,
            weight_bits: 2,
            input_bits: 4,
            input_bit_serial: false,
        }
    }
}

/// Psums a layer produces on `xbar`:
/// `positions * c_out * S * weight_slices * (input_bits if bit-serial)`.
pub fn psum_count(spec: &ConvSpec, xbar: &CrossbarConfig, q: &PsumCountQuery) -> u64 {
    let s = num_segments(spec, xbar) as u64;
    let slices = xbar.weight_slices(q.weight_bits) as u64;
    let serial = if q.input_bit_serial { q.input_bits.max(1) as u64 } else { 1 };
    q.output_positions as u64 * spec.c_out as u64 * s * slices * serial
}

/// Unpartitioned baseline: one segment, one slice, no serialization.
pub fn baseline_psum_count(spec: &ConvSpec, output_positions: usize) -> u64 {
    output_positions as u64 * spec.c_out as u64
}
