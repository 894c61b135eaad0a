//! Energy and latency accounting for psum handling.
//!
//! This is bookkeeping, not circuit physics: every per-operation cost comes
//! from [`CostParams`], and the model counts operations. Psums exist only
//! for layers split over more than one segment; single-segment layers emit
//! finished outputs and spend nothing on psum buffering, transfer or
//! accumulation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dendrite::{ConvMode, DendriteFn};
use crate::error::{Error, Result};
use crate::partition::{psum_count, CrossbarConfig, PsumCountQuery, SegmentMap};
use crate::tensor::ConvSpec;

/// Per-operation energies in pJ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergyParams {
    pub buffer_read_per_bit: f64,
    pub buffer_write_per_bit: f64,
    pub transfer_per_bit: f64,
    /// One digital add in the psum accumulator.
    pub add: f64,
    /// Accumulator register load and result writeback, once per output.
    pub accumulate_per_output: f64,
    /// One weight-input multiply-accumulate inside a crossbar.
    pub mac_crossbar_per_op: f64,
    /// One conversion at 1..=5 bits of resolution.
    pub adc_convert: [f64; 5],
    /// Multiplier on conversion energy when the ADC runs a nonlinear mode.
    pub adc_nonlinear_factor: f64,
    pub codec_compress_per_psum: f64,
    pub codec_skip_check_per_psum: f64,
}

/// Throughput-style latency parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyParams {
    pub clock_period_ns: f64,
    pub crossbar_cycles_per_activation: f64,
    /// Cycles per conversion at 1..=5 bits.
    pub adc_cycles: [f64; 5],
    pub adc_lanes: f64,
    pub buffer_bits_per_cycle: f64,
    pub transfer_bus_bits: f64,
    pub transfer_cycles_per_word: f64,
    pub accumulate_cycles: f64,
    pub adder_lanes: f64,
    pub codec_cycles_per_psum: f64,
    pub codec_lanes: f64,
}

/// Full cost parameter set, loaded from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostParams {
    #[serde(default)]
    pub description: String,
    pub energy: EnergyParams,
    pub latency: LatencyParams,
}

/// Parameters shipped with the crate; see `params/default_cost.toml`.
pub const DEFAULT_PARAMS_TOML: &str = include_str!("../params/default_cost.toml");

impl CostParams {
    pub fn from_toml(text: &str) -> Result<Self> {
        let p: CostParams = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// The shipped calibrated defaults.
    pub fn calibrated() -> Self {
        Self::from_toml(DEFAULT_PARAMS_TOML).expect("shipped cost parameters parse")
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.energy;
        let l = &self.latency;
        let named = [
            ("energy.buffer_read_per_bit", e.buffer_read_per_bit),
            ("energy.buffer_write_per_bit", e.buffer_write_per_bit),
            ("energy.transfer_per_bit", e.transfer_per_bit),
            ("energy.add", e.add),
            ("energy.accumulate_per_output", e.accumulate_per_output),
            ("energy.mac_crossbar_per_op", e.mac_crossbar_per_op),
            ("energy.adc_nonlinear_factor", e.adc_nonlinear_factor),
            ("energy.codec_compress_per_psum", e.codec_compress_per_psum),
            ("energy.codec_skip_check_per_psum", e.codec_skip_check_per_psum),
            ("latency.clock_period_ns", l.clock_period_ns),
            ("latency.crossbar_cycles_per_activation", l.crossbar_cycles_per_activation),
            ("latency.transfer_cycles_per_word", l.transfer_cycles_per_word),
            ("latency.accumulate_cycles", l.accumulate_cycles),
            ("latency.codec_cycles_per_psum", l.codec_cycles_per_psum),
        ];
        for (name, v) in named {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        for (i, (&ea, &la)) in e.adc_convert.iter().zip(&l.adc_cycles).enumerate() {
            if !(ea >= 0.0 && la >= 0.0 && ea.is_finite() && la.is_finite()) {
                return Err(Error::Config(format!("ADC parameters for {} bits must be >= 0", i + 1)));
            }
        }
        let positive = [
            ("latency.adc_lanes", l.adc_lanes),
            ("latency.buffer_bits_per_cycle", l.buffer_bits_per_cycle),
            ("latency.transfer_bus_bits", l.transfer_bus_bits),
            ("latency.adder_lanes", l.adder_lanes),
            ("latency.codec_lanes", l.codec_lanes),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// One value per hardware component.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Components {
    pub crossbar: f64,
    pub adc: f64,
    pub buffer: f64,
    pub transfer: f64,
    pub accumulation: f64,
    pub codec: f64,
}

impl Components {
    pub const NAMES: [&'static str; 6] = ["crossbar", "adc", "buffer", "transfer", "accumulation", "codec"];

    pub fn values(&self) -> [f64; 6] {
        [self.crossbar, self.adc, self.buffer, self.transfer, self.accumulation, self.codec]
    }

    /// Sum in fixed component order.
    pub fn total(&self) -> f64 {
        self.values().iter().sum()
    }

    fn add(&mut self, o: &Components) {
        self.crossbar += o.crossbar;
        self.adc += o.adc;
        self.buffer += o.buffer;
        self.transfer += o.transfer;
        self.accumulation += o.accumulation;
        self.codec += o.codec;
    }
}

/// Operation counts behind a cost report.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PsumStats {
    /// Psums generated, per the partition psum count.
    pub psum_count: u64,
    /// Psums that go through buffer, transfer and accumulation.
    pub buffered_psums: u64,
    pub nonzero_psums: u64,
    /// Accumulation groups (output neurons times slices).
    pub blocks: u64,
    pub buffer_bits: u64,
    pub adds: u64,
    pub conversions: u64,
    pub mac_ops: u64,
    pub crossbar_activations: u64,
}

impl PsumStats {
    fn add(&mut self, o: &PsumStats) {
        self.psum_count += o.psum_count;
        self.buffered_psums += o.buffered_psums;
        self.nonzero_psums += o.nonzero_psums;
        self.blocks += o.blocks;
        self.buffer_bits += o.buffer_bits;
        self.adds += o.adds;
        self.conversions += o.conversions;
        self.mac_ops += o.mac_ops;
        self.crossbar_activations += o.crossbar_activations;
    }
}

/// Energy (pJ) and latency (ns) per component, with their totals.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub energy: Components,
    pub latency: Components,
    pub total_energy: f64,
    pub total_latency: f64,
    pub stats: PsumStats,
}

impl CostReport {
    fn finish(mut self) -> Self {
        self.total_energy = self.energy.total();
        self.total_latency = self.latency.total();
        self
    }

    /// Component-wise sum of reports, in slice order.
    pub fn sum<'a>(reports: impl IntoIterator<Item = &'a CostReport>) -> CostReport {
        let mut out = CostReport::default();
        for r in reports {
            out.energy.add(&r.energy);
            out.latency.add(&r.latency);
            out.stats.add(&r.stats);
        }
        out.finish()
    }
}

/// Geometry and numeric configuration of one convolution layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerShape {
    pub name: String,
    pub spec: ConvSpec,
    pub in_h: usize,
    pub in_w: usize,
    pub f: DendriteFn,
    pub weight_bits: u32,
    pub input_bits: u32,
    pub input_bit_serial: bool,
}

impl LayerShape {
    pub fn output_positions(&self) -> Result<usize> {
        let (oh, ow) = self.spec.output_hw(self.in_h, self.in_w)?;
        Ok(oh * ow)
    }

    pub fn query(&self) -> Result<PsumCountQuery> {
        Ok(PsumCountQuery {
            output_positions: self.output_positions()?,
            weight_bits: self.weight_bits,
            input_bits: self.input_bits,
            input_bit_serial: self.input_bit_serial,
        })
    }
}

/// Split `nnz` nonzeros across `blocks` as evenly as possible and return
/// the zero-skipping add count `sum_b max(nnz_b - 1, 0)`.
pub fn skip_adds(nnz: u64, blocks: u64) -> u64 {
    if blocks == 0 {
        return 0;
    }
    let base = nnz / blocks;
    let extra = nnz % blocks;
    extra * base + (blocks - extra) * base.saturating_sub(1)
}

/// Cost of one layer.
///
/// `sparsity` is the fraction of exactly-zero psums. With the codec on,
/// buffered bits are `S + width * nnz_b` per block and the accumulator
/// spends `max(nnz_b - 1, 0)` adds per block; with it off, every psum is
/// stored at full width and each block costs `S - 1` adds. Psum width is
/// the ADC resolution.
pub fn layer_cost(
    layer: &LayerShape,
    map: &SegmentMap,
    sparsity: f64,
    codec_enabled: bool,
    params: &CostParams,
    adc_bits: u32,
) -> Result<CostReport> {
    if !(0.0..=1.0).contains(&sparsity) {
        return Err(Error::InvalidArgument(format!("sparsity must be in [0, 1], got {sparsity}")));
    }
    if !(1..=5).contains(&adc_bits) {
        return Err(Error::InvalidArgument(format!("adc_bits must be in 1..=5, got {adc_bits}")));
    }
    let d = layer.spec.unrolled_dim();
    if map.covered_rows() != d {
        return Err(Error::shape("layer_cost segment map", d, map.covered_rows()));
    }
    let xbar = CrossbarConfig {
        n_rows: map.n_rows,
        n_cols: usize::MAX,
        weight_bits_per_cell: 2,
        adc_resolution_bits: adc_bits,
    };
    let q = layer.query()?;
    let s = map.s_count as u64;
    let psums = psum_count(&layer.spec, &xbar, &q);
    let slices = xbar.weight_slices(layer.weight_bits) as u64;
    let serial = if q.input_bit_serial { q.input_bits.max(1) as u64 } else { 1 };
    let positions = q.output_positions as u64;
    let width = adc_bits as u64;

    let mut stats = PsumStats {
        psum_count: psums,
        conversions: psums,
        mac_ops: positions * d as u64 * layer.spec.c_out as u64 * slices * serial,
        crossbar_activations: positions * s * map.col_tiles as u64 * serial,
        ..PsumStats::default()
    };
    if s > 1 {
        let blocks = psums / s;
        let nnz = ((1.0 - sparsity) * psums as f64).round() as u64;
        stats.blocks = blocks;
        stats.buffered_psums = psums;
        stats.nonzero_psums = nnz;
        if codec_enabled {
            stats.buffer_bits = blocks * s + width * nnz;
            stats.adds = skip_adds(nnz, blocks);
        } else {
            stats.buffer_bits = psums * width;
            stats.adds = psums - blocks;
        }
    }

    let e = &params.energy;
    let l = &params.latency;
    let bits = stats.buffer_bits as f64;
    let adc_factor = match layer.f {
        DendriteFn::Relu | DendriteFn::Identity => 1.0,
        _ => e.adc_nonlinear_factor,
    };
    let codec_psums = if codec_enabled { stats.buffered_psums as f64 } else { 0.0 };
    let b = (adc_bits - 1) as usize;
    let energy = Components {
        crossbar: stats.mac_ops as f64 * e.mac_crossbar_per_op,
        adc: stats.conversions as f64 * e.adc_convert[b] * adc_factor,
        buffer: bits * (e.buffer_write_per_bit + e.buffer_read_per_bit),
        transfer: bits * e.transfer_per_bit,
        accumulation: stats.adds as f64 * e.add + stats.blocks as f64 * e.accumulate_per_output,
        codec: codec_psums * (e.codec_compress_per_psum + e.codec_skip_check_per_psum),
    };
    let cycles = Components {
        crossbar: stats.crossbar_activations as f64 * l.crossbar_cycles_per_activation,
        adc: stats.conversions as f64 * l.adc_cycles[b] / l.adc_lanes,
        // write then read back
        buffer: 2.0 * bits / l.buffer_bits_per_cycle,
        transfer: (bits / l.transfer_bus_bits).ceil() * l.transfer_cycles_per_word,
        accumulation: stats.adds as f64 * l.accumulate_cycles / l.adder_lanes,
        codec: codec_psums * l.codec_cycles_per_psum / l.codec_lanes,
    };
    let v = cycles.values();
    let latency = Components {
        crossbar: v[0] * l.clock_period_ns,
        adc: v[1] * l.clock_period_ns,
        buffer: v[2] * l.clock_period_ns,
        transfer: v[3] * l.clock_period_ns,
        accumulation: v[4] * l.clock_period_ns,
        codec: v[5] * l.clock_period_ns,
    };
    Ok(CostReport {
        energy,
        latency,
        stats,
        ..CostReport::default()
    }
    .finish())
}

/// When the psum codec is engaged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodecMode {
    Off,
    On,
    /// Per layer, only when bitmask coding beats raw storage at the
    /// layer's sparsity.
    #[default]
    Auto,
}

impl CodecMode {
    /// Resolve for a layer: compression wins iff `nnz * w < S * (w - 1)`.
    pub fn engaged(&self, sparsity: f64, width_bits: u32) -> bool {
        match self {
            CodecMode::Off => false,
            CodecMode::On => true,
            CodecMode::Auto => {
                let w = width_bits as f64;
                (1.0 - sparsity) * w < w - 1.0
            }
        }
    }
}

/// A layer of a network cost comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCostRow {
    pub name: String,
    pub s_count: usize,
    pub adc_bits: u32,
    pub sparsity: f64,
    pub codec: bool,
    pub vconv: CostReport,
    pub cadc: CostReport,
}

/// Percentage reductions of CADC relative to vConv.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Reductions {
    pub accumulation_energy_pct: f64,
    pub buffer_energy_pct: f64,
    pub transfer_energy_pct: f64,
    pub buffer_transfer_energy_pct: f64,
    pub total_energy_pct: f64,
    pub accumulation_latency_pct: f64,
    pub buffer_transfer_latency_pct: f64,
    pub total_latency_pct: f64,
}

fn reduction(base: f64, new: f64) -> f64 {
    if base == 0.0 {
        0.0
    } else {
        100.0 * (base - new) / base
    }
}

impl Reductions {
    pub fn between(vconv: &CostReport, cadc: &CostReport) -> Self {
        let (ve, ce) = (&vconv.energy, &cadc.energy);
        let (vl, cl) = (&vconv.latency, &cadc.latency);
        Reductions {
            accumulation_energy_pct: reduction(ve.accumulation, ce.accumulation),
            buffer_energy_pct: reduction(ve.buffer, ce.buffer),
            transfer_energy_pct: reduction(ve.transfer, ce.transfer),
            buffer_transfer_energy_pct: reduction(ve.buffer + ve.transfer, ce.buffer + ce.transfer),
            total_energy_pct: reduction(vconv.total_energy, cadc.total_energy),
            accumulation_latency_pct: reduction(vl.accumulation, cl.accumulation),
            buffer_transfer_latency_pct: reduction(vl.buffer + vl.transfer, cl.buffer + cl.transfer),
            total_latency_pct: reduction(vconv.total_latency, cadc.total_latency),
        }
    }
}

/// vConv versus CADC for a whole network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkCost {
    pub crossbar_size: usize,
    pub layers: Vec<LayerCostRow>,
    pub vconv: CostReport,
    pub cadc: CostReport,
    pub reductions: Reductions,
}

/// Per-layer inputs to a network cost comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct CostLayer {
    pub shape: LayerShape,
    pub adc_bits: u32,
    /// Zero fraction of CADC post-`f` psums.
    pub cadc_sparsity: f64,
    /// Zero fraction of raw vConv psums, normally ~0.
    pub vconv_sparsity: f64,
}

/// Network cost for vConv (codec off) and CADC (codec per `codec`).
pub fn network_cost(
    layers: &[CostLayer],
    crossbar: &CrossbarConfig,
    codec: CodecMode,
    params: &CostParams,
) -> Result<NetworkCost> {
    params.validate()?;
    let mut rows = Vec::with_capacity(layers.len());
    for l in layers {
        let map = SegmentMap::new(l.shape.spec.unrolled_dim(), l.shape.spec.c_out, crossbar)?;
        let vconv = layer_cost(&l.shape, &map, l.vconv_sparsity, false, params, l.adc_bits)?;
        let engaged = codec.engaged(l.cadc_sparsity, l.adc_bits);
        let cadc = layer_cost(&l.shape, &map, l.cadc_sparsity, engaged, params, l.adc_bits)?;
        rows.push(LayerCostRow {
            name: l.shape.name.clone(),
            s_count: map.s_count,
            adc_bits: l.adc_bits,
            sparsity: l.cadc_sparsity,
            codec: engaged,
            vconv,
            cadc,
        });
    }
    let vconv = CostReport::sum(rows.iter().map(|r| &r.vconv));
    let cadc = CostReport::sum(rows.iter().map(|r| &r.cadc));
    Ok(NetworkCost {
        crossbar_size: crossbar.n_rows,
        reductions: Reductions::between(&vconv, &cadc),
        layers: rows,
        vconv,
        cadc,
    })
}

/// Mode label used in report tables.
pub fn mode_label(mode: ConvMode) -> &'static str {
    match mode {
        ConvMode::VConv => "vconv",
        ConvMode::Cadc => "cadc",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(c_in: usize, c_out: usize, hw: usize) -> LayerShape {
        LayerShape {
            name: "l".into(),
            spec: ConvSpec::new(c_in, 3, 3, c_out).with_padding(1),
            in_h: hw,
            in_w: hw,
            f: DendriteFn::Relu,
            weight_bits: 2,
            input_bits: 4,
            input_bit_serial: false,
        }
    }

    fn map_for(l: &LayerShape, n: usize) -> SegmentMap {
        SegmentMap::new(l.spec.unrolled_dim(), l.spec.c_out, &CrossbarConfig::square(n)).unwrap()
    }

    #[test]
    fn shipped_params_parse() {
        let p = CostParams::calibrated();
        assert!(p.validate().is_ok());
        assert!(!p.description.is_empty());
    }

    #[test]
    fn skip_adds_distribution() {
        assert_eq!(skip_adds(0, 4), 0);
        assert_eq!(skip_adds(4, 4), 0);
        assert_eq!(skip_adds(12, 4), 8);
        assert_eq!(skip_adds(3, 1), 2);
        // 5 over 2 blocks: 3 + 2 -> 2 + 1 adds
        assert_eq!(skip_adds(5, 2), 3);
    }

    #[test]
    fn dense_codec_off_is_baseline() {
        let p = CostParams::calibrated();
        let l = shape(64, 64, 8);
        let m = map_for(&l, 64);
        let v = layer_cost(&l, &m, 0.0, false, &p, 4).unwrap();
        let c = layer_cost(&l, &m, 0.0, false, &p, 4).unwrap();
        assert_eq!(v, c);
        assert_eq!(v.stats.adds, v.stats.psum_count - v.stats.blocks);
        assert_eq!(v.total_energy, v.energy.total());
    }

    #[test]
    fn fully_sparse_codec_on() {
        let p = CostParams::calibrated();
        let l = shape(64, 64, 8);
        let m = map_for(&l, 64);
        let c = layer_cost(&l, &m, 1.0, true, &p, 4).unwrap();
        assert_eq!(c.stats.adds, 0);
        assert_eq!(c.stats.buffer_bits, c.stats.blocks * 9);
        assert_eq!(c.energy.accumulation, c.stats.blocks as f64 * p.energy.accumulate_per_output);
    }

    #[test]
    fn worked_example_block_bits() {
        // 64x3x3x1 on 64 rows: one 9-psum block per position.
        let p = CostParams::calibrated();
        let mut l = shape(64, 1, 1);
        l.spec.padding = 1;
        let m = map_for(&l, 64);
        let c = layer_cost(&l, &m, 6.0 / 9.0, true, &p, 5).unwrap();
        let v = layer_cost(&l, &m, 0.0, false, &p, 5).unwrap();
        assert_eq!(c.stats.blocks, 1);
        assert_eq!(c.stats.buffer_bits, 9 + 3 * 5);
        assert_eq!(v.stats.buffer_bits, 45);
        assert_eq!(c.stats.adds, 2);
        assert_eq!(v.stats.adds, 8);
    }

    #[test]
    fn single_segment_has_no_psum_traffic() {
        let p = CostParams::calibrated();
        let l = shape(3, 16, 8);
        let c = layer_cost(&l, &map_for(&l, 64), 0.5, true, &p, 4).unwrap();
        assert_eq!(c.stats.buffer_bits, 0);
        assert_eq!(c.energy.codec, 0.0);
        assert_eq!(c.stats.psum_count, 64 * 16);
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = CostParams::calibrated();
        let l = shape(64, 64, 8);
        let m = map_for(&l, 64);
        assert!(layer_cost(&l, &m, 1.5, true, &p, 4).is_err());
        assert!(layer_cost(&l, &m, 0.5, true, &p, 0).is_err());
        let other = map_for(&shape(32, 64, 8), 64);
        assert!(layer_cost(&l, &other, 0.5, true, &p, 4).is_err());
        let mut bad = p.clone();
        bad.energy.add = -1.0;
        assert!(bad.validate().is_err());
        bad = p.clone();
        bad.latency.adc_lanes = 0.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn auto_codec_threshold() {
        assert!(!CodecMode::Auto.engaged(0.0, 4));
        assert!(!CodecMode::Auto.engaged(0.25, 4));
        assert!(CodecMode::Auto.engaged(0.26, 4));
        assert!(CodecMode::On.engaged(0.0, 4));
        assert!(!CodecMode::Off.engaged(1.0, 4));
    }
}
