//! Experiment runner: configuration, reports and their CSV/JSON emission.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cost::{mode_label, network_cost, CodecMode, CostLayer, CostParams, NetworkCost};
use crate::data::{Dataset, DatasetKind};
use crate::dendrite::{ConvMode, DendriteFn};
use crate::error::{Error, Result};
use crate::net::{NetSpec, Network, QuantConfig, QuantLayerStats, QuantizedNetwork, WeightArchive};
use crate::par;
use crate::partition::{baseline_psum_count, psum_count, CrossbarConfig, PsumCountQuery, SegmentMap};
use crate::quant::NoiseModel;
use crate::train::{self, EpochStats, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub samples: usize,
    pub eval_samples: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            kind: DatasetKind::Digits,
            samples: 1000,
            eval_samples: 200,
            seed: 1,
        }
    }
}

impl DatasetConfig {
    /// Training set and a held-out set drawn with a different seed.
    pub fn build(&self) -> Result<(Dataset, Dataset)> {
        let train = self.kind.generate(self.samples, self.seed)?;
        let eval = self.kind.generate(self.eval_samples, self.seed ^ 0x5eed_0001)?;
        Ok((train, eval))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    /// Inject code noise in `infer` and `sweep`.
    pub enabled: bool,
    pub mean: f64,
    pub std: f64,
    pub seed: u64,
    /// `noise-sweep` grid.
    pub std_grid: Vec<f64>,
    pub adc_bits: Vec<u32>,
    pub seeds: Vec<u64>,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            enabled: false,
            mean: NoiseModel::NOMINAL_MEAN,
            std: NoiseModel::NOMINAL_STD,
            seed: 0,
            std_grid: vec![0.0, NoiseModel::NOMINAL_STD, 2.0 * NoiseModel::NOMINAL_STD],
            adc_bits: vec![4],
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostConfig {
    pub codec: CodecMode,
    /// Parameter file; the shipped calibrated set when absent.
    pub params: Option<PathBuf>,
    /// CADC psum sparsity per conv layer for `cost-report`. One value
    /// applies to every layer.
    pub sparsity: Vec<f64>,
}

impl Default for CostConfig {
    fn default() -> Self {
        CostConfig {
            codec: CodecMode::Auto,
            params: None,
            sparsity: vec![0.0],
        }
    }
}

impl CostConfig {
    pub fn load_params(&self) -> Result<CostParams> {
        match &self.params {
            Some(p) => CostParams::load(p),
            None => Ok(CostParams::calibrated()),
        }
    }
}

/// Everything a CLI run needs. Relative paths are resolved against the
/// directory holding the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub netspec: PathBuf,
    /// Weight archive directory; trained from scratch when absent.
    #[serde(default)]
    pub weights: Option<PathBuf>,
    #[serde(default = "default_sizes")]
    pub crossbar_sizes: Vec<usize>,
    /// Overrides the netspec's per-layer functions when non-empty.
    #[serde(default)]
    pub dendrite_fns: Vec<DendriteFn>,
    #[serde(default = "default_mode")]
    pub mode: ConvMode,
    /// Use the quantized hardware path for inference.
    #[serde(default)]
    pub quantized: bool,
    #[serde(default = "default_calibration")]
    pub calibration_samples: usize,
    /// Retrain each sweep cell instead of reusing one set of weights.
    #[serde(default)]
    pub train_per_cell: bool,
    /// Seed for weight initialization.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default)]
    pub cost: CostConfig,
}

fn default_sizes() -> Vec<usize> {
    vec![64, 128, 256]
}
fn default_mode() -> ConvMode {
    ConvMode::Cadc
}
fn default_calibration() -> usize {
    64
}
fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.netspec);
        if let Some(w) = cfg.weights.as_mut() {
            resolve(w);
        }
        if let Some(p) = cfg.cost.params.as_mut() {
            resolve(p);
        }
        resolve(&mut cfg.out_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml(&text, &base)
    }

    pub fn validate(&self) -> Result<()> {
        if self.crossbar_sizes.is_empty() {
            return Err(Error::Config("crossbar_sizes must not be empty".into()));
        }
        for &n in &self.crossbar_sizes {
            CrossbarConfig::square(n).validate()?;
        }
        for f in &self.dendrite_fns {
            f.validate()?;
        }
        if self.calibration_samples == 0 {
            return Err(Error::Config("calibration_samples must be positive".into()));
        }
        if self.noise.std_grid.is_empty() || self.noise.adc_bits.is_empty() || self.noise.seeds.is_empty() {
            return Err(Error::Config("noise grid, adc_bits and seeds must be non-empty".into()));
        }
        if self.cost.sparsity.is_empty() || self.cost.sparsity.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(Error::Config("cost.sparsity needs values in [0, 1]".into()));
        }
        self.train.validate()?;
        NoiseModel {
            mean: self.noise.mean,
            std: self.noise.std,
            seed: self.noise.seed,
        }
        .validate()
    }

    pub fn netspec(&self) -> Result<NetSpec> {
        NetSpec::load(&self.netspec)
    }

    /// Functions to sweep; `None` keeps the netspec's own.
    pub fn sweep_fns(&self) -> Vec<Option<DendriteFn>> {
        if self.dendrite_fns.is_empty() {
            vec![None]
        } else {
            self.dendrite_fns.iter().copied().map(Some).collect()
        }
    }

    pub fn noise_model(&self) -> Option<NoiseModel> {
        self.noise.enabled.then_some(NoiseModel {
            mean: self.noise.mean,
            std: self.noise.std,
            seed: self.noise.seed,
        })
    }
}

/// One row per (crossbar size, layer).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionRow {
    pub crossbar_size: usize,
    pub layer: String,
    pub c_in: usize,
    pub k1: usize,
    pub k2: usize,
    pub c_out: usize,
    pub unrolled_dim: usize,
    pub s_count: usize,
    pub pad_rows: usize,
    pub col_tiles: usize,
    pub output_positions: usize,
    pub psum_count: u64,
    pub unpartitioned_psum_count: u64,
}

/// Segment counts and psum volumes for every conv layer at each size.
pub fn partition_report(spec: &NetSpec, sizes: &[usize]) -> Result<Vec<PartitionRow>> {
    let shapes = spec.conv_shapes()?;
    let mut rows = Vec::new();
    let mut sizes = sizes.to_vec();
    sizes.sort_unstable();
    sizes.dedup();
    for &n in &sizes {
        let xbar = CrossbarConfig::square(n);
        xbar.validate()?;
        for (shape, _) in &shapes {
            let s = shape.spec;
            let map = SegmentMap::new(s.unrolled_dim(), s.c_out, &xbar)?;
            let pos = shape.output_positions()?;
            let q = PsumCountQuery {
                output_positions: pos,
                weight_bits: shape.weight_bits,
                input_bits: shape.input_bits,
                input_bit_serial: shape.input_bit_serial,
            };
            rows.push(PartitionRow {
                crossbar_size: n,
                layer: shape.name.clone(),
                c_in: s.c_in,
                k1: s.k1,
                k2: s.k2,
                c_out: s.c_out,
                unrolled_dim: s.unrolled_dim(),
                s_count: map.s_count,
                pad_rows: map.pad_rows,
                col_tiles: map.col_tiles,
                output_positions: pos,
                psum_count: psum_count(&s, &xbar, &q),
                unpartitioned_psum_count: baseline_psum_count(&s, pos),
            });
        }
    }
    Ok(rows)
}

/// Inference settings.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceOptions {
    pub crossbar: CrossbarConfig,
    pub mode: ConvMode,
    pub quantized: bool,
    pub noise: Option<NoiseModel>,
    pub codec: CodecMode,
    pub params: CostParams,
}

/// Per-layer statistics of an inference run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerInferenceRow {
    pub layer: String,
    pub s_count: usize,
    /// Psums per input sample, from the partition model.
    pub psum_count: u64,
    /// Psums actually produced per sample.
    pub psums_observed: u64,
    /// Zero fraction of raw psums.
    pub raw_sparsity: f64,
    /// Zero fraction of the psums entering accumulation.
    pub sparsity: f64,
    pub compressed_bits: u64,
    pub uncompressed_bits: u64,
    pub skip_adds: u64,
    pub dense_adds: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceReport {
    pub mode: String,
    pub quantized: bool,
    pub crossbar_size: usize,
    pub samples: usize,
    pub accuracy: f64,
    pub predictions: Vec<usize>,
    pub outputs: Vec<Vec<f64>>,
    pub layers: Vec<LayerInferenceRow>,
    pub cost: NetworkCost,
}

/// Run every sample through the network and gather per-layer statistics.
/// `calibration` is only used by the quantized path.
pub fn run_inference(
    spec: &NetSpec,
    weights: &WeightArchive,
    inputs: &Dataset,
    calibration: &[crate::tensor::Tensor],
    opts: &InferenceOptions,
) -> Result<InferenceReport> {
    let net = Network::new(spec, weights, opts.crossbar)?;
    let counts = net.psum_counts()?;
    let n = inputs.len() as u64;
    let (outputs, layers): (Vec<Vec<f64>>, Vec<LayerInferenceRow>) = if opts.quantized {
        let q = QuantizedNetwork::calibrate(&net, calibration, QuantConfig::new(opts.mode))?;
        let per = par::map_range(inputs.len(), |i| q.forward(&inputs.inputs[i], opts.noise.as_ref().map(|m| (m, i as u64))))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let mut totals = vec![QuantLayerStats::default(); counts.len()];
        for (_, st) in &per {
            for (t, s) in totals.iter_mut().zip(st) {
                t.add(s);
            }
        }
        let rows = counts
            .iter()
            .zip(&totals)
            .map(|((name, s, pc), t)| LayerInferenceRow {
                layer: name.clone(),
                s_count: *s,
                psum_count: *pc,
                psums_observed: t.conversions / n,
                raw_sparsity: ratio(t.zero_codes, t.conversions),
                sparsity: ratio(t.zero_codes, t.conversions),
                compressed_bits: t.compressed_bits,
                uncompressed_bits: t.uncompressed_bits,
                skip_adds: t.skip_adds,
                dense_adds: t.dense_adds,
            })
            .collect();
        (per.into_iter().map(|(o, _)| o).collect(), rows)
    } else {
        let per = par::map_range(inputs.len(), |i| net.forward(&inputs.inputs[i], opts.mode))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let mut raw = vec![0u64; counts.len()];
        let mut post = vec![0u64; counts.len()];
        let mut total = vec![0u64; counts.len()];
        for (_, recs) in &per {
            for (i, r) in recs.iter().enumerate() {
                raw[i] += r.raw_zeros;
                post[i] += r.post_zeros;
                total[i] += r.total;
            }
        }
        let rows = counts
            .iter()
            .enumerate()
            .map(|(i, (name, s, pc))| LayerInferenceRow {
                layer: name.clone(),
                s_count: *s,
                psum_count: *pc,
                psums_observed: total[i] / n,
                raw_sparsity: ratio(raw[i], total[i]),
                sparsity: ratio(post[i], total[i]),
                compressed_bits: 0,
                uncompressed_bits: 0,
                skip_adds: 0,
                dense_adds: 0,
            })
            .collect();
        (per.into_iter().map(|(o, _)| o).collect(), rows)
    };
    let predictions: Vec<usize> = outputs.iter().map(|o| crate::net::argmax(o)).collect();
    let hits = predictions.iter().zip(&inputs.labels).filter(|(p, l)| p == l).count();
    let shapes = spec.conv_shapes()?;
    let cost_layers: Vec<CostLayer> = shapes
        .into_iter()
        .zip(&layers)
        .map(|((shape, adc_bits), row)| CostLayer {
            shape,
            adc_bits,
            cadc_sparsity: if opts.mode == ConvMode::Cadc { row.sparsity } else { 0.0 },
            vconv_sparsity: 0.0,
        })
        .collect();
    let cost = network_cost(&cost_layers, &opts.crossbar, opts.codec, &opts.params)?;
    Ok(InferenceReport {
        mode: mode_label(opts.mode).into(),
        quantized: opts.quantized,
        crossbar_size: opts.crossbar.n_rows,
        samples: inputs.len(),
        accuracy: hits as f64 / inputs.len() as f64,
        predictions,
        outputs,
        layers,
        cost,
    })
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Result of a toy training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub weights: WeightArchive,
    pub history: Vec<EpochStats>,
}

/// Train a fresh network initialized from `init_seed`.
pub fn train_toy(
    spec: &NetSpec,
    crossbar: CrossbarConfig,
    data: &Dataset,
    mode: ConvMode,
    cfg: &TrainConfig,
    init_seed: u64,
) -> Result<TrainOutcome> {
    let init = WeightArchive::init(spec, init_seed)?;
    let mut net = Network::new(spec, &init, crossbar)?;
    let history = train::train(&mut net, data, mode, cfg)?;
    Ok(TrainOutcome {
        weights: net.weights()?,
        history,
    })
}

/// One (crossbar size, function) cell of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub crossbar_size: usize,
    pub dendrite_fn: String,
    pub accuracy: f64,
    /// Zero fraction over all conv-layer psums entering accumulation.
    pub sparsity: f64,
    /// Segment count per conv layer, `/`-separated.
    pub s_counts: String,
    /// Psums per sample, per conv layer, `/`-separated.
    pub psum_counts: String,
    pub total_psums: u64,
    pub vconv_energy_pj: f64,
    pub cadc_energy_pj: f64,
    pub accumulation_energy_reduction_pct: f64,
    pub buffer_transfer_energy_reduction_pct: f64,
    pub total_energy_reduction_pct: f64,
}

/// Inputs shared by every sweep cell.
#[derive(Debug, Clone)]
pub struct SweepInputs<'a> {
    pub spec: &'a NetSpec,
    /// Used unless `train` is set.
    pub weights: Option<&'a WeightArchive>,
    pub train_data: &'a Dataset,
    pub eval: &'a Dataset,
    /// Calibration inputs for the quantized path.
    pub calibration: &'a [crate::tensor::Tensor],
    /// Train every cell from scratch with this config and init seed.
    pub train: Option<(TrainConfig, u64)>,
}

/// Evaluate every (crossbar size, function) combination. Cells run
/// concurrently; rows come back sorted by size, then function order.
pub fn sweep_crossbars(inputs: &SweepInputs<'_>, sizes: &[usize], fns: &[Option<DendriteFn>], opts: &InferenceOptions) -> Result<Vec<SweepRow>> {
    if inputs.eval.is_empty() {
        return Err(Error::InvalidArgument("sweep needs a non-empty eval set".into()));
    }
    if sizes.is_empty() || fns.is_empty() {
        return Err(Error::InvalidArgument("sweep needs at least one size and one function".into()));
    }
    let mut sizes = sizes.to_vec();
    sizes.sort_unstable();
    sizes.dedup();
    let cells: Vec<(usize, usize)> = sizes.iter().flat_map(|&n| (0..fns.len()).map(move |f| (n, f))).collect();
    let rows = par::map_slice(&cells, |&(n, fi)| -> Result<SweepRow> {
        let spec = match fns[fi] {
            Some(f) => inputs.spec.with_dendrite_fn(f),
            None => inputs.spec.clone(),
        };
        let xbar = CrossbarConfig {
            n_rows: n,
            n_cols: n,
            ..opts.crossbar
        };
        let weights = match (&inputs.train, inputs.weights) {
            (Some((cfg, seed)), _) => train_toy(&spec, xbar, inputs.train_data, opts.mode, cfg, *seed)?.weights,
            (None, Some(w)) => w.clone(),
            (None, None) => return Err(Error::Config("sweep needs weights or a training config".into())),
        };
        let cell_opts = InferenceOptions {
            crossbar: xbar,
            ..opts.clone()
        };
        let rep = run_inference(&spec, &weights, inputs.eval, inputs.calibration, &cell_opts)?;
        let total: u64 = rep.layers.iter().map(|l| l.psums_observed).sum();
        let zeros: f64 = rep.layers.iter().map(|l| l.sparsity * l.psums_observed as f64).sum();
        let join = |v: Vec<String>| v.join("/");
        Ok(SweepRow {
            crossbar_size: n,
            dendrite_fn: fns[fi].map(|f| f.to_string()).unwrap_or_else(|| "netspec".into()),
            accuracy: rep.accuracy,
            sparsity: if total == 0 { 0.0 } else { zeros / total as f64 },
            s_counts: join(rep.layers.iter().map(|l| l.s_count.to_string()).collect()),
            psum_counts: join(rep.layers.iter().map(|l| l.psum_count.to_string()).collect()),
            total_psums: rep.layers.iter().map(|l| l.psum_count).sum(),
            vconv_energy_pj: rep.cost.vconv.total_energy,
            cadc_energy_pj: rep.cost.cadc.total_energy,
            accumulation_energy_reduction_pct: rep.cost.reductions.accumulation_energy_pct,
            buffer_transfer_energy_reduction_pct: rep.cost.reductions.buffer_transfer_energy_pct,
            total_energy_reduction_pct: rep.cost.reductions.total_energy_pct,
        })
    });
    rows.into_iter().collect()
}

/// One (ADC resolution, noise level) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseRow {
    pub adc_bits: u32,
    pub noise_mean: f64,
    pub noise_std: f64,
    pub seeds: usize,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub noiseless_accuracy: f64,
}

/// Quantized accuracy under code noise, mean and population std over seeds.
#[allow(clippy::too_many_arguments)]
pub fn noise_sweep(
    net: &Network,
    calibration: &[crate::tensor::Tensor],
    eval: &Dataset,
    mode: ConvMode,
    adc_bits: &[u32],
    mean: f64,
    stds: &[f64],
    seeds: &[u64],
) -> Result<Vec<NoiseRow>> {
    if adc_bits.is_empty() || stds.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidArgument("noise sweep grid is empty".into()));
    }
    let mut rows = Vec::new();
    let mut bits = adc_bits.to_vec();
    bits.sort_unstable();
    bits.dedup();
    let mut stds = stds.to_vec();
    stds.sort_by(f64::total_cmp);
    stds.dedup();
    for &b in &bits {
        let qc = QuantConfig {
            adc_bits: Some(b),
            ..QuantConfig::new(mode)
        };
        let q = QuantizedNetwork::calibrate(net, calibration, qc)?;
        let acc = |noise: Option<&NoiseModel>| -> Result<f64> {
            let hits = par::map_range(eval.len(), |i| {
                q.predict(&eval.inputs[i], noise.map(|m| (m, i as u64))).map(|p| p == eval.labels[i])
            })
            .into_iter()
            .collect::<Result<Vec<bool>>>()?;
            Ok(hits.iter().filter(|&&h| h).count() as f64 / eval.len() as f64)
        };
        let clean = acc(None)?;
        for &std in &stds {
            let accs = seeds
                .iter()
                .map(|&seed| acc(Some(&NoiseModel { mean, std, seed })))
                .collect::<Result<Vec<f64>>>()?;
            let m = accs.iter().sum::<f64>() / accs.len() as f64;
            let var = accs.iter().map(|a| (a - m).powi(2)).sum::<f64>() / accs.len() as f64;
            rows.push(NoiseRow {
                adc_bits: b,
                noise_mean: mean,
                noise_std: std,
                seeds: seeds.len(),
                accuracy_mean: m,
                accuracy_std: var.sqrt(),
                noiseless_accuracy: clean,
            });
        }
    }
    Ok(rows)
}

/// vConv/CADC comparison from configured per-layer sparsities.
pub fn cost_report(spec: &NetSpec, crossbar: &CrossbarConfig, sparsity: &[f64], codec: CodecMode, params: &CostParams) -> Result<NetworkCost> {
    let shapes = spec.conv_shapes()?;
    if sparsity.len() != 1 && sparsity.len() != shapes.len() {
        return Err(Error::Config(format!(
            "cost.sparsity has {} values; give 1 or one per conv layer ({})",
            sparsity.len(),
            shapes.len()
        )));
    }
    let layers: Vec<CostLayer> = shapes
        .into_iter()
        .enumerate()
        .map(|(i, (shape, adc_bits))| CostLayer {
            shape,
            adc_bits,
            cadc_sparsity: if sparsity.len() == 1 { sparsity[0] } else { sparsity[i] },
            vconv_sparsity: 0.0,
        })
        .collect();
    network_cost(&layers, crossbar, codec, params)
}

/// Flat CSV row of a network cost comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub crossbar_size: usize,
    pub layer: String,
    pub variant: String,
    pub s_count: usize,
    pub adc_bits: u32,
    pub sparsity: f64,
    pub codec: bool,
    pub crossbar_pj: f64,
    pub adc_pj: f64,
    pub buffer_pj: f64,
    pub transfer_pj: f64,
    pub accumulation_pj: f64,
    pub codec_pj: f64,
    pub total_energy_pj: f64,
    pub total_latency_ns: f64,
    pub buffer_bits: u64,
    pub adds: u64,
}

pub fn cost_rows(c: &NetworkCost) -> Vec<CostRow> {
    let mk = |layer: &str, variant: &str, s: usize, b: u32, sp: f64, codec: bool, r: &crate::cost::CostReport| CostRow {
        crossbar_size: c.crossbar_size,
        layer: layer.into(),
        variant: variant.into(),
        s_count: s,
        adc_bits: b,
        sparsity: sp,
        codec,
        crossbar_pj: r.energy.crossbar,
        adc_pj: r.energy.adc,
        buffer_pj: r.energy.buffer,
        transfer_pj: r.energy.transfer,
        accumulation_pj: r.energy.accumulation,
        codec_pj: r.energy.codec,
        total_energy_pj: r.total_energy,
        total_latency_ns: r.total_latency,
        buffer_bits: r.stats.buffer_bits,
        adds: r.stats.adds,
    };
    let mut rows = Vec::new();
    for l in &c.layers {
        rows.push(mk(&l.name, "vconv", l.s_count, l.adc_bits, 0.0, false, &l.vconv));
        rows.push(mk(&l.name, "cadc", l.s_count, l.adc_bits, l.sparsity, l.codec, &l.cadc));
    }
    rows.push(mk("total", "vconv", 0, 0, 0.0, false, &c.vconv));
    rows.push(mk("total", "cadc", 0, 0, 0.0, false, &c.cadc));
    rows
}

/// Serialize rows as CSV with a header line.
pub fn to_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}
