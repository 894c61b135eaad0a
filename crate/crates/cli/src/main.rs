use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cadc_core::data::Dataset;
use cadc_core::harness::{
    self, cost_rows, to_csv, to_json, ExperimentConfig, InferenceOptions, SweepInputs,
};
use cadc_core::net::{NetSpec, Network, WeightArchive};
use cadc_core::partition::CrossbarConfig;
use cadc_core::{Error, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "cadc", version, about = "Crossbar-aware dendritic convolution simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the init, shuffle and noise seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Segment counts and psum volumes per layer and crossbar size.
    PartitionReport,
    /// Run the eval set through the network.
    Infer,
    /// Crossbar size x dendrite function table.
    Sweep,
    /// Train the toy network and save its weights.
    TrainToy,
    /// Quantized accuracy under ADC code noise.
    NoiseSweep,
    /// vConv versus CADC energy and latency.
    CostReport,
}

impl Command {
    fn stem(self) -> &'static str {
        match self {
            Command::PartitionReport => "partition-report",
            Command::Infer => "infer",
            Command::Sweep => "sweep",
            Command::TrainToy => "train-toy",
            Command::NoiseSweep => "noise-sweep",
            Command::CostReport => "cost-report",
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum Format {
    Json,
    Csv,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            report_error("usage", &e.to_string());
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            report_error(e.kind(), &e.to_string());
            ExitCode::from(if matches!(e, Error::Config(_)) { 2 } else { 1 })
        }
    }
}

fn report_error(kind: &str, message: &str) {
    let body = serde_json::json!({ "error": { "kind": kind, "message": message.trim_end() } });
    eprintln!("{body}");
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config is required".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.train.seed = seed;
        cfg.noise.seed = seed;
    }
    if let Some(dir) = &cli.out_dir {
        cfg.out_dir = dir.clone();
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<Vec<PathBuf>> {
    let cfg = load_config(cli)?;
    let spec = cfg.netspec()?;
    let out = Output {
        dir: cfg.out_dir.clone(),
        stem: cli.command.stem(),
        format: cli.format,
    };
    let first = CrossbarConfig::square(cfg.crossbar_sizes[0]);
    match cli.command {
        Command::PartitionReport => {
            let rows = harness::partition_report(&spec, &cfg.crossbar_sizes)?;
            out.write(&serde_json::json!({ "netspec": spec.name, "rows": rows }), &rows)
        }
        Command::CostReport => {
            let params = cfg.cost.load_params()?;
            let mut sizes = cfg.crossbar_sizes.clone();
            sizes.sort_unstable();
            sizes.dedup();
            let reports = sizes
                .iter()
                .map(|&n| harness::cost_report(&spec, &CrossbarConfig::square(n), &cfg.cost.sparsity, cfg.cost.codec, &params))
                .collect::<Result<Vec<_>>>()?;
            let rows: Vec<_> = reports
                .iter()
                .flat_map(cost_rows)
                .collect();
            let summary = serde_json::json!({
                "netspec": spec.name,
                "codec": cfg.cost.codec,
                "sparsity": cfg.cost.sparsity,
                "params": params.description,
                "reports": reports,
            });
            out.write(&summary, &rows)
        }
        Command::TrainToy => {
            let (train, eval) = cfg.dataset.build()?;
            let outcome = harness::train_toy(&spec, first, &train, cfg.mode, &cfg.train, cfg.seed)?;
            let weights_dir = cfg.out_dir.join("weights");
            outcome.weights.save(&weights_dir)?;
            let net = Network::new(&spec, &outcome.weights, first)?;
            let eval_acc = cadc_core::train::accuracy(&net, &eval, cfg.mode)?;
            let summary = serde_json::json!({
                "netspec": spec.name,
                "mode": cfg.mode,
                "crossbar_size": first.n_rows,
                "final_train_accuracy": outcome.history.last().map(|e| e.train_accuracy),
                "eval_accuracy": eval_acc,
                "weights_dir": weights_dir,
                "history": outcome.history,
            });
            let mut paths = out.write(&summary, &outcome.history)?;
            paths.push(weights_dir);
            Ok(paths)
        }
        Command::Infer => {
            let (train, eval) = cfg.dataset.build()?;
            let weights = obtain_weights(&cfg, &spec, &train)?;
            let opts = inference_options(&cfg, first)?;
            let calib = &train.inputs[..train.len().min(cfg.calibration_samples)];
            let report = harness::run_inference(&spec, &weights, &eval, calib, &opts)?;
            out.write(&report, &report.layers)
        }
        Command::Sweep => {
            let (train, eval) = cfg.dataset.build()?;
            let weights = if cfg.train_per_cell { None } else { Some(obtain_weights(&cfg, &spec, &train)?) };
            let inputs = SweepInputs {
                spec: &spec,
                weights: weights.as_ref(),
                train_data: &train,
                eval: &eval,
                calibration: &train.inputs[..train.len().min(cfg.calibration_samples)],
                train: cfg.train_per_cell.then_some((cfg.train, cfg.seed)),
            };
            let rows = harness::sweep_crossbars(&inputs, &cfg.crossbar_sizes, &cfg.sweep_fns(), &inference_options(&cfg, first)?)?;
            out.write(&serde_json::json!({ "netspec": spec.name, "rows": rows }), &rows)
        }
        Command::NoiseSweep => {
            let (train, eval) = cfg.dataset.build()?;
            let weights = obtain_weights(&cfg, &spec, &train)?;
            let net = Network::new(&spec, &weights, first)?;
            let calib = &train.inputs[..train.len().min(cfg.calibration_samples)];
            let n = &cfg.noise;
            let rows = harness::noise_sweep(&net, calib, &eval, cfg.mode, &n.adc_bits, n.mean, &n.std_grid, &n.seeds)?;
            out.write(&serde_json::json!({ "netspec": spec.name, "rows": rows }), &rows)
        }
    }
}

fn inference_options(cfg: &ExperimentConfig, crossbar: CrossbarConfig) -> Result<InferenceOptions> {
    Ok(InferenceOptions {
        crossbar,
        mode: cfg.mode,
        quantized: cfg.quantized,
        noise: cfg.noise_model(),
        codec: cfg.cost.codec,
        params: cfg.cost.load_params()?,
    })
}

/// The configured archive, or a freshly trained toy network.
fn obtain_weights(cfg: &ExperimentConfig, spec: &NetSpec, train: &Dataset) -> Result<WeightArchive> {
    match &cfg.weights {
        Some(dir) => {
            let w = WeightArchive::load(dir)?;
            w.check(spec)?;
            Ok(w)
        }
        None => {
            let xbar = CrossbarConfig::square(cfg.crossbar_sizes[0]);
            Ok(harness::train_toy(spec, xbar, train, cfg.mode, &cfg.train, cfg.seed)?.weights)
        }
    }
}

struct Output {
    dir: PathBuf,
    stem: &'static str,
    format: Format,
}

impl Output {
    /// JSON summary always; the CSV table too with `--format csv`.
    fn write<S: Serialize, R: Serialize>(&self, summary: &S, rows: &[R]) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(&self.dir)?;
        let json = self.dir.join(format!("{}.json", self.stem));
        write_file(&json, &to_json(summary)?)?;
        let mut paths = vec![json];
        if self.format == Format::Csv {
            let csv = self.dir.join(format!("{}.csv", self.stem));
            write_file(&csv, &to_csv(rows)?)?;
            paths.push(csv);
        }
        Ok(paths)
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(Error::from)
}
