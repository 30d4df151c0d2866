use std::collections::HashMap;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use hoverest::budget::{cycles_per_update, estimate_power, lk_mult_count, firmware_tasks, PowerModel};
use hoverest::calibration::{estimate_flow_variance, estimate_pressure_variance, TuneSpec};
use hoverest::flow::{calibrate_alpha, write_flow_csv, FlowMode, Frame};
use hoverest::harness::log::FlightLog;
use hoverest::harness::pipeline::{flow_from_frames, replay, run_simulation, tune_on_logs, FlowSource, PipelineConfig};
use hoverest::harness::report::{landing_time, rmse, LANDING_ARM_HEIGHT, LANDING_HEIGHT};
use hoverest::{Config, StateVec};
use serde_json::json;

#[derive(Parser)]
#[command(name = "hoverest", version, about = "Planar hover state estimation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Source {
    Rendered,
    Nonlinear,
    Linearized,
}

#[derive(Clone, Copy, ValueEnum)]
enum CalibrationMode {
    Alpha,
    Rflow,
    Rpress,
    Q,
}

#[derive(Clone, Copy, ValueEnum)]
enum BudgetMode {
    Dense,
    Patches,
}

#[derive(Subcommand)]
enum Command {
    /// Monte Carlo flights through the full sensor and estimator chain.
    Simulate {
        /// `key = value` plant and noise file.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        trials: usize,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, value_enum, default_value_t = Source::Rendered)]
        flow_source: Source,
        /// Keep the full-resolution camera frames as PGM files.
        #[arg(long)]
        save_frames: bool,
    },
    /// Runs the estimator over a recorded log directory.
    Replay {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Estimate trace destination (CSV); omitted means not written.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Optic flow between consecutive PGM frames, as CSV on stdout.
    Flow {
        #[arg(long)]
        frames_dir: PathBuf,
        #[arg(long, default_value_t = 4)]
        skip: usize,
        #[arg(long, value_enum, default_value_t = BudgetMode::Patches)]
        mode: BudgetMode,
    },
    /// Sensor calibration and covariance tuning.
    ///
    /// alpha: CSV with `flow_px,gyro`; rflow: CSV with `flow,truth`;
    /// rpress: CSV with `z_m` recorded while holding altitude; q: one or
    /// more log directories.
    Calibrate {
        #[arg(long, value_enum)]
        mode: CalibrationMode,
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        #[arg(long, default_value_t = 100.0)]
        rate: f64,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Multiplication count and onboard compute budget.
    Budget {
        #[arg(long, value_enum, default_value_t = BudgetMode::Patches)]
        mode: BudgetMode,
        #[arg(long, default_value_t = 40)]
        width: u64,
        #[arg(long, default_value_t = 30)]
        height: u64,
    },
    /// RMSE of an estimate trace against a truth trace.
    Rmse {
        /// CSV with `t,theta_hat,vx_hat,z_hat`.
        #[arg(long)]
        est: PathBuf,
        /// CSV with `t,theta,vx,z`.
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        start: f64,
        #[arg(long)]
        end: Option<f64>,
    },
}

fn pipeline_config(path: Option<&Path>) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::default();
    if let Some(path) = path {
        let file = Config::load(path).with_context(|| format!("config stage failed: {}", path.display()))?;
        cfg.params = file.plant;
        cfg.noise = file.noise;
        cfg.camera.frame_rate = file.plant.f_sample;
        cfg.scenario.process_noise = Some(file.noise.q_diag());
        let r = file.noise.r_diag();
        cfg.synthetic_noise = [r[0].sqrt(), r[1].sqrt()];
    }
    Ok(cfg)
}

/// Named float columns of a CSV file.
fn read_columns(path: &Path, names: &[&str]) -> Result<Vec<Vec<f64>>> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("input stage failed: {}", path.display()))?;
    let header: HashMap<String, usize> = reader
        .headers()?
        .iter()
        .enumerate()
        .map(|(i, h)| (h.trim().to_string(), i))
        .collect();
    let idx: Vec<usize> = names
        .iter()
        .map(|n| header.get(*n).copied().ok_or_else(|| anyhow!("input stage failed: {} has no `{n}` column", path.display())))
        .collect::<Result<_>>()?;
    let mut cols = vec![Vec::new(); names.len()];
    for (line, row) in reader.records().enumerate() {
        let row = row?;
        for (col, &i) in cols.iter_mut().zip(&idx) {
            let cell = row.get(i).unwrap_or("").trim();
            col.push(cell.parse().with_context(|| {
                format!("input stage failed: {} row {}: `{cell}` is not a number", path.display(), line + 2)
            })?);
        }
    }
    Ok(cols)
}

fn print_json(value: &serde_json::Value) -> Result<()> {
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn simulate(config: Option<&Path>, seed: u64, trials: usize, out_dir: &Path, source: Source, save_frames: bool) -> Result<()> {
    let mut cfg = pipeline_config(config)?;
    cfg.scenario.seed = seed;
    cfg.save_frames = save_frames;
    cfg.flow_source = match source {
        Source::Rendered => FlowSource::Rendered,
        Source::Nonlinear => FlowSource::Nonlinear,
        Source::Linearized => FlowSource::Linearized,
    };
    let out = run_simulation(&cfg, trials)?;
    out.write(out_dir).context("write stage failed")?;
    eprint!("{}", out.report.format_table());
    print_json(&serde_json::to_value(&out.report)?)
}

fn replay_log(log: &Path, config: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let cfg = pipeline_config(config)?;
    let log = FlightLog::load(log).with_context(|| format!("load stage failed: {}", log.display()))?;
    let result = replay(&log, &cfg)?;
    if let Some(path) = out {
        let file = std::fs::File::create(path).context("write stage failed")?;
        result.trace.write_csv(io::BufWriter::new(file))?;
    }
    print_json(&json!({ "liftoff": result.trace.liftoff, "rmse": result.rmse }))
}

fn flow(dir: &Path, skip: usize, mode: BudgetMode) -> Result<()> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("load stage failed: {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pgm"))
        .collect();
    paths.sort();
    if paths.len() < 2 {
        bail!("load stage failed: {} holds fewer than two .pgm frames", dir.display());
    }
    let cfg = PipelineConfig {
        flow_mode: flow_mode(mode),
        ..PipelineConfig::default()
    };
    let rate = cfg.camera.frame_rate;
    let frames: Vec<Frame> = paths
        .iter()
        .enumerate()
        .map(|(k, p)| Frame::load_pgm(p, k as f64 / rate).with_context(|| format!("load stage failed: {}", p.display())))
        .collect::<Result<_>>()?;
    let samples = flow_from_frames(&frames, &cfg.flow_config(), skip).context("flow stage failed")?;
    write_flow_csv(&samples, io::stdout().lock())?;
    Ok(())
}

fn flow_mode(mode: BudgetMode) -> FlowMode {
    match mode {
        BudgetMode::Dense => FlowMode::Dense,
        BudgetMode::Patches => FlowMode::Patches,
    }
}

fn calibrate(mode: CalibrationMode, inputs: &[PathBuf], rate: f64, config: Option<&Path>) -> Result<()> {
    let single = || -> Result<&Path> {
        match inputs {
            [one] => Ok(one.as_path()),
            _ => bail!("input stage failed: mode expects exactly one --input"),
        }
    };
    let value = match mode {
        CalibrationMode::Alpha => {
            let c = read_columns(single()?, &["flow_px", "gyro"])?;
            json!({ "alpha": calibrate_alpha(&c[0], &c[1], rate).context("calibrate stage failed")? })
        }
        CalibrationMode::Rflow => {
            let c = read_columns(single()?, &["flow", "truth"])?;
            json!({ "r_flow": estimate_flow_variance(&c[0], &c[1]).context("calibrate stage failed")? })
        }
        CalibrationMode::Rpress => {
            let c = read_columns(single()?, &["z_m"])?;
            json!({ "r_press": estimate_pressure_variance(&c[0], rate).context("calibrate stage failed")? })
        }
        CalibrationMode::Q => {
            let cfg = pipeline_config(config)?;
            let logs: Vec<FlightLog> = inputs
                .iter()
                .map(|p| FlightLog::load(p).with_context(|| format!("load stage failed: {}", p.display())))
                .collect::<Result<_>>()?;
            let result = tune_on_logs(&logs, &cfg, &TuneSpec::default())?;
            json!({
                "q_theta": result.q[0],
                "q_vx": result.q[1],
                "q_z": result.q[2],
                "objective": result.objective,
                "iterations": result.trace.len(),
            })
        }
    };
    print_json(&value)
}

fn budget(mode: BudgetMode, width: u64, height: u64) -> Result<()> {
    let mults = lk_mult_count(width, height, flow_mode(mode), false).context("budget stage failed")?;
    let dense = lk_mult_count(width, height, FlowMode::Dense, false).context("budget stage failed")?;
    let mut value = json!({
        "mode": match mode { BudgetMode::Dense => "dense", BudgetMode::Patches => "patches" },
        "width": width,
        "height": height,
        "lk_multiplications": mults,
        "reduction_vs_dense_percent": 100.0 * (dense as f64 - mults as f64) / dense as f64,
    });
    if let BudgetMode::Patches = mode {
        let model = PowerModel::default();
        let tasks = firmware_tasks();
        let cycles = cycles_per_update(&tasks, &model)?;
        eprint!("{}", hoverest::budget::format_table(&tasks, &model)?);
        value["cycles_per_update"] = json!(cycles);
        value["mhz"] = json!(model.mhz(cycles));
        value["power_mw"] = json!(estimate_power(cycles, &model));
    }
    print_json(&value)
}

fn rmse_files(est: &Path, truth: &Path, start: f64, end: Option<f64>) -> Result<()> {
    let e = read_columns(est, &["t", "theta_hat", "vx_hat", "z_hat"])?;
    let q = read_columns(truth, &["t", "theta", "vx", "z"])?;
    if e[0].len() != q[0].len() || e[0].iter().zip(&q[0]).any(|(a, b)| (a - b).abs() > 1e-6) {
        bail!("align stage failed: estimate and truth timestamps differ; resample first");
    }
    let states = |c: &[Vec<f64>]| -> Vec<StateVec> { (0..c[0].len()).map(|k| StateVec::new(c[1][k], c[2][k], c[3][k])).collect() };
    let end = end
        .or_else(|| landing_time(&q[0], &q[3], LANDING_ARM_HEIGHT, LANDING_HEIGHT))
        .unwrap_or(f64::INFINITY);
    let r = rmse(&e[0], &states(&e), &states(&q), start, end).context("rmse stage failed")?;
    print_json(&serde_json::to_value(r)?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { config, seed, trials, out_dir, flow_source, save_frames } => {
            simulate(config.as_deref(), seed, trials, &out_dir, flow_source, save_frames)
        }
        Command::Replay { log, config, out } => replay_log(&log, config.as_deref(), out.as_deref()),
        Command::Flow { frames_dir, skip, mode } => flow(&frames_dir, skip, mode),
        Command::Calibrate { mode, input, rate, config } => calibrate(mode, &input, rate, config.as_deref()),
        Command::Budget { mode, width, height } => budget(mode, width, height),
        Command::Rmse { est, truth, start, end } => rmse_files(&est, &truth, start, end),
    }
}

/// Error chain joined with `: `, skipping causes already quoted by their parent.
fn describe(e: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !msg.ends_with(&text) {
            if !msg.is_empty() {
                msg.push_str(": ");
            }
            msg.push_str(&text);
        }
    }
    msg
}

fn is_broken_pipe(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        let io = c.downcast_ref::<io::Error>().or(match c.downcast_ref::<hoverest::Error>() {
            Some(hoverest::Error::Io(io)) => Some(io),
            _ => None,
        });
        io.is_some_and(|io| io.kind() == io::ErrorKind::BrokenPipe)
    })
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if is_broken_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::FAILURE
        }
    }
}
