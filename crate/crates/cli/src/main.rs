use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use moesim_core::config::load_spec;
use moesim_core::coverage::{calibrate_skew, CoverageModel, CoverageTable};
use moesim_core::engine::write_events;
use moesim_core::experiment::{
    chunk_bench, coverage_rows, rows_csv, simulate, sweep, sweep_csv, SweepKey,
};
use moesim_core::{Error, HardwareSpec, ModelSpec, RunConfig, RunSummary};

/// Exit status when a run hits its `max_sim_s` horizon.
const EXIT_HORIZON: u8 = 3;

#[derive(Parser)]
#[command(
    name = "moesim",
    version,
    about = "Simulate chunked, layered and hybrid prefill on MoE models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Run one simulation and write its summary.
    Run {
        /// Run config (TOML, or JSON with a .json extension).
        config: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Summary output path; defaults to `output.summary`, else stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write per-iteration records as CSV to this path.
        #[arg(long, value_name = "PATH")]
        emit_events: Option<PathBuf>,
        /// Summary format.
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
    },
    /// Run one simulation per value of a parameter.
    Sweep {
        config: PathBuf,
        /// Parameter to vary: request_rate, chunk_size, group_token_target or policy.
        #[arg(long)]
        vary: String,
        /// Comma-separated values, run in this order.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        values: Vec<String>,
        /// Base seed; row i runs with seed + i.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
    /// Expert coverage by batch size: closed form, sampled, and measured table.
    Coverage {
        /// Model spec file.
        #[arg(long)]
        model: PathBuf,
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "1,2,4,8,16,32,64,128,256,512"
        )]
        batch_sizes: Vec<u64>,
        /// Zipf exponent of expert popularity for the sampled column.
        #[arg(long, default_value_t = 0.0)]
        skew: f64,
        /// Fit the skew to the measured coverage at this batch size first.
        #[arg(long, value_name = "BATCH")]
        calibrate: Option<u64>,
        #[arg(long, default_value_t = 2000)]
        trials: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
    /// Prefill cost of one prompt at several chunk sizes.
    ChunkBench {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        hw: PathBuf,
        #[arg(long, default_value_t = 8192)]
        input_len: u64,
        #[arg(long, value_delimiter = ',', default_value = "512,1024,2048,4096,8192")]
        chunk_sizes: Vec<u64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
    /// Parse and check a run config without simulating.
    Validate { config: PathBuf },
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn to_json<T: serde::Serialize>(rows: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(rows)? + "\n")
}

fn load_config(path: &Path) -> Result<RunConfig> {
    Ok(RunConfig::load(path)?)
}

fn cmd_run(
    config: &Path,
    seed: Option<u64>,
    out: Option<PathBuf>,
    events: Option<PathBuf>,
    format: Format,
) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    info!(
        "running {} with {} policy",
        config.display(),
        cfg.scheduler.policy
    );
    let result = simulate(&cfg)?;
    let s = &result.summary;

    let out = out.or(cfg.output.summary.clone());
    let text = match format {
        Format::Json => s.to_json() + "\n",
        Format::Csv => format!("{}\n{}\n", RunSummary::csv_header(), s.csv_row()),
    };
    emit(out.as_deref(), &text)?;

    if let Some(p) = events.or(cfg.output.events.clone()) {
        let f = fs::File::create(&p).with_context(|| format!("creating {}", p.display()))?;
        write_events(&result.output.iterations, std::io::BufWriter::new(f))?;
    }

    eprintln!(
        "{} requests | TTFT mean {:.3} s p99 {:.3} s | TBT mean {:.1} ms p99 {:.1} ms | SLO {:.1}% | {:.2} mJ/tok | expert load {:.1} GB",
        s.num_requests,
        s.ttft_mean_s,
        s.ttft_p99_s,
        s.tbt_mean_s * 1e3,
        s.tbt_p99_s * 1e3,
        s.slo_attainment_fraction * 100.0,
        s.energy_per_token_j * 1e3,
        s.total_expert_load_bytes / 1e9,
    );
    Ok(())
}

fn cmd_sweep(
    config: &Path,
    vary: &str,
    values: &[String],
    seed: Option<u64>,
    out: Option<PathBuf>,
    format: Format,
) -> Result<()> {
    let key: SweepKey = vary.parse()?;
    if values.is_empty() {
        bail!("--values needs at least one value");
    }
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let rows = sweep(&cfg, key, values)?;
    let text = match format {
        Format::Csv => sweep_csv(key, &rows),
        Format::Json => to_json(&rows)?,
    };
    emit(out.as_deref(), &text)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MOESIM_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            seed,
            out,
            emit_events,
            format,
        } => cmd_run(&config, seed, out, emit_events, format),
        Command::Sweep {
            config,
            vary,
            values,
            seed,
            out,
            format,
        } => cmd_sweep(&config, &vary, &values, seed, out, format),
        Command::Coverage {
            model,
            batch_sizes,
            skew,
            calibrate,
            trials,
            seed,
            out,
            format,
        } => (|| {
            let model: ModelSpec = load_spec::<ModelSpec>(&model)?.validate()?;
            let skew = match calibrate {
                Some(b) => {
                    let target = CoverageTable::measured().coverage(b);
                    let s =
                        calibrate_skew(target, b, model.top_k, model.num_experts, trials, seed)?;
                    eprintln!("calibrated skew {s:.4} to coverage {target} at batch {b}");
                    s
                }
                None => skew,
            };
            let rows = coverage_rows(&model, &batch_sizes, skew, trials, seed)?;
            let text = match format {
                Format::Csv => rows_csv(&rows)?,
                Format::Json => to_json(&rows)?,
            };
            emit(out.as_deref(), &text)
        })(),
        Command::ChunkBench {
            model,
            hw,
            input_len,
            chunk_sizes,
            seed,
            out,
            format,
        } => (|| {
            let model: ModelSpec = load_spec(&model)?;
            let hw: HardwareSpec = load_spec(&hw)?;
            let rows = chunk_bench(
                &model,
                &hw,
                &CoverageModel::default(),
                input_len,
                &chunk_sizes,
                seed,
            )?;
            let text = match format {
                Format::Csv => rows_csv(&rows)?,
                Format::Json => to_json(&rows)?,
            };
            emit(out.as_deref(), &text)
        })(),
        Command::Validate { config } => load_config(&config).map(|cfg| {
            println!(
                "{}: ok ({} on {}, {} policy)",
                config.display(),
                cfg.model.name,
                cfg.hardware.name,
                cfg.scheduler.policy
            );
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let horizon = e
                .downcast_ref::<Error>()
                .is_some_and(|e| matches!(e, Error::Horizon { .. }));
            ExitCode::from(if horizon { EXIT_HORIZON } else { 1 })
        }
    }
}
