//! Whole-run drivers: single runs, parameter sweeps, and the coverage and
//! chunk-size microbenchmarks.

use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{RunConfig, WorkloadSource};
use crate::cost::{
    dense_cost, lm_head_cost, moe_cost, prefill_attention_cost, IterationCost, KernelKind,
};
use crate::coverage::{
    expected_coverage_uniform, ActivationSampler, CoverageEstimator, CoverageModel, CoverageTable,
};
use crate::engine::{run, RunOptions, RunOutput};
use crate::error::{Error, Result};
use crate::metrics::{RunSummary, SUMMARY_FIELDS};
use crate::types::{HardwareSpec, ModelSpec, Policy};

#[derive(Debug, Clone)]
pub struct RunResult {
    pub output: RunOutput,
    pub summary: RunSummary,
}

pub fn simulate(cfg: &RunConfig) -> Result<RunResult> {
    let output = run(
        &cfg.model,
        &cfg.hardware,
        &cfg.scheduler,
        &cfg.coverage,
        cfg.requests()?,
        RunOptions {
            seed: cfg.seed,
            max_sim_s: cfg.max_sim_s,
        },
    )?;
    let summary = RunSummary::from_output(&output, &cfg.slo);
    Ok(RunResult { output, summary })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepKey {
    RequestRate,
    ChunkSize,
    GroupTokenTarget,
    Policy,
}

impl SweepKey {
    pub fn name(self) -> &'static str {
        match self {
            SweepKey::RequestRate => "request_rate",
            SweepKey::ChunkSize => "chunk_size",
            SweepKey::GroupTokenTarget => "group_token_target",
            SweepKey::Policy => "policy",
        }
    }
}

impl FromStr for SweepKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "request_rate" => Ok(SweepKey::RequestRate),
            "chunk_size" => Ok(SweepKey::ChunkSize),
            "group_token_target" => Ok(SweepKey::GroupTokenTarget),
            "policy" => Ok(SweepKey::Policy),
            other => Err(Error::invalid(
                "vary",
                format!("unknown key `{other}`; expected request_rate, chunk_size, group_token_target or policy"),
            )),
        }
    }
}

fn parse_value<T: FromStr>(key: SweepKey, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::invalid(key.name(), format!("cannot parse `{v}`")))
}

/// `cfg` with one parameter replaced by `value`.
pub fn apply(cfg: &RunConfig, key: SweepKey, value: &str) -> Result<RunConfig> {
    let mut c = cfg.clone();
    match key {
        SweepKey::RequestRate => match &mut c.workload {
            WorkloadSource::Generated(w) => w.request_rate = parse_value(key, value)?,
            WorkloadSource::Trace { .. } => {
                return Err(Error::invalid(
                    "request_rate",
                    "cannot vary the rate of a recorded trace",
                ))
            }
        },
        SweepKey::ChunkSize => c.scheduler.chunk_size = parse_value(key, value)?,
        SweepKey::GroupTokenTarget => c.scheduler.group_token_target = parse_value(key, value)?,
        SweepKey::Policy => c.scheduler.policy = value.parse::<Policy>()?,
    }
    c.validate()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: String,
    pub seed: u64,
    pub summary: RunSummary,
}

/// One independent run per value, run in parallel; row `i` uses seed
/// `cfg.seed + i` and rows come back in input order.
pub fn sweep(cfg: &RunConfig, key: SweepKey, values: &[String]) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::invalid("values", "need at least one value to sweep"));
    }
    let configs = values
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let mut c = apply(cfg, key, v)?;
            c.seed = cfg.seed.wrapping_add(i as u64);
            Ok((v.clone(), c))
        })
        .collect::<Result<Vec<_>>>()?;
    configs
        .into_par_iter()
        .map(|(value, c)| {
            let summary = simulate(&c)?.summary;
            Ok(SweepRow {
                value,
                seed: c.seed,
                summary,
            })
        })
        .collect()
}

pub fn sweep_csv(key: SweepKey, rows: &[SweepRow]) -> String {
    let mut out = format!("{},seed,{}\n", key.name(), SUMMARY_FIELDS.join(","));
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.value, r.seed, r.summary.csv_row()));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CoverageRow {
    pub batch: u64,
    pub analytic: f64,
    pub sampled: f64,
    pub table: f64,
}

/// Coverage by decode batch size: closed-form uniform, Monte Carlo with
/// `skew`, and the measured table.
pub fn coverage_rows(
    model: &ModelSpec,
    batch_sizes: &[u64],
    skew: f64,
    trials: u64,
    seed: u64,
) -> Result<Vec<CoverageRow>> {
    let table = CoverageTable::measured();
    let mut sampler = ActivationSampler::new(model.top_k, model.num_experts, skew);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    batch_sizes
        .iter()
        .map(|&b| {
            Ok(CoverageRow {
                batch: b,
                analytic: expected_coverage_uniform(b, model.top_k, model.num_experts)?,
                sampled: sampler.mean_coverage(b, trials, &mut rng),
                table: table.coverage(b),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ChunkBenchRow {
    pub chunk_size: u64,
    pub chunks: u64,
    pub moe_bytes: f64,
    pub moe_time_s: f64,
    pub attention_time_s: f64,
    pub dense_time_s: f64,
    pub other_time_s: f64,
    pub total_time_s: f64,
}

/// Prefill of one `input_len` prompt cut into chunks, each chunk through the
/// full model; no decode traffic.
pub fn chunk_bench(
    model: &ModelSpec,
    hw: &HardwareSpec,
    coverage: &CoverageModel,
    input_len: u64,
    chunk_sizes: &[u64],
    seed: u64,
) -> Result<Vec<ChunkBenchRow>> {
    let model = model.clone().validate()?;
    let hw = hw.clone().validate()?;
    if input_len == 0 {
        return Err(Error::invalid("input_len", "must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    chunk_sizes
        .iter()
        .map(|&c| {
            if c == 0 {
                return Err(Error::invalid("chunk_size", "must be at least 1"));
            }
            let mut est = CoverageEstimator::new(coverage, model.top_k, model.num_experts)?;
            let mut row = ChunkBenchRow {
                chunk_size: c,
                chunks: input_len.div_ceil(c),
                moe_bytes: 0.0,
                moe_time_s: 0.0,
                attention_time_s: 0.0,
                dense_time_s: 0.0,
                other_time_s: 0.0,
                total_time_s: 0.0,
            };
            let mut start = 0;
            while start < input_len {
                let n = c.min(input_len - start);
                let cov = est.coverage(n, &mut rng);
                let mut kernels = vec![
                    moe_cost(&model, n, cov, model.num_layers),
                    dense_cost(&model, n, model.num_layers),
                    prefill_attention_cost(&model, n, start, model.num_layers),
                ];
                if start + n == input_len {
                    kernels.push(lm_head_cost(&model, 1));
                }
                let it = IterationCost::new(kernels, &hw);
                row.moe_bytes += it.expert_load_bytes;
                row.moe_time_s += it.time_in(KernelKind::MoeFfn, &hw);
                row.attention_time_s += it.time_in(KernelKind::AttentionPrefill, &hw);
                row.dense_time_s += it.time_in(KernelKind::DenseProj, &hw);
                row.other_time_s += it.time_in(KernelKind::Other, &hw);
                row.total_time_s += it.runtime_s;
                start += n;
            }
            Ok(row)
        })
        .collect()
}

/// Serializes rows as CSV with a header.
pub fn rows_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)
            .map_err(|e| Error::invalid("csv", e.to_string()))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::invalid("csv", e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}
