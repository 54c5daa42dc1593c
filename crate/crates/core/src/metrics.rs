//! Latency, SLO, load and energy statistics over a finished run.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::engine::{IterationRecord, RunOutput};
use crate::error::{Error, Result};
use crate::types::{Request, SloSpec};

/// Arrival to first token, queueing included.
pub fn ttft(r: &Request) -> Option<f64> {
    r.first_token_s.map(|t| t - r.arrival_s)
}

/// Gaps between consecutive tokens; the first gap starts at the first token.
pub fn tbt_samples(r: &Request) -> Vec<f64> {
    r.token_emit_times_s
        .windows(2)
        .map(|w| w[1] - w[0])
        .collect()
}

/// Nearest-rank percentile: `sorted[ceil(p/100 * n) - 1]`.
pub fn percentile(samples: &[f64], p: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("percentile of an empty sample"));
    }
    if !(p > 0.0 && p <= 100.0) {
        return Err(Error::invalid("p", "must be in (0, 100]"));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = (p / 100.0 * sorted.len() as f64).ceil() as usize;
    Ok(sorted[rank.clamp(1, sorted.len()) - 1])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Attainment {
    pub overall: f64,
    pub ttft: f64,
    pub tbt: f64,
}

fn meets_ttft(r: &Request, slo: &SloSpec) -> bool {
    ttft(r).is_some_and(|t| t <= slo.ttft_s)
}

fn meets_tbt(r: &Request, slo: &SloSpec) -> bool {
    tbt_samples(r).iter().all(|&g| g <= slo.tbt_s)
}

/// Fractions of requests meeting TTFT, every TBT, and both.
pub fn slo_attainment(requests: &[Request], slo: &SloSpec) -> Attainment {
    if requests.is_empty() {
        warn!("SLO attainment over an empty request set is reported as 1.0");
        return Attainment {
            overall: 1.0,
            ttft: 1.0,
            tbt: 1.0,
        };
    }
    let (mut both, mut t1, mut t2) = (0usize, 0usize, 0usize);
    for r in requests {
        let a = meets_ttft(r, slo);
        let b = meets_tbt(r, slo);
        t1 += usize::from(a);
        t2 += usize::from(b);
        both += usize::from(a && b);
    }
    let n = requests.len() as f64;
    Attainment {
        overall: both as f64 / n,
        ttft: t1 as f64 / n,
        tbt: t2 as f64 / n,
    }
}

/// Prompt plus generated tokens.
pub fn total_tokens(requests: &[Request]) -> u64 {
    requests
        .iter()
        .map(|r| u64::from(r.input_len) + u64::from(r.tokens_emitted()))
        .sum()
}

pub fn energy_per_token(total_energy_j: f64, requests: &[Request]) -> Result<f64> {
    match total_tokens(requests) {
        0 => Err(Error::Empty("energy per token with zero tokens")),
        n => Ok(total_energy_j / n as f64),
    }
}

pub fn expert_load_total(records: &[IterationRecord]) -> f64 {
    records.iter().map(|r| r.expert_load_bytes).sum()
}

/// Iteration-weighted mean of the decode batch size.
pub fn mean_decode_batch(records: &[IterationRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    records
        .iter()
        .map(|r| f64::from(r.decode_batch_size))
        .sum::<f64>()
        / records.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimelinePoint {
    pub t_s: f64,
    pub cumulative_tokens: u64,
}

/// Cumulative emitted tokens at the end of each `bucket_s` bucket, up to the
/// last emission.
pub fn token_timeline(requests: &[Request], bucket_s: f64) -> Result<Vec<TimelinePoint>> {
    if !(bucket_s > 0.0 && bucket_s.is_finite()) {
        return Err(Error::invalid("bucket_s", "must be > 0"));
    }
    let mut times: Vec<f64> = requests
        .iter()
        .flat_map(|r| r.token_emit_times_s.iter().copied())
        .collect();
    times.sort_by(f64::total_cmp);
    let end = times.last().copied().unwrap_or(0.0);
    let buckets = ((end / bucket_s).ceil() as usize).max(1);
    let mut out = Vec::with_capacity(buckets);
    let mut seen = 0;
    for i in 1..=buckets {
        let t = i as f64 * bucket_s;
        while seen < times.len() && (times[seen] <= t || i == buckets) {
            seen += 1;
        }
        out.push(TimelinePoint {
            t_s: t,
            cumulative_tokens: seen as u64,
        });
    }
    Ok(out)
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = xs
        .into_iter()
        .fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Headline numbers of one run. Field names are a stable output contract.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub num_requests: usize,
    pub ttft_mean_s: f64,
    pub ttft_p99_s: f64,
    pub tbt_mean_s: f64,
    pub tbt_p99_s: f64,
    pub slo_attainment_fraction: f64,
    pub ttft_attainment_fraction: f64,
    pub tbt_attainment_fraction: f64,
    pub total_expert_load_bytes: f64,
    pub expert_load_per_request_bytes: f64,
    pub energy_per_token_j: f64,
    pub total_energy_j: f64,
    pub mean_decode_batch: f64,
    pub e2e_latency_mean_s: f64,
    pub makespan_s: f64,
}

pub const SUMMARY_FIELDS: [&str; 15] = [
    "num_requests",
    "ttft_mean_s",
    "ttft_p99_s",
    "tbt_mean_s",
    "tbt_p99_s",
    "slo_attainment_fraction",
    "ttft_attainment_fraction",
    "tbt_attainment_fraction",
    "total_expert_load_bytes",
    "expert_load_per_request_bytes",
    "energy_per_token_j",
    "total_energy_j",
    "mean_decode_batch",
    "e2e_latency_mean_s",
    "makespan_s",
];

impl RunSummary {
    /// Empty runs report zero latencies and zero energy per token.
    pub fn from_output(out: &RunOutput, slo: &SloSpec) -> Self {
        let reqs = &out.requests;
        let ttfts: Vec<f64> = reqs.iter().filter_map(ttft).collect();
        let tbts: Vec<f64> = reqs.iter().flat_map(tbt_samples).collect();
        let att = slo_attainment(reqs, slo);
        let total_load = expert_load_total(&out.iterations);
        let total_energy_j = out.total_energy_j();
        RunSummary {
            num_requests: reqs.len(),
            ttft_mean_s: mean(ttfts.iter().copied()),
            ttft_p99_s: percentile(&ttfts, 99.0).unwrap_or(0.0),
            tbt_mean_s: mean(tbts.iter().copied()),
            tbt_p99_s: percentile(&tbts, 99.0).unwrap_or(0.0),
            slo_attainment_fraction: att.overall,
            ttft_attainment_fraction: att.ttft,
            tbt_attainment_fraction: att.tbt,
            total_expert_load_bytes: total_load,
            expert_load_per_request_bytes: if reqs.is_empty() {
                0.0
            } else {
                total_load / reqs.len() as f64
            },
            energy_per_token_j: energy_per_token(total_energy_j, reqs).unwrap_or(0.0),
            total_energy_j,
            mean_decode_batch: mean_decode_batch(&out.iterations),
            e2e_latency_mean_s: mean(
                reqs.iter()
                    .filter_map(|r| r.token_emit_times_s.last().map(|t| t - r.arrival_s)),
            ),
            makespan_s: out.makespan_s,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary is plain data")
    }

    pub fn csv_header() -> String {
        SUMMARY_FIELDS.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(Vec::new());
        w.serialize(self).expect("summary is plain data");
        let bytes = w.into_inner().expect("in-memory writer");
        String::from_utf8(bytes)
            .expect("csv is utf-8")
            .trim_end()
            .to_string()
    }
}
