//! Request streams: Poisson arrivals, dataset-shaped prompt/output lengths,
//! and a CSV trace format for replaying a fixed set of requests.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::Request;

pub const MAX_INPUT_LEN: u32 = 131_072;
pub const MAX_OUTPUT_LEN: u32 = 8_192;

pub const TRACE_HEADER: [&str; 4] = ["id", "arrival_s", "input_len", "output_len"];

const ARRIVAL_STREAM: u64 = 1;
const LENGTH_STREAM: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum LengthDistribution {
    Fixed {
        input: u32,
        output: u32,
    },
    /// Two-parameter lognormal per axis, fitted to the given mean and std.
    LogNormal {
        in_mean: f64,
        in_std: f64,
        out_mean: f64,
        out_std: f64,
    },
    /// Uniform resampling (with replacement) of observed (input, output) pairs.
    Empirical {
        pairs: Vec<(u32, u32)>,
    },
}

impl LengthDistribution {
    pub fn validate(self) -> Result<Self> {
        match &self {
            LengthDistribution::Fixed { input, output } => {
                if *input < 1 || *output < 1 {
                    return Err(Error::invalid("lengths", "fixed lengths must be >= 1"));
                }
            }
            LengthDistribution::LogNormal {
                in_mean,
                in_std,
                out_mean,
                out_std,
            } => {
                for (name, v) in [
                    ("in_mean", in_mean),
                    ("in_std", in_std),
                    ("out_mean", out_mean),
                    ("out_std", out_std),
                ] {
                    if !(v.is_finite() && *v > 0.0) {
                        return Err(Error::invalid(format!("lengths.{name}"), "must be > 0"));
                    }
                }
            }
            LengthDistribution::Empirical { pairs } => {
                if pairs.is_empty() {
                    return Err(Error::invalid("lengths.pairs", "empirical trace is empty"));
                }
                if pairs.iter().any(|&(i, o)| i < 1 || o < 1) {
                    return Err(Error::invalid("lengths.pairs", "lengths must be >= 1"));
                }
            }
        }
        Ok(self)
    }
}

/// Lognormal (mu, sigma) whose mean and standard deviation equal the targets.
pub fn lognormal_params(mean: f64, std: f64) -> (f64, f64) {
    let sigma2 = (1.0 + (std / mean).powi(2)).ln();
    (mean.ln() - sigma2 / 2.0, sigma2.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadConfig {
    /// Exogenous arrivals per second.
    pub request_rate: f64,
    #[serde(default)]
    pub duration_s: Option<f64>,
    #[serde(default)]
    pub num_requests: Option<usize>,
    pub lengths: LengthDistribution,
    /// Falls back to the run seed when unset.
    #[serde(default)]
    pub seed: Option<u64>,
}

impl WorkloadConfig {
    pub fn validate(self) -> Result<Self> {
        if !(self.request_rate.is_finite() && self.request_rate > 0.0) {
            return Err(Error::invalid("workload.request_rate", "must be > 0"));
        }
        match (self.duration_s, self.num_requests) {
            (Some(d), None) if d.is_finite() && d > 0.0 => {}
            (Some(_), None) => return Err(Error::invalid("workload.duration_s", "must be > 0")),
            (None, Some(_)) => {}
            _ => {
                return Err(Error::invalid(
                    "workload",
                    "exactly one of duration_s / num_requests must be set",
                ))
            }
        }
        let lengths = self.lengths.validate()?;
        Ok(WorkloadConfig { lengths, ..self })
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Poisson arrival timestamps: i.i.d. exponential gaps with mean `1 / rate`,
/// starting from t = 0.
pub fn generate_arrivals(cfg: &WorkloadConfig) -> Vec<f64> {
    let mut rng = rng_for(cfg.seed(), ARRIVAL_STREAM);
    let gaps = Exp::new(cfg.request_rate).expect("request_rate validated > 0");
    let mut t = 0.0;
    let mut out = Vec::new();
    loop {
        t += gaps.sample(&mut rng);
        match (cfg.num_requests, cfg.duration_s) {
            (Some(n), _) if out.len() >= n => break,
            (None, Some(d)) if t > d => break,
            _ => out.push(t),
        }
    }
    out
}

pub fn sample_lengths(dist: &LengthDistribution, n: usize, seed: u64) -> Vec<(u32, u32)> {
    let mut rng = rng_for(seed, LENGTH_STREAM);
    match dist {
        LengthDistribution::Fixed { input, output } => vec![(*input, *output); n],
        LengthDistribution::LogNormal {
            in_mean,
            in_std,
            out_mean,
            out_std,
        } => {
            let (mu_in, sigma_in) = lognormal_params(*in_mean, *in_std);
            let (mu_out, sigma_out) = lognormal_params(*out_mean, *out_std);
            let input = LogNormal::new(mu_in, sigma_in).expect("validated lognormal");
            let output = LogNormal::new(mu_out, sigma_out).expect("validated lognormal");
            (0..n)
                .map(|_| {
                    let i = to_len(input.sample(&mut rng), MAX_INPUT_LEN);
                    let o = to_len(output.sample(&mut rng), MAX_OUTPUT_LEN);
                    (i, o)
                })
                .collect()
        }
        LengthDistribution::Empirical { pairs } => (0..n)
            .map(|_| pairs[rng.random_range(0..pairs.len())])
            .collect(),
    }
}

fn to_len(x: f64, max: u32) -> u32 {
    x.round().clamp(1.0, f64::from(max)) as u32
}

/// Arrivals and lengths combined into a request stream with ids 0..n.
pub fn generate_requests(cfg: &WorkloadConfig) -> Vec<Request> {
    let arrivals = generate_arrivals(cfg);
    let lengths = sample_lengths(&cfg.lengths, arrivals.len(), cfg.seed());
    arrivals
        .into_iter()
        .zip(lengths)
        .enumerate()
        .map(|(i, (t, (input, output)))| Request::new(i as u64, t, input, output))
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct TraceRow {
    id: u64,
    arrival_s: f64,
    input_len: u32,
    output_len: u32,
}

pub fn export_trace(requests: &[Request], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let wrap = |e: csv::Error| Error::Config {
        path: path.into(),
        reason: e.to_string(),
    };
    w.write_record(TRACE_HEADER).map_err(wrap)?;
    for r in requests {
        w.write_record(&[
            r.id.0.to_string(),
            r.arrival_s.to_string(),
            r.input_len.to_string(),
            r.output_len.to_string(),
        ])
        .map_err(wrap)?;
    }
    w.into_inner()
        .map_err(|e| Error::io(path, e.into_error()))?
        .flush()
        .map_err(|e| Error::io(path, e))
}

pub fn load_trace(path: impl AsRef<Path>) -> Result<Vec<Request>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(file);
    let parse_err = |line: u64, reason: String| Error::Parse {
        path: path.into(),
        line,
        reason,
    };
    let headers = rdr
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    if headers.is_empty() {
        return Ok(Vec::new());
    }
    if headers.iter().ne(TRACE_HEADER) {
        return Err(parse_err(
            1,
            format!("expected header `{}`", TRACE_HEADER.join(",")),
        ));
    }
    let mut out = Vec::new();
    let mut record = csv::StringRecord::new();
    loop {
        match rdr.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line());
                return Err(parse_err(line, e.to_string()));
            }
        }
        let line = record.position().map_or(0, |p| p.line());
        let row: TraceRow = record
            .deserialize(Some(&headers))
            .map_err(|e| parse_err(line, e.to_string()))?;
        if row.input_len < 1 || row.output_len < 1 {
            return Err(parse_err(line, "lengths must be >= 1".into()));
        }
        if !(row.arrival_s.is_finite() && row.arrival_s >= 0.0) {
            return Err(parse_err(line, "arrival_s must be finite and >= 0".into()));
        }
        out.push(Request::new(
            row.id,
            row.arrival_s,
            row.input_len,
            row.output_len,
        ));
    }
    Ok(out)
}
