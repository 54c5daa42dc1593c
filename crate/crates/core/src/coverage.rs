//! Expert activation: how many of a layer's experts a batch of routed tokens
//! touches, and how many tokens each activated expert then processes.

use std::fs::File;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Measured coverage of Qwen3-30B-A3B on ShareGPT decode batches. The last
/// entry is reported as ">= 98%".
pub const MEASURED_COVERAGE: [(u64, f64); 10] = [
    (1, 0.0625),
    (2, 0.117),
    (4, 0.213),
    (8, 0.290),
    (16, 0.445),
    (32, 0.547),
    (64, 0.694),
    (128, 0.863),
    (256, 0.934),
    (512, 0.98),
];

/// Coverage under independent, uniform top-k routing: `1 - (1 - k/E)^B`.
pub fn expected_coverage_uniform(batch: u64, top_k: u32, num_experts: u32) -> Result<f64> {
    check_routing(top_k, num_experts)?;
    let miss = 1.0 - f64::from(top_k) / f64::from(num_experts);
    Ok(1.0 - miss.powf(batch as f64))
}

/// Mean tokens routed to each expert if routing were perfectly balanced.
pub fn tokens_per_expert(batch: u64, top_k: u32, num_experts: u32) -> f64 {
    batch as f64 * f64::from(top_k) / f64::from(num_experts)
}

fn check_routing(top_k: u32, num_experts: u32) -> Result<()> {
    if top_k < 1 || top_k > num_experts {
        return Err(Error::invalid(
            "top_k",
            format!("top_k out of range: {top_k} not in [1, {num_experts}]"),
        ));
    }
    Ok(())
}

/// Batch-size -> coverage curve, interpolated log-linearly in batch size.
#[derive(Debug, Clone, PartialEq)]
pub struct CoverageTable {
    points: Vec<(u64, f64)>,
}

impl CoverageTable {
    pub fn new(points: Vec<(u64, f64)>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("coverage.table", "table is empty"));
        }
        if points[0].0 < 1 {
            return Err(Error::invalid("coverage.table", "batch sizes must be >= 1"));
        }
        if points.iter().any(|&(_, c)| !(0.0..=1.0).contains(&c)) {
            return Err(Error::invalid(
                "coverage.table",
                "fractions must lie in [0, 1]",
            ));
        }
        for w in points.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::invalid(
                    "coverage.table",
                    "batch sizes must be strictly increasing",
                ));
            }
            if w[1].1 < w[0].1 {
                return Err(Error::invalid(
                    "coverage.table",
                    "coverage must be nondecreasing",
                ));
            }
        }
        Ok(CoverageTable { points })
    }

    pub fn measured() -> Self {
        CoverageTable {
            points: MEASURED_COVERAGE.to_vec(),
        }
    }

    pub fn points(&self) -> &[(u64, f64)] {
        &self.points
    }

    /// Exact at tabulated sizes, log-linear between them, clamped outside.
    /// Zero routed tokens activate nothing.
    pub fn coverage(&self, batch: u64) -> f64 {
        if batch == 0 {
            return 0.0;
        }
        let pts = &self.points;
        let upper = pts.partition_point(|&(b, _)| b < batch);
        if upper == pts.len() {
            return pts[pts.len() - 1].1;
        }
        let (b1, c1) = pts[upper];
        if b1 == batch || upper == 0 {
            return c1;
        }
        let (b0, c0) = pts[upper - 1];
        let t = ((batch as f64).ln() - (b0 as f64).ln()) / ((b1 as f64).ln() - (b0 as f64).ln());
        c0 + (c1 - c0) * t
    }

    /// Reads `batch_size,coverage_fraction` rows.
    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            batch_size: u64,
            coverage_fraction: f64,
        }
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(file);
        let mut points = Vec::new();
        for row in rdr.deserialize::<Row>() {
            let row = row.map_err(|e| Error::Parse {
                path: path.into(),
                line: e.position().map_or(0, |p| p.line()),
                reason: e.to_string(),
            })?;
            points.push((row.batch_size, row.coverage_fraction));
        }
        CoverageTable::new(points).map_err(|e| Error::Config {
            path: path.into(),
            reason: e.to_string(),
        })
    }
}

/// Free-function form of [`CoverageTable::coverage`].
pub fn coverage_from_table(batch: u64, table: &CoverageTable) -> f64 {
    table.coverage(batch)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActivationResult {
    pub coverage_fraction: f64,
    pub experts_activated: f64,
    pub tokens_per_active_expert: f64,
}

impl ActivationResult {
    fn from_union(union: usize, batch: u64, top_k: u32, num_experts: u32) -> Self {
        if union == 0 {
            return ActivationResult {
                coverage_fraction: 0.0,
                experts_activated: 0.0,
                tokens_per_active_expert: 0.0,
            };
        }
        ActivationResult {
            coverage_fraction: union as f64 / f64::from(num_experts),
            experts_activated: union as f64,
            tokens_per_active_expert: (batch * u64::from(top_k)) as f64 / union as f64,
        }
    }
}

/// Routes `batch` tokens to `top_k` distinct experts each, with expert
/// popularity proportional to `(rank + 1)^-skew` (skew 0 is uniform).
pub fn sample_activation<R: Rng + ?Sized>(
    batch: u64,
    top_k: u32,
    num_experts: u32,
    skew: f64,
    rng: &mut R,
) -> ActivationResult {
    let mut sampler = ActivationSampler::new(top_k, num_experts, skew);
    sampler.sample(batch, rng)
}

/// Reusable scratch space for repeated activation draws.
#[derive(Debug, Clone)]
pub struct ActivationSampler {
    top_k: usize,
    num_experts: usize,
    weights: Option<Vec<f64>>,
    hit: Vec<bool>,
    keys: Vec<(f64, usize)>,
}

impl ActivationSampler {
    pub fn new(top_k: u32, num_experts: u32, skew: f64) -> Self {
        assert!(top_k >= 1 && top_k <= num_experts, "top_k out of range");
        assert!(skew >= 0.0, "skew must be >= 0");
        let weights = (skew > 0.0).then(|| {
            (0..num_experts)
                .map(|r| (f64::from(r) + 1.0).powf(-skew))
                .collect()
        });
        ActivationSampler {
            top_k: top_k as usize,
            num_experts: num_experts as usize,
            weights,
            hit: vec![false; num_experts as usize],
            keys: Vec::with_capacity(num_experts as usize),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&mut self, batch: u64, rng: &mut R) -> ActivationResult {
        self.hit.fill(false);
        let mut union = 0;
        for _ in 0..batch {
            if union == self.num_experts {
                break;
            }
            match &self.weights {
                None => {
                    for e in index::sample(rng, self.num_experts, self.top_k) {
                        if !self.hit[e] {
                            self.hit[e] = true;
                            union += 1;
                        }
                    }
                }
                Some(weights) => {
                    // Weighted sampling without replacement: the k largest
                    // ln(u) / w keys (Efraimidis-Spirakis).
                    self.keys.clear();
                    self.keys.extend(weights.iter().enumerate().map(|(e, &w)| {
                        let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
                        (u.ln() / w, e)
                    }));
                    if self.top_k < self.num_experts {
                        self.keys
                            .select_nth_unstable_by(self.top_k - 1, |a, b| b.0.total_cmp(&a.0));
                    }
                    for &(_, e) in &self.keys[..self.top_k] {
                        if !self.hit[e] {
                            self.hit[e] = true;
                            union += 1;
                        }
                    }
                }
            }
        }
        ActivationResult::from_union(union, batch, self.top_k as u32, self.num_experts as u32)
    }

    /// Mean coverage over `trials` independent batches.
    pub fn mean_coverage<R: Rng + ?Sized>(&mut self, batch: u64, trials: u64, rng: &mut R) -> f64 {
        let total: f64 = (0..trials)
            .map(|_| self.sample(batch, rng).coverage_fraction)
            .sum();
        total / trials as f64
    }
}

/// Finds the skew exponent whose mean sampled coverage at `batch` equals
/// `target`, by bisection with a fixed seed per evaluation.
pub fn calibrate_skew(
    target: f64,
    batch: u64,
    top_k: u32,
    num_experts: u32,
    trials: u64,
    seed: u64,
) -> Result<f64> {
    check_routing(top_k, num_experts)?;
    let eval = |skew: f64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ActivationSampler::new(top_k, num_experts, skew).mean_coverage(batch, trials, &mut rng)
    };
    let (mut lo, mut hi) = (0.0_f64, 8.0_f64);
    if target > eval(lo) || target < eval(hi) {
        return Err(Error::invalid(
            "coverage.target",
            format!("coverage {target} at batch {batch} is not reachable by skew in [0, 8]"),
        ));
    }
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if eval(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// How the engine turns routed-token counts into expert coverage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum CoverageModel {
    Uniform,
    /// Measured table; `points` defaults to the built-in Qwen/ShareGPT curve.
    Table {
        #[serde(default)]
        points: Option<Vec<(u64, f64)>>,
    },
    Sampled {
        skew: f64,
    },
}

impl Default for CoverageModel {
    fn default() -> Self {
        CoverageModel::Table { points: None }
    }
}

impl CoverageModel {
    pub fn validate(self) -> Result<Self> {
        match &self {
            CoverageModel::Table { points: Some(p) } => {
                CoverageTable::new(p.clone())?;
            }
            CoverageModel::Sampled { skew } if !(skew.is_finite() && *skew >= 0.0) => {
                return Err(Error::invalid("coverage.skew", "must be finite and >= 0"));
            }
            _ => {}
        }
        Ok(self)
    }
}

/// A [`CoverageModel`] bound to a concrete model's routing shape.
#[derive(Debug, Clone)]
pub enum CoverageEstimator {
    Uniform { top_k: u32, num_experts: u32 },
    Table(CoverageTable),
    Sampled(ActivationSampler),
}

impl CoverageEstimator {
    pub fn new(model: &CoverageModel, top_k: u32, num_experts: u32) -> Result<Self> {
        check_routing(top_k, num_experts)?;
        Ok(match model {
            CoverageModel::Uniform => CoverageEstimator::Uniform { top_k, num_experts },
            CoverageModel::Table { points: None } => {
                CoverageEstimator::Table(CoverageTable::measured())
            }
            CoverageModel::Table { points: Some(p) } => {
                CoverageEstimator::Table(CoverageTable::new(p.clone())?)
            }
            CoverageModel::Sampled { skew } => {
                CoverageEstimator::Sampled(ActivationSampler::new(top_k, num_experts, *skew))
            }
        })
    }

    pub fn coverage<R: Rng + ?Sized>(&mut self, batch: u64, rng: &mut R) -> f64 {
        match self {
            CoverageEstimator::Uniform { top_k, num_experts } => {
                expected_coverage_uniform(batch, *top_k, *num_experts).expect("routing checked")
            }
            CoverageEstimator::Table(t) => t.coverage(batch),
            CoverageEstimator::Sampled(s) => s.sample(batch, rng).coverage_fraction,
        }
    }
}
