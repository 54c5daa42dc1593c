//! Iteration-level discrete-event loop.
//!
//! Time only advances at iteration boundaries: each iteration the engine asks
//! the scheduler for a plan, prices it with the cost model, moves the clock by
//! the roofline runtime and stamps every token produced with the new clock.
//! Requests arriving mid-iteration are admitted at its end; when nothing can
//! run the clock jumps to the next arrival and the device idles at static
//! power.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::cost::{
    decode_attention_cost, dense_cost, lm_head_cost, moe_cost, prefill_attention_cost,
    EnergyBreakdown, IterationCost, KernelCost,
};
use crate::coverage::{CoverageEstimator, CoverageModel};
use crate::error::{Error, Result};
use crate::scheduler::{BatchPlan, PrefillScheduler, Scheduler};
use crate::state::SimState;
use crate::types::{HardwareSpec, ModelSpec, Phase, Request, RequestId, SchedulerConfig};

/// Per-iteration ledger; one row of the event CSV.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationRecord {
    pub index: u64,
    pub start_s: f64,
    pub runtime_s: f64,
    pub energy_j: f64,
    pub energy_static_j: f64,
    pub energy_compute_j: f64,
    pub energy_memory_j: f64,
    pub expert_load_bytes: f64,
    pub total_hbm_bytes: f64,
    pub flops: f64,
    /// Flops attributable to decode tokens alone.
    pub decode_flops: f64,
    pub decode_batch_size: u32,
    pub prefill_tokens: u64,
    pub designated_group: Option<u32>,
    pub kv_used_bytes: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    /// Seeds the engine RNG (sampled coverage only).
    pub seed: u64,
    /// Abort once simulated time passes this many seconds.
    pub max_sim_s: f64,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            seed: 0,
            max_sim_s: 1e6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub iterations: Vec<IterationRecord>,
    /// Every request, finished, ordered by arrival.
    pub requests: Vec<Request>,
    /// Iterations plus idle time; components sum to [`RunOutput::total_energy_j`].
    pub energy: EnergyBreakdown,
    pub idle_s: f64,
    pub makespan_s: f64,
}

impl RunOutput {
    pub fn total_energy_j(&self) -> f64 {
        self.energy.total()
    }
}

pub struct Engine {
    model: ModelSpec,
    hw: HardwareSpec,
    scheduler: Scheduler,
    coverage: CoverageEstimator,
    rng: ChaCha8Rng,
    state: SimState,
    records: Vec<IterationRecord>,
    energy: EnergyBreakdown,
    idle_s: f64,
    max_sim_s: f64,
}

impl Engine {
    pub fn new(
        model: &ModelSpec,
        hw: &HardwareSpec,
        scheduler: &SchedulerConfig,
        coverage: &CoverageModel,
        requests: Vec<Request>,
        opts: RunOptions,
    ) -> Result<Self> {
        let model = model.clone().validate()?;
        let hw = hw.clone().validate()?;
        let scheduler_cfg = scheduler.validate()?;
        let coverage = CoverageEstimator::new(
            &coverage.clone().validate()?,
            model.top_k,
            model.num_experts,
        )?;
        if !(opts.max_sim_s.is_finite() && opts.max_sim_s > 0.0) {
            return Err(Error::invalid("max_sim_s", "must be > 0"));
        }
        let state = SimState::new(&model, hw.kv_capacity_bytes, requests)?;
        Ok(Engine {
            scheduler: Scheduler::new(&scheduler_cfg, model.num_layers),
            coverage,
            rng: ChaCha8Rng::seed_from_u64(opts.seed),
            state,
            records: Vec::new(),
            energy: EnergyBreakdown::default(),
            idle_s: 0.0,
            max_sim_s: opts.max_sim_s,
            model,
            hw,
        })
    }

    pub fn state(&self) -> &SimState {
        &self.state
    }

    pub fn records(&self) -> &[IterationRecord] {
        &self.records
    }

    /// Admits arrivals, then either plans and executes one iteration or idles
    /// until the next arrival. Returns `false` once every request finished.
    pub fn advance(&mut self) -> Result<bool> {
        self.state.admit_arrivals();
        if self.state.all_finished() {
            return Ok(false);
        }
        let plan = self.scheduler.plan(&self.state);
        if plan.is_empty() {
            let Some(next) = self.state.next_arrival_s() else {
                return Err(Error::PlanMismatch(format!(
                    "scheduler produced no work with {} requests unfinished and no arrivals left",
                    self.state.unfinished()
                )));
            };
            let gap = (next - self.state.clock_s).max(0.0);
            self.idle_s += gap;
            self.energy += EnergyBreakdown::idle(gap, &self.hw);
            self.state.clock_s = next;
        } else {
            self.step(&plan)?;
        }
        if self.state.clock_s > self.max_sim_s {
            return Err(Error::Horizon {
                limit_s: self.max_sim_s,
                clock_s: self.state.clock_s,
                unfinished: self.state.unfinished(),
            });
        }
        Ok(true)
    }

    pub fn run_to_completion(mut self) -> Result<RunOutput> {
        while self.advance()? {}
        Ok(RunOutput {
            makespan_s: self.state.clock_s,
            iterations: self.records,
            requests: self.state.into_requests(),
            energy: self.energy,
            idle_s: self.idle_s,
        })
    }

    /// Executes one iteration of `plan` against the current state.
    pub fn step(&mut self, plan: &BatchPlan) -> Result<IterationRecord> {
        let num_layers = self.model.num_layers;
        for &id in &plan.admitted {
            self.state.admit_to_prefill(id)?;
            let r = self.state.request_mut(id);
            r.phase = Phase::Prefilling;
            r.layer_progress = vec![0; num_layers as usize];
        }
        if plan.decode_ids != self.state.decoding() {
            return Err(Error::PlanMismatch(
                "decode set differs from the requests in Decoding".into(),
            ));
        }
        for a in &plan.prefill {
            if !self.state.contains(a.request) {
                return Err(Error::PlanMismatch(format!(
                    "unknown request {}",
                    a.request
                )));
            }
            let r = self.state.request(a.request);
            if r.phase != Phase::Prefilling
                || a.tokens.start >= a.tokens.end
                || a.tokens.end > r.input_len
                || a.layers.start >= a.layers.end
                || a.layers.end > num_layers
                || a.layers
                    .clone()
                    .any(|l| r.layer_progress[l as usize] != a.tokens.start)
            {
                return Err(Error::PlanMismatch(format!(
                    "assignment {:?} does not continue the prefill of {}",
                    a, a.request
                )));
            }
        }

        let decode_batch = plan.decode_ids.len() as u64;
        let mut kernels = Vec::new();

        // Cut the stack at every assignment boundary so that each segment
        // routes the same tokens through all of its layers.
        let mut cuts = vec![0, num_layers];
        for a in &plan.prefill {
            cuts.extend([a.layers.start, a.layers.end]);
        }
        cuts.sort_unstable();
        cuts.dedup();
        let mut attribution: Vec<(RequestId, f64)> = Vec::new();
        for w in cuts.windows(2) {
            let (lo, hi) = (w[0], w[1]);
            let layers = hi - lo;
            let covering = || {
                plan.prefill
                    .iter()
                    .filter(|a| a.layers.start <= lo && hi <= a.layers.end)
            };
            let routed = decode_batch + covering().map(|a| u64::from(a.num_tokens())).sum::<u64>();
            if routed == 0 {
                continue;
            }
            let cov = self.coverage.coverage(routed, &mut self.rng);
            let moe = moe_cost(&self.model, routed, cov, layers);
            let per_token = moe.expert_bytes / routed as f64;
            attribution.extend(plan.decode_ids.iter().map(|&id| (id, per_token)));
            attribution
                .extend(covering().map(|a| (a.request, per_token * f64::from(a.num_tokens()))));
            kernels.push(moe);
            kernels.push(dense_cost(&self.model, routed, layers));
        }

        let mut decode_kv_tokens = 0u64;
        for &id in &plan.decode_ids {
            decode_kv_tokens += u64::from(self.state.request(id).context_len());
        }
        if decode_batch > 0 {
            kernels.push(decode_attention_cost(
                &self.model,
                decode_batch,
                decode_kv_tokens,
                num_layers,
            ));
        }
        for a in &plan.prefill {
            kernels.push(prefill_attention_cost(
                &self.model,
                u64::from(a.num_tokens()),
                u64::from(a.tokens.start),
                a.layers.end - a.layers.start,
            ));
        }
        let completing: Vec<RequestId> = {
            let mut ids: Vec<RequestId> = Vec::new();
            for a in &plan.prefill {
                if ids.contains(&a.request) {
                    continue;
                }
                let r = self.state.request(a.request);
                let done = (0..num_layers).all(|l| {
                    let reached = plan
                        .prefill
                        .iter()
                        .filter(|b| b.request == a.request && b.layers.contains(&l))
                        .map(|b| b.tokens.end)
                        .max()
                        .unwrap_or(r.layer_progress[l as usize]);
                    reached == r.input_len
                });
                if done {
                    ids.push(a.request);
                }
            }
            ids
        };
        kernels.push(lm_head_cost(
            &self.model,
            decode_batch + completing.len() as u64,
        ));
        kernels.retain(|k| k.flops > 0.0 || k.hbm_bytes > 0.0);

        let decode_flops = self.decode_flops(decode_batch, decode_kv_tokens);
        let cost = IterationCost::new(kernels, &self.hw);
        if !(cost.runtime_s.is_finite() && cost.runtime_s > 0.0) {
            return Err(Error::PlanMismatch("iteration with no work".into()));
        }

        let start_s = self.state.clock_s;
        let now = start_s + cost.runtime_s;
        self.state.clock_s = now;
        self.energy += cost.energy;

        for (id, bytes) in attribution {
            self.state.request_mut(id).expert_load_bytes += bytes;
        }

        for &id in &plan.decode_ids {
            let r = self.state.request_mut(id);
            r.token_emit_times_s.push(now);
            let finished = r.tokens_emitted() == r.output_len;
            if finished {
                r.phase = Phase::Finished;
            }
            self.state.add_kv(u64::from(num_layers));
            if finished {
                self.state.finish(id);
            }
        }
        for a in &plan.prefill {
            let r = self.state.request_mut(a.request);
            for l in a.layers.clone() {
                r.layer_progress[l as usize] = a.tokens.end;
            }
            self.state
                .add_kv(u64::from(a.num_tokens()) * u64::from(a.layers.end - a.layers.start));
        }
        for &id in &completing {
            let r = self.state.request_mut(id);
            debug_assert!(r.is_prefill_done());
            r.first_token_s = Some(now);
            r.token_emit_times_s.push(now);
            let finished = r.output_len == 1;
            r.phase = if finished {
                Phase::Finished
            } else {
                Phase::Decoding
            };
            self.state.add_kv(u64::from(num_layers));
            if finished {
                self.state.finish(id);
            } else {
                self.state.start_decoding(id);
            }
        }

        let record = IterationRecord {
            index: self.records.len() as u64,
            start_s,
            runtime_s: cost.runtime_s,
            energy_j: cost.energy.total(),
            energy_static_j: cost.energy.static_j,
            energy_compute_j: cost.energy.compute_j,
            energy_memory_j: cost.energy.memory_j,
            expert_load_bytes: cost.expert_load_bytes,
            total_hbm_bytes: cost.hbm_bytes,
            flops: cost.flops,
            decode_flops,
            decode_batch_size: decode_batch as u32,
            prefill_tokens: plan.prefill_tokens(),
            designated_group: plan.designated_group,
            kv_used_bytes: self.state.kv_used_bytes(),
        };
        self.records.push(record.clone());
        Ok(record)
    }

    /// Flops the decode tokens would cost on their own; independent of how
    /// prefill is scheduled around them.
    fn decode_flops(&self, batch: u64, kv_tokens: u64) -> f64 {
        if batch == 0 {
            return 0.0;
        }
        let l = self.model.num_layers;
        let parts: [KernelCost; 4] = [
            moe_cost(&self.model, batch, 0.0, l),
            dense_cost(&self.model, batch, l),
            decode_attention_cost(&self.model, batch, kv_tokens, l),
            lm_head_cost(&self.model, batch),
        ];
        parts.iter().map(|k| k.flops).sum()
    }
}

/// Runs `requests` to completion under one scheduler configuration.
pub fn run(
    model: &ModelSpec,
    hw: &HardwareSpec,
    scheduler: &SchedulerConfig,
    coverage: &CoverageModel,
    requests: Vec<Request>,
    opts: RunOptions,
) -> Result<RunOutput> {
    Engine::new(model, hw, scheduler, coverage, requests, opts)?.run_to_completion()
}

pub fn write_events<W: Write>(records: &[IterationRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let wrap = |e: csv::Error| Error::Config {
        path: "<events>".into(),
        reason: e.to_string(),
    };
    if records.is_empty() {
        w.write_record(EVENT_HEADER).map_err(wrap)?;
    }
    for r in records {
        w.serialize(r).map_err(wrap)?;
    }
    w.flush().map_err(|e| Error::io("<events>", e))
}

const EVENT_HEADER: [&str; 15] = [
    "index",
    "start_s",
    "runtime_s",
    "energy_j",
    "energy_static_j",
    "energy_compute_j",
    "energy_memory_j",
    "expert_load_bytes",
    "total_hbm_bytes",
    "flops",
    "decode_flops",
    "decode_batch_size",
    "prefill_tokens",
    "designated_group",
    "kv_used_bytes",
];
