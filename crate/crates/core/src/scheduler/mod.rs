//! Iteration-level prefill policies.
//!
//! Every policy puts all decoding requests into every plan (stall-free); they
//! differ only in how prompt work is cut up:
//!
//! * chunked: along the token axis, at most `chunk_size` prompt tokens per
//!   iteration, each slice through every layer;
//! * layered: along the layer axis, a cohort's whole prompt through one
//!   contiguous layer group per iteration;
//! * hybrid: both, with successive chunks of one cohort pipelined through the
//!   groups.
//!
//! Schedulers read [`SimState`] and keep their own cursors; the engine applies
//! the returned [`BatchPlan`].

mod chunked;
mod hybrid;
mod layered;

use std::ops::Range;

pub use chunked::ChunkedScheduler;
pub use hybrid::HybridScheduler;
pub use layered::LayeredScheduler;

use crate::state::SimState;
use crate::types::{Policy, RequestId, SchedulerConfig};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrefillAssignment {
    pub request: RequestId,
    pub tokens: Range<u32>,
    pub layers: Range<u32>,
}

impl PrefillAssignment {
    pub fn num_tokens(&self) -> u32 {
        self.tokens.end - self.tokens.start
    }
}

/// One iteration's work.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BatchPlan {
    /// Requests moved from the waiting queue into prefill, FCFS order.
    pub admitted: Vec<RequestId>,
    pub decode_ids: Vec<RequestId>,
    pub prefill: Vec<PrefillAssignment>,
    /// Group doing prefill when prompts run through only part of the model;
    /// for pipelined hybrid iterations, the group of the oldest chunk.
    pub designated_group: Option<u32>,
}

impl BatchPlan {
    pub fn is_empty(&self) -> bool {
        self.decode_ids.is_empty() && self.prefill.is_empty()
    }

    pub fn prefill_tokens(&self) -> u64 {
        self.prefill.iter().map(|a| u64::from(a.num_tokens())).sum()
    }
}

/// Contiguous, balanced partition of the layer stack.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupPlan {
    boundaries: Vec<u32>,
}

impl GroupPlan {
    pub fn num_groups(&self) -> u32 {
        self.boundaries.len() as u32 - 1
    }

    pub fn group(&self, g: u32) -> Range<u32> {
        self.boundaries[g as usize]..self.boundaries[g as usize + 1]
    }

    pub fn groups(&self) -> impl Iterator<Item = Range<u32>> + '_ {
        self.boundaries.windows(2).map(|w| w[0]..w[1])
    }

    pub fn boundaries(&self) -> &[u32] {
        &self.boundaries
    }
}

/// `max(1, ceil(len / target))`, capped at the layer count.
pub fn compute_num_groups(prompt_len: u32, group_token_target: u64, num_layers: u32) -> u32 {
    let g = u64::from(prompt_len)
        .div_ceil(group_token_target.max(1))
        .max(1);
    g.min(u64::from(num_layers.max(1))) as u32
}

/// Splits `num_layers` into `min(groups, num_layers)` contiguous groups whose
/// sizes differ by at most one, larger groups first.
pub fn partition_layers(num_layers: u32, groups: u32) -> GroupPlan {
    let g = groups.clamp(1, num_layers.max(1));
    let (base, extra) = (num_layers / g, num_layers % g);
    let mut boundaries = Vec::with_capacity(g as usize + 1);
    let mut at = 0;
    boundaries.push(0);
    for i in 0..g {
        at += base + u32::from(i < extra);
        boundaries.push(at);
    }
    GroupPlan { boundaries }
}

/// Groups for a cohort whose longest prompt is `max_len`.
pub(crate) fn cohort_groups(max_len: u32, target: u64, num_layers: u32) -> GroupPlan {
    partition_layers(num_layers, compute_num_groups(max_len, target, num_layers))
}

/// Prompt tokens a cohort may carry: `G(max_len) * target`.
pub(crate) fn cohort_capacity(max_len: u32, target: u64, num_layers: u32) -> u64 {
    u64::from(compute_num_groups(max_len, target, num_layers)).saturating_mul(target)
}

pub(crate) fn designated(groups: &GroupPlan, group: u32) -> Option<u32> {
    (groups.num_groups() > 1).then_some(group)
}

pub trait PrefillScheduler {
    fn plan(&mut self, state: &SimState) -> BatchPlan;
}

#[derive(Debug, Clone)]
pub enum Scheduler {
    Chunked(ChunkedScheduler),
    Layered(LayeredScheduler),
    Hybrid(HybridScheduler),
}

impl Scheduler {
    pub fn new(cfg: &SchedulerConfig, num_layers: u32) -> Self {
        match cfg.policy {
            Policy::Chunked => {
                Scheduler::Chunked(ChunkedScheduler::new(cfg.chunk_size, num_layers))
            }
            Policy::Layered => {
                Scheduler::Layered(LayeredScheduler::new(cfg.group_token_target, num_layers))
            }
            Policy::Hybrid => Scheduler::Hybrid(HybridScheduler::new(
                cfg.chunk_size,
                cfg.group_token_target,
                num_layers,
            )),
        }
    }
}

impl PrefillScheduler for Scheduler {
    fn plan(&mut self, state: &SimState) -> BatchPlan {
        match self {
            Scheduler::Chunked(s) => s.plan(state),
            Scheduler::Layered(s) => s.plan(state),
            Scheduler::Hybrid(s) => s.plan(state),
        }
    }
}
