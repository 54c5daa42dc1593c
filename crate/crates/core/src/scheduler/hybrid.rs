use std::collections::VecDeque;
use std::ops::Range;

use super::{
    cohort_capacity, cohort_groups, compute_num_groups, designated, BatchPlan, GroupPlan,
    PrefillAssignment, PrefillScheduler,
};
use crate::state::SimState;
use crate::types::RequestId;

#[derive(Debug, Clone)]
struct Chunk {
    slices: Vec<(RequestId, Range<u32>)>,
    group: u32,
}

#[derive(Debug, Clone)]
struct Cohort {
    members: Vec<(RequestId, u32)>,
    total: u64,
    max_len: u32,
    /// Fixed once the first chunk enters group 0.
    groups: Option<GroupPlan>,
    /// Next unchunked token: (member index, offset).
    stream: (usize, u32),
    in_flight: VecDeque<Chunk>,
}

impl Cohort {
    fn stream_exhausted(&self) -> bool {
        self.stream.0 == self.members.len()
    }

    fn done(&self) -> bool {
        self.stream_exhausted() && self.in_flight.is_empty()
    }
}

/// Chunked and layered prefill combined: a cohort's prompt tokens are cut
/// into chunks of `chunk_size`, and each chunk walks the layer groups one
/// per iteration. A new chunk enters group 0 every iteration, so chunk c+1
/// trails chunk c by exactly one group.
///
/// With one group this is chunked prefill; with chunks larger than every
/// cohort it is layered prefill.
#[derive(Debug, Clone)]
pub struct HybridScheduler {
    chunk_size: u64,
    group_token_target: u64,
    num_layers: u32,
    cohort: Option<Cohort>,
}

impl HybridScheduler {
    pub fn new(chunk_size: u64, group_token_target: u64, num_layers: u32) -> Self {
        HybridScheduler {
            chunk_size,
            group_token_target,
            num_layers,
            cohort: None,
        }
    }

    /// Cuts the next chunk off the cohort's stream, topping a short chunk up
    /// with newly admitted requests while the cohort's token capacity and the
    /// KV budget allow.
    fn cut_chunk(
        &self,
        cohort: &mut Cohort,
        state: &SimState,
        admitted: &mut Vec<RequestId>,
    ) -> Chunk {
        let mut budget = self.chunk_size;
        let mut slices = Vec::new();
        let fresh = cohort.members.is_empty();
        while budget > 0 && !cohort.stream_exhausted() {
            let (m, offset) = cohort.stream;
            let (id, len) = cohort.members[m];
            let n = u64::from(len - offset).min(budget) as u32;
            slices.push((id, offset..offset + n));
            budget -= u64::from(n);
            cohort.stream = if offset + n == len {
                (m + 1, 0)
            } else {
                (m, offset + n)
            };
        }

        if fresh || !slices.is_empty() {
            let mut kv_free = state.kv_free();
            for &id in state.waiting().iter().skip(admitted.len()) {
                if budget == 0 {
                    break;
                }
                let need = state.kv_reservation(id);
                if need > kv_free {
                    break;
                }
                let len = state.request(id).input_len;
                let new_max = cohort.max_len.max(len);
                let new_total = cohort.total + u64::from(len);
                if !cohort.members.is_empty() {
                    let fits = new_total
                        <= cohort_capacity(new_max, self.group_token_target, self.num_layers);
                    let keeps_groups = cohort.groups.as_ref().is_none_or(|g| {
                        compute_num_groups(new_max, self.group_token_target, self.num_layers)
                            == g.num_groups()
                    });
                    if !(fits && keeps_groups) {
                        break;
                    }
                }
                kv_free -= need;
                admitted.push(id);
                cohort.members.push((id, len));
                cohort.total = new_total;
                cohort.max_len = new_max;
                let n = u64::from(len).min(budget) as u32;
                slices.push((id, 0..n));
                budget -= u64::from(n);
                cohort.stream = if n == len {
                    (cohort.members.len(), 0)
                } else {
                    (cohort.members.len() - 1, n)
                };
            }
        }
        Chunk { slices, group: 0 }
    }
}

impl PrefillScheduler for HybridScheduler {
    fn plan(&mut self, state: &SimState) -> BatchPlan {
        let mut plan = BatchPlan {
            decode_ids: state.decoding().to_vec(),
            ..Default::default()
        };
        if self.cohort.as_ref().is_some_and(Cohort::done) {
            self.cohort = None;
        }
        let mut cohort = self.cohort.take().unwrap_or(Cohort {
            members: Vec::new(),
            total: 0,
            max_len: 0,
            groups: None,
            stream: (0, 0),
            in_flight: VecDeque::new(),
        });

        let chunk = self.cut_chunk(&mut cohort, state, &mut plan.admitted);
        if cohort.members.is_empty() {
            return plan;
        }
        if !chunk.slices.is_empty() {
            cohort.in_flight.push_back(chunk);
        }
        let groups = cohort
            .groups
            .get_or_insert_with(|| {
                cohort_groups(cohort.max_len, self.group_token_target, self.num_layers)
            })
            .clone();

        for chunk in &cohort.in_flight {
            let layers = groups.group(chunk.group);
            plan.prefill
                .extend(chunk.slices.iter().map(|(id, tokens)| PrefillAssignment {
                    request: *id,
                    tokens: tokens.clone(),
                    layers: layers.clone(),
                }));
        }
        plan.designated_group = cohort
            .in_flight
            .front()
            .and_then(|c| designated(&groups, c.group));

        for chunk in cohort.in_flight.iter_mut() {
            chunk.group += 1;
        }
        while cohort
            .in_flight
            .front()
            .is_some_and(|c| c.group == groups.num_groups())
        {
            cohort.in_flight.pop_front();
        }
        self.cohort = Some(cohort);
        plan
    }
}
