use super::{
    cohort_capacity, cohort_groups, designated, BatchPlan, GroupPlan, PrefillAssignment,
    PrefillScheduler,
};
use crate::state::SimState;
use crate::types::RequestId;

#[derive(Debug, Clone)]
struct Cohort {
    members: Vec<(RequestId, u32)>,
    groups: GroupPlan,
    next_group: u32,
}

/// Layer-axis prefill: one cohort at a time runs its whole prompt through
/// one layer group per iteration and finishes after G iterations.
#[derive(Debug, Clone)]
pub struct LayeredScheduler {
    group_token_target: u64,
    num_layers: u32,
    cohort: Option<Cohort>,
}

impl LayeredScheduler {
    pub fn new(group_token_target: u64, num_layers: u32) -> Self {
        LayeredScheduler {
            group_token_target,
            num_layers,
            cohort: None,
        }
    }

    /// Head of the queue plus following requests while the merged prompt
    /// fits `G(max_len) * target` tokens and KV room remains.
    fn form_cohort(&self, state: &SimState) -> Option<Cohort> {
        let mut kv_free = state.kv_free();
        let mut members = Vec::new();
        let (mut total, mut max_len) = (0u64, 0u32);
        for &id in state.waiting() {
            let need = state.kv_reservation(id);
            if need > kv_free {
                break;
            }
            let len = state.request(id).input_len;
            let new_max = max_len.max(len);
            let new_total = total + u64::from(len);
            if !members.is_empty()
                && new_total > cohort_capacity(new_max, self.group_token_target, self.num_layers)
            {
                break;
            }
            kv_free -= need;
            members.push((id, len));
            total = new_total;
            max_len = new_max;
        }
        (!members.is_empty()).then(|| Cohort {
            members,
            groups: cohort_groups(max_len, self.group_token_target, self.num_layers),
            next_group: 0,
        })
    }
}

impl PrefillScheduler for LayeredScheduler {
    fn plan(&mut self, state: &SimState) -> BatchPlan {
        let mut plan = BatchPlan {
            decode_ids: state.decoding().to_vec(),
            ..Default::default()
        };
        if self.cohort.is_none() {
            self.cohort = self.form_cohort(state);
            if let Some(c) = &self.cohort {
                plan.admitted = c.members.iter().map(|&(id, _)| id).collect();
            }
        }
        let Some(cohort) = self.cohort.as_mut() else {
            return plan;
        };
        let g = cohort.next_group;
        let layers = cohort.groups.group(g);
        plan.prefill = cohort
            .members
            .iter()
            .map(|&(id, len)| PrefillAssignment {
                request: id,
                tokens: 0..len,
                layers: layers.clone(),
            })
            .collect();
        plan.designated_group = designated(&cohort.groups, g);
        cohort.next_group += 1;
        if cohort.next_group == cohort.groups.num_groups() {
            self.cohort = None;
        }
        plan
    }
}
