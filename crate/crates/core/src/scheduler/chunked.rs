use std::collections::VecDeque;

use super::{BatchPlan, PrefillAssignment, PrefillScheduler};
use crate::state::SimState;
use crate::types::RequestId;

#[derive(Debug, Clone)]
struct Partial {
    id: RequestId,
    len: u32,
    cursor: u32,
}

/// Token-axis prefill: FCFS slices totalling at most `chunk_size` tokens per
/// iteration, several short prompts sharing one chunk.
#[derive(Debug, Clone)]
pub struct ChunkedScheduler {
    chunk_size: u64,
    num_layers: u32,
    in_progress: VecDeque<Partial>,
}

impl ChunkedScheduler {
    pub fn new(chunk_size: u64, num_layers: u32) -> Self {
        ChunkedScheduler {
            chunk_size,
            num_layers,
            in_progress: VecDeque::new(),
        }
    }
}

impl PrefillScheduler for ChunkedScheduler {
    fn plan(&mut self, state: &SimState) -> BatchPlan {
        let mut plan = BatchPlan {
            decode_ids: state.decoding().to_vec(),
            ..Default::default()
        };
        let mut budget = self.chunk_size;
        let assign = |p: &mut Partial, budget: &mut u64, plan: &mut BatchPlan| {
            let n = u64::from(p.len - p.cursor).min(*budget) as u32;
            plan.prefill.push(PrefillAssignment {
                request: p.id,
                tokens: p.cursor..p.cursor + n,
                layers: 0..self.num_layers,
            });
            p.cursor += n;
            *budget -= u64::from(n);
        };

        for p in self.in_progress.iter_mut() {
            if budget == 0 {
                break;
            }
            assign(p, &mut budget, &mut plan);
        }

        let mut kv_free = state.kv_free();
        for &id in state.waiting() {
            if budget == 0 {
                break;
            }
            let need = state.kv_reservation(id);
            if need > kv_free {
                break;
            }
            kv_free -= need;
            plan.admitted.push(id);
            let mut p = Partial {
                id,
                len: state.request(id).input_len,
                cursor: 0,
            };
            assign(&mut p, &mut budget, &mut plan);
            self.in_progress.push_back(p);
        }

        self.in_progress.retain(|p| p.cursor < p.len);
        plan
    }
}
