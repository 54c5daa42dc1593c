//! Mutable simulation state shared by the engine (which owns and mutates it)
//! and the schedulers (which only read it).

use std::collections::{HashMap, VecDeque};

use crate::error::{Error, Result};
use crate::types::{ModelSpec, Request, RequestId};

/// KV cache usage is tracked in token-layers (one token's KV in one layer)
/// so that partial-depth prefill stays exact.
#[derive(Debug, Clone)]
pub struct SimState {
    pub clock_s: f64,
    requests: Vec<Request>,
    index: HashMap<RequestId, usize>,
    /// Not yet arrived, ordered by arrival time.
    pending: VecDeque<usize>,
    waiting: VecDeque<RequestId>,
    prefilling: Vec<RequestId>,
    decoding: Vec<RequestId>,
    finished: usize,
    num_layers: u32,
    kv_bytes_per_token_layer: f64,
    kv_capacity: u64,
    kv_reserved: u64,
    kv_used: u64,
}

impl SimState {
    pub fn new(
        model: &ModelSpec,
        kv_capacity_bytes: f64,
        mut requests: Vec<Request>,
    ) -> Result<Self> {
        let kv_bytes_per_token_layer = model.kv_bytes_per_token_per_layer();
        let kv_capacity = (kv_capacity_bytes / kv_bytes_per_token_layer).floor() as u64;
        requests.sort_by(|a, b| a.arrival_s.total_cmp(&b.arrival_s).then(a.id.cmp(&b.id)));
        let mut index = HashMap::with_capacity(requests.len());
        for (i, r) in requests.iter().enumerate() {
            if index.insert(r.id, i).is_some() {
                return Err(Error::invalid(
                    "requests",
                    format!("duplicate request id {}", r.id),
                ));
            }
            if r.input_len < 1 || r.output_len < 1 {
                return Err(Error::invalid(
                    "requests",
                    format!("{} has an empty prompt or output", r.id),
                ));
            }
            if !(r.arrival_s.is_finite() && r.arrival_s >= 0.0) {
                return Err(Error::invalid(
                    "requests",
                    format!("{} has arrival {}", r.id, r.arrival_s),
                ));
            }
            let need = u64::from(r.input_len + r.output_len) * u64::from(model.num_layers);
            if need > kv_capacity {
                return Err(Error::invalid(
                    "hardware.kv_capacity_bytes",
                    format!(
                        "{} needs {:.0} KV bytes but capacity is {:.0}",
                        r.id,
                        need as f64 * kv_bytes_per_token_layer,
                        kv_capacity_bytes
                    ),
                ));
            }
        }
        Ok(SimState {
            clock_s: 0.0,
            pending: (0..requests.len()).collect(),
            requests,
            index,
            waiting: VecDeque::new(),
            prefilling: Vec::new(),
            decoding: Vec::new(),
            finished: 0,
            num_layers: model.num_layers,
            kv_bytes_per_token_layer,
            kv_capacity,
            kv_reserved: 0,
            kv_used: 0,
        })
    }

    pub fn request(&self, id: RequestId) -> &Request {
        &self.requests[self.index[&id]]
    }

    pub(crate) fn request_mut(&mut self, id: RequestId) -> &mut Request {
        let i = self.index[&id];
        &mut self.requests[i]
    }

    pub fn contains(&self, id: RequestId) -> bool {
        self.index.contains_key(&id)
    }

    pub fn requests(&self) -> &[Request] {
        &self.requests
    }

    pub fn into_requests(self) -> Vec<Request> {
        self.requests
    }

    pub fn num_layers(&self) -> u32 {
        self.num_layers
    }

    /// Arrived but not yet admitted to prefill, FCFS order.
    pub fn waiting(&self) -> &VecDeque<RequestId> {
        &self.waiting
    }

    pub fn prefilling(&self) -> &[RequestId] {
        &self.prefilling
    }

    pub fn decoding(&self) -> &[RequestId] {
        &self.decoding
    }

    pub fn next_arrival_s(&self) -> Option<f64> {
        self.pending.front().map(|&i| self.requests[i].arrival_s)
    }

    pub fn all_finished(&self) -> bool {
        self.finished == self.requests.len()
    }

    pub fn unfinished(&self) -> usize {
        self.requests.len() - self.finished
    }

    /// KV token-layers a request holds once fully generated.
    pub fn kv_reservation(&self, id: RequestId) -> u64 {
        let r = self.request(id);
        u64::from(r.input_len + r.output_len) * u64::from(self.num_layers)
    }

    /// Token-layers not yet promised to admitted requests.
    pub fn kv_free(&self) -> u64 {
        self.kv_capacity - self.kv_reserved
    }

    pub fn kv_used_bytes(&self) -> f64 {
        self.kv_used as f64 * self.kv_bytes_per_token_layer
    }

    pub fn kv_capacity_bytes(&self) -> f64 {
        self.kv_capacity as f64 * self.kv_bytes_per_token_layer
    }

    pub(crate) fn admit_arrivals(&mut self) {
        while let Some(&i) = self.pending.front() {
            if self.requests[i].arrival_s > self.clock_s {
                break;
            }
            self.pending.pop_front();
            self.waiting.push_back(self.requests[i].id);
        }
    }

    pub(crate) fn admit_to_prefill(&mut self, id: RequestId) -> Result<()> {
        if self.waiting.front() != Some(&id) {
            return Err(Error::PlanMismatch(format!(
                "{id} admitted out of FCFS order"
            )));
        }
        let need = self.kv_reservation(id);
        if need > self.kv_free() {
            return Err(Error::PlanMismatch(format!(
                "{id} admitted without KV room"
            )));
        }
        self.waiting.pop_front();
        self.kv_reserved += need;
        self.prefilling.push(id);
        Ok(())
    }

    pub(crate) fn add_kv(&mut self, token_layers: u64) {
        self.kv_used += token_layers;
        debug_assert!(self.kv_used <= self.kv_reserved && self.kv_reserved <= self.kv_capacity);
    }

    pub(crate) fn start_decoding(&mut self, id: RequestId) {
        self.prefilling.retain(|&p| p != id);
        self.decoding.push(id);
    }

    pub(crate) fn finish(&mut self, id: RequestId) {
        let need = self.kv_reservation(id);
        self.prefilling.retain(|&p| p != id);
        self.decoding.retain(|&p| p != id);
        self.kv_used -= need;
        self.kv_reserved -= need;
        self.finished += 1;
    }
}
