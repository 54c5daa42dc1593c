//! Roofline cost model: flops and off-chip bytes per kernel, summed
//! per-kernel roofline time, and a static + compute + memory energy split.

use serde::Serialize;

use crate::types::{HardwareSpec, ModelSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum KernelKind {
    AttentionPrefill,
    AttentionDecode,
    DenseProj,
    MoeFfn,
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KernelCost {
    pub kind: KernelKind,
    pub flops: f64,
    pub hbm_bytes: f64,
    /// Part of `hbm_bytes` that is expert weights.
    pub expert_bytes: f64,
}

impl KernelCost {
    pub fn zero(kind: KernelKind) -> Self {
        KernelCost {
            kind,
            flops: 0.0,
            hbm_bytes: 0.0,
            expert_bytes: 0.0,
        }
    }

    pub fn compute_time(&self, hw: &HardwareSpec) -> f64 {
        self.flops / hw.effective_flops()
    }

    pub fn memory_time(&self, hw: &HardwareSpec) -> f64 {
        self.hbm_bytes / hw.effective_bw()
    }

    /// max(compute time, memory time).
    pub fn roofline_time(&self, hw: &HardwareSpec) -> f64 {
        self.compute_time(hw).max(self.memory_time(hw))
    }
}

/// Ops per byte at which a kernel turns compute-bound.
pub fn ridge_point(hw: &HardwareSpec) -> f64 {
    hw.peak_flops / hw.peak_hbm_bw
}

/// Expert FFN work for `routed_tokens` tokens over `layers` layers, loading
/// `coverage` of each layer's experts plus the hidden states in and out.
pub fn moe_cost(model: &ModelSpec, routed_tokens: u64, coverage: f64, layers: u32) -> KernelCost {
    debug_assert!((0.0..=1.0).contains(&coverage));
    debug_assert!(layers <= model.num_layers);
    let layers = f64::from(layers);
    let tokens = routed_tokens as f64;
    let expert_bytes = coverage * f64::from(model.num_experts) * model.bytes_per_expert * layers;
    let activation_bytes =
        2.0 * tokens * f64::from(model.hidden_dim) * model.activation_bytes * layers;
    KernelCost {
        kind: KernelKind::MoeFfn,
        flops: tokens * f64::from(model.top_k) * model.flops_per_token_per_expert * layers,
        hbm_bytes: expert_bytes + activation_bytes,
        expert_bytes,
    }
}

/// Attention for `new_tokens` prompt tokens appended after `context_len`
/// already-cached tokens: causal score/value work, a read of the cached KV
/// and a write of the new KV.
pub fn prefill_attention_cost(
    model: &ModelSpec,
    new_tokens: u64,
    context_len: u64,
    layers: u32,
) -> KernelCost {
    let layers = f64::from(layers);
    let n = new_tokens as f64;
    let ctx = context_len as f64;
    let kv = model.kv_bytes_per_token_per_layer() * layers;
    KernelCost {
        kind: KernelKind::AttentionPrefill,
        flops: model.attn_flops_per_token_per_ctx * layers * n * (ctx + n / 2.0),
        hbm_bytes: kv * (ctx + n),
        expert_bytes: 0.0,
    }
}

/// Decode attention for a batch whose resident contexts total `kv_tokens`:
/// one query per request against its whole cache.
pub fn decode_attention_cost(
    model: &ModelSpec,
    batch: u64,
    kv_tokens: u64,
    layers: u32,
) -> KernelCost {
    let layers = f64::from(layers);
    let kv = model.kv_bytes_per_token_per_layer() * layers;
    KernelCost {
        kind: KernelKind::AttentionDecode,
        flops: model.attn_flops_per_token_per_ctx * layers * kv_tokens as f64,
        hbm_bytes: kv * (kv_tokens + batch) as f64,
        expert_bytes: 0.0,
    }
}

/// Attention projections, router and norms: weights read once per layer,
/// two ops per weight per token.
pub fn dense_cost(model: &ModelSpec, tokens: u64, layers: u32) -> KernelCost {
    let layers = f64::from(layers);
    KernelCost {
        kind: KernelKind::DenseProj,
        flops: tokens as f64 * model.dense_flops_per_token_per_layer() * layers,
        hbm_bytes: model.dense_bytes_per_layer * layers,
        expert_bytes: 0.0,
    }
}

/// LM head over the tokens that produce logits this iteration.
pub fn lm_head_cost(model: &ModelSpec, tokens: u64) -> KernelCost {
    if model.lm_head_bytes == 0.0 || tokens == 0 {
        return KernelCost::zero(KernelKind::Other);
    }
    KernelCost {
        kind: KernelKind::Other,
        flops: 2.0 * tokens as f64 * model.lm_head_bytes / model.activation_bytes,
        hbm_bytes: model.lm_head_bytes,
        expert_bytes: 0.0,
    }
}

/// Sum of per-kernel roofline times; kernels do not overlap.
pub fn iteration_runtime(kernels: &[KernelCost], hw: &HardwareSpec) -> f64 {
    kernels.iter().map(|k| k.roofline_time(hw)).sum()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct EnergyBreakdown {
    pub static_j: f64,
    pub compute_j: f64,
    pub memory_j: f64,
}

impl EnergyBreakdown {
    pub fn total(&self) -> f64 {
        self.static_j + self.compute_j + self.memory_j
    }

    pub fn idle(seconds: f64, hw: &HardwareSpec) -> Self {
        EnergyBreakdown {
            static_j: hw.static_power_w * seconds,
            ..Default::default()
        }
    }
}

impl std::ops::AddAssign for EnergyBreakdown {
    fn add_assign(&mut self, rhs: Self) {
        self.static_j += rhs.static_j;
        self.compute_j += rhs.compute_j;
        self.memory_j += rhs.memory_j;
    }
}

pub fn iteration_energy(
    kernels: &[KernelCost],
    runtime_s: f64,
    hw: &HardwareSpec,
) -> EnergyBreakdown {
    let flops: f64 = kernels.iter().map(|k| k.flops).sum();
    let bytes: f64 = kernels.iter().map(|k| k.hbm_bytes).sum();
    EnergyBreakdown {
        static_j: hw.static_power_w * runtime_s,
        compute_j: flops * hw.energy_per_flop_j,
        memory_j: bytes * hw.energy_per_hbm_byte_j,
    }
}

/// Kernels, runtime and energy of one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationCost {
    pub kernels: Vec<KernelCost>,
    pub runtime_s: f64,
    pub energy: EnergyBreakdown,
    pub expert_load_bytes: f64,
    pub hbm_bytes: f64,
    pub flops: f64,
}

impl IterationCost {
    pub fn new(kernels: Vec<KernelCost>, hw: &HardwareSpec) -> Self {
        let runtime_s = iteration_runtime(&kernels, hw);
        let energy = iteration_energy(&kernels, runtime_s, hw);
        IterationCost {
            expert_load_bytes: kernels.iter().map(|k| k.expert_bytes).sum(),
            hbm_bytes: kernels.iter().map(|k| k.hbm_bytes).sum(),
            flops: kernels.iter().map(|k| k.flops).sum(),
            kernels,
            runtime_s,
            energy,
        }
    }

    /// Roofline time spent in kernels of `kind`.
    pub fn time_in(&self, kind: KernelKind, hw: &HardwareSpec) -> f64 {
        self.kernels
            .iter()
            .filter(|k| k.kind == kind)
            .map(|k| k.roofline_time(hw))
            .sum()
    }
}
