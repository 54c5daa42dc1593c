//! Domain types shared by the cost model, schedulers and engine.
//!
//! Specs are plain data: construct them (usually by deserializing a config
//! file), call `validate`, then share them read-only across runs.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture parameters of an MoE decoder model.
///
/// Byte and flop quantities are per layer unless the name says otherwise;
/// `kv_bytes_per_token` covers all layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default)]
    pub name: String,
    pub num_layers: u32,
    pub num_experts: u32,
    pub top_k: u32,
    /// Weight bytes of one expert in one layer.
    pub bytes_per_expert: f64,
    /// Non-expert weight bytes per layer (attention projections, router, norms).
    pub dense_bytes_per_layer: f64,
    /// Ops for one token through one expert FFN in one layer.
    pub flops_per_token_per_expert: f64,
    /// Attention ops per (query token, context position) pair in one layer.
    pub attn_flops_per_token_per_ctx: f64,
    pub kv_bytes_per_token: f64,
    pub hidden_dim: u32,
    /// Width of one activation element; bfloat16 by default.
    #[serde(default = "default_activation_bytes")]
    pub activation_bytes: f64,
    /// LM head weight bytes, read once per iteration.
    #[serde(default)]
    pub lm_head_bytes: f64,
}

fn default_activation_bytes() -> f64 {
    2.0
}

impl ModelSpec {
    /// Checks every invariant and returns the spec unchanged if all hold.
    pub fn validate(self) -> Result<Self> {
        if self.num_layers < 1 {
            return Err(Error::invalid("num_layers", "must be at least 1"));
        }
        if self.num_experts < 1 {
            return Err(Error::invalid("num_experts", "must be at least 1"));
        }
        if self.top_k < 1 || self.top_k > self.num_experts {
            return Err(Error::invalid(
                "top_k",
                format!(
                    "top_k out of range: {} not in [1, num_experts={}]",
                    self.top_k, self.num_experts
                ),
            ));
        }
        if self.hidden_dim < 1 {
            return Err(Error::invalid("hidden_dim", "must be at least 1"));
        }
        for (field, value) in [
            ("bytes_per_expert", self.bytes_per_expert),
            ("dense_bytes_per_layer", self.dense_bytes_per_layer),
            (
                "flops_per_token_per_expert",
                self.flops_per_token_per_expert,
            ),
            (
                "attn_flops_per_token_per_ctx",
                self.attn_flops_per_token_per_ctx,
            ),
            ("kv_bytes_per_token", self.kv_bytes_per_token),
            ("activation_bytes", self.activation_bytes),
        ] {
            positive(field, value)?;
        }
        if !(self.lm_head_bytes.is_finite() && self.lm_head_bytes >= 0.0) {
            return Err(Error::invalid("lm_head_bytes", "must be finite and >= 0"));
        }
        Ok(self)
    }

    /// Expert weight bytes of the whole model: layers x experts x bytes per expert.
    pub fn total_expert_bytes(&self) -> f64 {
        f64::from(self.num_layers) * f64::from(self.num_experts) * self.bytes_per_expert
    }

    /// Ops per token through the dense (non-expert) weights of one layer,
    /// two per weight element.
    pub fn dense_flops_per_token_per_layer(&self) -> f64 {
        2.0 * self.dense_bytes_per_layer / self.activation_bytes
    }

    pub fn kv_bytes_per_token_per_layer(&self) -> f64 {
        self.kv_bytes_per_token / f64::from(self.num_layers)
    }
}

/// Free-function form of [`ModelSpec::validate`].
pub fn validate_model(spec: ModelSpec) -> Result<ModelSpec> {
    spec.validate()
}

/// Free-function form of [`ModelSpec::total_expert_bytes`].
pub fn total_expert_bytes(spec: &ModelSpec) -> f64 {
    spec.total_expert_bytes()
}

/// Accelerator throughput, efficiency and energy coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardwareSpec {
    #[serde(default)]
    pub name: String,
    pub peak_flops: f64,
    pub peak_hbm_bw: f64,
    #[serde(default = "default_mfu")]
    pub mfu: f64,
    #[serde(default = "default_mbu")]
    pub mbu: f64,
    pub static_power_w: f64,
    pub energy_per_flop_j: f64,
    pub energy_per_hbm_byte_j: f64,
    pub kv_capacity_bytes: f64,
}

fn default_mfu() -> f64 {
    0.6
}

fn default_mbu() -> f64 {
    0.8
}

impl HardwareSpec {
    pub fn validate(self) -> Result<Self> {
        for (field, value) in [
            ("peak_flops", self.peak_flops),
            ("peak_hbm_bw", self.peak_hbm_bw),
            ("mfu", self.mfu),
            ("mbu", self.mbu),
            ("static_power_w", self.static_power_w),
            ("energy_per_flop_j", self.energy_per_flop_j),
            ("energy_per_hbm_byte_j", self.energy_per_hbm_byte_j),
            ("kv_capacity_bytes", self.kv_capacity_bytes),
        ] {
            positive(field, value)?;
        }
        if self.mfu > 1.0 {
            return Err(Error::invalid("mfu", "must be <= 1"));
        }
        if self.mbu > 1.0 {
            return Err(Error::invalid("mbu", "must be <= 1"));
        }
        Ok(self)
    }

    pub fn effective_flops(&self) -> f64 {
        self.peak_flops * self.mfu
    }

    pub fn effective_bw(&self) -> f64 {
        self.peak_hbm_bw * self.mbu
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SloSpec {
    pub ttft_s: f64,
    pub tbt_s: f64,
}

impl SloSpec {
    pub fn validate(self) -> Result<Self> {
        positive("ttft_s", self.ttft_s)?;
        positive("tbt_s", self.tbt_s)?;
        Ok(self)
    }
}

fn positive(field: &str, value: f64) -> Result<()> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(
            field,
            format!("must be finite and > 0, got {value}"),
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RequestId(pub u64);

impl fmt::Display for RequestId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Queued,
    Prefilling,
    Decoding,
    Finished,
}

/// One serving request and everything the engine records about it.
#[derive(Debug, Clone, PartialEq)]
pub struct Request {
    pub id: RequestId,
    pub arrival_s: f64,
    pub input_len: u32,
    /// Generated tokens, the first of which comes out of the final prefill pass.
    pub output_len: u32,
    pub phase: Phase,
    /// Prompt tokens prefilled so far at each layer.
    pub layer_progress: Vec<u32>,
    pub admitted_s: Option<f64>,
    pub first_token_s: Option<f64>,
    pub token_emit_times_s: Vec<f64>,
    /// Expert-weight bytes attributed to this request (pro rata by routed tokens).
    pub expert_load_bytes: f64,
}

impl Request {
    pub fn new(id: u64, arrival_s: f64, input_len: u32, output_len: u32) -> Self {
        Request {
            id: RequestId(id),
            arrival_s,
            input_len,
            output_len,
            phase: Phase::Queued,
            layer_progress: Vec::new(),
            admitted_s: None,
            first_token_s: None,
            token_emit_times_s: Vec::new(),
            expert_load_bytes: 0.0,
        }
    }

    pub fn tokens_emitted(&self) -> u32 {
        self.token_emit_times_s.len() as u32
    }

    /// Tokens whose KV is resident: the prompt plus everything generated.
    pub fn context_len(&self) -> u32 {
        self.input_len + self.tokens_emitted()
    }

    pub fn is_prefill_done(&self) -> bool {
        !self.layer_progress.is_empty() && self.layer_progress.iter().all(|&p| p == self.input_len)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    Chunked,
    Layered,
    Hybrid,
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Policy::Chunked => "chunked",
            Policy::Layered => "layered",
            Policy::Hybrid => "hybrid",
        })
    }
}

impl std::str::FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "chunked" => Ok(Policy::Chunked),
            "layered" => Ok(Policy::Layered),
            "hybrid" => Ok(Policy::Hybrid),
            other => Err(Error::invalid(
                "policy",
                format!("unknown policy `{other}`"),
            )),
        }
    }
}

/// Scheduler selection. Chunked ignores `group_token_target`, layered ignores
/// `chunk_size`, hybrid uses both.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulerConfig {
    pub policy: Policy,
    #[serde(default = "default_token_budget")]
    pub chunk_size: u64,
    #[serde(default = "default_token_budget")]
    pub group_token_target: u64,
}

fn default_token_budget() -> u64 {
    512
}

impl SchedulerConfig {
    pub fn chunked(chunk_size: u64) -> Self {
        SchedulerConfig {
            policy: Policy::Chunked,
            chunk_size,
            group_token_target: default_token_budget(),
        }
    }

    pub fn layered(group_token_target: u64) -> Self {
        SchedulerConfig {
            policy: Policy::Layered,
            chunk_size: default_token_budget(),
            group_token_target,
        }
    }

    pub fn hybrid(chunk_size: u64, group_token_target: u64) -> Self {
        SchedulerConfig {
            policy: Policy::Hybrid,
            chunk_size,
            group_token_target,
        }
    }

    pub fn validate(self) -> Result<Self> {
        if self.chunk_size < 1 {
            return Err(Error::invalid("scheduler.chunk_size", "must be at least 1"));
        }
        if self.group_token_target < 1 {
            return Err(Error::invalid(
                "scheduler.group_token_target",
                "must be at least 1",
            ));
        }
        Ok(self)
    }
}
