use moesim_core::coverage::CoverageModel;
use moesim_core::types::Phase;
use moesim_core::{run, HardwareSpec, ModelSpec, Request, RunOptions, RunOutput, SchedulerConfig};
use proptest::prelude::*;

fn model(num_layers: u32) -> ModelSpec {
    ModelSpec {
        name: "small".into(),
        num_layers,
        num_experts: 64,
        top_k: 4,
        bytes_per_expert: 4e6,
        dense_bytes_per_layer: 2e7,
        flops_per_token_per_expert: 4e6,
        attn_flops_per_token_per_ctx: 8192.0,
        kv_bytes_per_token: 1024.0 * f64::from(num_layers),
        hidden_dim: 1024,
        activation_bytes: 2.0,
        lm_head_bytes: 1e8,
    }
}

fn hw(kv_capacity_bytes: f64) -> HardwareSpec {
    HardwareSpec {
        name: "test".into(),
        peak_flops: 4e14,
        peak_hbm_bw: 2e12,
        mfu: 0.5,
        mbu: 0.8,
        static_power_w: 100.0,
        energy_per_flop_j: 4e-13,
        energy_per_hbm_byte_j: 6e-11,
        kv_capacity_bytes,
    }
}

fn arb_trace() -> impl Strategy<Value = Vec<Request>> {
    prop::collection::vec((0.0f64..2.0, 1u32..5000, 1u32..40), 1..16).prop_map(|v| {
        let mut t = 0.0;
        v.into_iter()
            .enumerate()
            .map(|(i, (gap, l, o))| {
                t += gap;
                Request::new(i as u64, t, l, o)
            })
            .collect()
    })
}

fn arb_scheduler() -> impl Strategy<Value = SchedulerConfig> {
    prop_oneof![
        (1u64..3000).prop_map(SchedulerConfig::chunked),
        (1u64..3000).prop_map(SchedulerConfig::layered),
        (1u64..3000, 1u64..3000).prop_map(|(c, g)| SchedulerConfig::hybrid(c, g)),
    ]
}

/// KV capacity between the largest single reservation and a roomy budget.
fn capacity(m: &ModelSpec, reqs: &[Request], slack: f64) -> f64 {
    let biggest = reqs
        .iter()
        .map(|r| f64::from(r.input_len + r.output_len))
        .fold(0.0, f64::max);
    biggest * m.kv_bytes_per_token * (1.0 + slack)
}

fn simulate(m: &ModelSpec, cap: f64, s: &SchedulerConfig, reqs: &[Request]) -> RunOutput {
    run(
        m,
        &hw(cap),
        s,
        &CoverageModel::default(),
        reqs.to_vec(),
        RunOptions::default(),
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 96, ..ProptestConfig::default() })]

    #[test]
    fn every_request_completes_exactly(
        reqs in arb_trace(), s in arb_scheduler(), layers in 1u32..40, slack in 0.0f64..4.0,
    ) {
        let m = model(layers);
        let cap = capacity(&m, &reqs, slack);
        let out = simulate(&m, cap, &s, &reqs);
        prop_assert_eq!(out.requests.len(), reqs.len());
        for r in &out.requests {
            prop_assert_eq!(r.phase, Phase::Finished);
            prop_assert_eq!(r.tokens_emitted(), r.output_len);
            prop_assert!(r.layer_progress.iter().all(|&p| p == r.input_len));
            prop_assert!(r.first_token_s.unwrap() >= r.arrival_s);
            prop_assert_eq!(r.first_token_s, r.token_emit_times_s.first().copied());
        }
        for rec in &out.iterations {
            prop_assert!(rec.runtime_s > 0.0);
            prop_assert!(rec.kv_used_bytes <= cap);
        }
        prop_assert!(out.iterations.windows(2).all(|w| w[0].start_s <= w[1].start_s));
    }

    #[test]
    fn token_gaps_are_sums_of_iteration_runtimes(reqs in arb_trace(), s in arb_scheduler()) {
        let m = model(24);
        let out = simulate(&m, 1e12, &s, &reqs);
        for r in &out.requests {
            for w in r.token_emit_times_s.windows(2) {
                let inside: f64 = out
                    .iterations
                    .iter()
                    .filter(|i| i.start_s >= w[0] && i.start_s < w[1])
                    .map(|i| i.runtime_s)
                    .sum();
                prop_assert!((inside - (w[1] - w[0])).abs() <= 1e-9 * w[1].max(1.0));
            }
        }
    }

    #[test]
    fn decode_flops_do_not_depend_on_policy(reqs in arb_trace(), c in 1u64..3000, g in 1u64..3000) {
        let m = model(24);
        let total = |s: SchedulerConfig| -> f64 {
            simulate(&m, 1e12, &s, &reqs).iterations.iter().map(|i| i.decode_flops).sum()
        };
        let chunked = total(SchedulerConfig::chunked(c));
        for other in [total(SchedulerConfig::layered(g)), total(SchedulerConfig::hybrid(c, g))] {
            prop_assert!((other - chunked).abs() <= 1e-9 * chunked.max(1.0));
        }
    }

    #[test]
    fn runs_are_reproducible(reqs in arb_trace(), s in arb_scheduler()) {
        let m = model(16);
        let a = simulate(&m, 1e12, &s, &reqs);
        let b = simulate(&m, 1e12, &s, &reqs);
        prop_assert_eq!(a.iterations, b.iterations);
        prop_assert_eq!(a.requests, b.requests);
    }

    #[test]
    fn sampled_coverage_is_seed_deterministic(reqs in arb_trace(), seed in any::<u64>()) {
        let m = model(8);
        let go = || {
            run(&m, &hw(1e12), &SchedulerConfig::chunked(256), &CoverageModel::Sampled { skew: 1.0 },
                reqs.clone(), RunOptions { seed, ..RunOptions::default() }).unwrap()
        };
        prop_assert_eq!(go().iterations, go().iterations);
    }
}

#[test]
fn late_arrival_leaves_an_idle_gap() {
    let m = model(8);
    let reqs = vec![Request::new(0, 0.0, 100, 2), Request::new(1, 50.0, 100, 2)];
    let out = simulate(&m, 1e12, &SchedulerConfig::layered(512), &reqs);
    assert_eq!(out.iterations.len(), 4);
    assert_eq!(out.iterations[2].start_s, 50.0);
    assert!(out.idle_s > 49.0);
}
