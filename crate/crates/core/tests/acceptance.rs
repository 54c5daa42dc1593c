//! Acceptance suite: every criterion runs, prints one PASS/FAIL line, and the
//! process exits non-zero if any failed.

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use moesim_core::config::load_spec;
use moesim_core::coverage::{
    expected_coverage_uniform, tokens_per_expert, ActivationSampler, CoverageModel, CoverageTable,
};
use moesim_core::engine::{write_events, Engine};
use moesim_core::experiment::{apply, simulate, sweep, SweepKey};
use moesim_core::metrics::{slo_attainment, RunSummary};
use moesim_core::scheduler::compute_num_groups;
use moesim_core::workload::{generate_requests, LengthDistribution, WorkloadConfig};
use moesim_core::{
    run, HardwareSpec, ModelSpec, Policy, Request, RequestId, RunConfig, RunOptions,
    SchedulerConfig, SloSpec,
};
use proptest::test_runner::{Config as PropConfig, TestCaseError, TestRunner};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn configs() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn config(name: &str) -> RunConfig {
    RunConfig::load(configs().join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn qwen() -> ModelSpec {
    load_spec(configs().join("models/qwen30b.toml")).unwrap()
}

fn h100() -> HardwareSpec {
    load_spec(configs().join("hardware/h100.toml")).unwrap()
}

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn c1_coverage_table() -> Outcome {
    let expected = [
        (1u64, 0.0625),
        (2, 0.117),
        (4, 0.213),
        (8, 0.29),
        (16, 0.445),
        (32, 0.547),
        (64, 0.694),
        (128, 0.863),
        (256, 0.934),
        (512, 0.98),
    ];
    let t = CoverageTable::measured();
    for (b, c) in expected {
        check(
            t.coverage(b) == c,
            format!("B={b}: {} != {c}", t.coverage(b)),
        )?;
    }
    check(
        t.coverage(2048) >= 0.98,
        "coverage beyond the table fell below 98%",
    )?;
    Ok("10/10 entries exact".into())
}

fn c2_uniform_sampler() -> Outcome {
    check(
        expected_coverage_uniform(1, 8, 128).unwrap() == 0.0625,
        "B=1 closed form",
    )?;
    const TRIALS: u64 = 1_000_000;
    const SHARDS: u64 = 16;
    let mut worst: f64 = 0.0;
    for b in [2u64, 8, 32, 128] {
        let total: f64 = (0..SHARDS)
            .into_par_iter()
            .map(|s| {
                let mut rng = ChaCha8Rng::seed_from_u64(1000 * b + s);
                let mut sampler = ActivationSampler::new(8, 128, 0.0);
                sampler.mean_coverage(b, TRIALS / SHARDS, &mut rng) * (TRIALS / SHARDS) as f64
            })
            .sum();
        let mc = total / TRIALS as f64;
        let exact = expected_coverage_uniform(b, 8, 128).unwrap();
        worst = worst.max((mc - exact).abs());
        check(
            (mc - exact).abs() <= 0.005,
            format!("B={b}: sampled {mc} vs {exact}"),
        )?;
    }
    Ok(format!("max |MC - closed form| = {worst:.2e}"))
}

fn c3_tokens_per_expert() -> Outcome {
    check(tokens_per_expert(2048, 8, 128) == 128.0, "2048 tokens")?;
    check(tokens_per_expert(8192, 8, 128) == 512.0, "8192 tokens")?;
    Ok("128 and 512".into())
}

fn c4_group_rule() -> Outcome {
    check(compute_num_groups(8192, 512, 48) == 16, "L=8192")?;
    check(compute_num_groups(512, 512, 48) == 1, "L=512")?;
    Ok("G(8192)=16, G(512)=1".into())
}

fn c5_exact_g() -> Outcome {
    let hw = h100();
    let mut runner = TestRunner::new(PropConfig {
        cases: 128,
        failure_persistence: None,
        ..PropConfig::default()
    });
    runner
        .run(
            &(1u32..40_000, 1u32..96, 64u64..4096, 1u32..6),
            |(len, layers, target, out)| {
                let model = ModelSpec { num_layers: layers, ..qwen() };
                let o = run(
                    &model,
                    &hw,
                    &SchedulerConfig::layered(target),
                    &CoverageModel::default(),
                    vec![Request::new(0, 0.0, len, out)],
                    RunOptions::default(),
                )
                .map_err(|e| TestCaseError::fail(e.to_string()))?;
                let g = compute_num_groups(len, target, layers) as usize;
                let r = &o.requests[0];
                let end = o.iterations[g - 1].start_s + o.iterations[g - 1].runtime_s;
                let prefill_iters = o.iterations.iter().filter(|i| i.prefill_tokens > 0).count();
                if prefill_iters != g || r.first_token_s != Some(end) {
                    return Err(TestCaseError::fail(format!(
                        "L={len} layers={layers} target={target}: {prefill_iters} prefill iterations, G={g}"
                    )));
                }
                Ok(())
            },
        )
        .map_err(|e| e.to_string())?;
    Ok("128 random (L, num_layers, target) cases".into())
}

fn c6_stall_free() -> Outcome {
    const TARGET: usize = 10_000;
    let model = qwen();
    let hw = h100();
    let mut summary = Vec::new();
    for sched in [
        SchedulerConfig::chunked(512),
        SchedulerConfig::layered(512),
        SchedulerConfig::hybrid(1024, 512),
    ] {
        let mut checked = 0usize;
        let mut seed = 0u64;
        while checked < TARGET {
            seed += 1;
            let workload = WorkloadConfig {
                request_rate: 3.0,
                duration_s: None,
                num_requests: Some(60),
                lengths: LengthDistribution::LogNormal {
                    in_mean: 3000.0,
                    in_std: 2500.0,
                    out_mean: 120.0,
                    out_std: 80.0,
                },
                seed: Some(seed),
            };
            let mut engine = Engine::new(
                &model,
                &hw,
                &sched,
                &CoverageModel::default(),
                generate_requests(&workload),
                RunOptions {
                    seed,
                    ..RunOptions::default()
                },
            )
            .map_err(|e| e.to_string())?;
            loop {
                let before: HashMap<RequestId, u32> = engine
                    .state()
                    .decoding()
                    .iter()
                    .map(|&id| (id, engine.state().request(id).tokens_emitted()))
                    .collect();
                let n = engine.records().len();
                if !engine.advance().map_err(|e| e.to_string())? {
                    break;
                }
                if engine.records().len() == n {
                    continue;
                }
                let rec = engine.records().last().unwrap();
                check(
                    rec.decode_batch_size as usize == before.len(),
                    format!(
                        "{}: decode batch {} vs {} decoding",
                        sched.policy,
                        rec.decode_batch_size,
                        before.len()
                    ),
                )?;
                for (id, emitted) in &before {
                    let now = engine.state().request(*id).tokens_emitted();
                    check(
                        now == emitted + 1,
                        format!("{}: {id} emitted {} tokens", sched.policy, now - emitted),
                    )?;
                }
                checked += 1;
            }
        }
        summary.push(format!("{} {checked}", sched.policy));
    }
    Ok(format!("iterations checked: {}", summary.join(", ")))
}

fn load_reduction(dataset: &str) -> Result<f64, String> {
    let layered =
        simulate(&config(&format!("qwen_{dataset}_layered.toml"))).map_err(|e| e.to_string())?;
    let chunked =
        simulate(&config(&format!("qwen_{dataset}_chunked.toml"))).map_err(|e| e.to_string())?;
    let lr: Vec<_> = layered
        .output
        .requests
        .iter()
        .map(|r| (r.arrival_s, r.input_len, r.output_len))
        .collect();
    let cr: Vec<_> = chunked
        .output
        .requests
        .iter()
        .map(|r| (r.arrival_s, r.input_len, r.output_len))
        .collect();
    check(lr == cr, "layered and chunked saw different traces")?;
    check(lr.len() == 100, "trace is not 100 requests")?;
    Ok(1.0 - layered.summary.total_expert_load_bytes / chunked.summary.total_expert_load_bytes)
}

fn c7_expert_load() -> Outcome {
    let arxiv = load_reduction("arxiv")?;
    let sharegpt = load_reduction("sharegpt")?;
    check(
        (0.25..=0.50).contains(&arxiv),
        format!("arXiv-like reduction {:.1}%", arxiv * 100.0),
    )?;
    check(
        (0.05..=0.25).contains(&sharegpt),
        format!("ShareGPT-like reduction {:.1}%", sharegpt * 100.0),
    )?;
    Ok(format!(
        "arXiv-like -{:.1}%, ShareGPT-like -{:.1}%",
        arxiv * 100.0,
        sharegpt * 100.0
    ))
}

fn c8_chunk_tradeoffs() -> Outcome {
    let cfg = config("qwen_arxiv_chunked.toml");
    let values: Vec<String> = ["512", "1024", "2048"].map(String::from).to_vec();
    let rows = sweep(&cfg, SweepKey::ChunkSize, &values).map_err(|e| e.to_string())?;
    let s: Vec<&RunSummary> = rows.iter().map(|r| &r.summary).collect();
    for w in s.windows(2) {
        check(
            w[1].expert_load_per_request_bytes < w[0].expert_load_per_request_bytes,
            "MoE load/request not decreasing",
        )?;
        check(
            w[1].energy_per_token_j < w[0].energy_per_token_j,
            "energy/token not decreasing",
        )?;
        check(w[1].tbt_p99_s > w[0].tbt_p99_s, "p99 TBT not increasing")?;
    }
    Ok(format!(
        "load/req GB {:.0}>{:.0}>{:.0}, mJ/tok {:.1}>{:.1}>{:.1}, p99 TBT ms {:.1}<{:.1}<{:.1}",
        s[0].expert_load_per_request_bytes / 1e9,
        s[1].expert_load_per_request_bytes / 1e9,
        s[2].expert_load_per_request_bytes / 1e9,
        s[0].energy_per_token_j * 1e3,
        s[1].energy_per_token_j * 1e3,
        s[2].energy_per_token_j * 1e3,
        s[0].tbt_p99_s * 1e3,
        s[1].tbt_p99_s * 1e3,
        s[2].tbt_p99_s * 1e3,
    ))
}

fn c9_degenerate() -> Outcome {
    let model = qwen();
    let hw = h100();
    let workload = WorkloadConfig {
        request_rate: 2.0,
        duration_s: None,
        num_requests: Some(40),
        lengths: LengthDistribution::LogNormal {
            in_mean: 4000.0,
            in_std: 3000.0,
            out_mean: 60.0,
            out_std: 30.0,
        },
        seed: Some(9),
    };
    let reqs = generate_requests(&workload);
    let longest = reqs.iter().map(|r| r.input_len).max().unwrap_or(1);
    let go = |s: SchedulerConfig| {
        run(
            &model,
            &hw,
            &s,
            &CoverageModel::default(),
            reqs.clone(),
            RunOptions::default(),
        )
        .map_err(|e| e.to_string())
    };
    let hybrid_g1 = go(SchedulerConfig::hybrid(512, u64::MAX))?;
    let chunked = go(SchedulerConfig::chunked(512))?;
    check(
        hybrid_g1.iterations == chunked.iterations,
        "hybrid(G=1) differs from chunked",
    )?;
    let hybrid_big = go(SchedulerConfig::hybrid(u64::from(longest) * 100, 512))?;
    let layered = go(SchedulerConfig::layered(512))?;
    check(
        hybrid_big.iterations == layered.iterations,
        "hybrid(C>=L) differs from layered",
    )?;
    let layered_g1 = go(SchedulerConfig::layered(u64::MAX))?;
    let chunked_big = go(SchedulerConfig::chunked(u64::MAX))?;
    let loads = |o: &moesim_core::RunOutput| {
        o.requests
            .iter()
            .map(|r| r.expert_load_bytes)
            .collect::<Vec<_>>()
    };
    check(
        loads(&layered_g1) == loads(&chunked_big),
        "layered(G=1) per-request loads differ from chunked(C>=L)",
    )?;
    Ok(format!(
        "{} and {} iteration records identical; per-request loads identical",
        chunked.iterations.len(),
        layered.iterations.len()
    ))
}

fn c10_energy() -> Outcome {
    let mut runs = 0;
    for name in [
        "qwen_arxiv_layered.toml",
        "qwen_sharegpt_chunked.toml",
        "gptoss_arxiv_layered.toml",
    ] {
        let o = simulate(&config(name)).map_err(|e| e.to_string())?.output;
        for r in &o.iterations {
            check(
                r.energy_static_j + r.energy_compute_j + r.energy_memory_j == r.energy_j,
                format!("{name}: iteration {} components do not sum", r.index),
            )?;
        }
        let e = o.energy;
        check(
            e.static_j + e.compute_j + e.memory_j == o.total_energy_j(),
            format!("{name}: run total"),
        )?;
        runs += 1;
    }
    let model = qwen();
    let hw = h100();
    let empty = run(
        &model,
        &hw,
        &SchedulerConfig::chunked(512),
        &CoverageModel::default(),
        vec![],
        RunOptions::default(),
    )
    .map_err(|e| e.to_string())?;
    check(
        empty.total_energy_j() == hw.static_power_w * empty.makespan_s,
        "empty run energy",
    )?;
    check(
        empty.energy.compute_j == 0.0 && empty.energy.memory_j == 0.0,
        "empty run dynamic energy",
    )?;
    Ok(format!("{runs} runs bit-exact; empty run static only"))
}

fn emitted(id: u64, arrival: f64, emits: &[f64]) -> Request {
    let mut r = Request::new(id, arrival, 100, emits.len() as u32);
    r.first_token_s = Some(emits[0]);
    r.token_emit_times_s = emits.to_vec();
    r
}

fn c11_slo() -> Outcome {
    let slo = SloSpec {
        ttft_s: 10.0,
        tbt_s: 0.125,
    };
    let reqs = [
        emitted(0, 0.0, &[2.0, 2.1, 2.2]),  // meets both
        emitted(1, 1.0, &[12.5, 12.6]),     // TTFT 11.5 s
        emitted(2, 0.0, &[3.0, 3.13, 3.2]), // one 130 ms gap
        emitted(3, 2.0, &[14.0, 14.2]),     // misses both
        emitted(4, 0.0, &[10.0]),           // TTFT exactly at the limit, no gaps
    ];
    let a = slo_attainment(&reqs, &slo);
    check(a.overall == 0.4, format!("overall {}", a.overall))?;
    check(a.ttft == 0.6, format!("ttft {}", a.ttft))?;
    check(a.tbt == 0.6, format!("tbt {}", a.tbt))?;
    check(
        a.overall <= a.ttft.min(a.tbt),
        "overall exceeds a component",
    )?;
    Ok("overall 0.4, TTFT 0.6, TBT 0.6".into())
}

fn c12_determinism() -> Outcome {
    for name in ["qwen_arxiv_layered.toml", "qwen_sharegpt_chunked.toml"] {
        let outputs: Vec<(String, Vec<u8>)> = (0..2)
            .map(|_| {
                let r = simulate(&config(name)).unwrap();
                let mut events = Vec::new();
                write_events(&r.output.iterations, &mut events).unwrap();
                (r.summary.to_json(), events)
            })
            .collect();
        check(
            outputs[0] == outputs[1],
            format!("{name}: outputs differ between runs"),
        )?;
    }
    Ok("summary JSON and event CSV byte-identical".into())
}

/// Highest swept rate whose attainment is at least 90%.
fn max_rate(cfg: &RunConfig, rates: &[String]) -> Result<f64, String> {
    let rows = sweep(cfg, SweepKey::RequestRate, rates).map_err(|e| e.to_string())?;
    Ok(rows
        .iter()
        .filter(|r| r.summary.slo_attainment_fraction >= 0.9)
        .map(|r| r.value.parse::<f64>().unwrap())
        .fold(0.0, f64::max))
}

fn c13_pareto() -> Outcome {
    let rates: Vec<String> = (0..15)
        .map(|i| format!("{:.1}", 1.0 + 0.2 * f64::from(i)))
        .collect();
    let chunked_cfg = config("qwen_arxiv_chunked.toml");
    let layered_cfg =
        apply(&chunked_cfg, SweepKey::Policy, "layered").map_err(|e| e.to_string())?;
    check(
        layered_cfg.scheduler.policy == Policy::Layered,
        "policy override",
    )?;
    let chunked = max_rate(&chunked_cfg, &rates)?;
    let layered = max_rate(&layered_cfg, &rates)?;
    check(
        layered > chunked,
        format!("layered {layered:.1} req/s vs chunked {chunked:.1} req/s"),
    )?;
    Ok(format!(
        "max rate at >=90% attainment: layered {layered:.1} req/s, chunked {chunked:.1} req/s"
    ))
}

fn main() {
    let criteria: [Criterion; 13] = [
        ("coverage table fidelity", c1_coverage_table),
        ("uniform coverage and sampler", c2_uniform_sampler),
        ("tokens per expert", c3_tokens_per_expert),
        ("group count rule", c4_group_rule),
        ("exact-G completion", c5_exact_g),
        ("stall-free decoding", c6_stall_free),
        ("expert-load reduction", c7_expert_load),
        ("chunk-size trade-offs", c8_chunk_tradeoffs),
        ("degenerate equivalences", c9_degenerate),
        ("energy accounting", c10_energy),
        ("SLO semantics", c11_slo),
        ("determinism", c12_determinism),
        ("rate sustained at 90% attainment", c13_pareto),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {why}", i + 1);
            }
        }
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
