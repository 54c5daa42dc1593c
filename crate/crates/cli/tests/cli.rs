use std::path::PathBuf;
use std::process::{Command, Output};

fn moesim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_moesim"))
        .args(args)
        .output()
        .expect("spawn moesim")
}

fn config(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
        .to_string_lossy()
        .into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

#[test]
fn help_documents_every_flag() {
    let o = moesim(&["--help"]);
    assert!(o.status.success());
    let top = stdout(&o);
    for cmd in ["run", "sweep", "coverage", "chunk-bench", "validate"] {
        assert!(top.contains(cmd), "{cmd} missing from help");
    }
    let run = stdout(&moesim(&["run", "--help"]));
    for flag in ["--seed", "--out", "--emit-events", "--format"] {
        assert!(run.contains(flag), "{flag} missing from run help");
    }
    let sweep = stdout(&moesim(&["sweep", "--help"]));
    for flag in ["--vary", "--values", "--seed", "--out", "--format"] {
        assert!(sweep.contains(flag), "{flag} missing from sweep help");
    }
}

#[test]
fn run_writes_full_summary_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for i in 0..2 {
        let summary = dir.path().join(format!("s{i}.json"));
        let events = dir.path().join(format!("e{i}.csv"));
        let o = moesim(&[
            "run",
            &config("qwen_arxiv_layered.toml"),
            "--out",
            summary.to_str().unwrap(),
            "--emit-events",
            events.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stderr(&o).contains("mJ/tok"));
        outputs.push((
            std::fs::read(&summary).unwrap(),
            std::fs::read(&events).unwrap(),
        ));
    }
    assert_eq!(outputs[0], outputs[1]);

    let json: serde_json::Value = serde_json::from_slice(&outputs[0].0).unwrap();
    for field in [
        "ttft_mean_s",
        "ttft_p99_s",
        "tbt_mean_s",
        "tbt_p99_s",
        "slo_attainment_fraction",
        "ttft_attainment_fraction",
        "tbt_attainment_fraction",
        "total_expert_load_bytes",
        "energy_per_token_j",
        "mean_decode_batch",
        "e2e_latency_mean_s",
    ] {
        assert!(json.get(field).is_some_and(|v| v.is_number()), "{field}");
    }
    let events = String::from_utf8(outputs[0].1.clone()).unwrap();
    assert!(events.starts_with("index,start_s,runtime_s,energy_j,"));
}

#[test]
fn run_csv_format() {
    let o = moesim(&[
        "run",
        &config("qwen_sharegpt_chunked.toml"),
        "--format",
        "csv",
    ]);
    assert!(o.status.success());
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0].split(',').count(), lines[1].split(',').count());
}

#[test]
fn seed_flag_changes_unpinned_workloads_only() {
    let dir = tempfile::tempdir().unwrap();
    let base = std::fs::read_to_string(config("qwen_sharegpt_layered.toml")).unwrap();
    let unpinned = base
        .replace("seed = 2024\n", "")
        .replace("include = \"", &format!("include = \"{}/", config("")));
    let path = dir.path().join("unpinned.toml");
    std::fs::write(&path, unpinned).unwrap();
    let p = path.to_str().unwrap();
    let a = stdout(&moesim(&["run", p, "--seed", "1"]));
    let b = stdout(&moesim(&["run", p, "--seed", "2"]));
    assert_ne!(a, b);
    let pinned = config("qwen_sharegpt_layered.toml");
    assert_eq!(
        stdout(&moesim(&["run", &pinned, "--seed", "1"])),
        stdout(&moesim(&["run", &pinned, "--seed", "2"]))
    );
}

#[test]
fn missing_scheduler_names_the_section() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(config("qwen_arxiv_layered.toml")).unwrap();
    let start = text.find("[scheduler]").unwrap();
    let end = text.find("[coverage]").unwrap();
    let broken = format!("{}{}", &text[..start], &text[end..]);
    let path = dir.path().join("broken.toml");
    std::fs::write(&path, broken).unwrap();
    for cmd in ["run", "validate"] {
        let o = moesim(&[cmd, path.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(1));
        let err = stderr(&o);
        assert!(
            err.contains("scheduler") && err.contains("broken.toml"),
            "{err}"
        );
    }
}

#[test]
fn horizon_abort_has_its_own_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(config("qwen_arxiv_chunked.toml"))
        .unwrap()
        .replace("seed = 1\n", "seed = 1\nmax_sim_s = 1.0\n")
        .replace("include = \"", &format!("include = \"{}/", config("")));
    let path = dir.path().join("short.toml");
    std::fs::write(&path, text).unwrap();
    let o = moesim(&["run", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("max_sim_s"));
}

#[test]
fn validate_accepts_every_sample() {
    for name in ["qwen_arxiv_chunked.toml", "gptoss_sharegpt_layered.toml"] {
        let o = moesim(&["validate", &config(name)]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stdout(&o).contains("ok"));
    }
}

#[test]
fn sweep_rows_follow_input_order() {
    let o = moesim(&[
        "sweep",
        &config("qwen_arxiv_chunked.toml"),
        "--vary",
        "chunk_size",
        "--values",
        "2048,512,1024",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let rows: Vec<&str> = text.lines().collect();
    assert!(rows[0].starts_with("chunk_size,seed,num_requests,"));
    let keys: Vec<&str> = rows[1..]
        .iter()
        .map(|r| r.split(',').next().unwrap())
        .collect();
    assert_eq!(keys, ["2048", "512", "1024"]);
    let seeds: Vec<&str> = rows[1..]
        .iter()
        .map(|r| r.split(',').nth(1).unwrap())
        .collect();
    assert_eq!(seeds, ["1", "2", "3"]);
}

#[test]
fn sweep_rejects_unknown_key_and_empty_values() {
    let cfg = config("qwen_arxiv_chunked.toml");
    let o = moesim(&["sweep", &cfg, "--vary", "temperature", "--values", "1"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("temperature"));
    let o = moesim(&["sweep", &cfg, "--vary", "chunk_size", "--values", ""]);
    assert!(!o.status.success());
}

#[test]
fn sweep_policy_json() {
    let o = moesim(&[
        "sweep",
        &config("qwen_sharegpt_chunked.toml"),
        "--vary",
        "policy",
        "--values",
        "chunked,layered,hybrid",
        "--format",
        "json",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 3);
    assert_eq!(rows[2]["value"], "hybrid");
}

#[test]
fn coverage_closed_form_column() {
    let o = moesim(&[
        "coverage",
        "--model",
        &config("models/qwen30b.toml"),
        "--trials",
        "200",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("batch,analytic,sampled,table"));
    for line in lines {
        let cols: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
        let expected = 1.0 - (1.0 - 8.0 / 128.0f64).powf(cols[0]);
        assert!((cols[1] - expected).abs() <= 1e-12, "{line}");
        if cols[0] == 1.0 {
            assert_eq!(cols[1], 0.0625);
            assert_eq!(cols[2], 0.0625);
        }
    }
}

#[test]
fn chunk_bench_loads_fall_with_chunk_size() {
    let o = moesim(&[
        "chunk-bench",
        "--model",
        &config("models/qwen30b.toml"),
        "--hw",
        &config("hardware/h100.toml"),
        "--chunk-sizes",
        "512,4096,8192",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let loads: Vec<f64> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
        .collect();
    assert_eq!(loads.len(), 3);
    assert!(loads[0] > loads[1] && loads[1] > loads[2]);
}
