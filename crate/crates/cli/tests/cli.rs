//! End-to-end CLI tests driving the binary on a small synthetic world.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn kbpoison() -> Command {
    Command::new(env!("CARGO_BIN_EXE_kbpoison"))
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn kbpoison");
    assert!(
        out.status.success(),
        "command failed: {:?}\nstdout: {}\nstderr: {}",
        cmd,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr),
    );
    out
}

/// Generates a small world and tightens the config for fast runs.
fn setup_world(dir: &Path) -> PathBuf {
    run_ok(kbpoison()
        .arg("gen-synthetic")
        .arg("--out-dir")
        .arg(dir)
        .arg("--vocab-size")
        .arg("200")
        .arg("--train")
        .arg("600")
        .arg("--eval")
        .arg("80")
        .arg("--seed")
        .arg("9"));
    let config = dir.join("config.json");
    assert!(config.exists());
    conf_overrides(&config);
    config
}

/// Rewrites the generated config with small optimizer settings.
fn conf_overrides(config: &Path) {
    let mut value: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(config).unwrap()).unwrap();
    let opt = value["optimizer"].as_object_mut().unwrap();
    opt["max_iters"] = 20.into();
    opt["patience"] = 8.into();
    opt["beam_width"] = 3.into();
    opt["top_m"] = 100.into();
    opt["coherence_samples"] = 6.into();
    opt["target_batch_size"] = 8.into();
    opt["batch_size"] = 16.into();
    opt["accumulation_steps"] = 1.into();
    value["retrieval"]["k"] = 2.into();
    value["poison"]["count"] = 2.into();
    value["embedder"]["dim"] = 16.into();
    std::fs::write(config, serde_json::to_string_pretty(&value).unwrap()).unwrap();
}

fn find_output(dir: &Path, prefix: &str, suffix: &str) -> PathBuf {
    let runs = dir.join("runs");
    let entry = std::fs::read_dir(&runs)
        .unwrap_or_else(|e| panic!("no runs dir {}: {e}", runs.display()))
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .find(|p| {
            let name = p.file_name().unwrap().to_string_lossy().to_string();
            name.starts_with(prefix) && name.ends_with(suffix)
        });
    entry.unwrap_or_else(|| panic!("missing {prefix}*{suffix} under {}", runs.display()))
}

#[test]
fn gen_synthetic_is_byte_identical_per_seed() {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    for dir in [&dir_a, &dir_b] {
        run_ok(kbpoison()
            .arg("gen-synthetic")
            .arg("--out-dir")
            .arg(dir.path())
            .arg("--vocab-size")
            .arg("150")
            .arg("--train")
            .arg("100")
            .arg("--eval")
            .arg("20")
            .arg("--seed")
            .arg("7"));
    }
    for file in ["corpus.jsonl", "vocab.txt", "outcome_rules.json", "synonyms.json"] {
        let a = std::fs::read(dir_a.path().join(file)).unwrap();
        let b = std::fs::read(dir_b.path().join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between identical-seed runs");
    }
}

#[test]
fn optimize_writes_deterministic_trigger_and_trace() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup_world(dir.path());

    run_ok(kbpoison().arg("optimize").arg("--config").arg(&config));
    let trigger_path = find_output(dir.path(), "trigger_", ".json");
    let trace_path = find_output(dir.path(), "trace_", ".jsonl");
    let first = std::fs::read(&trigger_path).unwrap();
    let first_trace = std::fs::read(&trace_path).unwrap();

    // Same config and seeds: byte-identical artifacts.
    run_ok(kbpoison().arg("optimize").arg("--config").arg(&config));
    assert_eq!(first, std::fs::read(&trigger_path).unwrap());
    assert_eq!(first_trace, std::fs::read(&trace_path).unwrap());

    // The trigger file carries tokens, text, objective and losses.
    let parsed: serde_json::Value = serde_json::from_slice(&first).unwrap();
    assert!(parsed["tokens"].is_array());
    assert!(parsed["text"].is_string());
    assert!(parsed["objective"].is_number());
    assert!(parsed["losses"]["uniqueness"].is_number());

    // The resolved config is persisted next to the artifacts.
    find_output(dir.path(), "resolved_config_", ".json");
}

#[test]
fn evaluate_defend_project_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup_world(dir.path());
    run_ok(kbpoison().arg("optimize").arg("--config").arg(&config));
    let trigger = find_output(dir.path(), "trigger_", ".json");

    let out = run_ok(kbpoison()
        .arg("evaluate")
        .arg("--config")
        .arg(&config)
        .arg("--trigger")
        .arg(&trigger)
        .arg("--export-kb"));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("asr_r"), "{stdout}");

    let metrics = find_output(dir.path(), "metrics_", ".csv");
    let body = std::fs::read_to_string(&metrics).unwrap();
    let mut lines = body.lines();
    let header = lines.next().unwrap();
    assert!(header.starts_with("label,config_hash,seed,asr_r,asr_a"));
    assert!(lines.next().unwrap().starts_with("attack,"));

    let trace = find_output(dir.path(), "retrieval_trace_", ".csv");
    let trace_body = std::fs::read_to_string(&trace).unwrap();
    assert!(trace_body.starts_with("query_id,rank,entry_id,similarity,poisoned"));

    find_output(dir.path(), "kb_poisoned_", ".jsonl");

    run_ok(kbpoison()
        .arg("defend")
        .arg("--config")
        .arg(&config)
        .arg("--trigger")
        .arg(&trigger)
        .arg("--defense")
        .arg("ppl,word,letter,rephrase"));
    let defense = find_output(dir.path(), "defense_", ".csv");
    let defense_body = std::fs::read_to_string(&defense).unwrap();
    assert_eq!(defense_body.lines().count(), 5, "{defense_body}");

    run_ok(kbpoison()
        .arg("project")
        .arg("--config")
        .arg(&config)
        .arg("--trigger")
        .arg(&trigger));
    let projection = find_output(dir.path(), "projection_", ".csv");
    let proj_body = std::fs::read_to_string(&projection).unwrap();
    for label in ["benign", "triggered", "center", "poisoned_key"] {
        assert!(proj_body.contains(label), "projection missing {label}");
    }
}

#[test]
fn sweep_writes_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup_world(dir.path());
    run_ok(kbpoison()
        .arg("sweep")
        .arg("--config")
        .arg(&config)
        .arg("--set")
        .arg("optimizer.max_iters=5")
        .arg("--axis")
        .arg("poison_count")
        .arg("--values")
        .arg("1,2"));
    let path = find_output(dir.path(), "sweep_", ".csv");
    let body = std::fs::read_to_string(&path).unwrap();
    assert_eq!(body.lines().count(), 3, "{body}");
    assert!(body.starts_with("poison_count,"));
}

#[test]
fn config_errors_use_exit_code_one() {
    // Missing corpus path.
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    std::fs::write(
        &config,
        serde_json::json!({"paths": {"corpus": "/nonexistent/c.jsonl"}}).to_string(),
    )
    .unwrap();
    let out = kbpoison()
        .arg("optimize")
        .arg("--config")
        .arg(&config)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("paths.corpus"), "{stderr}");

    // Unknown field in the config file names the offender.
    std::fs::write(&config, r#"{"retrieval": {"kk": 2}}"#).unwrap();
    let out = kbpoison()
        .arg("optimize")
        .arg("--config")
        .arg(&config)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("kk"));
}

#[test]
fn trigger_vocab_mismatch_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup_world(dir.path());
    let trigger = dir.path().join("bad_trigger.json");
    std::fs::write(
        &trigger,
        serde_json::json!({"tokens": [99999], "text": "x"}).to_string(),
    )
    .unwrap();
    let out = kbpoison()
        .arg("evaluate")
        .arg("--config")
        .arg(&config)
        .arg("--trigger")
        .arg(&trigger)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("vocab"));
}

#[test]
fn overrides_change_the_config_hash() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup_world(dir.path());
    run_ok(kbpoison().arg("optimize").arg("--config").arg(&config));
    let first = find_output(dir.path(), "trigger_", ".json");
    run_ok(kbpoison()
        .arg("optimize")
        .arg("--config")
        .arg(&config)
        .arg("--set")
        .arg("seeds.optimizer=4242"));
    // A new hash means a second trigger artifact appears.
    let count = std::fs::read_dir(dir.path().join("runs"))
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| {
            let name = e.file_name().to_string_lossy().to_string();
            name.starts_with("trigger_") && name.ends_with(".json")
        })
        .count();
    assert_eq!(count, 2, "expected a second trigger file next to {first:?}");
}
