use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::sync::Arc;

use serde_json::Value;
use tempfile::TempDir;

use helix_core::isa::{Opcode, ProgramImage};
use helix_registry::client::RegistryClient;
use helix_registry::http::spawn_server;
use helix_registry::{PipelineGenerator, PoolPolicy, Registry, RegistryOptions, SystemClock};

const SEVEN: &str = "movi r0, 7\nout r0\nhalt\n";

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures").join(name)
}

fn helix(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_helix")).args(args).output().expect("spawn helix")
}

fn status(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("not one JSON object ({e}): {}", stdout(out)))
}

struct Work(TempDir);

impl Work {
    fn new() -> Work {
        Work(tempfile::tempdir().unwrap())
    }

    fn path(&self, name: &str) -> String {
        self.0.path().join(name).to_string_lossy().into_owned()
    }

    fn file(&self, name: &str, contents: &str) -> String {
        let p = self.path(name);
        std::fs::write(&p, contents).unwrap();
        p
    }

    fn asm(&self, source: &str, name: &str) -> String {
        let src = self.file(&format!("{name}.dasm"), source);
        let out = self.path(&format!("{name}.disa"));
        assert_eq!(status(&helix(&["asm", &src, "-o", &out])), 0);
        out
    }

    fn asm_fixture(&self, fixture_name: &str) -> String {
        let source = std::fs::read_to_string(fixture(&format!("{fixture_name}.dasm"))).unwrap();
        self.asm(&source, fixture_name)
    }
}

#[test]
fn run_prints_the_output_word() {
    let w = Work::new();
    let image = w.asm(SEVEN, "seven");
    let out = helix(&["run", &image]);
    assert_eq!(status(&out), 0);
    assert_eq!(stdout(&out).lines().next(), Some("7"));
    let j = json(&helix(&["run", &image, "--json"]));
    assert_eq!(j["output"], serde_json::json!([7]));
    assert_eq!(j["termination"], "halt");
}

#[test]
fn run_takes_input_words_and_a_step_limit() {
    let w = Work::new();
    let image = w.asm_fixture("12_countdown");
    let out = helix(&["run", &image, "--input", "3"]);
    assert_eq!(stdout(&out).lines().take(3).collect::<Vec<_>>(), ["3", "2", "1"]);
    let j = json(&helix(&["run", &image, "--input", "-2", "--json"]));
    assert_eq!(j["output"], serde_json::json!([-1]));
    let j = json(&helix(&["run", &image, "--input", "1000", "--step-limit", "20", "--json"]));
    assert_eq!(j["termination"], "step_limit");
}

#[test]
fn dasm_output_reassembles_to_the_same_bytes() {
    let w = Work::new();
    let image = w.asm_fixture("21_jt_in_frame");
    let text = stdout(&helix(&["dasm", &image]));
    let again = w.asm(&text, "again");
    assert_eq!(std::fs::read(&image).unwrap(), std::fs::read(&again).unwrap());
    assert!(json(&helix(&["dasm", &image, "--json"]))["source"].as_str().unwrap().contains("halt"));
}

#[test]
fn transform_then_verify_is_equivalent() {
    let w = Work::new();
    let image = w.asm_fixture("17_switch4");
    let spec = w.file("bilr.json", r#"{"master_seed": 5, "stages": [{"plugin": "bilr"}]}"#);
    let out_path = w.path("out.disa");
    let t = helix(&["transform", &image, "--pipeline", &spec, "-o", &out_path]);
    assert_eq!(status(&t), 0, "{}", String::from_utf8_lossy(&t.stderr));
    assert!(stdout(&t).contains("bilr"));
    let v = helix(&["verify", &image, &out_path, "--inputs", "random:50:1", "--input-len", "1", "--input-range", "-2..6"]);
    assert_eq!(status(&v), 0, "{}", stdout(&v));
    let j = json(&helix(&["verify", &image, &out_path, "--inputs", "random:50:1", "--json"]));
    assert_eq!(j["equivalent"], true);
    assert_eq!(j["inputs_checked"], 50);
}

#[test]
fn transform_reports_stages_and_warnings() {
    let w = Work::new();
    let image = w.asm_fixture("21_jt_in_frame");
    let spec = w.file("p4.json", r#"{"master_seed": 1, "stages": [{"plugin": "indirect_to_direct"}, {"plugin": "cfi_check"}]}"#);
    let out_path = w.path("out.disa");
    let t = helix(&["transform", &image, "--pipeline", &spec, "-o", &out_path, "--json"]);
    assert_eq!(status(&t), 0);
    let j = json(&t);
    assert_eq!(j["stages"].as_array().unwrap().len(), 2);
    assert_eq!(j["warnings"].as_array().unwrap().len(), 1);
    assert!(String::from_utf8_lossy(&t.stderr).contains("warning: stage 1 (cfi_check)"));
}

#[test]
fn transform_output_is_byte_deterministic() {
    let w = Work::new();
    let image = w.asm_fixture("33_diverse");
    let spec = w.file(
        "p1.json",
        r#"{"master_seed": 77, "stages": [{"plugin": "bilr"}, {"plugin": "stack_pad"}, {"plugin": "global_shuffle"}, {"plugin": "heap_pad"}]}"#,
    );
    let (a, b) = (w.path("a.disa"), w.path("b.disa"));
    helix(&["transform", &image, "--pipeline", &spec, "-o", &a]);
    helix(&["transform", &image, "--pipeline", &spec, "-o", &b]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn verify_catches_a_corrupted_image() {
    let w = Work::new();
    let image = w.asm_fixture("05_poly");
    let mut corrupt = ProgramImage::from_bytes(&std::fs::read(&image).unwrap()).unwrap();
    let k = corrupt.code.iter().position(|i| i.op == Opcode::Movi).expect("a movi to corrupt");
    corrupt.code[k].imm += 1;
    let bad = w.path("bad.disa");
    std::fs::write(&bad, corrupt.to_bytes()).unwrap();
    let v = helix(&["verify", &image, &bad, "--inputs", "random:20:3"]);
    assert_eq!(status(&v), 3);
    assert!(stdout(&v).starts_with("diverged on"));
    let j = json(&helix(&["verify", &image, &bad, "--inputs", "random:20:3", "--json"]));
    assert_eq!(j["equivalent"], false);
}

#[test]
fn verify_reads_input_files() {
    let w = Work::new();
    let image = w.asm_fixture("12_countdown");
    let inputs = w.file("inputs.txt", "# one word each\n3\n0\n-4\n");
    let j = json(&helix(&["verify", &image, &image, "--inputs", &inputs, "--json"]));
    assert_eq!(j["inputs_checked"], 3);
    let bad = w.file("bad.txt", "1\nx\n");
    assert_eq!(status(&helix(&["verify", &image, &image, "--inputs", &bad])), 2);
}

#[test]
fn exit_codes_separate_usage_from_operational_errors() {
    let w = Work::new();
    let image = w.asm(SEVEN, "seven");
    assert_eq!(status(&helix(&[])), 2);
    assert_eq!(status(&helix(&["run"])), 2);
    assert_eq!(status(&helix(&["frobnicate"])), 2);
    assert_eq!(status(&helix(&["run", &image, "--input", "1,zz"])), 2);
    assert_eq!(status(&helix(&["verify", &image, &image, "--inputs", "random:5"])), 2);
    assert_eq!(status(&helix(&["verify", &image, &image, "--inputs", "random:5:1", "--input-range", "9..1"])), 2);
    assert_eq!(status(&helix(&["--help"])), 0);

    let missing = helix(&["run", &w.path("nope.disa")]);
    assert_eq!(status(&missing), 1);
    assert!(missing.stdout.is_empty());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nope.disa"));
    let garbage = w.file("garbage.disa", "not an image");
    assert_eq!(status(&helix(&["dasm", &garbage])), 1);
    let bad_src = w.file("bad.dasm", "frob r0\n");
    assert_eq!(status(&helix(&["asm", &bad_src, "-o", &w.path("x.disa")])), 1);

    let j = helix(&["run", &w.path("nope.disa"), "--json"]);
    let err: Value = serde_json::from_slice(&j.stderr).unwrap();
    assert_eq!(err["code"], "error");
}

fn sim_config(w: &Work, arrival: &str) -> String {
    w.file(
        "sim.json",
        &format!(
            r#"{{
  "arrival": {arrival},
  "generation_time": {{"kind": "fixed", "seconds": 0.5}},
  "policy": {{"target_pool_size": 4, "max_deploys_per_variant": 2, "variant_ttl": null,
              "generator_parallelism": 1, "on_empty": "reuse_least_deployed"}},
  "horizon": 500,
  "rng_seed": 42
}}"#
        ),
    )
}

#[test]
fn sim_json_is_deterministic() {
    let w = Work::new();
    let cfg = sim_config(&w, r#"{"kind": "poisson", "rate": 5}"#);
    let a = helix(&["sim", "--config", &cfg, "--json"]);
    let b = helix(&["sim", "--config", &cfg, "--json"]);
    assert_eq!(status(&a), 0, "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(a.stdout, b.stdout);
    let j = json(&a);
    let u = j["uniqueness_ratio"].as_f64().unwrap();
    assert!((j["repeat_serve_probability"].as_f64().unwrap() - (1.0 - u)).abs() < 1e-12);
    assert!(stdout(&helix(&["sim", "--config", &cfg])).contains("uniqueness_ratio: "));
}

#[test]
fn sim_reads_traces_relative_to_the_config_and_writes_csv() {
    let w = Work::new();
    w.file("trace.txt", "0.5\n1.0\n1.0\n2.5\n");
    let cfg = sim_config(&w, r#"{"kind": "trace", "file": "trace.txt"}"#);
    let csv = w.path("events.csv");
    let j = json(&helix(&["sim", "--config", &cfg, "--events-csv", &csv, "--json"]));
    assert_eq!(j["requests"], 4);
    assert!(j.get("events").is_none());
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("time,event,variant_id,pool_fresh_count\n"));
    assert_eq!(text.lines().filter(|l| l.contains(",serve_")).count(), 4);

    w.file("trace.txt", "2\n1\n");
    assert_eq!(status(&helix(&["sim", "--config", &cfg])), 1);
    let bad = w.file("bad.json", r#"{"arrival": {"kind": "poisson", "rate": 0}}"#);
    assert_eq!(status(&helix(&["sim", "--config", &bad])), 1);
}

#[test]
fn sim_replays_against_a_live_registry() {
    let w = Work::new();
    // sparse requests and fast generation: every request gets a fresh
    // variant on both sides
    let trace: String = (1..=30).map(|k| format!("{}\n", k as f64 * 2.0)).collect();
    w.file("trace.txt", &trace);
    let cfg = w.file(
        "sim.json",
        r#"{"arrival": {"kind": "trace", "file": "trace.txt"},
            "generation_time": {"kind": "fixed", "seconds": 0.01},
            "policy": {"target_pool_size": 2, "max_deploys_per_variant": 1, "generator_parallelism": 1},
            "horizon": 100, "rng_seed": 1}"#,
    );
    let image = w.asm_fixture("24_global_three");
    let spec = w.file("p3.json", r#"{"master_seed": 3, "stages": [{"plugin": "stack_pad"}, {"plugin": "global_shuffle"}]}"#);
    let registry = Registry::new(Arc::new(PipelineGenerator), Arc::new(SystemClock), RegistryOptions::default());
    let server = spawn_server(registry, PoolPolicy::default(), "127.0.0.1:0").unwrap();
    let out = helix(&[
        "sim", "--config", &cfg, "--replay", &server.url(), "--image", &image, "--pipeline", &spec,
        "--time-scale", "0.01", "--json",
    ]);
    assert_eq!(status(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let j = json(&out);
    assert_eq!(j["live"]["requests"], 30);
    assert_eq!(j["live"]["uniqueness_ratio"], 1.0);
    assert_eq!(j["within_tolerance"], true);

    // replay needs its image and pipeline
    assert_eq!(status(&helix(&["sim", "--config", &cfg, "--replay", &server.url()])), 2);
    drop(server);
    let dead = helix(&["sim", "--config", &cfg, "--replay", "http://127.0.0.1:1", "--image", &image, "--pipeline", &spec]);
    assert_eq!(status(&dead), 1);
}

#[test]
fn serve_announces_its_address_and_answers() {
    let w = Work::new();
    let cfg = w.file("serve.json", r#"{"listen": "127.0.0.1:9", "default_policy": {"target_pool_size": 2}}"#);
    let mut child = Command::new(env!("CARGO_BIN_EXE_helix"))
        .args(["serve", "--config", &cfg, "--listen", "127.0.0.1:0", "--json"])
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let announced: Value = serde_json::from_str(&line).unwrap();
    let url = announced["listening"].as_str().unwrap().to_string();
    let healthy = RegistryClient::new(&url).health();
    child.kill().unwrap();
    child.wait().unwrap();
    healthy.unwrap();

    let bad = w.file("bad.json", r#"{"listen": "127.0.0.1:0", "bogus": 1}"#);
    assert_eq!(status(&helix(&["serve", "--config", &bad])), 1);
}
