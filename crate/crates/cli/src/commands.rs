use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::Context;
use serde_json::{json, Value};

use helix_core::corpus::InputDomain;
use helix_core::emitter::{emit, EmitOptions};
use helix_core::isa::{assemble, disassemble, execute, ProgramImage};
use helix_core::lifter::{compare_on_inputs, lift};
use helix_core::transforms::{compose, PipelineSpec};
use helix_registry::client::RegistryClient;
use helix_registry::http::{serve_blocking, ServerConfig};
use helix_sim::replay::{replay, ReplayOptions};
use helix_sim::{load_trace, simulate, write_event_csv, Arrival, SimConfig};

use crate::inputs::{parse_range, parse_words, InputSource, Usage};

pub const DIVERGED: u8 = 3;

/// What a subcommand prints: `text` normally, `json` under `--json`.
pub struct Report {
    pub json: Option<Value>,
    pub text: String,
    pub status: u8,
}

impl Report {
    fn ok(json: Value, text: String) -> Report {
        Report { json: Some(json), text, status: 0 }
    }
}

fn read(path: &Path) -> anyhow::Result<Vec<u8>> {
    std::fs::read(path).with_context(|| format!("reading {}", path.display()))
}

fn read_text(path: &Path) -> anyhow::Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn load_image(path: &Path) -> anyhow::Result<ProgramImage> {
    ProgramImage::from_bytes(&read(path)?).with_context(|| format!("decoding {}", path.display()))
}

fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    serde_json::from_str(&read_text(path)?).with_context(|| format!("parsing {}", path.display()))
}

fn image_summary(path: &Path, image: &ProgramImage) -> Value {
    json!({
        "path": path,
        "digest": image.digest_hex(),
        "bytes": image.to_bytes().len(),
        "instructions": image.code.len(),
        "data_objects": image.data.len(),
    })
}

pub fn asm(source: &Path, output: &Path) -> anyhow::Result<Report> {
    let image = assemble(&read_text(source)?).with_context(|| format!("assembling {}", source.display()))?;
    write(output, &image.to_bytes())?;
    let text = format!("{}: {} instructions, digest {}\n", output.display(), image.code.len(), image.digest_hex());
    Ok(Report::ok(image_summary(output, &image), text))
}

pub fn dasm(path: &Path) -> anyhow::Result<Report> {
    let source = disassemble(&load_image(path)?);
    Ok(Report::ok(json!({ "source": source }), source))
}

pub fn run(path: &Path, input: &str, step_limit: u64) -> anyhow::Result<Report> {
    let image = load_image(path)?;
    let words = parse_words(input)?;
    let result = execute(&image, &words, step_limit);
    let mut text = String::new();
    for w in &result.output {
        writeln!(text, "{w}")?;
    }
    let termination = match serde_json::to_value(result.termination)? {
        Value::String(name) => name,
        Value::Object(map) => map.iter().map(|(k, v)| format!("{k} {}", v.as_str().unwrap_or_default())).collect(),
        other => other.to_string(),
    };
    writeln!(text, "termination: {termination} after {} steps", result.steps)?;
    Ok(Report::ok(serde_json::to_value(&result)?, text))
}

pub fn transform(path: &Path, pipeline: &Path, output: &Path) -> anyhow::Result<Report> {
    let image = load_image(path)?;
    let spec: PipelineSpec = load_json(pipeline)?;
    let outcome = compose(&spec, lift(&image)?)?;
    let rewritten = emit(&outcome.ir, &EmitOptions::default())?;
    write(output, &rewritten.to_bytes())?;

    let mut text = String::new();
    let stages: Vec<Value> = outcome
        .stages
        .iter()
        .map(|s| {
            let ms = s.duration.as_secs_f64() * 1e3;
            let _ = writeln!(text, "stage {} {:<20} work {:>4}  {ms:.3} ms", s.index, s.plugin, s.work_items);
            json!({"index": s.index, "plugin": s.plugin, "seed": s.seed, "work_items": s.work_items, "duration_ms": ms})
        })
        .collect();
    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }
    writeln!(text, "{}: digest {}", output.display(), rewritten.digest_hex())?;
    let json = json!({ "output": image_summary(output, &rewritten), "stages": stages, "warnings": outcome.warnings });
    Ok(Report::ok(json, text))
}

pub fn verify(a: &Path, b: &Path, inputs: &str, len: usize, range: &str) -> anyhow::Result<Report> {
    let (lo, hi) = parse_range(range)?;
    let source = InputSource::parse(inputs)?;
    let (ia, ib) = (load_image(a)?, load_image(b)?);
    let inputs = source.load(InputDomain { len, lo, hi })?;
    let report = compare_on_inputs(&ia, &ib, &inputs);
    let text = match report.divergences.first() {
        None => format!("equivalent on {} inputs\n", report.inputs_checked),
        Some(d) => format!(
            "diverged on {} of {} inputs; first at input {} {:?}:\n  {}: {:?} {:?}\n  {}: {:?} {:?}\n",
            report.divergences.len(),
            report.inputs_checked,
            d.input_index,
            d.input,
            a.display(),
            d.original.output,
            d.original.termination,
            b.display(),
            d.rewritten.output,
            d.rewritten.termination,
        ),
    };
    let status = if report.is_equivalent() { 0 } else { DIVERGED };
    let mut json = serde_json::to_value(&report)?;
    json["equivalent"] = json!(report.is_equivalent());
    Ok(Report { json: Some(json), text, status })
}

pub fn serve(config: Option<&Path>, listen: Option<String>, data_dir: Option<PathBuf>, json: bool) -> anyhow::Result<Report> {
    let mut cfg: ServerConfig = match config {
        Some(path) => load_json(path)?,
        None => ServerConfig::default(),
    };
    if let Some(listen) = listen {
        cfg.listen = listen;
    }
    if data_dir.is_some() {
        cfg.data_dir = data_dir;
    }
    serve_blocking(&cfg, |addr| {
        if json {
            println!("{}", json!({"listening": format!("http://{addr}"), "data_dir": cfg.data_dir}));
        } else {
            eprintln!("listening on http://{addr}");
        }
    })
    .with_context(|| format!("serving on {}", cfg.listen))?;
    Ok(Report { json: None, text: String::new(), status: 0 })
}

pub struct ReplayArgs {
    pub url: String,
    pub image: PathBuf,
    pub pipeline: PathBuf,
    pub image_name: String,
    pub time_scale: f64,
}

fn summary(value: &Value) -> String {
    let mut text = String::new();
    if let Value::Object(map) = value {
        for (k, v) in map.iter().filter(|(k, _)| *k != "events") {
            let _ = writeln!(text, "{k}: {v}");
        }
    }
    text
}

pub fn sim(path: &Path, events_csv: Option<&Path>, replay_args: Option<ReplayArgs>) -> anyhow::Result<Report> {
    let mut cfg: SimConfig = load_json(path)?;
    // trace paths are relative to the config file
    if let Arrival::Trace { file } = &mut cfg.arrival {
        if file.is_relative() {
            *file = path.parent().unwrap_or(Path::new(".")).join(&*file);
        }
    }
    if events_csv.is_some() {
        cfg.record_events = true;
    }

    let Some(args) = replay_args else {
        let mut result = simulate(&cfg)?;
        if let Some(csv) = events_csv {
            let mut out = Vec::new();
            write_event_csv(result.events.as_deref().unwrap_or_default(), &mut out)?;
            write(csv, &out)?;
            result.events = None;
        }
        let json = serde_json::to_value(&result)?;
        return Ok(Report::ok(json.clone(), summary(&json)));
    };

    let Arrival::Trace { file } = &cfg.arrival else {
        return Err(Usage("--replay needs a trace arrival in the sim config".to_string()).into());
    };
    let times = load_trace(file)?;
    let image = load_image(&args.image)?;
    let pipeline: PipelineSpec = load_json(&args.pipeline)?;
    let client = RegistryClient::new(&args.url);
    client.health().context("registry health check")?;
    let mut opts = ReplayOptions::new(&args.image_name, image, pipeline, args.time_scale);
    opts.warmup_timeout = Duration::from_secs(60);
    let mut report = replay(&client, &cfg, &times, &opts)?;
    if let Some(csv) = events_csv {
        let mut out = Vec::new();
        write_event_csv(report.simulated.events.as_deref().unwrap_or_default(), &mut out)?;
        write(csv, &out)?;
        report.simulated.events = None;
    }
    if !report.within_tolerance {
        eprintln!("warning: simulation and live registry diverge by {:.4}", report.divergence);
    }
    let json = serde_json::to_value(&report)?;
    let text = format!(
        "simulated uniqueness {:.4}, live {:.4}, divergence {:.4} (tolerance {})\n",
        report.simulated.uniqueness_ratio, report.live.uniqueness_ratio, report.divergence, report.tolerance
    );
    Ok(Report { json: Some(json), text, status: if report.within_tolerance { 0 } else { DIVERGED } })
}
