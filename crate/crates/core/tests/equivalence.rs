use std::path::Path;

use helix_core::corpus::{load_dir, Fixture};
use helix_core::transforms::{catalog, PipelineSpec, CANONICAL_PIPELINES};

const INPUTS_PER_CASE: usize = 50;

fn fixtures() -> Vec<Fixture> {
    load_dir(&Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")).unwrap()
}

fn pipelines() -> Vec<(String, Vec<&'static str>)> {
    let singles = catalog().iter().map(|p| (p.name().to_string(), vec![p.name()]));
    let canon = CANONICAL_PIPELINES.iter().map(|(n, s)| (n.to_string(), s.to_vec()));
    singles.chain(canon).collect()
}

#[test]
fn corpus_covers_every_program_shape() {
    let all = fixtures();
    assert!(all.len() >= 30, "{} fixtures", all.len());
    let has = |pred: &dyn Fn(&str) -> bool| all.iter().filter(|f| pred(&f.source)).count();
    assert!(has(&|s| s.contains("jmpi") || s.contains("calli")) >= 3);
    assert!(has(&|s| s.contains(".global")) >= 4);
    assert!(has(&|s| s.contains("alloc")) >= 4);
    assert!(has(&|s| s.contains("call ")) >= 4);
    assert!(all.iter().filter(|f| f.header.attack.is_some()).count() >= 2);
}

#[test]
fn every_fixture_survives_every_plugin_and_pipeline() {
    let mut failures = Vec::new();
    let mut cases = 0;
    for (k, fixture) in fixtures().iter().enumerate() {
        let inputs = fixture.header.inputs.sample(INPUTS_PER_CASE, 1000 + k as u64);
        for (name, stages) in pipelines() {
            cases += 1;
            let spec = PipelineSpec::new(k as u64 * 31 + 7, &stages);
            match fixture.check(&spec, &inputs) {
                Ok(check) if check.passed() => {}
                Ok(check) => failures.push(format!(
                    "{} / {name}: {} divergences, attack {:?}",
                    fixture.name,
                    check.report.divergences.len(),
                    check.attack.map(|a| (a.original.termination, a.rewritten.termination))
                )),
                Err(e) => failures.push(format!("{} / {name}: {e}", fixture.name)),
            }
        }
    }
    assert_eq!(cases, fixtures().len() * 12);
    assert!(failures.is_empty(), "{}", failures.join("\n"));
}

#[test]
fn hardening_fixtures_misbehave_before_and_trap_after() {
    for fixture in fixtures().iter().filter(|f| f.header.attack.is_some()) {
        let stages: Vec<&str> = fixture.header.hardened_by.iter().map(String::as_str).collect();
        for plugin in stages {
            let check = fixture.check(&PipelineSpec::new(3, &[plugin]), &[]).unwrap();
            let attack = check.attack.expect("hardening pipeline runs the attack");
            assert!(attack.stopped(), "{} / {plugin}: {:?}", fixture.name, attack);
        }
    }
}
