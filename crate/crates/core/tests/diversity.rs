use std::collections::BTreeSet;
use std::path::Path;

use helix_core::corpus::{load_dir, Fixture};
use helix_core::lifter::lift;
use helix_core::transforms::{compose, PipelineSpec};

fn fixture(prefix: &str) -> Fixture {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    load_dir(&dir).unwrap().into_iter().find(|f| f.name.starts_with(prefix)).unwrap()
}

#[test]
fn twenty_seeds_give_nineteen_distinct_variants() {
    let f = fixture("33_");
    assert!(lift(&f.image).unwrap().blocks().len() >= 10);
    let spec = PipelineSpec::new(0, &["bilr", "stack_pad", "global_shuffle", "heap_pad"]);
    let inputs = f.header.inputs.sample(50, 2);
    let digests: BTreeSet<String> = (0..20)
        .map(|seed| {
            let check = f.check(&spec.with_seed(seed), &inputs).unwrap();
            assert!(check.passed());
            check.rewritten.digest_hex()
        })
        .collect();
    assert!(digests.len() >= 19, "{} distinct", digests.len());
}

#[test]
fn composition_warnings_on_real_programs() {
    let f = fixture("21_");
    let quiet = compose(&PipelineSpec::new(1, &["stack_pad", "global_shuffle"]), lift(&f.image).unwrap()).unwrap();
    assert!(quiet.warnings.is_empty(), "{:?}", quiet.warnings);
    let loud = compose(&PipelineSpec::new(1, &["indirect_to_direct", "cfi_check"]), lift(&f.image).unwrap()).unwrap();
    assert_eq!(loud.warnings.len(), 1);
    assert!(loud.warnings[0].contains("consumed"));
}
