use std::time::Duration;

use helix_registry::{Limit, OnEmpty, PoolPolicy};
use helix_sim::{simulate, Arrival, EventKind, GenerationTime, SimConfig};
use proptest::prelude::*;

fn config() -> impl Strategy<Value = SimConfig> {
    (
        (0.1f64..20.0, prop_oneof![
            (0.0f64..3.0).prop_map(|seconds| GenerationTime::Fixed { seconds }),
            (-2.0f64..1.0, 0.0f64..1.0).prop_map(|(mu, sigma)| GenerationTime::Lognormal { mu, sigma }),
        ]),
        (1u32..8, prop_oneof![Just(Limit::Unlimited), (1u32..5).prop_map(Limit::Count)], 1u32..4),
        (prop::option::of(0.5f64..20.0), prop_oneof![Just(OnEmpty::Reject), Just(OnEmpty::ReuseLeastDeployed)]),
        (any::<u64>(), any::<bool>()),
    )
        .prop_map(|((rate, generation_time), (size, max, par), (ttl, on_empty), (rng_seed, warmup))| SimConfig {
            arrival: Arrival::Poisson { rate },
            generation_time,
            policy: PoolPolicy {
                target_pool_size: size,
                max_deploys_per_variant: max,
                variant_ttl: ttl.map(Duration::from_secs_f64),
                generator_parallelism: par,
                on_empty,
            },
            horizon: 60.0,
            rng_seed,
            variant_size_bytes: 100,
            warmup,
            record_events: true,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn results_are_consistent(c in config()) {
        let r = simulate(&c).unwrap();
        prop_assert_eq!(r.served + r.rejected, r.requests);
        let reusable = c.policy.max_deploys_per_variant == Limit::Unlimited && c.policy.variant_ttl.is_none();
        if c.policy.on_empty == OnEmpty::ReuseLeastDeployed && reusable {
            // once anything was served there is always something to reuse
            prop_assert!(r.rejected <= u64::from(!c.warmup) * r.requests);
        }
        for p in [r.uniqueness_ratio, r.repeat_serve_probability, r.pool_empty_fraction] {
            prop_assert!((0.0..=1.0).contains(&p), "{}", p);
        }
        prop_assert!((r.uniqueness_ratio + r.repeat_serve_probability - 1.0).abs() < 1e-12);
        prop_assert!(r.mean_storage_bytes <= r.max_storage_bytes as f64 + 1e-6);

        let events = r.events.clone().unwrap();
        prop_assert!(events.windows(2).all(|w| w[0].time <= w[1].time));
        let count = |k: EventKind| events.iter().filter(|e| e.event == k).count() as u64;
        prop_assert_eq!(count(EventKind::ServeFresh), r.unique);
        prop_assert_eq!(count(EventKind::ServeFresh) + count(EventKind::ServeReuse), r.served);
        prop_assert_eq!(count(EventKind::Generated), r.generated);
        prop_assert!(events.iter().all(|e| e.pool_fresh_count <= c.policy.target_pool_size as usize));

        prop_assert_eq!(serde_json::to_string(&r).unwrap(), serde_json::to_string(&simulate(&c).unwrap()).unwrap());
    }
}
