use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// What `acquire` does when no fresh variant is left.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OnEmpty {
    /// Serve the live deployed variant with the fewest deploys.
    #[default]
    ReuseLeastDeployed,
    Reject,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Keyword {
    Unlimited,
}

/// A deploy limit: a positive count, or `"unlimited"` in JSON.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "LimitRepr", into = "LimitRepr")]
pub enum Limit {
    Count(u32),
    Unlimited,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum LimitRepr {
    Count(u32),
    Keyword(Keyword),
}

impl From<LimitRepr> for Limit {
    fn from(r: LimitRepr) -> Limit {
        match r {
            LimitRepr::Count(n) => Limit::Count(n),
            LimitRepr::Keyword(Keyword::Unlimited) => Limit::Unlimited,
        }
    }
}

impl From<Limit> for LimitRepr {
    fn from(l: Limit) -> LimitRepr {
        match l {
            Limit::Count(n) => LimitRepr::Count(n),
            Limit::Unlimited => LimitRepr::Keyword(Keyword::Unlimited),
        }
    }
}

impl Limit {
    pub fn reached(self, count: u32) -> bool {
        matches!(self, Limit::Count(n) if count >= n)
    }
}

mod ttl_secs {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(ttl: &Option<Duration>, s: S) -> Result<S::Ok, S::Error> {
        match ttl {
            Some(d) => s.serialize_some(&d.as_secs_f64()),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Duration>, D::Error> {
        let secs: Option<f64> = Option::deserialize(d)?;
        secs.map(|s| Duration::try_from_secs_f64(s).map_err(serde::de::Error::custom)).transpose()
    }
}

/// Pool sizing and expiry rules for one image. `variant_ttl` is in seconds
/// in JSON, `null` for none. Missing fields take the default policy's
/// values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolPolicy {
    pub target_pool_size: u32,
    pub max_deploys_per_variant: Limit,
    #[serde(with = "ttl_secs")]
    pub variant_ttl: Option<Duration>,
    pub generator_parallelism: u32,
    pub on_empty: OnEmpty,
}

impl Default for PoolPolicy {
    fn default() -> Self {
        PoolPolicy {
            target_pool_size: 4,
            max_deploys_per_variant: Limit::Unlimited,
            variant_ttl: None,
            generator_parallelism: 1,
            on_empty: OnEmpty::ReuseLeastDeployed,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("invalid policy: {0}")]
pub struct PolicyError(pub String);

impl PoolPolicy {
    pub fn validate(&self) -> Result<(), PolicyError> {
        let bad = |m: &str| Err(PolicyError(m.to_string()));
        if self.target_pool_size == 0 {
            return bad("target_pool_size must be at least 1");
        }
        if self.generator_parallelism == 0 {
            return bad("generator_parallelism must be at least 1");
        }
        if self.max_deploys_per_variant == Limit::Count(0) {
            return bad("max_deploys_per_variant must be at least 1");
        }
        if self.variant_ttl == Some(Duration::ZERO) {
            return bad("variant_ttl must be positive");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_shape() {
        let p: PoolPolicy = serde_json::from_str(
            r#"{"target_pool_size": 4, "max_deploys_per_variant": "unlimited", "variant_ttl": 1.5, "on_empty": "reject"}"#,
        )
        .unwrap();
        assert_eq!(p.max_deploys_per_variant, Limit::Unlimited);
        assert_eq!(p.variant_ttl, Some(Duration::from_millis(1500)));
        assert_eq!(p.generator_parallelism, 1);
        assert_eq!(p.on_empty, OnEmpty::Reject);
        let back: PoolPolicy = serde_json::from_str(&serde_json::to_string(&p).unwrap()).unwrap();
        assert_eq!(back, p);

        let q: PoolPolicy =
            serde_json::from_str(r#"{"target_pool_size": 1, "max_deploys_per_variant": 3, "variant_ttl": null}"#).unwrap();
        assert_eq!(q.max_deploys_per_variant, Limit::Count(3));
        assert_eq!(q.on_empty, OnEmpty::ReuseLeastDeployed);
        assert!(serde_json::from_str::<PoolPolicy>(r#"{"target_pool_size": 1, "max_deploys_per_variant": "lots"}"#).is_err());
    }

    #[test]
    fn zero_counts_are_rejected() {
        assert!(PoolPolicy { target_pool_size: 0, ..PoolPolicy::default() }.validate().is_err());
        assert!(PoolPolicy { generator_parallelism: 0, ..PoolPolicy::default() }.validate().is_err());
        assert!(PoolPolicy { max_deploys_per_variant: Limit::Count(0), ..PoolPolicy::default() }.validate().is_err());
        assert!(PoolPolicy::default().validate().is_ok());
    }

    #[test]
    fn limits() {
        assert!(Limit::Count(1).reached(1));
        assert!(!Limit::Count(2).reached(1));
        assert!(!Limit::Unlimited.reached(u32::MAX));
    }
}
