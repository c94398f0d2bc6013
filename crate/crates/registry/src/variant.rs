use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantState {
    Generating,
    Fresh,
    Deployed,
    Expired,
}

impl VariantState {
    pub const ALL: [VariantState; 4] =
        [VariantState::Generating, VariantState::Fresh, VariantState::Deployed, VariantState::Expired];

    /// The permitted edges of the lifecycle; `deployed -> deployed` is a
    /// repeat deploy.
    pub fn can_become(self, next: VariantState) -> bool {
        use VariantState::*;
        matches!(
            (self, next),
            (Generating, Fresh) | (Fresh, Deployed) | (Fresh, Expired) | (Deployed, Deployed) | (Deployed, Expired)
        )
    }

    pub fn servable(self) -> bool {
        matches!(self, VariantState::Fresh | VariantState::Deployed)
    }
}

/// Milliseconds since the Unix epoch.
pub type Millis = u64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub variant_id: u64,
    pub image_name: String,
    pub master_seed: u64,
    /// Hex SHA-256 of the emitted image, once generated.
    pub digest: Option<String>,
    pub state: VariantState,
    pub deploy_count: u32,
    pub created_at: Millis,
    pub last_deployed_at: Option<Millis>,
    pub generation_duration_ms: f64,
    pub size_bytes: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transition {
    pub variant_id: u64,
    pub from: VariantState,
    pub to: VariantState,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn edges() {
        use VariantState::*;
        let allowed: Vec<_> = VariantState::ALL
            .iter()
            .flat_map(|&a| VariantState::ALL.iter().map(move |&b| (a, b)))
            .filter(|(a, b)| a.can_become(*b))
            .collect();
        assert_eq!(
            allowed,
            [(Generating, Fresh), (Fresh, Deployed), (Fresh, Expired), (Deployed, Deployed), (Deployed, Expired)]
        );
        assert!(!Expired.servable() && !Generating.servable());
    }
}
