use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

/// A model-backed pipeline stage. Each maps to one prompt family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Annotate,
    Extract,
    Generate,
    Refine,
    Judge,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Annotate,
        Stage::Extract,
        Stage::Generate,
        Stage::Refine,
        Stage::Judge,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Annotate => "annotate",
            Stage::Extract => "extract",
            Stage::Generate => "generate",
            Stage::Refine => "refine",
            Stage::Judge => "judge",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
#[error("unknown stage `{0}`")]
pub struct UnknownStage(pub alloc::string::String);

impl FromStr for Stage {
    type Err = UnknownStage;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|stage| stage.as_str() == s)
            .ok_or_else(|| UnknownStage(s.into()))
    }
}
