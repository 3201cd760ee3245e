use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::PmfError;

/// Entity modality. The derived ordering (str, rel, attr, img) is the fixed
/// concatenation order used for fusion and for every per-modality table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Str,
    Rel,
    Attr,
    Img,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::Str, Modality::Rel, Modality::Attr, Modality::Img];

    pub fn label(self) -> &'static str {
        match self {
            Modality::Str => "str",
            Modality::Rel => "rel",
            Modality::Attr => "attr",
            Modality::Img => "img",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Modality {
    type Err = PmfError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "str" | "structure" => Ok(Modality::Str),
            "rel" | "relation" => Ok(Modality::Rel),
            "attr" | "att" | "attribute" => Ok(Modality::Attr),
            "img" | "image" => Ok(Modality::Img),
            other => Err(PmfError::Config(format!("unknown modality '{other}'"))),
        }
    }
}

/// Which knowledge graph of the pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Source,
    Target,
}

impl Side {
    pub fn label(self) -> &'static str {
        match self {
            Side::Source => "src",
            Side::Target => "tgt",
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}
