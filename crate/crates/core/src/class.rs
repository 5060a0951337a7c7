use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Diagnostic class of a subject. AD is the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Class {
    #[serde(rename = "NC")]
    Nc,
    #[serde(rename = "AD")]
    Ad,
}

impl Class {
    /// Output index of the class in the classifier head.
    pub fn index(self) -> usize {
        match self {
            Class::Nc => 0,
            Class::Ad => 1,
        }
    }

    pub fn from_index(index: usize) -> Option<Class> {
        match index {
            0 => Some(Class::Nc),
            1 => Some(Class::Ad),
            _ => None,
        }
    }

    /// The other class (`1 - y`).
    pub fn adverse(self) -> Class {
        match self {
            Class::Nc => Class::Ad,
            Class::Ad => Class::Nc,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Class::Nc => "NC",
            Class::Ad => "AD",
        }
    }
}

impl fmt::Display for Class {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Class {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "NC" | "0" => Ok(Class::Nc),
            "AD" | "1" => Ok(Class::Ad),
            other => Err(format!("unknown class {other:?}, expected AD or NC")),
        }
    }
}
