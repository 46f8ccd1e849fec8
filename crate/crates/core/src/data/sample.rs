use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::CdaError;

/// Binary class; `Live` is the positive class and index 0 of every logit pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Live,
    Spoof,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Live, Label::Spoof];

    pub fn index(self) -> usize {
        match self {
            Label::Live => 0,
            Label::Spoof => 1,
        }
    }

    pub fn from_index(i: usize) -> Self {
        if i == 0 {
            Label::Live
        } else {
            Label::Spoof
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Live => "live",
            Label::Spoof => "spoof",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = CdaError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "live" => Ok(Label::Live),
            "spoof" => Ok(Label::Spoof),
            other => Err(CdaError::Validation(format!("unknown label `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = CdaError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(CdaError::Validation(format!("unknown split `{other}`"))),
        }
    }
}

/// Shape of one sample's data.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DataShape {
    Image { height: usize, width: usize, channels: usize },
    Flat { dim: usize },
}

impl DataShape {
    pub fn len(&self) -> usize {
        match *self {
            DataShape::Image {
                height,
                width,
                channels,
            } => height * width * channels,
            DataShape::Flat { dim } => dim,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One data record. The label is deliberately not a field: it is owned by the
/// manifest, which decides whether training code may read it.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub data: Vec<f32>,
    pub split: Split,
    pub domain_tag: Option<String>,
}

impl Sample {
    /// Data widened to `f64` for the network.
    pub fn input(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }
}
