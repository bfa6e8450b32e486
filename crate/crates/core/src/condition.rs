//! Experiment conditions: the coordinates of one cell in an evaluation grid.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::noisemix::NoiseSource;

/// Where the non-golden documents of a prompt come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseSetting {
    Retrieval,
    Random,
    /// Plain top-k retrieved documents, no mixing.
    None,
}

impl NoiseSetting {
    pub fn mixture_source(self) -> Option<NoiseSource> {
        match self {
            NoiseSetting::Retrieval => Some(NoiseSource::Retrieval),
            NoiseSetting::Random => Some(NoiseSource::Random),
            NoiseSetting::None => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            NoiseSetting::Retrieval => "retrieval",
            NoiseSetting::Random => "random",
            NoiseSetting::None => "none",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    Standard,
    Con,
    ClosedBook,
}

impl PromptMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PromptMode::Standard => "standard",
            PromptMode::Con => "con",
            PromptMode::ClosedBook => "closed_book",
        }
    }
}

impl std::str::FromStr for PromptMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "standard" => Ok(PromptMode::Standard),
            "con" => Ok(PromptMode::Con),
            "closed_book" | "closed-book" => Ok(PromptMode::ClosedBook),
            other => Err(format!("unknown prompt mode {other:?}")),
        }
    }
}

impl std::str::FromStr for NoiseSetting {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "retrieval" => Ok(NoiseSetting::Retrieval),
            "random" => Ok(NoiseSetting::Random),
            "none" => Ok(NoiseSetting::None),
            other => Err(format!("unknown noise source {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentCondition {
    pub dataset: String,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub noise_ratio: f64,
    pub noise_source: NoiseSetting,
    pub prompt_mode: PromptMode,
    pub model_name: String,
    #[serde(default)]
    pub seed: u64,
}

pub(crate) fn default_k() -> usize {
    5
}

impl ExperimentCondition {
    /// Stable label used to tag scored items and artifact directories.
    ///
    /// Closed-book conditions ignore `k` and the noise settings; the `none`
    /// source ignores the ratio.
    pub fn id(&self) -> String {
        let (k, ratio, source) = match (self.prompt_mode, self.noise_source) {
            (PromptMode::ClosedBook, _) => ("-".to_string(), "-".to_string(), "none"),
            (_, NoiseSetting::None) => (self.k.to_string(), "-".to_string(), "none"),
            (_, src) => (
                self.k.to_string(),
                format!("{:.2}", self.noise_ratio),
                src.as_str(),
            ),
        };
        format!(
            "{}/k{}/r{}/{}/{}/{}/s{}",
            self.dataset,
            k,
            ratio,
            source,
            self.prompt_mode.as_str(),
            self.model_name,
            self.seed
        )
    }

    /// Filesystem-safe variant of [`id`](Self::id).
    pub fn slug(&self) -> String {
        self.id()
            .chars()
            .map(|c| {
                if c.is_ascii_alphanumeric() || c == '.' || c == '-' || c == '_' {
                    c
                } else {
                    '_'
                }
            })
            .collect()
    }

    pub fn validate(&self) -> crate::Result<()> {
        if !(0.0..=1.0).contains(&self.noise_ratio) || self.noise_ratio.is_nan() {
            return Err(crate::Error::InvalidInput(format!(
                "noise ratio {} outside [0, 1]",
                self.noise_ratio
            )));
        }
        if self.k == 0 && self.prompt_mode != PromptMode::ClosedBook {
            return Err(crate::Error::InvalidInput("k must be ≥ 1".into()));
        }
        Ok(())
    }
}

impl fmt::Display for ExperimentCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.id())
    }
}
