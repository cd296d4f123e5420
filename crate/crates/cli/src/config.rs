use std::fs;
use std::path::Path;

use anyhow::Context;
use catunet::{CatUNetConfig, ThresholdConfig, TrainingConfig};
use serde::{Deserialize, Serialize};

use crate::{usage, ThresholdArgs};

/// Everything a run needs, resolved as flag > file > default.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: CatUNetConfig,
    pub training: TrainingConfig,
    pub threshold: ThresholdConfig,
}

impl RunConfig {
    /// Defaults, overlaid with `path` when given. A malformed file is a
    /// usage error; an unreadable one is a runtime error.
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
    }

    pub fn with_thresholds(mut self, args: &ThresholdArgs) -> Self {
        if let Some(t) = args.threshold {
            self.threshold.sample_threshold = t;
        }
        if args.pixel_threshold.is_some() {
            self.threshold.pixel_threshold = args.pixel_threshold;
        }
        self
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
