//! Human-readable TOML sidecar describing a feature file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::fseq::Dataset;
use super::synth::SynthConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub class_names: Vec<String>,
    pub num_groups: usize,
    pub records: usize,
    pub offsets: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<SynthConfig>,
}

impl Manifest {
    pub fn describe(ds: &Dataset, seed: Option<u64>, generator: Option<SynthConfig>) -> Self {
        let class_names = match ds.num_classes {
            4 if generator.is_some() => ["a_then_b", "b_then_a", "a_twice", "b_twice"]
                .map(String::from)
                .to_vec(),
            k => (0..k).map(|i| format!("class_{i}")).collect(),
        };
        Manifest {
            class_names,
            num_groups: ds.groups().len(),
            records: ds.len(),
            offsets: ds.offsets(),
            seed,
            generator,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.offsets.len() != self.records {
            return Err(Error::config(
                "offsets",
                format!("{} offsets for {} records", self.offsets.len(), self.records),
            ));
        }
        if self.offsets.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("offsets", "offsets must be strictly increasing"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let m: Manifest = toml::from_str(text).map_err(|e| Error::config("manifest", e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml())?;
        Ok(())
    }
}
