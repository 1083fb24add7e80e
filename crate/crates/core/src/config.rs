//! One JSON document configuring every command. Every section and field is
//! optional; missing values take the defaults below.
//!
//! ```json
//! {
//!   "spec": {"n_max": 8, "l_node": 3, "l_edge": 3},
//!   "rules": {"caps": [4, 3, 2]},
//!   "data": {"size": 200, "seed": 0, "n_min": 4, "n_max": 8},
//!   "model": {"hidden": 16, "layers": 2, "seed": 0},
//!   "training": {"steps": 5000, "n_warmup": 2000, "lambda_cl": 1.0},
//!   "sampler": {"chains": 200, "steps": 150, "init": "noise"},
//!   "calibration": {"chains": 32, "steps": 100, "beta_mh": [1.0, 9.55]},
//!   "guidance": {"zeta": 3.0, "constraint": {"kind": "le", "threshold": 4.0}},
//!   "geodesic": {"pairs": 64, "beta": 0.1}
//! }
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{ToyConfig, ValenceRules};
use crate::error::{GemError, Result};
use crate::geodesics::GeodesicConfig;
use crate::graph::GraphSpec;
use crate::guidance::{Constraint, RegressorConfig};
use crate::sampler::{InitMode, SamplerConfig};
use crate::training::{SearchSpace, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    pub size: usize,
    pub seed: u64,
    #[serde(flatten)]
    pub toy: ToyConfig,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection { size: 200, seed: 0, toy: ToyConfig::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub hidden: usize,
    pub layers: usize,
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { hidden: 16, layers: 2, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerSection {
    pub chains: usize,
    pub steps: usize,
    pub init: InitMode,
    pub seed: u64,
    /// Worker threads; absent means all cores. Results do not depend on it.
    pub threads: Option<usize>,
    /// Take the switch threshold from the model calibration when the config
    /// leaves it at negative infinity.
    pub use_model_threshold: bool,
    #[serde(flatten)]
    pub sampler: SamplerConfig,
}

impl Default for SamplerSection {
    fn default() -> Self {
        SamplerSection {
            chains: 200,
            steps: 150,
            init: InitMode::Noise,
            seed: 0,
            threads: None,
            use_model_threshold: true,
            sampler: SamplerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationSection {
    pub chains: usize,
    pub steps: usize,
    pub seed: u64,
    #[serde(flatten)]
    pub search: SearchSpace,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        CalibrationSection { chains: 32, steps: 100, seed: 0, search: SearchSpace::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceSection {
    /// Target value of the property.
    pub zeta: f64,
    pub constraint: Constraint,
    /// Guidance weights swept by the `guide` command.
    pub lambdas: Vec<f64>,
    pub regressor: RegressorConfig,
}

impl Default for GuidanceSection {
    fn default() -> Self {
        GuidanceSection {
            zeta: 3.0,
            constraint: Constraint::Le(4.0),
            lambdas: vec![0.0, 0.01, 0.1, 1.0, 10.0, 100.0],
            regressor: RegressorConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeodesicSection {
    /// Endpoint pairs drawn from the dataset.
    pub pairs: usize,
    pub seed: u64,
    #[serde(flatten)]
    pub geodesic: GeodesicConfig,
}

impl Default for GeodesicSection {
    fn default() -> Self {
        GeodesicSection { pairs: 64, seed: 0, geodesic: GeodesicConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GemConfig {
    pub spec: GraphSpec,
    pub rules: ValenceRules,
    pub data: DataSection,
    pub model: ModelSection,
    pub training: TrainConfig,
    pub sampler: SamplerSection,
    pub calibration: CalibrationSection,
    pub guidance: GuidanceSection,
    pub geodesic: GeodesicSection,
}

impl Default for GemConfig {
    fn default() -> Self {
        GemConfig {
            spec: GraphSpec { n_max: 8, l_node: 3, l_edge: 3 },
            rules: ValenceRules::default(),
            data: DataSection::default(),
            model: ModelSection::default(),
            training: TrainConfig::default(),
            sampler: SamplerSection::default(),
            calibration: CalibrationSection::default(),
            guidance: GuidanceSection::default(),
            geodesic: GeodesicSection::default(),
        }
    }
}

impl GemConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: GemConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GemError::InvalidArgument(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.check()?;
        self.rules.check(&self.spec)?;
        self.training.validate()?;
        self.sampler.sampler.validate()?;
        self.geodesic.geodesic.validate()?;
        if self.model.hidden == 0 {
            return Err(GemError::Config("model.hidden must be positive".into()));
        }
        if self.sampler.chains == 0 {
            return Err(GemError::Config("sampler.chains must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(GemConfig::from_json("{}").unwrap(), GemConfig::default());
    }

    #[test]
    fn round_trip_and_partial_sections() {
        let c = GemConfig::default();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(GemConfig::from_json(&text).unwrap(), c);
        let p = GemConfig::from_json(r#"{"sampler": {"chains": 7, "beta_mh_final": 2.0}, "data": {"n_min": 3}}"#);
        let p = p.unwrap();
        assert_eq!(p.sampler.chains, 7);
        assert_eq!(p.data.toy.n_min, 3);
    }

    #[test]
    fn bad_values_are_rejected() {
        assert!(GemConfig::from_json(r#"{"model": {"hidden": 0}}"#).is_err());
        assert!(GemConfig::from_json(r#"{"rules": {"caps": [1]}}"#).is_err());
        assert!(GemConfig::from_json("[").is_err());
    }
}
