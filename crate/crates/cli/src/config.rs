//! The single JSON run configuration shared by every subcommand.
//!
//! Precedence: command-line flag > config file > default. The resolved
//! configuration is echoed to the output directory for provenance.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use v4d_core::analysis::OnsetParams;
use v4d_core::model::ModelConfig;
use v4d_core::pipeline::TrainConfig;

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub input: Option<PathBuf>,
    pub roi: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub cutoff_hz: f64,
    /// Depth cutoffs in micrometres for the neighbourhood-correlation
    /// table; `null` entries mean "max".
    pub z_max_um: Vec<Option<f64>>,
    pub neighbor_counts: Vec<usize>,
    pub onset: OnsetParams,
    /// Binarization threshold used by the diameter measurements.
    pub threshold: f32,
    /// Also emit SVG plots next to the CSV outputs.
    pub svg: bool,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            cutoff_hz: 1.0,
            z_max_um: vec![Some(25.0), Some(50.0), Some(75.0), None],
            neighbor_counts: vec![1, 2, 5, 10],
            onset: OnsetParams::default(),
            threshold: 0.5,
            svg: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentConfig {
    pub z_smooth: Option<bool>,
    pub skeletons: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub paths: Paths,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub segment: SegmentConfig,
    pub analysis: AnalysisConfig,
    pub threads: Option<usize>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        let mut out: Self = serde_path_to_error::deserialize(de)
            .map_err(|e| format!("config {}: key path `{}`: {}", path.display(), e.path(), e.inner()))?;
        out.apply_seed();
        Ok(out)
    }

    /// A top-level seed overrides the training seed so all stages flow from
    /// one value.
    pub fn apply_seed(&mut self) {
        if let Some(seed) = self.seed {
            self.train.seed = seed;
        }
    }

    pub fn resolved_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
