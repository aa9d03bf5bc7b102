use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::detector::TrainConfig;
use crate::error::{Error, Result};
use crate::features::DEFAULT_UPSTREAM_MILES;
use crate::grid::{StudyWindow, TimeGrid};
use crate::labeling::{DenoiseParams, DEFAULT_THETA_AHEAD};
use crate::synth::ScenarioConfig;
use crate::windowing::WindowConfig;

/// Which label matrix the detector learns from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    /// Denoised anomalies.
    Ano,
    /// Denoised anomalies extended ahead of each episode.
    #[default]
    Aan,
}

impl LabelMode {
    pub fn name(self) -> &'static str {
        match self {
            LabelMode::Ano => "ano",
            LabelMode::Aan => "aan",
        }
    }
}

impl std::str::FromStr for LabelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ano" => Ok(LabelMode::Ano),
            "aan" => Ok(LabelMode::Aan),
            other => Err(Error::Config(format!("unknown label mode {other:?}, expected ano or aan"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    /// `HH:MM`, inclusive.
    pub start: String,
    /// `HH:MM`, exclusive.
    pub end: String,
    pub weekdays_only: bool,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            start: "06:00".into(),
            end: "21:00".into(),
            weekdays_only: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    /// Upstream range for slowdown speed, miles.
    pub upstream_miles: f64,
    pub hops_up: usize,
    pub hops_down: usize,
    /// Also write every channel in long CSV form.
    pub long_csv: bool,
    /// Channels zeroed before windowing, e.g. `dow_sin` or `temp`.
    pub exclude: Vec<String>,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            upstream_miles: DEFAULT_UPSTREAM_MILES,
            hops_up: 3,
            hops_down: 3,
            long_csv: false,
            exclude: Vec::new(),
        }
    }
}

/// Where the slowdown percentile is searched.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Calibration {
    /// One percentile for all targets; budgets apply to corridor totals.
    #[default]
    Corridor,
    /// A separate search per target.
    Segment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabelingConfig {
    #[serde(flatten)]
    pub denoise: DenoiseParams,
    pub theta_ahead: usize,
    pub calibration: Calibration,
}

impl Default for LabelingConfig {
    fn default() -> Self {
        Self {
            denoise: DenoiseParams::default(),
            theta_ahead: DEFAULT_THETA_AHEAD,
            calibration: Calibration::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestOptions {
    /// Report kinds to keep; empty keeps all.
    pub report_kinds: Vec<String>,
}

/// Which detectors share an epoch and alert threshold.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selection {
    /// One epoch and threshold for all targets, scored on pooled samples.
    #[default]
    Corridor,
    /// A separate choice per target.
    Segment,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThresholdConfig {
    pub beta: f64,
    pub selection: Selection,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            selection: Selection::default(),
        }
    }
}

/// Every pipeline parameter; loaded from TOML with defaults for omissions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Seeds both the scenario generator and detector training.
    pub seed: u64,
    /// Restricts modeling to one target segment.
    pub segment: Option<String>,
    pub labels: LabelMode,
    /// Directory with the five input CSVs; when absent the `simulate`
    /// stage provides them.
    pub inputs: Option<PathBuf>,
    pub scenario: ScenarioConfig,
    pub study: StudyConfig,
    pub ingest: IngestOptions,
    pub features: FeatureConfig,
    pub labeling: LabelingConfig,
    pub window: WindowConfig,
    pub train: TrainConfig,
    pub threshold: ThresholdConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: ScenarioConfig::default().seed,
            segment: None,
            labels: LabelMode::default(),
            inputs: None,
            scenario: ScenarioConfig::default(),
            study: StudyConfig::default(),
            ingest: IngestOptions::default(),
            features: FeatureConfig::default(),
            labeling: LabelingConfig::default(),
            window: WindowConfig::default(),
            train: TrainConfig::default(),
            threshold: ThresholdConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Pushes the top-level seed into the scenario and training settings.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.scenario.seed = self.seed;
        c.train.seed = self.seed;
        c
    }

    pub fn study_window(&self, grid: &TimeGrid) -> Result<StudyWindow> {
        StudyWindow::from_clock(grid, &self.study.start, &self.study.end, self.study.weekdays_only)
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.window.validate()?;
        if !(self.features.upstream_miles > 0.0) {
            return Err(Error::Config("features.upstream_miles must be positive".into()));
        }
        if !(self.threshold.beta > 0.0) {
            return Err(Error::Config("threshold.beta must be positive".into()));
        }
        Ok(())
    }
}
