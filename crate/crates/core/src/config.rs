//! Pipeline configuration: one JSON document, unknown keys rejected.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::faultclass::ClassifierParams;
use crate::fusion::{BnModel, CptDefaults, RegionParams, Thresholds};
use crate::grouping::{GroupSpec, GroupingStrategy};
use crate::scorer::ScorerParams;
use crate::simulator::{LayoutParams, ScenarioSpec};
use crate::telemetry::{ColumnMapping, TimestampFormat, DEFAULT_MALFORMED_THRESHOLD};

#[derive(Debug, Error, PartialEq)]
#[error("config: {0}")]
pub struct ConfigError(pub String);

fn bad<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError(msg.into()))
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub grouping: GroupingConfig,
    pub faultclass: FaultClassConfig,
    pub scorer: ScorerParams,
    pub fusion: FusionConfig,
    pub fuzzy: FuzzyConfig,
    pub io: IoConfig,
    pub eval: EvalConfig,
    /// Scenario for the `simulate` subcommand; presets are used when absent.
    pub simulation: Option<SimulationConfig>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GroupingConfig {
    pub strategy: GroupingStrategy,
    /// Explicit groups; replace the strategy when given.
    pub groups: Option<Vec<GroupSpec>>,
    pub tau: TauConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TauConfig {
    /// Fixed threshold for every group; auto-calibrated when absent.
    pub value: Option<f64>,
    pub per_group: BTreeMap<String, f64>,
    /// Leading instants used for auto calibration.
    pub warmup: usize,
    pub multiplier: f64,
    pub min: f64,
}

impl Default for TauConfig {
    fn default() -> Self {
        TauConfig { value: None, per_group: BTreeMap::new(), warmup: 120, multiplier: 4.0, min: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FaultClassConfig {
    pub theta: usize,
    pub min_run: usize,
    pub delta: f64,
    pub window: usize,
    pub slide: usize,
    pub per_group_theta: BTreeMap<String, usize>,
}

impl Default for FaultClassConfig {
    fn default() -> Self {
        let p = ClassifierParams::default();
        FaultClassConfig {
            theta: p.theta,
            min_run: p.min_run,
            delta: p.delta,
            window: p.window,
            slide: 30,
            per_group_theta: BTreeMap::new(),
        }
    }
}

impl FaultClassConfig {
    pub fn params(&self) -> ClassifierParams {
        ClassifierParams { theta: self.theta, min_run: self.min_run, delta: self.delta, window: self.window }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub low: f64,
    pub high: f64,
    pub rho: f64,
    pub min_dur: usize,
    pub merge_gap: usize,
    /// Serialized model; CPT defaults for every group when absent.
    pub model: Option<PathBuf>,
    pub prior: f64,
    pub cpt_true: [f64; 3],
    pub cpt_false: [f64; 3],
}

impl Default for FusionConfig {
    fn default() -> Self {
        let r = RegionParams::default();
        let c = CptDefaults::default();
        FusionConfig {
            low: 0.1,
            high: 0.9,
            rho: r.rho,
            min_dur: r.min_dur,
            merge_gap: r.merge_gap,
            model: None,
            prior: c.prior,
            cpt_true: c.cpt_true,
            cpt_false: c.cpt_false,
        }
    }
}

impl FusionConfig {
    pub fn thresholds(&self) -> Result<Thresholds, ConfigError> {
        Thresholds::new(self.low, self.high).map_err(|e| ConfigError(format!("fusion: {e}")))
    }

    pub fn region_params(&self) -> RegionParams {
        RegionParams { rho: self.rho, min_dur: self.min_dur, merge_gap: self.merge_gap }
    }

    pub fn cpt_defaults(&self) -> CptDefaults {
        CptDefaults { prior: self.prior, cpt_true: self.cpt_true, cpt_false: self.cpt_false }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FuzzyConfig {
    /// Rule file; the default rule base is generated from the group ids when absent.
    pub rules: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoConfig {
    pub column_mapping: ColumnMapping,
    pub timestamp_format: TimestampFormat,
    pub malformed_threshold: f64,
    /// Grid period in seconds; inferred from the input when absent.
    pub period: Option<i64>,
    /// Periods a reading may be carried forward over a gap.
    pub max_gap: u32,
    /// JSON list of sensor metadata; inferred from sensor ids when absent.
    pub topology: Option<PathBuf>,
}

impl Default for IoConfig {
    fn default() -> Self {
        IoConfig {
            column_mapping: ColumnMapping::default(),
            timestamp_format: TimestampFormat::default(),
            malformed_threshold: DEFAULT_MALFORMED_THRESHOLD,
            period: None,
            max_gap: 2,
            topology: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Intersection-over-union a region needs to match an event; any
    /// overlap counts when absent.
    pub iou_threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub layout: LayoutParams,
    pub scenario: ScenarioSpec,
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: PipelineConfig = serde_json::from_str(text).map_err(|e| ConfigError(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Range checks for every section; runs before any data is touched.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let tau = &self.grouping.tau;
        for (name, v) in tau.value.iter().map(|v| ("grouping.tau.value".to_string(), *v)).chain(
            tau.per_group.iter().map(|(g, v)| (format!("grouping.tau.per_group.{g}"), *v)),
        ) {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} = {v} must be positive"));
            }
        }
        if tau.warmup < 1 {
            return bad("grouping.tau.warmup must be >= 1");
        }
        if !(tau.multiplier.is_finite() && tau.multiplier > 0.0) {
            return bad("grouping.tau.multiplier must be positive");
        }
        if !(tau.min.is_finite() && tau.min > 0.0) {
            return bad("grouping.tau.min must be positive");
        }
        if let Some(groups) = &self.grouping.groups {
            if groups.is_empty() {
                return bad("grouping.groups is empty");
            }
        }

        let fc = &self.faultclass;
        fc.params().validate().map_err(|e| ConfigError(format!("faultclass: {e}")))?;
        if fc.slide < 1 || fc.slide > fc.window {
            return bad("faultclass.slide must lie in [1, window]");
        }
        for (g, theta) in &fc.per_group_theta {
            ClassifierParams { theta: *theta, ..fc.params() }
                .validate()
                .map_err(|e| ConfigError(format!("faultclass.per_group_theta.{g}: {e}")))?;
        }

        self.scorer.validate().map_err(|e| ConfigError(format!("scorer: {e}")))?;

        let fu = &self.fusion;
        fu.thresholds()?;
        fu.region_params().validate().map_err(|e| ConfigError(format!("fusion: {e}")))?;
        if fu.model.is_none() {
            BnModel::uniform(&["probe".to_string()], &fu.cpt_defaults())
                .map_err(|e| ConfigError(format!("fusion: {e}")))?;
        }

        let io = &self.io;
        if !(0.0..=1.0).contains(&io.malformed_threshold) {
            return bad("io.malformed_threshold must lie in [0, 1]");
        }
        if let Some(p) = io.period {
            if p <= 0 {
                return bad("io.period must be positive");
            }
        }

        if let Some(iou) = self.eval.iou_threshold {
            if !(iou > 0.0 && iou <= 1.0) {
                return bad("eval.iou_threshold must lie in (0, 1]");
            }
        }

        if let Some(sim) = &self.simulation {
            crate::simulator::build_layout_from(sim.layout.clone()).map_err(|e| ConfigError(format!("simulation: {e}")))?;
            sim.scenario.validate().map_err(|e| ConfigError(format!("simulation: {e}")))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = PipelineConfig::from_json("{}").unwrap();
        assert_eq!(cfg, PipelineConfig::default());
        assert_eq!(cfg.fusion.low, 0.1);
        assert_eq!(cfg.grouping.strategy, GroupingStrategy::ByRack);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(PipelineConfig::from_json(r#"{"fusion":{"rh0":0.9}}"#).is_err());
        assert!(PipelineConfig::from_json(r#"{"extra":1}"#).is_err());
    }

    #[test]
    fn out_of_range_rejected() {
        for doc in [
            r#"{"fusion":{"rho":1.5}}"#,
            r#"{"fusion":{"low":0.95}}"#,
            r#"{"fusion":{"cpt_true":[0.7,0.2,0.1],"cpt_false":[0.1,0.2,0.7]}}"#,
            r#"{"scorer":{"order":0,"forgetting":0.995,"short_window":10,"long_window":200,"sigma_min":0.1,"warmup":50}}"#,
            r#"{"faultclass":{"min_run":1}}"#,
            r#"{"faultclass":{"slide":0}}"#,
            r#"{"grouping":{"tau":{"value":-1.0}}}"#,
            r#"{"io":{"period":0}}"#,
            r#"{"eval":{"iou_threshold":0.0}}"#,
        ] {
            assert!(PipelineConfig::from_json(doc).is_err(), "{doc}");
        }
    }

    #[test]
    fn round_trip() {
        let cfg = PipelineConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(PipelineConfig::from_json(&text).unwrap(), cfg);
    }
}
