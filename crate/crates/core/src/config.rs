//! Run configuration, read from TOML or JSON. Relative paths resolve against
//! the directory holding the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scheduler::SchedulerConfig;
use crate::synth;
use crate::tracking::TrackerConfig;
use crate::transform::{EstimationParams, FiltrationParams, TransformParams};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("bad TOML in {path}: {source}")]
    Toml { path: PathBuf, source: toml::de::Error },
    #[error("bad JSON in {path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{0}")]
    Invalid(String),
}

/// Locations of the sequence inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SequencePaths {
    /// Directory of `NNNNNN.bin` point clouds.
    pub velodyne: PathBuf,
    pub calib: PathBuf,
    /// JSON-lines instance records, one per frame.
    pub detections: PathBuf,
    /// Directory of `NNNNNN.imap` instance maps.
    pub masks: PathBuf,
    /// JSON-lines cloud detections, used when simulating the network.
    pub cloud_store: PathBuf,
    /// Directory of `NNNNNN.txt` ground-truth labels.
    pub labels: PathBuf,
}

impl Default for SequencePaths {
    fn default() -> Self {
        Self {
            velodyne: synth::VELODYNE_DIR.into(),
            calib: synth::CALIB_FILE.into(),
            detections: synth::DETECTIONS_FILE.into(),
            masks: synth::MASKS_DIR.into(),
            cloud_store: synth::CLOUD_FILE.into(),
            labels: synth::LABELS_DIR.into(),
        }
    }
}

impl SequencePaths {
    fn resolve(&mut self, base: &Path) {
        for p in [
            &mut self.velodyne,
            &mut self.calib,
            &mut self.detections,
            &mut self.masks,
            &mut self.cloud_store,
            &mut self.labels,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: SequencePaths,
    /// Bandwidth trace CSV for the simulated network.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace: Option<PathBuf>,
    /// Address of a live cloud detector.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub server: Option<String>,
    pub server_timeout_s: f64,
    /// Base seed for every random stream of the run.
    pub seed: u64,
    /// IoU a detection needs to match a label.
    pub eval_iou: f64,
    pub filtration: FiltrationParams,
    pub estimation: EstimationParams,
    pub scheduler: SchedulerConfig,
    pub tracker: TrackerConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            paths: SequencePaths::default(),
            trace: None,
            server: None,
            server_timeout_s: 5.0,
            seed: 0,
            eval_iou: 0.4,
            filtration: FiltrationParams::default(),
            estimation: EstimationParams::default(),
            scheduler: SchedulerConfig::default(),
            tracker: TrackerConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn transform_params(&self) -> TransformParams {
        TransformParams { filtration: self.filtration, estimation: self.estimation, seed: self.seed }
    }

    /// Parses TOML, or JSON when the text starts with `{`.
    pub fn parse(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        if text.trim_start().starts_with('{') {
            serde_json::from_str(text).map_err(|source| ConfigError::Json { path: origin.to_owned(), source })
        } else {
            toml::from_str(text).map_err(|source| ConfigError::Toml { path: origin.to_owned(), source })
        }
    }

    /// Reads the file and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_owned(), source })?;
        let mut cfg = Self::parse(&text, path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.paths.resolve(base);
        if let Some(t) = &mut cfg.trace {
            if t.is_relative() {
                *t = base.join(&*t);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Checks parameter ranges, the network choice and that inputs exist.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        match (&self.trace, &self.server) {
            (Some(_), Some(_)) => return invalid("set either a trace or a server, not both".into()),
            (None, None) => return invalid("no network selected: set a trace or a server".into()),
            _ => {}
        }
        self.transform_params().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.scheduler.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(0.0..=1.0).contains(&self.tracker.iou_gate) {
            return invalid(format!("tracker.iou_gate {} outside [0, 1]", self.tracker.iou_gate));
        }
        if !(self.eval_iou > 0.0 && self.eval_iou <= 1.0) {
            return invalid(format!("eval_iou {} outside (0, 1]", self.eval_iou));
        }
        if !(self.server_timeout_s > 0.0) {
            return invalid(format!("server_timeout_s {} must be positive", self.server_timeout_s));
        }
        let p = &self.paths;
        let mut required = vec![&p.velodyne, &p.calib, &p.detections, &p.masks, &p.labels];
        if let Some(t) = &self.trace {
            required.push(t);
            required.push(&p.cloud_store);
        }
        for path in required {
            if !path.exists() {
                return invalid(format!("missing input {}", path.display()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = RunConfig::parse("", Path::new("x.toml")).unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.scheduler.n_t, 4);
        assert_eq!(cfg.scheduler.q_t, 0.7);
        assert_eq!(cfg.tracker.iou_gate, 0.3);
        assert_eq!(cfg.filtration.f_t, 4.5);
        assert_eq!(cfg.filtration.m_t, 24);
        assert_eq!(cfg.filtration.s_t, 12.0);
        assert_eq!(cfg.estimation.ransac_iters, 30);
    }

    #[test]
    fn toml_and_json_overrides() {
        let t = "seed = 7\n[scheduler]\nn_t = 6\nhistory_capacity = 20\n[filtration]\nf_t = 3.0\n";
        let cfg = RunConfig::parse(t, Path::new("x.toml")).unwrap();
        assert_eq!((cfg.seed, cfg.scheduler.n_t, cfg.scheduler.history_capacity), (7, 6, 20));
        assert_eq!(cfg.filtration.f_t, 3.0);
        assert_eq!(cfg.scheduler.q_t, 0.7);
        let j = r#"{"scheduler": {"q_t": 0.5, "cloud_inference_s": 0.1}, "trace": "t.csv"}"#;
        let cfg = RunConfig::parse(j, Path::new("x.json")).unwrap();
        assert_eq!((cfg.scheduler.q_t, cfg.scheduler.cloud_inference_s), (0.5, 0.1));
        assert_eq!(cfg.trace, Some(PathBuf::from("t.csv")));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::parse("bogus = 1\n", Path::new("x.toml")).is_err());
    }

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig { trace: Some("trace.csv".into()), seed: 3, ..RunConfig::default() };
        assert_eq!(RunConfig::parse(&cfg.to_toml(), Path::new("x.toml")).unwrap(), cfg);
    }

    #[test]
    fn network_choice_must_be_exclusive() {
        let both = RunConfig { trace: Some("a".into()), server: Some("b".into()), ..RunConfig::default() };
        assert!(matches!(both.validate(), Err(ConfigError::Invalid(_))));
        assert!(matches!(RunConfig::default().validate(), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn relative_paths_resolve_against_config_dir() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "trace = \"trace.csv\"\n").unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.paths.calib, dir.path().join("calib.txt"));
        assert_eq!(cfg.trace, Some(dir.path().join("trace.csv")));
        assert!(matches!(cfg.validate(), Err(ConfigError::Invalid(m)) if m.contains("missing input")));
    }
}
