//! Run configuration: one TOML file with flat sections per subsystem.
//! Unknown keys are rejected, and every run writes its resolved config
//! next to its outputs so any run can be reproduced from its directory.

use serde::{Deserialize, Serialize};

use crate::denoiser::DenoiserConfig;
use crate::guidance::GuidanceSpec;
use crate::noise_opt::PrinoConfig;
use crate::schedule::{NoiseSchedule, ScheduleError};
use crate::train::TrainConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("cannot parse config {path}: {source}")]
    Parse {
        path: String,
        source: Box<toml::de::Error>,
    },
    #[error("invalid config: {0}")]
    Invalid(#[from] ScheduleError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub t_total: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            t_total: 200,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule, ScheduleError> {
        NoiseSchedule::linear(self.t_total, self.beta_start, self.beta_end)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunFlags {
    pub enable_prino: bool,
    pub enable_degu: bool,
    pub trace: bool,
}

impl Default for RunFlags {
    fn default() -> Self {
        Self {
            enable_prino: true,
            enable_degu: true,
            trace: false,
        }
    }
}

/// The whole configuration surface.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: Option<String>,
    pub schedule: ScheduleConfig,
    pub denoiser: DenoiserConfig,
    pub training: TrainConfig,
    pub noise_opt: PrinoConfig,
    pub guidance: GuidanceSpec,
    pub run: RunFlags,
}

impl RunConfig {
    pub fn from_toml_str(text: &str, path: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: path.to_string(),
            source: Box::new(e),
        })
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::from_toml_str(&text, &path.display().to_string())
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config always serializes")
    }

    /// The arm implied by the run flags.
    pub fn arm(&self) -> crate::bench::Arm {
        use crate::bench::Arm;
        match (self.run.enable_prino, self.run.enable_degu) {
            (false, false) => Arm::Base,
            (true, false) => Arm::Prino,
            (false, true) => Arm::Degu,
            (true, true) => Arm::Full,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_from_empty() {
        let cfg = RunConfig::from_toml_str("", "inline").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.schedule.t_total, 200);
        assert_eq!(cfg.noise_opt.tau_iter, 40);
        assert_eq!(cfg.guidance.cfg_scale, 7.5);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = RunConfig::from_toml_str("nonsense = 1", "inline");
        assert!(e.is_err());
        let e = RunConfig::from_toml_str("[schedule]\nt_total = 10\nextra = 2", "inline");
        assert!(e.is_err());
    }

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = RunConfig::default();
        cfg.seed = 42;
        cfg.guidance.s_guide = 10;
        let text = cfg.to_toml_string();
        let back = RunConfig::from_toml_str(&text, "inline").unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn arm_from_flags() {
        use crate::bench::Arm;
        let mut cfg = RunConfig::default();
        assert_eq!(cfg.arm(), Arm::Full);
        cfg.run.enable_prino = false;
        assert_eq!(cfg.arm(), Arm::Degu);
        cfg.run.enable_degu = false;
        assert_eq!(cfg.arm(), Arm::Base);
    }
}
