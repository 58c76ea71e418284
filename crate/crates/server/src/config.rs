use std::path::{Path, PathBuf};

use fvv_core::calibration::CALIBRATION_FILE;
use fvv_core::selection::SelectionParams;
use fvv_core::sync::{AssemblerConfig, DEFAULT_MAX_STALENESS, DEFAULT_PERIOD_US};
use fvv_core::synthesis::{BackgroundModel, SplatMode, SynthesisConfig};
use fvv_core::transport::{DEFAULT_BRIDGE_PORT, DEFAULT_CONTROL_PORT, DEFAULT_MEDIA_PORT};
use fvv_core::{Rig, Timestamp};
use serde::{Deserialize, Serialize};

use crate::ServerError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OutputEncoding {
    /// Uncompressed I420, no encode cost.
    Raw,
    #[default]
    Png,
}

/// How the pipeline paces ticks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    /// Ticks are decided at wall-clock deadlines; late cameras are treated
    /// as missing and overload drops ticks.
    #[default]
    Realtime,
    /// Each tick waits until every required camera has delivered past it.
    /// Capture nodes are paced by backpressure. Used for offline runs and
    /// tests.
    Lockstep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerConfig {
    pub calibration: PathBuf,
    /// Directory holding a saved background model.
    pub background: PathBuf,
    pub period_us: u64,
    pub tolerance_us: u64,
    pub max_staleness: u32,
    pub lambda: f64,
    pub hysteresis: f64,
    pub epsilon: f64,
    pub splat: SplatMode,
    pub bind: String,
    pub media_port: u16,
    pub control_port: u16,
    pub bridge_port: u16,
    /// Serve the WebSocket bridge for browser viewers.
    pub bridge: bool,
    pub output: OutputEncoding,
    pub mode: RunMode,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            calibration: PathBuf::from(CALIBRATION_FILE),
            background: PathBuf::from("background"),
            period_us: DEFAULT_PERIOD_US,
            tolerance_us: DEFAULT_PERIOD_US / 2,
            max_staleness: DEFAULT_MAX_STALENESS,
            lambda: SelectionParams::default().lambda,
            hysteresis: SelectionParams::default().hysteresis,
            epsilon: SynthesisConfig::default().epsilon,
            splat: SplatMode::default(),
            bind: "127.0.0.1".into(),
            media_port: DEFAULT_MEDIA_PORT,
            control_port: DEFAULT_CONTROL_PORT,
            bridge_port: DEFAULT_BRIDGE_PORT,
            bridge: true,
            output: OutputEncoding::default(),
            mode: RunMode::default(),
        }
    }
}

impl ServerConfig {
    pub fn assembler(&self) -> AssemblerConfig {
        AssemblerConfig {
            period_us: self.period_us,
            tolerance_us: self.tolerance_us,
            max_staleness: self.max_staleness,
            phase: Some(Timestamp(0)),
        }
    }

    pub fn selection(&self) -> SelectionParams {
        SelectionParams { lambda: self.lambda, hysteresis: self.hysteresis }
    }

    pub fn synthesis(&self) -> SynthesisConfig {
        SynthesisConfig { epsilon: self.epsilon, splat: self.splat }
    }

    /// Checks values that do not need the filesystem.
    pub fn validate(&self) -> Result<(), ServerError> {
        self.assembler().validate().map_err(|e| ServerError::Config(e.to_string()))?;
        if self.max_staleness == 0 {
            return Err(ServerError::Config("max_staleness must be at least 1".into()));
        }
        for (name, v) in [("lambda", self.lambda), ("hysteresis", self.hysteresis), ("epsilon", self.epsilon)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(ServerError::Config(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        Ok(())
    }

    /// Loads calibration and background model and checks they agree.
    pub fn load_assets(&self) -> Result<(Rig, BackgroundModel), ServerError> {
        self.validate()?;
        require_exists(&self.calibration, "calibration")?;
        require_exists(&self.background, "background model")?;
        let rig = Rig::load(&self.calibration).map_err(|e| ServerError::Startup(e.to_string()))?;
        let (model, _) = BackgroundModel::load(&self.background).map_err(|e| ServerError::Startup(e.to_string()))?;
        model.check_rig(&rig).map_err(|e| ServerError::Startup(e.to_string()))?;
        Ok((rig, model))
    }
}

fn require_exists(path: &Path, what: &str) -> Result<(), ServerError> {
    if path.exists() {
        Ok(())
    } else {
        Err(ServerError::Startup(format!("{what} path {} does not exist", path.display())))
    }
}
