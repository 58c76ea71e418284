//! The single configuration schema shared by every command.
//!
//! Sources, lowest to highest precedence: built-in defaults, the config file
//! (named by `--config`, else by `FVV_CONFIG`), then individual flags.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use fvv_core::synthesis::SplatMode;
use fvv_server::capture::Pacing;
use fvv_server::{OutputEncoding, RunMode, ServerConfig};
use serde::{Deserialize, Serialize};

pub const CONFIG_ENV: &str = "FVV_CONFIG";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config {origin}: {message}")]
    Parse { origin: String, message: String },
    #[error("config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Resolution {
    pub width: u32,
    pub height: u32,
}

impl FromStr for Resolution {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let bad = || format!("resolution {s:?} is not WIDTHxHEIGHT");
        let (w, h) = s.split_once(['x', 'X']).ok_or_else(bad)?;
        let width: u32 = w.trim().parse().map_err(|_| bad())?;
        let height: u32 = h.trim().parse().map_err(|_| bad())?;
        if width == 0 || height == 0 || !width.is_multiple_of(2) || !height.is_multiple_of(2) {
            return Err(format!("resolution {s:?} must have positive even sides"));
        }
        Ok(Self { width, height })
    }
}

impl TryFrom<String> for Resolution {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<Resolution> for String {
    fn from(r: Resolution) -> String {
        r.to_string()
    }
}

impl fmt::Display for Resolution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.width, self.height)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PacingMode {
    #[default]
    Realtime,
    Fast,
}

impl From<PacingMode> for Pacing {
    fn from(p: PacingMode) -> Pacing {
        match p {
            PacingMode::Realtime => Pacing::Realtime,
            PacingMode::Fast => Pacing::Fast,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Rig calibration file.
    pub calibration: PathBuf,
    /// Background model directory.
    pub background: PathBuf,
    /// Tick period in microseconds.
    pub period: u64,
    /// Assembly tolerance in microseconds; half the period when unset.
    pub tolerance: Option<u64>,
    pub max_staleness: u32,
    /// Metres per radian of optical-axis angle in the camera distance.
    pub lambda: f64,
    /// Hysteresis margin in metres.
    pub hysteresis: f64,
    /// Depth-consistency band in metres for blending.
    pub epsilon: f64,
    pub splat: SplatMode,
    pub bind: String,
    pub media_port: u16,
    pub control_port: u16,
    pub bridge_port: u16,
    pub bridge: bool,
    pub output: OutputEncoding,
    pub mode: RunMode,

    pub scene: String,
    pub dataset: PathBuf,
    pub ticks: u64,
    pub resolution: Resolution,

    /// Server host for capture nodes.
    pub server: String,
    pub pacing: PacingMode,
    pub jitter: u64,
    pub loss: f64,
    pub seed: u64,
    pub compress: bool,

    pub log_level: String,
}

impl Default for Config {
    fn default() -> Self {
        let s = ServerConfig::default();
        Self {
            calibration: s.calibration,
            background: s.background,
            period: s.period_us,
            tolerance: None,
            max_staleness: s.max_staleness,
            lambda: s.lambda,
            hysteresis: s.hysteresis,
            epsilon: s.epsilon,
            splat: s.splat,
            bind: s.bind,
            media_port: s.media_port,
            control_port: s.control_port,
            bridge_port: s.bridge_port,
            bridge: s.bridge,
            output: s.output,
            mode: s.mode,
            scene: "default".into(),
            dataset: PathBuf::from("dataset"),
            ticks: 300,
            resolution: Resolution { width: 640, height: 360 },
            server: "127.0.0.1".into(),
            pacing: PacingMode::default(),
            jitter: 0,
            loss: 0.0,
            seed: 0,
            compress: false,
            log_level: "info".into(),
        }
    }
}

impl Config {
    pub fn tolerance_us(&self) -> u64 {
        self.tolerance.unwrap_or(self.period / 2)
    }

    pub fn server_config(&self) -> Result<ServerConfig, ConfigError> {
        let c = ServerConfig {
            calibration: self.calibration.clone(),
            background: self.background.clone(),
            period_us: self.period,
            tolerance_us: self.tolerance_us(),
            max_staleness: self.max_staleness,
            lambda: self.lambda,
            hysteresis: self.hysteresis,
            epsilon: self.epsilon,
            splat: self.splat,
            bind: self.bind.clone(),
            media_port: self.media_port,
            control_port: self.control_port,
            bridge_port: self.bridge_port,
            bridge: self.bridge,
            output: self.output,
            mode: self.mode,
        };
        c.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.server_config()?;
        if !(0.0..=1.0).contains(&self.loss) {
            return Err(ConfigError::Invalid(format!("loss must be within [0, 1], got {}", self.loss)));
        }
        Ok(())
    }
}

/// Merges the sources: `file` is the config file text (if any), `flags`
/// the values given on the command line. Pure: same inputs, same result.
pub fn parse_config(file: Option<(&str, &str)>, flags: &toml::Table) -> Result<Config, ConfigError> {
    let (origin, text) = file.unwrap_or(("defaults", ""));
    // Typed pass first for precise errors pointing into the file.
    let from_file: Config = toml::from_str(text).map_err(|e| parse_error(origin, text, &e))?;
    let config = if flags.is_empty() {
        from_file
    } else {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| parse_error(origin, text, &e))?;
        for (k, v) in flags {
            table.insert(k.clone(), v.clone());
        }
        toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse { origin: "flags".into(), message: e.message().to_string() })?
    };
    config.validate()?;
    Ok(config)
}

/// Resolves the config file from the flag or the environment, reads it and
/// merges the flags over it.
pub fn load_config(flag_path: Option<&Path>, env_path: Option<&Path>, flags: &toml::Table) -> Result<Config, ConfigError> {
    let Some(path) = flag_path.or(env_path) else { return parse_config(None, flags) };
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
    parse_config(Some((&path.display().to_string(), &text)), flags)
}

fn parse_error(origin: &str, text: &str, e: &toml::de::Error) -> ConfigError {
    let mut message = e.message().trim().to_string();
    if let Some(span) = e.span() {
        let line_no = text[..span.start.min(text.len())].matches('\n').count() + 1;
        let line = text.lines().nth(line_no - 1).unwrap_or("");
        // Name the key when the message itself does not.
        if let Some((key, _)) = line.split_once('=') {
            let key = key.trim();
            if !key.is_empty() && !message.contains(key) {
                message = format!("{key}: {message}");
            }
        }
        message = format!("line {line_no}: {message}");
    }
    ConfigError::Parse { origin: origin.to_string(), message: message.replace('\n', " ") }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flags(pairs: &[(&str, toml::Value)]) -> toml::Table {
        pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
    }

    #[test]
    fn empty_file_gives_defaults() {
        let c = parse_config(Some(("f.toml", "")), &toml::Table::new()).unwrap();
        assert_eq!(c, Config::default());
        assert_eq!(parse_config(None, &toml::Table::new()).unwrap(), Config::default());
        assert_eq!(c.tolerance_us(), 33_333 / 2);
    }

    #[test]
    fn flag_overrides_file() {
        let file = Some(("f.toml", "period = 40000\nscene = \"sphere\"\n"));
        let c = parse_config(file, &toml::Table::new()).unwrap();
        assert_eq!((c.period, c.scene.as_str()), (40_000, "sphere"));
        let c = parse_config(file, &flags(&[("period", toml::Value::Integer(50_000))])).unwrap();
        assert_eq!((c.period, c.scene.as_str()), (50_000, "sphere"));
        assert_eq!(c.tolerance_us(), 25_000);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = parse_config(Some(("f.toml", "perid = 5\n")), &toml::Table::new()).unwrap_err().to_string();
        assert!(err.contains("perid"), "{err}");
        assert!(!err.contains('\n'));
    }

    #[test]
    fn type_mismatch_names_the_key() {
        let err = parse_config(Some(("f.toml", "ticks = 3\nlambda = \"big\"\n")), &toml::Table::new())
            .unwrap_err()
            .to_string();
        assert!(err.contains("lambda") && err.contains("line 2"), "{err}");
    }

    #[test]
    fn invalid_values_are_rejected() {
        let err = parse_config(Some(("f.toml", "period = 1000\ntolerance = 600\n")), &toml::Table::new()).unwrap_err();
        assert!(err.to_string().contains("tolerance"), "{err}");
        assert!(parse_config(Some(("f.toml", "resolution = \"641x360\"")), &toml::Table::new()).is_err());
        assert!(parse_config(Some(("f.toml", "loss = 2.0")), &toml::Table::new()).is_err());
    }

    #[test]
    fn enums_and_resolution_parse() {
        let text = "splat = \"nearest\"\noutput = \"raw\"\nmode = \"lockstep\"\nresolution = \"320x180\"\npacing = \"fast\"\n";
        let c = parse_config(Some(("f.toml", text)), &toml::Table::new()).unwrap();
        assert_eq!(c.splat, SplatMode::Nearest);
        assert_eq!(c.output, OutputEncoding::Raw);
        assert_eq!(c.mode, RunMode::Lockstep);
        assert_eq!(c.resolution, Resolution { width: 320, height: 180 });
        assert_eq!(c.pacing, PacingMode::Fast);
    }

    #[test]
    fn file_path_flag_beats_environment() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.toml");
        let b = dir.path().join("b.toml");
        std::fs::write(&a, "ticks = 1").unwrap();
        std::fs::write(&b, "ticks = 2").unwrap();
        let none = toml::Table::new();
        assert_eq!(load_config(Some(&a), Some(&b), &none).unwrap().ticks, 1);
        assert_eq!(load_config(None, Some(&b), &none).unwrap().ticks, 2);
        assert_eq!(load_config(None, None, &none).unwrap().ticks, 300);
        let err = load_config(Some(&dir.path().join("missing.toml")), None, &none).unwrap_err();
        assert!(err.to_string().contains("missing.toml"));
    }

    proptest::proptest! {
        #[test]
        fn resolution_round_trips(w in 1u32..4000, h in 1u32..4000) {
            let r: Resolution = format!("{}x{}", 2 * w, 2 * h).parse().unwrap();
            proptest::prop_assert_eq!(r.to_string().parse::<Resolution>().unwrap(), r);
        }

        #[test]
        fn flag_always_wins(file_ticks in 0i64..1_000_000, flag_ticks in 0i64..1_000_000) {
            let text = format!("ticks = {file_ticks}\n");
            let c = parse_config(Some(("f", &text)), &flags(&[("ticks", toml::Value::Integer(flag_ticks))])).unwrap();
            proptest::prop_assert_eq!(c.ticks, flag_ticks as u64);
        }
    }

    #[test]
    fn parsing_is_deterministic() {
        let text = "period = 40000\nlambda = 0.5\n";
        let f = flags(&[("ticks", toml::Value::Integer(9))]);
        assert_eq!(parse_config(Some(("f", text)), &f).unwrap(), parse_config(Some(("f", text)), &f).unwrap());
    }
}
