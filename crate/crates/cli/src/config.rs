//! Run configuration.
//!
//! A config file is a JSON object whose top-level sections are optional:
//! an absent section takes the profile default as a whole, while a section
//! that is present must spell out every key. The resolved configuration,
//! with every default filled in, is echoed next to each run's outputs.

use crate::error::{CliError, CliResult};
use locrate::channel::SystemConfig;
use locrate::env2d::{BaseStation, CellRect, EnvConfig};
use locrate::locfim::{CrlbOptions, FimMode, LocalizationKind};
use locrate::profile::{Profile, REFERENCE_LOC_VARIANCE};
use locrate::rateselect::{MetaMethod, SchemeFamily};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_VAR: &str = "LOCRATE_OUT";
pub const DEFAULT_OUTPUT_ROOT: &str = "locrate-out";
pub const DEFAULT_SEED: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub cell: CellRect,
    pub spacing: f64,
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentSection {
    pub base_stations: Vec<BaseStation>,
    pub ue_height: f64,
    pub path_count: usize,
    pub shadowing_std_db: f64,
    pub shadowing_decorrelation_m: f64,
    pub mean_excess_delay_s: f64,
    pub delay_decorrelation_m2: f64,
    pub pdp_decay_s: f64,
    pub scatter_gain: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CapacitySection {
    /// Base station used for communication.
    pub bs: usize,
    pub samples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum LocalizationSection {
    Constant {
        variance: f64,
    },
    Crlb {
        draws: usize,
        with_bias: bool,
        allow_pseudo_inverse: bool,
        fim_mode: FimMode,
    },
}

impl LocalizationSection {
    pub fn kind(&self) -> LocalizationKind {
        match self {
            LocalizationSection::Constant { .. } => LocalizationKind::Constant,
            LocalizationSection::Crlb { .. } => LocalizationKind::Crlb,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemeSection {
    pub family: SchemeFamily,
    /// Meta-probability target.
    pub delta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationSection {
    pub method: MetaMethod,
    pub rel_tol: f64,
    pub allow_out_of_map: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationSection {
    pub method: MetaMethod,
    pub throughput_draws: usize,
    pub allow_out_of_map: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSection {
    /// Relative-change threshold of the coherence radius.
    pub coherence_threshold: f64,
    /// Extrema neighbourhood radius in meters.
    pub neighborhood_radius: f64,
    /// Extrema prominence relative to the point value.
    pub prominence: f64,
    /// Outer box-plot quantile level.
    pub box_alpha: f64,
}

/// One-dimensional Rayleigh scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RayleighSection {
    pub path_gain_db: f64,
    pub exponent: f64,
    pub tx_snr_db: f64,
    pub cell_min: f64,
    pub cell_max: f64,
    /// Upper end of the throughput table.
    pub extended_cell_max: f64,
    pub eps: f64,
    /// Constant localization standard deviation.
    pub sigma: f64,
    /// Affine standard deviation `slope * x + offset`.
    pub sigma_slope: f64,
    pub sigma_offset: f64,
    pub deltas: Vec<f64>,
    pub illustration_x: f64,
    pub illustration_variance: f64,
    pub illustration_beta: f64,
    pub coherence_thresholds: Vec<f64>,
    /// Location step of the meta-probability and coherence tables.
    pub x_step: f64,
    /// Location step of the throughput table.
    pub throughput_step: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub system: SystemConfig,
    pub grid: GridSection,
    pub environment: EnvironmentSection,
    pub capacity: CapacitySection,
    pub localization: LocalizationSection,
    pub scheme: SchemeSection,
    pub calibration: CalibrationSection,
    pub evaluation: EvaluationSection,
    pub analysis: AnalysisSection,
    pub rayleigh: RayleighSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    profile: Option<Profile>,
    seed: Option<u64>,
    output_dir: Option<PathBuf>,
    system: Option<SystemConfig>,
    grid: Option<GridSection>,
    environment: Option<EnvironmentSection>,
    capacity: Option<CapacitySection>,
    localization: Option<LocalizationSection>,
    scheme: Option<SchemeSection>,
    calibration: Option<CalibrationSection>,
    evaluation: Option<EvaluationSection>,
    analysis: Option<AnalysisSection>,
    rayleigh: Option<RayleighSection>,
}

/// Values given on the command line; they take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub profile: Option<Profile>,
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub family: Option<SchemeFamily>,
    pub delta: Option<f64>,
}

/// Output directory used when neither the flag nor the file names one.
pub fn default_output_dir(command: &str) -> PathBuf {
    let root = std::env::var_os(OUTPUT_ROOT_VAR)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT));
    root.join(command)
}

impl RunConfig {
    /// Fully materialized defaults of a profile.
    pub fn defaults(profile: Profile, seed: u64, output_dir: PathBuf) -> CliResult<Self> {
        let env = profile.environment(seed);
        Ok(Self {
            profile,
            seed,
            output_dir,
            system: profile.system()?,
            grid: GridSection {
                cell: env.cell,
                spacing: env.spacing,
                margin: env.margin,
            },
            environment: EnvironmentSection {
                base_stations: env.base_stations,
                ue_height: env.ue_height,
                path_count: env.path_count,
                shadowing_std_db: env.shadowing_std_db,
                shadowing_decorrelation_m: env.shadowing_decorrelation_m,
                mean_excess_delay_s: env.mean_excess_delay_s,
                delay_decorrelation_m2: env.delay_decorrelation_m2,
                pdp_decay_s: env.pdp_decay_s,
                scatter_gain: env.scatter_gain,
            },
            capacity: CapacitySection {
                bs: 0,
                samples: profile.capacity_samples(),
            },
            localization: LocalizationSection::Constant {
                variance: REFERENCE_LOC_VARIANCE,
            },
            scheme: SchemeSection {
                family: SchemeFamily::Interval,
                delta: 0.05,
            },
            calibration: CalibrationSection {
                method: MetaMethod::MonteCarlo {
                    draws: profile.location_draws(),
                },
                rel_tol: 1e-3,
                allow_out_of_map: false,
            },
            evaluation: EvaluationSection {
                method: MetaMethod::MonteCarlo { draws: 100_000 },
                throughput_draws: 10_000,
                allow_out_of_map: false,
            },
            analysis: AnalysisSection {
                coherence_threshold: 0.9,
                neighborhood_radius: 5.0,
                prominence: 0.05,
                box_alpha: 0.05,
            },
            rayleigh: RayleighSection {
                path_gain_db: 0.0,
                exponent: 2.0,
                tx_snr_db: 30.0,
                cell_min: 20.0,
                cell_max: 100.0,
                extended_cell_max: 500.0,
                eps: 1e-5,
                sigma: 4.0,
                sigma_slope: -0.025,
                sigma_offset: 4.5,
                deltas: vec![1e-1, 1e-3, 1e-5],
                illustration_x: 50.0,
                illustration_variance: 16.0,
                illustration_beta: 0.5,
                coherence_thresholds: vec![0.1, 0.5, 0.9, 1.0],
                x_step: 1.0,
                throughput_step: 5.0,
            },
        })
    }

    /// Parses and resolves a config document. `command` names the default
    /// output subdirectory.
    pub fn from_json(text: &str, overrides: &Overrides, command: &str) -> CliResult<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let raw: RawConfig = serde_path_to_error::deserialize(de).map_err(describe)?;
        Self::resolve(raw, overrides, command)
    }

    pub fn load(path: Option<&Path>, overrides: &Overrides, command: &str) -> CliResult<Self> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                Self::from_json(&text, overrides, command)
            }
            None => Self::resolve(RawConfig::default(), overrides, command),
        }
    }

    fn resolve(raw: RawConfig, o: &Overrides, command: &str) -> CliResult<Self> {
        let profile = o.profile.or(raw.profile).unwrap_or(Profile::Desk);
        let seed = o.seed.or(raw.seed).unwrap_or(DEFAULT_SEED);
        let output_dir = o
            .output_dir
            .clone()
            .or(raw.output_dir)
            .unwrap_or_else(|| default_output_dir(command));
        let d = Self::defaults(profile, seed, output_dir)?;
        let mut cfg = Self {
            system: raw.system.unwrap_or(d.system),
            grid: raw.grid.unwrap_or(d.grid),
            environment: raw.environment.unwrap_or(d.environment),
            capacity: raw.capacity.unwrap_or(d.capacity),
            localization: raw.localization.unwrap_or(d.localization),
            scheme: raw.scheme.unwrap_or(d.scheme),
            calibration: raw.calibration.unwrap_or(d.calibration),
            evaluation: raw.evaluation.unwrap_or(d.evaluation),
            analysis: raw.analysis.unwrap_or(d.analysis),
            rayleigh: raw.rayleigh.unwrap_or(d.rayleigh),
            ..d
        };
        if let Some(f) = o.family {
            cfg.scheme.family = f;
        }
        if let Some(delta) = o.delta {
            cfg.scheme.delta = delta;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn env_config(&self) -> EnvConfig {
        let e = &self.environment;
        EnvConfig {
            cell: self.grid.cell,
            spacing: self.grid.spacing,
            margin: self.grid.margin,
            base_stations: e.base_stations.clone(),
            ue_height: e.ue_height,
            path_count: e.path_count,
            shadowing_std_db: e.shadowing_std_db,
            shadowing_decorrelation_m: e.shadowing_decorrelation_m,
            mean_excess_delay_s: e.mean_excess_delay_s,
            delay_decorrelation_m2: e.delay_decorrelation_m2,
            pdp_decay_s: e.pdp_decay_s,
            scatter_gain: e.scatter_gain,
            carrier_frequency_hz: self.system.carrier_frequency_hz,
            seed: self.seed,
        }
    }

    pub fn crlb_options(&self) -> Option<CrlbOptions> {
        match self.localization {
            LocalizationSection::Crlb {
                draws,
                with_bias,
                allow_pseudo_inverse,
                fim_mode,
            } => Some(CrlbOptions {
                draws,
                with_bias,
                allow_pseudo_inverse,
                mode: fim_mode,
            }),
            LocalizationSection::Constant { .. } => None,
        }
    }

    /// Warnings recorded in the manifest.
    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if self.grid.margin == 0.0 && self.localization.kind() == LocalizationKind::Crlb {
            w.push(
                "grid.margin is 0 with CRLB localization: the padding check is deferred to evaluation"
                    .to_string(),
            );
        }
        w
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config is serializable")
    }

    fn validate(&self) -> CliResult<()> {
        let bad = |m: String| Err(CliError::Config(m));
        self.system.validate()?;
        self.env_config().validate()?;
        if self.capacity.bs >= self.environment.base_stations.len() {
            return bad(format!(
                "capacity.bs = {} but only {} base stations are configured",
                self.capacity.bs,
                self.environment.base_stations.len()
            ));
        }
        if self.capacity.samples == 0 {
            return bad("capacity.samples must be positive".into());
        }
        match self.localization {
            LocalizationSection::Constant { variance }
                if !(variance > 0.0 && variance.is_finite()) =>
            {
                return bad("localization.variance must be positive".into());
            }
            LocalizationSection::Crlb { draws: 0, .. } => {
                return bad("localization.draws must be positive".into());
            }
            _ => {}
        }
        if !(self.scheme.delta > 0.0 && self.scheme.delta < 1.0) {
            return bad(format!(
                "scheme.delta must lie in (0,1), got {}",
                self.scheme.delta
            ));
        }
        for (key, m) in [
            ("calibration.method", self.calibration.method),
            ("evaluation.method", self.evaluation.method),
        ] {
            if let MetaMethod::MonteCarlo { draws: 0 } = m {
                return bad(format!("{key}.draws must be positive"));
            }
        }
        if !(self.calibration.rel_tol > 0.0 && self.calibration.rel_tol < 1.0) {
            return bad("calibration.rel_tol must lie in (0,1)".into());
        }
        if self.evaluation.throughput_draws == 0 {
            return bad("evaluation.throughput_draws must be positive".into());
        }
        let a = &self.analysis;
        if !(a.coherence_threshold > 0.0) {
            return bad("analysis.coherence_threshold must be positive".into());
        }
        if !(a.neighborhood_radius >= self.grid.spacing) {
            return bad("analysis.neighborhood_radius must be at least grid.spacing".into());
        }
        if !(a.prominence >= 0.0) {
            return bad("analysis.prominence must be nonnegative".into());
        }
        if !(a.box_alpha > 0.0 && a.box_alpha < 0.5) {
            return bad("analysis.box_alpha must lie in (0,0.5)".into());
        }
        let r = &self.rayleigh;
        if !(r.x_step > 0.0 && r.throughput_step > 0.0) {
            return bad("rayleigh steps must be positive".into());
        }
        if !(r.extended_cell_max >= r.cell_max) {
            return bad("rayleigh.extended_cell_max must be at least rayleigh.cell_max".into());
        }
        if !(r.sigma > 0.0 && r.illustration_variance > 0.0) {
            return bad("rayleigh standard deviations must be positive".into());
        }
        if r.deltas.iter().any(|d| !(*d > 0.0 && *d < 1.0)) {
            return bad("rayleigh.deltas must lie in (0,1)".into());
        }
        Ok(())
    }
}

/// Config error naming the offending key and, when known, its position.
fn describe(err: serde_path_to_error::Error<serde_json::Error>) -> CliError {
    let path = err.path().to_string();
    let inner = err.inner();
    let msg = inner.to_string();
    let key = match missing_field(&msg) {
        Some(field) if path == "." => field.to_string(),
        Some(field) => format!("{path}.{field}"),
        None => path,
    };
    let position = if inner.line() > 0 {
        format!(" (line {}, column {})", inner.line(), inner.column())
    } else {
        String::new()
    };
    let what = match missing_field(&msg) {
        Some(_) => "missing required key".to_string(),
        None => strip_position(&msg).to_string(),
    };
    CliError::Config(format!("{key}: {what}{position}"))
}

fn missing_field(msg: &str) -> Option<&str> {
    let rest = msg.strip_prefix("missing field `")?;
    rest.split('`').next()
}

fn strip_position(msg: &str) -> &str {
    msg.rfind(" at line ").map_or(msg, |i| &msg[..i])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn load(text: &str) -> CliResult<RunConfig> {
        RunConfig::from_json(text, &Overrides::default(), "test")
    }

    #[test]
    fn empty_document_is_the_profile_default() {
        let cfg = load("{}").unwrap();
        let d =
            RunConfig::defaults(Profile::Desk, DEFAULT_SEED, default_output_dir("test")).unwrap();
        assert_eq!(cfg, d);
    }

    #[test]
    fn echo_round_trips() {
        let cfg = load(r#"{"profile": "paper", "seed": 9}"#).unwrap();
        let echo = serde_json::to_string(&cfg.to_json()).unwrap();
        assert_eq!(load(&echo).unwrap(), cfg);
        assert_eq!(cfg.system.subcarrier_count, 601);
        assert_eq!(cfg.env_config().seed, 9);
    }

    #[test]
    fn missing_key_is_named() {
        let text = r#"{
  "grid": {
    "cell": {"x_lo": -50, "x_hi": 50, "y_lo": -50, "y_hi": 50},
    "margin": 22.5
  }
}"#;
        let err = load(text).unwrap_err().to_string();
        assert!(err.contains("grid.spacing"), "{err}");
        assert!(err.contains("line"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in [
            r#"{"sead": 1}"#,
            r#"{"capacity": {"bs": 0, "samples": 10, "extra": 1}}"#,
            r#"{"localization": {"mode": "constant", "variance": 1, "x": 2}}"#,
        ] {
            let err = load(text).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{text}: {err}");
        }
    }

    #[test]
    fn overrides_win() {
        let o = Overrides {
            seed: Some(5),
            delta: Some(0.1),
            family: Some(SchemeFamily::Backoff),
            ..Default::default()
        };
        let cfg = RunConfig::from_json(r#"{"seed": 3}"#, &o, "x").unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.scheme.delta, 0.1);
        assert_eq!(cfg.scheme.family, SchemeFamily::Backoff);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for text in [
            r#"{"scheme": {"family": "interval", "delta": 1.5}}"#,
            r#"{"capacity": {"bs": 7, "samples": 10}}"#,
            r#"{"analysis": {"coherence_threshold": 0.9, "neighborhood_radius": 1, "prominence": 0.05, "box_alpha": 0.05}}"#,
        ] {
            assert_eq!(load(text).unwrap_err().exit_code(), 2, "{text}");
        }
    }

    #[test]
    fn zero_margin_with_crlb_warns() {
        let text = r#"{
  "grid": {"cell": {"x_lo": -50, "x_hi": 50, "y_lo": -50, "y_hi": 50}, "spacing": 5, "margin": 0},
  "localization": {"mode": "crlb", "draws": 10, "with_bias": true, "allow_pseudo_inverse": true, "fim_mode": "blockform"}
}"#;
        let cfg = load(text).unwrap();
        assert_eq!(cfg.warnings().len(), 1);
        assert!(load("{}").unwrap().warnings().is_empty());
    }
}
