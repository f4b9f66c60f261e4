//! Experiment configuration: JSON shape, parsing with field paths, and
//! semantic validation.

use std::path::{Path, PathBuf};

use metamorph::fda::FdaSpec;
use metamorph::{DeformationNoiseField, KernelSpec, Method};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// One experiment. The `scenario` tag selects the variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(tag = "scenario", rename_all = "snake_case")]
pub enum ExperimentConfig {
    LandmarkSde(LandmarkSdeConfig),
    Ch2Sde(Ch2SdeConfig),
    LandmarkMatch(LandmarkMatchConfig),
    FdaGenerate(FdaGenerateConfig),
    ConvergenceStudy(ConvergenceStudyConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct LandmarkSdeConfig {
    pub system: LandmarkSystemConfig,
    pub integrator: IntegratorConfig,
    #[serde(default)]
    pub ensemble: EnsembleConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct Ch2SdeConfig {
    pub system: Ch2SystemConfig,
    pub integrator: IntegratorConfig,
    #[serde(default)]
    pub ensemble: EnsembleConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct LandmarkMatchConfig {
    /// Must be noise-free; `p0` is ignored.
    pub system: LandmarkSystemConfig,
    pub integrator: IntegratorConfig,
    pub matching: MatchingConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct FdaGenerateConfig {
    pub fda: FdaSpec,
    /// Only `base_seed` is used; the signal count comes from `fda.signals`.
    #[serde(default)]
    pub ensemble: EnsembleConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ConvergenceStudyConfig {
    pub system: LandmarkSystemConfig,
    pub convergence: ConvergenceConfig,
    /// Only `base_seed` is used.
    #[serde(default)]
    pub ensemble: EnsembleConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct LandmarkSystemConfig {
    pub kernel: KernelSpec,
    pub lambda: f64,
    /// Initial positions, one row per landmark.
    pub q0: Vec<Vec<f64>>,
    /// Initial momenta; zero when omitted.
    #[serde(default)]
    pub p0: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub noise: NoiseConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    /// Deformation channels.
    #[serde(default)]
    pub sigma_u: Vec<DeformationNoiseField>,
    /// Template channels.
    #[serde(default)]
    pub sigma_nu: Option<SigmaNuConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SigmaNuConfig {
    /// One amplitude vector per landmark (landmark scenarios).
    PerLandmark(Vec<Vec<f64>>),
    /// CSV with one row per grid node and one column per channel (CH2).
    /// Relative paths resolve against the config file's directory.
    GridValuesFile(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct Ch2SystemConfig {
    pub grid: GridConfig,
    pub alpha: f64,
    #[serde(default = "yes")]
    pub dealias: bool,
    pub initial: Ch2Initial,
    /// `sigma_u` entries are one-dimensional bumps, wrapped periodically.
    #[serde(default)]
    pub noise: NoiseConfig,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub length: f64,
    pub nodes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Ch2Initial {
    /// Periodic peakon of speed `c` centred at `center`, with `ρ = 0`.
    Peakon { c: f64, center: f64 },
    /// Gaussian velocity `u` and density `ρ` profiles sharing centre and width.
    Gaussian {
        center: f64,
        width: f64,
        u_amplitude: f64,
        #[serde(default)]
        rho_amplitude: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct IntegratorConfig {
    #[serde(default = "heun")]
    pub method: Method,
    #[serde(alias = "T")]
    pub horizon: f64,
    pub steps: usize,
}

fn heun() -> Method {
    Method::Heun
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default = "one", alias = "R")]
    pub realizations: usize,
    /// Dump every realization's trajectory.
    #[serde(default)]
    pub keep_trajectories: bool,
    /// State coordinates entering the covariance matrices.
    #[serde(default)]
    pub covariance_coords: Vec<usize>,
    #[serde(default = "one_percent")]
    pub max_failure_fraction: f64,
}

fn one() -> usize {
    1
}

fn one_percent() -> f64 {
    0.01
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            base_seed: 0,
            realizations: 1,
            keep_trajectories: false,
            covariance_coords: Vec::new(),
            max_failure_fraction: one_percent(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct MatchingConfig {
    /// Target positions, one row per landmark.
    pub q_target: Vec<Vec<f64>>,
    #[serde(default = "match_tol")]
    pub tol: f64,
    #[serde(default = "fifty")]
    pub max_iterations: usize,
    /// Inexact matching with penalty scale `s` when set.
    #[serde(default)]
    pub penalty_scale: Option<f64>,
}

fn match_tol() -> f64 {
    1e-8
}

fn fifty() -> usize {
    50
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ConvergenceConfig {
    pub horizon: f64,
    /// Dyadic step counts, coarse to fine, at least four levels.
    pub step_ladder: Vec<usize>,
    pub paths: usize,
    #[serde(default = "heun_only")]
    pub methods: Vec<Method>,
}

fn heun_only() -> Vec<Method> {
    vec![Method::Heun]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// Output directory; `--out` overrides it.
    #[serde(default)]
    pub directory: Option<PathBuf>,
    #[serde(default = "all_formats")]
    pub formats: Vec<Format>,
    /// Times for snapshots and statistics; empty means the initial and final time.
    #[serde(default)]
    pub output_times: Vec<f64>,
}

fn all_formats() -> Vec<Format> {
    vec![Format::Csv, Format::Json]
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            directory: None,
            formats: all_formats(),
            output_times: Vec::new(),
        }
    }
}

impl OutputConfig {
    pub fn wants(&self, f: Format) -> bool {
        self.formats.contains(&f)
    }

    /// Step indices for the configured output times.
    pub fn output_steps(&self, horizon: f64, steps: usize) -> Result<Vec<usize>, CliError> {
        if self.output_times.is_empty() {
            return Ok(vec![0, steps]);
        }
        let dt = horizon / steps as f64;
        let mut out = Vec::with_capacity(self.output_times.len());
        for (i, &t) in self.output_times.iter().enumerate() {
            let m = (t / dt).round();
            if !(t.is_finite() && (0.0..=steps as f64).contains(&m) && (m * dt - t).abs() <= 1e-9 * horizon.max(1.0)) {
                return Err(CliError::validation(format!(
                    "output.output_times[{i}]: {t} is not a grid time in [0, {horizon}] with dt = {dt}"
                )));
            }
            out.push(m as usize);
        }
        out.sort_unstable();
        out.dedup();
        Ok(out)
    }
}

impl ExperimentConfig {
    pub fn name(&self) -> &'static str {
        match self {
            ExperimentConfig::LandmarkSde(_) => "landmark_sde",
            ExperimentConfig::Ch2Sde(_) => "ch2_sde",
            ExperimentConfig::LandmarkMatch(_) => "landmark_match",
            ExperimentConfig::FdaGenerate(_) => "fda_generate",
            ExperimentConfig::ConvergenceStudy(_) => "convergence_study",
        }
    }

    pub fn output(&self) -> &OutputConfig {
        match self {
            ExperimentConfig::LandmarkSde(c) => &c.output,
            ExperimentConfig::Ch2Sde(c) => &c.output,
            ExperimentConfig::LandmarkMatch(c) => &c.output,
            ExperimentConfig::FdaGenerate(c) => &c.output,
            ExperimentConfig::ConvergenceStudy(c) => &c.output,
        }
    }

    pub fn output_mut(&mut self) -> &mut OutputConfig {
        match self {
            ExperimentConfig::LandmarkSde(c) => &mut c.output,
            ExperimentConfig::Ch2Sde(c) => &mut c.output,
            ExperimentConfig::LandmarkMatch(c) => &mut c.output,
            ExperimentConfig::FdaGenerate(c) => &mut c.output,
            ExperimentConfig::ConvergenceStudy(c) => &mut c.output,
        }
    }

    /// Base seed, if the scenario is stochastic.
    pub fn base_seed(&self) -> Option<u64> {
        match self {
            ExperimentConfig::LandmarkSde(c) => Some(c.ensemble.base_seed),
            ExperimentConfig::Ch2Sde(c) => Some(c.ensemble.base_seed),
            ExperimentConfig::LandmarkMatch(_) => None,
            ExperimentConfig::FdaGenerate(c) => Some(c.ensemble.base_seed),
            ExperimentConfig::ConvergenceStudy(c) => Some(c.ensemble.base_seed),
        }
    }

    pub fn set_base_seed(&mut self, seed: u64) {
        match self {
            ExperimentConfig::LandmarkSde(c) => c.ensemble.base_seed = seed,
            ExperimentConfig::Ch2Sde(c) => c.ensemble.base_seed = seed,
            ExperimentConfig::LandmarkMatch(_) => {}
            ExperimentConfig::FdaGenerate(c) => c.ensemble.base_seed = seed,
            ExperimentConfig::ConvergenceStudy(c) => c.ensemble.base_seed = seed,
        }
    }

    /// Parses JSON text, reporting the path of the offending field.
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let mut value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| CliError::validation(format!("config is not valid JSON: {e}")))?;
        let obj = value
            .as_object_mut()
            .ok_or_else(|| CliError::validation("config must be a JSON object"))?;
        let scenario = match obj.remove("scenario") {
            Some(serde_json::Value::String(s)) => s,
            Some(_) => return Err(CliError::validation("field `scenario` must be a string")),
            None => return Err(CliError::validation("missing field `scenario`")),
        };
        fn body<T: serde::de::DeserializeOwned>(v: serde_json::Value) -> Result<T, CliError> {
            serde_path_to_error::deserialize(v).map_err(|e| {
                let path = e.path().to_string();
                if path == "." {
                    CliError::validation(e.inner().to_string())
                } else {
                    CliError::validation(format!("{path}: {}", e.inner()))
                }
            })
        }
        Ok(match scenario.as_str() {
            "landmark_sde" => ExperimentConfig::LandmarkSde(body(value)?),
            "ch2_sde" => ExperimentConfig::Ch2Sde(body(value)?),
            "landmark_match" => ExperimentConfig::LandmarkMatch(body(value)?),
            "fda_generate" => ExperimentConfig::FdaGenerate(body(value)?),
            "convergence_study" => ExperimentConfig::ConvergenceStudy(body(value)?),
            other => {
                return Err(CliError::validation(format!(
                    "scenario: unknown scenario `{other}`, expected one of landmark_sde, ch2_sde, landmark_match, fda_generate, convergence_study"
                )))
            }
        })
    }

    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::validation(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")))?;
        Ok(cfg)
    }

    /// Makes referenced files absolute and checks that they exist.
    fn resolve_paths(&mut self, base: &Path) -> Result<(), CliError> {
        let noise = match self {
            ExperimentConfig::LandmarkSde(c) => &mut c.system.noise,
            ExperimentConfig::Ch2Sde(c) => &mut c.system.noise,
            ExperimentConfig::LandmarkMatch(c) => &mut c.system.noise,
            ExperimentConfig::ConvergenceStudy(c) => &mut c.system.noise,
            ExperimentConfig::FdaGenerate(_) => return Ok(()),
        };
        if let Some(SigmaNuConfig::GridValuesFile(p)) = &mut noise.sigma_nu {
            let joined = if p.is_absolute() { p.clone() } else { base.join(&*p) };
            *p = joined.canonicalize().map_err(|e| {
                CliError::validation(format!(
                    "system.noise.sigma_nu.grid_values_file: {}: {e}",
                    joined.display()
                ))
            })?;
        }
        Ok(())
    }
}

/// JSON Schema of [`ExperimentConfig`].
pub fn schema() -> serde_json::Value {
    serde_json::to_value(schemars::schema_for!(ExperimentConfig)).expect("schema serializes")
}
