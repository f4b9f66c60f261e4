//! Phase–amplitude functional data from the stochastic metamorphosis model.
//!
//! A signal on `I = [0, 1]` is `f(s) = η(φ⁻¹(s)) + ν(s) + ε`. The warp `φ` is
//! the time-`T` flow of `dx = u0(x) dt + Σ_l σ_l^u(x) ∘ dW^l`, with warp
//! fields masked by `4 s (1 - s)` so both endpoints stay fixed. The amplitude
//! is `ν(s) = T ν0(s) + Σ_k σ_k^ν(s) W_T^k`, and `ε` is i.i.d. observation
//! noise that never enters the dynamics.

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::{channel_rng, derive_seed, sample_wiener_path, WienerPath};
use crate::sde::{integrate_with, Method, SdeSystem};

/// `weight · exp(-(s - center)² / (2 width²))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields)]
pub struct Bump {
    pub center: f64,
    pub width: f64,
    pub weight: f64,
}

impl Bump {
    fn eval(&self, s: f64) -> f64 {
        let z = (s - self.center) / self.width;
        self.weight * (-0.5 * z * z).exp()
    }

    fn validate(&self, what: &str) -> Result<()> {
        if !(self.width.is_finite() && self.width > 0.0) {
            return Err(Error::invalid(format!("{what} width must be positive")));
        }
        if !(self.center.is_finite() && self.weight.is_finite()) {
            return Err(Error::invalid(format!("{what} parameters must be finite")));
        }
        Ok(())
    }
}

/// Template `η(s) = offset + Σ bumps`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields)]
pub struct Template {
    #[serde(default)]
    pub offset: f64,
    pub bumps: Vec<Bump>,
}

impl Template {
    pub fn eval(&self, s: f64) -> f64 {
        self.offset + self.bumps.iter().map(|b| b.eval(s)).sum::<f64>()
    }
}

/// Warp field `4 s (1 - s) · bump(s)`; vanishes at both ends of `I`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(transparent)]
pub struct WarpField(pub Bump);

impl WarpField {
    pub fn eval(&self, s: f64) -> f64 {
        4.0 * s * (1.0 - s) * self.0.eval(s)
    }
}

/// Amplitude noise profile `σ_k^ν(s)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum AmplitudeField {
    Constant { value: f64 },
    Bump(Bump),
}

impl AmplitudeField {
    pub fn eval(&self, s: f64) -> f64 {
        match self {
            AmplitudeField::Constant { value } => *value,
            AmplitudeField::Bump(b) => b.eval(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields)]
pub struct FdaSpec {
    pub template: Template,
    #[serde(default)]
    pub warp_fields: Vec<WarpField>,
    #[serde(default)]
    pub amplitude_fields: Vec<AmplitudeField>,
    /// Standard deviation of the observation noise `ε`.
    #[serde(default)]
    pub observation_sd: f64,
    /// Samples per signal, at `s_j = j / (samples - 1)`.
    pub samples: usize,
    pub signals: usize,
    pub horizon: f64,
    /// Time steps of the warp flow.
    pub steps: usize,
    /// Stationary initial warp velocity `u0`; empty means zero.
    #[serde(default)]
    pub initial_warp_velocity: Vec<WarpField>,
    /// Stationary initial amplitude velocity `ν0`; empty means zero.
    #[serde(default)]
    pub initial_amplitude_velocity: Vec<AmplitudeField>,
}

impl FdaSpec {
    pub fn validate(&self) -> Result<()> {
        if self.samples < 2 {
            return Err(Error::invalid("fda needs at least two samples per signal"));
        }
        if self.signals == 0 {
            return Err(Error::invalid("fda needs at least one signal"));
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(Error::invalid("fda horizon must be positive"));
        }
        if self.steps == 0 {
            return Err(Error::invalid("fda warp flow needs at least one step"));
        }
        if !(self.observation_sd.is_finite() && self.observation_sd >= 0.0) {
            return Err(Error::invalid("observation_sd must be ≥ 0"));
        }
        for b in &self.template.bumps {
            b.validate("template bump")?;
        }
        for w in self.warp_fields.iter().chain(&self.initial_warp_velocity) {
            w.0.validate("warp field")?;
        }
        for a in self.amplitude_fields.iter().chain(&self.initial_amplitude_velocity) {
            if let AmplitudeField::Bump(b) = a {
                b.validate("amplitude field")?;
            }
        }
        Ok(())
    }

    pub fn sample_points(&self) -> Vec<f64> {
        let last = (self.samples - 1) as f64;
        (0..self.samples).map(|j| j as f64 / last).collect()
    }

    fn channels(&self) -> usize {
        self.warp_fields.len() + self.amplitude_fields.len()
    }
}

/// Independent points on `I` under the warp flow; `direction = -1` runs
/// the drift backwards for the inverse map.
struct WarpFlow<'a> {
    spec: &'a FdaSpec,
    points: usize,
    direction: f64,
}

impl SdeSystem for WarpFlow<'_> {
    fn dim(&self) -> usize {
        self.points
    }

    fn channels(&self) -> usize {
        self.spec.warp_fields.len()
    }

    fn drift(&self, x: &[f64], out: &mut [f64]) {
        for (o, &s) in out.iter_mut().zip(x) {
            *o = self.direction * self.spec.initial_warp_velocity.iter().map(|w| w.eval(s)).sum::<f64>();
        }
    }

    fn diffusion(&self, x: &[f64], channel: usize, out: &mut [f64]) {
        let field = self.spec.warp_fields[channel];
        for (o, &s) in out.iter_mut().zip(x) {
            *o = field.eval(s);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FdaSignal {
    pub seed: u64,
    /// Observed values `f(s_j)`.
    pub values: Vec<f64>,
    /// `φ(s_j)`.
    pub warp: Vec<f64>,
    /// `φ⁻¹(s_j)`.
    pub warp_inverse: Vec<f64>,
    /// `ν(s_j)`.
    pub amplitude: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FdaSignals {
    pub s: Vec<f64>,
    pub signals: Vec<FdaSignal>,
}

fn check_warp(values: &[f64], what: &str) -> Result<()> {
    if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Invariant(format!("{what} left the interval: {v}")));
    }
    if values.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Invariant(format!("{what} is not strictly increasing")));
    }
    Ok(())
}

fn generate_one(spec: &FdaSpec, s: &[f64], seed: u64) -> Result<FdaSignal> {
    let ku = spec.warp_fields.len();
    let dt = spec.horizon / spec.steps as f64;
    let path = sample_wiener_path(seed, dt, spec.steps, spec.channels())?;
    let warp_channels: Vec<usize> = (0..ku).collect();
    let warp_path = path.select_channels(&warp_channels)?;

    let fwd = WarpFlow {
        spec,
        points: s.len(),
        direction: 1.0,
    };
    let bwd = WarpFlow {
        direction: -1.0,
        ..fwd
    };
    let flow = |sys: &WarpFlow, p: &WienerPath| {
        integrate_with(sys, s, spec.horizon, spec.steps, p, Method::Heun, |_, _| {})
            .map_err(|e| Error::Invariant(format!("warp flow failed: {e}")))
    };
    let warp = flow(&fwd, &warp_path)?;
    let warp_inverse = flow(&bwd, &warp_path.reversed())?;
    check_warp(&warp, "warp")?;
    check_warp(&warp_inverse, "inverse warp")?;

    let w_t = path.terminal_values();
    let amplitude: Vec<f64> = s
        .iter()
        .map(|&sj| {
            let drift: f64 = spec.initial_amplitude_velocity.iter().map(|a| a.eval(sj)).sum();
            let noise: f64 = spec
                .amplitude_fields
                .iter()
                .zip(&w_t[ku..])
                .map(|(a, w)| a.eval(sj) * w)
                .sum();
            spec.horizon * drift + noise
        })
        .collect();

    let mut values: Vec<f64> = warp_inverse
        .iter()
        .zip(&amplitude)
        .map(|(&x, nu)| spec.template.eval(x) + nu)
        .collect();
    if spec.observation_sd > 0.0 {
        let mut rng = channel_rng(seed, spec.channels() as u64);
        let normal = Normal::new(0.0, spec.observation_sd)
            .map_err(|e| Error::invalid(format!("observation noise: {e}")))?;
        for v in values.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    Ok(FdaSignal {
        seed,
        values,
        warp,
        warp_inverse,
        amplitude,
    })
}

/// Generates `spec.signals` independent signals; signal `i` is seeded by
/// `derive_seed(base_seed, i)`.
pub fn generate_fda_signals(spec: &FdaSpec, base_seed: u64) -> Result<FdaSignals> {
    spec.validate()?;
    let s = spec.sample_points();
    let signals = (0..spec.signals)
        .into_par_iter()
        .map(|i| generate_one(spec, &s, derive_seed(base_seed, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(FdaSignals { s, signals })
}
