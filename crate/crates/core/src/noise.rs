//! Noise structures: deformation fields `σ_l^u`, template amplitudes `σ^ν`,
//! seeded Wiener increments and the Stratonovich-to-Itô drift correction.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::kernels::dist_sq;
use crate::sde::SdeSystem;

/// Spatially correlated deformation noise field.
///
/// Either a Gaussian bump `a exp(-|x - c|^2 / (2 r^2))` or, with
/// `is_constant`, the constant field `a`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields)]
pub struct DeformationNoiseField {
    #[serde(default)]
    pub center: Vec<f64>,
    #[serde(default)]
    pub width: f64,
    pub amplitude: Vec<f64>,
    #[serde(default)]
    pub is_constant: bool,
}

impl DeformationNoiseField {
    pub fn bump(center: Vec<f64>, width: f64, amplitude: Vec<f64>) -> Self {
        Self {
            center,
            width,
            amplitude,
            is_constant: false,
        }
    }

    pub fn constant(amplitude: Vec<f64>) -> Self {
        Self {
            center: Vec::new(),
            width: 0.0,
            amplitude,
            is_constant: true,
        }
    }

    pub fn dim(&self) -> usize {
        self.amplitude.len()
    }

    pub fn validate(&self) -> Result<()> {
        ensure_finite("noise amplitude", &self.amplitude)?;
        if self.is_constant {
            return Ok(());
        }
        if !(self.width.is_finite() && self.width > 0.0) {
            return Err(Error::invalid(format!(
                "bump noise width must be positive, got {}",
                self.width
            )));
        }
        if self.center.len() != self.amplitude.len() {
            return Err(Error::invalid(format!(
                "bump center has dimension {} but amplitude has {}",
                self.center.len(),
                self.amplitude.len()
            )));
        }
        ensure_finite("noise center", &self.center)
    }

    /// Scalar profile `exp(-|x - c|^2 / (2 r^2))`, 1 for constant fields.
    #[inline]
    fn profile(&self, x: &[f64]) -> f64 {
        if self.is_constant {
            1.0
        } else {
            (-0.5 * dist_sq(x, &self.center) / (self.width * self.width)).exp()
        }
    }

    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        ensure_finite("noise field argument", x)?;
        let mut out = vec![0.0; self.dim()];
        self.eval_into(x, &mut out);
        Ok(out)
    }

    #[inline]
    pub(crate) fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        let s = self.profile(x);
        for (o, a) in out.iter_mut().zip(&self.amplitude) {
            *o = a * s;
        }
    }

    /// Row-major `d×d` Jacobian, `J[a][b] = ∂σ_a / ∂x_b`.
    pub fn jacobian(&self, x: &[f64]) -> Result<Vec<f64>> {
        ensure_finite("noise field argument", x)?;
        let d = self.dim();
        let mut out = vec![0.0; d * d];
        if self.is_constant {
            return Ok(out);
        }
        let s = self.profile(x) / (self.width * self.width);
        for a in 0..d {
            for b in 0..d {
                out[a * d + b] = -self.amplitude[a] * (x[b] - self.center[b]) * s;
            }
        }
        Ok(out)
    }

    /// `-(Dσ(x))ᵀ p`, accumulated into `out`.
    #[inline]
    pub(crate) fn sub_jacobian_transpose_times(&self, x: &[f64], p: &[f64], out: &mut [f64]) {
        if self.is_constant {
            return;
        }
        // (Dσ)ᵀ p = -(a·p) (x - c) / r² · profile
        let ap: f64 = self.amplitude.iter().zip(p).map(|(a, b)| a * b).sum();
        let s = ap * self.profile(x) / (self.width * self.width);
        for ((o, xi), ci) in out.iter_mut().zip(x).zip(&self.center) {
            *o += s * (xi - ci);
        }
    }
}

/// Template noise amplitudes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(rename_all = "snake_case")]
pub enum TemplateNoise {
    /// One constant vector per landmark; landmark `i` has its own channel.
    PerLandmark(Vec<Vec<f64>>),
    /// Grid functions, one per channel, each with one value per grid node.
    Grid(Vec<Vec<f64>>),
}

impl TemplateNoise {
    pub fn channels(&self) -> usize {
        match self {
            TemplateNoise::PerLandmark(v) | TemplateNoise::Grid(v) => v.len(),
        }
    }

    pub fn validate_landmarks(&self, n: usize, d: usize) -> Result<()> {
        let TemplateNoise::PerLandmark(v) = self else {
            return Err(Error::invalid(
                "landmark systems need per-landmark template noise",
            ));
        };
        if v.len() != n {
            return Err(Error::invalid(format!(
                "template noise has {} vectors for {} landmarks",
                v.len(),
                n
            )));
        }
        for (i, s) in v.iter().enumerate() {
            if s.len() != d {
                return Err(Error::invalid(format!(
                    "template noise vector {i} has dimension {}, expected {d}",
                    s.len()
                )));
            }
            ensure_finite("template noise", s)?;
        }
        Ok(())
    }

    pub fn validate_grid(&self, nodes: usize) -> Result<()> {
        let TemplateNoise::Grid(v) = self else {
            return Err(Error::invalid("grid systems need grid template noise"));
        };
        for (k, f) in v.iter().enumerate() {
            if f.len() != nodes {
                return Err(Error::invalid(format!(
                    "template noise channel {k} has {} values for {nodes} grid nodes",
                    f.len()
                )));
            }
            ensure_finite("template noise", f)?;
        }
        Ok(())
    }
}

/// Table of Brownian increments, `steps` rows by `channels` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct WienerPath {
    pub seed: u64,
    pub dt: f64,
    pub steps: usize,
    pub channels: usize,
    increments: Vec<f64>,
}

impl WienerPath {
    /// Builds a path from an explicit row-major increment table.
    pub fn from_increments(
        dt: f64,
        steps: usize,
        channels: usize,
        increments: Vec<f64>,
    ) -> Result<Self> {
        check_path_shape(dt, steps)?;
        crate::error::ensure_len("wiener increments", steps * channels, increments.len())?;
        Ok(Self {
            seed: 0,
            dt,
            steps,
            channels,
            increments,
        })
    }

    /// Increments of step `m`, one per channel.
    #[inline]
    pub fn row(&self, m: usize) -> &[f64] {
        &self.increments[m * self.channels..(m + 1) * self.channels]
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    /// Brownian value `W_T` per channel (sum of all increments).
    pub fn terminal_values(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.channels];
        for m in 0..self.steps {
            for (wc, dw) in w.iter_mut().zip(self.row(m)) {
                *wc += dw;
            }
        }
        w
    }

    /// Coarser path on the same Brownian sample: each coarse increment is the
    /// sum of `factor` consecutive fine increments.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if factor == 0 || !self.steps.is_multiple_of(factor) {
            return Err(Error::invalid(format!(
                "cannot coarsen {} steps by a factor of {factor}",
                self.steps
            )));
        }
        let steps = self.steps / factor;
        let mut increments = vec![0.0; steps * self.channels];
        for m in 0..steps {
            let row = &mut increments[m * self.channels..(m + 1) * self.channels];
            for f in 0..factor {
                for (r, dw) in row.iter_mut().zip(self.row(m * factor + f)) {
                    *r += dw;
                }
            }
        }
        Ok(Self {
            seed: self.seed,
            dt: self.dt * factor as f64,
            steps,
            channels: self.channels,
            increments,
        })
    }

    /// The path run backwards: rows in reverse order with negated increments.
    pub fn reversed(&self) -> Self {
        let mut increments = Vec::with_capacity(self.increments.len());
        for m in (0..self.steps).rev() {
            increments.extend(self.row(m).iter().map(|v| -v));
        }
        Self {
            increments,
            ..self.clone()
        }
    }

    /// Restriction to a subset of channels, in the given order.
    pub fn select_channels(&self, channels: &[usize]) -> Result<Self> {
        if let Some(&c) = channels.iter().find(|&&c| c >= self.channels) {
            return Err(Error::invalid(format!(
                "channel {c} out of range for a path with {} channels",
                self.channels
            )));
        }
        let mut increments = Vec::with_capacity(self.steps * channels.len());
        for m in 0..self.steps {
            let row = self.row(m);
            increments.extend(channels.iter().map(|&c| row[c]));
        }
        Ok(Self {
            channels: channels.len(),
            increments,
            ..self.clone()
        })
    }
}

fn check_path_shape(dt: f64, steps: usize) -> Result<()> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::invalid(format!("dt must be positive, got {dt}")));
    }
    if steps == 0 {
        return Err(Error::invalid("a Wiener path needs at least one step"));
    }
    Ok(())
}

/// Seeded Gaussian increments `~ N(0, dt)`.
///
/// Channel `c` draws from its own ChaCha20 stream (`seed`, stream `c`), so a
/// column depends only on `(seed, c, dt, steps)`.
pub fn sample_wiener_path(seed: u64, dt: f64, steps: usize, channels: usize) -> Result<WienerPath> {
    check_path_shape(dt, steps)?;
    let sd = dt.sqrt();
    let mut increments = vec![0.0; steps * channels];
    for c in 0..channels {
        let mut rng = channel_rng(seed, c as u64);
        for m in 0..steps {
            let z: f64 = StandardNormal.sample(&mut rng);
            increments[m * channels + c] = sd * z;
        }
    }
    Ok(WienerPath {
        seed,
        dt,
        steps,
        channels,
        increments,
    })
}

/// Independent generator for stream `stream` of `seed`.
pub fn channel_rng(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Seed of realization `index` under `base_seed` (SplitMix64 finalizer over
/// both words).
pub fn derive_seed(base_seed: u64, index: u64) -> u64 {
    splitmix64(splitmix64(base_seed) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Step used for finite-difference Jacobians of diffusion tangents.
pub const FD_STEP: f64 = 1e-5;

/// Central difference of channel `c` along `v`: `Dg_c(x) v`.
pub fn fd_directional_derivative<S: SdeSystem + ?Sized>(
    system: &S,
    x: &[f64],
    channel: usize,
    v: &[f64],
    out: &mut [f64],
) {
    let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if norm == 0.0 {
        out.iter_mut().for_each(|o| *o = 0.0);
        return;
    }
    let h = FD_STEP;
    let xp: Vec<f64> = x.iter().zip(v).map(|(a, b)| a + h * b / norm).collect();
    let xm: Vec<f64> = x.iter().zip(v).map(|(a, b)| a - h * b / norm).collect();
    let mut gm = vec![0.0; x.len()];
    system.diffusion(&xp, channel, out);
    system.diffusion(&xm, channel, &mut gm);
    let scale = norm / (2.0 * h);
    for (o, m) in out.iter_mut().zip(&gm) {
        *o = (*o - m) * scale;
    }
}

/// `½ Σ_c (Dg_c · g_c)(x)`: the drift added to an Itô scheme so it targets the
/// law of the Stratonovich system.
pub fn ito_drift_correction<S: SdeSystem + ?Sized>(system: &S, x: &[f64]) -> Vec<f64> {
    let dim = x.len();
    let mut total = vec![0.0; dim];
    let mut g = vec![0.0; dim];
    let mut dg = vec![0.0; dim];
    for c in 0..system.channels() {
        system.diffusion(x, c, &mut g);
        system.diffusion_derivative(x, c, &g, &mut dg);
        for (t, v) in total.iter_mut().zip(&dg) {
            *t += 0.5 * v;
        }
    }
    total
}
