//! Stochastic two-component Camassa–Holm (CH2) system on a periodic grid.
//!
//! ```text
//! dm + (u m_x + 2 m u_x) dt = -ρ ρ_x dt - Σ_k ρ (σ_k^ν)_x ∘ dW^k
//!                              - Σ_l (σ_l^u m_x + 2 m (σ_l^u)_x) ∘ dW^l
//! dρ + (ρ u)_x dt + Σ_l (ρ σ_l^u)_x ∘ dW^l = 0
//! ```
//!
//! with `m = u - α² u_xx`. Derivatives are Fourier pseudospectral; nonlinear
//! products are dealiased with the 2/3 rule. The flat state for
//! [`SdeSystem`] is `[m_0..m_{N-1}, ρ_0..ρ_{N-1}]`.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{ensure_finite, ensure_len, Error, Result};
use crate::sde::SdeSystem;

/// Uniform periodic grid `x_j = j L / N` on the circle of circumference `L`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid1D {
    pub length: f64,
    pub nodes: usize,
}

impl Grid1D {
    pub fn new(length: f64, nodes: usize) -> Result<Self> {
        if !(length.is_finite() && length > 0.0) {
            return Err(Error::invalid(format!("grid length must be positive, got {length}")));
        }
        if nodes < 4 || !nodes.is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "grid needs an even number of nodes ≥ 4, got {nodes}"
            )));
        }
        Ok(Self { length, nodes })
    }

    pub fn spacing(&self) -> f64 {
        self.length / self.nodes as f64
    }

    pub fn x(&self, j: usize) -> f64 {
        j as f64 * self.spacing()
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.nodes).map(|j| self.x(j)).collect()
    }

    /// Distance on the circle.
    pub fn periodic_distance(&self, a: f64, b: f64) -> f64 {
        let d = (a - b).rem_euclid(self.length);
        d.min(self.length - d)
    }

    /// Samples `f` at the grid points.
    pub fn sample(&self, f: impl Fn(f64) -> f64) -> Vec<f64> {
        (0..self.nodes).map(|j| f(self.x(j))).collect()
    }
}

/// Momentum density `m`, template density `ρ` and Helmholtz length `α`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ch2State {
    pub m: Vec<f64>,
    pub rho: Vec<f64>,
    pub alpha: f64,
}

impl Ch2State {
    pub fn new(m: Vec<f64>, rho: Vec<f64>, alpha: f64) -> Result<Self> {
        ensure_len("ch2 density", m.len(), rho.len())?;
        ensure_finite("ch2 momentum", &m)?;
        ensure_finite("ch2 density", &rho)?;
        check_alpha(alpha)?;
        Ok(Self { m, rho, alpha })
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut x = self.m.clone();
        x.extend_from_slice(&self.rho);
        x
    }

    pub fn from_flat(x: &[f64], alpha: f64) -> Result<Self> {
        if !x.len().is_multiple_of(2) {
            return Err(Error::invalid("flat ch2 state must have even length"));
        }
        let (m, rho) = x.split_at(x.len() / 2);
        Self::new(m.to_vec(), rho.to_vec(), alpha)
    }
}

/// Deformation and template noise grid functions.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Ch2NoiseSpec {
    pub sigma_u_fields: Vec<Vec<f64>>,
    pub sigma_nu_fields: Vec<Vec<f64>>,
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha.is_finite() && alpha > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("alpha must be positive, got {alpha}")))
    }
}

/// FFT plans and wavenumbers for one grid.
#[derive(Clone)]
pub struct Spectral {
    grid: Grid1D,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    /// Signed angular wavenumbers, FFT ordering.
    k: Vec<f64>,
    /// Modes kept by the 2/3 rule.
    keep: Vec<bool>,
}

impl fmt::Debug for Spectral {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Spectral").field("grid", &self.grid).finish_non_exhaustive()
    }
}

impl Spectral {
    pub fn new(grid: Grid1D) -> Self {
        let n = grid.nodes;
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(n);
        let inv = planner.plan_fft_inverse(n);
        let base = 2.0 * PI / grid.length;
        let k = (0..n)
            .map(|j| {
                let idx = if j <= n / 2 { j as f64 } else { j as f64 - n as f64 };
                base * idx
            })
            .collect();
        let cutoff = n / 3;
        let keep = (0..n).map(|j| j.min(n - j) <= cutoff).collect();
        Self { grid, fwd, inv, k, keep }
    }

    pub fn grid(&self) -> Grid1D {
        self.grid
    }

    fn forward(&self, f: &[f64]) -> Vec<Complex<f64>> {
        let mut buf: Vec<Complex<f64>> = f.iter().map(|&v| Complex::new(v, 0.0)).collect();
        self.fwd.process(&mut buf);
        buf
    }

    fn inverse(&self, mut buf: Vec<Complex<f64>>) -> Vec<f64> {
        self.inv.process(&mut buf);
        let scale = 1.0 / self.grid.nodes as f64;
        buf.iter().map(|c| c.re * scale).collect()
    }

    fn map_modes(&self, f: &[f64], mut op: impl FnMut(usize, Complex<f64>) -> Complex<f64>) -> Vec<f64> {
        let mut hat = self.forward(f);
        for (j, c) in hat.iter_mut().enumerate() {
            *c = op(j, *c);
        }
        self.inverse(hat)
    }

    /// Spectral `∂_x`; the Nyquist mode is dropped.
    pub fn derivative(&self, f: &[f64]) -> Vec<f64> {
        let nyq = self.grid.nodes / 2;
        self.map_modes(f, |j, c| {
            if j == nyq {
                Complex::new(0.0, 0.0)
            } else {
                c * Complex::new(0.0, self.k[j])
            }
        })
    }

    /// 2/3-rule projection.
    pub fn project(&self, f: &[f64]) -> Vec<f64> {
        self.map_modes(f, |j, c| if self.keep[j] { c } else { Complex::new(0.0, 0.0) })
    }

    /// `∂_x` of the 2/3-rule projection.
    pub fn derivative_projected(&self, f: &[f64]) -> Vec<f64> {
        let nyq = self.grid.nodes / 2;
        self.map_modes(f, |j, c| {
            if j == nyq || !self.keep[j] {
                Complex::new(0.0, 0.0)
            } else {
                c * Complex::new(0.0, self.k[j])
            }
        })
    }

    /// `m = u - α² u_xx`.
    pub fn helmholtz_apply(&self, u: &[f64], alpha: f64) -> Vec<f64> {
        let a2 = alpha * alpha;
        self.map_modes(u, |j, c| c * (1.0 + a2 * self.k[j] * self.k[j]))
    }

    /// Solves `u - α² u_xx = m` for `u`.
    pub fn helmholtz_invert(&self, m: &[f64], alpha: f64) -> Vec<f64> {
        let a2 = alpha * alpha;
        self.map_modes(m, |j, c| c / (1.0 + a2 * self.k[j] * self.k[j]))
    }
}

pub fn helmholtz_apply(u: &[f64], alpha: f64, grid: &Grid1D) -> Result<Vec<f64>> {
    ensure_len("grid function", grid.nodes, u.len())?;
    check_alpha(alpha)?;
    Ok(Spectral::new(*grid).helmholtz_apply(u, alpha))
}

pub fn helmholtz_invert(m: &[f64], alpha: f64, grid: &Grid1D) -> Result<Vec<f64>> {
    ensure_len("grid function", grid.nodes, m.len())?;
    check_alpha(alpha)?;
    Ok(Spectral::new(*grid).helmholtz_invert(m, alpha))
}

/// The stochastic CH2 system on one grid.
#[derive(Debug, Clone)]
pub struct Ch2System {
    spectral: Spectral,
    alpha: f64,
    noise: Ch2NoiseSpec,
    dealias: bool,
}

impl Ch2System {
    pub fn new(grid: Grid1D, alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        Ok(Self {
            spectral: Spectral::new(grid),
            alpha,
            noise: Ch2NoiseSpec::default(),
            dealias: true,
        })
    }

    pub fn with_noise(mut self, noise: Ch2NoiseSpec) -> Result<Self> {
        let n = self.grid().nodes;
        for f in noise.sigma_u_fields.iter().chain(&noise.sigma_nu_fields) {
            ensure_len("ch2 noise field", n, f.len())?;
            ensure_finite("ch2 noise field", f)?;
        }
        self.noise = noise;
        Ok(self)
    }

    /// Turns 2/3-rule dealiasing on or off (on by default).
    pub fn with_dealiasing(mut self, on: bool) -> Self {
        self.dealias = on;
        self
    }

    pub fn grid(&self) -> Grid1D {
        self.spectral.grid
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn spectral(&self) -> &Spectral {
        &self.spectral
    }

    pub fn noise(&self) -> &Ch2NoiseSpec {
        &self.noise
    }

    fn proj(&self, f: Vec<f64>) -> Vec<f64> {
        if self.dealias {
            self.spectral.project(&f)
        } else {
            f
        }
    }

    fn div(&self, f: &[f64]) -> Vec<f64> {
        if self.dealias {
            self.spectral.derivative_projected(f)
        } else {
            self.spectral.derivative(f)
        }
    }

    /// Removes the modes the 2/3 rule discards, so a state lies in the band
    /// the dynamics preserve. Identity when dealiasing is off.
    pub fn project_state(&self, state: &Ch2State) -> Result<Ch2State> {
        self.check(state)?;
        Ok(Ch2State {
            m: self.proj(state.m.clone()),
            rho: self.proj(state.rho.clone()),
            alpha: state.alpha,
        })
    }

    fn check(&self, state: &Ch2State) -> Result<()> {
        ensure_len("ch2 momentum", self.grid().nodes, state.m.len())?;
        ensure_len("ch2 density", self.grid().nodes, state.rho.len())
    }

    fn drift_parts(&self, m: &[f64], rho: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let sp = &self.spectral;
        let u = sp.helmholtz_invert(m, self.alpha);
        let mx = sp.derivative(m);
        let ux = sp.derivative(&u);
        let rx = sp.derivative(rho);
        let dm: Vec<f64> = (0..m.len())
            .map(|j| -(u[j] * mx[j] + 2.0 * m[j] * ux[j]) - rho[j] * rx[j])
            .collect();
        let flux: Vec<f64> = rho.iter().zip(&u).map(|(r, v)| r * v).collect();
        let drho = self.div(&flux).into_iter().map(|v| -v).collect();
        (self.proj(dm), drho)
    }

    fn diffusion_u_parts(&self, sigma: &[f64], m: &[f64], rho: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let sp = &self.spectral;
        let mx = sp.derivative(m);
        let sx = sp.derivative(sigma);
        let dm: Vec<f64> = (0..m.len())
            .map(|j| -(sigma[j] * mx[j] + 2.0 * m[j] * sx[j]))
            .collect();
        let flux: Vec<f64> = rho.iter().zip(sigma).map(|(r, s)| r * s).collect();
        let drho = self.div(&flux).into_iter().map(|v| -v).collect();
        (self.proj(dm), drho)
    }

    fn diffusion_nu_parts(&self, sigma: &[f64], rho: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let sx = self.spectral.derivative(sigma);
        let dm: Vec<f64> = rho.iter().zip(&sx).map(|(r, s)| -r * s).collect();
        (self.proj(dm), vec![0.0; rho.len()])
    }

    /// Drift tangent `(m_t, ρ_t)`.
    pub fn drift_tangent(&self, state: &Ch2State) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check(state)?;
        Ok(self.drift_parts(&state.m, &state.rho))
    }

    /// Velocity `u` recovered from `m`.
    pub fn velocity(&self, m: &[f64]) -> Vec<f64> {
        self.spectral.helmholtz_invert(m, self.alpha)
    }

    /// Largest step satisfying `dt ≤ 0.25 Δx / max(|u|, |σ_l^u|)`.
    pub fn advective_dt_bound(&self, state: &Ch2State) -> f64 {
        let u = self.velocity(&state.m);
        let speed = u
            .iter()
            .chain(self.noise.sigma_u_fields.iter().flatten())
            .fold(0.0f64, |a, v| a.max(v.abs()));
        if speed == 0.0 {
            f64::INFINITY
        } else {
            0.25 * self.grid().spacing() / speed
        }
    }
}

impl SdeSystem for Ch2System {
    fn dim(&self) -> usize {
        2 * self.grid().nodes
    }

    fn channels(&self) -> usize {
        self.noise.sigma_u_fields.len() + self.noise.sigma_nu_fields.len()
    }

    fn drift(&self, x: &[f64], out: &mut [f64]) {
        let (m, rho) = x.split_at(self.grid().nodes);
        let (dm, drho) = self.drift_parts(m, rho);
        out[..dm.len()].copy_from_slice(&dm);
        out[dm.len()..].copy_from_slice(&drho);
    }

    fn diffusion(&self, x: &[f64], channel: usize, out: &mut [f64]) {
        let (m, rho) = x.split_at(self.grid().nodes);
        let ku = self.noise.sigma_u_fields.len();
        let (dm, drho) = if channel < ku {
            self.diffusion_u_parts(&self.noise.sigma_u_fields[channel], m, rho)
        } else {
            self.diffusion_nu_parts(&self.noise.sigma_nu_fields[channel - ku], rho)
        };
        out[..dm.len()].copy_from_slice(&dm);
        out[dm.len()..].copy_from_slice(&drho);
    }
}

/// Deterministic CH2 tangent `(-(u m_x + 2 m u_x) - ρ ρ_x, -(ρ u)_x)`.
pub fn ch2_drift(state: &Ch2State, grid: &Grid1D) -> Result<(Vec<f64>, Vec<f64>)> {
    Ch2System::new(*grid, state.alpha)?.drift_tangent(state)
}

/// Tangent of a deformation channel: `(-(σ m_x + 2 m σ_x), -(ρ σ)_x)`.
pub fn ch2_diffusion_u(state: &Ch2State, grid: &Grid1D, sigma_u: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let sys = Ch2System::new(*grid, state.alpha)?;
    sys.check(state)?;
    ensure_len("ch2 noise field", grid.nodes, sigma_u.len())?;
    Ok(sys.diffusion_u_parts(sigma_u, &state.m, &state.rho))
}

/// Tangent of a template channel: `(-ρ σ_x, 0)`.
pub fn ch2_diffusion_nu(state: &Ch2State, grid: &Grid1D, sigma_nu: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let sys = Ch2System::new(*grid, state.alpha)?;
    sys.check(state)?;
    ensure_len("ch2 noise field", grid.nodes, sigma_nu.len())?;
    Ok(sys.diffusion_nu_parts(sigma_nu, &state.rho))
}

/// Periodic peakon `u(x) = c cosh((d(x, x0) - L/2)/α) / cosh(L/(2α))`.
pub fn peakon_profile(c: f64, x0: f64, alpha: f64, grid: &Grid1D) -> Vec<f64> {
    let l = grid.length;
    let denom = 1.0 + (-l / alpha).exp();
    grid.sample(|x| {
        let d = grid.periodic_distance(x, x0);
        c * ((-d / alpha).exp() + ((d - l) / alpha).exp()) / denom
    })
}

/// Peakon initial data: `m = u - α² u_xx` of the periodic profile, `ρ = 0`.
pub fn peakon_init(c: f64, x0: f64, alpha: f64, grid: &Grid1D) -> Result<Ch2State> {
    check_alpha(alpha)?;
    if !(c.is_finite() && x0.is_finite()) {
        return Err(Error::invalid("peakon speed and position must be finite"));
    }
    let u = peakon_profile(c, x0, alpha, grid);
    let m = Spectral::new(*grid).helmholtz_apply(&u, alpha);
    Ch2State::new(m, vec![0.0; grid.nodes], alpha)
}

/// Location of the maximum of `u`, refined by a parabola through the
/// largest sample and its two periodic neighbours.
pub fn peak_location(u: &[f64], grid: &Grid1D) -> f64 {
    let n = u.len();
    let (j, _) = u
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bj, bv), (j, &v)| if v > bv { (j, v) } else { (bj, bv) });
    let a = u[(j + n - 1) % n];
    let b = u[j];
    let c = u[(j + 1) % n];
    let denom = a - 2.0 * b + c;
    let shift = if denom != 0.0 { 0.5 * (a - c) / denom } else { 0.0 };
    (grid.x(j) + shift * grid.spacing()).rem_euclid(grid.length)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ch2Invariants {
    pub int_m: f64,
    pub int_rho: f64,
    /// `½ ∫ (u m + ρ²) dx`.
    pub energy: f64,
}

/// Uniform-grid quadrature of `∫m`, `∫ρ` and `½∫(u m + ρ²)`.
pub fn ch2_invariants(state: &Ch2State, grid: &Grid1D) -> Result<Ch2Invariants> {
    ensure_len("ch2 momentum", grid.nodes, state.m.len())?;
    ensure_len("ch2 density", grid.nodes, state.rho.len())?;
    check_alpha(state.alpha)?;
    let u = Spectral::new(*grid).helmholtz_invert(&state.m, state.alpha);
    Ok(invariants_with_velocity(state, &u, grid.spacing()))
}

fn invariants_with_velocity(state: &Ch2State, u: &[f64], dx: f64) -> Ch2Invariants {
    let int_m = state.m.iter().sum::<f64>() * dx;
    let int_rho = state.rho.iter().sum::<f64>() * dx;
    let energy = 0.5
        * dx
        * (0..state.m.len())
            .map(|j| u[j] * state.m[j] + state.rho[j] * state.rho[j])
            .sum::<f64>();
    Ch2Invariants {
        int_m,
        int_rho,
        energy,
    }
}

impl Ch2System {
    pub fn invariants(&self, state: &Ch2State) -> Result<Ch2Invariants> {
        self.check(state)?;
        let u = self.velocity(&state.m);
        Ok(invariants_with_velocity(state, &u, self.grid().spacing()))
    }
}
