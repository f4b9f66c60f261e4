//! Time stepping for systems with a drift and per-channel diffusion tangents.
//!
//! States are flat `f64` vectors. The Stratonovich scheme is Euler–Heun; the
//! Itô cross-check is Euler–Maruyama with an optional drift correction.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::{self, WienerPath};

/// A system `dx = f(x) dt + Σ_c g_c(x) ∘ dW^c`.
pub trait SdeSystem: Sync {
    /// Length of the flat state vector.
    fn dim(&self) -> usize;

    /// Number of independent Wiener channels.
    fn channels(&self) -> usize;

    fn drift(&self, x: &[f64], out: &mut [f64]);

    fn diffusion(&self, x: &[f64], channel: usize, out: &mut [f64]);

    /// `Dg_c(x) v`. Central differences unless a system knows better.
    fn diffusion_derivative(&self, x: &[f64], channel: usize, v: &[f64], out: &mut [f64]) {
        noise::fd_directional_derivative(self, x, channel, v, out);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Stratonovich Euler–Heun predictor–corrector.
    Heun,
    /// Euler–Maruyama with the Itô drift correction.
    EulerMaruyamaIto,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Heun => "heun",
            Method::EulerMaruyamaIto => "euler_maruyama_ito",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub seed: u64,
    pub method: Method,
}

impl Trajectory {
    pub fn final_state(&self) -> &[f64] {
        self.states.last().expect("trajectory has at least one state")
    }

    pub fn steps(&self) -> usize {
        self.times.len().saturating_sub(1)
    }
}

/// Scratch buffers reused across steps.
struct Workspace {
    f: Vec<f64>,
    f2: Vec<f64>,
    g: Vec<f64>,
    pred: Vec<f64>,
}

impl Workspace {
    fn new(dim: usize) -> Self {
        Self {
            f: vec![0.0; dim],
            f2: vec![0.0; dim],
            g: vec![0.0; dim],
            pred: vec![0.0; dim],
        }
    }
}

fn check_step_args<S: SdeSystem + ?Sized>(system: &S, x: &[f64], dt: f64, dw: &[f64]) -> Result<()> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::invalid(format!("dt must be positive, got {dt}")));
    }
    crate::error::ensure_len("state", system.dim(), x.len())?;
    crate::error::ensure_len("increments", system.channels(), dw.len())
}

fn heun_step_into<S: SdeSystem + ?Sized>(
    system: &S,
    x: &[f64],
    dt: f64,
    dw: &[f64],
    ws: &mut Workspace,
    out: &mut [f64],
) {
    // predictor
    system.drift(x, &mut ws.f);
    for (p, (xi, fi)) in ws.pred.iter_mut().zip(x.iter().zip(&ws.f)) {
        *p = xi + fi * dt;
    }
    out.copy_from_slice(&ws.pred);
    for (c, &w) in dw.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        system.diffusion(x, c, &mut ws.g);
        for ((p, o), gi) in ws.pred.iter_mut().zip(out.iter_mut()).zip(&ws.g) {
            *p += gi * w;
            *o += 0.5 * gi * w;
        }
    }
    // corrector: out already holds x + f dt + ½ Σ g(x) dW
    system.drift(&ws.pred, &mut ws.f2);
    for ((o, f1), f2) in out.iter_mut().zip(&ws.f).zip(&ws.f2) {
        *o += 0.5 * (f2 - f1) * dt;
    }
    for (c, &w) in dw.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        system.diffusion(&ws.pred, c, &mut ws.g);
        for (o, gi) in out.iter_mut().zip(&ws.g) {
            *o += 0.5 * gi * w;
        }
    }
}

fn em_step_into<S: SdeSystem + ?Sized>(
    system: &S,
    x: &[f64],
    dt: f64,
    dw: &[f64],
    use_ito_correction: bool,
    ws: &mut Workspace,
    out: &mut [f64],
) {
    system.drift(x, &mut ws.f);
    for ((o, xi), fi) in out.iter_mut().zip(x).zip(&ws.f) {
        *o = xi + fi * dt;
    }
    if use_ito_correction {
        let corr = noise::ito_drift_correction(system, x);
        for (o, ci) in out.iter_mut().zip(&corr) {
            *o += ci * dt;
        }
    }
    for (c, &w) in dw.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        system.diffusion(x, c, &mut ws.g);
        for (o, gi) in out.iter_mut().zip(&ws.g) {
            *o += gi * w;
        }
    }
}

fn finite_or_blowup(x: &[f64], step: usize) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::BlowUp { step })
    }
}

/// One Euler–Heun step:
/// `x̃ = x + f(x)dt + Σ g_c(x)dW_c`,
/// `x' = x + ½(f(x) + f(x̃))dt + Σ ½(g_c(x) + g_c(x̃))dW_c`.
pub fn euler_heun_step<S: SdeSystem + ?Sized>(
    system: &S,
    x: &[f64],
    dt: f64,
    dw: &[f64],
) -> Result<Vec<f64>> {
    check_step_args(system, x, dt, dw)?;
    let mut ws = Workspace::new(x.len());
    let mut out = vec![0.0; x.len()];
    heun_step_into(system, x, dt, dw, &mut ws, &mut out);
    finite_or_blowup(&out, 0)?;
    Ok(out)
}

/// One Euler–Maruyama step, `x' = x + [f(x) + c(x)]dt + Σ g_c(x)dW_c` where
/// `c` is the Itô correction when requested and zero otherwise.
pub fn euler_maruyama_step<S: SdeSystem + ?Sized>(
    system: &S,
    x: &[f64],
    dt: f64,
    dw: &[f64],
    use_ito_correction: bool,
) -> Result<Vec<f64>> {
    check_step_args(system, x, dt, dw)?;
    let mut ws = Workspace::new(x.len());
    let mut out = vec![0.0; x.len()];
    em_step_into(system, x, dt, dw, use_ito_correction, &mut ws, &mut out);
    finite_or_blowup(&out, 0)?;
    Ok(out)
}

fn check_path_args<S: SdeSystem + ?Sized>(
    system: &S,
    x0: &[f64],
    horizon: f64,
    steps: usize,
    path: &WienerPath,
) -> Result<f64> {
    if !(horizon.is_finite() && horizon > 0.0) {
        return Err(Error::invalid(format!("horizon must be positive, got {horizon}")));
    }
    if steps == 0 {
        return Err(Error::invalid("at least one time step is required"));
    }
    crate::error::ensure_len("initial state", system.dim(), x0.len())?;
    crate::error::ensure_len("wiener path steps", steps, path.steps)?;
    crate::error::ensure_len("wiener path channels", system.channels(), path.channels)?;
    Ok(horizon / steps as f64)
}

/// Integrates `steps` steps of size `horizon / steps`, handing every state
/// (including the initial one) to `visit` together with its step index.
pub fn integrate_with<S, F>(
    system: &S,
    x0: &[f64],
    horizon: f64,
    steps: usize,
    path: &WienerPath,
    method: Method,
    mut visit: F,
) -> Result<Vec<f64>>
where
    S: SdeSystem + ?Sized,
    F: FnMut(usize, &[f64]),
{
    let dt = check_path_args(system, x0, horizon, steps, path)?;
    let mut ws = Workspace::new(x0.len());
    let mut x = x0.to_vec();
    let mut next = vec![0.0; x0.len()];
    visit(0, &x);
    for m in 0..steps {
        let dw = path.row(m);
        match method {
            Method::Heun => heun_step_into(system, &x, dt, dw, &mut ws, &mut next),
            Method::EulerMaruyamaIto => em_step_into(system, &x, dt, dw, true, &mut ws, &mut next),
        }
        finite_or_blowup(&next, m + 1)?;
        std::mem::swap(&mut x, &mut next);
        visit(m + 1, &x);
    }
    Ok(x)
}

/// Integrates and records every state on the uniform grid `t_m = m·T/M`.
pub fn integrate_path<S: SdeSystem + ?Sized>(
    system: &S,
    x0: &[f64],
    horizon: f64,
    steps: usize,
    path: &WienerPath,
    method: Method,
) -> Result<Trajectory> {
    let mut states = Vec::with_capacity(steps + 1);
    integrate_with(system, x0, horizon, steps, path, method, |_, x| states.push(x.to_vec()))?;
    Ok(Trajectory {
        times: time_grid(horizon, steps),
        states,
        seed: path.seed,
        method,
    })
}

pub fn time_grid(horizon: f64, steps: usize) -> Vec<f64> {
    (0..=steps).map(|m| horizon * m as f64 / steps as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceReport {
    pub method: Method,
    pub dts: Vec<f64>,
    /// Mean endpoint error `E|X_T^dt - X_T^ref|` per ladder level.
    pub errors: Vec<f64>,
    pub reference_dt: f64,
    pub slope: f64,
    pub paths: usize,
    pub excluded: usize,
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// Strong error slope over a dyadic ladder of step counts.
///
/// `step_ladder` lists coarse-to-fine step counts, each twice the previous.
/// The reference solution uses four times the finest count; every coarse
/// path is built by summing the reference increments, so all levels see the
/// same Brownian sample. Path `r` is seeded with `derive_seed(base_seed, r)`.
pub fn strong_convergence_order<S: SdeSystem + ?Sized>(
    system: &S,
    x0: &[f64],
    horizon: f64,
    step_ladder: &[usize],
    paths: usize,
    base_seed: u64,
    method: Method,
) -> Result<ConvergenceReport> {
    if step_ladder.len() < 4 {
        return Err(Error::invalid("convergence ladder needs at least 4 levels"));
    }
    if step_ladder[0] == 0 || step_ladder.windows(2).any(|w| w[1] != 2 * w[0]) {
        return Err(Error::invalid(format!(
            "convergence ladder must be dyadic, got {step_ladder:?}"
        )));
    }
    if paths == 0 {
        return Err(Error::invalid("at least one path is required"));
    }
    let finest = *step_ladder.last().unwrap();
    let ref_steps = 4 * finest;
    let ref_dt = horizon / ref_steps as f64;
    let channels = system.channels();

    let per_path: Vec<Option<Vec<f64>>> = (0..paths)
        .into_par_iter()
        .map(|r| -> Result<Option<Vec<f64>>> {
            let seed = noise::derive_seed(base_seed, r as u64);
            let fine = noise::sample_wiener_path(seed, ref_dt, ref_steps, channels)?;
            let reference = match integrate_with(system, x0, horizon, ref_steps, &fine, method, |_, _| {}) {
                Ok(x) => x,
                Err(Error::BlowUp { .. }) => return Ok(None),
                Err(e) => return Err(e),
            };
            let mut errs = Vec::with_capacity(step_ladder.len());
            for &m in step_ladder {
                let coarse = fine.coarsen(ref_steps / m)?;
                match integrate_with(system, x0, horizon, m, &coarse, method, |_, _| {}) {
                    Ok(x) => errs.push(
                        x.iter()
                            .zip(&reference)
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum::<f64>()
                            .sqrt(),
                    ),
                    Err(Error::BlowUp { .. }) => return Ok(None),
                    Err(e) => return Err(e),
                }
            }
            Ok(Some(errs))
        })
        .collect::<Result<_>>()?;

    let excluded = per_path.iter().filter(|e| e.is_none()).count();
    let limit = paths / 100;
    if excluded > limit {
        return Err(Error::TooManyFailures {
            failed: excluded,
            total: paths,
            limit,
        });
    }
    let kept = (paths - excluded) as f64;
    let mut errors = vec![0.0; step_ladder.len()];
    for errs in per_path.iter().flatten() {
        for (e, v) in errors.iter_mut().zip(errs) {
            *e += v;
        }
    }
    errors.iter_mut().for_each(|e| *e /= kept);
    let dts: Vec<f64> = step_ladder.iter().map(|&m| horizon / m as f64).collect();
    let slope = loglog_slope(&dts, &errors);
    Ok(ConvergenceReport {
        method,
        dts,
        errors,
        reference_dt: ref_dt,
        slope,
        paths,
        excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `dx = a x dt + Σ_c (b_c x + k_c) ∘ dW^c` on a scalar state.
    struct Linear {
        a: f64,
        b: Vec<f64>,
        k: Vec<f64>,
    }

    impl SdeSystem for Linear {
        fn dim(&self) -> usize {
            1
        }
        fn channels(&self) -> usize {
            self.b.len()
        }
        fn drift(&self, x: &[f64], out: &mut [f64]) {
            out[0] = self.a * x[0];
        }
        fn diffusion(&self, x: &[f64], c: usize, out: &mut [f64]) {
            out[0] = self.b[c] * x[0] + self.k[c];
        }
    }

    #[test]
    fn heun_linear_drift_one_step() {
        let sys = Linear { a: 1.0, b: vec![], k: vec![] };
        let x = euler_heun_step(&sys, &[1.0], 0.1, &[]).unwrap();
        assert!((x[0] - 1.105).abs() < 1e-14);
    }

    #[test]
    fn zero_increments_reduce_to_deterministic_heun() {
        let sys = Linear { a: -0.7, b: vec![0.3], k: vec![0.1] };
        let det = Linear { a: -0.7, b: vec![], k: vec![] };
        let a = euler_heun_step(&sys, &[2.0], 0.05, &[0.0]).unwrap();
        let b = euler_heun_step(&det, &[2.0], 0.05, &[]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn additive_noise_without_drift_is_exact() {
        let sys = Linear { a: 0.0, b: vec![0.0, 0.0], k: vec![2.0, -1.0] };
        let dw = [0.3, 0.2];
        let x = euler_heun_step(&sys, &[1.0], 0.1, &dw).unwrap();
        assert!((x[0] - (1.0 + 2.0 * 0.3 - 0.2)).abs() < 1e-15);
        let y = euler_maruyama_step(&sys, &[1.0], 0.1, &dw, true).unwrap();
        assert!((x[0] - y[0]).abs() < 1e-15);
    }

    #[test]
    fn zero_noise_euler_maruyama_is_explicit_euler() {
        let sys = Linear { a: 2.0, b: vec![0.5], k: vec![0.0] };
        let x = euler_maruyama_step(&sys, &[1.0], 0.1, &[0.0], false).unwrap();
        assert_eq!(x[0], 1.2);
    }

    #[test]
    fn ito_correction_for_geometric_noise() {
        // g(x) = b x  →  ½ g' g = ½ b² x
        let sys = Linear { a: 0.0, b: vec![0.4], k: vec![0.0] };
        let c = noise::ito_drift_correction(&sys, &[3.0]);
        assert!((c[0] - 0.5 * 0.16 * 3.0).abs() < 1e-9);
    }

    #[test]
    fn step_argument_errors() {
        let sys = Linear { a: 1.0, b: vec![0.1], k: vec![0.0] };
        assert!(euler_heun_step(&sys, &[1.0], 0.0, &[0.0]).is_err());
        assert!(euler_heun_step(&sys, &[1.0], 0.1, &[]).is_err());
        assert!(euler_heun_step(&sys, &[1.0, 2.0], 0.1, &[0.0]).is_err());
    }

    #[test]
    fn blow_up_reports_step() {
        let sys = Linear { a: 1e300, b: vec![], k: vec![] };
        let path = noise::sample_wiener_path(0, 0.5, 4, 0).unwrap();
        let err = integrate_path(&sys, &[1e10], 2.0, 4, &path, Method::Heun).unwrap_err();
        assert!(matches!(err, Error::BlowUp { step: 1 }), "{err:?}");
    }

    #[test]
    fn single_step_path_matches_step_call() {
        let sys = Linear { a: -0.5, b: vec![0.3], k: vec![0.2] };
        let path = noise::sample_wiener_path(9, 0.2, 1, 1).unwrap();
        let traj = integrate_path(&sys, &[1.5], 0.2, 1, &path, Method::Heun).unwrap();
        let x = euler_heun_step(&sys, &[1.5], 0.2, path.row(0)).unwrap();
        assert_eq!(traj.final_state(), &x[..]);
        assert_eq!(traj.times, vec![0.0, 0.2]);
        assert_eq!(traj.states[0], vec![1.5]);
    }

    #[test]
    fn path_shape_errors() {
        let sys = Linear { a: -0.5, b: vec![0.3], k: vec![0.2] };
        let path = noise::sample_wiener_path(9, 0.1, 10, 2).unwrap();
        assert!(integrate_path(&sys, &[1.0], 1.0, 10, &path, Method::Heun).is_err());
        let path = noise::sample_wiener_path(9, 0.1, 10, 1).unwrap();
        assert!(integrate_path(&sys, &[1.0], 1.0, 9, &path, Method::Heun).is_err());
        assert!(integrate_path(&sys, &[1.0], -1.0, 10, &path, Method::Heun).is_err());
    }

    #[test]
    fn integration_is_bit_deterministic() {
        let sys = Linear { a: -0.5, b: vec![0.3, -0.2], k: vec![0.2, 0.0] };
        let path = noise::sample_wiener_path(77, 0.01, 100, 2).unwrap();
        let a = integrate_path(&sys, &[1.0], 1.0, 100, &path, Method::EulerMaruyamaIto).unwrap();
        let b = integrate_path(&sys, &[1.0], 1.0, 100, &path, Method::EulerMaruyamaIto).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn geometric_brownian_motion_strong_order() {
        // Single-channel (commutative) noise: Heun is strong order 1 here.
        let sys = Linear { a: 0.1, b: vec![0.5], k: vec![0.0] };
        let rep = strong_convergence_order(&sys, &[1.0], 1.0, &[16, 32, 64, 128], 200, 3, Method::Heun)
            .unwrap();
        assert!(rep.slope > 0.9, "{rep:?}");
        assert_eq!(rep.excluded, 0);
    }

    #[test]
    fn ladder_validation() {
        let sys = Linear { a: 0.1, b: vec![0.5], k: vec![0.0] };
        assert!(strong_convergence_order(&sys, &[1.0], 1.0, &[16, 32, 64], 10, 0, Method::Heun).is_err());
        assert!(strong_convergence_order(&sys, &[1.0], 1.0, &[16, 32, 64, 100], 10, 0, Method::Heun).is_err());
    }

    #[test]
    fn loglog_slope_of_power_law() {
        let x = [1.0, 2.0, 4.0, 8.0];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powf(1.5)).collect();
        assert!((loglog_slope(&x, &y) - 1.5).abs() < 1e-12);
    }
}
