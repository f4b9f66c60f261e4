//! Exact landmark matching for the deterministic metamorphosis flow.
//!
//! The endpoint map `p0 ↦ q(T; p0)` is inverted by Gauss–Newton with a
//! forward-difference Jacobian and a halving line search. `λ = 0` gives plain
//! LDDMM landmark shooting; large `λ` lets landmarks move by template motion.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{ensure_len, Error, Result};
use crate::landmarks::{energy_split, LandmarkState, LandmarkSystem};
use crate::noise::WienerPath;
use crate::sde::{integrate_path, Method, Trajectory};

#[derive(Debug, Clone, PartialEq)]
pub struct ShootResult {
    /// `q(T)`, `n×d` row-major.
    pub q_final: Vec<f64>,
    pub trajectory: Trajectory,
}

/// Integrates the noise-free Hamiltonian flow from `(q0, p0)` with Heun.
pub fn shoot(q0: &[f64], p0: &[f64], system: &LandmarkSystem, horizon: f64, steps: usize) -> Result<ShootResult> {
    if !system.is_noise_free() {
        return Err(Error::invalid("shooting requires a system without noise channels"));
    }
    let n = system.landmarks();
    let d = system.spatial_dim();
    let state = LandmarkState::new(n, d, q0.to_vec(), p0.to_vec())?;
    if steps == 0 {
        return Err(Error::invalid("shooting needs at least one step"));
    }
    let dt = horizon / steps as f64;
    let path = WienerPath::from_increments(dt, steps, 0, Vec::new())?;
    let trajectory = integrate_path(system, &state.to_flat(), horizon, steps, &path, Method::Heun)
        .map_err(|e| match e {
            Error::BlowUp { step } => Error::ShootingBlowUp {
                step,
                p0: p0.to_vec(),
            },
            other => other,
        })?;
    let q_final = trajectory.final_state()[..n * d].to_vec();
    Ok(ShootResult { q_final, trajectory })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PathEnergy {
    pub total: f64,
    /// `∫ ½‖u‖_K² dt`.
    pub deformation: f64,
    /// `∫ (λ²/2) Σ|p_i|² dt`.
    pub template: f64,
}

/// Trapezoid-in-time quadrature of the two Lagrangian terms along a
/// deterministic trajectory.
pub fn path_energy(trajectory: &Trajectory, system: &LandmarkSystem) -> Result<PathEnergy> {
    let n = system.landmarks();
    let d = system.spatial_dim();
    let parts = trajectory
        .states
        .iter()
        .map(|x| energy_split(&LandmarkState::from_flat(n, d, x)?, system))
        .collect::<Result<Vec<_>>>()?;
    let mut deformation = 0.0;
    let mut template = 0.0;
    for (w, t) in parts.windows(2).zip(trajectory.times.windows(2)) {
        let dt = t[1] - t[0];
        deformation += 0.5 * dt * (w[0].0 + w[1].0);
        template += 0.5 * dt * (w[0].1 + w[1].1);
    }
    Ok(PathEnergy {
        total: deformation + template,
        deformation,
        template,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchProblem {
    pub q0: Vec<f64>,
    pub q_target: Vec<f64>,
    pub system: LandmarkSystem,
    pub horizon: f64,
    pub steps: usize,
    pub tol: f64,
    pub max_iterations: usize,
    /// Inexact matching: minimize `T h(q0, p0) + |q(T) - q_target|² / (2 s²)`
    /// instead of solving `q(T) = q_target`.
    pub penalty_scale: Option<f64>,
}

impl MatchProblem {
    pub fn new(q0: Vec<f64>, q_target: Vec<f64>, system: LandmarkSystem) -> Self {
        Self {
            q0,
            q_target,
            system,
            horizon: 1.0,
            steps: 1000,
            tol: 1e-8,
            max_iterations: 50,
            penalty_scale: None,
        }
    }

    fn validate(&self) -> Result<()> {
        let nd = self.system.landmarks() * self.system.spatial_dim();
        ensure_len("source landmarks", nd, self.q0.len())?;
        ensure_len("target landmarks", nd, self.q_target.len())?;
        if !self.system.is_noise_free() {
            return Err(Error::invalid("matching requires a system without noise channels"));
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(Error::invalid("matching horizon must be positive"));
        }
        if !(self.tol.is_finite() && self.tol > 0.0) {
            return Err(Error::invalid("matching tolerance must be positive"));
        }
        if let Some(s) = self.penalty_scale {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::invalid("penalty scale must be positive"));
            }
        }
        Ok(())
    }

    /// Warm start `(q_target - q0) / ((K(0) + λ²) T)`, exact for one landmark.
    pub fn initial_momenta(&self) -> Vec<f64> {
        let lam = self.system.lambda();
        let speed = (self.system.kernel().peak() + lam * lam) * self.horizon;
        self.q_target.iter().zip(&self.q0).map(|(t, s)| (t - s) / speed).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchResult {
    /// Initial momenta, one row per landmark.
    pub p0: Vec<Vec<f64>>,
    /// Frobenius norm `|q(T; p0) - q_target|`.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    pub energy: PathEnergy,
}

impl MatchResult {
    pub fn p0_flat(&self) -> Vec<f64> {
        self.p0.concat()
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

struct Objective<'a> {
    problem: &'a MatchProblem,
    /// `sqrt(T) Lᵀ` with `L Lᵀ` the Hessian of `h` in `p` at `q0`; penalty mode only.
    energy_factor: Option<DMatrix<f64>>,
}

impl<'a> Objective<'a> {
    fn new(problem: &'a MatchProblem) -> Result<Self> {
        let energy_factor = match problem.penalty_scale {
            None => None,
            Some(_) => {
                let sys = &problem.system;
                let (n, d) = (sys.landmarks(), sys.spatial_dim());
                let lam2 = sys.lambda() * sys.lambda();
                let mut a = DMatrix::<f64>::zeros(n * d, n * d);
                for i in 0..n {
                    for j in 0..n {
                        let diff: Vec<f64> = (0..d)
                            .map(|k| problem.q0[i * d + k] - problem.q0[j * d + k])
                            .collect();
                        let kij = sys.kernel().eval(&diff)?;
                        for k in 0..d {
                            a[(i * d + k, j * d + k)] = kij + if i == j { lam2 } else { 0.0 };
                        }
                    }
                }
                let chol = a
                    .cholesky()
                    .ok_or_else(|| Error::invalid("kernel matrix at q0 is not positive definite"))?;
                Some(chol.l().transpose() * problem.horizon.sqrt())
            }
        };
        Ok(Self {
            problem,
            energy_factor,
        })
    }

    fn endpoint_misfit(&self, p0: &[f64]) -> Result<Vec<f64>> {
        let pr = self.problem;
        let shot = shoot(&pr.q0, p0, &pr.system, pr.horizon, pr.steps)?;
        Ok(shot.q_final.iter().zip(&pr.q_target).map(|(a, b)| a - b).collect())
    }

    /// Residual vector whose squared norm is minimized.
    fn residual(&self, p0: &[f64], misfit: &[f64]) -> Vec<f64> {
        match (&self.energy_factor, self.problem.penalty_scale) {
            (Some(c), Some(s)) => {
                let mut r: Vec<f64> = misfit.iter().map(|v| v / s).collect();
                r.extend((c * DVector::from_column_slice(p0)).iter());
                r
            }
            _ => misfit.to_vec(),
        }
    }
}

/// Solves for the initial momenta carrying `q0` to `q_target` at time `T`.
///
/// Non-convergence within `max_iterations` is not an error: the result
/// carries the best iterate with `converged = false`.
pub fn match_landmarks(problem: &MatchProblem) -> Result<MatchResult> {
    problem.validate()?;
    let obj = Objective::new(problem)?;
    let dim = problem.q0.len();

    let mut p = problem.initial_momenta();
    let mut misfit = obj.endpoint_misfit(&p)?;
    let mut r = obj.residual(&p, &misfit);
    let mut cost = norm(&r);
    let mut iterations = 0;
    let mut converged = problem.penalty_scale.is_none() && norm(&misfit) < problem.tol;

    while !converged && iterations < problem.max_iterations {
        iterations += 1;
        let h = 1e-6 * (1.0 + norm(&p));
        let columns = (0..dim)
            .into_par_iter()
            .map(|j| {
                let mut pj = p.clone();
                pj[j] += h;
                let mj = obj.endpoint_misfit(&pj)?;
                let rj = obj.residual(&pj, &mj);
                Ok(rj.iter().zip(&r).map(|(a, b)| (a - b) / h).collect::<Vec<f64>>())
            })
            .collect::<Result<Vec<_>>>()?;
        let jac = DMatrix::from_fn(r.len(), dim, |i, j| columns[j][i]);
        let rhs = -DVector::from_column_slice(&r);
        let step = jac
            .svd(true, true)
            .solve(&rhs, 1e-14)
            .map_err(|e| Error::Invariant(format!("Gauss–Newton solve failed: {e}")))?;

        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=30 {
            let trial: Vec<f64> = p.iter().zip(step.iter()).map(|(a, b)| a + t * b).collect();
            match obj.endpoint_misfit(&trial) {
                Ok(m) => {
                    let rt = obj.residual(&trial, &m);
                    let ct = norm(&rt);
                    if ct < cost {
                        accepted = Some((trial, m, rt, ct));
                        break;
                    }
                }
                Err(Error::ShootingBlowUp { .. }) => {}
                Err(e) => return Err(e),
            }
            t *= 0.5;
        }
        let Some((trial, m, rt, ct)) = accepted else {
            // No decrease along the Gauss–Newton direction: at a stationary point of the penalty cost.
            converged = problem.penalty_scale.is_some() && step.norm() < problem.tol.sqrt() * (1.0 + norm(&p));
            break;
        };
        let step_norm = t * step.norm();
        p = trial;
        misfit = m;
        r = rt;
        cost = ct;
        converged = match problem.penalty_scale {
            None => norm(&misfit) < problem.tol,
            Some(_) => step_norm < problem.tol * (1.0 + norm(&p)),
        };
    }

    let shot = shoot(&problem.q0, &p, &problem.system, problem.horizon, problem.steps)?;
    let energy = path_energy(&shot.trajectory, &problem.system)?;
    let d = problem.system.spatial_dim();
    Ok(MatchResult {
        p0: p.chunks(d).map(<[f64]>::to_vec).collect(),
        residual: norm(&misfit),
        iterations,
        converged,
        energy,
    })
}

