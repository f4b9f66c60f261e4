//! Monte Carlo ensembles with schedule-independent seeding.
//!
//! Realization `r` integrates the Wiener path seeded by
//! `derive_seed(base_seed, r)`. Realizations run in parallel but their
//! results are reduced serially in index order, so statistics do not depend
//! on the number of worker threads.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};
use crate::noise::{derive_seed, sample_wiener_path};
use crate::sde::{integrate_with, Method, SdeSystem, Trajectory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct EnsembleSpec {
    pub base_seed: u64,
    pub realizations: usize,
    pub horizon: f64,
    pub steps: usize,
    pub method: Method,
    /// Step indices at which statistics are taken; empty means the endpoint.
    #[serde(default)]
    pub output_steps: Vec<usize>,
    /// State coordinates entering the covariance matrices.
    #[serde(default)]
    pub covariance_coords: Vec<usize>,
    #[serde(default)]
    pub keep_trajectories: bool,
    #[serde(default = "default_failure_fraction")]
    pub max_failure_fraction: f64,
}

fn default_failure_fraction() -> f64 {
    0.01
}

impl EnsembleSpec {
    pub fn new(base_seed: u64, realizations: usize, horizon: f64, steps: usize, method: Method) -> Self {
        Self {
            base_seed,
            realizations,
            horizon,
            steps,
            method,
            output_steps: Vec::new(),
            covariance_coords: Vec::new(),
            keep_trajectories: false,
            max_failure_fraction: default_failure_fraction(),
        }
    }

    fn resolved_output_steps(&self) -> Result<Vec<usize>> {
        if self.output_steps.is_empty() {
            return Ok(vec![self.steps]);
        }
        let mut steps = self.output_steps.clone();
        steps.sort_unstable();
        steps.dedup();
        if let Some(&bad) = steps.iter().find(|&&s| s > self.steps) {
            return Err(Error::invalid(format!(
                "output step {bad} beyond the last step {}",
                self.steps
            )));
        }
        Ok(steps)
    }
}

/// Moments per output time.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnsembleStats {
    pub times: Vec<f64>,
    pub output_steps: Vec<usize>,
    pub mean: Vec<Vec<f64>>,
    /// Per-coordinate sample variance (`1/(R-1)`; zero when `R = 1`).
    pub variance: Vec<Vec<f64>>,
    pub covariance_coords: Vec<usize>,
    /// Covariance of the selected coordinates, row-major, per output time.
    pub covariance: Vec<Vec<Vec<f64>>>,
    pub realizations: usize,
    pub failures: usize,
}

#[derive(Debug, Clone)]
pub struct EnsembleOutput {
    pub stats: EnsembleStats,
    /// Per-realization trajectories when requested; `None` for failed runs.
    pub trajectories: Option<Vec<Option<Trajectory>>>,
    /// States at the output steps for every successful realization.
    pub samples: Vec<Option<Vec<Vec<f64>>>>,
}

pub fn realization_seed(base_seed: u64, r: usize) -> u64 {
    derive_seed(base_seed, r as u64)
}

type Realization = Option<(Vec<Vec<f64>>, Option<Trajectory>)>;

pub fn run_ensemble<S: SdeSystem + ?Sized>(system: &S, x0: &[f64], spec: &EnsembleSpec) -> Result<EnsembleOutput> {
    if spec.realizations == 0 {
        return Err(Error::invalid("an ensemble needs at least one realization"));
    }
    if spec.steps == 0 {
        return Err(Error::invalid("an ensemble needs at least one time step"));
    }
    if !(0.0..=1.0).contains(&spec.max_failure_fraction) {
        return Err(Error::invalid("max_failure_fraction must lie in [0, 1]"));
    }
    ensure_len("initial state", system.dim(), x0.len())?;
    if let Some(&c) = spec.covariance_coords.iter().find(|&&c| c >= x0.len()) {
        return Err(Error::invalid(format!("covariance coordinate {c} out of range")));
    }
    let out_steps = spec.resolved_output_steps()?;
    let dt = spec.horizon / spec.steps as f64;
    let channels = system.channels();

    let runs: Vec<Realization> = (0..spec.realizations)
        .into_par_iter()
        .map(|r| -> Result<Realization> {
            let seed = realization_seed(spec.base_seed, r);
            let path = sample_wiener_path(seed, dt, spec.steps, channels)?;
            let mut picked = Vec::with_capacity(out_steps.len());
            let mut all = spec.keep_trajectories.then(|| Vec::with_capacity(spec.steps + 1));
            let mut next = 0;
            let res = integrate_with(system, x0, spec.horizon, spec.steps, &path, spec.method, |m, x| {
                if next < out_steps.len() && out_steps[next] == m {
                    picked.push(x.to_vec());
                    next += 1;
                }
                if let Some(all) = all.as_mut() {
                    all.push(x.to_vec());
                }
            });
            match res {
                Ok(_) => Ok(Some((
                    picked,
                    all.map(|states| Trajectory {
                        times: crate::sde::time_grid(spec.horizon, spec.steps),
                        states,
                        seed,
                        method: spec.method,
                    }),
                ))),
                Err(Error::BlowUp { .. }) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;

    let failures = runs.iter().filter(|r| r.is_none()).count();
    let limit = (spec.max_failure_fraction * spec.realizations as f64).floor() as usize;
    if failures > limit {
        return Err(Error::TooManyFailures {
            failed: failures,
            total: spec.realizations,
            limit,
        });
    }

    let mut samples = Vec::with_capacity(runs.len());
    let mut trajectories = spec.keep_trajectories.then(|| Vec::with_capacity(runs.len()));
    for run in runs {
        match run {
            Some((picked, traj)) => {
                samples.push(Some(picked));
                if let Some(t) = trajectories.as_mut() {
                    t.push(traj);
                }
            }
            None => {
                samples.push(None);
                if let Some(t) = trajectories.as_mut() {
                    t.push(None);
                }
            }
        }
    }

    let dim = x0.len();
    let ok: Vec<&Vec<Vec<f64>>> = samples.iter().flatten().collect();
    let mut stats = EnsembleStats {
        times: out_steps.iter().map(|&m| m as f64 * dt).collect(),
        output_steps: out_steps.clone(),
        mean: Vec::new(),
        variance: Vec::new(),
        covariance_coords: spec.covariance_coords.clone(),
        covariance: Vec::new(),
        realizations: spec.realizations,
        failures,
    };
    for k in 0..out_steps.len() {
        let at: Vec<&[f64]> = ok.iter().map(|s| s[k].as_slice()).collect();
        let mean = sample_mean(&at, dim);
        let variance = if at.len() > 1 {
            (0..dim)
                .map(|c| at.iter().map(|x| (x[c] - mean[c]).powi(2)).sum::<f64>() / (at.len() - 1) as f64)
                .collect()
        } else {
            vec![0.0; dim]
        };
        let sel: Vec<Vec<f64>> = at
            .iter()
            .map(|x| spec.covariance_coords.iter().map(|&c| x[c]).collect())
            .collect();
        let cov = if sel.len() > 1 && !spec.covariance_coords.is_empty() {
            endpoint_moments(&sel)?.1
        } else {
            vec![vec![0.0; spec.covariance_coords.len()]; spec.covariance_coords.len()]
        };
        stats.mean.push(mean);
        stats.variance.push(variance);
        stats.covariance.push(cov);
    }

    Ok(EnsembleOutput {
        stats,
        trajectories,
        samples,
    })
}

fn sample_mean(xs: &[&[f64]], dim: usize) -> Vec<f64> {
    let mut mean = vec![0.0; dim];
    for x in xs {
        for (m, v) in mean.iter_mut().zip(x.iter()) {
            *m += v;
        }
    }
    let r = xs.len().max(1) as f64;
    mean.iter_mut().for_each(|m| *m /= r);
    mean
}

/// Sample mean and covariance (`1/(R-1)`, two-pass).
pub fn endpoint_moments(samples: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    if samples.len() < 2 {
        return Err(Error::invalid(format!(
            "covariance needs at least two samples, got {}",
            samples.len()
        )));
    }
    let dim = samples[0].len();
    if samples.iter().any(|s| s.len() != dim) {
        return Err(Error::invalid("samples have inconsistent dimensions"));
    }
    let refs: Vec<&[f64]> = samples.iter().map(Vec::as_slice).collect();
    let mean = sample_mean(&refs, dim);
    let denom = (samples.len() - 1) as f64;
    let mut cov = vec![vec![0.0; dim]; dim];
    for a in 0..dim {
        for b in a..dim {
            let s = samples
                .iter()
                .map(|x| (x[a] - mean[a]) * (x[b] - mean[b]))
                .sum::<f64>()
                / denom;
            cov[a][b] = s;
            cov[b][a] = s;
        }
    }
    Ok((mean, cov))
}

/// Moments of the states at output index `k` across a trajectory set.
pub fn trajectory_moments(trajectories: &[Trajectory], k: usize) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let samples = trajectories
        .iter()
        .map(|t| {
            t.states
                .get(k)
                .cloned()
                .ok_or_else(|| Error::invalid(format!("time index {k} out of range")))
        })
        .collect::<Result<Vec<_>>>()?;
    endpoint_moments(&samples)
}
