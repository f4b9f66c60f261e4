//! Scenario dispatch.

use std::path::PathBuf;
use std::time::Instant;

use metamorph::ch2::{Ch2State, Ch2System};
use metamorph::ensemble::{realization_seed, run_ensemble, EnsembleSpec};
use metamorph::fda::generate_fda_signals;
use metamorph::matching::{match_landmarks, shoot, MatchProblem};
use metamorph::noise::sample_wiener_path;
use metamorph::sde::{integrate_path, integrate_with, strong_convergence_order, SdeSystem};
use metamorph::LandmarkSystem;
use serde::Serialize;

use crate::config::{
    Ch2SdeConfig, ConvergenceStudyConfig, EnsembleConfig, ExperimentConfig, FdaGenerateConfig, Format,
    IntegratorConfig, LandmarkMatchConfig, LandmarkSdeConfig,
};
use crate::error::{failed, invalid, CliError};
use crate::output::{self, header, num, OutputDir};
use crate::setup::{ch2_system, check_integrator, landmark_system};

pub const DEFAULT_OUTPUT_DIR: &str = "metamorph_out";

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub directory: PathBuf,
    pub files: Vec<String>,
    pub warnings: Vec<String>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    scenario: &'static str,
    config: &'a ExperimentConfig,
    base_seed: Option<u64>,
    realization_seeds: Vec<u64>,
    threads: usize,
    wall_time_seconds: f64,
    warnings: &'a [String],
    outputs: &'a [String],
}

/// Applies command-line overrides to a parsed config.
pub fn apply_overrides(cfg: &mut ExperimentConfig, opts: &RunOptions) {
    if let Some(seed) = opts.seed {
        cfg.set_base_seed(seed);
    }
    if let Some(out) = &opts.out {
        cfg.output_mut().directory = Some(out.clone());
    }
}

/// Checks everything that can be checked without integrating and returns
/// the warnings a run would raise.
pub fn validate(cfg: &ExperimentConfig) -> Result<Vec<String>, CliError> {
    let mut warnings = Vec::new();
    match cfg {
        ExperimentConfig::LandmarkSde(c) => {
            landmark_system(&c.system)?;
            check_integrator(&c.integrator)?;
            check_ensemble(&c.ensemble)?;
            c.output.output_steps(c.integrator.horizon, c.integrator.steps)?;
        }
        ExperimentConfig::Ch2Sde(c) => {
            let (system, state) = ch2_system(&c.system)?;
            check_integrator(&c.integrator)?;
            check_ensemble(&c.ensemble)?;
            c.output.output_steps(c.integrator.horizon, c.integrator.steps)?;
            let dt = c.integrator.horizon / c.integrator.steps as f64;
            let bound = system.advective_dt_bound(&state);
            if dt > bound {
                warnings.push(format!(
                    "integrator: dt = {dt} exceeds the advective guideline 0.25·Δx/max(|u|, |σ_u|) = {bound}"
                ));
            }
        }
        ExperimentConfig::LandmarkMatch(c) => {
            match_problem(c)?;
        }
        ExperimentConfig::FdaGenerate(c) => c.fda.validate().map_err(invalid("fda"))?,
        ExperimentConfig::ConvergenceStudy(c) => {
            landmark_system(&c.system)?;
            let v = &c.convergence;
            if !(v.horizon.is_finite() && v.horizon > 0.0) {
                return Err(CliError::validation("convergence.horizon: must be positive"));
            }
            if v.step_ladder.len() < 4 || v.step_ladder[0] == 0 || v.step_ladder.windows(2).any(|w| w[1] != 2 * w[0]) {
                return Err(CliError::validation(
                    "convergence.step_ladder: needs at least 4 dyadic levels, each twice the previous",
                ));
            }
            if v.paths == 0 {
                return Err(CliError::validation("convergence.paths: must be at least 1"));
            }
            if v.methods.is_empty() {
                return Err(CliError::validation("convergence.methods: must not be empty"));
            }
        }
    }
    Ok(warnings)
}

fn check_ensemble(e: &EnsembleConfig) -> Result<(), CliError> {
    if e.realizations == 0 {
        return Err(CliError::validation("ensemble.realizations: must be at least 1"));
    }
    if !(0.0..=1.0).contains(&e.max_failure_fraction) {
        return Err(CliError::validation("ensemble.max_failure_fraction: must lie in [0, 1]"));
    }
    Ok(())
}

fn match_problem(c: &LandmarkMatchConfig) -> Result<MatchProblem, CliError> {
    let (system, state) = landmark_system(&c.system)?;
    if !system.is_noise_free() {
        return Err(CliError::validation("system.noise: landmark_match needs a noise-free system"));
    }
    check_integrator(&c.integrator)?;
    let d = system.spatial_dim();
    if c.matching.q_target.len() != system.landmarks() || c.matching.q_target.iter().any(|r| r.len() != d) {
        return Err(CliError::validation(format!(
            "matching.q_target: expected {} rows of length {d}",
            system.landmarks()
        )));
    }
    let mut problem = MatchProblem::new(state.q.clone(), c.matching.q_target.concat(), system);
    problem.horizon = c.integrator.horizon;
    problem.steps = c.integrator.steps;
    problem.tol = c.matching.tol;
    problem.max_iterations = c.matching.max_iterations;
    problem.penalty_scale = c.matching.penalty_scale;
    Ok(problem)
}

/// Runs a validated scenario and writes its outputs plus `manifest.json`.
pub fn run(cfg: &ExperimentConfig) -> Result<RunReport, CliError> {
    let started = Instant::now();
    let mut warnings = validate(cfg)?;
    let dir = cfg
        .output()
        .directory
        .clone()
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR));
    let mut out = OutputDir::create(&dir)?;
    let seeds = match cfg {
        ExperimentConfig::LandmarkSde(c) => run_landmark_sde(c, &mut out)?,
        ExperimentConfig::Ch2Sde(c) => run_ch2_sde(c, &mut out)?,
        ExperimentConfig::LandmarkMatch(c) => {
            run_match(c, &mut out, &mut warnings)?;
            Vec::new()
        }
        ExperimentConfig::FdaGenerate(c) => run_fda(c, &mut out)?,
        ExperimentConfig::ConvergenceStudy(c) => run_convergence(c, &mut out)?,
    };
    let files = out.files().to_vec();
    let manifest = Manifest {
        tool: "metamorph",
        version: env!("CARGO_PKG_VERSION"),
        scenario: cfg.name(),
        config: cfg,
        base_seed: cfg.base_seed(),
        realization_seeds: seeds,
        threads: rayon::current_num_threads(),
        wall_time_seconds: started.elapsed().as_secs_f64(),
        warnings: &warnings,
        outputs: &files,
    };
    out.json("manifest.json", &manifest)?;
    Ok(RunReport {
        directory: dir,
        files: out.files().to_vec(),
        warnings,
    })
}

fn seeds(e: &EnsembleConfig, count: usize) -> Vec<u64> {
    (0..count).map(|r| realization_seed(e.base_seed, r)).collect()
}

fn ensemble_spec(e: &EnsembleConfig, integ: &IntegratorConfig, output_steps: Vec<usize>) -> EnsembleSpec {
    let mut spec = EnsembleSpec::new(e.base_seed, e.realizations, integ.horizon, integ.steps, integ.method);
    spec.output_steps = output_steps;
    spec.covariance_coords = e.covariance_coords.clone();
    spec.keep_trajectories = e.keep_trajectories;
    spec.max_failure_fraction = e.max_failure_fraction;
    spec
}

fn landmark_label(n: usize, d: usize) -> impl Fn(usize) -> (String, String) {
    move |c| {
        let (kind, c) = if c < n * d { ("q", c) } else { ("p", c - n * d) };
        ((c / d).to_string(), format!("{kind}_{}", c % d + 1))
    }
}

fn run_landmark_sde(c: &LandmarkSdeConfig, out: &mut OutputDir) -> Result<Vec<u64>, CliError> {
    let (system, state) = landmark_system(&c.system)?;
    let (n, d) = (state.n, state.d);
    let x0 = state.to_flat();
    let integ = &c.integrator;
    let csv = c.output.wants(Format::Csv);
    if c.ensemble.realizations == 1 {
        let seed = realization_seed(c.ensemble.base_seed, 0);
        let traj = single_path(&system, &x0, integ, seed)?;
        if csv {
            output::landmark_trajectory(out, "trajectory.csv", &traj, n, d)?;
            output::landmark_long(out, "trajectory_long.csv", [(0, &traj)], n, d)?;
        }
        return Ok(vec![seed]);
    }
    let steps = c.output.output_steps(integ.horizon, integ.steps)?;
    let spec = ensemble_spec(&c.ensemble, integ, steps);
    let res = run_ensemble(&system, &x0, &spec).map_err(failed("landmark_sde ensemble"))?;
    output::ensemble_stats(out, &res.stats, landmark_label(n, d), csv, c.output.wants(Format::Json))?;
    if let (Some(trajs), true) = (&res.trajectories, csv) {
        let kept = trajs.iter().enumerate().filter_map(|(r, t)| t.as_ref().map(|t| (r, t)));
        output::landmark_long(out, "trajectories_long.csv", kept, n, d)?;
    }
    Ok(seeds(&c.ensemble, c.ensemble.realizations))
}

fn single_path(
    system: &LandmarkSystem,
    x0: &[f64],
    integ: &IntegratorConfig,
    seed: u64,
) -> Result<metamorph::Trajectory, CliError> {
    let dt = integ.horizon / integ.steps as f64;
    let path = sample_wiener_path(seed, dt, integ.steps, system.channels()).map_err(failed("noise"))?;
    integrate_path(system, x0, integ.horizon, integ.steps, &path, integ.method).map_err(failed("landmark_sde"))
}

fn run_ch2_sde(c: &Ch2SdeConfig, out: &mut OutputDir) -> Result<Vec<u64>, CliError> {
    let (system, state) = ch2_system(&c.system)?;
    let integ = &c.integrator;
    let steps = c.output.output_steps(integ.horizon, integ.steps)?;
    let nodes = system.grid().nodes;
    let csv = c.output.wants(Format::Csv);
    if c.ensemble.realizations > 1 {
        let spec = ensemble_spec(&c.ensemble, integ, steps);
        let res = run_ensemble(&system, &state.to_flat(), &spec).map_err(failed("ch2_sde ensemble"))?;
        let label = move |c: usize| {
            let (kind, j) = if c < nodes { ("m", c) } else { ("rho", c - nodes) };
            (j.to_string(), kind.to_string())
        };
        output::ensemble_stats(out, &res.stats, label, csv, c.output.wants(Format::Json))?;
        return Ok(seeds(&c.ensemble, c.ensemble.realizations));
    }

    let seed = realization_seed(c.ensemble.base_seed, 0);
    let dt = integ.horizon / integ.steps as f64;
    let path = sample_wiener_path(seed, dt, integ.steps, system.channels()).map_err(failed("noise"))?;
    let mut invariants = Vec::with_capacity(integ.steps + 1);
    let mut snapshots = Vec::with_capacity(steps.len());
    let mut error = None;
    let alpha = system.alpha();
    integrate_with(&system, &state.to_flat(), integ.horizon, integ.steps, &path, integ.method, |m, x| {
        if error.is_some() {
            return;
        }
        match Ch2State::from_flat(x, alpha).and_then(|s| system.invariants(&s)) {
            Ok(inv) => invariants.push((m as f64 * dt, inv)),
            Err(e) => error = Some(e),
        }
        if steps.binary_search(&m).is_ok() {
            snapshots.push((m, x.to_vec()));
        }
    })
    .map_err(failed("ch2_sde"))?;
    if let Some(e) = error {
        return Err(failed("ch2_sde invariants")(e));
    }
    if csv {
        write_ch2_outputs(out, &system, &invariants, &snapshots, dt)?;
    }
    Ok(vec![seed])
}

fn write_ch2_outputs(
    out: &mut OutputDir,
    system: &Ch2System,
    invariants: &[(f64, metamorph::ch2::Ch2Invariants)],
    snapshots: &[(usize, Vec<f64>)],
    dt: f64,
) -> Result<(), CliError> {
    out.csv("invariants.csv", &header(&["t", "int_m", "int_rho", "h"]), |w| {
        for (t, inv) in invariants {
            w.write_record([num(*t), num(inv.int_m), num(inv.int_rho), num(inv.energy)])?;
        }
        Ok(())
    })?;
    let grid = system.grid();
    let x = grid.points();
    let mut index = Vec::with_capacity(snapshots.len());
    for (m, state) in snapshots {
        let (mm, rho) = state.split_at(grid.nodes);
        let u = system.velocity(mm);
        let name = format!("snapshots/step_{m:08}.csv");
        out.csv(&name, &header(&["x", "m", "rho", "u"]), |w| {
            for j in 0..grid.nodes {
                w.write_record([num(x[j]), num(mm[j]), num(rho[j]), num(u[j])])?;
            }
            Ok(())
        })?;
        index.push((*m, name));
    }
    out.csv("snapshots/index.csv", &header(&["step", "t", "file"]), |w| {
        for (m, name) in &index {
            w.write_record([m.to_string(), num(*m as f64 * dt), name.clone()])?;
        }
        Ok(())
    })
}

fn run_match(c: &LandmarkMatchConfig, out: &mut OutputDir, warnings: &mut Vec<String>) -> Result<(), CliError> {
    let problem = match_problem(c)?;
    let result = match_landmarks(&problem).map_err(failed("landmark_match"))?;
    if !result.converged {
        warnings.push(format!(
            "matching did not converge in {} iterations (residual {})",
            result.iterations, result.residual
        ));
    }
    if c.output.wants(Format::Json) {
        out.json("match.json", &result)?;
    }
    if c.output.wants(Format::Csv) {
        let shot = shoot(&problem.q0, &result.p0_flat(), &problem.system, problem.horizon, problem.steps)
            .map_err(failed("landmark_match"))?;
        let (n, d) = (problem.system.landmarks(), problem.system.spatial_dim());
        output::landmark_trajectory(out, "trajectory.csv", &shot.trajectory, n, d)?;
    }
    Ok(())
}

fn run_fda(c: &FdaGenerateConfig, out: &mut OutputDir) -> Result<Vec<u64>, CliError> {
    let signals = generate_fda_signals(&c.fda, c.ensemble.base_seed).map_err(failed("fda_generate"))?;
    if c.output.wants(Format::Csv) {
        let cols = header(&["signal", "s", "f", "warp", "warp_inverse", "amplitude"]);
        out.csv("signals.csv", &cols, |w| {
            for (i, sig) in signals.signals.iter().enumerate() {
                for j in 0..signals.s.len() {
                    w.write_record([
                        i.to_string(),
                        num(signals.s[j]),
                        num(sig.values[j]),
                        num(sig.warp[j]),
                        num(sig.warp_inverse[j]),
                        num(sig.amplitude[j]),
                    ])?;
                }
            }
            Ok(())
        })?;
    }
    if c.output.wants(Format::Json) {
        out.json("signals.json", &signals)?;
    }
    Ok(signals.signals.iter().map(|s| s.seed).collect())
}

fn run_convergence(c: &ConvergenceStudyConfig, out: &mut OutputDir) -> Result<Vec<u64>, CliError> {
    let (system, state) = landmark_system(&c.system)?;
    let v = &c.convergence;
    let reports = v
        .methods
        .iter()
        .map(|&m| {
            strong_convergence_order(&system, &state.to_flat(), v.horizon, &v.step_ladder, v.paths, c.ensemble.base_seed, m)
                .map_err(failed("convergence_study"))
        })
        .collect::<Result<Vec<_>, _>>()?;
    if c.output.wants(Format::Json) {
        out.json("convergence.json", &reports)?;
    }
    if c.output.wants(Format::Csv) {
        out.csv("convergence.csv", &header(&["method", "dt", "error", "slope"]), |w| {
            for r in &reports {
                for (dt, e) in r.dts.iter().zip(&r.errors) {
                    w.write_record([r.method.name().to_string(), num(*dt), num(*e), num(r.slope)])?;
                }
            }
            Ok(())
        })?;
    }
    Ok(seeds(&c.ensemble, v.paths))
}
