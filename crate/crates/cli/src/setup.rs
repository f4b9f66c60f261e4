//! Builds library systems from configuration blocks.

use std::path::Path;

use metamorph::ch2::{peakon_init, Ch2NoiseSpec, Ch2State, Ch2System, Grid1D};
use metamorph::{DeformationNoiseField, LandmarkState, LandmarkSystem, TemplateNoise};

use crate::config::{Ch2Initial, Ch2SystemConfig, IntegratorConfig, LandmarkSystemConfig, SigmaNuConfig};
use crate::error::{invalid, CliError};

pub fn check_integrator(cfg: &IntegratorConfig) -> Result<(), CliError> {
    if !(cfg.horizon.is_finite() && cfg.horizon > 0.0) {
        return Err(CliError::validation(format!(
            "integrator.horizon: must be positive, got {}",
            cfg.horizon
        )));
    }
    if cfg.steps == 0 {
        return Err(CliError::validation("integrator.steps: must be at least 1"));
    }
    Ok(())
}

/// Landmark system and initial state.
pub fn landmark_system(cfg: &LandmarkSystemConfig) -> Result<(LandmarkSystem, LandmarkState), CliError> {
    let n = cfg.q0.len();
    if n == 0 {
        return Err(CliError::validation("system.q0: at least one landmark is required"));
    }
    let d = cfg.q0[0].len();
    let p0 = cfg.p0.clone().unwrap_or_else(|| vec![vec![0.0; d]; n]);
    let state = LandmarkState::from_rows(&cfg.q0, &p0).map_err(invalid("system.q0/p0"))?;
    let mut system = LandmarkSystem::new(cfg.kernel, cfg.lambda, n, d).map_err(invalid("system"))?;
    if !cfg.noise.sigma_u.is_empty() {
        system = system
            .with_deformation_noise(cfg.noise.sigma_u.clone())
            .map_err(invalid("system.noise.sigma_u"))?;
    }
    match &cfg.noise.sigma_nu {
        None => {}
        Some(SigmaNuConfig::PerLandmark(rows)) => {
            system = system
                .with_template_noise(TemplateNoise::PerLandmark(rows.clone()))
                .map_err(invalid("system.noise.sigma_nu.per_landmark"))?;
        }
        Some(SigmaNuConfig::GridValuesFile(_)) => {
            return Err(CliError::validation(
                "system.noise.sigma_nu: grid_values_file applies to ch2_sde; use per_landmark",
            ))
        }
    }
    Ok((system, state))
}

/// Reads a grid-valued noise table: one row per node, one column per channel.
/// A non-numeric first row is taken as a header.
pub fn read_grid_values(path: &Path, nodes: usize) -> Result<Vec<Vec<f64>>, CliError> {
    let ctx = format!("system.noise.sigma_nu.grid_values_file: {}", path.display());
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::validation(format!("{ctx}: {e}")))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| CliError::validation(format!("{ctx}: {e}")))?;
        let parsed: Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
        match parsed {
            Ok(row) => rows.push(row),
            Err(_) if i == 0 => continue,
            Err(e) => return Err(CliError::validation(format!("{ctx}: row {}: {e}", i + 1))),
        }
    }
    if rows.len() != nodes {
        return Err(CliError::validation(format!(
            "{ctx}: expected {nodes} rows (one per grid node), found {}",
            rows.len()
        )));
    }
    let channels = rows[0].len();
    if channels == 0 || rows.iter().any(|r| r.len() != channels) {
        return Err(CliError::validation(format!("{ctx}: rows must have the same non-zero number of columns")));
    }
    Ok((0..channels).map(|c| rows.iter().map(|r| r[c]).collect()).collect())
}

/// One-dimensional bump sampled on the periodic grid.
fn periodic_field(field: &DeformationNoiseField, grid: &Grid1D, i: usize) -> Result<Vec<f64>, CliError> {
    let ctx = format!("system.noise.sigma_u[{i}]");
    field.validate().map_err(invalid(&ctx))?;
    if field.dim() != 1 {
        return Err(CliError::validation(format!("{ctx}: ch2 noise fields are one-dimensional")));
    }
    let c = if field.is_constant { 0.0 } else { field.center[0] };
    grid.points()
        .into_iter()
        .map(|x| {
            let at = c + grid.periodic_distance(x, c);
            field.eval(&[at]).map(|v| v[0]).map_err(invalid(&ctx))
        })
        .collect()
}

/// CH2 system and (band-projected) initial state.
pub fn ch2_system(cfg: &Ch2SystemConfig) -> Result<(Ch2System, Ch2State), CliError> {
    let grid = Grid1D::new(cfg.grid.length, cfg.grid.nodes).map_err(invalid("system.grid"))?;
    let mut noise = Ch2NoiseSpec::default();
    for (i, f) in cfg.noise.sigma_u.iter().enumerate() {
        noise.sigma_u_fields.push(periodic_field(f, &grid, i)?);
    }
    match &cfg.noise.sigma_nu {
        None => {}
        Some(SigmaNuConfig::GridValuesFile(p)) => noise.sigma_nu_fields = read_grid_values(p, grid.nodes)?,
        Some(SigmaNuConfig::PerLandmark(_)) => {
            return Err(CliError::validation(
                "system.noise.sigma_nu: per_landmark applies to landmark scenarios; use grid_values_file",
            ))
        }
    }
    let system = Ch2System::new(grid, cfg.alpha)
        .map_err(invalid("system.alpha"))?
        .with_dealiasing(cfg.dealias)
        .with_noise(noise)
        .map_err(invalid("system.noise"))?;
    let state = match cfg.initial {
        Ch2Initial::Peakon { c, center } => peakon_init(c, center, cfg.alpha, &grid).map_err(invalid("system.initial"))?,
        Ch2Initial::Gaussian {
            center,
            width,
            u_amplitude,
            rho_amplitude,
        } => {
            if !(width.is_finite() && width > 0.0) {
                return Err(CliError::validation("system.initial.gaussian.width: must be positive"));
            }
            let profile = |a: f64| {
                grid.sample(|x| {
                    let d = grid.periodic_distance(x, center);
                    a * (-0.5 * d * d / (width * width)).exp()
                })
            };
            let m = system.spectral().helmholtz_apply(&profile(u_amplitude), cfg.alpha);
            Ch2State::new(m, profile(rho_amplitude), cfg.alpha).map_err(invalid("system.initial"))?
        }
    };
    let state = system.project_state(&state).map_err(invalid("system.initial"))?;
    Ok((system, state))
}
