//! Stochastic metamorphosis dynamics of `n` landmarks in `d` dimensions.
//!
//! The Hamiltonian is `h = ½ Σ_ij p_i·p_j K(q_i - q_j) + (λ²/2) Σ_i |p_i|²`.
//! Deformation noise enters through the potentials `Φ_l^u = Σ_i p_i·σ_l^u(q_i)`
//! and template noise through `Φ_i^ν = p_i·σ_i^ν`, one channel per landmark.
//! Each channel's tangent is the canonical vector field of its potential,
//! `(∂Φ/∂p, -∂Φ/∂q)`.
//!
//! Flat state layout used by [`SdeSystem`]: all positions row-major, then all
//! momenta row-major.

use crate::error::{ensure_finite, ensure_len, Error, Result};
use crate::kernels::{dist_sq, KernelSpec};
use crate::noise::{DeformationNoiseField, TemplateNoise, WienerPath};
use crate::sde::{Method, SdeSystem, Trajectory};

/// Positions and momenta, both `n×d` row-major.
///
/// Tangent vectors share this layout (see [`LandmarkTangent`]).
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkState {
    pub n: usize,
    pub d: usize,
    pub q: Vec<f64>,
    pub p: Vec<f64>,
}

pub type LandmarkTangent = LandmarkState;

impl LandmarkState {
    pub fn new(n: usize, d: usize, q: Vec<f64>, p: Vec<f64>) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(Error::invalid("landmark state needs n ≥ 1 and d ≥ 1"));
        }
        ensure_len("landmark positions", n * d, q.len())?;
        ensure_len("landmark momenta", n * d, p.len())?;
        ensure_finite("landmark positions", &q)?;
        ensure_finite("landmark momenta", &p)?;
        Ok(Self { n, d, q, p })
    }

    /// From per-landmark rows.
    pub fn from_rows(q: &[Vec<f64>], p: &[Vec<f64>]) -> Result<Self> {
        let n = q.len();
        if p.len() != n {
            return Err(Error::invalid(format!(
                "{} position rows but {} momentum rows",
                n,
                p.len()
            )));
        }
        let d = q.first().map_or(0, Vec::len);
        if q.iter().chain(p).any(|r| r.len() != d) {
            return Err(Error::invalid("landmark rows have inconsistent dimensions"));
        }
        Self::new(n, d, q.concat(), p.concat())
    }

    pub fn zeros(n: usize, d: usize) -> Self {
        Self {
            n,
            d,
            q: vec![0.0; n * d],
            p: vec![0.0; n * d],
        }
    }

    pub fn from_flat(n: usize, d: usize, x: &[f64]) -> Result<Self> {
        ensure_len("flat landmark state", 2 * n * d, x.len())?;
        let (q, p) = x.split_at(n * d);
        Self::new(n, d, q.to_vec(), p.to_vec())
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut x = Vec::with_capacity(2 * self.q.len());
        x.extend_from_slice(&self.q);
        x.extend_from_slice(&self.p);
        x
    }

    pub fn qi(&self, i: usize) -> &[f64] {
        &self.q[i * self.d..(i + 1) * self.d]
    }

    pub fn pi(&self, i: usize) -> &[f64] {
        &self.p[i * self.d..(i + 1) * self.d]
    }
}

/// Landmark metamorphosis system: kernel, template weight `λ`, and noise.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSystem {
    kernel: KernelSpec,
    lambda: f64,
    n: usize,
    d: usize,
    sigma_u: Vec<DeformationNoiseField>,
    /// Per-landmark template amplitudes; empty when template noise is off.
    sigma_nu: Vec<Vec<f64>>,
}

impl LandmarkSystem {
    /// Noise-free system for `n` landmarks in `d` dimensions.
    pub fn new(kernel: KernelSpec, lambda: f64, n: usize, d: usize) -> Result<Self> {
        kernel.validate()?;
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(Error::invalid(format!("lambda must be ≥ 0, got {lambda}")));
        }
        if n == 0 || d == 0 {
            return Err(Error::invalid("landmark system needs n ≥ 1 and d ≥ 1"));
        }
        Ok(Self {
            kernel,
            lambda,
            n,
            d,
            sigma_u: Vec::new(),
            sigma_nu: Vec::new(),
        })
    }

    pub fn with_deformation_noise(mut self, fields: Vec<DeformationNoiseField>) -> Result<Self> {
        for (l, f) in fields.iter().enumerate() {
            f.validate()?;
            if f.dim() != self.d {
                return Err(Error::invalid(format!(
                    "deformation field {l} has dimension {}, expected {}",
                    f.dim(),
                    self.d
                )));
            }
        }
        self.sigma_u = fields;
        Ok(self)
    }

    pub fn with_template_noise(mut self, noise: TemplateNoise) -> Result<Self> {
        noise.validate_landmarks(self.n, self.d)?;
        let TemplateNoise::PerLandmark(v) = noise else {
            unreachable!("validated as per-landmark");
        };
        self.sigma_nu = v;
        Ok(self)
    }

    /// Same kernel and `λ`, no noise.
    pub fn deterministic(&self) -> Self {
        Self {
            sigma_u: Vec::new(),
            sigma_nu: Vec::new(),
            ..self.clone()
        }
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn landmarks(&self) -> usize {
        self.n
    }

    pub fn spatial_dim(&self) -> usize {
        self.d
    }

    pub fn deformation_fields(&self) -> &[DeformationNoiseField] {
        &self.sigma_u
    }

    pub fn template_amplitudes(&self) -> &[Vec<f64>] {
        &self.sigma_nu
    }

    /// Number of deformation channels `K^u`; template channels follow them.
    pub fn deformation_channels(&self) -> usize {
        self.sigma_u.len()
    }

    pub fn template_channels(&self) -> usize {
        self.sigma_nu.len()
    }

    pub fn is_noise_free(&self) -> bool {
        self.sigma_u.is_empty() && self.sigma_nu.is_empty()
    }

    fn check_state(&self, state: &LandmarkState) -> Result<()> {
        ensure_len("landmark count", self.n, state.n)?;
        ensure_len("landmark dimension", self.d, state.d)
    }

    fn drift_flat(&self, q: &[f64], p: &[f64], dq: &mut [f64], dp: &mut [f64]) {
        let d = self.d;
        let lam2 = self.lambda * self.lambda;
        dq.iter_mut().zip(p).for_each(|(o, pi)| *o = lam2 * pi);
        dp.iter_mut().for_each(|o| *o = 0.0);
        for i in 0..self.n {
            let qi = &q[i * d..(i + 1) * d];
            let pi = &p[i * d..(i + 1) * d];
            for j in 0..self.n {
                let qj = &q[j * d..(j + 1) * d];
                let pj = &p[j * d..(j + 1) * d];
                let r2 = dist_sq(qi, qj);
                let k = self.kernel.value_sq(r2);
                for a in 0..d {
                    dq[i * d + a] += k * pj[a];
                }
                if i != j {
                    let pp: f64 = pi.iter().zip(pj).map(|(x, y)| x * y).sum();
                    let s = -pp * self.kernel.grad_factor_sq(r2);
                    for a in 0..d {
                        dp[i * d + a] += s * (qi[a] - qj[a]);
                    }
                }
            }
        }
    }

    fn diffusion_u_flat(&self, l: usize, q: &[f64], p: &[f64], dq: &mut [f64], dp: &mut [f64]) {
        let d = self.d;
        let field = &self.sigma_u[l];
        dp.iter_mut().for_each(|o| *o = 0.0);
        for i in 0..self.n {
            let qi = &q[i * d..(i + 1) * d];
            field.eval_into(qi, &mut dq[i * d..(i + 1) * d]);
            field.sub_jacobian_transpose_times(qi, &p[i * d..(i + 1) * d], &mut dp[i * d..(i + 1) * d]);
        }
    }

    fn diffusion_nu_flat(&self, i: usize, dq: &mut [f64], dp: &mut [f64]) {
        let d = self.d;
        dq.iter_mut().for_each(|o| *o = 0.0);
        dp.iter_mut().for_each(|o| *o = 0.0);
        dq[i * d..(i + 1) * d].copy_from_slice(&self.sigma_nu[i]);
    }

    /// Interpolating velocity `u(x) = Σ_j K(x - q_j) p_j` generated by a state.
    pub fn velocity_at(&self, state: &LandmarkState, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for j in 0..state.n {
            let k = self.kernel.value_sq(dist_sq(x, state.qi(j)));
            for (o, pj) in out.iter_mut().zip(state.pi(j)) {
                *o += k * pj;
            }
        }
    }
}

impl SdeSystem for LandmarkSystem {
    fn dim(&self) -> usize {
        2 * self.n * self.d
    }

    fn channels(&self) -> usize {
        self.sigma_u.len() + self.sigma_nu.len()
    }

    fn drift(&self, x: &[f64], out: &mut [f64]) {
        let (q, p) = x.split_at(self.n * self.d);
        let (dq, dp) = out.split_at_mut(self.n * self.d);
        self.drift_flat(q, p, dq, dp);
    }

    fn diffusion(&self, x: &[f64], channel: usize, out: &mut [f64]) {
        let (q, p) = x.split_at(self.n * self.d);
        let (dq, dp) = out.split_at_mut(self.n * self.d);
        let ku = self.sigma_u.len();
        if channel < ku {
            self.diffusion_u_flat(channel, q, p, dq, dp);
        } else {
            self.diffusion_nu_flat(channel - ku, dq, dp);
        }
    }

    fn diffusion_derivative(&self, x: &[f64], channel: usize, v: &[f64], out: &mut [f64]) {
        let ku = self.sigma_u.len();
        if channel >= ku || self.sigma_u[channel].is_constant {
            // state-independent tangent
            out.iter_mut().for_each(|o| *o = 0.0);
        } else {
            crate::noise::fd_directional_derivative(self, x, channel, v, out);
        }
    }
}

/// `h_K = ½ Σ_ij p_i·p_j K(q_i - q_j)`.
pub fn h_kernel(state: &LandmarkState, kernel: &KernelSpec) -> Result<f64> {
    ensure_len("landmark momenta", state.n * state.d, state.p.len())?;
    ensure_len("landmark positions", state.n * state.d, state.q.len())?;
    let mut h = 0.0;
    for i in 0..state.n {
        for j in 0..state.n {
            let pp: f64 = state.pi(i).iter().zip(state.pi(j)).map(|(a, b)| a * b).sum();
            h += pp * kernel.value_sq(dist_sq(state.qi(i), state.qi(j)));
        }
    }
    Ok(0.5 * h)
}

fn template_energy(state: &LandmarkState, lambda: f64) -> f64 {
    0.5 * lambda * lambda * state.p.iter().map(|v| v * v).sum::<f64>()
}

/// `h = h_K + (λ²/2) Σ_i |p_i|²`.
pub fn h_metamorphosis(state: &LandmarkState, system: &LandmarkSystem) -> Result<f64> {
    system.check_state(state)?;
    Ok(h_kernel(state, &system.kernel)? + template_energy(state, system.lambda))
}

/// The two parts of the metamorphosis Hamiltonian: `(h_K, (λ²/2) Σ|p_i|²)`.
pub fn energy_split(state: &LandmarkState, system: &LandmarkSystem) -> Result<(f64, f64)> {
    system.check_state(state)?;
    Ok((h_kernel(state, &system.kernel)?, template_energy(state, system.lambda)))
}

/// `Φ^u = Σ_i p_i·σ^u(q_i)`.
pub fn stochastic_potential_u(state: &LandmarkState, field: &DeformationNoiseField) -> Result<f64> {
    ensure_len("noise field dimension", state.d, field.dim())?;
    let mut s = vec![0.0; state.d];
    let mut phi = 0.0;
    for i in 0..state.n {
        field.eval_into(state.qi(i), &mut s);
        phi += state.pi(i).iter().zip(&s).map(|(a, b)| a * b).sum::<f64>();
    }
    Ok(phi)
}

/// `Φ_i^ν = p_i·σ_i^ν`.
pub fn stochastic_potential_nu(state: &LandmarkState, system: &LandmarkSystem, i: usize) -> Result<f64> {
    system.check_state(state)?;
    let s = system
        .sigma_nu
        .get(i)
        .ok_or_else(|| Error::invalid(format!("template channel {i} out of range")))?;
    Ok(state.pi(i).iter().zip(s).map(|(a, b)| a * b).sum())
}

/// Deterministic Hamiltonian vector field: `dq_i = Σ_j K(q_i - q_j) p_j + λ² p_i`,
/// `dp_i = -Σ_j (p_i·p_j) ∇K(q_i - q_j)`.
pub fn drift(state: &LandmarkState, system: &LandmarkSystem) -> Result<LandmarkTangent> {
    system.check_state(state)?;
    let mut t = LandmarkState::zeros(state.n, state.d);
    system.drift_flat(&state.q, &state.p, &mut t.q, &mut t.p);
    Ok(t)
}

/// Tangent of deformation channel `l`: `(σ_l(q_i), -Dσ_l(q_i)ᵀ p_i)`.
pub fn diffusion_u(state: &LandmarkState, system: &LandmarkSystem, l: usize) -> Result<LandmarkTangent> {
    system.check_state(state)?;
    if l >= system.sigma_u.len() {
        return Err(Error::invalid(format!(
            "deformation channel {l} out of range ({} channels)",
            system.sigma_u.len()
        )));
    }
    let mut t = LandmarkState::zeros(state.n, state.d);
    system.diffusion_u_flat(l, &state.q, &state.p, &mut t.q, &mut t.p);
    Ok(t)
}

/// Tangent of the template channel of landmark `i`: `σ_i^ν` in row `i` of the
/// position part, zero elsewhere.
pub fn diffusion_nu(state: &LandmarkState, system: &LandmarkSystem, i: usize) -> Result<LandmarkTangent> {
    system.check_state(state)?;
    if i >= system.sigma_nu.len() {
        return Err(Error::invalid(format!(
            "template channel {i} out of range ({} channels)",
            system.sigma_nu.len()
        )));
    }
    let mut t = LandmarkState::zeros(state.n, state.d);
    system.diffusion_nu_flat(i, &mut t.q, &mut t.p);
    Ok(t)
}

pub fn total_linear_momentum(state: &LandmarkState) -> Vec<f64> {
    let mut total = vec![0.0; state.d];
    for i in 0..state.n {
        for (t, v) in total.iter_mut().zip(state.pi(i)) {
            *t += v;
        }
    }
    total
}

/// Passive points, `m×d` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TracerCloud {
    pub m: usize,
    pub d: usize,
    pub x: Vec<f64>,
}

impl TracerCloud {
    pub fn new(m: usize, d: usize, x: Vec<f64>) -> Result<Self> {
        ensure_len("tracer coordinates", m * d, x.len())?;
        ensure_finite("tracer coordinates", &x)?;
        Ok(Self { m, d, x })
    }

    pub fn point(&self, k: usize) -> &[f64] {
        &self.x[k * self.d..(k + 1) * self.d]
    }
}

/// Advects tracers along a landmark run: `dx = u_t(x) dt + Σ_l σ_l^u(x) ∘ dW^l`,
/// with `u_t` generated by the recorded landmark states and the same
/// increments and scheme as the run. For Heun, the corrector evaluates the
/// velocity of the next recorded state.
pub fn flow_tracers(
    cloud: &TracerCloud,
    system: &LandmarkSystem,
    trajectory: &Trajectory,
    path: &WienerPath,
) -> Result<Vec<TracerCloud>> {
    ensure_len("tracer dimension", system.d, cloud.d)?;
    let steps = trajectory.steps();
    ensure_len("wiener path steps", steps, path.steps)?;
    ensure_len("wiener path channels", system.channels(), path.channels)?;
    if steps > 0 {
        let dt_traj = trajectory.times[1] - trajectory.times[0];
        if (dt_traj - path.dt).abs() > 1e-12 * path.dt.max(1.0) {
            return Err(Error::invalid(format!(
                "trajectory step {dt_traj} does not match wiener path step {}",
                path.dt
            )));
        }
    }
    let states = trajectory
        .states
        .iter()
        .map(|x| LandmarkState::from_flat(system.n, system.d, x))
        .collect::<Result<Vec<_>>>()?;

    let d = cloud.d;
    let ku = system.sigma_u.len();
    let mut out = Vec::with_capacity(steps + 1);
    let mut cur = cloud.x.clone();
    out.push(cloud.clone());
    let mut u0 = vec![0.0; d];
    let mut u1 = vec![0.0; d];
    let mut s0 = vec![0.0; d];
    let mut s1 = vec![0.0; d];
    let mut pred = vec![0.0; d];
    for m in 0..steps {
        let dt = trajectory.times[m + 1] - trajectory.times[m];
        let dw = &path.row(m)[..ku];
        let mut next = vec![0.0; cur.len()];
        for k in 0..cloud.m {
            let x = &cur[k * d..(k + 1) * d];
            let y = &mut next[k * d..(k + 1) * d];
            system.velocity_at(&states[m], x, &mut u0);
            match trajectory.method {
                Method::Heun => {
                    for a in 0..d {
                        pred[a] = x[a] + u0[a] * dt;
                        y[a] = x[a] + 0.5 * u0[a] * dt;
                    }
                    for (field, &w) in system.sigma_u.iter().zip(dw) {
                        field.eval_into(x, &mut s0);
                        for a in 0..d {
                            pred[a] += s0[a] * w;
                            y[a] += 0.5 * s0[a] * w;
                        }
                    }
                    system.velocity_at(&states[m + 1], &pred, &mut u1);
                    for a in 0..d {
                        y[a] += 0.5 * u1[a] * dt;
                    }
                    for (field, &w) in system.sigma_u.iter().zip(dw) {
                        field.eval_into(&pred, &mut s1);
                        for a in 0..d {
                            y[a] += 0.5 * s1[a] * w;
                        }
                    }
                }
                Method::EulerMaruyamaIto => {
                    for a in 0..d {
                        y[a] = x[a] + u0[a] * dt;
                    }
                    for (field, &w) in system.sigma_u.iter().zip(dw) {
                        field.eval_into(x, &mut s0);
                        let jac = field.jacobian(x)?;
                        for a in 0..d {
                            let corr: f64 = (0..d).map(|b| jac[a * d + b] * s0[b]).sum();
                            y[a] += s0[a] * w + 0.5 * corr * dt;
                        }
                    }
                }
            }
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::BlowUp { step: m + 1 });
        }
        out.push(TracerCloud {
            m: cloud.m,
            d,
            x: next.clone(),
        });
        cur = next;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::sample_wiener_path;
    use crate::sde::integrate_path;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_kernel() -> KernelSpec {
        KernelSpec::gaussian(1.0, 1.0)
    }

    fn single(p: [f64; 2]) -> LandmarkState {
        LandmarkState::new(1, 2, vec![0.0, 0.0], p.to_vec()).unwrap()
    }

    fn random_state(rng: &mut ChaCha8Rng, n: usize, d: usize) -> LandmarkState {
        let q = (0..n * d).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let p = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        LandmarkState::new(n, d, q, p).unwrap()
    }

    fn bump_system(n: usize) -> LandmarkSystem {
        LandmarkSystem::new(KernelSpec::gaussian(0.8, 1.0), 0.5, n, 2)
            .unwrap()
            .with_deformation_noise(vec![
                DeformationNoiseField::bump(vec![0.2, -0.1], 0.7, vec![0.6, -0.3]),
                DeformationNoiseField::bump(vec![-0.5, 0.4], 1.1, vec![0.1, 0.5]),
                DeformationNoiseField::constant(vec![0.2, 0.1]),
            ])
            .unwrap()
    }

    #[test]
    fn kernel_hamiltonian_examples() {
        let k = unit_kernel();
        assert_eq!(h_kernel(&single([1.0, 0.0]), &k).unwrap(), 0.5);
        assert_eq!(h_kernel(&single([0.0, 0.0]), &k).unwrap(), 0.0);
        let s = LandmarkState::new(2, 2, vec![0.0, 0.0, 1.0, 0.0], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let h = h_kernel(&s, &k).unwrap();
        assert!((h - (1.0 + (-0.5f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn metamorphosis_hamiltonian_examples() {
        let sys0 = LandmarkSystem::new(unit_kernel(), 0.0, 1, 2).unwrap();
        let s = single([1.0, 0.0]);
        assert_eq!(h_metamorphosis(&s, &sys0).unwrap(), h_kernel(&s, &unit_kernel()).unwrap());
        let sys1 = LandmarkSystem::new(unit_kernel(), 1.0, 1, 2).unwrap();
        assert_eq!(h_metamorphosis(&s, &sys1).unwrap(), 1.0);
        assert_eq!(h_metamorphosis(&single([0.0, 0.0]), &sys1).unwrap(), 0.0);
        let bad = LandmarkState::zeros(2, 2);
        assert!(h_metamorphosis(&bad, &sys1).is_err());
    }

    #[test]
    fn potential_examples() {
        let c = DeformationNoiseField::constant(vec![1.0, 0.0]);
        assert_eq!(stochastic_potential_u(&single([0.0, 0.0]), &c).unwrap(), 0.0);
        assert_eq!(stochastic_potential_u(&single([2.0, 0.0]), &c).unwrap(), 2.0);
        let bump = DeformationNoiseField::bump(vec![0.0, 0.0], 0.5, vec![0.7, 0.2]);
        let s = LandmarkState::new(2, 2, vec![0.0, 0.0, 50.0, 0.0], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(stochastic_potential_u(&s, &bump).unwrap(), 0.7);
    }

    #[test]
    fn drift_examples() {
        let sys = LandmarkSystem::new(unit_kernel(), 0.0, 1, 2).unwrap();
        let t = drift(&single([1.0, 0.0]), &sys).unwrap();
        assert_eq!(t.q, vec![1.0, 0.0]);
        assert_eq!(t.p, vec![0.0, 0.0]);
        let sys = LandmarkSystem::new(unit_kernel(), 0.5, 1, 2).unwrap();
        let t = drift(&single([1.0, 0.0]), &sys).unwrap();
        assert_eq!(t.q, vec![1.25, 0.0]);
    }

    #[test]
    fn drift_preserves_mirror_symmetry() {
        let sys = LandmarkSystem::new(KernelSpec::gaussian(0.7, 1.0), 0.3, 2, 2).unwrap();
        let s = LandmarkState::new(2, 2, vec![0.4, -0.2, -0.4, 0.2], vec![0.3, 0.5, -0.3, -0.5]).unwrap();
        let t = drift(&s, &sys).unwrap();
        for a in 0..2 {
            assert!((t.q[a] + t.q[2 + a]).abs() < 1e-15);
            assert!((t.p[a] + t.p[2 + a]).abs() < 1e-15);
        }
    }

    #[test]
    fn diffusion_examples() {
        let sys = LandmarkSystem::new(unit_kernel(), 0.0, 2, 2)
            .unwrap()
            .with_deformation_noise(vec![
                DeformationNoiseField::constant(vec![0.3, -0.1]),
                DeformationNoiseField::bump(vec![1.0, 1.0], 0.5, vec![1.0, 2.0]),
            ])
            .unwrap()
            .with_template_noise(TemplateNoise::PerLandmark(vec![vec![0.0, 1.0], vec![0.0, 0.0]]))
            .unwrap();
        let s = LandmarkState::new(2, 2, vec![1.0, 1.0, 0.0, 0.5], vec![0.4, 0.3, -0.2, 0.9]).unwrap();

        let t = diffusion_u(&s, &sys, 0).unwrap();
        assert_eq!(t.q, vec![0.3, -0.1, 0.3, -0.1]);
        assert_eq!(t.p, vec![0.0; 4]);

        // landmark 0 sits at the bump center
        let t = diffusion_u(&s, &sys, 1).unwrap();
        assert_eq!(&t.p[..2], &[0.0, 0.0]);
        assert_eq!(&t.q[..2], &[1.0, 2.0]);

        let t = diffusion_nu(&s, &sys, 0).unwrap();
        assert_eq!(t.q, vec![0.0, 1.0, 0.0, 0.0]);
        assert_eq!(t.p, vec![0.0; 4]);
        let t = diffusion_nu(&s, &sys, 1).unwrap();
        assert_eq!(t.q, vec![0.0; 4]);
        let other = LandmarkState::new(2, 2, vec![5.0, -3.0, 2.0, 2.0], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(diffusion_nu(&other, &sys, 0).unwrap().q, vec![0.0, 1.0, 0.0, 0.0]);

        assert!(diffusion_u(&s, &sys, 2).is_err());
        assert!(diffusion_nu(&s, &sys, 2).is_err());
        assert_eq!(sys.channels(), 4);
    }

    #[test]
    fn deformation_tangent_is_canonical_vector_field_of_potential() {
        let sys = bump_system(3);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-5;
        for _ in 0..20 {
            let s = random_state(&mut rng, 3, 2);
            for (l, field) in sys.deformation_fields().iter().enumerate() {
                let t = diffusion_u(&s, &sys, l).unwrap();
                for k in 0..s.q.len() {
                    let mut sp = s.clone();
                    let mut sm = s.clone();
                    sp.p[k] += h;
                    sm.p[k] -= h;
                    let dphi_dp = (stochastic_potential_u(&sp, field).unwrap()
                        - stochastic_potential_u(&sm, field).unwrap())
                        / (2.0 * h);
                    assert!((t.q[k] - dphi_dp).abs() < 1e-6);
                    let mut sp = s.clone();
                    let mut sm = s.clone();
                    sp.q[k] += h;
                    sm.q[k] -= h;
                    let dphi_dq = (stochastic_potential_u(&sp, field).unwrap()
                        - stochastic_potential_u(&sm, field).unwrap())
                        / (2.0 * h);
                    assert!((t.p[k] + dphi_dq).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn drift_is_canonical_vector_field_of_hamiltonian() {
        let sys = bump_system(3);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let h = 1e-5;
        for _ in 0..10 {
            let s = random_state(&mut rng, 3, 2);
            let t = drift(&s, &sys).unwrap();
            for k in 0..s.q.len() {
                let mut sp = s.clone();
                let mut sm = s.clone();
                sp.p[k] += h;
                sm.p[k] -= h;
                let dh = (h_metamorphosis(&sp, &sys).unwrap() - h_metamorphosis(&sm, &sys).unwrap()) / (2.0 * h);
                assert!((t.q[k] - dh).abs() < 1e-8);
                let mut sp = s.clone();
                let mut sm = s.clone();
                sp.q[k] += h;
                sm.q[k] -= h;
                let dh = (h_metamorphosis(&sp, &sys).unwrap() - h_metamorphosis(&sm, &sys).unwrap()) / (2.0 * h);
                assert!((t.p[k] + dh).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn linear_momentum_examples() {
        assert_eq!(total_linear_momentum(&LandmarkState::zeros(3, 2)), vec![0.0, 0.0]);
        let s = LandmarkState::new(2, 2, vec![0.0; 4], vec![1.0, 0.0, -1.0, 0.0]).unwrap();
        assert_eq!(total_linear_momentum(&s), vec![0.0, 0.0]);
    }

    #[test]
    fn deterministic_flow_conserves_energy_and_momentum() {
        let sys = LandmarkSystem::new(KernelSpec::gaussian(0.8, 1.0), 0.7, 3, 2).unwrap();
        let s0 = LandmarkState::new(3, 2, vec![0.0, 0.0, 1.0, 0.2, -0.3, 0.9], vec![0.5, 0.1, -0.2, 0.4, 0.3, -0.6]).unwrap();
        let steps = 1000;
        let path = sample_wiener_path(0, 1e-3, steps, 0).unwrap();
        let traj = integrate_path(&sys, &s0.to_flat(), 1.0, steps, &path, Method::Heun).unwrap();
        let h0 = h_metamorphosis(&s0, &sys).unwrap();
        let m0 = total_linear_momentum(&s0);
        for x in &traj.states {
            let s = LandmarkState::from_flat(3, 2, x).unwrap();
            let h = h_metamorphosis(&s, &sys).unwrap();
            assert!(((h - h0) / h0).abs() < 1e-6);
            let m = total_linear_momentum(&s);
            for a in 0..2 {
                assert!((m[a] - m0[a]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn lambda_zero_template_noise_is_brownian_shift() {
        // One landmark: p stays constant and q = q0 + K(0) p t + σ W_t.
        let sys = LandmarkSystem::new(unit_kernel(), 0.0, 1, 2)
            .unwrap()
            .with_template_noise(TemplateNoise::PerLandmark(vec![vec![0.3, -0.2]]))
            .unwrap();
        let s0 = LandmarkState::new(1, 2, vec![0.1, 0.2], vec![0.5, 0.25]).unwrap();
        let path = sample_wiener_path(5, 0.01, 100, 1).unwrap();
        let traj = integrate_path(&sys, &s0.to_flat(), 1.0, 100, &path, Method::Heun).unwrap();
        let w = path.terminal_values()[0];
        let end = traj.final_state();
        assert!((end[0] - (0.1 + 0.5 + 0.3 * w)).abs() < 1e-12);
        assert!((end[1] - (0.2 + 0.25 - 0.2 * w)).abs() < 1e-12);
        assert_eq!(&end[2..], &[0.5, 0.25]);
    }

    #[test]
    fn mirror_symmetric_noise_keeps_mirror_symmetry() {
        // Fields σ(x) = a b(|x - c|) paired with σ'(x) = -a b(|x + c|) and equal
        // increments map a mirror-symmetric state to a mirror-symmetric state.
        let sys = LandmarkSystem::new(KernelSpec::gaussian(0.9, 1.0), 0.4, 2, 2)
            .unwrap()
            .with_deformation_noise(vec![
                DeformationNoiseField::bump(vec![0.5, 0.2], 0.8, vec![0.4, 0.3]),
                DeformationNoiseField::bump(vec![-0.5, -0.2], 0.8, vec![-0.4, -0.3]),
            ])
            .unwrap();
        let s0 = LandmarkState::new(2, 2, vec![0.6, 0.1, -0.6, -0.1], vec![0.2, -0.4, -0.2, 0.4]).unwrap();
        let single = sample_wiener_path(8, 0.01, 200, 1).unwrap();
        let mut inc = Vec::new();
        for m in 0..200 {
            let w = single.row(m)[0];
            inc.extend([w, w]);
        }
        let path = WienerPath::from_increments(0.01, 200, 2, inc).unwrap();
        let traj = integrate_path(&sys, &s0.to_flat(), 2.0, 200, &path, Method::Heun).unwrap();
        for x in &traj.states {
            for a in 0..2 {
                assert!((x[a] + x[2 + a]).abs() < 1e-12);
                assert!((x[4 + a] + x[6 + a]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tracers_stay_put_without_motion() {
        let sys = LandmarkSystem::new(unit_kernel(), 0.0, 2, 2).unwrap();
        let s0 = LandmarkState::new(2, 2, vec![0.0, 0.0, 1.0, 0.0], vec![0.0; 4]).unwrap();
        let path = sample_wiener_path(1, 0.1, 10, 0).unwrap();
        let traj = integrate_path(&sys, &s0.to_flat(), 1.0, 10, &path, Method::Heun).unwrap();
        let cloud = TracerCloud::new(2, 2, vec![0.3, 0.3, -1.0, 2.0]).unwrap();
        let flow = flow_tracers(&cloud, &sys, &traj, &path).unwrap();
        assert_eq!(flow.len(), 11);
        assert_eq!(flow.last().unwrap(), &cloud);
    }

    #[test]
    fn tracer_on_landmark_follows_it() {
        let sys = LandmarkSystem::new(KernelSpec::gaussian(0.8, 1.0), 0.0, 2, 2)
            .unwrap()
            .with_deformation_noise(vec![DeformationNoiseField::bump(vec![0.0, 0.5], 1.0, vec![0.5, 0.2])])
            .unwrap();
        let s0 = LandmarkState::new(2, 2, vec![0.0, 0.0, 1.0, 0.3], vec![0.6, 0.2, -0.1, 0.5]).unwrap();
        let steps = 1000;
        let path = sample_wiener_path(21, 1e-3, steps, 1).unwrap();
        let traj = integrate_path(&sys, &s0.to_flat(), 1.0, steps, &path, Method::Heun).unwrap();
        let cloud = TracerCloud::new(1, 2, vec![1.0, 0.3]).unwrap();
        let flow = flow_tracers(&cloud, &sys, &traj, &path).unwrap();
        for (x, tr) in traj.states.iter().zip(&flow) {
            assert!((tr.x[0] - x[2]).abs() < 1e-4 && (tr.x[1] - x[3]).abs() < 1e-4);
        }
    }

    #[test]
    fn distant_tracer_barely_moves() {
        let sys = LandmarkSystem::new(KernelSpec::gaussian(0.5, 1.0), 0.0, 1, 2)
            .unwrap()
            .with_deformation_noise(vec![DeformationNoiseField::bump(vec![0.0, 0.0], 0.5, vec![1.0, 1.0])])
            .unwrap();
        let s0 = LandmarkState::new(1, 2, vec![0.0, 0.0], vec![1.0, 0.0]).unwrap();
        let path = sample_wiener_path(2, 0.01, 100, 1).unwrap();
        let traj = integrate_path(&sys, &s0.to_flat(), 1.0, 100, &path, Method::Heun).unwrap();
        let cloud = TracerCloud::new(1, 2, vec![-20.0, 15.0]).unwrap();
        let flow = flow_tracers(&cloud, &sys, &traj, &path).unwrap();
        let end = flow.last().unwrap();
        assert!((end.x[0] + 20.0).abs() < 1e-8 && (end.x[1] - 15.0).abs() < 1e-8);
    }

    #[test]
    fn tracer_grid_mismatch_is_rejected() {
        let sys = LandmarkSystem::new(unit_kernel(), 0.0, 1, 2).unwrap();
        let s0 = single([1.0, 0.0]);
        let path = sample_wiener_path(1, 0.1, 10, 0).unwrap();
        let traj = integrate_path(&sys, &s0.to_flat(), 1.0, 10, &path, Method::Heun).unwrap();
        let other = sample_wiener_path(1, 0.05, 20, 0).unwrap();
        let cloud = TracerCloud::new(1, 2, vec![0.0, 0.0]).unwrap();
        assert!(flow_tracers(&cloud, &sys, &traj, &other).is_err());
    }

    #[test]
    fn system_validation() {
        assert!(LandmarkSystem::new(unit_kernel(), -1.0, 1, 2).is_err());
        assert!(LandmarkSystem::new(KernelSpec::gaussian(-1.0, 1.0), 0.0, 1, 2).is_err());
        let sys = LandmarkSystem::new(unit_kernel(), 0.0, 2, 2).unwrap();
        assert!(sys
            .clone()
            .with_template_noise(TemplateNoise::PerLandmark(vec![vec![1.0, 0.0]]))
            .is_err());
        assert!(sys
            .with_deformation_noise(vec![DeformationNoiseField::constant(vec![1.0])])
            .is_err());
        assert!(LandmarkState::new(1, 2, vec![0.0], vec![0.0, 0.0]).is_err());
        assert!(LandmarkState::new(1, 2, vec![f64::NAN, 0.0], vec![0.0, 0.0]).is_err());
    }
}
