use metamorph::ensemble::{endpoint_moments, run_ensemble, EnsembleSpec};
use metamorph::sde::{Method, SdeSystem};
use metamorph::{DeformationNoiseField, KernelSpec, LandmarkState, LandmarkSystem, TemplateNoise};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn noisy_pair() -> (LandmarkSystem, Vec<f64>) {
    let sys = LandmarkSystem::new(KernelSpec::gaussian(1.0, 1.0), 0.5, 2, 2)
        .unwrap()
        .with_deformation_noise(vec![DeformationNoiseField::bump(vec![0.0, 0.0], 1.0, vec![0.3, 0.1])])
        .unwrap()
        .with_template_noise(TemplateNoise::PerLandmark(vec![vec![0.05, 0.0], vec![0.0, 0.05]]))
        .unwrap();
    let x0 = LandmarkState::new(2, 2, vec![-0.5, 0.0, 0.5, 0.0], vec![0.2, 0.0, -0.2, 0.1])
        .unwrap()
        .to_flat();
    (sys, x0)
}

#[test]
fn zero_noise_realizations_coincide() {
    let sys = LandmarkSystem::new(KernelSpec::gaussian(1.0, 1.0), 0.5, 2, 2).unwrap();
    let x0 = vec![-0.5, 0.0, 0.5, 0.0, 0.2, 0.0, -0.2, 0.1];
    let mut spec = EnsembleSpec::new(3, 16, 1.0, 100, Method::Heun);
    spec.keep_trajectories = true;
    let out = run_ensemble(&sys, &x0, &spec).unwrap();
    let trajs = out.trajectories.unwrap();
    let first = trajs[0].as_ref().unwrap();
    for t in &trajs {
        assert_eq!(t.as_ref().unwrap().states, first.states);
    }
    assert!(out.stats.variance[0].iter().all(|v| v.abs() < 1e-28));
}

#[test]
fn constant_template_noise_variance() {
    // A frozen landmark (p = 0, λ irrelevant) driven by constant ν-noise: Var q = s²T.
    let s = 0.4;
    let sys = LandmarkSystem::new(KernelSpec::gaussian(1.0, 1.0), 1.0, 1, 2)
        .unwrap()
        .with_template_noise(TemplateNoise::PerLandmark(vec![vec![s, 0.0]]))
        .unwrap();
    let spec = EnsembleSpec::new(11, 10_000, 2.0, 20, Method::Heun);
    let out = run_ensemble(&sys, &[0.0; 4], &spec).unwrap();
    let var = out.stats.variance[0][0];
    assert!((var - s * s * 2.0).abs() < 0.05 * s * s * 2.0, "{var}");
    assert!(out.stats.variance[0][1] < 1e-24);
}

#[test]
fn ensembles_are_reproducible_and_thread_independent() {
    let (sys, x0) = noisy_pair();
    let mut spec = EnsembleSpec::new(42, 64, 1.0, 200, Method::Heun);
    spec.output_steps = vec![50, 100, 200];
    spec.covariance_coords = vec![0, 1, 2, 3];
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| run_ensemble(&sys, &x0, &spec).unwrap())
    };
    let a = run(1);
    let b = run(4);
    let c = run(4);
    assert_eq!(a.stats, b.stats);
    assert_eq!(b.stats, c.stats);
    let mut other = spec.clone();
    other.base_seed = 43;
    let d = run_ensemble(&sys, &x0, &other).unwrap();
    assert_ne!(a.stats.mean, d.stats.mean);
}

#[test]
fn single_realization_has_zero_spread() {
    let (sys, x0) = noisy_pair();
    let mut spec = EnsembleSpec::new(1, 1, 1.0, 50, Method::EulerMaruyamaIto);
    spec.covariance_coords = vec![0, 1];
    let out = run_ensemble(&sys, &x0, &spec).unwrap();
    assert!(out.stats.variance[0].iter().all(|v| *v == 0.0));
    assert!(endpoint_moments(&[x0]).is_err());
}

#[test]
fn endpoint_moments_examples() {
    let samples = vec![vec![1.0, -2.0], vec![-1.0, 2.0]];
    let (mean, cov) = endpoint_moments(&samples).unwrap();
    assert_eq!(mean, vec![0.0, 0.0]);
    assert_eq!(cov, vec![vec![2.0, -4.0], vec![-4.0, 8.0]]);

    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let samples: Vec<Vec<f64>> = (0..20_000)
        .map(|_| {
            let z1: f64 = normal.sample(&mut rng);
            let z2: f64 = normal.sample(&mut rng);
            vec![1.0 + 2.0 * z1, -1.0 + 0.5 * z1 + z2]
        })
        .collect();
    let (mean, cov) = endpoint_moments(&samples).unwrap();
    let want = [[4.0, 1.0], [1.0, 1.25]];
    assert!((mean[0] - 1.0).abs() < 0.05 && (mean[1] + 1.0).abs() < 0.05);
    for i in 0..2 {
        for j in 0..2 {
            assert!((cov[i][j] - want[i][j]).abs() < 0.1 * want[i][j], "{cov:?}");
        }
    }
}

#[test]
fn invalid_specs_are_rejected() {
    let (sys, x0) = noisy_pair();
    assert!(run_ensemble(&sys, &x0, &EnsembleSpec::new(0, 0, 1.0, 10, Method::Heun)).is_err());
    let mut spec = EnsembleSpec::new(0, 2, 1.0, 10, Method::Heun);
    spec.output_steps = vec![11];
    assert!(run_ensemble(&sys, &x0, &spec).is_err());
    assert!(run_ensemble(&sys, &x0[..3], &EnsembleSpec::new(0, 2, 1.0, 10, Method::Heun)).is_err());
    assert_eq!(sys.dim(), 8);
}
