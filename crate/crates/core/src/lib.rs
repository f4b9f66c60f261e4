//! Simulation of stochastic metamorphosis dynamics for shape analysis.
//!
//! | Module        | Contents                                                         |
//! |---------------|------------------------------------------------------------------|
//! | [`kernels`]   | Gaussian reproducing kernel and its gradient                     |
//! | [`noise`]     | Deformation/template noise fields, Wiener paths, Itô correction  |
//! | [`landmarks`] | Landmark Hamiltonians, stochastic potentials, drift/diffusion    |
//! | [`sde`]       | Euler–Heun and Euler–Maruyama steppers, strong-order estimation  |
//! | [`ch2`]       | Pseudospectral stochastic two-component Camassa–Holm system      |
//! | [`matching`]  | Exact landmark matching by shooting and Gauss–Newton             |
//! | [`ensemble`]  | Reproducible Monte Carlo ensembles and sample moments            |
//! | [`fda`]       | Phase–amplitude functional data generator                        |

pub mod ch2;
pub mod ensemble;
pub mod error;
pub mod fda;
pub mod kernels;
pub mod landmarks;
pub mod matching;
pub mod noise;
pub mod sde;

pub use error::{Error, Result};
pub use kernels::KernelSpec;
pub use landmarks::{LandmarkState, LandmarkSystem};
pub use noise::{DeformationNoiseField, TemplateNoise, WienerPath};
pub use sde::{Method, SdeSystem, Trajectory};
