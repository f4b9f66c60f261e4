//! Reproducing kernels for the landmark velocity field.
//!
//! Only the scalar Gaussian family is provided. A kernel acts diagonally on
//! vector components, so the velocity generated by momenta `p_j` at points
//! `q_j` is `u(x) = Σ_j K(x - q_j) p_j`.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    Gaussian,
}

/// `K(x) = g exp(-|x|^2 / (2 r^2))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub r: f64,
    #[serde(default = "default_amplitude")]
    pub g: f64,
}

fn default_amplitude() -> f64 {
    1.0
}

impl Default for KernelSpec {
    fn default() -> Self {
        Self::gaussian(1.0, 1.0)
    }
}

impl KernelSpec {
    pub fn gaussian(r: f64, g: f64) -> Self {
        Self {
            family: KernelFamily::Gaussian,
            r,
            g,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.r.is_finite() && self.r > 0.0) {
            return Err(Error::invalid(format!(
                "kernel length scale r must be positive, got {}",
                self.r
            )));
        }
        if !(self.g.is_finite() && self.g > 0.0) {
            return Err(Error::invalid(format!(
                "kernel amplitude g must be positive, got {}",
                self.g
            )));
        }
        Ok(())
    }

    /// Value at the origin, the kernel's maximum.
    pub fn peak(&self) -> f64 {
        self.g
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        ensure_finite("kernel argument", x)?;
        Ok(self.value_sq(norm_sq(x)))
    }

    pub fn grad(&self, x: &[f64]) -> Result<Vec<f64>> {
        ensure_finite("kernel argument", x)?;
        let mut out = vec![0.0; x.len()];
        self.grad_into(x, &mut out);
        Ok(out)
    }

    /// Kernel value as a function of the squared distance.
    #[inline]
    pub(crate) fn value_sq(&self, dist_sq: f64) -> f64 {
        match self.family {
            KernelFamily::Gaussian => self.g * (-0.5 * dist_sq / (self.r * self.r)).exp(),
        }
    }

    /// `∇K(x) = -(x / r^2) K(x)`, written into `out`.
    #[inline]
    pub(crate) fn grad_into(&self, x: &[f64], out: &mut [f64]) {
        let k = self.value_sq(norm_sq(x));
        let scale = -k / (self.r * self.r);
        for (o, xi) in out.iter_mut().zip(x) {
            *o = scale * xi;
        }
    }

    /// Scalar factor `s` such that `∇K(x) = s x`.
    #[inline]
    pub(crate) fn grad_factor_sq(&self, dist_sq: f64) -> f64 {
        -self.value_sq(dist_sq) / (self.r * self.r)
    }
}

#[inline]
pub(crate) fn norm_sq(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

#[inline]
pub(crate) fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
