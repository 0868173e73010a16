//! Smoothing kernels.
//!
//! A [`KernelSpec`] is an immutable value carrying its family, the half-width
//! of its support and the two moments every planner needs: the second moment
//! `μ₂ = ∫ v² K(v) dv` and the roughness `∫ K(v)² dv`. Moments are computed
//! once at construction.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::integrate;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelFamily {
    Epanechnikov,
    GaussianTruncated,
    Uniform,
}

impl KernelFamily {
    pub fn name(self) -> &'static str {
        match self {
            KernelFamily::Epanechnikov => "epanechnikov",
            KernelFamily::GaussianTruncated => "gaussian-truncated",
            KernelFamily::Uniform => "uniform",
        }
    }
}

impl fmt::Display for KernelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for KernelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "epanechnikov" => Ok(KernelFamily::Epanechnikov),
            "gaussian-truncated" => Ok(KernelFamily::GaussianTruncated),
            "uniform" => Ok(KernelFamily::Uniform),
            other => Err(Error::InvalidInput(format!("unknown kernel '{other}'"))),
        }
    }
}

/// A compactly supported, symmetric, nonnegative kernel integrating to one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSpec {
    family: KernelFamily,
    support_radius: f64,
    /// Normalizing constant; only the truncated Gaussian needs one.
    norm: f64,
    mu2: f64,
    roughness: f64,
}

const QUAD_TOL: f64 = 1e-14;

impl KernelSpec {
    /// The default kernel, `K(z) = ¾(1 − z²)₊`.
    pub fn epanechnikov() -> Self {
        Self::new(KernelFamily::Epanechnikov, 1.0).expect("unit radius is valid")
    }

    pub fn uniform() -> Self {
        Self::new(KernelFamily::Uniform, 1.0).expect("unit radius is valid")
    }

    /// Standard normal density truncated to `[-3, 3]` and renormalized.
    pub fn gaussian_truncated() -> Self {
        Self::new(KernelFamily::GaussianTruncated, 3.0).expect("radius 3 is valid")
    }

    pub fn new(family: KernelFamily, support_radius: f64) -> Result<Self> {
        if !(support_radius.is_finite() && support_radius > 0.0) {
            return Err(Error::InvalidInput(format!(
                "kernel support radius must be positive, got {support_radius}"
            )));
        }
        let r = support_radius;
        let mut k = KernelSpec {
            family,
            support_radius: r,
            norm: 1.0,
            mu2: 0.0,
            roughness: 0.0,
        };
        match family {
            KernelFamily::Epanechnikov => {
                k.mu2 = r * r / 5.0;
                k.roughness = 3.0 / (5.0 * r);
            }
            KernelFamily::Uniform => {
                k.mu2 = r * r / 3.0;
                k.roughness = 1.0 / (2.0 * r);
            }
            KernelFamily::GaussianTruncated => {
                let phi = |u: f64| (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt();
                k.norm = integrate(phi, -r, r, QUAD_TOL);
                k.mu2 = integrate(|u| u * u * k.eval(u), -r, r, QUAD_TOL);
                k.roughness = integrate(|u| k.eval(u).powi(2), -r, r, QUAD_TOL);
            }
        }
        Ok(k)
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Ok(match name.parse::<KernelFamily>()? {
            KernelFamily::Epanechnikov => Self::epanechnikov(),
            KernelFamily::Uniform => Self::uniform(),
            KernelFamily::GaussianTruncated => Self::gaussian_truncated(),
        })
    }

    pub fn family(&self) -> KernelFamily {
        self.family
    }

    pub fn support_radius(&self) -> f64 {
        self.support_radius
    }

    /// `K(u)`; zero outside the support.
    #[inline]
    pub fn eval(&self, u: f64) -> f64 {
        let r = self.support_radius;
        if !(u.abs() < r) {
            return 0.0;
        }
        match self.family {
            KernelFamily::Epanechnikov => {
                let z = u / r;
                0.75 * (1.0 - z * z) / r
            }
            KernelFamily::Uniform => 0.5 / r,
            KernelFamily::GaussianTruncated => (-0.5 * u * u).exp() / ((2.0 * std::f64::consts::PI).sqrt() * self.norm),
        }
    }

    /// `K_h(d) = K(d / h) / h`.
    #[inline]
    pub fn eval_scaled(&self, d: f64, h: f64) -> f64 {
        self.eval(d / h) / h
    }

    /// `(μ₂, ∫K²)`.
    pub fn moments(&self) -> (f64, f64) {
        (self.mu2, self.roughness)
    }

    pub fn mu2(&self) -> f64 {
        self.mu2
    }

    pub fn roughness(&self) -> f64 {
        self.roughness
    }
}

impl Default for KernelSpec {
    fn default() -> Self {
        Self::epanechnikov()
    }
}

pub fn eval_kernel(k: &KernelSpec, u: f64) -> f64 {
    k.eval(u)
}

pub fn kernel_moments(k: &KernelSpec) -> (f64, f64) {
    k.moments()
}
