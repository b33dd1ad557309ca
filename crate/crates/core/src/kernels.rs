//! Heat kernels, normalized Hermite polynomials and the mollified absolute value.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::GaussianRule;

/// Largest order accepted by [`hermite_orthogonality`].
pub const MAX_ORTHOGONALITY_ORDER: usize = 60;

/// `(2 pi var)^{-1/2} exp(-y^2 / (2 var))`.
pub fn gauss_kernel(var: f64, y: f64) -> Result<f64> {
    if !(var > 0.0) || !var.is_finite() {
        return Err(Error::domain(format!("variance {var} must be positive")));
    }
    Ok(gauss_kernel_unchecked(var, y))
}

#[inline]
pub(crate) fn gauss_kernel_unchecked(var: f64, y: f64) -> f64 {
    (-0.5 * y * y / var).exp() / (2.0 * PI * var).sqrt()
}

/// `H_n(x) = He_n(x) / n!` by the three-term recurrence.
pub fn hermite(n: usize, x: f64) -> f64 {
    let mut prev = 1.0;
    if n == 0 {
        return prev;
    }
    let mut cur = x;
    for m in 1..n {
        let next = (x * cur - prev) / (m as f64 + 1.0);
        prev = cur;
        cur = next;
    }
    cur
}

/// `H_0(x), ..., H_n(x)` in one pass.
pub fn hermite_all(n: usize, x: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n + 1);
    out.push(1.0);
    if n >= 1 {
        out.push(x);
    }
    for m in 1..n {
        let next = (x * out[m] - out[m - 1]) / (m as f64 + 1.0);
        out.push(next);
    }
    out
}

/// `sqrt(k!) H_k(x)` for `k = 0..=n`, orthonormal under the standard Gaussian and free of
/// factorial overflow.
pub fn hermite_normalized_all(n: usize, x: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n + 1);
    out.push(1.0);
    if n >= 1 {
        out.push(x);
    }
    for m in 1..n {
        let next = (x * out[m] - (m as f64).sqrt() * out[m - 1]) / (m as f64 + 1.0).sqrt();
        out.push(next);
    }
    out
}

/// `H_n(0) = (-1)^{n/2} / (2^{n/2} (n/2)!)` for even `n`, zero otherwise.
pub fn hermite_at_zero(n: usize) -> f64 {
    if n % 2 == 1 {
        return 0.0;
    }
    let m = n / 2;
    let mut v = 1.0;
    for j in 1..=m {
        v *= -0.5 / j as f64;
    }
    v
}

/// `E[H_n(N) H_m(N)]` for standard normal `N` by Gauss–Hermite quadrature.
pub fn hermite_orthogonality(n: usize, m: usize) -> Result<f64> {
    if n.max(m) > MAX_ORTHOGONALITY_ORDER {
        return Err(Error::domain(format!(
            "orders ({n}, {m}) exceed the supported maximum {MAX_ORTHOGONALITY_ORDER}"
        )));
    }
    let rule = GaussianRule::new((n + m) / 2 + 1);
    Ok(rule.expect(1.0, |x| hermite(n, x) * hermite(m, x)))
}

/// Variance `epsilon` of the mollifying Gaussian.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct MollifierParam {
    epsilon: f64,
}

impl TryFrom<f64> for MollifierParam {
    type Error = Error;

    fn try_from(eps: f64) -> Result<Self> {
        MollifierParam::new(eps)
    }
}

impl From<MollifierParam> for f64 {
    fn from(m: MollifierParam) -> f64 {
        m.epsilon
    }
}

impl MollifierParam {
    pub fn new(epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(Error::InvalidParams(format!("epsilon = {epsilon} must be positive")));
        }
        Ok(Self { epsilon })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// `p_eps(z)`; equals half of `F''_eps(z)`.
    pub fn density(&self, z: f64) -> f64 {
        gauss_kernel_unchecked(self.epsilon, z)
    }

    fn scale(&self) -> f64 {
        (2.0 * self.epsilon).sqrt()
    }
}

/// `F'_eps(z) = 2 P(N(0, eps) <= z) - 1 = erf(z / sqrt(2 eps))`.
pub fn mollifier_prime(eps: MollifierParam, z: f64) -> f64 {
    libm::erf(z / eps.scale())
}

/// `F_eps(z) = int_0^z F'_eps`, a smooth convex approximation of `|z|`.
pub fn mollifier(eps: MollifierParam, z: f64) -> f64 {
    let a = eps.scale();
    let u = z / a;
    let v = z * libm::erf(u) + a / PI.sqrt() * (-u * u).exp_m1();
    v.max(0.0)
}

/// `F''_eps(z) = 2 p_eps(z)`.
pub fn mollifier_second(eps: MollifierParam, z: f64) -> f64 {
    2.0 * eps.density(z)
}

/// `sign(z)` with `sign(0) = 0`.
pub fn sign(z: f64) -> f64 {
    if z > 0.0 {
        1.0
    } else if z < 0.0 {
        -1.0
    } else {
        0.0
    }
}
