//! Newtonian and logarithmic potentials composed with the scaling of a multidimensional bifBm.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calculus::{ito_time_dependent_residual, weighted_trapezoid_weights, TimeTestFunction};
use crate::chaos::beta_order_zero_mean;
use crate::covariance::covariance_unchecked;
use crate::error::{Error, Result};
use crate::params::MultiParams;
use crate::quadrature::{integrate_value, QuadSpec};
use crate::simulator::PathSource;
use crate::stats::{compensated_sum, MeanEstimate};

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// Surface area of the unit sphere `S^k` in `R^{k+1}`.
fn sphere_area(k: usize) -> f64 {
    let h = 0.5 * (k as f64 + 1.0);
    2.0 * PI.powf(h) / libm::tgamma(h)
}

fn norm(z: &[f64]) -> f64 {
    z.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn check_dim(d: usize) -> Result<()> {
    if d < 2 {
        return Err(Error::InvalidParams(format!("potential kernels need d >= 2, got {d}")));
    }
    Ok(())
}

/// Radial part of `U`: `-Gamma(d/2 - 1) / (2 pi^{d/2}) r^{2-d}`, or `log(r)/pi` when `d = 2`.
fn radial_u(d: usize, r: f64) -> f64 {
    if d == 2 {
        r.ln() / PI
    } else {
        let df = d as f64;
        -libm::tgamma(0.5 * df - 1.0) / (2.0 * PI.powf(0.5 * df)) * r.powf(2.0 - df)
    }
}

/// `U'(r) / r = 2 / (|S^{d-1}| r^d)`.
fn radial_u_slope_ratio(d: usize, r: f64) -> f64 {
    2.0 / (sphere_area(d - 1) * r.powi(d as i32))
}

/// `U(z)`, twice the fundamental solution of the Laplacian on `R^d`.
pub fn newtonian_u(d: usize, z: &[f64]) -> Result<f64> {
    check_dim(d)?;
    if z.len() != d {
        return Err(Error::InvalidParams(format!("point has {} coordinates, expected {d}", z.len())));
    }
    let r = norm(z);
    if r == 0.0 {
        return Err(Error::Singular("the origin".into()));
    }
    Ok(radial_u(d, r))
}

/// `grad U(z) = 2 z / (|S^{d-1}| |z|^d)`.
pub fn newtonian_gradient(d: usize, z: &[f64]) -> Result<Vec<f64>> {
    newtonian_u(d, z)?;
    let g = radial_u_slope_ratio(d, norm(z));
    Ok(z.iter().map(|v| g * v).collect())
}

/// Fourth-order central-difference Laplacian with step `h`.
pub fn stencil_laplacian<F: Fn(&[f64]) -> f64>(f: F, z: &[f64], h: f64) -> f64 {
    let mut acc = 0.0;
    let mut p = z.to_vec();
    let f0 = f(z);
    for i in 0..z.len() {
        let mut at = |k: f64| {
            p[i] = z[i] + k * h;
            let v = f(&p);
            p[i] = z[i];
            v
        };
        let (m2, m1, p1, p2) = (at(-2.0), at(-1.0), at(1.0), at(2.0));
        acc += (-m2 + 16.0 * m1 - 30.0 * f0 + 16.0 * p1 - p2) / (12.0 * h * h);
    }
    acc
}

/// `|Delta U(z)|` by the stencil with step `2e-3 |z|`; analytically zero off the origin.
pub fn harmonicity_residual(d: usize, z: &[f64]) -> Result<f64> {
    newtonian_u(d, z)?;
    let h = 2e-3 * norm(z);
    Ok(stencil_laplacian(|y| radial_u(d, norm(y)), z, h).abs())
}

/// `E_1(x) = int_x^inf e^{-t}/t dt` for `x > 0`.
fn exp_integral_e1(x: f64) -> f64 {
    if x <= 1.0 {
        let mut sum = 0.0;
        let mut term = 1.0;
        for k in 1..60 {
            term *= -x / k as f64;
            sum -= term / k as f64;
        }
        -EULER_GAMMA - x.ln() + sum
    } else {
        // modified Lentz on the continued fraction
        let tiny = 1e-300;
        let mut b = x + 1.0;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..300 {
            let a = -((i * i) as f64);
            b += 2.0;
            d = 1.0 / (a * d + b);
            c = b + a / c;
            let del = c * d;
            h *= del;
            if (del - 1.0).abs() < 1e-16 {
                break;
            }
        }
        h * (-x).exp()
    }
}

/// `P(a, x) / x^a` and `Q(a, x)` for the regularized incomplete gamma at `a = d/2`.
fn gamma_parts(d: usize, x: f64) -> (f64, f64) {
    let a = 0.5 * d as f64;
    if x <= 50.0 {
        let mut term = 1.0;
        let mut sum = 1.0;
        let mut k = 1.0;
        while term > 1e-17 * sum {
            term *= x / (a + k);
            sum += term;
            k += 1.0;
        }
        let p_over = (-x).exp() * sum / libm::tgamma(a + 1.0);
        (p_over, 1.0 - p_over * x.powf(a))
    } else {
        let (mut q, mut ak) = if d % 2 == 1 { (libm::erfc(x.sqrt()), 0.5) } else { ((-x).exp(), 1.0) };
        while ak < a {
            q += x.powf(ak) * (-x).exp() / libm::tgamma(ak + 1.0);
            ak += 1.0;
        }
        ((1.0 - q) / x.powf(a), q)
    }
}

/// Radial profile of `U_eps = p_eps^d * U`, from the Gauss law
/// `U_eps'(r) = U'(r) P(|N(0, eps I_d)| <= r)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MollifiedProfile {
    pub d: usize,
    pub eps: f64,
}

impl MollifiedProfile {
    pub fn new(d: usize, eps: f64) -> Result<Self> {
        check_dim(d)?;
        if !(eps > 0.0) || !eps.is_finite() {
            return Err(Error::InvalidParams(format!("epsilon = {eps} must be positive")));
        }
        Ok(Self { d, eps })
    }

    /// `p_eps^d` at radius `r`.
    pub fn density(&self, r: f64) -> f64 {
        (2.0 * PI * self.eps).powf(-0.5 * self.d as f64) * (-0.5 * r * r / self.eps).exp()
    }

    /// `U_eps'(r) / r`, bounded at `r = 0`.
    pub fn slope_ratio(&self, r: f64) -> f64 {
        let x = 0.5 * r * r / self.eps;
        let (p_over, _) = gamma_parts(self.d, x);
        let a = 0.5 * self.d as f64;
        2.0 / sphere_area(self.d - 1) * p_over / (2.0 * self.eps).powf(a)
    }

    /// `U_eps(r)`.
    pub fn value(&self, r: f64) -> f64 {
        let scale = (2.0 * self.eps).sqrt();
        let u = r / scale;
        match self.d {
            2 => {
                let x = u * u;
                if x <= 1.0 {
                    let mut s = 0.0;
                    let mut term = 1.0;
                    for k in 1..60 {
                        term *= -x / k as f64;
                        s -= term / k as f64;
                    }
                    (0.5 * (2.0 * self.eps).ln() + 0.5 * (-EULER_GAMMA + s)) / PI
                } else {
                    (r.ln() + 0.5 * exp_integral_e1(x)) / PI
                }
            }
            3 => {
                let ratio = if u < 1e-8 { 2.0 / PI.sqrt() } else { libm::erf(u) / u };
                -ratio / (2.0 * PI * scale)
            }
            d => {
                // U_eps(r) = -int_r^inf r' U_eps'(r')/r' dr', with the Gaussian mass complete past `top`
                let top = r.max(0.0) + 14.0 * self.eps.sqrt();
                let df = d as f64;
                let spec = QuadSpec::new(1e-14, 1e-11);
                let near = integrate_value(|q| q * self.slope_ratio(q), r, top, &[], &spec).unwrap_or(f64::NAN);
                let far = 2.0 / (sphere_area(d - 1) * (df - 2.0) * top.powf(df - 2.0));
                -(near + far)
            }
        }
    }
}

/// `U` composed with the bifBm scaling, `theta` and the level `x`, subject to `gamma > 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PotentialSpec {
    mp: MultiParams,
    theta: f64,
    level: Vec<f64>,
}

impl PotentialSpec {
    pub fn new(mp: &MultiParams, theta: f64, level: &[f64]) -> Result<Self> {
        check_dim(mp.dims())?;
        if level.len() != mp.dims() {
            return Err(Error::InvalidParams(format!(
                "level has {} coordinates, parameters have {}",
                level.len(),
                mp.dims()
            )));
        }
        let gamma = mp.gamma(theta);
        if !(gamma > 0.0) {
            return Err(Error::InvalidParams(format!("gamma = {gamma} must be positive (theta = {theta})")));
        }
        Ok(Self { mp: mp.clone(), theta, level: level.to_vec() })
    }

    pub fn params(&self) -> &MultiParams {
        &self.mp
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn level(&self) -> &[f64] {
        &self.level
    }

    pub fn dims(&self) -> usize {
        self.mp.dims()
    }

    pub fn gamma(&self) -> f64 {
        self.mp.gamma(self.theta)
    }

    /// `gamma - 3/2 + H_iK_i > -1` for every `i`.
    pub fn exponent_margins(&self) -> Vec<f64> {
        self.mp.params().iter().map(|p| self.gamma() - 1.5 + p.hk() + 1.0).collect()
    }

    /// `prod_j (2 H_j K_j)^{-1/2}`.
    pub fn prefactor(&self) -> f64 {
        self.mp.params().iter().map(|p| p.two_hk().powf(-0.5)).product()
    }

    /// `a_i(s) = s^{1/2 - H_iK_i} / sqrt(2 H_iK_i)`.
    pub fn scaling(&self, s: f64) -> Vec<f64> {
        self.mp.params().iter().map(|p| s.powf(0.5 - p.hk()) / p.two_hk().sqrt()).collect()
    }

    fn scaled(&self, s: f64, z: &[f64]) -> Result<Vec<f64>> {
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::domain(format!("time {s} must be positive")));
        }
        if z.len() != self.dims() {
            return Err(Error::InvalidParams(format!("point has {} coordinates, expected {}", z.len(), self.dims())));
        }
        Ok(self.scaling(s).iter().zip(z).zip(&self.level).map(|((a, zi), xi)| a * (zi - xi)).collect())
    }
}

/// `Ubar(s, z) = prod_j (2H_jK_j)^{-1/2} s^theta U(a(s) (z - x))`.
pub fn u_bar(spec: &PotentialSpec, s: f64, z: &[f64]) -> Result<f64> {
    let y = spec.scaled(s, z)?;
    let r = norm(&y);
    if r == 0.0 {
        return Err(Error::Singular(format!("z = x at s = {s}")));
    }
    Ok(spec.prefactor() * s.powf(spec.theta) * radial_u(spec.dims(), r))
}

/// `(d_s, grad, diagonal second derivatives)` of a potential-type function of `(s, z)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UBarDerivatives {
    pub ds: f64,
    pub grad: Vec<f64>,
    pub second: Vec<f64>,
}

/// Shared chain rule for `F(s, z) = P s^theta V(|a(s)(z - x)|)` with radial `V`, given
/// `V(r)`, `V'(r)/r` and `V''(r)`.
fn radial_chain(spec: &PotentialSpec, s: f64, y: &[f64], v: f64, ratio: f64, second_radial: f64) -> UBarDerivatives {
    let pre = spec.prefactor() * s.powf(spec.theta);
    let r2: f64 = y.iter().map(|v| v * v).sum();
    let a = spec.scaling(s);
    let hks: Vec<f64> = spec.mp.params().iter().map(|p| p.hk()).collect();
    let grad = a.iter().zip(y).map(|(ai, yi)| pre * ai * ratio * yi).collect();
    let second = a
        .iter()
        .zip(y)
        .map(|(ai, yi)| {
            let frac = if r2 > 0.0 { yi * yi / r2 } else { 0.0 };
            pre * ai * ai * (ratio + (second_radial - ratio) * frac)
        })
        .collect();
    let drift: f64 = y.iter().zip(&hks).map(|(yi, h)| yi * yi * (0.5 - h)).sum();
    let ds = spec.prefactor() * (spec.theta * s.powf(spec.theta - 1.0) * v + s.powf(spec.theta - 1.0) * ratio * drift);
    UBarDerivatives { ds, grad, second }
}

pub fn u_bar_derivatives(spec: &PotentialSpec, s: f64, z: &[f64]) -> Result<UBarDerivatives> {
    let y = spec.scaled(s, z)?;
    let r = norm(&y);
    if r == 0.0 {
        return Err(Error::Singular(format!("z = x at s = {s}")));
    }
    let d = spec.dims();
    let ratio = radial_u_slope_ratio(d, r);
    Ok(radial_chain(spec, s, &y, radial_u(d, r), ratio, (1.0 - d as f64) * ratio))
}

/// `Ubar_eps(s, z) = prod_j (2H_jK_j)^{-1/2} s^theta U_eps(a(s)(z - x))`, mollified in the
/// scaled argument.
pub fn u_bar_eps(spec: &PotentialSpec, profile: &MollifiedProfile, s: f64, z: &[f64]) -> Result<f64> {
    let y = spec.scaled(s, z)?;
    Ok(spec.prefactor() * s.powf(spec.theta) * profile.value(norm(&y)))
}

pub fn u_bar_eps_derivatives(spec: &PotentialSpec, profile: &MollifiedProfile, s: f64, z: &[f64]) -> Result<UBarDerivatives> {
    let y = spec.scaled(s, z)?;
    let r = norm(&y);
    let ratio = profile.slope_ratio(r);
    let second = 2.0 * profile.density(r) - (profile.d as f64 - 1.0) * ratio;
    Ok(radial_chain(spec, s, &y, profile.value(r), ratio, second))
}

/// Both sides of `(1/2) sum_i a_i^{-2} d_i^2 V_eps(z) = p_eps^d(a z)` with `V_eps(z) = U_eps(a z)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaplaceCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub residual: f64,
    pub relative: f64,
}

/// The left side is `(1/2) int U(v) Delta p_eps(a z - v) dv`, evaluated in spherical
/// coordinates around `a z` by nested adaptive quadrature.
pub fn laplace_identity_residual(d: usize, a: &[f64], eps: f64, z: &[f64]) -> Result<LaplaceCheck> {
    check_dim(d)?;
    if a.len() != d || z.len() != d {
        return Err(Error::InvalidParams(format!("expected {d} scalings and coordinates")));
    }
    if a.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::InvalidParams("scalings must be positive".into()));
    }
    let profile = MollifiedProfile::new(d, eps)?;
    let y: Vec<f64> = a.iter().zip(z).map(|(ai, zi)| ai * zi).collect();
    let rho = norm(&y);
    let df = d as f64;
    let lap_p = |w2: f64| profile.density(w2.sqrt()) * (w2 / (eps * eps) - df / eps);
    let spec = QuadSpec::new(1e-13 * profile.density(0.0), 1e-10).with_max_intervals(20_000);
    let ring = sphere_area(d - 2);
    let shell = |r: f64| -> f64 {
        if r == 0.0 {
            return 0.0;
        }
        let angular = if rho == 0.0 {
            sphere_area(d - 1) * lap_p(r * r)
        } else {
            let f = |phi: f64| {
                let w2 = (rho - r).powi(2) + 2.0 * rho * r * (1.0 - phi.cos());
                lap_p(w2) * phi.sin().powi(d as i32 - 2)
            };
            ring * integrate_value(f, 0.0, PI, &[], &spec).unwrap_or(f64::NAN)
        };
        radial_u(d, r) * r.powi(d as i32 - 1) * angular
    };
    let reach = 14.0 * eps.sqrt();
    let lo = (rho - reach).max(0.0);
    let breaks: Vec<f64> = if rho > lo { vec![rho] } else { vec![] };
    let lhs = 0.5 * integrate_value(shell, lo, rho + reach, &breaks, &spec)?;
    if !lhs.is_finite() {
        return Err(Error::Quadrature(crate::error::QuadratureFailure {
            estimate: lhs,
            abs_error: f64::NAN,
            evaluations: 0,
            intervals: 0,
            reason: "angular integral of the convolution failed".into(),
        }));
    }
    let rhs = profile.density(rho);
    let residual = (lhs - rhs).abs();
    let relative = if rhs > 0.0 { residual / rhs } else { f64::INFINITY };
    Ok(LaplaceCheck { lhs, rhs, residual, relative })
}

/// Smallest constants making the growth bounds hold on a sample of `(s, z)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeReport {
    pub dims: usize,
    pub samples: usize,
    /// `|d_i Ubar| <= C s^{(1-d)/2 + theta} |w|^{1-d}`, `w_i = (z_i - x_i) s^{-H_iK_i}`.
    pub gradient: f64,
    /// Same bound with the extra factor `s^{1/2 - H_iK_i}` that the chain rule produces.
    pub gradient_rescaled: f64,
    /// `|d_s Ubar| <= C s^{-d/2 + theta} |w|^{2-d}`.
    pub time_derivative: f64,
    /// `|Ubar| <= C s^{(2-d)/2 + theta} |w|^{2-d}`.
    pub value: f64,
    /// For `d = 2` the last two bounds use `1 + |log|a(s)(z - x)||` in place of `|w|^0`.
    pub log_branch: bool,
}

pub fn envelope_checks(spec: &PotentialSpec, samples: &[(f64, Vec<f64>)]) -> Result<EnvelopeReport> {
    let d = spec.dims();
    let df = d as f64;
    let th = spec.theta;
    let hks: Vec<f64> = spec.mp.params().iter().map(|p| p.hk()).collect();
    let mut report = EnvelopeReport {
        dims: d,
        samples: samples.len(),
        gradient: 0.0,
        gradient_rescaled: 0.0,
        time_derivative: 0.0,
        value: 0.0,
        log_branch: d == 2,
    };
    for (s, z) in samples {
        let s = *s;
        let der = u_bar_derivatives(spec, s, z)?;
        let val = u_bar(spec, s, z)?;
        let w: Vec<f64> = z.iter().zip(&spec.level).zip(&hks).map(|((zi, xi), h)| (zi - xi) * s.powf(-h)).collect();
        let wn = norm(&w);
        let shape = if d == 2 { 1.0 + norm(&spec.scaled(s, z)?).ln().abs() } else { wn.powf(2.0 - df) };
        for (g, h) in der.grad.iter().zip(&hks) {
            let bound = s.powf(0.5 * (1.0 - df) + th) * wn.powf(1.0 - df);
            report.gradient = report.gradient.max(g.abs() / bound);
            report.gradient_rescaled = report.gradient_rescaled.max(g.abs() / (bound * s.powf(0.5 - h)));
        }
        report.time_derivative = report.time_derivative.max(der.ds.abs() / (s.powf(-0.5 * df + th) * shape));
        report.value = report.value.max(val.abs() / (s.powf(0.5 * (2.0 - df) + th) * shape));
    }
    Ok(report)
}

/// `n` points with `s` uniform on `(0, t]` and `z - x` uniform on `[-2, 2]^d`.
pub fn envelope_samples(spec: &PotentialSpec, t: f64, n: usize, seed: u64) -> Vec<(f64, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let s = t * (1.0 - rng.random::<f64>());
            let z = spec.level.iter().map(|x| x + rng.random_range(-2.0..2.0)).collect();
            (s, z)
        })
        .collect()
}

/// Deterministic time-dependent Itô identity on `R^d`; requires every `2H_iK_i > 1`.
pub fn multidim_ito_residual(mp: &MultiParams, tf: &TimeTestFunction, t: f64, quad: &QuadSpec) -> Result<f64> {
    mp.require_strictly_supercritical()?;
    ito_time_dependent_residual(mp, tf, t, quad)
}

/// Values of `Ubar_eps(s, 0)` as `s` decreases to 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryLimit {
    pub s: Vec<f64>,
    pub values: Vec<f64>,
    pub limit: f64,
}

/// Outcome of [`mollified_multidim_tanaka`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiTanakaReport {
    pub epsilon: f64,
    pub boundary: BoundaryLimit,
    /// `(n, E residual^2)` for each resolution.
    pub residuals: Vec<(usize, MeanEstimate)>,
    /// Finest-level means of `Ubar_eps(t, B_t) - limit`, `int d_s Ubar_eps`, each Skorohod term and `I_2^eps`.
    pub increment: MeanEstimate,
    pub time_integral: MeanEstimate,
    pub skorohod: Vec<MeanEstimate>,
    pub second_order: MeanEstimate,
    /// `E I_2^eps` from the order-zero chaos coefficient.
    pub second_order_chaos: f64,
}

/// Time used in place of `s = 0`, where the scaled argument is undefined.
fn origin_proxy(t: f64) -> f64 {
    1e-12 * t
}

struct LevelTerms {
    increment: f64,
    time_integral: f64,
    skorohod: Vec<f64>,
    second_order: f64,
}

impl LevelTerms {
    fn residual(&self) -> f64 {
        self.increment - self.time_integral - self.skorohod.iter().sum::<f64>() - self.second_order
    }
}

struct LevelData {
    stride: usize,
    times: Vec<f64>,
    /// `R_i(t_{j-1}, t_j) - R_i(t_{j-1}, t_{j-1})` per dimension.
    corrections: Vec<Vec<f64>>,
    time_weights: Vec<f64>,
    theta_weights: Vec<f64>,
}

/// Mollified multidimensional Tanaka identity on simulated paths at fixed `eps`:
/// `Ubar_eps(t, B_t) - Ubar_eps(0+, 0) - int d_s Ubar_eps - sum_i delta_i - I_2^eps`.
pub fn mollified_multidim_tanaka<S: PathSource>(source: &S, spec: &PotentialSpec, eps: f64, levels: &[usize]) -> Result<MultiTanakaReport> {
    let mp = source.params();
    if mp != &spec.mp {
        return Err(Error::InvalidParams("path parameters differ from the potential parameters".into()));
    }
    mp.require_strictly_supercritical()?;
    let profile = MollifiedProfile::new(spec.dims(), eps)?;
    let grid = source.grid();
    let t = grid.horizon();
    let steps = grid.steps();
    let d = spec.dims();

    let mut s_seq = Vec::new();
    let mut values = Vec::new();
    for k in 1..=12 {
        let s = t * 10f64.powi(-k);
        s_seq.push(s);
        values.push(u_bar_eps(spec, &profile, s, &vec![0.0; d])?);
    }
    let limit = u_bar_eps(spec, &profile, origin_proxy(t), &vec![0.0; d])?;
    let boundary = BoundaryLimit { s: s_seq, values, limit };

    let mut data = Vec::new();
    for &n in levels {
        if n == 0 || steps % n != 0 {
            return Err(Error::domain(format!("level n = {n} does not divide the {steps} grid steps")));
        }
        let sub = grid.subsample(steps / n)?;
        let times = sub.times().to_vec();
        let corrections = mp
            .params()
            .iter()
            .map(|p| {
                times.windows(2).map(|w| covariance_unchecked(p, w[0], w[1]) - covariance_unchecked(p, w[0], w[0])).collect()
            })
            .collect();
        let time_weights = weighted_trapezoid_weights(&times, 0.0);
        let theta_weights = weighted_trapezoid_weights(&times, spec.theta);
        data.push(LevelData { stride: steps / n, times, corrections, time_weights, theta_weights });
    }

    let proxy = origin_proxy(t);
    let prefactor = spec.prefactor();
    let per_path: Vec<Vec<LevelTerms>> = source.map_paths(|_, paths| {
        data.iter()
            .map(|lvl| {
                let m = lvl.times.len();
                let mut point = vec![0.0; d];
                let mut ds = Vec::with_capacity(m);
                let mut dens = Vec::with_capacity(m);
                let mut skorohod = vec![0.0; d];
                let mut end_value = 0.0;
                for j in 0..m {
                    let s = if j == 0 { proxy } else { lvl.times[j] };
                    for (i, slot) in point.iter_mut().enumerate() {
                        *slot = paths[i][j * lvl.stride];
                    }
                    let der = u_bar_eps_derivatives(spec, &profile, s, &point).expect("validated inputs");
                    ds.push(der.ds);
                    let y = spec.scaled(s, &point).expect("validated inputs");
                    dens.push(prefactor * profile.density(norm(&y)));
                    if j + 1 < m {
                        for i in 0..d {
                            let inc = paths[i][(j + 1) * lvl.stride] - point[i];
                            skorohod[i] += der.grad[i] * inc - der.second[i] * lvl.corrections[i][j];
                        }
                    } else {
                        end_value = u_bar_eps(spec, &profile, s, &point).expect("validated inputs");
                    }
                }
                LevelTerms {
                    increment: end_value - limit,
                    time_integral: compensated_sum(ds.iter().zip(&lvl.time_weights).map(|(a, w)| a * w)),
                    skorohod,
                    second_order: compensated_sum(dens.iter().zip(&lvl.theta_weights).map(|(a, w)| a * w)),
                }
            })
            .collect()
    });

    let residuals = levels
        .iter()
        .enumerate()
        .map(|(k, &n)| {
            let sq: Vec<f64> = per_path.iter().map(|v| v[k].residual().powi(2)).collect();
            (n, MeanEstimate::from_samples(&sq))
        })
        .collect();
    let last = levels.len() - 1;
    let collect = |f: &dyn Fn(&LevelTerms) -> f64| -> MeanEstimate {
        let v: Vec<f64> = per_path.iter().map(|p| f(&p[last])).collect();
        MeanEstimate::from_samples(&v)
    };
    let skorohod = (0..d).map(|i| collect(&|lt: &LevelTerms| lt.skorohod[i])).collect();
    let second_order_chaos = beta_order_zero_mean(mp, &spec.level, spec.theta, eps, t, &QuadSpec::new(1e-12, 1e-10))?;
    Ok(MultiTanakaReport {
        epsilon: eps,
        boundary,
        residuals,
        increment: collect(&|lt: &LevelTerms| lt.increment),
        time_integral: collect(&|lt: &LevelTerms| lt.time_integral),
        skorohod,
        second_order: collect(&|lt: &LevelTerms| lt.second_order),
        second_order_chaos,
    })
}
