//! Wiener-chaos expansions of weighted local times and Watanabe-type norms.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::covariance_unchecked;
use crate::error::{Error, QuadratureFailure, Result};
use crate::kernels::{gauss_kernel_unchecked, hermite, hermite_normalized_all};
use crate::params::{HurstParams, MultiParams};
use crate::quadrature::{gauss_legendre, integrate_value, QuadSpec};
use crate::stats::{linear_fit, CompensatedSum};

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

fn check_time(s: f64) -> Result<()> {
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::domain(format!("time {s} must be positive")));
    }
    Ok(())
}

/// `E[I_n(1_[0,s]^n) I_n(1_[0,r]^n)] = n! R(s, r)^n`.
pub fn multiple_integral_inner(p: &HurstParams, n: usize, s: f64, r: f64) -> Result<f64> {
    let rho = crate::covariance::covariance(p, s, r)?;
    Ok(factorial(n) * rho.powi(n as i32))
}

/// `2HK p_{s^{2HK}}(x) s^{-((n-2)HK + 1)} H_n(x / s^{HK})`, the order-`n` integrand of `L_t^x`.
pub fn local_time_coeff_1d(p: &HurstParams, n: usize, s: f64, x: f64) -> Result<f64> {
    check_time(s)?;
    let hk = p.hk();
    let sd = s.powf(hk);
    let expo = -((n as f64 - 2.0) * hk + 1.0);
    Ok(p.two_hk() * gauss_kernel_unchecked(sd * sd, x) * s.powf(expo) * hermite(n, x / sd))
}

fn check_theta(mp: &MultiParams, theta: f64) -> Result<()> {
    if mp.dims() >= 2 {
        let g = mp.gamma(theta);
        if !(g > 0.0) {
            return Err(Error::InvalidParams(format!("gamma = {g} must be positive (theta = {theta})")));
        }
    }
    let d = mp.dims() as f64;
    if !(theta - 0.5 * d > -1.0) || !theta.is_finite() {
        return Err(Error::InvalidParams(format!(
            "theta = {theta} makes the chaos norms diverge near the diagonal origin"
        )));
    }
    Ok(())
}

/// `prod_i p_{s^{2H_iK_i}}(x_i) s^{-(1/2 + (n_i - 1) H_iK_i)} H_{n_i}(x_i / s^{H_iK_i}) * s^theta`.
pub fn multi_local_time_coeff(mp: &MultiParams, n: &[usize], s: f64, x: &[f64], theta: f64) -> Result<f64> {
    check_time(s)?;
    check_shapes(mp, n.len(), x.len())?;
    check_theta(mp, theta)?;
    let mut v = s.powf(theta);
    for ((p, &ni), &xi) in mp.params().iter().zip(n).zip(x) {
        let hk = p.hk();
        let sd = s.powf(hk);
        v *= gauss_kernel_unchecked(sd * sd, xi) * s.powf(-(0.5 + (ni as f64 - 1.0) * hk)) * hermite(ni, xi / sd);
    }
    Ok(v)
}

fn check_shapes(mp: &MultiParams, n: usize, x: usize) -> Result<()> {
    if n != mp.dims() || x != mp.dims() {
        return Err(Error::InvalidParams(format!(
            "order has {n} entries and level has {x}, expected {}",
            mp.dims()
        )));
    }
    Ok(())
}

/// `(eps/c(s)^2 + s^{2HK})^{-n/2} p_{s^{2HK} + eps/c(s)^2}(x) H_n(x / sqrt(s^{2HK} + eps/c(s)^2))`
/// with `c(s) = s^{1/2 - HK} / sqrt(2HK)`.
pub fn beta_coeff(p: &HurstParams, n: usize, eps: f64, s: f64, x: f64) -> Result<f64> {
    check_time(s)?;
    if !(eps >= 0.0) {
        return Err(Error::domain(format!("epsilon {eps} must be nonnegative")));
    }
    let two_hk = p.two_hk();
    let var = s.powf(two_hk) + eps * two_hk * s.powf(two_hk - 1.0);
    let sd = var.sqrt();
    Ok(sd.powi(-(n as i32)) * gauss_kernel_unchecked(var, x) * hermite(n, x / sd))
}

/// `int_0^t prod_i beta^i_{0,eps}(s) s^{H_iK_i - 1/2} s^theta ds`, the mean of the mollified
/// second-order term of the multidimensional Tanaka formula.
pub fn beta_order_zero_mean(mp: &MultiParams, x: &[f64], theta: f64, eps: f64, t: f64, quad: &QuadSpec) -> Result<f64> {
    check_time(t)?;
    check_shapes(mp, mp.dims(), x.len())?;
    let f = |s: f64| {
        if s == 0.0 {
            return 0.0;
        }
        let mut v = s.powf(theta);
        for (p, &xi) in mp.params().iter().zip(x) {
            v *= beta_coeff(p, 0, eps, s, xi).unwrap_or(0.0) * s.powf(p.hk() - 0.5);
        }
        v
    };
    integrate_value(f, 0.0, t, &[], quad)
}

/// Multi-indices of total order `m` in `d` dimensions, lexicographically ordered.
pub fn shell_indices(d: usize, m: usize) -> Vec<Vec<usize>> {
    fn rec(d: usize, m: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if d == 1 {
            prefix.push(m);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for k in 0..=m {
            prefix.push(k);
            rec(d - 1, m - k, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    if d > 0 {
        rec(d, m, &mut Vec::with_capacity(d), &mut out);
    }
    out
}

/// Sum over `|n| = m` of `prod_i f_i(n_i)`, for every `m` up to the common length.
fn shell_sums(factors: &[Vec<f64>]) -> Vec<f64> {
    let mut acc = factors[0].clone();
    for f in &factors[1..] {
        let mut next = vec![0.0; acc.len()];
        for (m, slot) in next.iter_mut().enumerate() {
            *slot = (0..=m).map(|k| acc[k] * f[m - k]).sum();
        }
        acc = next;
    }
    acc
}

/// Composite Gauss–Legendre rule on `[0, 1]`.
struct PanelRule {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl PanelRule {
    fn new(breaks: &[f64], order: usize, split: usize) -> Self {
        let (x, w) = gauss_legendre(order);
        let mut nodes = Vec::new();
        let mut weights = Vec::new();
        for pair in breaks.windows(2) {
            let width = (pair[1] - pair[0]) / split as f64;
            for k in 0..split {
                let a = pair[0] + k as f64 * width;
                for (xi, wi) in x.iter().zip(&w) {
                    nodes.push(a + 0.5 * width * (xi + 1.0));
                    weights.push(0.5 * width * wi);
                }
            }
        }
        Self { nodes, weights }
    }

    fn len(&self) -> usize {
        self.nodes.len()
    }
}

/// Geometric toward both ends: the inner variable meets the origin and the diagonal.
fn inner_breaks() -> Vec<f64> {
    let mut b = vec![0.0];
    b.extend((1..=20).rev().map(|k| 0.5f64.powi(k)));
    b.extend((2..=30).map(|k| 1.0 - 0.5f64.powi(k)));
    b.push(1.0);
    b
}

fn outer_breaks() -> Vec<f64> {
    let mut b = vec![0.0];
    b.extend((1..=24).rev().map(|k| 0.5f64.powi(k)));
    b.extend([0.625, 0.75, 0.875, 1.0]);
    b
}

/// Chaos expansion `sum_n int_0^t c_n(s) I_n(1_[0,s]^n) ds` of a (weighted) local time.
///
/// The coefficient is `c_n(s) = A s^theta prod_i p_{s^{2H_iK_i}}(x_i) s^{-(1/2 + (n_i-1)H_iK_i)} H_{n_i}(x_i/s^{H_iK_i})`.
/// The one-dimensional local time is `A = 2HK`, `theta = HK - 1/2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChaosSeries {
    params: MultiParams,
    level: Vec<f64>,
    theta: f64,
    prefactor: f64,
    truncation: usize,
    horizon: f64,
}

/// One line of a coefficient table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientRow {
    pub order: Vec<usize>,
    pub s: f64,
    pub value: f64,
}

impl ChaosSeries {
    pub fn local_time(p: &HurstParams, t: f64, x: f64, truncation: usize) -> Result<Self> {
        check_time(t)?;
        Ok(Self {
            params: MultiParams::from(*p),
            level: vec![x],
            theta: p.hk() - 0.5,
            prefactor: p.two_hk(),
            truncation,
            horizon: t,
        })
    }

    /// The generalized weighted local time `L^theta(t, x)`.
    pub fn weighted(mp: &MultiParams, t: f64, x: &[f64], theta: f64, truncation: usize) -> Result<Self> {
        check_time(t)?;
        check_shapes(mp, mp.dims(), x.len())?;
        check_theta(mp, theta)?;
        Ok(Self { params: mp.clone(), level: x.to_vec(), theta, prefactor: 1.0, truncation, horizon: t })
    }

    pub fn dims(&self) -> usize {
        self.params.dims()
    }

    pub fn truncation(&self) -> usize {
        self.truncation
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn level(&self) -> &[f64] {
        &self.level
    }

    /// `c_n(s)` for a multi-index `n`.
    pub fn coefficient(&self, n: &[usize], s: f64) -> Result<f64> {
        check_time(s)?;
        check_shapes(&self.params, n.len(), self.level.len())?;
        let mut v = self.prefactor * s.powf(self.theta);
        for ((p, &ni), &xi) in self.params.params().iter().zip(n).zip(&self.level) {
            let front = coeff_front(p.hk(), xi, s).map_or(0.0, |(f, y)| f * hermite(ni, y));
            v *= front * s.powf(-(ni as f64) * p.hk());
        }
        Ok(v)
    }

    pub fn coefficient_table(&self, orders: &[Vec<usize>], s_grid: &[f64]) -> Result<Vec<CoefficientRow>> {
        let mut rows = Vec::with_capacity(orders.len() * s_grid.len());
        for n in orders {
            for &s in s_grid {
                rows.push(CoefficientRow { order: n.clone(), s, value: self.coefficient(n, s)? });
            }
        }
        Ok(rows)
    }

    fn r_exponent(&self) -> f64 {
        2.0 * self.theta - self.dims() as f64 + 1.0
    }

    fn z_exponent(&self) -> f64 {
        self.theta - 0.5 * self.dims() as f64
    }

    /// `a_m = sum_{|n| = m} prod_i n_i! int int c_n(s) c_n(r) prod_i R_i(s, r)^{n_i} ds dr`, `m = 0..=N`.
    ///
    /// Computed on two nested composite rules; fails if they disagree.
    pub fn norms(&self) -> Result<Vec<f64>> {
        let (coarse, fine) = if self.level.iter().all(|&x| x == 0.0) {
            (self.norms_at_origin(1), self.norms_at_origin(2))
        } else {
            (self.norms_tensor(1), self.norms_tensor(2))
        };
        let total: f64 = fine.iter().map(|v| v.abs()).sum();
        for (m, (a, b)) in coarse.iter().zip(&fine).enumerate() {
            let err = (a - b).abs();
            if !b.is_finite() || err > 1e-7 * b.abs() + 1e-12 * total {
                return Err(Error::Quadrature(QuadratureFailure {
                    estimate: *b,
                    abs_error: err,
                    evaluations: 0,
                    intervals: 0,
                    reason: format!("chaos norm of order {m} is not resolved by the composite rule"),
                }));
            }
        }
        Ok(fine)
    }

    /// Partial sums `sum_{m <= N} a_m`, i.e. the truncated second moments.
    pub fn partial_sums(&self) -> Result<Vec<f64>> {
        let a = self.norms()?;
        let mut acc = CompensatedSum::new();
        Ok(a.iter()
            .map(|v| {
                acc.add(*v);
                acc.value()
            })
            .collect())
    }

    /// At `x = 0` the `r`-integral is a pure power and only the diagonal ratio remains:
    /// `a_m = A^2 2 t^{a+1}/(a+1) sum_{|n|=m} prod_i n_i! H_{n_i}(0)^2/(2 pi) int_0^1 z^b prod_i rho_i(z)^{n_i} dz`
    /// with `rho_i(z) = R_i(z, 1) / z^{H_iK_i}`.
    fn norms_at_origin(&self, split: usize) -> Vec<f64> {
        let n_max = self.truncation;
        let a = self.r_exponent();
        let b = self.z_exponent();
        let rule = PanelRule::new(&inner_breaks(), 16, split);
        let weights: Vec<f64> =
            hermite_zero_weights(n_max).into_iter().map(|w| w / (2.0 * std::f64::consts::PI)).collect();
        let base = vec![weights; self.dims()];
        let parts: Vec<Vec<f64>> = (0..rule.len())
            .into_par_iter()
            .map(|j| {
                let z = rule.nodes[j].powf(1.0 / (b + 1.0));
                let factors: Vec<Vec<f64>> = self
                    .params
                    .params()
                    .iter()
                    .zip(&base)
                    .map(|(p, f)| {
                        let rho = covariance_unchecked(p, z, 1.0) / z.powf(p.hk());
                        let mut pw = 1.0;
                        f.iter()
                            .map(|v| {
                                let out = v * pw;
                                pw *= rho;
                                out
                            })
                            .collect()
                    })
                    .collect();
                let w = rule.weights[j] / (b + 1.0);
                shell_sums(&factors).into_iter().map(|v| w * v).collect()
            })
            .collect();
        let scale = self.prefactor.powi(2) * 2.0 * self.horizon.powf(a + 1.0) / (a + 1.0);
        sum_columns(&parts, n_max).into_iter().map(|v| scale * v).collect()
    }

    /// Tensor rule in `r = t v^{1/(a+1)}` and `s = r w^{1/(b+1)}`.
    fn norms_tensor(&self, split: usize) -> Vec<f64> {
        let n_max = self.truncation;
        let a = self.r_exponent();
        let b = self.z_exponent();
        let q = 1.0 / (a + 1.0);
        let outer = PanelRule::new(&outer_breaks(), 24, split);
        let inner = PanelRule::new(&inner_breaks(), 16, split);
        let t = self.horizon;
        let hks: Vec<f64> = self.params.params().iter().map(HurstParams::hk).collect();
        let parts: Vec<Vec<f64>> = (0..outer.len())
            .into_par_iter()
            .map(|j| {
                let v = outer.nodes[j];
                let r = t * v.powf(q);
                let jac_r = t * q * v.powf(q - 1.0) * outer.weights[j];
                let at_r: Vec<Vec<f64>> =
                    hks.iter().zip(&self.level).map(|(&hk, &x)| normalized_coeff(hk, x, r, n_max)).collect();
                let mut acc = vec![0.0; n_max + 1];
                for (&w, &wt) in inner.nodes.iter().zip(&inner.weights) {
                    let z = w.powf(1.0 / (b + 1.0));
                    let s = r * z;
                    let factors: Vec<Vec<f64>> = self
                        .params
                        .params()
                        .iter()
                        .zip(&self.level)
                        .zip(&at_r)
                        .map(|((p, &x), cr)| {
                            let cs = normalized_coeff(p.hk(), x, s, n_max);
                            let rho = covariance_unchecked(p, s, r) / (s * r).powf(p.hk());
                            let mut pw = 1.0;
                            (0..=n_max)
                                .map(|k| {
                                    let out = cs[k] * cr[k] * pw;
                                    pw *= rho;
                                    out
                                })
                                .collect()
                        })
                        .collect();
                    let weight = jac_r * wt * z.powf(-b) / (b + 1.0) * 2.0 * r * (s * r).powf(self.theta);
                    for (slot, v) in acc.iter_mut().zip(shell_sums(&factors)) {
                        *slot += weight * v;
                    }
                }
                acc
            })
            .collect();
        let scale = self.prefactor.powi(2);
        sum_columns(&parts, n_max).into_iter().map(|v| scale * v).collect()
    }
}

/// `p_{s^{2h}}(x) s^{h - 1/2}` and `x / s^h`, or `None` when the kernel underflows.
fn coeff_front(hk: f64, x: f64, s: f64) -> Option<(f64, f64)> {
    let sd = s.powf(hk);
    let y = x / sd;
    if 0.5 * y * y > 700.0 {
        return None;
    }
    Some((INV_SQRT_2PI * (-0.5 * y * y).exp() / sd * s.powf(hk - 0.5), y))
}

/// `sqrt(k!) p_{s^{2h}}(x) s^{h - 1/2} H_k(x / s^h)` for `k = 0..=n`.
fn normalized_coeff(hk: f64, x: f64, s: f64, n: usize) -> Vec<f64> {
    match coeff_front(hk, x, s) {
        None => vec![0.0; n + 1],
        Some((front, y)) => hermite_normalized_all(n, y).into_iter().map(|h| front * h).collect(),
    }
}

/// `k! H_k(0)^2` for `k = 0..=n`.
fn hermite_zero_weights(n: usize) -> Vec<f64> {
    let mut w = vec![0.0; n + 1];
    w[0] = 1.0;
    let mut k = 0;
    while k + 2 <= n {
        w[k + 2] = w[k] * (k as f64 + 1.0) / (k as f64 + 2.0);
        k += 2;
    }
    w
}

fn sum_columns(parts: &[Vec<f64>], n_max: usize) -> Vec<f64> {
    (0..=n_max)
        .map(|m| {
            let mut acc = CompensatedSum::new();
            for p in parts {
                acc.add(p[m]);
            }
            acc.value()
        })
        .collect()
}

/// `a_n` of the one-dimensional local time `L_t^x`, `n = 0..=N`.
pub fn local_time_chaos_norms(p: &HurstParams, t: f64, x: f64, truncation: usize) -> Result<Vec<f64>> {
    ChaosSeries::local_time(p, t, x, truncation)?.norms()
}

/// Truncated second moments `sum_{n <= N} a_n` of `L_t^x` for every `N` up to `truncation`.
pub fn local_time_chaos_moment(p: &HurstParams, t: f64, x: f64, truncation: usize) -> Result<Vec<f64>> {
    ChaosSeries::local_time(p, t, x, truncation)?.partial_sums()
}

/// Order-zero term of `L_t^x`, i.e. its mean, by direct quadrature of the coefficient.
pub fn local_time_chaos_mean(p: &HurstParams, t: f64, x: f64, quad: &QuadSpec) -> Result<f64> {
    check_time(t)?;
    // s = u^{1/HK} removes the s^{HK - 1} singularity at x = 0
    let hk = p.hk();
    integrate_value(
        |u| {
            if u == 0.0 {
                return if x == 0.0 { 2.0 * INV_SQRT_2PI } else { 0.0 };
            }
            let s = u.powf(1.0 / hk);
            local_time_coeff_1d(p, 0, s, x).unwrap_or(0.0) * s / (hk * u)
        },
        0.0,
        t.powf(hk),
        &[],
        quad,
    )
}

/// Sobolev–Watanabe index `alpha` with the admissibility threshold `1/(2 (HK)*) - d/2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WatanabeIndex {
    pub alpha: f64,
    pub threshold: f64,
}

impl WatanabeIndex {
    pub fn new(mp: &MultiParams, alpha: f64) -> Self {
        Self { alpha, threshold: Self::threshold_for(mp) }
    }

    pub fn threshold_for(mp: &MultiParams) -> f64 {
        0.5 / mp.hk_star() - 0.5 * mp.dims() as f64
    }

    pub fn below_threshold(&self) -> bool {
        self.alpha < self.threshold
    }
}

/// Partial sums `S_N = sum_{n <= N} (1 + n)^alpha a_n` for `N = 0..=n_max`.
pub fn watanabe_partial_norm(idx: &WatanabeIndex, a: &[f64], n_max: usize) -> Result<Vec<f64>> {
    if n_max >= a.len() {
        return Err(Error::IndexOutOfRange(format!("N = {n_max} but only {} terms given", a.len())));
    }
    if let Some(bad) = a[..=n_max].iter().position(|v| !(*v >= 0.0)) {
        return Err(Error::domain(format!("a_{bad} = {} is negative", a[bad])));
    }
    let mut acc = CompensatedSum::new();
    Ok(a[..=n_max]
        .iter()
        .enumerate()
        .map(|(n, v)| {
            acc.add((1.0 + n as f64).powf(idx.alpha) * v);
            acc.value()
        })
        .collect())
}

/// Orders `start, start + step, ..., <= end` used in a tail regression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FitRange {
    pub start: usize,
    pub end: usize,
    pub step: usize,
}

impl FitRange {
    pub fn new(start: usize, end: usize, step: usize) -> Self {
        Self { start, end, step }
    }

    pub fn orders(&self) -> impl Iterator<Item = usize> {
        (self.start..=self.end).step_by(self.step.max(1))
    }
}

/// Least-squares slope `rho` of `log a_n` against `log n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailFit {
    pub slope: f64,
    pub std_error: f64,
    /// `slope -/+ 2 std_error`.
    pub band: (f64, f64),
    /// `log a_n ~ intercept + slope log n`.
    pub intercept: f64,
    /// `-rho - 1`: `sum (1 + n)^alpha a_n` converges for `alpha` below it.
    pub alpha_boundary: f64,
    pub points: usize,
}

pub fn tail_exponent_estimate(a: &[f64], range: FitRange) -> Result<TailFit> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for n in range.orders() {
        let v = *a
            .get(n)
            .ok_or_else(|| Error::IndexOutOfRange(format!("order {n} beyond the {} given terms", a.len())))?;
        if n == 0 || !(v > 0.0) {
            return Err(Error::domain(format!("tail fit needs n >= 1 and a_n > 0, got a_{n} = {v}")));
        }
        xs.push((n as f64).ln());
        ys.push(v.ln());
    }
    if xs.len() < 2 {
        return Err(Error::domain("tail fit needs at least two orders"));
    }
    let fit = linear_fit(&xs, &ys);
    let se = if fit.slope_std_error.is_finite() { fit.slope_std_error } else { 0.0 };
    Ok(TailFit {
        slope: fit.slope,
        std_error: se,
        band: (fit.slope - 2.0 * se, fit.slope + 2.0 * se),
        intercept: fit.intercept,
        alpha_boundary: -fit.slope - 1.0,
        points: xs.len(),
    })
}

/// Partial sum of `a` plus the fitted power-law tail beyond `range.end`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailCorrectedSum {
    pub partial: f64,
    pub tail: f64,
    pub total: f64,
    pub fit: TailFit,
}

/// `sum_{n <= end} a_n + sum_{n > end, n = end + k step} exp(intercept) n^slope`.
pub fn tail_corrected_sum(a: &[f64], range: FitRange) -> Result<TailCorrectedSum> {
    let fit = tail_exponent_estimate(a, range)?;
    if !(fit.slope < -1.0) {
        return Err(Error::domain(format!("tail slope {} does not give a summable series", fit.slope)));
    }
    let partial: f64 = a[..=range.end].iter().sum();
    let step = range.step.max(1) as f64;
    let c = fit.intercept.exp();
    let explicit = 1000;
    let mut tail = CompensatedSum::new();
    for k in 1..=explicit {
        tail.add(c * (range.end as f64 + k as f64 * step).powf(fit.slope));
    }
    let start = range.end as f64 + (explicit as f64 + 0.5) * step;
    tail.add(c * start.powf(fit.slope + 1.0) / (step * (-fit.slope - 1.0)));
    let tail = tail.value();
    Ok(TailCorrectedSum { partial, tail, total: partial + tail, fit })
}

/// `E[(2HK int_0^t p_eps(B_s - x) s^{2HK-1} ds)^2]` from the bivariate Gaussian density,
/// `eps = 0` giving `E[(L_t^x)^2]`.
pub fn local_time_second_moment(p: &HurstParams, t: f64, x: f64, eps: f64, quad: &QuadSpec) -> Result<f64> {
    check_time(t)?;
    if !(eps >= 0.0) {
        return Err(Error::domain(format!("epsilon {eps} must be nonnegative")));
    }
    let inv = 1.0 / p.two_hk();
    // u = s^{2HK} turns 2HK s^{2HK-1} ds into du
    let density = |u: f64, v: f64| -> f64 {
        if u == 0.0 || v == 0.0 {
            return 0.0;
        }
        let (s, r) = (u.powf(inv), v.powf(inv));
        let var = crate::covariance::variogram_unchecked(p, s, r);
        let (a, c) = (u + eps, v + eps);
        let half = eps + 0.5 * var;
        let delta = 0.5 * (u - v);
        let det = half * (a + c - half) - delta * delta;
        if !(det > 0.0) {
            return 0.0;
        }
        let quad_form = x * x * (2.0 * half) / det;
        (-0.5 * quad_form).exp() / (2.0 * std::f64::consts::PI * det.sqrt())
    };
    let inner_spec = quad.with_max_intervals(quad.max_intervals.max(2000));
    // v = (u/2) y^2 on the lower half, v = u - (u/2) w^q on the upper half, with q chosen so
    // that the |u - v|^{-HK} diagonal singularity becomes bounded
    let q = 1.0 / (1.0 - p.hk()).max(0.05);
    let outer = |u: f64| -> f64 {
        if u == 0.0 {
            return 0.0;
        }
        let half = 0.5 * u;
        let lower = integrate_value(|y| density(u, half * y * y) * u * y, 0.0, 1.0, &[], &inner_spec);
        let upper = integrate_value(
            |w| density(u, u - half * w.powf(q)) * half * q * w.powf(q - 1.0),
            0.0,
            1.0,
            &[],
            &inner_spec,
        );
        match (lower, upper) {
            (Ok(a), Ok(b)) => a + b,
            _ => f64::NAN,
        }
    };
    let v = integrate_value(outer, 0.0, t.powf(p.two_hk()), &[], &inner_spec)?;
    if !v.is_finite() {
        return Err(Error::Quadrature(QuadratureFailure {
            estimate: v,
            abs_error: f64::NAN,
            evaluations: 0,
            intervals: 0,
            reason: "inner local-time moment integral failed".into(),
        }));
    }
    Ok(2.0 * v)
}

/// Writes `order,s,value` rows; multi-indices are joined with `;`.
pub fn write_coefficient_csv<W: Write>(mut out: W, rows: &[CoefficientRow]) -> Result<()> {
    writeln!(out, "order,s,value")?;
    for row in rows {
        let order: Vec<String> = row.order.iter().map(usize::to_string).collect();
        writeln!(out, "{},{:?},{:?}", order.join(";"), row.s, row.value)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hp(h: f64, k: f64) -> HurstParams {
        HurstParams::new(h, k).unwrap()
    }

    fn tight() -> QuadSpec {
        QuadSpec::new(1e-13, 1e-12)
    }

    #[test]
    fn inner_products() {
        let p = hp(0.6, 0.8);
        assert_eq!(multiple_integral_inner(&p, 0, 0.3, 0.9).unwrap(), 1.0);
        let r = crate::covariance::covariance(&p, 0.3, 0.9).unwrap();
        assert_eq!(multiple_integral_inner(&p, 1, 0.3, 0.9).unwrap(), r);
        assert!((multiple_integral_inner(&p, 3, 1.0, 1.0).unwrap() - 6.0).abs() < 1e-13);
    }

    #[test]
    fn odd_orders_vanish_at_origin() {
        let p = hp(0.6, 0.9);
        for n in [1, 3, 5, 11] {
            assert_eq!(local_time_coeff_1d(&p, n, 0.4, 0.0).unwrap(), 0.0);
        }
        assert!(local_time_coeff_1d(&p, 0, 0.0, 0.0).is_err());
        let a = local_time_chaos_norms(&p, 1.0, 0.0, 12).unwrap();
        for n in (1..=12).step_by(2) {
            assert_eq!(a[n], 0.0);
        }
    }

    #[test]
    fn order_zero_is_the_mean() {
        let p = hp(0.6, 0.9);
        let mean = local_time_chaos_mean(&p, 1.0, 0.0, &tight()).unwrap();
        assert!((mean - 2.0 * INV_SQRT_2PI).abs() < 1e-10, "{mean}");
        let a = local_time_chaos_norms(&p, 1.0, 0.0, 0).unwrap();
        assert!((a[0] - mean * mean).abs() < 1e-12);
        let off = local_time_chaos_mean(&p, 1.3, 0.4, &tight()).unwrap();
        let direct = crate::calculus::mollified_local_time_mean(&p, 1.3, 0.4, 0.0, &tight()).unwrap();
        assert!((off - direct).abs() < 1e-10);
        let a = local_time_chaos_norms(&p, 1.3, 0.4, 0).unwrap();
        assert!((a[0] - off * off).abs() < 1e-9 * off * off);
    }

    /// `n! int int c_n(s) c_n(r) R(s, r)^n` on `[0, 1]^2` by nested adaptive quadrature in
    /// `u = s^{HK}` without the self-similar reduction.
    fn nested_norm(p: &HurstParams, n: usize, x: f64) -> f64 {
        let hk = p.hk();
        let spec = QuadSpec::new(1e-11, 1e-9).with_max_intervals(4000);
        let g = |u: f64| {
            let s = u.powf(1.0 / hk);
            (local_time_coeff_1d(p, n, s, x).unwrap(), s / (hk * u))
        };
        let outer = |v: f64| {
            if v == 0.0 {
                return 0.0;
            }
            let (cr, jr) = g(v);
            let r = v.powf(1.0 / hk);
            let inner = |u: f64| {
                if u == 0.0 {
                    return 0.0;
                }
                let (cs, js) = g(u);
                let s = u.powf(1.0 / hk);
                cs * js * covariance_unchecked(p, s, r).powi(n as i32)
            };
            integrate_value(inner, 0.0, 1.0, &[v], &spec).unwrap() * cr * jr
        };
        factorial(n) * integrate_value(outer, 0.0, 1.0, &[], &spec).unwrap()
    }

    #[test]
    fn norms_match_nested_quadrature() {
        let p = hp(0.6, 0.9);
        // 30-digit evaluations of the reduced one-dimensional integral
        let a0 = local_time_chaos_norms(&p, 1.0, 0.0, 4).unwrap();
        assert!((a0[2] - 0.111_760_488_696_654_91).abs() < 1e-12);
        assert!((a0[4] - 0.051_688_677_962_220_046).abs() < 1e-12);
        let b = nested_norm(&p, 2, 0.0);
        assert!((a0[2] - b).abs() < 1e-4 * b, "{} vs {b}", a0[2]);
        let ax = local_time_chaos_norms(&p, 1.0, 0.4, 3).unwrap();
        for n in 0..=3 {
            let b = nested_norm(&p, n, 0.4);
            assert!((ax[n] - b).abs() < 1e-4 * b.abs().max(1e-6), "n={n}: {} vs {b}", ax[n]);
        }
    }

    #[test]
    fn tensor_route_matches_origin_route() {
        for (h, k) in [(0.6, 0.9), (0.8, 0.625), (0.45, 1.0)] {
            let s = ChaosSeries::local_time(&hp(h, k), 1.2, 0.0, 16).unwrap();
            let a = s.norms_at_origin(2);
            let b = s.norms_tensor(2);
            for m in 0..=16 {
                assert!((a[m] - b[m]).abs() <= 1e-8 * a[0], "m={m}: {} vs {}", a[m], b[m]);
            }
        }
        let mp = MultiParams::from_vectors(&[0.6, 0.7], &[0.9, 0.8]).unwrap();
        let s = ChaosSeries::weighted(&mp, 1.0, &[0.0, 0.0], 1.6, 10).unwrap();
        let (a, b) = (s.norms_at_origin(2), s.norms_tensor(2));
        for m in 0..=10 {
            assert!((a[m] - b[m]).abs() <= 1e-8 * a[0], "m={m}: {} vs {}", a[m], b[m]);
        }
    }

    #[test]
    fn partial_sums_increase() {
        let p = hp(0.6, 0.9);
        let s = local_time_chaos_moment(&p, 1.0, 0.0, 20).unwrap();
        for w in s.windows(2) {
            assert!(w[1] >= w[0]);
        }
        assert!((s[0] - 4.0 * INV_SQRT_2PI * INV_SQRT_2PI).abs() < 1e-12);
    }

    #[test]
    fn multi_coefficient_routes() {
        let mp = MultiParams::from_vectors(&[0.6, 0.75], &[0.9, 0.8]).unwrap();
        let theta = 1.5;
        let series = ChaosSeries::weighted(&mp, 1.0, &[0.2, -0.3], theta, 4).unwrap();
        for n in [[0, 0], [1, 2], [3, 1]] {
            for s in [0.1, 0.5, 0.9] {
                let a = multi_local_time_coeff(&mp, &n, s, &[0.2, -0.3], theta).unwrap();
                let b = series.coefficient(&n, s).unwrap();
                assert!((a - b).abs() <= 1e-13 * a.abs().max(1e-300), "{a} vs {b}");
            }
        }
        // n = 0, x = 0: (2 pi)^{-d/2} s^{theta - d/2}
        let v = multi_local_time_coeff(&mp, &[0, 0], 0.3, &[0.0, 0.0], theta).unwrap();
        assert!((v - 0.3f64.powf(theta - 1.0) / (2.0 * std::f64::consts::PI)).abs() < 1e-14);
        assert_eq!(multi_local_time_coeff(&mp, &[1, 0], 0.3, &[0.0, 0.5], theta).unwrap(), 0.0);
        assert!(multi_local_time_coeff(&mp, &[0, 0], 0.3, &[0.0, 0.0], 1.0).is_err());
    }

    #[test]
    fn one_dim_reduction() {
        let p = hp(0.6, 0.9);
        let mp = MultiParams::from(p);
        let theta = p.hk() - 0.5;
        for (s, x) in [(0.2, 0.1), (0.7, -0.4), (1.0, 0.0), (0.05, 0.02)] {
            for n in 0..6 {
                let a = local_time_coeff_1d(&p, n, s, x).unwrap() / p.two_hk();
                let b = multi_local_time_coeff(&mp, &[n], s, &[x], theta).unwrap();
                assert!((a - b).abs() <= 1e-12 * a.abs().max(1e-12), "n={n} s={s}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn shells() {
        assert_eq!(shell_indices(2, 2), vec![vec![0, 2], vec![1, 1], vec![2, 0]]);
        assert_eq!(shell_indices(3, 4).len(), 15);
        let f = vec![vec![1.0, 2.0, 3.0, 4.0], vec![0.5, 0.25, 0.125, 0.0625], vec![1.0, -1.0, 1.0, -1.0]];
        let conv = shell_sums(&f);
        for m in 0..4 {
            let direct: f64 = shell_indices(3, m).iter().map(|n| f[0][n[0]] * f[1][n[1]] * f[2][n[2]]).sum();
            assert!((conv[m] - direct).abs() < 1e-14);
        }
    }

    #[test]
    fn beta_limits() {
        let p = hp(0.7, 0.9);
        for n in 0..=6 {
            for s in [0.2, 0.5, 1.0] {
                for x in [0.0, 0.3, -0.8] {
                    let b0 = beta_coeff(&p, n, 0.0, s, x).unwrap();
                    let sd = s.powf(p.hk());
                    let plug = gauss_kernel_unchecked(sd * sd, x) * sd.powi(-(n as i32)) * hermite(n, x / sd);
                    assert!((b0 - plug).abs() <= 1e-13 * plug.abs().max(1.0));
                    let b = beta_coeff(&p, n, 1e-9, s, x).unwrap();
                    assert!((b - b0).abs() <= 1e-6 * b0.abs().max(1.0));
                }
            }
        }
        assert_eq!(beta_coeff(&p, 1, 0.3, 0.5, 0.0).unwrap(), 0.0);
        // linear in eps near 0
        let d1 = beta_coeff(&p, 2, 1e-4, 0.5, 0.3).unwrap() - beta_coeff(&p, 2, 0.0, 0.5, 0.3).unwrap();
        let d2 = beta_coeff(&p, 2, 5e-5, 0.5, 0.3).unwrap() - beta_coeff(&p, 2, 0.0, 0.5, 0.3).unwrap();
        assert!((d1 / d2 - 2.0).abs() < 1e-3);
    }

    #[test]
    fn partial_norms() {
        let mp = MultiParams::from(hp(0.6, 0.9));
        let idx = WatanabeIndex::new(&mp, 0.0);
        let mut a = vec![0.0; 11];
        a[0] = 2.5;
        assert!(watanabe_partial_norm(&idx, &a, 10).unwrap().iter().all(|&s| s == 2.5));
        let n_max = 2000;
        let a: Vec<f64> = (0..=n_max).map(|n| (1.0 + n as f64).powi(-2)).collect();
        let s = watanabe_partial_norm(&idx, &a, n_max).unwrap();
        let gap = std::f64::consts::PI.powi(2) / 6.0 - s[n_max];
        assert!(gap > 0.0 && gap < 1.0 / (n_max as f64 + 1.0));
        let lower = watanabe_partial_norm(&WatanabeIndex::new(&mp, -0.5), &a, n_max).unwrap();
        assert!(lower.iter().zip(&s).all(|(l, u)| l <= u));
        assert!(watanabe_partial_norm(&idx, &[1.0, -1.0], 1).is_err());
        assert!((idx.threshold - (0.5 / 0.54 - 0.5)).abs() < 1e-15);
    }

    #[test]
    fn tail_fit_exact_power() {
        let a: Vec<f64> = (0..50).map(|n| if n == 0 { 1.0 } else { (n as f64).powi(-2) }).collect();
        let fit = tail_exponent_estimate(&a, FitRange::new(5, 49, 1)).unwrap();
        assert!((fit.slope + 2.0).abs() < 1e-12);
        assert!((fit.alpha_boundary - 1.0).abs() < 1e-12);
        assert!(tail_exponent_estimate(&a, FitRange::new(0, 10, 1)).is_err());
        let zeros = vec![0.0; 10];
        assert!(tail_exponent_estimate(&zeros, FitRange::new(1, 9, 1)).is_err());
    }

    #[test]
    fn exact_second_moment() {
        // scipy dblquad of the bivariate density, 1e-9 relative
        let p = hp(0.6, 0.9);
        let spec = QuadSpec::new(1e-11, 1e-9);
        let m = local_time_second_moment(&p, 1.0, 0.0, 0.0, &spec).unwrap();
        assert!((m - 1.064_968_268).abs() < 1e-6, "{m}");
        let m = local_time_second_moment(&p, 1.0, 0.0, 1e-3, &spec).unwrap();
        assert!((m - 0.948_574_409).abs() < 1e-6, "{m}");
        // Brownian, x = 0: E L_1^2 = E |N(0,1)|^2 = 1 by Levy's identity
        let m = local_time_second_moment(&HurstParams::brownian(), 1.0, 0.0, 0.0, &spec).unwrap();
        assert!((m - 1.0).abs() < 1e-6, "{m}");
    }

    #[test]
    fn chaos_sum_reaches_exact_moment() {
        let p = hp(0.6, 0.9);
        let a = local_time_chaos_norms(&p, 1.0, 0.0, 400).unwrap();
        let corrected = tail_corrected_sum(&a, FitRange::new(200, 400, 2)).unwrap();
        assert!((corrected.total - 1.064_968_268).abs() < 2e-3 * 1.065, "{corrected:?}");
        assert!(corrected.partial < 1.064_968_268);
        let bm = local_time_chaos_norms(&HurstParams::brownian(), 1.0, 0.0, 400).unwrap();
        let corrected = tail_corrected_sum(&bm, FitRange::new(200, 400, 2)).unwrap();
        assert!((corrected.total - 1.0).abs() < 2e-3, "{corrected:?}");
    }

    #[test]
    fn csv_round_trip_precision() {
        let rows = vec![CoefficientRow { order: vec![2, 0], s: 0.1, value: 1.0 / 3.0 }];
        let mut buf = Vec::new();
        write_coefficient_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let line = text.lines().nth(1).unwrap();
        let value: f64 = line.split(',').nth(2).unwrap().parse().unwrap();
        assert_eq!(value, 1.0 / 3.0);
        assert!(line.starts_with("2;0,"));
    }
}
