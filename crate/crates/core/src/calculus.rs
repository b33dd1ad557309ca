//! Quadratic variation, Itô and Tanaka formulas for one-dimensional bifBm.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::covariance::{covariance_unchecked, h_fn, power_sum_k, variogram_unchecked};
use crate::error::{Error, Result};
use crate::kernels::{gauss_kernel_unchecked, mollifier, mollifier_prime, sign, MollifierParam};
use crate::params::{HurstParams, MultiParams, Regime};
use crate::quadrature::{integrate_value, GaussianRule, QuadSpec};
use crate::simulator::{PathSource, TimeGrid};
use crate::stats::{compensated_sum, MeanEstimate};

pub type RealFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// A `C^2` function together with its first two derivatives.
#[derive(Clone)]
pub struct TestFunction {
    name: String,
    f: RealFn,
    fp: RealFn,
    fpp: RealFn,
}

impl fmt::Debug for TestFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TestFunction").field("name", &self.name).finish_non_exhaustive()
    }
}

fn fd_close(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= 1e-4 * analytic.abs().max(numeric.abs()) + 1e-7
}

impl TestFunction {
    pub fn new(
        name: impl Into<String>,
        f: impl Fn(f64) -> f64 + Send + Sync + 'static,
        fp: impl Fn(f64) -> f64 + Send + Sync + 'static,
        fpp: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self { name: name.into(), f: Arc::new(f), fp: Arc::new(fp), fpp: Arc::new(fpp) }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn f(&self, x: f64) -> f64 {
        (self.f)(x)
    }

    pub fn f_prime(&self, x: f64) -> f64 {
        (self.fp)(x)
    }

    pub fn f_second(&self, x: f64) -> f64 {
        (self.fpp)(x)
    }

    /// Compares the derivative slots with central differences at 10 points of `[-2, 2]`.
    pub fn validate(&self, seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..10 {
            let x: f64 = rng.random_range(-2.0..2.0);
            let h = 1e-4 * x.abs().max(1.0);
            let d1 = (self.f(x + h) - self.f(x - h)) / (2.0 * h);
            let d2 = (self.f_prime(x + h) - self.f_prime(x - h)) / (2.0 * h);
            if !fd_close(self.f_prime(x), d1) || !fd_close(self.f_second(x), d2) {
                return Err(Error::InvalidParams(format!(
                    "derivatives of '{}' disagree with finite differences at x = {x}",
                    self.name
                )));
            }
        }
        Ok(())
    }

    pub fn identity() -> Self {
        Self::new("x", |x| x, |_| 1.0, |_| 0.0)
    }

    pub fn square() -> Self {
        Self::new("x^2", |x| x * x, |x| 2.0 * x, |_| 2.0)
    }

    pub fn cosine() -> Self {
        Self::new("cos", f64::cos, |x| -x.sin(), |x| -x.cos())
    }

    /// `exp(-(x - c)^2 / (2 w^2))`.
    pub fn gaussian_bump(center: f64, width: f64) -> Result<Self> {
        if !(width > 0.0) {
            return Err(Error::InvalidParams(format!("bump width {width} must be positive")));
        }
        let w2 = width * width;
        let g = move |x: f64| (-(x - center).powi(2) / (2.0 * w2)).exp();
        Ok(Self::new(
            format!("bump({center},{width})"),
            g,
            move |x| -(x - center) / w2 * g(x),
            move |x| ((x - center).powi(2) / w2 - 1.0) / w2 * g(x),
        ))
    }

    /// `F_eps(z - x)`, the mollified `|z - x|`.
    pub fn mollified_abs(eps: MollifierParam, level: f64) -> Self {
        Self::new(
            format!("F_eps(.-{level}), eps={}", eps.epsilon()),
            move |z| mollifier(eps, z - level),
            move |z| mollifier_prime(eps, z - level),
            move |z| 2.0 * eps.density(z - level),
        )
    }
}

pub type FieldFn = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;
pub type FieldComponentFn = Arc<dyn Fn(f64, &[f64], usize) -> f64 + Send + Sync>;

/// A function `f(s, x)` on `[0, T] x R^d` with `d_s f`, `d_i f` and `d_i^2 f`.
#[derive(Clone)]
pub struct TimeTestFunction {
    name: String,
    dims: usize,
    f: FieldFn,
    ds: FieldFn,
    grad: FieldComponentFn,
    second: FieldComponentFn,
}

impl fmt::Debug for TimeTestFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TimeTestFunction")
            .field("name", &self.name)
            .field("dims", &self.dims)
            .finish_non_exhaustive()
    }
}

impl TimeTestFunction {
    pub fn new(
        name: impl Into<String>,
        dims: usize,
        f: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static,
        ds: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static,
        grad: impl Fn(f64, &[f64], usize) -> f64 + Send + Sync + 'static,
        second: impl Fn(f64, &[f64], usize) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            dims,
            f: Arc::new(f),
            ds: Arc::new(ds),
            grad: Arc::new(grad),
            second: Arc::new(second),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn f(&self, s: f64, x: &[f64]) -> f64 {
        (self.f)(s, x)
    }

    pub fn ds(&self, s: f64, x: &[f64]) -> f64 {
        (self.ds)(s, x)
    }

    pub fn grad(&self, s: f64, x: &[f64], i: usize) -> f64 {
        (self.grad)(s, x, i)
    }

    pub fn second(&self, s: f64, x: &[f64], i: usize) -> f64 {
        (self.second)(s, x, i)
    }

    /// Finite-difference check of every derivative slot at 10 points of `[0.1, 1] x [-2, 2]^d`.
    pub fn validate(&self, seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..10 {
            let s: f64 = rng.random_range(0.1..1.0);
            let x: Vec<f64> = (0..self.dims).map(|_| rng.random_range(-2.0..2.0)).collect();
            let h = 1e-4;
            let dsn = (self.f(s + h, &x) - self.f(s - h, &x)) / (2.0 * h);
            let mut ok = fd_close(self.ds(s, &x), dsn);
            for i in 0..self.dims {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += h;
                xm[i] -= h;
                let d1 = (self.f(s, &xp) - self.f(s, &xm)) / (2.0 * h);
                let d2 = (self.grad(s, &xp, i) - self.grad(s, &xm, i)) / (2.0 * h);
                ok &= fd_close(self.grad(s, &x, i), d1) && fd_close(self.second(s, &x, i), d2);
            }
            if !ok {
                return Err(Error::InvalidParams(format!(
                    "derivatives of '{}' disagree with finite differences at s = {s}, x = {x:?}",
                    self.name
                )));
            }
        }
        Ok(())
    }

    /// `sum_i x_i^2`.
    pub fn sum_squares(dims: usize) -> Self {
        Self::new(
            "sum x_i^2",
            dims,
            |_, x| x.iter().map(|v| v * v).sum(),
            |_, _| 0.0,
            |_, x, i| 2.0 * x[i],
            |_, _, _| 2.0,
        )
    }

    /// `f(s, x) = s`.
    pub fn time(dims: usize) -> Self {
        Self::new("s", dims, |s, _| s, |_, _| 1.0, |_, _, _| 0.0, |_, _, _| 0.0)
    }

    /// `prod_i cos(x_i)`.
    pub fn product_cos(dims: usize) -> Self {
        fn prod_except(x: &[f64], i: usize) -> f64 {
            x.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, v)| v.cos()).product()
        }
        Self::new(
            "prod cos x_i",
            dims,
            |_, x| x.iter().map(|v| v.cos()).product(),
            |_, _| 0.0,
            |_, x, i| -x[i].sin() * prod_except(x, i),
            |_, x, _| -x.iter().map(|v| v.cos()).product::<f64>(),
        )
    }

    /// `exp(-s) cos(x_1) + s x_1^2`, genuinely time dependent.
    pub fn damped_cos() -> Self {
        Self::new(
            "exp(-s) cos x + s x^2",
            1,
            |s, x| (-s).exp() * x[0].cos() + s * x[0] * x[0],
            |s, x| -(-s).exp() * x[0].cos() + x[0] * x[0],
            |s, x, _| -(-s).exp() * x[0].sin() + 2.0 * s * x[0],
            |s, x, _| -(-s).exp() * x[0].cos() + 2.0 * s,
        )
    }
}

/// Gauss–Hermite node count per dimension for expectation routes.
pub fn default_gauss_nodes(dims: usize) -> usize {
    match dims {
        1 => 64,
        2 => 40,
        3 => 20,
        _ => 10,
    }
}

/// `|E f(B_t) - f(0) - HK int_0^t E f''(B_s) s^{2HK-1} ds|` with `B_s ~ N(0, s^{2HK})`.
pub fn ito_deterministic_residual(p: &HurstParams, tf: &TestFunction, t: f64, quad: &QuadSpec) -> Result<f64> {
    p.require_ito_regime()?;
    if !(t > 0.0) {
        return Err(Error::domain(format!("horizon {t} must be positive")));
    }
    let rule = GaussianRule::new(default_gauss_nodes(1));
    let two_hk = p.two_hk();
    let lhs = rule.expect(t.powf(two_hk), |x| tf.f(x)) - tf.f(0.0);
    let trace = integrate_value(
        |s| rule.expect(s.powf(two_hk), |x| tf.f_second(x)) * s.powf(two_hk - 1.0),
        0.0,
        t,
        &[],
        quad,
    )?;
    Ok((lhs - p.hk() * trace).abs())
}

/// Time-dependent, `d`-dimensional version:
/// `|E f(t, B_t) - f(0, 0) - int_0^t E[d_s f + sum_i H_iK_i s^{2H_iK_i - 1} d_i^2 f](s, B_s) ds|`.
pub fn ito_time_dependent_residual(
    mp: &MultiParams,
    tf: &TimeTestFunction,
    t: f64,
    quad: &QuadSpec,
) -> Result<f64> {
    if tf.dims() != mp.dims() {
        return Err(Error::InvalidParams(format!(
            "test function has {} dimensions, parameters have {}",
            tf.dims(),
            mp.dims()
        )));
    }
    for p in mp.params() {
        p.require_ito_regime()?;
    }
    if !(t > 0.0) {
        return Err(Error::domain(format!("horizon {t} must be positive")));
    }
    let d = mp.dims();
    let rule = GaussianRule::new(default_gauss_nodes(d));
    let vars = |s: f64| -> Vec<f64> { mp.params().iter().map(|p| s.powf(p.two_hk())).collect() };
    let origin = vec![0.0; d];
    let lhs = rule.expect_product(&vars(t), |x| tf.f(t, x)) - tf.f(0.0, &origin);
    let integrand = |s: f64| {
        rule.expect_product(&vars(s), |x| {
            let mut v = tf.ds(s, x);
            for (i, p) in mp.params().iter().enumerate() {
                v += p.hk() * s.powf(p.two_hk() - 1.0) * tf.second(s, x, i);
            }
            v
        })
    };
    let rhs = integrate_value(integrand, 0.0, t, &[], quad)?;
    Ok((lhs - rhs).abs())
}

/// `(1/2 - 2^{-K}, 2^{-K})`: the limits of the covariance correction and of the
/// second-order Taylor term in the critical regime. They add up to `HK = 1/2`.
pub fn critical_trace_split(p: &HurstParams) -> Result<(f64, f64)> {
    if p.regime() != Regime::Critical {
        return Err(Error::UnsupportedRegime(format!("2HK = {} is not critical", p.two_hk())));
    }
    let taylor = (-p.k() * std::f64::consts::LN_2).exp();
    let correction = 0.5 - taylor;
    if ((correction + taylor) - p.hk()).abs() > 4.0 * f64::EPSILON {
        return Err(Error::InvalidParams(format!(
            "trace constants {correction} + {taylor} do not add up to HK = {}",
            p.hk()
        )));
    }
    Ok((correction, taylor))
}

/// `sum_j (x_j - x_{j-1})^2`.
pub fn quadratic_variation(path: &[f64]) -> f64 {
    compensated_sum(path.windows(2).map(|w| (w[1] - w[0]) * (w[1] - w[0])))
}

fn check_uniform(t: f64, n: usize) -> Result<()> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::domain(format!("horizon {t} must be positive")));
    }
    if n == 0 {
        return Err(Error::domain("n must be at least 1"));
    }
    Ok(())
}

/// `E V_t^n = sum_j E(B_{t_j} - B_{t_{j-1}})^2` on the uniform grid `t_j = jt/n`.
pub fn expected_qv(p: &HurstParams, t: f64, n: usize) -> Result<f64> {
    check_uniform(t, n)?;
    let grid = TimeGrid::uniform(t, n)?;
    Ok(expected_qv_on_grid(p, &grid))
}

/// `sum_j E(B_{t_j} - B_{t_{j-1}})^2` on an arbitrary grid.
pub fn expected_qv_on_grid(p: &HurstParams, grid: &TimeGrid) -> f64 {
    compensated_sum(grid.times().windows(2).map(|w| variogram_unchecked(p, w[1], w[0])))
}

/// `(t/n)^{2HK} (sum_{j=1}^n h(j) + n 2^{1-K})`, which in the critical regime reads
/// `(t/n) sum_j h(j) + t 2^{1-K}`.
pub fn expected_qv_h_sum(p: &HurstParams, t: f64, n: usize) -> Result<f64> {
    check_uniform(t, n)?;
    let hs = (1..=n).map(|j| h_fn(p, j as f64)).collect::<Result<Vec<_>>>()?;
    let sum_h = compensated_sum(hs);
    let step = (t / n as f64).powf(p.two_hk());
    let two = ((1.0 - p.k()) * std::f64::consts::LN_2).exp();
    Ok(step * (sum_h + n as f64 * two))
}

/// `t 2^{1-K}`, the limit of `V_t^n` when `2HK = 1`.
pub fn qv_limit(p: &HurstParams, t: f64) -> Result<f64> {
    if p.regime() != Regime::Critical {
        return Err(Error::UnsupportedRegime(format!(
            "quadratic variation has a finite nonzero limit only for 2HK = 1, got {}",
            p.two_hk()
        )));
    }
    Ok(t * ((1.0 - p.k()) * std::f64::consts::LN_2).exp())
}

/// `E[(B_{t_i} - B_{t_{i-1}})(B_{t_j} - B_{t_{j-1}})]` on `t_j = jt/n`, closed form in `(i, j)`.
pub fn increment_cov_theta(p: &HurstParams, t: f64, n: usize, i: usize, j: usize) -> Result<f64> {
    check_uniform(t, n)?;
    if i == 0 || j == 0 || i > n || j > n {
        return Err(Error::IndexOutOfRange(format!("(i, j) = ({i}, {j}) outside 1..={n}")));
    }
    Ok(theta_unchecked(p, t, n, i, j))
}

fn theta_unchecked(p: &HurstParams, t: f64, n: usize, i: usize, j: usize) -> f64 {
    let two_hk = p.two_hk();
    let (fi, fj) = (i as f64, j as f64);
    let ps = |a: f64, b: f64| power_sum_k(p, a, b);
    let lag = |d: f64| d.abs().powf(two_hk);
    let smooth = ps(fi, fj) - ps(fi, fj - 1.0) - ps(fi - 1.0, fj) + ps(fi - 1.0, fj - 1.0);
    let diff = fj - fi;
    let rough = -2.0 * lag(diff) + lag(diff - 1.0) + lag(diff + 1.0);
    let scale = (-p.k() * std::f64::consts::LN_2).exp() * (t / n as f64).powf(two_hk);
    scale * (smooth + rough)
}

/// Same quantity from four covariance evaluations.
pub fn increment_cov_telescoping(p: &HurstParams, t: f64, n: usize, i: usize, j: usize) -> Result<f64> {
    check_uniform(t, n)?;
    if i == 0 || j == 0 || i > n || j > n {
        return Err(Error::IndexOutOfRange(format!("(i, j) = ({i}, {j}) outside 1..={n}")));
    }
    let tj = |k: usize| if k == n { t } else { k as f64 * t / n as f64 };
    let r = |a: usize, b: usize| covariance_unchecked(p, tj(a), tj(b));
    Ok(r(i, j) - r(i, j - 1) - r(i - 1, j) + r(i - 1, j - 1))
}

/// `E (V_t^n)^2 = sum_{i,j} (2 theta_n(i,j)^2 + theta_n(i,i) theta_n(j,j))`.
pub fn expected_qv_second_moment(p: &HurstParams, t: f64, n: usize) -> Result<f64> {
    check_uniform(t, n)?;
    let diag: Vec<f64> = (1..=n).map(|i| theta_unchecked(p, t, n, i, i)).collect();
    let mean = compensated_sum(diag.iter().copied());
    let mut off = crate::stats::CompensatedSum::new();
    for i in 1..=n {
        off.add(theta_unchecked(p, t, n, i, i).powi(2));
        for j in (i + 1)..=n {
            off.add(2.0 * theta_unchecked(p, t, n, i, j).powi(2));
        }
    }
    Ok(2.0 * off.value() + mean * mean)
}

/// `E (V_t^n - t 2^{1-K})^2`, exact, critical regime.
pub fn qv_l2_error_exact(p: &HurstParams, t: f64, n: usize) -> Result<f64> {
    let limit = qv_limit(p, t)?;
    let m1 = expected_qv(p, t, n)?;
    let m2 = expected_qv_second_moment(p, t, n)?;
    Ok(m2 - 2.0 * limit * m1 + limit * limit)
}

/// One resolution of a quadratic-variation study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QvLevel {
    pub n: usize,
    pub mean: MeanEstimate,
    pub expected: f64,
    /// Monte-Carlo `E (V^n - limit)^2`; `None` outside the critical regime.
    pub l2_error: Option<MeanEstimate>,
}

/// Quadratic variation of the same paths observed at several resolutions.
///
/// Every `n` in `levels` must divide the number of grid steps of a uniform grid.
pub fn qv_study<S: PathSource>(source: &S, levels: &[usize]) -> Result<Vec<QvLevel>> {
    let grid = source.grid();
    let p = source.params().component(0);
    let steps = grid.steps();
    let t = grid.horizon();
    let strides = strides_for(steps, levels)?;
    let limit = qv_limit(&p, t).ok();
    let per_path: Vec<Vec<f64>> = source.map_paths(|_, paths| {
        strides
            .iter()
            .map(|&stride| {
                let sub: Vec<f64> = paths[0].iter().step_by(stride).copied().collect();
                quadratic_variation(&sub)
            })
            .collect()
    });
    levels
        .iter()
        .enumerate()
        .map(|(k, &n)| {
            let vs: Vec<f64> = per_path.iter().map(|v| v[k]).collect();
            let l2_error = limit.map(|l| {
                let sq: Vec<f64> = vs.iter().map(|v| (v - l).powi(2)).collect();
                MeanEstimate::from_samples(&sq)
            });
            let expected = expected_qv_on_grid(&p, &grid.subsample(steps / n)?);
            Ok(QvLevel { n, mean: MeanEstimate::from_samples(&vs), expected, l2_error })
        })
        .collect()
}

fn strides_for(steps: usize, levels: &[usize]) -> Result<Vec<usize>> {
    levels
        .iter()
        .map(|&n| {
            if n == 0 || steps % n != 0 {
                Err(Error::domain(format!("level n = {n} does not divide the {steps} grid steps")))
            } else {
                Ok(steps / n)
            }
        })
        .collect()
}

/// Weights `w_j` with `sum_j w_j g(t_j) = int_0^T g_lin(s) s^alpha ds`, where `g_lin` is
/// the piecewise-linear interpolant of `g`; requires `alpha > -1`.
pub fn weighted_trapezoid_weights(times: &[f64], alpha: f64) -> Vec<f64> {
    let mut w = vec![0.0; times.len()];
    let m0 = |a: f64, b: f64| (b.powf(alpha + 1.0) - a.powf(alpha + 1.0)) / (alpha + 1.0);
    let m1 = |a: f64, b: f64| (b.powf(alpha + 2.0) - a.powf(alpha + 2.0)) / (alpha + 2.0);
    for j in 1..times.len() {
        let (a, b) = (times[j - 1], times[j]);
        let (z0, z1) = (m0(a, b), m1(a, b));
        let width = b - a;
        w[j - 1] += (b * z0 - z1) / width;
        w[j] += (z1 - a * z0) / width;
    }
    w
}

/// Grid-dependent constants shared by the per-path Itô estimators.
#[derive(Debug, Clone)]
struct ItoGridData {
    /// `R(t_{j-1}, t_j) - R(t_{j-1}, t_{j-1})`, indexed by `j - 1`.
    corrections: Vec<f64>,
    /// `HK` times the trapezoid weights for `s^{2HK-1}`.
    trace_weights: Vec<f64>,
}

impl ItoGridData {
    fn new(p: &HurstParams, times: &[f64]) -> Self {
        let corrections = times
            .windows(2)
            .map(|w| covariance_unchecked(p, w[0], w[1]) - covariance_unchecked(p, w[0], w[0]))
            .collect();
        let trace_weights =
            weighted_trapezoid_weights(times, p.two_hk() - 1.0).into_iter().map(|w| p.hk() * w).collect();
        Self { corrections, trace_weights }
    }

    fn skorohod(&self, path: &[f64], tf: &TestFunction) -> f64 {
        compensated_sum(path.windows(2).zip(&self.corrections).map(|(w, c)| {
            tf.f_prime(w[0]) * (w[1] - w[0]) - tf.f_second(w[0]) * c
        }))
    }

    fn trace(&self, path: &[f64], tf: &TestFunction) -> f64 {
        compensated_sum(path.iter().zip(&self.trace_weights).map(|(x, w)| w * tf.f_second(*x)))
    }

    fn residual(&self, path: &[f64], tf: &TestFunction) -> f64 {
        let end = *path.last().unwrap();
        tf.f(end) - tf.f(0.0) - self.skorohod(path, tf) - self.trace(path, tf)
    }
}

/// Forward sum minus covariance correction, per path of dimension 0:
/// `sum_j f'(B_{t_{j-1}}) dB_j - sum_j f''(B_{t_{j-1}}) (R(t_{j-1}, t_j) - R(t_{j-1}, t_{j-1}))`.
pub fn skorohod_estimate<S: PathSource>(source: &S, tf: &TestFunction) -> Result<Vec<f64>> {
    let p = source.params().component(0);
    p.require_ito_regime()?;
    let data = ItoGridData::new(&p, source.grid().times());
    Ok(source.map_paths(|_, paths| data.skorohod(paths[0], tf)))
}

/// Monte-Carlo `E |f(B_t) - f(0) - I - T|^2`, with `I` the Skorohod estimate and `T` the
/// weighted trapezoid of `HK f''(B_s) s^{2HK-1}`.
pub fn ito_pathwise_residual<S: PathSource>(source: &S, tf: &TestFunction) -> Result<MeanEstimate> {
    let p = source.params().component(0);
    p.require_ito_regime()?;
    let data = ItoGridData::new(&p, source.grid().times());
    let sq = source.map_paths(|_, paths| data.residual(paths[0], tf).powi(2));
    Ok(MeanEstimate::from_samples(&sq))
}

/// [`ito_pathwise_residual`] at several resolutions of the same paths.
pub fn ito_residual_study<S: PathSource>(source: &S, tf: &TestFunction, levels: &[usize]) -> Result<Vec<(usize, MeanEstimate)>> {
    let p = source.params().component(0);
    p.require_ito_regime()?;
    let grid = source.grid();
    let strides = strides_for(grid.steps(), levels)?;
    let data: Vec<ItoGridData> = strides
        .iter()
        .map(|&s| grid.subsample(s).map(|g| ItoGridData::new(&p, g.times())))
        .collect::<Result<_>>()?;
    let per_path: Vec<Vec<f64>> = source.map_paths(|_, paths| {
        strides
            .iter()
            .zip(&data)
            .map(|(&stride, d)| {
                let sub: Vec<f64> = paths[0].iter().step_by(stride).copied().collect();
                d.residual(&sub, tf).powi(2)
            })
            .collect()
    });
    Ok(levels
        .iter()
        .enumerate()
        .map(|(k, &n)| {
            let v: Vec<f64> = per_path.iter().map(|r| r[k]).collect();
            (n, MeanEstimate::from_samples(&v))
        })
        .collect())
}

/// Mollified weighted local time at level `x`, one value per path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalTimeEstimate {
    pub x: f64,
    pub t: f64,
    pub epsilon: f64,
    pub values: Vec<f64>,
    pub mean: MeanEstimate,
}

/// `2HK int_0^t p_eps(B_s - x) s^{2HK-1} ds` by the weighted trapezoid rule.
pub fn weighted_local_time<S: PathSource>(source: &S, x: f64, eps: MollifierParam) -> Result<LocalTimeEstimate> {
    let p = source.params().component(0);
    p.require_ito_regime()?;
    let grid = source.grid();
    let w: Vec<f64> =
        weighted_trapezoid_weights(grid.times(), p.two_hk() - 1.0).into_iter().map(|w| p.two_hk() * w).collect();
    let values = source.map_paths(|_, paths| {
        compensated_sum(paths[0].iter().zip(&w).map(|(b, w)| w * eps.density(b - x)))
    });
    let mean = MeanEstimate::from_samples(&values);
    Ok(LocalTimeEstimate { x, t: grid.horizon(), epsilon: eps.epsilon(), values, mean })
}

/// `E` of the mollified local time, `int_0^{t^{2HK}} p_{u + eps}(x) du`.
pub fn mollified_local_time_mean(p: &HurstParams, t: f64, x: f64, eps: f64, quad: &QuadSpec) -> Result<f64> {
    if !(eps >= 0.0) {
        return Err(Error::domain(format!("epsilon {eps} must be nonnegative")));
    }
    let top = t.powf(p.two_hk());
    integrate_value(
        |u| if u + eps == 0.0 { 0.0 } else { gauss_kernel_unchecked(u + eps, x) },
        0.0,
        top,
        &[],
        quad,
    )
}

/// Uniform level grid for `x`-integrals of the mollified local time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelGrid {
    /// Spacing in units of `sqrt(eps)`.
    pub spacing: f64,
    /// Margin beyond the path range in units of `sqrt(eps)`.
    pub margin: f64,
}

impl Default for LevelGrid {
    fn default() -> Self {
        Self { spacing: 0.5, margin: 12.0 }
    }
}

/// Outcome of [`occupation_identity_check`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupationCheck {
    /// `int g(x) L^x dx` per path.
    pub level_side: Vec<f64>,
    /// `2HK int_0^t g(B_s) s^{2HK-1} ds` per path.
    pub time_side: Vec<f64>,
    pub max_abs_error: f64,
    /// `|sum level_side - sum time_side| / |sum time_side|`.
    pub aggregate_relative_error: f64,
}

/// Compares both sides of the occupation-density identity path by path.
pub fn occupation_identity_check<S, G>(source: &S, g: G, eps: MollifierParam, levels: LevelGrid) -> Result<OccupationCheck>
where
    S: PathSource,
    G: Fn(f64) -> f64 + Sync,
{
    let p = source.params().component(0);
    p.require_ito_regime()?;
    if !(levels.spacing > 0.0 && levels.margin > 0.0) {
        return Err(Error::InvalidParams("level grid spacing and margin must be positive".into()));
    }
    let grid = source.grid();
    let w: Vec<f64> =
        weighted_trapezoid_weights(grid.times(), p.two_hk() - 1.0).into_iter().map(|w| p.two_hk() * w).collect();
    let root = eps.epsilon().sqrt();
    let pairs = source.map_paths(|_, paths| {
        let path = paths[0];
        let time_side = compensated_sum(path.iter().zip(&w).map(|(b, w)| w * g(*b)));
        let lo = path.iter().copied().fold(f64::INFINITY, f64::min) - levels.margin * root;
        let hi = path.iter().copied().fold(f64::NEG_INFINITY, f64::max) + levels.margin * root;
        let h = levels.spacing * root;
        let count = ((hi - lo) / h).ceil() as usize;
        let level_side = compensated_sum((0..=count).map(|l| {
            let x = lo + l as f64 * h;
            let gx = g(x);
            if gx == 0.0 {
                0.0
            } else {
                h * gx * path.iter().zip(&w).map(|(b, w)| w * eps.density(b - x)).sum::<f64>()
            }
        }));
        (level_side, time_side)
    });
    let (level_side, time_side): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    let max_abs_error = level_side.iter().zip(&time_side).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let sl = compensated_sum(level_side.iter().copied());
    let st = compensated_sum(time_side.iter().copied());
    Ok(OccupationCheck { level_side, time_side, max_abs_error, aggregate_relative_error: (sl - st).abs() / st.abs() })
}

/// Per-path terms of the mollified Tanaka identity
/// `F_eps(B_t - x) - F_eps(-x) = I_eps + L_eps`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TanakaTerms {
    pub x: f64,
    pub epsilon: f64,
    pub n: usize,
    pub increment: Vec<f64>,
    pub skorohod: Vec<f64>,
    pub local_time: Vec<f64>,
    /// `E |increment - skorohod - local_time|^2`.
    pub residual: MeanEstimate,
}

/// Terms of the mollified Tanaka identity on the source grid.
pub fn tanaka_residual<S: PathSource>(source: &S, x: f64, eps: MollifierParam) -> Result<TanakaTerms> {
    let p = source.params().component(0);
    p.require_ito_regime()?;
    let tf = TestFunction::mollified_abs(eps, x);
    let data = ItoGridData::new(&p, source.grid().times());
    let rows = source.map_paths(|_, paths| {
        let path = paths[0];
        let inc = tf.f(*path.last().unwrap()) - tf.f(0.0);
        (inc, data.skorohod(path, &tf), data.trace(path, &tf))
    });
    let residuals: Vec<f64> = rows.iter().map(|(a, b, c)| (a - b - c).powi(2)).collect();
    Ok(TanakaTerms {
        x,
        epsilon: eps.epsilon(),
        n: source.grid().steps(),
        increment: rows.iter().map(|r| r.0).collect(),
        skorohod: rows.iter().map(|r| r.1).collect(),
        local_time: rows.iter().map(|r| r.2).collect(),
        residual: MeanEstimate::from_samples(&residuals),
    })
}

/// Mean-square change of each Tanaka term between two consecutive `eps`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CauchyStep {
    pub increment: MeanEstimate,
    pub skorohod: MeanEstimate,
    pub local_time: MeanEstimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TanakaSweepRow {
    pub epsilon: f64,
    pub residual: MeanEstimate,
    pub increment: MeanEstimate,
    pub skorohod: MeanEstimate,
    pub local_time: MeanEstimate,
    /// `E | |B_t - x| - |x| - (F_eps(B_t - x) - F_eps(-x)) |^2`.
    pub increment_gap: MeanEstimate,
    pub cauchy: Option<CauchyStep>,
}

/// The mollified Tanaka identity for a decreasing list of `eps` on the same paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TanakaSweep {
    pub x: f64,
    pub n: usize,
    pub rows: Vec<TanakaSweepRow>,
    /// Mean of the unmollified forward sum `sum_j sign(B_{t_{j-1}} - x) dB_j`.
    pub sign_forward_sum: MeanEstimate,
}

pub fn tanaka_eps_sweep<S: PathSource>(source: &S, x: f64, eps_list: &[f64]) -> Result<TanakaSweep> {
    let eps: Vec<MollifierParam> = eps_list.iter().map(|&e| MollifierParam::new(e)).collect::<Result<_>>()?;
    let terms: Vec<TanakaTerms> = eps.iter().map(|&e| tanaka_residual(source, x, e)).collect::<Result<_>>()?;
    let abs_inc: Vec<f64> = source.map_paths(|_, paths| (paths[0].last().unwrap() - x).abs() - x.abs());
    let sign_sum: Vec<f64> = source.map_paths(|_, paths| {
        compensated_sum(paths[0].windows(2).map(|w| sign(w[0] - x) * (w[1] - w[0])))
    });
    let ms = |v: &[f64]| MeanEstimate::from_samples(v);
    let sq_diff = |a: &[f64], b: &[f64]| -> MeanEstimate {
        ms(&a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).collect::<Vec<_>>())
    };
    let rows = terms
        .iter()
        .enumerate()
        .map(|(k, tt)| TanakaSweepRow {
            epsilon: tt.epsilon,
            residual: tt.residual,
            increment: ms(&tt.increment),
            skorohod: ms(&tt.skorohod),
            local_time: ms(&tt.local_time),
            increment_gap: sq_diff(&abs_inc, &tt.increment),
            cauchy: (k > 0).then(|| {
                let prev = &terms[k - 1];
                CauchyStep {
                    increment: sq_diff(&prev.increment, &tt.increment),
                    skorohod: sq_diff(&prev.skorohod, &tt.skorohod),
                    local_time: sq_diff(&prev.local_time, &tt.local_time),
                }
            }),
        })
        .collect();
    Ok(TanakaSweep { x, n: source.grid().steps(), rows, sign_forward_sum: ms(&sign_sum) })
}

/// Joint schedule `eps >= c n^{-kappa}` for Tanaka studies; `kappa` defaults to `HK`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsSchedule {
    pub c: f64,
    pub kappa: Option<f64>,
}

impl Default for EpsSchedule {
    fn default() -> Self {
        Self { c: 0.01, kappa: None }
    }
}

impl EpsSchedule {
    pub fn floor(&self, p: &HurstParams, n: usize) -> f64 {
        let kappa = self.kappa.unwrap_or_else(|| p.hk());
        self.c * (n as f64).powf(-kappa)
    }

    pub fn check(&self, p: &HurstParams, n: usize, eps: f64) -> Result<()> {
        let floor = self.floor(p, n);
        if eps < floor {
            return Err(Error::InvalidParams(format!(
                "epsilon {eps} is below the schedule floor {floor:e} for n = {n}"
            )));
        }
        Ok(())
    }
}
