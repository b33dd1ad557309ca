//! Closed-form covariance of bifBm and the quantities derived from it.
//!
//! `R(t, s) = 2^{-K} ((t^{2H} + s^{2H})^K - |t - s|^{2HK})`.

use crate::error::{Error, Result};
use crate::params::HurstParams;
use crate::quadrature::{integrate_value, QuadSpec};

fn check_time(t: f64, name: &str) -> Result<()> {
    if !(t >= 0.0) || !t.is_finite() {
        return Err(Error::domain(format!("{name} = {t} must be a finite nonnegative time")));
    }
    Ok(())
}

/// `(t^{2H} + s^{2H})^K`, evaluated in the log domain.
pub(crate) fn power_sum_k(p: &HurstParams, t: f64, s: f64) -> f64 {
    let (hi, lo) = if t >= s { (t, s) } else { (s, t) };
    if hi == 0.0 {
        return 0.0;
    }
    let ratio = (lo / hi).powf(2.0 * p.h());
    (p.two_hk() * hi.ln() + p.k() * ratio.ln_1p()).exp()
}

/// `1 + r^{2HK} - 2^{1-K} (1 + r^{2H})^K` for `r` in `[0, 1]`, without the
/// cancellation of the naive form as `r -> 1`.
pub(crate) fn helix_bracket(p: &HurstParams, r: f64) -> f64 {
    let k = p.k();
    // a = r^{2H} = 1 - delta
    let delta = -(2.0 * p.h() * r.ln()).exp_m1();
    let u = k * (-delta).ln_1p();
    let v = k * (-0.5 * delta).ln_1p();
    u.exp_m1() - 2.0 * v.exp_m1()
}

/// Covariance `R(t, s)` of bifBm.
pub fn covariance(p: &HurstParams, t: f64, s: f64) -> Result<f64> {
    check_time(t, "t")?;
    check_time(s, "s")?;
    Ok(covariance_unchecked(p, t, s))
}

pub(crate) fn covariance_unchecked(p: &HurstParams, t: f64, s: f64) -> f64 {
    if t == 0.0 || s == 0.0 {
        return 0.0;
    }
    if t == s {
        return t.powf(p.two_hk());
    }
    let scale = (-p.k() * std::f64::consts::LN_2).exp();
    scale * (power_sum_k(p, t, s) - (t - s).abs().powf(p.two_hk()))
}

/// `E (B_t - B_s)^2`.
pub fn variogram(p: &HurstParams, t: f64, s: f64) -> Result<f64> {
    check_time(t, "t")?;
    check_time(s, "s")?;
    Ok(variogram_unchecked(p, t, s))
}

pub(crate) fn variogram_unchecked(p: &HurstParams, t: f64, s: f64) -> f64 {
    if t == s {
        return 0.0;
    }
    let (hi, lo) = if t >= s { (t, s) } else { (s, t) };
    let two_hk = p.two_hk();
    let two_pow = (1.0 - p.k()) * std::f64::consts::LN_2;
    let diagonal_part = hi.powf(two_hk) * helix_bracket(p, lo / hi);
    let increment_part = two_pow.exp() * (hi - lo).powf(two_hk);
    (diagonal_part + increment_part).max(0.0)
}

/// Quasi-helix envelope `2^{-K} |t-s|^{2HK} <= E(B_t - B_s)^2 <= 2^{1-K} |t-s|^{2HK}`.
pub fn quasi_helix_bounds(p: &HurstParams, t: f64, s: f64) -> Result<(f64, f64)> {
    check_time(t, "t")?;
    check_time(s, "s")?;
    let base = (t - s).abs().powf(p.two_hk());
    let lower = (-p.k() * std::f64::consts::LN_2).exp() * base;
    Ok((lower, 2.0 * lower))
}

/// Mixed partial derivative `d^2 R / dt ds` off the diagonal.
pub fn mixed_partial(p: &HurstParams, t: f64, s: f64) -> Result<f64> {
    if !(t > 0.0 && s > 0.0) {
        return Err(Error::domain(format!(
            "mixed partial needs strictly positive times, got ({t}, {s})"
        )));
    }
    if t == s {
        return Err(Error::Singular(format!("the diagonal t = s = {t}")));
    }
    Ok(mixed_partial_unchecked(p, t, s))
}

fn mixed_partial_unchecked(p: &HurstParams, t: f64, s: f64) -> f64 {
    let (h, k) = (p.h(), p.k());
    let two_hk = p.two_hk();
    let scale = (-k * std::f64::consts::LN_2).exp();
    let smooth = if k == 1.0 {
        0.0
    } else {
        // (ts)^{2H-1} (t^{2H} + s^{2H})^{K-2}, in logs
        let sum = t.powf(2.0 * h) + s.powf(2.0 * h);
        4.0 * h * h * k * (k - 1.0) * ((2.0 * h - 1.0) * (t * s).ln() + (k - 2.0) * sum.ln()).exp()
    };
    let singular = two_hk * (two_hk - 1.0) * (t - s).abs().powf(two_hk - 2.0);
    scale * (smooth + singular)
}

/// `h(y) = y^{2HK} + (y-1)^{2HK} - 2^{1-K} (y^{2H} + (y-1)^{2H})^K` on `y >= 1`.
pub fn h_fn(p: &HurstParams, y: f64) -> Result<f64> {
    if !(y >= 1.0) || !y.is_finite() {
        return Err(Error::domain(format!("h is defined on [1, inf), got y = {y}")));
    }
    Ok(y.powf(p.two_hk()) * helix_bracket(p, (y - 1.0) / y))
}

/// `y * h(y)`; tends to `(1 - 2H)/4` when `2HK = 1`.
pub fn scaled_h(p: &HurstParams, y: f64) -> Result<f64> {
    Ok(y * h_fn(p, y)?)
}

/// A real function on `[0, horizon]` with optional jump locations.
pub struct TimeFunction<'a> {
    pub horizon: f64,
    pub eval: &'a dyn Fn(f64) -> f64,
    pub breakpoints: Vec<f64>,
}

impl<'a> TimeFunction<'a> {
    pub fn new(horizon: f64, eval: &'a dyn Fn(f64) -> f64) -> Self {
        Self { horizon, eval, breakpoints: Vec::new() }
    }

    pub fn with_breakpoints(mut self, bps: &[f64]) -> Self {
        self.breakpoints = bps.to_vec();
        self
    }
}

/// Double integral of `f(u) f(v) d^2R/dudv` over `[0, T]^2`, in both the
/// signed form and with `|f|` in place of `f`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HNorm {
    pub signed: f64,
    pub absolute: f64,
}

/// `|H|`-type norm of `f`, requires `2HK > 1`.
///
/// The kernel splits into `|u - v|^{2HK-2}` and a term homogeneous in
/// `(u^{2H}, v^{2H})`. The first is integrated with `u - v = w^{1/(2HK-1)}`,
/// the second in the variables `z = u^{2H}`, which leaves bounded integrands
/// apart from the integrable corner singularity at the origin.
pub fn abs_h_norm(f: &TimeFunction<'_>, p: &HurstParams, quad: &QuadSpec) -> Result<HNorm> {
    if p.two_hk() <= 1.0 {
        return Err(Error::UnsupportedRegime(format!(
            "|H| norm needs 2HK > 1, got {}",
            p.two_hk()
        )));
    }
    if !(f.horizon > 0.0) {
        return Err(Error::domain("horizon must be positive"));
    }
    let abs_f = |x: f64| (f.eval)(x).abs();
    let signed = h_norm_with(&|x| (f.eval)(x), f, p, quad)?;
    let absolute = h_norm_with(&abs_f, f, p, quad)?;
    Ok(HNorm { signed, absolute })
}

fn h_norm_with(g: &dyn Fn(f64) -> f64, f: &TimeFunction<'_>, p: &HurstParams, quad: &QuadSpec) -> Result<f64> {
    let (h, k) = (p.h(), p.k());
    let two_hk = p.two_hk();
    let beta = two_hk - 1.0;
    let horizon = f.horizon;
    let scale = (-k * std::f64::consts::LN_2).exp();
    let bps = &f.breakpoints;
    let inner_spec = QuadSpec { abs_tol: quad.abs_tol * 1e-2, rel_tol: quad.rel_tol * 1e-2, ..*quad };

    // Diagonal term: 2 * 2^{-K} 2HK int_0^T g(u) int_0^{u^beta} g(u - w^{1/beta}) dw du.
    let mut inner_err = None;
    let diag_inner = |u: f64| -> f64 {
        let gu = g(u);
        if gu == 0.0 || u == 0.0 {
            return 0.0;
        }
        let top = u.powf(beta);
        let cuts: Vec<f64> = bps.iter().filter(|&&b| b < u).map(|&b| (u - b).powf(beta)).collect();
        match integrate_value(|w| g(u - w.powf(1.0 / beta)), 0.0, top, &cuts, &inner_spec) {
            Ok(v) => gu * v,
            Err(e) => {
                inner_err.get_or_insert(e);
                f64::NAN
            }
        }
    };
    let diag = {
        let mut diag_inner = diag_inner;
        integrate_value(&mut diag_inner, 0.0, horizon, bps, quad)
    };
    if let Some(e) = inner_err {
        return Err(e);
    }
    let diag = 2.0 * scale * two_hk * diag?;

    if k == 1.0 {
        return Ok(diag);
    }

    // Smooth term in z = u^{2H}: 2^{-K} K(K-1) int int g g (z1 + z2)^{K-2} dz1 dz2,
    // with the outer variable z1 = y^{1/K} to absorb z1^{K-1}.
    let ztop = horizon.powf(2.0 * h);
    let zcuts: Vec<f64> = bps.iter().map(|&b| b.powf(2.0 * h)).collect();
    let ycuts: Vec<f64> = zcuts.iter().map(|&z| z.powf(k)).collect();
    let to_time = |z: f64| z.powf(1.0 / (2.0 * h));
    let mut inner_err = None;
    let outer = |y: f64| -> f64 {
        if y == 0.0 {
            return 0.0;
        }
        let z1 = y.powf(1.0 / k);
        let g1 = g(to_time(z1));
        if g1 == 0.0 {
            return 0.0;
        }
        // dz1 = (1/K) z1^{1-K} dy
        let jac = z1.powf(1.0 - k) / k;
        match integrate_value(|z2| g(to_time(z2)) * (z1 + z2).powf(k - 2.0), 0.0, ztop, &zcuts, &inner_spec) {
            Ok(v) => g1 * v * jac,
            Err(e) => {
                inner_err.get_or_insert(e);
                f64::NAN
            }
        }
    };
    let smooth = {
        let mut outer = outer;
        integrate_value(&mut outer, 0.0, ztop.powf(k), &ycuts, quad)
    };
    if let Some(e) = inner_err {
        return Err(e);
    }
    let smooth = scale * k * (k - 1.0) * smooth?;
    Ok(diag + smooth)
}
