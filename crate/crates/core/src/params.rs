//! Exponent pairs `(H, K)` that govern every kernel in the crate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Position of `2HK` relative to one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Subcritical,
    Critical,
    Supercritical,
}

/// Distance of `2HK` from one still classified as critical.
pub const CRITICAL_TOLERANCE: f64 = 4.0 * f64::EPSILON;

/// Parameters of a one-dimensional bifractional Brownian motion.
///
/// `0 < h < 1` and `0 < k <= 1`. `k = 1` is fractional Brownian motion and
/// `(h, k) = (1/2, 1)` is standard Brownian motion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawHurst", into = "RawHurst")]
pub struct HurstParams {
    h: f64,
    k: f64,
}

#[derive(Serialize, Deserialize)]
struct RawHurst {
    h: f64,
    k: f64,
}

impl TryFrom<RawHurst> for HurstParams {
    type Error = Error;

    fn try_from(raw: RawHurst) -> Result<Self> {
        HurstParams::new(raw.h, raw.k)
    }
}

impl From<HurstParams> for RawHurst {
    fn from(p: HurstParams) -> Self {
        RawHurst { h: p.h, k: p.k }
    }
}

impl HurstParams {
    pub fn new(h: f64, k: f64) -> Result<Self> {
        if !(h > 0.0 && h < 1.0) {
            return Err(Error::InvalidParams(format!("H = {h} must lie in (0, 1)")));
        }
        if !(k > 0.0 && k <= 1.0) {
            return Err(Error::InvalidParams(format!("K = {k} must lie in (0, 1]")));
        }
        Ok(Self { h, k })
    }

    /// Standard Brownian motion.
    pub fn brownian() -> Self {
        Self { h: 0.5, k: 1.0 }
    }

    /// A critical pair `2HK = 1` for the given `h >= 1/2`.
    ///
    /// `k` is nudged by at most a few ulps so that `2 * h * k` is as close to 1
    /// as the stored values allow.
    pub fn critical(h: f64) -> Result<Self> {
        if !(0.5..1.0).contains(&h) {
            return Err(Error::InvalidParams(format!(
                "critical pair needs H in [1/2, 1), got {h}"
            )));
        }
        let mut k = 0.5 / h;
        for _ in 0..8 {
            let prod = 2.0 * h * k;
            if prod == 1.0 {
                break;
            }
            k = if prod > 1.0 { next_down(k) } else { next_up(k) };
        }
        let p = Self::new(h, k.min(1.0))?;
        if p.regime() != Regime::Critical {
            return Err(Error::InvalidParams(format!(
                "no exactly critical K found for H = {h}"
            )));
        }
        Ok(p)
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn k(&self) -> f64 {
        self.k
    }

    pub fn hk(&self) -> f64 {
        self.h * self.k
    }

    pub fn two_hk(&self) -> f64 {
        2.0 * self.h * self.k
    }

    /// Products within [`CRITICAL_TOLERANCE`] of 1 count as critical, since some `H`
    /// admit no float `K` with `2HK == 1` exactly.
    pub fn regime(&self) -> Regime {
        let x = self.two_hk();
        if (x - 1.0).abs() <= CRITICAL_TOLERANCE {
            Regime::Critical
        } else if x > 1.0 {
            Regime::Supercritical
        } else {
            Regime::Subcritical
        }
    }

    /// Fails with [`Error::UnsupportedRegime`] unless `2HK >= 1`.
    pub fn require_ito_regime(&self) -> Result<()> {
        if self.regime() == Regime::Subcritical {
            return Err(Error::UnsupportedRegime(format!(
                "2HK = {} < 1 (H = {}, K = {})",
                self.two_hk(),
                self.h,
                self.k
            )));
        }
        Ok(())
    }
}

fn next_up(x: f64) -> f64 {
    f64::from_bits(x.to_bits() + 1)
}

fn next_down(x: f64) -> f64 {
    f64::from_bits(x.to_bits() - 1)
}

/// Parameters of a `d`-dimensional bifBm with independent components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<HurstParams>", into = "Vec<HurstParams>")]
pub struct MultiParams {
    params: Vec<HurstParams>,
}

impl TryFrom<Vec<HurstParams>> for MultiParams {
    type Error = Error;

    fn try_from(v: Vec<HurstParams>) -> Result<Self> {
        MultiParams::new(v)
    }
}

impl From<MultiParams> for Vec<HurstParams> {
    fn from(m: MultiParams) -> Self {
        m.params
    }
}

impl From<HurstParams> for MultiParams {
    fn from(p: HurstParams) -> Self {
        Self { params: vec![p] }
    }
}

impl MultiParams {
    pub fn new(params: Vec<HurstParams>) -> Result<Self> {
        if params.is_empty() {
            return Err(Error::InvalidParams("dimension must be at least 1".into()));
        }
        Ok(Self { params })
    }

    /// Build from parallel `H` and `K` vectors.
    pub fn from_vectors(h: &[f64], k: &[f64]) -> Result<Self> {
        if h.len() != k.len() {
            return Err(Error::InvalidParams(format!(
                "H has {} entries but K has {}",
                h.len(),
                k.len()
            )));
        }
        let params = h
            .iter()
            .zip(k)
            .map(|(&h, &k)| HurstParams::new(h, k))
            .collect::<Result<Vec<_>>>()?;
        Self::new(params)
    }

    pub fn dims(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[HurstParams] {
        &self.params
    }

    pub fn component(&self, i: usize) -> HurstParams {
        self.params[i]
    }

    /// `(HK)* = max_i H_i K_i`.
    pub fn hk_star(&self) -> f64 {
        self.params.iter().map(HurstParams::hk).fold(f64::MIN, f64::max)
    }

    pub fn sum_hk(&self) -> f64 {
        self.params.iter().map(HurstParams::hk).sum()
    }

    /// `gamma = (2 - d)/2 + theta + (d - 2)(HK)* - sum_i H_i K_i`.
    pub fn gamma(&self, theta: f64) -> f64 {
        let d = self.dims() as f64;
        0.5 * (2.0 - d) + theta + (d - 2.0) * self.hk_star() - self.sum_hk()
    }

    /// Fails unless every component has `2 H_i K_i > 1`.
    pub fn require_strictly_supercritical(&self) -> Result<()> {
        for (i, p) in self.params.iter().enumerate() {
            if p.two_hk() <= 1.0 {
                return Err(Error::UnsupportedRegime(format!(
                    "component {i} has 2HK = {} <= 1",
                    p.two_hk()
                )));
            }
        }
        Ok(())
    }
}
