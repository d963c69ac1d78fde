//! Bounded scalar distributions used for the outflow noise and the two
//! demand classes. Each family has closed-form moments and a CDF so the
//! analysis code never has to sample to get a probability.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::erf::{erfc, erfc_inv};

use crate::error::{ensure, Result};

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[inline]
pub fn std_normal_pdf(z: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * z * z).exp()
}

#[inline]
pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

#[inline]
fn std_normal_quantile(p: f64) -> f64 {
    -std::f64::consts::SQRT_2 * erfc_inv(2.0 * p)
}

/// A distribution supported on `[lo, hi]`.
///
/// `TruncatedGaussian` renormalizes the Gaussian density over the support.
/// `ClippedGaussian` saturates a Gaussian draw at the bounds, which puts
/// point masses on `lo` and `hi` and leaves the interior density untouched.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BoundedDist {
    Uniform { lo: f64, hi: f64 },
    TruncatedGaussian { lo: f64, hi: f64, mu: f64, sigma: f64 },
    ClippedGaussian { lo: f64, hi: f64, mu: f64, sigma: f64 },
}

impl BoundedDist {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.support();
        ensure(lo.is_finite() && hi.is_finite(), || format!("support [{lo}, {hi}] must be finite"))?;
        ensure(lo <= hi, || format!("support lower bound {lo} exceeds upper {hi}"))?;
        match *self {
            BoundedDist::Uniform { .. } => Ok(()),
            BoundedDist::TruncatedGaussian { mu, sigma, .. } | BoundedDist::ClippedGaussian { mu, sigma, .. } => {
                ensure(mu.is_finite(), || format!("mu {mu} must be finite"))?;
                ensure(sigma.is_finite() && sigma > 0.0, || format!("sigma {sigma} must be positive"))?;
                ensure(lo < hi, || "gaussian families need lo < hi".to_string())?;
                if matches!(self, BoundedDist::TruncatedGaussian { .. }) {
                    let (a, b) = self.std_bounds();
                    let z = std_normal_cdf(b) - std_normal_cdf(a);
                    ensure(z > 1e-12, || format!("truncation interval carries no normal mass (Z = {z:e})"))?;
                }
                Ok(())
            }
        }
    }

    pub fn support(&self) -> (f64, f64) {
        match *self {
            BoundedDist::Uniform { lo, hi }
            | BoundedDist::TruncatedGaussian { lo, hi, .. }
            | BoundedDist::ClippedGaussian { lo, hi, .. } => (lo, hi),
        }
    }

    pub fn lo(&self) -> f64 {
        self.support().0
    }

    pub fn hi(&self) -> f64 {
        self.support().1
    }

    fn std_bounds(&self) -> (f64, f64) {
        match *self {
            BoundedDist::TruncatedGaussian { lo, hi, mu, sigma }
            | BoundedDist::ClippedGaussian { lo, hi, mu, sigma } => ((lo - mu) / sigma, (hi - mu) / sigma),
            BoundedDist::Uniform { .. } => (f64::NEG_INFINITY, f64::INFINITY),
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            BoundedDist::Uniform { lo, hi } => 0.5 * (lo + hi),
            BoundedDist::TruncatedGaussian { mu, sigma, .. } => {
                let (a, b) = self.std_bounds();
                let z = std_normal_cdf(b) - std_normal_cdf(a);
                mu + sigma * (std_normal_pdf(a) - std_normal_pdf(b)) / z
            }
            BoundedDist::ClippedGaussian { lo, hi, mu, sigma } => {
                let (a, b) = self.std_bounds();
                let (pa, pb) = (std_normal_cdf(a), std_normal_cdf(b));
                lo * pa + hi * (1.0 - pb) + mu * (pb - pa) + sigma * (std_normal_pdf(a) - std_normal_pdf(b))
            }
        }
    }

    pub fn variance(&self) -> f64 {
        match *self {
            BoundedDist::Uniform { lo, hi } => (hi - lo).powi(2) / 12.0,
            BoundedDist::TruncatedGaussian { sigma, .. } => {
                let (a, b) = self.std_bounds();
                let (fa, fb) = (std_normal_pdf(a), std_normal_pdf(b));
                let z = std_normal_cdf(b) - std_normal_cdf(a);
                let shift = (fa - fb) / z;
                sigma * sigma * (1.0 + (a * fa - b * fb) / z - shift * shift)
            }
            BoundedDist::ClippedGaussian { lo, hi, mu, sigma } => {
                let (a, b) = self.std_bounds();
                let (fa, fb) = (std_normal_pdf(a), std_normal_pdf(b));
                let (pa, pb) = (std_normal_cdf(a), std_normal_cdf(b));
                let z = pb - pa;
                let second = lo * lo * pa
                    + hi * hi * (1.0 - pb)
                    + mu * mu * z
                    + 2.0 * mu * sigma * (fa - fb)
                    + sigma * sigma * (z + a * fa - b * fb);
                let m = self.mean();
                (second - m * m).max(0.0)
            }
        }
    }

    /// `P(X <= x)`.
    pub fn cdf(&self, x: f64) -> f64 {
        let (lo, hi) = self.support();
        if x < lo {
            return 0.0;
        }
        if x >= hi {
            return 1.0;
        }
        match *self {
            BoundedDist::Uniform { lo, hi } => (x - lo) / (hi - lo),
            BoundedDist::TruncatedGaussian { mu, sigma, .. } => {
                let (a, b) = self.std_bounds();
                let pa = std_normal_cdf(a);
                let z = std_normal_cdf(b) - pa;
                ((std_normal_cdf((x - mu) / sigma) - pa) / z).clamp(0.0, 1.0)
            }
            BoundedDist::ClippedGaussian { mu, sigma, .. } => std_normal_cdf((x - mu) / sigma),
        }
    }

    /// `P(X > x)`.
    pub fn sf(&self, x: f64) -> f64 {
        1.0 - self.cdf(x)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            BoundedDist::Uniform { lo, hi } => {
                if hi > lo {
                    rng.gen_range(lo..=hi)
                } else {
                    lo
                }
            }
            BoundedDist::TruncatedGaussian { lo, hi, mu, sigma } => {
                let (a, b) = self.std_bounds();
                let (pa, pb) = (std_normal_cdf(a), std_normal_cdf(b));
                if pb - pa > 0.1 {
                    loop {
                        let z: f64 = rng.sample(StandardNormal);
                        if z >= a && z <= b {
                            return mu + sigma * z;
                        }
                    }
                }
                let u = rng.gen_range(pa..pb);
                (mu + sigma * std_normal_quantile(u)).clamp(lo, hi)
            }
            BoundedDist::ClippedGaussian { lo, hi, mu, sigma } => {
                let z: f64 = rng.sample(StandardNormal);
                (mu + sigma * z).clamp(lo, hi)
            }
        }
    }

    /// The same family with every location and scale multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> BoundedDist {
        match *self {
            BoundedDist::Uniform { lo, hi } => BoundedDist::Uniform { lo: lo * factor, hi: hi * factor },
            BoundedDist::TruncatedGaussian { lo, hi, mu, sigma } => BoundedDist::TruncatedGaussian {
                lo: lo * factor,
                hi: hi * factor,
                mu: mu * factor,
                sigma: sigma * factor,
            },
            BoundedDist::ClippedGaussian { lo, hi, mu, sigma } => BoundedDist::ClippedGaussian {
                lo: lo * factor,
                hi: hi * factor,
                mu: mu * factor,
                sigma: sigma * factor,
            },
        }
    }
}
