//! Per-round identification of `(alpha, F_max, R, eps_max)` from probe samples.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::model::{FlowParams, NoiseModel};

/// Starting estimates. `F_max_hat` and `eps_max_hat` start from the reset
/// defaults unless a warm start gives them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum InitialEstimates {
    Fixed {
        alpha: f64,
        r: f64,
        #[serde(default)]
        f_max: Option<f64>,
        #[serde(default)]
        eps_max: Option<f64>,
    },
    /// `alpha_hat ~ U(0, 1)`, `R_hat ~ U(0, r_max)`.
    Random { r_max: f64 },
}

impl Default for InitialEstimates {
    fn default() -> Self {
        InitialEstimates::Random { r_max: 16.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorConfig {
    pub lambda: f64,
    pub k: usize,
    /// Steps between resets of `F_max_hat` and `eps_max_hat`; `None` never resets.
    #[serde(default)]
    pub reset_period: Option<u64>,
    /// `(F_max, eps_max)` values written by a reset.
    #[serde(default)]
    pub reset_defaults: (f64, f64),
    /// `theta_alpha` samples closer than `gap_fraction * (x0_min - x0_clean)`
    /// to the clean boundary are refused.
    #[serde(default = "default_gap_fraction")]
    pub gap_fraction: f64,
    #[serde(default)]
    pub initial: InitialEstimates,
}

fn default_gap_fraction() -> f64 {
    0.05
}

impl EstimatorConfig {
    pub fn new(lambda: f64, k: usize) -> Result<Self> {
        let c = EstimatorConfig {
            lambda,
            k,
            reset_period: None,
            reset_defaults: (0.0, 0.0),
            gap_fraction: default_gap_fraction(),
            initial: InitialEstimates::default(),
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.lambda > 0.0 && self.lambda <= 1.0, || {
            format!("learning rate {} must lie in (0, 1]", self.lambda)
        })?;
        ensure(self.k >= 1, || "k must be at least 1".into())?;
        ensure(self.reset_period != Some(0), || "reset_period must be positive".into())?;
        let (f, e) = self.reset_defaults;
        ensure(f >= 0.0 && e >= 0.0, || "reset defaults must be non-negative".into())?;
        ensure((0.0..1.0).contains(&self.gap_fraction), || {
            format!("gap_fraction {} must lie in [0, 1)", self.gap_fraction)
        })?;
        match self.initial {
            InitialEstimates::Fixed { alpha, r, f_max, eps_max } => {
                ensure([alpha, r, f_max.unwrap_or(0.0), eps_max.unwrap_or(0.0)].iter().all(|v| *v >= 0.0), || {
                    "initial estimates must be non-negative".into()
                })
            }
            InitialEstimates::Random { r_max } => ensure(r_max > 0.0, || "initial r_max must be positive".into()),
        }
    }

    pub fn initial_estimates<R: Rng + ?Sized>(&self, rng: &mut R) -> Estimates {
        let (f0, e0) = self.reset_defaults;
        match self.initial {
            InitialEstimates::Fixed { alpha, r, f_max, eps_max } => Estimates {
                alpha_hat: alpha,
                f_max_hat: f_max.unwrap_or(f0),
                r_hat: r,
                eps_max_hat: eps_max.unwrap_or(e0),
                n: 0,
            },
            InitialEstimates::Random { r_max } => {
                // Open intervals; gen::<f64>() is in [0, 1).
                let a = (1.0 - rng.gen::<f64>()).min(1.0 - f64::EPSILON);
                let r = r_max * (1.0 - rng.gen::<f64>());
                Estimates { alpha_hat: a, f_max_hat: f0, r_hat: r, eps_max_hat: e0, n: 0 }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimates {
    pub alpha_hat: f64,
    pub f_max_hat: f64,
    pub r_hat: f64,
    pub eps_max_hat: f64,
    pub n: u64,
}

/// The `k` samples of each kind collected in one probing phase.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SampleBuffers {
    pub alpha: Vec<f64>,
    pub f_max: Vec<f64>,
    pub r: Vec<f64>,
}

impl SampleBuffers {
    pub fn is_complete(&self, k: usize) -> bool {
        self.alpha.len() == k && self.f_max.len() == k && self.r.len() == k
    }
}

pub fn theta_alpha(x0: f64, outflow: f64, x0_clean: f64, min_gap: f64) -> Result<f64> {
    let den = x0 - x0_clean;
    if !(den > min_gap) {
        return Err(Error::SampleRejected(format!("x0 - x0_clean = {den} is not above the gap {min_gap}")));
    }
    Ok((outflow - x0_clean) / den)
}

/// EWMA weights `lambda (1 - lambda)^(k - j)` for `j = 1..k` and the carry-over
/// weight `(1 - lambda)^k`. They sum to one.
pub fn ewma_weights(lambda: f64, k: usize) -> (Vec<f64>, f64) {
    let keep = 1.0 - lambda;
    let w = (1..=k).map(|j| lambda * keep.powi((k - j) as i32)).collect();
    (w, keep.powi(k as i32))
}

fn ewma(prev: f64, samples: &[f64], lambda: f64) -> f64 {
    let (w, carry) = ewma_weights(lambda, samples.len());
    w.iter().zip(samples).map(|(w, s)| w * s).sum::<f64>() + carry * prev
}

fn max_of(xs: &[f64]) -> f64 {
    xs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

fn min_of(xs: &[f64]) -> f64 {
    xs.iter().copied().fold(f64::INFINITY, f64::min)
}

pub fn update_round(est: &Estimates, samples: &SampleBuffers, cfg: &EstimatorConfig) -> Result<Estimates> {
    let k = cfg.k;
    for (kind, got) in
        [("theta_alpha", samples.alpha.len()), ("theta_f_max", samples.f_max.len()), ("theta_r", samples.r.len())]
    {
        if got != k {
            return Err(Error::WrongSampleCount { kind, expected: k, got });
        }
    }
    let spread = 0.5 * (max_of(&samples.r) - min_of(&samples.r));
    Ok(Estimates {
        alpha_hat: ewma(est.alpha_hat, &samples.alpha, cfg.lambda),
        f_max_hat: est.f_max_hat.max(max_of(&samples.f_max)),
        r_hat: ewma(est.r_hat, &samples.r, cfg.lambda),
        eps_max_hat: est.eps_max_hat.max(spread),
        n: est.n + 1,
    })
}

/// `x0_clean + (F_max_hat - eps_max_hat - x0_clean) / alpha_hat`.
pub fn critical_value(est: &Estimates, x0_clean: f64) -> Result<f64> {
    if !(est.alpha_hat > 0.0) {
        return Err(Error::DegenerateEstimate(format!("alpha_hat = {} must be positive", est.alpha_hat)));
    }
    Ok(x0_clean + (est.f_max_hat - est.eps_max_hat - x0_clean) / est.alpha_hat)
}

/// The flow function rebuilt from estimates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatedFlow {
    pub alpha_hat: f64,
    pub x0_clean: f64,
    pub x0_c_hat: f64,
    pub r_hat: f64,
}

impl EstimatedFlow {
    pub fn new(est: &Estimates, x0_clean: f64) -> Result<Self> {
        Ok(EstimatedFlow {
            alpha_hat: est.alpha_hat,
            x0_clean,
            x0_c_hat: critical_value(est, x0_clean)?,
            r_hat: est.r_hat,
        })
    }

    /// Estimates that reproduce `flow` exactly.
    pub fn exact(flow: &FlowParams) -> Self {
        EstimatedFlow { alpha_hat: flow.alpha, x0_clean: flow.x0_clean, x0_c_hat: flow.x0_c, r_hat: flow.r }
    }

    #[inline]
    pub fn eval(&self, x0: f64) -> f64 {
        if x0 <= self.x0_clean {
            x0
        } else if x0 <= self.x0_c_hat {
            self.alpha_hat * (x0 - self.x0_clean) + self.x0_clean
        } else {
            self.r_hat
        }
    }
}

pub fn estimated_flow(est: &Estimates, x0_clean: f64, x0: f64) -> Result<f64> {
    if !(x0 >= 0.0) {
        return Err(Error::Domain(format!("queue length {x0} must be non-negative")));
    }
    Ok(EstimatedFlow::new(est, x0_clean)?.eval(x0))
}

/// Ground-truth targets of the four estimates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub alpha: f64,
    pub f_max: f64,
    pub r: f64,
    pub eps_max: f64,
}

impl Truth {
    pub fn new(flow: &FlowParams, noise: &NoiseModel) -> Self {
        Truth { alpha: flow.alpha, f_max: flow.q() + noise.eps_max, r: flow.r, eps_max: noise.eps_max }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorVector {
    pub e_alpha: f64,
    pub e_f_max: f64,
    pub e_r: f64,
    pub e_eps_max: f64,
    pub norm2: f64,
}

pub fn normalized_errors(est: &Estimates, truth: &Truth) -> Result<ErrorVector> {
    let rel = |e: f64, t: f64, name: &'static str| {
        if t == 0.0 {
            Err(Error::UndefinedNormalization(name))
        } else {
            Ok((e - t) / t)
        }
    };
    let e_alpha = rel(est.alpha_hat, truth.alpha, "alpha")?;
    let e_f_max = rel(est.f_max_hat, truth.f_max, "F_max")?;
    let e_r = rel(est.r_hat, truth.r, "R")?;
    let e_eps_max = rel(est.eps_max_hat, truth.eps_max, "eps_max")?;
    Ok(ErrorVector {
        e_alpha,
        e_f_max,
        e_r,
        e_eps_max,
        norm2: e_alpha * e_alpha + e_f_max * e_f_max + e_r * e_r + e_eps_max * e_eps_max,
    })
}

pub fn reset_max_estimates(est: &Estimates, cfg: &EstimatorConfig) -> Estimates {
    Estimates { f_max_hat: cfg.reset_defaults.0, eps_max_hat: cfg.reset_defaults.1, ..*est }
}
