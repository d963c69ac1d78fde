//! The plant: flow function with capacity drop, noisy discharge, two demand
//! classes and the delayed fluid queue with a virtual queue for postponed CAVs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dist::BoundedDist;
use crate::error::{ensure, Error, Result};

/// Piecewise-linear expected discharge `f(x0)`.
///
/// Identity on the clean zone `[0, x0_clean]`, slope `alpha` up to the
/// critical queue `x0_c` where it peaks at `Q`, then the breakdown
/// capacity `r`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowParams {
    pub alpha: f64,
    pub x0_clean: f64,
    pub x0_c: f64,
    pub r: f64,
}

impl FlowParams {
    pub fn new(alpha: f64, x0_clean: f64, x0_c: f64, r: f64) -> Result<Self> {
        let p = FlowParams { alpha, x0_clean, x0_c, r };
        p.validate()?;
        Ok(p)
    }

    /// Builds the flow function from the observable peak `f_max = Q + eps_max`.
    pub fn from_peak_flow(alpha: f64, x0_clean: f64, f_max: f64, eps_max: f64, r: f64) -> Result<Self> {
        ensure(alpha > 0.0, || format!("alpha {alpha} must be positive"))?;
        let x0_c = x0_clean + (f_max - eps_max - x0_clean) / alpha;
        Self::new(alpha, x0_clean, x0_c, r)
    }

    pub fn validate(&self) -> Result<()> {
        let FlowParams { alpha, x0_clean, x0_c, r } = *self;
        ensure([alpha, x0_clean, x0_c, r].iter().all(|v| v.is_finite()), || {
            format!("flow parameters must be finite: {self:?}")
        })?;
        ensure(alpha > 0.0 && alpha < 1.0, || format!("alpha {alpha} must lie in (0, 1)"))?;
        ensure(x0_clean > 0.0 && x0_clean < x0_c, || format!("need 0 < x0_clean ({x0_clean}) < x0_c ({x0_c})"))?;
        ensure(r > 0.0, || format!("breakdown capacity {r} must be positive"))?;
        ensure(r < self.q(), || format!("breakdown capacity {r} must be below nominal capacity {}", self.q()))
    }

    /// Nominal capacity, the peak of `f` reached at `x0_c`.
    pub fn q(&self) -> f64 {
        self.alpha * (self.x0_c - self.x0_clean) + self.x0_clean
    }

    pub fn gap(&self) -> f64 {
        self.x0_c - self.x0_clean
    }

    pub fn flow(&self, x0: f64) -> Result<f64> {
        if !(x0 >= 0.0) {
            return Err(Error::Domain(format!("queue length {x0} must be non-negative")));
        }
        Ok(self.flow_unchecked(x0))
    }

    #[inline]
    pub(crate) fn flow_unchecked(&self, x0: f64) -> f64 {
        if x0 <= self.x0_clean {
            x0
        } else if x0 <= self.x0_c {
            self.alpha * (x0 - self.x0_clean) + self.x0_clean
        } else {
            self.r
        }
    }

    /// Fraction of the noise that reaches the discharge at queue `x0`.
    #[inline]
    pub fn noise_gain(&self, x0: f64) -> f64 {
        if x0 <= self.x0_clean {
            0.0
        } else if x0 <= self.x0_c {
            (x0 - self.x0_clean) / self.gap()
        } else {
            1.0
        }
    }
}

/// Evaluates the flow function. Negative queues are a domain error.
pub fn flow_function(params: &FlowParams, x0: f64) -> Result<f64> {
    params.flow(x0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    Uniform,
    TruncatedGaussian,
    ClippedGaussian,
}

/// Zero-mean discharge noise supported on `[-eps_max, eps_max]`.
///
/// The Gaussian kinds take `normal_variance`, the variance of the normal
/// law before truncation or clipping; the variance of the bounded noise
/// itself is [`NoiseModel::sigma2`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub kind: NoiseKind,
    pub eps_max: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normal_variance: Option<f64>,
}

impl NoiseModel {
    pub fn uniform(eps_max: f64) -> Result<Self> {
        let n = NoiseModel { kind: NoiseKind::Uniform, eps_max, normal_variance: None };
        n.validate()?;
        Ok(n)
    }

    pub fn truncated_gaussian(eps_max: f64, normal_variance: f64) -> Result<Self> {
        let n = NoiseModel { kind: NoiseKind::TruncatedGaussian, eps_max, normal_variance: Some(normal_variance) };
        n.validate()?;
        Ok(n)
    }

    pub fn clipped_gaussian(eps_max: f64, normal_variance: f64) -> Result<Self> {
        let n = NoiseModel { kind: NoiseKind::ClippedGaussian, eps_max, normal_variance: Some(normal_variance) };
        n.validate()?;
        Ok(n)
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.eps_max.is_finite() && self.eps_max >= 0.0, || {
            format!("eps_max {} must be finite and non-negative", self.eps_max)
        })?;
        match self.kind {
            NoiseKind::Uniform => Ok(()),
            _ => {
                let v = self
                    .normal_variance
                    .ok_or_else(|| Error::InvalidParams("gaussian noise needs normal_variance".into()))?;
                ensure(v.is_finite() && v > 0.0, || format!("normal_variance {v} must be positive"))?;
                ensure(self.eps_max > 0.0, || "gaussian noise needs eps_max > 0".into())
            }
        }
    }

    /// Mass conservation needs `eps_max <= (1 - alpha)(x0_c - x0_clean)`.
    pub fn validate_against(&self, flow: &FlowParams) -> Result<()> {
        let bound = (1.0 - flow.alpha) * flow.gap();
        ensure(self.eps_max <= bound * (1.0 + 1e-12), || {
            format!(
                "eps_max {} exceeds (1 - alpha)(x0_c - x0_clean) = {bound}; discharge could exceed the queue",
                self.eps_max
            )
        })
    }

    pub fn dist(&self) -> BoundedDist {
        let e = self.eps_max;
        match self.kind {
            NoiseKind::Uniform => BoundedDist::Uniform { lo: -e, hi: e },
            NoiseKind::TruncatedGaussian => BoundedDist::TruncatedGaussian {
                lo: -e,
                hi: e,
                mu: 0.0,
                sigma: self.normal_variance.unwrap_or(1.0).sqrt(),
            },
            NoiseKind::ClippedGaussian => BoundedDist::ClippedGaussian {
                lo: -e,
                hi: e,
                mu: 0.0,
                sigma: self.normal_variance.unwrap_or(1.0).sqrt(),
            },
        }
    }

    pub fn sigma2(&self) -> f64 {
        if self.eps_max == 0.0 {
            return 0.0;
        }
        self.dist().variance()
    }

    pub fn cdf(&self, x: f64) -> f64 {
        if self.eps_max == 0.0 {
            return if x >= 0.0 { 1.0 } else { 0.0 };
        }
        self.dist().cdf(x)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.eps_max == 0.0 {
            return 0.0;
        }
        self.dist().sample(rng)
    }
}

/// Realized discharge for one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Outflow {
    pub value: f64,
    /// Set when rounding pushed the draw outside `[0, x0]` and it was clamped.
    pub clamped: bool,
}

pub fn sample_outflow<R: Rng + ?Sized>(
    params: &FlowParams,
    noise: &NoiseModel,
    x0: f64,
    rng: &mut R,
) -> Result<Outflow> {
    let f = params.flow(x0)?;
    let gain = params.noise_gain(x0);
    // The clean zone discharges deterministically; no draw is consumed there.
    let raw = if gain > 0.0 { f + gain * noise.sample(rng) } else { f };
    let value = raw.clamp(0.0, x0);
    Ok(Outflow { value, clamped: value != raw })
}

/// Non-CAV demand `a` and CAV demand `b`, both i.i.d. per step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DemandModel {
    pub a: BoundedDist,
    pub b: BoundedDist,
}

impl DemandModel {
    pub fn new(a: BoundedDist, b: BoundedDist) -> Result<Self> {
        let d = DemandModel { a, b };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        self.a.validate()?;
        self.b.validate()?;
        ensure(self.a.lo() >= 0.0, || format!("A_min {} must be non-negative", self.a.lo()))?;
        ensure(self.b.lo() >= 0.0, || format!("B support must start at >= 0, got {}", self.b.lo()))?;
        ensure(self.b.hi() > 0.0, || "B_max must be positive".to_string())
    }

    pub fn a_mean(&self) -> f64 {
        self.a.mean()
    }
    pub fn b_mean(&self) -> f64 {
        self.b.mean()
    }
    pub fn a_var(&self) -> f64 {
        self.a.variance()
    }
    pub fn b_var(&self) -> f64 {
        self.b.variance()
    }
    pub fn a_min(&self) -> f64 {
        self.a.lo()
    }
    pub fn a_max(&self) -> f64 {
        self.a.hi()
    }
    pub fn b_max(&self) -> f64 {
        self.b.hi()
    }

    pub fn scaled(&self, factor: f64) -> DemandModel {
        DemandModel { a: self.a.scaled(factor), b: self.b.scaled(factor) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Inflow {
    pub a: f64,
    pub b: f64,
}

pub fn sample_demand<R: Rng + ?Sized>(demand: &DemandModel, rng: &mut R) -> Inflow {
    let a = demand.a.sample(rng);
    let b = demand.b.sample(rng);
    Inflow { a, b }
}

/// `[x0, x1, ..., x_s, q]` at step `t`. `pipeline[i]` holds `x_{i+1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficState {
    pub x0: f64,
    pub pipeline: Vec<f64>,
    pub q: f64,
    pub t: u64,
}

impl TrafficState {
    pub fn empty(s: usize) -> Self {
        TrafficState { x0: 0.0, pipeline: vec![0.0; s], q: 0.0, t: 0 }
    }

    pub fn with_queue(s: usize, x0: f64) -> Self {
        TrafficState { x0, ..Self::empty(s) }
    }

    pub fn s(&self) -> usize {
        self.pipeline.len()
    }

    pub fn validate(&self) -> Result<()> {
        ensure(!self.pipeline.is_empty(), || "pipeline length s must be positive".into())?;
        let ok = std::iter::once(self.x0)
            .chain(self.pipeline.iter().copied())
            .chain(std::iter::once(self.q))
            .all(|v| v.is_finite() && v >= 0.0);
        ensure(ok, || format!("state entries must be finite and non-negative: {self:?}"))
    }

    pub fn l1(&self) -> f64 {
        self.x0 + self.pipeline.iter().sum::<f64>() + self.q
    }

    /// In-place version of [`step_dynamics`].
    pub fn advance(&mut self, inflow: Inflow, outflow: f64, b_s: f64) -> Result<ControlDecomposition> {
        let x1 = self.pipeline[0];
        let tol = 1e-12 * (1.0 + self.x0 + x1);
        if outflow > self.x0 + x1 + tol || outflow < 0.0 || !outflow.is_finite() {
            return Err(Error::InvariantViolation {
                step: self.t,
                reason: format!("outflow {outflow} outside [0, x0 + x1] = [0, {}]", self.x0 + x1),
            });
        }
        let dec = ControlDecomposition::split(b_s, self.q, inflow.b);
        self.x0 = (self.x0 + x1 - outflow).max(0.0);
        self.pipeline.rotate_left(1);
        let s = self.pipeline.len();
        self.pipeline[s - 1] = inflow.a + dec.b_s;
        self.q = (self.q - dec.b_qs + dec.b_bq).max(0.0);
        self.t += 1;
        Ok(dec)
    }
}

/// How the CAV inflow and the virtual queue feed slot `x_s`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlDecomposition {
    pub b_s: f64,
    /// Released from the virtual queue.
    pub b_qs: f64,
    /// New CAVs passed straight through.
    pub b_bs: f64,
    /// New CAVs postponed into the virtual queue.
    pub b_bq: f64,
    /// The requested `b_s` was outside `[0, q + B]`.
    pub clamped: bool,
}

impl ControlDecomposition {
    /// Splits a requested `b_s`, serving the virtual queue before new arrivals.
    pub fn split(b_s_requested: f64, q: f64, b: f64) -> Self {
        let cap = q + b;
        let b_s = if b_s_requested.is_nan() { 0.0 } else { b_s_requested.clamp(0.0, cap) };
        let b_qs = b_s.min(q);
        let b_bs = (b_s - q).max(0.0);
        let b_bq = (b - b_bs).max(0.0);
        ControlDecomposition { b_s, b_qs, b_bs, b_bq, clamped: b_s != b_s_requested }
    }
}

/// One step of the delayed fluid queue. `b_s` outside `[0, q + B]` is
/// clamped and flagged in the returned decomposition.
pub fn step_dynamics(
    state: &TrafficState,
    inflow: Inflow,
    outflow: f64,
    b_s: f64,
) -> Result<(TrafficState, ControlDecomposition)> {
    let mut next = state.clone();
    let dec = next.advance(inflow, outflow, b_s)?;
    Ok((next, dec))
}

pub fn l1_norm(state: &TrafficState) -> f64 {
    state.l1()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeAverage {
    pub mean: f64,
    /// `prefix[t]` is the average of the first `t + 1` values.
    pub prefix: Vec<f64>,
}

pub fn time_average_l1(norms: &[f64]) -> Result<TimeAverage> {
    if norms.is_empty() {
        return Err(Error::Domain("time average of an empty trajectory".into()));
    }
    let mut prefix = Vec::with_capacity(norms.len());
    let mut acc = 0.0;
    for (i, v) in norms.iter().enumerate() {
        acc += v;
        prefix.push(acc / (i + 1) as f64);
    }
    Ok(TimeAverage { mean: acc / norms.len() as f64, prefix })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn reference_flow() -> FlowParams {
        FlowParams::from_peak_flow(0.65, 9.0, 16.0, 2.0, 10.5).unwrap()
    }

    #[test]
    fn flow_function_examples() {
        let p = reference_flow();
        assert!((p.x0_c - 16.692_307_692).abs() < 1e-6);
        assert_eq!(flow_function(&p, 5.0).unwrap(), 5.0);
        assert_eq!(flow_function(&p, 30.0).unwrap(), 10.5);
        assert!((flow_function(&p, p.x0_c).unwrap() - 14.0).abs() < 1e-12);
        assert!((p.q() - 14.0).abs() < 1e-12);
        assert!(matches!(flow_function(&p, -1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn flow_drops_just_past_critical() {
        let p = reference_flow();
        let before = p.flow(p.x0_c).unwrap();
        let after = p.flow(p.x0_c + 1e-9).unwrap();
        assert!(before > after);
        assert_eq!(after, p.r);
    }

    #[test]
    fn flow_params_reject_no_drop() {
        assert!(FlowParams::new(0.65, 9.0, 16.69, 15.0).is_err());
        assert!(FlowParams::new(1.2, 9.0, 16.69, 10.0).is_err());
        assert!(FlowParams::new(0.5, 9.0, 8.0, 5.0).is_err());
    }

    #[test]
    fn noise_bound_against_flow() {
        let p = reference_flow();
        NoiseModel::uniform(2.0).unwrap().validate_against(&p).unwrap();
        assert!(NoiseModel::uniform(2.8).unwrap().validate_against(&p).is_err());
    }

    #[test]
    fn outflow_clean_zone_is_deterministic() {
        let p = reference_flow();
        let n = NoiseModel::uniform(2.0).unwrap();
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            assert_eq!(sample_outflow(&p, &n, 9.0, &mut rng).unwrap().value, 9.0);
        }
    }

    #[test]
    fn outflow_congested_support() {
        let p = reference_flow();
        let n = NoiseModel::uniform(2.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10_000 {
            let f = sample_outflow(&p, &n, 30.0, &mut rng).unwrap();
            assert!((8.5..=12.5).contains(&f.value));
            assert!(!f.clamped);
        }
    }

    #[test]
    fn outflow_midpoint_variance_is_quarter() {
        let p = reference_flow();
        let n = NoiseModel::uniform(2.0).unwrap();
        let mid = 0.5 * (p.x0_clean + p.x0_c);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let draws: Vec<f64> = (0..100_000).map(|_| sample_outflow(&p, &n, mid, &mut rng).unwrap().value).collect();
        let m = draws.iter().sum::<f64>() / draws.len() as f64;
        let v = draws.iter().map(|d| (d - m).powi(2)).sum::<f64>() / (draws.len() - 1) as f64;
        let expected = n.sigma2() / 4.0;
        assert!((v - expected).abs() / expected < 0.05, "{v} vs {expected}");
    }

    #[test]
    fn demand_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let fixed =
            DemandModel::new(BoundedDist::Uniform { lo: 3.6, hi: 3.6 }, BoundedDist::Uniform { lo: 0.0, hi: 5.4 })
                .unwrap();
        let mut bmax: f64 = 0.0;
        for _ in 0..100_000 {
            let i = sample_demand(&fixed, &mut rng);
            assert_eq!(i.a, 3.6);
            bmax = bmax.max(i.b);
        }
        assert!(bmax <= 5.4);

        let uni =
            DemandModel::new(BoundedDist::Uniform { lo: 1.8, hi: 5.4 }, BoundedDist::Uniform { lo: 0.0, hi: 5.4 })
                .unwrap();
        let mean = (0..100_000).map(|_| sample_demand(&uni, &mut rng).a).sum::<f64>() / 1e5;
        assert!((mean - 3.6).abs() < 0.02, "{mean}");
    }

    #[test]
    fn zero_state_stays_zero() {
        let s = TrafficState::empty(7);
        let (n, dec) = step_dynamics(&s, Inflow::default(), 0.0, 0.0).unwrap();
        assert_eq!(n.l1(), 0.0);
        assert_eq!(n.t, 1);
        assert_eq!(dec, ControlDecomposition::default());
    }

    #[test]
    fn virtual_queue_priority() {
        let mut s = TrafficState::empty(3);
        s.q = 3.0;
        let (n, dec) = step_dynamics(&s, Inflow { a: 0.0, b: 2.0 }, 0.0, 4.0).unwrap();
        assert_eq!((dec.b_qs, dec.b_bs, dec.b_bq), (3.0, 1.0, 1.0));
        assert_eq!(n.q, 1.0);
        assert_eq!(n.pipeline[2], 4.0);
    }

    #[test]
    fn shift_register() {
        let s = TrafficState { x0: 5.0, pipeline: vec![2.0, 7.0, 1.0], q: 0.0, t: 0 };
        let (n, _) = step_dynamics(&s, Inflow { a: 0.5, b: 0.0 }, 3.0, 0.0).unwrap();
        assert_eq!(n.x0, 4.0);
        assert_eq!(n.pipeline, vec![7.0, 1.0, 0.5]);
    }

    #[test]
    fn outflow_beyond_supply_is_rejected() {
        let s = TrafficState { x0: 1.0, pipeline: vec![1.0, 0.0], q: 0.0, t: 4 };
        let err = step_dynamics(&s, Inflow::default(), 2.5, 0.0).unwrap_err();
        assert!(matches!(err, Error::InvariantViolation { step: 4, .. }));
    }

    #[test]
    fn l1_examples() {
        assert_eq!(l1_norm(&TrafficState::empty(4)), 0.0);
        let s = TrafficState { x0: 1.0, pipeline: vec![2.0, 3.0], q: 4.0, t: 0 };
        assert_eq!(l1_norm(&s), 10.0);
        let (n, _) = step_dynamics(&TrafficState::empty(7), Inflow { a: 3.0, b: 2.0 }, 0.0, 2.0).unwrap();
        assert_eq!(l1_norm(&n), 5.0);
        assert_eq!(n.pipeline[6], 5.0);
        assert_eq!(n.q, 0.0);
    }

    #[test]
    fn time_average_examples() {
        assert!(time_average_l1(&[]).is_err());
        assert_eq!(time_average_l1(&[2.5; 10]).unwrap().mean, 2.5);
        let ramp: Vec<f64> = (0..=100).map(|t| t as f64).collect();
        let avg = time_average_l1(&ramp).unwrap();
        assert!((avg.mean - 50.0).abs() < 1e-12);
        assert_eq!(avg.prefix[0], 0.0);
        assert_eq!(avg.prefix[2], 1.0);
    }
}
