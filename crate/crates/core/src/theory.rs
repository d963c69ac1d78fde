//! Numerical evaluation of the stability theory: the estimation error bound,
//! the auxiliary probabilities, the conservative throughput and the
//! checkable stability conditions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::controller::{clamp_control, predict_queue_s, release_control, PriorKnowledge};
use crate::error::{ensure, Error, Result};
use crate::estimator::EstimatedFlow;
use crate::model::{sample_demand, sample_outflow, DemandModel, FlowParams, NoiseModel, TrafficState};

const SIMPSON_INTERVALS: usize = 2048;

/// Everything the theory needs about one scenario.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TheoryInputs {
    pub flow: FlowParams,
    pub noise: NoiseModel,
    pub demand: DemandModel,
    pub prior: PriorKnowledge,
    pub lambda: f64,
    pub k: usize,
}

/// `(1/R^2 + 1/(alpha^2 gap^2)) * lambda sigma^2 / (2 - lambda)`.
pub fn error_bound_y(lambda: f64, sigma2: f64, r: f64, alpha: f64, gap: f64) -> Result<f64> {
    ensure(lambda > 0.0 && lambda <= 1.0, || format!("lambda {lambda} must lie in (0, 1]"))?;
    ensure(sigma2 >= 0.0, || format!("sigma2 {sigma2} must be non-negative"))?;
    ensure(r > 0.0 && alpha > 0.0 && gap > 0.0, || "R, alpha and gap must be positive".into())?;
    Ok((1.0 / (r * r) + 1.0 / (alpha * alpha * gap * gap)) * lambda * sigma2 / (2.0 - lambda))
}

/// Per-component stationary bounds `(e_R^2, e_alpha^2)`.
pub fn component_bounds(lambda: f64, sigma2: f64, r: f64, alpha: f64, gap: f64) -> (f64, f64) {
    let s = lambda * sigma2 / (2.0 - lambda);
    (s / (r * r), s / (alpha * alpha * gap * gap))
}

fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    if b <= a {
        return 0.0;
    }
    let n = n + n % 2;
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + i as f64 * h);
    }
    acc * h / 3.0
}

/// Probability that a single episode-2 sample lands within `3 chi / 4` of `F_max`.
fn single_sample_near_peak(chi: f64, flow: &FlowParams, noise: &NoiseModel, prior: &PriorKnowledge) -> f64 {
    let (lo, hi) = (prior.x0_min, prior.x0_max);
    let eps = noise.eps_max;
    let width = hi - lo;
    let full = noise.cdf(eps);
    let tail = |arg: f64| (full - noise.cdf(arg)).max(0.0);
    let arg1 = |x0: f64| eps - 0.75 * chi + flow.alpha * (flow.x0_c - x0);

    // The integrand of the rising branch has kinks (and jumps for noise with
    // atoms) where the argument crosses the noise support; integrate piecewise.
    let mut cuts = vec![lo, flow.x0_c];
    for level in [eps, -eps] {
        let x = flow.x0_c - (level - eps + 0.75 * chi) / flow.alpha;
        if x > lo && x < flow.x0_c {
            cuts.push(x);
        }
    }
    cuts.sort_by(|a, b| a.total_cmp(b));
    let i1: f64 = cuts
        .windows(2)
        .map(|w| {
            // Open-interval evaluation keeps the jump values out of the endpoints.
            let (a, b) = (w[0], w[1]);
            let nudge = 1e-12 * (b - a);
            simpson(|x| tail(arg1(x.clamp(a + nudge, b - nudge))), a, b, SIMPSON_INTERVALS)
        })
        .sum();
    let i2 = (hi - flow.x0_c) * tail(eps - 0.75 * chi + flow.q() - flow.r);
    ((i1 + i2) / width).clamp(0.0, 1.0)
}

pub fn p_chi(chi: f64, flow: &FlowParams, noise: &NoiseModel, prior: &PriorKnowledge, k: usize) -> Result<f64> {
    ensure(chi >= 0.0, || format!("chi {chi} must be non-negative"))?;
    if !(prior.x0_min <= flow.x0_c && flow.x0_c <= prior.x0_max) {
        return Err(Error::Domain(format!(
            "x0_c = {} outside [x0_min, x0_max] = [{}, {}]",
            flow.x0_c, prior.x0_min, prior.x0_max
        )));
    }
    let p1 = single_sample_near_peak(chi, flow, noise, prior);
    Ok((1.0 - (1.0 - p1).powi(k as i32)).clamp(0.0, 1.0))
}

pub fn p_prime(psi: f64, noise: &NoiseModel, k: usize) -> Result<f64> {
    ensure(psi >= 0.0, || format!("psi {psi} must be non-negative"))?;
    let eps = noise.eps_max;
    let upper = 1.0 - noise.cdf(eps - 0.5 * psi);
    let lower = noise.cdf(-eps + 0.5 * psi);
    let base = (1.0 - upper - lower).clamp(0.0, 1.0);
    Ok((1.0 - base.powi(k as i32)).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KappaTerms {
    pub kappa: f64,
    pub ewma_term: f64,
    pub p_term: f64,
    pub p_prime_term: f64,
    pub p: f64,
    pub p_prime: f64,
}

pub fn kappa(gamma: f64, inp: &TheoryInputs) -> Result<KappaTerms> {
    ensure(gamma > 0.0, || format!("gamma {gamma} must be positive"))?;
    let c1 = 1.0 - (1.0 - inp.lambda).powi(2 * inp.k as i32);
    let sg = gamma.sqrt();
    let eps = inp.noise.eps_max;
    let p = p_chi(sg * (inp.flow.q() + eps), &inp.flow, &inp.noise, &inp.prior, inp.k)?;
    let pp = p_prime(sg * eps, &inp.noise, inp.k)?;
    let ewma_term = c1 * gamma;
    let p_term = 7.0 * gamma / 16.0 * p;
    let p_prime_term = 7.0 * gamma / 16.0 * pp;
    Ok(KappaTerms { kappa: ewma_term.min(p_term).min(p_prime_term), ewma_term, p_term, p_prime_term, p, p_prime: pp })
}

/// Initial state of the throughput rollouts and their length `M`.
pub fn xi0_and_m(
    flow: &FlowParams,
    noise: &NoiseModel,
    prior: &PriorKnowledge,
    gamma: f64,
) -> Result<(TrafficState, u64)> {
    let shrink = (1.0 - 2.0 * gamma.sqrt()) * flow.alpha;
    if !(gamma > 0.0 && gamma < 0.25 && shrink > 0.0) {
        return Err(Error::DegenerateEstimate(format!("gamma {gamma} must lie in (0, 1/4)")));
    }
    let s = prior.s;
    let q = flow.q();
    let raw = s as f64 * (q - flow.r + noise.eps_max) / prior.delta1;
    let m = (raw - 1e-9 * raw.abs().max(1.0)).ceil().max(0.0) as u64 + s as u64;
    let x0 = flow.x0_clean + (q - flow.x0_clean) / shrink;
    let state = TrafficState { x0, pipeline: vec![q; s], q: (m as f64 - s as f64 - 1.0).max(0.0) * q, t: 0 };
    Ok((state, m))
}

/// Which estimates drive the release controller inside the throughput rollouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RolloutEstimates {
    /// The true flow function.
    #[default]
    Truth,
    /// Each estimate moved by its `gamma`-sized worst case.
    Perturbed,
}

pub fn rollout_flow(flow: &FlowParams, noise: &NoiseModel, gamma: f64, mode: RolloutEstimates) -> EstimatedFlow {
    match mode {
        RolloutEstimates::Truth => EstimatedFlow::exact(flow),
        RolloutEstimates::Perturbed => {
            let sg = gamma.sqrt();
            let alpha_hat = (1.0 - 2.0 * sg) * flow.alpha;
            let f_max = (1.0 - sg) * (flow.q() + noise.eps_max);
            let eps = (1.0 + sg) * noise.eps_max;
            EstimatedFlow {
                alpha_hat,
                x0_clean: flow.x0_clean,
                x0_c_hat: flow.x0_clean + (f_max - eps - flow.x0_clean) / alpha_hat,
                r_hat: (1.0 + sg) * flow.r,
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RTilde {
    pub value: f64,
    /// 95% normal-approximation half-width.
    pub ci_half_width: f64,
    pub rollouts: usize,
    pub m: u64,
}

/// Mean expected discharge over `M` steps of the release controller started
/// from `xi0`, averaged over `n_rollouts` independent rollouts.
#[allow(clippy::too_many_arguments)]
pub fn r_tilde(
    flow: &FlowParams,
    demand: &DemandModel,
    noise: &NoiseModel,
    prior: &PriorKnowledge,
    gamma: f64,
    n_rollouts: usize,
    seed: u64,
    mode: RolloutEstimates,
) -> Result<RTilde> {
    ensure(n_rollouts >= 100, || format!("{n_rollouts} rollouts are too few for a confidence interval"))?;
    let (xi0, m) = xi0_and_m(flow, noise, prior, gamma)?;
    let hat = rollout_flow(flow, noise, gamma, mode);
    let set = hat.x0_c_hat;
    let means: Vec<f64> = (0..n_rollouts)
        .into_par_iter()
        .map(|i| -> Result<f64> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mut x = xi0.clone();
            let mut acc = 0.0;
            for _ in 0..m {
                let inflow = sample_demand(demand, &mut rng);
                let pred = predict_queue_s(&x, &hat);
                let dec = clamp_control(release_control(set, pred, &hat, inflow.a), x.q, inflow.b);
                let out = sample_outflow(flow, noise, x.x0, &mut rng)?;
                x.advance(inflow, out.value, dec.b_s)?;
                acc += flow.flow_unchecked(x.x0);
            }
            Ok(acc / m as f64)
        })
        .collect::<Result<_>>()?;
    let n = means.len() as f64;
    let mean = means.iter().sum::<f64>() / n;
    let var = means.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(RTilde { value: mean, ci_half_width: 1.96 * (var / n).sqrt(), rollouts: n_rollouts, m })
}

/// Right-hand side of the noise-variance stability condition at `gamma`.
pub fn noise_variance_rhs(gamma: f64, inp: &TheoryInputs) -> Result<f64> {
    let kap = kappa(gamma, inp)?.kappa;
    Ok(rhs_from_kappa(kap, inp))
}

fn rhs_from_kappa(kap: f64, inp: &TheoryInputs) -> f64 {
    let l = inp.lambda;
    let c1 = 1.0 - (1.0 - l).powi(2 * inp.k as i32);
    let a2g2 = (inp.flow.alpha * inp.flow.gap()).powi(2);
    let r2 = inp.flow.r * inp.flow.r;
    let d2 = inp.prior.delta2;
    kap * d2 * (2.0 - l) * a2g2 * r2 / (l * (d2 + inp.prior.lambda_cap) * c1 * (r2 + a2g2))
}

/// Drift constant of the compound Lyapunov function. Diagnostic only.
pub fn beta(inp: &TheoryInputs, kappa: f64, t_round: u64, mu2: f64) -> f64 {
    let l = inp.lambda;
    let c1 = 1.0 - (1.0 - l).powi(2 * inp.k as i32);
    let sigma2 = inp.noise.sigma2();
    let gamma1 = t_round as f64 * (inp.demand.a_max() + inp.demand.b_max());
    let gamma2 = gamma1 / inp.prior.mu1;
    let c = mu2 * kappa;
    l * c1 / ((2.0 * l - 4.0) * gamma2)
        * (sigma2 / (inp.flow.alpha * inp.flow.gap()).powi(2) + sigma2 / (inp.flow.r * inp.flow.r))
        - c / (2.0 * gamma2)
}

/// `n` log-spaced points in `[lo, hi)`.
pub fn gamma_grid(n: usize, lo: f64, hi: f64) -> Vec<f64> {
    let (a, b) = (lo.ln(), hi.ln());
    (0..n).map(|i| (a + (b - a) * i as f64 / n as f64).exp()).collect()
}

pub fn default_gamma_grid() -> Vec<f64> {
    gamma_grid(40, 1e-4, 0.25)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoryOptions {
    /// Preferred `gamma`; used when it satisfies the noise condition.
    pub gamma: f64,
    pub rollouts: usize,
    pub seed: u64,
    pub rollout_estimates: RolloutEstimates,
    /// `None` uses the midpoint of `(0, 1/(1 - mu1))`.
    pub mu2: Option<f64>,
}

impl Default for TheoryOptions {
    fn default() -> Self {
        TheoryOptions { gamma: 0.04, rollouts: 100_000, seed: 0, rollout_estimates: RolloutEstimates::Truth, mu2: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremReport {
    pub y: f64,
    pub sigma2: f64,
    pub demand_mean: f64,
    pub r_tilde: f64,
    pub r_tilde_ci: f64,
    pub m: u64,
    pub a_max: f64,
    pub cond_ii_bound: f64,
    pub cond_i: bool,
    pub cond_ii: bool,
    pub cond_iii: bool,
    pub gamma_used: f64,
    pub rhs_iii: f64,
    pub kappa: KappaTerms,
    pub beta: f64,
    pub mu2: f64,
    /// `(gamma, rhs)` over the search grid.
    pub grid: Vec<(f64, f64)>,
}

pub fn check_theorem_conditions(inp: &TheoryInputs, grid: &[f64], opts: &TheoryOptions) -> Result<TheoremReport> {
    let sigma2 = inp.noise.sigma2();
    let y = error_bound_y(inp.lambda, sigma2, inp.flow.r, inp.flow.alpha, inp.flow.gap())?;

    let sweep: Vec<(f64, f64)> = grid.iter().map(|&g| Ok((g, noise_variance_rhs(g, inp)?))).collect::<Result<_>>()?;
    let preferred = noise_variance_rhs(opts.gamma, inp)?;
    let (gamma_used, rhs_iii) = if sigma2 < preferred {
        (opts.gamma, preferred)
    } else {
        sweep.iter().copied().fold((opts.gamma, preferred), |best, cur| if cur.1 > best.1 { cur } else { best })
    };
    let cond_iii = sigma2 < rhs_iii;
    let kap = kappa(gamma_used, inp)?;

    let rt = r_tilde(
        &inp.flow,
        &inp.demand,
        &inp.noise,
        &inp.prior,
        gamma_used,
        opts.rollouts,
        opts.seed,
        opts.rollout_estimates,
    )?;
    let demand_mean = inp.demand.a_mean() + inp.demand.b_mean();
    let cond_ii_bound = inp.flow.x0_clean.min(inp.flow.r - inp.noise.eps_max);

    let schedule = crate::controller::compute_schedule(&inp.prior, inp.k)?;
    let mu2 = opts.mu2.unwrap_or(0.5 / (1.0 - inp.prior.mu1));
    Ok(TheoremReport {
        y,
        sigma2,
        demand_mean,
        r_tilde: rt.value,
        r_tilde_ci: rt.ci_half_width,
        m: rt.m,
        a_max: inp.demand.a_max(),
        cond_ii_bound,
        cond_i: demand_mean < rt.value,
        cond_ii: inp.demand.a_max() < cond_ii_bound,
        cond_iii,
        gamma_used,
        rhs_iii,
        beta: beta(inp, kap.kappa, schedule.t_round, mu2),
        kappa: kap,
        mu2,
        grid: sweep,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub demand_mean: f64,
    pub peak_demand: f64,
    /// Mean demand below breakdown capacity.
    pub cond_1: bool,
    /// Starts uncongested and peak demand never exceeds `Q - eps_max`.
    pub cond_2: bool,
    pub stable: bool,
}

pub fn check_baseline_conditions(
    flow: &FlowParams,
    noise: &NoiseModel,
    demand: &DemandModel,
    x0_initial: f64,
) -> BaselineReport {
    let demand_mean = demand.a_mean() + demand.b_mean();
    let peak_demand = demand.a_max() + demand.b_max();
    let cond_1 = demand_mean < flow.r;
    let cond_2 = x0_initial <= flow.x0_c && peak_demand <= flow.q() - noise.eps_max;
    BaselineReport { demand_mean, peak_demand, cond_1, cond_2, stable: cond_1 || cond_2 }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::BoundedDist;

    fn inputs(noise: NoiseModel) -> TheoryInputs {
        TheoryInputs {
            flow: FlowParams::from_peak_flow(0.65, 9.0, 16.0, 2.0, 10.5).unwrap(),
            noise,
            demand: DemandModel::new(
                BoundedDist::Uniform { lo: 1.8, hi: 5.4 },
                BoundedDist::Uniform { lo: 1.8, hi: 5.4 },
            )
            .unwrap(),
            prior: PriorKnowledge {
                s: 7,
                x0_clean: 9.0,
                x0_min: 13.0,
                x0_max: 20.0,
                delta1: 3.0,
                delta2: 3.5,
                lambda_cap: 11.0,
                mu1: -90.0,
            },
            lambda: 0.08,
            k: 3,
        }
    }

    #[test]
    fn y_examples() {
        assert_eq!(error_bound_y(0.08, 0.0, 10.5, 0.65, 7.692).unwrap(), 0.0);
        let y = error_bound_y(0.08, 1.42, 10.5, 0.65, 7.692).unwrap();
        let oracle = (1.0 / 110.25 + 1.0 / (0.65f64 * 7.692).powi(2)) * 0.08 * 1.42 / 1.92;
        assert!((y - oracle).abs() < 1e-15);
        assert!((y - 0.0029).abs() < 5e-5, "{y}");
        let r =
            error_bound_y(0.04, 1.0, 10.5, 0.65, 7.692).unwrap() / error_bound_y(0.02, 1.0, 10.5, 0.65, 7.692).unwrap();
        assert!((r - (0.04 / 1.96) / (0.02 / 1.98)).abs() < 1e-12);
    }

    #[test]
    fn p_prime_examples() {
        let u = NoiseModel::uniform(2.0).unwrap();
        assert_eq!(p_prime(0.0, &u, 3).unwrap(), 0.0);
        assert!((p_prime(4.0, &u, 3).unwrap() - 1.0).abs() < 1e-12);
        assert!((p_prime(1.0, &u, 1).unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn p_chi_limits() {
        let inp = inputs(NoiseModel::uniform(2.0).unwrap());
        assert_eq!(p_chi(0.0, &inp.flow, &inp.noise, &inp.prior, 3).unwrap(), 0.0);
        let big = p_chi(100.0, &inp.flow, &inp.noise, &inp.prior, 3).unwrap();
        assert!((big - 1.0).abs() < 1e-12);
        let bad = PriorKnowledge { x0_max: 15.0, ..inp.prior };
        assert!(matches!(p_chi(1.0, &inp.flow, &inp.noise, &bad, 3), Err(Error::Domain(_))));
    }

    #[test]
    fn kappa_saturated_comparison() {
        let mut inp = inputs(NoiseModel::uniform(2.0).unwrap());
        inp.lambda = 1.0;
        inp.noise = NoiseModel::uniform(0.0).unwrap();
        let k = kappa(0.2, &inp).unwrap();
        assert!(k.kappa <= 7.0 * 0.2 / 16.0 + 1e-15);
    }

    #[test]
    fn xi0_examples() {
        let inp = inputs(NoiseModel::uniform(2.0).unwrap());
        let (x, m) = xi0_and_m(&inp.flow, &inp.noise, &inp.prior, 0.04).unwrap();
        assert_eq!(m, 20);
        assert_eq!(x.pipeline, vec![14.0; 7]);
        assert!((x.q - 12.0 * 14.0).abs() < 1e-9);
        assert!(xi0_and_m(&inp.flow, &inp.noise, &inp.prior, 0.25).is_err());
        let p1 = PriorKnowledge { s: 1, ..inp.prior };
        let (x, _) = xi0_and_m(&inp.flow, &inp.noise, &p1, 0.04).unwrap();
        assert_eq!(x.pipeline.len() + 2, 3);
    }

    #[test]
    fn rhs_zero_when_kappa_zero() {
        let inp = inputs(NoiseModel::uniform(2.0).unwrap());
        assert_eq!(rhs_from_kappa(0.0, &inp), 0.0);
    }

    #[test]
    fn r_tilde_refuses_few_rollouts() {
        let inp = inputs(NoiseModel::uniform(2.0).unwrap());
        assert!(r_tilde(&inp.flow, &inp.demand, &inp.noise, &inp.prior, 0.04, 50, 0, RolloutEstimates::Truth).is_err());
    }

    #[test]
    fn baseline_examples() {
        let inp = inputs(NoiseModel::uniform(2.0).unwrap());
        let r = check_baseline_conditions(&inp.flow, &inp.noise, &inp.demand, 30.0);
        assert!(r.cond_1 && r.stable);
        let heavy =
            DemandModel::new(BoundedDist::Uniform { lo: 3.0, hi: 5.0 }, BoundedDist::Uniform { lo: 5.0, hi: 9.0 })
                .unwrap();
        let r = check_baseline_conditions(&inp.flow, &inp.noise, &heavy, 25.0);
        assert!(!r.cond_1 && !r.cond_2 && !r.stable);
        let edge =
            DemandModel::new(BoundedDist::Uniform { lo: 5.25, hi: 5.25 }, BoundedDist::Uniform { lo: 5.25, hi: 5.25 })
                .unwrap();
        assert!(!check_baseline_conditions(&inp.flow, &inp.noise, &edge, 0.0).cond_1);
    }

    #[test]
    fn grid_shape() {
        let g = default_gamma_grid();
        assert_eq!(g.len(), 40);
        assert!((g[0] - 1e-4).abs() < 1e-15);
        assert!(*g.last().unwrap() < 0.25);
        assert!(g.windows(2).all(|w| w[0] < w[1]));
    }
}
