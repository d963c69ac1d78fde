//! Probe-and-release phase machine and the no-coordination baseline.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::estimator::{theta_alpha, EstimatedFlow, Estimates, SampleBuffers};
use crate::model::{ControlDecomposition, DemandModel, FlowParams, NoiseModel, TrafficState};

/// What the operator knows before the first round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorKnowledge {
    pub s: usize,
    pub x0_clean: f64,
    pub x0_min: f64,
    pub x0_max: f64,
    pub delta1: f64,
    pub delta2: f64,
    /// Upper bound on `A + B` per step.
    #[serde(rename = "lambda_cap")]
    pub lambda_cap: f64,
    pub mu1: f64,
}

impl PriorKnowledge {
    pub fn validate(&self) -> Result<()> {
        ensure(self.s >= 1, || "s must be at least 1".into())?;
        ensure(0.0 < self.x0_clean && self.x0_clean < self.x0_min && self.x0_min < self.x0_max, || {
            format!("need 0 < x0_clean ({}) < x0_min ({}) < x0_max ({})", self.x0_clean, self.x0_min, self.x0_max)
        })?;
        ensure(self.x0_max.is_finite(), || "x0_max must be finite".into())?;
        ensure(self.delta1 > 0.0 && self.delta2 > 0.0 && self.lambda_cap > 0.0, || {
            "delta1, delta2 and Lambda must be positive".into()
        })?;
        let d = self.lambda_cap + self.mu1 * self.delta2;
        if !(d < 0.0) {
            return Err(Error::InvalidMu1(d));
        }
        Ok(())
    }

    /// Checks the bounds the priors must satisfy against the true plant.
    /// `r_tilde` is optional because it needs a Monte Carlo run.
    pub fn check_against(
        &self,
        flow: &FlowParams,
        noise: &NoiseModel,
        demand: &DemandModel,
        r_tilde: Option<f64>,
    ) -> AssumptionReport {
        let delta1_bound = flow.x0_clean.min(flow.r - noise.eps_max) - demand.a_max();
        let lambda_bound = demand.a_max() + demand.b_max();
        let delta2_bound = r_tilde.map(|r| r - demand.a_mean() - demand.b_mean());
        AssumptionReport {
            delta1_ok: self.delta1 <= delta1_bound,
            delta1_bound,
            delta2_ok: delta2_bound.map(|b| self.delta2 <= b),
            delta2_bound,
            lambda_ok: self.lambda_cap >= lambda_bound,
            lambda_bound,
            x0_c_in_probe_range: self.x0_min <= flow.x0_c && flow.x0_c <= self.x0_max,
            x0_clean_matches: (self.x0_clean - flow.x0_clean).abs() <= 1e-9 * flow.x0_clean,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub delta1_ok: bool,
    pub delta1_bound: f64,
    pub delta2_ok: Option<bool>,
    pub delta2_bound: Option<f64>,
    pub lambda_ok: bool,
    pub lambda_bound: f64,
    pub x0_c_in_probe_range: bool,
    pub x0_clean_matches: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub t_clean: [u64; 4],
    pub t_release: u64,
    pub k: usize,
    pub t_round: u64,
}

/// Ceiling that ignores float noise just above an integer.
fn ceil_steps(v: f64) -> u64 {
    let c = (v - 1e-9 * v.abs().max(1.0)).ceil();
    c.max(0.0) as u64
}

pub fn compute_schedule(prior: &PriorKnowledge, k: usize) -> Result<Schedule> {
    prior.validate()?;
    ensure(k >= 1, || "k must be at least 1".into())?;
    let c = prior.x0_clean;
    let d1 = prior.delta1;
    let t_clean = [
        ceil_steps((prior.x0_min - c) / d1),
        ceil_steps((prior.x0_max - c) / d1),
        ceil_steps((1.5 * prior.x0_max - c) / d1),
        ceil_steps(((prior.s as f64 + 1.0) * prior.x0_max - c) / d1),
    ];
    let kk = k as u64;
    let probing = 3 * kk + kk * (t_clean[0] + t_clean[1] + t_clean[2]) + t_clean[3];
    let lam = prior.lambda_cap;
    let t_release = ceil_steps((prior.mu1 - 1.0) * lam * probing as f64 / (lam + prior.mu1 * prior.delta2));
    Ok(Schedule { t_clean, t_release, k, t_round: probing + t_release })
}

/// `(x0_set - A)_+`, and whether the positive part was taken.
pub fn steer_control(x0_set: f64, a: f64) -> (f64, bool) {
    let b = x0_set - a;
    if b < 0.0 {
        (0.0, true)
    } else {
        (b, false)
    }
}

/// Predicted `x0(t+1), ..., x0(t+s)` from the current pipeline and the
/// estimated flow function.
pub fn predict_queue(state: &TrafficState, flow_hat: &EstimatedFlow) -> Vec<f64> {
    let mut out = Vec::with_capacity(state.s());
    let mut x = state.x0;
    for &inflow in &state.pipeline {
        x = (x + inflow - flow_hat.eval(x)).max(0.0);
        out.push(x);
    }
    out
}

/// Like [`predict_queue`] but only the last entry, without allocating.
pub fn predict_queue_s(state: &TrafficState, flow_hat: &EstimatedFlow) -> f64 {
    state.pipeline.iter().fold(state.x0, |x, &inflow| (x + inflow - flow_hat.eval(x)).max(0.0))
}

/// Unclamped release input `b*` that puts `x0(t+s+1)` at `x0_set` in expectation.
pub fn release_control(x0_set: f64, x0_pred_s: f64, flow_hat: &EstimatedFlow, a: f64) -> f64 {
    x0_set - x0_pred_s + flow_hat.eval(x0_pred_s) - a
}

pub fn clamp_control(b_star: f64, q: f64, b: f64) -> ControlDecomposition {
    ControlDecomposition::split(b_star, q, b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Ep1Steer,
    Ep1Clean,
    Ep2Steer,
    Ep2Clean,
    Ep3Steer,
    Ep3Clean,
    Release,
    Ep4Clean,
    /// Baseline without coordination.
    Uncoordinated,
}

impl Phase {
    pub fn label(self) -> &'static str {
        match self {
            Phase::Ep1Steer => "ep1-steer",
            Phase::Ep1Clean => "ep1-clean",
            Phase::Ep2Steer => "ep2-steer",
            Phase::Ep2Clean => "ep2-clean",
            Phase::Ep3Steer => "ep3-steer",
            Phase::Ep3Clean => "ep3-clean",
            Phase::Release => "release",
            Phase::Ep4Clean => "ep4-clean",
            Phase::Uncoordinated => "uncoordinated",
        }
    }

    fn episode(self) -> Option<usize> {
        match self {
            Phase::Ep1Steer | Phase::Ep1Clean => Some(0),
            Phase::Ep2Steer | Phase::Ep2Clean => Some(1),
            Phase::Ep3Steer | Phase::Ep3Clean => Some(2),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation<'a> {
    pub t: u64,
    pub state: &'a TrafficState,
    pub a: f64,
    pub b: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Action {
    pub b_s: f64,
    pub phase: Phase,
    pub round: u64,
    pub x0_set: Option<f64>,
    /// The controller's own request fell outside `[0, q + B]` or needed a positive part.
    pub clamped: bool,
    /// Fired on the last step of a round with that round's samples.
    pub round_complete: Option<SampleBuffers>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct PendingSample {
    due: u64,
    episode: usize,
}

/// Running tallies kept by the probe-and-release controller.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ControllerCounters {
    /// Captured samples outside their episode's target interval.
    pub rejected_samples: u64,
    /// Set-point draws thrown away by the clean-boundary gap guard.
    pub gap_redraws: u64,
    pub steer_clamps: u64,
    pub release_clamps: u64,
    pub clean_checks: u64,
    /// Checks where `x0` was above `x0_clean` when a clean block should have emptied it.
    pub clean_violations: u64,
}

#[derive(Debug, Clone)]
pub struct ProbeRelease {
    prior: PriorKnowledge,
    schedule: Schedule,
    min_gap: f64,
    phase: Phase,
    step_in_phase: u64,
    j: usize,
    round: u64,
    x0_set: Option<f64>,
    release_flow: Option<EstimatedFlow>,
    pending: Vec<PendingSample>,
    clean_due: Vec<u64>,
    buffers: SampleBuffers,
    pub counters: ControllerCounters,
}

impl ProbeRelease {
    pub fn new(prior: PriorKnowledge, k: usize, gap_fraction: f64) -> Result<Self> {
        let schedule = compute_schedule(&prior, k)?;
        Ok(ProbeRelease {
            min_gap: gap_fraction * (prior.x0_min - prior.x0_clean),
            prior,
            schedule,
            phase: Phase::Ep1Steer,
            step_in_phase: 0,
            j: 0,
            round: 0,
            x0_set: None,
            release_flow: None,
            pending: Vec::new(),
            clean_due: Vec::new(),
            buffers: SampleBuffers::default(),
            counters: ControllerCounters::default(),
        })
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    fn interval(&self, episode: usize) -> (f64, f64) {
        let p = &self.prior;
        match episode {
            0 => (p.x0_clean, p.x0_min),
            1 => (p.x0_min, p.x0_max),
            _ => (p.x0_max, 1.5 * p.x0_max),
        }
    }

    fn draw_set_point<R: Rng + ?Sized>(&mut self, episode: usize, rng: &mut R) -> f64 {
        let (lo, hi) = self.interval(episode);
        loop {
            let x = rng.gen_range(lo..=hi);
            if episode == 0 && x - self.prior.x0_clean < self.min_gap {
                self.counters.gap_redraws += 1;
                continue;
            }
            return x;
        }
    }

    fn phase_len(&self, phase: Phase) -> u64 {
        let s = &self.schedule;
        match phase {
            Phase::Ep1Steer | Phase::Ep2Steer | Phase::Ep3Steer => 1,
            Phase::Ep1Clean => s.t_clean[0],
            Phase::Ep2Clean => s.t_clean[1],
            Phase::Ep3Clean => s.t_clean[2],
            Phase::Release => s.t_release,
            Phase::Ep4Clean => s.t_clean[3],
            Phase::Uncoordinated => u64::MAX,
        }
    }

    /// Moves past the current phase. Returns true when the round just ended.
    fn advance_phase(&mut self, t: u64) -> bool {
        use Phase::*;
        let k = self.schedule.k;
        let next = match self.phase {
            Ep1Steer => Ep1Clean,
            Ep2Steer => Ep2Clean,
            Ep3Steer => Ep3Clean,
            Ep1Clean | Ep2Clean | Ep3Clean => {
                self.clean_due.push(t + self.prior.s as u64 + 1);
                self.j += 1;
                let ep = self.phase.episode().unwrap_or(0);
                if self.j < k {
                    [Ep1Steer, Ep2Steer, Ep3Steer][ep]
                } else {
                    self.j = 0;
                    [Ep2Steer, Ep3Steer, Release][ep]
                }
            }
            Release => {
                self.release_flow = None;
                Ep4Clean
            }
            Ep4Clean => {
                self.clean_due.push(t + self.prior.s as u64 + 1);
                Ep1Steer
            }
            Uncoordinated => Uncoordinated,
        };
        let round_done = self.phase == Ep4Clean;
        self.phase = next;
        self.step_in_phase = 0;
        round_done
    }

    pub fn next_action<R: Rng + ?Sized>(
        &mut self,
        obs: &Observation<'_>,
        est: &Estimates,
        rng: &mut R,
    ) -> Result<Action> {
        let phase = self.phase;
        let round = self.round;
        let state = obs.state;
        let (b_s, x0_set, clamped) = match phase {
            Phase::Ep1Steer | Phase::Ep2Steer | Phase::Ep3Steer => {
                let ep = phase.episode().unwrap_or(0);
                let set = self.draw_set_point(ep, rng);
                let (raw, pos) = steer_control(set, obs.a);
                let dec = clamp_control(raw, state.q, obs.b);
                let clamped = pos || dec.clamped;
                if clamped {
                    self.counters.steer_clamps += 1;
                }
                self.pending.push(PendingSample { due: obs.t + self.prior.s as u64 + 1, episode: ep });
                self.x0_set = Some(set);
                (dec.b_s, Some(set), clamped)
            }
            Phase::Ep1Clean | Phase::Ep2Clean | Phase::Ep3Clean | Phase::Ep4Clean => (0.0, None, false),
            Phase::Release => {
                if self.release_flow.is_none() {
                    let f = EstimatedFlow::new(est, self.prior.x0_clean)?;
                    self.x0_set = Some(f.x0_c_hat);
                    self.release_flow = Some(f);
                }
                let f = self.release_flow.expect("set above");
                let set = f.x0_c_hat;
                let pred = predict_queue_s(state, &f);
                let dec = clamp_control(release_control(set, pred, &f, obs.a), state.q, obs.b);
                if dec.clamped {
                    self.counters.release_clamps += 1;
                }
                (dec.b_s, Some(set), dec.clamped)
            }
            Phase::Uncoordinated => return Err(Error::InternalConsistency("probe-release in baseline phase".into())),
        };

        self.step_in_phase += 1;
        let mut round_complete = None;
        if self.step_in_phase >= self.phase_len(phase) && self.advance_phase(obs.t) {
            if let Some(p) = self.pending.first() {
                return Err(Error::InternalConsistency(format!(
                    "round {round} ended with a sample still due at step {}",
                    p.due
                )));
            }
            round_complete = Some(std::mem::take(&mut self.buffers));
            self.round += 1;
        }
        Ok(Action { b_s, phase, round, x0_set, clamped, round_complete })
    }

    /// Feeds back the realized `(x0(t), F(t))`; captures any sample due at `t`
    /// and runs due clean checks.
    pub fn record_outflow(&mut self, t: u64, x0: f64, outflow: f64) -> Result<()> {
        let c = self.prior.x0_clean;
        let before = self.clean_due.len();
        self.clean_due.retain(|&due| due != t);
        let hits = (before - self.clean_due.len()) as u64;
        if hits > 0 {
            self.counters.clean_checks += hits;
            if x0 > c * (1.0 + 1e-9) {
                self.counters.clean_violations += hits;
            }
        }
        if self.clean_due.iter().any(|&d| d < t) {
            return Err(Error::InternalConsistency(format!("clean check missed before step {t}")));
        }

        let Some(pos) = self.pending.iter().position(|p| p.due <= t) else {
            return Ok(());
        };
        let p = self.pending.remove(pos);
        if p.due != t {
            return Err(Error::InternalConsistency(format!("sample due at step {} was not captured (now {t})", p.due)));
        }
        let (lo, hi) = self.interval(p.episode);
        let tol = 1e-9 * hi;
        let lo = if p.episode == 0 { lo + self.min_gap } else { lo };
        if x0 < lo - tol || x0 > hi + tol {
            self.counters.rejected_samples += 1;
            return Ok(());
        }
        let k = self.schedule.k;
        match p.episode {
            0 => match theta_alpha(x0, outflow, c, self.min_gap.max(0.0)) {
                Ok(th) if self.buffers.alpha.len() < k => self.buffers.alpha.push(th),
                _ => self.counters.rejected_samples += 1,
            },
            1 if self.buffers.f_max.len() < k => self.buffers.f_max.push(outflow),
            2 if self.buffers.r.len() < k => self.buffers.r.push(outflow),
            _ => {
                return Err(Error::InternalConsistency("sample buffer overflow".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum Controller {
    ProbeRelease(ProbeRelease),
    /// Every CAV passes straight through: `b_s = B`.
    NoCoordination,
}

impl Controller {
    pub fn next_action<R: Rng + ?Sized>(
        &mut self,
        obs: &Observation<'_>,
        est: &Estimates,
        rng: &mut R,
    ) -> Result<Action> {
        match self {
            Controller::ProbeRelease(p) => p.next_action(obs, est, rng),
            Controller::NoCoordination => Ok(Action {
                b_s: obs.b + obs.state.q,
                phase: Phase::Uncoordinated,
                round: 0,
                x0_set: None,
                clamped: false,
                round_complete: None,
            }),
        }
    }

    pub fn record_outflow(&mut self, t: u64, x0: f64, outflow: f64) -> Result<()> {
        match self {
            Controller::ProbeRelease(p) => p.record_outflow(t, x0, outflow),
            Controller::NoCoordination => Ok(()),
        }
    }

    pub fn counters(&self) -> ControllerCounters {
        match self {
            Controller::ProbeRelease(p) => p.counters,
            Controller::NoCoordination => ControllerCounters::default(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn reference_prior() -> PriorKnowledge {
        PriorKnowledge {
            s: 7,
            x0_clean: 9.0,
            x0_min: 13.0,
            x0_max: 20.0,
            delta1: 3.0,
            delta2: 3.5,
            lambda_cap: 11.0,
            mu1: -90.0,
        }
    }

    #[test]
    fn schedule_matches_published_constants() {
        let s = compute_schedule(&reference_prior(), 3).unwrap();
        assert_eq!(s.t_clean, [2, 4, 7, 51]);
        assert!((326..=327).contains(&s.t_release), "{}", s.t_release);
        assert_eq!(s.t_round, 9 + 3 * 13 + 51 + s.t_release);
    }

    #[test]
    fn schedule_exact_division() {
        let p = PriorKnowledge { x0_min: 12.0, ..reference_prior() };
        assert_eq!(compute_schedule(&p, 3).unwrap().t_clean[0], 1);
    }

    #[test]
    fn schedule_rejects_mu1() {
        let p = PriorKnowledge { mu1: -1.0, ..reference_prior() };
        assert!(matches!(compute_schedule(&p, 3), Err(Error::InvalidMu1(_))));
    }

    #[test]
    fn steer_examples() {
        assert_eq!(steer_control(10.0, 3.0), (7.0, false));
        assert_eq!(steer_control(10.0, 10.0), (0.0, false));
        assert_eq!(steer_control(2.0, 3.0), (0.0, true));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let set = rng.gen_range(9.0..=13.0);
            assert!(steer_control(set, 5.4).0 >= 3.6 - 1e-12);
        }
    }

    fn hat(alpha: f64, x0_c: f64, r: f64) -> EstimatedFlow {
        EstimatedFlow { alpha_hat: alpha, x0_clean: 9.0, x0_c_hat: x0_c, r_hat: r }
    }

    #[test]
    fn prediction_examples() {
        let f = hat(0.67, 16.7, 10.4);
        assert!(predict_queue(&TrafficState::empty(7), &f).iter().all(|&x| x == 0.0));
        let mut st = TrafficState::empty(7);
        st.x0 = 20.0;
        st.pipeline[0] = 5.0;
        assert!((predict_queue(&st, &f)[0] - 14.6).abs() < 1e-12);
        let st = TrafficState::with_queue(7, 8.0);
        assert!(predict_queue(&st, &f).iter().all(|&x| x == 0.0));
        assert_eq!(predict_queue_s(&st, &f), 0.0);
    }

    #[test]
    fn release_examples() {
        let f = hat(0.65, 16.7, 10.4);
        let at_c = release_control(16.7, 16.7, &f, 3.0);
        assert!((at_c - (16.7 - 16.7 + f.eval(16.7) - 3.0)).abs() < 1e-12);
        let f14 = hat(5.0 / 7.7, 16.7, 10.4);
        assert!((release_control(16.7, 16.7, &f14, 3.0) - 11.0).abs() < 1e-9);
        assert!((release_control(16.7, 20.0, &f, 3.0) - 4.1).abs() < 1e-12);
        let x = 12.0;
        assert!(release_control(x, x, &f, f.eval(x)).abs() < 1e-12);
    }

    #[test]
    fn clamp_examples() {
        let d = clamp_control(11.0, 2.0, 3.0);
        assert_eq!((d.b_s, d.b_qs, d.b_bs, d.b_bq), (5.0, 2.0, 3.0, 0.0));
        let d = clamp_control(-4.0, 2.0, 3.0);
        assert_eq!((d.b_s, d.b_bq), (0.0, 3.0));
        let d = clamp_control(1.5, 5.0, 0.0);
        assert_eq!((d.b_qs, d.b_bs), (1.5, 0.0));
    }

    #[test]
    fn phase_cycle_and_round_length() {
        let prior = reference_prior();
        let mut c = ProbeRelease::new(prior, 3, 0.05).unwrap();
        let sched = *c.schedule();
        let est = Estimates { alpha_hat: 0.65, f_max_hat: 16.0, r_hat: 10.5, eps_max_hat: 2.0, n: 0 };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut state = TrafficState::empty(7);
        state.q = 1e6;
        let mut phases = Vec::new();
        let mut done_at = None;
        for t in 0..=sched.t_round {
            let a = c.next_action(&Observation { t, state: &state, a: 3.0, b: 3.0 }, &est, &mut rng).unwrap();
            if phases.last() != Some(&a.phase) {
                phases.push(a.phase);
            }
            if matches!(a.phase, Phase::Ep1Clean | Phase::Ep4Clean) {
                assert_eq!(a.b_s, 0.0);
            }
            c.pending.clear();
            if a.round_complete.is_some() {
                done_at = Some(t);
            }
        }
        assert_eq!(done_at, Some(sched.t_round - 1));
        use Phase::*;
        let mut expect = vec![];
        for (s, cl) in [(Ep1Steer, Ep1Clean), (Ep2Steer, Ep2Clean), (Ep3Steer, Ep3Clean)] {
            for _ in 0..3 {
                expect.extend([s, cl]);
            }
        }
        expect.extend([Release, Ep4Clean, Ep1Steer]);
        assert_eq!(phases, expect);
    }
}
