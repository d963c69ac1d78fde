//! Scenario files (TOML) and their validated in-memory form.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::controller::PriorKnowledge;
use crate::error::{ensure, Error, Result};
use crate::estimator::EstimatorConfig;
use crate::model::{DemandModel, FlowParams, NoiseModel};
use crate::theory::{RolloutEstimates, TheoryInputs, TheoryOptions};
use crate::translator::SegmentGeometry;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControllerKind {
    #[default]
    ProbeRelease,
    NoCoordination,
}

/// The flow function as written in a scenario file. Give either `x0_c` or
/// the observable peak `f_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSpec {
    pub alpha: f64,
    pub x0_clean: f64,
    #[serde(default)]
    pub x0_c: Option<f64>,
    #[serde(default)]
    pub f_max: Option<f64>,
    pub r: f64,
}

impl FlowSpec {
    pub fn resolve(&self, eps_max: f64) -> Result<FlowParams> {
        match (self.x0_c, self.f_max) {
            (Some(x0_c), None) => FlowParams::new(self.alpha, self.x0_clean, x0_c, self.r),
            (None, Some(f)) => FlowParams::from_peak_flow(self.alpha, self.x0_clean, f, eps_max, self.r),
            _ => Err(Error::Config("flow needs exactly one of x0_c and f_max".into())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheorySpec {
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_rollouts")]
    pub rollouts: usize,
    #[serde(default)]
    pub rollout_estimates: RolloutEstimates,
    #[serde(default)]
    pub mu2: Option<f64>,
}

fn default_gamma() -> f64 {
    0.04
}
fn default_rollouts() -> usize {
    100_000
}

impl Default for TheorySpec {
    fn default() -> Self {
        TheorySpec {
            gamma: default_gamma(),
            rollouts: default_rollouts(),
            rollout_estimates: RolloutEstimates::Truth,
            mu2: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TranslatorSpec {
    pub length_m: f64,
    pub v_free: f64,
    #[serde(default)]
    pub ell_max: Option<usize>,
}

/// A plant change applied at the start of `step`. Unset fields stay as they are.
///
/// `f_max` moves the critical queue so the peak discharge becomes `f_max`
/// under the (possibly patched) slope and noise bound. `demand_scale` is
/// relative to the scenario's base demand.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Patch {
    pub step: u64,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub x0_c: Option<f64>,
    #[serde(default)]
    pub f_max: Option<f64>,
    #[serde(default)]
    pub r: Option<f64>,
    #[serde(default)]
    pub eps_max: Option<f64>,
    #[serde(default)]
    pub demand_scale: Option<f64>,
}

impl Patch {
    pub fn apply(
        &self,
        flow: &FlowParams,
        noise: &NoiseModel,
        base_demand: &DemandModel,
        demand: &DemandModel,
    ) -> Result<(FlowParams, NoiseModel, DemandModel)> {
        let mut f = *flow;
        let mut n = *noise;
        if let Some(e) = self.eps_max {
            n.eps_max = e;
        }
        if let Some(a) = self.alpha {
            f.alpha = a;
        }
        if let Some(r) = self.r {
            f.r = r;
        }
        match (self.x0_c, self.f_max) {
            (Some(_), Some(_)) => {
                return Err(Error::Config(format!("patch at step {} sets both x0_c and f_max", self.step)))
            }
            (Some(x), None) => f.x0_c = x,
            (None, Some(peak)) => f.x0_c = f.x0_clean + (peak - n.eps_max - f.x0_clean) / f.alpha,
            (None, None) => {}
        }
        let d = match self.demand_scale {
            Some(s) => {
                ensure(s > 0.0, || format!("demand_scale {s} must be positive"))?;
                base_demand.scaled(s)
            }
            None => *demand,
        };
        f.validate()?;
        n.validate()?;
        n.validate_against(&f)?;
        d.validate()?;
        Ok((f, n, d))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    #[serde(default)]
    name: Option<String>,
    horizon: u64,
    #[serde(default = "one")]
    replications: usize,
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_dt")]
    dt_s: f64,
    #[serde(default)]
    initial_x0: f64,
    #[serde(default)]
    controller: ControllerKind,
    #[serde(default = "yes")]
    evaluation: bool,
    flow: FlowSpec,
    noise: NoiseModel,
    demand: DemandModel,
    prior: PriorKnowledge,
    estimator: EstimatorConfig,
    #[serde(default)]
    theory: TheorySpec,
    #[serde(default)]
    translator: Option<TranslatorSpec>,
    #[serde(default)]
    schedule: Vec<Patch>,
}

fn one() -> usize {
    1
}
fn yes() -> bool {
    true
}
fn default_dt() -> f64 {
    10.0
}

/// A fully validated experiment description.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Scenario {
    pub name: String,
    pub horizon: u64,
    pub replications: usize,
    pub seed: u64,
    pub dt_s: f64,
    pub initial_x0: f64,
    pub controller: ControllerKind,
    /// Ground truth is known and estimation errors are computed.
    pub evaluation: bool,
    pub flow: FlowParams,
    pub noise: NoiseModel,
    pub demand: DemandModel,
    pub prior: PriorKnowledge,
    pub estimator: EstimatorConfig,
    pub theory: TheorySpec,
    pub translator: Option<TranslatorSpec>,
    pub schedule: Vec<Patch>,
}

impl Scenario {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: ScenarioFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let flow = file.flow.resolve(file.noise.eps_max)?;
        let mut schedule = file.schedule;
        schedule.sort_by_key(|p| p.step);
        let sc = Scenario {
            name: file.name.unwrap_or_else(|| "scenario".into()),
            horizon: file.horizon,
            replications: file.replications,
            seed: file.seed,
            dt_s: file.dt_s,
            initial_x0: file.initial_x0,
            controller: file.controller,
            evaluation: file.evaluation,
            flow,
            noise: file.noise,
            demand: file.demand,
            prior: file.prior,
            estimator: file.estimator,
            theory: file.theory,
            translator: file.translator,
            schedule,
        };
        sc.validate()?;
        Ok(sc)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.flow.validate()?;
        self.noise.validate()?;
        self.noise.validate_against(&self.flow)?;
        self.demand.validate()?;
        self.prior.validate()?;
        self.estimator.validate()?;
        ensure(self.replications >= 1, || "replications must be at least 1".into())?;
        ensure(self.dt_s > 0.0, || "dt_s must be positive".into())?;
        ensure(self.initial_x0 >= 0.0 && self.initial_x0.is_finite(), || {
            "initial_x0 must be finite and non-negative".into()
        })?;
        ensure(self.theory.gamma > 0.0 && self.theory.gamma < 0.25, || {
            format!("theory.gamma {} must lie in (0, 1/4)", self.theory.gamma)
        })?;
        if self.controller == ControllerKind::ProbeRelease {
            let sched = crate::controller::compute_schedule(&self.prior, self.estimator.k)?;
            ensure(self.horizon >= sched.t_round, || {
                format!("horizon {} is shorter than one round ({})", self.horizon, sched.t_round)
            })?;
        }
        ensure(self.horizon >= 1, || "horizon must be positive".into())?;
        if let Some(t) = &self.translator {
            let g = self.geometry().expect("translator present");
            let s = g.s()?;
            ensure(s == self.prior.s, || format!("translator geometry gives s = {s}, prior says {}", self.prior.s))?;
            ensure(t.ell_max != Some(0), || "ell_max must be at least 1".into())?;
        }
        // Every patch must leave a valid plant behind.
        let (mut f, mut n, mut d) = (self.flow, self.noise, self.demand);
        for p in &self.schedule {
            (f, n, d) = p.apply(&f, &n, &self.demand, &d)?;
        }
        Ok(())
    }

    pub fn geometry(&self) -> Option<SegmentGeometry> {
        self.translator.map(|t| SegmentGeometry { length_m: t.length_m, v_free: t.v_free, dt: self.dt_s })
    }

    pub fn theory_inputs(&self) -> TheoryInputs {
        TheoryInputs {
            flow: self.flow,
            noise: self.noise,
            demand: self.demand,
            prior: self.prior,
            lambda: self.estimator.lambda,
            k: self.estimator.k,
        }
    }

    pub fn theory_options(&self) -> TheoryOptions {
        TheoryOptions {
            gamma: self.theory.gamma,
            rollouts: self.theory.rollouts,
            seed: self.seed,
            rollout_estimates: self.theory.rollout_estimates,
            mu2: self.theory.mu2,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        horizon = 1000
        [flow]
        alpha = 0.65
        x0_clean = 9.0
        f_max = 16.0
        r = 10.5
        [noise]
        kind = "uniform"
        eps_max = 2.0
        [demand.a]
        kind = "uniform"
        lo = 1.8
        hi = 5.4
        [demand.b]
        kind = "uniform"
        lo = 1.8
        hi = 5.4
        [prior]
        s = 7
        x0_clean = 9.0
        x0_min = 13.0
        x0_max = 20.0
        delta1 = 3.0
        delta2 = 3.5
        lambda_cap = 11.0
        mu1 = -90.0
        [estimator]
        lambda = 0.08
        k = 3
    "#;

    #[test]
    fn parses_minimal_file() {
        let sc = Scenario::from_toml_str(MINIMAL).unwrap();
        assert!((sc.flow.q() - 14.0).abs() < 1e-12);
        assert_eq!(sc.estimator.gap_fraction, 0.05);
        assert_eq!(sc.theory.gamma, 0.04);
        assert_eq!(sc.controller, ControllerKind::ProbeRelease);
    }

    #[test]
    fn rejects_unknown_keys_and_short_horizon() {
        let bad = MINIMAL.replace("horizon = 1000", "horizon = 1000\nbogus = 1");
        assert!(matches!(Scenario::from_toml_str(&bad), Err(Error::Config(_))));
        let short = MINIMAL.replace("horizon = 1000", "horizon = 10");
        assert!(Scenario::from_toml_str(&short).is_err());
    }

    #[test]
    fn patch_moves_critical_queue() {
        let sc = Scenario::from_toml_str(MINIMAL).unwrap();
        let p = Patch { step: 5, f_max: Some(15.0), ..Patch::default() };
        let (f, _, _) = p.apply(&sc.flow, &sc.noise, &sc.demand, &sc.demand).unwrap();
        assert!((f.q() - 13.0).abs() < 1e-12);
        assert_eq!(f.r, sc.flow.r);
        let bad = Patch { step: 5, r: Some(20.0), ..Patch::default() };
        assert!(bad.apply(&sc.flow, &sc.noise, &sc.demand, &sc.demand).is_err());
    }
}
