//! Simulation loop, metrics and replication management.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ControllerKind, Scenario};
use crate::controller::{
    compute_schedule, predict_queue_s, AssumptionReport, Controller, ControllerCounters, Observation, ProbeRelease,
};
use crate::error::{Error, Result};
use crate::estimator::{
    critical_value, normalized_errors, reset_max_estimates, update_round, EstimatedFlow, Estimates, SampleBuffers,
    Truth,
};
use crate::model::{sample_demand, sample_outflow, DemandModel, FlowParams, NoiseModel, TrafficState};
use crate::theory::{check_baseline_conditions, BaselineReport};
use crate::translator::{InstructionKind, StepContext, Translator, TranslatorCounters};

/// Per-replication generators: one stream for the plant, one for the controller.
pub fn replication_rngs(master_seed: u64, rep: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    let mut plant = ChaCha8Rng::seed_from_u64(master_seed);
    plant.set_stream(2 * rep);
    let mut ctrl = ChaCha8Rng::seed_from_u64(master_seed);
    ctrl.set_stream(2 * rep + 1);
    (plant, ctrl)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub t: u64,
    pub x0: f64,
    pub l1: f64,
    pub q: f64,
    #[serde(rename = "F")]
    pub outflow: f64,
    #[serde(rename = "A")]
    pub a: f64,
    #[serde(rename = "B")]
    pub b: f64,
    pub b_s: f64,
    pub b_qs: f64,
    pub b_bq: f64,
    pub phase: String,
    pub round: u64,
    pub x0_set: Option<f64>,
    pub e2norm: Option<f64>,
    pub alpha_hat: f64,
    pub r_hat: f64,
    pub f_max_hat: f64,
    pub eps_max_hat: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRow {
    pub n: u64,
    /// Step on which the round ended.
    pub t_end: u64,
    pub updated: bool,
    pub reset: bool,
    pub alpha_hat: f64,
    pub f_max_hat: f64,
    pub r_hat: f64,
    pub eps_max_hat: f64,
    pub x0_c_hat: Option<f64>,
    pub x0_c_true: f64,
    pub e_alpha: Option<f64>,
    pub e_f_max: Option<f64>,
    pub e_r: Option<f64>,
    pub e_eps_max: Option<f64>,
    pub e2norm: Option<f64>,
}

/// What one step produced.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub row: MetricsRow,
    pub round: Option<RoundRow>,
    /// Samples handed to the estimator when a round ended on this step.
    pub samples: Option<SampleBuffers>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TranslatorTotals {
    pub free: u64,
    pub hold: u64,
    pub modify: u64,
    pub counters: TranslatorCounters,
}

/// Drives plant, controller and estimator for one replication.
#[derive(Debug, Clone)]
pub struct Simulation {
    scenario: Scenario,
    flow: FlowParams,
    noise: NoiseModel,
    demand: DemandModel,
    state: TrafficState,
    controller: Controller,
    est: Estimates,
    plant_rng: ChaCha8Rng,
    ctrl_rng: ChaCha8Rng,
    next_patch: usize,
    last_reset: u64,
    initial_l1: f64,
    cum_in: f64,
    cum_out: f64,
    l1_sum: f64,
    pub max_mass_residual: f64,
    pub outflow_clamps: u64,
    pub skipped_updates: u64,
    pub control_clamps: u64,
    last_round_end: Option<u64>,
    pub round_lengths: Vec<u64>,
    translator: Option<Translator>,
    pub translator_totals: TranslatorTotals,
    /// Largest gap between held vehicles and the fluid virtual queue.
    pub max_held_gap: f64,
}

impl Simulation {
    pub fn new(scenario: &Scenario, rep: u64) -> Result<Self> {
        scenario.validate()?;
        let (plant_rng, mut ctrl_rng) = replication_rngs(scenario.seed, rep);
        let controller = match scenario.controller {
            ControllerKind::ProbeRelease => Controller::ProbeRelease(ProbeRelease::new(
                scenario.prior,
                scenario.estimator.k,
                scenario.estimator.gap_fraction,
            )?),
            ControllerKind::NoCoordination => Controller::NoCoordination,
        };
        let est = scenario.estimator.initial_estimates(&mut ctrl_rng);
        let state = TrafficState::with_queue(scenario.prior.s, scenario.initial_x0);
        let translator = match (scenario.geometry(), scenario.translator) {
            (Some(g), Some(t)) => Some(Translator::new(g, t.ell_max)?),
            _ => None,
        };
        Ok(Simulation {
            flow: scenario.flow,
            noise: scenario.noise,
            demand: scenario.demand,
            initial_l1: state.l1(),
            state,
            controller,
            est,
            plant_rng,
            ctrl_rng,
            next_patch: 0,
            last_reset: 0,
            cum_in: 0.0,
            cum_out: 0.0,
            l1_sum: 0.0,
            max_mass_residual: 0.0,
            outflow_clamps: 0,
            skipped_updates: 0,
            control_clamps: 0,
            last_round_end: None,
            round_lengths: Vec::new(),
            translator,
            translator_totals: TranslatorTotals::default(),
            max_held_gap: 0.0,
            scenario: scenario.clone(),
        })
    }

    pub fn state(&self) -> &TrafficState {
        &self.state
    }

    pub fn estimates(&self) -> &Estimates {
        &self.est
    }

    pub fn flow(&self) -> &FlowParams {
        &self.flow
    }

    pub fn noise(&self) -> &NoiseModel {
        &self.noise
    }

    pub fn demand(&self) -> &DemandModel {
        &self.demand
    }

    pub fn controller_counters(&self) -> ControllerCounters {
        self.controller.counters()
    }

    pub fn truth(&self) -> Truth {
        Truth::new(&self.flow, &self.noise)
    }

    fn apply_due_patches(&mut self, t: u64) -> Result<()> {
        while let Some(p) = self.scenario.schedule.get(self.next_patch) {
            if p.step > t {
                break;
            }
            let (f, n, d) = p.apply(&self.flow, &self.noise, &self.scenario.demand, &self.demand)?;
            self.flow = f;
            self.noise = n;
            self.demand = d;
            self.next_patch += 1;
        }
        Ok(())
    }

    pub fn step(&mut self) -> Result<StepRecord> {
        let t = self.state.t;
        self.apply_due_patches(t)?;
        let inflow = sample_demand(&self.demand, &mut self.plant_rng);
        let action = self.controller.next_action(
            &Observation { t, state: &self.state, a: inflow.a, b: inflow.b },
            &self.est,
            &mut self.ctrl_rng,
        )?;
        if action.clamped {
            self.control_clamps += 1;
        }
        let x0 = self.state.x0;
        let out = sample_outflow(&self.flow, &self.noise, x0, &mut self.plant_rng)?;
        if out.clamped {
            self.outflow_clamps += 1;
        }
        self.controller.record_outflow(t, x0, out.value)?;

        let pre = self.state.clone();
        let dec = self.state.advance(inflow, out.value, action.b_s)?;

        self.cum_in += inflow.a + inflow.b;
        self.cum_out += out.value;
        let l1 = self.state.l1();
        let residual = (l1 - self.initial_l1 - (self.cum_in - self.cum_out)).abs();
        self.max_mass_residual = self.max_mass_residual.max(residual);
        self.l1_sum += l1;

        if let Some(tr) = self.translator.as_mut() {
            if let Ok(flow_hat) = EstimatedFlow::new(&self.est, self.scenario.prior.x0_clean) {
                let ctx = StepContext {
                    t,
                    flow_hat,
                    a_max: self.demand.a_max(),
                    eps_max_hat: self.est.eps_max_hat,
                    x0_pred_s: predict_queue_s(&pre, &flow_hat),
                };
                for ins in tr.step(&dec, &ctx)? {
                    match ins.kind {
                        InstructionKind::Free => self.translator_totals.free += 1,
                        InstructionKind::Hold => self.translator_totals.hold += 1,
                        InstructionKind::Modify => self.translator_totals.modify += 1,
                    }
                }
                self.translator_totals.counters = tr.counters;
                let gap = (tr.held() as f64 - self.state.q).abs();
                self.max_held_gap = self.max_held_gap.max(gap);
            }
        }

        let mut round_row = None;
        let samples = action.round_complete;
        if let Some(buffers) = &samples {
            if let Some(prev) = self.last_round_end {
                self.round_lengths.push(t - prev);
            }
            self.last_round_end = Some(t);
            let cfg = &self.scenario.estimator;
            let mut reset = false;
            if let Some(period) = cfg.reset_period {
                if t + 1 - self.last_reset >= period {
                    self.est = reset_max_estimates(&self.est, cfg);
                    self.last_reset = t + 1;
                    reset = true;
                }
            }
            let updated = buffers.is_complete(cfg.k);
            if updated {
                self.est = update_round(&self.est, buffers, cfg)?;
            } else {
                self.skipped_updates += 1;
                self.est.n += 1;
            }
            round_row = Some(self.round_row(t, updated, reset)?);
        }

        let e2norm = if self.scenario.evaluation {
            normalized_errors(&self.est, &self.truth()).ok().map(|e| e.norm2)
        } else {
            None
        };
        let row = MetricsRow {
            t,
            x0: self.state.x0,
            l1,
            q: self.state.q,
            outflow: out.value,
            a: inflow.a,
            b: inflow.b,
            b_s: dec.b_s,
            b_qs: dec.b_qs,
            b_bq: dec.b_bq,
            phase: action.phase.label().to_string(),
            round: action.round,
            x0_set: action.x0_set,
            e2norm,
            alpha_hat: self.est.alpha_hat,
            r_hat: self.est.r_hat,
            f_max_hat: self.est.f_max_hat,
            eps_max_hat: self.est.eps_max_hat,
        };
        Ok(StepRecord { row, round: round_row, samples })
    }

    fn round_row(&self, t: u64, updated: bool, reset: bool) -> Result<RoundRow> {
        let e = if self.scenario.evaluation { Some(normalized_errors(&self.est, &self.truth())?) } else { None };
        Ok(RoundRow {
            n: self.est.n,
            t_end: t,
            updated,
            reset,
            alpha_hat: self.est.alpha_hat,
            f_max_hat: self.est.f_max_hat,
            r_hat: self.est.r_hat,
            eps_max_hat: self.est.eps_max_hat,
            x0_c_hat: critical_value(&self.est, self.scenario.prior.x0_clean).ok(),
            x0_c_true: self.flow.x0_c,
            e_alpha: e.map(|e| e.e_alpha),
            e_f_max: e.map(|e| e.e_f_max),
            e_r: e.map(|e| e.e_r),
            e_eps_max: e.map(|e| e.e_eps_max),
            e2norm: e.map(|e| e.norm2),
        })
    }

    pub fn time_average_l1(&self) -> f64 {
        if self.state.t == 0 {
            0.0
        } else {
            self.l1_sum / self.state.t as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub replication: u64,
    pub steps: u64,
    pub time_avg_l1: f64,
    /// Prefix average of the l1 norm at a quarter of the horizon.
    pub prefix_l1_quarter: f64,
    pub final_l1: f64,
    pub throughput: f64,
    /// `dt * sum(l1) / sum(F)` in seconds; a Little's-law proxy, not a travel time.
    pub delay_proxy_s: f64,
    pub rounds: u64,
    pub measured_t_round: Option<u64>,
    /// Mean error norm over the second half of the rounds.
    pub tail_e2: Option<f64>,
    pub final_estimates: Estimates,
    pub final_x0_c_hat: Option<f64>,
    pub outflow_clamps: u64,
    pub control_clamps: u64,
    pub skipped_updates: u64,
    pub max_mass_residual: f64,
    pub controller: ControllerCounters,
    pub translator: Option<TranslatorTotals>,
    pub max_held_gap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub rows: Vec<MetricsRow>,
    pub rounds: Vec<RoundRow>,
    pub summary: RunSummary,
}

/// Runs one replication. Per-step rows are kept only when `record` is set.
pub fn run_scenario(scenario: &Scenario, rep: u64, record: bool) -> Result<RunOutput> {
    let mut sim = Simulation::new(scenario, rep)?;
    let horizon = scenario.horizon;
    let quarter = (horizon / 4).max(1);
    let mut rows = Vec::new();
    let mut rounds = Vec::new();
    let mut prefix_quarter = 0.0;
    for _ in 0..horizon {
        let rec = sim.step()?;
        if sim.state.t == quarter {
            prefix_quarter = sim.time_average_l1();
        }
        if let Some(r) = rec.round {
            rounds.push(r);
        }
        if record {
            rows.push(rec.row);
        }
    }
    let half = rounds.len() / 2;
    let tail: Vec<f64> = rounds[half..].iter().filter_map(|r| r.e2norm).collect();
    let tail_e2 = (!tail.is_empty()).then(|| tail.iter().sum::<f64>() / tail.len() as f64);
    let measured_t_round =
        sim.round_lengths.first().copied().filter(|&first| sim.round_lengths.iter().all(|&l| l == first));
    let summary = RunSummary {
        replication: rep,
        steps: horizon,
        time_avg_l1: sim.time_average_l1(),
        prefix_l1_quarter: prefix_quarter,
        final_l1: sim.state.l1(),
        throughput: sim.cum_out / horizon as f64,
        delay_proxy_s: if sim.cum_out > 0.0 { scenario.dt_s * sim.l1_sum / sim.cum_out } else { f64::INFINITY },
        rounds: rounds.len() as u64,
        measured_t_round,
        tail_e2,
        final_estimates: sim.est,
        final_x0_c_hat: critical_value(&sim.est, scenario.prior.x0_clean).ok(),
        outflow_clamps: sim.outflow_clamps,
        control_clamps: sim.control_clamps,
        skipped_updates: sim.skipped_updates,
        max_mass_residual: sim.max_mass_residual,
        controller: sim.controller_counters(),
        translator: sim.translator.as_ref().map(|_| sim.translator_totals),
        max_held_gap: sim.translator.as_ref().map(|_| sim.max_held_gap),
    };
    Ok(RunOutput { rows, rounds, summary })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

fn mean_std(xs: &[f64]) -> MeanStd {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() > 1 { (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    MeanStd { mean, std }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub replications: usize,
    pub time_avg_l1: MeanStd,
    pub throughput: MeanStd,
    pub delay_proxy_s: MeanStd,
    pub tail_e2: Option<MeanStd>,
}

/// Static checks reported next to every run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioChecks {
    pub baseline: BaselineReport,
    pub assumptions: AssumptionReport,
    pub schedule: Option<crate::controller::Schedule>,
    pub y: f64,
}

pub fn scenario_checks(scenario: &Scenario) -> Result<ScenarioChecks> {
    let f = &scenario.flow;
    Ok(ScenarioChecks {
        baseline: check_baseline_conditions(f, &scenario.noise, &scenario.demand, scenario.initial_x0),
        assumptions: scenario.prior.check_against(f, &scenario.noise, &scenario.demand, None),
        schedule: compute_schedule(&scenario.prior, scenario.estimator.k).ok(),
        y: crate::theory::error_bound_y(scenario.estimator.lambda, scenario.noise.sigma2(), f.r, f.alpha, f.gap())?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloSummary {
    pub scenario: String,
    pub seed: u64,
    pub checks: ScenarioChecks,
    pub aggregate: Aggregate,
    pub runs: Vec<RunSummary>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloOutput {
    pub summary: MonteCarloSummary,
    pub runs: Vec<RunOutput>,
}

/// Runs `n_reps` replications in parallel; results are ordered by replication.
pub fn run_monte_carlo(scenario: &Scenario, n_reps: usize, record: bool) -> Result<MonteCarloOutput> {
    if n_reps == 0 {
        return Err(Error::InvalidParams("at least one replication is required".into()));
    }
    let runs: Vec<RunOutput> =
        (0..n_reps as u64).into_par_iter().map(|rep| run_scenario(scenario, rep, record)).collect::<Result<_>>()?;
    let pick = |f: fn(&RunSummary) -> f64| mean_std(&runs.iter().map(|r| f(&r.summary)).collect::<Vec<_>>());
    let tails: Vec<f64> = runs.iter().filter_map(|r| r.summary.tail_e2).collect();
    let aggregate = Aggregate {
        replications: n_reps,
        time_avg_l1: pick(|s| s.time_avg_l1),
        throughput: pick(|s| s.throughput),
        delay_proxy_s: pick(|s| s.delay_proxy_s),
        tail_e2: (tails.len() == runs.len()).then(|| mean_std(&tails)),
    };
    let summary = MonteCarloSummary {
        scenario: scenario.name.clone(),
        seed: scenario.seed,
        checks: scenario_checks(scenario)?,
        aggregate,
        runs: runs.iter().map(|r| r.summary.clone()).collect(),
    };
    Ok(MonteCarloOutput { summary, runs })
}

#[derive(Serialize)]
struct ReplicationCsvRow {
    replication: u64,
    steps: u64,
    time_avg_l1: f64,
    prefix_l1_quarter: f64,
    final_l1: f64,
    throughput: f64,
    delay_proxy_s: f64,
    rounds: u64,
    measured_t_round: Option<u64>,
    tail_e2: Option<f64>,
    alpha_hat: f64,
    f_max_hat: f64,
    r_hat: f64,
    eps_max_hat: f64,
    outflow_clamps: u64,
    control_clamps: u64,
    skipped_updates: u64,
    rejected_samples: u64,
    clean_violations: u64,
}

/// Writes `replications.csv`, `rounds_<rep>.csv`, optional
/// `trajectory_<rep>.csv` and `summary.json` into `dir`.
pub fn write_outputs(out: &MonteCarloOutput, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("replications.csv"))?;
    for s in &out.summary.runs {
        w.serialize(ReplicationCsvRow {
            replication: s.replication,
            steps: s.steps,
            time_avg_l1: s.time_avg_l1,
            prefix_l1_quarter: s.prefix_l1_quarter,
            final_l1: s.final_l1,
            throughput: s.throughput,
            delay_proxy_s: s.delay_proxy_s,
            rounds: s.rounds,
            measured_t_round: s.measured_t_round,
            tail_e2: s.tail_e2,
            alpha_hat: s.final_estimates.alpha_hat,
            f_max_hat: s.final_estimates.f_max_hat,
            r_hat: s.final_estimates.r_hat,
            eps_max_hat: s.final_estimates.eps_max_hat,
            outflow_clamps: s.outflow_clamps,
            control_clamps: s.control_clamps,
            skipped_updates: s.skipped_updates,
            rejected_samples: s.controller.rejected_samples,
            clean_violations: s.controller.clean_violations,
        })?;
    }
    w.flush()?;
    for run in &out.runs {
        let rep = run.summary.replication;
        let mut w = csv::Writer::from_path(dir.join(format!("rounds_{rep}.csv")))?;
        for r in &run.rounds {
            w.serialize(r)?;
        }
        w.flush()?;
        if !run.rows.is_empty() {
            let mut w = csv::Writer::from_path(dir.join(format!("trajectory_{rep}.csv")))?;
            for r in &run.rows {
                w.serialize(r)?;
            }
            w.flush()?;
        }
    }
    let json = serde_json::to_string_pretty(&out.summary)?;
    std::fs::write(dir.join("summary.json"), json + "\n")?;
    Ok(())
}
