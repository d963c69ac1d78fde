//! Turns fluid control decisions into per-vehicle speed instructions.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::estimator::EstimatedFlow;
use crate::model::ControlDecomposition;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentGeometry {
    /// Segment length in meters.
    pub length_m: f64,
    /// Free-flow speed in m/s.
    pub v_free: f64,
    /// Seconds per step.
    pub dt: f64,
}

impl SegmentGeometry {
    pub fn new(length_m: f64, v_free: f64, dt: f64) -> Result<Self> {
        let g = SegmentGeometry { length_m, v_free, dt };
        g.s()?;
        Ok(g)
    }

    /// Free-flow traverse time in whole steps; the geometry must make it exact.
    pub fn s(&self) -> Result<usize> {
        ensure(self.length_m > 0.0 && self.v_free > 0.0 && self.dt > 0.0, || {
            "segment length, free speed and dt must be positive".into()
        })?;
        let raw = self.length_m / (self.v_free * self.dt);
        let s = raw.round();
        ensure(s >= 1.0 && (raw - s).abs() <= 1e-9 * raw, || {
            format!("L / (v_free dt) = {raw} is not a positive integer")
        })?;
        Ok(s as usize)
    }
}

pub fn hold_speed(geom: &SegmentGeometry, ell: usize, ell_max: usize) -> Result<f64> {
    ensure(ell >= 1, || "hold slot ell must be at least 1".into())?;
    if ell > ell_max {
        return Err(Error::Domain(format!("hold slot {ell} exceeds ell_max = {ell_max}")));
    }
    let s = geom.s()?;
    Ok(geom.length_m / ((s + ell) as f64 * geom.dt))
}

/// Speed that covers the remaining distance in exactly `s` steps.
pub fn modified_speed(geom: &SegmentGeometry, t0: u64, t: u64, v_hold: f64) -> Result<f64> {
    if t < t0 {
        return Err(Error::Domain(format!("release step {t} precedes entry step {t0}")));
    }
    let s = geom.s()?;
    let remaining = geom.length_m - geom.dt * (t - t0) as f64 * v_hold;
    if !(remaining > 0.0) {
        return Err(Error::Domain(format!("no distance left to cover ({remaining} m)")));
    }
    Ok(remaining / (s as f64 * geom.dt))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeldVehicle {
    pub id: u64,
    pub t0: u64,
    /// Slot the hold speed was computed for.
    pub ell: usize,
    pub v_hold: f64,
    /// Current slot after aging.
    pub slot: usize,
}

/// Postponed CAVs grouped by how many steps beyond `s` they are from the bottleneck.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VirtualPipeline {
    /// `occupancy[l - 1]` is the fluid mass in slot `s + l`.
    pub occupancy: Vec<f64>,
    pub vehicles: Vec<HeldVehicle>,
    pub next_id: u64,
    /// Fractional vehicles carried between steps: `(pass-through, postponed, released)`.
    pub carry: (f64, f64, f64),
}

impl VirtualPipeline {
    pub fn new(ell_max: usize) -> Result<Self> {
        ensure(ell_max >= 1, || "ell_max must be at least 1".into())?;
        Ok(VirtualPipeline { occupancy: vec![0.0; ell_max], vehicles: Vec::new(), next_id: 0, carry: (0.0, 0.0, 0.0) })
    }

    pub fn ell_max(&self) -> usize {
        self.occupancy.len()
    }

    pub fn total(&self) -> f64 {
        self.occupancy.iter().sum()
    }

    fn release_fluid(&mut self, mut amount: f64) {
        for slot in self.occupancy.iter_mut() {
            let take = slot.min(amount);
            *slot -= take;
            amount -= take;
            if amount <= 0.0 {
                break;
            }
        }
    }

    /// One step closer to the bottleneck; slot 1 absorbs anything still held.
    fn age(&mut self) {
        let n = self.occupancy.len();
        if n > 1 {
            let merged = self.occupancy[0] + self.occupancy[1];
            self.occupancy.rotate_left(1);
            self.occupancy[0] = merged;
            self.occupancy[n - 1] = 0.0;
        }
        for v in self.vehicles.iter_mut() {
            v.slot = v.slot.saturating_sub(1).max(1);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    /// `per_slot[l - 1]` CAVs assigned to slot `s + l`.
    pub per_slot: Vec<f64>,
    /// Mass that found no capacity up to `ell_max` and was put in the last slot.
    pub overflow: f64,
}

/// Spreads the newly postponed CAVs over future slots, filling the earliest
/// slot with spare predicted capacity first. Assumes worst-case non-CAV
/// inflow `a_max + eps_max_hat` in every future step.
#[allow(clippy::too_many_arguments)]
pub fn allocate_postponed(
    b_bq: f64,
    pipeline: &VirtualPipeline,
    flow_hat: &EstimatedFlow,
    a_max: f64,
    eps_max_hat: f64,
    x0_pred_s: f64,
    b_s: f64,
) -> Result<Allocation> {
    ensure(b_bq >= 0.0, || format!("b_Bq {b_bq} must be non-negative"))?;
    let ell_max = pipeline.ell_max();
    let mut per_slot = vec![0.0; ell_max];
    if b_bq == 0.0 {
        return Ok(Allocation { per_slot, overflow: 0.0 });
    }
    if !(flow_hat.alpha_hat > 0.0) {
        return Err(Error::DegenerateEstimate(format!("alpha_hat = {}", flow_hat.alpha_hat)));
    }
    let worst = a_max + eps_max_hat;
    let set = flow_hat.x0_c_hat;
    let mut remaining = b_bq;
    let mut pred = x0_pred_s;
    for ell in 1..=ell_max {
        let inflow = if ell == 1 { b_s } else { pipeline.occupancy[ell - 1] };
        pred = (pred + worst + inflow - flow_hat.eval(pred)).max(0.0);
        let cap = set - pred + flow_hat.eval(pred) - worst;
        let take = remaining.min(cap.max(0.0));
        per_slot[ell - 1] = take;
        remaining -= take;
        if remaining <= 0.0 {
            return Ok(Allocation { per_slot, overflow: 0.0 });
        }
    }
    per_slot[ell_max - 1] += remaining;
    Ok(Allocation { per_slot, overflow: remaining })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InstructionKind {
    Free,
    Hold,
    Modify,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Instruction {
    pub vehicle_id: u64,
    pub speed_mps: f64,
    pub kind: InstructionKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TranslatorCounters {
    /// Released vehicles whose hold window had already run out.
    pub overdue: u64,
    /// Steps in which the postponed mass overflowed `ell_max`.
    pub overflow_steps: u64,
}

/// Stateful translator for one simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Translator {
    pub geometry: SegmentGeometry,
    pub pipeline: VirtualPipeline,
    #[serde(default)]
    pub counters: TranslatorCounters,
}

/// Inputs of one translation step besides the control decomposition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepContext {
    pub t: u64,
    pub flow_hat: EstimatedFlow,
    pub a_max: f64,
    pub eps_max_hat: f64,
    pub x0_pred_s: f64,
}

fn take_whole(carry: &mut f64, add: f64) -> usize {
    *carry += add;
    let n = (*carry + 1e-9).floor().max(0.0);
    *carry -= n;
    n as usize
}

/// Splits `n` whole vehicles across slots in proportion to `weights` by largest remainder.
fn largest_remainder(n: usize, weights: &[f64]) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    if n == 0 || total <= 0.0 {
        let mut out = vec![0; weights.len()];
        if n > 0 {
            out[0] = n;
        }
        return out;
    }
    let quotas: Vec<f64> = weights.iter().map(|w| n as f64 * w / total).collect();
    let mut out: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut left = n - out.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for i in order {
        if left == 0 {
            break;
        }
        out[i] += 1;
        left -= 1;
    }
    out
}

impl Translator {
    pub fn new(geometry: SegmentGeometry, ell_max: Option<usize>) -> Result<Self> {
        let s = geometry.s()?;
        Ok(Translator {
            geometry,
            pipeline: VirtualPipeline::new(ell_max.unwrap_or(10 * s))?,
            counters: TranslatorCounters::default(),
        })
    }

    pub fn held(&self) -> usize {
        self.pipeline.vehicles.len()
    }

    pub fn step(&mut self, dec: &ControlDecomposition, ctx: &StepContext) -> Result<Vec<Instruction>> {
        let geom = self.geometry;
        let s = geom.s()?;
        let ell_max = self.pipeline.ell_max();
        let mut out = Vec::new();

        // Release from the virtual queue, lowest slot first, FIFO within a slot.
        self.pipeline.release_fluid(dec.b_qs);
        let n_rel = take_whole(&mut self.pipeline.carry.2, dec.b_qs).min(self.pipeline.vehicles.len());
        self.pipeline.vehicles.sort_by(|a, b| a.slot.cmp(&b.slot).then(a.id.cmp(&b.id)));
        let slowest = geom.length_m / ((s + ell_max) as f64 * geom.dt);
        for v in self.pipeline.vehicles.drain(..n_rel) {
            let speed = match modified_speed(&geom, v.t0, ctx.t, v.v_hold) {
                Ok(x) => x,
                Err(_) => {
                    self.counters.overdue += 1;
                    slowest
                }
            };
            out.push(Instruction { vehicle_id: v.id, speed_mps: speed, kind: InstructionKind::Modify });
        }

        let alloc = allocate_postponed(
            dec.b_bq,
            &self.pipeline,
            &ctx.flow_hat,
            ctx.a_max,
            ctx.eps_max_hat,
            ctx.x0_pred_s,
            dec.b_s,
        )?;
        if alloc.overflow > 0.0 {
            self.counters.overflow_steps += 1;
        }
        self.pipeline.age();

        for _ in 0..take_whole(&mut self.pipeline.carry.0, dec.b_bs) {
            let id = self.pipeline.next_id;
            self.pipeline.next_id += 1;
            out.push(Instruction { vehicle_id: id, speed_mps: geom.v_free, kind: InstructionKind::Free });
        }

        let n_hold = take_whole(&mut self.pipeline.carry.1, dec.b_bq);
        for (i, (&mass, count)) in alloc.per_slot.iter().zip(largest_remainder(n_hold, &alloc.per_slot)).enumerate() {
            let ell = i + 1;
            self.pipeline.occupancy[i] += mass;
            let v_hold = hold_speed(&geom, ell, ell_max)?;
            for _ in 0..count {
                let id = self.pipeline.next_id;
                self.pipeline.next_id += 1;
                self.pipeline.vehicles.push(HeldVehicle { id, t0: ctx.t, ell, v_hold, slot: ell });
                out.push(Instruction { vehicle_id: id, speed_mps: v_hold, kind: InstructionKind::Hold });
            }
        }
        Ok(out)
    }
}

/// One `translate` request: a step's decomposition plus the translator state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranslateRequest {
    pub decomposition: ControlDecomposition,
    pub context: StepContext,
    pub geometry: SegmentGeometry,
    #[serde(default)]
    pub pipeline: Option<VirtualPipeline>,
    #[serde(default)]
    pub ell_max: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranslateResponse {
    pub instructions: Vec<Instruction>,
    pub pipeline: VirtualPipeline,
}

pub fn translate(req: &TranslateRequest) -> Result<TranslateResponse> {
    let mut tr = Translator::new(req.geometry, req.ell_max)?;
    if let Some(p) = &req.pipeline {
        tr.pipeline = p.clone();
    }
    let instructions = tr.step(&req.decomposition, &req.context)?;
    Ok(TranslateResponse { instructions, pipeline: tr.pipeline })
}
