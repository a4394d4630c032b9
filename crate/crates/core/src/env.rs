//! Slot-by-slot system dynamics: vehicle motion, delayed estimates, queues,
//! information ages and the energy ledger.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::edge::{self, Action, EnergyLedger, QueueState, SurrogateBreakdown, SystemSnapshot};
use crate::error::{Error, Result};
use crate::scenario::{self, rng_for, RecoveryMode, SimConfig, SimRng, VehicleState};
use crate::sensing::AoIVector;

/// Random stream identifiers; each consumer owns an independent stream so
/// that e.g. a policy drawing more random numbers never perturbs the
/// trajectory.
pub mod streams {
    pub const KINEMATICS: u64 = 0;
    pub const ESTIMATE: u64 = 1;
    pub const RECOVERY: u64 = 2;
    pub const POLICY: u64 = 3;
}

/// What happened in one slot.
#[derive(Clone, Debug)]
pub struct SlotOutcome {
    pub slot: usize,
    pub pi: Vec<bool>,
    pub f: Vec<f64>,
    /// Objective terms on the true state.
    pub breakdown: SurrogateBreakdown,
    pub reward: f64,
    /// Per-vehicle energy charged to the ledger (sums to `e_total`).
    pub energy: Vec<f64>,
    pub e_total: f64,
    /// Backlogs after the slot.
    pub backlog: Vec<f64>,
    /// Information ages after the slot.
    pub aoi: Vec<AoIVector>,
    /// Deficit queue after the slot.
    pub z: f64,
    /// Vehicles whose range was clamped this slot.
    pub clamped: Vec<bool>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Environment {
    pub cfg: SimConfig,
    pub vehicles: Vec<VehicleState>,
    pub aoi: Vec<AoIVector>,
    pub queues: Vec<QueueState>,
    pub ledger: EnergyLedger,
    pub slot: usize,
    #[serde(skip, default = "placeholder_rng")]
    kinematics_rng: SimRng,
    #[serde(skip, default = "placeholder_rng")]
    estimate_rng: SimRng,
    #[serde(skip, default = "placeholder_rng")]
    recovery_rng: SimRng,
}

fn placeholder_rng() -> SimRng {
    rng_for(0, 0)
}

impl Environment {
    pub fn new(cfg: &SimConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut kinematics_rng = rng_for(seed, streams::KINEMATICS);
        let vehicles = scenario::initial_vehicles(cfg, &mut kinematics_rng);
        Ok(Environment {
            cfg: cfg.clone(),
            vehicles,
            aoi: vec![AoIVector::fresh(); cfg.vehicles],
            queues: vec![QueueState::new(cfg.queue_discipline); cfg.vehicles],
            ledger: EnergyLedger::default(),
            slot: 0,
            kinematics_rng,
            estimate_rng: rng_for(seed, streams::ESTIMATE),
            recovery_rng: rng_for(seed, streams::RECOVERY),
        })
    }

    /// Restarts queues, ages and positions but keeps the deficit queue.
    pub fn reset_episode(&mut self) {
        let cfg = &self.cfg;
        self.vehicles = scenario::initial_vehicles(cfg, &mut self.kinematics_rng);
        self.aoi = vec![AoIVector::fresh(); cfg.vehicles];
        self.queues = vec![QueueState::new(cfg.queue_discipline); cfg.vehicles];
        self.ledger.e_slot = 0.0;
        self.slot = 0;
    }

    /// Moves vehicles (from the second slot on) and draws the delayed
    /// estimates with the current ages. Returns the base station's view.
    pub fn begin_slot(&mut self) -> SystemSnapshot {
        let tau = self.cfg.slot_duration;
        for k in 0..self.vehicles.len() {
            let mut v = if self.slot > 0 {
                scenario::step_kinematics(&self.vehicles[k], &self.cfg, tau, &mut self.kinematics_rng)
            } else {
                self.vehicles[k].clone()
            };
            v = scenario::update_estimate(&v, &self.aoi[k], &self.cfg, &mut self.estimate_rng);
            self.vehicles[k] = v;
        }
        self.estimated_snapshot()
    }

    pub fn true_snapshot(&self) -> SystemSnapshot {
        SystemSnapshot {
            slot: self.slot,
            vehicles: self.vehicles.clone(),
            aoi: self.aoi.clone(),
            queues: self.queues.clone(),
            z: self.ledger.z,
        }
    }

    /// Snapshot in which range and azimuth are the delayed estimates.
    pub fn estimated_snapshot(&self) -> SystemSnapshot {
        let mut snap = self.true_snapshot();
        for v in &mut snap.vehicles {
            let d = v.d_hat.max(self.cfg.min_range);
            v.d = d;
            v.theta = v.theta_hat;
            v.position = [d * v.theta_hat.sin(), d * v.theta_hat.cos()];
        }
        snap
    }

    /// Applies an action to the true state and closes the slot.
    pub fn apply(&mut self, action: &Action) -> Result<SlotOutcome> {
        let truth = self.true_snapshot();
        let breakdown = edge::surrogate_objective(&truth, action, &self.cfg)?;
        if !breakdown.total.is_finite() {
            return Err(Error::NonFinite(format!("objective at slot {}", self.slot)));
        }
        let cfg = &self.cfg;
        let mut energy = Vec::with_capacity(cfg.vehicles);
        for k in 0..cfg.vehicles {
            let completion = self.queues[k].step(action.pi[k], action.f[k] * cfg.slot_duration, cfg.task_cycles);
            debug_assert_eq!(completion, breakdown.outcomes[k].completion);
            self.aoi[k] = breakdown.outcomes[k].aoi;
            let out = &breakdown.outcomes[k];
            let recovery = match cfg.recovery_mode {
                RecoveryMode::Expected => out.recovery_energy,
                RecoveryMode::Sampled => {
                    if self.recovery_rng.random::<f64>() < out.p_misa {
                        cfg.recovery_energy
                    } else {
                        0.0
                    }
                }
            };
            energy.push(out.compute_energy + recovery);
        }
        let e_total: f64 = energy.iter().sum();
        self.ledger.record(e_total, cfg.energy_budget);
        let outcome = SlotOutcome {
            slot: self.slot,
            pi: action.pi.clone(),
            f: action.f.clone(),
            reward: -breakdown.total,
            breakdown,
            energy,
            e_total,
            backlog: self.queues.iter().map(|q| q.backlog).collect(),
            aoi: self.aoi.clone(),
            z: self.ledger.z,
            clamped: self.vehicles.iter().map(|v| v.range_clamped).collect(),
        };
        self.slot += 1;
        Ok(outcome)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{radar_only, vision_only};
    use crate::scenario::default_config;

    #[test]
    fn radar_only_ages_grow_linearly() {
        let cfg = default_config();
        let mut env = Environment::new(&cfg, 3).unwrap();
        for n in 1..=200u64 {
            let snap = env.begin_slot();
            let d = radar_only(&snap, &cfg).unwrap();
            let out = env.apply(&d.action).unwrap();
            assert!(out.aoi.iter().all(|a| a.a_tan == 1 + n && a.a_rad == 1));
            assert!(out.breakdown.outcomes.iter().all(|o| o.compute_energy == 0.0));
        }
    }

    #[test]
    fn ledger_matches_outcomes() {
        let cfg = default_config();
        let mut env = Environment::new(&cfg, 5).unwrap();
        let mut sum = 0.0;
        for _ in 0..100 {
            let snap = env.begin_slot();
            let d = vision_only(&snap, &cfg).unwrap();
            let out = env.apply(&d.action).unwrap();
            sum += out.e_total;
            assert!((out.energy.iter().sum::<f64>() - out.e_total).abs() < 1e-12);
        }
        assert!((env.ledger.cumulative - sum).abs() < 1e-9);
    }
}
