//! Visual-task queues at the edge server, slot energy, the virtual energy
//! deficit queue and the per-slot drift-plus-penalty objective.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::Beamformer;
use crate::scenario::{QueueDiscipline, SimConfig, VehicleState};
use crate::sensing::{self, AoIVector, Fim2x2, Pcrb, UncertaintyPair};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Task {
    /// Cycles still to execute.
    pub remaining: f64,
    /// Queue-local slot index at which the frame was captured.
    pub generated: u64,
}

/// Per-vehicle queue of visual tasks.
///
/// Within a slot the new frame (if any) joins first and the server then works
/// for `f tau` cycles, so a frame can finish in the slot it was captured in.
/// Service is non-preemptive and work-conserving: leftover cycles flow to the
/// next task picked by the configured discipline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueueState {
    /// Slots stepped so far.
    pub clock: u64,
    pub backlog: f64,
    pub in_service: Option<Task>,
    /// Waiting tasks ordered by generation slot.
    pub waiting: VecDeque<Task>,
    pub discipline: QueueDiscipline,
}

/// Result of one queue step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Completion {
    pub completed: bool,
    /// Sojourn (slots, capture slot included) of the freshest task completed
    /// this slot; 0 when nothing completed.
    pub t_queue: u64,
}

impl QueueState {
    pub fn new(discipline: QueueDiscipline) -> Self {
        QueueState { clock: 0, backlog: 0.0, in_service: None, waiting: VecDeque::new(), discipline }
    }

    /// A queue holding one partially served task that has already waited
    /// `age` slots.
    pub fn with_task(remaining: f64, age: u64, discipline: QueueDiscipline) -> Self {
        let mut q = QueueState::new(discipline);
        if remaining > 0.0 {
            q.clock = age;
            q.in_service = Some(Task { remaining, generated: 0 });
            q.backlog = remaining;
        }
        q
    }

    pub fn is_empty(&self) -> bool {
        self.in_service.is_none() && self.waiting.is_empty()
    }

    pub fn task_count(&self) -> usize {
        self.waiting.len() + usize::from(self.in_service.is_some())
    }

    /// Age in slots of the oldest unfinished task.
    pub fn pending_task_age(&self) -> Option<u64> {
        let oldest = match (self.in_service, self.waiting.front()) {
            (Some(a), Some(b)) => a.generated.min(b.generated),
            (Some(a), None) => a.generated,
            (None, Some(b)) => b.generated,
            (None, None) => return None,
        };
        Some(self.clock - oldest)
    }

    /// Order in which the server would take tasks this slot.
    fn service_order<'a>(&'a self, arrival: Option<Task>) -> Box<dyn Iterator<Item = Task> + 'a> {
        let head = self.in_service.into_iter();
        match self.discipline {
            QueueDiscipline::Lcfs => Box::new(head.chain(arrival).chain(self.waiting.iter().rev().copied())),
            QueueDiscipline::Fifo => Box::new(head.chain(self.waiting.iter().copied()).chain(arrival)),
        }
    }

    /// Completion outcome of [`QueueState::step`] without mutating.
    pub fn preview(&self, arrives: bool, service: f64, task_cycles: f64) -> Completion {
        let arrival = arrives.then_some(Task { remaining: task_cycles, generated: self.clock });
        let mut budget = service.max(0.0);
        let mut freshest: Option<u64> = None;
        for task in self.service_order(arrival) {
            if task.remaining > budget {
                break;
            }
            budget -= task.remaining;
            let age = self.clock - task.generated + 1;
            freshest = Some(freshest.map_or(age, |f| f.min(age)));
        }
        Completion { completed: freshest.is_some(), t_queue: freshest.unwrap_or(0) }
    }

    /// Advances one slot: optional arrival of a `task_cycles` frame, then
    /// `service` cycles of work.
    pub fn step(&mut self, arrives: bool, service: f64, task_cycles: f64) -> Completion {
        let now = self.clock;
        if arrives {
            self.waiting.push_back(Task { remaining: task_cycles, generated: now });
            self.backlog += task_cycles;
        }
        let mut budget = service.max(0.0);
        let mut freshest: Option<u64> = None;
        loop {
            if self.in_service.is_none() {
                let next_ready = match self.discipline {
                    QueueDiscipline::Lcfs => self.waiting.back(),
                    QueueDiscipline::Fifo => self.waiting.front(),
                };
                match next_ready {
                    Some(t) if budget > 0.0 || t.remaining <= 0.0 => {}
                    _ => break,
                }
                self.in_service = match self.discipline {
                    QueueDiscipline::Lcfs => self.waiting.pop_back(),
                    QueueDiscipline::Fifo => self.waiting.pop_front(),
                };
            }
            let task = self.in_service.as_mut().expect("task in service");
            if task.remaining > budget {
                task.remaining -= budget;
                self.backlog -= budget;
                break;
            }
            budget -= task.remaining;
            self.backlog -= task.remaining;
            let age = now - task.generated + 1;
            freshest = Some(freshest.map_or(age, |f| f.min(age)));
            self.in_service = None;
        }
        if self.is_empty() {
            self.backlog = 0.0;
        } else {
            self.backlog = self.backlog.max(0.0);
        }
        self.clock += 1;
        Completion { completed: freshest.is_some(), t_queue: freshest.unwrap_or(0) }
    }
}

/// Computing (DVFS) energy of one vehicle's allocation over one slot.
pub fn compute_energy(f: f64, cfg: &SimConfig) -> f64 {
    cfg.capacitance * f * f * f * cfg.slot_duration
}

/// Total slot energy with expected recovery cost.
pub fn slot_energy(f: &[f64], p_misa: &[f64], cfg: &SimConfig) -> f64 {
    let compute: f64 = f.iter().map(|&x| compute_energy(x, cfg)).sum();
    let recovery: f64 = p_misa.iter().map(|p| p * cfg.recovery_energy).sum();
    compute + recovery
}

pub fn step_virtual_queue(z: f64, e_slot: f64, e_budget: f64) -> f64 {
    (z + e_slot - e_budget).max(0.0)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyLedger {
    pub e_slot: f64,
    pub z: f64,
    pub cumulative: f64,
}

impl EnergyLedger {
    pub fn record(&mut self, e_slot: f64, e_budget: f64) {
        self.e_slot = e_slot;
        self.cumulative += e_slot;
        self.z = step_virtual_queue(self.z, e_slot, e_budget);
    }
}

/// `L = (sum Q^2 + Z^2) / 2`.
pub fn lyapunov(backlogs: &[f64], z: f64) -> f64 {
    0.5 * backlogs.iter().map(|q| q * q).sum::<f64>() + 0.5 * z * z
}

/// Joint decision for one slot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub pi: Vec<bool>,
    pub f: Vec<f64>,
    pub beams: Vec<Beamformer>,
}

impl Action {
    pub fn validate(&self, cfg: &SimConfig) -> Result<()> {
        let k = cfg.vehicles;
        if self.pi.len() != k || self.f.len() != k || self.beams.len() != k {
            return Err(Error::Shape(format!(
                "action sized pi={} f={} beams={} for {k} vehicles",
                self.pi.len(),
                self.f.len(),
                self.beams.len()
            )));
        }
        if let Some(bad) = self.f.iter().find(|f| !(f.is_finite() && **f >= 0.0)) {
            return Err(Error::Constraint(format!("cpu frequency {bad} is not a finite non-negative value")));
        }
        let total: f64 = self.f.iter().sum();
        if total > cfg.cpu_max * (1.0 + 1e-12) + 1e-9 {
            return Err(Error::Constraint(format!("total cpu {total} exceeds F_max {}", cfg.cpu_max)));
        }
        for (i, beam) in self.beams.iter().enumerate() {
            if beam.phases.len() != cfg.antennas {
                return Err(Error::Shape(format!("beam {i} has {} phases for {} antennas", beam.phases.len(), cfg.antennas)));
            }
            if beam.phases.iter().any(|p| !p.is_finite()) {
                return Err(Error::Constraint(format!("beam {i} has a non-finite phase")));
            }
        }
        Ok(())
    }
}

/// Everything the per-slot objective needs about the system before the
/// decision: true kinematics, information ages, queues and the deficit queue.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemSnapshot {
    pub slot: usize,
    pub vehicles: Vec<VehicleState>,
    pub aoi: Vec<AoIVector>,
    pub queues: Vec<QueueState>,
    pub z: f64,
}

/// Consequences of one vehicle's share of an action.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VehicleOutcome {
    pub completion: Completion,
    /// Camera age after the slot.
    pub aoi: AoIVector,
    pub sigma: UncertaintyPair,
    pub pcrb: Pcrb,
    pub p_misa: f64,
    pub compute_energy: f64,
    /// Expected recovery energy `p_misa E_recovery`.
    pub recovery_energy: f64,
}

impl VehicleOutcome {
    pub fn energy(&self) -> f64 {
        self.compute_energy + self.recovery_energy
    }
}

/// Age after a slot: a completed frame only refreshes the camera
/// information when it is newer than what the base station already holds.
pub fn next_aoi(aoi: AoIVector, completion: Completion) -> AoIVector {
    let informative = completion.completed && completion.t_queue <= aoi.a_tan + 1;
    sensing::update_aoi(aoi, informative, completion.t_queue)
}

/// Sensing and energy consequences for a vehicle given the completion
/// outcome of its queue. PCRB and misalignment use the post-slot ages.
pub fn vehicle_outcome(
    vehicle: &VehicleState,
    aoi: AoIVector,
    completion: Completion,
    f: f64,
    beam: &[num_complex::Complex64],
    cfg: &SimConfig,
) -> VehicleOutcome {
    let data = sensing::data_fim(beam, vehicle.theta, cfg);
    vehicle_outcome_with_fim(vehicle, aoi, completion, f, &data, cfg)
}

/// [`vehicle_outcome`] with the beam's data information precomputed.
pub fn vehicle_outcome_with_fim(
    vehicle: &VehicleState,
    aoi: AoIVector,
    completion: Completion,
    f: f64,
    data: &Fim2x2,
    cfg: &SimConfig,
) -> VehicleOutcome {
    let aoi = next_aoi(aoi, completion);
    let sigma = sensing::uncertainty(&aoi, vehicle.u_rad, vehicle.u_tan, cfg);
    let prior = sensing::prior_fim(&sigma, vehicle.d);
    let pcrb = sensing::pcrb_theta(data, &prior, cfg.pcrb_cap);
    let p_misa = sensing::misalignment_probability(sigma.sigma_tan, vehicle.d, cfg.beamwidth);
    VehicleOutcome {
        completion,
        aoi,
        sigma,
        pcrb,
        p_misa,
        compute_energy: compute_energy(f, cfg),
        recovery_energy: p_misa * cfg.recovery_energy,
    }
}

/// Drift-plus-penalty terms of one action.
#[derive(Clone, Debug, PartialEq)]
pub struct SurrogateBreakdown {
    /// `V sum PCRB / pcrb_unit`.
    pub pcrb_term: f64,
    /// `sum (Q / q_unit) (pi C - f tau) / q_unit`.
    pub queue_term: f64,
    /// `Z E_total`.
    pub energy_term: f64,
    pub total: f64,
    pub e_total: f64,
    pub outcomes: Vec<VehicleOutcome>,
}

/// Queue drift contribution of one vehicle.
pub fn queue_drift(backlog: f64, arrives: bool, f: f64, cfg: &SimConfig) -> f64 {
    let arrival = if arrives { cfg.task_cycles } else { 0.0 };
    (backlog / cfg.queue_unit) * ((arrival - f * cfg.slot_duration) / cfg.queue_unit)
}

/// Per-slot objective `V sum PCRB + sum Q (pi C - f tau) + Z E_total`.
pub fn surrogate_objective(snap: &SystemSnapshot, action: &Action, cfg: &SimConfig) -> Result<SurrogateBreakdown> {
    action.validate(cfg)?;
    if snap.vehicles.len() != cfg.vehicles || snap.aoi.len() != cfg.vehicles || snap.queues.len() != cfg.vehicles {
        return Err(Error::Shape("snapshot does not match the configured vehicle count".into()));
    }
    let mut outcomes = Vec::with_capacity(cfg.vehicles);
    let mut pcrb_sum = 0.0;
    let mut queue_term = 0.0;
    let mut e_total = 0.0;
    for k in 0..cfg.vehicles {
        let service = action.f[k] * cfg.slot_duration;
        let completion = snap.queues[k].preview(action.pi[k], service, cfg.task_cycles);
        let v = action.beams[k].vector();
        let out = vehicle_outcome(&snap.vehicles[k], snap.aoi[k], completion, action.f[k], &v, cfg);
        pcrb_sum += out.pcrb.value;
        queue_term += queue_drift(snap.queues[k].backlog, action.pi[k], action.f[k], cfg);
        e_total += out.energy();
        outcomes.push(out);
    }
    let pcrb_term = cfg.lyapunov_v * pcrb_sum / cfg.pcrb_unit;
    let energy_term = snap.z * e_total;
    Ok(SurrogateBreakdown {
        pcrb_term,
        queue_term,
        energy_term,
        total: pcrb_term + queue_term + energy_term,
        e_total,
        outcomes,
    })
}

/// Slot reward: the negated surrogate objective.
pub fn reward(snap: &SystemSnapshot, action: &Action, cfg: &SimConfig) -> Result<f64> {
    Ok(-surrogate_objective(snap, action, cfg)?.total)
}
