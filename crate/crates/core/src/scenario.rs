//! Configuration constants and ground-truth vehicle kinematics.
//!
//! Vehicles drive along a straight road parallel to the base-station array
//! (the array lies on the x axis, broadside along +y). The road is a finite
//! window `[-road_half_length, road_half_length)` with wrap-around, so the
//! geometry stays stationary over arbitrarily long runs.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sensing::{self, AoIVector};

/// Deterministic, portable generator used everywhere in the crate.
pub type SimRng = ChaCha8Rng;

/// Builds an independent generator for `(seed, stream)`.
pub fn rng_for(seed: u64, stream: u64) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// How the beam-recovery term of the slot energy is accounted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecoveryMode {
    /// `P_misa * E_recovery`, the expectation.
    Expected,
    /// A Bernoulli(P_misa) recovery event is drawn each slot.
    Sampled,
}

/// Order in which an edge server works through a vehicle's visual tasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueueDiscipline {
    /// Non-preemptive last-come-first-served: when the server frees up it
    /// takes the freshest waiting frame.
    Lcfs,
    /// First-come-first-served.
    Fifo,
}

/// All physical and algorithmic constants of one simulation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Array elements M.
    pub antennas: usize,
    /// Vehicles K.
    pub vehicles: usize,
    /// Horizon N in slots.
    pub horizon: usize,
    /// Slot duration tau (s).
    pub slot_duration: f64,
    /// Carrier frequency f_c (Hz).
    pub carrier_frequency: f64,
    /// Aggregate edge CPU frequency F_max (cycles/s).
    pub cpu_max: f64,
    /// Effective switched capacitance kappa (J s^2 / cycles^3).
    pub capacitance: f64,
    /// Visual task size C_k (cycles).
    pub task_cycles: f64,
    /// Energy of one exhaustive beam sweep (J).
    pub recovery_energy: f64,
    /// Per-slot average energy budget (J).
    pub energy_budget: f64,
    /// Half-power beamwidth theta_BW (rad).
    pub beamwidth: f64,
    /// Drift-plus-penalty weight V.
    pub lyapunov_v: f64,
    /// Linear receive SNR eta_rx.
    pub snr_linear: f64,
    /// Angular waveform constant beta_theta.
    pub beta_theta: f64,
    /// Range waveform constant beta_d.
    pub beta_d: f64,
    /// Radar uncertainty floor (m).
    pub eps_rad: f64,
    /// Camera uncertainty floor (m).
    pub eps_cam: f64,
    /// Radial AoI-to-uncertainty constant (s per slot).
    pub c_rad: f64,
    /// Tangential AoI-to-uncertainty constant (s per slot).
    pub c_tan: f64,
    /// Lateral distance between road and array (m).
    pub lane_offset: f64,
    /// Half length of the simulated road window (m).
    pub road_half_length: f64,
    /// Nominal longitudinal speed (m/s).
    pub cruise_speed: f64,
    /// Standard deviation of the per-slot speed perturbation (m/s).
    pub speed_jitter: f64,
    /// Range clamp near the array origin (m).
    pub min_range: f64,
    /// PCRB reported when the angular information is exactly zero (rad^2).
    pub pcrb_cap: f64,
    /// rad^2 per objective unit for the PCRB penalty.
    pub pcrb_unit: f64,
    /// Cycles per objective unit for the queue drift term.
    pub queue_unit: f64,
    /// CPU frequency levels per vehicle used by the greedy scheduler.
    pub cpu_levels: usize,
    /// Largest K for which the scheduler enumerates all activation patterns.
    pub exhaustive_cutoff: usize,
    pub recovery_mode: RecoveryMode,
    pub queue_discipline: QueueDiscipline,
    /// Enables a local beam phase search in the greedy scheduler.
    pub greedy_phase_search: bool,
    /// Maximum transmit power (dBm). Informational only.
    pub p_max_dbm: f64,
    pub rng_seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        default_config()
    }
}

/// Published system constants plus decided defaults for everything else.
pub fn default_config() -> SimConfig {
    let antennas = 64;
    let slot_duration = 1e-3;
    SimConfig {
        antennas,
        vehicles: 4,
        horizon: 20_000,
        slot_duration,
        carrier_frequency: 28e9,
        cpu_max: 14e9,
        capacitance: 1.5e-25,
        task_cycles: 5e6,
        recovery_energy: 10.0,
        energy_budget: 20.0,
        beamwidth: 2.0 / antennas as f64,
        lyapunov_v: 10.0,
        snr_linear: db_to_linear(10.0),
        beta_theta: 5e-5,
        beta_d: 1.0,
        eps_rad: 0.1,
        eps_cam: 0.1,
        c_rad: slot_duration,
        c_tan: slot_duration,
        lane_offset: 20.0,
        road_half_length: 60.0,
        cruise_speed: 15.0,
        speed_jitter: 1.0,
        min_range: 1.0,
        pcrb_cap: 1e2,
        pcrb_unit: 1e-6,
        queue_unit: 5e5,
        cpu_levels: 8,
        exhaustive_cutoff: 12,
        recovery_mode: RecoveryMode::Expected,
        queue_discipline: QueueDiscipline::Lcfs,
        greedy_phase_search: false,
        p_max_dbm: 30.0,
        rng_seed: 0,
    }
}

/// Two-vehicle configuration used for agent training. CPU capacity and the
/// energy budget are scaled with K so per-vehicle load matches the default.
pub fn toy_config() -> SimConfig {
    let base = default_config();
    SimConfig {
        vehicles: 2,
        horizon: 500,
        cpu_max: base.cpu_max / 2.0,
        energy_budget: base.energy_budget / 2.0,
        ..base
    }
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn linear_to_db(linear: f64) -> f64 {
    10.0 * linear.log10()
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.antennas < 1 {
            return fail("antennas must be >= 1");
        }
        if self.vehicles < 1 {
            return fail("vehicles must be >= 1");
        }
        if !(self.slot_duration > 0.0) {
            return fail("slot_duration must be > 0");
        }
        if !(self.cpu_max > 0.0) {
            return fail("cpu_max must be > 0");
        }
        if !(self.energy_budget > 0.0) {
            return fail("energy_budget must be > 0");
        }
        if !(self.beamwidth > 0.0 && self.beamwidth < std::f64::consts::PI) {
            return fail("beamwidth must lie in (0, pi)");
        }
        if !(self.snr_linear >= 0.0) {
            return fail("snr_linear must be >= 0");
        }
        if !(self.lyapunov_v >= 0.0) {
            return fail("lyapunov_v must be >= 0");
        }
        if !(self.carrier_frequency > 0.0) {
            return fail("carrier_frequency must be > 0");
        }
        if !(self.task_cycles >= 0.0 && self.capacitance >= 0.0 && self.recovery_energy >= 0.0) {
            return fail("task_cycles, capacitance and recovery_energy must be >= 0");
        }
        if !(self.eps_rad >= 0.0 && self.eps_cam >= 0.0 && self.c_rad >= 0.0 && self.c_tan >= 0.0) {
            return fail("uncertainty constants must be >= 0");
        }
        if !(self.min_range > 0.0) {
            return fail("min_range must be > 0");
        }
        if !(self.pcrb_cap > 0.0 && self.pcrb_unit > 0.0 && self.queue_unit > 0.0) {
            return fail("pcrb_cap, pcrb_unit and queue_unit must be > 0");
        }
        if self.cpu_levels < 2 {
            return fail("cpu_levels must be >= 2");
        }
        if !(self.road_half_length > 0.0) {
            return fail("road_half_length must be > 0");
        }
        Ok(())
    }

    pub fn with_snr_db(mut self, db: f64) -> Self {
        self.snr_linear = db_to_linear(db);
        self
    }

    pub fn wavelength(&self) -> f64 {
        crate::channel::SPEED_OF_LIGHT / self.carrier_frequency
    }

    /// Parses a TOML document overriding any subset of fields.
    ///
    /// Unknown keys are rejected. When `antennas` is overridden without an
    /// explicit `beamwidth`, the beamwidth follows as `2 / M`.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Parse(e.to_string()))?;
        let cfg: SimConfig = table
            .clone()
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let mut cfg = cfg;
        if table.contains_key("antennas") && !table.contains_key("beamwidth") {
            cfg.beamwidth = 2.0 / cfg.antennas.max(1) as f64;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Ground-truth kinematics of one vehicle plus the base station's delayed
/// estimate of its range and azimuth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    /// Position relative to the array phase center (m).
    pub position: [f64; 2],
    /// Ground velocity during the last slot (m/s).
    pub velocity: [f64; 2],
    /// Signed nominal longitudinal speed (m/s).
    pub cruise: f64,
    pub u_rad: f64,
    pub u_tan: f64,
    pub d: f64,
    /// Azimuth from broadside (rad).
    pub theta: f64,
    pub d_hat: f64,
    pub theta_hat: f64,
    /// Set when the range was clamped to `min_range` this slot.
    pub range_clamped: bool,
}

impl VehicleState {
    pub fn new(position: [f64; 2], velocity: [f64; 2], min_range: f64) -> Self {
        let mut state = VehicleState {
            position,
            velocity,
            cruise: velocity[0],
            u_rad: 0.0,
            u_tan: 0.0,
            d: 0.0,
            theta: 0.0,
            d_hat: 0.0,
            theta_hat: 0.0,
            range_clamped: false,
        };
        state.refresh_polar(min_range);
        state.d_hat = state.d;
        state.theta_hat = state.theta;
        state
    }

    pub fn speed(&self) -> f64 {
        self.velocity[0].hypot(self.velocity[1])
    }

    /// Recomputes range, azimuth and the polar velocity split from the
    /// Cartesian state.
    fn refresh_polar(&mut self, min_range: f64) {
        let [x, y] = self.position;
        let [vx, vy] = self.velocity;
        let raw = x.hypot(y);
        self.range_clamped = raw < min_range;
        let d = raw.max(min_range);
        self.d = d;
        self.theta = x.atan2(y);
        if raw > 0.0 {
            self.u_rad = (x * vx + y * vy) / raw;
            self.u_tan = (y * vx - x * vy) / raw;
        } else {
            self.u_rad = 0.0;
            self.u_tan = self.speed();
        }
    }
}

/// Places `cfg.vehicles` vehicles evenly along the road with a random phase;
/// even-indexed vehicles drive towards -x, odd ones towards +x.
pub fn initial_vehicles(cfg: &SimConfig, rng: &mut SimRng) -> Vec<VehicleState> {
    let span = 2.0 * cfg.road_half_length;
    let phase: f64 = rand::Rng::random::<f64>(rng) * span / cfg.vehicles as f64;
    (0..cfg.vehicles)
        .map(|k| {
            let x = -cfg.road_half_length + phase + span * k as f64 / cfg.vehicles as f64;
            let dir = if k % 2 == 0 { -1.0 } else { 1.0 };
            VehicleState::new([x, cfg.lane_offset], [dir * cfg.cruise_speed, 0.0], cfg.min_range)
        })
        .collect()
}

/// Advances one vehicle by one slot of length `tau`.
///
/// The longitudinal speed is the cruise speed plus a fresh Gaussian
/// perturbation; the lateral coordinate is fixed. Leaving the road window
/// wraps the vehicle to the opposite end.
pub fn step_kinematics(state: &VehicleState, cfg: &SimConfig, tau: f64, rng: &mut SimRng) -> VehicleState {
    let noise: f64 = StandardNormal.sample(rng);
    let vx = state.cruise + cfg.speed_jitter * noise;
    let vy = 0.0;
    let mut next = state.clone();
    next.velocity = [vx, vy];
    let mut x = state.position[0] + vx * tau;
    let y = state.position[1] + vy * tau;
    let half = cfg.road_half_length;
    if x >= half || x < -half {
        x = (x + half).rem_euclid(2.0 * half) - half;
    }
    next.position = [x, y];
    next.refresh_polar(cfg.min_range);
    next
}

/// Draws the base station's delayed estimate of range and azimuth.
///
/// Range error is Gaussian with the radar uncertainty; azimuth error is the
/// tangential uncertainty seen from range `d`.
pub fn update_estimate(state: &VehicleState, aoi: &AoIVector, cfg: &SimConfig, rng: &mut SimRng) -> VehicleState {
    let unc = sensing::uncertainty(aoi, state.u_rad, state.u_tan, cfg);
    let n_rad: f64 = StandardNormal.sample(rng);
    let n_tan: f64 = StandardNormal.sample(rng);
    let mut next = state.clone();
    next.d_hat = state.d + unc.sigma_rad * n_rad;
    next.theta_hat = state.theta + unc.sigma_tan / state.d * n_tan;
    next
}
