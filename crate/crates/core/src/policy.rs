//! Phase-only beamformers, the policy interface and the non-learning
//! schedulers: always-on camera, radar only, and the per-slot
//! drift-plus-penalty minimiser.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::channel::{inner, steering, steering_derivative};
use crate::edge::{self, Action, SurrogateBreakdown, SystemSnapshot};
use crate::error::{Error, Result};
use crate::scenario::{SimConfig, SimRng};
use crate::sensing::{self, Fim2x2};

/// Analog beamformer `v_m = exp(j phase_m) / sqrt(M)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Beamformer {
    pub phases: Vec<f64>,
}

impl Beamformer {
    pub fn antennas(&self) -> usize {
        self.phases.len()
    }

    pub fn vector(&self) -> Vec<Complex64> {
        let r = 1.0 / (self.phases.len() as f64).sqrt();
        self.phases.iter().map(|&p| Complex64::from_polar(r, p)).collect()
    }
}

/// Wraps an angle to `[-pi, pi)`.
pub fn wrap_phase(p: f64) -> f64 {
    let w = (p + PI).rem_euclid(2.0 * PI) - PI;
    if w >= PI {
        -PI
    } else {
        w
    }
}

/// Matched beam towards `theta_hat`: `v = a(theta_hat) / sqrt(M)`.
pub fn conjugate_beam(theta_hat: f64, antennas: usize) -> Beamformer {
    let s = PI * theta_hat.sin();
    Beamformer { phases: (0..antennas).map(|m| wrap_phase(s * m as f64)).collect() }
}

/// Nearest constant-modulus beamformer: keep each entry's argument.
pub fn project_constant_modulus(raw: &[Complex64]) -> Beamformer {
    Beamformer {
        phases: raw.iter().map(|c| if c.norm_sqr() == 0.0 { 0.0 } else { c.arg() }).collect(),
    }
}

/// A policy's action together with the objective breakdown it implies on
/// the snapshot it saw.
#[derive(Clone, Debug)]
pub struct PolicyDecision {
    pub action: Action,
    pub diagnostics: SurrogateBreakdown,
}

impl PolicyDecision {
    pub fn evaluate(action: Action, snap: &SystemSnapshot, cfg: &SimConfig) -> Result<Self> {
        let diagnostics = edge::surrogate_objective(snap, &action, cfg)?;
        Ok(PolicyDecision { action, diagnostics })
    }
}

/// A scheduler. `snap` is the base station's view of the slot: kinematics
/// are replaced by the delayed estimates.
pub trait Policy {
    fn name(&self) -> &str;

    /// Clears any per-episode state.
    fn reset(&mut self) {}

    fn decide(&mut self, snap: &SystemSnapshot, cfg: &SimConfig, rng: &mut SimRng) -> Result<PolicyDecision>;
}

fn matched_beams(snap: &SystemSnapshot, cfg: &SimConfig) -> Vec<Beamformer> {
    snap.vehicles.iter().map(|v| conjugate_beam(v.theta_hat, cfg.antennas)).collect()
}

pub fn vision_only(snap: &SystemSnapshot, cfg: &SimConfig) -> Result<PolicyDecision> {
    let k = cfg.vehicles;
    let action = Action { pi: vec![true; k], f: vec![cfg.cpu_max / k as f64; k], beams: matched_beams(snap, cfg) };
    PolicyDecision::evaluate(action, snap, cfg)
}

pub fn radar_only(snap: &SystemSnapshot, cfg: &SimConfig) -> Result<PolicyDecision> {
    let k = cfg.vehicles;
    let action = Action { pi: vec![false; k], f: vec![0.0; k], beams: matched_beams(snap, cfg) };
    PolicyDecision::evaluate(action, snap, cfg)
}

/// CPU frequency of grid level `j`.
pub fn cpu_level(j: usize, cfg: &SimConfig) -> f64 {
    cfg.cpu_max * j as f64 / (cfg.cpu_levels - 1) as f64
}

/// Activation pattern number `index` in lexicographic order (vehicle 0 is
/// the most significant position, `false < true`).
pub fn pattern(index: usize, k: usize) -> Vec<bool> {
    (0..k).map(|i| (index >> (k - 1 - i)) & 1 == 1).collect()
}

/// Coordinate ascent on individual element phases maximising the angular
/// information `|a_dot^H v|^2` towards `theta`.
pub fn refine_beam(beam: &Beamformer, theta: f64) -> Beamformer {
    let m = beam.antennas();
    let da = steering_derivative(theta, m);
    let mut phases = beam.phases.clone();
    let score = |p: &[f64]| inner(&da, &Beamformer { phases: p.to_vec() }.vector()).norm_sqr();
    let mut best = score(&phases);
    for step in [0.2, 0.05, 0.01] {
        for _ in 0..4 {
            let mut improved = false;
            for i in 0..m {
                for dir in [1.0, -1.0] {
                    let old = phases[i];
                    phases[i] = wrap_phase(old + dir * step);
                    let s = score(&phases);
                    if s > best {
                        best = s;
                        improved = true;
                    } else {
                        phases[i] = old;
                    }
                }
            }
            if !improved {
                break;
            }
        }
    }
    Beamformer { phases }
}

/// Per-slot minimiser of the drift-plus-penalty objective.
///
/// Beams are matched to the estimated azimuths. Every activation pattern is
/// enumerated; for each, the CPU grid allocation is solved exactly as a
/// multiple-choice knapsack over per-vehicle level costs (levels sum to at
/// most `cpu_levels - 1`, i.e. total frequency at most `F_max`). Equal
/// objectives resolve to the lexicographically smallest pattern and, within
/// a pattern, the lexicographically smallest level vector.
pub fn greedy_dpp(snap: &SystemSnapshot, cfg: &SimConfig) -> Result<PolicyDecision> {
    let k = cfg.vehicles;
    if k > cfg.exhaustive_cutoff {
        return Err(Error::Unsupported(format!(
            "exhaustive schedule search over {k} vehicles exceeds the cutoff of {}",
            cfg.exhaustive_cutoff
        )));
    }
    if snap.vehicles.len() != k || snap.aoi.len() != k || snap.queues.len() != k {
        return Err(Error::Shape("snapshot does not match the configured vehicle count".into()));
    }
    let mut beams = matched_beams(snap, cfg);
    if cfg.greedy_phase_search {
        beams = beams.iter().zip(&snap.vehicles).map(|(b, v)| refine_beam(b, v.theta)).collect();
    }
    let data: Vec<Fim2x2> = beams
        .iter()
        .zip(&snap.vehicles)
        .map(|(b, v)| sensing::data_fim(&b.vector(), v.theta, cfg))
        .collect();
    let levels = cfg.cpu_levels;
    let budget = levels - 1;

    // cost[k][pi][j]
    let mut cost = vec![[vec![0.0; levels], vec![0.0; levels]]; k];
    for i in 0..k {
        for (p, arrives) in [false, true].into_iter().enumerate() {
            for j in 0..levels {
                let f = cpu_level(j, cfg);
                let completion = snap.queues[i].preview(arrives, f * cfg.slot_duration, cfg.task_cycles);
                let out = edge::vehicle_outcome_with_fim(&snap.vehicles[i], snap.aoi[i], completion, f, &data[i], cfg);
                cost[i][p][j] = cfg.lyapunov_v * out.pcrb.value / cfg.pcrb_unit
                    + edge::queue_drift(snap.queues[i].backlog, arrives, f, cfg)
                    + snap.z * out.energy();
            }
        }
    }

    let mut best: Option<PolicyDecision> = None;
    let mut suffix = vec![vec![0.0; budget + 1]; k + 1];
    for index in 0..(1usize << k) {
        let pi = pattern(index, k);
        for i in (0..k).rev() {
            let row = &cost[i][pi[i] as usize];
            for r in 0..=budget {
                let mut m = f64::INFINITY;
                for j in 0..=r {
                    let c = row[j] + suffix[i + 1][r - j];
                    if c < m {
                        m = c;
                    }
                }
                suffix[i][r] = m;
            }
        }
        let mut r = budget;
        let mut f = Vec::with_capacity(k);
        for i in 0..k {
            let row = &cost[i][pi[i] as usize];
            let j = (0..=r)
                .find(|&j| row[j] + suffix[i + 1][r - j] == suffix[i][r])
                .expect("knapsack optimum is attained");
            f.push(cpu_level(j, cfg));
            r -= j;
        }
        let action = Action { pi, f, beams: beams.clone() };
        let decision = PolicyDecision::evaluate(action, snap, cfg)?;
        if best.as_ref().is_none_or(|b| decision.diagnostics.total < b.diagnostics.total) {
            best = Some(decision);
        }
    }
    Ok(best.expect("at least one activation pattern"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Baseline {
    VisionOnly,
    RadarOnly,
    GreedyDpp,
}

impl Baseline {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "vision-only" => Some(Baseline::VisionOnly),
            "radar-only" => Some(Baseline::RadarOnly),
            "greedy-dpp" => Some(Baseline::GreedyDpp),
            _ => None,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Baseline::VisionOnly => "vision-only",
            Baseline::RadarOnly => "radar-only",
            Baseline::GreedyDpp => "greedy-dpp",
        }
    }
}

impl Policy for Baseline {
    fn name(&self) -> &str {
        self.label()
    }

    fn decide(&mut self, snap: &SystemSnapshot, cfg: &SimConfig, _rng: &mut SimRng) -> Result<PolicyDecision> {
        match self {
            Baseline::VisionOnly => vision_only(snap, cfg),
            Baseline::RadarOnly => radar_only(snap, cfg),
            Baseline::GreedyDpp => greedy_dpp(snap, cfg),
        }
    }
}

/// Array gain `|a^H(theta) v|^2 / M` of a beam; `M` for a perfectly matched
/// beam.
pub fn beam_gain(beam: &Beamformer, theta: f64) -> f64 {
    let m = beam.antennas();
    inner(steering(theta, m).as_slice(), &beam.vector()).norm_sqr()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matched_beam_attains_array_gain() {
        let b = conjugate_beam(0.37, 64);
        let g = inner(steering(0.37, 64).as_slice(), &b.vector()).norm();
        assert!((g - 8.0).abs() < 1e-12);
        for c in b.vector() {
            assert!((c.norm() - 0.125).abs() < 1e-15);
        }
    }

    #[test]
    fn half_beamwidth_offset_costs_about_three_db() {
        let m = 64;
        let bw = 2.0 / m as f64;
        let b = conjugate_beam(0.2 + bw / 2.0, m);
        let drop = 10.0 * (beam_gain(&b, 0.2) / m as f64).log10();
        assert!((drop + 3.0).abs() < 1.0, "drop {drop} dB");
    }

    #[test]
    fn projection_cases() {
        let b = project_constant_modulus(&[Complex64::new(2.0, 0.0), Complex64::new(0.0, 2.0)]);
        assert!((b.phases[0]).abs() < 1e-15 && (b.phases[1] - PI / 2.0).abs() < 1e-15);
        let zero = project_constant_modulus(&[Complex64::new(0.0, 0.0)]);
        assert_eq!(zero.phases, vec![0.0]);
        let cm = conjugate_beam(-0.6, 16);
        let again = project_constant_modulus(&cm.vector());
        for (a, b) in cm.phases.iter().zip(&again.phases) {
            assert!((wrap_phase(a - b)).abs() < 1e-12);
        }
    }

    #[test]
    fn phase_wrap_range() {
        for p in [-10.0, -PI, -1.0, 0.0, PI, 3.5, 100.0] {
            let w = wrap_phase(p);
            assert!((-PI..PI).contains(&w), "{p} -> {w}");
        }
    }

    #[test]
    fn lexicographic_patterns() {
        assert_eq!(pattern(0, 2), vec![false, false]);
        assert_eq!(pattern(1, 2), vec![false, true]);
        assert_eq!(pattern(2, 2), vec![true, false]);
        assert_eq!(pattern(3, 2), vec![true, true]);
    }

    #[test]
    fn phase_search_does_not_lose_information() {
        let b = conjugate_beam(0.3, 16);
        let da = steering_derivative(0.3, 16);
        let before = inner(&da, &b.vector()).norm_sqr();
        let after = inner(&da, &refine_beam(&b, 0.3).vector()).norm_sqr();
        assert!(after >= before);
    }
}
