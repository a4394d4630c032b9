//! Oracles shared by the integration tests.
#![allow(dead_code)]

use rand::Rng;

use isac_core::edge::{self, Action, SystemSnapshot};
use isac_core::env::Environment;
use isac_core::policy::{conjugate_beam, cpu_level, pattern};
use isac_core::scenario::rng_for;
use isac_core::{toy_config, SimConfig};

/// Two vehicles, three CPU levels and a short array so that exhaustive
/// search stays cheap.
pub fn oracle_config() -> SimConfig {
    SimConfig { cpu_levels: 3, antennas: 16, beamwidth: 2.0 / 16.0, ..toy_config() }
}

/// Exhaustive minimiser of the per-slot objective over activation patterns
/// and CPU level vectors with matched beams. Candidates are visited pattern
/// first, then level vectors in lexicographic order; the first strict
/// minimum wins.
pub fn brute_force(snap: &SystemSnapshot, cfg: &SimConfig) -> (Action, f64) {
    let k = cfg.vehicles;
    let l = cfg.cpu_levels;
    let beams: Vec<_> = snap.vehicles.iter().map(|v| conjugate_beam(v.theta_hat, cfg.antennas)).collect();
    let mut best: Option<(Action, f64)> = None;
    for p in 0..(1usize << k) {
        let pi = pattern(p, k);
        for code in 0..l.pow(k as u32) {
            let levels: Vec<usize> = (0..k).rev().map(|i| code / l.pow(i as u32) % l).collect();
            if levels.iter().sum::<usize>() > l - 1 {
                continue;
            }
            let f = levels.iter().map(|&j| cpu_level(j, cfg)).collect();
            let action = Action { pi: pi.clone(), f, beams: beams.clone() };
            let total = edge::surrogate_objective(snap, &action, cfg).unwrap().total;
            if best.as_ref().is_none_or(|(_, b)| total < *b) {
                best = Some((action, total));
            }
        }
    }
    best.unwrap()
}

/// Base-station snapshots after a random number of random slots, with the
/// deficit queue occasionally forced high so the energy term matters.
pub fn random_states(cfg: &SimConfig, count: usize, seed: u64) -> Vec<SystemSnapshot> {
    let mut rng = rng_for(seed, 77);
    (0..count)
        .map(|i| {
            let mut env = Environment::new(cfg, seed.wrapping_mul(1000) + i as u64).unwrap();
            for _ in 0..rng.random_range(0..40) {
                env.begin_slot();
                let k = cfg.vehicles;
                let pi: Vec<bool> = (0..k).map(|_| rng.random_bool(0.5)).collect();
                let share = cfg.cpu_max / k as f64;
                let f: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..share)).collect();
                let beams = env.estimated_snapshot().vehicles.iter().map(|v| conjugate_beam(v.theta_hat, cfg.antennas)).collect();
                env.apply(&Action { pi, f, beams }).unwrap();
            }
            let mut snap = env.begin_slot();
            if rng.random_bool(0.3) {
                snap.z = rng.random_range(0.0..200.0);
            }
            snap
        })
        .collect()
}
