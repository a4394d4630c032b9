//! Fixtures shared by the benchmarks.

use isac_core::edge::SystemSnapshot;
use isac_core::env::Environment;
use isac_core::policy::{Baseline, Policy};
use isac_core::scenario::{rng_for, SimConfig};
use isac_core::Result;

/// Environment after `warmup` greedy slots, so queues and ages are not at
/// their initial values.
pub fn warmed_env(cfg: &SimConfig, seed: u64, warmup: usize) -> Result<Environment> {
    let mut env = Environment::new(cfg, seed)?;
    let mut policy = Baseline::GreedyDpp;
    let mut rng = rng_for(seed, 99);
    for _ in 0..warmup {
        let snap = env.begin_slot();
        let d = policy.decide(&snap, cfg, &mut rng)?;
        env.apply(&d.action)?;
    }
    Ok(env)
}

/// Estimated snapshots of `n` consecutive greedy slots.
pub fn snapshots(cfg: &SimConfig, seed: u64, n: usize) -> Result<Vec<SystemSnapshot>> {
    let mut env = warmed_env(cfg, seed, 50)?;
    let mut policy = Baseline::GreedyDpp;
    let mut rng = rng_for(seed, 99);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let snap = env.begin_slot();
        let d = policy.decide(&snap, cfg, &mut rng)?;
        env.apply(&d.action)?;
        out.push(snap);
    }
    Ok(out)
}
