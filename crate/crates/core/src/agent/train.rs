//! On-policy training loop: roll out one episode with exploration, update,
//! repeat. The energy deficit queue carries over between episodes.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::edge::{Action, SystemSnapshot};
use crate::env::Environment;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::scenario::{rng_for, SimConfig, SimRng};

use super::networks::RecurrentState;
use super::ppo::{self, UpdateStats};
use super::{Agent, AgentObservation};

/// Stream used for exploration noise and minibatch shuffling.
const TRAIN_STREAM: u64 = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub obs: AgentObservation,
    pub pi: Vec<bool>,
    pub z: Vec<f64>,
    pub log_prob: f64,
    pub value: f64,
    pub reward: f64,
    pub recurrent: Option<RecurrentState>,
}

/// One episode of experience.
#[derive(Clone, Debug, Default)]
pub struct Rollout {
    pub transitions: Vec<Transition>,
    /// Critic value after the last slot, in scaled return units.
    pub bootstrap: f64,
    /// True pre-decision state and applied action of every slot, kept only
    /// on request.
    pub decisions: Vec<(SystemSnapshot, Action)>,
    pub mean_pcrb: f64,
    pub mean_energy: f64,
    pub mean_queue: f64,
    pub mean_aoi: f64,
    pub activation_rate: f64,
    pub final_z: f64,
}

/// Runs one exploring episode of `slots` slots after resetting the
/// environment's episode state.
pub fn collect_rollout(agent: &mut Agent, env: &mut Environment, slots: usize, rng: &mut SimRng, keep_decisions: bool) -> Result<Rollout> {
    env.reset_episode();
    agent.reset_state();
    let cfg = env.cfg.clone();
    let k = cfg.vehicles as f64;
    let mut r = Rollout::default();
    for _ in 0..slots {
        let snap = env.begin_slot();
        let obs = agent.observe(&snap, &cfg)?;
        let (raw, info) = agent.act(&obs, rng, true)?;
        let action = agent.to_action(&raw, &obs, &cfg)?;
        if keep_decisions {
            r.decisions.push((env.true_snapshot(), action.clone()));
        }
        let out = env.apply(&action)?;
        r.mean_pcrb += out.breakdown.outcomes.iter().map(|o| o.pcrb.value).sum::<f64>() / k;
        r.mean_energy += out.e_total;
        r.mean_queue += out.backlog.iter().sum::<f64>() / k;
        r.mean_aoi += out.aoi.iter().map(|a| a.a_tan as f64).sum::<f64>() / k;
        r.activation_rate += out.pi.iter().filter(|p| **p).count() as f64 / k;
        r.transitions.push(Transition {
            obs,
            pi: raw.pi,
            z: raw.z,
            log_prob: info.log_prob,
            value: info.value,
            reward: out.reward,
            recurrent: info.recurrent,
        });
    }
    if slots > 0 {
        let n = slots as f64;
        r.mean_pcrb /= n;
        r.mean_energy /= n;
        r.mean_queue /= n;
        r.mean_aoi /= n;
        r.activation_rate /= n;
        let last = agent.features(&env.estimated_snapshot(), &cfg)?;
        r.bootstrap = agent.critic_value(&last)?;
    }
    r.final_z = env.ledger.z;
    Ok(r)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub episodes: usize,
    pub episode_slots: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { episodes: 300, episode_slots: 500, seed: 0 }
    }
}

/// Learning-curve row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub episode: usize,
    pub mean_reward: f64,
    pub mean_pcrb: f64,
    pub mean_energy: f64,
    pub mean_queue: f64,
    pub mean_aoi: f64,
    pub activation_rate: f64,
    pub final_z: f64,
    pub surrogate: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub spatial_gain: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub episodes: Vec<EpisodeStats>,
    /// Set when training stopped on a non-finite value; the agent then holds
    /// the parameters of the last finite update.
    pub diverged: Option<String>,
    pub seconds: f64,
}

/// Trains `agent` in place on `sim`.
pub fn train(agent: &mut Agent, sim: &SimConfig, tc: &TrainConfig) -> Result<TrainReport> {
    let started = Instant::now();
    let mut report = TrainReport::default();
    if tc.episodes == 0 {
        return Ok(report);
    }
    if tc.episode_slots == 0 {
        return Err(Error::Config("episode_slots must be positive".into()));
    }
    let mut env = Environment::new(sim, tc.seed)?;
    let mut rng = rng_for(tc.seed, TRAIN_STREAM);
    let mut last_good: Vec<ParamStore> = agent.stores.clone();
    for episode in 0..tc.episodes {
        let step = collect_rollout(agent, &mut env, tc.episode_slots, &mut rng, false)
            .and_then(|rollout| ppo::decoupled_update(agent, &rollout, &mut rng).map(|u| (rollout, u)));
        let (rollout, update) = match step {
            Ok(v) if agent.is_finite() => v,
            Ok(_) => {
                report.diverged = Some(format!("parameters became non-finite in episode {episode}"));
                agent.stores = last_good;
                break;
            }
            Err(Error::NonFinite(msg)) => {
                report.diverged = Some(format!("episode {episode}: {msg}"));
                agent.stores = last_good;
                break;
            }
            Err(e) => return Err(e),
        };
        last_good.clone_from(&agent.stores);
        report.episodes.push(episode_stats(episode, &rollout, &update));
    }
    agent.reset_state();
    report.seconds = started.elapsed().as_secs_f64();
    Ok(report)
}

fn episode_stats(episode: usize, r: &Rollout, u: &UpdateStats) -> EpisodeStats {
    let n = r.transitions.len().max(1) as f64;
    EpisodeStats {
        episode,
        mean_reward: r.transitions.iter().map(|t| t.reward).sum::<f64>() / n,
        mean_pcrb: r.mean_pcrb,
        mean_energy: r.mean_energy,
        mean_queue: r.mean_queue,
        mean_aoi: r.mean_aoi,
        activation_rate: r.activation_rate,
        final_z: r.final_z,
        surrogate: u.surrogate,
        value_loss: u.value_loss,
        entropy: u.entropy,
        spatial_gain: u.spatial_gain,
    }
}

pub fn write_learning_curve(stats: &[EpisodeStats], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    for s in stats {
        w.serialize(s).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    w.flush()?;
    Ok(())
}
