//! Learned schedulers. The main variant, `ld-hmoe`, pairs a recurrent
//! temporal expert (activation and CPU shares, trained by PPO) with a
//! feedforward spatial expert (beam phases, trained by gain ascent) in
//! separate parameter groups. `ppo-mono` and `moe-homo` are the single-group
//! and homogeneous-mixture ablations.

pub mod networks;
pub mod ppo;
pub mod train;

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::edge::{Action, SystemSnapshot};
use crate::error::{Error, Result};
use crate::harness::PolicySpec;
use crate::nn::{checkpoint, log_sigmoid, sigmoid, AdamConfig, AdamState, ParamStore, Tape, Tensor};
use crate::policy::{conjugate_beam, wrap_phase, Beamformer, Policy, PolicyDecision};
use crate::scenario::{rng_for, SimConfig, SimRng};
use crate::sensing;

use networks::{Nets, RecurrentState, SPATIAL_FEATURES};

pub use ppo::UpdateStats;
pub use train::{collect_rollout, train, write_learning_curve, EpisodeStats, Rollout, TrainConfig, TrainReport, Transition};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "ld-hmoe")]
    LdHmoe,
    #[serde(rename = "ppo-mono")]
    PpoMono,
    #[serde(rename = "moe-homo")]
    MoeHomo,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::LdHmoe, Variant::PpoMono, Variant::MoeHomo];

    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "ld-hmoe" => Some(Variant::LdHmoe),
            "ppo-mono" => Some(Variant::PpoMono),
            "moe-homo" => Some(Variant::MoeHomo),
            _ => None,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::LdHmoe => "ld-hmoe",
            Variant::PpoMono => "ppo-mono",
            Variant::MoeHomo => "moe-homo",
        }
    }
}

/// Architecture and optimisation settings shared by all variants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub temporal_hidden: usize,
    pub spatial_hidden: usize,
    pub critic_hidden: usize,
    /// Width of the shared trunk and of each homogeneous expert.
    pub mono_hidden: usize,
    pub lr: f64,
    pub critic_lr: f64,
    pub gamma: f64,
    /// Advantage smoothing; 1 gives the plain reward-to-go minus the critic.
    pub gae_lambda: f64,
    pub clip: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    /// Weight of the beam-gain loss.
    pub spatial_weight: f64,
    /// Truncation length of backpropagation through time.
    pub bptt: usize,
    pub epochs: usize,
    /// Passes of the spatial gain ascent over each rollout.
    pub spatial_epochs: usize,
    /// Sequence windows per recurrent minibatch.
    pub windows_per_batch: usize,
    /// Rows per feedforward minibatch.
    pub batch_rows: usize,
    pub max_grad_norm: f64,
    pub init_log_std: f64,
    pub init_activation_logit: f64,
    /// Initial scale of the phase-offset output layer.
    pub spatial_init_scale: f64,
    pub seed: u64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            temporal_hidden: 128,
            spatial_hidden: 256,
            critic_hidden: 128,
            mono_hidden: 256,
            lr: 1e-4,
            critic_lr: 1e-3,
            gamma: 0.99,
            gae_lambda: 0.95,
            clip: 0.2,
            entropy_coef: 1e-3,
            value_coef: 0.5,
            spatial_weight: 1.0,
            bptt: 32,
            epochs: 8,
            spatial_epochs: 1,
            windows_per_batch: 4,
            batch_rows: 128,
            max_grad_norm: 1.0,
            init_log_std: -0.5,
            init_activation_logit: 0.0,
            spatial_init_scale: 0.01,
            seed: 0,
        }
    }
}

impl AgentConfig {
    /// Parses a TOML document overriding any subset of fields.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: AgentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("temporal_hidden", self.temporal_hidden),
            ("spatial_hidden", self.spatial_hidden),
            ("critic_hidden", self.critic_hidden),
            ("mono_hidden", self.mono_hidden),
            ("bptt", self.bptt),
            ("windows_per_batch", self.windows_per_batch),
            ("batch_rows", self.batch_rows),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        let rates = [("lr", self.lr), ("critic_lr", self.critic_lr), ("max_grad_norm", self.max_grad_norm)];
        for (name, v) in rates {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("gamma", self.gamma), ("gae_lambda", self.gae_lambda)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return Err(Error::Config(format!("clip must lie in (0, 1), got {}", self.clip)));
        }
        for (name, v) in [("entropy_coef", self.entropy_coef), ("value_coef", self.value_coef), ("spatial_weight", self.spatial_weight)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Features of one slot as seen by the agent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentObservation {
    /// Age, backlog, range, angular uncertainty and relative echo
    /// information per vehicle, then the deficit queue.
    pub temporal: Vec<f64>,
    /// `K` rows of (sin, cos of the azimuth estimate, range, azimuth change).
    pub spatial: Vec<f64>,
    pub theta_hat: Vec<f64>,
}

/// Raw decision of the agent before it is turned into an [`Action`].
#[derive(Clone, Debug, PartialEq)]
pub struct AgentAction {
    pub pi: Vec<bool>,
    /// CPU-share logits; the last entry is the idle share.
    pub z: Vec<f64>,
    /// Phase offsets added to the matched beams, `K` rows of `M`.
    pub offsets: Vec<Vec<f64>>,
}

/// Quantities of the behaviour policy needed by the update.
#[derive(Clone, Debug, PartialEq)]
pub struct ActInfo {
    pub log_prob: f64,
    pub value: f64,
    /// Recurrent state before the step (temporal expert only).
    pub recurrent: Option<RecurrentState>,
}

/// Running statistics of discounted reward sums; rewards are divided by
/// their standard deviation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardScale {
    pub count: u64,
    pub mean: f64,
    pub m2: f64,
}

impl RewardScale {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn std(&self) -> f64 {
        if self.count < 2 {
            return 1.0;
        }
        let s = (self.m2 / (self.count - 1) as f64).sqrt();
        if s > 1e-8 {
            s
        } else {
            1.0
        }
    }
}

/// Learned scheduler; implements [`Policy`] for evaluation.
#[derive(Clone, Debug)]
pub struct Agent {
    pub variant: Variant,
    pub config: AgentConfig,
    pub vehicles: usize,
    pub antennas: usize,
    pub nets: Nets,
    pub stores: Vec<ParamStore>,
    pub optimizers: Vec<AdamState>,
    pub reward_scale: RewardScale,
    /// Sample actions instead of taking the mode and mean.
    pub explore: bool,
    state: Option<RecurrentState>,
    prev_sin: Option<Vec<f64>>,
}

/// Serialised description stored next to the parameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    variant: Variant,
    config: AgentConfig,
    vehicles: usize,
    antennas: usize,
    nets: Nets,
    reward_scale: RewardScale,
}

impl Agent {
    pub fn new(variant: Variant, config: AgentConfig, sim: &SimConfig) -> Result<Self> {
        config.validate()?;
        sim.validate()?;
        let mut rng = rng_for(config.seed, 0xA6E7);
        let (nets, stores) = networks::build(variant, &config, sim.vehicles, sim.antennas, &mut rng);
        let optimizers = make_optimizers(variant, &config, &stores);
        Ok(Agent {
            variant,
            config,
            vehicles: sim.vehicles,
            antennas: sim.antennas,
            nets,
            stores,
            optimizers,
            reward_scale: RewardScale::default(),
            explore: false,
            state: None,
            prev_sin: None,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.stores.iter().map(ParamStore::parameter_count).sum()
    }

    pub fn group_names(&self) -> Vec<&str> {
        self.stores.iter().map(|s| s.group.as_str()).collect()
    }

    pub fn store(&self, group: &str) -> Option<&ParamStore> {
        self.stores.iter().find(|s| s.group == group)
    }

    /// Forgets the recurrent state and the azimuth history.
    pub fn reset_state(&mut self) {
        self.state = None;
        self.prev_sin = None;
    }

    fn check_dims(&self, snap: &SystemSnapshot) -> Result<()> {
        if snap.vehicles.len() != self.vehicles || snap.aoi.len() != self.vehicles || snap.queues.len() != self.vehicles {
            return Err(Error::Shape(format!("agent built for {} vehicles, snapshot has {}", self.vehicles, snap.vehicles.len())));
        }
        Ok(())
    }

    /// Builds the features of the base station's view and advances the
    /// azimuth history.
    pub fn observe(&mut self, snap: &SystemSnapshot, cfg: &SimConfig) -> Result<AgentObservation> {
        let obs = self.features(snap, cfg)?;
        self.prev_sin = Some(obs.spatial.chunks(SPATIAL_FEATURES).map(|r| r[0]).collect());
        Ok(obs)
    }

    /// Features of a snapshot without touching the azimuth history.
    pub fn features(&self, snap: &SystemSnapshot, cfg: &SimConfig) -> Result<AgentObservation> {
        self.check_dims(snap)?;
        let k = self.vehicles;
        let mut temporal = Vec::with_capacity(networks::temporal_dim(k));
        let mut spatial = Vec::with_capacity(SPATIAL_FEATURES * k);
        let mut theta_hat = Vec::with_capacity(k);
        for i in 0..k {
            let v = &snap.vehicles[i];
            let aoi = &snap.aoi[i];
            let unc = sensing::uncertainty(aoi, v.u_rad, v.u_tan, cfg);
            let d = v.d.max(cfg.min_range);
            temporal.push((aoi.a_tan as f64).ln_1p() / 4.0);
            temporal.push((snap.queues[i].backlog / cfg.task_cycles).ln_1p() / 4.0);
            temporal.push(d / 50.0);
            temporal.push((100.0 * unc.sigma_tan / d).ln_1p() / 2.0);
            // Echo information at a one-sigma pointing error, relative to the
            // prior: how much the radar alone can still contribute.
            let beam = conjugate_beam(v.theta_hat, cfg.antennas).vector();
            let echo = sensing::data_fim(&beam, v.theta_hat + unc.sigma_tan / d, cfg).j11;
            let prior = sensing::prior_fim(&unc, d).j11;
            temporal.push(((echo / prior).max(1e-9).ln() + 5.0) / 3.0);
            let s = v.theta_hat.sin();
            let prev = self.prev_sin.as_ref().map_or(s, |p| p[i]);
            spatial.extend_from_slice(&[s, v.theta_hat.cos(), d / 50.0, 10.0 * (s - prev)]);
            theta_hat.push(v.theta_hat);
        }
        temporal.push((snap.z.max(0.0) / cfg.energy_budget).ln_1p() / 4.0);
        let obs = AgentObservation { temporal, spatial, theta_hat };
        if obs.temporal.iter().chain(&obs.spatial).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("observation at slot {}", snap.slot)));
        }
        Ok(obs)
    }

    fn flat_input(&self, obs: &AgentObservation) -> Tensor {
        let mut x = obs.temporal.clone();
        x.extend_from_slice(&obs.spatial);
        Tensor::row_vector(x)
    }

    /// Forward pass for one observation; samples when `explore` is set,
    /// otherwise takes the activation mode and the share mean.
    pub fn act<R: Rng + ?Sized>(&mut self, obs: &AgentObservation, rng: &mut R, explore: bool) -> Result<(AgentAction, ActInfo)> {
        let k = self.vehicles;
        let m = self.antennas;
        let store_refs: Vec<&ParamStore> = self.stores.iter().collect();
        let mut tape = Tape::new(&store_refs);
        let temporal = tape.constant(Tensor::row_vector(obs.temporal.clone()));
        let before = self.state.clone();
        let (logits, means, log_std, raw, value, next_state);
        match &self.nets {
            Nets::Hetero(n) => {
                let st = before.clone().unwrap_or_else(|| RecurrentState::zeros(1, self.config.temporal_hidden));
                let h0 = tape.constant(st.h);
                let c0 = tape.constant(st.c);
                let (heads, h, c) = n.temporal_sequence(&mut tape, &[temporal], h0, c0)?;
                let rows = tape.constant(Tensor::from_vec(k, SPATIAL_FEATURES, obs.spatial.clone())?);
                let r = n.spatial_raw(&mut tape, rows)?;
                let v = n.value(&mut tape, temporal)?;
                logits = tape.value(heads[0].logits).clone();
                means = tape.value(heads[0].means).clone();
                log_std = tape.value(heads[0].log_std).clone();
                raw = tape.value(r).clone();
                value = tape.value(v).item();
                next_state = Some(RecurrentState { h: tape.value(h).clone(), c: tape.value(c).clone() });
            }
            Nets::Mono(n) => {
                let x = tape.constant(self.flat_input(obs));
                let out = n.forward(&mut tape, x)?;
                logits = tape.value(out.heads.logits).clone();
                means = tape.value(out.heads.means).clone();
                log_std = tape.value(out.heads.log_std).clone();
                raw = Tensor::from_vec(k, m, tape.value(out.phase_raw).data.clone())?;
                value = tape.value(out.value.expect("shared value head")).item();
                next_state = None;
            }
            Nets::Homo(n) => {
                let x = tape.constant(self.flat_input(obs));
                let out = n.forward(&mut tape, x, k, m)?;
                let v = n.value(&mut tape, temporal)?;
                logits = tape.value(out.heads.logits).clone();
                means = tape.value(out.heads.means).clone();
                log_std = tape.value(out.heads.log_std).clone();
                raw = Tensor::from_vec(k, m, tape.value(out.phase_raw).data.clone())?;
                value = tape.value(v).item();
                next_state = None;
            }
        }
        drop(tape);
        for (t, what) in [(&logits, "activation logits"), (&means, "share means"), (&raw, "phase offsets")] {
            networks::ensure_finite(t, what, &store_refs)?;
        }
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("critic value {value}")));
        }

        let mut pi = Vec::with_capacity(k);
        let mut log_prob = 0.0;
        for &l in &logits.data {
            let on = if explore { rng.random::<f64>() < sigmoid(l) } else { l > 0.0 };
            log_prob += if on { log_sigmoid(l) } else { log_sigmoid(-l) };
            pi.push(on);
        }
        let mut z = Vec::with_capacity(k + 1);
        for (&mu, &ls) in means.data.iter().zip(&log_std.data) {
            let sd = ls.exp();
            let eps: f64 = if explore { rng.sample(StandardNormal) } else { 0.0 };
            z.push(mu + sd * eps);
            log_prob += -0.5 * eps * eps - ls - 0.5 * (2.0 * std::f64::consts::PI).ln();
        }
        let offsets = (0..k)
            .map(|i| raw.row(i).iter().map(|&r| std::f64::consts::PI * r.tanh()).collect())
            .collect();
        self.state = next_state;
        Ok((AgentAction { pi, z, offsets }, ActInfo { log_prob, value, recurrent: before }))
    }

    /// Critic estimate for one observation.
    pub fn critic_value(&self, obs: &AgentObservation) -> Result<f64> {
        let store_refs: Vec<&ParamStore> = self.stores.iter().collect();
        let mut tape = Tape::new(&store_refs);
        let temporal = tape.constant(Tensor::row_vector(obs.temporal.clone()));
        let v = match &self.nets {
            Nets::Hetero(n) => n.value(&mut tape, temporal)?,
            Nets::Homo(n) => n.value(&mut tape, temporal)?,
            Nets::Mono(n) => {
                let x = tape.constant(self.flat_input(obs));
                n.forward(&mut tape, x)?.value.expect("shared value head")
            }
        };
        Ok(tape.value(v).item())
    }

    /// Maps a raw decision to CPU frequencies and beamformers.
    pub fn to_action(&self, a: &AgentAction, obs: &AgentObservation, cfg: &SimConfig) -> Result<Action> {
        let k = self.vehicles;
        if a.pi.len() != k || a.z.len() != k + 1 || a.offsets.len() != k {
            return Err(Error::Shape(format!("decision does not match {k} vehicles")));
        }
        let weights = softmax(&a.z);
        let f = weights[..k].iter().map(|w| cfg.cpu_max * w).collect();
        let beams = (0..k)
            .map(|i| {
                let base = conjugate_beam(obs.theta_hat[i], self.antennas);
                let phases = base.phases.iter().zip(&a.offsets[i]).map(|(p, d)| wrap_phase(p + d)).collect();
                Beamformer { phases }
            })
            .collect();
        let action = Action { pi: a.pi.clone(), f, beams };
        action.validate(cfg)?;
        Ok(action)
    }

    fn manifest(&self) -> Manifest {
        Manifest {
            variant: self.variant,
            config: self.config.clone(),
            vehicles: self.vehicles,
            antennas: self.antennas,
            nets: self.nets.clone(),
            reward_scale: self.reward_scale,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::to_value(self.manifest()).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let refs: Vec<&ParamStore> = self.stores.iter().collect();
        checkpoint::save(path, &meta, &refs)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_value(self.manifest()).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let refs: Vec<&ParamStore> = self.stores.iter().collect();
        checkpoint::encode(&meta, &refs)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, stores) = checkpoint::load(path)?;
        Self::from_parts(meta, stores)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (meta, stores) = checkpoint::decode(bytes)?;
        Self::from_parts(meta, stores)
    }

    fn from_parts(meta: serde_json::Value, stores: Vec<ParamStore>) -> Result<Self> {
        let manifest: Manifest = serde_json::from_value(meta).map_err(|e| Error::Checkpoint(format!("bad manifest: {e}")))?;
        let expected = match manifest.variant {
            Variant::LdHmoe => 3,
            Variant::PpoMono => 1,
            Variant::MoeHomo => 2,
        };
        if stores.len() != expected {
            return Err(Error::Checkpoint(format!("{} expects {expected} groups, found {}", manifest.variant.label(), stores.len())));
        }
        let optimizers = make_optimizers(manifest.variant, &manifest.config, &stores);
        Ok(Agent {
            variant: manifest.variant,
            config: manifest.config,
            vehicles: manifest.vehicles,
            antennas: manifest.antennas,
            nets: manifest.nets,
            stores,
            optimizers,
            reward_scale: manifest.reward_scale,
            explore: false,
            state: None,
            prev_sin: None,
        })
    }

    /// Bitwise equality of all parameters.
    pub fn same_parameters(&self, other: &Agent) -> bool {
        self.stores.len() == other.stores.len() && self.stores.iter().zip(&other.stores).all(|(a, b)| a.bit_equal(b))
    }

    /// Spec handing out frozen copies that take the mode of every action.
    pub fn into_policy_spec(mut self) -> PolicySpec {
        self.explore = false;
        self.reset_state();
        PolicySpec::new(self.variant.label(), move || Ok(Box::new(self.clone()) as Box<dyn Policy>))
    }

    pub fn is_finite(&self) -> bool {
        self.stores.iter().all(ParamStore::is_finite)
    }
}

fn make_optimizers(variant: Variant, config: &AgentConfig, stores: &[ParamStore]) -> Vec<AdamState> {
    let actor = AdamConfig { lr: config.lr, ..AdamConfig::default() };
    let critic = AdamConfig { lr: config.critic_lr, ..AdamConfig::default() };
    stores
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let is_critic = match variant {
                Variant::LdHmoe => i == networks::group::CRITIC,
                Variant::MoeHomo => i == networks::group::HOMO_CRITIC,
                Variant::PpoMono => false,
            };
            AdamState::new(s, if is_critic { critic } else { actor })
        })
        .collect()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

impl Policy for Agent {
    fn name(&self) -> &str {
        self.variant.label()
    }

    fn reset(&mut self) {
        self.reset_state();
    }

    fn decide(&mut self, snap: &SystemSnapshot, cfg: &SimConfig, rng: &mut SimRng) -> Result<PolicyDecision> {
        let obs = self.observe(snap, cfg)?;
        let explore = self.explore;
        let (raw, _) = self.act(&obs, rng, explore)?;
        let action = self.to_action(&raw, &obs, cfg)?;
        PolicyDecision::evaluate(action, snap, cfg)
    }
}
