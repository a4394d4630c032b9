//! Network layouts of the three agent variants and their batched forward
//! passes.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, Dense, Lstm, Mlp, ParamId, ParamStore, Tape, Tensor, Var};

use super::{AgentConfig, Variant};

/// Per-vehicle spatial feature count.
pub const SPATIAL_FEATURES: usize = 4;
/// Per-vehicle temporal feature count (plus one global feature).
pub const TEMPORAL_FEATURES: usize = 5;

pub fn temporal_dim(k: usize) -> usize {
    TEMPORAL_FEATURES * k + 1
}

/// Scheduling heads evaluated for a batch of rows.
#[derive(Clone, Copy, Debug)]
pub struct ScheduleHeads {
    /// Activation logits, (B, K), clamped to +-30.
    pub logits: Var,
    /// Means of the CPU-share logits, (B, K + 1).
    pub means: Var,
    /// Log standard deviation of the CPU-share logits, (1, K + 1).
    pub log_std: Var,
}

/// LD-H-MoE: recurrent temporal expert, feedforward spatial expert and a
/// feedforward critic, each in its own parameter store.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeteroNets {
    pub lstm: Lstm,
    pub temporal_dense: Dense,
    pub logit_head: Dense,
    pub mean_head: Dense,
    pub log_std: ParamId,
    pub spatial: Mlp,
    pub critic: Mlp,
}

/// Single trunk shared by every head, including the value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonoNets {
    pub trunk: Mlp,
    pub logit_head: Dense,
    pub mean_head: Dense,
    pub phase_head: Dense,
    pub value_head: Dense,
    pub log_std: ParamId,
}

/// Two structurally identical feedforward experts mixed by a softmax gate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HomoNets {
    pub experts: [Mlp; 2],
    pub gate: Dense,
    pub log_std: ParamId,
    pub critic: Mlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Nets {
    Hetero(HeteroNets),
    Mono(MonoNets),
    Homo(HomoNets),
}

/// Store indices used by each variant.
pub mod group {
    pub const TEMPORAL: usize = 0;
    pub const SPATIAL: usize = 1;
    pub const CRITIC: usize = 2;
    pub const SHARED: usize = 0;
    pub const HOMO_ACTOR: usize = 0;
    pub const HOMO_CRITIC: usize = 1;
}

/// Scales the last layer of an MLP so its initial output is near zero.
fn shrink_last(store: &mut ParamStore, mlp: &Mlp, factor: f64) {
    if let Some(last) = mlp.layers.last() {
        for id in [last.w, last.b] {
            store.value_mut(id).data.iter_mut().for_each(|v| *v *= factor);
        }
    }
}

fn shrink(store: &mut ParamStore, layer: &Dense, factor: f64) {
    for id in [layer.w, layer.b] {
        store.value_mut(id).data.iter_mut().for_each(|v| *v *= factor);
    }
}

fn init_activation_bias(store: &mut ParamStore, head: &Dense, bias: f64) {
    store.value_mut(head.b).data.iter_mut().for_each(|v| *v = bias);
}

/// Builds the parameter stores and layer handles of a variant.
pub fn build<R: Rng + ?Sized>(variant: Variant, cfg: &AgentConfig, k: usize, m: usize, rng: &mut R) -> (Nets, Vec<ParamStore>) {
    let dt = temporal_dim(k);
    let ds = SPATIAL_FEATURES;
    match variant {
        Variant::LdHmoe => {
            let mut temporal = ParamStore::new("temporal");
            let mut spatial = ParamStore::new("spatial");
            let mut critic = ParamStore::new("critic");
            let h = cfg.temporal_hidden;
            let lstm = Lstm::new(&mut temporal, "temporal.lstm", dt, h, rng);
            let temporal_dense = Dense::new(&mut temporal, "temporal.dense", h, h, rng);
            let logit_head = Dense::new(&mut temporal, "temporal.logits", h, k, rng);
            let mean_head = Dense::new(&mut temporal, "temporal.means", h, k + 1, rng);
            let log_std = temporal.add("temporal.log_std", Tensor::filled(1, k + 1, cfg.init_log_std));
            shrink(&mut temporal, &logit_head, 0.1);
            shrink(&mut temporal, &mean_head, 0.1);
            init_activation_bias(&mut temporal, &logit_head, cfg.init_activation_logit);
            let s = cfg.spatial_hidden;
            let spatial_net = Mlp::new(&mut spatial, "spatial", &[ds, s, s, m], Activation::Tanh, Activation::Identity, rng);
            shrink_last(&mut spatial, &spatial_net, cfg.spatial_init_scale);
            let c = cfg.critic_hidden;
            let critic_net = Mlp::new(&mut critic, "critic", &[dt, c, c, 1], Activation::Tanh, Activation::Identity, rng);
            let nets = HeteroNets { lstm, temporal_dense, logit_head, mean_head, log_std, spatial: spatial_net, critic: critic_net };
            (Nets::Hetero(nets), vec![temporal, spatial, critic])
        }
        Variant::PpoMono => {
            let mut shared = ParamStore::new("shared");
            let h = cfg.mono_hidden;
            let input = dt + ds * k;
            let trunk = Mlp::new(&mut shared, "trunk", &[input, h, h], Activation::Tanh, Activation::Tanh, rng);
            let logit_head = Dense::new(&mut shared, "logits", h, k, rng);
            let mean_head = Dense::new(&mut shared, "means", h, k + 1, rng);
            let phase_head = Dense::new(&mut shared, "phases", h, k * m, rng);
            let value_head = Dense::new(&mut shared, "value", h, 1, rng);
            let log_std = shared.add("log_std", Tensor::filled(1, k + 1, cfg.init_log_std));
            shrink(&mut shared, &logit_head, 0.1);
            shrink(&mut shared, &mean_head, 0.1);
            shrink(&mut shared, &phase_head, cfg.spatial_init_scale);
            init_activation_bias(&mut shared, &logit_head, cfg.init_activation_logit);
            (Nets::Mono(MonoNets { trunk, logit_head, mean_head, phase_head, value_head, log_std }), vec![shared])
        }
        Variant::MoeHomo => {
            let mut actor = ParamStore::new("moe");
            let mut critic = ParamStore::new("critic");
            let h = cfg.mono_hidden;
            let input = dt + ds * k;
            let out = k + (k + 1) + k * m;
            let experts = [0, 1].map(|i| {
                let e = Mlp::new(&mut actor, &format!("expert{i}"), &[input, h, h, out], Activation::Tanh, Activation::Identity, rng);
                shrink_last(&mut actor, &e, 0.1);
                e
            });
            for e in &experts {
                let last = e.layers.last().expect("layers");
                // Phase outputs start smaller than the scheduling outputs.
                let w = actor.value_mut(last.w);
                for row in 2 * k + 1..out {
                    w.row_mut(row).iter_mut().for_each(|v| *v *= cfg.spatial_init_scale / 0.1);
                }
                let b = actor.value_mut(last.b);
                for (i, v) in b.data.iter_mut().enumerate() {
                    if i < k {
                        *v = cfg.init_activation_logit;
                    } else if i > 2 * k {
                        *v *= cfg.spatial_init_scale / 0.1;
                    }
                }
            }
            let gate = Dense::new(&mut actor, "gate", input, 2, rng);
            let log_std = actor.add("log_std", Tensor::filled(1, k + 1, cfg.init_log_std));
            let c = cfg.critic_hidden;
            let critic_net = Mlp::new(&mut critic, "critic", &[dt, c, c, 1], Activation::Tanh, Activation::Identity, rng);
            (Nets::Homo(HomoNets { experts, gate, log_std, critic: critic_net }), vec![actor, critic])
        }
    }
}

/// Recurrent state of the temporal expert for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentState {
    pub h: Tensor,
    pub c: Tensor,
}

impl RecurrentState {
    pub fn zeros(batch: usize, hidden: usize) -> Self {
        RecurrentState { h: Tensor::zeros(batch, hidden), c: Tensor::zeros(batch, hidden) }
    }
}

fn clamp_heads(tape: &mut Tape, logits: Var, log_std: Var) -> (Var, Var) {
    (tape.clamp(logits, -30.0, 30.0), tape.clamp(log_std, -5.0, 1.0))
}

impl HeteroNets {
    /// Temporal expert over a sequence of (B, D) inputs from `(h0, c0)`.
    /// Returns per-step heads and the final recurrent state variables.
    pub fn temporal_sequence(
        &self,
        tape: &mut Tape,
        inputs: &[Var],
        h0: Var,
        c0: Var,
    ) -> Result<(Vec<ScheduleHeads>, Var, Var)> {
        let g = group::TEMPORAL;
        let vars = self.lstm.bind(tape, g);
        let log_std = tape.param(g, self.log_std);
        let log_std = tape.clamp(log_std, -5.0, 1.0);
        let (mut h, mut c) = (h0, c0);
        let mut heads = Vec::with_capacity(inputs.len());
        for &x in inputs {
            (h, c) = self.lstm.step(tape, vars, x, h, c)?;
            let z = self.temporal_dense.forward(tape, g, h)?;
            let z = tape.tanh(z);
            let logits = self.logit_head.forward(tape, g, z)?;
            let logits = tape.clamp(logits, -30.0, 30.0);
            let means = self.mean_head.forward(tape, g, z)?;
            heads.push(ScheduleHeads { logits, means, log_std });
        }
        Ok((heads, h, c))
    }

    /// Spatial expert on (R, 4) per-vehicle rows; returns (R, M) raw phase
    /// offsets.
    pub fn spatial_raw(&self, tape: &mut Tape, rows: Var) -> Result<Var> {
        self.spatial.forward(tape, group::SPATIAL, rows)
    }

    pub fn value(&self, tape: &mut Tape, temporal: Var) -> Result<Var> {
        self.critic.forward(tape, group::CRITIC, temporal)
    }
}

/// Outputs of the flat (non-recurrent) variants for (B, D) inputs.
#[derive(Clone, Copy, Debug)]
pub struct FlatOutputs {
    pub heads: ScheduleHeads,
    /// (B, K * M) raw phase offsets.
    pub phase_raw: Var,
    /// (B, 1), present for the shared-trunk variant.
    pub value: Option<Var>,
    /// (B, 2) gate weights of the homogeneous mixture.
    pub gate: Option<Var>,
}

impl MonoNets {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<FlatOutputs> {
        let g = group::SHARED;
        let z = self.trunk.forward(tape, g, x)?;
        let logits = self.logit_head.forward(tape, g, z)?;
        let means = self.mean_head.forward(tape, g, z)?;
        let phase_raw = self.phase_head.forward(tape, g, z)?;
        let value = self.value_head.forward(tape, g, z)?;
        let log_std = tape.param(g, self.log_std);
        let (logits, log_std) = clamp_heads(tape, logits, log_std);
        Ok(FlatOutputs { heads: ScheduleHeads { logits, means, log_std }, phase_raw, value: Some(value), gate: None })
    }
}

impl HomoNets {
    pub fn forward(&self, tape: &mut Tape, x: Var, k: usize, m: usize) -> Result<FlatOutputs> {
        let g = group::HOMO_ACTOR;
        let rows = tape.shape(x).0;
        let gate_logits = self.gate.forward(tape, g, x)?;
        let gate = tape.softmax(gate_logits);
        let mut mixed: Option<Var> = None;
        for (i, e) in self.experts.iter().enumerate() {
            let out = e.forward(tape, g, x)?;
            let w = tape.slice_cols(gate, i, 1)?;
            let w = tape.broadcast_cols(w, k + (k + 1) + k * m)?;
            let part = tape.mul(out, w)?;
            mixed = Some(match mixed {
                Some(acc) => tape.add(acc, part)?,
                None => part,
            });
        }
        let mixed = mixed.expect("two experts");
        let logits = tape.slice_cols(mixed, 0, k)?;
        let means = tape.slice_cols(mixed, k, k + 1)?;
        let phase_raw = tape.slice_cols(mixed, 2 * k + 1, k * m)?;
        let log_std = tape.param(g, self.log_std);
        let (logits, log_std) = clamp_heads(tape, logits, log_std);
        debug_assert_eq!(tape.shape(logits).0, rows);
        Ok(FlatOutputs { heads: ScheduleHeads { logits, means, log_std }, phase_raw, value: None, gate: Some(gate) })
    }

    pub fn value(&self, tape: &mut Tape, temporal: Var) -> Result<Var> {
        self.critic.forward(tape, group::HOMO_CRITIC, temporal)
    }
}

/// Phase offsets `pi tanh(raw)` added to the matched-beam phases.
pub fn phase_offsets(tape: &mut Tape, raw: Var) -> Var {
    let t = tape.tanh(raw);
    tape.scale(t, PI)
}

/// Normalised beam gain `|h_hat^H v|^2 / (alpha^2 M)` towards the estimated
/// channel for each row of raw offsets. Because the beam is the matched beam
/// rotated by the offsets, the gain only depends on the offsets:
/// `|sum_m exp(j delta_m)|^2 / M^2`, in `[0, 1]`.
pub fn normalized_gain(tape: &mut Tape, raw: Var) -> Result<Var> {
    let m = tape.shape(raw).1 as f64;
    let delta = phase_offsets(tape, raw);
    let c = tape.cos(delta);
    let s = tape.sin(delta);
    let c = tape.sum_cols(c);
    let s = tape.sum_cols(s);
    let c2 = tape.square(c);
    let s2 = tape.square(s);
    let g = tape.add(c2, s2)?;
    Ok(tape.scale(g, 1.0 / (m * m)))
}

/// Checks a forward result for non-finite values.
pub fn ensure_finite(t: &Tensor, what: &str, stores: &[&ParamStore]) -> Result<()> {
    if t.is_finite() {
        return Ok(());
    }
    let norms: Vec<String> = stores.iter().map(|s| format!("{}={:.3e}", s.group, s.norm())).collect();
    Err(Error::NonFinite(format!("{what} is not finite (parameter norms: {})", norms.join(", "))))
}
